//! Linear-interpolation empirical quantiles.
//!
//! For `n` sorted values the quantile at level `q` sits at position
//! `(n - 1) * q`, interpolating between the two neighbouring order statistics.

/// Where a level lands among the order statistics of `n` values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Knots {
    pub lo_rank: usize,
    pub hi_rank: usize,
    pub frac: f64,
}

pub fn knots(n: usize, level: f64) -> Knots {
    assert!(n > 0, "quantile of zero values");
    let q = level.clamp(0.0, 1.0);
    let pos = (n - 1) as f64 * q;
    let lo_rank = (pos.floor() as usize).min(n - 1);
    let hi_rank = (lo_rank + 1).min(n - 1);
    Knots {
        lo_rank,
        hi_rank,
        frac: pos - lo_rank as f64,
    }
}

/// Indices of `values` in ascending order; ties keep their input order.
pub fn ascending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    order
}

/// Interpolated quantile, or `None` for an empty slice.
pub fn interpolated_quantile(values: &[f64], level: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let order = ascending_order(values);
    let k = knots(values.len(), level);
    let lo = values[order[k.lo_rank]];
    let hi = values[order[k.hi_rank]];
    Some((1.0 - k.frac) * lo + k.frac * hi)
}
