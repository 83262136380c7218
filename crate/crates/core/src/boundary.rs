//! Prototype range, adaptive margin, the open-set decision rule and
//! pseudo-negative sampling.
//!
//! The range `R_c` is the interpolated quantile of the positive distances at
//! level `1 - tau1`, so roughly a `1 - tau1` fraction of positives lie
//! inside it. The margin `M_c` is the quantile of the negative offsets
//! `d - R_c` at level `tau2`, clamped at zero, so roughly a `1 - tau2`
//! fraction of negatives lie beyond `R_c + M_c`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Instance, NUM_VIEWS};
use crate::encoder::ViewGaussian;
use crate::error::{GpamError, Result};
use crate::metric::{prototype_distance, DistanceForm, ViewWeights};
use crate::quantile::interpolated_quantile;

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 0.99;

/// Rejection attempts allowed per pseudo-negative candidate.
pub const PNS_MAX_ATTEMPTS: usize = 50;

/// Quantile levels for range and margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileLevels {
    pub tau1: f64,
    pub tau2: f64,
}

impl Default for QuantileLevels {
    fn default() -> Self {
        Self {
            tau1: 0.1,
            tau2: 0.2,
        }
    }
}

impl QuantileLevels {
    pub fn clamp(&mut self) {
        self.tau1 = self.tau1.clamp(TAU_MIN, TAU_MAX);
        self.tau2 = self.tau2.clamp(TAU_MIN, TAU_MAX);
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(GpamError::Config(format!("{name}={t} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Acceptance radius and NOTA buffer of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub range: f64,
    pub margin: f64,
}

impl Boundary {
    pub fn outer(&self) -> f64 {
        self.range + self.margin
    }
}

/// Everything needed to score an instance against one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub relation: String,
    pub gaussians: [ViewGaussian; NUM_VIEWS],
    pub weights: ViewWeights,
    pub boundary: Boundary,
}

impl ClassPrototype {
    pub fn distance<V: AsRef<[f64]>>(
        &self,
        views: &[V; NUM_VIEWS],
        form: DistanceForm,
    ) -> Result<f64> {
        prototype_distance(views, &self.gaussians, &self.weights, form)
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.boundary;
        if !(b.range >= 0.0 && b.margin >= 0.0 && b.range.is_finite() && b.margin.is_finite()) {
            return Err(GpamError::Numeric(format!(
                "class {}: invalid boundary {b:?}",
                self.relation
            )));
        }
        self.weights.validate()?;
        self.gaussians.iter().try_for_each(ViewGaussian::validate)
    }
}

fn check_distances(xs: &[f64], what: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(GpamError::Input(format!("no {what} distances")));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(GpamError::Numeric(format!("non-finite {what} distance")));
    }
    Ok(())
}

/// `R_c`: quantile of the positive distances at level `1 - tau1`.
pub fn compute_range(positive: &[f64], tau1: f64) -> Result<f64> {
    check_distances(positive, "positive")?;
    Ok(interpolated_quantile(positive, 1.0 - tau1).expect("non-empty"))
}

/// Margin before the zero clamp: quantile of `d - R_c` at level `tau2`.
pub fn raw_margin(negative: &[f64], range: f64, tau2: f64) -> Result<f64> {
    check_distances(negative, "negative")?;
    let offsets: Vec<f64> = negative.iter().map(|d| d - range).collect();
    Ok(interpolated_quantile(&offsets, tau2).expect("non-empty"))
}

/// `M_c`: [`raw_margin`] clamped below at zero.
pub fn compute_margin(negative: &[f64], range: f64, tau2: f64) -> Result<f64> {
    Ok(raw_margin(negative, range, tau2)?.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    Known(usize),
    Nota,
}

/// What happens to an instance whose distance falls in `(R_c, R_c + M_c]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandPolicy {
    /// Membership requires `d <= R_c`; the band is NOTA.
    #[default]
    Reject,
    /// If no class accepts within its range, the nearest class whose outer
    /// boundary `R_c + M_c` contains the instance is chosen.
    Accept,
}

fn argmin_where(distances: &[f64], accept: impl Fn(usize, f64) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (c, &d) in distances.iter().enumerate() {
        if accept(c, d) && best.is_none_or(|b| d < distances[b]) {
            best = Some(c);
        }
    }
    best
}

/// Open-set decision: the nearest class among those with `d <= R_c`
/// (lowest index on ties), otherwise NOTA.
pub fn classify(distances: &[f64], boundaries: &[Boundary], policy: BandPolicy) -> Prediction {
    assert_eq!(distances.len(), boundaries.len(), "one distance per class");
    if let Some(c) = argmin_where(distances, |c, d| d <= boundaries[c].range) {
        return Prediction::Known(c);
    }
    if policy == BandPolicy::Accept {
        if let Some(c) = argmin_where(distances, |c, d| d <= boundaries[c].outer()) {
            return Prediction::Known(c);
        }
    }
    Prediction::Nota
}

/// A synthetic point with one vector per view.
pub type ViewPoint = [Vec<f64>; NUM_VIEWS];

/// Number of pseudo-negatives selected per episode: `ceil(ratio * N * K)`.
pub fn pns_count(ratio: f64, ways: usize, shots: usize) -> usize {
    let x = ratio * (ways * shots) as f64;
    // Guard against products such as 0.2 * 6 = 1.2000000000000002 vs exact integers.
    (x - 1e-9).ceil().max(0.0) as usize
}

fn outside_all(
    point: &ViewPoint,
    prototypes: &[ClassPrototype],
    form: DistanceForm,
) -> Result<bool> {
    for p in prototypes {
        if p.distance(point, form)? <= p.boundary.outer() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Draws `count` candidates by perturbing randomly chosen support instances
/// with isotropic noise of standard deviation `noise_scale * sqrt(mean R_c)`,
/// rejecting any candidate inside some class's outer boundary.
pub fn pns_candidates<R: Rng + ?Sized>(
    prototypes: &[ClassPrototype],
    support: &[&Instance],
    count: usize,
    noise_scale: f64,
    form: DistanceForm,
    rng: &mut R,
) -> Result<Vec<ViewPoint>> {
    if count == 0 {
        return Err(GpamError::Config("candidate pool size must be >= 1".into()));
    }
    if !(noise_scale > 0.0 && noise_scale.is_finite()) {
        return Err(GpamError::Config(format!(
            "noise_scale must be > 0, got {noise_scale}"
        )));
    }
    if support.is_empty() || prototypes.is_empty() {
        return Err(GpamError::Input(
            "pseudo-negatives need support and prototypes".into(),
        ));
    }
    let mean_range =
        prototypes.iter().map(|p| p.boundary.range).sum::<f64>() / prototypes.len() as f64;
    let std = noise_scale * mean_range.sqrt();
    let noise = Normal::new(0.0, std)
        .map_err(|e| GpamError::Numeric(format!("noise distribution: {e}")))?;

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut accepted = None;
        for _ in 0..PNS_MAX_ATTEMPTS {
            let anchor = support[rng.random_range(0..support.len())];
            let point: ViewPoint = std::array::from_fn(|j| {
                anchor.views[j]
                    .iter()
                    .map(|x| x + noise.sample(rng))
                    .collect()
            });
            if outside_all(&point, prototypes, form)? {
                accepted = Some(point);
                break;
            }
        }
        match accepted {
            Some(p) => out.push(p),
            None => {
                return Err(GpamError::Sampling(format!(
                    "no candidate outside every class boundary after {PNS_MAX_ATTEMPTS} attempts"
                )))
            }
        }
    }
    Ok(out)
}

/// Candidates with their selection probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoNegativeSet {
    pub points: Vec<ViewPoint>,
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Inverse of the summed range-normalised gaps `|d(p, c) - (R_c + M_c)| / R_c`.
/// `distances[p][c]` is candidate `p`'s distance to class `c`.
pub fn pns_scores(distances: &[Vec<f64>], boundaries: &[Boundary]) -> Result<Vec<f64>> {
    if let Some(b) = boundaries.iter().find(|b| !(b.range > 0.0)) {
        return Err(GpamError::Numeric(format!(
            "degenerate prototype: range {} must be > 0 for pseudo-negative scoring",
            b.range
        )));
    }
    distances
        .iter()
        .map(|row| {
            let gap: f64 = row
                .iter()
                .zip(boundaries)
                .map(|(d, b)| (d - b.outer()).abs() / b.range)
                .sum();
            let score = 1.0 / gap;
            if score.is_finite() {
                Ok(score)
            } else {
                Err(GpamError::Numeric(
                    "candidate lies exactly on every boundary".into(),
                ))
            }
        })
        .collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Scores candidates and turns the scores into a softmax selection distribution.
pub fn pns_probabilities(
    candidates: Vec<ViewPoint>,
    prototypes: &[ClassPrototype],
    form: DistanceForm,
) -> Result<PseudoNegativeSet> {
    if candidates.is_empty() {
        return Err(GpamError::Input("no pseudo-negative candidates".into()));
    }
    let distances = candidates
        .iter()
        .map(|p| prototypes.iter().map(|c| c.distance(p, form)).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let boundaries: Vec<Boundary> = prototypes.iter().map(|p| p.boundary).collect();
    let scores = pns_scores(&distances, &boundaries)?;
    let probabilities = softmax(&scores);
    Ok(PseudoNegativeSet {
        points: candidates,
        scores,
        probabilities,
    })
}

/// Draws `ceil(ratio * N * K)` indices without replacement, each draw
/// proportional to the remaining probabilities. Uses Gumbel-top-k on the
/// log-probabilities, so candidates whose probability underflowed to zero
/// are simply ranked last.
pub fn select_pns_indices<R: Rng + ?Sized>(
    probabilities: &[f64],
    ratio: f64,
    ways: usize,
    shots: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(GpamError::Config(format!(
            "pns ratio must be >= 0, got {ratio}"
        )));
    }
    let count = pns_count(ratio, ways, shots);
    if count > probabilities.len() {
        return Err(GpamError::Sampling(format!(
            "need {count} pseudo-negatives, pool holds {}",
            probabilities.len()
        )));
    }
    let mut keys: Vec<(f64, usize)> = probabilities
        .iter()
        .enumerate()
        .map(|(i, p)| {
            // uniform in the open interval (0, 1)
            let u = ((rng.random::<u64>() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
            (p.ln() - (-u.ln()).ln(), i)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(keys.into_iter().take(count).map(|(_, i)| i).collect())
}

pub fn select_pns<R: Rng + ?Sized>(
    pset: &PseudoNegativeSet,
    ratio: f64,
    ways: usize,
    shots: usize,
    rng: &mut R,
) -> Result<Vec<ViewPoint>> {
    Ok(
        select_pns_indices(&pset.probabilities, ratio, ways, shots, rng)?
            .into_iter()
            .map(|i| pset.points[i].clone())
            .collect(),
    )
}
