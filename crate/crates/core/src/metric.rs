//! Per-view Gaussian distances, adaptive view weights and the aggregated
//! prototype distance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_graph, AttentionParams, AttentionVars};
use crate::data::NUM_VIEWS;
use crate::encoder::{bind_attention, ViewGaussian};
use crate::error::{GpamError, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

/// How the per-view quadratic form weights squared deviations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceForm {
    /// `sum_i v_i (z_i - mu_i)^2`
    #[default]
    Variance,
    /// `sum_i (z_i - mu_i)^2 / v_i`
    InverseVariance,
    /// `sum_i (z_i - mu_i)^2`, i.e. `v = 1`.
    Euclidean,
}

/// How the four view distances are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// Self-attention over the view tokens, then a scoring head and softmax.
    #[default]
    Adaptive,
    /// Scoring head applied to the raw view tokens.
    NoSelfAttention,
    /// Uniform weights.
    Equal,
    /// All weight on the main view.
    MainOnly,
}

/// Attention block over the four `[mean; var]` tokens plus the scoring head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub attention: AttentionParams,
    /// `1 x 2d` scoring weights applied to every token.
    pub w_score: Matrix,
    pub b_score: Matrix,
}

impl MixtureParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attention: AttentionParams::init(2 * dim, heads, rng)?,
            w_score: Matrix::xavier(1, 2 * dim, rng),
            b_score: Matrix::zeros(1, 1),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MixtureVars {
    pub attention: AttentionVars,
    pub w_score: Var,
    pub b_score: Var,
}

pub(crate) fn bind_mixture(
    tape: &mut Tape,
    p: &MixtureParams,
    attention_trainable: bool,
    score_trainable: bool,
) -> MixtureVars {
    let attention = bind_attention(tape, &p.attention, attention_trainable);
    let mut leaf = |m: &Matrix| {
        if score_trainable {
            tape.param(m.clone())
        } else {
            tape.constant(m.clone())
        }
    };
    MixtureVars {
        attention,
        w_score: leaf(&p.w_score),
        b_score: leaf(&p.b_score),
    }
}

/// Normalised non-negative weights over the four views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewWeights(pub [f64; NUM_VIEWS]);

impl ViewWeights {
    pub fn uniform() -> Self {
        Self([1.0 / NUM_VIEWS as f64; NUM_VIEWS])
    }

    pub fn main_only() -> Self {
        Self([1.0, 0.0, 0.0, 0.0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(GpamError::Numeric(format!(
                "invalid view weights {:?}",
                self.0
            )));
        }
        let s: f64 = self.0.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(GpamError::Numeric(format!("view weights sum to {s}")));
        }
        Ok(())
    }
}

/// Graph form of the view weights: returns a `1 x 4` node.
pub fn mixture_graph(
    tape: &mut Tape,
    means: &[Var; NUM_VIEWS],
    vars: &[Var; NUM_VIEWS],
    p: &MixtureVars,
    mode: WeightMode,
) -> Var {
    match mode {
        WeightMode::Equal => {
            return tape.constant(Matrix::row_vector(ViewWeights::uniform().0.to_vec()))
        }
        WeightMode::MainOnly => {
            return tape.constant(Matrix::row_vector(ViewWeights::main_only().0.to_vec()))
        }
        WeightMode::Adaptive | WeightMode::NoSelfAttention => {}
    }
    let tokens: Vec<Var> = (0..NUM_VIEWS)
        .map(|j| tape.concat_cols(&[means[j], vars[j]]))
        .collect();
    let tokens = tape.concat_rows(&tokens);
    let hidden = if mode == WeightMode::Adaptive {
        attention_graph(tape, tokens, None, &p.attention)
    } else {
        tokens
    };
    let logits = tape.matmul_t(p.w_score, hidden);
    let logits = tape.add(logits, p.b_score);
    tape.softmax_rows(logits)
}

/// Graph form of the aggregated distance for `n` instances. `views[j]` is
/// the `n x d` matrix of view-`j` embeddings; returns an `n x 1` node.
pub fn distance_graph(
    tape: &mut Tape,
    views: &[Var; NUM_VIEWS],
    means: &[Var; NUM_VIEWS],
    vars: &[Var; NUM_VIEWS],
    weights: Var,
    form: DistanceForm,
) -> Var {
    let per_view: Vec<Var> = (0..NUM_VIEWS)
        .map(|j| {
            let diff = tape.sub(views[j], means[j]);
            let sq = tape.square(diff);
            let weighted = match form {
                DistanceForm::Variance => tape.mul(sq, vars[j]),
                DistanceForm::InverseVariance => {
                    let inv = tape.recip(vars[j]);
                    tape.mul(sq, inv)
                }
                DistanceForm::Euclidean => sq,
            };
            tape.row_sums(weighted)
        })
        .collect();
    let stacked = tape.concat_cols(&per_view);
    tape.matmul_t(stacked, weights)
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(GpamError::Numeric(format!("non-finite {what}")))
    }
}

/// `sum_i v_i (z_i - mu_i)^2`.
pub fn mahalanobis_view(z: &[f64], g: &ViewGaussian) -> Result<f64> {
    view_distance(z, g, DistanceForm::Variance)
}

pub fn view_distance(z: &[f64], g: &ViewGaussian, form: DistanceForm) -> Result<f64> {
    if z.len() != g.dim() {
        return Err(GpamError::Schema(format!(
            "instance has dim {}, Gaussian has dim {}",
            z.len(),
            g.dim()
        )));
    }
    check_finite(z, "instance component")?;
    g.validate()?;
    let d = z
        .iter()
        .zip(&g.mean)
        .zip(&g.var)
        .map(|((zi, mi), vi)| {
            let sq = (zi - mi) * (zi - mi);
            match form {
                DistanceForm::Variance => vi * sq,
                DistanceForm::InverseVariance => sq / vi,
                DistanceForm::Euclidean => sq,
            }
        })
        .sum();
    Ok(d)
}

/// Adaptive view weights from the four view Gaussians of one class.
pub fn mixture_weights(
    gaussians: &[ViewGaussian; NUM_VIEWS],
    params: &MixtureParams,
) -> Result<ViewWeights> {
    mixture_weights_with(gaussians, params, WeightMode::Adaptive)
}

pub fn mixture_weights_with(
    gaussians: &[ViewGaussian; NUM_VIEWS],
    params: &MixtureParams,
    mode: WeightMode,
) -> Result<ViewWeights> {
    let dim = params.w_score.cols / 2;
    for g in gaussians {
        g.validate()?;
        if g.dim() != dim {
            return Err(GpamError::Schema(format!(
                "mixture expects dimension {dim}"
            )));
        }
    }
    let mut tape = Tape::new();
    let vars = bind_mixture(&mut tape, params, false, false);
    let means =
        std::array::from_fn(|j| tape.constant(Matrix::row_vector(gaussians[j].mean.clone())));
    let variances =
        std::array::from_fn(|j| tape.constant(Matrix::row_vector(gaussians[j].var.clone())));
    let w = mixture_graph(&mut tape, &means, &variances, &vars, mode);
    let v = tape.value(w);
    check_finite(&v.data, "view weights")?;
    Ok(ViewWeights(std::array::from_fn(|j| v.data[j])))
}

/// `w^T [d^m; d^h; d^t; d^c]` for one instance.
pub fn prototype_distance<V: AsRef<[f64]>>(
    views: &[V; NUM_VIEWS],
    gaussians: &[ViewGaussian; NUM_VIEWS],
    weights: &ViewWeights,
    form: DistanceForm,
) -> Result<f64> {
    let mut total = 0.0;
    for j in 0..NUM_VIEWS {
        total += weights.0[j] * view_distance(views[j].as_ref(), &gaussians[j], form)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(mean: Vec<f64>, var: Vec<f64>) -> ViewGaussian {
        ViewGaussian::new(mean, var).unwrap()
    }

    #[test]
    fn view_distance_fixtures() {
        assert_eq!(
            mahalanobis_view(&[1.0, 2.0], &g(vec![0.0, 0.0], vec![1.0, 1.0])).unwrap(),
            5.0
        );
        assert_eq!(
            mahalanobis_view(&[0.3, 0.1], &g(vec![0.3, 0.1], vec![2.0, 7.0])).unwrap(),
            0.0
        );
        assert_eq!(
            mahalanobis_view(&[2.0, 0.0], &g(vec![0.0, 0.0], vec![0.25, 4.0])).unwrap(),
            1.0
        );
        assert_eq!(
            view_distance(
                &[2.0, 0.0],
                &g(vec![0.0, 0.0], vec![0.25, 4.0]),
                DistanceForm::InverseVariance
            )
            .unwrap(),
            16.0
        );
        assert!(matches!(
            mahalanobis_view(&[f64::NAN, 0.0], &g(vec![0.0, 0.0], vec![1.0, 1.0])),
            Err(GpamError::Numeric(_))
        ));
    }

    #[test]
    fn identical_tokens_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MixtureParams::init(3, 2, &mut rng).unwrap();
        let tok = g(vec![0.3, -1.0, 2.0], vec![0.5, 1.5, 0.2]);
        let gs = [tok.clone(), tok.clone(), tok.clone(), tok];
        let w = mixture_weights(&gs, &p).unwrap();
        assert_eq!(w, ViewWeights::uniform());
    }

    #[test]
    fn zero_score_head_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = MixtureParams::init(2, 2, &mut rng).unwrap();
        p.w_score = Matrix::zeros(1, 4);
        let gs = [
            g(vec![1.0, 2.0], vec![1.0, 1.0]),
            g(vec![-1.0, 0.0], vec![0.1, 3.0]),
            g(vec![5.0, 2.0], vec![1.0, 9.0]),
            g(vec![0.0, 0.0], vec![2.0, 2.0]),
        ];
        assert_eq!(mixture_weights(&gs, &p).unwrap(), ViewWeights::uniform());
    }

    #[test]
    fn swapping_views_swaps_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MixtureParams::init(2, 2, &mut rng).unwrap();
        let gs = [
            g(vec![1.0, 2.0], vec![1.0, 1.0]),
            g(vec![-1.0, 0.0], vec![0.1, 3.0]),
            g(vec![5.0, 2.0], vec![1.0, 9.0]),
            g(vec![0.0, 0.0], vec![2.0, 2.0]),
        ];
        let w = mixture_weights(&gs, &p).unwrap();
        let swapped = [gs[2].clone(), gs[1].clone(), gs[0].clone(), gs[3].clone()];
        let ws = mixture_weights(&swapped, &p).unwrap();
        for (a, b) in [(0, 2), (1, 1), (2, 0), (3, 3)] {
            assert!((w.0[a] - ws.0[b]).abs() < 1e-12);
        }
        w.validate().unwrap();
    }

    #[test]
    fn prototype_distance_fixtures() {
        let z = [vec![1.0], vec![0.0], vec![0.0], vec![0.0]];
        let gs = [
            g(vec![0.0], vec![1.0]),
            g(vec![std::f64::consts::SQRT_2], vec![1.0]),
            g(vec![3f64.sqrt()], vec![1.0]),
            g(vec![2.0], vec![1.0]),
        ];
        let dm =
            prototype_distance(&z, &gs, &ViewWeights::main_only(), DistanceForm::Variance).unwrap();
        assert_eq!(dm, 1.0);
        let avg =
            prototype_distance(&z, &gs, &ViewWeights::uniform(), DistanceForm::Variance).unwrap();
        assert!((avg - 2.5).abs() < 1e-12);
        let same = [
            g(vec![0.0], vec![4.0]),
            g(vec![2.0], vec![1.0]),
            g(vec![2.0], vec![1.0]),
            g(vec![2.0], vec![1.0]),
        ];
        let w = ViewWeights([0.1, 0.2, 0.3, 0.4]);
        let c = prototype_distance(&z, &same, &w, DistanceForm::Variance).unwrap();
        assert!((c - 4.0).abs() < 1e-12);
    }

    #[test]
    fn graph_distance_matches_plain_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gs: [ViewGaussian; 4] = std::array::from_fn(|_| {
            let m = Matrix::normal(1, 3, 1.0, &mut rng).data;
            let v = Matrix::normal(1, 3, 1.0, &mut rng)
                .data
                .iter()
                .map(|x: &f64| x.abs() + 0.1)
                .collect();
            g(m, v)
        });
        let w = ViewWeights([0.1, 0.2, 0.3, 0.4]);
        let zs: Vec<[Vec<f64>; 4]> = (0..5)
            .map(|_| std::array::from_fn(|_| Matrix::normal(1, 3, 2.0, &mut rng).data))
            .collect();
        for form in [
            DistanceForm::Variance,
            DistanceForm::InverseVariance,
            DistanceForm::Euclidean,
        ] {
            let mut t = Tape::new();
            let views = std::array::from_fn(|j| {
                t.constant(Matrix::from_rows(
                    &zs.iter().map(|z| z[j].clone()).collect::<Vec<_>>(),
                ))
            });
            let means = std::array::from_fn(|j| t.constant(Matrix::row_vector(gs[j].mean.clone())));
            let vars = std::array::from_fn(|j| t.constant(Matrix::row_vector(gs[j].var.clone())));
            let wv = t.constant(Matrix::row_vector(w.0.to_vec()));
            let d = distance_graph(&mut t, &views, &means, &vars, wv, form);
            for (i, z) in zs.iter().enumerate() {
                let plain = prototype_distance(z, &gs, &w, form).unwrap();
                assert!((t.value(d).data[i] - plain).abs() < 1e-12);
            }
        }
    }
}
