//! Gaussian-cluster datasets with a known ground truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, Instance, NUM_VIEWS};
use crate::error::{GpamError, Result};

const MAX_CENTER_ATTEMPTS: usize = 10_000;

/// Parameters of a synthetic multi-view dataset.
///
/// Relation `r`'s view-`j` vectors are drawn from an isotropic Gaussian
/// centred at a per-(relation, view) centre with standard deviation
/// `sigma / informativeness[j]`. A view with informativeness 0 carries no
/// class signal: it is drawn from `N(0, sigma^2)` for every relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub relations: usize,
    pub dim: usize,
    /// Standard deviation of the centre coordinates.
    pub center_scale: f64,
    /// Within-cluster standard deviation.
    pub sigma: f64,
    pub informativeness: [f64; NUM_VIEWS],
    pub instances_per_relation: usize,
    /// Minimum Euclidean distance between two centres of the same view, in
    /// units of `sigma`. Zero disables the constraint.
    #[serde(default)]
    pub min_center_spacing: f64,
    /// The last `validation_relations` relations form the validation split.
    #[serde(default)]
    pub validation_relations: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            relations: 20,
            dim: 16,
            center_scale: 4.0,
            sigma: 1.0,
            informativeness: [1.0; NUM_VIEWS],
            instances_per_relation: 50,
            min_center_spacing: 0.0,
            validation_relations: 10,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(GpamError::Config(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if self.dim == 0 || self.relations == 0 || self.instances_per_relation == 0 {
            return Err(GpamError::Config(
                "dim, relations and instances_per_relation must be positive".into(),
            ));
        }
        if !(self.center_scale >= 0.0 && self.center_scale.is_finite()) {
            return Err(GpamError::Config(
                "center_scale must be finite and >= 0".into(),
            ));
        }
        if self
            .informativeness
            .iter()
            .any(|m| !m.is_finite() || *m < 0.0)
        {
            return Err(GpamError::Config(
                "informativeness multipliers must be finite and >= 0".into(),
            ));
        }
        if self.informativeness.iter().all(|m| *m == 0.0) {
            return Err(GpamError::Config(
                "all views have zero informativeness: no class signal".into(),
            ));
        }
        if !(self.min_center_spacing >= 0.0 && self.min_center_spacing.is_finite()) {
            return Err(GpamError::Config(
                "min_center_spacing must be finite and >= 0".into(),
            ));
        }
        if self.validation_relations > self.relations {
            return Err(GpamError::Config(
                "validation_relations exceeds relations".into(),
            ));
        }
        Ok(())
    }

    pub fn relation_name(r: usize) -> String {
        format!("R{r:03}")
    }
}

/// A generated dataset plus the centres it was drawn around.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// `centers[r][j]` is relation `r`'s centre for view `j`.
    pub centers: Vec<[Vec<f64>; NUM_VIEWS]>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let center_dist = Normal::new(0.0, spec.center_scale).expect("validated scale");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let min_sq = (spec.min_center_spacing * spec.sigma).powi(2);

    let mut centers: Vec<[Vec<f64>; NUM_VIEWS]> = Vec::with_capacity(spec.relations);
    for r in 0..spec.relations {
        let mut views: [Vec<f64>; NUM_VIEWS] = Default::default();
        for (j, slot) in views.iter_mut().enumerate() {
            if spec.informativeness[j] == 0.0 {
                *slot = vec![0.0; spec.dim];
                continue;
            }
            let mut attempts = 0;
            *slot = loop {
                let c: Vec<f64> = (0..spec.dim)
                    .map(|_| center_dist.sample(&mut rng))
                    .collect();
                let far_enough = centers[..r]
                    .iter()
                    .all(|prev| squared_distance(&prev[j], &c) >= min_sq);
                if far_enough {
                    break c;
                }
                attempts += 1;
                if attempts >= MAX_CENTER_ATTEMPTS {
                    return Err(GpamError::Config(format!(
                        "could not place {} centres {} sigma apart; raise center_scale",
                        spec.relations, spec.min_center_spacing
                    )));
                }
            };
        }
        centers.push(views);
    }

    let mut instances = Vec::with_capacity(spec.relations * spec.instances_per_relation);
    for (r, center) in centers.iter().enumerate() {
        let label = SyntheticSpec::relation_name(r);
        for i in 0..spec.instances_per_relation {
            let mut views: [Vec<f64>; NUM_VIEWS] = Default::default();
            for (j, slot) in views.iter_mut().enumerate() {
                let m = spec.informativeness[j];
                let std = if m == 0.0 { spec.sigma } else { spec.sigma / m };
                *slot = center[j]
                    .iter()
                    .map(|c| c + std * unit.sample(&mut rng))
                    .collect();
            }
            instances.push(Instance::new(
                format!("{label}-{i:04}"),
                label.clone(),
                views,
            ));
        }
    }

    let manifest = DatasetManifest::from_instances(spec.dim, &instances);
    let mut dataset = Dataset {
        manifest,
        instances,
    };
    dataset.assign_validation_tail(spec.validation_relations)?;
    Ok(SyntheticDataset { dataset, centers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_rejected() {
        let spec = SyntheticSpec {
            sigma: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic(&spec),
            Err(GpamError::Config(_))
        ));
    }

    #[test]
    fn all_zero_informativeness_is_rejected() {
        let spec = SyntheticSpec {
            informativeness: [0.0; 4],
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic(&spec),
            Err(GpamError::Config(_))
        ));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SyntheticSpec {
            seed: 11,
            ..Default::default()
        };
        assert_eq!(
            generate_synthetic(&spec).unwrap(),
            generate_synthetic(&spec).unwrap()
        );
    }

    #[test]
    fn spacing_constraint_holds() {
        let spec = SyntheticSpec {
            relations: 10,
            min_center_spacing: 8.0,
            validation_relations: 0,
            ..Default::default()
        };
        let s = generate_synthetic(&spec).unwrap();
        for j in 0..NUM_VIEWS {
            for a in 0..10 {
                for b in 0..a {
                    assert!(squared_distance(&s.centers[a][j], &s.centers[b][j]) >= 64.0);
                }
            }
        }
    }

    #[test]
    fn relation_means_approach_centers() {
        // 3-sigma bound on the sample mean of 50 draws, per coordinate.
        let spec = SyntheticSpec {
            relations: 10,
            instances_per_relation: 50,
            validation_relations: 0,
            seed: 3,
            ..Default::default()
        };
        let s = generate_synthetic(&spec).unwrap();
        let tol = 3.0 * spec.sigma / (50f64).sqrt();
        for (r, center) in s.centers.iter().enumerate() {
            let members: Vec<&Instance> = s
                .dataset
                .instances
                .iter()
                .filter(|i| i.label == SyntheticSpec::relation_name(r))
                .collect();
            assert_eq!(members.len(), 50);
            for k in 0..spec.dim {
                let mean = members.iter().map(|i| i.views[0][k]).sum::<f64>() / 50.0;
                assert!((mean - center[0][k]).abs() <= tol, "relation {r} coord {k}");
            }
        }
    }
}
