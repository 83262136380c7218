//! N-way K-shot episode sampling with a NOTA rate.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Instance;
use crate::error::{GpamError, Result};

/// Instances grouped by relation, in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePool {
    instances: Vec<Instance>,
    relations: Vec<(String, Vec<usize>)>,
}

impl InstancePool {
    pub fn new(instances: Vec<Instance>) -> Self {
        let mut relations: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, inst) in instances.iter().enumerate() {
            match relations.iter_mut().find(|(name, _)| *name == inst.label) {
                Some((_, members)) => members.push(i),
                None => relations.push((inst.label.clone(), vec![i])),
            }
        }
        Self {
            instances,
            relations,
        }
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn relation_names(&self) -> impl Iterator<Item = &str> {
        self.relations.iter().map(|(n, _)| n.as_str())
    }

    pub fn dim(&self) -> Option<usize> {
        self.instances.first().map(Instance::dim)
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// One meta-task: support, known queries and unknown (NOTA) queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub known_relations: Vec<String>,
    /// `support[c]` holds the K shots of `known_relations[c]`.
    pub support: Vec<Vec<Instance>>,
    pub query_known: Vec<Instance>,
    pub query_unknown: Vec<Instance>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.known_relations.len()
    }

    pub fn shots(&self) -> usize {
        self.support.first().map(Vec::len).unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.support[0][0].dim()
    }

    /// Index of `label` among the known relations.
    pub fn class_of(&self, label: &str) -> Option<usize> {
        self.known_relations.iter().position(|r| r == label)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ways();
        if n == 0 {
            return Err(GpamError::Input("episode has no known relations".into()));
        }
        if self.support.len() != n {
            return Err(GpamError::Input(
                "support groups do not match relations".into(),
            ));
        }
        let k = self.shots();
        if k == 0 {
            return Err(GpamError::Input("episode has no support shots".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for (c, group) in self.support.iter().enumerate() {
            if group.len() != k {
                return Err(GpamError::Input(format!(
                    "class {c} has {} shots, expected {k}",
                    group.len()
                )));
            }
            if group.iter().any(|i| i.label != self.known_relations[c]) {
                return Err(GpamError::Input(format!(
                    "class {c} support carries a foreign label"
                )));
            }
        }
        for q in &self.query_known {
            if self.class_of(&q.label).is_none() {
                return Err(GpamError::Input(format!(
                    "known query {} has unknown label",
                    q.id
                )));
            }
        }
        for q in &self.query_unknown {
            if self.class_of(&q.label).is_some() {
                return Err(GpamError::Input(format!(
                    "unknown query {} has a known label",
                    q.id
                )));
            }
        }
        let dim = self.dim();
        for inst in self.all_instances() {
            inst.validate()?;
            if inst.dim() != dim {
                return Err(GpamError::Schema(format!(
                    "instance {} has dim {}",
                    inst.id,
                    inst.dim()
                )));
            }
            if !ids.insert(inst.id.as_str()) {
                return Err(GpamError::Input(format!(
                    "instance {} appears twice",
                    inst.id
                )));
            }
        }
        Ok(())
    }

    pub fn all_instances(&self) -> impl Iterator<Item = &Instance> {
        self.support
            .iter()
            .flatten()
            .chain(&self.query_known)
            .chain(&self.query_unknown)
    }
}

/// Number of NOTA queries for `q_known` known queries at `nota_rate`,
/// rounding half up so that `nota_rate ~ |Qu| / (|Qk| + |Qu|)`.
pub fn nota_count(nota_rate: f64, q_known: usize) -> usize {
    if nota_rate <= 0.0 {
        return 0;
    }
    let exact = nota_rate / (1.0 - nota_rate) * q_known as f64;
    // The epsilon keeps representable halves (x.5 - ulp) rounding up.
    (exact + 0.5 + 1e-9).floor() as usize
}

/// Samples one episode without replacement.
pub fn sample_episode<R: Rng + ?Sized>(
    pool: &InstancePool,
    ways: usize,
    shots: usize,
    q_known: usize,
    nota_rate: f64,
    rng: &mut R,
) -> Result<Episode> {
    if ways == 0 || shots == 0 {
        return Err(GpamError::Config("ways and shots must be positive".into()));
    }
    if !(0.0..1.0).contains(&nota_rate) {
        return Err(GpamError::Config(format!(
            "nota_rate {nota_rate} outside [0, 1)"
        )));
    }
    let eligible: Vec<usize> = pool
        .relations
        .iter()
        .enumerate()
        .filter(|(_, (_, members))| members.len() >= shots)
        .map(|(i, _)| i)
        .collect();
    if eligible.len() < ways {
        return Err(GpamError::Sampling(format!(
            "need {ways} relations with >= {shots} instances, pool has {}",
            eligible.len()
        )));
    }
    let chosen: Vec<usize> = index::sample(rng, eligible.len(), ways)
        .into_iter()
        .map(|i| eligible[i])
        .collect();

    let mut support = Vec::with_capacity(ways);
    let mut remainder = Vec::new();
    for &rel in &chosen {
        let members = &pool.relations[rel].1;
        let perm = index::sample(rng, members.len(), members.len()).into_vec();
        support.push(
            perm[..shots]
                .iter()
                .map(|&p| pool.instances[members[p]].clone())
                .collect::<Vec<_>>(),
        );
        remainder.extend(perm[shots..].iter().map(|&p| members[p]));
    }
    if remainder.len() < q_known {
        return Err(GpamError::Sampling(format!(
            "need {q_known} known queries, only {} instances remain in the chosen relations",
            remainder.len()
        )));
    }
    let query_known = index::sample(rng, remainder.len(), q_known)
        .into_iter()
        .map(|i| pool.instances[remainder[i]].clone())
        .collect();

    let n_unknown = nota_count(nota_rate, q_known);
    let mut query_unknown = Vec::new();
    if n_unknown > 0 {
        let outside: Vec<usize> = pool
            .relations
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(i))
            .flat_map(|(_, (_, members))| members.iter().copied())
            .collect();
        if outside.len() < n_unknown {
            return Err(GpamError::Sampling(format!(
                "need {n_unknown} NOTA queries, only {} instances lie outside the episode relations",
                outside.len()
            )));
        }
        query_unknown = index::sample(rng, outside.len(), n_unknown)
            .into_iter()
            .map(|i| pool.instances[outside[i]].clone())
            .collect();
    }

    Ok(Episode {
        known_relations: chosen
            .iter()
            .map(|&r| pool.relations[r].0.clone())
            .collect(),
        support,
        query_known,
        query_unknown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(relations: usize, per: usize) -> InstancePool {
        let mut v = Vec::new();
        for r in 0..relations {
            for i in 0..per {
                let x = (r * 100 + i) as f64;
                v.push(Instance::new(
                    format!("r{r}-{i}"),
                    format!("r{r}"),
                    [vec![x], vec![x], vec![x], vec![x]],
                ));
            }
        }
        InstancePool::new(v)
    }

    #[test]
    fn nota_counts_follow_rate() {
        assert_eq!(nota_count(0.5, 10), 10);
        assert_eq!(nota_count(0.0, 10), 0);
        assert_eq!(nota_count(0.15, 17), 3);
        assert_eq!(nota_count(0.3, 10), 4);
    }

    #[test]
    fn five_way_one_shot_half_nota() {
        let p = pool(10, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(&p, 5, 1, 10, 0.5, &mut rng).unwrap();
        ep.validate().unwrap();
        assert_eq!(ep.query_unknown.len(), 10);
        assert_eq!(ep.query_known.len(), 10);
        let ep = sample_episode(&p, 5, 1, 10, 0.0, &mut rng).unwrap();
        assert!(ep.query_unknown.is_empty());
    }

    #[test]
    fn shortfalls_are_sampling_errors() {
        let p = pool(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_episode(&p, 6, 1, 1, 0.0, &mut rng),
            Err(GpamError::Sampling(_))
        ));
        assert!(matches!(
            sample_episode(&p, 5, 1, 1, 0.5, &mut rng),
            Err(GpamError::Sampling(_))
        ));
        assert!(matches!(
            sample_episode(&p, 5, 3, 1, 0.0, &mut rng),
            Err(GpamError::Sampling(_))
        ));
        assert!(matches!(
            sample_episode(&p, 5, 1, 1, 1.0, &mut rng),
            Err(GpamError::Config(_))
        ));
    }

    #[test]
    fn same_seed_same_episode() {
        let p = pool(8, 10);
        let a = sample_episode(&p, 3, 2, 4, 0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_episode(&p, 3, 2, 4, 0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
