//! Instances, datasets and episodic sampling.

mod episode;
mod format;
mod hash_embed;
mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{GpamError, Result};

pub use episode::{nota_count, sample_episode, Episode, InstancePool};
pub use format::{
    load_embeddings, manifest_path, parse_embeddings, read_manifest, write_embeddings,
    write_manifest, FORMAT_MAGIC,
};
pub use hash_embed::{hash_embed_instance, hash_embed_text, TokenSpan};
pub use synthetic::{generate_synthetic, SyntheticDataset, SyntheticSpec};

/// Number of embedding views carried by every instance.
pub const NUM_VIEWS: usize = 4;

/// The four views, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    Main,
    Head,
    Tail,
    Context,
}

impl View {
    pub const ALL: [View; NUM_VIEWS] = [View::Main, View::Head, View::Tail, View::Context];

    pub fn index(self) -> usize {
        match self {
            View::Main => 0,
            View::Head => 1,
            View::Tail => 2,
            View::Context => 3,
        }
    }
}

/// Opaque text carried alongside an instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct InstanceMeta {
    pub head: Option<String>,
    pub tail: Option<String>,
    pub sentence: Option<String>,
}

/// One labelled example with its four view embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub label: String,
    pub views: [Vec<f64>; NUM_VIEWS],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<InstanceMeta>,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        label: impl Into<String>,
        views: [Vec<f64>; NUM_VIEWS],
    ) -> Self {
        Self {
            id: id.into(),
            label: label.into(),
            views,
            meta: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.views[0].len()
    }

    pub fn view(&self, v: View) -> &[f64] {
        &self.views[v.index()]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(GpamError::Schema(format!(
                "instance {}: empty view",
                self.id
            )));
        }
        for (j, v) in self.views.iter().enumerate() {
            if v.len() != d {
                return Err(GpamError::Schema(format!(
                    "instance {}: view {j} has {} components, expected {d}",
                    self.id,
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(GpamError::Data(format!(
                    "instance {}: non-finite component in view {j}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationEntry {
    pub name: String,
    pub count: usize,
    pub split: Split,
}

/// Summary of a dataset: dimension, relations and their split membership.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dim: usize,
    pub views: usize,
    pub relations: Vec<RelationEntry>,
}

impl DatasetManifest {
    /// Builds a manifest from instances, listing relations in first-seen order.
    /// Every relation starts in the training split.
    pub fn from_instances(dim: usize, instances: &[Instance]) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for inst in instances {
            let c = counts.entry(inst.label.as_str()).or_insert(0);
            if *c == 0 {
                order.push(inst.label.clone());
            }
            *c += 1;
        }
        let relations = order
            .into_iter()
            .map(|name| {
                let count = counts[name.as_str()];
                RelationEntry {
                    name,
                    count,
                    split: Split::Train,
                }
            })
            .collect();
        Self {
            dim,
            views: NUM_VIEWS,
            relations,
        }
    }

    pub fn relations_in(&self, split: Split) -> Vec<&str> {
        self.relations
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.name.as_str())
            .collect()
    }

    /// Train and validation relation sets must not overlap.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for r in &self.relations {
            if let Some(prev) = seen.insert(r.name.as_str(), r.split) {
                if prev != r.split {
                    return Err(GpamError::Schema(format!(
                        "relation {} assigned to both splits",
                        r.name
                    )));
                }
                return Err(GpamError::Schema(format!(
                    "relation {} listed twice",
                    r.name
                )));
            }
        }
        Ok(())
    }
}

/// A manifest plus its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub instances: Vec<Instance>,
}

impl Dataset {
    /// Instances whose relation belongs to `split`, in file order.
    pub fn split_instances(&self, split: Split) -> Vec<Instance> {
        let names: std::collections::BTreeSet<&str> =
            self.manifest.relations_in(split).into_iter().collect();
        self.instances
            .iter()
            .filter(|i| names.contains(i.label.as_str()))
            .cloned()
            .collect()
    }

    pub fn pool(&self, split: Split) -> InstancePool {
        InstancePool::new(self.split_instances(split))
    }

    /// Moves the last `count` relations (in manifest order) to the validation split.
    pub fn assign_validation_tail(&mut self, count: usize) -> Result<()> {
        let n = self.manifest.relations.len();
        if count > n {
            return Err(GpamError::Config(format!(
                "cannot hold out {count} of {n} relations"
            )));
        }
        for (i, r) in self.manifest.relations.iter_mut().enumerate() {
            r.split = if i >= n - count {
                Split::Validation
            } else {
                Split::Train
            };
        }
        Ok(())
    }
}
