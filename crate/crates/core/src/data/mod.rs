//! Clip-level feature datasets: records, synthetic generation, split
//! curation, batching and the on-disk feature store.

mod batch;
mod split;
mod store;
mod synthetic;

pub use batch::{batch_composition, batch_iter, BatchComposition};
pub use split::{make_split, validation_split, SplitManifest, SplitMode, SplitSpec};
pub use store::{read_feature_store, write_feature_store, STORE_MAGIC};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{CirError, Result};
use crate::ndmath::Tensor;
use serde::{Deserialize, Serialize};

/// `(scenario, location)` pair a clip was captured in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Domain {
    pub scenario: u32,
    pub location: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub clip_id: String,
    pub video_feat: Vec<f64>,
    pub text_feat: Vec<f64>,
    pub class_id: usize,
    pub scenario_id: u32,
    pub location_id: u32,
    /// Source video; clips of one video never straddle train and validation.
    pub video_id: String,
}

impl SampleRecord {
    pub fn domain(&self) -> Domain {
        Domain {
            scenario: self.scenario_id,
            location: self.location_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub video_dim: usize,
    pub text_dim: usize,
    pub num_classes: usize,
    pub num_scenarios: u32,
    pub num_locations: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<SampleRecord>,
}

/// Dense view of a set of records, ready for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub video: Tensor,
    pub text: Tensor,
    pub labels: Vec<usize>,
    pub domains: Vec<Domain>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Builds a batch directly from feature rows; domains default to `(0, 0)`.
    pub fn from_parts(video: Tensor, text: Tensor, labels: Vec<usize>, domains: Option<Vec<Domain>>) -> Result<Self> {
        let b = labels.len();
        if video.rows() != b || text.rows() != b {
            return Err(CirError::shape("batch", &[video.rows(), text.rows()], &[b]));
        }
        let domains = domains.unwrap_or_else(|| vec![Domain { scenario: 0, location: 0 }; b]);
        if domains.len() != b {
            return Err(CirError::shape("batch", &[domains.len()], &[b]));
        }
        Ok(Batch {
            ids: (0..b).collect(),
            video,
            text,
            labels,
            domains,
        })
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks every record against the header.
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.video_feat.len() != self.meta.video_dim || r.text_feat.len() != self.meta.text_dim {
                return Err(CirError::Consistency(format!(
                    "record {i} ({}) has widths {}/{}, header declares {}/{}",
                    r.clip_id,
                    r.video_feat.len(),
                    r.text_feat.len(),
                    self.meta.video_dim,
                    self.meta.text_dim
                )));
            }
            if r.class_id >= self.meta.num_classes
                || r.scenario_id >= self.meta.num_scenarios
                || r.location_id >= self.meta.num_locations
            {
                return Err(CirError::Consistency(format!(
                    "record {i} ({}) has ids outside the declared ranges",
                    r.clip_id
                )));
            }
        }
        Ok(())
    }

    pub fn batch(&self, ids: &[usize]) -> Result<Batch> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.records.len()) {
            return Err(CirError::Consistency(format!(
                "sample id {bad} out of range for {} records",
                self.records.len()
            )));
        }
        let (dv, dt) = (self.meta.video_dim, self.meta.text_dim);
        let mut video = Vec::with_capacity(ids.len() * dv);
        let mut text = Vec::with_capacity(ids.len() * dt);
        let mut labels = Vec::with_capacity(ids.len());
        let mut domains = Vec::with_capacity(ids.len());
        for &i in ids {
            let r = &self.records[i];
            video.extend_from_slice(&r.video_feat);
            text.extend_from_slice(&r.text_feat);
            labels.push(r.class_id);
            domains.push(r.domain());
        }
        Ok(Batch {
            ids: ids.to_vec(),
            video: Tensor::matrix(ids.len(), dv, video)?,
            text: Tensor::matrix(ids.len(), dt, text)?,
            labels,
            domains,
        })
    }

    pub fn domains(&self) -> impl Iterator<Item = Domain> + '_ {
        self.records.iter().map(SampleRecord::domain)
    }
}
