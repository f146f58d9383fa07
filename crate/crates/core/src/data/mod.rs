//! Grounding samples: the planted-moment generator, feature-file ingestion
//! and the binary array container shared with checkpoints.

pub mod container;
pub mod dataset;
pub mod synth;

use crate::heads::{Interval, Moment};
use crate::tensor::Tensor;

pub use container::{ArrayData, ArrayFile, NamedArray};
pub use dataset::{load_feature_file, resample_clips, save_dataset};
pub use synth::{generate, generate_range, SynthConfig};

/// One video/query pair with its normalised ground-truth moment.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub sample_id: u64,
    /// `[T, d_v]` clip features.
    pub video: Tensor<f64>,
    /// `[L, d_q]` token features.
    pub query: Tensor<f64>,
    pub gt_moment: Moment,
    pub gt_interval: Interval,
    /// Planted concept, for generated samples.
    pub concept: Option<usize>,
}

impl GroundingSample {
    pub fn query_id(&self) -> String {
        self.sample_id.to_string()
    }
}
