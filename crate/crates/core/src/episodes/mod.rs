//! Metaset handling: ingestion, preprocessing, episode sampling, batch
//! padding and synthetic task generation.

mod batch;
pub mod manifest;
pub mod preprocess;
mod sampler;
pub mod synth;
mod types;

pub use batch::{pad_batch, PaddedBatch};
pub use manifest::{load_metaset, write_metaset};
pub use preprocess::{minmax_normalize, pool_to_ssf, subsample_fps, MinMax};
pub use sampler::{sample_episode, support_count, SamplerConfig};
pub use synth::{synth_metaset, SynthConfig};
pub use types::{Episode, Metaset, Role, Sample, TaskDataset, Trial};
