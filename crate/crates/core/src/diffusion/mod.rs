//! Forward noising, base-model training and ancestral sampling.

pub mod data;
pub mod sample;
pub mod schedule;
pub mod train;

pub use data::{Attribute, Concept, ConceptDataset, DatasetSpec, LabeledImage, Split};
pub use sample::{sample, sample_batch, sample_with_capture, SampleRequest};
pub use schedule::{make_schedule, NoiseSchedule};
pub use train::{train_base, BaseTrainResult};
