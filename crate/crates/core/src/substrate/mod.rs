//! Network components with exact reverse-mode parameter gradients.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod net;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, grad_check_report, GradCheckInput, GradCheckReport};
pub use net::{AttentionRecord, DenoiserNet, NetConfig, ResolvedNet, Sample, ADAPTER_TARGETS, CROSS_ATTN_LAYER};
pub use tensor::{Gradients, Mat, ParamStore, ParamTensor};
