//! Probe classifier and metric suite.

pub mod classifier;
pub mod frechet;
pub mod metrics;

pub use classifier::{train_probe, train_probe_ungated, ProbeClassifier, ProbeConfig, ProbeReport, GATE_ACCURACY};
pub use frechet::{frechet_distance, COV_REGULARIZATION};
pub use metrics::{
    alignment_score, concept_similarity, evaluate, peak_memory_bytes, retain_accuracies, unlearn_accuracy, unlearning_curve, EvalContext,
    EvalSpec, Generated, MetricsReport, Prototypes, UnlearningCurve,
};
