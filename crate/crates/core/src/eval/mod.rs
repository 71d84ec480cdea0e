//! Metrics, the linear-probe harness, the ablation suite and [CLS]
//! attention export.

mod ablation;
mod attention;
mod layout;
mod metrics;
mod probe;

pub use ablation::{
    ablation_suite, descriptor_tasks, probe_model, q5_prompt, single_prompt, train_arm, AblationReport, Arm, ArmResult,
    NOISE_PROMPT, Q5_PROMPTED, Q5_UNPROMPTED, Q5_UNRELATED,
};
pub use attention::{extract_cls_attention, extract_cls_attention_with, render_svg, AtomWeight, AttnTrace, WordWeight};
pub use layout::layout_2d;
pub use metrics::{
    average_precision, base_rate, delta_ap, mae, mean_std, normalized_rmse, rmse, roc_auc, roc_auc_multi,
};
pub use probe::{
    linear_probe, lr_grid, read_task_csv, render_markdown, MetricReport, ProbeConfig, ProbeTask, TaskKind,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels hold a single class")]
    DegenerateLabels,
    #[error("no positive labels")]
    NoPositives,
    #[error("non-finite score")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid probe task: {0}")]
    Task(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Chem(#[from] crate::chem::ChemError),
    #[error(transparent)]
    Descriptor(#[from] crate::descriptors::DescriptorError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[cfg(test)]
mod tests;
