//! Cross-subject protocols, metrics, attribution and the synthetic corpus.

pub mod attribution;
pub mod metrics;
pub mod protocol;
pub mod split;
pub mod synth;

pub use attribution::{
    integrated_gradients, integrated_gradients_with, mean_attribution, Attribution,
};
pub use metrics::{
    accuracy, chance_band, confusion, confusion_counts, mean_std, roc_auc, spearman, Roc,
};
pub use protocol::{
    run_protocol, subject_ablation, AblationPoint, AblationReport, ContrastiveSummary, EvalConfig,
    EvalReport, FoldResult, Method, MethodReport, Prediction,
};
pub use split::{make_splits, Fold, Protocol, SplitPlan, TrialPartition};
pub use synth::{gen_synthetic, SynthSpec};
