//! Membership inference for language models: per-sample scores (Con-ReCall
//! and baselines), ROC metrics, prefix-induced distribution shift, text
//! transforms and an experiment runner.

pub mod error;
pub mod experiments;
pub mod metrics;
pub mod providers;
pub mod scoring;
pub mod shift;
pub mod transforms;
pub mod types;

pub use error::{Error, Result};
pub use metrics::{evaluate, roc_auc, tpr_at_fpr, EvalReport};
pub use providers::{open_provider, Provider, ProviderUri};
pub use types::{Dataset, Label, Method, MethodScore, PrefixPool, Sample, TokenScores};
