//! Per-site representation capture and the MI / token-prediction
//! contribution analyses.

mod kmeans;
mod mi;
mod ratio;
mod tp;
mod trace;

pub use kmeans::{assign, minibatch_kmeans, ClusterModel, KMEANS_PASSES};
pub use mi::{discrete_mi, label_entropy, mi_curve, JointHistogram};
pub(crate) use ratio::csv_err;
pub use ratio::{contribution_ratio, site_names, spearman, ContributionReport, Metric};
pub use tp::{
    tp_accuracy, tp_centroids, tp_curve, tp_predict, TpCentroids, DESK_MIN_COUNT, PAPER_MIN_COUNT,
};
pub use trace::{collect_trace, ActivationTrace, PositionPolicy, TraceMeta, TRACE_FORMAT_VERSION};

/// Clustering and probing settings.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub k: usize,
    pub batch_size: usize,
    pub sample_budget: usize,
    pub min_count: usize,
}

impl AnalysisConfig {
    pub fn desk() -> Self {
        Self {
            k: 64,
            batch_size: 1024,
            sample_budget: 100_000,
            min_count: DESK_MIN_COUNT,
        }
    }

    pub fn paper() -> Self {
        Self {
            k: 2000,
            batch_size: 1024,
            sample_budget: 6_940_000,
            min_count: PAPER_MIN_COUNT,
        }
    }
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self::desk()
    }
}
