//! Classification through text similarity, OA/AA/Kappa metrics,
//! classification maps, feature dumps and the ablation harness.

mod ablate;
mod classify;
mod features;
mod map;
mod metrics;

pub use ablate::{ablate, AblationAxis, AblationRow, AblationSetting};
pub use classify::{argmax, class_scores, class_text_embeddings, classify, predict};
pub use features::{dump_features, pca, FeatureDump, FeatureRow};
pub use map::{render_map, save_map};
pub use metrics::{metrics, MetricsReport};
