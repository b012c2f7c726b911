//! Learned stand-in for the dispatch characteristic function.
//!
//! A small feed-forward network maps (operating conditions, coalition) to
//! emissions. Exact dispatch solves label the training data; once trained,
//! batched inference answers coalition queries orders of magnitude faster
//! than the underlying linear programs, which is what makes sampling-based
//! allocation affordable on long horizons.

mod data;
mod io;
mod net;

pub use data::{
    dataset_from_bytes, dataset_to_bytes, feature_count, generate_dataset, load_dataset,
    save_dataset, split_assignment, Dataset, DatasetMeta, Split,
};
pub use io::{load_model, model_from_bytes, model_hash, model_to_bytes, save_model};
pub use net::{
    evaluate_metrics, predict_batch, predict_features, train, EpochRecord, ModelMeta,
    SurrogateMetrics, SurrogateModel, TrainConfig,
};
