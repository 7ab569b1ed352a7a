//! Conditional mixture density networks and Gaussian-mixture algebra.

mod mixture;
mod model;
mod persist;
mod train;

pub use mixture::{normalize_keep, GaussianMixture, WEIGHT_FLOOR};
pub use model::{Covariance, MdnArchitecture, MdnModel, Standardization};
pub use persist::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use train::{train, train_calls, TrainConfig, TrainReport};
