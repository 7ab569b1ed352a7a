//! Posterior comparison: nearest-neighbour KL estimation and IQR ratios.

mod iqr;
mod kdtree;
mod kl;

pub use iqr::{column_iqrs, iqr, iqr_ratio_matrix, quantile_sorted, IqrMatrix};
pub use kdtree::{squared_distance, KdTree};
pub use kl::{kl_estimate, KlEstimate, DUPLICATE_EPSILON};
