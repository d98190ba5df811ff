//! Model files, IDX datasets and calibration-subset selection.

pub mod dataset;
pub mod idx;
pub mod manifest;

pub use dataset::{sample_indices, select_calibration, select_fraction, Dataset};
pub use idx::{read_idx, read_idx_labels};
pub use manifest::{load_model, load_model_with_meta, save_model, save_model_with_meta};
