pub mod dataset;
pub mod mtt;
mod sample;
pub mod scene;

pub use dataset::{generate, load_dataset, write_dataset, GenSpec, Manifest};
pub use sample::{Sample, IGNORE_LABEL};
