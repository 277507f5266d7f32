//! File formats, model persistence and the dataset layout around
//! [`ofrnn_core`].

pub mod config;
pub mod dataset;
mod error;
pub mod flo;
pub mod model_io;
pub mod pgm;

pub use config::load_config;
pub use dataset::{read_dataset, read_subject, write_dataset, write_subject};
pub use error::{Error, Result};
pub use model_io::{load_model, save_model};
pub use ofrnn_core;
