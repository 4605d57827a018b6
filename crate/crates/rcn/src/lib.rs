//! Joint detection and tracking of small moving objects with a recurrent
//! correlational network: convolutional features, a convolutional recurrent cell,
//! correlation-based localization with search-window feedback, and a scoring head.

pub mod autodiff;
pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod localizer;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
