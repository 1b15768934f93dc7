pub mod autodiff;
pub mod datagen;
pub mod distributions;
pub mod error;
pub mod flows_continuous;
pub mod flows_discrete;
pub mod linalg;
pub mod metrics;
pub mod networks;
pub mod objectives;
pub mod rank_analysis;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
