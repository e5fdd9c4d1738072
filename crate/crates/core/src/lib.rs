pub mod alignment;
pub mod container;
pub mod diffmath;
pub mod error;
pub mod isa;
pub mod metrics;
pub mod model;
pub mod patch_select;
pub mod store;
pub mod unify;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
