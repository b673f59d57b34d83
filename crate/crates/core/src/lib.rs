pub mod agents;
pub mod airc;
pub mod context;
pub mod error;
pub mod geometry;
pub mod guidelines;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod protocol;
pub mod sim;

pub use error::{BackendError, Error, Result};
