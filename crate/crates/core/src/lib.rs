//! Network-delay-aware load balancing among cooperating organizations.

// `!(x > 0.0)` is how NaN gets rejected; matrix loops read better indexed.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod central;
pub mod discrete;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod flow;
pub mod mine;
pub mod model;
pub mod scenario;
pub mod selfish;

pub use error::{Error, Result};
pub use exec::Execution;
pub use model::{LoadProfile, RelayState, Topology};
