pub mod error;
pub mod grsbl;
pub mod harness;
pub mod lse2d;
pub mod numerics;
pub mod quantizer;
pub mod vsbl;

pub use error::{Error, Result};
