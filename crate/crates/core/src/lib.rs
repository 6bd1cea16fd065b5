//! Anchor-based ear ROI detection built from scratch.

pub mod cascade;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geom;
pub mod gradcheck;
pub mod match_loss;
pub mod net;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geom::{BBox, CenterBox, Detection, LevelId};
pub use tensor::{Graph, Real, Tensor, Var};
