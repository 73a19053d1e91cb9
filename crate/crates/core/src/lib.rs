pub mod align;
pub mod autodiff;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod metrics;
pub mod net;
pub mod pretrain;
pub mod ttt;
pub mod scene;
pub mod table;

pub use error::{Error, Result};
pub use geometry::{DepthMap, Intrinsics, PointMap, PoseSE3};
