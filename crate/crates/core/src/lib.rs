pub mod anchors;
pub mod cli;
pub mod data;
pub mod eval;
pub mod featconcat;
pub mod geometry;
pub mod net;
pub mod pipeline;
pub mod sampling;
pub mod scaling;
