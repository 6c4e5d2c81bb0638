//! Metal-guided metal artifact reduction for 2D fan-beam CT.

pub mod config;
pub mod eval;
pub mod inr;
pub mod nmar;
pub mod neural;
pub mod phantom;
pub mod pipeline;
pub mod projector;
pub mod raster;
pub mod real;
pub mod residual;
