//! Single-view 3D reconstruction with a pixel-aligned implicit occupancy and
//! color field, trained in two stages through a differentiable point
//! splatting renderer.

// `!(x > 0.0)` also rejects NaN; graph arithmetic returns `Result`, so it
// cannot implement the operator traits.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod diffcalc;
pub mod evalkit;
pub mod par;
pub mod pifield;
pub mod pointrender;
pub mod scenegeom;
pub mod surfaceext;
pub mod synthgen;
pub mod trainpipe;

mod error;

pub use error::{Error, Result};
