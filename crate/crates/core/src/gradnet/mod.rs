//! Small-network differentiable computation: a recording tape, dense
//! networks, a squashed Gaussian policy head, an adaptive-moment optimizer and
//! delayed-copy tracking.

mod checkpoint;
mod mlp;
mod params;
mod policy;
mod tape;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use mlp::{softmax_rows, Activation, Mlp};
pub use params::{Adam, BoundParams, Param, ParamKind, ParamSet};
pub use policy::{SquashedGaussian, TapeSample, LOG_STD_MAX, LOG_STD_MIN};
pub use tape::{Gradients, Tape, Var};
