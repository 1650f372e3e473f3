//! Affine-coupling normalizing flows.
//!
//! `z = f(w)`: inputs are first standardized per dimension, then pass through
//! `K` coupling layers whose masks alternate between the leading `⌊D/2⌋`
//! coordinates and the rest. The scale network output is bounded to
//! `[-3, 3]` before exponentiation.

mod coupling;
mod model;
mod net;
pub mod tape;
mod train;

/// `tanh` through a single `exp`; agrees with `f64::tanh` to a few ulp and
/// is markedly cheaper in the inner loops.
#[inline]
pub(crate) fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub use coupling::{CouplingLayer, SCALE_BOUND};
pub use model::{Flow, FlowShape, LN_2PI};
pub use net::{Dense, Mlp};
pub use train::{
    dequantize, dequantize_with, loss_and_gradient, loss_csv, objective, train, write_loss_csv, EpochLoss, FrobeniusMode,
    LossParts, TrainConfig,
};
