//! Small reverse-mode differentiation engine over dense `f64` matrices, the
//! bounded-output MLP autoencoder built on it, and Adam.

mod adam;
mod mlp;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use mlp::{Autoencoder, AutoencoderConfig};
pub use tape::{BackwardFn, Tape, Tensor, Var};
