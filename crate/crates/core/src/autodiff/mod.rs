//! Minimal reverse-mode differentiation for the codec networks.
//!
//! The vocabulary is deliberately closed: dense affine maps, ReLU,
//! concatenation, elementwise exponential, neighbor gather/sum, mean and max
//! reductions, products with a learned rotation, and a Chamfer loss head.
//! Everything is `f64` and evaluated in a fixed order, so forward and
//! backward passes are bit-reproducible.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckReport};
pub use mlp::{mlp_forward, Mlp};
pub use params::{Grads, Init, ParamSpec, ParamStore};
pub use tape::{rotation_from_6d, rotation_or_identity, Tape, Var};
pub use tensor::Tensor;
