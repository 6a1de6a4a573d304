//! Minimal CPU neural-network toolkit with hand-written backward passes.
//!
//! Activations are stored channel-major as `[C, N, H, W]` so that a 3×3
//! convolution over a whole batch is a single `[Cout, Cin·9] × [Cin·9, N·H·W]`
//! matrix product whose result is already in activation layout. Embedding
//! vectors use the same type with `h = w = 1`.
//!
//! Everything is generic over [`Real`] so gradient checks can run in `f64`
//! while training runs in `f32`.

mod adam;
mod checkpoint;
mod layers;
mod params;
mod tensor;
mod unet;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointError, CheckpointHeader};
pub use layers::{
    silu, silu_grad, sinusoidal_embedding, space_to_depth, depth_to_space, upsample2x,
    upsample2x_backward, Conv2d, Linear, ResBlock, ResCache,
};
pub use params::{Param, ParamId, ParamSet, ParamSetBuilder};
pub use tensor::{Real, Tensor};
pub use unet::{DecCache, EncCache, EncGrads, EncOut, UNet, UNetConfig};
