//! Small tensor engine: layers with hand-written backward passes, Adam and
//! the `MEAC` checkpoint format.

pub mod checkpoint;
pub mod layers;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use layers::{Activation, BatchNorm2d, Conv2d, Dense, Layer, LayerSpec, Sequential};
pub use ops::{concat_channels, mse_loss, split_channels, upsample_backward, upsample_to};
pub use params::{adam_step, AdamConfig, Grads, ParamId, ParamStore};
pub use scalar::Real;
pub use tensor::Tensor4;
