//! Minimal deterministic CPU computation engine: tensors, conv/tconv/
//! batch-norm/ReLU/max-pool layers with analytic gradients, the network
//! topology builder, AdamW with a one-cycle schedule, and the checkpoint
//! container.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod optim;
pub mod tensor;

pub use layers::{
    batchnorm2d_backward, batchnorm2d_forward, batchnorm2d_infer, conv2d_backward, conv2d_forward,
    maxpool2d_forward, relu_backward, relu_forward, tconv2d_backward, tconv2d_forward,
};
pub use network::{
    build_network, BlockSpec, HeadMaps, HeadSpec, LayerCost, NeckSpec, Network, NetworkSpec, Param,
};
pub use optim::{adamw_step, one_cycle_lr, AdamW};
pub use tensor::Tensor;
