//! Training and inference orchestration: configuration, the augmentation
//! chain, the train loop, and the NMS-free inference path.

pub mod augment;
pub mod config;
pub mod train;

pub use augment::augment;
pub use config::{AugmentSpec, TrainConfig};
pub use train::{forward_maps, infer, load_model, save_model, train, FrameMaps, TrainOutput};
