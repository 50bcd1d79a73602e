//! Evaluation (AP at a fixed IoU, 3D and BEV), the NMS-vs-peak-extraction
//! benchmark, and heatmap rendering.

pub mod bench;
pub mod eval;
pub mod render;

pub use bench::{bench_postprocessing, BenchReport, OverlapProfile};
pub use eval::{evaluate_ap, ApResult, Interpolation, MetricKind};
pub use render::render_heatmap;
