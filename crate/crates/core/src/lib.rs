//! Lightweight anchor-based object detection.
//!
//! The crate contains the layer kernels and graph executor for the Edge
//! YOLO detector, a static cost analyzer, post-processing (box decoding,
//! Soft-NMS, evaluation), anchor clustering, a small training stack, and the
//! edge-cloud cooperation protocol with its discrete-event simulator.

pub mod analyzer;
pub mod anchors;
pub mod edgecloud;
pub mod imaging;
pub mod netdef;
pub mod nn;
pub mod postprocess;
pub mod tensor;
pub mod training;

pub use anchors::AnchorSet;
pub use netdef::{HeadOutput, NetGraph};
pub use postprocess::{BBox, Detection};

pub use tensor::{Scalar, Shape, Tensor};
