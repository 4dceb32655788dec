//! Moving object detection as semi-supervised node classification.
//!
//! Each segmented instance in a video frame becomes a graph node described
//! by optical-flow, texture and intensity features. Nodes are linked by a
//! k-nearest-neighbor graph and classified into background and foreground
//! by a two-layer graph convolutional network trained on a small labeled
//! subset.

pub mod background;
pub mod features;
pub mod gcn;
pub mod graph;
pub mod media_io;
pub mod pipeline;
pub mod protocol;
pub mod seed;
