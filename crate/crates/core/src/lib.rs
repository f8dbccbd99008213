//! Bi-directional learned video codec.
//!
//! Hierarchical B-frames are coded from two decoded references: motion
//! vector differences are compressed with motion-difference contexts from
//! B-frame references, each reference feature is turned into multi-scale
//! temporal contexts, and the frame is coded conditionally on those
//! contexts with a temporal prior in the entropy model.

pub mod bd_rate;
pub mod config;
pub mod context;
pub mod contextual;
pub mod error;
pub mod entropy;
pub mod gop;
pub mod metrics;
pub mod intra;
pub mod model;
pub mod motion;
pub mod motion_codec;
pub mod nn;
pub mod pipeline;
pub mod quant;
pub mod report;
pub mod synthetic;
pub mod training;
pub mod video_io;

pub use config::{CodecConfig, GopConfig, ModelConfig, TrainConfig};
pub use error::{CodecError, Result};
