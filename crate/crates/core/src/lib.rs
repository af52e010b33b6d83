//! Spike-driven video transformer engine: LIF/IntIF neuron dynamics, Hamming
//! attention, a layer-wise tube-masked video autoencoder, a spike-driven
//! segmentation head, surrogate-gradient BPTT training, and an analytical
//! AC/MAC energy-latency profiler.

pub mod blocks;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod masking;
pub mod metrics;
pub mod neuron;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod pretrain;
pub mod profiler;
pub mod seghead;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use error::{EngineError, Result};
