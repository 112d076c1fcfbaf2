//! Convolutional student network with hand-written backpropagation.

mod checkpoint;
pub mod config;
pub(crate) mod layers;
mod network;

pub use config::{BlockSpec, ConvSpec, ModelConfig, PRESETS};
pub use network::{ForwardCache, Mode, ModelParams};

#[cfg(test)]
mod tests;
