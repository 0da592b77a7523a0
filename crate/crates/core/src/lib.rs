//! Spiking decision-feedback equalizer testbed for IM/DD optical links:
//! channel simulation, surrogate-gradient training with optional
//! quantization-aware training, bit-accurate fixed-point inference and
//! complexity-versus-BER design-space exploration.

pub mod channel;
pub mod dse;
pub mod equalizer;
pub mod error;
pub mod fxp;
pub mod harness;
pub mod lif;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
