//! Dynamic pyramid transformer: a causal decoder whose mid-stack layers
//! max-pool the visual token grid with a kernel chosen per input by a routed
//! pooling expert, plus the losses, FLOPs model, synthetic tasks and training
//! harness around it.

pub mod autodiff;
pub mod checkpoint;
pub mod dpe;
pub mod error;
pub mod flops;
pub mod harness;
pub mod objectives;
pub mod params;
pub mod synth;
pub mod transformer;

pub use error::{Error, Result};
