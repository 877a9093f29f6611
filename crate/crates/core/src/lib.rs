//! Per-cell feature-map characterization for flagging unknown objects in the
//! output of one-stage detectors.

pub mod calibration;
pub mod clustering;
pub mod distance;
pub mod error;
pub mod eul;
pub mod fmap;
pub mod fusion;
pub mod logits;
pub mod metrics;
pub mod pipeline;
pub mod roi_align;
pub mod sdr;
pub mod synth;
pub mod tensor_io;

pub use distance::Distance;
pub use error::{Error, Result};
