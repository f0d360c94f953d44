//! Evaluation and sampling toolkit for stochastic human motion prediction.
//!
//! * [`motion`]: skeleton clips, window slicing, displacement, augmentation
//!   and the zero-velocity baseline.
//! * [`protocol`]: segment extraction presets, multimodal ground truth and
//!   label weights.
//! * [`metrics`]: ADE/FDE, MMADE/MMFDE, APD/APDE, CMD and Fréchet distance.
//! * [`diffusion`]: noise schedules, forward diffusion, DDIM sampling with
//!   early stopping, EMA.
//! * [`losses`]: latent, reconstruction and behavioral objectives evaluated
//!   against pluggable networks.
//! * [`io`]: the `BLFT` tensor container and JSON documents.
//! * [`pipeline`]: the file-to-file commands behind the `hmp-eval` binary.

pub mod diffusion;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod motion;
pub mod pipeline;
pub mod protocol;

pub use error::{Error, Result};
