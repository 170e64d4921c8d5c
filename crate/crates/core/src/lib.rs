//! Two-stage, orientation-aware unsupervised domain adaptation for
//! three-class slice classification.
//!
//! Stage one routes slices to an orientation with a small dilated CNN
//! ([`separator`]). Stage two trains one classifier per orientation on a frozen
//! ResNet-50 trunk ([`backbone`]) and adapts it to an unlabeled target domain
//! with fixed pseudo-labels and Gaussian-kernel MMD alignment ([`adapt`]).

pub mod adapt;
pub mod backbone;
pub mod data;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod separator;

pub use error::{Error, Result};
