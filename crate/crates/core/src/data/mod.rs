//! Dataset types, manifests, stratified splitting, rotation augmentation and
//! the synthetic two-domain generator.

pub mod augment;
pub mod manifest;
pub mod split;
pub mod synth;
mod types;

pub use augment::{augment_rotations, DEFAULT_ANGLES};
pub use manifest::{load_manifest, DatasetManifest, ManifestEntry, Tally, MANIFEST_HEADER};
pub use split::split_source;
pub use synth::{generate_synthetic_dataset, render_dataset, Photometric, SynthConfig};
pub use types::*;
