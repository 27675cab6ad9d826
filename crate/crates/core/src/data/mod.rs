//! Feature and prototype files, the task manifest, and the synthetic
//! sequence generator.

pub mod format;
pub mod manifest;
pub mod synth;

pub use format::{
    read_prototypes, read_slide_features, write_prototypes, write_slide_features, PrototypeFile, SlideLabels,
};
pub use manifest::{load_manifest, FeatureDims, Manifest, ManifestFile, SlideEntry, Split, TaskEntry, TaskPrototypes};
pub use synth::{synth_sequence, SynthOutput, SyntheticSpec, MANIFEST_FILE, PROTOTYPE_FILE};
