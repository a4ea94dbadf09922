//! Image/mask ingestion, the offline augmentation recipe, scenario splits and
//! a synthetic dataset generator.

pub mod augment;
pub mod dataset;
pub mod folds;
pub mod image;
pub mod synth;

pub use augment::{augment, Augmentation, RECIPE};
pub use dataset::{
    batch_tensors, build_manifest, load_dataset, resize_pair, write_dataset, DatasetManifest, LoadedDataset,
    ManifestEntry, PairingReport, SamplePair,
};
pub use folds::{make_folds, scenario_split, write_folds, SampleRef, ScenarioSpec, Split, SplitRule};
pub use image::{read_image, read_mask, Image, Mask};
pub use synth::{synth_generate, SyntheticConfig};
