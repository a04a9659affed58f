//! Synthetic plate generation: plate strings, rendering, augmentation and
//! annotated datasets.

pub mod augment;
pub mod dataset;
pub mod font;
pub mod format;
pub mod render;

pub use augment::{augment, augment_with, AugmentConfig, AugmentParams, Warp};
pub use dataset::{
    generate_dataset, read_manifest, CharAnnotation, DatasetConfig, Manifest, ManifestHeader,
    Split, SynthRecord, MANIFEST_FILE, MANIFEST_FORMAT, MANIFEST_VERSION,
};
pub use font::StrokeFont;
pub use format::{generate_plate_string, GroupKind, PlateFormat, PlateGroup, LETTERS};
pub use render::{render_plate, RenderStyle, Spectrum};

/// Derives an independent per-record seed (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
