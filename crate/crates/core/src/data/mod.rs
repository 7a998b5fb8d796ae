//! Dataset layout, loading, augmentation, patch tiling and synthetic fixtures.

pub mod augment;
pub mod patches;
pub mod png;
pub mod synthetic;
pub mod triplet;

pub use augment::{augment, AugmentConfig};
pub use patches::{partition_patches, reassemble_list, reassemble_patches, PatchGrid, VALID_GRIDS};
pub use synthetic::{make_synthetic_dataset, BackgroundMode, SyntheticSpec};
pub use triplet::{list_samples, load_triplet, sample_path, DepthTriplet, DEPTHS_DIR, DEPTHS_HQ_DIR, IMAGES_DIR, MASKS_DIR};
