//! Synthetic volumes, aligned crops, augmentation, tokenisation and masking.

pub mod augment;
pub mod crops;
pub mod mask;
pub mod patch;
pub mod phantom;
pub mod views;
pub mod volume;

pub use augment::{augment_strong, AugmentationSpec, StrongAug};
pub use crops::{sample_aligned_crops, CropPair};
pub use mask::{mask_random, MaskSpec};
pub use patch::{normalize_targets, patchify, unpatchify, PatchGrid};
pub use phantom::{generate_instance, generate_phantom, PhantomConfig};
pub use views::{build_bundle, ViewBundle};
pub use volume::Volume;
