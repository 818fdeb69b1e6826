//! The four training views of one crop pair.

use super::augment::{augment_strong, AugmentationSpec, StrongAug};
use super::crops::CropPair;
use super::mask::{mask_random, MaskSpec};
use super::patch::{normalize_targets, patchify, PatchGrid};
use crate::error::Result;
use crate::seed::{self, tag};
use crate::tensor::Tensor;

/// Views `X_u^Q`, `X_w^Q`, `X_r^K`, `X_v^K` as token matrices.
///
/// The masked views carry the full token matrix of the crop together with
/// their mask; only visible rows are ever read by the online encoder.
#[derive(Clone, Debug)]
pub struct ViewBundle {
    pub q_tokens: Tensor,
    pub mask_u: MaskSpec,
    pub q_strong: Tensor,
    pub k_tokens: Tensor,
    pub mask_r: MaskSpec,
    pub k_strong: Tensor,
    /// Per-patch normalised reconstruction targets of Q and K.
    pub q_target: Tensor,
    pub k_target: Tensor,
}

/// The augmentation specs used for one bundle, derived from `seed`.
pub fn bundle_specs(seed: u64, mask_ratio: f64, extents: [usize; 3]) -> [AugmentationSpec; 4] {
    [
        AugmentationSpec::Mask {
            ratio: mask_ratio,
            seed: seed::derive(seed, &[tag::MASK, 0]),
        },
        AugmentationSpec::Strong(StrongAug::sample(seed::derive(seed, &[tag::AUGMENT, 0]), extents)),
        AugmentationSpec::Mask {
            ratio: mask_ratio,
            seed: seed::derive(seed, &[tag::MASK, 1]),
        },
        AugmentationSpec::Strong(StrongAug::sample(seed::derive(seed, &[tag::AUGMENT, 1]), extents)),
    ]
}

pub fn build_bundle(pair: &CropPair, grid: &PatchGrid, mask_ratio: f64, seed: u64) -> Result<ViewBundle> {
    let specs = bundle_specs(seed, mask_ratio, grid.volume);
    let mask = |s: &AugmentationSpec| match s {
        AugmentationSpec::Mask { ratio, seed } => mask_random(grid.n_tokens(), *ratio, *seed),
        AugmentationSpec::Strong(_) => unreachable!("mask slot holds a strong spec"),
    };
    let strong = |s: &AugmentationSpec, v| match s {
        AugmentationSpec::Strong(spec) => patchify(&augment_strong(v, spec)?, grid),
        AugmentationSpec::Mask { .. } => unreachable!("strong slot holds a mask spec"),
    };
    let q_tokens = patchify(&pair.q, grid)?;
    let k_tokens = patchify(&pair.k, grid)?;
    Ok(ViewBundle {
        q_target: normalize_targets(&q_tokens),
        k_target: normalize_targets(&k_tokens),
        mask_u: mask(&specs[0])?,
        q_strong: strong(&specs[1], &pair.q)?,
        mask_r: mask(&specs[2])?,
        k_strong: strong(&specs[3], &pair.k)?,
        q_tokens,
        k_tokens,
    })
}
