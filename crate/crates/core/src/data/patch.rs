//! Patch tokenisation.
//!
//! Tokens are numbered row-major over the patch grid (last axis fastest) and
//! the voxels of a token are listed row-major over the patch's local
//! coordinates, so row `t` of a token matrix holds patch `t` in the same
//! x-major order volumes use.

use std::ops::Range;

use super::volume::Volume;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TARGET_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub volume: [usize; 3],
    pub patch: [usize; 3],
    pub counts: [usize; 3],
}

impl PatchGrid {
    pub fn new(volume: [usize; 3], patch: [usize; 3]) -> Result<Self> {
        let mut counts = [0; 3];
        for a in 0..3 {
            if patch[a] == 0 || !volume[a].is_multiple_of(patch[a]) {
                return Err(Error::shape(format!(
                    "patch {patch:?} does not tile volume {volume:?}"
                )));
            }
            counts[a] = volume[a] / patch[a];
        }
        Ok(PatchGrid {
            volume,
            patch,
            counts,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch.iter().product()
    }

    pub fn token_coords(&self, t: usize) -> [usize; 3] {
        let [_, cy, cz] = self.counts;
        [t / (cy * cz), (t / cz) % cy, t % cz]
    }

    /// Voxel index ranges of token `t` along each axis.
    pub fn voxel_ranges(&self, t: usize) -> [Range<usize>; 3] {
        let c = self.token_coords(t);
        [0, 1, 2].map(|a| c[a] * self.patch[a]..(c[a] + 1) * self.patch[a])
    }

    /// For every token row and column of a token matrix, the flat voxel index.
    pub fn voxel_index_table(&self) -> Vec<usize> {
        let [_, ny, nz] = self.volume;
        let mut out = Vec::with_capacity(self.n_tokens() * self.patch_voxels());
        for t in 0..self.n_tokens() {
            let [rx, ry, rz] = self.voxel_ranges(t);
            for x in rx {
                for y in ry.clone() {
                    for z in rz.clone() {
                        out.push((x * ny + y) * nz + z);
                    }
                }
            }
        }
        out
    }
}

/// `N x voxels-per-patch` token matrix of a volume's intensities.
pub fn patchify(volume: &Volume, grid: &PatchGrid) -> Result<Tensor> {
    if volume.extents() != grid.volume {
        return Err(Error::shape(format!(
            "grid for {:?} applied to volume {:?}",
            grid.volume,
            volume.extents()
        )));
    }
    let data = grid
        .voxel_index_table()
        .into_iter()
        .map(|i| volume.intensity()[i])
        .collect();
    Tensor::new(vec![grid.n_tokens(), grid.patch_voxels()], data)
}

/// Inverse of [`patchify`] for the intensity grid.
pub fn unpatchify(tokens: &Tensor, grid: &PatchGrid) -> Result<Volume> {
    if tokens.shape() != [grid.n_tokens(), grid.patch_voxels()] {
        return Err(Error::shape(format!(
            "token matrix {:?} for grid with {} tokens of {} voxels",
            tokens.shape(),
            grid.n_tokens(),
            grid.patch_voxels()
        )));
    }
    let mut intensity = vec![0.0; grid.volume.iter().product()];
    for (k, i) in grid.voxel_index_table().into_iter().enumerate() {
        intensity[i] = tokens.data()[k];
    }
    Volume::new(grid.volume, intensity, None)
}

/// Standardises each row to zero mean and unit (population) variance.
pub fn normalize_targets(tokens: &Tensor) -> Tensor {
    let c = tokens.cols();
    let mut out = tokens.clone();
    for r in 0..tokens.rows() {
        let row = tokens.row(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + TARGET_NORM_EPS).sqrt();
        for (o, v) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(ext: [usize; 3]) -> Volume {
        let n = ext.iter().product();
        Volume::new(ext, (0..n).map(|i| i as f64).collect(), None).unwrap()
    }

    #[test]
    fn token_counts() {
        let g = PatchGrid::new([8, 8, 8], [4, 4, 4]).unwrap();
        let t = patchify(&ramp([8, 8, 8]), &g).unwrap();
        assert_eq!(t.shape(), &[8, 64]);
        assert_eq!(PatchGrid::new([192, 192, 64], [16, 16, 16]).unwrap().n_tokens(), 576);
        assert_eq!(PatchGrid::new([32, 32, 16], [8, 8, 16]).unwrap().n_tokens(), 16);
        assert!(PatchGrid::new([10, 8, 8], [4, 4, 4]).is_err());
    }

    #[test]
    fn documented_order() {
        let g = PatchGrid::new([4, 4, 2], [2, 2, 2]).unwrap();
        let t = patchify(&ramp([4, 4, 2]), &g).unwrap();
        // token 1 is patch (0, 1, 0): x in 0..2, y in 2..4
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0, 7.0, 12.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn normalize_examples() {
        let t = Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 5.0]]).unwrap();
        let n = normalize_targets(&t);
        assert!((n.at2(0, 0) + 1.0).abs() < 1e-6 && (n.at2(0, 1) - 1.0).abs() < 1e-6);
        assert_eq!(n.row(1), &[0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn patchify_roundtrip(px in 1usize..4, py in 1usize..4, pz in 1usize..4,
                              cx in 1usize..4, cy in 1usize..4, cz in 1usize..4, seed in 0u64..1000) {
            let ext = [px * cx, py * cy, pz * cz];
            let g = PatchGrid::new(ext, [px, py, pz]).unwrap();
            let n: usize = ext.iter().product();
            let data = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 999.0).collect();
            let v = Volume::new(ext, data, None).unwrap();
            let back = unpatchify(&patchify(&v, &g).unwrap(), &g).unwrap();
            prop_assert_eq!(back.intensity(), v.intensity());
        }

        #[test]
        fn normalized_rows_have_zero_mean(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 6), 1..5)) {
            let t = Tensor::from_rows(&rows).unwrap();
            let n = normalize_targets(&t);
            for r in 0..n.rows() {
                let m = n.row(r).iter().sum::<f64>() / 6.0;
                prop_assert!(m.abs() <= 1e-10);
            }
        }
    }
}
