//! View augmentations: random masking (views u, r) and strong geometric plus
//! intensity augmentation (views w, v).

use rand::Rng;

use super::volume::Volume;
use crate::error::{Error, Result};
use crate::seed;

/// Axis pairs rotated by `StrongAug::quarter_turns`, in that order.
pub const ROTATION_PLANES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

#[derive(Clone, Debug, PartialEq)]
pub enum AugmentationSpec {
    Mask { ratio: f64, seed: u64 },
    Strong(StrongAug),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrongAug {
    pub flips: [bool; 3],
    /// Quarter turns per plane of [`ROTATION_PLANES`].
    pub quarter_turns: [u8; 3],
    /// Nearest-neighbour zoom about the centre; 1 is identity.
    pub zoom: f64,
    pub intensity_scale: f64,
    pub intensity_shift: f64,
    pub seed: u64,
}

impl StrongAug {
    pub fn identity() -> Self {
        StrongAug {
            flips: [false; 3],
            quarter_turns: [0; 3],
            zoom: 1.0,
            intensity_scale: 1.0,
            intensity_shift: 0.0,
            seed: 0,
        }
    }

    /// Draws a spec valid for volumes of `extents`: odd quarter turns are only
    /// drawn for planes with equal extents.
    pub fn sample(seed: u64, extents: [usize; 3]) -> Self {
        let mut rng = seed::rng(seed);
        let flips = [0, 1, 2].map(|_| rng.gen_bool(0.5));
        let quarter_turns = ROTATION_PLANES.map(|(a, b)| {
            let k = rng.gen_range(0..4u8);
            if extents[a] == extents[b] {
                k
            } else {
                k & 2
            }
        });
        StrongAug {
            flips,
            quarter_turns,
            zoom: rng.gen_range(0.9..=1.1),
            intensity_scale: rng.gen_range(0.8..=1.2),
            intensity_shift: rng.gen_range(-0.1..=0.1),
            seed,
        }
    }
}

fn remap(v: &Volume, src_of: impl Fn([usize; 3]) -> [usize; 3]) -> Result<Volume> {
    let ext = v.extents();
    let n = v.len();
    let mut intensity = Vec::with_capacity(n);
    let mut labels = v.labels().map(|_| Vec::with_capacity(n));
    for i in 0..n {
        let [x, y, z] = src_of(v.coords(i));
        let j = v.index(x, y, z);
        intensity.push(v.intensity()[j]);
        if let (Some(dst), Some(src)) = (labels.as_mut(), v.labels()) {
            dst.push(src[j]);
        }
    }
    let mut out = Volume::new(ext, intensity, labels)?;
    out.phantom_id = v.phantom_id;
    Ok(out)
}

fn flip(v: &Volume, axis: usize) -> Result<Volume> {
    let n = v.extents()[axis];
    remap(v, |mut p| {
        p[axis] = n - 1 - p[axis];
        p
    })
}

fn quarter_turn(v: &Volume, (a, b): (usize, usize)) -> Result<Volume> {
    let ext = v.extents();
    if ext[a] != ext[b] {
        return Err(Error::invalid(format!(
            "quarter turn in plane ({a},{b}) of {ext:?} changes the extents"
        )));
    }
    let n = ext[a];
    remap(v, |p| {
        let mut q = p;
        q[a] = n - 1 - p[b];
        q[b] = p[a];
        q
    })
}

fn half_turn(v: &Volume, (a, b): (usize, usize)) -> Result<Volume> {
    flip(&flip(v, a)?, b)
}

fn zoom(v: &Volume, s: f64) -> Result<Volume> {
    let ext = v.extents();
    remap(v, |p| {
        let mut q = [0; 3];
        for a in 0..3 {
            let c = (ext[a] - 1) as f64 / 2.0;
            let src = (c + (p[a] as f64 - c) / s).round();
            q[a] = src.clamp(0.0, (ext[a] - 1) as f64) as usize;
        }
        q
    })
}

/// Flips, then quarter turns, then zoom, then `clamp(scale * x + shift)`.
/// Labels follow the geometric steps only.
pub fn augment_strong(crop: &Volume, spec: &StrongAug) -> Result<Volume> {
    if !(spec.zoom > 0.0) {
        return Err(Error::invalid("zoom must be positive"));
    }
    let mut v = crop.clone();
    for axis in 0..3 {
        if spec.flips[axis] {
            v = flip(&v, axis)?;
        }
    }
    for (plane, &k) in ROTATION_PLANES.iter().zip(&spec.quarter_turns) {
        match k % 4 {
            0 => {}
            2 => v = half_turn(&v, *plane)?,
            k => {
                for _ in 0..k {
                    v = quarter_turn(&v, *plane)?;
                }
            }
        }
    }
    if spec.zoom != 1.0 {
        v = zoom(&v, spec.zoom)?;
    }
    if spec.intensity_scale != 1.0 || spec.intensity_shift != 0.0 {
        for x in v.intensity_mut() {
            *x = (spec.intensity_scale * *x + spec.intensity_shift).clamp(0.0, 1.0);
        }
    }
    Ok(v)
}
