//! Procedural anatomy phantoms.
//!
//! An *anatomy seed* fixes the organ layout (centres, radii, intensity bands,
//! texture). A *deformation seed* perturbs that layout smoothly and draws the
//! acquisition noise, so two instances of one anatomy contain the same organs
//! at slightly different places and sizes. Ground-truth centroids of the same
//! label in two instances give the cross-volume correspondence.

use rand::Rng;

use super::volume::Volume;
use crate::error::{Error, Result};
use crate::seed::{self, tag};
use crate::tensor::standard_normal;

pub const MAX_ORGANS: usize = 8;
const MIN_EXTENT: usize = 16;
const PLACEMENT_TRIES: u64 = 32;
const MIN_ORGAN_VOXELS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub extents: [usize; 3],
    pub n_organs: usize,
    /// Maximum per-axis centre displacement between instances, in voxels.
    pub deform_amp: f64,
    pub noise_std: f64,
}

impl PhantomConfig {
    pub fn new(extents: [usize; 3], n_organs: usize) -> Self {
        PhantomConfig {
            extents,
            n_organs,
            deform_amp: 2.0,
            noise_std: 0.02,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.extents.iter().any(|&e| e < MIN_EXTENT) {
            return Err(Error::invalid(format!(
                "phantom extents {:?} below {MIN_EXTENT}",
                self.extents
            )));
        }
        if !(1..=MAX_ORGANS).contains(&self.n_organs) {
            return Err(Error::invalid(format!(
                "n_organs {} outside 1..={MAX_ORGANS}",
                self.n_organs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Organ {
    centre: [f64; 3],
    radii: [f64; 3],
    level: f64,
    freq: [f64; 3],
    phase: f64,
}

#[derive(Clone, Debug)]
struct Anatomy {
    organs: Vec<Organ>,
}

fn sample_anatomy(cfg: &PhantomConfig, seed: u64) -> Anatomy {
    let mut rng = seed::rng(seed);
    let ext = cfg.extents.map(|e| e as f64);
    let n = cfg.n_organs;
    let organs = (0..n)
        .map(|k| {
            let centre = [0, 1, 2].map(|a| ext[a] * rng.gen_range(0.3..0.7));
            let radii = [
                ext[0] * rng.gen_range(0.10..0.18),
                ext[1] * rng.gen_range(0.10..0.18),
                ext[2] * rng.gen_range(0.12..0.22),
            ];
            let level = if n == 1 {
                0.6
            } else {
                0.25 + 0.6 * k as f64 / (n - 1) as f64
            };
            Organ {
                centre,
                radii,
                level,
                freq: [0, 1, 2].map(|_| rng.gen_range(0.2..0.6)),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();
    Anatomy { organs }
}

fn deform(anatomy: &Anatomy, cfg: &PhantomConfig, seed: u64) -> Anatomy {
    let mut rng = seed::rng(seed);
    let organs = anatomy
        .organs
        .iter()
        .map(|o| {
            let mut d = o.clone();
            for a in 0..3 {
                if cfg.deform_amp > 0.0 {
                    d.centre[a] += rng.gen_range(-cfg.deform_amp..=cfg.deform_amp);
                }
                d.radii[a] *= rng.gen_range(0.9..1.1);
            }
            d.level += rng.gen_range(-0.03..0.03);
            d
        })
        .collect();
    Anatomy { organs }
}

/// Index of the organ with the smallest normalised distance `d <= 1` at `p`.
fn nearest_organ(anatomy: &Anatomy, p: [f64; 3]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, o) in anatomy.organs.iter().enumerate() {
        let d: f64 = (0..3).map(|a| ((p[a] - o.centre[a]) / o.radii[a]).powi(2)).sum();
        if d <= 1.0 && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best
}

fn check_visible(counts: &[usize]) -> Result<()> {
    match counts.iter().position(|&c| c < MIN_ORGAN_VOXELS) {
        Some(k) => Err(Error::Placement(format!("organ {} is fully overlapped", k + 1))),
        None => Ok(()),
    }
}

/// Voxel counts per organ without rendering intensities.
fn organ_counts(anatomy: &Anatomy, extents: [usize; 3]) -> Vec<usize> {
    let mut counts = vec![0; anatomy.organs.len()];
    for x in 0..extents[0] {
        for y in 0..extents[1] {
            for z in 0..extents[2] {
                if let Some((k, _)) = nearest_organ(anatomy, [x as f64, y as f64, z as f64]) {
                    counts[k] += 1;
                }
            }
        }
    }
    counts
}

fn paint(anatomy: &Anatomy, cfg: &PhantomConfig, noise_seed: u64) -> Result<Volume> {
    let [nx, ny, nz] = cfg.extents;
    let n = nx * ny * nz;
    let mut intensity = vec![0.0; n];
    let mut labels = vec![0u8; n];
    let mut rng = seed::rng(noise_seed);
    let mut i = 0;
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let p = [x as f64, y as f64, z as f64];
                let base = match nearest_organ(anatomy, p) {
                    Some((k, d)) => {
                        let o = &anatomy.organs[k];
                        labels[i] = (k + 1) as u8;
                        let wave = (o.freq[0] * p[0] + o.freq[1] * p[1] + o.freq[2] * p[2]
                            + o.phase)
                            .sin();
                        o.level + 0.04 * wave - 0.05 * d
                    }
                    None => 0.08 + 0.03 * (0.21 * p[0] + 0.17 * p[1]).sin() * (0.3 * p[2]).cos(),
                };
                let noise = cfg.noise_std * standard_normal(&mut rng);
                intensity[i] = (base + noise).clamp(0.0, 1.0);
                i += 1;
            }
        }
    }
    let v = Volume::new(cfg.extents, intensity, Some(labels))?;
    let counts = v.label_counts();
    let per_organ: Vec<usize> = (1..=anatomy.organs.len() as u8)
        .map(|k| counts.get(&k).copied().unwrap_or(0))
        .collect();
    check_visible(&per_organ)?;
    Ok(v)
}

/// Draws an anatomy whose undeformed instance places every organ visibly.
fn placed_anatomy(cfg: &PhantomConfig, anatomy_seed: u64) -> Result<Anatomy> {
    for attempt in 0..PLACEMENT_TRIES {
        let a = sample_anatomy(cfg, seed::derive(anatomy_seed, &[tag::ANATOMY, attempt]));
        if check_visible(&organ_counts(&a, cfg.extents)).is_ok() {
            return Ok(a);
        }
    }
    Err(Error::Placement(format!(
        "could not place {} organs in {:?} after {PLACEMENT_TRIES} tries",
        cfg.n_organs, cfg.extents
    )))
}

/// One deformed instance of an anatomy.
pub fn generate_instance(cfg: &PhantomConfig, anatomy_seed: u64, deform_seed: u64) -> Result<Volume> {
    cfg.validate()?;
    let anatomy = placed_anatomy(cfg, anatomy_seed)?;
    let deformed = deform(&anatomy, cfg, seed::derive(deform_seed, &[tag::DEFORM]));
    let mut v = paint(&deformed, cfg, seed::derive(deform_seed, &[tag::DEFORM, 1]))?;
    v.phantom_id = seed::derive(anatomy_seed, &[deform_seed]);
    Ok(v)
}

/// A phantom whose anatomy and deformation are both keyed by `seed`.
pub fn generate_phantom(seed: u64, extents: [usize; 3], n_organs: usize) -> Result<Volume> {
    generate_instance(&PhantomConfig::new(extents, n_organs), seed, seed)
}

/// Adds a dark spherical lesion inside the organ carrying `label`.
///
/// The label grid is left untouched; lesions exist only for the
/// classification probe.
pub fn insert_lesion(volume: &mut Volume, label: u8, radius: f64, seed: u64) -> Result<()> {
    let centroids = volume.organ_centroids();
    let centre = *centroids
        .get(&label)
        .ok_or_else(|| Error::invalid(format!("label {label} not present")))?;
    let mut rng = seed::rng(seed);
    let c = centre.map(|v| v + rng.gen_range(-1.0..=1.0));
    for i in 0..volume.len() {
        let p = volume.coords(i);
        let d2: f64 = (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum();
        if d2 <= radius * radius {
            let v = &mut volume.intensity_mut()[i];
            *v = (*v - 0.3).clamp(0.0, 1.0);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_phantom(11, [24, 24, 16], 3).unwrap();
        let b = generate_phantom(11, [24, 24, 16], 3).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(12, [24, 24, 16], 3).unwrap();
        assert_ne!(a.intensity(), c.intensity());
    }

    #[test]
    fn exactly_requested_labels_present() {
        for seed in 0..5 {
            let v = generate_phantom(seed, [32, 32, 16], 3).unwrap();
            let labels: Vec<u8> = v.label_counts().keys().copied().collect();
            assert_eq!(labels, vec![0, 1, 2, 3]);
            assert!(v.intensity().iter().all(|x| (0.0..=1.0).contains(x)));
            for c in v.organ_centroids().values() {
                for a in 0..3 {
                    assert!(c[a] >= 0.0 && c[a] < v.extents()[a] as f64);
                }
            }
        }
    }

    #[test]
    fn instances_of_one_anatomy_share_organs_nearby() {
        let cfg = PhantomConfig::new([48, 48, 32], 3);
        let a = generate_instance(&cfg, 5, 100).unwrap();
        let b = generate_instance(&cfg, 5, 200).unwrap();
        assert_ne!(a.intensity(), b.intensity());
        let (ca, cb) = (a.organ_centroids(), b.organ_centroids());
        assert_eq!(ca.keys().collect::<Vec<_>>(), cb.keys().collect::<Vec<_>>());
        for (l, p) in &ca {
            let q = cb[l];
            for ax in 0..3 {
                assert!((p[ax] - q[ax]).abs() < 2.0 * cfg.deform_amp + 2.0, "label {l}");
            }
        }
    }

    #[test]
    fn invalid_requests_are_rejected() {
        assert!(generate_phantom(0, [8, 32, 32], 3).is_err());
        assert!(generate_phantom(0, [32, 32, 32], 0).is_err());
        assert!(generate_phantom(0, [32, 32, 32], 9).is_err());
    }

    #[test]
    fn crowded_volume_reports_placement_failure() {
        // Eight organs in the minimum volume cannot all stay visible.
        let r = generate_phantom(3, [16, 16, 16], 8);
        if let Err(e) = r {
            assert!(matches!(e, Error::Placement(_)));
        }
    }

    #[test]
    fn lesion_darkens_only_intensity() {
        let mut v = generate_phantom(2, [32, 32, 16], 3).unwrap();
        let before = v.clone();
        insert_lesion(&mut v, 2, 3.0, 9).unwrap();
        assert_eq!(v.labels(), before.labels());
        assert!(v.intensity().iter().sum::<f64>() < before.intensity().iter().sum::<f64>());
    }
}
