//! Anatomically aligned crop pairs from two instances of one anatomy.

use rand::Rng;

use super::phantom::{generate_instance, PhantomConfig};
use super::volume::Volume;
use crate::error::{Error, Result};
use crate::seed;

const CROP_TRIES: usize = 16;

/// Two equally sized crops depicting the same body part.
#[derive(Clone, Debug)]
pub struct CropPair {
    pub q: Volume,
    pub k: Volume,
    /// Label of the organ both crops are centred on.
    pub organ: u8,
    /// Per-axis shift of the matched organ centre in K relative to Q, in
    /// voxels, caused by the simulated landmark error.
    pub correspondence_offset: [i64; 3],
}

/// Origin placing the rounded `centre` at in-crop position `pos`, or `None`
/// if the window leaves the volume.
fn origin_at(centre: [f64; 3], pos: [i64; 3], crop: [usize; 3], ext: [usize; 3]) -> Option<[usize; 3]> {
    let mut o = [0usize; 3];
    for a in 0..3 {
        let start = centre[a].round() as i64 - pos[a];
        if start < 0 || start as usize + crop[a] > ext[a] {
            return None;
        }
        o[a] = start as usize;
    }
    Some(o)
}

/// Crops Q from instance `deform_seeds.0` and K from instance
/// `deform_seeds.1` of the anatomy around one organ's centroid. Q's window is
/// centred on the centroid as far as the volume allows; K's window puts its
/// centroid at the same in-crop position, shifted by up to `jitter` voxels
/// per axis.
///
/// `pick_seed` chooses the organ and the jitter.
pub fn sample_aligned_crops(
    cfg: &PhantomConfig,
    anatomy_seed: u64,
    deform_seeds: (u64, u64),
    crop: [usize; 3],
    jitter: usize,
    pick_seed: u64,
) -> Result<CropPair> {
    if (0..3).any(|a| crop[a] == 0 || crop[a] > cfg.extents[a]) {
        return Err(Error::invalid(format!(
            "crop {crop:?} does not fit phantom {:?}",
            cfg.extents
        )));
    }
    let a = generate_instance(cfg, anatomy_seed, deform_seeds.0)?;
    let b = if deform_seeds.0 == deform_seeds.1 {
        a.clone()
    } else {
        generate_instance(cfg, anatomy_seed, deform_seeds.1)?
    };
    let (ca, cb) = (a.organ_centroids(), b.organ_centroids());
    let mut rng = seed::rng(pick_seed);
    let j = jitter as i64;
    for _ in 0..CROP_TRIES {
        let organ = rng.gen_range(1..=cfg.n_organs as u8);
        let shift = [0, 1, 2].map(|_| rng.gen_range(-j..=j));
        let (Some(pa), Some(pb)) = (ca.get(&organ), cb.get(&organ)) else {
            continue;
        };
        let half = crop.map(|c| (c / 2) as i64);
        let oq = [0, 1, 2].map(|i| {
            let start = pa[i].round() as i64 - half[i];
            start.clamp(0, (cfg.extents[i] - crop[i]) as i64) as usize
        });
        let pos_q = [0, 1, 2].map(|i| pa[i].round() as i64 - oq[i] as i64);
        let pos_k = [0, 1, 2].map(|i| pos_q[i] - shift[i]);
        let Some(ok) = origin_at(*pb, pos_k, crop, cfg.extents) else {
            continue;
        };
        let q = a.crop(oq, crop)?;
        let k = b.crop(ok, crop)?;
        let has = |v: &Volume| v.labels().is_some_and(|l| l.contains(&organ));
        if has(&q) && has(&k) {
            return Ok(CropPair {
                q,
                k,
                organ,
                correspondence_offset: shift.map(|s| -s),
            });
        }
    }
    Err(Error::Placement(format!(
        "no organ centroid of anatomy {anatomy_seed} admits a {crop:?} crop"
    )))
}
