//! Dice, normalised surface Dice and ROC AUC.

use crate::error::{Error, Result};

fn check_len(a: &[u8], b: &[u8], extents: Option<[usize; 3]>) -> Result<()> {
    if a.len() != b.len() || extents.is_some_and(|e| e.iter().product::<usize>() != a.len()) {
        return Err(Error::shape(format!(
            "label grids of {} and {} voxels (extents {extents:?})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `2 |A ∩ B| / (|A| + |B|)` for the voxels labelled `class`; 1 when both
/// are empty.
pub fn dice_score(pred: &[u8], truth: &[u8], class: u8) -> Result<f64> {
    check_len(pred, truth, None)?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (ip, it) = (p == class, t == class);
        a += ip as usize;
        b += it as usize;
        both += (ip && it) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Voxels of `class` with at least one 6-neighbour outside the class or
/// outside the grid.
pub fn surface(labels: &[u8], extents: [usize; 3], class: u8) -> Vec<bool> {
    let [nx, ny, nz] = extents;
    let idx = |x: usize, y: usize, z: usize| (x * ny + y) * nz + z;
    let mut out = vec![false; labels.len()];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let i = idx(x, y, z);
                if labels[i] != class {
                    continue;
                }
                let outside = |dx: isize, dy: isize, dz: isize| {
                    let (a, b, c) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if a < 0 || b < 0 || c < 0 || a >= nx as isize || b >= ny as isize || c >= nz as isize {
                        return true;
                    }
                    labels[idx(a as usize, b as usize, c as usize)] != class
                };
                out[i] = outside(-1, 0, 0)
                    || outside(1, 0, 0)
                    || outside(0, -1, 0)
                    || outside(0, 1, 0)
                    || outside(0, 0, -1)
                    || outside(0, 0, 1);
            }
        }
    }
    out
}

/// Integer offsets within Euclidean distance `tol`, nearest first.
fn ball_offsets(tol: f64, extents: [usize; 3]) -> Vec<[isize; 3]> {
    let r = [0, 1, 2].map(|a| (tol.floor() as isize).min(extents[a] as isize - 1));
    let t2 = tol * tol;
    let mut out = Vec::new();
    for dx in -r[0]..=r[0] {
        for dy in -r[1]..=r[1] {
            for dz in -r[2]..=r[2] {
                if ((dx * dx + dy * dy + dz * dz) as f64) <= t2 {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out.sort_by_key(|o| o[0] * o[0] + o[1] * o[1] + o[2] * o[2]);
    out
}

fn count_near(from: &[bool], to: &[bool], extents: [usize; 3], offsets: &[[isize; 3]]) -> usize {
    let [nx, ny, nz] = extents;
    let mut n = 0;
    for (i, _) in from.iter().enumerate().filter(|(_, &s)| s) {
        let (x, y, z) = ((i / (ny * nz)) as isize, ((i / nz) % ny) as isize, (i % nz) as isize);
        let hit = offsets.iter().any(|o| {
            let (a, b, c) = (x + o[0], y + o[1], z + o[2]);
            a >= 0
                && b >= 0
                && c >= 0
                && a < nx as isize
                && b < ny as isize
                && c < nz as isize
                && to[((a as usize) * ny + b as usize) * nz + c as usize]
        });
        n += hit as usize;
    }
    n
}

/// `(|S_A near B| + |S_B near A|) / (|S_A| + |S_B|)` where `S` are
/// 6-connectivity surfaces and "near" means within Euclidean distance `tol`
/// voxels of the other surface. Both masks empty gives 1, one empty gives 0.
pub fn nsd_score(pred: &[u8], truth: &[u8], extents: [usize; 3], class: u8, tol: f64) -> Result<f64> {
    check_len(pred, truth, Some(extents))?;
    if !(tol >= 0.0) {
        return Err(Error::invalid(format!("NSD tolerance {tol} must be non-negative")));
    }
    let sa = surface(pred, extents, class);
    let sb = surface(truth, extents, class);
    let (na, nb) = (sa.iter().filter(|&&s| s).count(), sb.iter().filter(|&&s| s).count());
    match (na, nb) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let offsets = ball_offsets(tol, extents);
    let near = count_near(&sa, &sb, extents, &offsets) + count_near(&sb, &sa, extents, &offsets);
    Ok(near as f64 / (na + nb) as f64)
}

/// Mann–Whitney estimate of ROC AUC with tied scores counted one half.
///
/// Computed from twice the rank sum in integers so the result is the exact
/// ratio `(2 wins + ties) / (2 n_pos n_neg)`.
pub fn auc_score(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("AUC score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUC needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the 1-based average rank of every member of a tie group
    // spanning sorted positions start..end is start + end + 1.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        let twice_rank = (start + end + 2) as u128;
        let pos_in_group = order[start..=end].iter().filter(|&&i| labels[i]).count() as u128;
        twice_rank_sum += twice_rank * pos_in_group;
        start = end + 1;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}
