//! Dense 3-D volumes and their on-disk format.
//!
//! Voxels are stored x-major: the voxel at `(x, y, z)` lives at
//! `(x * ny + y) * nz + z`.
//!
//! # File layout
//!
//! All integers little-endian.
//!
//! | offset | size | field                                        |
//! |-------:|-----:|----------------------------------------------|
//! | 0      | 4    | magic `AVOL`                                 |
//! | 4      | 2    | format version, `1`                          |
//! | 6      | 1    | dtype tag: `1` = f32, `2` = f64              |
//! | 7      | 1    | label flag: `0` absent, `1` present          |
//! | 8      | 12   | extents `nx, ny, nz` as u32                  |
//! | 20     | 8    | phantom id, u64                              |
//! | 28     | n·w  | intensities, `n = nx·ny·nz`, `w` dtype width |
//! | …      | n    | labels as u8, only when the flag is set      |

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"AVOL";
pub const VOLUME_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;
const HEADER_LEN: usize = 28;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    intensity: Vec<f64>,
    labels: Option<Vec<u8>>,
    pub phantom_id: u64,
}

impl Volume {
    pub fn new(extents: [usize; 3], intensity: Vec<f64>, labels: Option<Vec<u8>>) -> Result<Self> {
        let n = extents.iter().product::<usize>();
        if n == 0 || intensity.len() != n || labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::shape(format!(
                "volume {extents:?} with {} intensities",
                intensity.len()
            )));
        }
        Ok(Volume {
            extents,
            intensity,
            labels,
            phantom_id: 0,
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn len(&self) -> usize {
        self.intensity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensity.is_empty()
    }

    pub fn intensity(&self) -> &[f64] {
        &self.intensity
    }

    pub fn intensity_mut(&mut self) -> &mut [f64] {
        &mut self.intensity
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn labels_mut(&mut self) -> Option<&mut [u8]> {
        self.labels.as_deref_mut()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.extents[1] + y) * self.extents[2] + z
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [_, ny, nz] = self.extents;
        [i / (ny * nz), (i / nz) % ny, i % nz]
    }

    /// Voxel-space centroid of each label present (background excluded).
    pub fn organ_centroids(&self) -> BTreeMap<u8, [f64; 3]> {
        let mut acc: BTreeMap<u8, ([f64; 3], usize)> = BTreeMap::new();
        if let Some(labels) = &self.labels {
            for (i, &l) in labels.iter().enumerate() {
                if l == 0 {
                    continue;
                }
                let c = self.coords(i);
                let e = acc.entry(l).or_insert(([0.0; 3], 0));
                for a in 0..3 {
                    e.0[a] += c[a] as f64;
                }
                e.1 += 1;
            }
        }
        acc.into_iter()
            .map(|(l, (s, n))| (l, s.map(|v| v / n as f64)))
            .collect()
    }

    pub fn label_counts(&self) -> BTreeMap<u8, usize> {
        let mut counts = BTreeMap::new();
        for &l in self.labels.iter().flatten() {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }

    /// Axis-aligned sub-volume starting at `origin`.
    pub fn crop(&self, origin: [usize; 3], extents: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if extents[a] == 0 || origin[a] + extents[a] > self.extents[a] {
                return Err(Error::invalid(format!(
                    "crop {origin:?}+{extents:?} outside {:?}",
                    self.extents
                )));
            }
        }
        let n = extents.iter().product();
        let mut intensity = Vec::with_capacity(n);
        let mut labels = self.labels.as_ref().map(|_| Vec::with_capacity(n));
        for x in 0..extents[0] {
            for y in 0..extents[1] {
                let start = self.index(origin[0] + x, origin[1] + y, origin[2]);
                let end = start + extents[2];
                intensity.extend_from_slice(&self.intensity[start..end]);
                if let (Some(dst), Some(src)) = (labels.as_mut(), self.labels.as_ref()) {
                    dst.extend_from_slice(&src[start..end]);
                }
            }
        }
        let mut v = Volume::new(extents, intensity, labels)?;
        v.phantom_id = self.phantom_id;
        Ok(v)
    }

    pub fn to_bytes(&self, dtype: u8) -> Result<Vec<u8>> {
        let width = match dtype {
            DTYPE_F32 => 4,
            DTYPE_F64 => 8,
            t => return Err(Error::invalid(format!("unknown dtype tag {t}"))),
        };
        let n = self.len();
        let mut out = Vec::with_capacity(HEADER_LEN + n * width + n);
        out.extend_from_slice(VOLUME_MAGIC);
        out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
        out.push(dtype);
        out.push(u8::from(self.labels.is_some()));
        for e in self.extents {
            let e = u32::try_from(e).map_err(|_| Error::invalid("extent exceeds u32"))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        out.extend_from_slice(&self.phantom_id.to_le_bytes());
        for &v in &self.intensity {
            if dtype == DTYPE_F32 {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(labels) = &self.labels {
            out.extend_from_slice(labels);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Volume> {
        if bytes.len() < HEADER_LEN || &bytes[0..4] != VOLUME_MAGIC {
            return Err(Error::Format("not a volume file".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VOLUME_VERSION {
            return Err(Error::Format(format!("unsupported volume version {version}")));
        }
        let dtype = bytes[6];
        let has_labels = match bytes[7] {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("bad label flag {f}"))),
        };
        let mut extents = [0usize; 3];
        for (a, e) in extents.iter_mut().enumerate() {
            let o = 8 + 4 * a;
            *e = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        }
        let phantom_id = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let n: usize = extents.iter().product();
        let width = match dtype {
            DTYPE_F32 => 4,
            DTYPE_F64 => 8,
            t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
        };
        let expected = HEADER_LEN + n * width + if has_labels { n } else { 0 };
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "volume payload is {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + n * width];
        let intensity = if dtype == DTYPE_F32 {
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        } else {
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let labels = has_labels.then(|| bytes[HEADER_LEN + n * width..].to_vec());
        let mut v = Volume::new(extents, intensity, labels)?;
        v.phantom_id = phantom_id;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes(DTYPE_F64)?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Volume> {
        Volume::from_bytes(&fs::read(path)?)
    }
}
