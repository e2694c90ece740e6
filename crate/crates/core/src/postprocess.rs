//! From lesion probabilities to binary masks and discrete lesion objects.
//!
//! Morphology treats everything outside the volume as background and is
//! evaluated as if the grid extended indefinitely, so closing never removes
//! foreground at the border and both operators stay idempotent.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Mask, Volume};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detection,
    Segmentation,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detection" => Ok(Task::Detection),
            "segmentation" => Ok(Task::Segmentation),
            _ => Err(Error::Config(format!("unknown task '{s}' (expected detection or segmentation)"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Detection => "detection",
            Task::Segmentation => "segmentation",
        })
    }
}

pub fn mask_probabilities<T: Scalar>(probs: &Volume<T>, organ: &Mask) -> Result<Volume<T>> {
    probs.check_shape(organ, "organ mask")?;
    probs.with_data(probs.data().iter().zip(organ.data()).map(|(&p, &m)| if m != 0 { p } else { T::zero() }).collect())
}

/// 1 where `p > threshold` (strictly).
pub fn binarize<T: Scalar>(probs: &Volume<T>, threshold: f64) -> Mask {
    probs.map(|p| u8::from(p.as_f64() > threshold))
}

/// One pass of a width-3 max (dilate) or min (erode) filter along `axis`,
/// reading outside the grid as `outside`.
fn filter_axis(data: &[u8], shape: [usize; 3], axis: usize, dilate: bool, outside: u8) -> Vec<u8> {
    let strides = [shape[1] * shape[2], shape[2], 1];
    let s = strides[axis];
    let n = shape[axis];
    let mut out = vec![0u8; data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = (i / s) % n;
        let prev = if pos > 0 { data[i - s] } else { outside };
        let next = if pos + 1 < n { data[i + s] } else { outside };
        let v = data[i];
        *o = if dilate { v | prev | next } else { v & prev & next };
    }
    out
}

fn cube(data: &[u8], shape: [usize; 3], dilate: bool) -> Vec<u8> {
    let mut v = data.to_vec();
    for axis in 0..3 {
        v = filter_axis(&v, shape, axis, dilate, 0);
    }
    v
}

/// Closing (dilation then erosion) with the full 3x3x3 cube.
pub fn morph_close_3d(mask: &Mask) -> Mask {
    let [z, y, x] = mask.shape();
    let ps = [z + 2, y + 2, x + 2];
    let mut padded = vec![0u8; ps.iter().product()];
    for (i, &v) in mask.data().iter().enumerate() {
        let [a, b, c] = mask.coords(i);
        padded[((a + 1) * ps[1] + b + 1) * ps[2] + c + 1] = u8::from(v != 0);
    }
    let closed = cube(&cube(&padded, ps, true), ps, false);
    let data = (0..mask.len())
        .map(|i| {
            let [a, b, c] = mask.coords(i);
            closed[((a + 1) * ps[1] + b + 1) * ps[2] + c + 1]
        })
        .collect();
    mask.with_data(data).expect("same shape")
}

fn plus_2d(plane: &[u8], h: usize, w: usize, dilate: bool) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    let get = |y: isize, x: isize| -> u8 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let n = [get(y, x), get(y - 1, x), get(y + 1, x), get(y, x - 1), get(y, x + 1)];
            out[y as usize * w + x as usize] = if dilate { n.iter().fold(0, |a, &b| a | b) } else { n.iter().fold(1, |a, &b| a & b) };
        }
    }
    out
}

/// Slice-wise opening (erosion then dilation) with the 5-pixel plus.
pub fn morph_open_plus_2d(mask: &Mask) -> Mask {
    let [nz, h, w] = mask.shape();
    let mut data = Vec::with_capacity(mask.len());
    for z in 0..nz {
        let plane: Vec<u8> = mask.slice(z).iter().map(|&v| u8::from(v != 0)).collect();
        data.extend(plus_2d(&plus_2d(&plane, h, w, false), h, w, true));
    }
    mask.with_data(data).expect("same shape")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox3 {
    /// Inclusive `(z, y, x)` corners.
    pub min: [usize; 3],
    pub max: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionObject {
    /// 1-based, ordered by smallest linear voxel index.
    pub id: u32,
    /// Linear voxel indices, ascending.
    pub voxels: Vec<usize>,
    pub volume_cm3: f64,
    pub bbox: BBox3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionObjects {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Object id per voxel, 0 for background.
    pub labels: Vec<u32>,
    pub objects: Vec<LesionObject>,
}

#[derive(Serialize)]
struct ObjectRecord<'a> {
    id: u32,
    voxel_count: usize,
    volume_cm3: f64,
    bbox: &'a BBox3,
}

impl LesionObjects {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        let recs: Vec<ObjectRecord> = self
            .objects
            .iter()
            .map(|o| ObjectRecord { id: o.id, voxel_count: o.voxels.len(), volume_cm3: o.volume_cm3, bbox: &o.bbox })
            .collect();
        Ok(serde_json::to_string_pretty(&recs)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

fn find(parent: &mut [u32], mut a: u32) -> u32 {
    while parent[a as usize] != a {
        parent[a as usize] = parent[parent[a as usize] as usize];
        a = parent[a as usize];
    }
    a
}

/// 26-connected components by raster-scan union-find.
pub fn connected_components(mask: &Mask) -> LesionObjects {
    let shape = mask.shape();
    let [nz, ny, nx] = shape;
    let data = mask.data();
    let mut prov = vec![0u32; data.len()];
    let mut parent: Vec<u32> = vec![0];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                if data[i] == 0 {
                    continue;
                }
                let mut label = 0u32;
                // Already-visited neighbours: the previous slice, the previous row, the previous voxel.
                for dz in -1isize..=0 {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            if dz == 0 && (dy > 0 || (dy == 0 && dx >= 0)) {
                                continue;
                            }
                            let (zz, yy, xx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                            if zz < 0 || yy < 0 || xx < 0 || yy >= ny as isize || xx >= nx as isize {
                                continue;
                            }
                            let l = prov[(zz as usize * ny + yy as usize) * nx + xx as usize];
                            if l == 0 {
                                continue;
                            }
                            if label == 0 {
                                label = find(&mut parent, l);
                            } else {
                                let (ra, rb) = (find(&mut parent, label), find(&mut parent, l));
                                if ra != rb {
                                    let (lo, hi) = (ra.min(rb), ra.max(rb));
                                    parent[hi as usize] = lo;
                                    label = lo;
                                }
                            }
                        }
                    }
                }
                if label == 0 {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                prov[i] = label;
            }
        }
    }
    // Canonical ids: order of first appearance in raster order.
    let mut canon = vec![0u32; parent.len()];
    let mut next = 0u32;
    let mut labels = vec![0u32; data.len()];
    let mut objects: Vec<LesionObject> = Vec::new();
    let voxel_cm3 = mask.voxel_volume_mm3() / 1000.0;
    for i in 0..data.len() {
        if prov[i] == 0 {
            continue;
        }
        let root = find(&mut parent, prov[i]) as usize;
        if canon[root] == 0 {
            next += 1;
            canon[root] = next;
            let c = mask.coords(i);
            objects.push(LesionObject { id: next, voxels: Vec::new(), volume_cm3: 0.0, bbox: BBox3 { min: c, max: c } });
        }
        let id = canon[root];
        labels[i] = id;
        let o = &mut objects[id as usize - 1];
        o.voxels.push(i);
        let c = mask.coords(i);
        for ((lo, hi), v) in o.bbox.min.iter_mut().zip(&mut o.bbox.max).zip(c) {
            *lo = (*lo).min(v);
            *hi = (*hi).max(v);
        }
    }
    for o in &mut objects {
        o.volume_cm3 = o.voxels.len() as f64 * voxel_cm3;
    }
    LesionObjects { shape, spacing: mask.spacing(), labels, objects }
}

/// Mask, threshold at 0.5, close; the detection task additionally opens
/// slice-wise to drop isolated pixels.
pub fn postprocess_pipeline<T: Scalar>(probs: &Volume<T>, organ: &Mask, task: Task) -> Result<(Mask, LesionObjects)> {
    let masked = mask_probabilities(probs, organ)?;
    let mut m = morph_close_3d(&binarize(&masked, THRESHOLD));
    if task == Task::Detection {
        m = morph_open_plus_2d(&m);
    }
    // Closing may reach outside the organ by one voxel; keep the result inside it.
    for (v, &o) in m.data_mut().iter_mut().zip(organ.data()) {
        *v &= u8::from(o != 0);
    }
    let objects = connected_components(&m);
    Ok((m, objects))
}
