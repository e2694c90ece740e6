//! Square 2D training tiles cut from one slice of an exam.
//!
//! Tiles are anchored inside the organ bounding box of the slice and clamped
//! to the image. Only when the image itself is narrower than the tile is the
//! tile centred on the image and the missing border read as zero.

use super::{Mask, MultiSequenceExam, Volume};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Default tile edge in pixels.
pub const PATCH_SIZE: usize = 128;

/// Number of tiles per axis of the training grid (5 x 5 = 25 tiles per slice).
pub const GRID_STEPS: usize = 5;

/// Multi-channel square tile, `size x size x channels`, channels fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile<T> {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tile<T> {
    pub fn zeros(size: usize, channels: usize) -> Self {
        Self { size, channels, data: vec![T::zero(); size * size * channels] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.size + x) * self.channels + c]
    }
}

/// Top-left corner of a tile in slice coordinates (may be negative only when
/// the image is smaller than the tile).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub slice: usize,
    pub y: isize,
    pub x: isize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch<T> {
    pub input_a: Tile<T>,
    pub input_b: Tile<T>,
    /// `size x size` binary label.
    pub label: Vec<u8>,
    /// Optional per-pixel loss weights, `size x size`, non-negative.
    pub weight: Option<Vec<T>>,
    pub origin: PatchOrigin,
}

impl<T> Patch<T> {
    pub fn size(&self) -> usize {
        self.input_a.size
    }
}

/// Half-open 2D box `[y0, y1) x [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox2 {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

/// Bounding box of the organ on slice `z`.
pub fn organ_bbox(mask: &Mask, z: usize) -> Result<BBox2> {
    let [nz, h, w] = mask.shape();
    if z >= nz {
        return Err(Error::Data(format!("slice {z} out of range (volume has {nz})")));
    }
    let plane = mask.slice(z);
    let mut bb: Option<BBox2> = None;
    for y in 0..h {
        for x in 0..w {
            if plane[y * w + x] != 0 {
                let b = bb.get_or_insert(BBox2 { y0: y, x0: x, y1: y + 1, x1: x + 1 });
                b.y0 = b.y0.min(y);
                b.x0 = b.x0.min(x);
                b.y1 = b.y1.max(y + 1);
                b.x1 = b.x1.max(x + 1);
            }
        }
    }
    bb.ok_or_else(|| Error::EmptyRegion(format!("no organ voxels on slice {z}")))
}

fn clamp_anchor(anchor: isize, dim: usize, size: usize) -> isize {
    if dim >= size {
        anchor.clamp(0, (dim - size) as isize)
    } else {
        -(((size - dim) / 2) as isize)
    }
}

/// Tile anchors along one axis whose centres are spread evenly over
/// `[lo + size/2, hi - size/2]`, collapsing to the box centre when the box
/// is narrower than the tile.
fn grid_anchors(lo: usize, hi: usize, dim: usize, size: usize) -> Vec<isize> {
    let half = size as f64 / 2.0;
    let (mut first, mut last) = (lo as f64 + half, hi as f64 - half);
    if last < first {
        first = (lo + hi) as f64 / 2.0;
        last = first;
    }
    (0..GRID_STEPS)
        .map(|k| {
            let centre = first + (last - first) * k as f64 / (GRID_STEPS - 1) as f64;
            clamp_anchor((centre - half).round() as isize, dim, size)
        })
        .collect()
}

/// The 25 anchors of the training grid on slice `z`, row-major.
pub fn training_origins(mask: &Mask, z: usize, size: usize) -> Result<Vec<PatchOrigin>> {
    let bb = organ_bbox(mask, z)?;
    let [_, h, w] = mask.shape();
    let ys = grid_anchors(bb.y0, bb.y1, h, size);
    let xs = grid_anchors(bb.x0, bb.x1, w, size);
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| PatchOrigin { slice: z, y, x })).collect())
}

/// Four corner anchors of the organ box followed by the centred anchor.
pub fn finetune_origins(mask: &Mask, z: usize, size: usize) -> Result<Vec<PatchOrigin>> {
    let bb = organ_bbox(mask, z)?;
    let [_, h, w] = mask.shape();
    let s = size as isize;
    let (top, left) = (bb.y0 as isize, bb.x0 as isize);
    let (bottom, right) = (bb.y1 as isize - s, bb.x1 as isize - s);
    let cy = ((bb.y0 + bb.y1) as f64 / 2.0 - size as f64 / 2.0).round() as isize;
    let cx = ((bb.x0 + bb.x1) as f64 / 2.0 - size as f64 / 2.0).round() as isize;
    Ok([(top, left), (top, right), (bottom, left), (bottom, right), (cy, cx)]
        .into_iter()
        .map(|(y, x)| PatchOrigin { slice: z, y: clamp_anchor(y, h, size), x: clamp_anchor(x, w, size) })
        .collect())
}

fn cut_plane<V: Copy>(plane: &[V], w: usize, h: usize, origin: PatchOrigin, size: usize, fill: V) -> Vec<V> {
    let mut out = vec![fill; size * size];
    for ty in 0..size {
        let y = origin.y + ty as isize;
        if y < 0 || y as usize >= h {
            continue;
        }
        for tx in 0..size {
            let x = origin.x + tx as isize;
            if x >= 0 && (x as usize) < w {
                out[ty * size + tx] = plane[y as usize * w + x as usize];
            }
        }
    }
    out
}

/// Cuts the tile at `origin`. `weights`, when given, is cut alongside the label.
pub fn extract_patch<T: Scalar>(
    exam: &MultiSequenceExam<T>,
    origin: PatchOrigin,
    size: usize,
    weights: Option<&Volume<T>>,
) -> Result<Patch<T>> {
    let ann = exam.annotation()?;
    let [nz, h, w] = exam.shape();
    if origin.slice >= nz {
        return Err(Error::Data(format!("slice {} out of range", origin.slice)));
    }
    let z = origin.slice;
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
    let cut = |stack: &super::SequenceStack<T>| {
        let c = stack.n_channels();
        let mut tile = Tile::zeros(size, c);
        for (ci, ch) in stack.channels().iter().enumerate() {
            let plane = ch.slice(z);
            for ty in 0..size {
                for tx in 0..size {
                    let (y, x) = (origin.y + ty as isize, origin.x + tx as isize);
                    if inside(y, x) {
                        tile.data[(ty * size + tx) * c + ci] = plane[y as usize * w + x as usize];
                    }
                }
            }
        }
        tile
    };
    let label = cut_plane(ann.slice(z), w, h, origin, size, 0u8);
    let weight = match weights {
        Some(wv) => {
            wv.check_shape(&exam.organ_mask, "weight map")?;
            Some(cut_plane(wv.slice(z), w, h, origin, size, T::zero()))
        }
        None => None,
    };
    Ok(Patch { input_a: cut(&exam.seq_a), input_b: cut(&exam.seq_b), label, weight, origin })
}

/// The 25 grid tiles of slice `z`. Placement is deterministic; augmentation
/// happens later through [`rotate_patch`].
pub fn extract_training_patches<T: Scalar>(
    exam: &MultiSequenceExam<T>,
    slice_idx: usize,
    size: usize,
) -> Result<Vec<Patch<T>>> {
    training_origins(&exam.organ_mask, slice_idx, size)?
        .into_iter()
        .map(|o| extract_patch(exam, o, size, None))
        .collect()
}

/// The five fine-tuning tiles of slice `z` (four corners, then centre).
pub fn extract_finetune_patches<T: Scalar>(
    exam: &MultiSequenceExam<T>,
    slice_idx: usize,
    size: usize,
) -> Result<Vec<Patch<T>>> {
    finetune_origins(&exam.organ_mask, slice_idx, size)?
        .into_iter()
        .map(|o| extract_patch(exam, o, size, None))
        .collect()
}

/// Inverse-maps output pixel `(y, x)` to source coordinates for a rotation
/// by `angle` radians about the tile centre.
#[inline]
fn source_coords(y: usize, x: usize, centre: f64, cos: f64, sin: f64) -> (f64, f64) {
    let (dy, dx) = (y as f64 - centre, x as f64 - centre);
    (centre - sin * dx + cos * dy, centre + cos * dx + sin * dy)
}

fn rotate_bilinear<T: Scalar>(tile: &Tile<T>, cos: f64, sin: f64) -> Tile<T> {
    let s = tile.size;
    let c = tile.channels;
    let centre = (s as f64 - 1.0) / 2.0;
    let mut out = Tile::zeros(s, c);
    let fetch = |y: isize, x: isize, ch: usize| -> f64 {
        if y < 0 || x < 0 || y >= s as isize || x >= s as isize {
            0.0
        } else {
            tile.at(y as usize, x as usize, ch).as_f64()
        }
    };
    for y in 0..s {
        for x in 0..s {
            let (sy, sx) = source_coords(y, x, centre, cos, sin);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for ch in 0..c {
                let top = fetch(y0, x0, ch) * (1.0 - fx) + fetch(y0, x0 + 1, ch) * fx;
                let bottom = fetch(y0 + 1, x0, ch) * (1.0 - fx) + fetch(y0 + 1, x0 + 1, ch) * fx;
                out.data[(y * s + x) * c + ch] = T::lit(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

fn rotate_nearest<V: Copy + Default>(plane: &[V], s: usize, cos: f64, sin: f64) -> Vec<V> {
    let centre = (s as f64 - 1.0) / 2.0;
    let mut out = vec![V::default(); s * s];
    for y in 0..s {
        for x in 0..s {
            let (sy, sx) = source_coords(y, x, centre, cos, sin);
            let (ry, rx) = (sy.round(), sx.round());
            if ry >= 0.0 && rx >= 0.0 && ry < s as f64 && rx < s as f64 {
                out[y * s + x] = plane[ry as usize * s + rx as usize];
            }
        }
    }
    out
}

/// Rotates a tile about its centre: bilinear for the inputs, nearest
/// neighbour for label and weights, zero outside the source support.
pub fn rotate_patch<T: Scalar>(p: &Patch<T>, angle_deg: f64) -> Patch<T> {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let s = p.size();
    Patch {
        input_a: rotate_bilinear(&p.input_a, cos, sin),
        input_b: rotate_bilinear(&p.input_b, cos, sin),
        label: rotate_nearest(&p.label, s, cos, sin),
        weight: p.weight.as_ref().map(|w| rotate_nearest(w, s, cos, sin)),
        origin: p.origin,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{SequenceStack, Timepoint};

    fn exam_with_organ(h: usize, w: usize, organ: impl Fn(usize, usize) -> bool) -> MultiSequenceExam<f32> {
        let shape = [1, h, w];
        let img = Volume::from_vec(shape, [1.0; 3], (0..h * w).map(|i| i as f32).collect()).unwrap();
        let organ_mask =
            Mask::from_vec(shape, [1.0; 3], (0..h * w).map(|i| u8::from(organ(i / w, i % w))).collect()).unwrap();
        let ann = organ_mask.clone();
        MultiSequenceExam::new(
            "t",
            Timepoint::Baseline,
            SequenceStack::new("a", vec![img.clone(), img.clone()]).unwrap(),
            SequenceStack::new("b", vec![img]).unwrap(),
            organ_mask,
            Some(ann),
        )
        .unwrap()
    }

    #[test]
    fn grid_centres_are_evenly_spaced_over_large_box() {
        let exam = exam_with_organ(300, 300, |y, x| y < 256 && x < 256);
        let origins = training_origins(&exam.organ_mask, 0, 128).unwrap();
        assert_eq!(origins.len(), 25);
        let mut centres: Vec<isize> = origins.iter().map(|o| o.y + 64).collect();
        centres.dedup();
        assert_eq!(centres, vec![64, 96, 128, 160, 192]);
        let xs: Vec<isize> = origins[..5].iter().map(|o| o.x + 64).collect();
        assert_eq!(xs, vec![64, 96, 128, 160, 192]);
    }

    #[test]
    fn box_equal_to_tile_gives_identical_patches() {
        let exam = exam_with_organ(200, 200, |y, x| (30..158).contains(&y) && (40..168).contains(&x));
        let patches = extract_training_patches(&exam, 0, 128).unwrap();
        assert_eq!(patches.len(), 25);
        assert!(patches.iter().all(|p| p.origin == PatchOrigin { slice: 0, y: 30, x: 40 }));
        assert!(patches.windows(2).all(|w| w[0] == w[1]));
        let ft = extract_finetune_patches(&exam, 0, 128).unwrap();
        assert_eq!(ft.len(), 5);
        assert!(ft.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn border_organ_patches_stay_inside() {
        let exam = exam_with_organ(150, 160, |y, x| y < 10 || x > 150);
        for p in extract_training_patches(&exam, 0, 128).unwrap() {
            let o = p.origin;
            assert!(o.y >= 0 && o.x >= 0 && o.y + 128 <= 150 && o.x + 128 <= 160, "{o:?}");
            assert_eq!(p.input_a.data.len(), 128 * 128 * 2);
            assert_eq!(p.label.len(), 128 * 128);
        }
    }

    #[test]
    fn finetune_corners_follow_box_arithmetic() {
        let exam = exam_with_organ(256, 256, |y, x| (10..210).contains(&y) && (10..210).contains(&x));
        let o: Vec<(isize, isize)> =
            finetune_origins(&exam.organ_mask, 0, 128).unwrap().iter().map(|o| (o.y, o.x)).collect();
        assert_eq!(o, vec![(10, 10), (10, 82), (82, 10), (82, 82), (46, 46)]);
        let a = extract_finetune_patches(&exam, 0, 128).unwrap();
        let b = extract_finetune_patches(&exam, 0, 128).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_slice_is_empty_region_error() {
        let exam = exam_with_organ(20, 20, |_, _| false);
        assert!(matches!(extract_training_patches(&exam, 0, 8), Err(Error::EmptyRegion(_))));
        assert!(matches!(extract_finetune_patches(&exam, 0, 8), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn patch_content_matches_source() {
        let exam = exam_with_organ(20, 24, |y, x| (5..9).contains(&y) && (6..12).contains(&x));
        let p = extract_patch(&exam, PatchOrigin { slice: 0, y: 3, x: 4 }, 8, None).unwrap();
        // pixel value equals its linear index in the source plane
        assert_eq!(p.input_a.at(2, 5, 1), ((3 + 2) * 24 + 4 + 5) as f32);
        assert_eq!(p.label[2 * 8 + 5], 1);
    }

    fn disc_patch(size: usize, radius: f64, cy: f64, cx: f64) -> Patch<f32> {
        let mut label = vec![0u8; size * size];
        let mut a = Tile::zeros(size, 1);
        for y in 0..size {
            for x in 0..size {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                if d <= radius {
                    label[y * size + x] = 1;
                }
                a.data[y * size + x] = (y as f32 * 0.3).sin() + x as f32 * 0.01;
            }
        }
        Patch {
            input_b: a.clone(),
            input_a: a,
            label,
            weight: None,
            origin: PatchOrigin { slice: 0, y: 0, x: 0 },
        }
    }

    fn dice(a: &[u8], b: &[u8]) -> f64 {
        let inter = a.iter().zip(b).filter(|(x, y)| **x == 1 && **y == 1).count();
        2.0 * inter as f64 / (a.iter().filter(|&&v| v == 1).count() + b.iter().filter(|&&v| v == 1).count()) as f64
    }

    #[test]
    fn zero_angle_is_identity() {
        let p = disc_patch(32, 9.0, 12.0, 19.0);
        let r = rotate_patch(&p, 0.0);
        assert_eq!(r.label, p.label);
        for (x, y) in r.input_a.data.iter().zip(&p.input_a.data) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn rotate_forward_and_back_preserves_blob() {
        let p = disc_patch(64, 12.0, 26.0, 36.0);
        let back = rotate_patch(&rotate_patch(&p, 30.0), -30.0);
        assert!(dice(&back.label, &p.label) >= 0.95);
    }

    #[test]
    fn centred_disc_is_rotation_invariant() {
        let p = disc_patch(64, 14.0, 31.5, 31.5);
        for angle in [-45.0, -17.0, 30.0, 45.0] {
            let r = rotate_patch(&p, angle);
            // Nearest-neighbour sampling moves a point by at most half a
            // pixel diagonal, so only the one-pixel rim may flip.
            for y in 0..64 {
                for x in 0..64 {
                    let d = ((y as f64 - 31.5).powi(2) + (x as f64 - 31.5).powi(2)).sqrt();
                    if (d - 14.0).abs() > 0.75 {
                        assert_eq!(r.label[y * 64 + x], p.label[y * 64 + x], "angle {angle} at ({y},{x})");
                    }
                }
            }
            assert!(dice(&r.label, &p.label) >= 0.97);
        }
    }

    proptest::proptest! {
        #[test]
        fn rotation_preserves_label_mass(angle in -45.0f64..45.0, r in 10.0f64..16.0, oy in -6.0f64..6.0, ox in -6.0f64..6.0) {
            let p = disc_patch(64, r, 31.5 + oy, 31.5 + ox);
            let rot = rotate_patch(&p, angle);
            let m0 = p.label.iter().filter(|&&v| v == 1).count() as f64;
            let m1 = rot.label.iter().filter(|&&v| v == 1).count() as f64;
            proptest::prop_assert!((m1 - m0).abs() <= 0.1 * m0);
        }
    }
}
