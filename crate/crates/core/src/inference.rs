//! Whole-slice prediction, with optional tiling.
//!
//! Only the head differs between a base network and its fine-tuned copies,
//! so trunk features are computed once per exam and reused by every head.

use crate::error::{Error, Result};
use crate::network::{FeatureMap, NetworkParams};
use crate::scalar::Scalar;
use crate::volume::{MultiSequenceExam, SequenceStack, Volume};
use rand::Rng;

/// Trunk features of the organ pixels of one exam. The head is 1x1, so
/// pixels outside the organ are never needed again.
pub struct ExamFeatures<T> {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Ascending by slice.
    pub slices: Vec<SliceFeatures<T>>,
}

pub struct SliceFeatures<T> {
    pub z: usize,
    /// In-plane linear indices of the organ pixels.
    pub pixels: Vec<usize>,
    /// `1 x 1 x pixels.len() x feature_width`.
    pub features: FeatureMap<T>,
}

fn window<T: Scalar>(s: &SequenceStack<T>, z: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> FeatureMap<T> {
    let [_, _, w] = s.shape();
    let c = s.n_channels();
    let full = s.slice_hwc(z);
    let mut data = Vec::with_capacity((y1 - y0) * (x1 - x0) * c);
    for y in y0..y1 {
        data.extend_from_slice(&full[(y * w + x0) * c..(y * w + x1) * c]);
    }
    FeatureMap::from_vec(1, y1 - y0, x1 - x0, c, data).expect("window shape")
}

/// Features of one slice. With `tile = Some(t)` the slice is processed in
/// `t x t` cores, each extended by the receptive radius and cropped to the
/// image, so the result equals the whole-slice pass.
pub fn slice_features<T: Scalar>(
    params: &NetworkParams<T>,
    exam: &MultiSequenceExam<T>,
    z: usize,
    tile: Option<usize>,
) -> Result<FeatureMap<T>> {
    let [nz, h, w] = exam.shape();
    if z >= nz {
        return Err(Error::Shape(format!("slice {z} outside a volume of {nz} slices")));
    }
    let Some(t) = tile else {
        return params.features(&window(&exam.seq_a, z, 0, h, 0, w), &window(&exam.seq_b, z, 0, h, 0, w));
    };
    if t == 0 {
        return Err(Error::Config("tile size must be positive".into()));
    }
    let r = params.config().receptive_radius();
    let width = params.config().feature_width();
    let mut out = FeatureMap::zeros(1, h, w, width);
    for cy in (0..h).step_by(t) {
        for cx in (0..w).step_by(t) {
            let (ey, ex) = ((cy + t).min(h), (cx + t).min(w));
            let (wy0, wy1) = (cy.saturating_sub(r), (ey + r).min(h));
            let (wx0, wx1) = (cx.saturating_sub(r), (ex + r).min(w));
            let f = params.features(
                &window(&exam.seq_a, z, wy0, wy1, wx0, wx1),
                &window(&exam.seq_b, z, wy0, wy1, wx0, wx1),
            )?;
            let fw = wx1 - wx0;
            for y in cy..ey {
                let src = ((y - wy0) * fw + (cx - wx0)) * width;
                let dst = (y * w + cx) * width;
                out.data[dst..dst + (ex - cx) * width].copy_from_slice(&f.data[src..src + (ex - cx) * width]);
            }
        }
    }
    Ok(out)
}

/// Normalises the exam and computes features for its organ slices.
pub fn exam_features<T: Scalar>(
    params: &NetworkParams<T>,
    exam: &MultiSequenceExam<T>,
    tile: Option<usize>,
) -> Result<ExamFeatures<T>> {
    let norm = exam.normalized()?;
    let slices = norm
        .organ_slices()
        .into_iter()
        .map(|z| {
            let full = slice_features(params, &norm, z, tile)?;
            let c = full.c;
            let pixels: Vec<usize> = norm.organ_mask.slice(z).iter().enumerate().filter(|(_, &m)| m != 0).map(|(i, _)| i).collect();
            let mut data = Vec::with_capacity(pixels.len() * c);
            for &i in &pixels {
                data.extend_from_slice(&full.data[i * c..(i + 1) * c]);
            }
            let features = FeatureMap::from_vec(1, 1, pixels.len(), c, data)?;
            Ok(SliceFeatures { z, pixels, features })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExamFeatures { shape: exam.shape(), spacing: exam.spacing(), slices })
}

/// Lesion-class probability volume from precomputed features; 0 outside
/// the organ.
pub fn head_probabilities<T: Scalar, R: Rng + ?Sized>(
    params: &NetworkParams<T>,
    feats: &ExamFeatures<T>,
    dropout_on: bool,
    rng: &mut R,
) -> Result<Volume<T>> {
    let mut vol = Volume::filled(feats.shape, feats.spacing, T::zero())?;
    for s in &feats.slices {
        let probs = params.head_forward(s.features.clone(), dropout_on, rng)?;
        let plane = vol.slice_mut(s.z);
        for (&i, p) in s.pixels.iter().zip(probs.data.chunks_exact(2)) {
            plane[i] = p[1];
        }
    }
    Ok(vol)
}

/// Deterministic lesion-probability volume for one exam, 0 outside the organ.
pub fn predict_volume<T: Scalar>(
    params: &NetworkParams<T>,
    exam: &MultiSequenceExam<T>,
    tile: Option<usize>,
) -> Result<Volume<T>> {
    let feats = exam_features(params, exam, tile)?;
    head_probabilities(params, &feats, false, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, NetworkConfig};
    use crate::phantom::{generate_patient, PhantomConfig};

    fn small() -> (NetworkParams<f32>, MultiSequenceExam<f32>) {
        let cfg = NetworkConfig { n_kernels: 3, head_kernels: 4, ..Default::default() };
        let params = build_network(&cfg, 3).unwrap();
        let pc = PhantomConfig {
            shape: [8, 70, 75],
            organ_semi_axes: [3.5, 30.0, 33.0],
            lesion_radius_mm: (3.0, 5.0),
            lesions_per_patient: (1, 2),
            ..Default::default()
        };
        let p = generate_patient(&pc, "p", 9, false).unwrap();
        (params, p.study.followup)
    }

    #[test]
    fn tiling_is_seam_free() {
        let (params, exam) = small();
        let norm = exam.normalized().unwrap();
        let z = norm.organ_slices()[0];
        let whole = slice_features(&params, &norm, z, None).unwrap();
        for t in [16, 40, 70] {
            let tiled = slice_features(&params, &norm, z, Some(t)).unwrap();
            assert_eq!(tiled.data.len(), whole.data.len());
            let worst = tiled.data.iter().zip(&whole.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(worst <= 1e-5, "tile {t}: max deviation {worst}");
        }
    }

    #[test]
    fn prediction_matches_the_full_slice_head_inside_the_organ() {
        let (params, exam) = small();
        let p = predict_volume(&params, &exam, None).unwrap();
        assert_eq!(p.shape(), exam.shape());
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let norm = exam.normalized().unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        for z in 0..exam.shape()[0] {
            let organ = exam.organ_mask.slice(z);
            if exam.organ_mask.slice_count(z) == 0 {
                assert!(p.slice(z).iter().all(|&v| v == 0.0));
                continue;
            }
            let full = params.head_forward(slice_features(&params, &norm, z, None).unwrap(), false, &mut rng).unwrap();
            for (i, (&v, &m)) in p.slice(z).iter().zip(organ).enumerate() {
                let want = if m != 0 { full.data[2 * i + 1] } else { 0.0 };
                assert!((v - want).abs() <= 1e-6, "slice {z} pixel {i}: {v} vs {want}");
            }
        }
        assert_eq!(predict_volume(&params, &exam, Some(32)).unwrap().shape(), exam.shape());
    }
}
