//! Synthetic longitudinal cohorts.
//!
//! A patient is an ellipsoidal organ filled with a smooth random texture and
//! a handful of soft-edged ellipsoidal lesions. The texture field and the
//! intensity signature are drawn once per patient and reused for both
//! timepoints; the follow-up is rigidly shifted, re-noised, and its lesions
//! grow, shrink, vanish or appear. Test patients draw their signature from a
//! shifted distribution (weaker lesion contrast, stronger texture) so that a
//! population model transfers imperfectly to them.

use crate::error::{Error, Result};
use crate::volume::manifest::save_exam;
use crate::volume::{Mask, MultiSequenceExam, PatientStudy, SequenceStack, Timepoint, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FollowupConfig {
    pub scale_range: (f64, f64),
    pub p_new: f64,
    pub p_disappear: f64,
    /// Largest rigid shift per axis, voxels.
    pub max_shift: i64,
}

impl Default for FollowupConfig {
    fn default() -> Self {
        Self { scale_range: (0.5, 1.5), p_new: 0.2, p_disappear: 0.1, max_shift: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// `(z, y, x)` voxels.
    pub shape: [usize; 3],
    /// `(dz, dy, dx)` millimetres.
    pub spacing: [f64; 3],
    /// Organ ellipsoid semi-axes, voxels.
    pub organ_semi_axes: [f64; 3],
    pub lesions_per_patient: (usize, usize),
    /// Lesion radii are log-uniform in this range, millimetres.
    pub lesion_radius_mm: (f64, f64),
    /// Width of the sigmoid lesion rim, millimetres.
    pub lesion_edge_mm: f64,
    /// Bright lesion offset in sequence A, in organ-intensity units.
    pub contrast_a: (f64, f64),
    /// Dark lesion offset in sequence B.
    pub contrast_b: (f64, f64),
    pub base_intensity: (f64, f64),
    /// Gaussian smoothing of the texture field, voxels (in-plane).
    pub texture_smoothness: (f64, f64),
    pub texture_amplitude: (f64, f64),
    pub noise_sd: f64,
    pub followup: FollowupConfig,
    /// 0 leaves test patients on the training distribution.
    pub domain_shift: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [32, 96, 96],
            spacing: [2.0, 1.5, 1.5],
            organ_semi_axes: [12.0, 36.0, 40.0],
            lesions_per_patient: (2, 8),
            lesion_radius_mm: (3.0, 15.0),
            lesion_edge_mm: 1.0,
            contrast_a: (0.6, 1.0),
            contrast_b: (0.5, 0.9),
            base_intensity: (0.8, 1.2),
            texture_smoothness: (1.0, 2.5),
            texture_amplitude: (0.10, 0.20),
            noise_sd: 0.05,
            followup: FollowupConfig::default(),
            domain_shift: 1.0,
            seed: 2024,
        }
    }
}

fn ordered(name: &str, r: (f64, f64)) -> Result<()> {
    if r.0 <= r.1 && r.0.is_finite() && r.1.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} range ({}, {}) is not ordered", r.0, r.1)))
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("shape and spacing must be positive".into()));
        }
        for (i, &a) in self.organ_semi_axes.iter().enumerate() {
            if !(a > 1.0) || 2.0 * a > self.shape[i] as f64 {
                return Err(Error::Config(format!("organ semi-axis {a} does not fit axis {i}")));
            }
        }
        let (lo, hi) = self.lesions_per_patient;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("lesions_per_patient ({lo}, {hi}) must be ordered and >= 1")));
        }
        ordered("lesion_radius_mm", self.lesion_radius_mm)?;
        if !(self.lesion_radius_mm.0 > 0.0) || !(self.lesion_edge_mm > 0.0) {
            return Err(Error::Config("lesion radii and edge width must be > 0".into()));
        }
        ordered("contrast_a", self.contrast_a)?;
        ordered("contrast_b", self.contrast_b)?;
        ordered("base_intensity", self.base_intensity)?;
        ordered("texture_smoothness", self.texture_smoothness)?;
        ordered("texture_amplitude", self.texture_amplitude)?;
        ordered("followup.scale_range", self.followup.scale_range)?;
        if !(self.followup.scale_range.0 > 0.0) {
            return Err(Error::Config("followup.scale_range must be positive".into()));
        }
        for (n, p) in [("followup.p_new", self.followup.p_new), ("followup.p_disappear", self.followup.p_disappear)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{n} = {p} is not a probability")));
            }
        }
        if self.followup.max_shift < 0 || !(self.noise_sd >= 0.0) || !(self.domain_shift >= 0.0) {
            return Err(Error::Config("max_shift, noise_sd and domain_shift must be >= 0".into()));
        }
        Ok(())
    }
}

/// Patient-level appearance shared by both timepoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub base_intensity: f64,
    pub texture_smoothness: f64,
    pub texture_amplitude: f64,
    pub contrast_a: f64,
    pub contrast_b: f64,
}

/// Ellipsoidal lesion; centre in voxel coordinates, semi-axes in millimetres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub centre: [f64; 3],
    pub semi_axes_mm: [f64; 3],
}

impl Lesion {
    /// Normalised ellipsoidal radius of voxel `p` (1 on the surface).
    pub fn rho(&self, p: [f64; 3], spacing: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.centre[i]) * spacing[i] / self.semi_axes_mm[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, p: [f64; 3], spacing: [f64; 3]) -> bool {
        self.rho(p, spacing) <= 1.0
    }

    fn scaled(&self, s: f64) -> Self {
        Self { centre: self.centre, semi_axes_mm: self.semi_axes_mm.map(|a| a * s) }
    }

    fn bounding_radius_mm(&self) -> f64 {
        self.semi_axes_mm.iter().copied().fold(0.0, f64::max)
    }

    /// Inclusive voxel bounds of the lesion (plus `pad` voxels), clipped to `shape`.
    fn voxel_bounds(&self, spacing: [f64; 3], shape: [usize; 3], pad: f64) -> [(usize, usize); 3] {
        std::array::from_fn(|i| {
            let ext = self.semi_axes_mm[i] / spacing[i] + pad;
            let lo = (self.centre[i] - ext).floor().max(0.0) as usize;
            let hi = ((self.centre[i] + ext).ceil().max(0.0) as usize).min(shape[i] - 1);
            (lo, hi)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Organ {
    pub centre: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Organ {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|i| ((p[i] - self.centre[i]) / self.semi_axes[i]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// One generated patient plus everything needed to check it.
#[derive(Clone, Debug)]
pub struct PhantomPatient {
    pub patient_id: String,
    pub seed: u64,
    pub signature: Signature,
    pub baseline_lesions: Vec<Lesion>,
    pub followup_lesions: Vec<Lesion>,
    /// Follow-up voxel `p` shows the anatomy of baseline voxel `p - shift`.
    pub shift: [i64; 3],
    pub study: PatientStudy<f32>,
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

fn draw_signature(cfg: &PhantomConfig, shifted: bool, rng: &mut ChaCha8Rng) -> Signature {
    let s = if shifted { cfg.domain_shift } else { 0.0 };
    let contrast_scale = 1.0 / (1.0 + s);
    Signature {
        base_intensity: uniform(rng, cfg.base_intensity),
        texture_smoothness: uniform(rng, cfg.texture_smoothness),
        texture_amplitude: uniform(rng, cfg.texture_amplitude) * (1.0 + s),
        contrast_a: uniform(rng, cfg.contrast_a) * contrast_scale,
        contrast_b: uniform(rng, cfg.contrast_b) * contrast_scale,
    }
}

/// Separable Gaussian blur with clamped borders; `sigma` per axis in voxels.
fn blur(field: &mut [f64], shape: [usize; 3], sigma: [f64; 3]) {
    let strides = [shape[1] * shape[2], shape[2], 1];
    for axis in 0..3 {
        let s = sigma[axis];
        if s <= 0.0 {
            continue;
        }
        let r = (3.0 * s).ceil() as isize;
        let kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * s * s)).exp()).collect();
        let norm: f64 = kernel.iter().sum();
        let n = shape[axis] as isize;
        let stride = strides[axis];
        let mut line = vec![0.0; shape[axis]];
        for start in 0..field.len() {
            if !(start / stride).is_multiple_of(shape[axis]) {
                continue;
            }
            for (i, v) in line.iter_mut().enumerate() {
                *v = field[start + i * stride];
            }
            for i in 0..n {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let j = (i + k as isize - r).clamp(0, n - 1) as usize;
                    acc += w * line[j];
                }
                field[start + i as usize * stride] = acc / norm;
            }
        }
    }
}

/// Unit-variance smooth noise on a grid padded by `pad` voxels per side.
fn texture_field(shape: [usize; 3], pad: usize, smooth: f64, spacing: [f64; 3], rng: &mut ChaCha8Rng) -> (Vec<f64>, [usize; 3]) {
    let big = shape.map(|s| s + 2 * pad);
    let mut f: Vec<f64> = (0..big.iter().product::<usize>()).map(|_| rng.sample(StandardNormal)).collect();
    let sigma = [smooth * spacing[1] / spacing[0], smooth, smooth * spacing[1] / spacing[2]];
    blur(&mut f, big, sigma);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
    for v in &mut f {
        *v = (*v - mean) / sd;
    }
    (f, big)
}

fn rasterize(lesion: &Lesion, spacing: [f64; 3], shape: [usize; 3], mut visit: impl FnMut(usize, usize, usize)) {
    let b = lesion.voxel_bounds(spacing, shape, 1.0);
    for z in b[0].0..=b[0].1 {
        for y in b[1].0..=b[1].1 {
            for x in b[2].0..=b[2].1 {
                if lesion.contains([z as f64, y as f64, x as f64], spacing) {
                    visit(z, y, x);
                }
            }
        }
    }
}

/// A lesion fits when every voxel it covers lies in the organ and it keeps a
/// one-voxel gap to every other lesion.
fn fits(lesion: &Lesion, organ: &Organ, others: &[Lesion], spacing: [f64; 3], shape: [usize; 3]) -> bool {
    let gap = spacing.iter().copied().fold(0.0, f64::max);
    for o in others {
        let d: f64 = (0..3).map(|i| ((lesion.centre[i] - o.centre[i]) * spacing[i]).powi(2)).sum::<f64>().sqrt();
        if d < lesion.bounding_radius_mm() + o.bounding_radius_mm() + gap {
            return false;
        }
    }
    let mut ok = true;
    let mut covers = false;
    rasterize(lesion, spacing, shape, |z, y, x| {
        covers = true;
        ok &= organ.contains([z as f64, y as f64, x as f64]);
    });
    // Bounds are clipped to the volume, so a lesion poking outside is caught here.
    let b = lesion.voxel_bounds(spacing, shape, 0.0);
    let inside_volume = (0..3).all(|i| {
        let ext = lesion.semi_axes_mm[i] / spacing[i];
        lesion.centre[i] - ext >= 0.0 && lesion.centre[i] + ext <= (shape[i] - 1) as f64 && b[i].0 <= b[i].1
    });
    ok && covers && inside_volume
}

fn draw_lesion(cfg: &PhantomConfig, organ: &Organ, others: &[Lesion], rng: &mut ChaCha8Rng) -> Result<Lesion> {
    let (rlo, rhi) = cfg.lesion_radius_mm;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let r = (uniform(rng, (rlo.ln(), rhi.ln()))).exp();
        let semi_axes_mm = [0, 1, 2].map(|_| r * rng.random_range(0.8..1.2));
        let centre: [f64; 3] = std::array::from_fn(|i| organ.centre[i] + organ.semi_axes[i] * rng.random_range(-1.0..1.0));
        let l = Lesion { centre, semi_axes_mm };
        if organ.contains(centre) && fits(&l, organ, others, cfg.spacing, cfg.shape) {
            return Ok(l);
        }
    }
    Err(Error::Generation(format!("could not place a lesion after {PLACEMENT_ATTEMPTS} attempts")))
}

fn evolve(cfg: &PhantomConfig, organ: &Organ, baseline: &[Lesion], rng: &mut ChaCha8Rng) -> Result<Vec<Lesion>> {
    let f = &cfg.followup;
    let (min_n, max_n) = cfg.lesions_per_patient;
    let mut out: Vec<Lesion> = Vec::with_capacity(baseline.len() + 1);
    let mut remaining = baseline.len();
    for l in baseline {
        let vanish = rng.random::<f64>() < f.p_disappear;
        let scale = uniform(rng, f.scale_range);
        remaining -= 1;
        if vanish && out.len() + remaining + 1 > min_n {
            continue;
        }
        // The drawn scale first, then back toward the baseline size, then smaller.
        let toward_one = (1..=8).map(|k| scale + (1.0 - scale) * k as f64 / 8.0);
        let shrinking = (1..=20).map(|k| 0.9f64.powi(k));
        let fitted = std::iter::once(scale)
            .chain(toward_one)
            .chain(shrinking)
            .map(|s| l.scaled(s))
            .find(|cand| fits(cand, organ, &out, cfg.spacing, cfg.shape));
        match fitted {
            Some(cand) => out.push(cand),
            None if out.len() + remaining >= min_n => {}
            None => return Err(Error::Generation("follow-up lesion no longer fits".into())),
        }
    }
    if out.len() < max_n && rng.random::<f64>() < f.p_new {
        let l = draw_lesion(cfg, organ, &out, rng)?;
        out.push(l);
    }
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Renders one exam. `offset` maps exam voxels into the padded texture grid.
#[allow(clippy::too_many_arguments)]
fn render(
    cfg: &PhantomConfig,
    sig: &Signature,
    organ: &Organ,
    lesions: &[Lesion],
    texture: &(Vec<f64>, [usize; 3]),
    offset: [usize; 3],
    noise: &mut ChaCha8Rng,
    exam_id: String,
    timepoint: Timepoint,
) -> Result<MultiSequenceExam<f32>> {
    let shape = cfg.shape;
    let n: usize = shape.iter().product();
    let (tex, big) = texture;
    let mut lesion_map = vec![0.0f64; n];
    let mut annotation = vec![0u8; n];
    let idx = |z: usize, y: usize, x: usize| (z * shape[1] + y) * shape[2] + x;
    for l in lesions {
        let k = l.semi_axes_mm.iter().copied().fold(f64::INFINITY, f64::min) / cfg.lesion_edge_mm;
        let b = l.voxel_bounds(cfg.spacing, shape, 3.0);
        for z in b[0].0..=b[0].1 {
            for y in b[1].0..=b[1].1 {
                for x in b[2].0..=b[2].1 {
                    let rho = l.rho([z as f64, y as f64, x as f64], cfg.spacing);
                    let v = sigmoid((1.0 - rho) * k);
                    let i = idx(z, y, x);
                    lesion_map[i] = lesion_map[i].max(v);
                    if rho <= 1.0 {
                        annotation[i] = 1;
                    }
                }
            }
        }
    }
    let mut organ_mask = vec![0u8; n];
    let mut a0 = vec![0.0f32; n];
    let mut a1 = vec![0.0f32; n];
    let mut b0 = vec![0.0f32; n];
    let i0 = sig.base_intensity;
    let amp = sig.texture_amplitude;
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let i = idx(z, y, x);
                let t = tex[((z + offset[0]) * big[1] + y + offset[1]) * big[2] + x + offset[2]];
                let inside = organ.contains([z as f64, y as f64, x as f64]);
                organ_mask[i] = u8::from(inside);
                let tissue = if inside { i0 * (1.0 + amp * t) } else { 0.4 * i0 * (1.0 + 0.5 * amp * t) };
                let les = lesion_map[i];
                let nz = |r: &mut ChaCha8Rng| cfg.noise_sd * r.sample::<f64, _>(StandardNormal);
                a0[i] = (tissue + i0 * sig.contrast_a * les + nz(noise)) as f32;
                a1[i] = (0.9 * tissue + 1.3 * i0 * sig.contrast_a * les + nz(noise)) as f32;
                let bt = (1.5 * tissue).tanh() - 0.8 * sig.contrast_b * les;
                b0[i] = (bt + nz(noise)) as f32;
            }
        }
    }
    let vol = |d: Vec<f32>| Volume::from_vec(shape, cfg.spacing, d);
    MultiSequenceExam::new(
        exam_id,
        timepoint,
        SequenceStack::new("seq_a", vec![vol(a0)?, vol(a1)?])?,
        SequenceStack::new("seq_b", vec![vol(b0)?])?,
        Mask::from_vec(shape, cfg.spacing, organ_mask)?,
        Some(Mask::from_vec(shape, cfg.spacing, annotation)?),
    )
}

/// Generates a baseline/follow-up pair. `shifted` draws the signature from the
/// test-cohort distribution.
pub fn generate_patient(cfg: &PhantomConfig, patient_id: &str, patient_seed: u64, shifted: bool) -> Result<PhantomPatient> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(patient_seed);
    let sig = draw_signature(cfg, shifted, &mut rng);
    let ms = cfg.followup.max_shift;
    let pad = ms as usize;
    let texture = texture_field(cfg.shape, pad, sig.texture_smoothness, cfg.spacing, &mut rng);
    let centre: [f64; 3] = std::array::from_fn(|i| (cfg.shape[i] as f64 - 1.0) / 2.0 + rng.random_range(-1.0..1.0));
    let organ = Organ { centre, semi_axes: cfg.organ_semi_axes };
    let (lo, hi) = cfg.lesions_per_patient;
    let count = rng.random_range(lo..=hi);
    let mut baseline_lesions = Vec::with_capacity(count);
    for _ in 0..count {
        let l = draw_lesion(cfg, &organ, &baseline_lesions, &mut rng)?;
        baseline_lesions.push(l);
    }
    let followup_lesions = evolve(cfg, &organ, &baseline_lesions, &mut rng)?;
    let shift: [i64; 3] = std::array::from_fn(|_| if ms > 0 { rng.random_range(-ms..=ms) } else { 0 });

    let mut noise_base = ChaCha8Rng::seed_from_u64(rng.random());
    let mut noise_fu = ChaCha8Rng::seed_from_u64(rng.random());
    let baseline = render(
        cfg,
        &sig,
        &organ,
        &baseline_lesions,
        &texture,
        [pad; 3],
        &mut noise_base,
        format!("{patient_id}_base"),
        Timepoint::Baseline,
    )?;
    let moved = |p: [f64; 3]| std::array::from_fn(|i| p[i] + shift[i] as f64);
    let fu_organ = Organ { centre: moved(organ.centre), semi_axes: organ.semi_axes };
    let fu_lesions: Vec<Lesion> =
        followup_lesions.iter().map(|l| Lesion { centre: moved(l.centre), semi_axes_mm: l.semi_axes_mm }).collect();
    let fu_offset = std::array::from_fn(|i| (pad as i64 - shift[i]) as usize);
    let followup = render(
        cfg,
        &sig,
        &fu_organ,
        &fu_lesions,
        &texture,
        fu_offset,
        &mut noise_fu,
        format!("{patient_id}_fu"),
        Timepoint::Followup,
    )?;
    Ok(PhantomPatient {
        patient_id: patient_id.to_string(),
        seed: patient_seed,
        signature: sig,
        baseline_lesions,
        followup_lesions: fu_lesions,
        shift,
        study: PatientStudy::new(patient_id, baseline, followup)?,
    })
}

pub struct Cohort {
    pub seed: u64,
    /// Single-timepoint training exams (baselines of unshifted patients).
    pub train: Vec<PhantomPatient>,
    pub test: Vec<PhantomPatient>,
}

impl Cohort {
    pub fn train_exams(&self) -> Vec<MultiSequenceExam<f32>> {
        self.train.iter().map(|p| p.study.baseline.clone()).collect()
    }
}

/// Per-patient seeds are drawn from a stream seeded by `seed`; train patients
/// come first.
pub fn generate_cohort(cfg: &PhantomConfig, n_train: usize, n_test: usize, seed: u64) -> Result<Cohort> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("a cohort needs at least one train and one test patient".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_seeds: Vec<u64> = (0..n_train).map(|_| rng.random()).collect();
    let test_seeds: Vec<u64> = (0..n_test).map(|_| rng.random()).collect();
    let train = train_seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| generate_patient(cfg, &format!("train{i:02}"), s, false))
        .collect::<Result<_>>()?;
    let test = test_seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| generate_patient(cfg, &format!("test{i:02}"), s, true))
        .collect::<Result<_>>()?;
    Ok(Cohort { seed, train, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEntry {
    pub patient_id: String,
    pub seed: u64,
    pub exam: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestEntry {
    pub patient_id: String,
    pub seed: u64,
    pub baseline: PathBuf,
    pub followup: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub seed: u64,
    pub config: PhantomConfig,
    pub train: Vec<TrainEntry>,
    pub test: Vec<TestEntry>,
}

impl CohortManifest {
    pub const FILE_NAME: &'static str = "cohort.json";

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Writes every exam under `dir` plus `cohort.json`; paths in the manifest
/// are relative to `dir`.
pub fn write_cohort(cohort: &Cohort, cfg: &PhantomConfig, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rel = |p: PathBuf| p.strip_prefix(dir).map(Path::to_path_buf).unwrap_or(p);
    let mut train = Vec::new();
    for p in &cohort.train {
        let m = save_exam(&p.study.baseline, &p.patient_id, dir.join("train"))?;
        train.push(TrainEntry { patient_id: p.patient_id.clone(), seed: p.seed, exam: rel(m) });
    }
    let mut test = Vec::new();
    for p in &cohort.test {
        let sub = dir.join("test").join(&p.patient_id);
        let b = save_exam(&p.study.baseline, &p.patient_id, &sub)?;
        let f = save_exam(&p.study.followup, &p.patient_id, &sub)?;
        test.push(TestEntry { patient_id: p.patient_id.clone(), seed: p.seed, baseline: rel(b), followup: rel(f) });
    }
    let manifest = CohortManifest { seed: cohort.seed, config: cfg.clone(), train, test };
    let path = dir.join(CohortManifest::FILE_NAME);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig {
            shape: [12, 40, 40],
            organ_semi_axes: [5.0, 16.0, 17.0],
            lesions_per_patient: (1, 3),
            lesion_radius_mm: (3.0, 6.0),
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small();
        let a = generate_patient(&cfg, "p", 7, true).unwrap();
        let b = generate_patient(&cfg, "p", 7, true).unwrap();
        assert_eq!(a.study, b.study);
        let c = generate_patient(&cfg, "p", 8, true).unwrap();
        assert_ne!(a.study.baseline.seq_a, c.study.baseline.seq_a);
    }

    #[test]
    fn annotation_is_the_union_of_lesion_ellipsoids() {
        let cfg = small();
        for seed in 0..5 {
            let p = generate_patient(&cfg, "p", seed, false).unwrap();
            for (exam, lesions) in [(&p.study.baseline, &p.baseline_lesions), (&p.study.followup, &p.followup_lesions)] {
                let ann = exam.annotation().unwrap();
                let (lo, hi) = cfg.lesions_per_patient;
                assert!((lo..=hi).contains(&lesions.len()));
                for (i, &v) in ann.data().iter().enumerate() {
                    let [z, y, x] = ann.coords(i);
                    let p = [z as f64, y as f64, x as f64];
                    let want = lesions.iter().any(|l| l.contains(p, cfg.spacing));
                    assert_eq!(v == 1, want);
                    if v == 1 {
                        assert_eq!(exam.organ_mask.data()[i], 1);
                    }
                }
            }
        }
    }

    #[test]
    fn noise_level_matches_configuration() {
        let cfg = small();
        let quiet = PhantomConfig { noise_sd: 0.0, ..cfg.clone() };
        let noisy = generate_patient(&cfg, "p", 3, false).unwrap();
        let clean = generate_patient(&quiet, "p", 3, false).unwrap();
        let (mut n, mut ss) = (0usize, 0.0f64);
        let organ = &clean.study.baseline.organ_mask;
        for ((a, b), &m) in noisy.study.baseline.seq_b.channels()[0]
            .data()
            .iter()
            .zip(clean.study.baseline.seq_b.channels()[0].data())
            .zip(organ.data())
        {
            if m == 1 {
                n += 1;
                ss += ((a - b) as f64).powi(2);
            }
        }
        let sd = (ss / n as f64).sqrt();
        assert!((sd - cfg.noise_sd).abs() < 0.2 * cfg.noise_sd, "{sd}");
    }

    #[test]
    fn invalid_config_names_the_field() {
        let cfg = PhantomConfig { contrast_a: (1.0, 0.5), ..Default::default() };
        assert!(cfg.validate().unwrap_err().to_string().contains("contrast_a"));
    }

    #[test]
    fn default_cohort_geometry() {
        let p = generate_patient(&PhantomConfig::default(), "p", 11, true).unwrap();
        assert_eq!(p.study.baseline.shape(), [32, 96, 96]);
        assert!(p.study.baseline.normalized().is_ok());
    }
}
