//! Object-level detection metrics, voxel-level segmentation metrics and
//! Monte Carlo dropout uncertainty.

use crate::error::{Error, Result};
use crate::inference::{exam_features, head_probabilities};
use crate::network::NetworkParams;
use crate::postprocess::{postprocess_pipeline, LesionObjects, Task};
use crate::scalar::Scalar;
use crate::volume::{Mask, MultiSequenceExam, Volume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_REPEATS: usize = 25;

/// Threshold between small and large lesions.
pub const SIZE_THRESHOLD_CM3: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// `None` when there are no true lesions.
    pub tpr: Option<f64>,
    pub fpc: usize,
    /// `None` when nothing was predicted.
    pub precision: Option<f64>,
    pub f1: f64,
    pub n_true: usize,
    pub n_pred: usize,
    /// Per true lesion, in object-id order.
    pub detected: Vec<bool>,
    pub true_volumes_cm3: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub n: usize,
    pub n_detected: usize,
    /// `None` for an empty stratum.
    pub tpr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeSplit {
    pub threshold_cm3: f64,
    pub small: Stratum,
    pub large: Stratum,
}

fn check_geometry(a: &LesionObjects, b: &LesionObjects) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("object maps of shape {:?} and {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// Any voxel overlap between a predicted and a true object counts as a hit.
pub fn detection_metrics(pred: &LesionObjects, truth: &LesionObjects) -> Result<DetectionReport> {
    check_geometry(pred, truth)?;
    let mut detected = vec![false; truth.len()];
    let mut attached = vec![false; pred.len()];
    for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
        if p != 0 && t != 0 {
            detected[t as usize - 1] = true;
            attached[p as usize - 1] = true;
        }
    }
    let n_det = detected.iter().filter(|&&d| d).count();
    let n_att = attached.iter().filter(|&&a| a).count();
    let tpr = (!truth.is_empty()).then(|| n_det as f64 / truth.len() as f64);
    let precision = (!pred.is_empty()).then(|| n_att as f64 / pred.len() as f64);
    let (r, p) = (tpr.unwrap_or(0.0), precision.unwrap_or(0.0));
    let f1 = if r + p > 0.0 { 2.0 * r * p / (r + p) } else { 0.0 };
    Ok(DetectionReport {
        tpr,
        fpc: pred.len() - n_att,
        precision,
        f1,
        n_true: truth.len(),
        n_pred: pred.len(),
        detected,
        true_volumes_cm3: truth.objects.iter().map(|o| o.volume_cm3).collect(),
    })
}

/// Detection rate of true lesions below and at-or-above `threshold_cm3`.
pub fn lesion_size_split(report: &DetectionReport, threshold_cm3: f64) -> SizeSplit {
    let stratum = |small: bool| {
        let members: Vec<bool> = report
            .detected
            .iter()
            .zip(&report.true_volumes_cm3)
            .filter(|(_, &v)| (v < threshold_cm3) == small)
            .map(|(&d, _)| d)
            .collect();
        let n_detected = members.iter().filter(|&&d| d).count();
        Stratum { n: members.len(), n_detected, tpr: (!members.is_empty()).then(|| n_detected as f64 / members.len() as f64) }
    };
    SizeSplit { threshold_cm3, small: stratum(true), large: stratum(false) }
}

fn congruent(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("masks of shape {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `2|X ∩ Y| / (|X| + |Y|)`, 1 when both are empty.
pub fn dice(pred: &Mask, annot: &Mask) -> Result<f64> {
    congruent(pred, annot)?;
    let (mut inter, mut sx, mut sy) = (0usize, 0usize, 0usize);
    for (&p, &a) in pred.data().iter().zip(annot.data()) {
        let (p, a) = (p != 0, a != 0);
        inter += usize::from(p && a);
        sx += usize::from(p);
        sy += usize::from(a);
    }
    Ok(if sx + sy == 0 { 1.0 } else { 2.0 * inter as f64 / (sx + sy) as f64 })
}

/// Absolute volume difference in percent of the reference; `None` for an
/// empty reference.
pub fn avd(pred: &Mask, annot: &Mask) -> Result<Option<f64>> {
    congruent(pred, annot)?;
    let (vx, vy) = (pred.count() as f64, annot.count() as f64);
    Ok((vy > 0.0).then(|| (vx - vy).abs() / vy * 100.0))
}

/// Foreground voxels with a background face neighbour (outside counts as background).
pub fn boundary_voxels(m: &Mask) -> Vec<usize> {
    let [nz, ny, nx] = m.shape();
    let d = m.data();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                if d[i] == 0 {
                    continue;
                }
                let edge = z == 0
                    || y == 0
                    || x == 0
                    || z + 1 == nz
                    || y + 1 == ny
                    || x + 1 == nx
                    || d[i - ny * nx] == 0
                    || d[i + ny * nx] == 0
                    || d[i - nx] == 0
                    || d[i + nx] == 0
                    || d[i - 1] == 0
                    || d[i + 1] == 0;
                if edge {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// Squared lower envelope of parabolas along one line (exact 1D distance transform).
fn edt_line(f: &mut [f64], w: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + w * (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + w * (p * p) as f64;
                    let s = (fq - fp) / (2.0 * w * (q as f64 - p as f64));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    out.clear();
    if v.is_empty() {
        out.resize(n, f64::INFINITY);
    } else {
        let mut k = 0;
        for q in 0..n {
            while k + 1 < v.len() && z[k + 1] < q as f64 {
                k += 1;
            }
            let p = v[k];
            let dq = q as f64 - p as f64;
            out.push(f[p] + w * dq * dq);
        }
    }
    f.copy_from_slice(out);
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest seed.
pub fn squared_distance_transform(shape: [usize; 3], spacing: [f64; 3], seeds: &[usize]) -> Vec<f64> {
    let [nz, ny, nx] = shape;
    let mut d = vec![f64::INFINITY; nz * ny * nx];
    for &s in seeds {
        d[s] = 0.0;
    }
    let strides = [ny * nx, nx, 1];
    let (mut v, mut zb, mut out) = (Vec::new(), Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = shape[axis];
        let w = spacing[axis] * spacing[axis];
        let mut line = vec![0.0; n];
        for start in 0..d.len() {
            if (start / strides[axis]) % n != 0 {
                continue;
            }
            for (k, l) in line.iter_mut().enumerate() {
                *l = d[start + k * strides[axis]];
            }
            edt_line(&mut line, w, &mut v, &mut zb, &mut out);
            for (k, &l) in line.iter().enumerate() {
                d[start + k * strides[axis]] = l;
            }
        }
    }
    d
}

/// Nearest-rank percentile of unsorted values.
pub fn nearest_rank(values: &mut [f64], pct: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * values.len() as f64).ceil().max(1.0) as usize;
    values[rank - 1]
}

fn directed_hd95(from: &[usize], to_dt: &[f64]) -> f64 {
    let mut d: Vec<f64> = from.iter().map(|&i| to_dt[i].sqrt()).collect();
    nearest_rank(&mut d, 95.0)
}

/// Symmetric 95th-percentile boundary distance in mm; `None` if either mask is empty.
pub fn hd95(pred: &Mask, annot: &Mask) -> Result<Option<f64>> {
    congruent(pred, annot)?;
    let (bp, ba) = (boundary_voxels(pred), boundary_voxels(annot));
    if bp.is_empty() || ba.is_empty() {
        return Ok(None);
    }
    let sp = annot.spacing();
    let to_a = squared_distance_transform(annot.shape(), sp, &ba);
    let to_p = squared_distance_transform(annot.shape(), sp, &bp);
    Ok(Some(directed_hd95(&bp, &to_a).max(directed_hd95(&ba, &to_p))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub dice: f64,
    pub avd_percent: Option<f64>,
    pub hd95_mm: Option<f64>,
}

pub fn segmentation_report(pred: &Mask, annot: &Mask) -> Result<SegmentationReport> {
    Ok(SegmentationReport { dice: dice(pred, annot)?, avd_percent: avd(pred, annot)?, hd95_mm: hd95(pred, annot)? })
}

/// Population standard deviation per voxel over repeated volumes.
pub fn population_sd<T: Scalar>(samples: &[Volume<T>]) -> Result<Volume<f32>> {
    let first = samples.first().ok_or_else(|| Error::Data("no samples".into()))?;
    for s in samples {
        first.check_shape(s, "sample")?;
    }
    let n = samples.len() as f64;
    let data = (0..first.len())
        .map(|i| {
            // Deviations from the first sample keep identical samples at exactly zero.
            let x0 = samples[0].data()[i].as_f64();
            let mean: f64 = samples.iter().map(|s| s.data()[i].as_f64() - x0).sum::<f64>() / n;
            let var: f64 = samples.iter().map(|s| (s.data()[i].as_f64() - x0 - mean).powi(2)).sum::<f64>() / n;
            var.sqrt() as f32
        })
        .collect();
    first.with_data(data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyReport {
    pub sd: Volume<f32>,
    /// Mean SD over detected-object voxels (detection) or max SD over organ
    /// voxels (segmentation); `None` when no object was detected.
    pub summary: Option<f64>,
    pub n_repeats: usize,
}

/// Sub-seed of repeat `r`: the same ChaCha stream family, one stream per repeat.
pub fn repeat_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64 + 1);
    rng
}

/// `n_repeats` dropout-on passes over the exam's head; trunk features are shared.
pub fn mc_dropout_uncertainty<T: Scalar>(
    params: &NetworkParams<T>,
    exam: &MultiSequenceExam<T>,
    n_repeats: usize,
    task: Task,
    seed: u64,
    tile: Option<usize>,
) -> Result<UncertaintyReport> {
    if n_repeats < 2 {
        return Err(Error::Config(format!("MC dropout needs at least 2 repeats, got {n_repeats}")));
    }
    let feats = exam_features(params, exam, tile)?;
    let samples = (0..n_repeats)
        .map(|r| head_probabilities(params, &feats, true, &mut repeat_rng(seed, r)))
        .collect::<Result<Vec<_>>>()?;
    let mean_probs = head_probabilities(params, &feats, false, &mut repeat_rng(seed, 0))?;
    uncertainty_from_samples(&samples, &mean_probs, &exam.organ_mask, task)
}

/// Summarises repeated probability volumes against the deterministic prediction `probs`.
pub fn uncertainty_from_samples<T: Scalar>(
    samples: &[Volume<T>],
    probs: &Volume<T>,
    organ: &Mask,
    task: Task,
) -> Result<UncertaintyReport> {
    let sd = population_sd(samples)?;
    sd.check_shape(organ, "organ mask")?;
    let summary = match task {
        Task::Segmentation => sd
            .data()
            .iter()
            .zip(organ.data())
            .filter(|(_, &m)| m != 0)
            .map(|(&s, _)| f64::from(s))
            .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s)))),
        Task::Detection => {
            let (mask, _) = postprocess_pipeline(probs, organ, Task::Detection)?;
            let vals: Vec<f64> = sd.data().iter().zip(mask.data()).filter(|(_, &m)| m != 0).map(|(&s, _)| f64::from(s)).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    Ok(UncertaintyReport { sd, summary, n_repeats: samples.len() })
}

/// One row of a cohort summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub patient_id: String,
    pub model: String,
    pub tpr: Option<f64>,
    pub fpc: Option<usize>,
    pub f1: Option<f64>,
    pub dice: Option<f64>,
    pub avd: Option<f64>,
    pub hd95: Option<f64>,
    pub uncertainty: Option<f64>,
}

impl CohortRow {
    pub fn new(patient_id: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            patient_id: patient_id.into(),
            model: model.into(),
            tpr: None,
            fpc: None,
            f1: None,
            dice: None,
            avd: None,
            hd95: None,
            uncertainty: None,
        }
    }

    pub fn with_detection(mut self, r: &DetectionReport) -> Self {
        self.tpr = r.tpr;
        self.fpc = Some(r.fpc);
        self.f1 = Some(r.f1);
        self
    }

    pub fn with_segmentation(mut self, r: &SegmentationReport) -> Self {
        self.dice = Some(r.dice);
        self.avd = r.avd_percent;
        self.hd95 = r.hd95_mm;
        self
    }
}

/// CSV with columns patient_id, model, tpr, fpc, f1, dice, avd, hd95,
/// uncertainty; undefined values are empty fields.
pub fn cohort_csv(rows: &[CohortRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(format!("csv: {e}")))
}

pub fn write_cohort_csv(rows: &[CohortRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, cohort_csv(rows)?).map_err(|e| Error::io(path, e))
}

pub fn read_cohort_csv(path: impl AsRef<Path>) -> Result<Vec<CohortRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))).collect()
}
