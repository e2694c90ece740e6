//! Configured runs: base training, per-patient fine-tuning variants and
//! cohort evaluation on follow-up exams.
//!
//! Every fine-tuned model of a patient shares the base trunk, so trunk
//! features of the follow-up are computed once and reused by all heads.

use crate::adaptation::{baseline_weight_map, score_slices, select_slices, SliceCount, SlicePool, SliceSelection, Weighting};
use crate::error::{Error, Result};
use crate::evaluation::{
    detection_metrics, repeat_rng, segmentation_report, uncertainty_from_samples, CohortRow, DetectionReport,
    SegmentationReport, DEFAULT_REPEATS,
};
use crate::inference::{exam_features, head_probabilities, ExamFeatures};
use crate::network::checkpoint::named_tensors;
use crate::network::{NetworkConfig, NetworkParams, HEAD_LAYERS};
use crate::phantom::{CohortManifest, PhantomConfig};
use crate::postprocess::{connected_components, postprocess_pipeline, Task};
use crate::training::{finetune, TrainConfig, FINETUNE_ITERATIONS};
use crate::volume::manifest::load_exam;
use crate::volume::{MultiSequenceExam, PatientStudy, Volume};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub n_slices: SliceCount,
    pub pool: SlicePool,
    pub weighting: Weighting,
    pub iterations: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            n_slices: SliceCount::All,
            pool: SlicePool::AllOrganSlices,
            weighting: Weighting::None,
            iterations: FINETUNE_ITERATIONS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub task: Task,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { task: Task::Detection }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    pub n_repeats: usize,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self { n_repeats: DEFAULT_REPEATS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self { n_train: 10, n_test: 10 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Tile core size for slice inference; whole slices when absent.
    pub tile: Option<usize>,
}

/// Relative paths are resolved against the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Cohort directory holding `cohort.json`.
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data: "cohort".into(), checkpoints: "checkpoints".into(), output: "output".into() }
    }
}

/// Everything a command needs. `seed` drives training, fine-tuning and
/// MC dropout; `phantom.seed` drives cohort generation. The `seed` fields of
/// the training section are overwritten by `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub adaptation: AdaptationConfig,
    pub postprocess: PostprocessConfig,
    pub uncertainty: UncertaintyConfig,
    pub phantom: PhantomConfig,
    pub cohort: CohortConfig,
    pub inference: InferenceConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            network: NetworkConfig::default(),
            training: TrainConfig::default(),
            adaptation: AdaptationConfig::default(),
            postprocess: PostprocessConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            phantom: PhantomConfig::default(),
            cohort: CohortConfig::default(),
            inference: InferenceConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// The reduced setting used for phantom reproduction: 16 kernels per
    /// layer, 64-pixel patches and 1500 base iterations.
    pub fn desk_scale() -> Self {
        let mut cfg = Self::default();
        cfg.network.n_kernels = 16;
        cfg.training.iterations = 1500;
        cfg.training.patch_size = 64;
        cfg
    }

    /// TOML, or JSON when the extension is `.json`.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.data, &mut cfg.paths.checkpoints, &mut cfg.paths.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.training.validate()?;
        self.phantom.validate()?;
        if self.uncertainty.n_repeats < 2 {
            return Err(Error::Config("uncertainty.n_repeats must be >= 2".into()));
        }
        if self.cohort.n_train == 0 || self.cohort.n_test == 0 {
            return Err(Error::Config("cohort.n_train and cohort.n_test must be >= 1".into()));
        }
        if self.inference.tile == Some(0) {
            return Err(Error::Config("inference.tile must be positive".into()));
        }
        Ok(())
    }

    pub fn base_training(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.training.clone() }
    }

    pub fn finetuning(&self, iterations: usize) -> TrainConfig {
        TrainConfig { seed: self.seed, iterations, ..self.training.clone() }
    }

    /// The fine-tuning variant described by the adaptation section.
    pub fn variant(&self) -> Variant {
        let a = &self.adaptation;
        Variant::new("patient_specific", a.n_slices, a.pool, a.weighting, a.iterations)
    }
}

/// A cohort read back from disk.
pub struct LoadedCohort {
    pub manifest: CohortManifest,
    pub train: Vec<MultiSequenceExam<f32>>,
    pub test: Vec<PatientStudy<f32>>,
}

impl LoadedCohort {
    pub fn study(&self, patient_id: &str) -> Result<&PatientStudy<f32>> {
        self.test
            .iter()
            .find(|s| s.patient_id == patient_id)
            .ok_or_else(|| Error::Data(format!("patient {patient_id} is not in the test cohort")))
    }
}

/// Reads `cohort.json` in `dir` and every exam it lists.
pub fn load_cohort(dir: impl AsRef<Path>) -> Result<LoadedCohort> {
    let dir = dir.as_ref();
    let manifest = CohortManifest::read(dir.join(CohortManifest::FILE_NAME))?;
    let train = manifest.train.iter().map(|e| Ok(load_exam(dir.join(&e.exam))?.1)).collect::<Result<Vec<_>>>()?;
    let test = manifest
        .test
        .iter()
        .map(|e| PatientStudy::new(&e.patient_id, load_exam(dir.join(&e.baseline))?.1, load_exam(dir.join(&e.followup))?.1))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedCohort { manifest, train, test })
}

/// One way of fine-tuning a patient's model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub n_slices: SliceCount,
    pub pool: SlicePool,
    pub weighting: Weighting,
    pub iterations: usize,
}

impl Variant {
    pub fn new(label: impl Into<String>, n_slices: SliceCount, pool: SlicePool, weighting: Weighting, iterations: usize) -> Self {
        Self { label: label.into(), n_slices, pool, weighting, iterations }
    }
}

pub const BASE_MODEL: &str = "base";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    IterationsSweep,
    SlicesSweep,
    Weighting,
    Uncertainty,
}

pub const SWEEP_ITERATIONS: [usize; 5] = [0, 50, 100, 500, 1000];

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iterations_sweep" => Ok(Self::IterationsSweep),
            "slices_sweep" => Ok(Self::SlicesSweep),
            "weighting" => Ok(Self::Weighting),
            "uncertainty" => Ok(Self::Uncertainty),
            _ => Err(Error::Config(format!(
                "unknown experiment '{s}' (expected iterations_sweep, slices_sweep, weighting or uncertainty)"
            ))),
        }
    }
}

impl std::fmt::Display for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::IterationsSweep => "iterations_sweep",
            Self::SlicesSweep => "slices_sweep",
            Self::Weighting => "weighting",
            Self::Uncertainty => "uncertainty",
        })
    }
}

impl Experiment {
    /// Fine-tuning variants compared against the base model. Factors not
    /// swept come from the adaptation section.
    pub fn variants(self, cfg: &RunConfig) -> Vec<Variant> {
        let a = &cfg.adaptation;
        match self {
            Self::IterationsSweep => SWEEP_ITERATIONS
                .iter()
                .map(|&it| Variant::new(format!("{it}_iter"), a.n_slices, a.pool, a.weighting, it))
                .collect(),
            Self::SlicesSweep => [SliceCount::Count(1), SliceCount::Count(2), SliceCount::All]
                .into_iter()
                .map(|n| {
                    let label = match n {
                        SliceCount::Count(1) => "1_slice".to_string(),
                        SliceCount::Count(k) => format!("{k}_slices"),
                        SliceCount::All => "all_slices".to_string(),
                    };
                    Variant::new(label, n, a.pool, a.weighting, a.iterations)
                })
                .collect(),
            Self::Weighting => [Weighting::None, Weighting::Detection, Weighting::Segmentation]
                .into_iter()
                .map(|w| Variant::new(format!("weighting_{w}"), a.n_slices, a.pool, w, a.iterations))
                .collect(),
            Self::Uncertainty => vec![cfg.variant()],
        }
    }

    pub fn needs_uncertainty(self) -> bool {
        self == Self::Uncertainty
    }
}

/// Whether two networks agree bit for bit outside the head.
pub fn same_trunk(a: &NetworkParams<f32>, b: &NetworkParams<f32>) -> bool {
    if a.config() != b.config() {
        return false;
    }
    let head = |n: &str| HEAD_LAYERS.iter().any(|h| n.strip_prefix(h).is_some_and(|r| r.starts_with('/')));
    named_tensors(a)
        .into_iter()
        .zip(named_tensors(b))
        .filter(|(x, _)| !head(&x.0))
        .all(|(x, y)| x.2.iter().map(|v| v.to_bits()).eq(y.2.iter().map(|v| v.to_bits())))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UncertaintyOptions {
    pub task: Task,
    pub n_repeats: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub model: String,
    pub detection: DetectionReport,
    pub segmentation: SegmentationReport,
    pub uncertainty: Option<f64>,
}

impl ModelEvaluation {
    pub fn row(&self, patient_id: &str) -> CohortRow {
        let mut row = CohortRow::new(patient_id, &self.model).with_detection(&self.detection).with_segmentation(&self.segmentation);
        row.uncertainty = self.uncertainty;
        row
    }
}

/// Scores a probability volume against the exam's annotation: detection
/// metrics from the detection pipeline, overlap metrics from the
/// segmentation pipeline.
pub fn score_prediction(probs: &Volume<f32>, exam: &MultiSequenceExam<f32>) -> Result<(DetectionReport, SegmentationReport)> {
    let truth = exam.annotation()?;
    let (_, pred_objects) = postprocess_pipeline(probs, &exam.organ_mask, Task::Detection)?;
    let detection = detection_metrics(&pred_objects, &connected_components(truth))?;
    let (seg, _) = postprocess_pipeline(probs, &exam.organ_mask, Task::Segmentation)?;
    Ok((detection, segmentation_report(&seg, truth)?))
}

/// Evaluates one head on precomputed trunk features of `exam`.
pub fn evaluate_features(
    model: &str,
    params: &NetworkParams<f32>,
    feats: &ExamFeatures<f32>,
    exam: &MultiSequenceExam<f32>,
    uncertainty: Option<UncertaintyOptions>,
) -> Result<ModelEvaluation> {
    let probs = head_probabilities(params, feats, false, &mut repeat_rng(0, 0))?;
    let (detection, segmentation) = score_prediction(&probs, exam)?;
    let uncertainty = match uncertainty {
        Some(u) => {
            let samples = (0..u.n_repeats)
                .map(|r| head_probabilities(params, feats, true, &mut repeat_rng(u.seed, r)))
                .collect::<Result<Vec<_>>>()?;
            uncertainty_from_samples(&samples, &probs, &exam.organ_mask, u.task)?.summary
        }
        None => None,
    };
    Ok(ModelEvaluation { model: model.to_string(), detection, segmentation, uncertainty })
}

/// The fine-tuned model of one variant plus what went into it.
pub struct TunedModel {
    pub variant: Variant,
    pub selection: SliceSelection,
    pub weights: Option<Volume<f32>>,
    pub params: NetworkParams<f32>,
}

/// Fine-tunes `base` on the patient's baseline once per variant. Slice
/// rankings and weight maps come from the base network.
pub fn finetune_variants(
    cfg: &RunConfig,
    base: &NetworkParams<f32>,
    baseline: &MultiSequenceExam<f32>,
    variants: &[Variant],
) -> Result<Vec<TunedModel>> {
    let tile = cfg.inference.tile;
    let probs = crate::inference::predict_volume(base, baseline, tile)?;
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        let ranking = score_slices(&probs, &baseline.organ_mask, v.pool, baseline.annotation.as_ref())?;
        let (selected, truncated) = select_slices(&ranking, v.n_slices)?;
        let selection = SliceSelection { exam_id: baseline.exam_id.clone(), pool: v.pool, ranking, selected, truncated };
        let weights = baseline_weight_map(base, baseline, v.weighting, tile)?;
        let params = finetune(base, &cfg.finetuning(v.iterations), baseline, &selection.selected, weights.as_ref())?.params;
        out.push(TunedModel { variant: v.clone(), selection, weights, params });
    }
    Ok(out)
}

/// Result of fine-tuning and evaluating one patient.
pub struct PatientOutcome {
    pub patient_id: String,
    pub tuned: Vec<TunedModel>,
    /// Base model first, then one entry per variant.
    pub evaluations: Vec<ModelEvaluation>,
}

impl PatientOutcome {
    pub fn rows(&self) -> Vec<CohortRow> {
        self.evaluations.iter().map(|e| e.row(&self.patient_id)).collect()
    }
}

pub fn run_patient(
    cfg: &RunConfig,
    base: &NetworkParams<f32>,
    study: &PatientStudy<f32>,
    variants: &[Variant],
    uncertainty: Option<UncertaintyOptions>,
) -> Result<PatientOutcome> {
    let tuned = finetune_variants(cfg, base, &study.baseline, variants)?;
    let feats = exam_features(base, &study.followup, cfg.inference.tile)?;
    let mut evaluations = vec![evaluate_features(BASE_MODEL, base, &feats, &study.followup, uncertainty)?];
    for t in &tuned {
        if !same_trunk(base, &t.params) {
            return Err(Error::Data(format!("{}: fine-tuning changed the trunk", t.variant.label)));
        }
        evaluations.push(evaluate_features(&t.variant.label, &t.params, &feats, &study.followup, uncertainty)?);
    }
    Ok(PatientOutcome { patient_id: study.patient_id.clone(), tuned, evaluations })
}

/// Mean and population SD of the defined values.
fn moments(values: impl Iterator<Item = Option<f64>>) -> (usize, Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return (0, None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    (v.len(), Some(mean), Some(sd))
}

/// Cohort mean and SD of each metric for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub n_patients: usize,
    pub tpr_mean: Option<f64>,
    pub tpr_sd: Option<f64>,
    pub fpc_mean: Option<f64>,
    pub f1_mean: Option<f64>,
    pub f1_sd: Option<f64>,
    pub dice_mean: Option<f64>,
    pub dice_sd: Option<f64>,
    pub avd_mean: Option<f64>,
    pub hd95_mean: Option<f64>,
    pub uncertainty_mean: Option<f64>,
    pub uncertainty_sd: Option<f64>,
}

/// One summary row per model, in order of first appearance.
pub fn summarize(rows: &[CohortRow]) -> Vec<SummaryRow> {
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    models
        .into_iter()
        .map(|m| {
            let of = || rows.iter().filter(move |r| r.model == m);
            let (_, tpr_mean, tpr_sd) = moments(of().map(|r| r.tpr));
            let (_, fpc_mean, _) = moments(of().map(|r| r.fpc.map(|v| v as f64)));
            let (_, f1_mean, f1_sd) = moments(of().map(|r| r.f1));
            let (_, dice_mean, dice_sd) = moments(of().map(|r| r.dice));
            let (_, avd_mean, _) = moments(of().map(|r| r.avd));
            let (_, hd95_mean, _) = moments(of().map(|r| r.hd95));
            let (_, uncertainty_mean, uncertainty_sd) = moments(of().map(|r| r.uncertainty));
            SummaryRow {
                model: m.to_string(),
                n_patients: of().count(),
                tpr_mean,
                tpr_sd,
                fpc_mean,
                f1_mean,
                f1_sd,
                dice_mean,
                dice_sd,
                avd_mean,
                hd95_mean,
                uncertainty_mean,
                uncertainty_sd,
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(format!("csv: {e}")))
}

/// Fixed-width text rendering of a summary for terminals.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    let pm = |m: Option<f64>, s: Option<f64>| match (m, s) {
        (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
        _ => "-".to_string(),
    };
    let mut out = format!(
        "{:<16} {:>3} {:>15} {:>6} {:>15} {:>15} {:>8} {:>7} {:>15}\n",
        "model", "n", "TPR", "FPC", "F1", "Dice", "AVD%", "HD95", "uncertainty"
    );
    for r in rows {
        out += &format!(
            "{:<16} {:>3} {:>15} {:>6} {:>15} {:>15} {:>8} {:>7} {:>15}\n",
            r.model,
            r.n_patients,
            pm(r.tpr_mean, r.tpr_sd),
            f(r.fpc_mean),
            pm(r.f1_mean, r.f1_sd),
            pm(r.dice_mean, r.dice_sd),
            r.avd_mean.map_or("-".into(), |x| format!("{x:.1}")),
            r.hd95_mean.map_or("-".into(), |x| format!("{x:.2}")),
            pm(r.uncertainty_mean, r.uncertainty_sd),
        );
    }
    out
}
