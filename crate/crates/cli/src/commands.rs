use crate::{Common, Model};
use followup_ft::adaptation::{baseline_weight_map, select_baseline_slices, SliceCount, SliceSelection, Weighting};
use followup_ft::evaluation::{
    detection_metrics, mc_dropout_uncertainty, segmentation_report, write_cohort_csv, CohortRow, DetectionReport,
    SegmentationReport,
};
use followup_ft::experiment::{
    load_cohort, run_patient, summarize, summary_csv, summary_table, Experiment, LoadedCohort, RunConfig,
    UncertaintyOptions, BASE_MODEL,
};
use followup_ft::inference::predict_volume;
use followup_ft::network::checkpoint::to_bytes;
use followup_ft::network::{load_checkpoint, save_checkpoint, NetworkParams};
use followup_ft::phantom::{generate_cohort, write_cohort, CohortManifest};
use followup_ft::postprocess::{connected_components, postprocess_pipeline, Task};
use followup_ft::training::{self, write_log};
use followup_ft::volume::manifest::load_exam;
use followup_ft::volume::nifti::{load_mask, write_mask, write_volume};
use followup_ft::{Error, MultiSequenceExam, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const CACHE_ENV: &str = "FOLLOWUP_FT_CACHE";

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.phantom.seed = s;
    }
    Ok(cfg)
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(text: &str, path: &Path) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_cohort(cfg: &RunConfig) -> Result<LoadedCohort> {
    let manifest = cfg.paths.data.join(CohortManifest::FILE_NAME);
    if !manifest.is_file() {
        return Err(Error::Data(format!("no cohort at {} (run gen-phantom first)", manifest.display())));
    }
    load_cohort(&cfg.paths.data)
}

fn base_checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoints.join("base.ckpt")
}

fn patient_checkpoint_path(cfg: &RunConfig, patient: &str) -> PathBuf {
    cfg.paths.checkpoints.join("patients").join(format!("{patient}.ckpt"))
}

fn load_base(cfg: &RunConfig) -> Result<NetworkParams<f32>> {
    let path = base_checkpoint_path(cfg);
    if !path.is_file() {
        return Err(Error::Data(format!("no base checkpoint at {} (run train-base first)", path.display())));
    }
    load_checkpoint(&path)
}

fn load_model(cfg: &RunConfig, model: Model, patient: &str) -> Result<NetworkParams<f32>> {
    match model {
        Model::Base => load_base(cfg),
        Model::Finetuned => {
            let path = patient_checkpoint_path(cfg, patient);
            if !path.is_file() {
                return Err(Error::Data(format!("no fine-tuned checkpoint for {patient} at {}", path.display())));
            }
            load_checkpoint(&path)
        }
    }
}

fn model_name(model: Model) -> &'static str {
    match model {
        Model::Base => BASE_MODEL,
        Model::Finetuned => "finetuned",
    }
}

pub fn gen_phantom(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let cohort = generate_cohort(&cfg.phantom, cfg.cohort.n_train, cfg.cohort.n_test, cfg.phantom.seed)?;
    let path = write_cohort(&cohort, &cfg.phantom, &cfg.paths.data)?;
    println!("{}", path.display());
    Ok(())
}

/// Cache key of a base checkpoint: network, training settings and the
/// exact cohort manifest.
fn cache_key(cfg: &RunConfig) -> Result<String> {
    let manifest = cfg.paths.data.join(CohortManifest::FILE_NAME);
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&cfg.network)?);
    h.update(serde_json::to_vec(&cfg.base_training())?);
    h.update(std::fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Trains (or fetches from the cache) the base network and writes
/// `base.ckpt` plus its loss log.
pub fn train_base(common: &Common, iterations: Option<usize>) -> Result<NetworkParams<f32>> {
    let mut cfg = load_config(common)?;
    if let Some(it) = iterations {
        cfg.training.iterations = it;
    }
    train_base_with(&cfg)
}

fn train_base_with(cfg: &RunConfig) -> Result<NetworkParams<f32>> {
    let cohort = require_cohort(cfg)?;
    let out = base_checkpoint_path(cfg);
    mkdir(&cfg.paths.checkpoints)?;
    let cached = match std::env::var_os(CACHE_ENV) {
        Some(dir) => Some(PathBuf::from(dir).join(format!("base-{}.ckpt", cache_key(cfg)?))),
        None => None,
    };
    if let Some(c) = cached.as_ref().filter(|c| c.is_file()) {
        std::fs::copy(c, &out).map_err(|e| Error::io(c, e))?;
        eprintln!("base checkpoint taken from cache {}", c.display());
        return load_checkpoint(&out);
    }
    let outcome = training::train_base(&cfg.network, &cfg.base_training(), &cohort.train)?;
    save_checkpoint(&outcome.params, &out)?;
    mkdir(&cfg.paths.output)?;
    write_log(&outcome.log, cfg.paths.output.join("train_base_log.jsonl"))?;
    if let Some(c) = cached {
        if let Some(parent) = c.parent() {
            mkdir(parent)?;
        }
        std::fs::copy(&out, &c).map_err(|e| Error::io(&c, e))?;
    }
    println!("{}", out.display());
    Ok(outcome.params)
}

fn patient_dir(cfg: &RunConfig, patient: &str) -> PathBuf {
    cfg.paths.output.join("patients").join(patient)
}

pub fn select_slices(common: &Common, patient: &str, n_slices: Option<SliceCount>) -> Result<()> {
    let cfg = load_config(common)?;
    let cohort = require_cohort(&cfg)?;
    let study = cohort.study(patient)?;
    let base = load_base(&cfg)?;
    let n = n_slices.unwrap_or(cfg.adaptation.n_slices);
    let sel = select_baseline_slices(&base, &study.baseline, cfg.adaptation.pool, n, cfg.inference.tile)?;
    let path = patient_dir(&cfg, patient).join("slices.json");
    mkdir(path.parent().unwrap_or(Path::new(".")))?;
    sel.write_json(&path)?;
    println!("{}", path.display());
    Ok(())
}

pub fn finetune(
    common: &Common,
    patient: &str,
    iterations: Option<usize>,
    n_slices: Option<SliceCount>,
    weighting: Option<Weighting>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let cohort = require_cohort(&cfg)?;
    let study = cohort.study(patient)?;
    let base = load_base(&cfg)?;
    let tile = cfg.inference.tile;
    let n = n_slices.unwrap_or(cfg.adaptation.n_slices);
    let weighting = weighting.unwrap_or(cfg.adaptation.weighting);
    let dir = patient_dir(&cfg, patient);
    mkdir(&dir)?;
    let sel: SliceSelection = select_baseline_slices(&base, &study.baseline, cfg.adaptation.pool, n, tile)?;
    sel.write_json(dir.join("slices.json"))?;
    let weights = baseline_weight_map(&base, &study.baseline, weighting, tile)?;
    if let Some(w) = &weights {
        write_volume(w, dir.join(format!("weights_{weighting}.nii.gz")))?;
    }
    let tcfg = cfg.finetuning(iterations.unwrap_or(cfg.adaptation.iterations));
    let outcome = training::finetune(&base, &tcfg, &study.baseline, &sel.selected, weights.as_ref())?;
    write_log(&outcome.log, dir.join("finetune_log.jsonl"))?;
    let out = patient_checkpoint_path(&cfg, patient);
    mkdir(out.parent().unwrap_or(Path::new(".")))?;
    save_checkpoint(&outcome.params, &out)?;
    println!("{}", out.display());
    Ok(())
}

fn write_prediction(params: &NetworkParams<f32>, exam: &MultiSequenceExam<f32>, task: Task, tile: Option<usize>, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    let probs = predict_volume(params, exam, tile)?;
    let (mask, objects) = postprocess_pipeline(&probs, &exam.organ_mask, task)?;
    let id = &exam.exam_id;
    write_volume(&probs, dir.join(format!("{id}_prob.nii.gz")))?;
    write_mask(&mask, dir.join(format!("{id}_mask.nii.gz")))?;
    objects.write_json(dir.join(format!("{id}_objects.json")))
}

pub fn predict(
    common: &Common,
    patients: &[String],
    model: Model,
    explicit: Option<(PathBuf, PathBuf)>,
    task: Option<Task>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let task = task.unwrap_or(cfg.postprocess.task);
    let tile = cfg.inference.tile;
    if let Some((ckpt, exam)) = explicit {
        let params = load_checkpoint(&ckpt)?;
        let (_, exam) = load_exam(&exam)?;
        let dir = out.unwrap_or_else(|| cfg.paths.output.join("predictions").join("custom"));
        write_prediction(&params, &exam, task, tile, &dir)?;
        println!("{}", dir.display());
        return Ok(());
    }
    let cohort = require_cohort(&cfg)?;
    let dir = out.unwrap_or_else(|| cfg.paths.output.join("predictions").join(model_name(model)));
    let ids: Vec<String> = if patients.is_empty() { cohort.test.iter().map(|s| s.patient_id.clone()).collect() } else { patients.to_vec() };
    let base = if model == Model::Base { Some(load_base(&cfg)?) } else { None };
    for id in &ids {
        let study = cohort.study(id)?;
        let params = match &base {
            Some(b) => b.clone(),
            None => load_model(&cfg, model, id)?,
        };
        write_prediction(&params, &study.followup, task, tile, &dir)?;
    }
    println!("{}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct ExamReport {
    patient_id: String,
    model: String,
    exam_id: String,
    detection: Option<DetectionReport>,
    segmentation: Option<SegmentationReport>,
}

/// Scores every model directory under the prediction root against the
/// follow-up annotations; writes `reports.json` and `cohort.csv`.
pub fn evaluate(common: &Common, pred: Option<PathBuf>, task: Option<Task>) -> Result<()> {
    let cfg = load_config(common)?;
    let cohort = require_cohort(&cfg)?;
    let root = pred.unwrap_or_else(|| cfg.paths.output.join("predictions"));
    let mut models: Vec<(String, PathBuf)> = std::fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    models.sort();
    if models.is_empty() {
        return Err(Error::Data(format!("no model directories under {}", root.display())));
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for study in &cohort.test {
        let exam = &study.followup;
        let truth = exam.annotation()?;
        for (name, dir) in &models {
            let path = dir.join(format!("{}_mask.nii.gz", exam.exam_id));
            if !path.is_file() {
                return Err(Error::Data(format!("missing prediction for exam {} ({})", exam.exam_id, path.display())));
            }
            let mask = load_mask(&path)?;
            mask.check_shape(truth, "prediction")?;
            let mut row = CohortRow::new(&study.patient_id, name);
            let detection = match task {
                Some(Task::Segmentation) => None,
                _ => Some(detection_metrics(&connected_components(&mask), &connected_components(truth))?),
            };
            let segmentation = match task {
                Some(Task::Detection) => None,
                _ => Some(segmentation_report(&mask, truth)?),
            };
            if let Some(d) = &detection {
                row = row.with_detection(d);
            }
            if let Some(s) = &segmentation {
                row = row.with_segmentation(s);
            }
            rows.push(row);
            reports.push(ExamReport {
                patient_id: study.patient_id.clone(),
                model: name.clone(),
                exam_id: exam.exam_id.clone(),
                detection,
                segmentation,
            });
        }
    }
    let out = cfg.paths.output.join("evaluation");
    mkdir(&out)?;
    write_json(&reports, &out.join("reports.json"))?;
    write_cohort_csv(&rows, out.join("cohort.csv"))?;
    print!("{}", summary_table(&summarize(&rows)));
    Ok(())
}

#[derive(Serialize)]
struct UncertaintySummary<'a> {
    patient_id: &'a str,
    model: &'a str,
    exam_id: &'a str,
    task: Task,
    n_repeats: usize,
    summary: Option<f64>,
}

pub fn uncertainty(common: &Common, patient: &str, model: Model, task: Option<Task>) -> Result<()> {
    let cfg = load_config(common)?;
    let cohort = require_cohort(&cfg)?;
    let study = cohort.study(patient)?;
    let params = load_model(&cfg, model, patient)?;
    let task = task.unwrap_or(cfg.postprocess.task);
    let report = mc_dropout_uncertainty(&params, &study.followup, cfg.uncertainty.n_repeats, task, cfg.seed, cfg.inference.tile)?;
    let dir = cfg.paths.output.join("uncertainty").join(model_name(model));
    mkdir(&dir)?;
    let id = &study.followup.exam_id;
    write_volume(&report.sd, dir.join(format!("{id}_sd.nii.gz")))?;
    let summary = UncertaintySummary {
        patient_id: patient,
        model: model_name(model),
        exam_id: id,
        task,
        n_repeats: report.n_repeats,
        summary: report.summary,
    };
    write_json(&summary, &dir.join(format!("{id}_uncertainty.json")))?;
    match report.summary {
        Some(s) => println!("{s:.6}"),
        None => println!("undefined (no detected lesions)"),
    }
    Ok(())
}

/// Generates the cohort if absent, trains the base network, then
/// fine-tunes and evaluates every test patient for each variant.
pub fn reproduce(common: &Common, experiment: Experiment, jobs: usize) -> Result<()> {
    let cfg = load_config(common)?;
    if jobs == 0 {
        return Err(Error::Config("--jobs must be >= 1".into()));
    }
    if !cfg.paths.data.join(CohortManifest::FILE_NAME).is_file() {
        let cohort = generate_cohort(&cfg.phantom, cfg.cohort.n_train, cfg.cohort.n_test, cfg.phantom.seed)?;
        write_cohort(&cohort, &cfg.phantom, &cfg.paths.data)?;
    }
    let base = train_base_with(&cfg)?;
    let cohort = load_cohort(&cfg.paths.data)?;
    let variants = experiment.variants(&cfg);
    let unc = experiment.needs_uncertainty().then_some(UncertaintyOptions {
        task: cfg.postprocess.task,
        n_repeats: cfg.uncertainty.n_repeats,
        seed: cfg.seed,
    });
    let ckpt_dir = cfg.paths.checkpoints.join(experiment.to_string());
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Vec<CohortRow>>>>> = cohort.test.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.min(cohort.test.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(study) = cohort.test.get(i) else { break };
                let result = run_patient(&cfg, &base, study, &variants, unc).and_then(|o| {
                    let dir = ckpt_dir.join(&o.patient_id);
                    mkdir(&dir)?;
                    for t in &o.tuned {
                        std::fs::write(dir.join(format!("{}.ckpt", t.variant.label)), to_bytes(&t.params)?)
                            .map_err(|e| Error::io(&dir, e))?;
                    }
                    eprintln!("{} done", o.patient_id);
                    Ok(o.rows())
                });
                *slots[i].lock().expect("result slot") = Some(result);
            });
        }
    });
    let mut rows = Vec::new();
    for slot in slots {
        rows.extend(slot.into_inner().expect("result slot").expect("every patient ran")?);
    }
    let out = cfg.paths.output.join("reproduce").join(experiment.to_string());
    mkdir(&out)?;
    write_cohort_csv(&rows, out.join("cohort.csv"))?;
    let summary = summarize(&rows);
    write_text(&summary_csv(&summary)?, &out.join("summary.csv"))?;
    let table = summary_table(&summary);
    write_text(&table, &out.join("summary.txt"))?;
    print!("{table}");
    Ok(())
}
