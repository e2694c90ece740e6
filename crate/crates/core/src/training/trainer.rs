use super::adam::AdamState;
use super::loss::{class_weight_map, cross_entropy_logit_grad, weighted_cross_entropy, ClassWeights};
use crate::error::{Error, Result};
use crate::network::{build_network, FeatureMap, NetworkConfig, NetworkParams, HEAD_LAYERS};
use crate::scalar::Scalar;
use crate::volume::patch::{extract_patch, finetune_origins, rotate_patch, training_origins, Patch, PatchOrigin, PATCH_SIZE};
use crate::volume::{MultiSequenceExam, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

pub const BASE_ITERATIONS: usize = 10_000;
pub const FINETUNE_ITERATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub class_weights: ClassWeights,
    /// Rotation angles are drawn uniformly from `[-range, range]` degrees.
    pub augment_range_deg: f64,
    pub patch_size: usize,
    pub dropout: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            iterations: BASE_ITERATIONS,
            class_weights: ClassWeights::default(),
            augment_range_deg: 45.0,
            patch_size: PATCH_SIZE,
            dropout: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn finetune_default() -> Self {
        Self { iterations: FINETUNE_ITERATIONS, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let cw = &self.class_weights;
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::Config("batch_size and patch_size must be >= 1".into()));
        }
        if !(cw.background > 0.0 && cw.lesion > 0.0) {
            return Err(Error::Config("class weights must be > 0".into()));
        }
        if !(self.augment_range_deg >= 0.0) {
            return Err(Error::Config("augment_range_deg must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub wall_time: f64,
}

pub fn write_log(records: &[LogRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome<T> {
    pub params: NetworkParams<T>,
    pub log: Vec<LogRecord>,
}

/// Where pool patches come from: exam index and tile origin.
struct Pool<'a, T> {
    exams: Vec<&'a MultiSequenceExam<T>>,
    weights: Option<&'a Volume<T>>,
    entries: Vec<(usize, PatchOrigin)>,
}

impl<T: Scalar> Pool<'_, T> {
    fn patch(&self, i: usize, size: usize) -> Result<Patch<T>> {
        let (e, o) = self.entries[i];
        extract_patch(self.exams[e], o, size, self.weights)
    }
}

fn run_steps<T: Scalar>(params: &mut NetworkParams<T>, pool: &Pool<'_, T>, tcfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<LogRecord>> {
    let start = Instant::now();
    let mut adam = AdamState::new(params);
    let mut log = Vec::with_capacity(tcfg.iterations);
    let s = tcfg.patch_size;
    let r = tcfg.augment_range_deg;
    for step in 0..tcfg.iterations {
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            let idx = rng.random_range(0..pool.entries.len());
            let angle = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
            batch.push(rotate_patch(&pool.patch(idx, s)?, angle));
        }
        let a = FeatureMap::stack(batch.iter().map(|p| (p.input_a.data.as_slice(), s, s, p.input_a.channels)))?;
        let b = FeatureMap::stack(batch.iter().map(|p| (p.input_b.data.as_slice(), s, s, p.input_b.channels)))?;
        let labels: Vec<u8> = batch.iter().flat_map(|p| p.label.iter().copied()).collect();
        let weights: Vec<T> = batch
            .iter()
            .flat_map(|p| match &p.weight {
                Some(w) => w.clone(),
                None => class_weight_map(&p.label, &tcfg.class_weights),
            })
            .collect();
        let cache = params.forward_train(&a, &b, tcfg.dropout, rng)?;
        let loss = weighted_cross_entropy(&cache.probs.data, &labels, &weights)?;
        let dlogits = cross_entropy_logit_grad(&cache.probs.data, &labels, &weights)?;
        let grads = params.backward(&cache, &dlogits)?;
        adam.update(params, &grads, tcfg.learning_rate);
        params.update_running_stats(&cache);
        log.push(LogRecord { step: step + 1, loss, wall_time: start.elapsed().as_secs_f64() });
    }
    Ok(log)
}

/// Trains a freshly initialised network on 25-tile grids over every
/// lesion-containing slice of `exams`. Exams are z-scored over their organ first.
pub fn train_base<T: Scalar>(cfg: &NetworkConfig, tcfg: &TrainConfig, exams: &[MultiSequenceExam<T>]) -> Result<TrainOutcome<T>> {
    tcfg.validate()?;
    let mut params = build_network(cfg, tcfg.seed)?;
    let normalized = exams.iter().map(MultiSequenceExam::normalized).collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::new();
    for (e, exam) in normalized.iter().enumerate() {
        for z in exam.lesion_slices()? {
            entries.extend(training_origins(&exam.organ_mask, z, tcfg.patch_size)?.into_iter().map(|o| (e, o)));
        }
    }
    if entries.is_empty() {
        return Err(Error::Data("no lesion-containing slices in the training exams".into()));
    }
    let pool = Pool { exams: normalized.iter().collect(), weights: None, entries };
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let log = run_steps(&mut params, &pool, tcfg, &mut rng)?;
    Ok(TrainOutcome { params, log })
}

/// Adapts the two head layers to one patient's annotated baseline exam.
/// `weights` (same grid as the exam) replaces the class weights when given.
pub fn finetune<T: Scalar>(
    params: &NetworkParams<T>,
    tcfg: &TrainConfig,
    baseline: &MultiSequenceExam<T>,
    slices: &[usize],
    weights: Option<&Volume<T>>,
) -> Result<TrainOutcome<T>> {
    tcfg.validate()?;
    if slices.is_empty() {
        return Err(Error::Data("fine-tuning needs at least one slice".into()));
    }
    baseline.annotation()?;
    if let Some(w) = weights {
        w.check_shape(&baseline.organ_mask, "fine-tuning weight map")?;
    }
    let exam = baseline.normalized()?;
    let mut entries = Vec::new();
    for &z in slices {
        entries.extend(finetune_origins(&exam.organ_mask, z, tcfg.patch_size)?.into_iter().map(|o| (0, o)));
    }
    let mut out = params.clone();
    out.set_trainable(&HEAD_LAYERS)?;
    let pool = Pool { exams: vec![&exam], weights, entries };
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let log = run_steps(&mut out, &pool, tcfg, &mut rng)?;
    Ok(TrainOutcome { params: out, log })
}
