//! Patient-specific preparation: which baseline slices to fine-tune on and
//! how to weight their pixels.

use crate::error::{Error, Result};
use crate::inference::predict_volume;
use crate::network::NetworkParams;
use crate::postprocess::{connected_components, postprocess_pipeline, Task};
use crate::scalar::Scalar;
use crate::volume::{Mask, MultiSequenceExam, Volume};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlicePool {
    AllOrganSlices,
    LesionSlices,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub slice_idx: usize,
    /// Mean lesion probability over the organ pixels of the slice.
    pub mean_prob: f64,
}

fn rank_order(a: &SliceScore, b: &SliceScore) -> std::cmp::Ordering {
    (a.mean_prob - 0.5)
        .abs()
        .total_cmp(&(b.mean_prob - 0.5).abs())
        .then(a.slice_idx.cmp(&b.slice_idx))
}

/// Scores every eligible slice, ranked by distance of the mean to 0.5
/// (ties to the lower index).
pub fn score_slices<T: Scalar>(
    probs: &Volume<T>,
    organ: &Mask,
    pool: SlicePool,
    annotation: Option<&Mask>,
) -> Result<Vec<SliceScore>> {
    probs.check_shape(organ, "organ mask")?;
    let ann = match pool {
        SlicePool::AllOrganSlices => None,
        SlicePool::LesionSlices => {
            let a = annotation.ok_or_else(|| Error::Data("the lesion-slice pool needs an annotation".into()))?;
            probs.check_shape(a, "annotation")?;
            Some(a)
        }
    };
    let mut scores = Vec::new();
    for z in 0..probs.shape()[0] {
        let n = organ.slice_count(z);
        if n == 0 || ann.is_some_and(|a| a.slice_count(z) == 0) {
            continue;
        }
        let sum: f64 = probs.slice(z).iter().zip(organ.slice(z)).filter(|(_, &m)| m != 0).map(|(p, _)| p.as_f64()).sum();
        scores.push(SliceScore { slice_idx: z, mean_prob: sum / n as f64 });
    }
    if scores.is_empty() {
        return Err(Error::Data(format!("no eligible slices in the {pool:?} pool")));
    }
    scores.sort_by(rank_order);
    Ok(scores)
}

/// Reads and writes as a positive integer or `"all"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SliceCountRepr", into = "SliceCountRepr")]
pub enum SliceCount {
    Count(usize),
    All,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SliceCountRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<SliceCountRepr> for SliceCount {
    type Error = Error;
    fn try_from(r: SliceCountRepr) -> Result<Self> {
        match r {
            SliceCountRepr::Count(n) => n.to_string().parse(),
            SliceCountRepr::Word(w) => w.parse(),
        }
    }
}

impl From<SliceCount> for SliceCountRepr {
    fn from(n: SliceCount) -> Self {
        match n {
            SliceCount::Count(k) => SliceCountRepr::Count(k),
            SliceCount::All => SliceCountRepr::Word("all".into()),
        }
    }
}

impl FromStr for SliceCount {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SliceCount::All),
            _ => match s.parse::<usize>() {
                Ok(n) if n >= 1 => Ok(SliceCount::Count(n)),
                _ => Err(Error::Config(format!("slice count must be a positive integer or 'all', got '{s}'"))),
            },
        }
    }
}

impl std::fmt::Display for SliceCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SliceCount::Count(n) => write!(f, "{n}"),
            SliceCount::All => f.write_str("all"),
        }
    }
}

/// Returns the selected slice indices and whether the request exceeded the pool.
/// `All` lists the pool in slice order; a count follows the ranking.
pub fn select_slices(scores: &[SliceScore], n: SliceCount) -> Result<(Vec<usize>, bool)> {
    if scores.is_empty() {
        return Err(Error::Data("cannot select from an empty score list".into()));
    }
    let mut ranked = scores.to_vec();
    ranked.sort_by(rank_order);
    match n {
        SliceCount::All => {
            let mut all: Vec<usize> = ranked.iter().map(|s| s.slice_idx).collect();
            all.sort_unstable();
            Ok((all, false))
        }
        SliceCount::Count(k) => Ok((ranked.iter().take(k).map(|s| s.slice_idx).collect(), k > ranked.len())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceSelection {
    pub exam_id: String,
    pub pool: SlicePool,
    pub ranking: Vec<SliceScore>,
    pub selected: Vec<usize>,
    /// The requested count exceeded the pool; the whole pool was returned.
    pub truncated: bool,
}

impl SliceSelection {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(serde_json::from_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?)
    }
}

/// Ranks the baseline's slices with the base network and picks `n`.
pub fn select_baseline_slices<T: Scalar>(
    params: &NetworkParams<T>,
    baseline: &MultiSequenceExam<T>,
    pool: SlicePool,
    n: SliceCount,
    tile: Option<usize>,
) -> Result<SliceSelection> {
    let probs = predict_volume(params, baseline, tile)?;
    let ranking = score_slices(&probs, &baseline.organ_mask, pool, baseline.annotation.as_ref())?;
    let (selected, truncated) = select_slices(&ranking, n)?;
    Ok(SliceSelection { exam_id: baseline.exam_id.clone(), pool, ranking, selected, truncated })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum PixelOutcome {
    Tn,
    Tp,
    FnDetected,
    FnMissed,
    FpAttached,
    FpObject,
}

/// Per-voxel outcome of a post-processed prediction against the annotation,
/// with objects taken as 26-connected components.
pub fn classify_pixels(pred: &Mask, annotation: &Mask) -> Result<Volume<PixelOutcome>> {
    pred.check_shape(annotation, "annotation")?;
    let p = connected_components(pred);
    let t = connected_components(annotation);
    let mut detected = vec![false; t.len() + 1];
    let mut attached = vec![false; p.len() + 1];
    for (&lp, &lt) in p.labels.iter().zip(&t.labels) {
        if lp != 0 && lt != 0 {
            detected[lt as usize] = true;
            attached[lp as usize] = true;
        }
    }
    let data = p
        .labels
        .iter()
        .zip(&t.labels)
        .map(|(&lp, &lt)| match (lp != 0, lt != 0) {
            (true, true) => PixelOutcome::Tp,
            (false, true) if detected[lt as usize] => PixelOutcome::FnDetected,
            (false, true) => PixelOutcome::FnMissed,
            (true, false) if attached[lp as usize] => PixelOutcome::FpAttached,
            (true, false) => PixelOutcome::FpObject,
            (false, false) => PixelOutcome::Tn,
        })
        .collect();
    pred.with_data(data)
}

pub fn detection_weight(o: PixelOutcome) -> f64 {
    match o {
        PixelOutcome::FnMissed => 5.0,
        PixelOutcome::Tp => 2.0,
        PixelOutcome::FnDetected | PixelOutcome::FpAttached => 0.0,
        PixelOutcome::Tn | PixelOutcome::FpObject => 1.0,
    }
}

pub fn segmentation_weight(o: PixelOutcome) -> f64 {
    match o {
        PixelOutcome::FpAttached | PixelOutcome::FpObject | PixelOutcome::FnDetected | PixelOutcome::FnMissed => 5.0,
        PixelOutcome::Tp => 2.0,
        PixelOutcome::Tn => 1.0,
    }
}

pub fn detection_weight_map<T: Scalar>(outcomes: &Volume<PixelOutcome>) -> Volume<T> {
    outcomes.map(|o| T::lit(detection_weight(o)))
}

pub fn segmentation_weight_map<T: Scalar>(outcomes: &Volume<PixelOutcome>) -> Volume<T> {
    outcomes.map(|o| T::lit(segmentation_weight(o)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    None,
    Detection,
    Segmentation,
}

impl FromStr for Weighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Weighting::None),
            "detection" => Ok(Weighting::Detection),
            "segmentation" => Ok(Weighting::Segmentation),
            _ => Err(Error::Config(format!("unknown weighting '{s}' (expected none, detection or segmentation)"))),
        }
    }
}

impl std::fmt::Display for Weighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Weighting::None => "none",
            Weighting::Detection => "detection",
            Weighting::Segmentation => "segmentation",
        })
    }
}

/// Outcome-based weight map for the baseline, from the base network's
/// post-processed prediction. `None` for [`Weighting::None`].
pub fn baseline_weight_map<T: Scalar>(
    params: &NetworkParams<T>,
    baseline: &MultiSequenceExam<T>,
    weighting: Weighting,
    tile: Option<usize>,
) -> Result<Option<Volume<T>>> {
    let task = match weighting {
        Weighting::None => return Ok(None),
        Weighting::Detection => Task::Detection,
        Weighting::Segmentation => Task::Segmentation,
    };
    let probs = predict_volume(params, baseline, tile)?;
    let (pred, _) = postprocess_pipeline(&probs, &baseline.organ_mask, task)?;
    let outcomes = classify_pixels(&pred, baseline.annotation()?)?;
    Ok(Some(match weighting {
        Weighting::Detection => detection_weight_map(&outcomes),
        _ => segmentation_weight_map(&outcomes),
    }))
}
