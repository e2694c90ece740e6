//! JSON exam manifests: one document per exam naming its NIfTI files.
//!
//! Relative paths are resolved against the directory holding the manifest.

use super::nifti::{load_mask, load_volume, write_mask, write_volume};
use super::{MultiSequenceExam, SequenceStack, Timepoint};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub sequence_id: String,
    pub channels: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExamManifest {
    pub exam_id: String,
    pub patient_id: String,
    pub timepoint: Timepoint,
    pub seq_a: SequenceEntry,
    pub seq_b: SequenceEntry,
    pub organ_mask: PathBuf,
    #[serde(default)]
    pub annotation: Option<PathBuf>,
}

impl ExamManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a manifest and every volume it names.
pub fn load_exam<T: Scalar>(manifest_path: impl AsRef<Path>) -> Result<(ExamManifest, MultiSequenceExam<T>)> {
    let manifest_path = manifest_path.as_ref();
    let m = ExamManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let stack = |e: &SequenceEntry| -> Result<SequenceStack<T>> {
        let ch = e.channels.iter().map(|p| load_volume(resolve(base, p))).collect::<Result<Vec<_>>>()?;
        SequenceStack::new(e.sequence_id.clone(), ch)
    };
    let seq_a = stack(&m.seq_a)?;
    let seq_b = stack(&m.seq_b)?;
    let organ = load_mask(resolve(base, &m.organ_mask))?;
    let ann = m.annotation.as_ref().map(|p| load_mask(resolve(base, p))).transpose()?;
    let exam = MultiSequenceExam::new(m.exam_id.clone(), m.timepoint, seq_a, seq_b, organ, ann)?;
    Ok((m, exam))
}

/// Writes the exam's volumes into `dir` as `<exam_id>_*.nii.gz` plus
/// `<exam_id>.json`, returning the manifest path.
pub fn save_exam<T: Scalar>(exam: &MultiSequenceExam<T>, patient_id: &str, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id = &exam.exam_id;
    let entry = |tag: &str, s: &SequenceStack<T>| -> Result<SequenceEntry> {
        let mut channels = Vec::new();
        for (i, ch) in s.channels().iter().enumerate() {
            let name = PathBuf::from(format!("{id}_{tag}{i}.nii.gz"));
            write_volume(ch, dir.join(&name))?;
            channels.push(name);
        }
        Ok(SequenceEntry { sequence_id: s.sequence_id.clone(), channels })
    };
    let seq_a = entry("a", &exam.seq_a)?;
    let seq_b = entry("b", &exam.seq_b)?;
    let organ = PathBuf::from(format!("{id}_organ.nii.gz"));
    write_mask(&exam.organ_mask, dir.join(&organ))?;
    let annotation = match &exam.annotation {
        Some(a) => {
            let p = PathBuf::from(format!("{id}_lesions.nii.gz"));
            write_mask(a, dir.join(&p))?;
            Some(p)
        }
        None => None,
    };
    let manifest = ExamManifest {
        exam_id: id.clone(),
        patient_id: patient_id.to_string(),
        timepoint: exam.timepoint,
        seq_a,
        seq_b,
        organ_mask: organ,
        annotation,
    };
    let path = dir.join(format!("{id}.json"));
    manifest.write(&path)?;
    Ok(path)
}
