//! Multi-sequence 3D exams: data model, NIfTI I/O, normalization and patches.

pub mod manifest;
pub mod nifti;
mod normalize;
pub mod patch;

pub use normalize::normalize_intensity;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Dense 3D grid indexed `(z, y, x)` with `x` fastest, plus voxel spacing
/// `(dz, dy, dx)` in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    shape: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

/// Binary (0/1) voxel mask.
pub type Mask = Volume<u8>;

impl<T: Copy> Volume<T> {
    pub fn from_vec(shape: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("volume dimensions must be >= 1, got {shape:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Shape(format!("spacing must be strictly positive, got {spacing:?}")));
        }
        let n = shape.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { shape, spacing, data })
    }

    pub fn filled(shape: [usize; 3], spacing: [f64; 3], value: T) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        Self::from_vec(shape, spacing, vec![value; n])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.shape[2];
        let y = (idx / self.shape[2]) % self.shape[1];
        [idx / (self.shape[1] * self.shape[2]), y, x]
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    /// Contiguous `Y x X` plane at slice `z`.
    pub fn slice(&self, z: usize) -> &[T] {
        let n = self.shape[1] * self.shape[2];
        &self.data[z * n..(z + 1) * n]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [T] {
        let n = self.shape[1] * self.shape[2];
        &mut self.data[z * n..(z + 1) * n]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume { shape: self.shape, spacing: self.spacing, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Same-shaped volume with new contents.
    pub fn with_data<U: Copy>(&self, data: Vec<U>) -> Result<Volume<U>> {
        Volume::from_vec(self.shape, self.spacing, data)
    }

    pub fn same_shape<U>(&self, other: &Volume<U>) -> bool {
        self.shape == other.shape
    }

    /// Shape and spacing agree.
    pub fn congruent<U>(&self, other: &Volume<U>) -> bool {
        self.shape == other.shape
            && self.spacing.iter().zip(other.spacing.iter()).all(|(a, b)| (a - b).abs() <= 1e-6 * a.abs().max(1.0))
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }
}

impl<T> Volume<T> {
    pub fn check_shape<U>(&self, other: &Volume<U>, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}

impl Volume<u8> {
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn slice_count(&self, z: usize) -> usize {
        self.slice(z).iter().filter(|&&v| v != 0).count()
    }

    /// Converts an intensity volume into a mask, rejecting anything but 0/1.
    pub fn from_binary_values<T: Scalar>(v: &Volume<T>) -> Result<Mask> {
        let mut out = Vec::with_capacity(v.len());
        for &x in v.data() {
            if x == T::zero() {
                out.push(0);
            } else if x == T::one() {
                out.push(1);
            } else {
                return Err(Error::Data(format!("mask contains non-binary value {x}")));
            }
        }
        v.with_data(out)
    }
}

impl<T: Scalar> Volume<T> {
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Volume<U> {
        self.map(|v| U::lit(v.as_f64()))
    }
}

/// One MR sequence; multiple instances (phases, b-values) become channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceStack<T> {
    pub sequence_id: String,
    channels: Vec<Volume<T>>,
}

impl<T: Scalar> SequenceStack<T> {
    pub fn new(sequence_id: impl Into<String>, channels: Vec<Volume<T>>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::Data("a sequence needs at least one channel".into()))?;
        for (i, c) in channels.iter().enumerate() {
            if !c.congruent(first) {
                return Err(Error::Shape(format!("channel {i} is not congruent with channel 0")));
            }
            if !c.is_finite() {
                return Err(Error::Data(format!("channel {i} contains non-finite intensities")));
            }
        }
        Ok(Self { sequence_id: sequence_id.into(), channels })
    }

    pub fn channels(&self) -> &[Volume<T>] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.channels[0].shape()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.channels[0].spacing()
    }

    /// Channel-interleaved (`Y x X x C`) copy of slice `z`.
    pub fn slice_hwc(&self, z: usize) -> Vec<T> {
        let [_, h, w] = self.shape();
        let c = self.channels.len();
        let mut out = vec![T::zero(); h * w * c];
        for (ci, ch) in self.channels.iter().enumerate() {
            for (p, &v) in ch.slice(z).iter().enumerate() {
                out[p * c + ci] = v;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timepoint {
    Baseline,
    Followup,
}

/// Two co-registered sequences, organ mask and optional lesion annotation
/// for one timepoint of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSequenceExam<T> {
    pub exam_id: String,
    pub timepoint: Timepoint,
    pub seq_a: SequenceStack<T>,
    pub seq_b: SequenceStack<T>,
    pub organ_mask: Mask,
    pub annotation: Option<Mask>,
}

impl<T: Scalar> MultiSequenceExam<T> {
    pub fn new(
        exam_id: impl Into<String>,
        timepoint: Timepoint,
        seq_a: SequenceStack<T>,
        seq_b: SequenceStack<T>,
        organ_mask: Mask,
        annotation: Option<Mask>,
    ) -> Result<Self> {
        let reference = &seq_a.channels()[0];
        if !seq_b.channels()[0].congruent(reference) {
            return Err(Error::Shape("seq_b is not congruent with seq_a".into()));
        }
        if !organ_mask.congruent(reference) {
            return Err(Error::Shape("organ mask is not congruent with seq_a".into()));
        }
        if !organ_mask.is_binary() {
            return Err(Error::Data("organ mask must be 0/1".into()));
        }
        if let Some(a) = &annotation {
            if !a.congruent(reference) {
                return Err(Error::Shape("annotation is not congruent with seq_a".into()));
            }
            if !a.is_binary() {
                return Err(Error::Data("annotation must be 0/1".into()));
            }
        }
        Ok(Self { exam_id: exam_id.into(), timepoint, seq_a, seq_b, organ_mask, annotation })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.organ_mask.shape()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.organ_mask.spacing()
    }

    pub fn annotation(&self) -> Result<&Mask> {
        self.annotation
            .as_ref()
            .ok_or_else(|| Error::Data(format!("exam {} has no annotation", self.exam_id)))
    }

    /// Slices containing at least one organ voxel.
    pub fn organ_slices(&self) -> Vec<usize> {
        (0..self.shape()[0]).filter(|&z| self.organ_mask.slice_count(z) > 0).collect()
    }

    /// Organ slices that also contain annotated lesion voxels.
    pub fn lesion_slices(&self) -> Result<Vec<usize>> {
        let ann = self.annotation()?;
        Ok((0..self.shape()[0])
            .filter(|&z| ann.slice_count(z) > 0 && self.organ_mask.slice_count(z) > 0)
            .collect())
    }

    /// Every channel z-scored over the organ mask.
    pub fn normalized(&self) -> Result<Self> {
        let norm = |s: &SequenceStack<T>| -> Result<SequenceStack<T>> {
            let ch = s
                .channels()
                .iter()
                .map(|c| normalize_intensity(c, &self.organ_mask))
                .collect::<Result<Vec<_>>>()?;
            SequenceStack::new(s.sequence_id.clone(), ch)
        };
        Ok(Self {
            exam_id: self.exam_id.clone(),
            timepoint: self.timepoint,
            seq_a: norm(&self.seq_a)?,
            seq_b: norm(&self.seq_b)?,
            organ_mask: self.organ_mask.clone(),
            annotation: self.annotation.clone(),
        })
    }
}

/// Baseline and follow-up exams of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientStudy<T> {
    pub patient_id: String,
    pub baseline: MultiSequenceExam<T>,
    pub followup: MultiSequenceExam<T>,
}

impl<T: Scalar> PatientStudy<T> {
    pub fn new(
        patient_id: impl Into<String>,
        baseline: MultiSequenceExam<T>,
        followup: MultiSequenceExam<T>,
    ) -> Result<Self> {
        let same = |a: &SequenceStack<T>, b: &SequenceStack<T>| {
            a.sequence_id == b.sequence_id && a.n_channels() == b.n_channels()
        };
        if !same(&baseline.seq_a, &followup.seq_a) || !same(&baseline.seq_b, &followup.seq_b) {
            return Err(Error::Data("baseline and follow-up sequences differ".into()));
        }
        Ok(Self { patient_id: patient_id.into(), baseline, followup })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_geometry() {
        assert!(Volume::<f32>::filled([0, 2, 2], [1.0; 3], 0.0).is_err());
        assert!(Volume::<f32>::filled([1, 2, 2], [1.0, 0.0, 1.0], 0.0).is_err());
        assert!(Volume::<f32>::from_vec([1, 2, 2], [1.0; 3], vec![0.0; 3]).is_err());
    }

    #[test]
    fn index_round_trips_coords() {
        let v = Volume::<u8>::filled([3, 4, 5], [1.0; 3], 0).unwrap();
        for i in 0..v.len() {
            let [z, y, x] = v.coords(i);
            assert_eq!(v.index(z, y, x), i);
        }
    }

    #[test]
    fn slice_hwc_interleaves_channels() {
        let a = Volume::from_vec([1, 1, 2], [1.0; 3], vec![1.0f32, 2.0]).unwrap();
        let b = Volume::from_vec([1, 1, 2], [1.0; 3], vec![10.0f32, 20.0]).unwrap();
        let s = SequenceStack::new("s", vec![a, b]).unwrap();
        assert_eq!(s.slice_hwc(0), vec![1.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn exam_rejects_incongruent_mask() {
        let v = Volume::<f32>::filled([2, 3, 3], [1.0; 3], 0.0).unwrap();
        let s = SequenceStack::new("a", vec![v.clone()]).unwrap();
        let bad = Mask::filled([2, 3, 4], [1.0; 3], 0).unwrap();
        assert!(MultiSequenceExam::new("e", Timepoint::Baseline, s.clone(), s, bad, None).is_err());
    }
}
