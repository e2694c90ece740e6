//! Patient-specific fine-tuning of a dual-pathway dilated CNN for lesion
//! detection and segmentation in longitudinal multi-sequence scans.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod inference;
pub mod linalg;
pub mod network;
pub mod phantom;
pub mod postprocess;
pub mod training;
pub mod scalar;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use volume::{Mask, MultiSequenceExam, PatientStudy, SequenceStack, Timepoint, Volume};

pub type Volume3D = Volume<f32>;
pub type Exam = MultiSequenceExam<f32>;
pub type Study = PatientStudy<f32>;
pub type Network = network::NetworkParams<f32>;
