//! Dual-path structure-aware contrastive embeddings for few-shot learning.
//!
//! A frozen base-class classifier supplies soft class similarities that
//! weight the positives of a contrastive loss on a separate encoder. The
//! encoder is then used as a fixed feature extractor for prototype-based
//! few-shot classification.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod fewshot;
pub mod gradcheck;
pub mod matrix;
pub mod numerics;
pub mod rng;
pub mod sacl;
pub mod scalar;
pub mod teacher;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use rng::RngStream;
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Encoder64 = training::Encoder<f64>;
pub type Encoder32 = training::Encoder<f32>;
pub type TeacherModel64 = teacher::TeacherModel<f64>;
pub type TeacherModel32 = teacher::TeacherModel<f32>;
pub type FeatureSet64 = data::LabeledFeatureSet<f64>;
pub type FeatureSet32 = data::LabeledFeatureSet<f32>;
