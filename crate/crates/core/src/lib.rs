// Negated comparisons double as NaN rejection.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod datamodel;
pub mod error;
pub mod evalmetrics;
pub mod gradcheck;
pub mod numkernel;
pub mod optim;
pub mod pipeline;
pub mod retrieval;
pub mod similarity;
pub mod student;
pub mod teacher;

pub use error::{Error, Result};
pub use numkernel::{Mat, Scalar, SeededRng};

pub type Matrix = Mat<f64>;
pub type Matrix32 = Mat<f32>;
pub type TeacherModel = teacher::TeacherParams<f64>;
pub type StudentModel = student::StudentParams<f64>;
