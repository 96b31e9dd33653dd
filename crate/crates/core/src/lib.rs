//! Entity selection, attribute selection and response generation over a
//! knowledge base, trained with attention distillation.

pub mod attribute;
pub mod config;
pub mod dialog;
pub mod entity;
pub mod error;
pub mod eval;
pub mod generator;
pub mod kb;
pub mod maker;
pub mod neural;
pub mod repro;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
