// SPDX-License-Identifier: Apache-2.0

//! Minimum-norm linear denoisers and noisy-input regressors on low-rank data.
//!
//! The crate computes closed-form test-error predictions for
//! `W = Y_trn (X_trn + A_trn)†` and checks them against Monte-Carlo
//! simulation. Modules build on each other in this order: [`linalg`],
//! [`datagen`], [`mp`], [`predictor`], [`empirics`], [`experiments`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod empirics;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod matfile;
pub mod mp;
pub mod predictor;
pub mod rng;

pub use datagen::{ProblemInstance, Target, TestData, TestSpec};
pub use error::{Error, ErrorClass, Result};
pub use linalg::{Matrix, SvdFactors};
