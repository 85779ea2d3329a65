//! Finite-dimensional laboratory for cylindrical orthogonal martingale-valued
//! measures.
//!
//! The crate simulates noises indexed by time and marks, builds their
//! quadratic variation as a supremum of intensity measures, extracts the
//! operator density `Q_M`, integrates operator-valued integrands against the
//! noise, and solves Lévy-driven stochastic evolution equations in mild form.
//!
//! | module | contents |
//! |---|---|
//! | [`measure`] | atomic measures on a time x mark grid, suprema, signed comparison |
//! | [`linalg`] | PSD operators, square roots, Hilbert–Schmidt norms, sphere samples |
//! | [`noise`] | noise specifications, path ensembles, intensity measures |
//! | [`quadvar`] | quadratic variation, bilinear covariation measure, `Q_M` |
//! | [`integral`] | stochastic integral, isometry, stopping, localization, Fubini |
//! | [`spde`] | spectral semigroups, stochastic convolution, Picard solver |
//! | [`scenario`] | config-driven runs behind the `cmvm` binary |

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod integral;
pub mod linalg;
pub mod measure;
pub mod noise;
pub mod quadvar;
pub mod scenario;
pub mod spde;

pub use error::{Error, Result};
