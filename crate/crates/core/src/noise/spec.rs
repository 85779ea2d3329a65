use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, PsdOperator};
use crate::measure::GridSpec;

/// A jump of size `size` (a vector of `H`) arriving at Poisson rate `rate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpSpec {
    pub size: Vec<f64>,
    pub rate: f64,
}

impl JumpSpec {
    pub fn new(size: Vec<f64>, rate: f64) -> Self {
        Self { size, rate }
    }

    pub fn vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.size)
    }
}

/// Lévy driver attached to one atom: a Brownian part with covariance
/// `brownian` plus compensated compound-Poisson jumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevyAtom {
    pub brownian: PsdOperator,
    #[serde(default)]
    pub jumps: Vec<JumpSpec>,
}

impl LevyAtom {
    pub fn brownian(q: PsdOperator) -> Self {
        Self {
            brownian: q,
            jumps: Vec::new(),
        }
    }

    /// Total covariance per unit time: `Q_B + sum rate * u u^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mut q = self.brownian.matrix().clone();
        for j in &self.jumps {
            let u = j.vector();
            q += &u * u.transpose() * j.rate;
        }
        q
    }
}

/// The noise families simulated by this crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum NoiseSpec {
    /// Real-valued Gaussian white noise with intensity `lambda[atom]` per unit time.
    WhiteNoise { lambda: Vec<f64> },
    /// Independent Lévy drivers, one per atom.
    DiscreteLevy { atoms: Vec<LevyAtom> },
    /// `H`-valued Lévy process: Wiener part with covariance `q` on atom 0,
    /// jump `k` on atom `k + 1`.
    HValuedLevy {
        q: PsdOperator,
        jumps: Vec<JumpSpec>,
    },
    /// `1_A(g(s)) dZ_s` with `Z` Brownian of covariance `base` and a deterministic
    /// selector: `selector[step]` is the atom hit during that step.
    IntegralType {
        base: PsdOperator,
        selector: Vec<usize>,
    },
}

impl NoiseSpec {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseSpec::WhiteNoise { .. } => "white_noise",
            NoiseSpec::DiscreteLevy { .. } => "discrete_levy",
            NoiseSpec::HValuedLevy { .. } => "hvalued_levy",
            NoiseSpec::IntegralType { .. } => "integral_type",
        }
    }

    /// Dimension of the Hilbert space `H` the noise acts on.
    pub fn h_dim(&self) -> usize {
        match self {
            NoiseSpec::WhiteNoise { .. } => 1,
            NoiseSpec::DiscreteLevy { atoms } => atoms.first().map_or(0, |a| a.brownian.dim()),
            NoiseSpec::HValuedLevy { q, .. } => q.dim(),
            NoiseSpec::IntegralType { base, .. } => base.dim(),
        }
    }

    /// Number of mark atoms the spec needs.
    pub fn n_atoms(&self) -> usize {
        match self {
            NoiseSpec::WhiteNoise { lambda } => lambda.len(),
            NoiseSpec::DiscreteLevy { atoms } => atoms.len(),
            NoiseSpec::HValuedLevy { jumps, .. } => 1 + jumps.len(),
            NoiseSpec::IntegralType { selector, .. } => selector.iter().max().map_or(1, |m| m + 1),
        }
    }

    fn check_jumps(jumps: &[JumpSpec], dim: usize) -> Result<()> {
        for j in jumps {
            if !(j.rate.is_finite() && j.rate >= 0.0) {
                return Err(Error::InvalidNoise(format!(
                    "jump rate {} must be >= 0",
                    j.rate
                )));
            }
            if j.size.len() != dim {
                return Err(Error::InvalidNoise(format!(
                    "jump of dimension {} in H of dimension {dim}",
                    j.size.len()
                )));
            }
            if j.size.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidNoise("non-finite jump size".into()));
            }
        }
        Ok(())
    }

    /// Internal consistency and compatibility with `grid`.
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        match self {
            NoiseSpec::WhiteNoise { lambda } => {
                if let Some(l) = lambda.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
                    return Err(Error::InvalidNoise(format!(
                        "white-noise intensity {l} must be >= 0"
                    )));
                }
            }
            NoiseSpec::DiscreteLevy { atoms } => {
                let dim = self.h_dim();
                if atoms.is_empty() || dim == 0 {
                    return Err(Error::InvalidNoise(
                        "discrete_levy needs at least one atom".into(),
                    ));
                }
                for a in atoms {
                    if a.brownian.dim() != dim {
                        return Err(Error::InvalidNoise("atoms disagree on dim(H)".into()));
                    }
                    Self::check_jumps(&a.jumps, dim)?;
                }
            }
            NoiseSpec::HValuedLevy { q, jumps } => {
                Self::check_jumps(jumps, q.dim())?;
            }
            NoiseSpec::IntegralType { selector, .. } => {
                if selector.len() != grid.n_steps() {
                    return Err(Error::InvalidNoise(format!(
                        "selector has {} entries for {} steps",
                        selector.len(),
                        grid.n_steps()
                    )));
                }
            }
        }
        if self.n_atoms() > grid.n_atoms()
            || (!matches!(self, NoiseSpec::IntegralType { .. }) && self.n_atoms() != grid.n_atoms())
        {
            return Err(Error::InvalidNoise(format!(
                "{} needs {} atoms, grid has {}",
                self.name(),
                self.n_atoms(),
                grid.n_atoms()
            )));
        }
        Ok(())
    }

    /// Covariance of the increment on `(step, atom)` per unit time.
    pub(crate) fn unit_covariance(&self, step: usize, atom: usize) -> DMatrix<f64> {
        let d = self.h_dim();
        match self {
            NoiseSpec::WhiteNoise { lambda } => DMatrix::from_element(1, 1, lambda[atom]),
            NoiseSpec::DiscreteLevy { atoms } => atoms[atom].covariance(),
            NoiseSpec::HValuedLevy { q, jumps } => {
                if atom == 0 {
                    q.matrix().clone()
                } else {
                    let j = &jumps[atom - 1];
                    let u = j.vector();
                    &u * u.transpose() * j.rate
                }
            }
            NoiseSpec::IntegralType { base, selector } => {
                if selector[step] == atom {
                    base.matrix().clone()
                } else {
                    DMatrix::zeros(d, d)
                }
            }
        }
    }
}

/// Per-atom sampling recipe with square roots precomputed.
pub(crate) enum AtomSampler {
    Gaussian(DMatrix<f64>),
    Levy {
        root: DMatrix<f64>,
        jumps: Vec<(DVector<f64>, f64)>,
    },
}

pub(crate) fn samplers(spec: &NoiseSpec) -> Vec<AtomSampler> {
    match spec {
        NoiseSpec::WhiteNoise { lambda } => lambda
            .iter()
            .map(|l| AtomSampler::Gaussian(DMatrix::from_element(1, 1, l.sqrt())))
            .collect(),
        NoiseSpec::DiscreteLevy { atoms } => atoms
            .iter()
            .map(|a| AtomSampler::Levy {
                root: psd_sqrt(&a.brownian).into_matrix(),
                jumps: a.jumps.iter().map(|j| (j.vector(), j.rate)).collect(),
            })
            .collect(),
        NoiseSpec::HValuedLevy { q, jumps } => {
            let d = q.dim();
            std::iter::once(AtomSampler::Gaussian(psd_sqrt(q).into_matrix()))
                .chain(jumps.iter().map(|j| AtomSampler::Levy {
                    root: DMatrix::zeros(d, d),
                    jumps: vec![(j.vector(), j.rate)],
                }))
                .collect()
        }
        NoiseSpec::IntegralType { base, .. } => {
            vec![AtomSampler::Gaussian(psd_sqrt(base).into_matrix())]
        }
    }
}
