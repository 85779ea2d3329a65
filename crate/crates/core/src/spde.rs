//! Mild and weak solutions of `dX = [A X + B(X)] dt + int_U F(u, X) M(dt, du)`
//! for a diagonal generator `A = -diag(lambda_k)`.
//!
//! The semigroup is applied exactly, so the only discretization is the
//! left-endpoint quadrature of the drift and the grid stochastic integral.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integral::{cell_increments, GridIntegrand, IntegralPathEnsemble};
use crate::linalg::HsOperator;
use crate::measure::GridSpec;
use crate::noise::{mean_var, LevyAtom, MvmPathEnsemble, NoiseSpec};
use crate::quadvar::{QmField, QvEstimate};

/// `S(t) = diag(exp(-lambda_k t))` with growth constants `||S(t)|| <= N e^{kappa t}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemigroupSpec {
    pub eigenvalues: Vec<f64>,
    pub growth_n: f64,
    pub kappa: f64,
}

impl SemigroupSpec {
    pub fn new(eigenvalues: Vec<f64>) -> Result<Self> {
        if let Some(l) = eigenvalues.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::Refused(format!(
                "eigenvalue {l} must be finite and >= 0"
            )));
        }
        Ok(Self {
            eigenvalues,
            growth_n: 1.0,
            kappa: 0.0,
        })
    }

    /// Dirichlet Laplacian on `(0, 1)` in the sine basis: `lambda_k = (k pi)^2`, `k = 1..=modes`.
    pub fn heat(modes: usize) -> Self {
        let eigenvalues = (1..=modes)
            .map(|k| (k as f64 * std::f64::consts::PI).powi(2))
            .collect();
        Self {
            eigenvalues,
            growth_n: 1.0,
            kappa: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn factors(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.eigenvalues.iter().map(|l| (-l * t).exp()))
    }

    pub fn apply(&self, t: f64, g: &DVector<f64>) -> DVector<f64> {
        g.component_mul(&self.factors(t))
    }

    /// `N^2 e^{2 kappa T}`.
    pub fn growth_sq(&self, horizon: f64) -> f64 {
        self.growth_n.powi(2) * (2.0 * self.kappa * horizon).exp()
    }
}

/// Drift presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftSpec {
    Zero,
    /// `B(g) = c g`.
    Linear {
        c: f64,
    },
    /// `B(g)_k = c clamp(g_k, -clip, clip)`.
    Clipped {
        c: f64,
        clip: f64,
    },
}

/// Diffusion presets; `ops[atom]` maps `H` to `G`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiffusionSpec {
    Zero {
        g_dim: usize,
        h_dim: usize,
    },
    /// `F(u, g) = ops[u]`.
    Additive {
        ops: Vec<HsOperator>,
    },
    /// `F(u, g) = diag(1 + c clamp(g_k, -clip, clip)) ops[u]`.
    Nemytskii {
        ops: Vec<HsOperator>,
        c: f64,
        clip: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSpec {
    pub drift: DriftSpec,
    pub diffusion: DiffusionSpec,
}

fn clamp_vec(g: &DVector<f64>, clip: f64) -> DVector<f64> {
    g.map(|v| v.clamp(-clip, clip))
}

impl CoefficientSpec {
    pub fn b(&self, g: &DVector<f64>) -> DVector<f64> {
        match &self.drift {
            DriftSpec::Zero => DVector::zeros(g.len()),
            DriftSpec::Linear { c } => g * *c,
            DriftSpec::Clipped { c, clip } => clamp_vec(g, *clip) * *c,
        }
    }

    /// Lipschitz and linear-growth constant of `B`.
    pub fn c_b(&self) -> f64 {
        match &self.drift {
            DriftSpec::Zero => 0.0,
            DriftSpec::Linear { c } | DriftSpec::Clipped { c, .. } => c.abs(),
        }
    }

    pub fn h_dim(&self) -> usize {
        match &self.diffusion {
            DiffusionSpec::Zero { h_dim, .. } => *h_dim,
            DiffusionSpec::Additive { ops } | DiffusionSpec::Nemytskii { ops, .. } => {
                ops.first().map_or(0, |m| m.ncols())
            }
        }
    }

    pub fn g_dim(&self) -> usize {
        match &self.diffusion {
            DiffusionSpec::Zero { g_dim, .. } => *g_dim,
            DiffusionSpec::Additive { ops } | DiffusionSpec::Nemytskii { ops, .. } => {
                ops.first().map_or(0, |m| m.nrows())
            }
        }
    }

    pub fn is_additive(&self) -> bool {
        !matches!(self.diffusion, DiffusionSpec::Nemytskii { .. })
    }

    pub fn f(&self, atom: usize, g: &DVector<f64>) -> HsOperator {
        match &self.diffusion {
            DiffusionSpec::Zero { g_dim, h_dim } => DMatrix::zeros(*g_dim, *h_dim),
            DiffusionSpec::Additive { ops } => ops[atom].clone(),
            DiffusionSpec::Nemytskii { ops, c, clip } => {
                let d = clamp_vec(g, *clip).map(|v| 1.0 + c * v);
                DMatrix::from_diagonal(&d) * &ops[atom]
            }
        }
    }

    /// Constant `C_F` of the integrated growth and Lipschitz conditions on
    /// `F`, given `Q_M` and the quadratic-variation rate per unit time of
    /// each atom (taken from the first step).
    pub fn c_f(&self, qm: &QmField, qv: &QvEstimate) -> f64 {
        let grid = qv.measure.grid();
        let rate = |a: usize| qv.measure.at(0, a) / grid.dt(0);
        let row_cost = |a: usize, op: &HsOperator| {
            let m = op * qm.sqrt_cell(grid.cell(0, a)).matrix();
            let rows = m.row_iter().map(|r| r.norm_squared()).fold(0.0, f64::max);
            (m.norm_squared(), rows)
        };
        match &self.diffusion {
            DiffusionSpec::Zero { .. } => 0.0,
            DiffusionSpec::Additive { ops } => ops
                .iter()
                .enumerate()
                .map(|(a, op)| rate(a) * row_cost(a, op).0)
                .sum(),
            DiffusionSpec::Nemytskii { ops, c, clip } => {
                let (mut growth, mut lip) = (0.0, 0.0);
                for (a, op) in ops.iter().enumerate() {
                    let (hs, row) = row_cost(a, op);
                    growth += rate(a) * hs * (1.0 + c.abs() * clip).powi(2);
                    lip += rate(a) * row * c * c;
                }
                f64::max(growth, lip)
            }
        }
    }

    /// Largest observed `||B(g) - B(h)|| / ||g - h||` and
    /// `||F(g) - F(h)||_HS / ||g - h||` over random pairs.
    pub fn lipschitz_probe(&self, samples: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.g_dim();
        let atoms = match &self.diffusion {
            DiffusionSpec::Zero { .. } => 1,
            DiffusionSpec::Additive { ops } | DiffusionSpec::Nemytskii { ops, .. } => ops.len(),
        };
        let (mut lb, mut lf) = (0.0f64, 0.0f64);
        for _ in 0..samples {
            let g = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
            let h = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
            let dist = (&g - &h).norm();
            if dist == 0.0 {
                continue;
            }
            lb = lb.max((self.b(&g) - self.b(&h)).norm() / dist);
            for a in 0..atoms {
                lf = lf.max((self.f(a, &g) - self.f(a, &h)).norm() / dist);
            }
        }
        (lb, lf)
    }
}

/// Stochastic convolution `int_0^t S(t - s) Phi dM` on every path and grid time,
/// via `Y_{n+1} = S(dt_n) (Y_n + sum_atoms Phi dM)`.
pub fn stochastic_convolution(
    sg: &SemigroupSpec,
    phi: &dyn GridIntegrand,
    ens: &MvmPathEnsemble,
) -> Result<IntegralPathEnsemble> {
    if phi.g_dim() != sg.dim() {
        return Err(Error::Dimension(format!(
            "integrand maps into dim {}, semigroup has {} modes",
            phi.g_dim(),
            sg.dim()
        )));
    }
    let grid = ens.grid();
    let (n, g) = (grid.n_steps(), sg.dim());
    let mut incs = cell_increments(phi, ens)?;
    let steps: Vec<DVector<f64>> = (0..n).map(|i| sg.factors(grid.dt(i))).collect();
    if g > 0 {
        incs.par_chunks_mut(n * g).for_each(|row| {
            let mut y = DVector::zeros(g);
            for (i, slot) in row.chunks_mut(g).enumerate() {
                for c in 0..g {
                    y[c] = steps[i][c] * (y[c] + slot[c]);
                }
                slot.copy_from_slice(y.as_slice());
            }
        });
    }
    // `incs` now holds Y_1..Y_n; prepend Y_0 = 0
    Ok(IntegralPathEnsemble::from_fn(
        grid.clone(),
        g,
        ens.paths(),
        |p, k| {
            if k == 0 {
                DVector::zeros(g)
            } else {
                let o = (p * n + k - 1) * g;
                DVector::from_column_slice(&incs[o..o + g])
            }
        },
    ))
}

/// `E ||int_0^{t_k} S(t_k - s) Phi dM||^2` for a deterministic per-cell `Phi`,
/// summed cell by cell with the isometry.
pub fn convolution_second_moment(
    sg: &SemigroupSpec,
    phi_cells: &dyn Fn(usize) -> HsOperator,
    qm: &QmField,
    qv: &QvEstimate,
) -> Vec<f64> {
    let grid = qv.measure.grid();
    let t = grid.time_points();
    let n = grid.n_steps();
    (0..=n)
        .map(|k| {
            let mut acc = 0.0;
            for i in 0..k {
                let decay = sg.factors(t[k] - t[i]);
                for a in 0..grid.n_atoms() {
                    let c = grid.cell(i, a);
                    let m =
                        DMatrix::from_diagonal(&decay) * phi_cells(c) * qm.sqrt_cell(c).matrix();
                    acc += m.norm_squared() * qv.measure.mass(c);
                }
            }
            acc
        })
        .collect()
}

/// Initial condition: one vector for all paths, or one per path.
#[derive(Clone, Debug)]
pub enum InitialValue {
    Deterministic(DVector<f64>),
    PerPath(Vec<DVector<f64>>),
}

impl InitialValue {
    fn get(&self, p: usize) -> &DVector<f64> {
        match self {
            InitialValue::Deterministic(x) => x,
            InitialValue::PerPath(v) => &v[p],
        }
    }

    fn dim(&self) -> usize {
        match self {
            InitialValue::Deterministic(x) => x.len(),
            InitialValue::PerPath(v) => v.first().map_or(0, |x| x.len()),
        }
    }
}

/// Starting process of the Picard iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialGuess {
    Zero,
    FreeEvolution,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PicardConfig {
    /// `None` picks the default weight (both contraction factors `<= 1/8`).
    pub beta: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub guess: InitialGuess,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            beta: None,
            tol: 1e-6,
            max_iter: 50,
            guess: InitialGuess::Zero,
        }
    }
}

/// `(N^2 C_B^2 T e^{2 kappa T}, C_F N^2 e^{2 kappa T})`.
pub fn contraction_constants(sg: &SemigroupSpec, c_b: f64, c_f: f64, horizon: f64) -> (f64, f64) {
    let g = sg.growth_sq(horizon);
    (g * c_b * c_b * horizon, g * c_f)
}

pub fn default_beta(sg: &SemigroupSpec, c_b: f64, c_f: f64, horizon: f64) -> f64 {
    let (a, b) = contraction_constants(sg, c_b, c_f, horizon);
    8.0 * a.max(b)
}

#[derive(Clone, Debug)]
pub struct MildSolutionPath {
    pub x: IntegralPathEnsemble,
    /// `d(X^{(m+1)}, X^{(m)})` in `V_beta`, one entry per application of `R`.
    pub picard_trace: Vec<f64>,
    /// Successive ratios of the trace.
    pub ratios: Vec<f64>,
    /// Index `m` of the returned iterate.
    pub iterations: usize,
    pub beta: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// `max(a, b)^{1/2}` with `a, b` the two contraction factors over `beta`.
    pub analytic_ratio: f64,
    /// `a^{1/2} + b^{1/2}`, the bound for the sum of the two parts of `R`.
    pub analytic_ratio_sum: f64,
}

impl MildSolutionPath {
    pub fn max_ratio(&self) -> f64 {
        self.ratios.iter().copied().fold(0.0, f64::max)
    }

    pub fn residual(&self) -> f64 {
        self.picard_trace
            .get(self.iterations)
            .copied()
            .unwrap_or(f64::NAN)
    }

    /// `t, mean ||X_t||^2, se`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        self.x.write_summary_csv(out, None)
    }
}

/// `(sum_p sum_{k<n} e^{-beta t_k} ||X_k - Y_k||^2 dt_k / P)^{1/2}`.
pub fn v_beta_distance(x: &IntegralPathEnsemble, y: &IntegralPathEnsemble, beta: f64) -> f64 {
    let grid = x.grid();
    let t = grid.time_points();
    let n = grid.n_steps();
    let per_path: Vec<f64> = (0..x.paths())
        .into_par_iter()
        .map(|p| {
            (0..n)
                .map(|k| {
                    (-beta * t[k]).exp()
                        * (x.value(p, k) - y.value(p, k)).norm_squared()
                        * grid.dt(k)
                })
                .sum()
        })
        .collect();
    (per_path.iter().sum::<f64>() / x.paths() as f64).sqrt()
}

/// One application of `R(X)_t = S(t) X_0 + int S(t-s) B(X_s) ds + int int S(t-s) F(u, X_s) M(ds, du)`.
/// `noise` holds the precomputed additive noise term when `F` ignores the state.
fn picard_map(
    sg: &SemigroupSpec,
    coeffs: &CoefficientSpec,
    ens: &MvmPathEnsemble,
    x0: &InitialValue,
    x: &IntegralPathEnsemble,
    noise: Option<&IntegralPathEnsemble>,
) -> Result<IntegralPathEnsemble> {
    let grid = ens.grid();
    let t = grid.time_points();
    let (n, na, g) = (grid.n_steps(), grid.n_atoms(), sg.dim());
    let steps: Vec<DVector<f64>> = (0..n).map(|i| sg.factors(grid.dt(i))).collect();
    let rows: Vec<Vec<DVector<f64>>> = (0..ens.paths())
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::with_capacity(n + 1);
            let mut y = DVector::zeros(g);
            out.push(x0.get(p).clone());
            for i in 0..n {
                let xi = x.value(p, i).into_owned();
                let mut inc = coeffs.b(&xi) * grid.dt(i);
                if noise.is_none() {
                    for a in 0..na {
                        inc.gemv(1.0, &coeffs.f(a, &xi), &ens.increment(p, i, a), 1.0);
                    }
                }
                y = (y + inc).component_mul(&steps[i]);
                let mut v = sg.apply(t[i + 1], x0.get(p)) + &y;
                if let Some(nz) = noise {
                    v += nz.value(p, i + 1);
                }
                if v.iter().any(|c| !c.is_finite()) {
                    return Err(Error::NonFinite {
                        path: p,
                        time: i + 1,
                    });
                }
                out.push(v);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(IntegralPathEnsemble::from_fn(
        grid.clone(),
        g,
        ens.paths(),
        |p, k| rows[p][k].clone(),
    ))
}

struct AdditiveF<'a>(&'a CoefficientSpec);

impl GridIntegrand for AdditiveF<'_> {
    fn g_dim(&self) -> usize {
        self.0.g_dim()
    }
    fn h_dim(&self) -> usize {
        self.0.h_dim()
    }
    fn value(&self, _: &crate::integral::History<'_>, atom: usize) -> Result<HsOperator> {
        Ok(self.0.f(atom, &DVector::zeros(self.0.g_dim())))
    }
}

/// Picard iteration for the mild solution on the noise ensemble `ens`,
/// reused across iterates. `c_f` is the declared constant of the diffusion.
pub fn picard_solve(
    sg: &SemigroupSpec,
    coeffs: &CoefficientSpec,
    ens: &MvmPathEnsemble,
    x0: &InitialValue,
    c_f: f64,
    cfg: &PicardConfig,
) -> Result<MildSolutionPath> {
    let grid = ens.grid();
    let g = sg.dim();
    if x0.dim() != g || coeffs.g_dim() != g || coeffs.h_dim() != ens.h_dim() {
        return Err(Error::Dimension(
            "initial value, coefficients, semigroup and noise disagree".into(),
        ));
    }
    if let InitialValue::PerPath(v) = x0 {
        if v.len() != ens.paths() {
            return Err(Error::Dimension(
                "one initial value per path required".into(),
            ));
        }
    }
    if !(cfg.tol > 0.0) || cfg.max_iter == 0 {
        return Err(Error::Refused(
            "tol must be positive and max_iter at least 1".into(),
        ));
    }
    let horizon = grid.horizon();
    let beta = cfg
        .beta
        .unwrap_or_else(|| default_beta(sg, coeffs.c_b(), c_f, horizon));
    let (a, b) = contraction_constants(sg, coeffs.c_b(), c_f, horizon);
    let (ra, rb) = if beta > 0.0 {
        (a / beta, b / beta)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    let noise = if coeffs.is_additive() {
        Some(stochastic_convolution(sg, &AdditiveF(coeffs), ens)?)
    } else {
        None
    };
    let t = grid.time_points();
    let mut x = match cfg.guess {
        InitialGuess::Zero => {
            IntegralPathEnsemble::from_fn(grid.clone(), g, ens.paths(), |_, _| DVector::zeros(g))
        }
        InitialGuess::FreeEvolution => {
            IntegralPathEnsemble::from_fn(grid.clone(), g, ens.paths(), |p, k| {
                sg.apply(t[k], x0.get(p))
            })
        }
    };
    let mut trace = Vec::new();
    let mut ratios = Vec::new();
    for m in 0..cfg.max_iter {
        let next = picard_map(sg, coeffs, ens, x0, &x, noise.as_ref())?;
        let d = v_beta_distance(&next, &x, beta);
        if let Some(&prev) = trace.last() {
            if prev > 0.0 {
                ratios.push(d / prev);
            }
        }
        trace.push(d);
        if d <= cfg.tol {
            return Ok(MildSolutionPath {
                x,
                picard_trace: trace,
                ratios,
                iterations: m,
                beta,
                tol: cfg.tol,
                max_iter: cfg.max_iter,
                analytic_ratio: ra.max(rb).sqrt(),
                analytic_ratio_sum: ra.sqrt() + rb.sqrt(),
            });
        }
        x = next;
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iter,
        last_ratio: ratios.last().copied().unwrap_or(f64::NAN),
        residual: trace.last().copied().unwrap_or(f64::NAN),
    })
}

/// Weak-form residual against the spectral test vector `e_mode`.
#[derive(Clone, Debug, Serialize)]
pub struct WeakResidual {
    pub mode: usize,
    /// `max_t |residual_t|` per path.
    pub per_path_max: Vec<f64>,
    /// Root mean square of `per_path_max`.
    pub rms_max: f64,
    /// Residual profile of path 0.
    pub path0: Vec<f64>,
}

/// `r_n = (X_n, e) - (X_0, e) + lambda sum_{i<n} (X_i, e) dt_i - sum_{i<n} (B(X_i), e) dt_i
///        - sum_{i<n} (F(X_i) dM_i, e)`.
pub fn weak_residual(
    x: &IntegralPathEnsemble,
    sg: &SemigroupSpec,
    coeffs: &CoefficientSpec,
    ens: &MvmPathEnsemble,
    mode: usize,
) -> Result<WeakResidual> {
    if mode >= sg.dim() {
        return Err(Error::Refused(format!(
            "test vector must be one of the {} spectral modes, got index {mode}",
            sg.dim()
        )));
    }
    let grid = ens.grid();
    let (n, na) = (grid.n_steps(), grid.n_atoms());
    let lambda = sg.eigenvalues[mode];
    let profiles: Vec<Vec<f64>> = (0..x.paths())
        .into_par_iter()
        .map(|p| {
            let x0 = x.value(p, 0)[mode];
            let mut drift = 0.0;
            let mut noise = 0.0;
            let mut r = vec![0.0; n + 1];
            for i in 0..n {
                let xi = x.value(p, i).into_owned();
                drift += (lambda * xi[mode] - coeffs.b(&xi)[mode]) * grid.dt(i);
                for a in 0..na {
                    noise += coeffs
                        .f(a, &xi)
                        .row(mode)
                        .dot(&ens.increment(p, i, a).transpose());
                }
                r[i + 1] = x.value(p, i + 1)[mode] - x0 + drift - noise;
            }
            r
        })
        .collect();
    let per_path_max: Vec<f64> = profiles
        .iter()
        .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    let rms_max =
        (per_path_max.iter().map(|v| v * v).sum::<f64>() / per_path_max.len().max(1) as f64).sqrt();
    Ok(WeakResidual {
        mode,
        rms_max,
        path0: profiles.first().cloned().unwrap_or_default(),
        per_path_max,
    })
}

/// Weak residual of the exact free evolution `e^{-lambda t_n} x0` on a uniform grid.
pub fn deterministic_weak_residual(lambda: f64, x0: f64, dt: f64, n: usize) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let tn = dt * n as f64;
    let decay = (-lambda * tn).exp();
    x0 * (decay - 1.0 + lambda * dt * (1.0 - decay) / (1.0 - (-lambda * dt).exp()))
}

/// Stochastic heat equation with additive noise: `F(alpha)(h) = sum_i alpha_i h_i sigma_i`.
#[derive(Clone, Debug)]
pub struct HeatSetup {
    pub semigroup: SemigroupSpec,
    pub coeffs: CoefficientSpec,
    pub noise: NoiseSpec,
    pub f_alpha: HsOperator,
}

impl HeatSetup {
    /// Covariance per unit time of the single noise atom.
    pub fn noise_covariance(&self) -> DMatrix<f64> {
        match &self.noise {
            NoiseSpec::DiscreteLevy { atoms } => atoms[0].covariance(),
            _ => unreachable!("heat setup always uses a single discrete Levy atom"),
        }
    }
}

/// `sigmas[i]` holds the sine-mode coefficients of `sigma_i`; all share the mode count.
pub fn heat_example_setup(sigmas: &[Vec<f64>], alpha: &[f64], levy: LevyAtom) -> Result<HeatSetup> {
    if sigmas.is_empty() || sigmas.len() != alpha.len() {
        return Err(Error::Dimension(format!(
            "{} sigmas for {} weights",
            sigmas.len(),
            alpha.len()
        )));
    }
    let modes = sigmas[0].len();
    if modes == 0 || sigmas.iter().any(|s| s.len() != modes) {
        return Err(Error::Dimension(
            "sigmas must share a positive mode count".into(),
        ));
    }
    if levy.brownian.dim() != sigmas.len() {
        return Err(Error::Dimension(format!(
            "noise covariance is {}x{}, expected {} coordinates",
            levy.brownian.dim(),
            levy.brownian.dim(),
            sigmas.len()
        )));
    }
    let f_alpha = DMatrix::from_fn(modes, sigmas.len(), |k, i| alpha[i] * sigmas[i][k]);
    let expected: f64 = sigmas
        .iter()
        .zip(alpha)
        .map(|(s, a)| a * a * s.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let hs = f_alpha.norm_squared();
    if (hs - expected).abs() > 1e-12 * expected.max(1.0) {
        return Err(Error::Dimension(format!(
            "||F||_HS^2 = {hs} but sum alpha_i^2 ||sigma_i||^2 = {expected}"
        )));
    }
    Ok(HeatSetup {
        semigroup: SemigroupSpec::heat(modes),
        coeffs: CoefficientSpec {
            drift: DriftSpec::Zero,
            diffusion: DiffusionSpec::Additive {
                ops: vec![f_alpha.clone()],
            },
        },
        noise: NoiseSpec::DiscreteLevy { atoms: vec![levy] },
        f_alpha,
    })
}

/// Mean and standard error of `int_0^T ||Y_t||^2 dt` (left-endpoint quadrature).
pub fn time_integrated_second_moment(x: &IntegralPathEnsemble) -> (f64, f64) {
    let grid = x.grid();
    let vals: Vec<f64> = (0..x.paths())
        .map(|p| {
            (0..grid.n_steps())
                .map(|k| x.value(p, k).norm_squared() * grid.dt(k))
                .sum()
        })
        .collect();
    let (m, v) = mean_var(vals.iter().copied(), vals.len());
    (m, (v / vals.len() as f64).sqrt())
}

/// The grid used by the heat scenarios.
pub fn heat_grid(horizon: f64, steps: usize) -> Result<Arc<GridSpec>> {
    Ok(Arc::new(GridSpec::uniform(horizon, steps, 1)?))
}
