//! Stochastic integrals of `L(H, G)`-valued integrands against a simulated
//! martingale-valued measure, with the isometry, stopping, localization,
//! Fubini and push-forward identities checked on sample paths.
//!
//! Integrands are evaluated at the left endpoint of each cell through a
//! [`History`] that refuses to read increments at or after the cut-off, so a
//! non-adapted integrand fails with [`Error::Adaptedness`] instead of
//! silently peeking into the future.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, DVectorView};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{HVector, HsOperator};
use crate::measure::{AtomSet, GridSpec};
use crate::noise::{mean_var, MvmPathEnsemble};
use crate::quadvar::{QmField, QvEstimate};

/// Relative slack for identities that hold up to floating-point reassociation.
pub const IDENTITY_TOL: f64 = 1e-10;

/// Read-only view of one path's increments strictly before step `cutoff`.
#[derive(Clone, Copy)]
pub struct History<'a> {
    ens: &'a MvmPathEnsemble,
    path: usize,
    cutoff: usize,
}

impl<'a> History<'a> {
    pub fn new(ens: &'a MvmPathEnsemble, path: usize, cutoff: usize) -> Self {
        Self { ens, path, cutoff }
    }

    pub fn path(&self) -> usize {
        self.path
    }

    /// Index of the current left endpoint; steps `< cutoff` are visible.
    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.ens.grid()
    }

    pub fn time(&self) -> f64 {
        self.grid().time_points()[self.cutoff]
    }

    pub fn increment(&self, step: usize, atom: usize) -> Result<DVectorView<'a, f64>> {
        if step >= self.cutoff {
            return Err(Error::Adaptedness {
                cutoff: self.cutoff,
                cell: self.grid().cell(step.min(self.grid().n_steps() - 1), atom),
            });
        }
        Ok(self.ens.increment(self.path, step, atom))
    }

    /// `M(t_n, A)(x)` for `n <= cutoff`.
    pub fn tested(&self, n: usize, set: &AtomSet, x: &HVector) -> Result<f64> {
        if n > self.cutoff {
            let atom = set.atoms().first().copied().unwrap_or(0);
            return Err(Error::Adaptedness {
                cutoff: self.cutoff,
                cell: self.grid().cell(n - 1, atom),
            });
        }
        Ok(self.ens.tested(self.path, n, set, x))
    }

    /// The same path seen from an earlier cut-off.
    pub fn truncated(&self, cutoff: usize) -> Self {
        Self {
            cutoff: cutoff.min(self.cutoff),
            ..*self
        }
    }
}

/// Operator-valued integrand evaluated on `(path, step, atom)` from the
/// history strictly before `step`.
pub trait GridIntegrand: Send + Sync {
    fn g_dim(&self) -> usize;
    fn h_dim(&self) -> usize;
    fn value(&self, hist: &History<'_>, atom: usize) -> Result<HsOperator>;
}

impl<T: GridIntegrand + ?Sized> GridIntegrand for &T {
    fn g_dim(&self) -> usize {
        (**self).g_dim()
    }
    fn h_dim(&self) -> usize {
        (**self).h_dim()
    }
    fn value(&self, hist: &History<'_>, atom: usize) -> Result<HsOperator> {
        (**self).value(hist, atom)
    }
}

impl<T: GridIntegrand + ?Sized> GridIntegrand for Box<T> {
    fn g_dim(&self) -> usize {
        (**self).g_dim()
    }
    fn h_dim(&self) -> usize {
        (**self).h_dim()
    }
    fn value(&self, hist: &History<'_>, atom: usize) -> Result<HsOperator> {
        (**self).value(hist, atom)
    }
}

impl<T: GridIntegrand + ?Sized> GridIntegrand for Arc<T> {
    fn g_dim(&self) -> usize {
        (**self).g_dim()
    }
    fn h_dim(&self) -> usize {
        (**self).h_dim()
    }
    fn value(&self, hist: &History<'_>, atom: usize) -> Result<HsOperator> {
        (**self).value(hist, atom)
    }
}

/// `Phi = S` everywhere.
#[derive(Clone, Debug)]
pub struct ConstantIntegrand(pub HsOperator);

impl GridIntegrand for ConstantIntegrand {
    fn g_dim(&self) -> usize {
        self.0.nrows()
    }
    fn h_dim(&self) -> usize {
        self.0.ncols()
    }
    fn value(&self, _: &History<'_>, _: usize) -> Result<HsOperator> {
        Ok(self.0.clone())
    }
}

/// A state-free integrand: one operator per grid cell.
#[derive(Clone, Debug)]
pub struct DeterministicIntegrand {
    grid: Arc<GridSpec>,
    values: Vec<HsOperator>,
}

impl DeterministicIntegrand {
    pub fn new(grid: Arc<GridSpec>, values: Vec<HsOperator>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::Dimension(format!(
                "{} operators for {} cells",
                values.len(),
                grid.n_cells()
            )));
        }
        let shape = values.first().map(|m| m.shape());
        if values.iter().any(|m| Some(m.shape()) != shape) {
            return Err(Error::Dimension("cell operators differ in shape".into()));
        }
        Ok(Self { grid, values })
    }
}

impl GridIntegrand for DeterministicIntegrand {
    fn g_dim(&self) -> usize {
        self.values.first().map_or(0, |m| m.nrows())
    }
    fn h_dim(&self) -> usize {
        self.values.first().map_or(0, |m| m.ncols())
    }
    fn value(&self, hist: &History<'_>, atom: usize) -> Result<HsOperator> {
        Ok(self.values[self.grid.cell(hist.cutoff(), atom)].clone())
    }
}

type IntegrandFn = dyn Fn(&History<'_>, usize) -> Result<HsOperator> + Send + Sync;

/// Integrand given by a closure over the visible history.
pub struct AdaptedIntegrand {
    g_dim: usize,
    h_dim: usize,
    f: Box<IntegrandFn>,
}

impl AdaptedIntegrand {
    pub fn new<F>(g_dim: usize, h_dim: usize, f: F) -> Self
    where
        F: Fn(&History<'_>, usize) -> Result<HsOperator> + Send + Sync + 'static,
    {
        Self {
            g_dim,
            h_dim,
            f: Box::new(f),
        }
    }
}

impl GridIntegrand for AdaptedIntegrand {
    fn g_dim(&self) -> usize {
        self.g_dim
    }
    fn h_dim(&self) -> usize {
        self.h_dim
    }
    fn value(&self, hist: &History<'_>, atom: usize) -> Result<HsOperator> {
        (self.f)(hist, atom)
    }
}

/// Per-path table of cell operators, filled once through [`History`] views.
#[derive(Clone, Debug)]
pub struct TabulatedIntegrand {
    n_cells: usize,
    g_dim: usize,
    h_dim: usize,
    values: Vec<HsOperator>,
}

impl TabulatedIntegrand {
    /// Evaluates `phi` on every `(path, cell)` of `ens`.
    pub fn from_integrand(phi: &dyn GridIntegrand, ens: &MvmPathEnsemble) -> Result<Self> {
        let grid = ens.grid();
        let (n, na) = (grid.n_steps(), grid.n_atoms());
        let values = (0..ens.paths())
            .into_par_iter()
            .map(|p| {
                let mut row = Vec::with_capacity(n * na);
                for i in 0..n {
                    let h = History::new(ens, p, i);
                    for a in 0..na {
                        row.push(checked_value(phi, &h, a)?);
                    }
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        Ok(Self {
            n_cells: grid.n_cells(),
            g_dim: phi.g_dim(),
            h_dim: phi.h_dim(),
            values,
        })
    }

    /// Wraps precomputed values laid out `[path][cell]`. The caller vouches
    /// that cell `(i, a)` only used information up to `t_i`.
    pub fn from_values(
        grid: &GridSpec,
        paths: usize,
        g_dim: usize,
        h_dim: usize,
        values: Vec<HsOperator>,
    ) -> Result<Self> {
        if values.len() != paths * grid.n_cells()
            || values.iter().any(|m| m.shape() != (g_dim, h_dim))
        {
            return Err(Error::Dimension(
                "tabulated integrand has the wrong layout".into(),
            ));
        }
        Ok(Self {
            n_cells: grid.n_cells(),
            g_dim,
            h_dim,
            values,
        })
    }
}

impl GridIntegrand for TabulatedIntegrand {
    fn g_dim(&self) -> usize {
        self.g_dim
    }
    fn h_dim(&self) -> usize {
        self.h_dim
    }
    fn value(&self, hist: &History<'_>, atom: usize) -> Result<HsOperator> {
        let c = hist.grid().cell(hist.cutoff(), atom);
        Ok(self.values[hist.path() * self.n_cells + c].clone())
    }
}

/// `sum_e w_e Psi_e`.
pub struct LinearCombination<'a> {
    terms: Vec<(f64, &'a dyn GridIntegrand)>,
}

impl<'a> LinearCombination<'a> {
    pub fn new(terms: Vec<(f64, &'a dyn GridIntegrand)>) -> Result<Self> {
        let Some((_, first)) = terms.first() else {
            return Err(Error::EmptyFamily);
        };
        let shape = (first.g_dim(), first.h_dim());
        if terms.iter().any(|(_, t)| (t.g_dim(), t.h_dim()) != shape) {
            return Err(Error::Dimension(
                "integrands in the family differ in shape".into(),
            ));
        }
        Ok(Self { terms })
    }
}

impl GridIntegrand for LinearCombination<'_> {
    fn g_dim(&self) -> usize {
        self.terms[0].1.g_dim()
    }
    fn h_dim(&self) -> usize {
        self.terms[0].1.h_dim()
    }
    fn value(&self, hist: &History<'_>, atom: usize) -> Result<HsOperator> {
        let mut acc = DMatrix::zeros(self.g_dim(), self.h_dim());
        for (w, t) in &self.terms {
            acc += t.value(hist, atom)? * *w;
        }
        Ok(acc)
    }
}

/// `1_{[0, sigma]} Phi` for a per-path grid index `sigma`.
pub struct Stopped<I> {
    pub inner: I,
    pub sigma: Vec<usize>,
}

impl<I: GridIntegrand> GridIntegrand for Stopped<I> {
    fn g_dim(&self) -> usize {
        self.inner.g_dim()
    }
    fn h_dim(&self) -> usize {
        self.inner.h_dim()
    }
    fn value(&self, hist: &History<'_>, atom: usize) -> Result<HsOperator> {
        if hist.cutoff() < self.sigma[hist.path()] {
            self.inner.value(hist, atom)
        } else {
            Ok(DMatrix::zeros(self.g_dim(), self.h_dim()))
        }
    }
}

/// An event decided from the history up to its own time.
pub type Event = Arc<dyn Fn(&History<'_>) -> Result<bool> + Send + Sync>;

/// `1_{(t_lo, t_hi] x F} Phi` with `F` decided at `t_lo`.
pub struct Restricted<I> {
    pub inner: I,
    pub lo: usize,
    pub hi: usize,
    pub event: Option<Event>,
}

impl<I: GridIntegrand> GridIntegrand for Restricted<I> {
    fn g_dim(&self) -> usize {
        self.inner.g_dim()
    }
    fn h_dim(&self) -> usize {
        self.inner.h_dim()
    }
    fn value(&self, hist: &History<'_>, atom: usize) -> Result<HsOperator> {
        let i = hist.cutoff();
        let on = (self.lo..self.hi).contains(&i)
            && match &self.event {
                Some(f) => f(&hist.truncated(self.lo))?,
                None => true,
            };
        if on {
            self.inner.value(hist, atom)
        } else {
            Ok(DMatrix::zeros(self.g_dim(), self.h_dim()))
        }
    }
}

/// `R o Phi` for a fixed operator `R: G -> E`.
pub struct Composed<I> {
    pub r: DMatrix<f64>,
    pub inner: I,
}

impl<I: GridIntegrand> GridIntegrand for Composed<I> {
    fn g_dim(&self) -> usize {
        self.r.nrows()
    }
    fn h_dim(&self) -> usize {
        self.inner.h_dim()
    }
    fn value(&self, hist: &History<'_>, atom: usize) -> Result<HsOperator> {
        Ok(&self.r * self.inner.value(hist, atom)?)
    }
}

/// One term `1_{(s, t]} 1_F 1_A S` of a simple integrand.
#[derive(Clone)]
pub struct SimpleTerm {
    pub s: f64,
    pub t: f64,
    /// `None` is the sure event.
    pub event: Option<Event>,
    pub atoms: AtomSet,
    pub op: HsOperator,
}

#[derive(Clone)]
struct Piece {
    lo: usize,
    hi: usize,
    decided_at: usize,
    event: Option<Event>,
    atoms: AtomSet,
    op: HsOperator,
}

/// Finite sum of simple terms, refined at construction so that any two
/// pieces have either identical or disjoint time intervals.
#[derive(Clone)]
pub struct SimpleIntegrand {
    grid: Arc<GridSpec>,
    g_dim: usize,
    h_dim: usize,
    pieces: Vec<Piece>,
}

impl SimpleIntegrand {
    pub fn new(grid: Arc<GridSpec>, terms: Vec<SimpleTerm>) -> Result<Self> {
        let Some(first) = terms.first() else {
            return Err(Error::EmptyFamily);
        };
        let (g_dim, h_dim) = first.op.shape();
        let mut raw = Vec::with_capacity(terms.len());
        for term in terms {
            if term.op.shape() != (g_dim, h_dim) {
                return Err(Error::Dimension(
                    "simple terms differ in operator shape".into(),
                ));
            }
            let lo = grid.time_index(term.s)?;
            let hi = grid.time_index(term.t)?;
            if hi < lo {
                return Err(Error::InvalidGrid(format!(
                    "interval ({}, {}] is reversed",
                    term.s, term.t
                )));
            }
            if let Some(&a) = term.atoms.atoms().iter().find(|&&a| a >= grid.n_atoms()) {
                return Err(Error::Dimension(format!("atom {a} is not on the grid")));
            }
            raw.push((lo, hi, term));
        }
        let mut cuts: Vec<usize> = raw.iter().flat_map(|(lo, hi, _)| [*lo, *hi]).collect();
        cuts.sort_unstable();
        cuts.dedup();
        let mut pieces = Vec::new();
        for w in cuts.windows(2) {
            for (lo, hi, term) in &raw {
                if *lo <= w[0] && w[1] <= *hi {
                    pieces.push(Piece {
                        lo: w[0],
                        hi: w[1],
                        decided_at: *lo,
                        event: term.event.clone(),
                        atoms: term.atoms.clone(),
                        op: term.op.clone(),
                    });
                }
            }
        }
        Ok(Self {
            grid,
            g_dim,
            h_dim,
            pieces,
        })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    /// `(lo, hi)` grid indices of the refined pieces.
    pub fn intervals(&self) -> Vec<(usize, usize)> {
        self.pieces.iter().map(|p| (p.lo, p.hi)).collect()
    }
}

impl GridIntegrand for SimpleIntegrand {
    fn g_dim(&self) -> usize {
        self.g_dim
    }
    fn h_dim(&self) -> usize {
        self.h_dim
    }
    fn value(&self, hist: &History<'_>, atom: usize) -> Result<HsOperator> {
        let i = hist.cutoff();
        let mut acc = DMatrix::zeros(self.g_dim, self.h_dim);
        for p in &self.pieces {
            if !(p.lo <= i && i < p.hi && p.atoms.contains(atom)) {
                continue;
            }
            let on = match &p.event {
                Some(f) => f(&hist.truncated(p.decided_at))?,
                None => true,
            };
            if on {
                acc += &p.op;
            }
        }
        Ok(acc)
    }
}

fn checked_value(phi: &dyn GridIntegrand, hist: &History<'_>, atom: usize) -> Result<HsOperator> {
    let v = phi.value(hist, atom)?;
    if v.shape() != (phi.g_dim(), phi.h_dim()) {
        return Err(Error::Dimension(format!(
            "integrand returned {}x{}, declared {}x{}",
            v.nrows(),
            v.ncols(),
            phi.g_dim(),
            phi.h_dim()
        )));
    }
    Ok(v)
}

/// `sum_atoms Phi(cell) dM(cell)` per path and step, laid out `[path][step][coord]`.
pub fn cell_increments(phi: &dyn GridIntegrand, ens: &MvmPathEnsemble) -> Result<Vec<f64>> {
    if phi.h_dim() != ens.h_dim() {
        return Err(Error::Dimension(format!(
            "integrand acts on dim {}, noise lives in dim {}",
            phi.h_dim(),
            ens.h_dim()
        )));
    }
    let grid = ens.grid();
    let (n, na, g) = (grid.n_steps(), grid.n_atoms(), phi.g_dim());
    let mut out = vec![0.0; ens.paths() * n * g];
    if g == 0 || n == 0 {
        return Ok(out);
    }
    out.par_chunks_mut(n * g)
        .enumerate()
        .try_for_each(|(p, row)| {
            for (i, slot) in row.chunks_mut(g).enumerate() {
                let hist = History::new(ens, p, i);
                let mut acc = DVector::zeros(g);
                for a in 0..na {
                    let v = checked_value(phi, &hist, a)?;
                    acc.gemv(1.0, &v, &ens.increment(p, i, a), 1.0);
                }
                slot.copy_from_slice(acc.as_slice());
            }
            Ok::<(), Error>(())
        })?;
    Ok(out)
}

/// `I_t(Phi)` on every path and grid time.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegralPathEnsemble {
    grid: Arc<GridSpec>,
    g_dim: usize,
    paths: usize,
    /// `[path][time index 0..=n][coord]`.
    values: Vec<f64>,
}

impl IntegralPathEnsemble {
    /// Cumulative sums of per-step increments laid out as in [`cell_increments`].
    pub fn from_increments(
        grid: Arc<GridSpec>,
        g_dim: usize,
        paths: usize,
        incs: &[f64],
    ) -> Result<Self> {
        let n = grid.n_steps();
        if incs.len() != paths * n * g_dim {
            return Err(Error::Dimension(
                "increment table has the wrong length".into(),
            ));
        }
        let stride = (n + 1) * g_dim;
        let mut values = vec![0.0; paths * stride];
        if g_dim > 0 {
            values
                .par_chunks_mut(stride)
                .enumerate()
                .for_each(|(p, row)| {
                    for i in 0..n {
                        for c in 0..g_dim {
                            row[(i + 1) * g_dim + c] =
                                row[i * g_dim + c] + incs[(p * n + i) * g_dim + c];
                        }
                    }
                });
        }
        Ok(Self {
            grid,
            g_dim,
            paths,
            values,
        })
    }

    /// Builds an ensemble from a per-path, per-time function.
    pub fn from_fn(
        grid: Arc<GridSpec>,
        g_dim: usize,
        paths: usize,
        f: impl Fn(usize, usize) -> HVector,
    ) -> Self {
        let n = grid.n_steps();
        let mut values = Vec::with_capacity(paths * (n + 1) * g_dim);
        for p in 0..paths {
            for k in 0..=n {
                values.extend_from_slice(f(p, k).as_slice());
            }
        }
        Self {
            grid,
            g_dim,
            paths,
            values,
        }
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn g_dim(&self) -> usize {
        self.g_dim
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn value(&self, path: usize, k: usize) -> DVectorView<'_, f64> {
        let o = (path * (self.grid.n_steps() + 1) + k) * self.g_dim;
        DVectorView::from_slice(&self.values[o..o + self.g_dim], self.g_dim)
    }

    pub fn terminal(&self, path: usize) -> DVectorView<'_, f64> {
        self.value(path, self.grid.n_steps())
    }

    pub fn sq_norms(&self, k: usize) -> Vec<f64> {
        (0..self.paths)
            .map(|p| self.value(p, k).norm_squared())
            .collect()
    }

    /// Largest absolute coordinate over all paths and times.
    pub fn scale(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `t, mean_sq_norm, se, isometry_target` per grid time.
    pub fn write_summary_csv<W: Write>(&self, out: W, target: Option<&[f64]>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "mean_sq_norm", "se", "isometry_target"])?;
        for (k, t) in self.grid.time_points().iter().enumerate() {
            let sq = self.sq_norms(k);
            let (m, v) = mean_var(sq.iter().copied(), sq.len());
            let se = (v / sq.len() as f64).sqrt();
            let tgt = target.map_or(String::new(), |t| t[k].to_string());
            w.write_record([t.to_string(), m.to_string(), se.to_string(), tgt])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `I(Phi)` on every path.
pub fn integrate_grid(
    phi: &dyn GridIntegrand,
    ens: &MvmPathEnsemble,
) -> Result<IntegralPathEnsemble> {
    let incs = cell_increments(phi, ens)?;
    IntegralPathEnsemble::from_increments(ens.grid().clone(), phi.g_dim(), ens.paths(), &incs)
}

/// `I(Phi)` for a simple integrand; the grid must match the ensemble.
pub fn integrate_simple(
    phi: &SimpleIntegrand,
    ens: &MvmPathEnsemble,
) -> Result<IntegralPathEnsemble> {
    if **phi.grid() != **ens.grid() {
        return Err(Error::GridMismatch);
    }
    integrate_grid(phi, ens)
}

/// Pathwise cumulative `sum ||Phi o Q_M^{1/2}||_HS^2 qv` over grid times.
#[derive(Clone, Debug)]
pub struct CostProfile {
    steps: usize,
    /// `[path][time index 0..=n]`.
    cumulative: Vec<f64>,
    pub max_cell_cost: f64,
}

impl CostProfile {
    pub fn paths(&self) -> usize {
        self.cumulative.len() / (self.steps + 1)
    }

    pub fn at(&self, path: usize, k: usize) -> f64 {
        self.cumulative[path * (self.steps + 1) + k]
    }

    /// Ensemble mean of the cost accumulated up to time index `k`.
    pub fn mean_at(&self, k: usize) -> f64 {
        let p = self.paths();
        (0..p).map(|i| self.at(i, k)).sum::<f64>() / p as f64
    }

    pub fn mean_profile(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.mean_at(k)).collect()
    }
}

fn check_grids(qm: &QmField, qv: &QvEstimate, ens: &MvmPathEnsemble) -> Result<()> {
    if **qm.grid() != **ens.grid() || **qv.measure.grid() != **ens.grid() {
        return Err(Error::GridMismatch);
    }
    if qm.h_dim() != ens.h_dim() {
        return Err(Error::Dimension(
            "Q_M and the noise disagree on dim(H)".into(),
        ));
    }
    Ok(())
}

pub fn pathwise_cost(
    phi: &dyn GridIntegrand,
    qm: &QmField,
    qv: &QvEstimate,
    ens: &MvmPathEnsemble,
) -> Result<CostProfile> {
    check_grids(qm, qv, ens)?;
    if phi.h_dim() != ens.h_dim() {
        return Err(Error::Dimension(
            "integrand and noise disagree on dim(H)".into(),
        ));
    }
    let grid = ens.grid();
    let (n, na) = (grid.n_steps(), grid.n_atoms());
    let rows = (0..ens.paths())
        .into_par_iter()
        .map(|p| {
            let mut row = vec![0.0; n + 1];
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let hist = History::new(ens, p, i);
                let mut step = 0.0;
                for a in 0..na {
                    let c = grid.cell(i, a);
                    let q = qv.measure.mass(c);
                    if q == 0.0 {
                        continue;
                    }
                    let v = checked_value(phi, &hist, a)?;
                    let cost = (v * qm.sqrt_cell(c).matrix()).norm_squared() * q;
                    worst = worst.max(cost);
                    step += cost;
                }
                row[i + 1] = row[i] + step;
            }
            Ok((row, worst))
        })
        .collect::<Result<Vec<_>>>()?;
    let max_cell_cost = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(CostProfile {
        steps: n,
        cumulative: rows.into_iter().flat_map(|r| r.0).collect(),
        max_cell_cost,
    })
}

/// `||Phi||_{Lambda^2}`: square root of the ensemble mean of the total pathwise cost.
pub fn lambda2_norm(
    phi: &dyn GridIntegrand,
    qm: &QmField,
    qv: &QvEstimate,
    ens: &MvmPathEnsemble,
) -> Result<f64> {
    let cost = pathwise_cost(phi, qm, qv, ens)?;
    Ok(cost.mean_at(ens.grid().n_steps()).sqrt())
}

fn mean_se(vals: &[f64]) -> (f64, f64) {
    let (m, v) = mean_var(vals.iter().copied(), vals.len());
    (m, (v / vals.len() as f64).sqrt())
}

/// Passes when `|mean| <= 3 se`, or when both are at round-off level.
fn within_3se(mean: f64, se: f64, scale: f64) -> bool {
    mean.abs() <= 3.0 * se || mean.abs() <= 1e-12 * scale.max(1.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct IsometryReport {
    pub times: Vec<f64>,
    /// Monte Carlo `E ||I_t||^2`.
    pub mc: Vec<f64>,
    /// `||Phi 1_{[0,t]}||^2_{Lambda^2}`.
    pub target: Vec<f64>,
    /// Standard error of `||I_t||^2 - cost_t`.
    pub se: Vec<f64>,
    pub passed: bool,
}

pub fn isometry_check(int: &IntegralPathEnsemble, cost: &CostProfile) -> Result<IsometryReport> {
    if cost.paths() != int.paths() || cost.steps != int.grid.n_steps() {
        return Err(Error::Dimension(
            "cost profile and integral disagree in shape".into(),
        ));
    }
    let mut r = IsometryReport {
        times: int.grid.time_points().to_vec(),
        mc: Vec::new(),
        target: Vec::new(),
        se: Vec::new(),
        passed: true,
    };
    for k in 0..=cost.steps {
        let sq = int.sq_norms(k);
        let diff: Vec<f64> = sq
            .iter()
            .enumerate()
            .map(|(p, s)| s - cost.at(p, k))
            .collect();
        let (d, se) = mean_se(&diff);
        let target = cost.mean_at(k);
        r.passed &= within_3se(d, se, target);
        r.mc.push(mean_se(&sq).0);
        r.target.push(target);
        r.se.push(se);
    }
    Ok(r)
}

#[derive(Clone, Debug, Serialize)]
pub struct MeanReport {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub passed: bool,
}

/// Coordinatewise `E I_t = 0` at time index `k`.
pub fn zero_mean_check(int: &IntegralPathEnsemble, k: usize) -> MeanReport {
    let mut r = MeanReport {
        mean: Vec::new(),
        se: Vec::new(),
        passed: true,
    };
    for c in 0..int.g_dim {
        let v: Vec<f64> = (0..int.paths).map(|p| int.value(p, k)[c]).collect();
        let (m, se) = mean_se(&v);
        r.passed &= within_3se(m, se, 0.0);
        r.mean.push(m);
        r.se.push(se);
    }
    r
}

/// Covariance of `I_t - I_s` with a bounded feature of the history up to `t_s`.
pub fn martingale_check(
    int: &IntegralPathEnsemble,
    ens: &MvmPathEnsemble,
    s: usize,
    t: usize,
    feature: &(dyn Fn(&History<'_>) -> Result<f64> + Sync),
) -> Result<MeanReport> {
    if s > t || t > int.grid.n_steps() {
        return Err(Error::InvalidGrid(format!(
            "need s <= t <= n, got s = {s}, t = {t}"
        )));
    }
    let f: Vec<f64> = (0..int.paths)
        .map(|p| feature(&History::new(ens, p, s)))
        .collect::<Result<_>>()?;
    let fbar = f.iter().sum::<f64>() / f.len() as f64;
    let mut r = MeanReport {
        mean: Vec::new(),
        se: Vec::new(),
        passed: true,
    };
    for c in 0..int.g_dim {
        let prod: Vec<f64> = (0..int.paths)
            .map(|p| (int.value(p, t)[c] - int.value(p, s)[c]) * (f[p] - fbar))
            .collect();
        let (m, se) = mean_se(&prod);
        r.passed &= within_3se(m, se, 0.0);
        r.mean.push(m);
        r.se.push(se);
    }
    Ok(r)
}

#[derive(Clone, Debug, Serialize)]
pub struct DoobReport {
    pub mean_sup: f64,
    pub se: f64,
    pub bound: f64,
    pub passed: bool,
}

/// `E sup_t ||I_t||^2 <= 4 ||Phi||^2_{Lambda^2}` up to 3 SE.
pub fn doob_check(int: &IntegralPathEnsemble, lambda2_sq: f64) -> DoobReport {
    let n = int.grid.n_steps();
    let sups: Vec<f64> = (0..int.paths)
        .map(|p| {
            (0..=n)
                .map(|k| int.value(p, k).norm_squared())
                .fold(0.0, f64::max)
        })
        .collect();
    let (mean_sup, se) = mean_se(&sups);
    let bound = 4.0 * lambda2_sq;
    DoobReport {
        mean_sup,
        se,
        bound,
        passed: mean_sup <= bound + 3.0 * se,
    }
}

/// Outcome of a pathwise identity between two integral ensembles.
#[derive(Clone, Debug, Serialize)]
pub struct IdentityReport {
    pub max_abs_diff: f64,
    pub scale: f64,
    pub passed: bool,
}

impl IdentityReport {
    pub fn compare(lhs: &IntegralPathEnsemble, rhs: &IntegralPathEnsemble) -> Self {
        let d = lhs.max_abs_diff(rhs);
        Self::from_diff(d, lhs.scale().max(rhs.scale()))
    }

    fn from_diff(max_abs_diff: f64, scale: f64) -> Self {
        let scale = scale.max(1.0);
        Self {
            max_abs_diff,
            scale,
            passed: max_abs_diff <= IDENTITY_TOL * scale,
        }
    }
}

/// First grid index at which `rule` fires, or `n` if it never does. The rule
/// sees only the history strictly before the index it decides.
pub fn stopping_time(
    ens: &MvmPathEnsemble,
    rule: &(dyn Fn(&History<'_>) -> Result<bool> + Sync),
) -> Result<Vec<usize>> {
    let n = ens.grid().n_steps();
    (0..ens.paths())
        .into_par_iter()
        .map(|p| {
            for k in 0..=n {
                if rule(&History::new(ens, p, k))? {
                    return Ok(k);
                }
            }
            Ok(n)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct StoppedReport {
    pub sigma: Vec<usize>,
    /// `int 1_{[0, sigma]} Phi dM`.
    pub stopped: IntegralPathEnsemble,
    /// `I_{t ^ sigma}(Phi)`.
    pub frozen: IntegralPathEnsemble,
    pub identity: IdentityReport,
}

pub fn stopped_integral(
    phi: &dyn GridIntegrand,
    ens: &MvmPathEnsemble,
    rule: &(dyn Fn(&History<'_>) -> Result<bool> + Sync),
) -> Result<StoppedReport> {
    let sigma = stopping_time(ens, rule)?;
    let full = integrate_grid(phi, ens)?;
    let stopped = integrate_grid(
        &Stopped {
            inner: phi,
            sigma: sigma.clone(),
        },
        ens,
    )?;
    let frozen =
        IntegralPathEnsemble::from_fn(ens.grid().clone(), phi.g_dim(), ens.paths(), |p, k| {
            full.value(p, k.min(sigma[p])).into_owned()
        });
    let identity = IdentityReport::compare(&stopped, &frozen);
    Ok(StoppedReport {
        sigma,
        stopped,
        frozen,
        identity,
    })
}

/// `tau_n` and the cost of `Phi 1_{[0, tau_n]}`.
#[derive(Clone, Debug, Serialize)]
pub struct Localized {
    pub threshold: f64,
    pub tau: Vec<usize>,
    pub norm: f64,
    /// `sqrt(n (1 + max single-cell cost))`.
    pub bound: f64,
}

impl Localized {
    pub fn within_bound(&self) -> bool {
        self.norm <= self.bound
    }

    pub fn integrand<I: GridIntegrand>(&self, phi: I) -> Stopped<I> {
        Stopped {
            inner: phi,
            sigma: self.tau.clone(),
        }
    }
}

/// `tau_n = inf { t_k : cost up to t_k >= n }`, or the horizon.
pub fn localize_with_cost(cost: &CostProfile, threshold: f64) -> Localized {
    let n = cost.steps;
    let tau: Vec<usize> = (0..cost.paths())
        .map(|p| (0..=n).find(|&k| cost.at(p, k) >= threshold).unwrap_or(n))
        .collect();
    let mean = tau
        .iter()
        .enumerate()
        .map(|(p, &k)| cost.at(p, k))
        .sum::<f64>()
        / tau.len().max(1) as f64;
    Localized {
        threshold,
        norm: mean.sqrt(),
        bound: (threshold * (1.0 + cost.max_cell_cost)).sqrt(),
        tau,
    }
}

pub fn localize(
    phi: &dyn GridIntegrand,
    qm: &QmField,
    qv: &QvEstimate,
    ens: &MvmPathEnsemble,
    threshold: f64,
) -> Result<Localized> {
    Ok(localize_with_cost(
        &pathwise_cost(phi, qm, qv, ens)?,
        threshold,
    ))
}

#[derive(Clone, Debug, Serialize)]
pub struct LocalizationReport {
    pub levels: Vec<Localized>,
    /// Largest `|I_t(Phi^{tau_m}) - I_t(Phi^{tau_n})|` over `t <= tau_m`, `m < n`.
    pub identity: IdentityReport,
    pub passed: bool,
}

/// Localizes at increasing thresholds and checks that the integrals agree up
/// to the smaller stopping time.
pub fn localization_consistency(
    phi: &dyn GridIntegrand,
    qm: &QmField,
    qv: &QvEstimate,
    ens: &MvmPathEnsemble,
    thresholds: &[f64],
) -> Result<LocalizationReport> {
    let cost = pathwise_cost(phi, qm, qv, ens)?;
    let levels: Vec<Localized> = thresholds
        .iter()
        .map(|&t| localize_with_cost(&cost, t))
        .collect();
    let ints = levels
        .iter()
        .map(|l| integrate_grid(&l.integrand(phi), ens))
        .collect::<Result<Vec<_>>>()?;
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (i, lo) in levels.iter().enumerate() {
        scale = scale.max(ints[i].scale());
        for (j, hi) in levels.iter().enumerate() {
            if lo.threshold >= hi.threshold {
                continue;
            }
            for p in 0..ens.paths() {
                for k in 0..=lo.tau[p] {
                    worst = worst.max((ints[i].value(p, k) - ints[j].value(p, k)).amax());
                }
            }
        }
    }
    let identity = IdentityReport::from_diff(worst, scale);
    let passed = identity.passed && levels.iter().all(Localized::within_bound);
    Ok(LocalizationReport {
        levels,
        identity,
        passed,
    })
}

/// `int sum_e w_e Psi_e dM` against `sum_e w_e int Psi_e dM`.
pub fn fubini_check(
    family: &[(f64, &dyn GridIntegrand)],
    ens: &MvmPathEnsemble,
) -> Result<IdentityReport> {
    if family.iter().any(|(w, _)| !(*w >= 0.0)) {
        return Err(Error::Refused("Fubini weights must be non-negative".into()));
    }
    let combined = LinearCombination::new(family.to_vec())?;
    let lhs = integrate_grid(&combined, ens)?;
    let mut rhs =
        IntegralPathEnsemble::from_fn(ens.grid().clone(), combined.g_dim(), ens.paths(), |_, _| {
            DVector::zeros(combined.g_dim())
        });
    for (w, psi) in family {
        let part = integrate_grid(*psi, ens)?;
        for (r, v) in rhs.values.iter_mut().zip(&part.values) {
            *r += w * v;
        }
    }
    Ok(IdentityReport::compare(&lhs, &rhs))
}

/// `int R o Phi dM` against `R (int Phi dM)`.
pub fn pushforward_commute(
    r: &DMatrix<f64>,
    phi: &dyn GridIntegrand,
    ens: &MvmPathEnsemble,
) -> Result<IdentityReport> {
    if r.ncols() != phi.g_dim() {
        return Err(Error::Dimension(
            "R does not act on the integrand's target space".into(),
        ));
    }
    let lhs = integrate_grid(
        &Composed {
            r: r.clone(),
            inner: phi,
        },
        ens,
    )?;
    let base = integrate_grid(phi, ens)?;
    let rhs = IntegralPathEnsemble::from_fn(ens.grid().clone(), r.nrows(), ens.paths(), |p, k| {
        r * base.value(p, k)
    });
    Ok(IdentityReport::compare(&lhs, &rhs))
}

/// `int 1_{(s0, t0] x F0} Phi dM` against `1_{F0} (I_{t ^ t0} - I_{t ^ s0})`.
pub fn restriction_check(
    phi: &dyn GridIntegrand,
    ens: &MvmPathEnsemble,
    s0: f64,
    t0: f64,
    event: Option<Event>,
) -> Result<IdentityReport> {
    let grid = ens.grid();
    let lo = grid.time_index(s0)?;
    let hi = grid.time_index(t0)?;
    if hi < lo {
        return Err(Error::InvalidGrid(format!(
            "interval ({s0}, {t0}] is reversed"
        )));
    }
    let full = integrate_grid(phi, ens)?;
    let lhs = integrate_grid(
        &Restricted {
            inner: phi,
            lo,
            hi,
            event: event.clone(),
        },
        ens,
    )?;
    let on: Vec<bool> = (0..ens.paths())
        .map(|p| {
            event
                .as_ref()
                .map_or(Ok(true), |f| f(&History::new(ens, p, lo)))
        })
        .collect::<Result<_>>()?;
    let rhs = IntegralPathEnsemble::from_fn(grid.clone(), phi.g_dim(), ens.paths(), |p, k| {
        if on[p] {
            full.value(p, k.min(hi)) - full.value(p, k.min(lo))
        } else {
            DVector::zeros(phi.g_dim())
        }
    });
    Ok(IdentityReport::compare(&lhs, &rhs))
}
