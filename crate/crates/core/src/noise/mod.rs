//! Sample paths and intensity measures of orthogonal martingale-valued measures.
//!
//! An ensemble stores, for each path, time step and mark atom, the vector
//! `m` in `H` such that the increment of `M` over that cell, tested against
//! `h`, equals `(m, h)`. Increments over a set of atoms are sums of the stored
//! per-atom vectors.

mod haar;
mod rng;
mod spec;

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{HVector, PsdOperator};
use crate::measure::{AtomSet, DiscreteMeasure, GridSpec};

pub use haar::{HaarIntensity, HaarSystem, HAAR_MAX_LEVEL};
pub use rng::cell_stream;
pub use spec::{JumpSpec, LevyAtom, NoiseSpec};

use spec::{samplers, AtomSampler};

/// Which generator produced an ensemble, and from which seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverMeta {
    pub spec: Option<NoiseSpec>,
    pub seed: u64,
}

/// Per-path increments of a (cylindrical) martingale-valued measure.
#[derive(Clone, Debug)]
pub struct MvmPathEnsemble {
    grid: Arc<GridSpec>,
    h_dim: usize,
    paths: usize,
    data: Vec<f64>,
    meta: DriverMeta,
}

impl MvmPathEnsemble {
    /// Wraps raw increments laid out as `[path][step][atom][coord]`.
    pub fn from_increments(
        grid: Arc<GridSpec>,
        h_dim: usize,
        paths: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != paths * grid.n_cells() * h_dim {
            return Err(Error::Dimension(format!(
                "{} values for {paths} paths x {} cells x dim {h_dim}",
                data.len(),
                grid.n_cells()
            )));
        }
        Ok(Self {
            grid,
            h_dim,
            paths,
            data,
            meta: DriverMeta {
                spec: None,
                seed: 0,
            },
        })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn h_dim(&self) -> usize {
        self.h_dim
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn meta(&self) -> &DriverMeta {
        &self.meta
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    fn offset(&self, path: usize, cell: usize) -> usize {
        (path * self.grid.n_cells() + cell) * self.h_dim
    }

    /// Stored increment vector of `(step, atom)` on `path`.
    pub fn increment(&self, path: usize, step: usize, atom: usize) -> DVectorView<'_, f64> {
        let o = self.offset(path, self.grid.cell(step, atom));
        DVectorView::from_slice(&self.data[o..o + self.h_dim], self.h_dim)
    }

    /// Increment over `(step) x set`, the sum of the per-atom vectors.
    pub fn increment_on(&self, path: usize, step: usize, set: &AtomSet) -> HVector {
        let mut v = DVector::zeros(self.h_dim);
        for &a in set.atoms() {
            v += self.increment(path, step, a);
        }
        v
    }

    /// `M(t_n, A)(x)` on one path: the tested increments summed over the first `n` steps.
    pub fn tested(&self, path: usize, n: usize, set: &AtomSet, x: &HVector) -> f64 {
        (0..n)
            .map(|i| {
                set.atoms()
                    .iter()
                    .map(|&a| self.increment(path, i, a).dot(x))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Writes the binary columnar dump: magic, header lengths, grid and
    /// driver metadata as JSON, then little-endian `f64` increments.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        let grid = serde_json::to_vec(&*self.grid)?;
        let meta = serde_json::to_vec(&self.meta)?;
        out.write_all(BINARY_MAGIC)?;
        for n in [
            self.h_dim,
            self.grid.n_steps(),
            self.grid.n_atoms(),
            self.paths,
            grid.len(),
            meta.len(),
        ] {
            out.write_all(&(n as u64).to_le_bytes())?;
        }
        out.write_all(&grid)?;
        out.write_all(&meta)?;
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Parse("not an ensemble file".into()));
        }
        let mut header = [0usize; 6];
        for h in header.iter_mut() {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            *h = u64::from_le_bytes(b) as usize;
        }
        let [h_dim, steps, atoms, paths, glen, mlen] = header;
        let mut gbuf = vec![0u8; glen];
        input.read_exact(&mut gbuf)?;
        let mut mbuf = vec![0u8; mlen];
        input.read_exact(&mut mbuf)?;
        let grid: GridSpec = serde_json::from_slice(&gbuf)?;
        if grid.n_steps() != steps || grid.n_atoms() != atoms {
            return Err(Error::Parse("header disagrees with embedded grid".into()));
        }
        let meta: DriverMeta = serde_json::from_slice(&mbuf)?;
        let n = paths * steps * atoms * h_dim;
        let mut bytes = vec![0u8; n * 8];
        input.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut ens = Self::from_increments(Arc::new(grid), h_dim, paths, data)?;
        ens.meta = meta;
        Ok(ens)
    }

    /// CSV summary: `t_lo,t_hi,atom_id,coord,mean,variance,se` per cell coordinate.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_lo", "t_hi", "atom_id", "coord", "mean", "variance", "se"])?;
        let p = self.paths as f64;
        for cell in 0..self.grid.n_cells() {
            let (i, a) = self.grid.split(cell);
            for k in 0..self.h_dim {
                let vals = (0..self.paths).map(|q| self.data[self.offset(q, cell) + k]);
                let (mean, var) = mean_var(vals, self.paths);
                w.write_record([
                    self.grid.time_points()[i].to_string(),
                    self.grid.time_points()[i + 1].to_string(),
                    a.to_string(),
                    k.to_string(),
                    mean.to_string(),
                    var.to_string(),
                    (var / p).sqrt().to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

const BINARY_MAGIC: &[u8; 8] = b"CMVMENS1";

/// Mean and unbiased variance of `n` values.
pub(crate) fn mean_var(vals: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = vals.clone().sum::<f64>() / nf;
    let var = if n > 1 {
        vals.map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Simulates `paths` independent sample paths of the noise on `grid`.
pub fn simulate(
    spec: &NoiseSpec,
    grid: Arc<GridSpec>,
    paths: usize,
    seed: u64,
) -> Result<MvmPathEnsemble> {
    spec.validate(&grid)?;
    let d = spec.h_dim();
    let n_cells = grid.n_cells();
    let samplers = samplers(spec);
    let selector = match spec {
        NoiseSpec::IntegralType { selector, .. } => Some(selector.as_slice()),
        _ => None,
    };
    let mut data = vec![0.0; paths * n_cells * d];
    if d > 0 && n_cells > 0 {
        data.par_chunks_mut(n_cells * d)
            .enumerate()
            .for_each(|(p, chunk)| {
                for cell in 0..n_cells {
                    let (i, a) = grid.split(cell);
                    let dt = grid.dt(i);
                    let out = &mut chunk[cell * d..(cell + 1) * d];
                    let sampler = match selector {
                        Some(sel) if sel[i] != a => continue,
                        Some(_) => &samplers[0],
                        None => &samplers[a],
                    };
                    let mut rng = cell_stream(seed, p as u64, cell as u64);
                    draw(sampler, dt, &mut rng, out);
                }
            });
    }
    Ok(MvmPathEnsemble {
        grid,
        h_dim: d,
        paths,
        data,
        meta: DriverMeta {
            spec: Some(spec.clone()),
            seed,
        },
    })
}

fn draw<R: Rng>(sampler: &AtomSampler, dt: f64, rng: &mut R, out: &mut [f64]) {
    let d = out.len();
    let (root, jumps) = match sampler {
        AtomSampler::Gaussian(root) => (root, &[][..]),
        AtomSampler::Levy { root, jumps } => (root, jumps.as_slice()),
    };
    let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let g = root * z * dt.sqrt();
    out.copy_from_slice(g.as_slice());
    for (u, rate) in jumps {
        let mean = rate * dt;
        let count = if mean > 0.0 {
            Poisson::new(mean).map(|p| p.sample(rng)).unwrap_or(0.0)
        } else {
            0.0
        };
        // compensated: N u - dt * rate * u
        let c = count - mean;
        for (o, ui) in out.iter_mut().zip(u.iter()) {
            *o += c * ui;
        }
    }
}

/// Source of intensity measures `x -> nu_x` on a fixed grid.
pub trait IntensitySource: Sync {
    fn grid(&self) -> &Arc<GridSpec>;
    fn h_dim(&self) -> usize;
    fn intensity(&self, x: &HVector) -> Result<DiscreteMeasure>;
}

/// Deterministic intensities given by one covariation matrix per cell:
/// `nu_x(cell) = (x, C_cell x)`.
#[derive(Clone, Debug)]
pub struct ClosedFormIntensity {
    grid: Arc<GridSpec>,
    cells: Vec<DMatrix<f64>>,
}

impl ClosedFormIntensity {
    pub fn new(spec: &NoiseSpec, grid: Arc<GridSpec>) -> Result<Self> {
        spec.validate(&grid)?;
        let cells = (0..grid.n_cells())
            .map(|c| {
                let (i, a) = grid.split(c);
                spec.unit_covariance(i, a) * grid.dt(i)
            })
            .collect();
        Ok(Self { grid, cells })
    }

    /// Builds from explicit per-cell PSD matrices.
    pub fn from_cells(grid: Arc<GridSpec>, cells: Vec<PsdOperator>) -> Result<Self> {
        if cells.len() != grid.n_cells() {
            return Err(Error::Dimension("one matrix per cell required".into()));
        }
        let d = cells.first().map_or(0, PsdOperator::dim);
        if cells.iter().any(|c| c.dim() != d) {
            return Err(Error::Dimension("cell matrices disagree on dim(H)".into()));
        }
        Ok(Self {
            grid,
            cells: cells.into_iter().map(PsdOperator::into_matrix).collect(),
        })
    }

    /// Covariation matrix of a cell (the exact bilinear measure of that cell).
    pub fn cell_matrix(&self, cell: usize) -> &DMatrix<f64> {
        &self.cells[cell]
    }
}

impl IntensitySource for ClosedFormIntensity {
    fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    fn h_dim(&self) -> usize {
        self.cells.first().map_or(0, |c| c.nrows())
    }

    fn intensity(&self, x: &HVector) -> Result<DiscreteMeasure> {
        if x.len() != self.h_dim() {
            return Err(Error::Dimension(format!(
                "vector of dim {} for H of dim {}",
                x.len(),
                self.h_dim()
            )));
        }
        let mass = self
            .cells
            .iter()
            .map(|c| x.dot(&(c * x)).max(0.0))
            .collect();
        DiscreteMeasure::new(self.grid.clone(), mass)
    }
}

/// Closed-form `nu_x` for an independent-increment noise.
pub fn intensity_closed_form(
    spec: &NoiseSpec,
    grid: Arc<GridSpec>,
    x: &HVector,
) -> Result<DiscreteMeasure> {
    ClosedFormIntensity::new(spec, grid)?.intensity(x)
}

/// Ensemble estimate of `nu_x`: per-cell average of the squared tested increment.
#[derive(Clone, Debug)]
pub struct EmpiricalIntensity {
    pub measure: DiscreteMeasure,
    /// Standard error of each cell mass.
    pub std_err: Vec<f64>,
}

pub fn empirical_intensity(ens: &MvmPathEnsemble, x: &HVector) -> Result<EmpiricalIntensity> {
    if x.len() != ens.h_dim {
        return Err(Error::Dimension("test vector does not match dim(H)".into()));
    }
    if ens.paths < 2 {
        return Err(Error::Refused(
            "empirical intensity needs at least two paths".into(),
        ));
    }
    let n = ens.grid.n_cells();
    let mut mass = Vec::with_capacity(n);
    let mut se = Vec::with_capacity(n);
    for cell in 0..n {
        let (i, a) = ens.grid.split(cell);
        let sq = (0..ens.paths).map(|p| ens.increment(p, i, a).dot(x).powi(2));
        let (m, v) = mean_var(sq, ens.paths);
        mass.push(m);
        se.push((v / ens.paths as f64).sqrt());
    }
    Ok(EmpiricalIntensity {
        measure: DiscreteMeasure::new(ens.grid.clone(), mass)?,
        std_err: se,
    })
}

/// Covariance of `M(t, A)(x)` and `M(t, B)(x)` at every grid time.
#[derive(Clone, Debug, Serialize)]
pub struct OrthogonalityReport {
    pub times: Vec<f64>,
    pub covariance: Vec<f64>,
    pub std_err: Vec<f64>,
    pub passed: bool,
}

pub fn orthogonality_check(
    ens: &MvmPathEnsemble,
    a: &AtomSet,
    b: &AtomSet,
    x: &HVector,
) -> Result<OrthogonalityReport> {
    if let Some(shared) = a.intersection_witness(b) {
        return Err(Error::NotDisjoint(shared));
    }
    if x.len() != ens.h_dim {
        return Err(Error::Dimension("test vector does not match dim(H)".into()));
    }
    let p = ens.paths;
    let mut ma = vec![0.0; p];
    let mut mb = vec![0.0; p];
    let mut rep = OrthogonalityReport {
        times: Vec::new(),
        covariance: Vec::new(),
        std_err: Vec::new(),
        passed: true,
    };
    for i in 0..ens.grid.n_steps() {
        for q in 0..p {
            ma[q] += ens.increment_on(q, i, a).dot(x);
            mb[q] += ens.increment_on(q, i, b).dot(x);
        }
        // centred martingales: E[M(A) M(B)] is the covariation
        let prod = (0..p).map(|q| ma[q] * mb[q]);
        let (mean, var) = mean_var(prod, p);
        let se = (var / p as f64).sqrt();
        rep.times.push(ens.grid.time_points()[i + 1]);
        rep.covariance.push(mean);
        rep.std_err.push(se);
        rep.passed &= mean.abs() <= 3.0 * se || (mean == 0.0 && se == 0.0);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(steps: usize, atoms: usize) -> Arc<GridSpec> {
        Arc::new(GridSpec::uniform(1.0, steps, atoms).unwrap())
    }

    #[test]
    fn zero_noise_gives_zero_increments() {
        let spec = NoiseSpec::HValuedLevy {
            q: PsdOperator::zeros(2),
            jumps: vec![JumpSpec::new(vec![1.0, 0.0], 0.0)],
        };
        let ens = simulate(&spec, grid(4, 2), 50, 3).unwrap();
        assert!(ens.raw().iter().all(|&v| v == 0.0));
        let e = empirical_intensity(&ens, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(e.measure.total(), 0.0);
    }

    #[test]
    fn rejects_infeasible_specs() {
        let g = grid(2, 1);
        let neg = NoiseSpec::WhiteNoise { lambda: vec![-1.0] };
        assert!(matches!(
            simulate(&neg, g.clone(), 1, 0),
            Err(Error::InvalidNoise(_))
        ));
        let bad_rate = NoiseSpec::HValuedLevy {
            q: PsdOperator::identity(1),
            jumps: vec![JumpSpec::new(vec![1.0], -0.5)],
        };
        assert!(simulate(&bad_rate, grid(2, 2), 1, 0).is_err());
        let wrong_atoms = NoiseSpec::WhiteNoise {
            lambda: vec![1.0, 1.0],
        };
        assert!(simulate(&wrong_atoms, g, 1, 0).is_err());
    }

    #[test]
    fn white_noise_closed_form_is_dt_lambda() {
        let g = grid(4, 2);
        let spec = NoiseSpec::WhiteNoise {
            lambda: vec![0.5, 2.0],
        };
        let nu = intensity_closed_form(&spec, g, &DVector::from_element(1, 1.0)).unwrap();
        for i in 0..4 {
            assert_eq!(nu.at(i, 0), 0.25 * 0.5);
            assert_eq!(nu.at(i, 1), 0.25 * 2.0);
        }
    }

    #[test]
    fn closed_form_is_quadratic_in_the_test_vector() {
        let q = PsdOperator::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let spec = NoiseSpec::DiscreteLevy {
            atoms: vec![
                LevyAtom::brownian(q.clone()),
                LevyAtom::brownian(q.scaled(3.0).unwrap()),
            ],
        };
        let g = grid(3, 2);
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let a = intensity_closed_form(&spec, g.clone(), &x).unwrap();
        let b = intensity_closed_form(&spec, g.clone(), &(&x * 2.0)).unwrap();
        for c in 0..g.n_cells() {
            assert!((b.mass(c) - 4.0 * a.mass(c)).abs() < 1e-15);
        }
        let zero = intensity_closed_form(&spec, g, &DVector::zeros(2)).unwrap();
        assert_eq!(zero.total(), 0.0);
    }

    #[test]
    fn integral_type_selector_routes_increments() {
        let g = grid(4, 2);
        let spec = NoiseSpec::IntegralType {
            base: PsdOperator::identity(2),
            selector: vec![0, 1, 1, 0],
        };
        let ens = simulate(&spec, g.clone(), 10, 1).unwrap();
        for p in 0..10 {
            assert_eq!(ens.increment(p, 0, 1).norm(), 0.0);
            assert_eq!(ens.increment(p, 1, 0).norm(), 0.0);
            assert!(ens.increment(p, 1, 1).norm() > 0.0);
        }
        let nu = intensity_closed_form(&spec, g, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(nu.masses(), &[0.25, 0.0, 0.0, 0.25, 0.0, 0.25, 0.25, 0.0]);
    }

    #[test]
    fn finite_additivity_over_atom_sets() {
        let spec = NoiseSpec::WhiteNoise {
            lambda: vec![1.0, 2.0, 3.0],
        };
        let ens = simulate(&spec, grid(5, 3), 20, 11).unwrap();
        let all = AtomSet::all(3);
        for p in 0..20 {
            for i in 0..5 {
                let sum: f64 = (0..3).map(|a| ens.increment(p, i, a)[0]).sum();
                assert_eq!(ens.increment_on(p, i, &all)[0], sum);
            }
        }
    }

    #[test]
    fn paths_do_not_depend_on_ensemble_size() {
        let spec = NoiseSpec::WhiteNoise { lambda: vec![1.0] };
        let small = simulate(&spec, grid(8, 1), 5, 42).unwrap();
        let big = simulate(&spec, grid(8, 1), 50, 42).unwrap();
        assert_eq!(small.raw(), &big.raw()[..small.raw().len()]);
    }

    #[test]
    fn orthogonality_rejects_overlap() {
        let spec = NoiseSpec::WhiteNoise {
            lambda: vec![1.0, 1.0],
        };
        let ens = simulate(&spec, grid(4, 2), 10, 0).unwrap();
        let a = AtomSet::singleton(0);
        let err = orthogonality_check(&ens, &a, &a, &DVector::from_element(1, 1.0)).unwrap_err();
        assert!(matches!(err, Error::NotDisjoint(0)));
    }

    #[test]
    fn binary_roundtrip_and_summary() {
        let spec = NoiseSpec::WhiteNoise {
            lambda: vec![1.0, 0.5],
        };
        let ens = simulate(&spec, grid(3, 2), 4, 9).unwrap();
        let mut buf = Vec::new();
        ens.write_binary(&mut buf).unwrap();
        let back = MvmPathEnsemble::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back.raw(), ens.raw());
        assert_eq!(back.meta(), ens.meta());
        assert_eq!(**back.grid(), **ens.grid());
        assert!(MvmPathEnsemble::read_binary(&b"garbage!"[..]).is_err());

        let mut csv = Vec::new();
        ens.write_summary_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 1 + 6);
    }
}
