//! Quadratic variation as a supremum of intensity measures, the bilinear
//! covariation measure obtained by polarization, and its operator density
//! with respect to the quadratic variation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{HVector, PsdOperator};
use crate::measure::{sup_measures, AtomSet, DiscreteMeasure, GridSpec, SignedDiscreteMeasure};
use crate::noise::{HaarSystem, IntensitySource};

/// Supremum of the intensities over a finite sphere sample.
#[derive(Clone, Debug)]
pub struct QvEstimate {
    pub measure: DiscreteMeasure,
    pub sphere_count: usize,
    /// `(number of sphere points used, total mass)` at doubling counts and at the end.
    pub convergence_trace: Vec<(usize, f64)>,
}

impl QvEstimate {
    /// Final total over the first nonzero total of the trace.
    pub fn growth_ratio(&self) -> f64 {
        let first = self
            .convergence_trace
            .iter()
            .map(|t| t.1)
            .find(|&v| v > 0.0)
            .unwrap_or(0.0);
        let last = self.convergence_trace.last().map_or(0.0, |t| t.1);
        if first > 0.0 {
            last / first
        } else {
            1.0
        }
    }

    /// True when the last doubling of the sample raised the total by less than `rel_tol`.
    pub fn saturated(&self, rel_tol: f64) -> bool {
        match self.convergence_trace.as_slice() {
            [.., a, b] => b.1 - a.1 <= rel_tol * b.1.abs().max(f64::MIN_POSITIVE),
            _ => true,
        }
    }
}

/// Cellwise maximum of `nu_x` over the sphere sample `sphere`.
pub fn qv_supremum(source: &dyn IntensitySource, sphere: &[HVector]) -> Result<QvEstimate> {
    if sphere.is_empty() {
        return Err(Error::EmptyFamily);
    }
    let family: Vec<DiscreteMeasure> = sphere
        .par_iter()
        .map(|x| source.intensity(x))
        .collect::<Result<_>>()?;
    let mut acc = family[0].clone();
    let mut trace = Vec::new();
    let mut next_mark = 1usize;
    for (n, mu) in family.iter().enumerate() {
        if n > 0 {
            acc = sup_measures(&[acc, mu.clone()])?;
        }
        let used = n + 1;
        if used == next_mark || used == family.len() {
            trace.push((used, acc.total()));
            next_mark *= 2;
        }
    }
    Ok(QvEstimate {
        measure: acc,
        sphere_count: sphere.len(),
        convergence_trace: trace,
    })
}

/// Worst-case relative under-estimate of a top eigenvalue by a sample whose
/// projective covering radius (chordal) is `radius`: some sample point `x`
/// has `|(x, v)| >= 1 - radius^2 / 2` with the top eigenvector `v`.
pub fn sampling_modulus(radius: f64) -> f64 {
    let c = (1.0 - radius * radius / 2.0).max(0.0);
    1.0 - c * c
}

/// Adds directions to a sphere-sample estimate: for every cell, starting from
/// the sampled direction with the largest mass there, `steps` power iterations
/// on that cell's covariation matrix. Every added direction is a unit vector
/// whose intensity is evaluated through `source`, so the result is still a
/// supremum of intensities and never exceeds the true quadratic variation.
/// The trace gains one entry with the enlarged direction count.
pub fn qv_refine(
    source: &dyn IntensitySource,
    alpha: &BilinearMeasureField,
    qv: &QvEstimate,
    sphere: &[HVector],
    steps: usize,
) -> Result<QvEstimate> {
    if **alpha.grid() != **qv.measure.grid() || **source.grid() != **qv.measure.grid() {
        return Err(Error::GridMismatch);
    }
    if sphere.is_empty() {
        return Err(Error::EmptyFamily);
    }
    let added: Vec<HVector> = alpha
        .cells
        .par_iter()
        .flat_map_iter(|a| {
            let start = sphere
                .iter()
                .max_by(|x, y| x.dot(&(a * *x)).total_cmp(&y.dot(&(a * *y))))
                .cloned()
                .unwrap_or_else(|| sphere[0].clone());
            let mut x = start;
            let mut dirs = Vec::with_capacity(steps);
            for _ in 0..steps {
                let y = a * &x;
                let n = y.norm();
                if !(n > 0.0 && n.is_finite()) {
                    break;
                }
                x = y / n;
                dirs.push(x.clone());
            }
            dirs
        })
        .collect();
    let family: Vec<DiscreteMeasure> = added
        .par_iter()
        .map(|x| source.intensity(x))
        .collect::<Result<_>>()?;
    let mut acc = qv.measure.clone();
    for mu in family {
        acc = sup_measures(&[acc, mu])?;
    }
    let mut trace = qv.convergence_trace.clone();
    trace.push((qv.sphere_count + added.len(), acc.total()));
    Ok(QvEstimate {
        measure: acc,
        sphere_count: qv.sphere_count + added.len(),
        convergence_trace: trace,
    })
}

/// `alpha(x, y) = (nu_{x+y} - nu_{x-y}) / 4` cellwise.
pub fn alpha_polarization(
    source: &dyn IntensitySource,
    x: &HVector,
    y: &HVector,
) -> Result<SignedDiscreteMeasure> {
    let plus = source.intensity(&(x + y))?;
    let minus = source.intensity(&(x - y))?;
    let mass = plus
        .masses()
        .iter()
        .zip(minus.masses())
        .map(|(p, m)| 0.25 * (p - m))
        .collect();
    SignedDiscreteMeasure::new(source.grid().clone(), mass)
}

/// Per-cell symmetric matrices `alpha(cell)(e_i, e_j)` in the standard basis.
#[derive(Clone, Debug)]
pub struct BilinearMeasureField {
    grid: Arc<GridSpec>,
    cells: Vec<DMatrix<f64>>,
}

impl BilinearMeasureField {
    /// Polarizes the intensities at all basis pairs.
    pub fn from_source(source: &dyn IntensitySource) -> Result<Self> {
        let d = source.h_dim();
        let grid = source.grid().clone();
        let e = |i: usize| {
            let mut v = DVector::zeros(d);
            v[i] = 1.0;
            v
        };
        let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect();
        let alphas: Vec<SignedDiscreteMeasure> = pairs
            .par_iter()
            .map(|&(i, j)| alpha_polarization(source, &e(i), &e(j)))
            .collect::<Result<_>>()?;
        let mut cells = vec![DMatrix::zeros(d, d); grid.n_cells()];
        for (&(i, j), a) in pairs.iter().zip(&alphas) {
            for (c, m) in cells.iter_mut().enumerate() {
                m[(i, j)] = a.mass(c);
                m[(j, i)] = a.mass(c);
            }
        }
        Ok(Self { grid, cells })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn cell(&self, c: usize) -> &DMatrix<f64> {
        &self.cells[c]
    }

    pub fn h_dim(&self) -> usize {
        self.cells.first().map_or(0, |m| m.nrows())
    }

    /// `alpha(cell)(x, y)` evaluated through the stored matrices.
    pub fn evaluate(&self, x: &HVector, y: &HVector) -> Result<SignedDiscreteMeasure> {
        let mass = self.cells.iter().map(|m| x.dot(&(m * y))).collect();
        SignedDiscreteMeasure::new(self.grid.clone(), mass)
    }
}

/// Operator density of the covariation with respect to the quadratic variation.
#[derive(Clone, Debug)]
pub struct QmField {
    grid: Arc<GridSpec>,
    ops: Vec<PsdOperator>,
    roots: Vec<PsdOperator>,
    pub null_cells: Vec<usize>,
}

/// Relative tolerance for declaring a bilinear cell "nonzero" where the
/// quadratic variation vanishes.
pub const NULL_CELL_TOL: f64 = 1e-12;

/// `Q_M(cell) = alpha(cell) / qv(cell)`, symmetrized and clipped to PSD; zero on null cells.
pub fn qm_density(alpha: &BilinearMeasureField, qv: &QvEstimate) -> Result<QmField> {
    if **alpha.grid() != **qv.measure.grid() {
        return Err(Error::GridMismatch);
    }
    let d = alpha.h_dim();
    let scale = alpha
        .cells
        .iter()
        .map(|m| m.amax())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut ops = Vec::with_capacity(alpha.cells.len());
    let mut null_cells = Vec::new();
    for (c, a) in alpha.cells.iter().enumerate() {
        let q = qv.measure.mass(c);
        if q == 0.0 {
            let amax = a.amax();
            if amax > NULL_CELL_TOL * scale {
                return Err(Error::Inconsistent {
                    cell: c,
                    alpha: amax,
                });
            }
            null_cells.push(c);
            ops.push(PsdOperator::zeros(d));
        } else {
            ops.push(PsdOperator::project(&(a / q)));
        }
    }
    let roots = ops.iter().map(crate::linalg::psd_sqrt).collect();
    Ok(QmField {
        grid: alpha.grid.clone(),
        ops,
        roots,
        null_cells,
    })
}

impl QmField {
    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn cell(&self, c: usize) -> &PsdOperator {
        &self.ops[c]
    }

    /// Cached `Q_M(cell)^{1/2}`.
    pub fn sqrt_cell(&self, c: usize) -> &PsdOperator {
        &self.roots[c]
    }

    pub fn h_dim(&self) -> usize {
        self.ops.first().map_or(0, PsdOperator::dim)
    }

    pub fn op_norms(&self) -> Vec<f64> {
        self.ops.iter().map(PsdOperator::op_norm).collect()
    }

    /// Largest operator norm over non-null cells.
    pub fn max_norm(&self) -> f64 {
        self.op_norms()
            .into_iter()
            .enumerate()
            .filter(|(c, _)| !self.null_cells.contains(c))
            .map(|(_, n)| n)
            .fold(0.0, f64::max)
    }

    /// Max entry of `alpha - Q_M * qv` over all cells.
    pub fn reconstruction_error(&self, alpha: &BilinearMeasureField, qv: &QvEstimate) -> f64 {
        self.ops
            .iter()
            .enumerate()
            .map(|(c, q)| (alpha.cell(c) - q.matrix() * qv.measure.mass(c)).amax())
            .fold(0.0, f64::max)
    }

    /// Row-major matrices as CSV: `t_lo,t_hi,atom_id,row,col,value`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_lo", "t_hi", "atom_id", "row", "col", "value"])?;
        for (c, q) in self.ops.iter().enumerate() {
            let (i, a) = self.grid.split(c);
            for r in 0..q.dim() {
                for k in 0..q.dim() {
                    w.write_record([
                        self.grid.time_points()[i].to_string(),
                        self.grid.time_points()[i + 1].to_string(),
                        a.to_string(),
                        r.to_string(),
                        k.to_string(),
                        q.matrix()[(r, k)].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `sup_{A} sup_{s <= t} |a((s, t] x A) - b((s, t] x A)|` over grid times and
/// admissible atom sets (all subsets when the grid carries no ring).
#[allow(clippy::needless_range_loop)]
pub fn rectangle_sup_gap(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<f64> {
    let grid = a.grid();
    if **grid != **b.grid() {
        return Err(Error::GridMismatch);
    }
    let n = grid.n_steps();
    let na = grid.n_atoms();
    // prefix[i][j]: signed difference accumulated over steps < i at atom j
    let mut prefix = vec![vec![0.0; na]; n + 1];
    for i in 0..n {
        for j in 0..na {
            let c = grid.cell(i, j);
            prefix[i + 1][j] = prefix[i][j] + a.mass(c) - b.mass(c);
        }
    }
    let ring_sets: Option<Vec<AtomSet>> = {
        let all: Vec<AtomSet> = (0..na).map(AtomSet::singleton).collect();
        if all.iter().all(|s| grid.in_ring(s)) && grid.in_ring(&AtomSet::all(na)) {
            None
        } else {
            // a ring that is not the power set: enumerate its members
            Some(
                (0..(1usize << na.min(20)))
                    .map(|mask| (0..na).filter(|j| mask >> j & 1 == 1).collect::<AtomSet>())
                    .filter(|s| grid.in_ring(s))
                    .collect(),
            )
        }
    };
    let mut best: f64 = 0.0;
    for lo in 0..n {
        for hi in lo + 1..=n {
            let diff: Vec<f64> = (0..na).map(|j| prefix[hi][j] - prefix[lo][j]).collect();
            let v = match &ring_sets {
                None => {
                    let pos: f64 = diff.iter().filter(|d| **d > 0.0).sum();
                    let neg: f64 = diff.iter().filter(|d| **d < 0.0).sum();
                    pos.max(-neg)
                }
                Some(sets) => sets
                    .iter()
                    .map(|s| s.atoms().iter().map(|&j| diff[j]).sum::<f64>().abs())
                    .fold(0.0, f64::max),
            };
            best = best.max(v);
        }
    }
    Ok(best)
}

/// `rectangle_sup_gap(nu_{x_n}, nu_x)` along a sequence `x_n -> x`.
pub fn convergence_modulus(
    source: &dyn IntensitySource,
    seq: &[HVector],
    x: &HVector,
) -> Result<Vec<f64>> {
    let target = source.intensity(x)?;
    seq.iter()
        .map(|xn| rectangle_sup_gap(&source.intensity(xn)?, &target))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialOutcome {
    /// `max_cell (nu_x(cell) - qv(cell))`.
    pub excess: f64,
    /// Index of the closest sphere point (up to sign).
    pub nearest: usize,
    pub nearest_distance: f64,
    /// Uniform rectangle gap between `nu_x` and the intensity of the nearest point.
    pub nearest_gap: f64,
    /// Cells where `nu_x > qv + tol + nearest_gap`.
    pub failing_cells: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub trials: Vec<TrialOutcome>,
    pub passed: bool,
}

/// Checks that off-sample unit vectors are dominated by the sampled
/// supremum, up to `tol` plus the uniform gap to their nearest sample point.
pub fn sequential_boundedness_probe(
    source: &dyn IntensitySource,
    qv: &QvEstimate,
    sphere: &[HVector],
    trials: &[HVector],
    tol: f64,
) -> Result<ProbeReport> {
    let sphere_nu: Vec<DiscreteMeasure> = sphere
        .iter()
        .map(|s| source.intensity(s))
        .collect::<Result<_>>()?;
    let mut out = ProbeReport {
        trials: Vec::new(),
        passed: true,
    };
    for x in trials {
        let nu = source.intensity(x)?;
        let (nearest, nearest_distance) = sphere
            .iter()
            .enumerate()
            .map(|(k, s)| (k, (x - s).norm().min((x + s).norm())))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        let nearest_gap = rectangle_sup_gap(&nu, &sphere_nu[nearest])?;
        let mut excess = f64::NEG_INFINITY;
        let mut failing_cells = Vec::new();
        for c in 0..nu.masses().len() {
            let e = nu.mass(c) - qv.measure.mass(c);
            excess = excess.max(e);
            if e > tol + nearest_gap {
                failing_cells.push(c);
            }
        }
        out.passed &= failing_cells.is_empty();
        out.trials.push(TrialOutcome {
            excess,
            nearest,
            nearest_distance,
            nearest_gap,
            failing_cells,
        });
    }
    Ok(out)
}

/// Result of the Haar partition experiment at one dyadic level.
#[derive(Clone, Debug, Serialize)]
pub struct HaarPartitionReport {
    pub level: u32,
    /// `sum_{I in D_k} sup_n nu_{h_n}(I x U)`.
    pub partition_sum: f64,
    pub lower_bound: f64,
    /// Totals of the running supremum as Haar functions are added, at doubling counts.
    pub convergence_trace: Vec<(usize, f64)>,
    pub growth_ratio: f64,
    /// Partition sums on the dyadic partitions of levels `0..=k`.
    pub refinement_trace: Vec<f64>,
}

/// Sum over the dyadic cells of level `k` of the largest Haar intensity,
/// with the Haar system truncated at wavelet level `k`.
pub fn counterexample_partition_sum(level: u32) -> Result<f64> {
    Ok(haar_partition_report(level)?.partition_sum)
}

pub fn haar_partition_report(level: u32) -> Result<HaarPartitionReport> {
    let system = HaarSystem::new(level)?;
    let basis: Vec<HVector> = (0..system.dim()).map(|n| system.basis(n)).collect();
    let source = system.intensity_source(level)?;
    let qv = qv_supremum(&source, &basis)?;
    let refinement_trace = (0..=level)
        .map(|l| {
            let src = system.intensity_source(l)?;
            Ok(qv_supremum(&src, &basis)?.measure.total())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HaarPartitionReport {
        level,
        partition_sum: qv.measure.total(),
        lower_bound: (1u64 << level) as f64,
        growth_ratio: qv.growth_ratio(),
        convergence_trace: qv.convergence_trace,
        refinement_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sphere_sequence;
    use crate::noise::{ClosedFormIntensity, JumpSpec, LevyAtom, NoiseSpec};

    fn levy_source() -> ClosedFormIntensity {
        let q1 = PsdOperator::new(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0])).unwrap();
        let q2 = PsdOperator::from_diagonal(&[0.5, 3.0]).unwrap();
        let spec = NoiseSpec::DiscreteLevy {
            atoms: vec![LevyAtom::brownian(q1), LevyAtom::brownian(q2)],
        };
        ClosedFormIntensity::new(&spec, Arc::new(GridSpec::uniform(1.0, 4, 2).unwrap())).unwrap()
    }

    #[test]
    fn qv_dominates_every_sample() {
        let src = levy_source();
        let sphere = sphere_sequence(2, 64, 0);
        let qv = qv_supremum(&src, &sphere).unwrap();
        for x in &sphere {
            assert!(src.intensity(x).unwrap().dominated_by(&qv.measure));
        }
        let totals: Vec<f64> = qv.convergence_trace.iter().map(|t| t.1).collect();
        assert!(totals.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(qv.convergence_trace.last().unwrap().0, 64);
    }

    #[test]
    fn one_dimensional_brownian_qv() {
        let spec = NoiseSpec::DiscreteLevy {
            atoms: vec![LevyAtom::brownian(PsdOperator::identity(1))],
        };
        let g = Arc::new(GridSpec::uniform(1.0, 5, 1).unwrap());
        let src = ClosedFormIntensity::new(&spec, g).unwrap();
        let qv = qv_supremum(&src, &sphere_sequence(1, 2, 0)).unwrap();
        assert!(qv.measure.masses().iter().all(|&m| (m - 0.2).abs() < 1e-15));
    }

    #[test]
    fn polarization_identities() {
        let src = levy_source();
        let x = DVector::from_vec(vec![0.3, -1.1]);
        let y = DVector::from_vec(vec![0.7, 0.2]);
        let nu = src.intensity(&x).unwrap();
        let axx = alpha_polarization(&src, &x, &x).unwrap();
        let axnx = alpha_polarization(&src, &x, &(-&x)).unwrap();
        for c in 0..nu.masses().len() {
            assert!((axx.mass(c) - nu.mass(c)).abs() < 1e-14);
            assert!((axnx.mass(c) + nu.mass(c)).abs() < 1e-14);
        }
        let axy = alpha_polarization(&src, &x, &y).unwrap();
        let ayx = alpha_polarization(&src, &y, &x).unwrap();
        assert_eq!(axy, ayx);
    }

    #[test]
    fn refinement_reaches_top_eigenvalue_from_below() {
        let src = levy_source();
        let sphere = sphere_sequence(2, 6, 1);
        let raw = qv_supremum(&src, &sphere).unwrap();
        let alpha = BilinearMeasureField::from_source(&src).unwrap();
        let fine = qv_refine(&src, &alpha, &raw, &sphere, 12).unwrap();
        for c in 0..src.grid().n_cells() {
            let top = alpha.cell(c).clone().symmetric_eigen().eigenvalues.max();
            assert!(raw.measure.mass(c) <= fine.measure.mass(c));
            assert!(fine.measure.mass(c) <= top * (1.0 + 1e-12));
            assert!(fine.measure.mass(c) >= top * (1.0 - 1e-6));
        }
    }

    #[test]
    fn bilinear_field_matches_covariances() {
        let src = levy_source();
        let field = BilinearMeasureField::from_source(&src).unwrap();
        for c in 0..src.grid().n_cells() {
            assert!((field.cell(c) - src.cell_matrix(c)).amax() < 1e-14);
        }
    }

    #[test]
    fn identity_covariance_gives_identity_density() {
        let spec = NoiseSpec::DiscreteLevy {
            atoms: vec![LevyAtom::brownian(PsdOperator::identity(3))],
        };
        let g = Arc::new(GridSpec::uniform(1.0, 3, 1).unwrap());
        let src = ClosedFormIntensity::new(&spec, g).unwrap();
        let qv = qv_supremum(&src, &sphere_sequence(3, 32, 1)).unwrap();
        let qm = qm_density(&BilinearMeasureField::from_source(&src).unwrap(), &qv).unwrap();
        for c in 0..3 {
            assert!((qm.cell(c).matrix() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-14);
        }
    }

    #[test]
    fn null_cells_get_zero_density_and_inconsistency_is_caught() {
        let spec = NoiseSpec::HValuedLevy {
            q: PsdOperator::identity(2),
            jumps: vec![JumpSpec::new(vec![1.0, 0.0], 0.0)],
        };
        let g = Arc::new(GridSpec::uniform(1.0, 2, 2).unwrap());
        let src = ClosedFormIntensity::new(&spec, g).unwrap();
        let qv = qv_supremum(&src, &sphere_sequence(2, 8, 0)).unwrap();
        let alpha = BilinearMeasureField::from_source(&src).unwrap();
        let qm = qm_density(&alpha, &qv).unwrap();
        assert_eq!(qm.null_cells, vec![1, 3]);
        assert_eq!(qm.cell(1).matrix().amax(), 0.0);

        let mut bad = qv.clone();
        bad.measure = DiscreteMeasure::zero(bad.measure.grid().clone());
        assert!(matches!(
            qm_density(&alpha, &bad),
            Err(Error::Inconsistent { .. })
        ));
    }

    #[test]
    fn rectangle_gap_on_two_atoms() {
        let g = Arc::new(GridSpec::uniform(1.0, 2, 2).unwrap());
        let a = DiscreteMeasure::new(g.clone(), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let b = DiscreteMeasure::new(g, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        // atom 0 over both steps: +2
        assert_eq!(rectangle_sup_gap(&a, &b).unwrap(), 2.0);
        assert_eq!(rectangle_sup_gap(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn haar_small_levels() {
        assert_eq!(counterexample_partition_sum(0).unwrap(), 1.0);
        let r = haar_partition_report(3).unwrap();
        assert!(r.partition_sum >= 8.0);
        assert_eq!(r.refinement_trace, vec![1.0, 2.0, 4.0, 8.0]);
        assert!(counterexample_partition_sum(13).is_err());
    }
}
