//! Finite-dimensional Hilbert-space toolbox.
//!
//! Vectors are coordinates in a fixed orthonormal basis, operators are dense
//! matrices. [`PsdOperator`] carries the symmetric positive semidefinite
//! invariant used for covariances and operator densities.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub type HVector = DVector<f64>;

/// Hilbert–Schmidt operator `H -> G` as a `dim(G) x dim(H)` matrix.
pub type HsOperator = DMatrix<f64>;

/// Symmetry tolerance, scaled by `max(1, max |entry|)`.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues in `[-PSD_CLIP_TOL, 0)` (scaled) are clipped to zero.
pub const PSD_CLIP_TOL: f64 = 1e-10;
/// Default relative cut-off for pseudo-inverses.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Symmetric positive semidefinite matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DMatrix<f64>", into = "DMatrix<f64>")]
pub struct PsdOperator(DMatrix<f64>);

impl PsdOperator {
    /// Validates symmetry and semidefiniteness; tiny negative eigenvalues are
    /// clipped and the stored matrix is the exact symmetric reconstruction.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!(
                "{}x{} is not square",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("non-finite matrix entry".into()));
        }
        let scale = m.amax().max(1.0);
        let asym = (&m - m.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric(asym));
        }
        let sym = (&m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let min = eig.eigenvalues.min();
        if min < -PSD_CLIP_TOL * scale {
            return Err(Error::NotPsd(min));
        }
        if min < 0.0 {
            let vals = eig.eigenvalues.map(|l| l.max(0.0));
            return Ok(Self(reconstruct(&eig.eigenvectors, &vals)));
        }
        Ok(Self(sym))
    }

    /// Symmetrizes and clips every negative eigenvalue, whatever its size.
    pub fn project(m: &DMatrix<f64>) -> Self {
        let sym = (m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let vals = eig.eigenvalues.map(|l| l.max(0.0));
        Self(reconstruct(&eig.eigenvectors, &vals))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Eigenvalues (ascending is not guaranteed) and orthonormal eigenvectors.
    pub fn eigen(&self) -> (DVector<f64>, DMatrix<f64>) {
        let e = SymmetricEigen::new(self.0.clone());
        (e.eigenvalues.map(|l| l.max(0.0)), e.eigenvectors)
    }

    /// Operator norm, i.e. the largest eigenvalue.
    pub fn op_norm(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        self.eigen().0.max()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// `(x, Q x)`.
    pub fn quad(&self, x: &HVector) -> f64 {
        x.dot(&(&self.0 * x))
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.0 * c)
    }
}

impl TryFrom<DMatrix<f64>> for PsdOperator {
    type Error = Error;
    fn try_from(m: DMatrix<f64>) -> Result<Self> {
        Self::new(m)
    }
}

impl From<PsdOperator> for DMatrix<f64> {
    fn from(p: PsdOperator) -> Self {
        p.0
    }
}

fn reconstruct(vecs: &DMatrix<f64>, vals: &DVector<f64>) -> DMatrix<f64> {
    let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |i, j| vecs[(i, j)] * vals[j]);
    let m = scaled * vecs.transpose();
    (&m + m.transpose()) * 0.5
}

/// Symmetric PSD square root. Eigenvalues at the round-off level
/// (`dim * eps * lambda_max`) are treated as exact zeros.
pub fn psd_sqrt(q: &PsdOperator) -> PsdOperator {
    let (vals, vecs) = q.eigen();
    let floor = vals.iter().fold(0.0f64, |m, &l| m.max(l)) * f64::EPSILON * q.dim() as f64;
    PsdOperator(reconstruct(
        &vecs,
        &vals.map(|l| if l > floor { l.sqrt() } else { 0.0 }),
    ))
}

/// Moore–Penrose pseudo-inverse of `Q^{1/2}`; eigenvalues of `Q` at or below
/// `rank_tol * lambda_max` are treated as zero.
pub fn pseudo_inverse_sqrt(q: &PsdOperator, rank_tol: f64) -> Result<HsOperator> {
    if !(rank_tol > 0.0) {
        return Err(Error::Refused("rank_tol must be positive".into()));
    }
    let (vals, vecs) = q.eigen();
    if vals.is_empty() {
        return Ok(DMatrix::zeros(0, 0));
    }
    let cut = rank_tol * vals.max();
    let inv = vals.map(|l| {
        if l > cut && l > 0.0 {
            1.0 / l.sqrt()
        } else {
            0.0
        }
    });
    Ok(reconstruct(&vecs, &inv))
}

pub fn hs_norm(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

/// `|| phi o Q^{1/2} ||_HS`, the Hilbert–Schmidt norm on the Cameron–Martin space of `Q`.
pub fn hq_norm(phi: &HsOperator, q: &PsdOperator) -> Result<f64> {
    if phi.ncols() != q.dim() {
        return Err(Error::Dimension(format!(
            "operator has {} columns, covariance is {}x{}",
            phi.ncols(),
            q.dim(),
            q.dim()
        )));
    }
    Ok((phi * psd_sqrt(q).matrix()).norm())
}

/// `sqrt(trace(phi Q phi^T))`; agrees with [`hq_norm`].
pub fn hq_norm_trace(phi: &HsOperator, q: &PsdOperator) -> Result<f64> {
    if phi.ncols() != q.dim() {
        return Err(Error::Dimension("operator/covariance mismatch".into()));
    }
    let t = (phi * q.matrix() * phi.transpose()).trace();
    Ok(t.max(0.0).sqrt())
}

/// Size of the candidate pool the sphere sequence is selected from.
const SPHERE_POOL: usize = 16_384;

/// Deterministic unit vectors: the `2 * dim` signed basis vectors first, then
/// greedy farthest-point picks (with `x` and `-x` identified) from a pool of
/// Kronecker points pushed through the Gaussian quantile. Prefixes of the
/// sequence are themselves well spread, and for `count <= SPHERE_POOL / 8`
/// the sequence for a smaller count is a prefix of the one for a larger
/// count. The seed only shifts the Kronecker lattice.
pub fn sphere_sequence(dim: usize, count: usize, seed: u64) -> Vec<HVector> {
    let mut out = Vec::with_capacity(count);
    'basis: for k in 0..dim {
        for sign in [1.0, -1.0] {
            if out.len() == count {
                break 'basis;
            }
            let mut v = DVector::zeros(dim);
            v[k] = sign;
            out.push(v);
        }
    }
    if out.len() == count || dim == 0 {
        return out;
    }
    if dim == 1 {
        while out.len() < count {
            let s = if out.len() % 2 == 0 { 1.0 } else { -1.0 };
            out.push(DVector::from_element(1, s));
        }
        return out;
    }
    let pool = kronecker_gaussian(dim, SPHERE_POOL.max(8 * count), seed);
    // projective gap 1 - |(x, s)| to the closest selected point
    let mut gap: Vec<f64> = pool
        .iter()
        .map(|x| {
            out.iter()
                .map(|s| 1.0 - x.dot(s).abs())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    while out.len() < count {
        let (best, _) =
            gap.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |a, (i, &g)| if g > a.1 { (i, g) } else { a },
            );
        let pick = pool[best].clone();
        for (g, x) in gap.iter_mut().zip(&pool) {
            *g = g.min(1.0 - x.dot(&pick).abs());
        }
        out.push(pick);
    }
    out
}

fn kronecker_gaussian(dim: usize, size: usize, seed: u64) -> Vec<HVector> {
    // generalized golden ratio: positive root of x^(d+1) = x + 1
    let mut phi = 2.0f64;
    for _ in 0..64 {
        phi = (1.0 + phi).powf(1.0 / (dim as f64 + 1.0));
    }
    let alpha: Vec<f64> = (1..=dim)
        .map(|i| (1.0 / phi.powi(i as i32)).fract())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    let normal = Normal::standard();
    let mut pool = Vec::with_capacity(size);
    let mut n = 1u64;
    while pool.len() < size {
        let v = DVector::from_fn(dim, |i, _| {
            let u = (shift[i] + n as f64 * alpha[i])
                .fract()
                .clamp(1e-12, 1.0 - 1e-12);
            normal.inverse_cdf(u)
        });
        n += 1;
        let norm = v.norm();
        if norm > 1e-9 {
            pool.push(v / norm);
        }
    }
    pool
}

/// Largest distance from `probes` random unit vectors to the nearest element of
/// `seq`. With `projective`, `x` and `-x` are identified.
pub fn coverage_radius(seq: &[HVector], probes: usize, seed: u64, projective: bool) -> f64 {
    let Some(dim) = seq.first().map(|v| v.len()) else {
        return f64::INFINITY;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let mut x = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        x /= x.norm();
        let best = seq
            .iter()
            .map(|s| {
                let d = (&x - s).norm();
                if projective {
                    d.min((&x + s).norm())
                } else {
                    d
                }
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(best);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_psd(dim: usize, rank: usize, seed: u64) -> PsdOperator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(rank, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        PsdOperator::new(a.transpose() * a).unwrap()
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        assert_eq!(
            psd_sqrt(&PsdOperator::identity(3)).matrix(),
            &DMatrix::identity(3, 3)
        );
        let d = PsdOperator::from_diagonal(&[4.0, 9.0]).unwrap();
        let r = psd_sqrt(&d);
        assert!(
            (r.matrix() - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).amax()
                < 1e-14
        );
    }

    #[test]
    fn sqrt_squares_back() {
        for seed in 0..20 {
            let q = random_psd(5, 5, seed);
            let r = psd_sqrt(&q);
            assert!((r.matrix() - r.matrix().transpose()).amax() == 0.0);
            assert!((r.matrix() * r.matrix() - q.matrix()).norm() < 1e-10);
        }
    }

    #[test]
    fn sqrt_of_square_of_diagonal_is_exact() {
        let r = PsdOperator::from_diagonal(&[0.5, 2.0, 0.0]).unwrap();
        let q = PsdOperator::new(r.matrix() * r.matrix()).unwrap();
        assert_eq!(psd_sqrt(&q).matrix(), r.matrix());
    }

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(PsdOperator::new(m), Err(Error::NotSymmetric(_))));
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(PsdOperator::new(m), Err(Error::NotPsd(_))));
        let tiny = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let p = PsdOperator::new(tiny).unwrap();
        assert!(p.eigen().0.min() >= 0.0);
    }

    #[test]
    fn pseudo_inverse_cases() {
        let id = PsdOperator::identity(3);
        assert!(
            (pseudo_inverse_sqrt(&id, 1e-10).unwrap() - DMatrix::<f64>::identity(3, 3)).amax()
                < 1e-15
        );
        let d = PsdOperator::from_diagonal(&[4.0, 0.0]).unwrap();
        let p = pseudo_inverse_sqrt(&d, 1e-8).unwrap();
        assert!((p - DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.0]))).amax() < 1e-15);
        let z = PsdOperator::zeros(2);
        assert_eq!(
            pseudo_inverse_sqrt(&z, 1e-10).unwrap(),
            DMatrix::zeros(2, 2)
        );
        assert!(pseudo_inverse_sqrt(&id, 0.0).is_err());
    }

    #[test]
    fn pseudo_inverse_penrose_identity_rank_deficient() {
        for seed in 0..20 {
            let q = random_psd(6, 3, seed);
            let r = psd_sqrt(&q);
            let p = pseudo_inverse_sqrt(&q, DEFAULT_RANK_TOL).unwrap();
            let back = r.matrix() * &p * r.matrix();
            assert!((back - r.matrix()).norm() < 1e-8);
        }
    }

    #[test]
    fn hq_norm_basic_cases() {
        let d = 4;
        let v = hq_norm(&DMatrix::identity(d, d), &PsdOperator::identity(d)).unwrap();
        assert!((v - 2.0).abs() < 1e-15);
        assert_eq!(
            hq_norm(&DMatrix::identity(d, d), &PsdOperator::zeros(d)).unwrap(),
            0.0
        );
        assert!(hq_norm(&DMatrix::identity(3, 2), &PsdOperator::identity(3)).is_err());
    }

    #[test]
    fn sphere_sequence_starts_with_signed_basis() {
        let s = sphere_sequence(1, 2, 0);
        assert_eq!(
            s,
            vec![
                DVector::from_element(1, 1.0),
                DVector::from_element(1, -1.0)
            ]
        );
        let s = sphere_sequence(2, 4, 7);
        let e = |i: usize, s: f64| {
            let mut v = DVector::zeros(2);
            v[i] = s;
            v
        };
        for v in [e(0, 1.0), e(0, -1.0), e(1, 1.0), e(1, -1.0)] {
            assert!(s.contains(&v));
        }
        let s = sphere_sequence(4, 100, 3);
        assert_eq!(s.len(), 100);
        assert!(s.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        assert_eq!(s, sphere_sequence(4, 100, 3));
    }

    #[test]
    fn coverage_shrinks_with_count() {
        let small = coverage_radius(&sphere_sequence(3, 16, 1), 2000, 9, true);
        let large = coverage_radius(&sphere_sequence(3, 512, 1), 2000, 9, true);
        assert!(large < small, "{large} !< {small}");
        assert!(large < 0.25);
    }
}
