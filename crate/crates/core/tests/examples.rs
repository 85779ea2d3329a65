//! Closed-form examples checked against independent computations.

use std::sync::Arc;

use cmvm::linalg::{sphere_sequence, PsdOperator};
use cmvm::measure::{brute_force_sup, DiscreteMeasure, GridSpec, MarkAtom};
use cmvm::noise::{ClosedFormIntensity, IntensitySource, JumpSpec, NoiseSpec};
use cmvm::quadvar::{
    alpha_polarization, haar_partition_report, qm_density, qv_supremum, BilinearMeasureField,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Haar function `n` at `t`: `h_0 = 1`, `h_{2^j + m} = 2^{j/2}(1 on the left half, -1 on
/// the right half of [m 2^-j, (m+1) 2^-j))`.
fn haar(n: usize, t: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let j = usize::BITS - 1 - n.leading_zeros();
    let m = n - (1 << j);
    let w = 1.0 / (1u64 << j) as f64;
    let (lo, mid, hi) = (m as f64 * w, (m as f64 + 0.5) * w, (m as f64 + 1.0) * w);
    let amp = ((1u64 << j) as f64).sqrt();
    if t >= lo && t < mid {
        amp
    } else if t >= mid && t < hi {
        -amp
    } else {
        0.0
    }
}

#[test]
fn haar_level_three_against_partition_enumeration() {
    let k = 3u32;
    let cells = 1usize << k;
    let dim = 1usize << (k + 1);
    // midpoint quadrature on 2^12 points is exact for these step functions
    let fine = 1usize << 12;
    let grid = Arc::new(GridSpec::uniform(1.0, cells, 1).unwrap());
    let family: Vec<DiscreteMeasure> = (0..dim)
        .map(|n| {
            let mut mass = vec![0.0; cells];
            for i in 0..fine {
                let t = (i as f64 + 0.5) / fine as f64;
                mass[(t * cells as f64) as usize] += haar(n, t).powi(2) / fine as f64;
            }
            DiscreteMeasure::new(grid.clone(), mass).unwrap()
        })
        .collect();
    let all: Vec<usize> = (0..cells).collect();
    let oracle = brute_force_sup(&family, &all).unwrap();
    let report = haar_partition_report(k).unwrap();
    assert!((oracle - 8.0).abs() < 1e-9);
    assert!((report.partition_sum - oracle).abs() < 1e-9);
    assert!(report.partition_sum >= report.lower_bound);
    assert_eq!(report.refinement_trace.len(), k as usize + 1);
}

#[test]
fn hvalued_covariation_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
    let q = PsdOperator::new(&a * a.transpose()).unwrap();
    let jumps: Vec<JumpSpec> = (0..2)
        .map(|_| {
            JumpSpec::new(
                (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                rng.random_range(0.5..2.0),
            )
        })
        .collect();
    let spec = NoiseSpec::HValuedLevy {
        q: q.clone(),
        jumps: jumps.clone(),
    };
    // nonuniform steps so the dt factor is exercised
    let atoms = (0..3).map(|i| MarkAtom::new(format!("a{i}"))).collect();
    let grid = Arc::new(GridSpec::new(vec![0.0, 0.3, 1.0], atoms).unwrap());
    let src = ClosedFormIntensity::new(&spec, grid.clone()).unwrap();
    for _ in 0..20 {
        let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let alpha = alpha_polarization(&src, &x, &y).unwrap();
        for c in 0..grid.n_cells() {
            let (i, atom) = grid.split(c);
            let dt = grid.dt(i);
            let expected = if atom == 0 {
                dt * x.dot(&(q.matrix() * &y))
            } else {
                let j = &jumps[atom - 1];
                dt * j.rate * j.vector().dot(&x) * j.vector().dot(&y)
            };
            assert!((alpha.mass(c) - expected).abs() < 1e-12, "cell {c}");
        }
    }
}

#[test]
fn identity_covariance_has_identity_density() {
    let spec = NoiseSpec::HValuedLevy {
        q: PsdOperator::identity(4),
        jumps: Vec::new(),
    };
    let grid = Arc::new(GridSpec::uniform(1.0, 3, 1).unwrap());
    let src = ClosedFormIntensity::new(&spec, grid.clone()).unwrap();
    let qv = qv_supremum(&src, &sphere_sequence(4, 32, 0)).unwrap();
    let qm = qm_density(&BilinearMeasureField::from_source(&src).unwrap(), &qv).unwrap();
    for c in 0..grid.n_cells() {
        assert!((qv.measure.mass(c) - grid.dt(0)).abs() < 1e-15);
        assert!((qm.cell(c).matrix() - DMatrix::<f64>::identity(4, 4)).amax() < 1e-12);
    }
    assert_eq!(src.h_dim(), 4);
}
