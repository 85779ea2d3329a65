use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::HVector;
use crate::measure::{DiscreteMeasure, GridSpec, MarkAtom};
use crate::noise::IntensitySource;

/// `L^2`-normalized Haar system on `[0, 1]`, truncated at wavelet level `k`.
///
/// Index 0 is the constant function; index `2^j + m` is the wavelet of level
/// `j` supported on `[m 2^-j, (m + 1) 2^-j)`. The noise `Z(h)_t = int_0^t h dW`
/// has `d<Z(h)>_t = h(t)^2 dt`, so every intensity is an exact integral of a
/// piecewise-constant function on the dyadic cells of level `k + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HaarSystem {
    level: u32,
}

/// Largest accepted level.
pub const HAAR_MAX_LEVEL: u32 = 12;

impl HaarSystem {
    pub fn new(level: u32) -> Result<Self> {
        if level > HAAR_MAX_LEVEL {
            return Err(Error::Refused(format!(
                "Haar level {level} exceeds the limit {HAAR_MAX_LEVEL}"
            )));
        }
        Ok(Self { level })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    /// Number of basis functions, `2^(k+1)`.
    pub fn dim(&self) -> usize {
        1usize << (self.level + 1)
    }

    fn fine_cells(&self) -> usize {
        1usize << (self.level + 1)
    }

    /// `(level, shift)` of a wavelet index, `None` for the constant.
    fn wavelet(n: usize) -> Option<(u32, usize)> {
        if n == 0 {
            return None;
        }
        let j = usize::BITS - 1 - n.leading_zeros();
        Some((j, n - (1usize << j)))
    }

    /// `h_n(t)` for `t` in `[0, 1)`.
    pub fn eval(&self, n: usize, t: f64) -> f64 {
        match Self::wavelet(n) {
            None => 1.0,
            Some((j, m)) => {
                let scaled = t * (1u64 << j) as f64 - m as f64;
                let amp = 2f64.powf(j as f64 / 2.0);
                if (0.0..0.5).contains(&scaled) {
                    amp
                } else if (0.5..1.0).contains(&scaled) {
                    -amp
                } else {
                    0.0
                }
            }
        }
    }

    /// Sign pattern and squared amplitude of `h_n` on the fine dyadic cells.
    fn fine_pattern(&self, n: usize) -> (Vec<i8>, f64) {
        let f = self.fine_cells();
        match Self::wavelet(n) {
            None => (vec![1; f], 1.0),
            Some((j, m)) => {
                let width = f >> j;
                let mut s = vec![0i8; f];
                for (c, v) in s.iter_mut().enumerate().skip(m * width).take(width) {
                    *v = if c < m * width + width / 2 { 1 } else { -1 };
                }
                (s, (1u64 << j) as f64)
            }
        }
    }

    /// Values of `sum_n x_n h_n` on the fine dyadic cells.
    pub fn function_values(&self, x: &HVector) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(
                "coefficient vector does not match the Haar system".into(),
            ));
        }
        let mut v = vec![0.0; self.fine_cells()];
        for (n, &c) in x.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let (s, sq) = self.fine_pattern(n);
            let amp = sq.sqrt();
            for (vi, si) in v.iter_mut().zip(&s) {
                *vi += c * amp * f64::from(*si);
            }
        }
        Ok(v)
    }

    /// Dyadic time grid of level `time_level` with the single atom `U`.
    pub fn grid(&self, time_level: u32) -> Result<Arc<GridSpec>> {
        let g = GridSpec::uniform(1.0, 1usize << time_level, 1)?
            .with_atoms(vec![MarkAtom::new("U")])?;
        Ok(Arc::new(g))
    }

    /// Intensities on the dyadic grid of level `time_level <= k + 1`.
    pub fn intensity_source(&self, time_level: u32) -> Result<HaarIntensity> {
        if time_level > self.level + 1 {
            return Err(Error::Refused(
                "time grid finer than the Haar resolution".into(),
            ));
        }
        Ok(HaarIntensity {
            system: self.clone(),
            grid: self.grid(time_level)?,
            time_level,
        })
    }

    /// Basis vector of `h_n` in coefficient space.
    pub fn basis(&self, n: usize) -> HVector {
        let mut v = DVector::zeros(self.dim());
        v[n] = 1.0;
        v
    }

    /// `int_0^1 |f^2 - g^2|` for two coefficient vectors.
    pub fn l1_square_gap(&self, x: &HVector, y: &HVector) -> Result<f64> {
        let fx = self.function_values(x)?;
        let fy = self.function_values(y)?;
        let w = 1.0 / self.fine_cells() as f64;
        Ok(fx
            .iter()
            .zip(&fy)
            .map(|(a, b)| (a * a - b * b).abs() * w)
            .sum())
    }
}

/// `nu_x(cell) = int_cell (sum_n x_n h_n)^2`, evaluated exactly on the fine
/// dyadic cells. A single-coefficient `x = c e_n` uses `c^2 2^j |cell ∩ supp|`
/// so that basis intensities carry no rounding at all.
#[derive(Clone, Debug)]
pub struct HaarIntensity {
    system: HaarSystem,
    grid: Arc<GridSpec>,
    time_level: u32,
}

impl IntensitySource for HaarIntensity {
    fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    fn h_dim(&self) -> usize {
        self.system.dim()
    }

    fn intensity(&self, x: &HVector) -> Result<DiscreteMeasure> {
        let f = self.system.fine_cells();
        let per_cell = f >> self.time_level;
        let fine_len = 1.0 / f as f64;
        let mut nonzero = x.iter().enumerate().filter(|(_, v)| **v != 0.0);
        let first = nonzero.next();
        let single = first.is_some() && nonzero.next().is_none();
        let fine_sq: Vec<f64> = if let (true, Some((n, &c))) = (single, first) {
            let (s, sq) = self.system.fine_pattern(n);
            s.iter()
                .map(|&si| if si != 0 { c * c * sq } else { 0.0 })
                .collect()
        } else {
            self.system
                .function_values(x)?
                .iter()
                .map(|v| v * v)
                .collect()
        };
        let mass = fine_sq
            .chunks(per_cell)
            .map(|ch| ch.iter().sum::<f64>() * fine_len)
            .collect();
        DiscreteMeasure::new(self.grid.clone(), mass)
    }
}
