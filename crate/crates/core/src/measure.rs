//! Finite measures on a product grid of time cells and mark atoms.
//!
//! Every measure here is purely atomic: a set of cells carries the sum of the
//! member masses. On such a grid the supremum of a family of measures, taken
//! over all finite partitions of a set, is attained at the finest partition
//! and therefore reduces to a cellwise maximum. [`brute_force_sup`] enumerates
//! the partitions explicitly and serves as the independent check.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A mark atom, optionally embedded in the noise Hilbert space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkAtom {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<f64>>,
}

impl MarkAtom {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            coords: None,
        }
    }

    pub fn embedded(label: impl Into<String>, coords: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            coords: Some(coords),
        }
    }
}

/// Sorted set of atom indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AtomSet(Vec<usize>);

impl AtomSet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn singleton(atom: usize) -> Self {
        Self(vec![atom])
    }

    pub fn all(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn contains(&self, atom: usize) -> bool {
        self.0.binary_search(&atom).is_ok()
    }

    pub fn atoms(&self) -> &[usize] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn union(&self, other: &Self) -> Self {
        let mut v: Vec<usize> = self.0.iter().chain(other.0.iter()).copied().collect();
        v.sort_unstable();
        v.dedup();
        Self(v)
    }

    pub fn difference(&self, other: &Self) -> Self {
        Self(
            self.0
                .iter()
                .copied()
                .filter(|a| !other.contains(*a))
                .collect(),
        )
    }

    /// First shared atom, if any.
    pub fn intersection_witness(&self, other: &Self) -> Option<usize> {
        self.0.iter().copied().find(|a| other.contains(*a))
    }
}

impl FromIterator<usize> for AtomSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut v: Vec<usize> = iter.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Self(v)
    }
}

/// Time grid `0 = t_0 < t_1 < ... < t_n` crossed with a finite list of mark atoms.
///
/// The optional ring lists the admissible atom sets. When absent, every subset
/// of atoms is admissible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    time_points: Vec<f64>,
    atoms: Vec<MarkAtom>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ring: Option<Vec<AtomSet>>,
}

impl GridSpec {
    pub fn new(time_points: Vec<f64>, atoms: Vec<MarkAtom>) -> Result<Self> {
        if time_points.len() < 2 {
            return Err(Error::InvalidGrid("need at least two time points".into()));
        }
        if time_points[0] != 0.0 {
            return Err(Error::InvalidGrid("time grid must start at 0".into()));
        }
        if let Some(w) = time_points.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid(format!(
                "time points not strictly increasing near {}",
                w[0]
            )));
        }
        if time_points.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid("non-finite time point".into()));
        }
        if atoms.is_empty() {
            return Err(Error::InvalidGrid("need at least one mark atom".into()));
        }
        for (i, a) in atoms.iter().enumerate() {
            if atoms[..i].iter().any(|b| b.label == a.label) {
                return Err(Error::InvalidGrid(format!(
                    "duplicate atom label `{}`",
                    a.label
                )));
            }
        }
        Ok(Self {
            time_points,
            atoms,
            ring: None,
        })
    }

    /// Uniform grid with `steps` cells on `[0, horizon]` and atoms labelled `a0, a1, ...`.
    pub fn uniform(horizon: f64, steps: usize, n_atoms: usize) -> Result<Self> {
        if !(horizon > 0.0) || steps == 0 {
            return Err(Error::InvalidGrid(
                "horizon and steps must be positive".into(),
            ));
        }
        let times = (0..=steps)
            .map(|i| horizon * i as f64 / steps as f64)
            .collect();
        let atoms = (0..n_atoms)
            .map(|j| MarkAtom::new(format!("a{j}")))
            .collect();
        Self::new(times, atoms)
    }

    pub fn with_atoms(self, atoms: Vec<MarkAtom>) -> Result<Self> {
        Self::new(self.time_points, atoms)
    }

    /// Attach a ring of atom sets; it must contain the empty set and be closed
    /// under union and difference.
    pub fn with_ring(mut self, ring: Vec<AtomSet>) -> Result<Self> {
        if !ring.iter().any(AtomSet::is_empty) {
            return Err(Error::InvalidGrid("ring must contain the empty set".into()));
        }
        for a in &ring {
            if a.atoms().iter().any(|&j| j >= self.atoms.len()) {
                return Err(Error::InvalidGrid("ring references unknown atom".into()));
            }
            for b in &ring {
                if !ring.contains(&a.union(b)) || !ring.contains(&a.difference(b)) {
                    return Err(Error::InvalidGrid(format!(
                        "ring not closed under union/difference for {:?}, {:?}",
                        a.atoms(),
                        b.atoms()
                    )));
                }
            }
        }
        self.ring = Some(ring);
        Ok(self)
    }

    pub fn in_ring(&self, set: &AtomSet) -> bool {
        match &self.ring {
            Some(r) => r.contains(set),
            None => set.atoms().iter().all(|&j| j < self.atoms.len()),
        }
    }

    pub fn time_points(&self) -> &[f64] {
        &self.time_points
    }

    pub fn atoms(&self) -> &[MarkAtom] {
        &self.atoms
    }

    pub fn n_steps(&self) -> usize {
        self.time_points.len() - 1
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn n_cells(&self) -> usize {
        self.n_steps() * self.n_atoms()
    }

    pub fn horizon(&self) -> f64 {
        *self.time_points.last().unwrap()
    }

    pub fn dt(&self, step: usize) -> f64 {
        self.time_points[step + 1] - self.time_points[step]
    }

    pub fn cell(&self, step: usize, atom: usize) -> usize {
        step * self.n_atoms() + atom
    }

    /// `(step, atom)` of a flat cell index.
    pub fn split(&self, cell: usize) -> (usize, usize) {
        (cell / self.n_atoms(), cell % self.n_atoms())
    }

    /// Index of `t` in the time grid.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        let scale = self.horizon().max(1.0);
        self.time_points
            .iter()
            .position(|&s| (s - t).abs() <= 1e-12 * scale)
            .ok_or(Error::OffGrid(t))
    }

    /// Flat indices of the cells of `(t_lo, t_hi] x set`.
    pub fn rectangle(&self, lo: usize, hi: usize, set: &AtomSet) -> Vec<usize> {
        (lo..hi.min(self.n_steps()))
            .flat_map(|i| set.atoms().iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.cell(i, j))
            .collect()
    }
}

fn same_grid(a: &Arc<GridSpec>, b: &Arc<GridSpec>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

/// Nonnegative finite measure on the cells of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    grid: Arc<GridSpec>,
    mass: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(grid: Arc<GridSpec>, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != grid.n_cells() {
            return Err(Error::Dimension(format!(
                "{} masses for {} cells",
                mass.len(),
                grid.n_cells()
            )));
        }
        if let Some(c) = mass.iter().position(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::Parse(format!("cell {c} has mass {}", mass[c])));
        }
        Ok(Self { grid, mass })
    }

    pub fn zero(grid: Arc<GridSpec>) -> Self {
        let n = grid.n_cells();
        Self {
            grid,
            mass: vec![0.0; n],
        }
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn mass(&self, cell: usize) -> f64 {
        self.mass[cell]
    }

    pub fn at(&self, step: usize, atom: usize) -> f64 {
        self.mass[self.grid.cell(step, atom)]
    }

    pub fn measure_of(&self, cells: &[usize]) -> f64 {
        cells.iter().map(|&c| self.mass[c]).sum()
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Mass of `(t_lo, t_hi] x set` given as time indices.
    pub fn rectangle(&self, lo: usize, hi: usize, set: &AtomSet) -> f64 {
        self.measure_of(&self.grid.rectangle(lo, hi, set))
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.grid.clone(), self.mass.iter().map(|m| m * c).collect())
    }

    /// Restriction to cells whose atom lies in `set`.
    pub fn restrict_atoms(&self, set: &AtomSet) -> Self {
        let mass = self
            .mass
            .iter()
            .enumerate()
            .map(|(c, &m)| {
                if set.contains(self.grid.split(c).1) {
                    m
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            grid: self.grid.clone(),
            mass,
        }
    }

    /// True when `self <= other` on every cell.
    pub fn dominated_by(&self, other: &Self) -> bool {
        self.mass.iter().zip(&other.mass).all(|(a, b)| a <= b)
    }

    pub fn to_signed(&self) -> SignedDiscreteMeasure {
        SignedDiscreteMeasure {
            grid: self.grid.clone(),
            mass: self.mass.clone(),
        }
    }

    fn rows(&self) -> Vec<CellRow> {
        cell_rows(&self.grid, &self.mass)
    }

    /// Writes `t_lo,t_hi,atom_id,mass` rows with a header line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.rows() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads rows written by [`write_csv`](Self::write_csv) back onto `grid`.
    pub fn read_csv<R: Read>(grid: Arc<GridSpec>, input: R) -> Result<Self> {
        let mut mass = vec![f64::NAN; grid.n_cells()];
        let mut r = csv::Reader::from_reader(input);
        for row in r.deserialize() {
            let row: CellRow = row?;
            let cell = locate(&grid, &row)?;
            mass[cell] = row.mass;
        }
        if let Some(c) = mass.iter().position(|m| m.is_nan()) {
            return Err(Error::Parse(format!("missing row for cell {c}")));
        }
        Self::new(grid, mass)
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = MeasureRecord {
            grid: (*self.grid).clone(),
            cells: self.rows(),
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: MeasureRecord = serde_json::from_str(s)?;
        let grid = Arc::new(rec.grid);
        let mut mass = vec![0.0; grid.n_cells()];
        for row in &rec.cells {
            mass[locate(&grid, row)?] = row.mass;
        }
        Self::new(grid, mass)
    }
}

/// Real-valued set function on the cells of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedDiscreteMeasure {
    grid: Arc<GridSpec>,
    mass: Vec<f64>,
}

impl SignedDiscreteMeasure {
    pub fn new(grid: Arc<GridSpec>, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != grid.n_cells() {
            return Err(Error::Dimension(format!(
                "{} masses for {} cells",
                mass.len(),
                grid.n_cells()
            )));
        }
        if mass.iter().any(|m| !m.is_finite()) {
            return Err(Error::Parse("non-finite signed mass".into()));
        }
        Ok(Self { grid, mass })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn mass(&self, cell: usize) -> f64 {
        self.mass[cell]
    }

    pub fn measure_of(&self, cells: &[usize]) -> f64 {
        cells.iter().map(|&c| self.mass[c]).sum()
    }

    pub fn total_variation(&self) -> f64 {
        self.mass.iter().map(|m| m.abs()).sum()
    }

    pub fn abs(&self) -> DiscreteMeasure {
        DiscreteMeasure {
            grid: self.grid.clone(),
            mass: self.mass.iter().map(|m| m.abs()).collect(),
        }
    }

    pub fn neg(&self) -> Self {
        Self {
            grid: self.grid.clone(),
            mass: self.mass.iter().map(|m| -m).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct CellRow {
    t_lo: f64,
    t_hi: f64,
    atom_id: usize,
    mass: f64,
}

#[derive(Serialize, Deserialize)]
struct MeasureRecord {
    grid: GridSpec,
    cells: Vec<CellRow>,
}

fn cell_rows(grid: &GridSpec, mass: &[f64]) -> Vec<CellRow> {
    mass.iter()
        .enumerate()
        .map(|(c, &m)| {
            let (i, j) = grid.split(c);
            CellRow {
                t_lo: grid.time_points[i],
                t_hi: grid.time_points[i + 1],
                atom_id: j,
                mass: m,
            }
        })
        .collect()
}

fn locate(grid: &GridSpec, row: &CellRow) -> Result<usize> {
    let i = grid.time_index(row.t_lo)?;
    if i >= grid.n_steps() || grid.time_index(row.t_hi)? != i + 1 {
        return Err(Error::Parse(format!(
            "({}, {}] is not a grid cell",
            row.t_lo, row.t_hi
        )));
    }
    if row.atom_id >= grid.n_atoms() {
        return Err(Error::Parse(format!("unknown atom {}", row.atom_id)));
    }
    Ok(grid.cell(i, row.atom_id))
}

fn check_family(family: &[DiscreteMeasure]) -> Result<&Arc<GridSpec>> {
    let first = family.first().ok_or(Error::EmptyFamily)?;
    if family.iter().any(|m| !same_grid(&m.grid, &first.grid)) {
        return Err(Error::GridMismatch);
    }
    Ok(&first.grid)
}

/// Least measure dominating every member of `family`.
pub fn sup_measures(family: &[DiscreteMeasure]) -> Result<DiscreteMeasure> {
    let grid = check_family(family)?;
    let mut mass = family[0].mass.clone();
    for m in &family[1..] {
        for (acc, &v) in mass.iter_mut().zip(&m.mass) {
            if v > *acc {
                *acc = v;
            }
        }
    }
    Ok(DiscreteMeasure {
        grid: grid.clone(),
        mass,
    })
}

/// Cellwise sum of a finite family.
pub fn sum_measures(family: &[DiscreteMeasure]) -> Result<DiscreteMeasure> {
    let grid = check_family(family)?;
    let mut mass = vec![0.0; grid.n_cells()];
    for m in family {
        for (acc, v) in mass.iter_mut().zip(&m.mass) {
            *acc += v;
        }
    }
    Ok(DiscreteMeasure {
        grid: grid.clone(),
        mass,
    })
}

/// Largest number of cells accepted by [`brute_force_sup`].
pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Supremum over all partitions of `cells` of `sum_blocks max_family mu(block)`,
/// by explicit enumeration of set partitions.
pub fn brute_force_sup(family: &[DiscreteMeasure], cells: &[usize]) -> Result<f64> {
    let grid = check_family(family)?;
    if cells.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::TooManyCells {
            size: cells.len(),
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    if let Some(&c) = cells.iter().find(|&&c| c >= grid.n_cells()) {
        return Err(Error::Dimension(format!("cell {c} outside grid")));
    }
    let n = cells.len();
    if n == 0 {
        return Ok(0.0);
    }
    // Restricted growth strings: block[0] = 0, block[i] <= 1 + max(block[..i]).
    let mut block = vec![0usize; n];
    let mut best = f64::NEG_INFINITY;
    loop {
        let n_blocks = block.iter().max().unwrap() + 1;
        let mut value = 0.0;
        for b in 0..n_blocks {
            let members: Vec<usize> = (0..n)
                .filter(|&i| block[i] == b)
                .map(|i| cells[i])
                .collect();
            let top = family
                .iter()
                .map(|m| m.measure_of(&members))
                .fold(f64::NEG_INFINITY, f64::max);
            value += top;
        }
        best = best.max(value);

        // next restricted growth string
        let mut i = n - 1;
        loop {
            if i == 0 {
                return Ok(best);
            }
            let cap = block[..i].iter().max().unwrap() + 1;
            if block[i] < cap {
                block[i] += 1;
                for b in block.iter_mut().skip(i + 1) {
                    *b = 0;
                }
                break;
            }
            i -= 1;
        }
    }
}

/// Limit of a cellwise non-decreasing sequence.
pub fn monotone_sup(seq: &[DiscreteMeasure]) -> Result<DiscreteMeasure> {
    check_family(seq)?;
    for (k, w) in seq.windows(2).enumerate() {
        if let Some(cell) = w[0].mass.iter().zip(&w[1].mass).position(|(a, b)| b < a) {
            return Err(Error::NotMonotone { index: k + 1, cell });
        }
    }
    Ok(seq.last().unwrap().clone())
}

/// Outcome of comparing a signed measure against a nonnegative one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignedComparison {
    /// `alpha <= beta` on every cell.
    pub le: bool,
    /// `alpha == beta` on every cell.
    pub eq: bool,
    /// `|alpha| <= beta` on every cell.
    pub abs_le: bool,
    /// Cells where `|alpha| <= beta` fails.
    pub abs_violations: Vec<usize>,
    /// Largest `|alpha| - beta` over all cells.
    pub worst_excess: f64,
}

pub fn compare_signed(
    alpha: &SignedDiscreteMeasure,
    beta: &DiscreteMeasure,
) -> Result<SignedComparison> {
    compare_signed_tol(alpha, beta, 0.0)
}

/// [`compare_signed`] with an absolute slack `tol` in every inequality.
pub fn compare_signed_tol(
    alpha: &SignedDiscreteMeasure,
    beta: &DiscreteMeasure,
    tol: f64,
) -> Result<SignedComparison> {
    if !same_grid(&alpha.grid, &beta.grid) {
        return Err(Error::GridMismatch);
    }
    let mut out = SignedComparison {
        le: true,
        eq: true,
        abs_le: true,
        abs_violations: Vec::new(),
        worst_excess: f64::NEG_INFINITY,
    };
    for (c, (&a, &b)) in alpha.mass.iter().zip(&beta.mass).enumerate() {
        out.le &= a <= b + tol;
        out.eq &= (a - b).abs() <= tol;
        out.worst_excess = out.worst_excess.max(a.abs() - b);
        if a.abs() > b + tol {
            out.abs_le = false;
            out.abs_violations.push(c);
        }
    }
    Ok(out)
}
