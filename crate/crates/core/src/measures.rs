//! Finite Radon measures on `[0, H)` as first-class values.
//!
//! A [`GridMeasure`] carries an absolutely-continuous part as a
//! piecewise-constant density on a uniform age grid, plus a finite list of
//! atoms. These are the state objects of the fluid models (the potential
//! queue measure η_t, the in-service measure ν_t, and their residual-time
//! counterparts). All operations are pure; measures are value-semantic so
//! the solvers can keep per-time snapshots.

use crate::distributions::Distribution;
use crate::error::{FluidError, Result};

/// Slack applied to quantile targets, matching the `q − 1e−12` convention
/// of the frontier equation.
const QUANTILE_SLACK: f64 = 1e-12;

/// An interval of ages with explicit endpoint closedness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl Interval {
    pub fn new(lo: f64, hi: f64, lo_closed: bool, hi_closed: bool) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(FluidError::InvalidInput(format!(
                "interval requires lo <= hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi, lo_closed, hi_closed })
    }

    /// `[lo, hi]`
    pub fn closed(lo: f64, hi: f64) -> Result<Self> {
        Self::new(lo, hi, true, true)
    }

    /// `(lo, hi]`
    pub fn left_open(lo: f64, hi: f64) -> Result<Self> {
        Self::new(lo, hi, false, true)
    }

    /// `[lo, hi)`
    pub fn right_open(lo: f64, hi: f64) -> Result<Self> {
        Self::new(lo, hi, true, false)
    }

    fn contains(&self, x: f64) -> bool {
        (x > self.lo || (x == self.lo && self.lo_closed))
            && (x < self.hi || (x == self.hi && self.hi_closed))
    }
}

/// A nonnegative finite measure on `[0, H_cap)`: uniform-grid density plus
/// atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    /// Cell width; cell `i` covers `[i·da, (i+1)·da)`.
    da: f64,
    /// Piecewise-constant density per cell.
    density: Vec<f64>,
    /// Sorted `(location, mass)` pairs, masses strictly positive.
    atoms: Vec<(f64, f64)>,
    /// No mass at or beyond this age.
    h_cap: f64,
    /// Cumulative a.c. mass at cell edges (`len = density.len() + 1`).
    ac_prefix: Vec<f64>,
}

impl GridMeasure {
    /// The zero measure on a grid of width `da`.
    pub fn empty(da: f64) -> Self {
        Self::new(da, Vec::new(), Vec::new()).unwrap()
    }

    /// Builds a measure from a cell density vector and an atom list.
    pub fn new(da: f64, density: Vec<f64>, mut atoms: Vec<(f64, f64)>) -> Result<Self> {
        if !da.is_finite() || da <= 0.0 {
            return Err(FluidError::InvalidInput(format!("grid width must be positive, got {da}")));
        }
        if density.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(FluidError::InvalidInput("densities must be finite and >= 0".into()));
        }
        if atoms.iter().any(|(x, m)| !x.is_finite() || *x < 0.0 || !m.is_finite() || *m <= 0.0) {
            return Err(FluidError::InvalidInput(
                "atoms must have finite location >= 0 and mass > 0".into(),
            ));
        }
        atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let grid_end = da * density.len() as f64;
        let atom_end = atoms.last().map(|(x, _)| x + da).unwrap_or(0.0);
        let h_cap = grid_end.max(atom_end);
        let mut ac_prefix = Vec::with_capacity(density.len() + 1);
        ac_prefix.push(0.0);
        for (i, d) in density.iter().enumerate() {
            ac_prefix.push(ac_prefix[i] + d * da);
        }
        Ok(Self { da, density, atoms, h_cap, ac_prefix })
    }

    /// Builds a measure whose cell masses are `∫_{cell} density(x) dx`
    /// evaluated by the midpoint rule.
    pub fn from_density_fn(da: f64, cells: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let density: Vec<f64> =
            (0..cells).map(|i| f((i as f64 + 0.5) * da).max(0.0)).collect();
        Self::new(da, density, Vec::new())
    }

    pub fn grid_width(&self) -> f64 {
        self.da
    }

    pub fn cell_count(&self) -> usize {
        self.density.len()
    }

    pub fn density_cells(&self) -> &[f64] {
        &self.density
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    /// Right support bound: no mass at or beyond this age.
    pub fn support_cap(&self) -> f64 {
        self.h_cap
    }

    pub fn is_empty(&self) -> bool {
        self.total_mass() == 0.0
    }

    /// Total mass `Σ dᵢ·da + Σ atom masses`.
    pub fn total_mass(&self) -> f64 {
        self.ac_prefix.last().unwrap() + self.atoms.iter().map(|(_, m)| m).sum::<f64>()
    }

    /// Absolutely-continuous mass of `[0, x]` (atoms excluded).
    fn ac_cumulative(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let end = self.da * self.density.len() as f64;
        if x >= end {
            return *self.ac_prefix.last().unwrap();
        }
        let i = (x / self.da) as usize;
        let i = i.min(self.density.len() - 1);
        self.ac_prefix[i] + self.density[i] * (x - i as f64 * self.da)
    }

    /// `mass([0, x])`, right-continuous and non-decreasing in `x`.
    pub fn cumulative(&self, x: f64) -> f64 {
        self.ac_cumulative(x)
            + self.atoms.iter().take_while(|(loc, _)| *loc <= x).map(|(_, m)| m).sum::<f64>()
    }

    /// Exact Stieltjes mass of an interval: atoms at closed endpoints count,
    /// the a.c. part integrates the piecewise-constant density.
    pub fn mass(&self, iv: Interval) -> f64 {
        let ac = self.ac_cumulative(iv.hi) - self.ac_cumulative(iv.lo);
        let atom: f64 =
            self.atoms.iter().filter(|(x, _)| iv.contains(*x)).map(|(_, m)| m).sum();
        ac + atom
    }

    /// `∫ f dμ` by midpoint rule on cells plus exact atom evaluation.
    /// Linear in `f` and in the measure.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        let mut acc = 0.0;
        for (i, d) in self.density.iter().enumerate() {
            if *d > 0.0 {
                acc += f((i as f64 + 0.5) * self.da) * d * self.da;
            }
        }
        for (x, m) in &self.atoms {
            acc += f(*x) * m;
        }
        acc
    }

    /// Smallest age `x` with `cumulative(x) ≥ q − 1e−12` (the frontier
    /// inversion of the queue-boundary equation). Ties resolve to the
    /// infimum; within a cell the cumulative is interpolated linearly.
    pub fn quantile_age(&self, q: f64) -> Result<f64> {
        let total = self.total_mass();
        if q < 0.0 || q > total + QUANTILE_SLACK {
            return Err(FluidError::OutOfRange(format!(
                "quantile target {q} outside [0, {total}]"
            )));
        }
        let target = q - QUANTILE_SLACK;
        if target <= 0.0 {
            return Ok(0.0);
        }
        let mut cum = 0.0f64;
        let mut atom_idx = 0usize;
        let n = self.density.len();
        for i in 0..n {
            let x0 = i as f64 * self.da;
            let x1 = (i + 1) as f64 * self.da;
            let d = self.density[i];
            let mut seg_start = x0;
            // Atoms interleaved within this cell.
            while atom_idx < self.atoms.len() && self.atoms[atom_idx].0 < x1 {
                let (loc, m) = self.atoms[atom_idx];
                if d > 0.0 && cum + d * (loc - seg_start) >= target {
                    return Ok(seg_start + (target - cum) / d);
                }
                cum += d * (loc - seg_start);
                if cum + m >= target {
                    return Ok(loc);
                }
                cum += m;
                seg_start = loc;
                atom_idx += 1;
            }
            if d > 0.0 && cum + d * (x1 - seg_start) >= target {
                return Ok(seg_start + (target - cum) / d);
            }
            cum += d * (x1 - seg_start);
        }
        // Atoms beyond the density grid.
        while atom_idx < self.atoms.len() {
            let (loc, m) = self.atoms[atom_idx];
            if cum + m >= target {
                return Ok(loc);
            }
            cum += m;
            atom_idx += 1;
        }
        // q within slack of the total mass: the top of the support.
        Ok(self.h_cap)
    }

    /// The push-forward by `x ↦ x + t`, thinned by the survival factor
    /// `Ḡ(x+t)/Ḡ(x)` of `law`. Atoms stay atoms with scaled mass; cell mass
    /// is scaled by the factor at the cell midpoint and rebinned
    /// conservatively onto the standard grid (mass-preserving).
    pub fn age_and_thin(&self, t: f64, law: &Distribution) -> Result<Self> {
        if t < 0.0 {
            return Err(FluidError::Domain(format!("age_and_thin: t must be >= 0, got {t}")));
        }
        if t == 0.0 {
            return Ok(self.clone());
        }
        let n = self.density.len();
        let shift_cells = (t / self.da).floor() as usize;
        let frac = t - shift_cells as f64 * self.da;
        let w_hi = frac / self.da; // overlap fraction spilling into the next cell
        let mut out = vec![0.0f64; n + shift_cells + 2];
        for (i, d) in self.density.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let mid = (i as f64 + 0.5) * self.da;
            let s0 = law.survival(mid);
            if s0 <= 0.0 {
                return Err(FluidError::InvalidInput(format!(
                    "measure has mass at age {mid} where the survival function vanishes"
                )));
            }
            let mass = d * self.da * law.survival(mid + t) / s0;
            if mass == 0.0 {
                continue;
            }
            let j = i + shift_cells;
            out[j] += mass * (1.0 - w_hi) / self.da;
            out[j + 1] += mass * w_hi / self.da;
        }
        let mut atoms = Vec::with_capacity(self.atoms.len());
        for (x, m) in &self.atoms {
            let s0 = law.survival(*x);
            if s0 <= 0.0 {
                return Err(FluidError::InvalidInput(format!(
                    "measure has an atom at {x} where the survival function vanishes"
                )));
            }
            let m_new = m * law.survival(x + t) / s0;
            if m_new > 0.0 {
                atoms.push((x + t, m_new));
            }
        }
        while out.last() == Some(&0.0) {
            out.pop();
        }
        Self::new(self.da, out, atoms)
    }

    /// Conservative (mass-preserving) rebinning onto a grid of width
    /// `new_da`: each old cell's mass is distributed to the new cells it
    /// overlaps, proportionally to the overlap. Atoms are untouched.
    pub fn rebin(&self, new_da: f64) -> Result<Self> {
        if !new_da.is_finite() || new_da <= 0.0 {
            return Err(FluidError::InvalidInput(format!("grid width must be positive, got {new_da}")));
        }
        if (new_da - self.da).abs() <= 1e-15 * self.da {
            return Ok(self.clone());
        }
        let old_end = self.da * self.density.len() as f64;
        let n_new = (old_end / new_da).ceil() as usize;
        let mut density = vec![0.0f64; n_new];
        for (i, d) in self.density.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let lo = i as f64 * self.da;
            let hi = lo + self.da;
            let j0 = (lo / new_da) as usize;
            let j1 = ((hi / new_da).ceil() as usize).min(n_new);
            for (j, slot) in density.iter_mut().enumerate().take(j1).skip(j0) {
                let cl = (j as f64 * new_da).max(lo);
                let ch = ((j + 1) as f64 * new_da).min(hi);
                if ch > cl {
                    *slot += d * (ch - cl) / new_da;
                }
            }
        }
        Self::new(new_da, density, self.atoms.clone())
    }

    /// Pointwise sum of two measures on the same grid.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if (self.da - other.da).abs() > 1e-15 * self.da {
            return Err(FluidError::InvalidInput(
                "cannot add measures with different grid widths".into(),
            ));
        }
        let n = self.density.len().max(other.density.len());
        let mut density = vec![0.0; n];
        for (i, d) in self.density.iter().enumerate() {
            density[i] += d;
        }
        for (i, d) in other.density.iter().enumerate() {
            density[i] += d;
        }
        let mut atoms = self.atoms.clone();
        atoms.extend_from_slice(&other.atoms);
        Self::new(self.da, density, atoms)
    }

    /// CSV serialization: one `(age, density)` row per cell and a separate
    /// atom table, both with 12 significant digits.
    pub fn to_csv_strings(&self) -> (String, String) {
        let mut dens = String::from("age,density\n");
        for (i, d) in self.density.iter().enumerate() {
            dens.push_str(&format!("{:.11e},{:.11e}\n", i as f64 * self.da, d));
        }
        let mut atoms = String::from("location,mass\n");
        for (x, m) in &self.atoms {
            atoms.push_str(&format!("{x:.11e},{m:.11e}\n"));
        }
        (dens, atoms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_density_on(da: f64, upto: f64) -> GridMeasure {
        let cells = (upto / da).round() as usize;
        GridMeasure::new(da, vec![1.0; cells], Vec::new()).unwrap()
    }

    #[test]
    fn mass_examples() {
        let empty = GridMeasure::empty(0.1);
        assert_eq!(empty.mass(Interval::closed(0.0, 100.0).unwrap()), 0.0);

        let m = unit_density_on(0.01, 1.0);
        let got = m.mass(Interval::closed(0.25, 0.75).unwrap());
        assert!((got - 0.5).abs() < 1e-12);

        let atom = GridMeasure::new(1.0, Vec::new(), vec![(0.5, 2.0)]).unwrap();
        assert_eq!(atom.mass(Interval::closed(0.5, 0.5).unwrap()), 2.0);
        assert_eq!(atom.mass(Interval::left_open(0.5, 1.0).unwrap()), 0.0);
    }

    #[test]
    fn mass_additive_over_disjoint_intervals() {
        let m = GridMeasure::new(0.05, vec![2.0; 40], vec![(0.6, 0.5), (1.3, 0.25)]).unwrap();
        let whole = m.mass(Interval::closed(0.0, 2.0).unwrap());
        let a = m.mass(Interval::closed(0.0, 0.6).unwrap());
        let b = m.mass(Interval::left_open(0.6, 2.0).unwrap());
        assert!((whole - (a + b)).abs() < 1e-12);
    }

    #[test]
    fn integrate_examples() {
        let m = unit_density_on(0.001, 1.0);
        assert!((m.integrate(|_| 1.0) - m.total_mass()).abs() < 1e-12);
        assert!((m.integrate(|x| x) - 0.5).abs() < 1e-6);
        assert_eq!(m.integrate(|_| 0.0), 0.0);
        // Linearity in f is exact.
        let f = |x: f64| x * x;
        let g = |x: f64| (1.0 + x).recip();
        let lhs = m.integrate(|x| f(x) + g(x));
        let rhs = m.integrate(f) + m.integrate(g);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn quantile_examples() {
        let m = unit_density_on(0.01, 1.0);
        assert_eq!(m.quantile_age(0.0).unwrap(), 0.0);

        let double = GridMeasure::new(0.01, vec![2.0; 100], Vec::new()).unwrap();
        assert!((double.quantile_age(1.0).unwrap() - 0.5).abs() < 1e-9);

        let atom = GridMeasure::new(1.0, Vec::new(), vec![(0.3, 1.0)]).unwrap();
        assert_eq!(atom.quantile_age(0.5).unwrap(), 0.3);

        assert!(m.quantile_age(2.0).is_err());
    }

    #[test]
    fn quantile_left_inverse_inequality() {
        let m = GridMeasure::new(0.05, vec![0.5; 60], vec![(1.25, 0.7)]).unwrap();
        for i in 0..=60 {
            let x = i as f64 * 0.05;
            let q = m.cumulative(x);
            let back = m.quantile_age(q).unwrap();
            assert!(back <= x + 1e-12, "quantile(cum({x})) = {back}");
        }
    }

    #[test]
    fn age_and_thin_examples() {
        let exp = Distribution::exponential(1.0).unwrap();
        let m = GridMeasure::new(0.01, vec![1.0; 100], vec![(0.0, 1.0)]).unwrap();
        let same = m.age_and_thin(0.0, &exp).unwrap();
        assert_eq!(same, m);

        // Unit atom at 0 aged by 1 under Exp(1): atom at 1 with mass e^{-1}.
        let atom = GridMeasure::new(0.01, Vec::new(), vec![(0.0, 1.0)]).unwrap();
        let aged = atom.age_and_thin(1.0, &exp).unwrap();
        assert_eq!(aged.atoms().len(), 1);
        let (loc, mass) = aged.atoms()[0];
        assert!((loc - 1.0).abs() < 1e-15);
        assert!((mass - (-1.0f64).exp()).abs() < 1e-15);

        // Aging past the right support kills everything.
        let unif = Distribution::uniform(0.0, 1.0).unwrap();
        let m = unit_density_on(0.01, 0.5);
        let dead = m.age_and_thin(1.0, &unif).unwrap();
        assert_eq!(dead.total_mass(), 0.0);
    }

    #[test]
    fn age_and_thin_mass_identity() {
        // mass(age_and_thin(m, t)) == integrate(m, x -> survival(x+t)/survival(x))
        let exp = Distribution::exponential(0.7).unwrap();
        let m = GridMeasure::new(0.01, vec![0.8; 150], vec![(0.333, 0.2)]).unwrap();
        for &t in &[0.005, 0.1, 0.77, 3.0] {
            let aged = m.age_and_thin(t, &exp).unwrap();
            let expect = m.integrate(|x| exp.survival(x + t) / exp.survival(x));
            assert!(
                (aged.total_mass() - expect).abs() < 1e-10,
                "t={t}: {} vs {expect}",
                aged.total_mass()
            );
        }
    }

    #[test]
    fn age_and_thin_semigroup_on_grid() {
        // Grid-aligned shifts compose exactly (up to 1e-8 in total variation
        // on the cells).
        let law = Distribution::weibull(1.5, 2.0).unwrap();
        let m = GridMeasure::new(0.01, (0..200).map(|i| 1.0 / (1 + i) as f64).collect(), vec![(0.55, 0.3)])
            .unwrap();
        let s = 0.25;
        let t = 0.5;
        let two_step = m.age_and_thin(s, &law).unwrap().age_and_thin(t, &law).unwrap();
        let one_step = m.age_and_thin(s + t, &law).unwrap();
        let cells = two_step.cell_count().max(one_step.cell_count());
        let mut tv = 0.0f64;
        for i in 0..cells {
            let a = two_step.density_cells().get(i).unwrap_or(&0.0);
            let b = one_step.density_cells().get(i).unwrap_or(&0.0);
            tv += (a - b).abs() * 0.01;
        }
        for ((xa, ma), (xb, mb)) in two_step.atoms().iter().zip(one_step.atoms()) {
            assert!((xa - xb).abs() < 1e-12);
            tv += (ma - mb).abs();
        }
        assert!(tv < 1e-8, "semigroup total-variation gap {tv}");
    }

    #[test]
    fn age_and_thin_rejects_dead_mass() {
        let unif = Distribution::uniform(0.0, 1.0).unwrap();
        // Mass at ages beyond H where the survival function vanishes.
        let m = GridMeasure::new(0.1, vec![0.0; 12], vec![(1.5, 1.0)]).unwrap();
        assert!(m.age_and_thin(0.5, &unif).is_err());
    }

    #[test]
    fn csv_round_shape() {
        let m = GridMeasure::new(0.5, vec![1.0, 2.0], vec![(0.25, 0.1)]).unwrap();
        let (dens, atoms) = m.to_csv_strings();
        assert!(dens.starts_with("age,density\n"));
        assert_eq!(dens.lines().count(), 3);
        assert_eq!(atoms.lines().count(), 2);
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn arb_measure() -> impl Strategy<Value = GridMeasure> {
        (
            proptest::collection::vec(0.0f64..3.0, 0..60),
            proptest::collection::vec((0.0f64..5.0, 0.01f64..2.0), 0..4),
        )
            .prop_map(|(density, atoms)| GridMeasure::new(0.05, density, atoms).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn cumulative_monotone(m in arb_measure(), x in 0.0f64..6.0, h in 0.0f64..2.0) {
            prop_assert!(m.cumulative(x + h) >= m.cumulative(x) - 1e-12);
        }

        #[test]
        fn mass_monotone_in_inclusion(m in arb_measure(), lo in 0.0f64..3.0, w in 0.0f64..2.0, pad in 0.0f64..1.0) {
            let inner = Interval::closed(lo + pad, (lo + pad + w).max(lo + pad)).unwrap();
            let outer = Interval::closed(lo, lo + 2.0 * pad + w).unwrap();
            prop_assert!(m.mass(outer) >= m.mass(inner) - 1e-12);
        }

        #[test]
        fn quantile_is_left_inverse(m in arb_measure(), frac in 0.0f64..1.0) {
            let total = m.total_mass();
            prop_assume!(total > 0.0);
            let q = frac * total;
            let x = m.quantile_age(q).unwrap();
            prop_assert!(m.cumulative(x) >= q - 2e-12, "cum({x}) = {} < {q}", m.cumulative(x));
        }
    }
}
