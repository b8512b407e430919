//! Residual-time measures derived from an elapsed-time trajectory.
//!
//! `ν^ℓ_t` tracks remaining service times of the content in service and
//! `η^ℓ_t` the remaining patience of the content in queue. Both are built
//! from their tail functions
//!
//! ```text
//! ν^ℓ_t(z,∞) = ∫ Ḡ^s(y+t+z)/Ḡ^s(y) ν_0(dy) + ∫_0^t Ḡ^s(t−s+z) dK(s)
//! η^ℓ_t(z,∞) = 1{ς(t)≤0} ∫_{[0,−ς(t)]} Ḡ^r(y+t+z)/Ḡ^r(y) η_0(dy)
//!              + ∫_{ς⁺(t)}^t Ḡ^r(t−s+z) λ(s) ds
//! ```
//!
//! with `ς(t) = t − χ(t)` the arrival time of the longest-waiting content.
//! Tails are the objects the coupling identities constrain —
//! `ν^ℓ_t(z,∞) = ν_{t+z}[z,∞)` and `η^ℓ_t(z,∞) = η_{t+z}[z, χ(t)+z]` — so
//! the measures are produced by differencing tails on the residual grid,
//! and the coupling checker evaluates the right-hand sides from the
//! reconstructed elapsed-time measures (a genuinely different computational
//! route).

use crate::elapsed::Trajectory;
use crate::error::{FluidError, Result};
use crate::measures::{GridMeasure, Interval};

/// One residual-time slice.
#[derive(Debug, Clone)]
pub struct ResidualSlice {
    pub t: f64,
    /// ς(t) = t − χ(t).
    pub varsigma: f64,
    /// Residual service times of content in service (mass B(t)).
    pub nu_res: GridMeasure,
    /// Residual patience of content in queue (mass Q(t)).
    pub eta_res: GridMeasure,
}

/// `ν^ℓ_t(z,∞)` at grid index `j`.
pub fn nu_tail(traj: &Trajectory, j: usize, z: f64) -> f64 {
    let dt = traj.dt();
    let t = traj.time(j);
    let gs = &traj.model().service;
    let mut tail = traj.initial().nu0.integrate(|y| {
        let s0 = gs.survival(y);
        if s0 > 0.0 {
            gs.survival(y + t + z) / s0
        } else {
            0.0
        }
    });
    for (i, dki) in traj.k_increments().iter().take(j).enumerate() {
        // Exact cell average of Ḡ^s(t−s+z) over the entry step (t_i, t_{i+1}).
        let lo = t - (i + 1) as f64 * dt + z;
        tail += dki * gs.survival_integral(lo, lo + dt) / dt;
    }
    tail
}

/// `η^ℓ_t(z,∞)` at grid index `j`.
pub fn eta_tail(traj: &Trajectory, j: usize, z: f64) -> f64 {
    let t = traj.time(j);
    let chi = traj.chi_col()[j];
    let varsigma = t - chi;
    let gr = &traj.model().patience;
    let rate = &traj.model().rate;
    let mut tail = 0.0;
    if varsigma <= 0.0 {
        // Initial content with ages up to −ς(t) = χ(t) − t is still queued.
        let cutoff = -varsigma;
        tail += integrate_band(&traj.initial().eta0, cutoff, |y| {
            let s0 = gr.survival(y);
            if s0 > 0.0 {
                gr.survival(y + t + z) / s0
            } else {
                0.0
            }
        });
    }
    // Arrivals during (ς⁺(t), t] are still queued.
    let s_lo = varsigma.max(0.0);
    if t > s_lo {
        let dt = traj.dt();
        let m0 = (s_lo / dt) as usize;
        for m in m0..j {
            let a = (m as f64 * dt).max(s_lo);
            let b = (m + 1) as f64 * dt;
            if b <= a {
                continue;
            }
            // ∫_a^b Ḡ^r(t−s+z) ds with the midpoint arrival rate.
            tail += rate.rate(0.5 * (a + b)) * gr.survival_integral(t - b + z, t - a + z);
        }
    }
    tail
}

/// Integrates `f` against the measure over initial ages `[0, cutoff]`,
/// clipping the boundary cell.
fn integrate_band(m: &GridMeasure, cutoff: f64, f: impl Fn(f64) -> f64) -> f64 {
    let da = m.grid_width();
    let mut acc = 0.0;
    for (i, d) in m.density_cells().iter().enumerate() {
        if *d == 0.0 {
            continue;
        }
        let lo = i as f64 * da;
        let hi = ((i + 1) as f64 * da).min(cutoff);
        if hi <= lo {
            break;
        }
        acc += f(0.5 * (lo + hi)) * d * (hi - lo);
    }
    for (x, mass) in m.atoms() {
        if *x <= cutoff {
            acc += f(*x) * mass;
        }
    }
    acc
}

/// Builds the residual slice at grid index `j` by differencing the tail
/// functions on a residual grid of width `dz` up to `z_max`.
pub fn residual_slice(traj: &Trajectory, j: usize, dz: f64, z_max: f64) -> Result<ResidualSlice> {
    if dz.is_nan() || z_max.is_nan() || dz <= 0.0 || z_max <= 0.0 {
        return Err(FluidError::Config("residual grid needs dz > 0 and z_max > 0".into()));
    }
    let t = traj.time(j);
    let cells = (z_max / dz).ceil() as usize;
    let mut nu_density = Vec::with_capacity(cells);
    let mut eta_density = Vec::with_capacity(cells);
    let mut nu_prev = nu_tail(traj, j, 0.0);
    let mut eta_prev = eta_tail(traj, j, 0.0);
    for m in 1..=cells {
        let z = m as f64 * dz;
        let nu_next = nu_tail(traj, j, z);
        let eta_next = eta_tail(traj, j, z);
        nu_density.push(((nu_prev - nu_next) / dz).max(0.0));
        eta_density.push(((eta_prev - eta_next) / dz).max(0.0));
        nu_prev = nu_next;
        eta_prev = eta_next;
    }
    Ok(ResidualSlice {
        t,
        varsigma: t - traj.chi_col()[j],
        nu_res: GridMeasure::new(dz, nu_density, Vec::new())?,
        eta_res: GridMeasure::new(dz, eta_density, Vec::new())?,
    })
}

/// Residual densities `(b_ℓ(t,·), q_ℓ(t,·))` sampled at cell midpoints of a
/// grid of width `dz`:
///
/// ```text
/// b_ℓ(t,y) = ∫ g^s(x+t+y)/Ḡ^s(x) ν_0(dx) + ∫_0^t g^s(y+t−u) dK(u)
/// q_ℓ(t,y) = 1{ς(t)≤0} ∫_{[0,−ς(t)]} g^r(x+t+y)/Ḡ^r(x) η_0(dx)
///            + ∫_{ς⁺(t)}^t g^r(y+t−u) λ(u) du
/// ```
pub fn residual_densities(
    traj: &Trajectory,
    j: usize,
    dz: f64,
    z_max: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let gs = &traj.model().service;
    let gr = &traj.model().patience;
    if !gs.has_density() || !gr.has_density() {
        return Err(FluidError::UnsupportedModel(
            "residual densities need density-bearing laws".into(),
        ));
    }
    let dt = traj.dt();
    let t = traj.time(j);
    let chi = traj.chi_col()[j];
    let varsigma = t - chi;
    let rate = &traj.model().rate;
    let cells = (z_max / dz).ceil() as usize;
    let mut b_ell = Vec::with_capacity(cells);
    let mut q_ell = Vec::with_capacity(cells);
    for m in 0..cells {
        let y = (m as f64 + 0.5) * dz;
        let mut bv = traj.initial().nu0.integrate(|x| {
            let s0 = gs.survival(x);
            if s0 > 0.0 {
                gs.density(x + t + y).unwrap_or(0.0) / s0
            } else {
                0.0
            }
        });
        for (i, dki) in traj.k_increments().iter().take(j).enumerate() {
            let u_mid = (i as f64 + 0.5) * dt;
            bv += dki * gs.density(y + t - u_mid).unwrap_or(0.0);
        }
        b_ell.push(bv);

        let mut qv = 0.0;
        if varsigma <= 0.0 {
            qv += integrate_band(&traj.initial().eta0, -varsigma, |x| {
                let s0 = gr.survival(x);
                if s0 > 0.0 {
                    gr.density(x + t + y).unwrap_or(0.0) / s0
                } else {
                    0.0
                }
            });
        }
        let s_lo = varsigma.max(0.0);
        let m0 = (s_lo / dt) as usize;
        for i in m0..j {
            let a = (i as f64 * dt).max(s_lo);
            let b = (i + 1) as f64 * dt;
            if b <= a {
                continue;
            }
            let u_mid = 0.5 * (a + b);
            qv += rate.rate(u_mid) * gr.density(y + t - u_mid).unwrap_or(0.0) * (b - a);
        }
        q_ell.push(qv);
    }
    Ok((b_ell, q_ell))
}

/// Maximum coupling residuals over a sample of `(t, z)` pairs. For each
/// pair the residual-time tail is compared against the elapsed-time measure
/// reconstructed at `t + z`:
/// `ν^ℓ_t(z,∞) = ν_{t+z}[z,∞)`, `η^ℓ_t(z,∞) = η_{t+z}[z, χ(t)+z]`.
#[derive(Debug, Clone, Default)]
pub struct CouplingReport {
    pub max_nu_residual: f64,
    pub max_eta_residual: f64,
    pub pairs: usize,
}

impl CouplingReport {
    pub fn max_residual(&self) -> f64 {
        self.max_nu_residual.max(self.max_eta_residual)
    }
}

/// Checks the coupling identities on the given grid indices and lags.
/// Every `t + z` must stay within the trajectory horizon.
pub fn check_coupling(traj: &Trajectory, time_indices: &[usize], lags: &[f64]) -> Result<CouplingReport> {
    let dt = traj.dt();
    let n = traj.len() - 1;
    let mut rep = CouplingReport::default();
    for &j in time_indices {
        for &z in lags {
            let zsteps = (z / dt).round() as usize;
            if j + zsteps > n {
                return Err(FluidError::Config(format!(
                    "coupling sample t+z = {} exceeds the horizon {}",
                    traj.time(j) + z,
                    traj.t_end()
                )));
            }
            let z_grid = zsteps as f64 * dt;
            let jz = j + zsteps;
            let nu_later = traj.nu_at(jz)?;
            let lhs_nu = nu_tail(traj, j, z_grid);
            let rhs_nu = nu_later.mass(Interval::closed(z_grid, nu_later.support_cap())?);
            rep.max_nu_residual = rep.max_nu_residual.max((lhs_nu - rhs_nu).abs());

            let eta_later = traj.eta_at(jz)?;
            let lhs_eta = eta_tail(traj, j, z_grid);
            let chi_t = traj.chi_col()[j];
            let rhs_eta = eta_later.mass(Interval::closed(z_grid, chi_t + z_grid)?);
            rep.max_eta_residual = rep.max_eta_residual.max((lhs_eta - rhs_eta).abs());
            rep.pairs += 1;
        }
    }
    Ok(rep)
}

/// Evenly spread sample indices and lags covering `[0, T/2]` each, so that
/// every `t + z` stays on the trajectory.
pub fn default_coupling_grid(traj: &Trajectory, count: usize) -> (Vec<usize>, Vec<f64>) {
    let n = traj.len() - 1;
    let half = n / 2;
    let stride = (half / count.max(1)).max(1);
    let times: Vec<usize> = (0..count).map(|i| (i * stride).min(half)).collect();
    let lags: Vec<f64> = (1..=count).map(|i| (i * stride) as f64 * traj.dt()).collect();
    (times, lags)
}

/// CSV rows `(t, z, nu_tail, eta_tail, nu_residual, eta_residual)`.
pub fn coupling_csv(traj: &Trajectory, time_indices: &[usize], lags: &[f64]) -> Result<String> {
    let dt = traj.dt();
    let n = traj.len() - 1;
    let mut out = String::from("t,z,nu_tail,eta_tail,nu_residual,eta_residual\n");
    for &j in time_indices {
        for &z in lags {
            let zsteps = (z / dt).round() as usize;
            if j + zsteps > n {
                continue;
            }
            let z_grid = zsteps as f64 * dt;
            let jz = j + zsteps;
            let lhs_nu = nu_tail(traj, j, z_grid);
            let nu_later = traj.nu_at(jz)?;
            let rhs_nu = nu_later.mass(Interval::closed(z_grid, nu_later.support_cap())?);
            let lhs_eta = eta_tail(traj, j, z_grid);
            let eta_later = traj.eta_at(jz)?;
            let rhs_eta =
                eta_later.mass(Interval::closed(z_grid, traj.chi_col()[j] + z_grid)?);
            out.push_str(&format!(
                "{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e}\n",
                traj.time(j),
                z_grid,
                lhs_nu,
                lhs_eta,
                (lhs_nu - rhs_nu).abs(),
                (lhs_eta - rhs_eta).abs()
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arrival::ArrivalRate;
    use crate::distributions::Distribution;
    use crate::elapsed::{solve, InitialCondition, QueueModel, SolveParams};

    fn mmn_traj(lam: f64, dt: f64, t_end: f64) -> Trajectory {
        let model = QueueModel {
            rate: ArrivalRate::constant(lam).unwrap(),
            service: Distribution::exponential(1.0).unwrap(),
            patience: Distribution::exponential(0.5).unwrap(),
        };
        solve(&model, &InitialCondition::empty(dt), &SolveParams { dt, t_end, ..Default::default() })
            .unwrap()
    }

    fn layered_traj(dt: f64, t_end: f64) -> Trajectory {
        let gr = Distribution::exponential(0.5).unwrap();
        let gs = Distribution::exponential(1.0).unwrap();
        let cells = (0.5 / dt).round() as usize;
        let eta0 = GridMeasure::from_density_fn(dt, cells, |x| 2.0 * gr.survival(x)).unwrap();
        let nu_cells = (12.0 / dt) as usize;
        let raw = GridMeasure::from_density_fn(dt, nu_cells, |x| gs.survival(x)).unwrap();
        let scale = 1.0 / raw.total_mass();
        let nu0 = GridMeasure::from_density_fn(dt, nu_cells, |x| scale * gs.survival(x)).unwrap();
        let x0 = nu0.total_mass() + eta0.total_mass();
        let model = QueueModel {
            rate: ArrivalRate::constant(2.0).unwrap(),
            service: gs,
            patience: gr,
        };
        solve(
            &model,
            &InitialCondition { eta0, nu0, x0 },
            &SolveParams { dt, t_end, ..Default::default() },
        )
        .unwrap()
    }

    #[test]
    fn empty_start_tails_vanish_at_zero() {
        let traj = mmn_traj(2.0, 1e-2, 2.0);
        assert_eq!(nu_tail(&traj, 0, 0.0), 0.0);
        assert_eq!(eta_tail(&traj, 0, 0.0), 0.0);
    }

    #[test]
    fn initial_residual_tail_matches_quadrature() {
        // t = 0: ν^ℓ_0(z,∞) = ∫ Ḡ^s(y+z)/Ḡ^s(y) ν_0(dy), pure quadrature.
        let traj = layered_traj(1e-2, 1.0);
        let gs = traj.model().service.clone();
        for &z in &[0.0, 0.3, 1.1, 2.7] {
            let lhs = nu_tail(&traj, 0, z);
            let rhs = traj
                .initial()
                .nu0
                .integrate(|y| gs.survival(y + z) / gs.survival(y));
            assert!((lhs - rhs).abs() < 1e-12, "z={z}: {lhs} vs {rhs}");
        }
        // η side at t = 0, against the (mr42) form with ς(0) = −χ(0).
        let gr = traj.model().patience.clone();
        let chi0 = traj.chi_col()[0];
        assert!(chi0 > 0.0);
        for &z in &[0.0, 0.4, 1.5] {
            let lhs = eta_tail(&traj, 0, z);
            let rhs = integrate_band(&traj.initial().eta0, chi0, |y| {
                gr.survival(y + z) / gr.survival(y)
            });
            assert!((lhs - rhs).abs() < 1e-8, "z={z}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn exponential_service_tail_factorizes() {
        // Memorylessness: ν^ℓ_t(z,∞) = e^{−z}·ν^ℓ_t(0,∞).
        let traj = mmn_traj(2.0, 1e-2, 4.0);
        let j = traj.len() - 1;
        let base = nu_tail(&traj, j, 0.0);
        for &z in &[0.2, 0.9, 2.3] {
            let lhs = nu_tail(&traj, j, z);
            assert!(
                (lhs - (-z).exp() * base).abs() < 1e-10,
                "z={z}: {lhs} vs {}",
                (-z).exp() * base
            );
        }
    }

    #[test]
    fn tail_at_zero_is_b_and_q() {
        let traj = layered_traj(1e-2, 3.0);
        for j in [0, 50, 150, 299] {
            let nu0_tail = nu_tail(&traj, j, 0.0);
            assert!(
                (nu0_tail - traj.b_col()[j]).abs() < 1e-6,
                "j={j}: nu tail {} vs B {}",
                nu0_tail,
                traj.b_col()[j]
            );
            let eta0_tail = eta_tail(&traj, j, 0.0);
            assert!(
                (eta0_tail - traj.q_col()[j]).abs() < 5e-3,
                "j={j}: eta tail {} vs Q {}",
                eta0_tail,
                traj.q_col()[j]
            );
        }
    }

    #[test]
    fn varsigma_monotone_and_initial_value() {
        let traj = layered_traj(1e-2, 3.0);
        // ς(0) = −inf{x : η_0[0,x) ≥ X(0) − ν_0[0,H^s)}.
        let want = traj
            .initial()
            .eta0
            .quantile_age(traj.initial().x0 - traj.initial().nu0.total_mass())
            .unwrap();
        let slice = residual_slice(&traj, 0, 0.05, 10.0).unwrap();
        assert!((slice.varsigma + want).abs() < 1e-9, "{} vs −{}", slice.varsigma, want);
        let mut prev = slice.varsigma;
        for j in (0..traj.len()).step_by(25) {
            let s = traj.time(j) - traj.chi_col()[j];
            assert!(s >= prev - 1e-9, "varsigma non-decreasing");
            assert!(s <= traj.time(j) + 1e-12);
            prev = s;
        }
    }

    #[test]
    fn residual_slice_masses() {
        let traj = layered_traj(1e-2, 3.0);
        let j = 200;
        let slice = residual_slice(&traj, j, 0.02, 40.0).unwrap();
        assert!(
            (slice.nu_res.total_mass() - traj.b_col()[j]).abs() < 1e-6,
            "nu_res mass {} vs B {}",
            slice.nu_res.total_mass(),
            traj.b_col()[j]
        );
        assert!(
            (slice.eta_res.total_mass() - traj.q_col()[j]).abs() < 5e-3,
            "eta_res mass {} vs Q {}",
            slice.eta_res.total_mass(),
            traj.q_col()[j]
        );
        // Mean residual work in service is finite and nonnegative.
        let work = slice.nu_res.integrate(|z| z);
        assert!(work.is_finite() && work >= 0.0);
    }

    #[test]
    fn coupling_identity_on_sample_grid() {
        let traj = mmn_traj(2.0, 5e-3, 6.0);
        let (times, lags) = default_coupling_grid(&traj, 10);
        let rep = check_coupling(&traj, &times, &lags).unwrap();
        assert_eq!(rep.pairs, 100);
        assert!(rep.max_nu_residual < 5e-3, "nu coupling {}", rep.max_nu_residual);
        assert!(rep.max_eta_residual < 5e-3, "eta coupling {}", rep.max_eta_residual);
    }

    #[test]
    fn coupling_identity_layered_start() {
        let traj = layered_traj(5e-3, 4.0);
        let (times, lags) = default_coupling_grid(&traj, 8);
        let rep = check_coupling(&traj, &times, &lags).unwrap();
        assert!(rep.max_residual() < 5e-3, "coupling {}", rep.max_residual());
    }

    #[test]
    fn residual_densities_integrate_to_tails() {
        // The 1e−6 tail-consistency contract is stated at the production
        // resolution (both the trajectory step and the residual grid).
        let traj = layered_traj(1e-3, 1.5);
        let j = 1000;
        let dz = 1e-3;
        let z_max = 40.0;
        let (b_ell, q_ell) = residual_densities(&traj, j, dz, z_max).unwrap();
        // Cumulative tail of the density vs the exact tail function.
        for &zi in &[0usize, 1000, 5000] {
            let z = zi as f64 * dz;
            let num_tail: f64 = b_ell[zi..].iter().sum::<f64>() * dz;
            let exact = nu_tail(&traj, j, z);
            assert!(
                (num_tail - exact).abs() < 1e-6 * (1.0 + exact),
                "b_ell tail at z={z}: {num_tail} vs {exact}"
            );
            let num_tail_q: f64 = q_ell[zi..].iter().sum::<f64>() * dz;
            let exact_q = eta_tail(&traj, j, z);
            assert!(
                (num_tail_q - exact_q).abs() < 1e-5 * (1.0 + exact_q),
                "q_ell tail at z={z}: {num_tail_q} vs {exact_q}"
            );
        }
        // Exponential service: b_ℓ(t,y) = e^{−y}·B(t).
        for &zi in &[100usize, 2000] {
            let y = (zi as f64 + 0.5) * dz;
            let expect = (-y).exp() * traj.b_col()[j];
            assert!(
                (b_ell[zi] - expect).abs() < 1e-4,
                "b_ell({y}) = {} vs {expect}",
                b_ell[zi]
            );
        }
    }

    #[test]
    fn q_ell_vanishes_when_queue_empty() {
        let traj = mmn_traj(0.5, 1e-2, 3.0);
        let j = 250;
        assert_eq!(traj.q_col()[j], 0.0);
        let (_, q_ell) = residual_densities(&traj, j, 0.05, 10.0).unwrap();
        assert!(q_ell.iter().all(|v| *v == 0.0));
    }
}
