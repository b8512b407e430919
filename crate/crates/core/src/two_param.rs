//! The two-parameter (density) view of a fluid trajectory.
//!
//! From an elapsed-time trajectory this module derives the age densities
//! `b(t,·)` (in service), `q̃(t,·)` (potential queue), `q(t,·)` (real
//! queue), the queue boundary `w(t) = χ(t)`, and the total service and
//! abandonment rates `σ(t)`, `α(t)`. It verifies the two-parameter model
//! clause by clause, and rebuilds an elapsed-time model from two-parameter
//! initial data (the converse identification `η_0(dx) = q̃(0,x) dx`,
//! `ν_0(dx) = b(0,x) dx`).
//!
//! The view requires both lifetime laws to have densities; with atomic laws
//! the two-parameter densities do not exist and every operation here
//! returns an unsupported-model error.

use crate::arrival::ArrivalRate;
use crate::distributions::Distribution;
use crate::elapsed::{
    abandonment_f8, solve, InitialCondition, QueueModel, SolveParams, Trajectory,
};
use crate::error::{FluidError, Result};
use crate::measures::GridMeasure;

/// One time slice of the two-parameter model.
///
/// Densities are sampled at cell midpoints `(m+½)·da` on the same grid the
/// measures use. The single-point value `q(t, w(t))` is recorded separately:
/// a density value at one point carries no mass and is excluded from the
/// integral checks.
#[derive(Debug, Clone)]
pub struct TwoParamSlice {
    pub t: f64,
    pub da: f64,
    /// Service age density b(t, ·).
    pub b: Vec<f64>,
    /// Potential-queue age density q̃(t, ·).
    pub q_tilde: Vec<f64>,
    /// Real-queue age density q(t, ·) (cell-midpoint convention at the
    /// boundary cell).
    pub q: Vec<f64>,
    /// Queue boundary w(t) = χ(t).
    pub w: f64,
    /// Total service rate σ(t) = ∫ b·h^s.
    pub sigma: f64,
    /// Total abandonment rate α(t) = ∫ q·h^r.
    pub alpha: f64,
    /// The boundary value q(t, w(t)) from the regime branches.
    pub q_boundary_value: f64,
    /// Exact `∫_0^{w} q̃` with the partial boundary cell (the slice's queue
    /// mass Q(t,∞)).
    pub queue_mass: f64,
}

fn require_densities(model: &QueueModel) -> Result<()> {
    if !model.service.has_density() || !model.patience.has_density() {
        return Err(FluidError::UnsupportedModel(
            "the two-parameter view requires service and patience densities".into(),
        ));
    }
    Ok(())
}

/// b(t, y) from the trajectory: `Ḡ^s(y)·κ(t−y)` below age t, the thinned
/// initial density above.
pub fn b_density(traj: &Trajectory, j: usize, y: f64) -> f64 {
    let dt = traj.dt();
    let t = traj.time(j);
    let gs = &traj.model().service;
    if y < t {
        let m = (y / dt) as usize;
        if m >= j {
            return 0.0;
        }
        gs.survival(y) * traj.k_increments()[j - 1 - m] / dt
    } else {
        let age0 = y - t;
        let s0 = gs.survival(age0);
        if s0 <= 0.0 {
            return 0.0;
        }
        grid_density(&traj.initial().nu0, age0) * gs.survival(y) / s0
    }
}

/// q̃(t, y): `Ḡ^r(y)·λ(t−y)` below age t, the thinned initial density above.
pub fn q_tilde_density(traj: &Trajectory, j: usize, y: f64) -> f64 {
    let t = traj.time(j);
    let gr = &traj.model().patience;
    if y < t {
        gr.survival(y) * traj.model().rate.rate(t - y)
    } else {
        let age0 = y - t;
        let s0 = gr.survival(age0);
        if s0 <= 0.0 {
            return 0.0;
        }
        grid_density(&traj.initial().eta0, age0) * gr.survival(y) / s0
    }
}

fn grid_density(m: &GridMeasure, x: f64) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    let i = (x / m.grid_width()) as usize;
    m.density_cells().get(i).copied().unwrap_or(0.0)
}

/// Derives the two-parameter slice at grid index `j`.
pub fn slice_from_trajectory(traj: &Trajectory, j: usize) -> Result<TwoParamSlice> {
    require_densities(traj.model())?;
    if !traj.initial().nu0.atoms().is_empty() || !traj.initial().eta0.atoms().is_empty() {
        return Err(FluidError::UnsupportedModel(
            "two-parameter densities need diffuse initial measures".into(),
        ));
    }
    let dt = traj.dt();
    let t = traj.time(j);
    let model = traj.model();
    let gs = &model.service;
    let gr = &model.patience;

    let b_extent = t + traj.initial().nu0.support_cap();
    let b_extent = b_extent.min(gs.age_horizon(crate::distributions::SURVIVAL_FLOOR) + t);
    let nb = (b_extent / dt).ceil() as usize;
    let q_extent = t + traj.initial().eta0.support_cap();
    let q_extent = q_extent.min(gr.age_horizon(crate::distributions::SURVIVAL_FLOOR) + t);
    let nq = (q_extent / dt).ceil() as usize;

    let b: Vec<f64> = (0..nb).map(|m| b_density(traj, j, (m as f64 + 0.5) * dt)).collect();
    let q_tilde: Vec<f64> =
        (0..nq).map(|m| q_tilde_density(traj, j, (m as f64 + 0.5) * dt)).collect();

    let w = traj.chi_col()[j];
    let q: Vec<f64> = q_tilde
        .iter()
        .enumerate()
        .map(|(m, v)| if (m as f64 + 0.5) * dt < w { *v } else { 0.0 })
        .collect();

    let hs_end = gs.support_end();
    let sigma: f64 = b
        .iter()
        .enumerate()
        .map(|(m, v)| {
            let y = (m as f64 + 0.5) * dt;
            if *v > 0.0 && y < hs_end {
                v * gs.hazard(y).unwrap_or(0.0) * dt
            } else {
                0.0
            }
        })
        .sum();
    let hr_end = gr.support_end();
    let alpha: f64 = q
        .iter()
        .enumerate()
        .map(|(m, v)| {
            let y = (m as f64 + 0.5) * dt;
            if *v > 0.0 && y < hr_end {
                v * gr.hazard(y).unwrap_or(0.0) * dt
            } else {
                0.0
            }
        })
        .sum();

    // Exact queue mass: full cells below w plus the partial boundary cell.
    let mut queue_mass = 0.0;
    for (m, v) in q_tilde.iter().enumerate() {
        let lo = m as f64 * dt;
        let hi = (m + 1) as f64 * dt;
        if hi <= w {
            queue_mass += v * dt;
        } else if lo < w {
            queue_mass += v * (w - lo);
        } else {
            break;
        }
    }

    let lam = model.rate.rate(t);
    let q_boundary_value = if traj.b_col()[j] >= 1.0 - 1e-8 { lam - lam.min(sigma) } else { 0.0 };

    Ok(TwoParamSlice { t, da: dt, b, q_tilde, q, w, sigma, alpha, q_boundary_value, queue_mass })
}

// =========================================================================
// Clause-by-clause verification
// =========================================================================

/// Maximum residuals of the two-parameter model clauses over the sampled
/// grid. Evolution clauses compare exact transport factors; boundary-rate
/// clauses compare the step-average entry rate against the regime branch
/// (steps straddling a regime switch are skipped — the branch form only
/// holds almost everywhere, and a step across the switch averages two
/// branches).
#[derive(Debug, Clone, Default)]
pub struct WhittReport {
    pub w2_max: f64,
    pub w3_max: f64,
    pub w7_max: f64,
    pub w8_max: f64,
    pub w9_max: f64,
    pub w10_max: f64,
    /// max |∫ b(t,·) − B(t)| over sampled times.
    pub b_mass_max: f64,
    /// max |Q_slice(t) − Q(t)|.
    pub q_mass_max: f64,
    /// Number of regime-switch steps excluded from (w7)/(w8).
    pub switch_steps_skipped: usize,
}

impl WhittReport {
    pub fn max_residual(&self) -> f64 {
        [self.w2_max, self.w3_max, self.w7_max, self.w8_max, self.w9_max, self.w10_max]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Regime {
    Under,
    Critical,
    Over,
}

fn regime(x: f64, band: f64) -> Regime {
    if x < 1.0 - band {
        Regime::Under
    } else if x > 1.0 + band {
        Regime::Over
    } else {
        Regime::Critical
    }
}

/// Runs the clause checks on a trajectory.
pub fn check_whitt(traj: &Trajectory) -> Result<WhittReport> {
    require_densities(traj.model())?;
    let dt = traj.dt();
    let n = traj.len() - 1;
    let model = traj.model();
    let mut rep = WhittReport::default();

    // --- (w2), (w3): fundamental evolution equations on lattice-aligned
    // (t, x, u) triples ---
    let t_stride = (n / 48).max(1);
    let x_stride = (n / 64).max(1);
    let u_steps = [1usize, 16, 128];
    for j in (0..=n).step_by(t_stride) {
        for &du in &u_steps {
            if j + du > n {
                continue;
            }
            for m in (0..j.max(8)).step_by(x_stride) {
                let x = (m as f64 + 0.5) * dt;
                let u = du as f64 * dt;
                let gs_x = model.service.survival(x);
                let gs_xu = model.service.survival(x + u);
                if gs_x > 0.0 {
                    let lhs = b_density(traj, j + du, x + u);
                    let rhs = b_density(traj, j, x) * gs_xu / gs_x;
                    rep.w2_max = rep.w2_max.max((lhs - rhs).abs());
                }
                let gr_x = model.patience.survival(x);
                let gr_xu = model.patience.survival(x + u);
                if gr_x > 0.0 {
                    let lhs = q_tilde_density(traj, j + du, x + u);
                    let rhs = q_tilde_density(traj, j, x) * gr_xu / gr_x;
                    rep.w3_max = rep.w3_max.max((lhs - rhs).abs());
                }
            }
        }
    }

    // --- boundary rates (w7)/(w8)/(w9) and mass identities ---
    let band = 1e-8;
    let check_stride = (n / 400).max(1);
    for j in (1..=n).step_by(check_stride) {
        let slice = slice_from_trajectory(traj, j)?;
        let t = traj.time(j);
        let lam = model.rate.rate(t);
        let reg = regime(traj.x_col()[j], band);
        let reg_prev = regime(traj.x_col()[j - 1], band);
        if reg == reg_prev {
            // (w7): entry rate branch.
            let branch = match reg {
                Regime::Under => lam,
                Regime::Critical => lam.min(slice.sigma),
                Regime::Over => slice.sigma,
            };
            rep.w7_max = rep.w7_max.max((traj.kappa_col()[j] - branch).abs());
            // (w8): queue-entry rate where the vector determines it.
            if traj.chi_col()[j] > dt {
                rep.w8_max = rep.w8_max.max((slice.q[0] - lam).abs());
            } else if reg == Regime::Under {
                rep.w8_max = rep.w8_max.max(slice.q[0].abs());
            }
        } else {
            rep.switch_steps_skipped += 1;
        }
        // (w9): q̃(t, 0) = λ(t), cell-midpoint convention.
        rep.w9_max = rep.w9_max.max((slice.q_tilde[0] - lam).abs());
        // Slice mass consistency.
        let b_mass: f64 = slice.b.iter().sum::<f64>() * dt;
        rep.b_mass_max = rep.b_mass_max.max((b_mass - traj.b_col()[j]).abs());
        rep.q_mass_max = rep.q_mass_max.max((slice.queue_mass - traj.q_col()[j]).abs());
    }

    // --- (w10): cumulative queue balance with α integrated by the hazard
    // route (the trajectory's R is the Stieltjes route; their agreement is
    // the separate dual check) ---
    let r_hazard = abandonment_f8(
        &traj.initial().eta0,
        &model.patience,
        &model.rate,
        traj.chi_col(),
        dt,
    )?;
    let q0 = traj.initial().queue_mass();
    for j in (1..=n).step_by(check_stride) {
        let slice = slice_from_trajectory(traj, j)?;
        let e = traj.arrivals(j);
        // K(t) = ∫_0^t b(s,0) ds holds exactly (b(s,0) = κ(s)).
        let resid = (e + q0 - slice.queue_mass - traj.k_col()[j] - r_hazard[j]).abs();
        rep.w10_max = rep.w10_max.max(resid);
    }
    Ok(rep)
}

// =========================================================================
// Two-parameter initial data → measure-valued model
// =========================================================================

/// Builds and solves an elapsed-time model from two-parameter initial data:
/// `η_0(dx) = q(0,x) dx`, `ν_0(dx) = b(0,x) dx`,
/// `X(0) = ∫ b(0,·) + ∫ q(0,·)`. The input densities must form a valid S_0
/// triple (real queue equal to potential queue at time zero).
pub fn measures_from_two_param(
    b0: &GridMeasure,
    q0: &GridMeasure,
    rate: &ArrivalRate,
    gs: &Distribution,
    gr: &Distribution,
    params: &SolveParams,
) -> Result<Trajectory> {
    if !gs.has_density() || !gr.has_density() {
        return Err(FluidError::UnsupportedModel(
            "two-parameter initial data needs density-bearing laws".into(),
        ));
    }
    if !b0.atoms().is_empty() || !q0.atoms().is_empty() {
        return Err(FluidError::UnsupportedModel("two-parameter initial data must be densities".into()));
    }
    let x0 = b0.total_mass() + q0.total_mass();
    let ic = InitialCondition { eta0: q0.clone(), nu0: b0.clone(), x0 };
    let check = crate::elapsed::validate_initial(&ic);
    if !check.is_ok() {
        return Err(FluidError::Config(format!(
            "two-parameter initial data is not an S_0 triple: {}",
            check.describe()
        )));
    }
    let model = QueueModel { rate: rate.clone(), service: gs.clone(), patience: gr.clone() };
    solve(&model, &ic, params)
}

/// Heatmap rows `(t, x, b, q_tilde, q)` for external plotting.
pub fn heatmap_csv(traj: &Trajectory, time_stride: usize, age_stride: usize) -> Result<String> {
    let mut out = String::from("t,x,b,q_tilde,q\n");
    let dt = traj.dt();
    for j in (0..traj.len()).step_by(time_stride.max(1)) {
        let slice = slice_from_trajectory(traj, j)?;
        let cells = slice.b.len().max(slice.q_tilde.len());
        for m in (0..cells).step_by(age_stride.max(1)) {
            let x = (m as f64 + 0.5) * dt;
            out.push_str(&format!(
                "{:.11e},{:.11e},{:.11e},{:.11e},{:.11e}\n",
                slice.t,
                x,
                slice.b.get(m).copied().unwrap_or(0.0),
                slice.q_tilde.get(m).copied().unwrap_or(0.0),
                slice.q.get(m).copied().unwrap_or(0.0),
            ));
        }
    }
    Ok(out)
}
