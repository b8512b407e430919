//! The elapsed-time reference solver.
//!
//! State is the triple `(η_t, ν_t, X(t))`: η_t is the potential-queue age
//! measure, ν_t the in-service age measure. The potential-queue measure is
//! explicit in the inputs (the arrival layer plus the thinned initial
//! content), while ν_t, the departure process D and the abandonment process
//! R are convolution functionals of the stored histories of K (cumulative
//! entries into service) and χ (frontier waiting time). Each time step
//! solves a small scalar fixed point for the K-increment:
//!
//! 1. predict the entry rate from the left state,
//! 2. evaluate X(t+Δt) from the total-mass balance,
//! 3. set B = min(X, 1), recover K from the server balance,
//! 4. update χ from the frontier equation and repeat until the K-increment
//!    settles.
//!
//! D uses the Stieltjes representation (initial-content term plus
//! `∫ G^s(t−s) dK(s)`), R the two-term Stieltjes representation driven by
//! the χ history, so laws without densities are handled natively. All
//! balance identities hold to machine precision by construction; the tests
//! assert them independently.

use crate::arrival::ArrivalRate;
use crate::distributions::Distribution;
use crate::error::{FluidError, Result};
use crate::lattice::Lattice;
use crate::measures::GridMeasure;

/// Tolerance on the S_0 membership identities.
pub const S0_TOL: f64 = 1e-9;

/// Quantile slack shared with [`GridMeasure::quantile_age`].
const QUANTILE_SLACK: f64 = 1e-12;

// =========================================================================
// Model bundle and initial condition
// =========================================================================

/// Arrival rate plus service and patience laws: the data of one queue.
#[derive(Debug, Clone)]
pub struct QueueModel {
    pub rate: ArrivalRate,
    pub service: Distribution,
    pub patience: Distribution,
}

/// Initial state `(η_0, ν_0, X(0))`.
#[derive(Debug, Clone)]
pub struct InitialCondition {
    pub eta0: GridMeasure,
    pub nu0: GridMeasure,
    pub x0: f64,
}

impl InitialCondition {
    pub fn empty(da: f64) -> Self {
        Self { eta0: GridMeasure::empty(da), nu0: GridMeasure::empty(da), x0: 0.0 }
    }

    /// Initial real-queue content `(X(0) − 1)^+`.
    pub fn queue_mass(&self) -> f64 {
        (self.x0 - 1.0).max(0.0)
    }
}

/// Residuals of the two S_0 membership identities.
#[derive(Debug, Clone, Copy)]
pub struct InitialCheck {
    /// `|1 − ν_0[0,H^s) − (1 − X(0))^+|`
    pub nonidling_residual: f64,
    /// `|ν_0[0,H^s) + η_0[0,H^r) − X(0)|`
    pub mass_residual: f64,
}

impl InitialCheck {
    pub fn is_ok(&self) -> bool {
        self.nonidling_residual <= S0_TOL && self.mass_residual <= S0_TOL
    }

    pub fn describe(&self) -> String {
        if self.is_ok() {
            "ok".to_string()
        } else {
            format!(
                "S_0 violation: non-idling identity off by {:.3e}, mass identity off by {:.3e}",
                self.nonidling_residual, self.mass_residual
            )
        }
    }
}

/// Checks membership of `(η_0, ν_0, X(0))` in S_0.
pub fn validate_initial(ic: &InitialCondition) -> InitialCheck {
    let nu_mass = ic.nu0.total_mass();
    let eta_mass = ic.eta0.total_mass();
    InitialCheck {
        nonidling_residual: (1.0 - nu_mass - (1.0 - ic.x0).max(0.0)).abs(),
        mass_residual: (nu_mass + eta_mass - ic.x0).abs(),
    }
}

/// Stationary in-service age profile: density proportional to `Ḡ^s`,
/// normalized to total mass exactly 1 on the grid. Cells whose midpoint
/// lies at or beyond the right support are dropped (their sliver of mass is
/// absorbed by the normalization), so the profile is always a valid aging
/// input for finite-support laws.
pub fn equilibrium_age_profile(gs: &Distribution, da: f64) -> Result<GridMeasure> {
    let horizon = gs.age_horizon(crate::distributions::SURVIVAL_FLOOR);
    let cells = (horizon / da).ceil() as usize;
    let mut density = Vec::with_capacity(cells);
    for m in 0..cells {
        let lo = m as f64 * da;
        if gs.survival(lo + 0.5 * da) <= 0.0 {
            break;
        }
        density.push(gs.survival_integral(lo, lo + da) / da);
    }
    let total: f64 = density.iter().sum::<f64>() * da;
    if total <= 0.0 {
        return Err(FluidError::InvalidInput("service law has no mass above the grid".into()));
    }
    for d in &mut density {
        *d /= total;
    }
    GridMeasure::new(da, density, Vec::new())
}

/// Numerical parameters of a solve.
#[derive(Debug, Clone)]
pub struct SolveParams {
    pub dt: f64,
    pub t_end: f64,
    /// Convergence tolerance on the per-step K-increment.
    pub fp_tol: f64,
    /// Iteration cap for the per-step fixed point.
    pub max_fp_iters: usize,
    /// Optional coarse-memory approximation: service-entry history older
    /// than this age is dropped from the departure convolution and counted
    /// as fully departed. Exact to within `Ḡ^s(horizon)·K(t)` — negligible
    /// once the horizon reaches the survival floor of the service law —
    /// and an approximation for shorter horizons.
    pub history_horizon: Option<f64>,
}

impl Default for SolveParams {
    fn default() -> Self {
        Self { dt: 1e-3, t_end: 30.0, fp_tol: 1e-10, max_fp_iters: 50, history_horizon: None }
    }
}

// =========================================================================
// Trajectory and per-time state
// =========================================================================

/// Full state at one time, including the reconstructed measures.
#[derive(Debug, Clone)]
pub struct FluidState {
    pub t: f64,
    pub eta: GridMeasure,
    pub nu: GridMeasure,
    pub x: f64,
    pub b: f64,
    pub q: f64,
    pub k: f64,
    pub d: f64,
    pub r: f64,
    pub chi: f64,
    pub kappa: f64,
}

/// Solution on the uniform time grid `t_j = j·Δt`.
///
/// Scalar columns are stored per step; the measures η_t and ν_t are
/// reconstructed on demand from the inputs and the K history (storing them
/// per step would be quadratic in memory).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub(crate) dt: f64,
    pub(crate) x: Vec<f64>,
    pub(crate) b: Vec<f64>,
    pub(crate) q: Vec<f64>,
    pub(crate) k: Vec<f64>,
    pub(crate) d: Vec<f64>,
    pub(crate) r: Vec<f64>,
    pub(crate) chi: Vec<f64>,
    pub(crate) kappa: Vec<f64>,
    /// K-increments per step (`kappa[j+1]·dt`).
    pub(crate) dk: Vec<f64>,
    pub(crate) model: QueueModel,
    pub(crate) ic: InitialCondition,
}

impl Trajectory {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of grid points (steps + 1).
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn time(&self, j: usize) -> f64 {
        j as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        (self.len() - 1) as f64 * self.dt
    }

    pub fn x_col(&self) -> &[f64] {
        &self.x
    }
    pub fn b_col(&self) -> &[f64] {
        &self.b
    }
    pub fn q_col(&self) -> &[f64] {
        &self.q
    }
    pub fn k_col(&self) -> &[f64] {
        &self.k
    }
    pub fn d_col(&self) -> &[f64] {
        &self.d
    }
    pub fn r_col(&self) -> &[f64] {
        &self.r
    }
    pub fn chi_col(&self) -> &[f64] {
        &self.chi
    }
    pub fn kappa_col(&self) -> &[f64] {
        &self.kappa
    }
    pub fn k_increments(&self) -> &[f64] {
        &self.dk
    }
    pub fn model(&self) -> &QueueModel {
        &self.model
    }
    pub fn initial(&self) -> &InitialCondition {
        &self.ic
    }

    /// Cumulative arrivals E(t_j).
    pub fn arrivals(&self, j: usize) -> f64 {
        self.model.rate.cumulative(self.time(j))
    }

    /// Reconstructs η at grid index `j`.
    pub fn eta_at(&self, j: usize) -> Result<GridMeasure> {
        eta_at(&self.ic.eta0, &self.model.rate, &self.model.patience, self.time(j), self.dt)
    }

    /// Reconstructs ν at grid index `j` from the aged initial content plus
    /// the service-entry layer `Ḡ^s(x) dK(t−x)`.
    pub fn nu_at(&self, j: usize) -> Result<GridMeasure> {
        let t = self.time(j);
        let gs = &self.model.service;
        let aged = self.ic.nu0.age_and_thin(t, gs)?.rebin(self.dt)?;
        let mut density = vec![0.0f64; j];
        for (m, slot) in density.iter_mut().enumerate() {
            // Cell m holds the entries from step j−1−m, thinned by the exact
            // cell-average survival.
            let surv_avg = gs.survival_integral(m as f64 * self.dt, (m + 1) as f64 * self.dt) / self.dt;
            *slot = self.dk[j - 1 - m] * surv_avg / self.dt;
        }
        let layer = GridMeasure::new(self.dt, density, Vec::new())?;
        aged.add(&layer)
    }

    /// Full state (with measures) at grid index `j`.
    pub fn state_at(&self, j: usize) -> Result<FluidState> {
        Ok(FluidState {
            t: self.time(j),
            eta: self.eta_at(j)?,
            nu: self.nu_at(j)?,
            x: self.x[j],
            b: self.b[j],
            q: self.q[j],
            k: self.k[j],
            d: self.d[j],
            r: self.r[j],
            chi: self.chi[j],
            kappa: self.kappa[j],
        })
    }

    /// Density at age `x` of the time-cumulative service measure
    /// `∫_0^{t_j} ν_s(·) ds`, by direct trapezoidal accumulation of the
    /// per-time layer and aged densities.
    pub fn integrated_nu_density(&self, j: usize, x: f64) -> f64 {
        let gs = &self.model.service;
        let mut vals = Vec::with_capacity(j + 1);
        for sj in 0..=j {
            let s = self.time(sj);
            let mut dens = 0.0;
            if x < s {
                let m = (x / self.dt) as usize;
                if m < sj {
                    let surv_avg =
                        gs.survival_integral(m as f64 * self.dt, (m + 1) as f64 * self.dt) / self.dt;
                    dens += self.dk[sj - 1 - m] * surv_avg / self.dt;
                }
            } else {
                let y = x - s;
                let s0 = gs.survival(y);
                if s0 > 0.0 {
                    dens += density_of(&self.ic.nu0, y) * gs.survival(x) / s0;
                }
            }
            vals.push(dens);
        }
        trapezoid(&vals, self.dt)
    }

    /// Right-hand side of the cumulative-density representation
    /// `q_t(x) = Ḡ^s(x−) K((t−x)^+) + ∫_{[(x−t)^+, x)} Ḡ^s(x−)/Ḡ^s(y) ν_0(dy)`.
    pub fn qt_zu(&self, j: usize, x: f64) -> f64 {
        let t = self.time(j);
        let gs = &self.model.service;
        let sx = gs.survival_left(x);
        let k_at = |u: f64| -> f64 {
            if u <= 0.0 {
                return 0.0;
            }
            let i = (u / self.dt).min((self.len() - 1) as f64);
            let lo = i.floor() as usize;
            let frac = i - lo as f64;
            if lo + 1 < self.k.len() {
                self.k[lo] + frac * (self.k[lo + 1] - self.k[lo])
            } else {
                self.k[lo]
            }
        };
        let mut total = sx * k_at(t - x);
        let lo = (x - t).max(0.0);
        total += integrate_measure_band(&self.ic.nu0, lo, x, |y| {
            let s0 = gs.survival(y);
            if s0 > 0.0 {
                sx / s0
            } else {
                0.0
            }
        });
        total
    }

    /// Same as [`qt_zu`](Self::qt_zu) for the potential-queue side:
    /// `p_t(x) = Ḡ^r(x−) E((t−x)^+) + ∫_{[(x−t)^+, x)} Ḡ^r(x−)/Ḡ^r(y) η_0(dy)`.
    pub fn pt_zu(&self, j: usize, x: f64) -> f64 {
        let t = self.time(j);
        let gr = &self.model.patience;
        let sx = gr.survival_left(x);
        let mut total = sx * self.model.rate.cumulative((t - x).max(0.0));
        let lo = (x - t).max(0.0);
        total += integrate_measure_band(&self.ic.eta0, lo, x, |y| {
            let s0 = gr.survival(y);
            if s0 > 0.0 {
                sx / s0
            } else {
                0.0
            }
        });
        total
    }

    /// Density at age `x` of `∫_0^{t_j} η_s(·) ds` by direct accumulation.
    pub fn integrated_eta_density(&self, j: usize, x: f64) -> f64 {
        let gr = &self.model.patience;
        let rate = &self.model.rate;
        let mut vals = Vec::with_capacity(j + 1);
        for sj in 0..=j {
            let s = self.time(sj);
            let mut dens = 0.0;
            if x < s {
                dens += rate.rate(s - x) * gr.survival(x);
            } else {
                let y = x - s;
                let s0 = gr.survival(y);
                if s0 > 0.0 {
                    dens += density_of(&self.ic.eta0, y) * gr.survival(x) / s0;
                }
            }
            vals.push(dens);
        }
        trapezoid(&vals, self.dt)
    }

    /// D computed both ways: the hazard form (when G^s has a density) and
    /// the Stieltjes form.
    pub fn departure_dual(&self) -> DualSeries {
        let st = departure_mrd(&self.ic.nu0, &self.model.service, &self.dk, self.dt);
        let hz = departure_f80(&self.ic.nu0, &self.model.service, &self.dk, self.dt).ok();
        DualSeries::new(hz, st)
    }

    /// R computed both ways: the hazard form (when G^r has a density) and
    /// the Stieltjes form driven by the χ history.
    pub fn abandonment_dual(&self) -> DualSeries {
        let st =
            abandonment_mrq(&self.ic.eta0, &self.model.patience, &self.model.rate, &self.chi, self.dt);
        let hz =
            abandonment_f8(&self.ic.eta0, &self.model.patience, &self.model.rate, &self.chi, self.dt)
                .ok();
        DualSeries::new(hz, st)
    }

    /// CSV export with one row per grid time, 12 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,X,B,Q,K,D,R,chi,kappa\n");
        for j in 0..self.len() {
            out.push_str(&format!(
                "{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e}\n",
                self.time(j),
                self.x[j],
                self.b[j],
                self.q[j],
                self.k[j],
                self.d[j],
                self.r[j],
                self.chi[j],
                self.kappa[j]
            ));
        }
        out
    }
}

/// A process computed by two algebraic routes.
#[derive(Debug, Clone)]
pub struct DualSeries {
    /// Hazard-rate route (absent when the law has no density).
    pub hazard_form: Option<Vec<f64>>,
    /// Stieltjes route (always defined).
    pub stieltjes_form: Vec<f64>,
    /// `max_j |a_j − b_j| / (1 + b_j)` when both routes exist.
    pub max_rel_gap: Option<f64>,
}

impl DualSeries {
    fn new(hazard_form: Option<Vec<f64>>, stieltjes_form: Vec<f64>) -> Self {
        let max_rel_gap = hazard_form.as_ref().map(|hz| {
            hz.iter()
                .zip(&stieltjes_form)
                .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
                .fold(0.0f64, f64::max)
        });
        Self { hazard_form, stieltjes_form, max_rel_gap }
    }
}

// =========================================================================
// The explicit η formula
// =========================================================================

/// Evaluates η_t in closed form: the initial content aged and thinned by
/// `Ḡ^r(x+t)/Ḡ^r(x)` plus the arrival layer with density `λ(t−x) Ḡ^r(x)`
/// on `[0, t ∧ H^r)`. Needs no solver state.
pub fn eta_at(
    eta0: &GridMeasure,
    rate: &ArrivalRate,
    patience: &Distribution,
    t: f64,
    da: f64,
) -> Result<GridMeasure> {
    if t < 0.0 {
        return Err(FluidError::Domain(format!("eta_at: t must be >= 0, got {t}")));
    }
    let aged = eta0.age_and_thin(t, patience)?.rebin(da)?;
    let cells = (t / da).ceil() as usize;
    let mut density = vec![0.0f64; cells];
    for (m, slot) in density.iter_mut().enumerate() {
        let lo = m as f64 * da;
        let hi = ((m + 1) as f64 * da).min(t);
        if hi <= lo {
            break;
        }
        // Exact cell mass of the survival factor, midpoint arrival rate.
        let surv_mass = patience.survival_integral(lo, hi);
        if surv_mass == 0.0 {
            continue;
        }
        *slot = rate.rate(t - 0.5 * (lo + hi)) * surv_mass / da;
    }
    let layer = GridMeasure::new(da, density, Vec::new())?;
    aged.add(&layer)
}

// =========================================================================
// Internal: tracked initial-content cells
// =========================================================================

/// The cells (and atoms) of an initial measure together with the survival
/// values the aging formulas divide by. `cdf_at` caches `G(y_mid + t)` at
/// the current solver time so each step costs one CDF evaluation per cell.
struct InitTracker {
    y_lo: Vec<f64>,
    width: Vec<f64>,
    y_mid: Vec<f64>,
    mass0: Vec<f64>,
    surv0: Vec<f64>,
    cdf0: Vec<f64>,
    cdf_at: Vec<f64>,
}

impl InitTracker {
    fn build(m: &GridMeasure, law: &Distribution, label: &str) -> Result<Self> {
        let da = m.grid_width();
        let mut t = InitTracker {
            y_lo: Vec::new(),
            width: Vec::new(),
            y_mid: Vec::new(),
            mass0: Vec::new(),
            surv0: Vec::new(),
            cdf0: Vec::new(),
            cdf_at: Vec::new(),
        };
        let mut push = |lo: f64, w: f64, mid: f64, mass: f64| -> Result<()> {
            let s = law.survival(mid);
            if s <= 0.0 {
                return Err(FluidError::InvalidInput(format!(
                    "{label} has mass at age {mid} beyond the right support of its law"
                )));
            }
            t.y_lo.push(lo);
            t.width.push(w);
            t.y_mid.push(mid);
            t.mass0.push(mass);
            t.surv0.push(s);
            t.cdf0.push(law.cdf(mid));
            t.cdf_at.push(law.cdf(mid));
            Ok(())
        };
        for (i, d) in m.density_cells().iter().enumerate() {
            if *d > 0.0 {
                let lo = i as f64 * da;
                push(lo, da, lo + 0.5 * da, d * da)?;
            }
        }
        for (loc, mass) in m.atoms() {
            push(*loc, 0.0, *loc, *mass)?;
        }
        // Atoms interleave after cells; keep everything sorted by y.
        let mut order: Vec<usize> = (0..t.y_lo.len()).collect();
        order.sort_by(|a, b| t.y_lo[*a].partial_cmp(&t.y_lo[*b]).unwrap());
        let perm = |v: &Vec<f64>| -> Vec<f64> { order.iter().map(|&i| v[i]).collect() };
        Ok(InitTracker {
            y_lo: perm(&t.y_lo),
            width: perm(&t.width),
            y_mid: perm(&t.y_mid),
            mass0: perm(&t.mass0),
            surv0: perm(&t.surv0),
            cdf0: perm(&t.cdf0),
            cdf_at: perm(&t.cdf_at),
        })
    }

    fn len(&self) -> usize {
        self.y_lo.len()
    }
}

// =========================================================================
// The solver
// =========================================================================

/// Forward time-stepper producing a [`Trajectory`].
pub struct Solver {
    model: QueueModel,
    ic: InitialCondition,
    params: SolveParams,
    lat: Lattice,
    steps: usize,
    j: usize,
    // columns
    x: Vec<f64>,
    b: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    d: Vec<f64>,
    r: Vec<f64>,
    chi: Vec<f64>,
    kappa: Vec<f64>,
    dk: Vec<f64>,
    // trackers
    eq: InitTracker,
    nv: InitTracker,
    b0: f64,
    d_init: f64,
    // per-step η_0 bookkeeping
    eq_step_aband: Vec<f64>,
    eq_aband_prefix: Vec<f64>,
    eq_aged_mass: Vec<f64>,
    eq_aged_prefix: Vec<f64>,
    // per-step arrival-layer cumulatives (only filled for non-constant λ)
    layer_cum: Vec<f64>,
    i2_pref: Vec<f64>,
    const_rate: Option<f64>,
    // I₂(t_j, t_j ∧ χ_j) from the committed step, for the R trapezoid
    i2_left: f64,
}

impl Solver {
    pub fn new(model: QueueModel, ic: InitialCondition, params: SolveParams) -> Result<Self> {
        if !params.dt.is_finite() || params.dt <= 0.0 || !params.t_end.is_finite() || params.t_end <= 0.0 {
            return Err(FluidError::Config("dt and t_end must be positive".into()));
        }
        let check = validate_initial(&ic);
        if !check.is_ok() {
            return Err(FluidError::Config(check.describe()));
        }
        // Regularity for the general-distribution path: the patience law
        // must be continuous and the initial queue content diffuse; if the
        // service law is discontinuous the initial service content must be
        // diffuse as well.
        if !model.patience.is_continuous() {
            return Err(FluidError::Config(
                "patience law must be continuous (atomic patience is outside the model's regularity class)"
                    .into(),
            ));
        }
        if !ic.eta0.atoms().is_empty() {
            return Err(FluidError::Config("initial queue measure must be diffuse".into()));
        }
        if !model.service.is_continuous() && !ic.nu0.atoms().is_empty() {
            return Err(FluidError::Config(
                "initial service measure must be diffuse when the service law has atoms".into(),
            ));
        }
        let steps = (params.t_end / params.dt).round().max(1.0) as usize;
        let lat = Lattice::build(&model.rate, &model.service, &model.patience, params.dt, steps);
        let eq = InitTracker::build(&ic.eta0, &model.patience, "eta0")?;
        let nv = InitTracker::build(&ic.nu0, &model.service, "nu0")?;
        let b0 = ic.nu0.total_mass();
        let x0 = ic.x0;
        let q0 = (x0 - 1.0).max(0.0);
        let n_eq = eq.len();

        let mut s = Solver {
            model,
            ic,
            params,
            lat,
            steps,
            j: 0,
            x: vec![x0],
            b: vec![x0.min(1.0)],
            q: vec![q0],
            k: vec![0.0],
            d: vec![0.0],
            r: vec![0.0],
            chi: vec![0.0],
            kappa: vec![0.0],
            dk: Vec::new(),
            eq,
            nv,
            b0,
            d_init: 0.0,
            eq_step_aband: vec![0.0; n_eq],
            eq_aband_prefix: vec![0.0; n_eq + 1],
            eq_aged_mass: vec![0.0; n_eq],
            eq_aged_prefix: vec![0.0; n_eq + 1],
            layer_cum: Vec::new(),
            i2_pref: Vec::new(),
            const_rate: None,
            i2_left: 0.0,
        };
        if let ArrivalRate::Constant { rate } = s.model.rate {
            s.const_rate = Some(rate);
        }
        // Aged η_0 state at t = 0 is η_0 itself.
        for i in 0..s.eq.len() {
            s.eq_aged_mass[i] = s.eq.mass0[i];
            s.eq_aged_prefix[i + 1] = s.eq_aged_prefix[i] + s.eq_aged_mass[i];
        }
        s.chi[0] = s.eta_quantile(0, q0);
        s.kappa[0] = s.model.rate.rate(0.0); // refined after the first step
        Ok(s)
    }

    pub fn steps_total(&self) -> usize {
        self.steps
    }

    pub fn steps_done(&self) -> usize {
        self.j
    }

    /// Advances the trajectory by one Δt.
    pub fn step(&mut self) -> Result<()> {
        if self.j >= self.steps {
            return Err(FluidError::Config("solver already reached t_end".into()));
        }
        let jn = self.j + 1;
        let dt = self.params.dt;
        let tn = jn as f64 * dt;

        // --- advance the initial-content trackers to t_{j+1} ---
        let gr = &self.model.patience;
        for i in 0..self.eq.len() {
            let new_cdf = gr.cdf(self.eq.y_mid[i] + tn);
            self.eq_step_aband[i] =
                self.eq.mass0[i] * (new_cdf - self.eq.cdf_at[i]) / self.eq.surv0[i];
            self.eq_aged_mass[i] = self.eq.mass0[i] * (1.0 - new_cdf) / self.eq.surv0[i];
            self.eq.cdf_at[i] = new_cdf;
            self.eq_aband_prefix[i + 1] = self.eq_aband_prefix[i] + self.eq_step_aband[i];
            self.eq_aged_prefix[i + 1] = self.eq_aged_prefix[i] + self.eq_aged_mass[i];
        }
        let gs = &self.model.service;
        for i in 0..self.nv.len() {
            let new_cdf = gs.cdf(self.nv.y_mid[i] + tn);
            self.d_init += self.nv.mass0[i] * (new_cdf - self.nv.cdf_at[i]) / self.nv.surv0[i];
            self.nv.cdf_at[i] = new_cdf;
        }
        let d_init = self.d_init;

        // --- arrival-layer cumulatives at t_{j+1} (non-constant λ) ---
        if self.const_rate.is_none() {
            self.layer_cum.clear();
            self.layer_cum.push(0.0);
            self.i2_pref.clear();
            self.i2_pref.push(0.0);
            for m in 0..jn {
                let lam = self.lat.lam_mid[jn - 1 - m];
                self.layer_cum.push(self.layer_cum[m] + lam * (self.lat.grd[m + 1] - self.lat.grd[m]));
                self.i2_pref
                    .push(self.i2_pref[m] + lam * (self.lat.gr_cdf[m + 1] - self.lat.gr_cdf[m]));
            }
        }

        // --- history convolution for D (all increments except the newest);
        // with a memory horizon, older entries count as departed ---
        let i_min = match self.params.history_horizon {
            Some(h) => jn.saturating_sub(1 + (h / dt) as usize),
            None => 0,
        };
        let mut d_hist = self.k[i_min.min(self.j)];
        for i in i_min..self.j {
            d_hist += self.dk[i] * self.lat.gs_cell_cdf[jn - 1 - i];
        }

        // --- fixed point over the step's K-increment ---
        let e_new = self.lat.e_cum[jn];
        let x0 = self.ic.x0;
        let r_base = self.r[self.j];
        let k_prev = self.k[self.j];
        let mut dk_cur = if self.j == 0 {
            self.model.rate.rate(0.0) * dt
        } else {
            self.dk[self.j - 1]
        };
        let mut chi_cur = self.chi[self.j];
        let mut converged = false;
        let mut last_residual = f64::INFINITY;
        let mut result = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for iter in 0..self.params.max_fp_iters {
            let d_new = d_init + d_hist + dk_cur * self.lat.gs_cell_cdf[0];
            let i2_new = self.i2_at(jn, tn.min(chi_cur));
            let r1_inc = self.initial_abandon_increment(chi_cur - tn);
            let r_new = r_base + r1_inc + 0.5 * dt * (self.i2_left + i2_new);
            let x_new = e_new + x0 - d_new - r_new;
            let b_new = x_new.min(1.0);
            let q_new = (x_new - 1.0).max(0.0);
            let k_new = b_new + d_new - self.b0;
            let dk_next = k_new - k_prev;
            let chi_next = self.eta_quantile(jn, q_new);
            let residual = (dk_next - dk_cur).abs().max((chi_next - chi_cur).abs());
            result = (x_new, b_new, q_new, k_new, d_new, r_new, chi_next);
            if (dk_next - dk_cur).abs() <= self.params.fp_tol
                && (chi_next - chi_cur).abs() <= 1e-9
            {
                dk_cur = dk_next;
                converged = true;
                break;
            }
            last_residual = residual;
            if iter >= 12 {
                // Relaxation against regime-boundary oscillation.
                dk_cur = 0.5 * (dk_cur + dk_next);
                chi_cur = 0.5 * (chi_cur + chi_next);
            } else {
                dk_cur = dk_next;
                chi_cur = chi_next;
            }
        }
        if !converged {
            return Err(FluidError::StepFailure {
                t: tn,
                iterations: self.params.max_fp_iters,
                residual: last_residual,
            });
        }
        let (x_new, b_new, q_new, k_new, d_new, r_new, chi_new) = result;
        if !x_new.is_finite() || !k_new.is_finite() || !chi_new.is_finite() {
            return Err(FluidError::Numeric(format!("non-finite state at t = {tn}")));
        }

        // --- commit ---
        self.x.push(x_new);
        self.b.push(b_new);
        self.q.push(q_new);
        self.k.push(k_new);
        self.d.push(d_new);
        self.r.push(r_new);
        self.chi.push(chi_new);
        self.kappa.push(dk_cur / dt);
        self.dk.push(dk_cur);
        if jn == 1 {
            self.kappa[0] = dk_cur / dt;
        }
        self.i2_left = self.i2_at(jn, tn.min(chi_new));
        self.j = jn;
        Ok(())
    }

    /// Runs to `t_end` and returns the trajectory.
    pub fn run(mut self) -> Result<Trajectory> {
        while self.j < self.steps {
            self.step()?;
        }
        Ok(Trajectory {
            dt: self.params.dt,
            x: self.x,
            b: self.b,
            q: self.q,
            k: self.k,
            d: self.d,
            r: self.r,
            chi: self.chi,
            kappa: self.kappa,
            dk: self.dk,
            model: self.model,
            ic: self.ic,
        })
    }

    /// `I₂(t_j, c) = ∫_{[0,c]} λ(t_j − x) dG^r(x)` — the arrival-content
    /// abandonment integrand of the R representation.
    fn i2_at(&self, jn: usize, c: f64) -> f64 {
        if c <= 0.0 {
            return 0.0;
        }
        let dt = self.params.dt;
        let tn = jn as f64 * dt;
        let c = c.min(tn);
        let m = ((c / dt) as usize).min(jn);
        let full = if let Some(lam) = self.const_rate {
            lam * self.lat.gr_cdf[m]
        } else {
            self.i2_pref[m]
        };
        let mut partial = 0.0;
        if c > m as f64 * dt && m < jn {
            let lam = if let Some(lam) = self.const_rate {
                lam
            } else {
                self.model.rate.rate(tn - 0.5 * (m as f64 * dt + c))
            };
            partial = lam * (self.model.patience.cdf(c) - self.lat.gr_cdf[m]);
        }
        full + partial
    }

    /// Abandonment of initial queue content over the step, cut off at
    /// initial ages `y ≤ cutoff` (`cutoff = χ − t`, the surviving frontier
    /// in initial-age coordinates).
    fn initial_abandon_increment(&self, cutoff: f64) -> f64 {
        if cutoff <= 0.0 || self.eq.len() == 0 {
            return 0.0;
        }
        let n = self.eq.len();
        // Find the last cell fully below the cutoff.
        let mut lo = 0usize;
        let mut hi = n;
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.eq.y_lo[mid] + self.eq.width[mid] <= cutoff {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        let mut inc = self.eq_aband_prefix[lo];
        if lo < n && self.eq.y_lo[lo] < cutoff {
            let w = self.eq.width[lo];
            let frac = if w > 0.0 { ((cutoff - self.eq.y_lo[lo]) / w).clamp(0.0, 1.0) } else { 1.0 };
            inc += frac * self.eq_step_aband[lo];
        }
        inc
    }

    /// Smallest age `x` with `η_{t_j}[0, x] ≥ q − slack`: walks the arrival
    /// layer (ages below t) then the aged initial content (ages above t).
    fn eta_quantile(&self, jn: usize, q: f64) -> f64 {
        let target = q - QUANTILE_SLACK;
        if target <= 0.0 {
            return 0.0;
        }
        let dt = self.params.dt;
        let tn = jn as f64 * dt;
        let layer_total = if let Some(lam) = self.const_rate {
            lam * self.lat.grd[jn]
        } else if jn == 0 {
            0.0
        } else {
            self.layer_cum[jn]
        };
        if target <= layer_total {
            let cum = |m: usize| -> f64 {
                if let Some(lam) = self.const_rate {
                    lam * self.lat.grd[m]
                } else {
                    self.layer_cum[m]
                }
            };
            let mut lo = 0usize;
            let mut hi = jn;
            while lo < hi {
                let mid = (lo + hi) / 2;
                if cum(mid) >= target {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            if lo == 0 {
                return 0.0;
            }
            let c0 = cum(lo - 1);
            let c1 = cum(lo);
            if c1 > c0 {
                return (lo - 1) as f64 * dt + dt * (target - c0) / (c1 - c0);
            }
            return lo as f64 * dt;
        }
        // Walk the aged initial content.
        let want = target - layer_total;
        let n = self.eq.len();
        let mut lo = 0usize;
        let mut hi = n;
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.eq_aged_prefix[mid + 1] >= want {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        if lo >= n {
            // Target within slack of the total mass: top of the support.
            for i in (0..n).rev() {
                if self.eq_aged_mass[i] > 0.0 {
                    return tn + self.eq.y_lo[i] + self.eq.width[i];
                }
            }
            return tn;
        }
        let within = want - self.eq_aged_prefix[lo];
        let m = self.eq_aged_mass[lo];
        let frac = if m > 0.0 { (within / m).clamp(0.0, 1.0) } else { 1.0 };
        tn + self.eq.y_lo[lo] + frac * self.eq.width[lo]
    }
}

/// Solves the model on `[0, t_end]`.
pub fn solve(model: &QueueModel, ic: &InitialCondition, params: &SolveParams) -> Result<Trajectory> {
    Solver::new(model.clone(), ic.clone(), params.clone())?.run()
}

// =========================================================================
// D and R by their two routes
// =========================================================================

/// Stieltjes route for D:
/// `D(t) = ∫ (G^s(y+t) − G^s(y))/Ḡ^s(y) ν_0(dy) + ∫_0^t G^s(t−s) dK(s)`.
pub fn departure_mrd(nu0: &GridMeasure, gs: &Distribution, dk: &[f64], dt: f64) -> Vec<f64> {
    let n = dk.len();
    let mut gsd = Vec::with_capacity(n + 1);
    for m in 0..=n {
        gsd.push(gs.survival_integral(0.0, m as f64 * dt));
    }
    let cell_cdf: Vec<f64> =
        (0..n).map(|m| (1.0 - (gsd[m + 1] - gsd[m]) / dt).clamp(0.0, 1.0)).collect();
    let mut out = vec![0.0f64; n + 1];
    for j in 1..=n {
        let t = j as f64 * dt;
        let mut v = integrate_measure(nu0, |y| {
            let s0 = gs.survival(y);
            if s0 > 0.0 {
                (gs.cdf(y + t) - gs.cdf(y)) / s0
            } else {
                0.0
            }
        });
        for (i, dki) in dk.iter().take(j).enumerate() {
            v += dki * cell_cdf[j - 1 - i];
        }
        out[j] = v;
    }
    out
}

/// Hazard route for D: `D(t) = ∫_0^t (∫ h^s(x) ν_s(dx)) ds`, trapezoidal
/// in time. Errors when G^s has no density.
pub fn departure_f80(nu0: &GridMeasure, gs: &Distribution, dk: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !gs.has_density() {
        return Err(FluidError::NoDensity("departure_f80 needs a service density".into()));
    }
    let n = dk.len();
    let h_end = gs.support_end();
    let mut hs_mid = Vec::with_capacity(n);
    let mut surv_cell = Vec::with_capacity(n);
    for m in 0..n {
        let mid = (m as f64 + 0.5) * dt;
        hs_mid.push(if mid < h_end { gs.hazard(mid).unwrap_or(0.0) } else { 0.0 });
        surv_cell.push(gs.survival_integral(m as f64 * dt, (m + 1) as f64 * dt) / dt);
    }
    let mut sigma = vec![0.0f64; n + 1];
    for j in 0..=n {
        let t = j as f64 * dt;
        let mut v = integrate_measure(nu0, |y| {
            let s0 = gs.survival(y);
            let num = gs.density(y + t).unwrap_or(0.0);
            if s0 > 0.0 {
                num / s0
            } else {
                0.0
            }
        });
        for m in 0..j {
            // Layer cell m holds dk[j−1−m] thinned by the cell-average survival.
            v += hs_mid[m] * dk[j - 1 - m] * surv_cell[m];
        }
        sigma[j] = v;
    }
    Ok(cumulative_trapezoid(&sigma, dt))
}

/// Stieltjes route for R, driven by the χ history:
/// the initial-content term integrates `dG^r` along each initial age's
/// future with the frontier indicator, the arrival term integrates
/// `λ(s−x) dG^r(x)` over `x ≤ s ∧ χ(s)`.
pub fn abandonment_mrq(
    eta0: &GridMeasure,
    gr: &Distribution,
    rate: &ArrivalRate,
    chi: &[f64],
    dt: f64,
) -> Vec<f64> {
    let n = chi.len() - 1;
    let mut gr_cdf = Vec::with_capacity(n + 1);
    for m in 0..=n {
        gr_cdf.push(gr.cdf(m as f64 * dt));
    }
    // I₂ values at each grid time with cutoff s ∧ χ(s).
    let mut i2 = vec![0.0f64; n + 1];
    for j in 1..=n {
        let t = j as f64 * dt;
        let c = t.min(chi[j]).max(0.0);
        let m = ((c / dt) as usize).min(j);
        let mut v = 0.0;
        for (idx, w) in gr_cdf.windows(2).enumerate().take(m) {
            v += rate.rate(t - (idx as f64 + 0.5) * dt) * (w[1] - w[0]);
        }
        if c > m as f64 * dt && m < j {
            v += rate.rate(t - 0.5 * (m as f64 * dt + c)) * (gr.cdf(c) - gr_cdf[m]);
        }
        i2[j] = v;
    }
    let term2 = cumulative_trapezoid(&i2, dt);
    // Initial-content term, stepped with the end-of-step frontier.
    let mut out = vec![0.0f64; n + 1];
    let mut acc = 0.0f64;
    for j in 1..=n {
        let t0 = (j - 1) as f64 * dt;
        let t1 = j as f64 * dt;
        let cutoff = chi[j] - t1;
        if cutoff > 0.0 {
            acc += integrate_measure_band(eta0, 0.0, f64::INFINITY, |y| {
                if y >= cutoff {
                    return 0.0;
                }
                let s0 = gr.survival(y);
                if s0 > 0.0 {
                    (gr.cdf(y + t1) - gr.cdf(y + t0)) / s0
                } else {
                    0.0
                }
            });
        }
        out[j] = acc + term2[j];
    }
    out
}

/// Hazard route for R: `R(t) = ∫_0^t (∫_{[0,χ(s)]} h^r(x) η_s(dx)) ds`.
/// Errors when G^r has no density.
pub fn abandonment_f8(
    eta0: &GridMeasure,
    gr: &Distribution,
    rate: &ArrivalRate,
    chi: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    if !gr.has_density() {
        return Err(FluidError::NoDensity("abandonment_f8 needs a patience density".into()));
    }
    let n = chi.len() - 1;
    let h_end = gr.support_end();
    let mut hr_mid = Vec::with_capacity(n);
    let mut surv_cell = Vec::with_capacity(n);
    for m in 0..n {
        let mid = (m as f64 + 0.5) * dt;
        hr_mid.push(if mid < h_end { gr.hazard(mid).unwrap_or(0.0) } else { 0.0 });
        surv_cell.push(gr.survival_integral(m as f64 * dt, (m + 1) as f64 * dt));
    }
    let mut alpha = vec![0.0f64; n + 1];
    for j in 0..=n {
        let t = j as f64 * dt;
        let c = chi[j].max(0.0);
        let c_layer = c.min(t);
        let m = ((c_layer / dt) as usize).min(j);
        let mut v = 0.0;
        for (idx, sc) in surv_cell.iter().enumerate().take(m) {
            v += hr_mid[idx] * rate.rate(t - (idx as f64 + 0.5) * dt) * sc;
        }
        if c_layer > m as f64 * dt && m < j {
            let lo = m as f64 * dt;
            let mid = 0.5 * (lo + c_layer);
            if mid < h_end {
                v += gr.hazard(mid).unwrap_or(0.0)
                    * rate.rate(t - mid)
                    * gr.survival_integral(lo, c_layer);
            }
        }
        // Aged initial content with age y + t ≤ χ(s).
        let cutoff = c - t;
        if cutoff > 0.0 {
            v += integrate_measure_band(eta0, 0.0, cutoff, |y| {
                let s0 = gr.survival(y);
                let x = y + t;
                if s0 > 0.0 && x < h_end {
                    gr.hazard(x).unwrap_or(0.0) * gr.survival(x) / s0
                } else {
                    0.0
                }
            });
        }
        alpha[j] = v;
    }
    Ok(cumulative_trapezoid(&alpha, dt))
}

// =========================================================================
// Small helpers
// =========================================================================

fn trapezoid(vals: &[f64], dt: f64) -> f64 {
    if vals.len() < 2 {
        return 0.0;
    }
    let inner: f64 = vals[1..vals.len() - 1].iter().sum();
    dt * (0.5 * (vals[0] + vals[vals.len() - 1]) + inner)
}

fn cumulative_trapezoid(vals: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(vals.len());
    out.push(0.0);
    for j in 1..vals.len() {
        out.push(out[j - 1] + 0.5 * dt * (vals[j - 1] + vals[j]));
    }
    out
}

/// `∫ f dμ` with midpoint cells and exact atoms.
fn integrate_measure(m: &GridMeasure, f: impl Fn(f64) -> f64) -> f64 {
    m.integrate(f)
}

/// `∫_{[lo, hi)} f dμ`, cells clipped to the band (midpoint of the clipped
/// part), atoms included when `lo ≤ x < hi`.
fn integrate_measure_band(m: &GridMeasure, lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let da = m.grid_width();
    let mut acc = 0.0;
    for (i, d) in m.density_cells().iter().enumerate() {
        if *d == 0.0 {
            continue;
        }
        let c_lo = (i as f64 * da).max(lo);
        let c_hi = ((i + 1) as f64 * da).min(hi);
        if c_hi > c_lo {
            acc += f(0.5 * (c_lo + c_hi)) * d * (c_hi - c_lo);
        }
    }
    for (x, mass) in m.atoms() {
        if *x >= lo && *x < hi {
            acc += f(*x) * mass;
        }
    }
    acc
}

/// Piecewise-constant density of a grid measure at an age (atoms ignored).
fn density_of(m: &GridMeasure, x: f64) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    let i = (x / m.grid_width()) as usize;
    m.density_cells().get(i).copied().unwrap_or(0.0)
}
