//! The residual-time fluid model driven by a virtual queue, and the
//! conversions between it and the elapsed-time model.
//!
//! The model requires a constant arrival rate λ. State is the pair of
//! residual measures `(R_t, Z_t)`: `R_t(C_x)` is the virtual-queue content
//! with residual patience above `x` (defined for all real `x`; customers
//! whose patience has expired remain in the virtual queue until their turn
//! for service), `Z_t(C_x)` the in-service content with residual service
//! above `x`. The virtual-queue mass determines everything on the queue
//! side:
//!
//! ```text
//! R_t(C_x) = λ ∫_0^{Q_v(t)/λ} Ḡ^r(x+s) ds        Q(t) = λ G^r_d(Q_v(t)/λ)
//! Z_t(C_x) = Z_0(C_{x+t}) + ∫_0^t Ḡ^r(Q_v(s)/λ) Ḡ^s(t+x−s) dL_v(s)
//! ```
//!
//! with `L_v(t) = λt − Q_v(t)` the cumulative removals. Stepping closes the
//! loop through the non-idling condition: removals enter service at rate
//! `dK = Ḡ^r(Q_v/λ) dL_v`; when even draining the whole virtual queue keeps
//! `B ≤ 1` the queue empties, otherwise the removal volume is chosen so
//! that `B = 1`. Per-step increments of Q, K, R use the exact average of
//! `Ḡ^r` along the Q_v path, which makes the queue-side balance
//! `Q + K + R = Q(0) + λt` hold to machine precision.
//!
//! The conversions implement the equivalence/non-equivalence results: an
//! elapsed model arises from a Zhang model only when the initial service
//! tail is representable by some age measure ν_0 (a witness is constructed,
//! or a residual reported); a Zhang model arises from an elapsed model only
//! when the initial queue layer admits an x-independent root z_t of the
//! tail-matching equation (finite probing with a spread tolerance, an
//! infeasibility certificate otherwise).

use crate::arrival::ArrivalRate;
use crate::distributions::Distribution;
use crate::elapsed::{
    solve, InitialCondition, QueueModel, SolveParams, Trajectory,
};
use crate::error::{FluidError, Result};
use crate::measures::GridMeasure;
use crate::nnls::nnls;
use nalgebra::{DMatrix, DVector};

/// Default probe lags for the x-independence test of the conversion
/// equation, intersected with `[0, H^r)` at run time.
pub const DEFAULT_PROBES: [f64; 5] = [0.0, 0.25, 0.5, 1.0, 2.0];

/// Spread tolerance for the x-independence test: `1e−6·(1+λ)`.
pub fn spread_tolerance(lambda: f64) -> f64 {
    1e-6 * (1.0 + lambda)
}

/// Probe lags: the defaults inside `[0, H^r)` plus, for finite patience
/// support, lags near the endpoint where tail saturation constrains the
/// root the hardest.
fn probe_set(gr: &Distribution) -> Vec<f64> {
    let hr = gr.support_end();
    let mut probes: Vec<f64> = DEFAULT_PROBES.iter().copied().filter(|x| *x < hr).collect();
    if hr.is_finite() {
        for frac in [0.55, 0.75, 0.9] {
            probes.push(frac * hr);
        }
        probes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        probes.dedup();
    }
    probes
}

// =========================================================================
// Initial condition
// =========================================================================

/// The initial in-service residual tail `Z_0`.
#[derive(Debug, Clone)]
pub enum Z0Spec {
    /// Derived from an elapsed-age measure:
    /// `Z_0(C_x) = ∫ Ḡ^s(y+x)/Ḡ^s(y) ν_0(dy)`.
    FromServiceAges(GridMeasure),
    /// `Z_0(C_x) = mass·e^{−rate·x}`.
    ExponentialTail { mass: f64, rate: f64 },
    /// Right-continuous non-increasing tail sampled on a uniform grid
    /// (`values[k] = Z_0(C_{k·dz})`), linearly interpolated.
    SampledTail { dz: f64, values: Vec<f64> },
}

impl Z0Spec {
    /// Z_0(C_x) for x ≥ 0.
    pub fn tail(&self, gs: &Distribution, x: f64) -> f64 {
        match self {
            Z0Spec::FromServiceAges(nu0) => {
                if let Distribution::Exponential { rate } = gs {
                    // Memoryless shortcut: the aged tail factorizes.
                    return nu0.total_mass() * (-rate * x).exp();
                }
                nu0.integrate(|y| {
                    let s0 = gs.survival(y);
                    if s0 > 0.0 {
                        gs.survival(y + x) / s0
                    } else {
                        0.0
                    }
                })
            }
            Z0Spec::ExponentialTail { mass, rate } => mass * (-rate * x).exp(),
            Z0Spec::SampledTail { dz, values } => {
                if values.is_empty() || x < 0.0 {
                    return 0.0;
                }
                let pos = x / dz;
                let i = pos.floor() as usize;
                if i + 1 >= values.len() {
                    return *values.last().unwrap();
                }
                let frac = pos - i as f64;
                values[i] + frac * (values[i + 1] - values[i])
            }
        }
    }
}

/// Initial state of the Zhang model: the virtual-queue mass (which fixes
/// `R_0` through the model equation) and the in-service tail `Z_0` with
/// `Z_0({0}) = 0`.
#[derive(Debug, Clone)]
pub struct ZhangInitial {
    pub qv0: f64,
    pub z0: Z0Spec,
}

impl ZhangInitial {
    pub fn empty() -> Self {
        Self { qv0: 0.0, z0: Z0Spec::ExponentialTail { mass: 0.0, rate: 1.0 } }
    }
}

// =========================================================================
// Trajectory
// =========================================================================

/// Scalar state of the Zhang model at one time.
#[derive(Debug, Clone, Copy)]
pub struct ZhangState {
    pub t: f64,
    pub qv: f64,
    pub lv: f64,
    pub b: f64,
    pub q: f64,
    pub x: f64,
    pub k: f64,
    pub r: f64,
}

/// Zhang-model solution on the uniform grid. The residual measures are
/// available as tail functions through [`r_tail`](Self::r_tail) and
/// [`z_tail`](Self::z_tail).
#[derive(Debug, Clone)]
pub struct ZhangTrajectory {
    pub(crate) dt: f64,
    pub(crate) rate: f64,
    pub(crate) qv: Vec<f64>,
    pub(crate) lv: Vec<f64>,
    pub(crate) b: Vec<f64>,
    pub(crate) q: Vec<f64>,
    pub(crate) x: Vec<f64>,
    pub(crate) k: Vec<f64>,
    pub(crate) r: Vec<f64>,
    pub(crate) dk: Vec<f64>,
    pub(crate) service: Distribution,
    pub(crate) patience: Distribution,
    pub(crate) init: ZhangInitial,
}

impl ZhangTrajectory {
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn len(&self) -> usize {
        self.qv.len()
    }
    pub fn is_empty(&self) -> bool {
        self.qv.is_empty()
    }
    pub fn time(&self, j: usize) -> f64 {
        j as f64 * self.dt
    }
    pub fn rate(&self) -> f64 {
        self.rate
    }
    pub fn qv_col(&self) -> &[f64] {
        &self.qv
    }
    pub fn q_col(&self) -> &[f64] {
        &self.q
    }
    pub fn b_col(&self) -> &[f64] {
        &self.b
    }
    pub fn x_col(&self) -> &[f64] {
        &self.x
    }
    pub fn k_col(&self) -> &[f64] {
        &self.k
    }
    pub fn r_col(&self) -> &[f64] {
        &self.r
    }
    pub fn initial(&self) -> &ZhangInitial {
        &self.init
    }

    pub fn state_at(&self, j: usize) -> ZhangState {
        ZhangState {
            t: self.time(j),
            qv: self.qv[j],
            lv: self.lv[j],
            b: self.b[j],
            q: self.q[j],
            x: self.x[j],
            k: self.k[j],
            r: self.r[j],
        }
    }

    /// `R_t(C_x) = λ ∫_0^{Q_v(t)/λ} Ḡ^r(x+s) ds`, defined for all real x.
    pub fn r_tail(&self, j: usize, x: f64) -> f64 {
        self.rate * self.patience.survival_integral(x, x + self.qv[j] / self.rate)
    }

    /// `Z_t(C_x) = Z_0(C_{x+t}) + ∫_0^t Ḡ^s(t+x−s) dK(s)` for x ≥ 0.
    pub fn z_tail(&self, j: usize, x: f64) -> f64 {
        let t = self.time(j);
        let mut tail = self.init.z0.tail(&self.service, t + x);
        for (i, dki) in self.dk.iter().take(j).enumerate() {
            let lo = t - (i + 1) as f64 * self.dt + x;
            tail += dki * self.service.survival_integral(lo, lo + self.dt) / self.dt;
        }
        tail
    }

    /// CSV export: `t,Qv,Lv,B,Q,X,K,R`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,Qv,Lv,B,Q,X,K,R\n");
        for j in 0..self.len() {
            out.push_str(&format!(
                "{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e}\n",
                self.time(j),
                self.qv[j],
                self.lv[j],
                self.b[j],
                self.q[j],
                self.x[j],
                self.k[j],
                self.r[j]
            ));
        }
        out
    }
}

// =========================================================================
// Direct solver
// =========================================================================

/// Solves the Zhang model with constant rate `lambda` on `[0, t_end]`.
pub fn solve_zhang(
    lambda: f64,
    gs: &Distribution,
    gr: &Distribution,
    init: &ZhangInitial,
    params: &SolveParams,
) -> Result<ZhangTrajectory> {
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(FluidError::Config(format!("the model needs a constant rate λ > 0, got {lambda}")));
    }
    if !gs.is_continuous() {
        return Err(FluidError::Config("service law must be continuous".into()));
    }
    if !gr.is_lipschitz() {
        return Err(FluidError::Config("patience law must be Lipschitz continuous".into()));
    }
    if init.qv0 < 0.0 {
        return Err(FluidError::Config("virtual-queue mass must be >= 0".into()));
    }
    if init.qv0 / lambda >= gr.support_end() {
        return Err(FluidError::Config(
            "initial virtual-queue mass implies waiting beyond the patience support".into(),
        ));
    }
    let steps = (params.t_end / params.dt).round().max(1.0) as usize;
    let dt = params.dt;

    let b0 = init.z0.tail(gs, 0.0);
    let gd = |u: f64| gr.survival_integral(0.0, u);
    let q0 = lambda * gd(init.qv0 / lambda);
    if b0 > 1.0 + 1e-9 {
        return Err(FluidError::Config(format!("initial service content {b0} exceeds capacity")));
    }
    if q0 > 1e-9 && (b0 - 1.0).abs() > 1e-9 {
        return Err(FluidError::Config(format!(
            "non-idling violated at t = 0: Q(0) = {q0} with B(0) = {b0}"
        )));
    }

    // Lattice tables.
    let mut gsd = Vec::with_capacity(steps + 1);
    let mut z0_lat = Vec::with_capacity(steps + 1);
    for m in 0..=steps {
        let t = m as f64 * dt;
        gsd.push(gs.survival_integral(0.0, t));
        z0_lat.push(init.z0.tail(gs, t));
    }
    let surv_kernel: Vec<f64> =
        (0..steps).map(|m| ((gsd[m + 1] - gsd[m]) / dt).clamp(0.0, 1.0)).collect();

    let mut qv = vec![init.qv0];
    let mut lv = vec![0.0f64];
    let mut b = vec![b0];
    let mut q = vec![q0];
    let mut x = vec![b0 + q0];
    let mut k = vec![0.0f64];
    let mut r = vec![0.0f64];
    let mut dk = Vec::with_capacity(steps);

    // Average of Ḡ^r over the Q_v path (exact for a linear path).
    let gr_avg = |a: f64, bq: f64| -> f64 {
        if (bq - a).abs() <= 1e-14 {
            gr.survival(a)
        } else {
            (gd(bq) - gd(a)) / (bq - a)
        }
    };

    for jn in 1..=steps {
        let j = jn - 1;
        let a_over = qv[j] / lambda;
        let mut b_hist = z0_lat[jn];
        for (i, dki) in dk.iter().enumerate() {
            b_hist += dki * surv_kernel[jn - 1 - i];
        }
        let dlv_max = qv[j] + lambda * dt;
        let b_at = |dlv: f64| -> (f64, f64) {
            let qv_new = qv[j] + lambda * dt - dlv;
            let w = gr_avg(a_over, qv_new / lambda);
            let dk_new = w * dlv;
            (b_hist + dk_new * surv_kernel[0], dk_new)
        };
        let (b_full, _) = b_at(dlv_max);
        let dlv = if b_full <= 1.0 {
            dlv_max
        } else {
            // B(·) is increasing in the removal volume; bisect for B = 1.
            let mut lo = 0.0f64;
            let mut hi = dlv_max;
            for _ in 0..70 {
                let mid = 0.5 * (lo + hi);
                if b_at(mid).0 > 1.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let (b_new, dk_new) = b_at(dlv);
        let qv_new = qv[j] + lambda * dt - dlv;
        let bq_over = qv_new / lambda;
        if bq_over >= gr.support_end() {
            return Err(FluidError::StepFailure {
                t: jn as f64 * dt,
                iterations: 0,
                residual: bq_over - gr.support_end(),
            });
        }
        let dq = lambda * (gd(bq_over) - gd(a_over));
        let dr = lambda * dt - dq - dk_new;
        qv.push(qv_new);
        lv.push(lv[j] + dlv);
        dk.push(dk_new);
        k.push(k[j] + dk_new);
        r.push(r[j] + dr);
        let q_new = lambda * gd(bq_over);
        q.push(q_new);
        b.push(b_new.min(1.0));
        x.push(b_new.min(1.0) + q_new);
    }

    Ok(ZhangTrajectory {
        dt,
        rate: lambda,
        qv,
        lv,
        b,
        q,
        x,
        k,
        r,
        dk,
        service: gs.clone(),
        patience: gr.clone(),
        init: init.clone(),
    })
}

// =========================================================================
// Zhang → elapsed (Theorem direction with the layer initial condition)
// =========================================================================

/// Outcome of converting a Zhang model to an elapsed-time model.
#[derive(Debug)]
pub struct ZhangToZuniga {
    /// The queue layer `η_0(dx) = λ 1_{[0,Q_v(0)/λ]}(x) Ḡ^r(x) dx`.
    pub eta0: GridMeasure,
    /// Witness age measure reproducing `Z_0`, when one exists.
    pub nu0: Option<GridMeasure>,
    /// Sup-norm misfit of the witness tail against `Z_0`.
    pub nu0_residual: f64,
    /// Whether a consistent ν_0 was found (the conversion exists).
    pub feasible: bool,
    pub elapsed: Option<Trajectory>,
    /// Sup gaps of (Q, B, X, K, R) between the two trajectories.
    pub sup_gaps: Option<[f64; 5]>,
    /// max_j |Q_v(t)/λ − χ(t) ∧ (t + Q_v(0)/λ)|.
    pub qv_chi_residual: Option<f64>,
}

/// Builds the layer measure `λ 1_{[0,upper]} Ḡ^r dx` on a grid of width `da`
/// with exact cell masses. Cells whose midpoint lies at or beyond the right
/// patience support are dropped (only possible when `upper` straddles the
/// support end; the sliver beyond it carries no surviving content).
pub fn patience_layer(lambda: f64, upper: f64, gr: &Distribution, da: f64) -> Result<GridMeasure> {
    let cells = (upper / da).ceil() as usize;
    let mut density = Vec::with_capacity(cells);
    for m in 0..cells {
        let lo = m as f64 * da;
        if gr.survival(lo + 0.5 * da) <= 0.0 {
            break;
        }
        let hi = ((m + 1) as f64 * da).min(upper);
        density.push(lambda * gr.survival_integral(lo, hi) / da);
    }
    GridMeasure::new(da, density, Vec::new())
}

/// Attempts to construct the elapsed-time model describing the same system
/// as a given Zhang trajectory, verifying the trajectory agreement and the
/// frontier identity `Q_v(t)/λ = χ(t) ∧ (t + Q_v(0)/λ)`.
///
/// When no age measure ν_0 can reproduce `Z_0` the result carries
/// `feasible = false` with the misfit (a non-equivalence report, not an
/// error).
pub fn zuniga_from_zhang(ztraj: &ZhangTrajectory, params: &SolveParams) -> Result<ZhangToZuniga> {
    let lambda = ztraj.rate;
    let gs = &ztraj.service;
    let gr = &ztraj.patience;
    let dt = params.dt;
    let eta0 = patience_layer(lambda, ztraj.init.qv0 / lambda, gr, dt)?;

    let (nu0, nu0_residual) = recover_nu0(&ztraj.init.z0, gs, dt)?;
    let b0 = ztraj.init.z0.tail(gs, 0.0);
    let feasible = nu0_residual <= 1e-6 * (1.0 + b0);
    if !feasible {
        return Ok(ZhangToZuniga {
            eta0,
            nu0: None,
            nu0_residual,
            feasible,
            elapsed: None,
            sup_gaps: None,
            qv_chi_residual: None,
        });
    }
    let nu0 = nu0.expect("feasible recovery returns a witness");
    let q0 = lambda * gr.survival_integral(0.0, ztraj.init.qv0 / lambda);
    let ic = InitialCondition { eta0: eta0.clone(), nu0: nu0.clone(), x0: b0 + q0 };
    let model = QueueModel {
        rate: ArrivalRate::constant(lambda)?,
        service: gs.clone(),
        patience: gr.clone(),
    };
    let elapsed = solve(&model, &ic, params)?;

    let n = elapsed.len().min(ztraj.len());
    let sup = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).take(n).map(|(u, v)| (u - v).abs()).fold(0.0f64, f64::max)
    };
    let gaps = [
        sup(elapsed.q_col(), ztraj.q_col()),
        sup(elapsed.b_col(), ztraj.b_col()),
        sup(elapsed.x_col(), ztraj.x_col()),
        sup(elapsed.k_col(), ztraj.k_col()),
        sup(elapsed.r_col(), ztraj.r_col()),
    ];
    let mut qv_chi = 0.0f64;
    for j in 0..n {
        let t = elapsed.time(j);
        let expect = elapsed.chi_col()[j].min(t + ztraj.init.qv0 / lambda);
        qv_chi = qv_chi.max((ztraj.qv[j] / lambda - expect).abs());
    }
    Ok(ZhangToZuniga {
        eta0,
        nu0: Some(nu0),
        nu0_residual,
        feasible,
        elapsed: Some(elapsed),
        sup_gaps: Some(gaps),
        qv_chi_residual: Some(qv_chi),
    })
}

/// Recovers an age measure whose aged survival tail reproduces `Z_0`.
///
/// With exponential service the tail depends on ν_0 only through its mass,
/// so any measure of the right mass works; a single cell at age zero is
/// returned and the misfit of the exponential shape reported. Otherwise a
/// nonnegative least-squares inversion of the aging kernel on a coarse grid
/// produces a witness or a misfit certificate.
fn recover_nu0(z0: &Z0Spec, gs: &Distribution, da: f64) -> Result<(Option<GridMeasure>, f64)> {
    let b0 = z0.tail(gs, 0.0);
    if b0 <= 1e-14 {
        return Ok((Some(GridMeasure::empty(da)), 0.0));
    }
    let horizon = gs.age_horizon(1e-8);
    let n_probe = 200usize;
    let dx = horizon / n_probe as f64;
    if let Distribution::Exponential { rate } = gs {
        let mut resid = 0.0f64;
        for i in 0..=n_probe {
            let xx = i as f64 * dx;
            resid = resid.max((z0.tail(gs, xx) - b0 * (-rate * xx).exp()).abs());
        }
        let nu0 = GridMeasure::new(da, vec![b0 / da], Vec::new())?;
        return Ok(((resid <= 1e-6 * (1.0 + b0)).then_some(nu0), resid));
    }
    // General case: fit cell masses m_j >= 0 with
    // tail(x) = Σ_j m_j Ḡ^s(y_j + x)/Ḡ^s(y_j).
    let n_y = 160usize;
    let dy = horizon / n_y as f64;
    let mut a = DMatrix::<f64>::zeros(n_probe + 1, n_y);
    let mut rhs = DVector::<f64>::zeros(n_probe + 1);
    for i in 0..=n_probe {
        let xx = i as f64 * dx;
        rhs[i] = z0.tail(gs, xx);
        for jy in 0..n_y {
            let y = (jy as f64 + 0.5) * dy;
            let s0 = gs.survival(y);
            if s0 > 0.0 {
                a[(i, jy)] = gs.survival(y + xx) / s0;
            }
        }
    }
    let masses = nnls(&a, &rhs, 400);
    let fit = &a * &masses;
    let resid = (0..=n_probe).map(|i| (fit[i] - rhs[i]).abs()).fold(0.0f64, f64::max);
    if resid > 1e-6 * (1.0 + b0) {
        return Ok((None, resid));
    }
    // The witness stays on its fitting grid: its cell midpoints are exactly
    // the kernel nodes, so the recovered tail reproduces the fit.
    let density: Vec<f64> = masses.iter().map(|m| m / dy).collect();
    Ok((Some(GridMeasure::new(dy, density, Vec::new())?), resid))
}

// =========================================================================
// Elapsed → Zhang
// =========================================================================

/// Certificate that no Zhang model describes the same system: at `t_fail`
/// the root of the tail-matching equation depends on the probe lag, or some
/// probe admits no root at all.
#[derive(Debug, Clone)]
pub struct InfeasibilityCertificate {
    pub t_fail: f64,
    pub probe_x: Vec<f64>,
    /// Root per probe (absent where no root exists or the probe is
    /// degenerate).
    pub z_values: Vec<Option<f64>>,
    /// Spread of the roots over the satisfiable probes.
    pub spread: f64,
    /// Some probe demanded more mass than the remaining patience tail holds.
    pub unsatisfiable: bool,
}

/// A successful conversion: the root series, the Zhang trajectory solved
/// from the converted initial condition, and the verification residuals.
#[derive(Debug)]
pub struct FeasibleZhang {
    /// z_t on the time grid; `Q_v(t) = λ·z_t`.
    pub zt: Vec<f64>,
    pub zhang: ZhangTrajectory,
    /// Residual of the cumulative abandonment identity
    /// `λ∫_0^t G^r(z_s) ds = R(t)`.
    pub dislim1_residual: f64,
    /// Sup gaps of (Q, B, X, K, R) between the elapsed and Zhang sides.
    pub sup_gaps: [f64; 5],
}

/// Result of attempting to derive a Zhang model from an elapsed trajectory.
#[derive(Debug)]
pub enum ZunigaToZhang {
    Feasible(Box<FeasibleZhang>),
    Infeasible(InfeasibilityCertificate),
}

/// For each grid time solves `λ∫_{t∧χ(t)}^z Ḡ^r(x+s) ds = RHS(t,x)` at a
/// set of probe lags `x`. The model converts exactly when the root is
/// independent of `x`; finite probing with the spread tolerance is the
/// executable surrogate. Returns the first failing time as a certificate,
/// or the converted and verified Zhang trajectory.
pub fn zhang_from_zuniga(traj: &Trajectory, params: &SolveParams) -> Result<ZunigaToZhang> {
    let ArrivalRate::Constant { rate: lambda } = traj.model().rate else {
        return Err(FluidError::Config("the residual-time model requires a constant arrival rate".into()));
    };
    let gr = &traj.model().patience;
    let mean_r = gr.mean();
    let probes = probe_set(gr);
    let tol = spread_tolerance(lambda);
    let eta0 = &traj.initial().eta0;
    let n = traj.len() - 1;
    let gd = |u: f64| gr.survival_integral(0.0, u);

    let mut zt = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let t = traj.time(j);
        let chi = traj.chi_col()[j];
        let a = t.min(chi);
        // A probe constrains the root, pins it unsatisfiably (None), or is
        // degenerate where both sides saturate (skipped).
        let mut z_vals: Vec<Option<f64>> = Vec::with_capacity(probes.len());
        let mut unsatisfiable = false;
        for &x in &probes {
            let rhs = if chi >= t && !eta0.is_empty() {
                band_integral(eta0, chi - t, |y| {
                    let s0 = gr.survival(y);
                    if s0 > 0.0 {
                        gr.survival(y + t + x) / s0
                    } else {
                        0.0
                    }
                })
            } else {
                0.0
            };
            if rhs <= 1e-14 {
                if gr.survival(x + a) > 1e-12 {
                    // Zero initial-content tail forces z = t ∧ χ(t).
                    z_vals.push(Some(a));
                } else {
                    // Both sides vanish: no constraint at this lag.
                    z_vals.push(None);
                }
                continue;
            }
            let target = gd(x + a) + rhs / lambda;
            if target > mean_r + 1e-12 * (1.0 + mean_r) {
                // More mass demanded than the whole remaining tail holds.
                unsatisfiable = true;
                z_vals.push(None);
                continue;
            }
            if target >= mean_r - 1e-12 * (1.0 + mean_r) {
                // Saturation: only an inequality constrains z; skip.
                z_vals.push(None);
                continue;
            }
            let root = gr.inverse_integrated_ccdf(target)? - x;
            z_vals.push(Some(root));
        }
        let finite: Vec<f64> = z_vals.iter().flatten().copied().collect();
        let spread = if finite.len() > 1 {
            finite.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v))
                - finite.iter().fold(f64::INFINITY, |m, v| m.min(*v))
        } else {
            0.0
        };
        if unsatisfiable || spread > tol {
            return Ok(ZunigaToZhang::Infeasible(InfeasibilityCertificate {
                t_fail: t,
                probe_x: probes,
                z_values: z_vals,
                spread,
                unsatisfiable,
            }));
        }
        zt.push(finite.first().copied().unwrap_or(a));
    }

    // Cumulative abandonment identity: λ ∫_0^t G^r(z_s) ds = R(t).
    let dt = traj.dt();
    let mut dislim1 = 0.0f64;
    let mut acc = 0.0;
    for j in 1..=n {
        acc += 0.5 * dt * lambda * (gr.cdf(zt[j - 1]) + gr.cdf(zt[j]));
        dislim1 = dislim1.max((acc - traj.r_col()[j]).abs());
    }

    // Convert and verify.
    let init = ZhangInitial {
        qv0: lambda * zt[0],
        z0: Z0Spec::FromServiceAges(traj.initial().nu0.clone()),
    };
    let zhang = solve_zhang(lambda, &traj.model().service, gr, &init, params)?;
    let m = zhang.len().min(traj.len());
    let sup = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).take(m).map(|(u, v)| (u - v).abs()).fold(0.0f64, f64::max)
    };
    let sup_gaps = [
        sup(traj.q_col(), zhang.q_col()),
        sup(traj.b_col(), zhang.b_col()),
        sup(traj.x_col(), zhang.x_col()),
        sup(traj.k_col(), zhang.k_col()),
        sup(traj.r_col(), zhang.r_col()),
    ];
    Ok(ZunigaToZhang::Feasible(Box::new(FeasibleZhang {
        zt,
        zhang,
        dislim1_residual: dislim1,
        sup_gaps,
    })))
}

/// Like [`zhang_from_zuniga`]'s probe stage but in the density form of the
/// condition (needs a patience density): solves
/// `λG^r(x+z) = λG^r(x + t∧χ(t)) + 1{χ≥t}∫ g^r(y+t+x)/Ḡ^r(y) η_0(dy)`
/// at the probe `(t, x)` pairs and reports the root spread per time.
#[derive(Debug, Clone)]
pub struct DensityConditionReport {
    /// `(t, spread)` per sampled time.
    pub spreads: Vec<(f64, f64)>,
    pub max_spread: f64,
    pub feasible: bool,
}

pub fn check_density_condition(
    traj: &Trajectory,
    time_indices: &[usize],
) -> Result<DensityConditionReport> {
    let ArrivalRate::Constant { rate: lambda } = traj.model().rate else {
        return Err(FluidError::Config("the density condition requires a constant arrival rate".into()));
    };
    let gr = &traj.model().patience;
    if !gr.has_density() {
        return Err(FluidError::UnsupportedModel("the density condition needs a patience density".into()));
    }
    let probes = probe_set(gr);
    let tol = spread_tolerance(lambda);
    let eta0 = &traj.initial().eta0;
    let mut spreads = Vec::with_capacity(time_indices.len());
    let mut max_spread = 0.0f64;
    for &j in time_indices {
        let t = traj.time(j);
        let chi = traj.chi_col()[j];
        let a = t.min(chi);
        let mut roots: Vec<f64> = Vec::new();
        let mut unsatisfiable = false;
        for &x in &probes {
            let inc = if chi >= t && !eta0.is_empty() {
                band_integral(eta0, chi - t, |y| {
                    let s0 = gr.survival(y);
                    if s0 > 0.0 {
                        gr.density(y + t + x).unwrap_or(0.0) / s0
                    } else {
                        0.0
                    }
                })
            } else {
                0.0
            };
            if inc <= 1e-14 {
                if gr.survival(x + a) > 1e-12 {
                    roots.push(a);
                }
                continue;
            }
            let target_p = gr.cdf(x + a) + inc / lambda;
            if target_p > 1.0 + 1e-12 {
                unsatisfiable = true;
                break;
            }
            if target_p >= 1.0 - 1e-12 {
                continue; // saturated: no pointwise constraint
            }
            let root = gr.quantile(target_p)? - x;
            roots.push(root);
        }
        let spread = if unsatisfiable {
            f64::INFINITY
        } else if roots.len() > 1 {
            roots.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v))
                - roots.iter().fold(f64::INFINITY, |m, v| m.min(*v))
        } else {
            0.0
        };
        spreads.push((t, spread));
        max_spread = max_spread.max(spread);
    }
    Ok(DensityConditionReport { spreads, max_spread, feasible: max_spread <= tol })
}

/// Integrates `f` against the measure over `[0, cutoff]`, clipping the
/// boundary cell.
fn band_integral(m: &GridMeasure, cutoff: f64, f: impl Fn(f64) -> f64) -> f64 {
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
