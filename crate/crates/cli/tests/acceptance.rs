//! Acceptance suite: every release gate runs here, one test per criterion,
//! each printing a `[PASS]`/`[FAIL]` line (visible with `--nocapture`).
//!
//! Criteria are serialized through a global lock so the runtime budgets are
//! measured on an otherwise idle process.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use fluidq_core::arrival::ArrivalRate;
use fluidq_core::distributions::Distribution;
use fluidq_core::elapsed::{solve, InitialCondition, QueueModel, SolveParams, Trajectory};
use fluidq_core::measures::GridMeasure;
use fluidq_core::residual;
use fluidq_core::two_param;
use fluidq_core::zhang;

static GATE: Mutex<()> = Mutex::new(());

fn gate() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

const DT: f64 = 1e-3;
const T_END: f64 = 30.0;

struct SuiteEntry {
    name: &'static str,
    model: QueueModel,
    ic: InitialCondition,
    traj: Trajectory,
}

struct Suite {
    entries: Vec<SuiteEntry>,
    solve_seconds: f64,
}

fn exp(rate: f64) -> Distribution {
    Distribution::exponential(rate).unwrap()
}

fn equilibrium_profile(gs: &Distribution, da: f64) -> GridMeasure {
    fluidq_core::elapsed::equilibrium_age_profile(gs, da).unwrap()
}

fn layer_initial(lam: f64, a: f64, gs: &Distribution, gr: &Distribution, da: f64) -> InitialCondition {
    let eta0 = zhang::patience_layer(lam, a, gr, da).unwrap();
    let nu0 = equilibrium_profile(gs, da);
    let x0 = nu0.total_mass() + eta0.total_mass();
    InitialCondition { eta0, nu0, x0 }
}

/// The benchmark suite: Markovian over/under/critically loaded, sinusoidal
/// arrivals, deterministic service, uniform patience, and the queue-layer
/// initial condition.
fn suite() -> &'static Suite {
    static SUITE: OnceLock<Suite> = OnceLock::new();
    SUITE.get_or_init(|| {
        let mut defs: Vec<(&'static str, QueueModel, InitialCondition)> = Vec::new();
        let empty = InitialCondition::empty(DT);
        defs.push((
            "mmn_overloaded",
            QueueModel { rate: ArrivalRate::constant(2.0).unwrap(), service: exp(1.0), patience: exp(0.5) },
            empty.clone(),
        ));
        defs.push((
            "mmn_underloaded",
            QueueModel { rate: ArrivalRate::constant(0.5).unwrap(), service: exp(1.0), patience: exp(0.5) },
            empty.clone(),
        ));
        defs.push((
            "mmn_critical",
            QueueModel { rate: ArrivalRate::constant(1.0).unwrap(), service: exp(1.0), patience: exp(0.5) },
            empty.clone(),
        ));
        defs.push((
            "sinusoidal",
            QueueModel {
                rate: ArrivalRate::sinusoid(1.0, 0.5, 0.5, 0.0).unwrap(),
                service: exp(1.0),
                patience: exp(0.5),
            },
            empty.clone(),
        ));
        defs.push((
            "deterministic_service",
            QueueModel {
                rate: ArrivalRate::constant(1.5).unwrap(),
                service: Distribution::deterministic(1.0).unwrap(),
                patience: exp(1.0),
            },
            empty.clone(),
        ));
        defs.push((
            "uniform_patience",
            QueueModel {
                rate: ArrivalRate::constant(2.0).unwrap(),
                service: exp(1.0),
                patience: Distribution::uniform(0.0, 2.0).unwrap(),
            },
            empty.clone(),
        ));
        let layer_model = QueueModel {
            rate: ArrivalRate::constant(2.0).unwrap(),
            service: exp(1.0),
            patience: exp(0.5),
        };
        let layer_ic = layer_initial(2.0, 0.5, &layer_model.service, &layer_model.patience, DT);
        defs.push(("corollary_layer", layer_model, layer_ic));

        let params = SolveParams { dt: DT, t_end: T_END, ..Default::default() };
        let start = Instant::now();
        let entries: Vec<SuiteEntry> = defs
            .into_iter()
            .map(|(name, model, ic)| {
                let traj = solve(&model, &ic, &params)
                    .unwrap_or_else(|e| panic!("{name} failed to solve: {e}"));
                SuiteEntry { name, model, ic, traj }
            })
            .collect();
        let solve_seconds = start.elapsed().as_secs_f64();
        Suite { entries, solve_seconds }
    })
}

fn sup_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0f64, f64::max)
}

/// First-order grid-convergence gate: the coarse residual must be at least
/// ~twice the fine one (±30% around halving; faster-than-first-order decay
/// also passes), unless both sit at the numerical floor.
fn halving_ok(coarse: f64, fine: f64, floor: f64) -> bool {
    if coarse <= floor && fine <= floor {
        return true;
    }
    let ratio = coarse / fine.max(f64::MIN_POSITIVE);
    ratio >= 1.4
}

// =========================================================================
// Criterion 1: balance invariants and runtime budget
// =========================================================================

#[test]
fn criterion_1_balance_invariants() {
    let _g = gate();
    let suite = suite();
    assert!(suite.entries.len() >= 6);
    let mut worst = 0.0f64;
    for entry in &suite.entries {
        let t = &entry.traj;
        let q0 = entry.ic.queue_mass();
        let b0 = entry.ic.nu0.total_mass();
        for j in 0..t.len() {
            let e = t.arrivals(j);
            let total = (e + entry.ic.x0 - t.x_col()[j] - t.r_col()[j] - t.d_col()[j]).abs();
            let queue = (e + q0 - t.q_col()[j] - t.k_col()[j] - t.r_col()[j]).abs();
            let server = (t.k_col()[j] - t.b_col()[j] - t.d_col()[j] + b0).abs();
            worst = worst.max(total).max(queue).max(server);
            assert!(
                total <= 1e-6 && queue <= 1e-6 && server <= 1e-6,
                "[FAIL] criterion 1: {} balance residual {:.3e} at t = {}",
                entry.name,
                total.max(queue).max(server),
                t.time(j)
            );
        }
    }
    assert!(
        suite.solve_seconds <= 60.0,
        "[FAIL] criterion 1: suite solve time {:.1}s exceeds 60s",
        suite.solve_seconds
    );
    println!(
        "[PASS] criterion 1: balance residuals <= {:.3e} on {} scenarios, solved in {:.1}s",
        worst,
        suite.entries.len(),
        suite.solve_seconds
    );
}

// =========================================================================
// Criterion 2: independent ODE oracle for the Markovian instance
// =========================================================================

fn rk4_markov(lam: f64, mu: f64, theta: f64, x0: f64, dt: f64, steps: usize) -> Vec<f64> {
    let f = |x: f64| lam - mu * x.min(1.0) - theta * (x - 1.0).max(0.0);
    let mut out = Vec::with_capacity(steps + 1);
    let mut x = x0;
    out.push(x);
    for _ in 0..steps {
        let k1 = f(x);
        let k2 = f(x + 0.5 * dt * k1);
        let k3 = f(x + 0.5 * dt * k2);
        let k4 = f(x + dt * k3);
        x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        out.push(x);
    }
    out
}

#[test]
fn criterion_2_ode_oracle() {
    let _g = gate();
    let suite = suite();
    let entry = suite.entries.iter().find(|e| e.name == "mmn_overloaded").unwrap();
    let traj = &entry.traj;
    let oracle = rk4_markov(2.0, 1.0, 0.5, 0.0, DT, traj.len() - 1);
    let sup = sup_gap(traj.x_col(), &oracle);
    assert!(sup <= 5e-3, "[FAIL] criterion 2: X oracle gap {sup:.3e}");
    let q_end = traj.q_col()[traj.len() - 1];
    assert!(
        (q_end - 2.0).abs() <= 1e-2,
        "[FAIL] criterion 2: steady queue {q_end} vs (lambda-mu)/theta = 2"
    );
    println!(
        "[PASS] criterion 2: RK4 oracle sup gap {sup:.3e} <= 5e-3, Q(30) = {q_end:.4} -> 2 +/- 1e-2"
    );
}

// =========================================================================
// Criterion 3: two-parameter equivalence round trip and clause checks
// =========================================================================

#[test]
fn criterion_3_two_parameter_round_trip() {
    let _g = gate();
    let suite = suite();
    let entry = suite.entries.iter().find(|e| e.name == "corollary_layer").unwrap();
    let traj = &entry.traj;
    let params = SolveParams { dt: DT, t_end: T_END, ..Default::default() };

    // Round trip through the two-parameter initial data.
    let slice0 = two_param::slice_from_trajectory(traj, 0).unwrap();
    let b0 = GridMeasure::new(DT, slice0.b.clone(), Vec::new()).unwrap();
    let q0 = GridMeasure::new(DT, slice0.q_tilde.clone(), Vec::new()).unwrap();
    let back = two_param::measures_from_two_param(
        &b0,
        &q0,
        &entry.model.rate,
        &entry.model.service,
        &entry.model.patience,
        &params,
    )
    .unwrap();
    let sup = sup_gap(traj.x_col(), back.x_col());
    assert!(sup <= 1e-5, "[FAIL] criterion 3: round-trip X sup gap {sup:.3e}");

    // Clause residuals at Δt = Δa = 1e−3 and their behavior under grid
    // halving. The evolution clauses (w2)/(w3) are transport-exact on the
    // lattice and sit at the floor; the rate/balance clauses are
    // first-order.
    let over = suite.entries.iter().find(|e| e.name == "mmn_overloaded").unwrap();
    let fine = two_param::check_whitt(&over.traj).unwrap();
    for (name, v) in [
        ("w2", fine.w2_max),
        ("w3", fine.w3_max),
        ("w7", fine.w7_max),
        ("w8", fine.w8_max),
        ("w9", fine.w9_max),
        ("w10", fine.w10_max),
    ] {
        assert!(v <= 5e-3, "[FAIL] criterion 3: clause {name} residual {v:.3e}");
    }
    let coarse_traj = solve(
        &over.model,
        &InitialCondition::empty(2.0 * DT),
        &SolveParams { dt: 2.0 * DT, t_end: T_END, ..Default::default() },
    )
    .unwrap();
    let coarse = two_param::check_whitt(&coarse_traj).unwrap();
    for (name, c, f) in [
        ("w2", coarse.w2_max, fine.w2_max),
        ("w3", coarse.w3_max, fine.w3_max),
        ("w7", coarse.w7_max, fine.w7_max),
        ("w8", coarse.w8_max, fine.w8_max),
        ("w9", coarse.w9_max, fine.w9_max),
        ("w10", coarse.w10_max, fine.w10_max),
    ] {
        assert!(
            halving_ok(c, f, 1e-9),
            "[FAIL] criterion 3: clause {name} does not halve ({c:.3e} -> {f:.3e})"
        );
    }
    println!(
        "[PASS] criterion 3: round-trip X gap {sup:.3e} <= 1e-5; clause residuals \
         w7 {:.3e}, w8 {:.3e}, w9 {:.3e}, w10 {:.3e} <= 5e-3 and halve with the grid",
        fine.w7_max, fine.w8_max, fine.w9_max, fine.w10_max
    );
}

// =========================================================================
// Criterion 4: monotonicity, Lipschitz frontier, dual-route agreement
// =========================================================================

#[test]
fn criterion_4_lemma_properties_and_duals() {
    let _g = gate();
    let suite = suite();
    let mut worst_dual = 0.0f64;
    for entry in &suite.entries {
        let t = &entry.traj;
        for j in 1..t.len() {
            assert!(
                t.k_col()[j] - t.k_col()[j - 1] >= -1e-9,
                "[FAIL] criterion 4: {} K decreases at t = {}",
                entry.name,
                t.time(j)
            );
            assert!(
                t.chi_col()[j] - t.chi_col()[j - 1] <= DT + 1e-9,
                "[FAIL] criterion 4: {} frontier grows faster than time at t = {}",
                entry.name,
                t.time(j)
            );
        }
        // The one-sided Lipschitz bound also holds pairwise, not just for
        // consecutive steps (sampled).
        for i in (0..t.len()).step_by(977) {
            for j in ((i + 1)..t.len()).step_by(1733) {
                assert!(
                    t.chi_col()[j] - t.chi_col()[i] <= (j - i) as f64 * DT + 1e-9,
                    "[FAIL] criterion 4: {} pairwise frontier bound at ({}, {})",
                    entry.name,
                    t.time(i),
                    t.time(j)
                );
            }
        }
        let dep = t.departure_dual();
        if let Some(gap) = dep.max_rel_gap {
            assert!(gap <= 2e-4, "[FAIL] criterion 4: {} D dual gap {gap:.3e}", entry.name);
            worst_dual = worst_dual.max(gap);
        } else {
            assert_eq!(entry.name, "deterministic_service", "hazard route must exist");
        }
        let ab = t.abandonment_dual();
        if let Some(gap) = ab.max_rel_gap {
            assert!(gap <= 2e-4, "[FAIL] criterion 4: {} R dual gap {gap:.3e}", entry.name);
            worst_dual = worst_dual.max(gap);
        }
    }
    println!(
        "[PASS] criterion 4: K monotone, frontier 1-Lipschitz on all scenarios; \
         dual-route gaps <= {worst_dual:.3e} (tol 2e-4)"
    );
}

// =========================================================================
// Criterion 5: residual/elapsed coupling with grid convergence
// =========================================================================

#[test]
fn criterion_5_coupling() {
    let _g = gate();
    let suite = suite();
    let mut worst = 0.0f64;
    for entry in &suite.entries {
        if !entry.model.service.has_density() {
            continue;
        }
        let (times, lags) = residual::default_coupling_grid(&entry.traj, 10);
        let rep = residual::check_coupling(&entry.traj, &times, &lags).unwrap();
        assert_eq!(rep.pairs, 100);
        assert!(
            rep.max_residual() <= 5e-3,
            "[FAIL] criterion 5: {} coupling residual {:.3e}",
            entry.name,
            rep.max_residual()
        );
        worst = worst.max(rep.max_residual());
    }
    // First-order grid convergence of the coupling residual.
    let model = QueueModel {
        rate: ArrivalRate::constant(2.0).unwrap(),
        service: exp(1.0),
        patience: exp(0.5),
    };
    let run = |dt: f64| -> f64 {
        let ic = layer_initial(2.0, 0.5, &model.service, &model.patience, dt);
        let traj =
            solve(&model, &ic, &SolveParams { dt, t_end: 10.0, ..Default::default() }).unwrap();
        let (times, lags) = residual::default_coupling_grid(&traj, 10);
        residual::check_coupling(&traj, &times, &lags).unwrap().max_residual()
    };
    let coarse = run(2e-3);
    let fine = run(1e-3);
    assert!(
        halving_ok(coarse, fine, 1e-10),
        "[FAIL] criterion 5: coupling residual does not halve ({coarse:.3e} -> {fine:.3e})"
    );
    println!(
        "[PASS] criterion 5: coupling residual <= {worst:.3e} on the 10x10 grid; \
         halving {coarse:.3e} -> {fine:.3e} under grid refinement"
    );
}

// =========================================================================
// Criterion 6: the conversion theorems and their counterexamples
// =========================================================================

#[test]
fn criterion_6_conversion_theorems() {
    let _g = gate();
    let suite = suite();
    let params = SolveParams { dt: DT, t_end: T_END, ..Default::default() };

    // Corollary layer: elapsed -> Zhang -> elapsed with matching columns.
    let entry = suite.entries.iter().find(|e| e.name == "corollary_layer").unwrap();
    let out = zhang::zhang_from_zuniga(&entry.traj, &params).unwrap();
    let zhang::ZunigaToZhang::Feasible(feas) = out else {
        panic!("[FAIL] criterion 6: corollary layer reported infeasible");
    };
    let fwd = feas.sup_gaps.iter().copied().fold(0.0f64, f64::max);
    assert!(fwd <= 1e-3, "[FAIL] criterion 6: forward sup gap {fwd:.3e}");
    let back = zhang::zuniga_from_zhang(&feas.zhang, &params).unwrap();
    assert!(back.feasible, "[FAIL] criterion 6: back conversion infeasible");
    let bwd = back.sup_gaps.unwrap().iter().copied().fold(0.0f64, f64::max);
    assert!(bwd <= 1e-3, "[FAIL] criterion 6: backward sup gap {bwd:.3e}");

    // Mismatched layer rate (uniform patience): certificate with a decisive
    // spread.
    let lam = 2.0;
    let model = QueueModel {
        rate: ArrivalRate::constant(lam).unwrap(),
        service: exp(1.0),
        patience: Distribution::uniform(0.0, 2.0).unwrap(),
    };
    let eta0 = zhang::patience_layer(1.5 * lam, 0.5, &model.patience, DT).unwrap();
    let nu0 = equilibrium_profile(&model.service, DT);
    let x0 = nu0.total_mass() + eta0.total_mass();
    let traj = solve(
        &model,
        &InitialCondition { eta0, nu0, x0 },
        &SolveParams { dt: DT, t_end: 5.0, ..Default::default() },
    )
    .unwrap();
    let out = zhang::zhang_from_zuniga(&traj, &SolveParams { dt: DT, t_end: 5.0, ..Default::default() })
        .unwrap();
    let zhang::ZunigaToZhang::Infeasible(cert) = out else {
        panic!("[FAIL] criterion 6: mismatched layer rate reported feasible");
    };
    assert!(
        cert.spread >= 10.0 * zhang::spread_tolerance(lam),
        "[FAIL] criterion 6: certificate spread {:.3e} not decisive",
        cert.spread
    );

    // Non-exponential Z_0 with exponential service: no consistent age
    // measure exists.
    let gs = exp(1.0);
    let gr = exp(0.5);
    let init = zhang::ZhangInitial {
        qv0: 0.0,
        z0: zhang::Z0Spec::SampledTail {
            dz: 0.01,
            values: (0..=600).map(|i| 0.8 * (1.0 - i as f64 * 0.01 / 6.0).max(0.0)).collect(),
        },
    };
    let zparams = SolveParams { dt: DT, t_end: 2.0, ..Default::default() };
    let ztraj = zhang::solve_zhang(1.0, &gs, &gr, &init, &zparams).unwrap();
    let noback = zhang::zuniga_from_zhang(&ztraj, &zparams).unwrap();
    assert!(
        !noback.feasible && noback.nu0_residual > 1e-3,
        "[FAIL] criterion 6: non-exponential Z_0 accepted (residual {:.3e})",
        noback.nu0_residual
    );

    println!(
        "[PASS] criterion 6: corollary round trip gaps {fwd:.3e}/{bwd:.3e} <= 1e-3; \
         counterexample certificate spread {:.3e}; inconsistent Z_0 rejected \
         (residual {:.3e})",
        cert.spread, noback.nu0_residual
    );
}

// =========================================================================
// Criterion 7: FWLLN validation against the simulator
// =========================================================================

#[test]
fn criterion_7_fwlln() {
    let _g = gate();
    let suite = suite();
    let entry = suite.entries.iter().find(|e| e.name == "mmn_overloaded").unwrap();
    let traj = &entry.traj;
    let fluid_x = |t: f64| {
        let j = ((t / DT).round() as usize).min(traj.len() - 1);
        traj.x_col()[j]
    };
    let start = Instant::now();
    let run = |n: usize, seed: u64| -> f64 {
        let cfg = fluidq_sim::EnsembleConfig {
            n,
            replications: 20,
            t_end: 10.0,
            base_seed: seed,
            grid_dt: 0.05,
        };
        let ens = fluidq_sim::run_ensemble(&entry.model, &entry.ic, &cfg).unwrap();
        ens.sup_distance_x(fluid_x)
    };
    // The sup distance of a 20-replication mean is itself a noisy statistic
    // (its n-scaling ratio fluctuates by ~±0.7); pooling three independent
    // ensembles per scale stabilizes the halving estimate while keeping the
    // per-ensemble parameters of the criterion.
    let seeds = [1u64, 2, 3];
    let mut d500 = Vec::new();
    let mut d2000 = Vec::new();
    for &s in &seeds {
        d500.push(run(500, s));
        d2000.push(run(2000, s));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let m500 = mean(&d500);
    let m2000 = mean(&d2000);
    assert!(
        m500 <= 0.05,
        "[FAIL] criterion 7: n=500 mean sup distance {m500:.4} (per seed {d500:?})"
    );
    let ratio = m500 / m2000;
    assert!(
        (1.4..=2.6).contains(&ratio),
        "[FAIL] criterion 7: distance ratio {ratio:.2} outside halving band \
         (d500 = {m500:.4}, d2000 = {m2000:.4})"
    );
    assert!(elapsed <= 120.0, "[FAIL] criterion 7: runtime {elapsed:.1}s exceeds 120s");
    println!(
        "[PASS] criterion 7: FWLLN sup distance {m500:.4} <= 0.05 at n=500; \
         halves to {m2000:.4} at n=2000 (ratio {ratio:.2}); runtime {elapsed:.1}s"
    );
}

// =========================================================================
// Criterion 8: byte-identical reruns
// =========================================================================

#[test]
fn criterion_8_determinism() {
    let _g = gate();
    use std::fs;
    use std::process::Command;
    let dir = std::env::temp_dir().join("fluidq_acceptance_determinism");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    let scenario = dir.join("scenario.json");
    fs::write(
        &scenario,
        r#"{
          "name": "determinism",
          "arrival": {"kind": "constant", "rate": 2.0},
          "service": {"kind": "exponential", "rate": 1.0},
          "patience": {"kind": "exponential", "rate": 0.5},
          "initial": {"kind": "layer", "a": 0.5},
          "numerics": {"dt": 0.005, "da": 0.005, "t_end": 5.0},
          "tasks": ["solve_elapsed", "residual_check", "zhang_solve", "des_validate"],
          "des": {"n": 100, "replications": 5, "t_end": 5.0, "sup_tolerance": 0.5}
        }"#,
    )
    .unwrap();
    for out in ["run_a", "run_b"] {
        let status = Command::new(env!("CARGO_BIN_EXE_fluidq"))
            .args(["run"])
            .arg(&scenario)
            .arg("--out")
            .arg(dir.join(out))
            .args(["--seed", "7", "--quiet"])
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0), "[FAIL] criterion 8: scenario run failed");
    }
    let mut files = Vec::new();
    collect_files(&dir.join("run_a"), &mut files);
    assert!(!files.is_empty());
    for file in &files {
        let rel = file.strip_prefix(dir.join("run_a")).unwrap();
        let a = fs::read(file).unwrap();
        let b = fs::read(dir.join("run_b").join(rel)).unwrap();
        assert_eq!(a, b, "[FAIL] criterion 8: {} differs between reruns", rel.display());
    }
    println!(
        "[PASS] criterion 8: {} output files byte-identical across seeded reruns",
        files.len()
    );
}

fn collect_files(dir: &std::path::Path, out: &mut Vec<std::path::PathBuf>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(&path, out);
        } else {
            out.push(path);
        }
    }
}
