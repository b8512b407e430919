//! Task dispatch: runs a scenario's tasks in dependency order, writes one
//! CSV per trajectory and one JSON report per check, and folds the verdicts
//! into an exit code.

use crate::scenario::{Expectation, Scenario, Task};
use fluidq_core::elapsed::{solve, Trajectory};
use fluidq_core::error::{FluidError, Result};
use fluidq_core::residual;
use fluidq_core::two_param;
use fluidq_core::zhang::{
    solve_zhang, spread_tolerance, zhang_from_zuniga, zuniga_from_zhang, ZunigaToZhang,
};
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub dt_override: Option<f64>,
    pub quiet: bool,
}

/// Runs a scenario file; returns the process exit code
/// (0 = all checks pass, 1 = configuration error, 2 = check failure).
pub fn run_scenario_file(path: &Path, opts: &RunOptions) -> i32 {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return 1;
        }
    };
    let hash = sha256_hex(text.as_bytes());
    let scenario = match Scenario::from_json(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let base_dir = path.parent().unwrap_or(Path::new("."));
    match run_scenario(&scenario, &hash, base_dir, opts) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut acc, b| {
        acc.push_str(&format!("{b:02x}"));
        acc
    })
}

struct TaskContext<'a> {
    scenario: &'a Scenario,
    hash: &'a str,
    out: &'a Path,
    quiet: bool,
}

impl TaskContext<'_> {
    fn report(&self, task: &str, pass: bool, residuals: serde_json::Value) -> Result<()> {
        let doc = json!({
            "scenario": self.scenario.name,
            "scenario_hash": self.hash,
            "version": VERSION,
            "task": task,
            "pass": pass,
            "residuals": residuals,
        });
        let path = self.out.join(format!("{task}.json"));
        fs::write(&path, serde_json::to_string_pretty(&doc).unwrap())
            .map_err(|e| FluidError::Config(format!("cannot write {}: {e}", path.display())))?;
        if !self.quiet {
            println!("[{}] {}", if pass { "PASS" } else { "FAIL" }, task);
        }
        Ok(())
    }

    fn write(&self, name: &str, content: &str) -> Result<()> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .map_err(|e| FluidError::Config(format!("cannot create {}: {e}", parent.display())))?;
        }
        fs::write(&path, content)
            .map_err(|e| FluidError::Config(format!("cannot write {}: {e}", path.display())))
    }
}

/// Runs all tasks; `Ok(true)` when every check passed.
pub fn run_scenario(
    scenario: &Scenario,
    hash: &str,
    base_dir: &Path,
    opts: &RunOptions,
) -> Result<bool> {
    fs::create_dir_all(&opts.out_dir)
        .map_err(|e| FluidError::Config(format!("cannot create {}: {e}", opts.out_dir.display())))?;
    let mut scenario = scenario.clone();
    if let Some(dt) = opts.dt_override {
        scenario.numerics.dt = dt;
    }
    let model = scenario.build_model(base_dir)?;
    let params = scenario.solve_params();
    let ctx = TaskContext { scenario: &scenario, hash, out: &opts.out_dir, quiet: opts.quiet };

    let mut all_pass = true;
    let mut traj: Option<Trajectory> = None;

    // Tasks run in a fixed dependency order regardless of listing order.
    let order = [
        Task::SolveElapsed,
        Task::WhittCheck,
        Task::ResidualCheck,
        Task::ZhangSolve,
        Task::ZhangRoundtrip,
        Task::DesValidate,
    ];
    for task in order {
        if !scenario.tasks.contains(&task) {
            continue;
        }
        let pass = match task {
            Task::SolveElapsed => {
                let ic = scenario.build_initial(&model)?;
                let t = solve(&model, &ic, &params)?;
                ctx.write("elapsed.csv", &t.to_csv())?;
                for &td in &scenario.dump_measures_at {
                    let j = ((td / t.dt()).round() as usize).min(t.len() - 1);
                    let state = t.state_at(j)?;
                    let (ed, ea) = state.eta.to_csv_strings();
                    ctx.write(&format!("eta_t{td:.3}_density.csv"), &ed)?;
                    ctx.write(&format!("eta_t{td:.3}_atoms.csv"), &ea)?;
                    let (nd, na) = state.nu.to_csv_strings();
                    ctx.write(&format!("nu_t{td:.3}_density.csv"), &nd)?;
                    ctx.write(&format!("nu_t{td:.3}_atoms.csv"), &na)?;
                }
                let pass = report_balance(&ctx, &t, scenario.tolerances.balance)?;
                traj = Some(t);
                pass
            }
            Task::WhittCheck => {
                let t = traj.as_ref().expect("dependency validated");
                let rep = two_param::check_whitt(t)?;
                ctx.write("heatmap.csv", &two_param::heatmap_csv(t, t.len() / 50 + 1, 20)?)?;
                let pass = rep.max_residual() <= scenario.tolerances.whitt;
                ctx.report(
                    "whitt_check",
                    pass,
                    json!({
                        "w2": rep.w2_max, "w3": rep.w3_max, "w7": rep.w7_max,
                        "w8": rep.w8_max, "w9": rep.w9_max, "w10": rep.w10_max,
                        "b_mass": rep.b_mass_max, "q_mass": rep.q_mass_max,
                        "switch_steps_skipped": rep.switch_steps_skipped,
                        "tolerance": scenario.tolerances.whitt,
                    }),
                )?;
                pass
            }
            Task::ResidualCheck => {
                let t = traj.as_ref().expect("dependency validated");
                let (times, lags) = residual::default_coupling_grid(t, 10);
                let rep = residual::check_coupling(t, &times, &lags)?;
                ctx.write("coupling.csv", &residual::coupling_csv(t, &times, &lags)?)?;
                let pass = rep.max_residual() <= scenario.tolerances.coupling;
                ctx.report(
                    "residual_check",
                    pass,
                    json!({
                        "nu_coupling": rep.max_nu_residual,
                        "eta_coupling": rep.max_eta_residual,
                        "pairs": rep.pairs,
                        "tolerance": scenario.tolerances.coupling,
                    }),
                )?;
                pass
            }
            Task::ZhangSolve => {
                let fluidq_core::arrival::ArrivalRate::Constant { rate } = model.rate else {
                    return Err(FluidError::Config(
                        "zhang_solve requires a constant arrival rate".into(),
                    ));
                };
                let init = scenario.build_zhang_initial(&model)?;
                let zt = solve_zhang(rate, &model.service, &model.patience, &init, &params)?;
                ctx.write("zhang.csv", &zt.to_csv())?;
                // Queue balance and the virtual-queue identity, asserted
                // independently of the stepping.
                let gd0 = |u: f64| model.patience.survival_integral(0.0, u);
                let mut balance = 0.0f64;
                let mut qqv = 0.0f64;
                for j in 0..zt.len() {
                    let t = zt.time(j);
                    balance = balance.max(
                        (zt.q_col()[j] + zt.k_col()[j] + zt.r_col()[j]
                            - zt.q_col()[0]
                            - rate * t)
                            .abs(),
                    );
                    qqv = qqv.max((zt.q_col()[j] - rate * gd0(zt.qv_col()[j] / rate)).abs());
                }
                let pass = balance <= 1e-6 && qqv <= 1e-8;
                ctx.report(
                    "zhang_solve",
                    pass,
                    json!({"balance": balance, "qqv": qqv}),
                )?;
                pass
            }
            Task::ZhangRoundtrip => {
                let t = traj.as_ref().expect("dependency validated");
                let lam = model.rate.rate(0.0);
                match zhang_from_zuniga(t, &params)? {
                    ZunigaToZhang::Feasible(feas) => {
                        ctx.write("zhang_converted.csv", &feas.zhang.to_csv())?;
                        let fwd = feas.sup_gaps.iter().copied().fold(0.0f64, f64::max);
                        let back = zuniga_from_zhang(&feas.zhang, &params)?;
                        let bwd = back
                            .sup_gaps
                            .map(|g| g.iter().copied().fold(0.0f64, f64::max))
                            .unwrap_or(f64::INFINITY);
                        let tol = scenario.tolerances.zhang_agreement;
                        let pass = scenario.expect_zhang_roundtrip == Expectation::Feasible
                            && fwd <= tol
                            && back.feasible
                            && bwd <= tol;
                        ctx.report(
                            "zhang_roundtrip",
                            pass,
                            json!({
                                "outcome": "feasible",
                                "expected": format!("{:?}", scenario.expect_zhang_roundtrip),
                                "forward_sup_gap": fwd,
                                "backward_sup_gap": bwd,
                                "dislim1_residual": feas.dislim1_residual,
                                "qv_chi_residual": back.qv_chi_residual,
                                "tolerance": tol,
                            }),
                        )?;
                        pass
                    }
                    ZunigaToZhang::Infeasible(cert) => {
                        let doc = json!({
                            "t_fail": cert.t_fail,
                            "probe_x": cert.probe_x,
                            "z_values": cert.z_values,
                            "spread": cert.spread,
                            "unsatisfiable_probe": cert.unsatisfiable,
                        });
                        ctx.write(
                            "zhang_infeasibility.json",
                            &serde_json::to_string_pretty(&doc).unwrap(),
                        )?;
                        let expected = scenario.expect_zhang_roundtrip == Expectation::Infeasible;
                        let decisive =
                            cert.unsatisfiable || cert.spread >= 10.0 * spread_tolerance(lam);
                        let pass = expected && decisive;
                        ctx.report(
                            "zhang_roundtrip",
                            pass,
                            json!({
                                "outcome": if expected { "infeasible: expected" } else { "infeasible" },
                                "expected": format!("{:?}", scenario.expect_zhang_roundtrip),
                                "t_fail": cert.t_fail,
                                "spread": cert.spread,
                                "unsatisfiable_probe": cert.unsatisfiable,
                            }),
                        )?;
                        pass
                    }
                }
            }
            Task::DesValidate => {
                let t = traj.as_ref().expect("dependency validated");
                let des = scenario.des.as_ref().expect("validated");
                let ic = scenario.build_initial(&model)?;
                let cfg = fluidq_sim::EnsembleConfig {
                    n: des.n,
                    replications: des.replications,
                    t_end: des.t_end.min(params.t_end),
                    base_seed: opts.seed.or(des.seed).unwrap_or(0),
                    grid_dt: 0.05,
                };
                let ens = fluidq_sim::run_ensemble(&model, &ic, &cfg)?;
                ctx.write("des_aggregate.csv", &ens.to_csv())?;
                for (i, path) in ens.paths.iter().enumerate() {
                    ctx.write(&format!("des/rep_{i:03}.csv"), &path.to_csv())?;
                }
                let fluid_x = |tt: f64| {
                    let j = ((tt / t.dt()).round() as usize).min(t.len() - 1);
                    t.x_col()[j]
                };
                let sup = ens.sup_distance_x(fluid_x);
                let pass = sup <= des.sup_tolerance;
                ctx.report(
                    "des_validate",
                    pass,
                    json!({
                        "sup_distance": sup,
                        "tolerance": des.sup_tolerance,
                        "n": des.n,
                        "replications": des.replications,
                        "seed": cfg.base_seed,
                    }),
                )?;
                pass
            }
        };
        all_pass &= pass;
    }
    Ok(all_pass)
}

fn report_balance(ctx: &TaskContext<'_>, t: &Trajectory, tol: f64) -> Result<bool> {
    let ic = t.initial();
    let q0 = ic.queue_mass();
    let b0 = ic.nu0.total_mass();
    let mut total_res = 0.0f64;
    let mut queue_res = 0.0f64;
    let mut server_res = 0.0f64;
    let mut nonidle = 0.0f64;
    let mut k_min_inc = f64::INFINITY;
    let mut chi_lip = f64::NEG_INFINITY;
    for j in 0..t.len() {
        let e = t.arrivals(j);
        total_res = total_res.max((e + ic.x0 - t.x_col()[j] - t.r_col()[j] - t.d_col()[j]).abs());
        queue_res = queue_res.max((e + q0 - t.q_col()[j] - t.k_col()[j] - t.r_col()[j]).abs());
        server_res = server_res.max((t.k_col()[j] - t.b_col()[j] - t.d_col()[j] + b0).abs());
        nonidle = nonidle.max(t.q_col()[j] * (1.0 - t.b_col()[j]));
        if j > 0 {
            k_min_inc = k_min_inc.min(t.k_col()[j] - t.k_col()[j - 1]);
            chi_lip = chi_lip.max(t.chi_col()[j] - t.chi_col()[j - 1] - t.dt());
        }
    }
    let pass = total_res <= tol
        && queue_res <= tol
        && server_res <= tol
        && nonidle <= 1e-9
        && k_min_inc >= -1e-9
        && chi_lip <= 1e-9;
    ctx.report(
        "solve_elapsed",
        pass,
        json!({
            "total_balance": total_res,
            "queue_balance": queue_res,
            "server_balance": server_res,
            "non_idling": nonidle,
            "k_min_increment": k_min_inc,
            "chi_lipschitz_excess": chi_lip,
            "tolerance": tol,
        }),
    )?;
    Ok(pass)
}
