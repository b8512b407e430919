//! Scenario configuration: the JSON schema and its mapping onto the solver
//! inputs. Unknown keys are rejected with the offending key named.

use fluidq_core::arrival::ArrivalRate;
use fluidq_core::distributions::Distribution;
use fluidq_core::elapsed::{equilibrium_age_profile, InitialCondition, QueueModel, SolveParams};
use fluidq_core::error::{FluidError, Result};
use fluidq_core::measures::GridMeasure;
use fluidq_core::zhang::{patience_layer, Z0Spec, ZhangInitial};
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub arrival: ArrivalSpec,
    pub service: DistributionSpec,
    pub patience: DistributionSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub numerics: Numerics,
    pub tasks: Vec<Task>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub des: Option<DesSpec>,
    /// Expected outcome of the Zhang round trip (negative tests mark
    /// `"infeasible"`).
    #[serde(default)]
    pub expect_zhang_roundtrip: Expectation,
    /// Times at which to dump the reconstructed state measures.
    #[serde(default)]
    pub dump_measures_at: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    #[default]
    Feasible,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SolveElapsed,
    WhittCheck,
    ResidualCheck,
    ZhangSolve,
    ZhangRoundtrip,
    DesValidate,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::SolveElapsed => "solve_elapsed",
            Task::WhittCheck => "whitt_check",
            Task::ResidualCheck => "residual_check",
            Task::ZhangSolve => "zhang_solve",
            Task::ZhangRoundtrip => "zhang_roundtrip",
            Task::DesValidate => "des_validate",
        }
    }

    fn requires(&self) -> Option<Task> {
        match self {
            Task::WhittCheck | Task::ResidualCheck | Task::ZhangRoundtrip | Task::DesValidate => {
                Some(Task::SolveElapsed)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalSpec {
    Constant { rate: f64 },
    Piecewise { breaks: Vec<f64>, rates: Vec<f64> },
    Sinusoid { base: f64, amplitude: f64, frequency: f64, phase: f64 },
}

impl ArrivalSpec {
    pub fn build(&self) -> Result<ArrivalRate> {
        match self {
            ArrivalSpec::Constant { rate } => ArrivalRate::constant(*rate),
            ArrivalSpec::Piecewise { breaks, rates } => {
                ArrivalRate::piecewise_constant(breaks.clone(), rates.clone())
            }
            ArrivalSpec::Sinusoid { base, amplitude, frequency, phase } => {
                ArrivalRate::sinusoid(*base, *amplitude, *frequency, *phase)
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    Exponential { rate: f64 },
    Erlang { shape: u32, rate: f64 },
    Hyperexponential { weights: Vec<f64>, rates: Vec<f64> },
    Deterministic { value: f64 },
    Uniform { lo: f64, hi: f64 },
    Weibull { shape: f64, scale: f64 },
    Tabulated { path: String },
}

impl DistributionSpec {
    pub fn build(&self, base_dir: &Path) -> Result<Distribution> {
        match self {
            DistributionSpec::Exponential { rate } => Distribution::exponential(*rate),
            DistributionSpec::Erlang { shape, rate } => Distribution::erlang(*shape, *rate),
            DistributionSpec::Hyperexponential { weights, rates } => {
                Distribution::hyperexponential(weights.clone(), rates.clone())
            }
            DistributionSpec::Deterministic { value } => Distribution::deterministic(*value),
            DistributionSpec::Uniform { lo, hi } => Distribution::uniform(*lo, *hi),
            DistributionSpec::Weibull { shape, scale } => Distribution::weibull(*shape, *scale),
            DistributionSpec::Tabulated { path } => {
                Distribution::tabulated_from_csv(&base_dir.join(path))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// Empty system.
    #[default]
    Empty,
    /// Queue layer `rate·Ḡ^r` on `[0, a]` (rate defaults to the arrival
    /// rate at 0), a fully busy service station with the stationary age
    /// profile, and the consistent total mass.
    Layer {
        a: f64,
        #[serde(default)]
        rate_override: Option<f64>,
    },
    /// Inline densities on a grid of width `da`.
    Explicit { da: f64, eta_density: Vec<f64>, nu_density: Vec<f64>, x0: f64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    pub dt: f64,
    pub da: f64,
    pub t_end: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Self { dt: 1e-3, da: 1e-3, t_end: 30.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Balance identities and non-idling at every grid point.
    pub balance: f64,
    /// Two-parameter clause residuals.
    pub whitt: f64,
    /// Residual-time coupling residuals.
    pub coupling: f64,
    /// Column sup-norm agreement between the Zhang and elapsed sides.
    pub zhang_agreement: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { balance: 1e-6, whitt: 5e-3, coupling: 5e-3, zhang_agreement: 1e-3 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesSpec {
    pub n: usize,
    pub replications: usize,
    pub t_end: f64,
    #[serde(default = "default_sup_tol")]
    pub sup_tolerance: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_sup_tol() -> f64 {
    0.05
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(text)
            .map_err(|e| FluidError::Config(format!("scenario parse error: {e}")))?;
        sc.validate()?;
        Ok(sc)
    }

    fn validate(&self) -> Result<()> {
        if !(self.numerics.dt > 0.0 && self.numerics.da > 0.0 && self.numerics.t_end > 0.0) {
            return Err(FluidError::Config("dt, da and t_end must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(FluidError::Config("no tasks requested".into()));
        }
        for task in &self.tasks {
            if let Some(dep) = task.requires() {
                if !self.tasks.contains(&dep) {
                    return Err(FluidError::Config(format!(
                        "task {} requires {} in the task list",
                        task.name(),
                        dep.name()
                    )));
                }
            }
        }
        if self.tasks.contains(&Task::DesValidate) && self.des.is_none() {
            return Err(FluidError::Config("des_validate requires a `des` section".into()));
        }
        Ok(())
    }

    pub fn build_model(&self, base_dir: &Path) -> Result<QueueModel> {
        Ok(QueueModel {
            rate: self.arrival.build()?,
            service: self.service.build(base_dir)?,
            patience: self.patience.build(base_dir)?,
        })
    }

    /// Builds `(η_0, ν_0, X(0))` from the initial spec.
    pub fn build_initial(&self, model: &QueueModel) -> Result<InitialCondition> {
        let da = self.numerics.da;
        match &self.initial {
            InitialSpec::Empty => Ok(InitialCondition::empty(da)),
            InitialSpec::Layer { a, rate_override } => {
                let lam = rate_override.unwrap_or_else(|| model.rate.rate(0.0));
                let eta0 = patience_layer(lam, *a, &model.patience, da)?;
                let nu0 = equilibrium_age_profile(&model.service, da)?;
                let x0 = nu0.total_mass() + eta0.total_mass();
                Ok(InitialCondition { eta0, nu0, x0 })
            }
            InitialSpec::Explicit { da, eta_density, nu_density, x0 } => {
                let eta0 = GridMeasure::new(*da, eta_density.clone(), Vec::new())?;
                let nu0 = GridMeasure::new(*da, nu_density.clone(), Vec::new())?;
                Ok(InitialCondition { eta0, nu0, x0: *x0 })
            }
        }
    }

    /// The Zhang-side initial condition for `zhang_solve`.
    pub fn build_zhang_initial(&self, model: &QueueModel) -> Result<ZhangInitial> {
        let lam = model.rate.rate(0.0);
        match &self.initial {
            InitialSpec::Empty => Ok(ZhangInitial::empty()),
            InitialSpec::Layer { a, .. } => {
                let nu0 = equilibrium_age_profile(&model.service, self.numerics.da)?;
                Ok(ZhangInitial { qv0: lam * a, z0: Z0Spec::FromServiceAges(nu0) })
            }
            InitialSpec::Explicit { .. } => Err(FluidError::Config(
                "zhang_solve supports the empty or layer initial conditions".into(),
            )),
        }
    }

    pub fn solve_params(&self) -> SolveParams {
        SolveParams {
            dt: self.numerics.dt,
            t_end: self.numerics.t_end,
            ..Default::default()
        }
    }
}

