//! Lifetime laws (service and patience time distributions).
//!
//! A [`Distribution`] is a probability law G on `[0, ∞)` with `G(0+) = 0`,
//! possibly carrying atoms and possibly of finite support. The right support
//! endpoint is `H = inf{x : G(x) = 1}`. Beyond the CDF/CCDF/density/hazard,
//! the fluid equations consume two derived objects:
//!
//! * the integrated CCDF `G_d(x) = ∫_0^x Ḡ(s) ds` and its inverse, and
//! * the Stieltjes measures `dG` and the conditioning measure
//!   `dM(x) = 1{x<H} Ḡ(x−)⁻¹ dG(x) + 1{G(H−)<1} δ_H(dx)`,
//!   which replaces the hazard rate when no density exists.
//!
//! Values are immutable after construction and safe to share across threads.
//! Sampling takes a caller-owned random stream; there is no hidden state.

use crate::error::{FluidError, Result};
use rand::Rng;
use statrs::function::gamma::{gamma_lr, ln_gamma};

/// Mass below which a survival function is treated as numerically zero when
/// choosing truncation horizons for infinite-support laws.
pub const SURVIVAL_FLOOR: f64 = 1e-10;

/// A lifetime law on `[0, ∞)` with `G(0+) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    /// Exponential with the given rate: `Ḡ(x) = e^{−rate·x}`.
    Exponential { rate: f64 },
    /// Erlang (Gamma with integer shape): sum of `shape` i.i.d. exponentials.
    Erlang { shape: u32, rate: f64 },
    /// Mixture of exponentials: `Ḡ(x) = Σ wᵢ e^{−rateᵢ·x}`.
    Hyperexponential { weights: Vec<f64>, rates: Vec<f64> },
    /// Unit mass at `value` (an atom; no density exists).
    Deterministic { value: f64 },
    /// Uniform on `[lo, hi]`, `0 ≤ lo < hi`.
    Uniform { lo: f64, hi: f64 },
    /// Weibull with CDF `1 − exp(−(x/scale)^shape)`.
    Weibull { shape: f64, scale: f64 },
    /// Piecewise-linear CDF between knots plus explicit atoms.
    Tabulated(Tabulated),
}

/// Piecewise-linear CDF between grid knots, plus a finite sorted atom list.
///
/// `cdf[i]` is the right-continuous value `G(xs[i])` (atom at `xs[i]`
/// included). Between knots the CDF rises linearly to the left limit of the
/// next knot. The first knot must be `(0, 0)` (standing assumption
/// `G(0+) = 0`) and the last CDF value must be 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tabulated {
    xs: Vec<f64>,
    cdf: Vec<f64>,
    atoms: Vec<(f64, f64)>,
    /// ∫_0^{xs[i]} Ḡ(s) ds, precomputed (the CDF is piecewise linear, so
    /// these are exact).
    gd_knots: Vec<f64>,
}

/// Which Stieltjes measure of the law to integrate against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LifetimeMeasure {
    /// The lifetime measure dG itself.
    Lifetime,
    /// The conditioning measure dM = 1{x<H} Ḡ(x−)⁻¹ dG + 1{G(H−)<1} δ_H.
    Conditioning,
}

impl Distribution {
    // =====================================================================
    // Constructors
    // =====================================================================

    pub fn exponential(rate: f64) -> Result<Self> {
        if !rate.is_finite() || rate <= 0.0 {
            return Err(FluidError::InvalidInput(format!(
                "exponential rate must be positive and finite, got {rate}"
            )));
        }
        Ok(Self::Exponential { rate })
    }

    pub fn erlang(shape: u32, rate: f64) -> Result<Self> {
        if shape == 0 {
            return Err(FluidError::InvalidInput("erlang shape must be >= 1".into()));
        }
        if !rate.is_finite() || rate <= 0.0 {
            return Err(FluidError::InvalidInput(format!(
                "erlang rate must be positive and finite, got {rate}"
            )));
        }
        Ok(Self::Erlang { shape, rate })
    }

    pub fn hyperexponential(weights: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != rates.len() {
            return Err(FluidError::InvalidInput(
                "hyperexponential needs matching non-empty weight and rate lists".into(),
            ));
        }
        if weights.iter().any(|&w| !w.is_finite() || w <= 0.0) {
            return Err(FluidError::InvalidInput(
                "hyperexponential weights must be positive".into(),
            ));
        }
        if rates.iter().any(|&r| !r.is_finite() || r <= 0.0) {
            return Err(FluidError::InvalidInput(
                "hyperexponential rates must be positive".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(FluidError::InvalidInput(format!(
                "hyperexponential weights must sum to 1, got {total}"
            )));
        }
        Ok(Self::Hyperexponential { weights, rates })
    }

    pub fn deterministic(value: f64) -> Result<Self> {
        if !value.is_finite() || value <= 0.0 {
            return Err(FluidError::InvalidInput(format!(
                "deterministic value must be positive (G(0+) = 0), got {value}"
            )));
        }
        Ok(Self::Deterministic { value })
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo < 0.0 || lo >= hi {
            return Err(FluidError::InvalidInput(format!(
                "uniform requires 0 <= lo < hi, got lo={lo}, hi={hi}"
            )));
        }
        Ok(Self::Uniform { lo, hi })
    }

    pub fn weibull(shape: f64, scale: f64) -> Result<Self> {
        if !shape.is_finite() || !scale.is_finite() || shape <= 0.0 || scale <= 0.0 {
            return Err(FluidError::InvalidInput(format!(
                "weibull requires shape > 0 and scale > 0, got shape={shape}, scale={scale}"
            )));
        }
        Ok(Self::Weibull { shape, scale })
    }

    /// Builds a tabulated law from `(x, cdf)` knots and an atom list.
    ///
    /// Knot CDF values are right-continuous (they include any atom at the
    /// knot). Atom locations must coincide with knots and be positive.
    pub fn tabulated(knots: Vec<(f64, f64)>, atoms: Vec<(f64, f64)>) -> Result<Self> {
        Tabulated::new(knots, atoms).map(Self::Tabulated)
    }

    /// Loads a tabulated law from a CSV file with columns `x,cdf[,atom]`.
    ///
    /// A header row is permitted and skipped if the first field does not
    /// parse as a number.
    pub fn tabulated_from_csv(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FluidError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut knots = Vec::new();
        let mut atoms = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() < 2 {
                return Err(FluidError::Config(format!(
                    "{}:{}: expected `x,cdf[,atom]`",
                    path.display(),
                    lineno + 1
                )));
            }
            let x: f64 = match fields[0].parse() {
                Ok(v) => v,
                Err(_) if lineno == 0 => continue, // header row
                Err(e) => {
                    return Err(FluidError::Config(format!(
                        "{}:{}: bad x value: {e}",
                        path.display(),
                        lineno + 1
                    )))
                }
            };
            let f: f64 = fields[1].parse().map_err(|e| {
                FluidError::Config(format!("{}:{}: bad cdf value: {e}", path.display(), lineno + 1))
            })?;
            knots.push((x, f));
            if fields.len() >= 3 && !fields[2].is_empty() {
                let m: f64 = fields[2].parse().map_err(|e| {
                    FluidError::Config(format!(
                        "{}:{}: bad atom mass: {e}",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                if m > 0.0 {
                    atoms.push((x, m));
                }
            }
        }
        Self::tabulated(knots, atoms)
    }

    // =====================================================================
    // CDF family
    // =====================================================================

    /// Right support endpoint `H = inf{x : G(x) = 1}` (may be `+∞`).
    pub fn support_end(&self) -> f64 {
        match self {
            Self::Exponential { .. }
            | Self::Erlang { .. }
            | Self::Hyperexponential { .. }
            | Self::Weibull { .. } => f64::INFINITY,
            Self::Deterministic { value } => *value,
            Self::Uniform { hi, .. } => *hi,
            Self::Tabulated(t) => t.support_end(),
        }
    }

    /// CDF `G(x)`, extended by 0 below zero (total on all of ℝ).
    pub fn cdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        match self {
            Self::Exponential { rate } => -(-rate * x).exp_m1(),
            Self::Erlang { shape, rate } => erlang_cdf(*shape, *rate, x),
            Self::Hyperexponential { weights, rates } => {
                1.0 - weights
                    .iter()
                    .zip(rates)
                    .map(|(w, r)| w * (-r * x).exp())
                    .sum::<f64>()
            }
            Self::Deterministic { value } => {
                if x >= *value {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            Self::Weibull { shape, scale } => -(-(x / scale).powf(*shape)).exp_m1(),
            Self::Tabulated(t) => t.cdf(x),
        }
    }

    /// Left limit `G(x−) = G(x) − (atom mass at x)`.
    pub fn cdf_left(&self, x: f64) -> f64 {
        self.cdf(x) - self.atom_at(x)
    }

    /// Survival function `Ḡ(x) = 1 − G(x)`, total on all of ℝ.
    pub fn survival(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 1.0;
        }
        match self {
            // Closed forms avoid cancellation for large x.
            Self::Exponential { rate } => (-rate * x).exp(),
            Self::Hyperexponential { weights, rates } => weights
                .iter()
                .zip(rates)
                .map(|(w, r)| w * (-r * x).exp())
                .sum::<f64>(),
            Self::Weibull { shape, scale } => (-(x / scale).powf(*shape)).exp(),
            _ => 1.0 - self.cdf(x),
        }
    }

    /// Left limit of the survival function, `Ḡ(x−)`.
    pub fn survival_left(&self, x: f64) -> f64 {
        self.survival(x) + self.atom_at(x)
    }

    /// Complementary CDF at `x ≥ 0`; `ccdf(x) = 0` for `x ≥ H`.
    pub fn ccdf(&self, x: f64) -> Result<f64> {
        if !x.is_finite() && !(x == f64::INFINITY) {
            return Err(FluidError::Domain(format!("ccdf: x must be finite, got {x}")));
        }
        if x < 0.0 {
            return Err(FluidError::Domain(format!("ccdf: x must be >= 0, got {x}")));
        }
        Ok(self.survival(x))
    }

    /// Atom mass at exactly `x` (0 for continuous laws).
    pub fn atom_at(&self, x: f64) -> f64 {
        match self {
            Self::Deterministic { value } => {
                if x == *value {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tabulated(t) => t
                .atoms
                .iter()
                .find(|(loc, _)| *loc == x)
                .map(|(_, m)| *m)
                .unwrap_or(0.0),
            _ => 0.0,
        }
    }

    /// The finite atom list, sorted by location.
    pub fn atoms(&self) -> Vec<(f64, f64)> {
        match self {
            Self::Deterministic { value } => vec![(*value, 1.0)],
            Self::Tabulated(t) => t.atoms.clone(),
            _ => Vec::new(),
        }
    }

    /// True when the law has no atoms.
    pub fn is_continuous(&self) -> bool {
        self.atoms().is_empty()
    }

    /// True when the law is absolutely continuous (a density exists).
    pub fn has_density(&self) -> bool {
        match self {
            Self::Deterministic { .. } => false,
            Self::Tabulated(t) => t.atoms.is_empty(),
            _ => true,
        }
    }

    /// True when the CDF is Lipschitz (bounded density, no atoms).
    pub fn is_lipschitz(&self) -> bool {
        match self {
            Self::Exponential { .. } | Self::Hyperexponential { .. } | Self::Uniform { .. } => true,
            Self::Erlang { .. } => true,
            Self::Weibull { shape, .. } => *shape >= 1.0,
            Self::Deterministic { .. } => false,
            Self::Tabulated(t) => t.atoms.is_empty(),
        }
    }

    /// Density `g(x)` where one exists.
    pub fn density(&self, x: f64) -> Option<f64> {
        if !self.has_density() {
            return None;
        }
        if x < 0.0 {
            return Some(0.0);
        }
        Some(match self {
            Self::Exponential { rate } => rate * (-rate * x).exp(),
            Self::Erlang { shape, rate } => erlang_density(*shape, *rate, x),
            Self::Hyperexponential { weights, rates } => weights
                .iter()
                .zip(rates)
                .map(|(w, r)| w * r * (-r * x).exp())
                .sum(),
            Self::Uniform { lo, hi } => {
                if x >= *lo && x < *hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            Self::Weibull { shape, scale } => {
                if x == 0.0 {
                    match shape.partial_cmp(&1.0).unwrap() {
                        std::cmp::Ordering::Less => f64::INFINITY,
                        std::cmp::Ordering::Equal => 1.0 / scale,
                        std::cmp::Ordering::Greater => 0.0,
                    }
                } else {
                    let z = x / scale;
                    (shape / scale) * z.powf(shape - 1.0) * (-z.powf(*shape)).exp()
                }
            }
            Self::Tabulated(t) => t.density(x),
            Self::Deterministic { .. } => unreachable!(),
        })
    }

    /// Hazard rate `h(x) = g(x)/Ḡ(x)` on `[0, H)`.
    ///
    /// Returns [`FluidError::NoDensity`] when the law has atoms or no
    /// density (callers must use the Stieltjes `dM` path), and a domain
    /// error for `x < 0` or `x ≥ H`.
    pub fn hazard(&self, x: f64) -> Result<f64> {
        if !self.has_density() {
            return Err(FluidError::NoDensity("hazard".into()));
        }
        if x < 0.0 || x >= self.support_end() {
            return Err(FluidError::Domain(format!(
                "hazard: x must lie in [0, H), got {x} with H = {}",
                self.support_end()
            )));
        }
        let s = self.survival(x);
        if s <= 0.0 {
            return Err(FluidError::Domain(format!("hazard: survival vanishes at {x}")));
        }
        Ok(self.density(x).unwrap() / s)
    }

    // =====================================================================
    // Integrated CCDF G_d and its inverse
    // =====================================================================

    /// `∫_a^b Ḡ(u) du` with the survival function extended by 1 below 0.
    ///
    /// This is the workhorse behind [`integrated_ccdf`](Self::integrated_ccdf)
    /// and also serves the residual-time formulas, which evaluate the tail
    /// integral at negative arguments.
    pub fn survival_integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let below = if a < 0.0 { (b.min(0.0)) - a } else { 0.0 };
        let lo = a.max(0.0);
        let hi = b.max(0.0);
        below + self.gd(hi) - self.gd(lo)
    }

    /// `G_d(x) = ∫_0^x Ḡ(s) ds` for `x ≥ 0`; non-decreasing, concave, with
    /// limit the mean.
    pub fn integrated_ccdf(&self, x: f64) -> Result<f64> {
        if x.is_nan() || x < 0.0 {
            return Err(FluidError::Domain(format!(
                "integrated_ccdf: x must be >= 0, got {x}"
            )));
        }
        Ok(self.gd(x))
    }

    fn gd(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match self {
            Self::Exponential { rate } => -(-rate * x).exp_m1() / rate,
            Self::Erlang { shape, rate } => {
                // ∫_0^x Ḡ = (k − e^{−θx} Σ_{i<k} (k−i)(θx)^i/i!) / θ
                let k = *shape as usize;
                if x == f64::INFINITY {
                    return k as f64 / rate;
                }
                let z = rate * x;
                let mut term = 1.0f64; // (θx)^i / i!
                let mut sum = k as f64; // i = 0 contribution (k−0)·1
                for i in 1..k {
                    term *= z / i as f64;
                    sum += (k - i) as f64 * term;
                }
                ((k as f64) - (-z).exp() * sum) / rate
            }
            Self::Hyperexponential { weights, rates } => weights
                .iter()
                .zip(rates)
                .map(|(w, r)| w * -(-r * x).exp_m1() / r)
                .sum(),
            Self::Deterministic { value } => x.min(*value),
            Self::Uniform { lo, hi } => {
                if x <= *lo {
                    x
                } else if x >= *hi {
                    (lo + hi) / 2.0
                } else {
                    x - (x - lo) * (x - lo) / (2.0 * (hi - lo))
                }
            }
            Self::Weibull { shape, scale } => {
                // ∫_0^x e^{−(u/s)^k} du = s·Γ(1+1/k)·P(1/k, (x/s)^k)
                let m = self.mean();
                if x == f64::INFINITY {
                    return m;
                }
                m * gamma_lr(1.0 / shape, (x / scale).powf(*shape))
            }
            Self::Tabulated(t) => t.gd(x),
        }
    }

    /// Mean lifetime `∫_0^∞ Ḡ(s) ds` (finite for every supported family).
    pub fn mean(&self) -> f64 {
        match self {
            Self::Exponential { rate } => 1.0 / rate,
            Self::Erlang { shape, rate } => *shape as f64 / rate,
            Self::Hyperexponential { weights, rates } => {
                weights.iter().zip(rates).map(|(w, r)| w / r).sum()
            }
            Self::Deterministic { value } => *value,
            Self::Uniform { lo, hi } => (lo + hi) / 2.0,
            Self::Weibull { shape, scale } => scale * (ln_gamma(1.0 + 1.0 / shape)).exp(),
            Self::Tabulated(t) => *t.gd_knots.last().unwrap(),
        }
    }

    /// Smallest `x` with `G_d(x) ≥ m − 1e−12`.
    ///
    /// Errors when `m` is at or above the mean (the range of `G_d`).
    pub fn inverse_integrated_ccdf(&self, m: f64) -> Result<f64> {
        if m.is_nan() || m < 0.0 {
            return Err(FluidError::Domain(format!(
                "inverse_integrated_ccdf: m must be >= 0, got {m}"
            )));
        }
        if m == 0.0 {
            return Ok(0.0);
        }
        let mean = self.mean();
        if m >= mean {
            return Err(FluidError::OutOfRange(format!(
                "inverse_integrated_ccdf: m = {m} is at or above the mean {mean}"
            )));
        }
        match self {
            Self::Exponential { rate } => Ok(-(-rate * m).ln_1p() / rate),
            Self::Deterministic { .. } => Ok(m),
            Self::Uniform { lo, hi } => {
                if m <= *lo {
                    Ok(m)
                } else {
                    let len = hi - lo;
                    let u = len * (1.0 - (1.0 - 2.0 * (m - lo) / len).max(0.0).sqrt());
                    Ok(lo + u)
                }
            }
            _ => {
                // G_d is continuous, strictly increasing on [0, H); bisect.
                let mut lo = 0.0f64;
                let mut hi = 1.0f64.min(self.support_end());
                while self.gd(hi) < m {
                    lo = hi;
                    hi = (hi * 2.0).min(self.support_end());
                    if hi >= self.support_end() {
                        break;
                    }
                }
                let mut hi = hi.min(self.support_end());
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if hi - lo <= 1e-15 * hi.max(1.0) {
                        break;
                    }
                    if self.gd(mid) >= m {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                Ok(hi)
            }
        }
    }

    /// Smallest age `x` with `Ḡ(x) < eps`; the truncation horizon used for
    /// infinite-support laws (`A_max` when `eps` is [`SURVIVAL_FLOOR`]).
    pub fn age_horizon(&self, eps: f64) -> f64 {
        let h = self.support_end();
        if h.is_finite() {
            return h;
        }
        match self {
            Self::Exponential { rate } => -eps.ln() / rate,
            Self::Weibull { shape, scale } => scale * (-eps.ln()).powf(1.0 / shape),
            _ => {
                let mut hi = 1.0f64;
                while self.survival(hi) >= eps && hi < 1e12 {
                    hi *= 2.0;
                }
                let mut lo = hi / 2.0;
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if self.survival(mid) < eps {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                hi
            }
        }
    }

    // =====================================================================
    // Quantiles and sampling
    // =====================================================================

    /// Smallest `x` with `G(x) ≥ p`, for `p ∈ [0, 1)`.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&p) {
            return Err(FluidError::Domain(format!(
                "quantile: p must lie in [0, 1), got {p}"
            )));
        }
        if p == 0.0 {
            return Ok(0.0);
        }
        match self {
            Self::Exponential { rate } => Ok(-(-p).ln_1p() / rate),
            Self::Deterministic { value } => Ok(*value),
            Self::Uniform { lo, hi } => Ok(lo + p * (hi - lo)),
            Self::Weibull { shape, scale } => Ok(scale * (-(-p).ln_1p()).powf(1.0 / shape)),
            Self::Tabulated(t) => Ok(t.quantile(p)),
            _ => {
                let mut lo = 0.0f64;
                let mut hi = 1.0f64;
                while self.cdf(hi) < p {
                    lo = hi;
                    hi *= 2.0;
                    if hi > 1e12 {
                        break;
                    }
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if hi - lo <= 1e-15 * hi.max(1.0) {
                        break;
                    }
                    if self.cdf(mid) >= p {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                Ok(hi)
            }
        }
    }

    /// Inverse-CDF sample from a caller-owned stream.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.quantile(u).expect("u in [0,1) is always a valid quantile argument")
    }

    /// Residual lifetime conditioned on survival to `age`: a sample from the
    /// law with survival `Ḡ(age + ·)/Ḡ(age)`.
    pub fn sample_conditional_excess<R: Rng + ?Sized>(&self, age: f64, rng: &mut R) -> Result<f64> {
        let s_age = self.survival(age);
        if s_age <= 0.0 {
            return Err(FluidError::Domain(format!(
                "conditional excess: survival vanishes at age {age}"
            )));
        }
        let u: f64 = rng.random();
        // Target survival level u·Ḡ(age) ⇒ x = quantile(1 − u·Ḡ(age)).
        let x = self.quantile(1.0 - u * s_age)?;
        Ok((x - age).max(0.0))
    }

    // =====================================================================
    // Stieltjes integration
    // =====================================================================

    /// View of the law as the Stieltjes measure `dG` or `dM`.
    pub fn measure(&self, which: LifetimeMeasure) -> StieltjesView<'_> {
        StieltjesView { dist: self, which }
    }

    /// `∫_{(a,b]} f dG` or `∫_{(a,b]} f dM` with atoms handled exactly and
    /// the absolutely-continuous part integrated by composite midpoint rule
    /// with cell width `da` (exact cell masses from CDF differences).
    pub fn stieltjes_integrate(
        &self,
        f: impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        which: LifetimeMeasure,
        da: f64,
    ) -> Result<f64> {
        self.measure(which).integrate(f, a, b, da)
    }
}

/// A [`Distribution`] viewed as one of its Stieltjes measures.
///
/// The terminal atom of dM at `H` is present exactly when `G(H−) < 1`.
#[derive(Debug, Clone, Copy)]
pub struct StieltjesView<'a> {
    dist: &'a Distribution,
    which: LifetimeMeasure,
}

impl StieltjesView<'_> {
    /// `∫_{(a,b]} f dμ`; see [`Distribution::stieltjes_integrate`].
    pub fn integrate(&self, f: impl Fn(f64) -> f64, a: f64, b: f64, da: f64) -> Result<f64> {
        if !(a >= 0.0 && b >= a) {
            return Err(FluidError::Domain(format!(
                "stieltjes integrate: need 0 <= a <= b, got a={a}, b={b}"
            )));
        }
        if !da.is_finite() || da <= 0.0 {
            return Err(FluidError::InvalidInput(format!("cell width must be > 0, got {da}")));
        }
        let h = self.dist.support_end();
        // Nothing beyond H except a possible terminal dM atom.
        let hi = b.min(if h.is_finite() { h } else { self.dist.age_horizon(SURVIVAL_FLOOR) });
        let mut total = 0.0f64;
        let atoms = self.dist.atoms();

        if hi > a {
            let cells = ((hi - a) / da).ceil() as usize;
            let width = (hi - a) / cells as f64;
            let mut cdf_lo = self.dist.cdf(a);
            for i in 0..cells {
                let lo = a + i as f64 * width;
                let up = if i + 1 == cells { hi } else { a + (i + 1) as f64 * width };
                let cdf_hi = self.dist.cdf(up);
                // Atom mass inside (lo, up] is removed from the cell mass and
                // accounted for exactly below.
                let atom_mass: f64 = atoms
                    .iter()
                    .filter(|(x, _)| *x > lo && *x <= up)
                    .map(|(_, m)| *m)
                    .sum();
                let ac_mass = (cdf_hi - cdf_lo - atom_mass).max(0.0);
                if ac_mass > 0.0 {
                    let mid = 0.5 * (lo + up);
                    let fv = f(mid);
                    if !fv.is_finite() {
                        return Err(FluidError::Numeric(format!(
                            "integrand is not finite at {mid}"
                        )));
                    }
                    total += match self.which {
                        LifetimeMeasure::Lifetime => fv * ac_mass,
                        LifetimeMeasure::Conditioning => {
                            let s = self.dist.survival_left(mid);
                            if s <= 0.0 {
                                return Err(FluidError::Numeric(format!(
                                    "conditioning measure: survival vanishes at {mid}"
                                )));
                            }
                            fv * ac_mass / s
                        }
                    };
                }
                cdf_lo = cdf_hi;
            }
        }

        // Atoms at x < H, exactly.
        for (x, m) in &atoms {
            if *x > a && *x <= b && *x < h {
                let fv = f(*x);
                if !fv.is_finite() {
                    return Err(FluidError::Numeric(format!("integrand is not finite at {x}")));
                }
                total += match self.which {
                    LifetimeMeasure::Lifetime => fv * m,
                    LifetimeMeasure::Conditioning => {
                        let s = self.dist.survival_left(*x);
                        if s <= 0.0 {
                            return Err(FluidError::Numeric(format!(
                                "conditioning measure: survival vanishes at {x}-"
                            )));
                        }
                        fv * m / s
                    }
                };
            }
        }

        match self.which {
            LifetimeMeasure::Lifetime => {
                // Atom of dG exactly at H (e.g. deterministic laws).
                if h.is_finite() && h > a && h <= b {
                    let m = self.dist.atom_at(h);
                    if m > 0.0 {
                        total += f(h) * m;
                    }
                }
            }
            LifetimeMeasure::Conditioning => {
                // Terminal unit atom of dM at H when G(H−) < 1.
                if h.is_finite() && h > a && h <= b && self.dist.cdf_left(h) < 1.0 {
                    total += f(h);
                }
            }
        }
        Ok(total)
    }
}

// =========================================================================
// Tabulated implementation
// =========================================================================

impl Tabulated {
    fn new(knots: Vec<(f64, f64)>, atoms: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(FluidError::InvalidInput("tabulated law needs >= 2 knots".into()));
        }
        let xs: Vec<f64> = knots.iter().map(|(x, _)| *x).collect();
        let cdf: Vec<f64> = knots.iter().map(|(_, f)| *f).collect();
        if xs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FluidError::InvalidInput("tabulated knots must be strictly increasing".into()));
        }
        if xs[0] != 0.0 || cdf[0] != 0.0 {
            return Err(FluidError::InvalidInput(
                "tabulated law must start at knot (0, 0); G(0+) = 0".into(),
            ));
        }
        if cdf.windows(2).any(|w| w[0] > w[1] + 1e-15) {
            return Err(FluidError::InvalidInput("tabulated CDF must be non-decreasing".into()));
        }
        if (cdf.last().unwrap() - 1.0).abs() > 1e-12 {
            return Err(FluidError::InvalidInput("tabulated CDF must end at 1".into()));
        }
        let mut atoms = atoms;
        atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for (loc, m) in &atoms {
            if *m <= 0.0 {
                return Err(FluidError::InvalidInput("atom masses must be > 0".into()));
            }
            if *loc <= 0.0 {
                return Err(FluidError::InvalidInput("atoms must lie strictly above 0".into()));
            }
            let Some(i) = xs.iter().position(|x| x == loc) else {
                return Err(FluidError::InvalidInput(format!(
                    "atom at {loc} does not coincide with a knot"
                )));
            };
            // The jump must fit between the previous knot value and G(loc).
            if cdf[i] - m < cdf[i - 1] - 1e-12 {
                return Err(FluidError::InvalidInput(format!(
                    "atom mass {m} at {loc} exceeds the CDF increment"
                )));
            }
        }
        let mut t = Tabulated { xs, cdf, atoms, gd_knots: Vec::new() };
        t.gd_knots = t.compute_gd_knots();
        Ok(t)
    }

    fn atom_at(&self, x: f64) -> f64 {
        self.atoms.iter().find(|(loc, _)| *loc == x).map(|(_, m)| *m).unwrap_or(0.0)
    }

    /// CDF left limit at knot index `i`.
    fn cdf_left_knot(&self, i: usize) -> f64 {
        self.cdf[i] - self.atom_at(self.xs[i])
    }

    fn support_end(&self) -> f64 {
        for (i, f) in self.cdf.iter().enumerate() {
            if *f >= 1.0 - 1e-15 {
                return self.xs[i];
            }
        }
        *self.xs.last().unwrap()
    }

    fn segment(&self, x: f64) -> usize {
        // Largest i with xs[i] <= x; x is within [xs[i], xs[i+1]).
        match self.xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => i,
            Err(i) => i - 1,
        }
    }

    fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= *self.xs.last().unwrap() {
            return 1.0;
        }
        let i = self.segment(x);
        if self.xs[i] == x {
            return self.cdf[i];
        }
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        let (f0, f1) = (self.cdf[i], self.cdf_left_knot(i + 1));
        f0 + (f1 - f0) * (x - x0) / (x1 - x0)
    }

    fn density(&self, x: f64) -> f64 {
        if x < 0.0 || x >= *self.xs.last().unwrap() {
            return 0.0;
        }
        let i = self.segment(x);
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        (self.cdf_left_knot(i + 1) - self.cdf[i]) / (x1 - x0)
    }

    fn compute_gd_knots(&self) -> Vec<f64> {
        // Ḡ is piecewise linear; integrate each segment exactly
        // (trapezoid of the linear part, atoms shift the level at knots).
        let mut out = Vec::with_capacity(self.xs.len());
        out.push(0.0);
        for i in 0..self.xs.len() - 1 {
            let w = self.xs[i + 1] - self.xs[i];
            let s0 = 1.0 - self.cdf[i];
            let s1 = 1.0 - self.cdf_left_knot(i + 1);
            out.push(out[i] + 0.5 * (s0 + s1) * w);
        }
        out
    }

    fn gd(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= *self.xs.last().unwrap() {
            return *self.gd_knots.last().unwrap();
        }
        let i = self.segment(x);
        if self.xs[i] == x {
            return self.gd_knots[i];
        }
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        let s0 = 1.0 - self.cdf[i];
        let s1 = 1.0 - self.cdf_left_knot(i + 1);
        let u = x - x0;
        let slope = (s1 - s0) / (x1 - x0);
        self.gd_knots[i] + s0 * u + 0.5 * slope * u * u
    }

    fn quantile(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return 0.0;
        }
        for i in 0..self.xs.len() - 1 {
            // Atom plateau at knot i.
            if self.cdf[i] >= p {
                return self.xs[i];
            }
            let f1 = self.cdf_left_knot(i + 1);
            if f1 >= p {
                let (x0, x1) = (self.xs[i], self.xs[i + 1]);
                let f0 = self.cdf[i];
                if f1 == f0 {
                    return x1;
                }
                return x0 + (x1 - x0) * (p - f0) / (f1 - f0);
            }
        }
        *self.xs.last().unwrap()
    }
}

// =========================================================================
// Erlang helpers
// =========================================================================

fn erlang_cdf(shape: u32, rate: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let z = rate * x;
    // 1 − e^{−z} Σ_{i<k} z^i/i!; switch to the regularized gamma for large z
    // where the direct sum loses accuracy.
    if z > 700.0 {
        return 1.0;
    }
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    for i in 1..shape {
        term *= z / i as f64;
        sum += term;
    }
    1.0 - (-z).exp() * sum
}

fn erlang_density(shape: u32, rate: f64, x: f64) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    if x == 0.0 {
        return if shape == 1 { rate } else { 0.0 };
    }
    let k = shape as f64;
    (k * rate.ln() + (k - 1.0) * x.ln() - rate * x - ln_gamma(k)).exp()
}

// =========================================================================
// Tests
// =========================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn families() -> Vec<Distribution> {
        vec![
            Distribution::exponential(1.0).unwrap(),
            Distribution::exponential(0.5).unwrap(),
            Distribution::erlang(3, 2.0).unwrap(),
            Distribution::hyperexponential(vec![0.4, 0.6], vec![0.5, 2.0]).unwrap(),
            Distribution::deterministic(2.0).unwrap(),
            Distribution::uniform(0.0, 1.0).unwrap(),
            Distribution::uniform(0.5, 2.5).unwrap(),
            Distribution::weibull(1.5, 1.0).unwrap(),
            Distribution::weibull(0.8, 2.0).unwrap(),
            Distribution::tabulated(
                vec![(0.0, 0.0), (1.0, 0.3), (2.0, 0.8), (3.0, 1.0)],
                vec![(2.0, 0.2)],
            )
            .unwrap(),
        ]
    }

    #[test]
    fn ccdf_examples() {
        let exp = Distribution::exponential(1.0).unwrap();
        assert_eq!(exp.ccdf(0.0).unwrap(), 1.0);
        assert!((exp.ccdf(2.0f64.ln()).unwrap() - 0.5).abs() < 1e-15);
        let det = Distribution::deterministic(2.0).unwrap();
        assert_eq!(det.ccdf(2.0).unwrap(), 0.0);
        assert!(exp.ccdf(-0.5).is_err());
    }

    #[test]
    fn cdf_plus_ccdf_is_one() {
        for d in families() {
            for &x in &[0.0, 0.1, 0.6, 1.0, 1.9, 2.0, 2.1, 5.0, 40.0] {
                let c = d.cdf(x);
                let s = d.ccdf(x).unwrap();
                assert!((c + s - 1.0).abs() < 1e-12, "{d:?} at {x}: {c} + {s}");
                assert!(d.cdf(0.0) == 0.0, "G(0+) = 0 must hold for {d:?}");
            }
            let h = d.support_end();
            if h.is_finite() {
                assert_eq!(d.ccdf(h).unwrap(), 0.0);
                assert_eq!(d.ccdf(h + 1.0).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn left_limits_from_atoms() {
        let det = Distribution::deterministic(2.0).unwrap();
        assert_eq!(det.cdf_left(2.0), 0.0);
        assert_eq!(det.cdf(2.0), 1.0);
        let tab = Distribution::tabulated(
            vec![(0.0, 0.0), (1.0, 0.5), (2.0, 1.0)],
            vec![(1.0, 0.25)],
        )
        .unwrap();
        assert!((tab.cdf_left(1.0) - 0.25).abs() < 1e-15);
        assert!((tab.cdf(1.0) - 0.5).abs() < 1e-15);
        // Atom masses plus absolutely-continuous mass total 1.
        let ac: f64 = 1.0 - tab.atoms().iter().map(|(_, m)| m).sum::<f64>();
        assert!((ac - 0.75).abs() < 1e-15);
    }

    #[test]
    fn hazard_examples() {
        let exp = Distribution::exponential(0.7).unwrap();
        for &x in &[0.0, 1.0, 10.0] {
            assert!((exp.hazard(x).unwrap() - 0.7).abs() < 1e-12);
        }
        let unif = Distribution::uniform(0.0, 1.0).unwrap();
        assert!((unif.hazard(0.5).unwrap() - 2.0).abs() < 1e-12);
        let det = Distribution::deterministic(2.0).unwrap();
        assert!(matches!(det.hazard(1.0), Err(FluidError::NoDensity(_))));
        assert!(matches!(unif.hazard(1.0), Err(FluidError::Domain(_))));
    }

    #[test]
    fn integrated_ccdf_examples() {
        for d in families() {
            assert_eq!(d.integrated_ccdf(0.0).unwrap(), 0.0);
        }
        let exp = Distribution::exponential(1.0).unwrap();
        // Symbolic antiderivative 1 − e^{−x} at x = 1.
        assert!((exp.integrated_ccdf(1.0).unwrap() - (1.0 - (-1.0f64).exp())).abs() < 1e-14);
        let det = Distribution::deterministic(2.0).unwrap();
        assert!((det.integrated_ccdf(5.0).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn integrated_ccdf_matches_quadrature() {
        // Independent check of the closed forms: Riemann sum of the survival
        // function at fine resolution.
        for d in families() {
            let upper = d.age_horizon(1e-12).min(60.0);
            let n = 200_000usize;
            let h = upper / n as f64;
            let mut acc = 0.0;
            for i in 0..n {
                acc += d.survival((i as f64 + 0.5) * h) * h;
            }
            let closed = d.integrated_ccdf(upper).unwrap();
            // Midpoint quadrature across a CDF jump is only O(h) accurate.
            let tol = if d.is_continuous() { 5e-9 } else { 5e-6 };
            assert!(
                (acc - closed).abs() < tol * (1.0 + closed),
                "{d:?}: quadrature {acc} vs closed {closed}"
            );
        }
    }

    #[test]
    fn inverse_integrated_ccdf_examples() {
        for d in families() {
            assert_eq!(d.inverse_integrated_ccdf(0.0).unwrap(), 0.0);
        }
        let exp = Distribution::exponential(1.0).unwrap();
        let m = 1.0 - (-1.0f64).exp();
        assert!((exp.inverse_integrated_ccdf(m).unwrap() - 1.0).abs() < 1e-9);
        // Uniform(0,1): G_d(x) = x − x²/2, G_d(0.5) = 0.375.
        let unif = Distribution::uniform(0.0, 1.0).unwrap();
        assert!((unif.inverse_integrated_ccdf(0.375).unwrap() - 0.5).abs() < 1e-12);
        // At or above the mean is out of range.
        assert!(exp.inverse_integrated_ccdf(1.0).is_err());
    }

    #[test]
    fn inverse_integrated_ccdf_roundtrip() {
        for d in families() {
            let mean = d.mean();
            for frac in [0.05, 0.3, 0.7, 0.95, 0.999] {
                let m = frac * mean;
                let x = d.inverse_integrated_ccdf(m).unwrap();
                let back = d.integrated_ccdf(x).unwrap();
                assert!(
                    (back - m).abs() < 1e-9 * (1.0 + mean),
                    "{d:?}: m={m} -> x={x} -> {back}"
                );
            }
        }
    }

    #[test]
    fn stieltjes_total_mass_is_one() {
        for d in families() {
            let b = d.age_horizon(1e-12).min(200.0);
            let total = d
                .stieltjes_integrate(|_| 1.0, 0.0, b.max(d.support_end().min(1e9)), LifetimeMeasure::Lifetime, 1e-3)
                .unwrap();
            assert!((total - 1.0).abs() < 1e-8, "{d:?}: total dG mass {total}");
        }
    }

    #[test]
    fn stieltjes_conditioning_terminal_atom() {
        // Deterministic(2): the whole dM mass over (0, H] is the terminal
        // unit atom at H, since G(H−) = 0 < 1.
        let det = Distribution::deterministic(2.0).unwrap();
        let m = det
            .stieltjes_integrate(|_| 1.0, 0.0, 2.0, LifetimeMeasure::Conditioning, 1e-3)
            .unwrap();
        assert!((m - 1.0).abs() < 1e-12);
        // And strictly inside there is no dM mass at all.
        let inner = det
            .stieltjes_integrate(|_| 1.0, 0.0, 1.99, LifetimeMeasure::Conditioning, 1e-3)
            .unwrap();
        assert_eq!(inner, 0.0);
    }

    #[test]
    fn conditioning_terminal_atom_dichotomy() {
        // The terminal unit atom of dM at H exists exactly when G(H−) < 1.
        // A law reaching 1 continuously at H gets no terminal atom: the dM
        // mass of a sliver (H−ε, H] stays of order ε/Ḡ ≈ 2, not 1 + O(ε).
        let cont = Distribution::tabulated(vec![(0.0, 0.0), (1.0, 1.0)], Vec::new()).unwrap();
        let eps = 1e-9;
        let sliver = cont
            .stieltjes_integrate(|_| 1.0, 1.0 - eps, 1.0, LifetimeMeasure::Conditioning, eps)
            .unwrap();
        assert!(sliver < 0.5, "spurious terminal atom: sliver mass {sliver}");

        // Whereas a terminal CDF jump yields exactly the unit atom.
        let det = Distribution::deterministic(1.0).unwrap();
        let sliver = det
            .stieltjes_integrate(|_| 1.0, 1.0 - eps, 1.0, LifetimeMeasure::Conditioning, eps)
            .unwrap();
        assert_eq!(sliver, 1.0);
    }

    #[test]
    fn stieltjes_mean_by_quadrature() {
        let exp = Distribution::exponential(1.0).unwrap();
        let b = exp.age_horizon(1e-12);
        let mean = exp
            .stieltjes_integrate(|x| x, 0.0, b, LifetimeMeasure::Lifetime, 5e-4)
            .unwrap();
        assert!((mean - 1.0).abs() < 1e-6, "quadrature mean {mean}");
    }

    #[test]
    fn conditioning_measure_matches_hazard_quadrature() {
        // ∫ f dM = ∫ f·h dx for density-bearing laws (checked to 1e−6 on
        // [0, 0.99 H]).
        let f = |x: f64| (1.0 + x).recip();
        for d in [
            Distribution::exponential(1.3).unwrap(),
            Distribution::uniform(0.0, 2.0).unwrap(),
            Distribution::erlang(2, 1.0).unwrap(),
        ] {
            let b = 0.99 * d.age_horizon(1e-10).min(10.0);
            let via_m = d
                .stieltjes_integrate(f, 0.0, b, LifetimeMeasure::Conditioning, 2e-4)
                .unwrap();
            let n = 100_000;
            let h = b / n as f64;
            let mut via_h = 0.0;
            for i in 0..n {
                let x = (i as f64 + 0.5) * h;
                via_h += f(x) * d.hazard(x).unwrap() * h;
            }
            assert!(
                (via_m - via_h).abs() < 1e-6 * (1.0 + via_h.abs()),
                "{d:?}: dM {via_m} vs hazard {via_h}"
            );
        }
    }

    #[test]
    fn unbounded_integrand_is_an_error() {
        let exp = Distribution::exponential(1.0).unwrap();
        // The first cell's midpoint (0.25 with this grid) hits the pole.
        let r = exp.stieltjes_integrate(|x| 1.0 / (x - 0.25), 0.0, 1.0, LifetimeMeasure::Lifetime, 0.5);
        assert!(r.is_err());
    }

    #[test]
    fn sampling_deterministic_and_reproducible() {
        let det = Distribution::deterministic(2.0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..100 {
            assert_eq!(det.sample(&mut rng), 2.0);
        }
        let exp = Distribution::exponential(1.0).unwrap();
        let mut a = ChaCha12Rng::seed_from_u64(42);
        let mut b = ChaCha12Rng::seed_from_u64(42);
        let xs: Vec<f64> = (0..1000).map(|_| exp.sample(&mut a)).collect();
        let ys: Vec<f64> = (0..1000).map(|_| exp.sample(&mut b)).collect();
        assert_eq!(xs, ys, "same seed must give a bit-identical sequence");
    }

    #[test]
    fn sampling_uniform_mean() {
        let unif = Distribution::uniform(0.0, 1.0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        let n = 1_000_000usize;
        let mean: f64 = (0..n).map(|_| unif.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.002, "sample mean {mean}");
    }

    #[test]
    fn sampling_kolmogorov_distance() {
        // Empirical CDF of 10^6 draws within Kolmogorov distance 0.005.
        for d in [
            Distribution::exponential(1.0).unwrap(),
            Distribution::erlang(3, 2.0).unwrap(),
            Distribution::weibull(1.5, 1.0).unwrap(),
        ] {
            let mut rng = ChaCha12Rng::seed_from_u64(99);
            let n = 1_000_000usize;
            let mut xs: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut ks: f64 = 0.0;
            for (i, x) in xs.iter().enumerate() {
                let emp_hi = (i + 1) as f64 / n as f64;
                let emp_lo = i as f64 / n as f64;
                let c = d.cdf(*x);
                ks = ks.max((emp_hi - c).abs()).max((c - emp_lo).abs());
            }
            assert!(ks < 0.005, "{d:?}: KS distance {ks}");
        }
    }

    #[test]
    fn conditional_excess_is_memoryless_for_exponential() {
        let exp = Distribution::exponential(2.0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n = 200_000;
        let mean: f64 =
            (0..n).map(|_| exp.sample_conditional_excess(3.0, &mut rng).unwrap()).sum::<f64>()
                / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "conditional mean {mean}");
    }

    #[test]
    fn tabulated_from_csv_roundtrip() {
        let dir = std::env::temp_dir().join("fluidq_tab_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("law.csv");
        std::fs::write(&path, "x,cdf,atom\n0,0,\n1,0.5,\n2,1.0,0.25\n").unwrap();
        let d = Distribution::tabulated_from_csv(&path).unwrap();
        assert_eq!(d.support_end(), 2.0);
        assert!((d.cdf_left(2.0) - 0.75).abs() < 1e-15);
        assert!((d.atom_at(2.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn age_horizon_bounds_survival() {
        for d in families() {
            let a = d.age_horizon(1e-10);
            assert!(d.survival(a) <= 1.0000001e-10 || a == d.support_end());
        }
    }
}
