//! Arrival-rate functions λ(·) and their exact cumulatives E(t) = ∫_0^t λ.
//!
//! Rates are nonnegative and piecewise continuous; at a jump point the rate
//! is the right limit. Cumulatives use exact piecewise antiderivatives so
//! mass-balance checks are not polluted by quadrature error.

use crate::error::{FluidError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ArrivalRate {
    /// λ(t) ≡ rate.
    Constant { rate: f64 },
    /// Piecewise-constant: `rates[i]` on `[breaks[i], breaks[i+1])`, with the
    /// last value extending to +∞. `breaks[0]` must be 0.
    PiecewiseConstant { breaks: Vec<f64>, rates: Vec<f64> },
    /// `max(0, base + amplitude·sin(frequency·t + phase))`.
    Sinusoid { base: f64, amplitude: f64, frequency: f64, phase: f64 },
}

impl ArrivalRate {
    pub fn constant(rate: f64) -> Result<Self> {
        if !rate.is_finite() || rate < 0.0 {
            return Err(FluidError::InvalidInput(format!(
                "arrival rate must be finite and >= 0, got {rate}"
            )));
        }
        Ok(Self::Constant { rate })
    }

    pub fn piecewise_constant(breaks: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        if breaks.is_empty() || breaks.len() != rates.len() {
            return Err(FluidError::InvalidInput(
                "piecewise rate needs matching non-empty break and rate lists".into(),
            ));
        }
        if breaks[0] != 0.0 {
            return Err(FluidError::InvalidInput("first break must be t = 0".into()));
        }
        if breaks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FluidError::InvalidInput("breaks must be strictly increasing".into()));
        }
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(FluidError::InvalidInput("rates must be finite and >= 0".into()));
        }
        Ok(Self::PiecewiseConstant { breaks, rates })
    }

    pub fn sinusoid(base: f64, amplitude: f64, frequency: f64, phase: f64) -> Result<Self> {
        if ![base, amplitude, frequency, phase].iter().all(|v| v.is_finite()) {
            return Err(FluidError::InvalidInput("sinusoid parameters must be finite".into()));
        }
        if frequency <= 0.0 {
            return Err(FluidError::InvalidInput("sinusoid frequency must be > 0".into()));
        }
        if base + amplitude.abs() <= 0.0 {
            return Err(FluidError::InvalidInput("sinusoid rate is identically 0 after clipping".into()));
        }
        Ok(Self::Sinusoid { base, amplitude, frequency, phase })
    }

    /// λ(t) (the right limit at jump points of the piecewise form).
    pub fn rate(&self, t: f64) -> f64 {
        match self {
            Self::Constant { rate } => *rate,
            Self::PiecewiseConstant { breaks, rates } => {
                let i = match breaks.binary_search_by(|b| b.partial_cmp(&t).unwrap()) {
                    Ok(i) => i,
                    Err(i) => i.saturating_sub(1),
                };
                rates[i.min(rates.len() - 1)]
            }
            Self::Sinusoid { base, amplitude, frequency, phase } => {
                (base + amplitude * (frequency * t + phase).sin()).max(0.0)
            }
        }
    }

    /// E(t) = ∫_0^t λ(s) ds by exact antiderivatives.
    pub fn cumulative(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        match self {
            Self::Constant { rate } => rate * t,
            Self::PiecewiseConstant { breaks, rates } => {
                let mut acc = 0.0;
                for i in 0..breaks.len() {
                    let lo = breaks[i];
                    if lo >= t {
                        break;
                    }
                    let hi = if i + 1 < breaks.len() { breaks[i + 1].min(t) } else { t };
                    acc += rates[i] * (hi - lo);
                }
                acc
            }
            Self::Sinusoid { base, amplitude, frequency, phase } => {
                if *base >= amplitude.abs() {
                    // Never clipped: exact closed form.
                    base * t - amplitude / frequency * ((frequency * t + phase).cos() - phase.cos())
                } else {
                    self.clipped_sinusoid_cumulative(t)
                }
            }
        }
    }

    /// Exact integral of a clipped sinusoid: the positive arcs per period are
    /// delimited by the analytic roots of `base + amplitude·sin θ = 0`.
    fn clipped_sinusoid_cumulative(&self, t: f64) -> f64 {
        let Self::Sinusoid { base, amplitude, frequency, phase } = self else { unreachable!() };
        let (a, b, c, p) = (*base, *amplitude, *frequency, *phase);
        let tau = std::f64::consts::TAU;
        // Unclipped antiderivative of a + b sin(cθ'+p) in θ = c t + p.
        let anti = |theta: f64| (a * theta - b * theta.cos()) / c;
        // Roots of sin θ = −a/b in [0, 2π).
        let s = (-a / b).clamp(-1.0, 1.0);
        let r1 = s.asin(); // in [−π/2, π/2]
        let (lo, hi) = if b > 0.0 {
            // positive on (π − r1, 2π + r1) mod 2π — express as the negative arc [r1', π − r1']
            (r1, std::f64::consts::PI - r1)
        } else {
            (std::f64::consts::PI - r1, tau + r1)
        };
        // Integrate θ from p to c·t + p, adding only the sub-arcs where the
        // rate is positive. Negative arc (rate clipped to 0) is [lo, hi] mod 2π
        // when b > 0 the rate is a + b sinθ < 0 for θ in (lo, hi)? Establish by
        // sign check at the arc midpoint and integrate the complement exactly.
        let theta0 = p;
        let theta1 = c * t + p;
        let mid = 0.5 * (lo + hi);
        let mid_rate = a + b * mid.sin();
        // Arc [lo, hi] (mod 2π) is the clipped one iff the rate is negative there.
        let (clip_lo, clip_hi) = if mid_rate < 0.0 { (lo, hi) } else { (hi, lo + tau) };
        let arclen = clip_hi - clip_lo;
        let mut acc = 0.0;
        let mut cursor = theta0;
        // Index of the clip arc at or just before the cursor.
        let mut k = ((cursor - clip_lo) / tau).floor();
        while cursor < theta1 {
            let arc_start = clip_lo + k * tau;
            let arc_end = arc_start + arclen;
            if cursor < arc_start {
                // Positive stretch up to the next clipped arc (or the end).
                let end = arc_start.min(theta1);
                acc += anti(end) - anti(cursor);
                cursor = end;
            } else if cursor < arc_end {
                // Inside a clipped arc: contributes nothing.
                cursor = arc_end.min(theta1);
                k += 1.0;
            } else {
                k += 1.0;
            }
        }
        acc
    }

    /// Supremum of λ over `[0, t]` (needed for Poisson thinning).
    pub fn sup_on(&self, t: f64) -> f64 {
        match self {
            Self::Constant { rate } => *rate,
            Self::PiecewiseConstant { breaks, rates } => {
                let mut sup = 0.0f64;
                for i in 0..rates.len() {
                    if breaks[i] <= t {
                        sup = sup.max(rates[i]);
                    }
                }
                sup
            }
            Self::Sinusoid { base, amplitude, frequency, phase } => {
                // Attained if a peak falls in [0, t]; otherwise endpoint max.
                let peak = (base + amplitude.abs()).max(0.0);
                let tau = std::f64::consts::TAU;
                let theta0 = *phase;
                let theta1 = frequency * t + phase;
                let peak_theta = if *amplitude >= 0.0 {
                    std::f64::consts::FRAC_PI_2
                } else {
                    1.5 * std::f64::consts::PI
                };
                let k = ((theta0 - peak_theta) / tau).ceil();
                if peak_theta + k * tau <= theta1 {
                    peak
                } else {
                    self.rate(0.0).max(self.rate(t))
                }
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Self::Constant { .. })
    }
}
