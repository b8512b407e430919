//! Precomputed time-lattice tables shared by the solvers and the derived
//! views.
//!
//! Convolution kernels use cell averages of the CDF / survival function
//! (differences of the integrated CCDF divided by the step), which are exact
//! for increments spread uniformly over a step and remain well-behaved for
//! discontinuous CDFs.

use crate::arrival::ArrivalRate;
use crate::distributions::Distribution;

pub(crate) struct Lattice {
    /// Cell-average CDF kernel: 1 − (gsd[m+1]−gsd[m])/dt, m = 0..J−1.
    pub gs_cell_cdf: Vec<f64>,
    /// G^r(k·dt), k = 0..=J.
    pub gr_cdf: Vec<f64>,
    /// ∫_0^{k dt} Ḡ^r, k = 0..=J.
    pub grd: Vec<f64>,
    /// λ((i+½)dt), i = 0..J−1.
    pub lam_mid: Vec<f64>,
    /// E(k·dt) by exact antiderivatives.
    pub e_cum: Vec<f64>,
}

impl Lattice {
    pub fn build(rate: &ArrivalRate, gs: &Distribution, gr: &Distribution, dt: f64, steps: usize) -> Self {
        let n = steps;
        let mut gsd = Vec::with_capacity(n + 1);
        let mut gr_cdf = Vec::with_capacity(n + 1);
        let mut grd = Vec::with_capacity(n + 1);
        let mut e_cum = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let t = k as f64 * dt;
            gsd.push(gs.survival_integral(0.0, t));
            gr_cdf.push(gr.cdf(t));
            grd.push(gr.survival_integral(0.0, t));
            e_cum.push(rate.cumulative(t));
        }
        let gs_cell_cdf: Vec<f64> =
            (0..n).map(|m| (1.0 - (gsd[m + 1] - gsd[m]) / dt).clamp(0.0, 1.0)).collect();
        let lam_mid: Vec<f64> = (0..n).map(|i| rate.rate((i as f64 + 0.5) * dt)).collect();
        Lattice { gs_cell_cdf, gr_cdf, grd, lam_mid, e_cum }
    }
}
