//! Closed-form link metrics of the uplink/downlink tandem queue.
//!
//! Units throughout: capacities and arrival rates in bits/s, QoS exponents
//! `theta` in 1/bit, delay rates `mu` in 1/s, delays in s.
//!
//! The channel gain `γ²` is exponential with mean `β`, so every capacity
//! formula depends on the product `SNR·β`.

use std::f64::consts::LN_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::SystemParams;
use crate::error::{Error, Result};
use crate::quadrature;

/// `|μ_u − μ_d| / max(μ_u, μ_d)` below which the equal-rate limits are used.
pub const EQUAL_RATE_REL_THRESHOLD: f64 = 1e-9;

/// Smallest `P(D_c < D_c,max)` for which the conditional mean is evaluated.
pub const MIN_CONDITIONING_PROBABILITY: f64 = 1e-12;

/// `W·θ/ln2`, which must exceed 1 for the closed-form capacity.
pub fn exponent_ratio(theta: f64, w: f64) -> f64 {
    w * theta / LN_2
}

/// Effective capacity of a Rayleigh link (bits/s):
/// `(1/θ)·ln[(SNR·β)(W·θ/ln2 − 1)] − 1/(SNR·β)`.
///
/// Valid for `W·θ/ln2 > 1`; the approximation tightens as `SNR·β` grows.
pub fn effective_capacity(theta: f64, w: f64, snr: f64, beta: f64) -> Result<f64> {
    let ratio = exponent_ratio(theta, w);
    if !(ratio > 1.0) || !ratio.is_finite() {
        return Err(Error::CapacityDomain { ratio });
    }
    let gain = snr * beta;
    Ok(((gain * (ratio - 1.0)).ln()) / theta - 1.0 / gain)
}

/// Delay-distribution rate `μ = θ·C` (1/s).
pub fn service_rate_mu(theta: f64, w: f64, snr: f64, beta: f64) -> Result<f64> {
    Ok(theta * effective_capacity(theta, w, snr, beta)?)
}

fn gain_breakpoints(scale: f64, mean: f64) -> Vec<f64> {
    let top = 100.0 * mean;
    let mut pts = vec![0.0];
    let mut x = (scale.min(mean) / 4.0).max(f64::MIN_POSITIVE);
    while x < top {
        pts.push(x);
        x *= 4.0;
    }
    pts.push(top);
    pts
}

fn integrate_over_gain(f: &dyn Fn(f64) -> f64, scale: f64, mean: f64, rel_tol: f64) -> Result<f64> {
    let pts = gain_breakpoints(scale, mean);
    let mut total = 0.0;
    for w in pts.windows(2) {
        total += quadrature::integrate(f, w[0], w[1], 0.0, rel_tol, 4000)?;
    }
    Ok(total)
}

/// Effective capacity straight from its definition,
/// `−(1/θ)·ln E[exp(−θ·W·log2(1 + SNR·γ²))]`, by adaptive quadrature over
/// the exponential density of `γ²` (mean `beta`).
///
/// Independent of the closed form; intended for validating it.
pub fn effective_capacity_oracle(
    theta: f64,
    w: f64,
    snr: f64,
    beta: f64,
    rel_tol: f64,
) -> Result<f64> {
    let a = exponent_ratio(theta, w);
    let f = move |x: f64| (-a * (snr * x).ln_1p() - x / beta).exp() / beta;
    let expectation = integrate_over_gain(&f, 1.0 / (snr * a.max(1.0)), beta, rel_tol)?;
    Ok(-expectation.ln() / theta)
}

/// Ergodic capacity `W·E[log2(1 + SNR·γ²)]` by quadrature.
pub fn ergodic_capacity(w: f64, snr: f64, beta: f64, rel_tol: f64) -> Result<f64> {
    let f = move |x: f64| (snr * x).ln_1p() * (-x / beta).exp() / beta;
    Ok(w / LN_2 * integrate_over_gain(&f, 1.0 / snr, beta, rel_tol)?)
}

fn nearly_equal_rates(mu_u: f64, mu_d: f64) -> bool {
    (mu_u - mu_d).abs() < EQUAL_RATE_REL_THRESHOLD * mu_u.max(mu_d)
}

/// `e^{−D·μ}·(1 + D·μ)`, with the `D → ∞` limit taken as 0.
fn erlang_tail(d: f64, mu: f64) -> f64 {
    let e = (-d * mu).exp();
    if e == 0.0 {
        0.0
    } else {
        e * (1.0 + d * mu)
    }
}

/// Packet loss probability `P(D_u + D_d > D_c,max)` for independent
/// exponential delays with rates `mu_u`, `mu_d`.
///
/// Falls back to the Erlang-2 tail when the rates (nearly) coincide and
/// clamps to `[0, 1]`. NaN inputs propagate.
pub fn packet_loss_rate(mu_u: f64, mu_d: f64, d_c_max: f64) -> f64 {
    let eps = if nearly_equal_rates(mu_u, mu_d) {
        erlang_tail(d_c_max, 0.5 * (mu_u + mu_d))
    } else {
        ((-d_c_max * mu_d).exp() * mu_u - (-d_c_max * mu_u).exp() * mu_d) / (mu_u - mu_d)
    };
    eps.clamp(0.0, 1.0)
}

/// `E[D_c | D_c < D_c,max]` in seconds.
pub fn expected_conditional_delay(mu_u: f64, mu_d: f64, d_c_max: f64) -> Result<f64> {
    let probability = 1.0 - packet_loss_rate(mu_u, mu_d, d_c_max);
    if !(d_c_max > 0.0) || !(probability > MIN_CONDITIONING_PROBABILITY) {
        return Err(Error::DegenerateConditioning { probability });
    }
    if nearly_equal_rates(mu_u, mu_d) {
        // Erlang-2: ∫_0^D x·μ²x·e^{−μx} dx / P(X < D).
        let mu = 0.5 * (mu_u + mu_d);
        let y = d_c_max * mu;
        let e = (-y).exp();
        let partial_moment = if e == 0.0 {
            2.0
        } else {
            2.0 - e * (2.0 + 2.0 * y + y * y)
        };
        let p = if e == 0.0 { 1.0 } else { 1.0 - e * (1.0 + y) };
        return Ok(partial_moment / (mu * p));
    }
    let d = d_c_max;
    let (eu, ed) = ((-d * mu_u).exp(), (-d * mu_d).exp());
    let numerator = mu_u * mu_u - mu_d * mu_d + mu_d * mu_d * erlang_tail(d, mu_u)
        - mu_u * mu_u * erlang_tail(d, mu_d);
    let denominator = mu_u * mu_d * (mu_u - mu_d + eu * mu_d - ed * mu_u);
    Ok(numerator / denominator)
}

/// Largest uplink arrival rate (bits/s) both queues can carry.
///
/// For `θ_u ≥ θ_d` this is `min{C_u, C_d / c_d}`. For `θ_u < θ_d` the
/// downlink term couples to the uplink through the departure process:
/// `(1/(c_d·θ_u))·ln[(SNR_dβ_d)(W_dθ_d/ln2)(SNR_uβ_u)^{c_d}(W_u(θ_d−θ_u)/ln2)^{c_d}]`.
pub fn max_arrival_rate(params: &SystemParams, w_u: f64, w_d: f64) -> Result<f64> {
    let p = params;
    let c_u = effective_capacity(p.theta_u, w_u, p.snr_u, p.beta_u)?;
    let c_d = effective_capacity(p.theta_d, w_d, p.snr_d, p.beta_d)?;
    Ok(arrival_limit(p, c_u, c_d, w_u, w_d))
}

/// [`max_arrival_rate`] given already evaluated capacities.
pub fn arrival_limit(p: &SystemParams, c_u: f64, c_d: f64, w_u: f64, w_d: f64) -> f64 {
    if p.theta_u >= p.theta_d {
        return c_u.min(c_d / p.c_d);
    }
    let log_term = (p.snr_d * p.beta_d).ln()
        + exponent_ratio(p.theta_d, w_d).ln()
        + p.c_d * (p.snr_u * p.beta_u).ln()
        + p.c_d * (w_u * (p.theta_d - p.theta_u) / LN_2).ln();
    c_u.min(log_term / (p.c_d * p.theta_u))
}

/// One draw of `D_u + D_d` with `D_i ~ Exp(mu_i)`, by inverse CDF.
pub fn sample_closed_loop_delay<R: Rng + ?Sized>(mu_u: f64, mu_d: f64, rng: &mut R) -> f64 {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    -(-u1).ln_1p() / mu_u - (-u2).ln_1p() / mu_d
}

/// Communication quantities of one bandwidth split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub c_u: f64,
    pub c_d: f64,
    /// Effective delay rates, `θ_i·C_i / delay_scale`.
    pub mu_u: f64,
    pub mu_d: f64,
    pub epsilon_c: f64,
    /// `None` when the no-loss event has negligible probability.
    pub e_dc_cond: Option<f64>,
    pub lambda_max: f64,
}

pub fn link_metrics(params: &SystemParams, w_u: f64, w_d: f64) -> Result<LinkMetrics> {
    let c_u = effective_capacity(params.theta_u, w_u, params.snr_u, params.beta_u)?;
    let c_d = effective_capacity(params.theta_d, w_d, params.snr_d, params.beta_d)?;
    let mu_u = params.theta_u * c_u / params.delay_scale;
    let mu_d = params.theta_d * c_d / params.delay_scale;
    for (what, value) in [("uplink delay rate", mu_u), ("downlink delay rate", mu_d)] {
        if !(value > 0.0) {
            return Err(Error::NonPositiveRate { what, value });
        }
    }
    Ok(LinkMetrics {
        c_u,
        c_d,
        mu_u,
        mu_d,
        epsilon_c: packet_loss_rate(mu_u, mu_d, params.d_c_max),
        e_dc_cond: expected_conditional_delay(mu_u, mu_d, params.d_c_max).ok(),
        lambda_max: arrival_limit(params, c_u, c_d, w_u, w_d),
    })
}
