//! Lyapunov value and the convergence-rate condition used as a constraint
//! by the optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::link_metrics;
use crate::config::{PlantModel, SystemParams};
use crate::error::{Error, Result};
use crate::sensing::{estimation_error_bound, ErrorBoundInputs, Quantizer};
use crate::{GainVec, Matrix, StateVec};

/// Lyapunov values below this are treated as the origin.
pub const LYAPUNOV_FLOOR: f64 = 1e-9;

/// `xᵀ·P·x`.
pub fn lyapunov_value(x: &StateVec, p: &Matrix) -> f64 {
    (x.transpose() * p * x)[(0, 0)]
}

/// Additive pieces of `F_ρ`, all unnormalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateTerms {
    /// `|Ã·X|²_P`
    pub drift: f64,
    /// `|(Ã + B̃K)·X|²_P`
    pub closed_loop: f64,
    /// `F_e · Tr(KᵀBᵀPBK)`
    pub error_bound: f64,
    pub epsilon_c: f64,
    pub f_e: f64,
    /// `|X|²_P`
    pub lyapunov: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCheck {
    pub rho_required: f64,
    pub rho_target: f64,
    pub feasible: bool,
    pub terms: RateTerms,
}

/// Evaluates `F_ρ / |X_t|²_P` for a gain and bandwidth split and compares it
/// with the configured rate `ρ`.
pub fn convergence_rhs(
    params: &SystemParams,
    plant: &PlantModel,
    k: &GainVec,
    w_u: f64,
    w_d: f64,
    x_t: &StateVec,
) -> Result<ConvergenceCheck> {
    let link = link_metrics(params, w_u, w_d)?;
    let f_e = estimation_error_bound(&ErrorBoundInputs {
        r: params.r,
        epsilon_c: link.epsilon_c,
        d_c_max: params.d_c_max,
        t_d: params.t_d,
        plant,
        k,
    });
    rate_condition(plant, k, link.epsilon_c, f_e, params.rho, x_t)
}

/// [`convergence_rhs`] with the loss rate and error bound supplied directly.
///
/// The error term weights `K` with the continuous input matrix `B`.
pub fn rate_condition(
    plant: &PlantModel,
    k: &GainVec,
    epsilon_c: f64,
    f_e: f64,
    rho_target: f64,
    x_t: &StateVec,
) -> Result<ConvergenceCheck> {
    let p = &plant.p;
    let lyapunov = lyapunov_value(x_t, p);
    if !(lyapunov > 0.0) {
        return Err(Error::ZeroState);
    }
    let a_x = &plant.a_tilde * x_t;
    let closed_x = &a_x + &plant.b_tilde * (k * x_t);
    let bk = &plant.b * k;
    let drift = lyapunov_value(&a_x, p);
    let closed_loop = lyapunov_value(&closed_x, p);
    let error_bound = f_e * (bk.transpose() * p * &bk).trace();

    let f_rho = (1.0 - epsilon_c) * (-drift + closed_loop + error_bound) + drift;
    let rho_required = f_rho / lyapunov;
    Ok(ConvergenceCheck {
        rho_required,
        rho_target,
        feasible: rho_target >= rho_required,
        terms: RateTerms {
            drift,
            closed_loop,
            error_bound,
            epsilon_c,
            f_e,
            lyapunov,
        },
    })
}

/// Inputs of [`empirical_contraction`].
#[derive(Debug, Clone)]
pub struct ContractionSetup {
    pub x0: StateVec,
    pub epsilon_c: f64,
    /// Applied to the state before the gain; `None` feeds back the exact state.
    pub quantizer: Option<Quantizer>,
}

/// Mean of `V(X_{t+1}) / V(X_t)` over `trials` runs of `steps` lossy,
/// quantized updates from `setup.x0`, skipping steps where `V(X_t)` is below
/// [`LYAPUNOV_FLOOR`].
pub fn empirical_contraction<R: Rng + ?Sized>(
    plant: &PlantModel,
    k: &GainVec,
    setup: &ContractionSetup,
    steps: usize,
    trials: usize,
    rng: &mut R,
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for _ in 0..trials {
        let mut x = setup.x0.clone();
        let mut v = lyapunov_value(&x, &plant.p);
        for _ in 0..steps {
            if v < LYAPUNOV_FLOOR {
                break;
            }
            let delivered = rng.random::<f64>() >= setup.epsilon_c;
            let mut next = &plant.a_tilde * &x;
            if delivered {
                let estimate = match &setup.quantizer {
                    Some(q) => q.quantize(&x),
                    None => x.clone(),
                };
                next += &plant.b_tilde * (k * estimate);
            }
            let v_next = lyapunov_value(&next, &plant.p);
            sum += v_next / v;
            count += 1;
            x = next;
            v = v_next;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}
