//! Lossy closed-loop state update.

use crate::config::PlantModel;
use crate::{GainVec, Matrix, StateVec};

/// `X_{t+1} = Ã·X_t + η·B̃·K·X̂`, where `eta` says whether the command
/// reached the actuator.
pub fn step_true_state(
    plant: &PlantModel,
    k: &GainVec,
    x_t: &StateVec,
    x_hat_applied: &StateVec,
    eta: bool,
) -> StateVec {
    let drift = &plant.a_tilde * x_t;
    if eta {
        drift + &plant.b_tilde * (k * x_hat_applied)
    } else {
        drift
    }
}

/// Same update with an explicit command vector `u` (already `K·X̂`).
pub fn step_with_command(plant: &PlantModel, x_t: &StateVec, u: Option<&StateVec>) -> StateVec {
    let drift = &plant.a_tilde * x_t;
    match u {
        Some(u) => drift + &plant.b_tilde * u,
        None => drift,
    }
}

/// Expected closed-loop matrix `A_K = Ã + (1 − ε_c)·B̃·K`.
pub fn closed_loop_matrix(plant: &PlantModel, k: &GainVec, epsilon_c: f64) -> Matrix {
    &plant.a_tilde + (&plant.b_tilde * k) * (1.0 - epsilon_c)
}
