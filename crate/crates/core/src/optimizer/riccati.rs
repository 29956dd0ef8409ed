use crate::config::PlantModel;
use crate::error::{Error, Result};
use crate::Matrix;

pub const RICCATI_TOLERANCE: f64 = 1e-10;
pub const RICCATI_MAX_ITERATIONS: usize = 100_000;

/// One application of the discrete Riccati map to `p`.
fn riccati_map(a: &Matrix, b: &Matrix, q: &Matrix, r_weight: f64, p: &Matrix) -> Result<Matrix> {
    let m = b.ncols();
    let at_p = a.transpose() * p;
    let gain_den = Matrix::identity(m, m) * r_weight + b.transpose() * p * b;
    let inv = gain_den
        .try_inverse()
        .ok_or_else(|| Error::Validation("R + B̃ᵀPB̃ must be invertible (r_weight > 0)".into()))?;
    let next = q + &at_p * a - &at_p * b * inv * b.transpose() * p * a;
    Ok((&next + next.transpose()) * 0.5)
}

/// Max-abs residual of the Riccati equation at `p`.
pub fn riccati_residual(plant: &PlantModel, q: &Matrix, r_weight: f64, p: &Matrix) -> Result<f64> {
    Ok((riccati_map(&plant.a_tilde, &plant.b_tilde, q, r_weight, p)? - p).amax())
}

/// Terminal weight `P_f` by fixed-point iteration from `P = Q`.
pub fn solve_riccati(plant: &PlantModel, q: &Matrix, r_weight: f64) -> Result<Matrix> {
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..RICCATI_MAX_ITERATIONS {
        let next = riccati_map(&plant.a_tilde, &plant.b_tilde, q, r_weight, &p)?;
        residual = (&next - &p).amax();
        p = next;
        if !residual.is_finite() {
            break;
        }
        if residual < RICCATI_TOLERANCE {
            return Ok(p);
        }
    }
    Err(Error::RiccatiNonConvergence {
        residual,
        iterations: RICCATI_MAX_ITERATIONS,
    })
}
