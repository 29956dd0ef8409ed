//! Uniform quantization, delay-compensating state prediction, and the
//! mean-square estimation-error bound.

use crate::config::PlantModel;
use crate::{GainVec, Matrix, StateVec};

/// `|Tr(ÃᵀÃ) − 1|` below which the bound uses its linear-in-τ branch.
pub const TRACE_UNITY_TOLERANCE: f64 = 1e-12;

/// Uniform quantizer with `2^r` bins per component over `[x_l, x_u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    pub x_l: StateVec,
    pub x_u: StateVec,
    pub r: u32,
}

impl Quantizer {
    pub fn new(x_l: StateVec, x_u: StateVec, r: u32) -> Self {
        debug_assert!(r >= 1);
        debug_assert!(x_l.iter().zip(x_u.iter()).all(|(l, u)| l < u));
        Self { x_l, x_u, r }
    }

    pub fn for_plant(plant: &PlantModel, r: u32) -> Self {
        Self::new(plant.x_l.clone(), plant.x_u.clone(), r)
    }

    fn bins(&self) -> f64 {
        (self.r as f64).exp2()
    }

    /// Maps every component to the midpoint of its bin.
    pub fn quantize(&self, x: &StateVec) -> StateVec {
        self.quantize_counting(x).0
    }

    /// Like [`Quantizer::quantize`], also returning how many components lay
    /// outside `[x_l, x_u]` and were clamped into the edge bins.
    pub fn quantize_counting(&self, x: &StateVec) -> (StateVec, usize) {
        let bins = self.bins();
        let mut clamped = 0;
        let q = StateVec::from_fn(x.len(), |i, _| {
            let (l, u) = (self.x_l[i], self.x_u[i]);
            if x[i] < l || x[i] > u {
                clamped += 1;
            }
            let width = (u - l) / bins;
            let j = (bins * (x[i] - l) / (u - l)).floor().clamp(0.0, bins - 1.0);
            l + (j + 0.5) * width
        });
        (q, clamped)
    }

    /// Half the bin width per component.
    pub fn half_bin(&self) -> StateVec {
        (&self.x_u - &self.x_l) / (2.0 * self.bins())
    }

    /// `E[e₀ᵀe₀] = (1/12)·4^{−r}·(x_l − x_u)ᵀ(x_l − x_u)` for uniform error.
    pub fn mse(&self) -> f64 {
        quantization_mse(self)
    }
}

pub fn quantization_mse(q: &Quantizer) -> f64 {
    let span = &q.x_l - &q.x_u;
    span.dot(&span) / (12.0 * 4f64.powi(q.r as i32))
}

/// Bits per second the sensor pushes into the uplink: `r / T_d`.
pub fn uplink_arrival_rate(r: u32, t_d: f64) -> f64 {
    r as f64 / t_d
}

/// Uplink load, counting `n·r` bits per sample when `per_component` is set.
pub fn uplink_load(r: u32, t_d: f64, n: usize, per_component: bool) -> f64 {
    let bits = if per_component {
        r as f64 * n as f64
    } else {
        r as f64
    };
    bits / t_d
}

/// `[X̂, A_K·X̂, …, A_K^{n−1}·X̂]`.
pub fn predict_states(a_k: &Matrix, x_hat_0: &StateVec, n: usize) -> Vec<StateVec> {
    let mut out = Vec::with_capacity(n);
    let mut x = x_hat_0.clone();
    for _ in 0..n {
        let next = a_k * &x;
        out.push(std::mem::replace(&mut x, next));
    }
    out
}

/// Inputs of the estimation-error bound `F_e(r, ε_c, D_c,max)`.
#[derive(Debug, Clone, Copy)]
pub struct ErrorBoundInputs<'a> {
    pub r: u32,
    pub epsilon_c: f64,
    pub d_c_max: f64,
    pub t_d: f64,
    pub plant: &'a PlantModel,
    pub k: &'a GainVec,
}

/// `⌊D_c,max / T_d⌋`, tolerant of representation error (0.3/0.1 → 3).
pub fn delay_steps(d_c_max: f64, t_d: f64) -> u32 {
    let ratio = d_c_max / t_d;
    (ratio + 1e-9 * ratio.max(1.0)).floor().max(0.0) as u32
}

/// Bound on `E[e_τᵀe_τ]` valid for every `τ ≤ ⌊D_c,max/T_d⌋`.
///
/// With `t = Tr(ÃᵀÃ)`, `m₀` the quantization MSE, `τ*` the delay in steps
/// and `L = (ε−ε²)·Tr(KᵀB̃ᵀB̃K)·X_MᵀX_M`:
///
/// - `t > 1`: `m₀·t^τ* + L·(1 − t^τ*)/(1 − t)`
/// - `t < 1`: `m₀ + L/(1 − t)`
/// - `t = 1`: `m₀ + L·τ*`
pub fn estimation_error_bound(inp: &ErrorBoundInputs<'_>) -> f64 {
    let plant = inp.plant;
    let trace = plant.a_tilde.norm_squared();
    let m0 = quantization_mse(&Quantizer::for_plant(plant, inp.r));
    let bk = &plant.b_tilde * inp.k;
    let loss = (inp.epsilon_c - inp.epsilon_c * inp.epsilon_c)
        * bk.norm_squared()
        * plant.x_m.norm_squared();
    let tau = delay_steps(inp.d_c_max, inp.t_d);

    if (trace - 1.0).abs() < TRACE_UNITY_TOLERANCE {
        m0 + loss * tau as f64
    } else if trace > 1.0 {
        let growth = trace.powi(tau as i32);
        m0 * growth + loss * (1.0 - growth) / (1.0 - trace)
    } else {
        m0 + loss / (1.0 - trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{default_scenario, PlantModel, StateBounds, Weights};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_quantizer(r: u32) -> Quantizer {
        Quantizer::new(
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![1.0]),
            r,
        )
    }

    #[test]
    fn midpoint_rule() {
        let q = unit_quantizer(1);
        assert_eq!(q.quantize(&DVector::from_vec(vec![0.3]))[0], 0.25);
        assert_eq!(q.quantize(&DVector::from_vec(vec![1.0]))[0], 0.75);
        assert_eq!(q.quantize(&DVector::from_vec(vec![0.0]))[0], 0.25);
    }

    #[test]
    fn out_of_range_is_clamped_and_counted() {
        let q = unit_quantizer(3);
        let (v, n) = q.quantize_counting(&DVector::from_vec(vec![7.0]));
        assert_eq!(v[0], 1.0 - 0.0625);
        assert_eq!(n, 1);
        let (v, n) = q.quantize_counting(&DVector::from_vec(vec![-2.0]));
        assert_eq!(v[0], 0.0625);
        assert_eq!(n, 1);
    }

    #[test]
    fn quantize_is_idempotent() {
        let plant = default_scenario().plant;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for r in [1, 4, 6, 8, 16, 30] {
            let q = Quantizer::for_plant(&plant, r);
            for _ in 0..1000 {
                let x = StateVec::from_fn(3, |i, _| {
                    rng.random_range(plant.x_l[i] - 5.0..plant.x_u[i] + 5.0)
                });
                let once = q.quantize(&x);
                assert_eq!(q.quantize(&once), once);
            }
        }
    }

    #[test]
    fn in_range_error_within_half_bin() {
        let plant = default_scenario().plant;
        let q = Quantizer::for_plant(&plant, 6);
        let half = q.half_bin();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let x = StateVec::from_fn(3, |i, _| rng.random_range(plant.x_l[i]..plant.x_u[i]));
            let e = q.quantize(&x) - &x;
            for i in 0..3 {
                assert!(e[i].abs() <= half[i] * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn mse_scaling() {
        assert_relative_eq!(unit_quantizer(1).mse(), 1.0 / 48.0, max_relative = 1e-15);
        assert_relative_eq!(unit_quantizer(5).mse() / unit_quantizer(6).mse(), 4.0);
        let wide = Quantizer::new(
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![10.0]),
            3,
        );
        assert_relative_eq!(
            wide.mse() / unit_quantizer(3).mse(),
            100.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn arrival_rate() {
        assert_eq!(uplink_arrival_rate(6, 0.1), 60.0);
        assert_eq!(
            uplink_arrival_rate(12, 0.1),
            2.0 * uplink_arrival_rate(6, 0.1)
        );
        assert_eq!(
            uplink_arrival_rate(6, 0.05),
            2.0 * uplink_arrival_rate(6, 0.1)
        );
        assert_eq!(uplink_load(6, 0.1, 3, true), 180.0);
        assert_eq!(uplink_load(6, 0.1, 3, false), 60.0);
    }

    #[test]
    fn prediction_recurrence() {
        let plant = default_scenario().plant;
        let k = GainVec::from_row_slice(&[0.02, 0.3, -0.1]);
        let a_k = crate::plant::closed_loop_matrix(&plant, &k, 0.3);
        let x0 = DVector::from_vec(vec![-40.0, 2.0, -1.0]);
        let seq = predict_states(&a_k, &x0, 6);
        assert_eq!(seq.len(), 6);
        assert_eq!(seq[0], x0);
        assert_eq!(seq[3], &a_k * &seq[2]);
        let power = a_k.pow(4);
        assert!((&seq[4] - power * &x0).amax() < 1e-9);
        assert_eq!(predict_states(&a_k, &x0, 1), vec![x0]);
        assert!(predict_states(&a_k, &StateVec::zeros(3), 4)
            .iter()
            .all(|x| x.amax() == 0.0));
    }

    #[test]
    fn delay_steps_rounding() {
        assert_eq!(delay_steps(0.1, 0.1), 1);
        assert_eq!(delay_steps(0.3, 0.1), 3);
        assert_eq!(delay_steps(0.06, 0.1), 0);
        assert_eq!(delay_steps(0.25, 0.1), 2);
    }

    fn contracting_plant() -> PlantModel {
        // Ã = diag(0.5, 0.4, 0.3): trace of ÃᵀÃ is 0.5 < 1.
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-0.5, -0.6, -0.7]));
        let b = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]);
        let bounds = StateBounds {
            x_l: DVector::from_vec(vec![-1.0, -2.0, -3.0]),
            x_u: DVector::from_vec(vec![1.0, 2.0, 3.0]),
        };
        PlantModel::new(a, b, 1.0, &Weights::default(), &bounds, DVector::zeros(3)).unwrap()
    }

    #[test]
    fn bound_reduces_to_quantization_without_loss_variance() {
        let plant = contracting_plant();
        let k = GainVec::from_row_slice(&[0.3, -0.2, 0.1]);
        let m0 = quantization_mse(&Quantizer::for_plant(&plant, 4));
        for eps in [0.0, 1.0] {
            let b = estimation_error_bound(&ErrorBoundInputs {
                r: 4,
                epsilon_c: eps,
                d_c_max: 0.5,
                t_d: 0.1,
                plant: &plant,
                k: &k,
            });
            assert_relative_eq!(b, m0, max_relative = 1e-15);
        }
    }

    #[test]
    fn unit_trace_branch_is_linear_in_delay() {
        // Ã = 0.5·R(π/6) ⊕ [1/√2]: Tr(ÃᵀÃ) = 0.25·2 + 0.5 = 1.
        let (s, c) = (
            std::f64::consts::FRAC_PI_6.sin(),
            std::f64::consts::FRAC_PI_6.cos(),
        );
        #[rustfmt::skip]
        let a_tilde = DMatrix::from_row_slice(3, 3, &[
            0.5 * c, -0.5 * s, 0.0,
            0.5 * s,  0.5 * c, 0.0,
            0.0,      0.0,     std::f64::consts::FRAC_1_SQRT_2,
        ]);
        let a = &a_tilde - DMatrix::identity(3, 3);
        let b = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
        let bounds = StateBounds {
            x_l: DVector::from_vec(vec![-1.0; 3]),
            x_u: DVector::from_vec(vec![1.0; 3]),
        };
        let plant =
            PlantModel::new(a, b, 1.0, &Weights::default(), &bounds, DVector::zeros(3)).unwrap();
        assert!((plant.a_tilde.norm_squared() - 1.0).abs() < TRACE_UNITY_TOLERANCE);
        let k = GainVec::from_row_slice(&[0.2, 0.1, 0.0]);
        let at = |d: f64| {
            estimation_error_bound(&ErrorBoundInputs {
                r: 3,
                epsilon_c: 0.3,
                d_c_max: d,
                t_d: 1.0,
                plant: &plant,
                k: &k,
            })
        };
        let step = at(2.0) - at(1.0);
        assert!(step > 0.0);
        assert_relative_eq!(at(5.0) - at(1.0), 4.0 * step, max_relative = 1e-12);
        let m0 = quantization_mse(&Quantizer::for_plant(&plant, 3));
        assert_relative_eq!(at(0.5), m0, max_relative = 1e-15);
    }

    #[test]
    fn bound_monotone_in_r_and_epsilon() {
        let plant = default_scenario().plant;
        let k = GainVec::from_row_slice(&[0.05, 0.2, -0.1]);
        let f = |r: u32, eps: f64| {
            estimation_error_bound(&ErrorBoundInputs {
                r,
                epsilon_c: eps,
                d_c_max: 0.3,
                t_d: 0.1,
                plant: &plant,
                k: &k,
            })
        };
        for eps in [0.0, 0.1, 0.4] {
            for r in 1..12 {
                assert!(f(r + 1, eps) <= f(r, eps));
            }
        }
        for r in [2, 6] {
            let mut prev = f(r, 0.0);
            for i in 1..=50 {
                let v = f(r, 0.01 * i as f64);
                assert!(v >= prev);
                prev = v;
            }
        }
    }
}
