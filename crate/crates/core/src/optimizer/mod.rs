//! Joint choice of the feedback gain and the uplink/downlink bandwidth split.
//!
//! A candidate `[K, W_u, W_d]` is feasible when the uplink arrival rate fits
//! under the arrival-rate limit (P1b), the convergence-rate condition holds
//! at the current estimate (P1c), the split fits in `W0` (P1d), and the loss
//! rate is a probability (P1e). Among feasible candidates the MPC cost over
//! the horizon is minimized by differential evolution.

pub mod de;
pub mod riccati;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::channel::{link_metrics, LinkMetrics};
use crate::config::{DeConfig, PlantModel, SystemParams};
use crate::error::{Error, Result};
use crate::plant::closed_loop_matrix;
use crate::sensing::uplink_load;
use crate::stability::{convergence_rhs, ConvergenceCheck};
use crate::{GainVec, Matrix, StateVec};

pub use de::{evolve, BoxSpace, Evolution, Fitness, SearchSpace};
pub use riccati::{riccati_residual, solve_riccati};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(with = "crate::serde_la::row")]
    pub k: GainVec,
    pub w_u: f64,
    pub w_d: f64,
}

impl Candidate {
    pub fn new(k: &[f64], w_u: f64, w_d: f64) -> Self {
        Self {
            k: GainVec::from_row_slice(k),
            w_u,
            w_d,
        }
    }

    /// `[K₁, …, K_n, W_u, W_d]`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.k.iter().copied().chain([self.w_u, self.w_d]).collect()
    }

    pub fn from_slice(z: &[f64]) -> Self {
        let n = z.len() - 2;
        Self::new(&z[..n], z[n], z[n + 1])
    }
}

/// `J = Σ_{t<N} [X̂ᵀQX̂ + (KX̂)ᵀR(KX̂)] + ½·X̂_NᵀP_fX̂_N` along `X̂_{t+1} = A_K·X̂_t`.
pub fn mpc_cost(
    cand: &Candidate,
    x_hat_0: &StateVec,
    plant: &PlantModel,
    params: &SystemParams,
    p_f: &Matrix,
) -> Result<f64> {
    let link = link_metrics(params, cand.w_u, cand.w_d)?;
    Ok(mpc_cost_with_loss(
        cand,
        x_hat_0,
        plant,
        params.horizon_n,
        link.epsilon_c,
        p_f,
    ))
}

/// [`mpc_cost`] for a known loss rate.
pub fn mpc_cost_with_loss(
    cand: &Candidate,
    x_hat_0: &StateVec,
    plant: &PlantModel,
    horizon: usize,
    epsilon_c: f64,
    p_f: &Matrix,
) -> f64 {
    let a_k = closed_loop_matrix(plant, &cand.k, epsilon_c);
    let mut x = x_hat_0.clone();
    let mut j = 0.0;
    for _ in 0..horizon {
        let u = (&cand.k * &x)[(0, 0)];
        j += (x.transpose() * &plant.q * &x)[(0, 0)] + plant.r_weight * u * u;
        x = &a_k * &x;
    }
    j + 0.5 * (x.transpose() * p_f * &x)[(0, 0)]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub satisfied: bool,
    /// Nonnegative when satisfied.
    pub slack: f64,
}

impl Constraint {
    fn from_slack(slack: f64) -> Self {
        Self {
            satisfied: slack >= 0.0,
            slack,
        }
    }
}

/// Per-constraint evaluation of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// `λ_max − λ_u` in bits/s.
    pub p1b: Constraint,
    /// `ρ − F_ρ/|X̂|²_P`.
    pub p1c: Constraint,
    /// `min(W0 − W_u − W_d, W_u, W_d)` in Hz.
    pub p1d: Constraint,
    /// `min(ε_c, 1 − ε_c)`.
    pub p1e: Constraint,
    /// Some capacity is undefined for this split (`Wθ/ln2 ≤ 1` or `μ ≤ 0`).
    pub precondition_violated: bool,
    pub lambda_u: f64,
    pub link: Option<LinkMetrics>,
    /// `None` at the zero state, where P1c holds trivially.
    pub convergence: Option<ConvergenceCheck>,
}

impl FeasibilityReport {
    /// Sum of normalized constraint violations; zero when feasible.
    pub fn violation(&self, params: &SystemParams) -> f64 {
        if self.precondition_violated {
            return f64::INFINITY;
        }
        let miss = |c: &Constraint, scale: f64| {
            if c.slack.is_nan() {
                f64::INFINITY
            } else {
                (-c.slack).max(0.0) / scale
            }
        };
        miss(&self.p1b, self.lambda_u.max(1.0))
            + miss(&self.p1c, 1.0)
            + miss(&self.p1d, params.w0)
            + miss(&self.p1e, 1.0)
    }
}

/// Evaluates every P1 constraint. Never fails: an undefined link is reported
/// as a P1b failure with `precondition_violated` set.
pub fn check_feasibility(
    cand: &Candidate,
    params: &SystemParams,
    plant: &PlantModel,
    x_hat_t: &StateVec,
) -> FeasibilityReport {
    let lambda_u = uplink_load(
        params.r,
        params.t_d,
        plant.dim(),
        params.bits_per_state_vector,
    );
    let p1d = Constraint::from_slack(
        (params.w0 - cand.w_u - cand.w_d)
            .min(cand.w_u)
            .min(cand.w_d),
    );
    let link = match link_metrics(params, cand.w_u, cand.w_d) {
        Ok(l) => l,
        Err(_) => {
            let failed = Constraint {
                satisfied: false,
                slack: f64::NAN,
            };
            return FeasibilityReport {
                feasible: false,
                p1b: failed,
                p1c: failed,
                p1d,
                p1e: failed,
                precondition_violated: true,
                lambda_u,
                link: None,
                convergence: None,
            };
        }
    };
    let p1b = Constraint::from_slack(link.lambda_max - lambda_u);
    let eps = link.epsilon_c;
    let p1e = if eps.is_nan() {
        Constraint {
            satisfied: false,
            slack: f64::NAN,
        }
    } else {
        Constraint::from_slack(eps.min(1.0 - eps))
    };
    let (p1c, convergence) =
        match convergence_rhs(params, plant, &cand.k, cand.w_u, cand.w_d, x_hat_t) {
            Ok(c) => (
                Constraint::from_slack(c.rho_target - c.rho_required),
                Some(c),
            ),
            Err(Error::ZeroState) => (Constraint::from_slack(params.rho), None),
            Err(_) => (
                Constraint {
                    satisfied: false,
                    slack: f64::NAN,
                },
                None,
            ),
        };
    let feasible = p1b.satisfied && p1c.satisfied && p1d.satisfied && p1e.satisfied;
    FeasibilityReport {
        feasible,
        p1b,
        p1c,
        p1d,
        p1e,
        precondition_violated: false,
        lambda_u,
        link: Some(link),
        convergence,
    }
}

/// Feasibility and cost of one candidate, as used by the search.
pub fn evaluate(
    cand: &Candidate,
    params: &SystemParams,
    plant: &PlantModel,
    x_hat_0: &StateVec,
    p_f: &Matrix,
) -> (FeasibilityReport, Fitness) {
    let report = check_feasibility(cand, params, plant, x_hat_0);
    let cost = match &report.link {
        Some(link) => {
            mpc_cost_with_loss(cand, x_hat_0, plant, params.horizon_n, link.epsilon_c, p_f)
        }
        None => f64::INFINITY,
    };
    let fitness = Fitness {
        feasible: report.feasible && cost.is_finite(),
        cost,
        violation: report.violation(params),
    };
    (report, fitness)
}

/// Gain box `[−k_max, k_max]ⁿ` times the bandwidth triangle `W_u + W_d ≤ W0`.
#[derive(Debug, Clone)]
pub struct CandidateSpace {
    pub n: usize,
    pub k_max: f64,
    pub w0: f64,
}

impl SearchSpace for CandidateSpace {
    fn dim(&self) -> usize {
        self.n + 2
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let mut z: Vec<f64> = (0..self.n)
            .map(|_| self.k_max * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        let (mut a, mut b): (f64, f64) = (rng.random(), rng.random());
        if a + b > 1.0 {
            a = 1.0 - a;
            b = 1.0 - b;
        }
        z.push(a * self.w0);
        z.push(b * self.w0);
        z
    }

    fn clip(&self, z: &mut [f64]) {
        for v in &mut z[..self.n] {
            *v = v.clamp(-self.k_max, self.k_max);
        }
        let (wu, wd) = (
            z[self.n].clamp(0.0, self.w0),
            z[self.n + 1].clamp(0.0, self.w0),
        );
        let total = wu + wd;
        let scale = if total > self.w0 {
            self.w0 / total
        } else {
            1.0
        };
        z[self.n] = wu * scale;
        z[self.n + 1] = wd * scale;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    /// Whether `best` satisfies every constraint.
    pub feasible: bool,
    /// Best feasible individual, or the least-violating one when none is.
    pub best: Candidate,
    pub j_best: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub stall_history: Vec<usize>,
    pub best_history: Vec<Option<f64>>,
    pub diagnostics: FeasibilityReport,
    #[serde(with = "crate::serde_la::matrix")]
    pub p_f: Matrix,
    #[serde(with = "crate::serde_la::column")]
    pub x_hat_0: StateVec,
}

/// Searches for the cheapest feasible candidate from the estimate `x_hat_0`.
pub fn de_optimize(
    params: &SystemParams,
    plant: &PlantModel,
    de_cfg: &DeConfig,
    x_hat_0: &StateVec,
    rng: &mut dyn RngCore,
) -> Result<SolveReport> {
    de_cfg.validate()?;
    let p_f = solve_riccati(plant, &plant.q, plant.r_weight)?;
    let space = CandidateSpace {
        n: plant.dim(),
        k_max: de_cfg.k_max,
        w0: params.w0,
    };
    let fitness = |z: &[f64]| evaluate(&Candidate::from_slice(z), params, plant, x_hat_0, &p_f).1;
    let evo = evolve(&space, fitness, de_cfg, rng);

    let best = Candidate::from_slice(&evo.best);
    let (diagnostics, fit) = evaluate(&best, params, plant, x_hat_0, &p_f);
    Ok(SolveReport {
        feasible: fit.feasible,
        best,
        j_best: fit.cost,
        iterations: evo.iterations,
        evaluations: evo.evaluations,
        stall_history: evo.stall_history,
        best_history: evo.best_history,
        diagnostics,
        p_f,
        x_hat_0: x_hat_0.clone(),
    })
}

/// Axes of the brute-force search. Each gain component has its own value
/// list; a singleton list pins that component.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub k_axes: Vec<Vec<f64>>,
    pub w_u: Vec<f64>,
    pub w_d: Vec<f64>,
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.k_axes.iter().map(Vec::len).product::<usize>() * self.w_u.len() * self.w_d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn point(&self, mut idx: usize) -> Candidate {
        let mut take = |axis: &[f64]| {
            let v = axis[idx % axis.len()];
            idx /= axis.len();
            v
        };
        let w_d = take(&self.w_d);
        let w_u = take(&self.w_u);
        let mut k: Vec<f64> = self.k_axes.iter().rev().map(|a| take(a)).collect();
        k.reverse();
        Candidate::new(&k, w_u, w_d)
    }
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridResult {
    pub best: Candidate,
    pub j_best: f64,
    pub feasible_points: usize,
    pub points: usize,
}

/// Exhaustive search over `grid`; the first point in grid order wins ties.
pub fn grid_oracle(
    params: &SystemParams,
    plant: &PlantModel,
    grid: &GridSpec,
    x_hat_0: &StateVec,
) -> Result<GridResult> {
    let p_f = solve_riccati(plant, &plant.q, plant.r_weight)?;
    let mut best: Option<(Candidate, f64)> = None;
    let mut feasible_points = 0;
    for idx in 0..grid.len() {
        let cand = grid.point(idx);
        let (_, fit) = evaluate(&cand, params, plant, x_hat_0, &p_f);
        if !fit.feasible {
            continue;
        }
        feasible_points += 1;
        if best.as_ref().is_none_or(|(_, j)| fit.cost < *j) {
            best = Some((cand, fit.cost));
        }
    }
    let (best, j_best) = best.ok_or(Error::EmptyFeasibleSet)?;
    Ok(GridResult {
        best,
        j_best,
        feasible_points,
        points: grid.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_scenario;
    use crate::sensing::Quantizer;
    use approx::assert_relative_eq;

    fn setup() -> (crate::Scenario, Matrix, StateVec) {
        let s = default_scenario();
        let p_f = solve_riccati(&s.plant, &s.plant.q, s.plant.r_weight).unwrap();
        let x_hat = Quantizer::for_plant(&s.plant, s.system.r).quantize(&s.plant.x0);
        (s, p_f, x_hat)
    }

    #[test]
    fn cost_at_origin_is_zero() {
        let (s, p_f, _) = setup();
        let c = Candidate::new(&[0.1, 0.2, 0.3], 0.6e6, 0.4e6);
        assert_eq!(
            mpc_cost(&c, &StateVec::zeros(3), &s.plant, &s.system, &p_f).unwrap(),
            0.0
        );
    }

    #[test]
    fn zero_gain_cost_follows_open_loop() {
        let (s, p_f, x0) = setup();
        let c = Candidate::new(&[0.0; 3], 0.6e6, 0.4e6);
        let mut x = x0.clone();
        let mut expected = 0.0;
        for _ in 0..s.system.horizon_n {
            expected += (x.transpose() * &s.plant.q * &x)[(0, 0)];
            x = &s.plant.a_tilde * x;
        }
        expected += 0.5 * (x.transpose() * &p_f * &x)[(0, 0)];
        let j = mpc_cost(&c, &x0, &s.plant, &s.system, &p_f).unwrap();
        assert_relative_eq!(j, expected, max_relative = 1e-14);
    }

    #[test]
    fn single_step_cost_unrolled() {
        let (s, p_f, x0) = setup();
        let c = Candidate::new(&[0.05, -0.1, 0.02], 0.5e6, 0.5e6);
        let eps = link_metrics(&s.system, c.w_u, c.w_d).unwrap().epsilon_c;
        let a_k = closed_loop_matrix(&s.plant, &c.k, eps);
        let u = (&c.k * &x0)[(0, 0)];
        let x1 = &a_k * &x0;
        let expected = (x0.transpose() * &s.plant.q * &x0)[(0, 0)]
            + s.plant.r_weight * u * u
            + 0.5 * (x1.transpose() * &p_f * &x1)[(0, 0)];
        let j = mpc_cost_with_loss(&c, &x0, &s.plant, 1, eps, &p_f);
        assert_relative_eq!(j, expected, max_relative = 1e-14);
    }

    #[test]
    fn cost_is_bit_deterministic() {
        let (s, p_f, x0) = setup();
        let c = Candidate::new(&[0.03, 0.07, -0.01], 0.7e6, 0.3e6);
        let a = mpc_cost(&c, &x0, &s.plant, &s.system, &p_f).unwrap();
        let b = mpc_cost(&c.clone(), &x0.clone(), &s.plant, &s.system, &p_f).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn bandwidth_overrun_fails_p1d() {
        let (s, _, x0) = setup();
        let w0 = s.system.w0;
        let c = Candidate::new(&[0.0; 3], 0.6 * w0, 0.4 * w0 + 1.0);
        let rep = check_feasibility(&c, &s.system, &s.plant, &x0);
        assert!(!rep.p1d.satisfied);
        assert_relative_eq!(rep.p1d.slack, -1.0, max_relative = 1e-6);
        assert!(!rep.feasible);
    }

    #[test]
    fn p1b_compares_against_arrival_limit() {
        let (s, _, x0) = setup();
        let c = Candidate::new(&[0.0; 3], 0.75e6, 0.25e6);
        let rep = check_feasibility(&c, &s.system, &s.plant, &x0);
        assert_eq!(rep.lambda_u, 60.0);
        let limit = crate::channel::max_arrival_rate(&s.system, c.w_u, c.w_d).unwrap();
        assert_relative_eq!(rep.p1b.slack, limit - 60.0, max_relative = 1e-14);
        assert!(rep.p1b.satisfied);
    }

    #[test]
    fn undefined_link_is_reported_not_raised() {
        let (s, _, x0) = setup();
        let c = Candidate::new(&[0.0; 3], 10.0, 0.5e6);
        let rep = check_feasibility(&c, &s.system, &s.plant, &x0);
        assert!(rep.precondition_violated);
        assert!(!rep.p1b.satisfied && !rep.feasible);
        assert_eq!(rep.violation(&s.system), f64::INFINITY);
    }

    #[test]
    fn zero_state_is_trivially_convergent() {
        let (s, _, _) = setup();
        let c = Candidate::new(&[0.0; 3], 0.75e6, 0.25e6);
        let rep = check_feasibility(&c, &s.system, &s.plant, &StateVec::zeros(3));
        assert!(rep.p1c.satisfied);
        assert!(rep.convergence.is_none());
    }

    #[test]
    fn loss_rate_clamp_makes_p1e_hold() {
        // Extreme rates: ε saturates at 0 or 1 but never leaves [0, 1].
        for (mu_u, mu_d) in [
            (1e-9, 1e-9),
            (1e9, 1e9 * (1.0 + 1e-12)),
            (1e-300, 5.0),
            (1e300, 1e300),
        ] {
            let e = crate::channel::packet_loss_rate(mu_u, mu_d, 0.1);
            assert!((0.0..=1.0).contains(&e), "{mu_u} {mu_d} {e}");
        }
        assert!(crate::channel::packet_loss_rate(f64::NAN, 5.0, 0.1).is_nan());
    }

    #[test]
    fn candidate_space_repairs_into_the_triangle() {
        let space = CandidateSpace {
            n: 3,
            k_max: 2.0,
            w0: 1e6,
        };
        let mut z = vec![5.0, -7.0, 0.5, 0.9e6, 0.6e6];
        space.clip(&mut z);
        assert_eq!(&z[..3], &[2.0, -2.0, 0.5]);
        assert_relative_eq!(z[3] + z[4], 1e6, max_relative = 1e-15);
        assert_relative_eq!(z[3] / z[4], 1.5, max_relative = 1e-12);
        let mut z = vec![0.0, 0.0, 0.0, -3.0, 2e6];
        space.clip(&mut z);
        assert_eq!((z[3], z[4]), (0.0, 1e6));

        let mut rng = crate::rng::stream(1, 0);
        let mut mean = [0.0; 2];
        for _ in 0..20_000 {
            let z = space.sample(&mut rng);
            assert!(z[3] >= 0.0 && z[4] >= 0.0 && z[3] + z[4] <= 1e6);
            assert!(z[..3].iter().all(|v| v.abs() <= 2.0));
            mean[0] += z[3] / 20_000.0;
            mean[1] += z[4] / 20_000.0;
        }
        // Uniform on the triangle: each coordinate has mean W0/3.
        for m in mean {
            assert!((m / 1e6 - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn grid_singleton_and_empty() {
        let (s, _, x0) = setup();
        let single = GridSpec {
            k_axes: vec![vec![0.0]; 3],
            w_u: vec![0.75e6],
            w_d: vec![0.25e6],
        };
        let out = grid_oracle(&s.system, &s.plant, &single, &x0).unwrap();
        assert_eq!(out.best, Candidate::new(&[0.0; 3], 0.75e6, 0.25e6));
        assert_eq!(out.points, 1);

        let hopeless = GridSpec {
            k_axes: vec![vec![0.0]; 3],
            w_u: vec![0.9e6, 1e6],
            w_d: vec![0.9e6],
        };
        assert!(matches!(
            grid_oracle(&s.system, &s.plant, &hopeless, &x0),
            Err(Error::EmptyFeasibleSet)
        ));
    }

    #[test]
    fn grid_enumeration_order() {
        let g = GridSpec {
            k_axes: vec![vec![1.0, 2.0], vec![3.0], vec![4.0, 5.0]],
            w_u: vec![10.0, 20.0],
            w_d: vec![30.0],
        };
        assert_eq!(g.len(), 8);
        let pts: Vec<Candidate> = (0..g.len()).map(|i| g.point(i)).collect();
        for k1 in [1.0, 2.0] {
            for k3 in [4.0, 5.0] {
                for wu in [10.0, 20.0] {
                    assert!(pts.contains(&Candidate::new(&[k1, 3.0, k3], wu, 30.0)));
                }
            }
        }
        assert_eq!(linspace(0.0, 1.0, 5), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn candidate_vector_round_trip() {
        let c = Candidate::new(&[0.1, -0.2, 0.3], 4e5, 5e5);
        assert_eq!(Candidate::from_slice(&c.to_vec()), c);
    }
}
