//! Monte-Carlo closed-loop trials of the delay-compensation protocol.
//!
//! Every `T_d` the sensor quantizes the true state, the controller predicts
//! `N` states with `A_K` and ships the command sequence `K·X̂_{t+τ}`, and the
//! actuator applies entry `min(⌊D_c/T_d⌋, N−1)` if the round trip `D_c`
//! finished within `D_c,max`. Otherwise the plant drifts for that step.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{link_metrics, sample_closed_loop_delay, LinkMetrics};
use crate::config::Scenario;
use crate::error::{Error, Result};
use crate::optimizer::{de_optimize, Candidate};
use crate::plant::closed_loop_matrix;
use crate::rng::{stream, OPTIMIZER_STREAM};
use crate::sensing::{predict_states, Quantizer};
use crate::StateVec;

/// States with a larger Euclidean norm end the trial.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Overrides for controlled experiments.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrialOptions {
    /// Deliver every packet regardless of the drawn delay.
    pub force_delivery: bool,
    /// Use this delay instead of sampling the channel.
    pub fixed_delay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// True state at the start of the step.
    #[serde(with = "crate::serde_la::column")]
    pub x: StateVec,
    /// Index into the predicted sequence that was applied; `None` when lost.
    pub source_index: Option<usize>,
    pub eta: bool,
    pub delay: f64,
    /// `XᵀQX` at the start of the step.
    pub state_distance: f64,
    /// `uᵀRu` applied during this step, zero when lost.
    pub energy: f64,
    pub acc_control_energy: f64,
    pub acc_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub stream: u64,
    pub steps: Vec<StepRecord>,
    pub diverged: bool,
    /// Quantizer inputs that fell outside the state bounds.
    pub clamp_events: usize,
    /// Delivered packets whose delay index exceeded `N − 1`.
    pub horizon_clamps: usize,
    pub reoptimizations: usize,
}

struct Controller {
    cand: Candidate,
    link: LinkMetrics,
    a_k: crate::Matrix,
}

impl Controller {
    fn new(scenario: &Scenario, cand: Candidate) -> Result<Self> {
        let link = link_metrics(&scenario.system, cand.w_u, cand.w_d)?;
        let a_k = closed_loop_matrix(&scenario.plant, &cand.k, link.epsilon_c);
        Ok(Self { cand, link, a_k })
    }
}

/// Runs one trial from the plant's initial state.
pub fn run_trial<R: Rng>(
    scenario: &Scenario,
    cand: &Candidate,
    steps: usize,
    rng: &mut R,
    opts: &TrialOptions,
) -> Result<TrialRecord> {
    let sys = &scenario.system;
    let plant = &scenario.plant;
    let quantizer = Quantizer::for_plant(plant, sys.r);
    let n = sys.horizon_n.max(1);
    let mut ctl = Controller::new(scenario, cand.clone())?;

    let mut x = plant.x0.clone();
    let mut rec = TrialRecord {
        seed: 0,
        stream: 0,
        steps: Vec::with_capacity(steps),
        diverged: false,
        clamp_events: 0,
        horizon_clamps: 0,
        reoptimizations: 0,
    };
    let (mut acc_distance, mut acc_energy) = (0.0, 0.0);

    for t in 0..steps {
        if !x.iter().all(|v| v.is_finite()) || x.norm() > DIVERGENCE_NORM {
            rec.diverged = true;
            break;
        }
        let (x_hat, clamped) = quantizer.quantize_counting(&x);
        rec.clamp_events += clamped;

        if let Some(every) = scenario.reoptimize_every {
            if every > 0 && t > 0 && t % every == 0 {
                let report = de_optimize(sys, plant, &scenario.de, &x_hat, rng)?;
                if report.feasible {
                    ctl = Controller::new(scenario, report.best)?;
                    rec.reoptimizations += 1;
                }
            }
        }

        let delay = match opts.fixed_delay {
            Some(d) => d,
            None => sample_closed_loop_delay(ctl.link.mu_u, ctl.link.mu_d, rng),
        };
        let delivered = opts.force_delivery || delay <= sys.d_c_max;
        let state_distance = (x.transpose() * &plant.q * &x)[(0, 0)];

        let mut next = &plant.a_tilde * &x;
        let (mut energy, mut source_index) = (0.0, None);
        if delivered {
            let raw = (delay / sys.t_d).floor().max(0.0);
            let idx = if raw >= n as f64 {
                rec.horizon_clamps += 1;
                n - 1
            } else {
                raw as usize
            };
            let predicted = predict_states(&ctl.a_k, &x_hat, idx + 1);
            let u = (&ctl.cand.k * &predicted[idx])[(0, 0)];
            energy = plant.r_weight * u * u;
            next += &plant.b_tilde * u;
            source_index = Some(idx);
        }
        acc_distance += state_distance;
        acc_energy += energy;
        rec.steps.push(StepRecord {
            step: t,
            x: std::mem::replace(&mut x, next),
            source_index,
            eta: delivered,
            delay,
            state_distance,
            energy,
            acc_control_energy: acc_energy,
            acc_cost: acc_distance + acc_energy,
        });
    }
    Ok(rec)
}

/// Mean and population standard deviation of each metric at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub time_s: f64,
    pub state_distance_mean: f64,
    pub state_distance_std: f64,
    pub acc_energy_mean: f64,
    pub acc_energy_std: f64,
    pub acc_cost_mean: f64,
    pub acc_cost_std: f64,
    pub loss_frac: f64,
}

/// CSV header of [`write_csv`].
pub const CSV_COLUMNS: [&str; 9] = [
    "step",
    "time_s",
    "state_distance_mean",
    "state_distance_std",
    "acc_energy_mean",
    "acc_energy_std",
    "acc_cost_mean",
    "acc_cost_std",
    "loss_frac",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub series: Vec<StepStats>,
    pub trials: usize,
    pub diverged_trials: usize,
    pub clamp_events: usize,
    pub horizon_clamps: usize,
    pub loss_fraction: f64,
}

/// Sum with pairwise splitting; the result depends only on the order of `v`.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = pairwise_sum(v) / n;
    let dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, (pairwise_sum(&dev) / n).sqrt())
}

/// Aggregates trials step by step. A trial that stopped early (divergence)
/// keeps contributing its last recorded values.
pub fn aggregate(records: &[TrialRecord], steps: usize, t_d: f64) -> MonteCarloResult {
    let trials = records.len();
    let mut series = Vec::with_capacity(steps);
    let mut cols = vec![vec![0.0; trials]; 4];
    for t in 0..steps {
        for (i, rec) in records.iter().enumerate() {
            let s = rec.steps.get(t).or(rec.steps.last());
            let (dist, en, cost, lost) = match s {
                Some(s) => (s.state_distance, s.acc_control_energy, s.acc_cost, !s.eta),
                None => (0.0, 0.0, 0.0, false),
            };
            cols[0][i] = dist;
            cols[1][i] = en;
            cols[2][i] = cost;
            cols[3][i] = if lost { 1.0 } else { 0.0 };
        }
        let (sd_m, sd_s) = mean_std(&cols[0]);
        let (en_m, en_s) = mean_std(&cols[1]);
        let (c_m, c_s) = mean_std(&cols[2]);
        series.push(StepStats {
            step: t,
            time_s: t as f64 * t_d,
            state_distance_mean: sd_m,
            state_distance_std: sd_s,
            acc_energy_mean: en_m,
            acc_energy_std: en_s,
            acc_cost_mean: c_m,
            acc_cost_std: c_s,
            loss_frac: pairwise_sum(&cols[3]) / trials as f64,
        });
    }
    let recorded: usize = records.iter().map(|r| r.steps.len()).sum();
    let lost: usize = records
        .iter()
        .map(|r| r.steps.iter().filter(|s| !s.eta).count())
        .sum();
    MonteCarloResult {
        series,
        trials,
        diverged_trials: records.iter().filter(|r| r.diverged).count(),
        clamp_events: records.iter().map(|r| r.clamp_events).sum(),
        horizon_clamps: records.iter().map(|r| r.horizon_clamps).sum(),
        loss_fraction: if recorded == 0 {
            0.0
        } else {
            lost as f64 / recorded as f64
        },
    }
}

/// Runs `trials` independent trials. Trial `i` uses stream `i` of
/// `master_seed`, so the output does not depend on the thread count.
pub fn run_trials(
    scenario: &Scenario,
    cand: &Candidate,
    steps: usize,
    trials: usize,
    master_seed: u64,
    opts: &TrialOptions,
) -> Result<Vec<TrialRecord>> {
    (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(master_seed, i);
            let mut rec = run_trial(scenario, cand, steps, &mut rng, opts)?;
            rec.seed = master_seed;
            rec.stream = i;
            Ok(rec)
        })
        .collect()
}

pub fn run_monte_carlo(
    scenario: &Scenario,
    cand: &Candidate,
    steps: usize,
    trials: usize,
    master_seed: u64,
    opts: &TrialOptions,
) -> Result<MonteCarloResult> {
    if trials == 0 {
        return Err(Error::Validation("trials ≥ 1 (got 0)".into()));
    }
    let records = run_trials(scenario, cand, steps, trials, master_seed, opts)?;
    Ok(aggregate(&records, steps, scenario.system.t_d))
}

pub fn write_csv(series: &[StepStats], path: &Path) -> Result<()> {
    let io_err = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    for s in series {
        w.serialize(s).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Parameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    DCMax,
    Rho,
    R,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::DCMax => "d_c_max",
            SweepParam::Rho => "rho",
            SweepParam::R => "r",
        }
    }

    pub fn apply(self, scenario: &Scenario, value: f64) -> Result<Scenario> {
        let mut s = scenario.clone();
        match self {
            SweepParam::DCMax => s.system.d_c_max = value,
            SweepParam::Rho => s.system.rho = value,
            SweepParam::R => {
                if !(value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64) {
                    return Err(Error::Validation(format!(
                        "r must be a positive integer (got {value})"
                    )));
                }
                s.system.r = value as u32;
            }
        }
        s.system.validate()?;
        Ok(s)
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d_c_max" => Ok(SweepParam::DCMax),
            "rho" => Ok(SweepParam::Rho),
            "r" => Ok(SweepParam::R),
            other => Err(Error::Validation(format!(
                "sweep parameter must be one of d_c_max, rho, r (got {other})"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub base: Scenario,
    pub steps: usize,
    pub trials: usize,
    pub seed: u64,
    /// Skip the optimizer and simulate this candidate for every value.
    pub fixed_candidate: Option<Candidate>,
    /// Simulate the optimizer's best candidate even when it is infeasible.
    pub allow_infeasible: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: f64,
    pub csv: Option<PathBuf>,
    pub candidate: Option<Candidate>,
    pub feasible: Option<bool>,
    pub j_best: Option<f64>,
    pub final_step: Option<StepStats>,
    pub diverged_trials: Option<usize>,
    pub loss_fraction: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub param: SweepParam,
    pub steps: usize,
    pub trials: usize,
    pub seed: u64,
    pub entries: Vec<SweepEntry>,
}

/// Chooses the candidate for `scenario`: the fixed one if given, otherwise
/// the optimizer's best from the quantized initial state.
pub fn plan_candidate(scenario: &Scenario, seed: u64) -> Result<crate::optimizer::SolveReport> {
    let q = Quantizer::for_plant(&scenario.plant, scenario.system.r);
    let x_hat_0 = q.quantize(&scenario.plant.x0);
    let mut rng = stream(seed, OPTIMIZER_STREAM);
    de_optimize(
        &scenario.system,
        &scenario.plant,
        &scenario.de,
        &x_hat_0,
        &mut rng,
    )
}

fn sweep_value(spec: &SweepSpec, value: f64, out_dir: &Path) -> Result<SweepEntry> {
    let scenario = spec.param.apply(&spec.base, value)?;
    let (cand, feasible, j_best) = match &spec.fixed_candidate {
        Some(c) => (c.clone(), None, None),
        None => {
            let rep = plan_candidate(&scenario, spec.seed)?;
            if !rep.feasible && !spec.allow_infeasible {
                return Ok(SweepEntry {
                    value,
                    csv: None,
                    candidate: Some(rep.best),
                    feasible: Some(false),
                    j_best: Some(rep.j_best),
                    final_step: None,
                    diverged_trials: None,
                    loss_fraction: None,
                    error: Some("no feasible candidate found".into()),
                });
            }
            (rep.best, Some(rep.feasible), Some(rep.j_best))
        }
    };
    let mc = run_monte_carlo(
        &scenario,
        &cand,
        spec.steps,
        spec.trials,
        spec.seed,
        &TrialOptions::default(),
    )?;
    let csv = out_dir.join(format!("{}_{}.csv", spec.param.name(), value));
    write_csv(&mc.series, &csv)?;
    Ok(SweepEntry {
        value,
        csv: Some(csv),
        candidate: Some(cand),
        feasible,
        j_best,
        final_step: mc.series.last().copied(),
        diverged_trials: Some(mc.diverged_trials),
        loss_fraction: Some(mc.loss_fraction),
        error: None,
    })
}

/// Runs every value of the sweep, writing one CSV per value and
/// `summary.json`. Failures are recorded per value.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path) -> Result<SweepSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let entries = spec
        .values
        .iter()
        .map(|&value| {
            sweep_value(spec, value, out_dir).unwrap_or_else(|e| SweepEntry {
                value,
                csv: None,
                candidate: None,
                feasible: None,
                j_best: None,
                final_step: None,
                diverged_trials: None,
                loss_fraction: None,
                error: Some(e.to_string()),
            })
        })
        .collect();
    let summary = SweepSummary {
        param: spec.param,
        steps: spec.steps,
        trials: spec.trials,
        seed: spec.seed,
        entries,
    };
    let path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_scenario;
    use crate::GainVec;

    fn cand() -> Candidate {
        Candidate::new(&[0.02, 0.08, -0.02], 0.75e6, 0.25e6)
    }

    #[test]
    fn zero_start_stays_at_rest() {
        let mut s = default_scenario();
        s.plant.x0 = StateVec::zeros(3);
        // Zero sits on a bin edge, so use enough bits that the midpoint
        // offset is negligible, and a zero gain so nothing moves at all.
        let c = Candidate::new(&[0.0; 3], 0.75e6, 0.25e6);
        let rec = run_trial(&s, &c, 50, &mut stream(1, 0), &TrialOptions::default()).unwrap();
        assert!(rec
            .steps
            .iter()
            .all(|r| r.state_distance == 0.0 && r.acc_cost == 0.0));
    }

    #[test]
    fn perfect_loop_matches_deterministic_iteration() {
        let mut s = default_scenario();
        s.system.r = 30;
        let c = cand();
        let opts = TrialOptions {
            force_delivery: true,
            fixed_delay: Some(0.0),
        };
        let rec = run_trial(&s, &c, 101, &mut stream(2, 0), &opts).unwrap();
        let closed = &s.plant.a_tilde + &s.plant.b_tilde * &c.k;
        let mut x = s.plant.x0.clone();
        for _ in 0..100 {
            x = &closed * x;
        }
        let got = &rec.steps[100].x;
        assert!(
            (got - &x).norm() <= 1e-6 * x.norm().max(1e-12),
            "{got} vs {x}"
        );
    }

    #[test]
    fn accounting_identities() {
        let s = default_scenario();
        let rec = run_trial(
            &s,
            &cand(),
            300,
            &mut stream(3, 0),
            &TrialOptions::default(),
        )
        .unwrap();
        let (mut dist, mut energy) = (0.0, 0.0);
        let mut prev_energy = 0.0;
        for r in &rec.steps {
            if !r.eta {
                assert_eq!(r.energy, 0.0);
                assert!(r.source_index.is_none());
            }
            dist += r.state_distance;
            energy += r.energy;
            assert_eq!(r.acc_cost, dist + energy);
            assert_eq!(r.acc_control_energy, energy);
            assert!(r.acc_control_energy >= prev_energy);
            prev_energy = r.acc_control_energy;
        }
    }

    #[test]
    fn monte_carlo_determinism_and_single_trial() {
        let s = default_scenario();
        let a = run_monte_carlo(&s, &cand(), 40, 8, 11, &TrialOptions::default()).unwrap();
        let b = run_monte_carlo(&s, &cand(), 40, 8, 11, &TrialOptions::default()).unwrap();
        assert_eq!(a.series, b.series);

        let one = run_monte_carlo(&s, &cand(), 40, 1, 11, &TrialOptions::default()).unwrap();
        let rec = run_trial(
            &s,
            &cand(),
            40,
            &mut stream(11, 0),
            &TrialOptions::default(),
        )
        .unwrap();
        for (st, r) in one.series.iter().zip(&rec.steps) {
            assert_eq!(st.state_distance_mean, r.state_distance);
            assert_eq!(st.acc_cost_mean, r.acc_cost);
            assert_eq!(st.state_distance_std, 0.0);
            assert_eq!(st.acc_energy_std, 0.0);
        }
        assert!(run_monte_carlo(&s, &cand(), 40, 0, 11, &TrialOptions::default()).is_err());
    }

    #[test]
    fn divergence_is_flagged() {
        // A negative engine constant makes the acceleration mode expand by
        // 1.8 per step; with zero gain nothing holds it back.
        let mut s = default_scenario();
        s.plant = crate::config::agv_plant(
            -0.125,
            s.system.t_d,
            &crate::config::Weights::default(),
            &crate::config::StateBounds {
                x_l: s.plant.x_l.clone(),
                x_u: s.plant.x_u.clone(),
            },
            s.plant.x0.clone(),
        )
        .unwrap();
        let idle = Candidate::new(&[0.0; 3], 0.75e6, 0.25e6);
        let rec = run_trial(&s, &idle, 1000, &mut stream(4, 0), &TrialOptions::default()).unwrap();
        assert!(rec.diverged);
        assert!(rec.steps.len() < 1000);
        let mc = aggregate(&[rec.clone()], 1000, s.system.t_d);
        assert_eq!(mc.diverged_trials, 1);
        assert_eq!(
            mc.series[999].acc_cost_mean,
            rec.steps.last().unwrap().acc_cost
        );
    }

    #[test]
    fn delay_index_clamps_to_horizon() {
        let s = default_scenario();
        let opts = TrialOptions {
            force_delivery: true,
            fixed_delay: Some(5.0),
        };
        let rec = run_trial(&s, &cand(), 5, &mut stream(5, 0), &opts).unwrap();
        assert!(rec
            .steps
            .iter()
            .all(|r| r.source_index == Some(s.system.horizon_n - 1)));
        assert_eq!(rec.horizon_clamps, 5);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_exact_values() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn sweep_param_parsing_and_application() {
        let s = default_scenario();
        assert_eq!("r".parse::<SweepParam>().unwrap(), SweepParam::R);
        assert!("bogus".parse::<SweepParam>().is_err());
        assert_eq!(SweepParam::R.apply(&s, 4.0).unwrap().system.r, 4);
        assert!(SweepParam::R.apply(&s, 4.5).is_err());
        assert!(SweepParam::Rho.apply(&s, 0.99).is_ok());
        assert_eq!(
            SweepParam::DCMax.apply(&s, 0.06).unwrap().system.d_c_max,
            0.06
        );
    }

    #[test]
    fn gain_vec_shape() {
        assert_eq!(cand().k, GainVec::from_row_slice(&[0.02, 0.08, -0.02]));
    }
}
