//! Scenario parameters and the scenario file.
//!
//! A scenario file is a single flat JSON object. Keys follow the symbols of
//! the model (`theta_u`, `snr_u_db`, `w0_hz`, ...). SNRs may be given in dB
//! (`snr_u_db`) or as a linear ratio (`snr_u`), never both; internally they
//! are always linear. See `docs/scenario.md` at the repository root for the
//! full key list.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Matrix, StateVec};

/// Physical and communication constants of one scenario.
///
/// Units: `theta_*` in 1/bit, `w0` in Hz, `t_d` and `d_c_max` in seconds,
/// SNRs as linear power ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub snr_u: f64,
    pub snr_d: f64,
    pub beta_u: f64,
    pub beta_d: f64,
    pub theta_u: f64,
    pub theta_d: f64,
    pub w0: f64,
    pub c_d: f64,
    pub t_d: f64,
    pub d_c_max: f64,
    pub rho: f64,
    pub r: u32,
    pub horizon_n: usize,
    pub trials: usize,
    pub seed: u64,
    /// Multiplier on every closed-loop delay (equivalently divides both
    /// delay rates). 1 means the model as derived.
    pub delay_scale: f64,
    /// Count `r` bits per state component instead of per sample when
    /// computing the uplink arrival rate.
    pub bits_per_state_vector: bool,
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("snr_u", self.snr_u),
            ("snr_d", self.snr_d),
            ("beta_u", self.beta_u),
            ("beta_d", self.beta_d),
            ("theta_u", self.theta_u),
            ("theta_d", self.theta_d),
            ("w0", self.w0),
            ("t_d", self.t_d),
            ("d_c_max", self.d_c_max),
            ("rho", self.rho),
            ("c_d", self.c_d),
            ("delay_scale", self.delay_scale),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Validation(format!("{name} > 0 (got {value})")));
            }
        }
        if self.r < 1 {
            return Err(Error::Validation(format!("r ≥ 1 (got {})", self.r)));
        }
        if self.horizon_n < 1 {
            return Err(Error::Validation(format!(
                "horizon_n ≥ 1 (got {})",
                self.horizon_n
            )));
        }
        if self.trials < 1 {
            return Err(Error::Validation(format!(
                "trials ≥ 1 (got {})",
                self.trials
            )));
        }
        Ok(())
    }
}

/// Weights of the quadratic cost and the Lyapunov function.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub p: Matrix,
    pub q: Matrix,
    pub r_weight: f64,
}

impl Default for Weights {
    fn default() -> Self {
        let diag = DVector::from_vec(vec![10.0, 10.0, 1.0]);
        Self {
            p: DMatrix::from_diagonal(&diag),
            q: DMatrix::from_diagonal(&diag),
            r_weight: 1.0,
        }
    }
}

/// Box `[x_l, x_u]` the sensor quantizes over.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBounds {
    pub x_l: StateVec,
    pub x_u: StateVec,
}

/// Continuous and Euler-discretized linear plant with its weights and bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub a: Matrix,
    pub b: Matrix,
    pub a_tilde: Matrix,
    pub b_tilde: Matrix,
    pub x_l: StateVec,
    pub x_u: StateVec,
    /// `max(|x_u[i]|, |x_l[i]|)` per component.
    pub x_m: StateVec,
    pub p: Matrix,
    pub q: Matrix,
    pub r_weight: f64,
    pub x0: StateVec,
}

impl PlantModel {
    /// Builds the plant from continuous `(A, B)` and discretizes with
    /// `Ã = T_d·A + I`, `B̃ = T_d·B`.
    pub fn new(
        a: Matrix,
        b: Matrix,
        t_d: f64,
        weights: &Weights,
        bounds: &StateBounds,
        x0: StateVec,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!("A is {}x{}", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::Dimension(format!(
                "B has {} rows, A has {}",
                b.nrows(),
                n
            )));
        }
        if !(t_d.is_finite() && t_d > 0.0) {
            return Err(Error::Validation(format!("t_d > 0 (got {t_d})")));
        }
        for (name, len) in [
            ("x_l", bounds.x_l.len()),
            ("x_u", bounds.x_u.len()),
            ("x0", x0.len()),
        ] {
            if len != n {
                return Err(Error::Dimension(format!(
                    "{name} has {len} entries, expected {n}"
                )));
            }
        }
        for (name, m) in [("P", &weights.p), ("Q", &weights.q)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            check_psd(name, m)?;
        }
        if !(weights.r_weight.is_finite() && weights.r_weight >= 0.0) {
            return Err(Error::Validation(format!(
                "r_weight ≥ 0 (got {})",
                weights.r_weight
            )));
        }
        for i in 0..n {
            if !(bounds.x_l[i] < bounds.x_u[i]) {
                return Err(Error::Validation(format!(
                    "x_l < x_u componentwise (component {i}: {} vs {})",
                    bounds.x_l[i], bounds.x_u[i]
                )));
            }
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("x0 must be finite".into()));
        }

        let a_tilde = &a * t_d + Matrix::identity(n, n);
        let b_tilde = &b * t_d;
        let x_m = bounds.x_l.zip_map(&bounds.x_u, |l, u| l.abs().max(u.abs()));
        Ok(Self {
            a,
            b,
            a_tilde,
            b_tilde,
            x_l: bounds.x_l.clone(),
            x_u: bounds.x_u.clone(),
            x_m,
            p: weights.p.clone(),
            q: weights.q.clone(),
            r_weight: weights.r_weight,
            x0,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

fn check_psd(name: &str, m: &Matrix) -> Result<()> {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Validation(format!("{name} symmetric")));
    }
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
        return Err(Error::Validation(format!(
            "{name} positive semidefinite (min eigenvalue {})",
            eig.eigenvalues.min()
        )));
    }
    Ok(())
}

/// Longitudinal AGV model with state `[position, velocity, acceleration]`
/// and engine constant `varsigma`.
pub fn agv_plant(
    varsigma: f64,
    t_d: f64,
    weights: &Weights,
    bounds: &StateBounds,
    x0: StateVec,
) -> Result<PlantModel> {
    if varsigma == 0.0 || !varsigma.is_finite() {
        return Err(Error::Validation(format!("varsigma ≠ 0 (got {varsigma})")));
    }
    let inv = -1.0 / varsigma;
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(3, 3, &[
        0.0, 1.0, 0.0,
        0.0, 0.0, 1.0,
        0.0, 0.0, inv,
    ]);
    let b = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, inv]);
    PlantModel::new(a, b, t_d, weights, bounds, x0)
}

/// How a trial vector inherits from the mutant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CrossoverMode {
    /// Whole mutant with probability `p_cr`, otherwise the whole incumbent.
    #[default]
    Vector,
    /// Classical per-dimension binomial crossover.
    Binomial,
}

/// Differential-evolution settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeConfig {
    pub n_p: usize,
    pub p_cr: f64,
    pub f_d: f64,
    pub n_m: usize,
    /// Consecutive generations with `|ΔJ_best| < tol` before stopping.
    pub n_stall: usize,
    pub tol: f64,
    /// Half-width of the search box for each gain component.
    pub k_max: f64,
    pub crossover: CrossoverMode,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self {
            n_p: 15,
            p_cr: 0.7,
            f_d: 0.5,
            n_m: 1000,
            n_stall: 5,
            tol: 0.01,
            k_max: DEFAULT_K_MAX,
            crossover: CrossoverMode::Vector,
        }
    }
}

/// Default gain-box half-width. On the built-in scenario no feasible gain
/// has a component above about 0.19 in magnitude, so this box holds the
/// whole feasible set while keeping most of the initial population feasible.
pub const DEFAULT_K_MAX: f64 = 0.25;

impl DeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_p < 4 {
            return Err(Error::Validation(format!("n_p ≥ 4 (got {})", self.n_p)));
        }
        if !(0.0..=1.0).contains(&self.p_cr) {
            return Err(Error::Validation(format!(
                "0 ≤ p_cr ≤ 1 (got {})",
                self.p_cr
            )));
        }
        for (name, v) in [("f_d", self.f_d), ("tol", self.tol), ("k_max", self.k_max)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("{name} > 0 (got {v})")));
            }
        }
        Ok(())
    }
}

/// A fully validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub system: SystemParams,
    pub plant: PlantModel,
    pub de: DeConfig,
    pub varsigma: f64,
    /// Re-solve the optimization every this many steps during a trial.
    pub reoptimize_every: Option<usize>,
}

/// On-disk form of a scenario. Every key is flat at the top level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_u_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_u: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_d_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_d: Option<f64>,
    pub beta_u: f64,
    pub beta_d: f64,
    pub theta_u: f64,
    pub theta_d: f64,
    pub w0_hz: f64,
    pub c_d: f64,
    pub t_d_s: f64,
    pub d_c_max_s: f64,
    pub rho: f64,
    pub r: u32,
    pub horizon_n: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub delay_scale: f64,
    #[serde(default)]
    pub bits_per_state_vector: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reoptimize_every: Option<usize>,

    pub varsigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    pub x_l: Vec<f64>,
    pub x_u: Vec<f64>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub de_n_p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub de_p_cr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub de_f_d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub de_n_m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub de_n_stall: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub de_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub de_k_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub de_crossover: Option<CrossoverMode>,
}

fn default_trials() -> usize {
    500
}

fn one() -> f64 {
    1.0
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

fn pick_snr(name: &str, db: Option<f64>, linear: Option<f64>) -> Result<f64> {
    match (db, linear) {
        (Some(db), None) => Ok(db_to_linear(db)),
        (None, Some(lin)) => Ok(lin),
        (Some(_), Some(_)) => Err(Error::Validation(format!(
            "give either {name}_db or {name}, not both"
        ))),
        (None, None) => Err(Error::Validation(format!("missing {name}_db or {name}"))),
    }
}

fn weight_matrix(
    name: &str,
    diag: Option<&Vec<f64>>,
    full: Option<&Vec<Vec<f64>>>,
    default: &Matrix,
) -> Result<Matrix> {
    match (diag, full) {
        (Some(_), Some(_)) => Err(Error::Validation(format!(
            "give either {name}_diag or {name}, not both"
        ))),
        (Some(d), None) => Ok(DMatrix::from_diagonal(&DVector::from_vec(d.clone()))),
        (None, Some(rows)) => {
            let n = rows.len();
            if rows.iter().any(|r| r.len() != n) {
                return Err(Error::Dimension(format!("{name} must be square")));
            }
            Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
        }
        (None, None) => Ok(default.clone()),
    }
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

impl ScenarioFile {
    pub fn into_scenario(self) -> Result<Scenario> {
        let system = SystemParams {
            snr_u: pick_snr("snr_u", self.snr_u_db, self.snr_u)?,
            snr_d: pick_snr("snr_d", self.snr_d_db, self.snr_d)?,
            beta_u: self.beta_u,
            beta_d: self.beta_d,
            theta_u: self.theta_u,
            theta_d: self.theta_d,
            w0: self.w0_hz,
            c_d: self.c_d,
            t_d: self.t_d_s,
            d_c_max: self.d_c_max_s,
            rho: self.rho,
            r: self.r,
            horizon_n: self.horizon_n,
            trials: self.trials,
            seed: self.seed,
            delay_scale: self.delay_scale,
            bits_per_state_vector: self.bits_per_state_vector,
        };
        system.validate()?;

        let defaults = Weights::default();
        let weights = Weights {
            p: weight_matrix("p", self.p_diag.as_ref(), self.p.as_ref(), &defaults.p)?,
            q: weight_matrix("q", self.q_diag.as_ref(), self.q.as_ref(), &defaults.q)?,
            r_weight: self.r_weight.unwrap_or(defaults.r_weight),
        };
        let bounds = StateBounds {
            x_l: DVector::from_vec(self.x_l),
            x_u: DVector::from_vec(self.x_u),
        };
        let x0 = DVector::from_vec(self.x0.unwrap_or_else(|| vec![-100.0, 1.0, 1.0]));
        let plant = agv_plant(self.varsigma, system.t_d, &weights, &bounds, x0)?;

        let d = DeConfig::default();
        let de = DeConfig {
            n_p: self.de_n_p.unwrap_or(d.n_p),
            p_cr: self.de_p_cr.unwrap_or(d.p_cr),
            f_d: self.de_f_d.unwrap_or(d.f_d),
            n_m: self.de_n_m.unwrap_or(d.n_m),
            n_stall: self.de_n_stall.unwrap_or(d.n_stall),
            tol: self.de_tol.unwrap_or(d.tol),
            k_max: self.de_k_max.unwrap_or(d.k_max),
            crossover: self.de_crossover.unwrap_or(d.crossover),
        };
        de.validate()?;

        if let Some(0) = self.reoptimize_every {
            return Err(Error::Validation("reoptimize_every ≥ 1".into()));
        }

        Ok(Scenario {
            system,
            plant,
            de,
            varsigma: self.varsigma,
            reoptimize_every: self.reoptimize_every,
        })
    }

    /// Lossless file form of a scenario (SNRs written as linear ratios).
    pub fn from_scenario(s: &Scenario) -> Self {
        let sys = &s.system;
        Self {
            snr_u: Some(sys.snr_u),
            snr_d: Some(sys.snr_d),
            beta_u: sys.beta_u,
            beta_d: sys.beta_d,
            theta_u: sys.theta_u,
            theta_d: sys.theta_d,
            w0_hz: sys.w0,
            c_d: sys.c_d,
            t_d_s: sys.t_d,
            d_c_max_s: sys.d_c_max,
            rho: sys.rho,
            r: sys.r,
            horizon_n: sys.horizon_n,
            trials: sys.trials,
            seed: sys.seed,
            delay_scale: sys.delay_scale,
            bits_per_state_vector: sys.bits_per_state_vector,
            reoptimize_every: s.reoptimize_every,
            varsigma: s.varsigma,
            p: Some(matrix_rows(&s.plant.p)),
            q: Some(matrix_rows(&s.plant.q)),
            r_weight: Some(s.plant.r_weight),
            x0: Some(s.plant.x0.iter().copied().collect()),
            x_l: s.plant.x_l.iter().copied().collect(),
            x_u: s.plant.x_u.iter().copied().collect(),
            de_n_p: Some(s.de.n_p),
            de_p_cr: Some(s.de.p_cr),
            de_f_d: Some(s.de.f_d),
            de_n_m: Some(s.de.n_m),
            de_n_stall: Some(s.de.n_stall),
            de_tol: Some(s.de.tol),
            de_k_max: Some(s.de.k_max),
            de_crossover: Some(s.de.crossover),
            ..Default::default()
        }
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let file: ScenarioFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    file.into_scenario()
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text)
}

pub fn scenario_to_json(s: &Scenario) -> String {
    // ScenarioFile holds only plain numbers and vectors.
    serde_json::to_string_pretty(&ScenarioFile::from_scenario(s)).expect("serializable")
}

pub fn save_scenario(s: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scenario_to_json(s) + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// The built-in AGV scenario (bounds and gain box are not from
/// the model and are declared here).
pub fn default_scenario_file() -> ScenarioFile {
    ScenarioFile {
        snr_u_db: Some(30.0),
        snr_d_db: Some(33.0),
        beta_u: 1.0,
        beta_d: 1.0,
        theta_u: 0.02,
        theta_d: 0.04,
        w0_hz: 1.5e6,
        c_d: 0.1,
        t_d_s: 0.1,
        d_c_max_s: 0.1,
        rho: 0.999,
        r: 6,
        horizon_n: 10,
        trials: 500,
        seed: 42,
        delay_scale: 1.0,
        varsigma: 0.125,
        x_l: vec![-150.0, -10.0, -10.0],
        x_u: vec![50.0, 10.0, 10.0],
        ..Default::default()
    }
}

pub fn default_scenario() -> Scenario {
    default_scenario_file()
        .into_scenario()
        .expect("built-in scenario is valid")
}
