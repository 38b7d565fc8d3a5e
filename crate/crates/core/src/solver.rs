//! Gradient iteration on the flow schedule.
//!
//! Each iteration runs a forward and a backward sweep, then moves every grid
//! flow by `sign · gain · dH/dQ(t)` and clips to the bounds. The loop stops
//! when the projected gradient falls below the tolerance, when J stagnates, or
//! at the iteration cap.

use serde::{Deserialize, Serialize};

use crate::control::{ControlTrajectory, TimeGrid};
use crate::deterministic::{self, ForwardSweep};
use crate::dynamics::RhsMode;
use crate::error::{Error, Result};
use crate::model::ProcessParams;
use crate::moments::{self, MomentTrajectory};

/// Direction of the flow update relative to dH/dQ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// Probe both signs on the first iteration and keep the one that raises J.
    #[default]
    Auto,
    Plus,
    Minus,
}

impl SignConvention {
    fn fixed(self) -> Option<f64> {
        match self {
            SignConvention::Auto => None,
            SignConvention::Plus => Some(1.0),
            SignConvention::Minus => Some(-1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub t_final_hr: f64,
    pub n_grid: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub gradient_gain: f64,
    pub q_start_lph: f64,
    pub rhs_mode: RhsMode,
    pub sign: SignConvention,
    /// Iterations over which relative J change is measured for the secondary stop.
    pub stagnation_window: usize,
    pub stagnation_tolerance: f64,
    /// Breakthrough ratio at which throughput diagnostics are reported.
    pub report_ratio: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            t_final_hr: 300.0,
            n_grid: 1000,
            tolerance: 1e-9,
            max_iterations: 50_000,
            gradient_gain: 200.0,
            q_start_lph: 0.42,
            rhs_mode: RhsMode::Exact,
            sign: SignConvention::Auto,
            stagnation_window: 500,
            stagnation_tolerance: 1e-12,
            report_ratio: 0.14,
        }
    }
}

impl SolverConfig {
    pub fn validation_errors(&self, params: &ProcessParams) -> Vec<Error> {
        let mut errs = Vec::new();
        if !(self.t_final_hr.is_finite() && self.t_final_hr > 0.0) {
            errs.push(Error::param("t_final_hr", "must be positive"));
        }
        if self.n_grid <= 500 {
            errs.push(Error::param(
                "n_grid",
                format!("must exceed 500 so that Δt < t_final/500, got {}", self.n_grid),
            ));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            errs.push(Error::param("tolerance", "must be positive"));
        }
        if !(self.gradient_gain.is_finite() && self.gradient_gain > 0.0) {
            errs.push(Error::param("gradient_gain", "must be positive"));
        }
        if !(self.q_start_lph >= params.q_min_lph && self.q_start_lph <= params.q_max_lph) {
            errs.push(Error::param(
                "q_start_lph",
                format!(
                    "{} is outside the flow bounds [{}, {}]",
                    self.q_start_lph, params.q_min_lph, params.q_max_lph
                ),
            ));
        }
        if self.stagnation_window == 0 {
            errs.push(Error::param("stagnation_window", "must be at least 1"));
        }
        if !(self.stagnation_tolerance >= 0.0) {
            errs.push(Error::param("stagnation_tolerance", "must be non-negative"));
        }
        if !(self.report_ratio > 0.0 && self.report_ratio < 1.0) {
            errs.push(Error::param("report_ratio", "must lie in (0, 1)"));
        }
        errs
    }

    pub fn validate(&self, params: &ProcessParams) -> Result<()> {
        match self.validation_errors(params).into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.t_final_hr, self.n_grid)
    }

    pub fn initial_control(&self, params: &ProcessParams) -> Result<ControlTrajectory> {
        ControlTrajectory::constant(self.grid()?, self.q_start_lph, params.q_min_lph, params.q_max_lph)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Tolerance,
    Stagnation,
    IterationCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// max |dH/dQ| over grid points whose update is not blocked by a bound.
    pub max_dh_dq: f64,
    /// J at the objective time t_m − σ.
    pub j: f64,
    pub h_mean: f64,
}

/// Time, volume and captured mass up to a breakthrough ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub time_hr: f64,
    pub volume_l: f64,
    pub mass_per_resin_g_per_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub converged: bool,
    pub stop_reason: StopReason,
    /// Number of flow updates applied.
    pub iterations: usize,
    /// Sign applied to dH/dQ in the update.
    pub sign: f64,
    pub control: ControlTrajectory,
    pub trajectory: MomentTrajectory,
    pub dh_dq: Vec<f64>,
    pub hamiltonian: Vec<f64>,
    pub history: Vec<IterationRecord>,
    /// Iterations after burn-in where J fell by more than the noise allowance.
    pub j_decreases: usize,
    pub final_max_dh_dq: f64,
    pub j_final: f64,
    pub objective_time_hr: f64,
    pub j_at_objective_time: f64,
    pub report_ratio: f64,
    pub time_to_report_ratio_hr: Option<f64>,
    pub volume_processed_l: Option<f64>,
    pub mass_removed_per_resin_g_per_l: Option<f64>,
    #[serde(skip)]
    resin_volume_l: f64,
    #[serde(skip)]
    c0_g_per_l: f64,
}

impl SolveReport {
    /// First time ψ reaches `ratio`, linearly interpolated on the grid.
    pub fn time_to_ratio(&self, ratio: f64) -> Option<f64> {
        time_to_ratio(&self.trajectory, ratio)
    }

    pub fn throughput_at_ratio(&self, ratio: f64) -> Option<Throughput> {
        let t = self.time_to_ratio(ratio)?;
        Some(throughput(&self.trajectory, self.c0_g_per_l, self.resin_volume_l, t))
    }

    pub fn final_flow(&self) -> f64 {
        *self.control.flows().last().expect("non-empty control")
    }
}

/// First grid crossing of μ0 = `ratio`, linearly interpolated.
pub fn time_to_ratio(traj: &MomentTrajectory, ratio: f64) -> Option<f64> {
    let g = traj.grid;
    let s = &traj.states;
    if s[0].mu0 >= ratio {
        return Some(0.0);
    }
    s.windows(2).enumerate().find_map(|(i, w)| {
        let (a, b) = (w[0].mu0, w[1].mu0);
        (b >= ratio && a < ratio).then(|| g.time(i) + g.dt() * (ratio - a) / (b - a))
    })
}

/// Volume ∫Q dt and captured mass ∫C0(1 − ψ)Q dt / V_resin over `[0, t_end]`.
///
/// Trapezoid rule on the grid, with the last partial interval interpolated.
pub fn throughput(traj: &MomentTrajectory, c0_g_per_l: f64, resin_volume_l: f64, t_end: f64) -> Throughput {
    let g = traj.grid;
    let dt = g.dt();
    let captured = |i: usize| c0_g_per_l * (1.0 - traj.states[i].mu0) * traj.flows[i];
    let t_end = t_end.clamp(0.0, g.t_final);
    let mut volume = 0.0;
    let mut mass = 0.0;
    let mut i = 0;
    while i < g.n_steps && g.time(i + 1) <= t_end {
        volume += 0.5 * dt * (traj.flows[i] + traj.flows[i + 1]);
        mass += 0.5 * dt * (captured(i) + captured(i + 1));
        i += 1;
    }
    let rest = t_end - g.time(i);
    if i < g.n_steps && rest > 0.0 {
        let w = rest / dt;
        let q_end = traj.flows[i] + w * (traj.flows[i + 1] - traj.flows[i]);
        let c_end = captured(i) + w * (captured(i + 1) - captured(i));
        volume += 0.5 * rest * (traj.flows[i] + q_end);
        mass += 0.5 * rest * (captured(i) + c_end);
    }
    Throughput {
        time_hr: t_end,
        volume_l: volume,
        mass_per_resin_g_per_l: mass / resin_volume_l,
    }
}

/// Closed-form [`Throughput`] at constant flow up to ψ = `ratio`.
pub fn fixed_flow_throughput(params: &ProcessParams, flow: f64, ratio: f64) -> Throughput {
    let t = crate::model::time_to_ratio_constant(params, flow, ratio);
    let leaked = crate::model::integrated_ratio_constant(params, flow, t);
    Throughput {
        time_hr: t,
        volume_l: flow * t,
        mass_per_resin_g_per_l: params.c0_g_per_l() * flow * (t - leaked) / params.resin_volume_l,
    }
}

/// One gradient evaluation: forward sweep plus dH/dQ and H on the grid.
pub(crate) struct GradientEval {
    pub forward: ForwardSweep,
    pub dh_dq: Vec<f64>,
    pub hamiltonian: Vec<f64>,
}

/// `(t_m − σ, J there)` with the moments taken from the final state.
pub fn objective_at_objective_time(traj: &MomentTrajectory, c0_g_per_l: f64) -> (f64, f64) {
    let last = traj.last();
    let t = moments::objective_time(last.mu1, last.sigma(), -1.0).unwrap_or(0.0);
    let i = traj.grid.nearest_index(t);
    (t, moments::objective_value(&traj.states[i], traj.flows[i], c0_g_per_l))
}

/// max |dH/dQ| over points where the update `sign·dH/dQ` is not pushing into a bound.
pub fn projected_max_gradient(control: &ControlTrajectory, dh_dq: &[f64], sign: f64) -> f64 {
    let (lo, hi) = control.bounds();
    control
        .flows()
        .iter()
        .zip(dh_dq)
        .filter(|(q, g)| {
            let d = sign * **g;
            !((**q <= lo && d < 0.0) || (**q >= hi && d > 0.0))
        })
        .map(|(_, g)| g.abs())
        .fold(0.0, f64::max)
}

fn stepped(control: &ControlTrajectory, dh_dq: &[f64], scale: f64) -> ControlTrajectory {
    let mut next = control.clone();
    let delta: Vec<f64> = dh_dq.iter().map(|g| scale * g).collect();
    next.step_clipped(&delta);
    next
}

/// Picks the update sign whose trial step gives the larger J at the objective time. Ties go to `+`.
fn probe_sign(
    params: &ProcessParams,
    config: &SolverConfig,
    control: &ControlTrajectory,
    dh_dq: &[f64],
) -> Result<f64> {
    let c0 = params.c0_g_per_l();
    let mut best = (1.0, f64::NEG_INFINITY);
    for s in [1.0, -1.0] {
        let trial = stepped(control, dh_dq, s * config.gradient_gain);
        let traj = moments::integrate_moments(params, &trial, config.rhs_mode)?;
        let (_, j) = objective_at_objective_time(&traj, c0);
        log::debug!("sign probe {s:+}: J = {j:e}");
        if j > best.1 {
            best = (s, j);
        }
    }
    Ok(best.0)
}

pub(crate) fn gradient_loop(
    params: &ProcessParams,
    config: &SolverConfig,
    mut evaluate: impl FnMut(&ControlTrajectory) -> Result<GradientEval>,
) -> Result<SolveReport> {
    params.validate()?;
    config.validate(params)?;
    let c0 = params.c0_g_per_l();
    let mut control = config.initial_control(params)?;
    let mut sign = config.sign.fixed();
    let mut history: Vec<IterationRecord> = Vec::new();
    let burn_in = 100.min(config.max_iterations / 10);
    let mut j_decreases = 0;

    let mut iter = 0;
    let (eval, stop_reason, pmax) = loop {
        let eval = evaluate(&control)?;
        let s = match sign {
            Some(s) => s,
            None => {
                let s = probe_sign(params, config, &control, &eval.dh_dq)?;
                sign = Some(s);
                s
            }
        };
        let (_, j) = objective_at_objective_time(&eval.forward.trajectory, c0);
        let pmax = projected_max_gradient(&control, &eval.dh_dq, s);
        let h_mean = eval.hamiltonian.iter().sum::<f64>() / eval.hamiltonian.len() as f64;
        if let Some(prev) = history.last() {
            if iter > burn_in && j < prev.j - 1e-12 * prev.j.abs().max(1.0) {
                j_decreases += 1;
                if j_decreases == 1 {
                    log::warn!("J decreased at iteration {iter}: {:e} -> {j:e}", prev.j);
                }
            }
        }
        history.push(IterationRecord {
            iter,
            max_dh_dq: pmax,
            j,
            h_mean,
        });

        if pmax < config.tolerance {
            break (eval, StopReason::Tolerance, pmax);
        }
        if iter >= config.stagnation_window {
            let old = history[iter - config.stagnation_window].j;
            if (j - old).abs() <= config.stagnation_tolerance * j.abs() {
                break (eval, StopReason::Stagnation, pmax);
            }
        }
        if iter >= config.max_iterations {
            break (eval, StopReason::IterationCap, pmax);
        }
        control = stepped(&control, &eval.dh_dq, s * config.gradient_gain);
        iter += 1;
    };

    let trajectory = eval.forward.trajectory;
    let (objective_time_hr, j_at_objective_time) = objective_at_objective_time(&trajectory, c0);
    let j_series = trajectory.objective_series(c0);
    let t_ratio = time_to_ratio(&trajectory, config.report_ratio);
    let tp = t_ratio.map(|t| throughput(&trajectory, c0, params.resin_volume_l, t));
    Ok(SolveReport {
        converged: stop_reason != StopReason::IterationCap,
        stop_reason,
        iterations: iter,
        sign: sign.unwrap_or(1.0),
        control,
        trajectory,
        dh_dq: eval.dh_dq,
        hamiltonian: eval.hamiltonian,
        history,
        j_decreases,
        final_max_dh_dq: pmax,
        j_final: *j_series.last().expect("non-empty"),
        objective_time_hr,
        j_at_objective_time,
        report_ratio: config.report_ratio,
        time_to_report_ratio_hr: t_ratio,
        volume_processed_l: tp.map(|t| t.volume_l),
        mass_removed_per_resin_g_per_l: tp.map(|t| t.mass_per_resin_g_per_l),
        resin_volume_l: params.resin_volume_l,
        c0_g_per_l: c0,
    })
}

/// Deterministic maximum-principle solve from a constant start at `q_start_lph`.
pub fn solve_deterministic(params: &ProcessParams, config: &SolverConfig) -> Result<SolveReport> {
    let mode = config.rhs_mode;
    gradient_loop(params, config, |control| {
        let forward = deterministic::forward_sweep(params, control, mode)?;
        let back = deterministic::backward_sweep(params, control, &forward, mode)?;
        Ok(GradientEval {
            forward,
            dh_dq: back.dh_dq,
            hamiltonian: back.hamiltonian,
        })
    })
}
