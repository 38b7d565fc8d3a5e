//! Truncated temporal moments of the breakthrough distribution dψ/dt.
//!
//! Two routes to the same quantities:
//!
//! * [`moments_by_quadrature`] integrates the moment definitions directly with
//!   a two-pass composite trapezoid rule. It is the reference the ODE route is
//!   checked against.
//! * [`integrate_moments`] propagates the four-state ODE system with forward
//!   Euler along a flow schedule. This is the state the controllers use.
//!
//! At t = 0 the bed already leaks ψ(0) > 0. Both routes treat that leak as an
//! atom at t = 0, so μ0(t) = ψ(t) and the ODE's initial state `[ψ(0), 0, 0, 0]`
//! is the exact moment vector of the atom.

use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

use crate::control::{ControlTrajectory, TimeGrid};
use crate::dynamics::{self, RhsMode, Y1_FLOOR, Y3_FLOOR};
use crate::error::{Error, Result};
use crate::model::{self, ProcessParams};

/// Smallest accepted quadrature resolution.
pub const MIN_QUADRATURE_POINTS: usize = 1000;

/// Largest negative variance tolerated from round-off before aborting [hr²].
pub const NEGATIVE_VARIANCE_TOLERANCE: f64 = 1e-9;

/// Zeroth moment, normalized first moment, second central moment and
/// normalized third central moment at one time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MomentState {
    /// μ0 = ψ [-].
    pub mu0: f64,
    /// μ1 = t_m, mean residence time [hr].
    pub mu1: f64,
    /// μ2c = σ² [hr²].
    pub mu2c: f64,
    /// μ3c = s³, skewness [-].
    pub mu3c: f64,
}

impl MomentState {
    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.mu0, self.mu1, self.mu2c, self.mu3c)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self {
            mu0: v[0],
            mu1: v[1],
            mu2c: v[2],
            mu3c: v[3],
        }
    }

    pub fn sigma(&self) -> f64 {
        self.mu2c.max(0.0).sqrt()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.to_vector()[i]
    }
}

/// Moment states and flows along a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentTrajectory {
    pub grid: TimeGrid,
    pub states: Vec<MomentState>,
    pub flows: Vec<f64>,
    /// Steps taken with the variance at its floor (skewness frozen) or the
    /// zeroth moment below its floor.
    pub floor_events: usize,
}

impl MomentTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.grid.times()
    }

    pub fn last(&self) -> &MomentState {
        self.states.last().expect("trajectory has at least one point")
    }

    /// Objective value along the whole trajectory.
    pub fn objective_series(&self, c0_g_per_l: f64) -> Vec<f64> {
        self.states
            .iter()
            .zip(&self.flows)
            .map(|(s, q)| objective_value(s, *q, c0_g_per_l))
            .collect()
    }
}

/// dy/dt of the moment ODE system at `(state, t)` under flow `flow`.
pub fn moment_rhs(
    state: &MomentState,
    time: f64,
    params: &ProcessParams,
    flow: f64,
    mode: RhsMode,
) -> MomentState {
    let y = [state.mu0, state.mu1, state.mu2c, state.mu3c];
    let f = dynamics::vector_field(&y, time, params.rate_constant(flow), mode);
    MomentState {
        mu0: f[0],
        mu1: f[1],
        mu2c: f[2],
        mu3c: f[3],
    }
}

/// Initial moment state `[ψ(0), 0, 0, 0]` for a schedule starting at `flow0`.
pub fn initial_state(params: &ProcessParams, flow0: f64) -> MomentState {
    MomentState {
        mu0: model::breakthrough_ratio(params, flow0, 0.0),
        ..MomentState::default()
    }
}

/// Forward-Euler propagation of the moment ODEs along `control`.
pub fn integrate_moments(
    params: &ProcessParams,
    control: &ControlTrajectory,
    mode: RhsMode,
) -> Result<MomentTrajectory> {
    let grid = control.grid();
    let dt = grid.dt();
    let mut states = Vec::with_capacity(grid.len());
    let mut y = initial_state(params, control.flow(0)).to_vector();
    let mut floor_events = 0;
    states.push(MomentState::from_vector(&y));
    for i in 0..grid.n_steps {
        let t = grid.time(i);
        if y[0] < Y1_FLOOR || y[2] <= Y3_FLOOR {
            floor_events += 1;
        }
        let ya = [y[0], y[1], y[2], y[3]];
        let f = dynamics::vector_field(&ya, t, params.rate_constant(control.flow(i)), mode);
        y += Vector4::from(f) * dt;
        if y[2] < -NEGATIVE_VARIANCE_TOLERANCE || !y.iter().all(|v| v.is_finite()) {
            return Err(Error::StateInvariant {
                step: i + 1,
                time: grid.time(i + 1),
                detail: format!("moment state {:?}", y.as_slice()),
            });
        }
        states.push(MomentState::from_vector(&y));
    }
    Ok(MomentTrajectory {
        grid,
        states,
        flows: control.flows().to_vec(),
        floor_events,
    })
}

/// A right-continuous piecewise-constant flow schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSchedule {
    /// Start time of each segment; the first must be 0.
    starts: Vec<f64>,
    flows: Vec<f64>,
}

impl FlowSchedule {
    pub fn constant(flow: f64) -> Self {
        Self {
            starts: vec![0.0],
            flows: vec![flow],
        }
    }

    pub fn piecewise(segments: &[(f64, f64)]) -> Result<Self> {
        if segments.is_empty() || segments[0].0 != 0.0 {
            return Err(Error::InvalidGrid("schedule must start at t = 0".into()));
        }
        if segments.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidGrid("segment starts must increase".into()));
        }
        Ok(Self {
            starts: segments.iter().map(|s| s.0).collect(),
            flows: segments.iter().map(|s| s.1).collect(),
        })
    }

    pub fn flow_at(&self, t: f64) -> f64 {
        let idx = self.starts.partition_point(|s| *s <= t).max(1) - 1;
        self.flows[idx]
    }

    /// ∫₀ᵗ K_T(Q(s))·C0 ds, exact for the piecewise-constant schedule.
    fn integrated_rate(&self, params: &ProcessParams, t: f64) -> f64 {
        let mut acc = 0.0;
        for (i, (&start, &q)) in self.starts.iter().zip(&self.flows).enumerate() {
            if start >= t {
                break;
            }
            let end = self.starts.get(i + 1).copied().unwrap_or(f64::INFINITY).min(t);
            acc += params.rate_constant(q) * (end - start);
        }
        acc
    }

    /// ψ(t) when the rate constant follows the schedule and ψ(0) is set by Q(0).
    pub fn ratio_at(&self, params: &ProcessParams, t: f64) -> f64 {
        let q0 = self.flows[0];
        let offset = params.rate_constant(q0) * params.half_time(q0);
        model::logistic_of_exponent(offset - self.integrated_rate(params, t))
    }

    pub fn rate_at(&self, params: &ProcessParams, t: f64) -> f64 {
        let psi = self.ratio_at(params, t);
        params.rate_constant(self.flow_at(t)) * psi * (1.0 - psi)
    }
}

/// Reference moments at `t_end` for constant flow, by composite trapezoid.
pub fn moments_by_quadrature(
    params: &ProcessParams,
    flow: f64,
    t_end: f64,
    n_points: usize,
) -> Result<MomentState> {
    let density = |t: f64| model::breakthrough_rate(params, flow, t);
    quadrature(model::breakthrough_ratio(params, flow, 0.0), density, t_end, n_points)
}

/// Reference moments at `t_end` for a piecewise-constant schedule.
pub fn moments_by_quadrature_schedule(
    params: &ProcessParams,
    schedule: &FlowSchedule,
    t_end: f64,
    n_points: usize,
) -> Result<MomentState> {
    let density = |t: f64| schedule.rate_at(params, t);
    quadrature(schedule.ratio_at(params, 0.0), density, t_end, n_points)
}

fn quadrature(
    atom: f64,
    density: impl Fn(f64) -> f64,
    t_end: f64,
    n_points: usize,
) -> Result<MomentState> {
    if n_points < MIN_QUADRATURE_POINTS {
        return Err(Error::InvalidGrid(format!(
            "quadrature needs at least {MIN_QUADRATURE_POINTS} points, got {n_points}"
        )));
    }
    if !(t_end > 0.0) {
        return Err(Error::InvalidGrid(format!("t_end must be positive, got {t_end}")));
    }
    let h = t_end / n_points as f64;
    let nodes: Vec<(f64, f64)> = (0..=n_points)
        .map(|i| {
            let t = i as f64 * h;
            let w = if i == 0 || i == n_points { 0.5 * h } else { h };
            (t, w * density(t))
        })
        .collect();

    let mass: f64 = nodes.iter().map(|(_, wd)| wd).sum();
    let mu0 = atom + mass;
    if mu0 < Y1_FLOOR {
        return Err(Error::DegenerateSupport { mu0 });
    }
    let mu1 = nodes.iter().map(|(t, wd)| t * wd).sum::<f64>() / mu0;
    // Second pass about μ1; the atom sits at t = 0.
    let (mut c2, mut c3) = (atom * mu1 * mu1, -atom * mu1 * mu1 * mu1);
    for (t, wd) in &nodes {
        let d = t - mu1;
        c2 += d * d * wd;
        c3 += d * d * d * wd;
    }
    let mu2c = c2 / mu0;
    let mu3c = if mu2c > 0.0 {
        c3 / mu0 / mu2c.powf(1.5)
    } else {
        0.0
    };
    Ok(MomentState {
        mu0,
        mu1,
        mu2c,
        mu3c,
    })
}

/// Truncation horizon at which the quadrature variance equals `target_variance`.
///
/// Used to line constant-flow moments up with data sets truncated at an
/// unrecorded end time. Returns `None` when the target is not bracketed by
/// `[1, t_max]`.
pub fn truncation_horizon_for_variance(
    params: &ProcessParams,
    flow: f64,
    target_variance: f64,
    t_max: f64,
) -> Option<f64> {
    let var = |t: f64| {
        moments_by_quadrature(params, flow, t, 4000)
            .map(|m| m.mu2c - target_variance)
            .unwrap_or(f64::NAN)
    };
    let (mut lo, mut hi) = (1.0, t_max);
    let (flo, fhi) = (var(lo), var(hi));
    if !(flo < 0.0 && fhi > 0.0) {
        return None;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if var(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Column efficiency diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlateMetrics {
    /// Height equivalent to a theoretical plate [length units].
    pub hetp: f64,
    /// Theoretical plate number t_m²/σ² [-].
    pub tpn: f64,
}

pub fn hetp_tpn(t_m: f64, variance: f64, column_height: f64) -> PlateMetrics {
    let tpn = t_m * t_m / variance;
    PlateMetrics {
        hetp: column_height / tpn,
        tpn,
    }
}

/// `t_m + weight·σ` [hr]; weight −1 gives the default objective time.
pub fn objective_time(t_m: f64, sigma: f64, weight: f64) -> Result<f64> {
    let t = t_m + weight * sigma;
    if t < 0.0 {
        Err(Error::InfeasibleObjectiveTime(t))
    } else {
        Ok(t)
    }
}

/// J = C0·(1 − μ0)·Q·(μ1 − σ) [g].
pub fn objective_value(state: &MomentState, flow: f64, c0_g_per_l: f64) -> f64 {
    c0_g_per_l * (1.0 - state.mu0) * flow * (state.mu1 - state.sigma())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p() -> ProcessParams {
        ProcessParams::default()
    }

    #[test]
    fn rhs_at_half_breakthrough_matches_rate() {
        let params = p();
        let q = 0.42;
        let th = params.half_time(q);
        let s = MomentState {
            mu0: 0.5,
            mu1: 200.0,
            mu2c: 5000.0,
            mu3c: -0.2,
        };
        let d = moment_rhs(&s, th, &params, q, RhsMode::Exact);
        assert_relative_eq!(d.mu0, params.rate_constant(q) / 4.0, epsilon = 1e-15);
        assert_relative_eq!(d.mu0, model::breakthrough_rate(&params, q, th), max_relative = 1e-12);
    }

    #[test]
    fn long_horizon_mean_and_variance() {
        let params = p();
        let m = moments_by_quadrature(&params, 0.42, 1200.0, 200_000).unwrap();
        assert!((m.mu1 - 320.0).abs() < 1.0, "mu1 = {}", m.mu1);
        let k = params.rate_constant(0.42);
        let logistic_var = std::f64::consts::PI.powi(2) / (3.0 * k * k);
        assert_relative_eq!(logistic_var, 7363.5, max_relative = 1e-3);
        assert!((m.mu2c - logistic_var).abs() / logistic_var < 0.03);
        assert!(m.mu3c.abs() < 0.05);
    }

    #[test]
    fn quadrature_rejects_coarse_grids_and_empty_support() {
        let params = p();
        assert!(matches!(
            moments_by_quadrature(&params, 0.42, 100.0, 999),
            Err(Error::InvalidGrid(_))
        ));
        let deep = ProcessParams {
            qm_g_per_l: 20.0,
            ..p()
        };
        assert!(matches!(
            moments_by_quadrature(&deep, 0.42, 10.0, 1000),
            Err(Error::DegenerateSupport { .. })
        ));
    }

    #[test]
    fn schedule_matches_constant_flow_closed_form() {
        let params = p();
        let s = FlowSchedule::constant(0.9);
        for t in [0.0, 40.0, 160.0] {
            assert_relative_eq!(
                s.ratio_at(&params, t),
                model::breakthrough_ratio(&params, 0.9, t),
                max_relative = 1e-12
            );
        }
        let pw = FlowSchedule::piecewise(&[(0.0, 0.42), (100.0, 1.0)]).unwrap();
        assert_eq!(pw.flow_at(99.9), 0.42);
        assert_eq!(pw.flow_at(100.0), 1.0);
        assert!(FlowSchedule::piecewise(&[(1.0, 0.5)]).is_err());
    }

    #[test]
    fn euler_is_first_order() {
        let params = p();
        let run = |n: usize| {
            let g = TimeGrid::new(300.0, n).unwrap();
            let c = ControlTrajectory::constant(g, 0.42, 0.42, 1.27).unwrap();
            integrate_moments(&params, &c, RhsMode::Exact).unwrap()
        };
        let (a, b, c) = (run(1000), run(2000), run(4000));
        // Compare the common grid points of successive refinements.
        let diff = |coarse: &MomentTrajectory, fine: &MomentTrajectory| {
            (0..coarse.len())
                .map(|i| (coarse.states[i].mu1 - fine.states[2 * i].mu1).abs())
                .fold(0.0, f64::max)
        };
        let ratio = diff(&a, &b) / diff(&b, &c);
        assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn constant_slow_flow_reaches_fourteen_percent_near_234_hours() {
        let params = p();
        let g = TimeGrid::new(300.0, 30_000).unwrap();
        let c = ControlTrajectory::constant(g, 0.42, 0.42, 1.27).unwrap();
        let traj = integrate_moments(&params, &c, RhsMode::Exact).unwrap();
        let i = traj.states.iter().position(|s| s.mu0 >= 0.14).unwrap();
        let t = g.time(i);
        assert!((t - 234.1).abs() < 0.5, "t = {t}");
    }

    #[test]
    fn plate_metrics() {
        let m = hetp_tpn(318.0, 7150.0, 1.0);
        assert!((m.tpn - 14.14).abs() < 0.01);
        let unit = hetp_tpn(10.0, 100.0, 2.5);
        assert_relative_eq!(unit.tpn, 1.0);
        assert_relative_eq!(unit.hetp, 2.5);
        assert_relative_eq!(hetp_tpn(318.0, 7150.0, 2.0).hetp, 2.0 * m.hetp);
    }

    #[test]
    fn objective_times() {
        let t1 = objective_time(108.0, 3386f64.sqrt(), -1.0).unwrap();
        assert!((t1 - 50.0).abs() < 0.5);
        let t3 = objective_time(318.0, 7150f64.sqrt(), 0.5).unwrap();
        assert!((t3 - 359.0).abs() < 1.5);
        assert_eq!(objective_time(42.0, 7.0, 0.0).unwrap(), 42.0);
        assert!(matches!(
            objective_time(10.0, 20.0, -1.0),
            Err(Error::InfeasibleObjectiveTime(_))
        ));
    }

    #[test]
    fn objective_vanishes_when_saturated_or_collapsed() {
        let s = MomentState {
            mu0: 1.0,
            mu1: 100.0,
            mu2c: 400.0,
            mu3c: 0.0,
        };
        assert_eq!(objective_value(&s, 0.5, 2e-5), 0.0);
        let collapsed = MomentState {
            mu0: 0.3,
            mu1: 20.0,
            ..s
        };
        assert_eq!(objective_value(&collapsed, 0.5, 2e-5), 0.0);
    }

    #[test]
    fn truncation_horizon_hits_target_variance() {
        let params = p();
        let t = truncation_horizon_for_variance(&params, 1.27, 3386.0, 2000.0).unwrap();
        let m = moments_by_quadrature(&params, 1.27, t, 4000).unwrap();
        assert_relative_eq!(m.mu2c, 3386.0, max_relative = 1e-6);
        assert!(truncation_horizon_for_variance(&params, 1.27, 1e7, 2000.0).is_none());
    }
}
