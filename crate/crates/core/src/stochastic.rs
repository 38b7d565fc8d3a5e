//! Stochastic maximum principle with second-order adjoints.
//!
//! The forward sweep propagates the drift only, so it is the deterministic
//! forward sweep. The backward sweep adds ω (diagonal second-order adjoints)
//! and Ω = dω/dQ, and the gradient gains a `Σ g²/2 · Ω` term.
//!
//! With g ≡ 0 every extra term is an exact zero and the arithmetic matches the
//! deterministic sweep.

use nalgebra::Vector4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{ControlTrajectory, TimeGrid};
use crate::deterministic::{self, AdjointState, ForwardSweep};
use crate::dynamics::{self, RhsMode};
use crate::error::{Error, Result};
use crate::model::ProcessParams;
use crate::solver::{self, GradientEval, SolveReport, SolverConfig};
use crate::uncertainty::{self, DiffusionTable, EnsembleStats, UncertaintySpec};

/// How the diffusion coefficients g_k depend on the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionModel {
    /// g_k(t) from a table; ∂g²/∂y ≡ 0.
    Tabulated(DiffusionTable),
    /// g_k = c_k·y_k.
    StateProportional { coeffs: [f64; 4] },
}

impl DiffusionModel {
    pub fn zero(grid: TimeGrid) -> Self {
        DiffusionModel::Tabulated(DiffusionTable::zeros(grid))
    }

    /// g_k² at grid point `i`.
    pub fn g_squared(&self, i: usize, y: &Vector4<f64>) -> Vector4<f64> {
        match self {
            DiffusionModel::Tabulated(t) => Vector4::from(t.g[i].map(|g| g * g)),
            DiffusionModel::StateProportional { coeffs } => {
                Vector4::from_fn(|k, _| coeffs[k] * coeffs[k] * y[k] * y[k])
            }
        }
    }

    /// ∂g_k²/∂y_k; off-diagonal terms vanish in both models.
    pub fn dg2_dy(&self, y: &Vector4<f64>) -> Vector4<f64> {
        match self {
            DiffusionModel::Tabulated(_) => Vector4::zeros(),
            DiffusionModel::StateProportional { coeffs } => {
                Vector4::from_fn(|k, _| 2.0 * coeffs[k] * coeffs[k] * y[k])
            }
        }
    }

    /// ∂²g_k²/∂y_k², constant in both models.
    pub fn d2g2_dy2(&self) -> Vector4<f64> {
        match self {
            DiffusionModel::Tabulated(_) => Vector4::zeros(),
            DiffusionModel::StateProportional { coeffs } => {
                Vector4::from_fn(|k, _| 2.0 * coeffs[k] * coeffs[k])
            }
        }
    }

    fn check(&self, grid: &TimeGrid) -> Result<()> {
        if let DiffusionModel::Tabulated(t) = self {
            if t.g.len() != grid.len() {
                return Err(Error::LengthMismatch {
                    expected: grid.len(),
                    actual: t.g.len(),
                });
            }
        }
        Ok(())
    }
}

/// ω_i = d²J/dy_i² and Ω_i = dω_i/dQ at one time.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SecondOrderAdjoint {
    pub omega: Vector4<f64>,
    pub big_omega: Vector4<f64>,
}

/// H = Σ z_i F_i + ω_i g_i²/2.
pub fn stochastic_hamiltonian(
    z: &Vector4<f64>,
    omega: &Vector4<f64>,
    field: &Vector4<f64>,
    g_squared: &Vector4<f64>,
) -> f64 {
    z.dot(field) + 0.5 * omega.dot(g_squared)
}

/// (dz/dt, dω/dt).
///
/// `second[(k, i)]` is ∂²F_k/∂y_i²; `dg2` and `d2g2` are the diagonal first and
/// second partials of g_k² in y_k.
pub fn stochastic_adjoint_rhs(
    z: &Vector4<f64>,
    omega: &Vector4<f64>,
    jac: &nalgebra::Matrix4<f64>,
    second: &nalgebra::Matrix4<f64>,
    dg2: &Vector4<f64>,
    d2g2: &Vector4<f64>,
) -> (Vector4<f64>, Vector4<f64>) {
    let dz = deterministic::adjoint_rhs(z, jac) - 0.5 * dg2.component_mul(omega);
    let domega =
        -(2.0 * (jac.transpose() * omega)) - second.transpose() * z - 0.5 * d2g2.component_mul(omega);
    (dz, domega)
}

#[derive(Debug, Clone)]
pub struct StochasticBackward {
    pub z: Vec<Vector4<f64>>,
    pub dz_dt: Vec<Vector4<f64>>,
    pub phi: Vec<Vector4<f64>>,
    pub second_order: Vec<SecondOrderAdjoint>,
    pub dh_dq: Vec<f64>,
    pub hamiltonian: Vec<f64>,
    pub terminal: AdjointState,
}

/// Backward Euler for z, φ, ω, Ω with ω(t_f) = Ω(t_f) = φ(t_f) = 0.
pub fn stochastic_backward_sweep(
    params: &ProcessParams,
    control: &ControlTrajectory,
    fwd: &ForwardSweep,
    mode: RhsMode,
    diffusion: &DiffusionModel,
) -> Result<StochasticBackward> {
    let grid = control.grid();
    diffusion.check(&grid)?;
    let n = grid.n_steps;
    let dt = grid.dt();
    let terminal = deterministic::terminal_adjoint(&fwd.final_state(), control.flow(n), params.c0_g_per_l())?;
    let d2g2 = diffusion.d2g2_dy2();

    let mut z = vec![Vector4::zeros(); n + 1];
    let mut dz_dt = vec![Vector4::zeros(); n + 1];
    let mut phi = vec![Vector4::zeros(); n + 1];
    let mut second_order = vec![SecondOrderAdjoint::default(); n + 1];
    let mut dh_dq = vec![0.0; n + 1];
    let mut ham = vec![0.0; n + 1];

    let mut zi = terminal.vector();
    let mut phii = Vector4::zeros();
    let mut om = Vector4::zeros();
    let mut big = Vector4::zeros();
    for i in (0..=n).rev() {
        let t = grid.time(i);
        let q = control.flow(i);
        let y = &fwd.y[i];
        let theta = &fwd.theta[i];
        let lin = &fwd.lin[i];
        let curv = dynamics::diagonal_curvature(y, theta, t, params, q, mode);
        let jac_dq = dynamics::jacobian_flow_derivative(y, theta, t, params, q, mode);
        let g2 = diffusion.g_squared(i, y);
        let dg2 = diffusion.dg2_dy(y);
        // Q-derivative of ∂g²/∂y along the trajectory: only the state-proportional model has one.
        let dg2_dq = d2g2.component_mul(theta);

        let (dz, dom) = stochastic_adjoint_rhs(&zi, &om, &lin.jac, &curv.second, &dg2, &d2g2);
        let sens = deterministic::SensitivityState {
            theta: *theta,
            phi: phii,
        };
        let (_, dphi_det) = deterministic::sensitivity_rhs(&sens, &zi, lin, &jac_dq);
        let dphi = dphi_det - 0.5 * (dg2_dq.component_mul(&om) + dg2.component_mul(&big));
        let dbig = -(2.0 * (jac_dq.transpose() * om + lin.jac.transpose() * big))
            - curv.second_dq.transpose() * zi
            - curv.second.transpose() * phii
            - 0.5 * d2g2.component_mul(&big);

        z[i] = zi;
        dz_dt[i] = dz;
        phi[i] = phii;
        second_order[i] = SecondOrderAdjoint {
            omega: om,
            big_omega: big,
        };
        dh_dq[i] = deterministic::hamiltonian_q_gradient(theta, &phii, &lin.field, &dz) + 0.5 * g2.dot(&big);
        ham[i] = stochastic_hamiltonian(&zi, &om, &lin.field, &g2);
        if i > 0 {
            zi -= dz * dt;
            phii -= dphi * dt;
            om -= dom * dt;
            big -= dbig * dt;
        }
        if !(zi.iter().chain(&phii).chain(&om).chain(&big).all(|v| v.is_finite())) {
            return Err(Error::StateInvariant {
                step: i,
                time: t,
                detail: "non-finite adjoint in stochastic backward sweep".into(),
            });
        }
    }
    Ok(StochasticBackward {
        z,
        dz_dt,
        phi,
        second_order,
        dh_dq,
        hamiltonian: ham,
        terminal,
    })
}

/// Stochastic solve with a given diffusion model.
pub fn solve_stochastic_with(
    params: &ProcessParams,
    config: &SolverConfig,
    diffusion: &DiffusionModel,
) -> Result<SolveReport> {
    let mode = config.rhs_mode;
    diffusion.check(&config.grid()?)?;
    solver::gradient_loop(params, config, |control| {
        let forward = deterministic::forward_sweep(params, control, mode)?;
        let back = stochastic_backward_sweep(params, control, &forward, mode, diffusion)?;
        Ok(GradientEval {
            forward,
            dh_dq: back.dh_dq,
            hamiltonian: back.hamiltonian,
        })
    })
}

/// Stochastic solve together with the ensemble and diffusion table it used.
#[derive(Debug, Clone, Serialize)]
pub struct StochasticSolve {
    pub report: SolveReport,
    /// Control the parameter ensemble was run under.
    pub ensemble_control: ControlTrajectory,
    pub ensemble: EnsembleStats,
    pub diffusion: DiffusionTable,
}

/// Estimates g from a parameter ensemble run under `ensemble_control`, then solves.
pub fn solve_stochastic_from_ensemble(
    params: &ProcessParams,
    uncertainty: &UncertaintySpec,
    config: &SolverConfig,
    ensemble_control: &ControlTrajectory,
) -> Result<StochasticSolve> {
    uncertainty.validate()?;
    let ensemble = uncertainty::ensemble_moments(params, uncertainty, ensemble_control, config.rhs_mode)?;
    let diffusion = uncertainty::estimate_diffusion(&ensemble, uncertainty.smoothing_window);
    let report = solve_stochastic_with(params, config, &DiffusionModel::Tabulated(diffusion.clone()))?;
    Ok(StochasticSolve {
        report,
        ensemble_control: ensemble_control.clone(),
        ensemble,
        diffusion,
    })
}

/// Deterministic solve, ensemble under its optimal control, then the stochastic solve.
pub fn solve_stochastic(
    params: &ProcessParams,
    uncertainty: &UncertaintySpec,
    config: &SolverConfig,
) -> Result<StochasticSolve> {
    let det = solver::solve_deterministic(params, config)?;
    solve_stochastic_from_ensemble(params, uncertainty, config, &det.control)
}

/// Flow envelope of deterministic solves under sampled parameters beside one stochastic solve.
#[derive(Debug, Clone, Serialize)]
pub struct McComparison {
    pub grid: TimeGrid,
    pub det_min: Vec<f64>,
    pub det_mean: Vec<f64>,
    pub det_max: Vec<f64>,
    pub stoch_q: Vec<f64>,
    pub runs: usize,
    /// Members that hit the iteration cap.
    pub unconverged: usize,
    /// Members included in the envelope.
    pub aggregated: usize,
    pub failed: usize,
    /// ψ at each member's J peak over the horizon, in run order.
    pub det_peak_ratios: Vec<f64>,
    pub stoch_peak_ratio: f64,
    pub stochastic: SolveReport,
}

impl McComparison {
    /// Fraction of grid points where the stochastic flow lies in the deterministic envelope.
    pub fn containment_fraction(&self) -> f64 {
        let inside = self
            .stoch_q
            .iter()
            .enumerate()
            .filter(|(i, q)| **q >= self.det_min[*i] && **q <= self.det_max[*i])
            .count();
        inside as f64 / self.stoch_q.len() as f64
    }
}

/// ψ at the grid point where J(t) peaks.
pub fn ratio_at_objective_peak(report: &SolveReport, c0_g_per_l: f64) -> f64 {
    let js = report.trajectory.objective_series(c0_g_per_l);
    let (imax, _) = js
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |m, (i, v)| if *v > m.1 { (i, *v) } else { m });
    report.trajectory.states[imax].mu0
}

/// `n_runs` deterministic solves under sampled parameters and one stochastic solve.
///
/// Unconverged members are left out of the envelope unless `include_unconverged`;
/// with no usable member the envelope is NaN.
pub fn mc_deterministic_comparison(
    params: &ProcessParams,
    uncertainty: &UncertaintySpec,
    config: &SolverConfig,
    n_runs: usize,
    include_unconverged: bool,
) -> Result<McComparison> {
    if n_runs < 2 {
        return Err(Error::param("n_runs", "need at least two deterministic runs"));
    }
    uncertainty.validate()?;
    let grid = config.grid()?;
    let runs: Vec<Result<SolveReport>> = (0..n_runs as u64)
        .into_par_iter()
        .map(|i| {
            let p = uncertainty::sample_parameters(params, uncertainty, i);
            solver::solve_deterministic(&p, config)
        })
        .collect();

    let len = grid.len();
    let mut det_min = vec![f64::INFINITY; len];
    let mut det_max = vec![f64::NEG_INFINITY; len];
    let mut det_mean = vec![0.0; len];
    let (mut unconverged, mut aggregated, mut failed) = (0, 0, 0);
    let mut det_peak_ratios = Vec::new();
    for (i, r) in runs.into_iter().enumerate() {
        let r = match r {
            Ok(r) => r,
            Err(e) => {
                log::warn!("deterministic member {i} aborted: {e}");
                failed += 1;
                continue;
            }
        };
        let p = uncertainty::sample_parameters(params, uncertainty, i as u64);
        det_peak_ratios.push(ratio_at_objective_peak(&r, p.c0_g_per_l()));
        if !r.converged {
            unconverged += 1;
            if !include_unconverged {
                continue;
            }
        }
        aggregated += 1;
        for (j, q) in r.control.flows().iter().enumerate() {
            det_min[j] = det_min[j].min(*q);
            det_max[j] = det_max[j].max(*q);
            det_mean[j] += q;
        }
    }
    if aggregated == 0 {
        log::warn!("no deterministic member usable ({unconverged} unconverged, {failed} failed); envelope is NaN");
        det_min.fill(f64::NAN);
        det_max.fill(f64::NAN);
    }
    for m in &mut det_mean {
        *m /= aggregated as f64;
    }
    let stoch = solve_stochastic(params, uncertainty, config)?;
    let stoch_peak_ratio = ratio_at_objective_peak(&stoch.report, params.c0_g_per_l());
    Ok(McComparison {
        grid,
        det_min,
        det_mean,
        det_max,
        stoch_q: stoch.report.control.flows().to_vec(),
        runs: n_runs,
        unconverged,
        aggregated,
        failed,
        det_peak_ratios,
        stoch_peak_ratio,
        stochastic: stoch.report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hamiltonian_hand_case() {
        let z = Vector4::new(1.0, 0.0, 0.0, 0.0);
        let w = Vector4::new(2.0, 0.0, 0.0, 0.0);
        let f = Vector4::new(0.1, 0.0, 0.0, 0.0);
        let g2 = Vector4::new(0.09, 0.0, 0.0, 0.0);
        assert!((stochastic_hamiltonian(&z, &w, &f, &g2) - 0.19).abs() < 1e-15);
        assert_eq!(
            stochastic_hamiltonian(&z, &Vector4::zeros(), &f, &g2),
            deterministic::hamiltonian(&z, &f)
        );
    }

    #[test]
    fn adjoint_rhs_reduces_without_omega() {
        let p = ProcessParams::default();
        let y = Vector4::new(0.3, 150.0, 4000.0, 0.2);
        let lin = dynamics::linearize(&y, 250.0, &p, 0.6, RhsMode::Exact);
        let curv = dynamics::diagonal_curvature(&y, &Vector4::zeros(), 250.0, &p, 0.6, RhsMode::Exact);
        let z = Vector4::new(-1e-3, 4e-6, -2e-8, 0.0);
        let zero = Vector4::zeros();
        let (dz, _) = stochastic_adjoint_rhs(&z, &zero, &lin.jac, &curv.second, &zero, &zero);
        assert_eq!(dz, deterministic::adjoint_rhs(&z, &lin.jac));
    }

    #[test]
    fn zero_coefficient_proportional_matches_tabulated_zero() {
        let p = ProcessParams::default();
        let g = TimeGrid::new(300.0, 600).unwrap();
        let c = ControlTrajectory::constant(g, 0.6, 0.42, 1.27).unwrap();
        let f = deterministic::forward_sweep(&p, &c, RhsMode::Exact).unwrap();
        let a = stochastic_backward_sweep(&p, &c, &f, RhsMode::Exact, &DiffusionModel::zero(g)).unwrap();
        let b = stochastic_backward_sweep(
            &p,
            &c,
            &f,
            RhsMode::Exact,
            &DiffusionModel::StateProportional { coeffs: [0.0; 4] },
        )
        .unwrap();
        assert_eq!(a.dh_dq, b.dh_dq);
        let det = deterministic::backward_sweep(&p, &c, &f, RhsMode::Exact).unwrap();
        assert_eq!(a.dh_dq, det.dh_dq);
        assert_eq!(a.z, det.z);
    }

    #[test]
    fn proportional_mode_changes_gradient() {
        let p = ProcessParams::default();
        let g = TimeGrid::new(300.0, 600).unwrap();
        let c = ControlTrajectory::constant(g, 0.6, 0.42, 1.27).unwrap();
        let f = deterministic::forward_sweep(&p, &c, RhsMode::Exact).unwrap();
        let det = deterministic::backward_sweep(&p, &c, &f, RhsMode::Exact).unwrap();
        let model = DiffusionModel::StateProportional {
            coeffs: [0.05, 0.05, 0.05, 0.0],
        };
        let s = stochastic_backward_sweep(&p, &c, &f, RhsMode::Exact, &model).unwrap();
        assert!(s.dh_dq.iter().zip(&det.dh_dq).any(|(a, b)| a != b));
        assert!(s.second_order.iter().all(|w| w.omega[3] == 0.0 && w.big_omega[3] == 0.0));
    }

    #[test]
    fn terminal_second_order_is_zero_and_omega4_inert() {
        let p = ProcessParams::default();
        let g = TimeGrid::new(300.0, 600).unwrap();
        let c = ControlTrajectory::constant(g, 0.42, 0.42, 1.27).unwrap();
        let f = deterministic::forward_sweep(&p, &c, RhsMode::Exact).unwrap();
        let mut tab = DiffusionTable::zeros(g);
        for row in &mut tab.g {
            *row = [1e-3, 0.1, 5.0, 1e-3];
        }
        let s = stochastic_backward_sweep(&p, &c, &f, RhsMode::Exact, &DiffusionModel::Tabulated(tab)).unwrap();
        let last = s.second_order[g.n_steps];
        assert_eq!(last.omega, Vector4::zeros());
        assert_eq!(last.big_omega, Vector4::zeros());
        assert_eq!(s.phi[g.n_steps], Vector4::zeros());
        assert!(s.second_order.iter().all(|w| w.omega[3] == 0.0));
        assert!(s.z.iter().all(|z| z[3] == 0.0));
        assert!(s.second_order[0].omega.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn table_length_is_checked() {
        let p = ProcessParams::default();
        let cfg = SolverConfig {
            n_grid: 600,
            max_iterations: 1,
            ..SolverConfig::default()
        };
        let wrong = DiffusionModel::zero(TimeGrid::new(300.0, 700).unwrap());
        assert!(matches!(
            solve_stochastic_with(&p, &cfg, &wrong),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn zero_diffusion_solve_is_deterministic_solve() {
        let p = ProcessParams::default();
        let cfg = SolverConfig {
            n_grid: 600,
            max_iterations: 200,
            ..SolverConfig::default()
        };
        let det = solver::solve_deterministic(&p, &cfg).unwrap();
        let sto = solve_stochastic_with(&p, &cfg, &DiffusionModel::zero(cfg.grid().unwrap())).unwrap();
        assert_eq!(det.control.max_abs_diff(&sto.control), 0.0);
        assert_eq!(det.history, sto.history);
    }

    /// Relative gaps between ω1 and second differences of J in y1 at 10 sampled points.
    fn omega_gaps(n: usize) -> Vec<f64> {
        let p = ProcessParams::default();
        let q = 0.42;
        let grid = crate::control::TimeGrid::new(300.0, n).unwrap();
        let control = ControlTrajectory::constant(grid, q, p.q_min_lph, p.q_max_lph).unwrap();
        let fwd = deterministic::forward_sweep(&p, &control, RhsMode::Exact).unwrap();
        let bwd = stochastic_backward_sweep(&p, &control, &fwd, RhsMode::Exact, &DiffusionModel::zero(grid)).unwrap();
        (0..n)
            .step_by(n / 10)
            .map(|i| {
                let j = |d: f64| {
                    let mut y = fwd.y[i];
                    y[0] += d;
                    for s in i..n {
                        y += dynamics::linearize(&y, grid.time(s), &p, q, RhsMode::Exact).field * grid.dt();
                    }
                    crate::moments::objective_value(&crate::moments::MomentState::from_vector(&y), q, p.c0_g_per_l())
                };
                let h = 1e-4 * fwd.y[i][0];
                let fd = (j(h) - 2.0 * j(0.0) + j(-h)) / (h * h);
                let w = bwd.second_order[i].omega[0];
                assert_eq!(w.signum(), fd.signum(), "sign at step {i}");
                ((w - fd) / fd).abs()
            })
            .collect()
    }

    // ω couples only diagonal second derivatives, so it misses the
    // off-diagonal Hessian terms that the second difference includes.
    #[test]
    fn omega_tracks_second_differences_of_objective() {
        let coarse = omega_gaps(20);
        let fine = omega_gaps(2000);
        assert!(coarse.iter().all(|g| *g < 0.8), "{coarse:?}");
        assert!(fine.iter().all(|g| *g < 0.25), "{fine:?}");
        let mid = omega_gaps(200);
        assert!(mid.iter().zip(&fine).all(|(m, f)| m >= f));
    }
}
