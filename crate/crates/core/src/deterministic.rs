//! Deterministic maximum-principle sweeps.
//!
//! One iteration of the solver is a forward Euler pass for the moments `y`
//! and their flow sensitivities `θ = dy/dQ`, a backward Euler pass for the
//! adjoints `z` and their flow sensitivities `φ = dz/dQ`, and a per-step
//! Hamiltonian gradient
//!
//! ```text
//! dH/dQ(t) = −Σ ż_i·θ_i + Σ ẏ_i·φ_i
//! ```
//!
//! The solve loop itself lives in [`crate::solver`].

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::control::ControlTrajectory;
use crate::dynamics::{self, Linearization, RhsMode, Y3_FLOOR};
use crate::error::{Error, Result};
use crate::model::ProcessParams;
use crate::moments::{self, MomentState, MomentTrajectory, NEGATIVE_VARIANCE_TOLERANCE};

/// Adjoint (costate) vector z with the terminal coefficients it started from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjointState {
    pub z: [f64; 4],
}

impl AdjointState {
    pub fn vector(&self) -> Vector4<f64> {
        Vector4::from(self.z)
    }

    /// Coefficient on dy1/dt in dJ/dt at the final time.
    pub fn a(&self) -> f64 {
        self.z[0]
    }

    pub fn b(&self) -> f64 {
        self.z[1]
    }

    pub fn c(&self) -> f64 {
        self.z[2]
    }
}

/// θ = dy/dQ and φ = dz/dQ at one time.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SensitivityState {
    pub theta: Vector4<f64>,
    pub phi: Vector4<f64>,
}

/// z(t_f) = [a, b, c, 0] from setting dJ/dt = a·ẏ1 + b·ẏ2 + c·ẏ3.
///
/// With the `(1 − μ0)` factor in `c` this is exactly ∂J/∂y for
/// J = C0·Q·(1 − μ0)·(μ1 − σ).
pub fn terminal_adjoint(final_state: &MomentState, final_flow: f64, c0_g_per_l: f64) -> Result<AdjointState> {
    if final_state.mu2c <= Y3_FLOOR {
        return Err(Error::SingularTerminal {
            variance: final_state.mu2c,
        });
    }
    let sigma = final_state.mu2c.sqrt();
    let cq = c0_g_per_l * final_flow;
    let unspent = 1.0 - final_state.mu0;
    Ok(AdjointState {
        z: [
            -(final_state.mu1 - sigma) * cq,
            unspent * cq,
            -unspent * cq / (2.0 * sigma),
            0.0,
        ],
    })
}

/// dz/dt = −(∂F/∂y)ᵀ z.
pub fn adjoint_rhs(z: &Vector4<f64>, jac: &Matrix4<f64>) -> Vector4<f64> {
    -(jac.transpose() * z)
}

/// (dθ/dt, dφ/dt) along the flow-perturbed trajectory.
///
/// `jac_dq` is the total Q-derivative of ∂F/∂y along `(θ, 1)`, see
/// [`dynamics::jacobian_flow_derivative`].
pub fn sensitivity_rhs(
    sens: &SensitivityState,
    z: &Vector4<f64>,
    lin: &Linearization,
    jac_dq: &Matrix4<f64>,
) -> (Vector4<f64>, Vector4<f64>) {
    let dtheta = lin.jac * sens.theta + lin.dfdq;
    let dphi = -(lin.jac.transpose() * sens.phi) - jac_dq.transpose() * z;
    (dtheta, dphi)
}

/// H = Σ z_i F_i.
pub fn hamiltonian(z: &Vector4<f64>, field: &Vector4<f64>) -> f64 {
    z.dot(field)
}

/// dH/dQ = −Σ ż_i θ_i + Σ ẏ_i φ_i.
pub fn hamiltonian_q_gradient(
    theta: &Vector4<f64>,
    phi: &Vector4<f64>,
    dy_dt: &Vector4<f64>,
    dz_dt: &Vector4<f64>,
) -> f64 {
    -dz_dt.dot(theta) + dy_dt.dot(phi)
}

/// States, fields and flow sensitivities from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardSweep {
    pub trajectory: MomentTrajectory,
    pub y: Vec<Vector4<f64>>,
    pub field: Vec<Vector4<f64>>,
    pub theta: Vec<Vector4<f64>>,
    pub(crate) lin: Vec<Linearization>,
}

impl ForwardSweep {
    pub fn final_state(&self) -> MomentState {
        *self.trajectory.last()
    }
}

/// Forward Euler for y and θ, θ(0) = 0.
pub fn forward_sweep(
    params: &ProcessParams,
    control: &ControlTrajectory,
    mode: RhsMode,
) -> Result<ForwardSweep> {
    let grid = control.grid();
    let n = grid.n_steps;
    let dt = grid.dt();
    let mut y = Vec::with_capacity(n + 1);
    let mut theta = Vec::with_capacity(n + 1);
    let mut field = Vec::with_capacity(n + 1);
    let mut lin = Vec::with_capacity(n + 1);
    let mut floor_events = 0;

    let mut yi = moments::initial_state(params, control.flow(0)).to_vector();
    let mut thi = Vector4::zeros();
    for i in 0..=n {
        let t = grid.time(i);
        let l = dynamics::linearize(&yi, t, params, control.flow(i), mode);
        y.push(yi);
        theta.push(thi);
        field.push(l.field);
        lin.push(l);
        if i == n {
            break;
        }
        if yi[0] < dynamics::Y1_FLOOR || yi[2] <= Y3_FLOOR {
            floor_events += 1;
        }
        let dtheta = l.jac * thi + l.dfdq;
        yi += l.field * dt;
        thi += dtheta * dt;
        if yi[2] < -NEGATIVE_VARIANCE_TOLERANCE || !yi.iter().chain(thi.iter()).all(|v| v.is_finite()) {
            return Err(Error::StateInvariant {
                step: i + 1,
                time: grid.time(i + 1),
                detail: format!("y = {:?}, theta = {:?}", yi.as_slice(), thi.as_slice()),
            });
        }
    }
    let trajectory = MomentTrajectory {
        grid,
        states: y.iter().map(MomentState::from_vector).collect(),
        flows: control.flows().to_vec(),
        floor_events,
    };
    Ok(ForwardSweep {
        trajectory,
        y,
        field,
        theta,
        lin,
    })
}

/// Adjoints, their flow sensitivities and the Hamiltonian gradient.
#[derive(Debug, Clone)]
pub struct BackwardSweep {
    pub z: Vec<Vector4<f64>>,
    pub dz_dt: Vec<Vector4<f64>>,
    pub phi: Vec<Vector4<f64>>,
    pub dh_dq: Vec<f64>,
    pub hamiltonian: Vec<f64>,
    pub terminal: AdjointState,
}

/// Backward Euler for z from [`terminal_adjoint`] and φ from φ(t_f) = 0.
pub fn backward_sweep(
    params: &ProcessParams,
    control: &ControlTrajectory,
    fwd: &ForwardSweep,
    mode: RhsMode,
) -> Result<BackwardSweep> {
    let grid = control.grid();
    let n = grid.n_steps;
    let dt = grid.dt();
    let terminal = terminal_adjoint(&fwd.final_state(), control.flow(n), params.c0_g_per_l())?;

    let mut z = vec![Vector4::zeros(); n + 1];
    let mut dz_dt = vec![Vector4::zeros(); n + 1];
    let mut phi = vec![Vector4::zeros(); n + 1];
    let mut dh_dq = vec![0.0; n + 1];
    let mut ham = vec![0.0; n + 1];

    let mut zi = terminal.vector();
    let mut phii = Vector4::zeros();
    for i in (0..=n).rev() {
        let t = grid.time(i);
        let lin = &fwd.lin[i];
        let jac_dq = dynamics::jacobian_flow_derivative(&fwd.y[i], &fwd.theta[i], t, params, control.flow(i), mode);
        let sens = SensitivityState {
            theta: fwd.theta[i],
            phi: phii,
        };
        let dz = adjoint_rhs(&zi, &lin.jac);
        let (_, dphi) = sensitivity_rhs(&sens, &zi, lin, &jac_dq);
        z[i] = zi;
        dz_dt[i] = dz;
        phi[i] = phii;
        dh_dq[i] = hamiltonian_q_gradient(&fwd.theta[i], &phii, &lin.field, &dz);
        ham[i] = hamiltonian(&zi, &lin.field);
        if i > 0 {
            zi -= dz * dt;
            phii -= dphi * dt;
        }
    }
    Ok(BackwardSweep {
        z,
        dz_dt,
        phi,
        dh_dq,
        hamiltonian: ham,
        terminal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::TimeGrid;
    use approx::assert_relative_eq;

    fn sweep(params: &ProcessParams, flow: f64, t_f: f64, n: usize) -> (ControlTrajectory, ForwardSweep, BackwardSweep) {
        let grid = TimeGrid::new(t_f, n).unwrap();
        let control = ControlTrajectory::constant(grid, flow, params.q_min_lph, params.q_max_lph).unwrap();
        let fwd = forward_sweep(params, &control, RhsMode::Exact).unwrap();
        let bwd = backward_sweep(params, &control, &fwd, RhsMode::Exact).unwrap();
        (control, fwd, bwd)
    }

    /// Forward Euler from state `y` at grid index `from`, returning y at the end.
    fn integrate_from(params: &ProcessParams, control: &ControlTrajectory, from: usize, y: Vector4<f64>) -> Vector4<f64> {
        let grid = control.grid();
        let mut y = y;
        for i in from..grid.n_steps {
            let lin = dynamics::linearize(&y, grid.time(i), params, control.flow(i), RhsMode::Exact);
            y += lin.field * grid.dt();
        }
        y
    }

    fn objective_from(params: &ProcessParams, control: &ControlTrajectory, from: usize, y: Vector4<f64>) -> f64 {
        let end = integrate_from(params, control, from, y);
        let n = control.grid().n_steps;
        moments::objective_value(&MomentState::from_vector(&end), control.flow(n), params.c0_g_per_l())
    }

    #[test]
    fn terminal_coefficients_hand_arithmetic() {
        let s = MomentState {
            mu0: 0.14,
            mu1: 318.0,
            mu2c: 7150.0,
            mu3c: 0.0,
        };
        let z = terminal_adjoint(&s, 0.42, 2e-5).unwrap();
        let sigma = 7150f64.sqrt();
        assert_relative_eq!(z.a(), -(318.0 - sigma) * 2e-5 * 0.42, max_relative = 1e-12);
        assert_relative_eq!(z.a(), -1.9608e-3, max_relative = 1e-4);
        assert_relative_eq!(z.b(), 7.224e-6, max_relative = 1e-12);
        assert_relative_eq!(z.c(), -4.272e-8, max_relative = 1e-3);
        assert_eq!(z.z[3], 0.0);
    }

    #[test]
    fn saturated_column_zeroes_b_and_c() {
        let s = MomentState {
            mu0: 1.0,
            mu1: 200.0,
            mu2c: 900.0,
            mu3c: 1.0,
        };
        let z = terminal_adjoint(&s, 1.0, 2e-5).unwrap();
        assert_eq!(z.b(), 0.0);
        assert_eq!(z.c(), 0.0);
        assert!(z.a() < 0.0);
    }

    #[test]
    fn collapsed_variance_is_singular() {
        let s = MomentState::default();
        assert!(matches!(
            terminal_adjoint(&s, 0.42, 2e-5),
            Err(Error::SingularTerminal { .. })
        ));
    }

    #[test]
    fn zero_costate_stays_zero() {
        let jac = Matrix4::from_fn(|r, c| (r * 4 + c) as f64 - 7.5);
        assert_eq!(adjoint_rhs(&Vector4::zeros(), &jac), Vector4::zeros());
    }

    #[test]
    fn skewness_costate_is_identically_zero() {
        let (_, _, bwd) = sweep(&ProcessParams::default(), 0.42, 300.0, 1000);
        assert!(bwd.z.iter().all(|z| z[3] == 0.0));
        assert!(bwd.phi.iter().all(|p| p[3] == 0.0));
    }

    #[test]
    fn no_sensitivity_means_no_gradient() {
        let dy = Vector4::new(1.0, 2.0, 3.0, 4.0);
        let dz = Vector4::new(-1.0, 0.5, 0.25, 0.0);
        assert_eq!(hamiltonian_q_gradient(&Vector4::zeros(), &Vector4::zeros(), &dy, &dz), 0.0);
    }

    // θ(0) = 0, so the oracle holds the initial state fixed while Q moves.
    #[test]
    fn theta_matches_reintegration() {
        let p = ProcessParams::default();
        let q = 0.6;
        let h = 1e-4 * q;
        let (control, fwd, _) = sweep(&p, q, 300.0, 1000);
        let shifted = |flow: f64| {
            let c = ControlTrajectory::constant(control.grid(), flow, p.q_min_lph, p.q_max_lph).unwrap();
            integrate_from(&p, &c, 0, fwd.y[0])
        };
        let (up, dn) = (shifted(q + h), shifted(q - h));
        let n = fwd.y.len() - 1;
        for k in 0..4 {
            let fd = (up[k] - dn[k]) / (2.0 * h);
            assert_relative_eq!(fwd.theta[n][k], fd, max_relative = 0.01);
        }
    }

    /// Largest relative gap between z1, z2 and central differences of J at 20 sampled points.
    fn costate_gap(n: usize) -> f64 {
        let p = ProcessParams::default();
        let (control, fwd, bwd) = sweep(&p, 0.42, 300.0, n);
        let mut worst = 0.0f64;
        for i in (0..n).step_by(n / 20) {
            let y = fwd.y[i];
            for k in 0..2 {
                let h = 1e-6 * y[k].abs().max(1e-3);
                let mut up = y;
                let mut dn = y;
                up[k] += h;
                dn[k] -= h;
                let fd = (objective_from(&p, &control, i, up) - objective_from(&p, &control, i, dn)) / (2.0 * h);
                assert_eq!(bwd.z[i][k].signum(), fd.signum(), "sign at step {i}, moment {k}");
                worst = worst.max(((bwd.z[i][k] - fd) / fd).abs());
            }
        }
        worst
    }

    // The backward sweep discretizes the continuous adjoint, so it differs
    // from the exact discrete gradient by O(dt).
    #[test]
    fn costates_match_objective_differences() {
        let coarse = costate_gap(20);
        let medium = costate_gap(200);
        let fine = costate_gap(2000);
        assert!(coarse < 0.2, "{coarse}");
        assert!(medium < 0.05, "{medium}");
        assert!(fine < 0.005, "{fine}");
        assert!(medium / fine > 5.0);
    }

    #[test]
    fn flow_costate_sensitivity_is_bounded() {
        let (_, _, bwd) = sweep(&ProcessParams::default(), 0.42, 300.0, 1000);
        assert!(bwd.phi.iter().all(|p| p.iter().all(|v| v.is_finite() && v.abs() < 1.0)));
        assert_eq!(*bwd.phi.last().unwrap(), Vector4::zeros());
    }

    #[test]
    fn gradient_is_finite_at_both_bounds() {
        let p = ProcessParams::default();
        for q in [p.q_min_lph, p.q_max_lph] {
            let (_, _, bwd) = sweep(&p, q, 300.0, 1000);
            assert!(bwd.dh_dq.iter().all(|g| g.is_finite()));
            assert_eq!(bwd.hamiltonian.len(), 1001);
        }
    }
}
