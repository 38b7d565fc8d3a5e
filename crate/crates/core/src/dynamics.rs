//! The four-state moment vector field and its derivatives.
//!
//! With `k = K_T(Q)·C0`, `u = k(1 − y1)`, `d = t − y2`:
//!
//! ```text
//! F1 = k·y1·(1 − y1)
//! F2 = d·u
//! F3 = (d² − y3)·u
//! F4 = u·[d³/y3^1.5 − 3d/√y3 − y4(1.5·d²/y3 − 0.5)]      (exact)
//! F4 = u·[(t − y1)³/y3^1.5 − y4(1.5·d²/y3 − 0.5)]         (paper-faithful)
//! ```
//!
//! The `1/y1` factors of the quotient form cancel against `dy1/dt`, so only the
//! skewness row needs a floor. Every component is proportional to `k`, which
//! makes `∂F/∂Q = (k'/k)·F`.
//!
//! The Jacobian is hand-derived and generic over [`Scalar`]; evaluating it on
//! dual numbers gives the exact second-order terms the adjoint sensitivity and
//! second-order adjoint equations need.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::dual::{Dual, Scalar};
use crate::model::ProcessParams;

/// Below this the zeroth moment is treated as empty support.
pub const Y1_FLOOR: f64 = 1e-12;
/// The skewness state is frozen while the variance is at or below this [hr²].
pub const Y3_FLOOR: f64 = 1e-9;

/// Which form of the skewness equation to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhsMode {
    /// Exact time derivative of the normalized third central moment.
    #[default]
    Exact,
    /// Alternative form with `(t − y1)³` and no `−3·y2'/√y3` chain term.
    PaperFaithful,
}

#[inline]
fn skew_active<T: Scalar>(y: &[T; 4]) -> bool {
    y[2].re() > Y3_FLOOR
}

/// F(y, t) for a given rate constant `k`.
pub fn vector_field<T: Scalar>(y: &[T; 4], t: f64, k: T, mode: RhsMode) -> [T; 4] {
    let one = T::cst(1.0);
    let w = one - y[0];
    let u = k * w;
    let d = T::cst(t) - y[1];
    let d2 = d * d;
    let f1 = k * y[0] * w;
    let f2 = d * u;
    let f3 = (d2 - y[2]) * u;
    let f4 = if skew_active(y) {
        let s = y[2].sqrt().recip();
        let s2 = s * s;
        let relax = y[3] * (d2 * s2).scale(1.5) - y[3].scale(0.5);
        match mode {
            RhsMode::Exact => u * (d2 * d * s2 * s - (d * s).scale(3.0) - relax),
            RhsMode::PaperFaithful => {
                let e = T::cst(t) - y[0];
                u * (e * e * e * s2 * s - relax)
            }
        }
    } else {
        T::cst(0.0)
    };
    [f1, f2, f3, f4]
}

/// ∂F_r/∂y_c, indexed `[r][c]`.
pub fn jacobian<T: Scalar>(y: &[T; 4], t: f64, k: T, mode: RhsMode) -> [[T; 4]; 4] {
    let zero = T::cst(0.0);
    let one = T::cst(1.0);
    let w = one - y[0];
    let u = k * w;
    let d = T::cst(t) - y[1];
    let d2 = d * d;

    let mut j = [[zero; 4]; 4];
    j[0][0] = k * (one - y[0].scale(2.0));
    j[1][0] = -(k * d);
    j[1][1] = -u;
    j[2][0] = -(k * (d2 - y[2]));
    j[2][1] = -(d * u).scale(2.0);
    j[2][2] = -u;

    if skew_active(y) {
        let s = y[2].sqrt().recip();
        let s2 = s * s;
        let s3 = s2 * s;
        let relax = (d2 * s2).scale(1.5) - T::cst(0.5);
        match mode {
            RhsMode::Exact => {
                let g = d2 * d * s3 - (d * s).scale(3.0) - y[3] * relax;
                j[3][0] = -(k * g);
                j[3][1] = -(u * ((d2 * s3).scale(3.0) - s.scale(3.0) - (y[3] * d * s2).scale(3.0)));
                let dg_ds = (d2 * d * s2).scale(3.0) - d.scale(3.0) - (y[3] * d2 * s).scale(3.0);
                j[3][2] = -(u * dg_ds * s3).scale(0.5);
            }
            RhsMode::PaperFaithful => {
                let e = T::cst(t) - y[0];
                let g = e * e * e * s3 - y[3] * relax;
                j[3][0] = -(k * g) - (u * e * e * s3).scale(3.0);
                j[3][1] = (u * y[3] * d * s2).scale(3.0);
                let dg_ds = (e * e * e * s2).scale(3.0) - (y[3] * d2 * s).scale(3.0);
                j[3][2] = -(u * dg_ds * s3).scale(0.5);
            }
        }
        j[3][3] = -(u * relax);
    }
    j
}

/// Jacobian and flow sensitivity of the vector field at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linearization {
    pub field: Vector4<f64>,
    /// ∂F/∂y.
    pub jac: Matrix4<f64>,
    /// ∂F/∂Q, including K_T's dependence on Q through the contact time.
    pub dfdq: Vector4<f64>,
}

pub fn linearize(
    y: &Vector4<f64>,
    t: f64,
    params: &ProcessParams,
    flow: f64,
    mode: RhsMode,
) -> Linearization {
    let ya = [y[0], y[1], y[2], y[3]];
    let k = params.rate_constant(flow);
    let f = vector_field(&ya, t, k, mode);
    let field = Vector4::from(f);
    let jac = to_matrix(&jacobian(&ya, t, k, mode));
    let dfdq = field * (params.rate_constant_dq(flow) / k);
    Linearization { field, jac, dfdq }
}

pub(crate) fn to_matrix(j: &[[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|r, c| j[r][c])
}

/// Directional derivative of the Jacobian along `(y, Q) ← (y + εθ, Q + ε)`.
///
/// This is d(∂F/∂y)/dQ along a flow-perturbed trajectory whose state
/// sensitivity is `theta`.
pub fn jacobian_flow_derivative(
    y: &Vector4<f64>,
    theta: &Vector4<f64>,
    t: f64,
    params: &ProcessParams,
    flow: f64,
    mode: RhsMode,
) -> Matrix4<f64> {
    let yd: [Dual<f64>; 4] = std::array::from_fn(|i| Dual::new(y[i], theta[i]));
    let k = params.rate_constant(Dual::variable(flow));
    let j = jacobian(&yd, t, k, mode);
    Matrix4::from_fn(|r, c| j[r][c].eps)
}

/// Diagonal second partials ∂²F_r/∂y_c², indexed `[r][c]`, together with
/// their directional derivative along `(θ, 1)` in `(y, Q)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagonalCurvature {
    pub second: Matrix4<f64>,
    pub second_dq: Matrix4<f64>,
}

pub fn diagonal_curvature(
    y: &Vector4<f64>,
    theta: &Vector4<f64>,
    t: f64,
    params: &ProcessParams,
    flow: f64,
    mode: RhsMode,
) -> DiagonalCurvature {
    type H = Dual<Dual<f64>>;
    let mut second = Matrix4::zeros();
    let mut second_dq = Matrix4::zeros();
    // Outer ε carries the flow direction, inner ε the y_c direction.
    let k: H = params.rate_constant(Dual::new(Dual::constant(flow), Dual::constant(1.0)));
    for c in 0..4 {
        let yd: [H; 4] = std::array::from_fn(|i| {
            let inner = if i == c {
                Dual::variable(y[i])
            } else {
                Dual::constant(y[i])
            };
            Dual::new(inner, Dual::constant(theta[i]))
        });
        let j = jacobian(&yd, t, k, mode);
        for r in 0..4 {
            second[(r, c)] = j[r][c].re.eps;
            second_dq[(r, c)] = j[r][c].eps.eps;
        }
    }
    DiagonalCurvature { second, second_dq }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng) -> (Vector4<f64>, f64, f64) {
        let t = rng.random_range(20.0..400.0);
        let y1 = rng.random_range(0.01..0.95);
        let y2 = rng.random_range(0.1..0.9) * t;
        let y3 = rng.random_range(0.01..0.3) * t * t;
        let y4 = rng.random_range(-1.5..1.5);
        let q = rng.random_range(0.42..1.27);
        (Vector4::new(y1, y2, y3, y4), t, q)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    fn central_jacobian(y: &Vector4<f64>, t: f64, p: &ProcessParams, q: f64, mode: RhsMode) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        let k = p.rate_constant(q);
        for c in 0..4 {
            let h = 1e-6 * y[c].abs().max(1e-3);
            let mut yp = [y[0], y[1], y[2], y[3]];
            let mut ym = yp;
            yp[c] += h;
            ym[c] -= h;
            let fp = vector_field(&yp, t, k, mode);
            let fm = vector_field(&ym, t, k, mode);
            for r in 0..4 {
                m[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        m
    }

    #[test]
    fn logistic_peak_is_stationary_in_y1() {
        let p = ProcessParams::default();
        let lin = linearize(&Vector4::new(0.5, 100.0, 900.0, 0.1), 200.0, &p, 0.42, RhsMode::Exact);
        assert_eq!(lin.jac[(0, 0)], 0.0);
    }

    #[test]
    fn no_flow_sensitivity_without_contact_time_term() {
        let p = ProcessParams {
            kt_alpha: 0.0,
            ..ProcessParams::default()
        };
        let lin = linearize(&Vector4::new(0.2, 100.0, 900.0, 0.1), 200.0, &p, 0.6, RhsMode::Exact);
        assert_eq!(lin.dfdq, Vector4::zeros());
    }

    #[test]
    fn skewness_row_is_frozen_at_variance_floor() {
        let p = ProcessParams::default();
        let y = Vector4::new(0.01, 0.0, 0.0, 0.0);
        let lin = linearize(&y, 0.0, &p, 0.42, RhsMode::Exact);
        assert_eq!(lin.field[3], 0.0);
        assert_eq!(lin.jac.row(3).iter().copied().fold(0.0_f64, |a, b| a.max(b.abs())), 0.0);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let p = ProcessParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for mode in [RhsMode::Exact, RhsMode::PaperFaithful] {
            for _ in 0..100 {
                let (y, t, q) = random_state(&mut rng);
                let an = linearize(&y, t, &p, q, mode).jac;
                let fd = central_jacobian(&y, t, &p, q, mode);
                let scale = an.abs().max();
                for r in 0..4 {
                    for c in 0..4 {
                        let err = (an[(r, c)] - fd[(r, c)]).abs() / an[(r, c)].abs().max(1e-6 * scale).max(1e-300);
                        assert!(err < 1e-4, "mode {mode:?} [{r}][{c}] an={} fd={}", an[(r, c)], fd[(r, c)]);
                    }
                }
            }
        }
    }

    #[test]
    fn flow_sensitivity_matches_central_differences() {
        let p = ProcessParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let (y, t, q) = random_state(&mut rng);
            let an = linearize(&y, t, &p, q, RhsMode::Exact).dfdq;
            let h = 1e-6 * q;
            let ya = [y[0], y[1], y[2], y[3]];
            let fp = vector_field(&ya, t, p.rate_constant(q + h), RhsMode::Exact);
            let fm = vector_field(&ya, t, p.rate_constant(q - h), RhsMode::Exact);
            for r in 0..4 {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                assert!(rel_err(an[r], fd) < 1e-4, "row {r}: {} vs {fd}", an[r]);
            }
        }
    }

    #[test]
    fn curvature_and_flow_derivative_match_differences_of_jacobian() {
        let p = ProcessParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let theta = Vector4::new(-0.02, 35.0, 900.0, 0.3);
        for _ in 0..50 {
            let (y, t, q) = random_state(&mut rng);
            let curv = diagonal_curvature(&y, &theta, t, &p, q, RhsMode::Exact);
            for c in 0..4 {
                let h = 1e-5 * y[c].abs().max(1e-3);
                let mut yp = y;
                let mut ym = y;
                yp[c] += h;
                ym[c] -= h;
                let jp = linearize(&yp, t, &p, q, RhsMode::Exact).jac;
                let jm = linearize(&ym, t, &p, q, RhsMode::Exact).jac;
                for r in 0..4 {
                    let fd = (jp[(r, c)] - jm[(r, c)]) / (2.0 * h);
                    let an = curv.second[(r, c)];
                    if an == 0.0 && fd.abs() < 1e-14 {
                        continue;
                    }
                    assert!(rel_err(an, fd) < 1e-4, "[{r}][{c}] {an} vs {fd}");
                }
            }
            // Directional derivative of the Jacobian along (θ, 1).
            let dj = jacobian_flow_derivative(&y, &theta, t, &p, q, RhsMode::Exact);
            let e = 1e-6;
            let jp = linearize(&(y + theta * e), t, &p, q + e, RhsMode::Exact).jac;
            let jm = linearize(&(y - theta * e), t, &p, q - e, RhsMode::Exact).jac;
            let fd = (jp - jm) / (2.0 * e);
            let scale = fd.abs().max();
            for r in 0..4 {
                for c in 0..4 {
                    assert!((dj[(r, c)] - fd[(r, c)]).abs() <= 1e-4 * dj[(r, c)].abs().max(1e-6 * scale));
                }
            }
        }
    }
}
