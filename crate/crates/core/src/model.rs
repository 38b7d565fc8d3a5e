//! Thomas breakthrough model with a flow-dependent rate constant.
//!
//! Canonical units throughout the crate: grams, liters, hours. Inlet
//! concentration is carried in ppb (the unit the rate correlation is fitted
//! in) and converted with 1 ppb = 1e-6 g/L wherever it enters a mass balance.
//! Contact time is in minutes, again because the correlation is fitted in
//! minutes.

use serde::{Deserialize, Serialize};

use crate::dual::Scalar;
use crate::error::{Error, Result};

/// Grams per liter in one ppb.
pub const PPB_TO_G_PER_L: f64 = 1e-6;

/// Exponents beyond this magnitude are clamped before `exp`.
pub const EXPONENT_CLAMP: f64 = 500.0;

/// Resin and column constants plus the rate-constant correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessParams {
    /// Resin bed volume [L].
    pub resin_volume_l: f64,
    /// Inlet chromate concentration [ppb].
    pub c0_ppb: f64,
    /// Thomas capacity q_m [g Cr / L resin]; numerically equal to kg/m³.
    pub qm_g_per_l: f64,
    /// Correlation slope on contact time [L/(g·hr) per minute].
    pub kt_alpha: f64,
    /// Correlation slope on inlet concentration [L/(g·hr) per ppb].
    pub kt_beta: f64,
    /// Correlation intercept [L/(g·hr)].
    pub kt_gamma: f64,
    /// Multiplier on the correlation output. 1 except in perturbed ensembles.
    pub kt_scale: f64,
    /// Pump lower bound [L/hr].
    pub q_min_lph: f64,
    /// Pump upper bound [L/hr].
    pub q_max_lph: f64,
    /// Resin depth, used only for HETP diagnostics [length units].
    pub column_height: f64,
}

impl Default for ProcessParams {
    fn default() -> Self {
        // 1.27 L/hr × 0.5 min: maps the pump bounds onto contact times of
        // 0.5 and ~1.5 minutes.
        Self {
            resin_volume_l: 1.27 * 0.5 / 60.0,
            c0_ppb: 20.0,
            qm_g_per_l: 0.254,
            kt_alpha: -264.0,
            kt_beta: 10.45,
            kt_gamma: 1247.0,
            kt_scale: 1.0,
            q_min_lph: 0.42,
            q_max_lph: 1.27,
            column_height: 1.0,
        }
    }
}

impl ProcessParams {
    /// Checks every invariant and returns all violations at once.
    pub fn validation_errors(&self) -> Vec<Error> {
        let mut errs = Vec::new();
        let positive = [
            ("resin_volume_l", self.resin_volume_l),
            ("c0_ppb", self.c0_ppb),
            ("qm_g_per_l", self.qm_g_per_l),
            ("kt_scale", self.kt_scale),
            ("q_min_lph", self.q_min_lph),
            ("column_height", self.column_height),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                errs.push(Error::param(field, format!("must be positive and finite, got {v}")));
            }
        }
        for (field, v) in [
            ("kt_alpha", self.kt_alpha),
            ("kt_beta", self.kt_beta),
            ("kt_gamma", self.kt_gamma),
            ("q_max_lph", self.q_max_lph),
        ] {
            if !v.is_finite() {
                errs.push(Error::param(field, format!("must be finite, got {v}")));
            }
        }
        if !(self.q_min_lph <= self.q_max_lph) {
            errs.push(Error::param(
                "q_min_lph/q_max_lph",
                format!(
                    "q_min_lph ({}) must not exceed q_max_lph ({})",
                    self.q_min_lph, self.q_max_lph
                ),
            ));
        }
        if errs.is_empty() {
            // K_T is affine in 1/Q, so its extremes over the bounds sit at the bounds.
            for q in [self.q_min_lph, self.q_max_lph] {
                let kt = self.kt(q);
                if !(kt > 0.0) {
                    errs.push(Error::NonPositiveRate { flow: q, kt });
                }
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        match self.validation_errors().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Inlet concentration in g/L.
    pub fn c0_g_per_l(&self) -> f64 {
        self.c0_ppb * PPB_TO_G_PER_L
    }

    /// Empty-bed contact time [min].
    pub fn contact_time_min(&self, flow: f64) -> f64 {
        60.0 * self.resin_volume_l / flow
    }

    /// K_T [L/(g·hr)] without the positivity check.
    pub fn kt(&self, flow: f64) -> f64 {
        self.kt_scale
            * (self.kt_alpha * self.contact_time_min(flow)
                + self.kt_beta * self.c0_ppb
                + self.kt_gamma)
    }

    /// K_T·C0 [1/hr], generic so the solver can differentiate through it.
    pub fn rate_constant<T: Scalar>(&self, flow: T) -> T {
        let ct = flow.recip().scale(60.0 * self.resin_volume_l);
        let kt = ct.scale(self.kt_alpha) + T::cst(self.kt_beta * self.c0_ppb + self.kt_gamma);
        kt.scale(self.kt_scale * self.c0_g_per_l())
    }

    /// d(K_T·C0)/dQ [1/(hr·L/hr)].
    pub fn rate_constant_dq(&self, flow: f64) -> f64 {
        -self.kt_scale * self.kt_alpha * 60.0 * self.resin_volume_l / (flow * flow)
            * self.c0_g_per_l()
    }

    /// Time at which ψ = 1/2 under constant flow [hr].
    pub fn half_time(&self, flow: f64) -> f64 {
        self.qm_g_per_l * self.resin_volume_l / (flow * self.c0_g_per_l())
    }

    pub fn clamp_flow(&self, flow: f64) -> f64 {
        flow.clamp(self.q_min_lph, self.q_max_lph)
    }
}

/// A validated (Q, t) pair with the derived contact time and K_T.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub flow_lph: f64,
    pub time_hr: f64,
    pub contact_time_min: f64,
    pub kt: f64,
}

impl OperatingPoint {
    pub fn new(params: &ProcessParams, flow: f64, time: f64) -> Result<Self> {
        if !(flow >= params.q_min_lph && flow <= params.q_max_lph) {
            return Err(Error::param(
                "flow",
                format!(
                    "{flow} L/hr outside [{}, {}]",
                    params.q_min_lph, params.q_max_lph
                ),
            ));
        }
        if !(time >= 0.0) {
            return Err(Error::param("time", format!("must be non-negative, got {time}")));
        }
        Ok(Self {
            flow_lph: flow,
            time_hr: time,
            contact_time_min: params.contact_time_min(flow),
            kt: kt_from_conditions(params, flow)?,
        })
    }
}

/// K_T = α·CT + β·C0 + γ, CT in minutes and C0 in ppb, times `kt_scale`.
pub fn kt_from_conditions(params: &ProcessParams, flow: f64) -> Result<f64> {
    if !(flow > 0.0) {
        return Err(Error::param("flow", format!("must be positive, got {flow}")));
    }
    let kt = params.kt(flow);
    if kt > 0.0 {
        Ok(kt)
    } else {
        Err(Error::NonPositiveRate { flow, kt })
    }
}

/// Logistic value of `x`, with the argument clamped to keep `exp` finite.
pub(crate) fn logistic_of_exponent(exponent: f64) -> f64 {
    let e = exponent.clamp(-EXPONENT_CLAMP, EXPONENT_CLAMP);
    1.0 / (1.0 + e.exp())
}

/// Thomas effluent ratio ψ = C/C0 at constant flow.
pub fn breakthrough_ratio(params: &ProcessParams, flow: f64, time: f64) -> f64 {
    let kt = params.kt(flow);
    let exponent = kt * params.qm_g_per_l * params.resin_volume_l / flow
        - kt * params.c0_g_per_l() * time;
    logistic_of_exponent(exponent)
}

/// dψ/dt = K_T·C0·(ψ − ψ²) [1/hr].
pub fn breakthrough_rate(params: &ProcessParams, flow: f64, time: f64) -> f64 {
    let psi = breakthrough_ratio(params, flow, time);
    params.rate_constant(flow) * (psi - psi * psi)
}

/// Closed-form time at which constant-flow ψ reaches `ratio` [hr].
pub fn time_to_ratio_constant(params: &ProcessParams, flow: f64, ratio: f64) -> f64 {
    params.half_time(flow) + (ratio / (1.0 - ratio)).ln() / params.rate_constant(flow)
}

/// Closed form of ∫₀ᵗ ψ(s) ds at constant flow [hr].
///
/// With ψ = 1/(1 + e^{a − k s}), ∫ψ ds = [ln(1 + e^{k s − a})]/k.
pub fn integrated_ratio_constant(params: &ProcessParams, flow: f64, time: f64) -> f64 {
    let k = params.rate_constant(flow);
    let a = k * params.half_time(flow);
    (softplus(k * time - a) - softplus(-a)) / k
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn base() -> ProcessParams {
        ProcessParams::default()
    }

    #[test]
    fn correlation_hand_arithmetic() {
        let p = base();
        // CT = 1.5 min needs Q = 60·V/1.5.
        let q15 = 60.0 * p.resin_volume_l / 1.5;
        assert_relative_eq!(kt_from_conditions(&p, q15).unwrap(), 1060.0, epsilon = 1e-9);
        let q05 = 60.0 * p.resin_volume_l / 0.5;
        assert_relative_eq!(kt_from_conditions(&p, q05).unwrap(), 1324.0, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_correlation_is_intercept() {
        let p = ProcessParams {
            kt_alpha: 0.0,
            kt_beta: 0.0,
            ..base()
        };
        for q in [0.3, 0.9, 4.0] {
            assert_eq!(kt_from_conditions(&p, q).unwrap(), p.kt_gamma);
        }
    }

    #[test]
    fn nonpositive_rate_is_rejected() {
        let p = ProcessParams {
            kt_gamma: -300.0,
            ..base()
        };
        assert!(matches!(
            kt_from_conditions(&p, 0.42),
            Err(Error::NonPositiveRate { .. })
        ));
        assert!(p
            .validation_errors()
            .iter()
            .any(|e| matches!(e, Error::NonPositiveRate { .. })));
        assert!(kt_from_conditions(&base(), 0.0).is_err());
    }

    #[test]
    fn default_contact_times() {
        let p = base();
        assert_relative_eq!(p.contact_time_min(1.27), 0.5, epsilon = 1e-12);
        assert_relative_eq!(p.contact_time_min(0.42), 1.5119, epsilon = 1e-4);
    }

    #[test]
    fn half_time_gives_half() {
        let p = base();
        for q in [0.42, 0.7, 1.27] {
            assert_relative_eq!(
                breakthrough_ratio(&p, q, p.half_time(q)),
                0.5,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn table_one_ratios() {
        let p = base();
        assert!((breakthrough_ratio(&p, 1.27, 50.0) - 0.186).abs() < 1e-3);
        assert!((breakthrough_ratio(&p, 0.42, 233.0) - 0.137).abs() < 1e-3);
    }

    #[test]
    fn rate_limits() {
        let p = base();
        let q = 0.42;
        let k = p.rate_constant(q);
        assert_relative_eq!(k, 1056.857142857 * 2e-5, epsilon = 1e-9);
        assert_relative_eq!(
            breakthrough_rate(&p, q, p.half_time(q)),
            k / 4.0,
            epsilon = 1e-15
        );
        assert!(breakthrough_rate(&p, q, 0.0) < 2e-3 * k);
        let deep = ProcessParams { qm_g_per_l: 5.0, ..base() };
        assert!(breakthrough_rate(&deep, q, 0.0) < 1e-12);
        assert!(breakthrough_rate(&p, q, 5000.0) < 1e-12);
    }

    #[test]
    fn extreme_exponents_saturate() {
        let p = ProcessParams {
            qm_g_per_l: 1e6,
            ..base()
        };
        let psi = breakthrough_ratio(&p, 0.42, 0.0);
        assert!(psi >= 0.0 && psi.is_finite());
        let late = breakthrough_ratio(&base(), 0.42, 1e9);
        assert_eq!(late, 1.0);
    }

    #[test]
    fn half_time_is_inverse_in_flow_when_rate_is_fixed() {
        let p = ProcessParams {
            kt_alpha: 0.0,
            ..base()
        };
        let (q1, q2) = (0.5, 1.1);
        assert_relative_eq!(p.half_time(q1) / p.half_time(q2), q2 / q1, epsilon = 1e-12);
    }

    #[test]
    fn rate_constant_derivative_matches_dual() {
        use crate::dual::Dual;
        let p = base();
        let d = p.rate_constant(Dual::variable(0.61));
        assert_relative_eq!(d.eps, p.rate_constant_dq(0.61), epsilon = 1e-15);
    }

    #[test]
    fn integrated_ratio_matches_quadrature() {
        let p = base();
        let (q, t) = (1.27, 37.3);
        let n = 20_000;
        let h = t / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            s += w * breakthrough_ratio(&p, q, i as f64 * h);
        }
        assert_relative_eq!(integrated_ratio_constant(&p, q, t), s * h, max_relative = 1e-7);
    }

    #[test]
    fn operating_point_checks_bounds() {
        let p = base();
        let op = OperatingPoint::new(&p, 1.27, 3.0).unwrap();
        assert_relative_eq!(op.contact_time_min, 0.5, epsilon = 1e-12);
        assert!(OperatingPoint::new(&p, 1.5, 3.0).is_err());
        assert!(OperatingPoint::new(&p, 0.5, -1.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rate_is_centered_difference_of_ratio(q in 0.42f64..1.27, t in 0.0f64..600.0) {
                let p = ProcessParams::default();
                let h = 1e-3;
                let fd = (breakthrough_ratio(&p, q, t + h) - breakthrough_ratio(&p, q, t - h)) / (2.0 * h);
                let an = breakthrough_rate(&p, q, t);
                prop_assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-12));
            }

            #[test]
            fn ratio_is_monotone_in_time(q in 0.42f64..1.27, t in 0.0f64..800.0, dt in 0.0f64..50.0) {
                let p = ProcessParams::default();
                prop_assert!(breakthrough_ratio(&p, q, t + dt) >= breakthrough_ratio(&p, q, t));
            }
        }
    }
}
