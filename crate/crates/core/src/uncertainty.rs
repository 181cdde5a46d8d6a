//! Gaussian propagation and chance-constraint math.
//!
//! Everything here is a pure function over immutable inputs. Braking and
//! stop distances propagate variance with a first-order Taylor expansion;
//! the deterministic reformulation of a chance constraint
//! `P(q <= t) >= 1 - alpha` is `mean + sigma * quantile(1 - alpha) <= t`.

use crate::error::UncertaintyError;

/// Scalar Gaussian: mean plus variance (not standard deviation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianScalar {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianScalar {
    pub fn new(mean: f64, variance: f64) -> Self {
        debug_assert!(variance >= 0.0 && mean.is_finite());
        GaussianScalar { mean, variance }
    }
    pub fn exact(mean: f64) -> Self {
        GaussianScalar { mean, variance: 0.0 }
    }
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Bivariate Gaussian over positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian2D {
    pub mean: (f64, f64),
    /// Row-major symmetric covariance [[xx, xy], [xy, yy]].
    pub cov: [[f64; 2]; 2],
}

impl Gaussian2D {
    pub fn new(mean: (f64, f64), cov: [[f64; 2]; 2]) -> Result<Self, UncertaintyError> {
        let asym = (cov[0][1] - cov[1][0]).abs();
        if asym > 1e-12 {
            return Err(UncertaintyError::NegativeVariance(asym));
        }
        let (l1, l2) = eigenvalues_2x2(cov);
        if l1.min(l2) < -1e-12 {
            return Err(UncertaintyError::NegativeVariance(l1.min(l2)));
        }
        Ok(Gaussian2D { mean, cov })
    }

    pub fn isotropic(mean: (f64, f64), variance: f64) -> Self {
        Gaussian2D {
            mean,
            cov: [[variance, 0.0], [0.0, variance]],
        }
    }
}

/// Eigenvalues of a symmetric 2x2 matrix, closed form, larger first.
pub fn eigenvalues_2x2(m: [[f64; 2]; 2]) -> (f64, f64) {
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
    (0.5 * (tr + disc), 0.5 * (tr - disc))
}

/// Orientation of the principal axis of a symmetric 2x2 matrix.
pub fn principal_axis_angle(m: [[f64; 2]; 2]) -> f64 {
    0.5 * (2.0 * m[0][1]).atan2(m[0][0] - m[1][1])
}

/// Allowed violation probability of a chance constraint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskLevel(f64);

impl RiskLevel {
    pub fn new(alpha: f64) -> Result<Self, UncertaintyError> {
        if alpha > 0.0 && alpha <= 0.5 {
            Ok(RiskLevel(alpha))
        } else {
            Err(UncertaintyError::OutOfDomain(alpha))
        }
    }
    pub fn alpha(&self) -> f64 {
        self.0
    }
    /// phi^-1(1 - alpha), the tightening multiplier on sigma.
    pub fn quantile_factor(&self) -> f64 {
        inverse_quantile(1.0 - self.0).expect("alpha in (0, 0.5] keeps gamma in (0, 1)")
    }
}

/// Project a 2x2 covariance onto a unit direction: `u . Sigma . u^T`.
pub fn project_variance(cov: [[f64; 2]; 2], u: (f64, f64)) -> Result<f64, UncertaintyError> {
    let norm = (u.0 * u.0 + u.1 * u.1).sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(UncertaintyError::NonUnitDirection(norm));
    }
    let v = u.0 * (cov[0][0] * u.0 + cov[0][1] * u.1) + u.1 * (cov[1][0] * u.0 + cov[1][1] * u.1);
    Ok(v.max(0.0))
}

/// Braking distance `v^2 / (2 a)` with first-order variance propagation.
///
/// `a_brake.mean` is the deceleration magnitude and must be positive.
pub fn braking_distance(
    v: GaussianScalar,
    a_brake: GaussianScalar,
) -> Result<GaussianScalar, UncertaintyError> {
    if a_brake.mean <= 0.0 {
        return Err(UncertaintyError::NonPositiveDeceleration(a_brake.mean));
    }
    let mean = v.mean * v.mean / (2.0 * a_brake.mean);
    let dv = v.mean / a_brake.mean;
    let da = v.mean * v.mean / (2.0 * a_brake.mean * a_brake.mean);
    let variance = dv * dv * v.variance + da * da * a_brake.variance;
    Ok(GaussianScalar::new(mean, variance))
}

/// Stop position: current position plus braking distance, independent noise.
pub fn stop_distance(
    s: GaussianScalar,
    v: GaussianScalar,
    a_brake: GaussianScalar,
) -> Result<GaussianScalar, UncertaintyError> {
    let brake = braking_distance(v, a_brake)?;
    Ok(GaussianScalar::new(
        s.mean + brake.mean,
        s.variance + brake.variance,
    ))
}

/// Difference of ego and leader stop positions; variances add.
pub fn delta_stop_distance(ego: GaussianScalar, leader: GaussianScalar) -> GaussianScalar {
    GaussianScalar::new(ego.mean - leader.mean, ego.variance + leader.variance)
}

/// Standard normal quantile, `sqrt(2) * erf_inv(2 gamma - 1)`.
///
/// Rational-approximation initializer refined by two Halley steps on the
/// normal CDF; absolute error below 1e-8 across (0, 1).
pub fn inverse_quantile(gamma: f64) -> Result<f64, UncertaintyError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(UncertaintyError::OutOfDomain(gamma));
    }
    // Acklam's rational approximation in three regimes.
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    let mut x = if gamma < P_LOW {
        let q = (-2.0 * gamma.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if gamma <= 1.0 - P_LOW {
        let q = gamma - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - gamma).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // Two Halley refinements on Phi(x) - gamma.
    for _ in 0..2 {
        let err = normal_cdf(x) - gamma;
        let u = err * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(x)
}

/// Standard normal CDF via the high-precision erfc.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Outcome of a deterministic chance-constraint check.
#[derive(Clone, Copy, Debug)]
pub struct ChanceCheck {
    pub satisfied: bool,
    /// `threshold - mean - sigma * quantile(1 - alpha)`; non-negative when
    /// satisfied.
    pub margin: f64,
}

/// Check `P(q <= threshold) >= 1 - alpha` in deterministic form.
pub fn chance_satisfied(q: GaussianScalar, threshold: f64, alpha: RiskLevel) -> ChanceCheck {
    let margin = threshold - q.mean - q.std_dev() * alpha.quantile_factor();
    ChanceCheck {
        satisfied: margin >= 0.0,
        margin,
    }
}

/// Distance an oncoming vehicle needs either to pass or to decelerate
/// comfortably to the ego speed while keeping a time headway.
///
/// `a_cft` is the signed (negative) comfortable deceleration.
pub fn required_distance(
    v0: f64,
    vk: f64,
    a_cft: f64,
    t_hw: f64,
) -> Result<f64, UncertaintyError> {
    if vk < v0 {
        return Err(UncertaintyError::InvalidSpeeds { v0, vk });
    }
    if a_cft >= 0.0 {
        return Err(UncertaintyError::NonPositiveDeceleration(a_cft));
    }
    let t_dec = (vk - v0) / a_cft.abs();
    Ok(vk * t_dec + 0.5 * a_cft * t_dec * t_dec + v0 * t_hw)
}

/// Residual sentinel for an inactive indicator: always satisfied.
pub const INACTIVE: f64 = f64::NEG_INFINITY;

/// Scene slice needed by the fallback safety constraints.
///
/// All distances are absolute arc lengths on the ego route; `leader_stop`
/// is the leader's worst-case stop distribution.
#[derive(Clone, Copy, Debug)]
pub struct SafetyScene {
    pub visibility_active: bool,
    /// Arc length where visible free space ends.
    pub s_vis: Option<f64>,
    pub stop_active: bool,
    pub leader_stop: Option<GaussianScalar>,
    pub yield_active: bool,
    /// Arc length of the merge point.
    pub s_merge: Option<f64>,
    pub s_min: f64,
    pub alpha: RiskLevel,
}

/// Residuals of the three fallback chance constraints at one step, in the
/// deterministic form `mean + sigma * quantile(1 - alpha) - bound`.
/// Non-positive means satisfied; inactive indicators report [`INACTIVE`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafetyResiduals {
    pub visibility: f64,
    pub stop: f64,
    pub yield_point: f64,
}

impl SafetyResiduals {
    pub fn max(&self) -> f64 {
        self.visibility.max(self.stop).max(self.yield_point)
    }
}

/// Evaluate the fallback chance constraints for each per-step stop-position
/// distribution (indices 0..=2k of the irreversible window).
pub fn evaluate_safety_constraints(
    scene: &SafetyScene,
    fallback_stops: &[GaussianScalar],
) -> Result<Vec<SafetyResiduals>, UncertaintyError> {
    let q = scene.alpha.quantile_factor();
    let mut out = Vec::with_capacity(fallback_stops.len());
    for stop in fallback_stops {
        let tightened = stop.mean + stop.std_dev() * q;
        let visibility = if scene.visibility_active {
            let s_vis = scene
                .s_vis
                .ok_or(UncertaintyError::MissingSceneField("s_vis"))?;
            tightened + scene.s_min - s_vis
        } else {
            INACTIVE
        };
        let stop_residual = if scene.stop_active {
            let leader = scene
                .leader_stop
                .ok_or(UncertaintyError::MissingSceneField("leader_stop"))?;
            let delta = delta_stop_distance(*stop, leader);
            delta.mean + delta.std_dev() * q + scene.s_min
        } else {
            INACTIVE
        };
        let yield_point = if scene.yield_active {
            let s_merge = scene
                .s_merge
                .ok_or(UncertaintyError::MissingSceneField("s_merge"))?;
            tightened + scene.s_min - s_merge
        } else {
            INACTIVE
        };
        out.push(SafetyResiduals {
            visibility,
            stop: stop_residual,
            yield_point,
        });
    }
    Ok(out)
}
