//! Cost templates and the composite driving / comfort / collision /
//! contouring costs.
//!
//! Three templates cover every term: a quadratic pull toward a desired
//! value, a C1 quadratic hinge outside an interval, and an asymmetric loss
//! that is quadratic above the target and Cauchy-tolerant below it. All of
//! them are non-negative and C1, which the interior-point solver relies on.

use crate::solver::ad::Scalar;
use serde::{Deserialize, Serialize};

/// Quadratic deviation from a desired value: `w * (x* - x)^2`.
pub fn cost_value<T: Scalar>(x: T, desired: f64, weight: f64) -> T {
    let diff = T::constant(desired) - x;
    T::constant(weight) * diff * diff
}

/// Zero inside `[lo, hi]`, quadratic hinge outside; C1 at the boundaries.
pub fn cost_range<T: Scalar>(x: T, lo: f64, hi: f64, weight: f64) -> T {
    debug_assert!(lo <= hi);
    let v = x.value();
    if v > hi {
        let over = x - T::constant(hi);
        T::constant(weight) * over * over
    } else if v < lo {
        let under = T::constant(lo) - x;
        T::constant(weight) * under * under
    } else {
        T::zero()
    }
}

/// Quadratic above the target, tolerant `log(1 + z^2)` below it.
pub fn cost_asymmetric<T: Scalar>(x: T, desired: f64, weight: f64) -> T {
    let diff = x - T::constant(desired);
    if x.value() >= desired {
        T::constant(weight) * diff * diff
    } else {
        T::constant(weight) * (T::one() + diff * diff).ln()
    }
}

/// Longitudinal and lateral contouring errors of a pose against a
/// reference pose, in the frame aligned with the reference tangent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContouringError<T> {
    pub lon: T,
    pub lat: T,
}

/// Contouring errors, implemented exactly in the printed form:
///
/// `e_lon = -(x_ref - x) sin(psi_ref) + (y_ref - y) cos(psi_ref)`
/// `e_lat =  (x_ref - x) cos(psi_ref) + (y_ref - y) sin(psi_ref)`
///
/// Note the naming is transposed relative to the usual contouring-control
/// convention (`e_lon` here measures the lateral offset and vice versa);
/// downstream code bounds and weighs both, so the labels are kept as is.
pub fn mpcc_errors<T: Scalar>(
    x: T,
    y: T,
    x_ref: T,
    y_ref: T,
    sin_ref: T,
    cos_ref: T,
) -> ContouringError<T> {
    let dx = x_ref - x;
    let dy = y_ref - y;
    ContouringError {
        lon: -dx * sin_ref + dy * cos_ref,
        lat: dx * cos_ref + dy * sin_ref,
    }
}

/// One scene object's contribution to the collision cost at one step, the
/// product-of-erf bell over longitudinal and lateral separation.
///
/// `lambda_lon` / `lambda_lat` are the object's position variances
/// projected on the reference tangent and normal; they are floored at
/// 1e-6 m^2 to stay differentiable.
pub fn collision_term<T: Scalar>(
    ego_s: T,
    ego_d: T,
    obj_s: f64,
    obj_d: f64,
    lambda_lon: f64,
    lambda_lat: f64,
) -> T {
    let lam_lon = lambda_lon.max(1e-6);
    let lam_lat = lambda_lat.max(1e-6);
    let zs = (ego_s - T::constant(obj_s)) * T::constant(1.0 / (2.0 * lam_lon).sqrt());
    let zd = (ego_d - T::constant(obj_d)) * T::constant(1.0 / (2.0 * lam_lat).sqrt());
    (T::one() + zs.erf()) * (T::one() + zd.erf())
}

/// Per-object constants for the collision cost: predicted Frenet positions
/// over the horizon and projected variances.
#[derive(Clone, Debug)]
pub struct CollisionObject {
    /// Predicted (s, d) per step 0..=n on the ego reference.
    pub frenet_per_step: Vec<(f64, f64)>,
    pub lambda_lon: Vec<f64>,
    pub lambda_lat: Vec<f64>,
}

/// Weights and bounds for all cost terms. Serialized directly from the
/// scenario file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    /// Asymmetric speed-tracking weight.
    pub w_drive: f64,
    /// Quadratic weight on longitudinal acceleration.
    pub w_accel_value: f64,
    pub w_accel_range: f64,
    pub accel_lo_mps2: f64,
    pub accel_hi_mps2: f64,
    pub w_lat_accel_value: f64,
    pub w_lat_accel_range: f64,
    /// Quadratic steering regularization; keeps the steering channel
    /// well-posed at standstill where lateral acceleration vanishes.
    pub w_steer_value: f64,
    pub lat_accel_lo_mps2: f64,
    pub lat_accel_hi_mps2: f64,
    pub w_jerk_value: f64,
    pub w_jerk_range: f64,
    pub jerk_lo_mps3: f64,
    pub jerk_hi_mps3: f64,
    pub w_collision: f64,
    /// Contouring-error weights (printed naming; `e_lon` is the lateral-
    /// offset-like term).
    pub w_contour_lon: f64,
    pub w_contour_lat: f64,
    pub w_path_speed: f64,
    /// Hard bounds applied by the contouring constraints.
    pub contour_lon_bound_m: f64,
    pub contour_lat_bound_m: f64,
    pub steer_bound_rad: f64,
    /// Physical actuator limits (hard constraints); the comfort ranges
    /// above are soft costs inside these.
    pub hard_accel_lo_mps2: f64,
    pub hard_accel_hi_mps2: f64,
    pub hard_lat_accel_mps2: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            w_drive: 0.6,
            w_accel_value: 0.4,
            w_accel_range: 8.0,
            accel_lo_mps2: -3.0,
            accel_hi_mps2: 2.0,
            w_lat_accel_value: 0.25,
            w_lat_accel_range: 8.0,
            w_steer_value: 0.05,
            lat_accel_lo_mps2: -2.5,
            lat_accel_hi_mps2: 2.5,
            w_jerk_value: 0.08,
            w_jerk_range: 2.0,
            jerk_lo_mps3: -2.5,
            jerk_hi_mps3: 2.5,
            w_collision: 1.5,
            w_contour_lon: 4.0,
            w_contour_lat: 0.6,
            w_path_speed: 0.3,
            contour_lon_bound_m: 2.5,
            contour_lat_bound_m: 4.0,
            steer_bound_rad: 0.55,
            hard_accel_lo_mps2: -8.0,
            hard_accel_hi_mps2: 3.0,
            hard_lat_accel_mps2: 4.0,
        }
    }
}

/// Everything a single maneuver's cost needs, laid out per step. The
/// planner assembles this from a parameter-vector view; tests may fill it
/// directly.
#[derive(Clone, Debug, Default)]
pub struct TrajectoryTerms<T> {
    /// Speeds v_0..v_n.
    pub speeds: Vec<T>,
    /// Longitudinal acceleration actions u_0..u_{n-1}.
    pub accels: Vec<T>,
    /// Lateral accelerations per action step.
    pub lat_accels: Vec<T>,
    /// Contouring errors per step 0..=n.
    pub contour: Vec<ContouringError<T>>,
    /// Path-speed actions sdot_0..sdot_{n-1}.
    pub path_speeds: Vec<T>,
    /// Ego Frenet (s, d) per step, for the collision cost.
    pub frenet: Vec<(T, T)>,
}

/// Desired speed: 90% of the speed limit.
pub fn desired_speed(speed_limit: f64) -> f64 {
    0.9 * speed_limit
}

/// Speed-tracking cost: asymmetric loss summed over the horizon.
pub fn cost_drive<T: Scalar>(speeds: &[T], v_des: f64, w: f64) -> T {
    let mut total = T::zero();
    for &v in speeds {
        total += cost_asymmetric(v, v_des, w);
    }
    total
}

/// Comfort cost: value + range terms on longitudinal acceleration, lateral
/// acceleration and jerk. Jerk is the finite difference of consecutive
/// acceleration actions.
pub fn cost_comfort<T: Scalar>(
    accels: &[T],
    lat_accels: &[T],
    dt: f64,
    w: &CostWeights,
) -> T {
    let mut total = T::zero();
    for &a in accels {
        total += cost_value(a, 0.0, w.w_accel_value);
        total += cost_range(a, w.accel_lo_mps2, w.accel_hi_mps2, w.w_accel_range);
    }
    for &al in lat_accels {
        total += cost_value(al, 0.0, w.w_lat_accel_value);
        total += cost_range(al, w.lat_accel_lo_mps2, w.lat_accel_hi_mps2, w.w_lat_accel_range);
    }
    let inv_dt = T::constant(1.0 / dt);
    for pair in accels.windows(2) {
        let jerk = (pair[1] - pair[0]) * inv_dt;
        total += cost_value(jerk, 0.0, w.w_jerk_value);
        total += cost_range(jerk, w.jerk_lo_mps3, w.jerk_hi_mps3, w.w_jerk_range);
    }
    total
}

/// Collision cost over all steps and objects.
pub fn cost_collision<T: Scalar>(
    frenet: &[(T, T)],
    objects: &[CollisionObject],
    w_coll: f64,
) -> T {
    let mut total = T::zero();
    for obj in objects {
        for (i, &(s, d)) in frenet.iter().enumerate() {
            let idx = i.min(obj.frenet_per_step.len() - 1);
            let (os, od) = obj.frenet_per_step[idx];
            total += collision_term(s, d, os, od, obj.lambda_lon[idx], obj.lambda_lat[idx]);
        }
    }
    T::constant(w_coll) * total
}

/// Contouring cost: value terms on both printed errors plus the path-speed
/// tracking term (its target is the desired travel speed).
pub fn cost_mpcc<T: Scalar>(
    contour: &[ContouringError<T>],
    path_speeds: &[T],
    v_des: f64,
    w: &CostWeights,
) -> T {
    let mut total = T::zero();
    for e in contour {
        total += cost_value(e.lon, 0.0, w.w_contour_lon);
        total += cost_value(e.lat, 0.0, w.w_contour_lat);
    }
    for &sd in path_speeds {
        total += cost_value(sd, v_des, w.w_path_speed);
    }
    total
}

/// Total single-maneuver cost: drive + comfort + collision + contouring.
pub fn cost_total<T: Scalar>(
    terms: &TrajectoryTerms<T>,
    objects: &[CollisionObject],
    v_des: f64,
    dt: f64,
    w: &CostWeights,
) -> T {
    cost_drive(&terms.speeds, v_des, w.w_drive)
        + cost_comfort(&terms.accels, &terms.lat_accels, dt, w)
        + cost_collision(&terms.frenet, objects, w.w_collision)
        + cost_mpcc(&terms.contour, &terms.path_speeds, v_des, w)
}
