//! Scripted world state: object motion, occlusion geometry, phantom
//! resolution, and noisy ego measurements.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::SimError;
use crate::geometry::{Centerline, FrenetPose};
use crate::sim::scenario::{ManeuverSpec, ObjectSpec, Scenario};
use crate::uncertainty::{Gaussian2D, GaussianScalar, RiskLevel};
use crate::vehicle::VehicleState;

/// Snapshot of one traffic participant as the planner sees it.
#[derive(Clone, Debug)]
pub struct SceneObject {
    pub id: String,
    pub pose: Gaussian2D,
    pub speed: GaussianScalar,
    pub heading: f64,
    pub existence: f64,
    pub route: String,
    pub route_probability: f64,
    /// Arc length along its own route.
    pub s_on_route: f64,
    /// Projection onto the ego route, when within the corridor.
    pub s_on_ego: Option<f64>,
    pub d_on_ego: Option<f64>,
    pub length_m: f64,
    pub width_m: f64,
    pub brake_decel: f64,
    pub group: Option<String>,
    pub exists_in_truth: bool,
    /// Remaining distance to the merge point along its own route.
    pub dist_to_merge: Option<f64>,
}

/// Everything the planner consumes for one cycle.
#[derive(Clone, Debug)]
pub struct Scene {
    pub t: f64,
    /// Noisy ego measurement.
    pub measured: VehicleState,
    pub measured_frenet: FrenetPose,
    pub sigma_s2: f64,
    pub sigma_v2: f64,
    pub objects: Vec<SceneObject>,
    /// Visible free distance ahead along the ego route.
    pub s_vis_own: f64,
    /// Visible length of the crossing route before its merge point.
    pub s_vis_cross: Option<f64>,
    /// Merge point on the ego route (absolute arc length).
    pub s_merge: Option<f64>,
    pub ego_must_yield: bool,
    pub s_min: f64,
    pub alpha: RiskLevel,
    pub speed_limit: f64,
    pub crossing_speed_limit: f64,
}

struct ObjectState {
    spec: ObjectSpec,
    s: f64,
    speed: f64,
}

impl ObjectState {
    fn accel_at(&self, t: f64) -> f64 {
        let mut a = 0.0;
        for phase in &self.spec.accel_profile {
            if t >= phase.t_s {
                a = phase.accel_mps2;
            }
        }
        a
    }

    fn advance(&mut self, t: f64, dt: f64) {
        let a = self.accel_at(t);
        let v0 = self.speed;
        let v1 = (v0 + a * dt).max(0.0);
        // Exact distance under the clamped constant-acceleration step.
        let ds = if a.abs() < 1e-12 || (v1 - (v0 + a * dt)).abs() < 1e-12 {
            v0 * dt + 0.5 * a * dt * dt
        } else {
            // Stopped partway through the step.
            let t_stop = v0 / (-a);
            v0 * t_stop + 0.5 * a * t_stop * t_stop
        };
        self.s += ds.max(0.0);
        self.speed = v1;
    }

    fn existence_at(&self, t: f64) -> f64 {
        match (self.spec.resolve_time_s, self.spec.resolved_existence) {
            (Some(tr), Some(e)) if t >= tr => e,
            _ => self.spec.existence,
        }
    }
}

/// The scripted world: true ego state, object states, geometry.
pub struct World {
    pub scenario: Scenario,
    pub routes: BTreeMap<String, Arc<Centerline>>,
    pub ego_true: VehicleState,
    t: f64,
    objects: Vec<ObjectState>,
    rng: ChaCha8Rng,
}

impl World {
    pub fn new(scenario: Scenario, rng: ChaCha8Rng) -> Result<Self, SimError> {
        let mut routes = BTreeMap::new();
        for c in &scenario.centerlines {
            let pts: Vec<(f64, f64)> = c.points_xy_m.iter().map(|p| (p[0], p[1])).collect();
            routes.insert(
                c.id.clone(),
                Arc::new(Centerline::from_waypoints(&pts)?),
            );
        }
        let ego_route = routes[&scenario.ego.route].clone();
        let (x, y) = ego_route.frenet_to_cartesian(FrenetPose {
            s: scenario.ego.start_s_m,
            d: scenario.ego.start_d_m,
        })?;
        let heading = ego_route.reference_at(scenario.ego.start_s_m).heading;
        let ego_true = VehicleState {
            x,
            y,
            heading,
            speed: scenario.ego.start_speed_mps,
        };
        let objects = scenario
            .objects
            .iter()
            .map(|spec| ObjectState {
                s: spec.start_s_m,
                speed: spec.speed_mps,
                spec: spec.clone(),
            })
            .collect();
        Ok(World {
            scenario,
            routes,
            ego_true,
            t: 0.0,
            objects,
            rng,
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn ego_route(&self) -> &Arc<Centerline> {
        &self.routes[&self.scenario.ego.route]
    }

    /// Advance every scripted object by one sample interval.
    pub fn advance_objects(&mut self, dt: f64) {
        let t = self.t;
        for o in &mut self.objects {
            o.advance(t, dt);
        }
        self.t += dt;
    }

    /// Set the true ego state (the harness integrates the executed
    /// controls).
    pub fn set_ego_true(&mut self, state: VehicleState) {
        self.ego_true = state;
    }

    fn gauss(&mut self) -> f64 {
        let u1: f64 = self.rng.gen_range(1e-12..1.0f64);
        let u2: f64 = self.rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Produce the scene for the current instant: advance detections,
    /// compute visibility, and sample the ego measurement.
    pub fn sense(&mut self) -> Result<Scene, SimError> {
        let (g1, g2, g3) = (self.gauss(), self.gauss(), self.gauss());
        let sc = &self.scenario;
        let ego_route = self.routes[&sc.ego.route].clone();

        let noise_x = g1 * sc.ego.sigma_pos_m;
        let noise_y = g2 * sc.ego.sigma_pos_m;
        let noise_v = g3 * sc.ego.sigma_speed_mps;
        let measured = VehicleState {
            x: self.ego_true.x + noise_x,
            y: self.ego_true.y + noise_y,
            heading: self.ego_true.heading,
            speed: (self.ego_true.speed + noise_v).max(0.0),
        };
        let measured_frenet = ego_route
            .cartesian_to_frenet_within(measured.x, measured.y, sc.corridor_half_width_m)
            .map_err(|e| SimError::ScenarioDiverged {
                t: self.t,
                source: e,
            })?;

        let mut objects = Vec::new();
        for o in &self.objects {
            let route = &self.routes[&o.spec.route];
            let s_clamped = o.s.clamp(0.0, route.length());
            let (ox, oy) = route.frenet_to_cartesian(FrenetPose {
                s: s_clamped,
                d: o.spec.offset_d_m,
            })?;
            let heading = route.reference_at(s_clamped).heading;
            let var = o.spec.sigma_pos_m * o.spec.sigma_pos_m;
            let (s_on_ego, d_on_ego) = if o.spec.route == sc.ego.route {
                (Some(o.s), Some(o.spec.offset_d_m))
            } else {
                match ego_route.cartesian_to_frenet_within(ox, oy, sc.corridor_half_width_m) {
                    Ok(p) => (Some(p.s), Some(p.d)),
                    Err(_) => (None, None),
                }
            };
            let dist_to_merge = sc.intersection.as_ref().and_then(|i| {
                if Some(o.spec.route.as_str()) == i.crossing_route.as_deref() {
                    i.crossing_merge_s_m.map(|ms| ms - o.s)
                } else if o.spec.route == sc.ego.route {
                    Some(i.merge_point_s_m - o.s)
                } else {
                    None
                }
            });
            objects.push(SceneObject {
                id: o.spec.id.clone(),
                pose: Gaussian2D::isotropic((ox, oy), var),
                speed: GaussianScalar::new(
                    o.speed,
                    o.spec.sigma_speed_mps * o.spec.sigma_speed_mps,
                ),
                heading,
                existence: o.existence_at(self.t),
                route: o.spec.route.clone(),
                route_probability: o.spec.route_probability,
                s_on_route: o.s,
                s_on_ego,
                d_on_ego,
                length_m: o.spec.length_m,
                width_m: o.spec.width_m,
                brake_decel: o.spec.brake_decel_mps2,
                group: o.spec.group.clone(),
                exists_in_truth: o.spec.exists_in_truth,
                dist_to_merge,
            });
        }

        // Visibility along the own route: sensor range (the ego route
        // itself is assumed unoccluded; the crossing route is what the
        // corner blocks).
        let s_vis_own = sc.sensor_range_m;
        // The intersection only enters the scene once the merge point is
        // within sensor range; shorter ranges discover it later.
        let (s_vis_cross, s_merge, ego_must_yield) = match &sc.intersection {
            Some(i) if i.merge_point_s_m - measured_frenet.s <= sc.sensor_range_m => {
                let x_to_merge = i.merge_point_s_m - measured_frenet.s;
                let a = i.occlusion_setback_ego_m;
                let b = i.occlusion_setback_cross_m;
                // Sight triangle past the occluding corner: the visible
                // stretch of the crossing road before its merge point.
                let geometric = if x_to_merge <= a {
                    f64::INFINITY
                } else {
                    b * x_to_merge / (x_to_merge - a)
                };
                (
                    Some(geometric),
                    Some(i.merge_point_s_m),
                    i.ego_must_yield,
                )
            }
            _ => (None, None, false),
        };

        Ok(Scene {
            t: self.t,
            measured,
            measured_frenet,
            sigma_s2: sc.ego.sigma_pos_m * sc.ego.sigma_pos_m,
            sigma_v2: sc.ego.sigma_speed_mps * sc.ego.sigma_speed_mps,
            objects,
            s_vis_own,
            s_vis_cross,
            s_merge,
            ego_must_yield,
            s_min: sc.s_min_m,
            alpha: RiskLevel::new(sc.risk_alpha).expect("validated"),
            speed_limit: sc.speed_limit_mps,
            crossing_speed_limit: sc
                .intersection
                .as_ref()
                .and_then(|i| i.crossing_speed_limit_mps)
                .unwrap_or(sc.speed_limit_mps),
        })
    }

    /// Truly existing objects with their footprints, for collision
    /// auditing.
    pub fn real_object_footprints(&self) -> Result<Vec<(VehicleState, f64, f64)>, SimError> {
        let mut out = Vec::new();
        for o in &self.objects {
            if !o.spec.exists_in_truth {
                continue;
            }
            let route = &self.routes[&o.spec.route];
            let s_clamped = o.s.clamp(0.0, route.length());
            let (x, y) = route.frenet_to_cartesian(FrenetPose {
                s: s_clamped,
                d: o.spec.offset_d_m,
            })?;
            let heading = route.reference_at(s_clamped).heading;
            out.push((
                VehicleState {
                    x,
                    y,
                    heading,
                    speed: o.speed,
                },
                o.spec.length_m,
                o.spec.width_m,
            ));
        }
        Ok(out)
    }

    pub fn maneuvers(&self) -> &ManeuverSpec {
        &self.scenario.maneuvers
    }
}
