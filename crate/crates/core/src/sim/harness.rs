//! Receding-horizon closed loop: sense, weigh maneuvers, assemble the
//! program, solve, execute the pinned block, shift. On solver failure the
//! previously verified full-braking fallback takes over until a later
//! solve recovers.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::costs::CollisionObject;
use crate::error::SimError;
use crate::geometry::Centerline;
use crate::nlp::{
    shift_warm_start, EllipseObstacle, FallbackNoise, HardConstraintScene, Layout, ManeuverId,
    ModelKind, ParameterVector, PlannerConfig, PlannerNlp,
};
use crate::nlp::layout::slot;
use crate::sim::scenario::{ManeuverSpec, Scenario};
use crate::sim::trace::{CycleRecord, Metrics, SimTrace, TraceStep};
use crate::sim::world::{Scene, SceneObject, World};
use crate::solver::ipm::{SolveResult, SolveStatus};
use crate::uncertainty::{
    braking_distance, inverse_quantile, project_variance, required_distance, stop_distance,
    GaussianScalar,
};
use crate::vehicle::{step_state, ControlInput, Integrator, VehicleModel, VehicleState};

/// Objects closer laterally than this to the ego path count as on-route.
const ON_ROUTE_LATERAL_M: f64 = 1.75;

/// Existence below this threshold drops an object from consideration.
const EXISTENCE_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlannerKind {
    /// Blended two-maneuver optimization with preference weights.
    DecisionTheoretic,
    /// Argmax-weight single-maneuver baseline.
    Conventional,
}

impl PlannerKind {
    pub fn label(self) -> &'static str {
        match self {
            PlannerKind::DecisionTheoretic => "dt",
            PlannerKind::Conventional => "conventional",
        }
    }
}

/// Which maneuver contents enter the program.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchSelection {
    Blended,
    OnlyA,
    OnlyB,
}

/// Full-braking stop-position distribution from a planned state, feeding
/// the fallback chance constraints.
pub fn build_zplan(
    s: GaussianScalar,
    v: GaussianScalar,
    a_brake: GaussianScalar,
) -> Result<GaussianScalar, crate::error::UncertaintyError> {
    stop_distance(s, v, a_brake)
}

/// Maneuver preference weights from the scene: the probability of the
/// cautious option A and its complement.
pub fn assign_weights(scene: &Scene, maneuvers: &ManeuverSpec) -> Result<(f64, f64), SimError> {
    match maneuvers {
        ManeuverSpec::Single => Err(SimError::NoManeuverPair),
        ManeuverSpec::Phantom { object } => {
            let p = scene
                .objects
                .iter()
                .find(|o| &o.id == object)
                .map_or(0.0, |o| o.existence);
            Ok((p, 1.0 - p))
        }
        ManeuverSpec::Groups { group_a, .. } => {
            let p = scene
                .objects
                .iter()
                .find(|o| group_a.contains(&o.id))
                .map_or(0.5, |o| o.existence);
            Ok((p, 1.0 - p))
        }
        ManeuverSpec::Crossing { object } => {
            let p = crossing_probability(scene, object);
            Ok((p, 1.0 - p))
        }
    }
}

/// Probability that an oncoming vehicle crosses instead of yielding,
/// inferred from whether its remaining distance suffices for a
/// comfortable deceleration: a smooth logistic of
/// `required - available`, 0.5 at equality.
pub fn crossing_probability(scene: &Scene, object_id: &str) -> f64 {
    let Some(obj) = scene.objects.iter().find(|o| o.id == object_id) else {
        return 0.0;
    };
    let Some(available) = obj.dist_to_merge else {
        return 0.0;
    };
    if available <= 0.0 {
        // Already in or past the merge region.
        return 1.0;
    }
    let v_ego = scene.measured.speed;
    let vk = obj.speed.mean;
    let a_cft = -2.5;
    let t_hw = 2.0;
    let required = match required_distance(v_ego, vk, a_cft, t_hw) {
        Ok(r) => r,
        // Slower than the ego vehicle: clearly yielding.
        Err(_) => return 0.0,
    };
    let scale = (0.2 * required).max(0.5);
    1.0 / (1.0 + (-(required - available) / scale).exp())
}

fn on_ego_route(o: &SceneObject) -> Option<(f64, f64)> {
    match (o.s_on_ego, o.d_on_ego) {
        (Some(s), Some(d)) if d.abs() <= ON_ROUTE_LATERAL_M => Some((s, d)),
        _ => None,
    }
}

/// Nearest relevant participant ahead on the ego route.
fn leader<'s>(scene: &'s Scene) -> Option<&'s SceneObject> {
    scene
        .objects
        .iter()
        .filter(|o| o.existence > EXISTENCE_EPS)
        .filter_map(|o| on_ego_route(o).map(|(s, _)| (o, s)))
        .filter(|(_, s)| *s > scene.measured_frenet.s)
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(o, _)| o)
}

/// Predicted collision-cost table of one object on the ego route. The
/// projected measurement variances are widened by the prediction spread
/// (speed noise growing with lookahead) and by the footprints, so the
/// risk bell acts at vehicle scale rather than sensor scale.
fn collision_object(
    obj: &SceneObject,
    route: &Centerline,
    ego: &crate::vehicle::VehicleParams,
    steps: usize,
    dt: f64,
) -> Option<CollisionObject> {
    let (s0, d) = on_ego_route(obj)?;
    let len_spread = (obj.length_m + ego.length_m) / 4.0;
    let wid_spread = (obj.width_m + ego.width_m) / 4.0;
    let mut frenet = Vec::with_capacity(steps + 1);
    let mut lam_lon = Vec::with_capacity(steps + 1);
    let mut lam_lat = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let lookahead = i as f64 * dt;
        let s = s0 + obj.speed.mean * lookahead;
        let r = route.reference_at(s);
        let tangent = (r.heading.cos(), r.heading.sin());
        let normal = (-tangent.1, tangent.0);
        let growth = obj.speed.variance * lookahead * lookahead;
        frenet.push((s, d));
        lam_lon.push(
            project_variance(obj.pose.cov, tangent).unwrap_or(0.25)
                + growth
                + len_spread * len_spread,
        );
        lam_lat.push(
            project_variance(obj.pose.cov, normal).unwrap_or(0.25) + wid_spread * wid_spread,
        );
    }
    Some(CollisionObject {
        frenet_per_step: frenet,
        lambda_lon: lam_lon,
        lambda_lat: lam_lat,
    })
}

/// A stationary virtual obstacle at the merge point: the cost-level
/// stand-in for "stop before the intersection", used for the cautious
/// crossing branch and for active yield obligations.
fn merge_point_object(s_merge: f64, spread: f64, steps: usize) -> CollisionObject {
    CollisionObject {
        frenet_per_step: vec![(s_merge, 0.0); steps + 1],
        lambda_lon: vec![spread.max(1.0); steps + 1],
        lambda_lat: vec![1.0; steps + 1],
    }
}

/// Merge-point bound when the yield indicator is active: at a yield
/// intersection it fires while the visible stretch of the crossing road
/// is shorter than the distance an oncoming vehicle would need; with
/// right-of-way it fires while an oncoming vehicle looks unlikely to
/// yield.
pub fn yield_bound(scenario: &Scenario, scene: &Scene) -> Option<f64> {
    let s_merge = scene.s_merge?;
    if s_merge <= scene.measured_frenet.s {
        return None;
    }
    if scene.ego_must_yield {
        let s_req = required_distance(
            scene.measured.speed.min(scene.crossing_speed_limit),
            scene.crossing_speed_limit,
            scenario.ego.comfort_decel_mps2,
            scenario.ego.time_headway_s,
        )
        .unwrap_or(0.0);
        let visible = scene.s_vis_cross.unwrap_or(f64::INFINITY);
        (visible < s_req).then_some(s_merge)
    } else if let ManeuverSpec::Crossing { object } = &scenario.maneuvers {
        (crossing_probability(scene, object) > 0.5).then_some(s_merge)
    } else {
        None
    }
}

/// Soft-cost object sets per maneuver branch. An active yield obligation
/// adds the merge-point obstacle to every branch.
pub fn branch_objects(
    scene: &Scene,
    maneuvers: &ManeuverSpec,
    route: &Centerline,
    ego: &crate::vehicle::VehicleParams,
    steps: usize,
    dt: f64,
    yield_merge: Option<f64>,
) -> Vec<Vec<CollisionObject>> {
    let live = |o: &&SceneObject| o.existence > EXISTENCE_EPS;
    let mut a: Vec<CollisionObject> = Vec::new();
    let mut b: Vec<CollisionObject> = Vec::new();
    match maneuvers {
        ManeuverSpec::Single => {
            for o in scene.objects.iter().filter(live) {
                if let Some(c) = collision_object(o, route, ego, steps, dt) {
                    a.push(c);
                }
            }
        }
        ManeuverSpec::Phantom { object } => {
            for o in scene.objects.iter().filter(live) {
                if let Some(c) = collision_object(o, route, ego, steps, dt) {
                    if &o.id == object {
                        a.push(c);
                    } else {
                        a.push(c.clone());
                        b.push(c);
                    }
                }
            }
        }
        ManeuverSpec::Groups { group_a, group_b } => {
            for o in scene.objects.iter().filter(live) {
                if let Some(c) = collision_object(o, route, ego, steps, dt) {
                    if group_a.contains(&o.id) {
                        a.push(c);
                    } else if group_b.contains(&o.id) {
                        b.push(c);
                    } else {
                        a.push(c.clone());
                        b.push(c);
                    }
                }
            }
        }
        ManeuverSpec::Crossing { object } => {
            for o in scene.objects.iter().filter(live) {
                if &o.id == object {
                    if let Some(s_merge) = scene.s_merge {
                        let spread = o.pose.cov[0][0] + 4.0;
                        a.push(merge_point_object(s_merge, spread, steps));
                    }
                } else if let Some(c) = collision_object(o, route, ego, steps, dt) {
                    a.push(c.clone());
                    b.push(c);
                }
            }
        }
    }
    if let Some(s_merge) = yield_merge {
        if scene.ego_must_yield {
            let obstacle = merge_point_object(s_merge, 9.0, steps);
            a.push(obstacle.clone());
            b.push(obstacle);
        }
    }
    vec![a, b]
}

/// Hard-constraint scene for the irreversible window: obstacle ellipses
/// per step plus the active fallback chance bounds.
pub fn hard_scene(
    scenario: &Scenario,
    scene: &Scene,
    route: &Centerline,
    window: usize,
    merge_limit: Option<f64>,
) -> HardConstraintScene {
    let dt = scenario.dt_s;
    let q = inverse_quantile(1.0 - scenario.risk_alpha).expect("alpha validated");
    // Chi-squared (2 dof) quantile at the ellipse confidence.
    let chi2 = -2.0 * scenario.ellipse_alpha.ln();
    let noise = FallbackNoise {
        sigma_s2: scene.sigma_s2,
        sigma_v2: scene.sigma_v2,
        brake_decel: scenario.ego.brake_decel_mps2,
        sigma_brake2: scenario.ego.sigma_brake_mps2 * scenario.ego.sigma_brake_mps2,
    };

    let mut ellipses_per_step: Vec<Vec<EllipseObstacle>> = vec![Vec::new(); window + 1];
    for o in scene.objects.iter().filter(|o| o.existence > EXISTENCE_EPS) {
        let body = (o.heading.cos(), o.heading.sin());
        let normal = (-body.1, body.0);
        let sigma_lon = project_variance(o.pose.cov, body).unwrap_or(0.25).sqrt();
        let sigma_lat = project_variance(o.pose.cov, normal).unwrap_or(0.25).sqrt();
        for (i, per_step) in ellipses_per_step.iter_mut().enumerate() {
            let advance = o.speed.mean * i as f64 * dt;
            per_step.push(EllipseObstacle {
                center: (
                    o.pose.mean.0 + advance * body.0,
                    o.pose.mean.1 + advance * body.1,
                ),
                semi_major: chi2.sqrt() * sigma_lon + 0.5 * o.length_m,
                semi_minor: chi2.sqrt() * sigma_lat + 0.5 * o.width_m,
                cos_rot: body.0,
                sin_rot: body.1,
            });
        }
    }

    let lead = leader(scene);
    let visibility_limit = if lead.is_none() {
        Some(scene.measured_frenet.s + scene.s_vis_own)
    } else {
        None
    };
    let leader_stop = lead.map(|o| {
        let (s_on_ego, _) = on_ego_route(o).expect("leader is on route");
        let tangent = {
            let r = route.reference_at(s_on_ego);
            (r.heading.cos(), r.heading.sin())
        };
        let pos_var = project_variance(o.pose.cov, tangent).unwrap_or(0.25);
        let brake = braking_distance(o.speed, GaussianScalar::exact(o.brake_decel))
            .expect("object braking parameters are positive");
        GaussianScalar::new(s_on_ego + brake.mean, pos_var + brake.variance)
    });

    HardConstraintScene {
        ellipses_per_step,
        visibility_limit,
        leader_stop,
        merge_limit,
        s_min: scene.s_min,
        quantile_factor: q,
        noise,
    }
}

fn planner_config(scenario: &Scenario) -> PlannerConfig {
    PlannerConfig {
        dt: scenario.dt_s,
        desired_speed: crate::costs::desired_speed(scenario.speed_limit_mps),
        speed_cap: 1.2 * scenario.speed_limit_mps,
        weights: scenario.weights,
        params: scenario.ego.params,
        integrator: scenario.ego.integrator,
        model: scenario.ego.model,
        clearance_m: 0.1,
    }
}

/// The model that advances the true vehicle: the planner's, except that
/// the linearized planning model runs on the full kinematic one.
fn true_model(kind: ModelKind) -> VehicleModel {
    match kind {
        ModelKind::PointMass => VehicleModel::PointMass,
        ModelKind::Kinematic | ModelKind::LinearKinematic => VehicleModel::Kinematic,
        ModelKind::DynamicLinearTire => VehicleModel::DynamicLinearTire { blend_low_speed: true },
    }
}

/// Build the cycle's program for a given branch selection.
pub fn build_nlp(
    scenario: &Scenario,
    scene: &Scene,
    route: &Arc<Centerline>,
    base: ParameterVector,
    weights: (f64, f64),
    selection: BranchSelection,
) -> Result<PlannerNlp, SimError> {
    let n = scenario.horizon_steps();
    let window = 2 * scenario.pin_count();
    let merge_limit = yield_bound(scenario, scene);
    let branches = branch_objects(
        scene,
        &scenario.maneuvers,
        route,
        &scenario.ego.params,
        n,
        scenario.dt_s,
        merge_limit,
    );
    let hard = hard_scene(scenario, scene, route, window, merge_limit);
    let (objects, w) = match selection {
        BranchSelection::Blended => (branches, weights),
        BranchSelection::OnlyA => (vec![branches[0].clone()], (1.0, 0.0)),
        BranchSelection::OnlyB => (vec![branches[1].clone()], (1.0, 0.0)),
    };
    Ok(PlannerNlp::new(
        planner_config(scenario),
        route.clone(),
        base,
        objects,
        hard,
        w.0,
        w.1,
    )?)
}

/// Oriented-rectangle overlap by the separating-axis test.
pub fn footprints_overlap(
    a: (VehicleState, f64, f64),
    b: (VehicleState, f64, f64),
) -> bool {
    let corners = |(st, len, wid): &(VehicleState, f64, f64)| -> Vec<(f64, f64)> {
        let (c, s) = (st.heading.cos(), st.heading.sin());
        [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)]
            .iter()
            .map(|(sx, sy)| {
                let lx = sx * len / 2.0;
                let ly = sy * wid / 2.0;
                (st.x + c * lx - s * ly, st.y + s * lx + c * ly)
            })
            .collect()
    };
    let ca = corners(&a);
    let cb = corners(&b);
    let axes = [
        (a.0.heading.cos(), a.0.heading.sin()),
        (-a.0.heading.sin(), a.0.heading.cos()),
        (b.0.heading.cos(), b.0.heading.sin()),
        (-b.0.heading.sin(), b.0.heading.cos()),
    ];
    for axis in axes {
        let project = |pts: &[(f64, f64)]| {
            let vals: Vec<f64> = pts.iter().map(|p| p.0 * axis.0 + p.1 * axis.1).collect();
            (
                vals.iter().cloned().fold(f64::INFINITY, f64::min),
                vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            )
        };
        let (min_a, max_a) = project(&ca);
        let (min_b, max_b) = project(&cb);
        if max_a < min_b || max_b < min_a {
            return false;
        }
    }
    true
}

/// One planning cycle's artifacts, for tests and studies that need to
/// look inside the loop.
pub struct CycleOutcome {
    pub cycle: usize,
    pub scene: Scene,
    pub warm: ParameterVector,
    pub nlp: PlannerNlp,
    pub solved: Option<ParameterVector>,
    pub result: Option<SolveResult>,
    pub weights: (f64, f64),
    pub zplan_active: bool,
}

/// Receding-horizon simulation state.
pub struct Simulation {
    pub world: World,
    planner: PlannerKind,
    layout: Layout,
    pv: ParameterVector,
    zplan_mode: bool,
    cycle: usize,
    prev_accel: f64,
    steps_done: usize,
    trace: SimTrace,
    seed: u64,
}

impl Simulation {
    pub fn new(scenario: Scenario, planner: PlannerKind, seed: u64) -> Result<Self, SimError> {
        scenario.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let mut world = World::new(scenario, rng)?;
        let sc = world.scenario.clone();
        let n = sc.horizon_steps();
        let k = sc.pin_count();
        let maneuvers = match (&sc.maneuvers, planner) {
            (ManeuverSpec::Single, _) => 1,
            (_, PlannerKind::Conventional) => 1,
            (_, PlannerKind::DecisionTheoretic) => 2,
        };
        let layout = Layout::new(n, k, maneuvers)?;
        // Cold start: coast from the first measurement.
        let scene0 = world.sense()?;
        let pv = ParameterVector::rollout(
            layout,
            scene0.measured,
            scene0.measured_frenet.s,
            ControlInput::ZERO,
            &true_model(sc.ego.model),
            sc.ego.integrator,
            &sc.ego.params,
            sc.dt_s,
        );
        let trace = SimTrace {
            scenario_name: sc.name.clone(),
            planner: planner.label().to_string(),
            seed,
            dt_s: sc.dt_s,
            steps: Vec::new(),
            cycles: Vec::new(),
        };
        Ok(Simulation {
            world,
            planner,
            layout,
            pv,
            zplan_mode: false,
            cycle: 0,
            prev_accel: 0.0,
            steps_done: 0,
            trace,
            seed,
        })
    }

    pub fn num_cycles(&self) -> usize {
        let sc = &self.world.scenario;
        (sc.duration_s / (sc.pin_count() as f64 * sc.dt_s)).round() as usize
    }

    /// Re-anchor the plan on the fresh measurement: index 0 takes the
    /// measured state, pinned states re-simulate from it under the pinned
    /// (committed) controls so the dynamics equalities hold exactly.
    fn reanchor(&mut self, scene: &Scene) {
        let sc = &self.world.scenario;
        let k = sc.pin_count();
        let model = true_model(sc.ego.model);
        let mut sp = self.pv.support_point(ManeuverId::A, 0);
        sp.state = scene.measured;
        sp.arc_len = scene.measured_frenet.s;
        sp.path_speed = scene.measured.speed.max(0.0);
        self.pv.set_support_point(ManeuverId::A, 0, &sp);
        for i in 0..k {
            let a = self.pv.support_point(ManeuverId::A, i);
            let next = step_state(
                sc.ego.integrator,
                &model,
                a.state,
                a.input,
                sc.dt_s,
                &sc.ego.params,
            );
            let mut b = self.pv.support_point(ManeuverId::A, i + 1);
            b.state = next;
            b.arc_len = a.arc_len + a.path_speed * sc.dt_s;
            self.pv.set_support_point(ManeuverId::A, i + 1, &b);
        }
    }

    /// Replace the whole plan with a full-braking rollout from the
    /// measurement (steering follows the surviving plan's pinned values).
    fn braking_plan(&self, scene: &Scene) -> ParameterVector {
        let sc = &self.world.scenario;
        let dt = sc.dt_s;
        let model = true_model(sc.ego.model);
        let a_brake = sc.ego.brake_decel_mps2;
        let mut pv = ParameterVector::zeros(self.layout);
        let mut state = scene.measured;
        let mut arc = scene.measured_frenet.s;
        for step in 0..=self.layout.steps {
            let steer = if step < self.layout.steps {
                self.pv.support_point(ManeuverId::A, step).input.steer
            } else {
                0.0
            };
            let accel = if state.speed > 1e-9 {
                (-a_brake).max(-state.speed / dt)
            } else {
                0.0
            };
            let sp = crate::nlp::SupportPoint {
                state,
                arc_len: arc,
                input: ControlInput { steer, accel },
                path_speed: state.speed.max(0.0),
            };
            for m in self.layout.maneuver_ids() {
                pv.set_support_point(m, step, &sp);
            }
            arc += sp.path_speed * dt;
            state = step_state(sc.ego.integrator, &model, state, sp.input, dt, &sc.ego.params);
            state.speed = state.speed.max(0.0);
        }
        pv
    }

    /// Run one full cycle: sense, plan, execute the pinned block, shift.
    pub fn step_cycle(&mut self) -> Result<CycleOutcome, SimError> {
        let sc = self.world.scenario.clone();
        let k = sc.pin_count();
        let dt = sc.dt_s;
        let route = self.world.ego_route().clone();

        let scene = self.world.sense()?;
        if self.zplan_mode {
            self.pv = self.braking_plan(&scene);
        } else {
            self.reanchor(&scene);
        }

        // Maneuver weights; scenes without a pair run single-maneuver.
        let pair = assign_weights(&scene, &sc.maneuvers);
        let (weights, selection) = match (&pair, self.planner) {
            (Ok(w), PlannerKind::DecisionTheoretic) => (*w, BranchSelection::Blended),
            (Ok(w), PlannerKind::Conventional) => {
                // Argmax preference; ties go to the cautious branch A.
                if w.0 >= w.1 {
                    ((w.0, w.1), BranchSelection::OnlyA)
                } else {
                    ((w.0, w.1), BranchSelection::OnlyB)
                }
            }
            (Err(_), _) => ((1.0, 0.0), BranchSelection::OnlyA),
        };

        let nlp = build_nlp(&sc, &scene, &route, self.pv.clone(), weights, selection)?;

        // Pre-solve verification of the committed (pinned) part of the
        // irreversible window under the fresh scene.
        // Gross violations of the committed window trigger the fallback;
        // noise-scale transgressions are left to the solve (the risk
        // budget of the chance constraints covers them).
        let mut pinned_ok = true;
        for step in 0..=k {
            let chn = nlp.chance_residuals_at(&self.pv, step);
            let crc = nlp.circle_residuals_at(&self.pv, step);
            if chn.iter().chain(crc.iter()).any(|r| *r > 0.3) {
                pinned_ok = false;
            }
        }

        let mut solved = None;
        let mut result = None;
        if pinned_ok {
            match nlp.solve(&sc.solver) {
                Ok((pv_new, res)) => {
                    // A plan is executable when the solve succeeded, or
                    // when it ran out of budget close to optimality with
                    // every constraint satisfied.
                    let feasible_enough = res.status == SolveStatus::AcceptablyFeasible
                        && res.max_violation <= 10.0 * sc.solver.kkt_tol;
                    if res.status.is_success() || feasible_enough {
                        self.pv = pv_new.clone();
                        solved = Some(pv_new);
                        self.zplan_mode = false;
                    } else {
                        self.zplan_mode = true;
                        self.pv = self.braking_plan(&scene);
                    }
                    result = Some(res);
                }
                Err(_) => {
                    self.zplan_mode = true;
                    self.pv = self.braking_plan(&scene);
                }
            }
        } else {
            self.zplan_mode = true;
            self.pv = self.braking_plan(&scene);
        }

        // Shared-window safety flag of the executed plan.
        let window = 2 * k;
        let shared_window_safe = (k + 1..=window).all(|step| {
            nlp.chance_residuals_at(&self.pv, step)
                .iter()
                .chain(nlp.circle_residuals_at(&self.pv, step).iter())
                .all(|r| *r <= 1e-6)
        });

        self.trace.cycles.push(CycleRecord {
            cycle: self.cycle,
            t_s: scene.t,
            status: result
                .as_ref()
                .map_or("zplan".to_string(), |r| format!("{:?}", r.status)),
            iterations: result.as_ref().map_or(0, |r| r.iterations),
            objective: result.as_ref().map_or(0.0, |r| r.objective),
            kkt_error: result.as_ref().map_or(0.0, |r| r.kkt_error),
            max_violation: result.as_ref().map_or(0.0, |r| r.max_violation),
            weight_a: weights.0,
            weight_b: weights.1,
            maneuvers: self.layout.maneuvers,
            wall_time_s: result.as_ref().map_or(0.0, |r| r.wall_time_s),
            shared_window_safe,
        });

        // Execute the pinned block on the true vehicle.
        let model = true_model(sc.ego.model);
        let footprints = self.world.real_object_footprints()?;
        for j in 0..k {
            let sp = self.pv.support_point(ManeuverId::A, j);
            let control = sp.input;
            let margins = nlp.chance_margins_at(&self.pv, j);
            let crc = nlp.circle_residuals_at(&self.pv, j);
            let jerk = (control.accel - self.prev_accel) / dt;
            self.prev_accel = control.accel;

            let state = self.world.ego_true;
            let frenet = route
                .cartesian_to_frenet_within(state.x, state.y, sc.corridor_half_width_m)
                .map_err(|e| SimError::ScenarioDiverged {
                    t: scene.t + j as f64 * dt,
                    source: e,
                })?;
            let fallback = nlp.fallback_stop_at(&self.pv, j);
            let collision = footprints.iter().any(|f| {
                footprints_overlap(
                    (state, sc.ego.params.length_m, sc.ego.params.width_m),
                    *f,
                )
            });
            self.trace.steps.push(TraceStep {
                index: self.steps_done,
                t_s: scene.t + j as f64 * dt,
                x_m: state.x,
                y_m: state.y,
                heading_rad: state.heading,
                speed_mps: state.speed,
                s_m: frenet.s,
                d_m: frenet.d,
                steer_rad: control.steer,
                accel_mps2: control.accel,
                jerk_mps3: jerk,
                weight_a: weights.0,
                weight_b: weights.1,
                fallback_stop_mean_m: fallback.mean,
                fallback_stop_std_m: fallback.std_dev(),
                margin_visibility: margins.visibility,
                margin_leader: margins.leader,
                margin_yield: margins.yield_point,
                margin_circles: crc
                    .iter()
                    .cloned()
                    .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r)))),
                zplan_active: self.zplan_mode,
                collision,
            });
            self.steps_done += 1;

            let mut next = step_state(sc.ego.integrator, &model, state, control, dt, &sc.ego.params);
            next.speed = next.speed.max(0.0);
            self.world.set_ego_true(next);
            self.world.advance_objects(dt);
        }

        let outcome = CycleOutcome {
            cycle: self.cycle,
            scene,
            warm: nlp.base().clone(),
            nlp,
            solved,
            result,
            weights,
            zplan_active: self.zplan_mode,
        };
        self.cycle += 1;

        // Shift for the next cycle.
        self.pv = shift_warm_start(
            &self.pv,
            k,
            self.layout,
            &true_model(sc.ego.model),
            sc.ego.integrator,
            &sc.ego.params,
            dt,
        );
        Ok(outcome)
    }

    pub fn run(mut self) -> Result<SimTrace, SimError> {
        let cycles = self.num_cycles();
        for _ in 0..cycles {
            self.step_cycle()?;
        }
        Ok(self.trace)
    }

    pub fn trace(&self) -> &SimTrace {
        &self.trace
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Run a scenario to completion and return the executed trace.
pub fn run_receding_horizon(
    scenario: &Scenario,
    planner: PlannerKind,
    seed: u64,
) -> Result<SimTrace, SimError> {
    Simulation::new(scenario.clone(), planner, seed)?.run()
}

/// Trace summary (re-exported from the trace module for discoverability).
pub fn metrics(trace: &SimTrace) -> Metrics {
    crate::sim::trace::metrics(trace)
}
