//! Assembly of the weighted-maneuver trajectory program.
//!
//! The decision variables are the support points after the pinned block:
//! maneuver A's steps `k+1..=n` plus maneuver B's exclusive tail
//! `2k+1..=n`. Costs follow the weighted-sum form: terms on the shared
//! segment carry weight `w_A + w_B = 1`, branch-tail terms carry their
//! branch weight. Constraints are emitted once per stored point (the
//! branches' constraint sets coincide on shared storage), with the hard
//! collision and fallback chance constraints restricted to the
//! irreversible window `0..=2k` — of which only `k+1..=2k` involve free
//! variables; the pinned remainder is checked by the harness against the
//! previous solve.

use std::sync::Arc;

use crate::costs::{self, CollisionObject, CostWeights};
use crate::error::NlpError;
use crate::geometry::Centerline;
use crate::nlp::layout::{slot, Layout, ManeuverId, ParameterVector, PT_DIM};
use crate::solver::ad::Scalar;
use crate::solver::ipm::{self, SeparableNlp, SolveResult, SolverConfig, VarRef};
use crate::uncertainty::GaussianScalar;
use crate::vehicle::{integrate, Integrator, VehicleModel, VehicleParams, VehicleState};
use crate::error::SolverError;

/// Which dynamics model the planner runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    PointMass,
    Kinematic,
    LinearKinematic,
    DynamicLinearTire,
}

/// Position-uncertainty ellipse of one object at one step, axes in the
/// ellipse frame (confidence-scaled, before footprint inflation).
#[derive(Clone, Copy, Debug)]
pub struct EllipseObstacle {
    pub center: (f64, f64),
    pub semi_major: f64,
    pub semi_minor: f64,
    pub cos_rot: f64,
    pub sin_rot: f64,
}

/// Measurement and braking noise entering the fallback stop distribution.
#[derive(Clone, Copy, Debug)]
pub struct FallbackNoise {
    pub sigma_s2: f64,
    pub sigma_v2: f64,
    /// Full-braking deceleration magnitude (positive).
    pub brake_decel: f64,
    pub sigma_brake2: f64,
}

impl FallbackNoise {
    /// Stop distribution for a planned `(s, v)` pair, first-order in the
    /// measurement and braking noise.
    pub fn stop_distribution(&self, s: f64, v: f64) -> GaussianScalar {
        let a = self.brake_decel;
        let mean = s + v * v / (2.0 * a);
        let dv = v / a;
        let da = v * v / (2.0 * a * a);
        GaussianScalar::new(
            mean,
            self.sigma_s2 + dv * dv * self.sigma_v2 + da * da * self.sigma_brake2,
        )
    }
}

/// Hard-constraint data for the irreversible window.
#[derive(Clone, Debug)]
pub struct HardConstraintScene {
    /// Ellipses per step `0..=2k` (outer index is the step).
    pub ellipses_per_step: Vec<Vec<EllipseObstacle>>,
    /// Absolute arc length where visible free space ends, if the
    /// visibility indicator is active.
    pub visibility_limit: Option<f64>,
    /// Leader worst-case stop distribution (absolute arc length), if the
    /// leader/phantom indicator is active.
    pub leader_stop: Option<GaussianScalar>,
    /// Absolute arc length of the merge point, if the yield indicator is
    /// active.
    pub merge_limit: Option<f64>,
    pub s_min: f64,
    /// phi^-1(1 - alpha).
    pub quantile_factor: f64,
    pub noise: FallbackNoise,
}

impl HardConstraintScene {
    pub fn empty(window: usize, s_min: f64, quantile_factor: f64, noise: FallbackNoise) -> Self {
        HardConstraintScene {
            ellipses_per_step: vec![Vec::new(); window + 1],
            visibility_limit: None,
            leader_stop: None,
            merge_limit: None,
            s_min,
            quantile_factor,
            noise,
        }
    }
}

/// Planner-wide configuration that does not change per cycle.
#[derive(Clone, Debug)]
pub struct PlannerConfig {
    pub dt: f64,
    pub desired_speed: f64,
    /// Hard cap on planned speed and path speed (some headroom above the
    /// legal limit); also keeps barrier pressure on one-sided speed
    /// bounds from inflating zero-weight branches.
    pub speed_cap: f64,
    pub weights: CostWeights,
    pub params: VehicleParams,
    pub integrator: Integrator,
    pub model: ModelKind,
    /// Extra clearance added to the cover-circle radius when inflating
    /// obstacle ellipses.
    pub clearance_m: f64,
}

/// Cover circles along the vehicle's longitudinal axis.
pub fn cover_circles(params: &VehicleParams) -> (Vec<f64>, f64) {
    let len = params.length_m;
    let w = params.width_m;
    let radius = 0.5 * w * (1.0 + (len / (3.0 * w)).powi(2)).sqrt();
    (vec![-len / 3.0, 0.0, len / 3.0], radius)
}

enum ObjKind {
    Drive { scale: f64 },
    AccelComfort { scale: f64 },
    LatComfort { scale: f64, m: usize, step: usize },
    Jerk { scale: f64 },
    Contour { scale: f64 },
    PathSpeed { scale: f64 },
    Collision { m: usize, step: usize, scale: f64 },
}

struct ObjElem {
    vars: Vec<VarRef>,
    kind: ObjKind,
}

struct EqBlock {
    vars: Vec<VarRef>,
    m: usize,
    step: usize,
}

enum IneqKind {
    Bounds,
    LatAcc { m: usize, step: usize },
    ContourBand,
    Circles { step: usize, obj: usize },
    ChanceVisibility,
    ChanceLeader,
    ChanceYield,
}

struct IneqBlock {
    vars: Vec<VarRef>,
    dim: usize,
    kind: IneqKind,
}

/// The assembled program for one planning cycle.
pub struct PlannerNlp {
    pub layout: Layout,
    cfg: PlannerConfig,
    centerline: Arc<Centerline>,
    /// Dynamics models per maneuver and step.
    models: Vec<Vec<VehicleModel>>,
    branch_objects: Vec<Vec<CollisionObject>>,
    hard: HardConstraintScene,
    weight_a: f64,
    weight_b: f64,
    base: ParameterVector,

    free_points: Vec<usize>,
    free_of_point: Vec<Option<usize>>,
    var_step: Vec<usize>,
    circle_offsets: Vec<f64>,
    /// Footprint inflation added to both ellipse axes.
    inflation: f64,

    obj_elems: Vec<ObjElem>,
    eq_blocks: Vec<EqBlock>,
    ineq_blocks: Vec<IneqBlock>,
}

impl PlannerNlp {
    /// Build the program around a warm-start vector whose pinned block
    /// supplies the fixed values (and, for the linearized model, the
    /// linearization trajectory).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: PlannerConfig,
        centerline: Arc<Centerline>,
        base: ParameterVector,
        branch_objects: Vec<Vec<CollisionObject>>,
        hard: HardConstraintScene,
        weight_a: f64,
        weight_b: f64,
    ) -> Result<Self, NlpError> {
        let layout = base.layout;
        if weight_a < 0.0 || weight_b < 0.0 || weight_a + weight_b <= 0.0 {
            return Err(NlpError::NegativeWeight(weight_a, weight_b));
        }
        let norm = weight_a + weight_b;
        let (weight_a, weight_b) = (weight_a / norm, weight_b / norm);
        if layout.maneuvers == 1 {
            debug_assert!(weight_b == 0.0, "single-maneuver layout takes weight_b = 0");
        }
        let window = 2 * layout.pin_count;
        assert_eq!(
            hard.ellipses_per_step.len(),
            window + 1,
            "hard scene must cover steps 0..=2k"
        );

        let n = layout.steps;
        let k = layout.pin_count;

        // Dynamics model per maneuver and step.
        let mut models: Vec<Vec<VehicleModel>> = Vec::new();
        for m in layout.maneuver_ids() {
            let per_step: Vec<VehicleModel> = (0..=n)
                .map(|i| match cfg.model {
                    ModelKind::PointMass => VehicleModel::PointMass,
                    ModelKind::Kinematic => VehicleModel::Kinematic,
                    ModelKind::DynamicLinearTire => {
                        VehicleModel::DynamicLinearTire { blend_low_speed: true }
                    }
                    ModelKind::LinearKinematic => {
                        let sp = base.support_point(m, i);
                        VehicleModel::LinearKinematic {
                            state_ref: sp.state,
                            input_ref: sp.input,
                        }
                    }
                })
                .collect();
            models.push(per_step);
        }

        // Free points: maneuver A steps k+1..=n, maneuver B tail. A
        // branch with exactly zero weight is frozen at its warm start:
        // its variables leave the program and (below) its junction
        // dynamics block is dropped, so the solve coincides with the
        // single-maneuver problem for the surviving branch.
        let total = layout.total_points();
        let mut free_points = Vec::new();
        let mut free_of_point = vec![None; total];
        if weight_a > 0.0 || layout.maneuvers == 1 {
            for step in k + 1..=n {
                let p = layout.point_index(ManeuverId::A, step);
                free_of_point[p] = Some(free_points.len());
                free_points.push(p);
            }
        } else {
            // Shared segment stays free even when branch A is frozen.
            for step in k + 1..=window {
                let p = layout.point_index(ManeuverId::A, step);
                free_of_point[p] = Some(free_points.len());
                free_points.push(p);
            }
        }
        if layout.maneuvers == 2 && weight_b > 0.0 {
            for step in window + 1..=n {
                let p = layout.point_index(ManeuverId::B, step);
                free_of_point[p] = Some(free_points.len());
                free_points.push(p);
            }
        }
        let mut var_step = vec![0usize; free_points.len() * PT_DIM];
        for (fp, &p) in free_points.iter().enumerate() {
            let step = layout
                .step_of_point(ManeuverId::A, p)
                .or_else(|| layout.step_of_point(ManeuverId::B, p))
                .expect("every stored point belongs to a view");
            for s in 0..PT_DIM {
                var_step[fp * PT_DIM + s] = step;
            }
        }

        let (circle_offsets, r_cover) = cover_circles(&cfg.params);
        let inflation = r_cover + cfg.clearance_m;

        let mut nlp = PlannerNlp {
            layout,
            cfg,
            centerline,
            models,
            branch_objects,
            hard,
            weight_a,
            weight_b,
            base,
            free_points,
            free_of_point,
            var_step,
            circle_offsets,
            inflation,
            obj_elems: Vec::new(),
            eq_blocks: Vec::new(),
            ineq_blocks: Vec::new(),
        };
        nlp.build_elements();
        Ok(nlp)
    }

    fn var_ref(&self, point: usize, s: usize) -> VarRef {
        match self.free_of_point[point] {
            Some(fp) => VarRef::Free(fp * PT_DIM + s),
            None => VarRef::Fixed(self.base.value_at(point, s)),
        }
    }

    fn point_vars(&self, point: usize, slots: &[usize]) -> Vec<VarRef> {
        slots.iter().map(|&s| self.var_ref(point, s)).collect()
    }

    /// Weight multiplier of a per-step cost term in the given view.
    fn step_scale(&self, m: ManeuverId, step: usize) -> f64 {
        if step <= 2 * self.layout.pin_count {
            // Shared segment: both views sum over it.
            self.weight_a + self.weight_b
        } else {
            match m {
                ManeuverId::A => self.weight_a,
                ManeuverId::B => self.weight_b,
            }
        }
    }

    fn build_elements(&mut self) {
        let n = self.layout.steps;
        let k = self.layout.pin_count;
        let window = 2 * k;
        let layout = self.layout;

        // --- Objective -------------------------------------------------
        // Per-point terms, emitted once per stored point with the
        // appropriate combined weight.
        let per_point = |nlp: &mut PlannerNlp, m: ManeuverId| {
            let start = if m == ManeuverId::A { k + 1 } else { window + 1 };
            for step in start..=n {
                let p = layout.point_index(m, step);
                let scale = nlp.step_scale(m, step);
                if scale == 0.0 {
                    continue;
                }
                let mi = m.index();
                nlp.obj_elems.push(ObjElem {
                    vars: nlp.point_vars(p, &[slot::V]),
                    kind: ObjKind::Drive { scale },
                });
                nlp.obj_elems.push(ObjElem {
                    vars: nlp.point_vars(p, &[slot::ACC]),
                    kind: ObjKind::AccelComfort { scale },
                });
                nlp.obj_elems.push(ObjElem {
                    vars: nlp.point_vars(p, &[slot::V, slot::STEER]),
                    kind: ObjKind::LatComfort { scale, m: mi, step },
                });
                nlp.obj_elems.push(ObjElem {
                    vars: nlp.point_vars(p, &[slot::X, slot::Y, slot::S]),
                    kind: ObjKind::Contour { scale },
                });
                nlp.obj_elems.push(ObjElem {
                    vars: nlp.point_vars(p, &[slot::SDOT]),
                    kind: ObjKind::PathSpeed { scale },
                });
            }
        };
        per_point(self, ManeuverId::A);
        if layout.maneuvers == 2 {
            per_point(self, ManeuverId::B);
        }


        // Jerk pairs per view; the shared window is emitted once.
        for m in layout.maneuver_ids() {
            for step in k..n {
                if m == ManeuverId::B && step + 1 <= window {
                    continue; // identical to view A's pair
                }
                let scale = self.step_scale(m, step + 1);
                if scale == 0.0 {
                    continue;
                }
                let pa = layout.point_index(m, step);
                let pb = layout.point_index(m, step + 1);
                self.obj_elems.push(ObjElem {
                    vars: vec![self.var_ref(pa, slot::ACC), self.var_ref(pb, slot::ACC)],
                    kind: ObjKind::Jerk { scale },
                });
            }
        }

        // Collision cost: per branch over its own object set, all steps
        // with free variables.
        for m in layout.maneuver_ids() {
            let mi = m.index();
            if self.branch_objects.get(mi).map_or(true, |v| v.is_empty()) {
                continue;
            }
            let w_branch = if mi == 0 { self.weight_a } else { self.weight_b };
            if w_branch == 0.0 {
                continue;
            }
            for step in k + 1..=n {
                // Shared-storage steps appear in both branches: each
                // branch contributes its own object set at its own weight.
                let p = layout.point_index(m, step);
                self.obj_elems.push(ObjElem {
                    vars: self.point_vars(p, &[slot::X, slot::Y, slot::S]),
                    kind: ObjKind::Collision {
                        m: mi,
                        step,
                        scale: w_branch,
                    },
                });
            }
        }

        // --- Dynamics equalities ----------------------------------------
        for m in layout.maneuver_ids() {
            let branch_weight = if m == ManeuverId::A {
                self.weight_a
            } else {
                self.weight_b
            };
            if branch_weight == 0.0 && layout.maneuvers == 2 {
                continue; // frozen branch: its tail is constant
            }
            let start = if m == ManeuverId::A { k } else { window };
            for step in start..n {
                let pa = layout.point_index(m, step);
                let pb = layout.point_index(m, step + 1);
                let mut vars = self.point_vars(
                    pa,
                    &[
                        slot::X,
                        slot::Y,
                        slot::PSI,
                        slot::V,
                        slot::S,
                        slot::STEER,
                        slot::ACC,
                        slot::SDOT,
                    ],
                );
                vars.extend(self.point_vars(pb, &[slot::X, slot::Y, slot::PSI, slot::V, slot::S]));
                self.eq_blocks.push(EqBlock {
                    vars,
                    m: m.index(),
                    step,
                });
            }
        }

        // --- Inequalities -----------------------------------------------
        for fp in 0..self.free_points.len() {
            let p = self.free_points[fp];
            self.ineq_blocks.push(IneqBlock {
                vars: self.point_vars(p, &[slot::V, slot::STEER, slot::ACC, slot::SDOT]),
                dim: 8,
                kind: IneqKind::Bounds,
            });
            let step = self.var_step[fp * PT_DIM];
            let m = if p <= n { 0 } else { 1 };
            self.ineq_blocks.push(IneqBlock {
                vars: self.point_vars(p, &[slot::V, slot::STEER]),
                dim: 2,
                kind: IneqKind::LatAcc { m, step },
            });
            self.ineq_blocks.push(IneqBlock {
                vars: self.point_vars(p, &[slot::X, slot::Y, slot::S]),
                dim: 4,
                kind: IneqKind::ContourBand,
            });
        }

        // Hard window constraints on the free part of 0..=2k.
        for step in k + 1..=window {
            let p = layout.point_index(ManeuverId::A, step);
            for obj in 0..self.hard.ellipses_per_step[step].len() {
                self.ineq_blocks.push(IneqBlock {
                    vars: self.point_vars(p, &[slot::X, slot::Y, slot::PSI]),
                    dim: self.circle_offsets.len(),
                    kind: IneqKind::Circles { step, obj },
                });
            }
            let chance_vars = self.point_vars(p, &[slot::V, slot::S]);
            if self.hard.visibility_limit.is_some() {
                self.ineq_blocks.push(IneqBlock {
                    vars: chance_vars.clone(),
                    dim: 1,
                    kind: IneqKind::ChanceVisibility,
                });
            }
            if self.hard.leader_stop.is_some() {
                self.ineq_blocks.push(IneqBlock {
                    vars: chance_vars.clone(),
                    dim: 1,
                    kind: IneqKind::ChanceLeader,
                });
            }
            if self.hard.merge_limit.is_some() {
                self.ineq_blocks.push(IneqBlock {
                    vars: chance_vars.clone(),
                    dim: 1,
                    kind: IneqKind::ChanceYield,
                });
            }
        }
    }

    /// Contouring errors (printed form) and the signed lateral offset at a
    /// generic pose.
    fn contour_terms<T: Scalar>(&self, x: T, y: T, s: T) -> (costs::ContouringError<T>, T) {
        let (rx, ry, dxs, dys) = self.centerline.reference_generic(s);
        let inv_norm = T::one() / (dxs * dxs + dys * dys).sqrt();
        let cos_r = dxs * inv_norm;
        let sin_r = dys * inv_norm;
        let err = costs::mpcc_errors(x, y, rx, ry, sin_r, cos_r);
        // Signed lateral offset of the pose (left of tangent positive) is
        // the negated printed longitudinal error.
        let d = -err.lon;
        (err, d)
    }

    fn chance_sigma<T: Scalar>(&self, v: T) -> T {
        let noise = &self.hard.noise;
        let a = noise.brake_decel;
        let c1 = noise.sigma_v2 / (a * a);
        let c2 = noise.sigma_brake2 / (4.0 * a * a * a * a);
        let v2 = v * v;
        (T::constant(noise.sigma_s2) + T::constant(c1) * v2 + T::constant(c2) * v2 * v2
            + T::constant(1e-12))
        .sqrt()
    }

    fn chance_stop_mean<T: Scalar>(&self, s: T, v: T) -> T {
        s + v * v * T::constant(1.0 / (2.0 * self.hard.noise.brake_decel))
    }

    fn eval_circles<T: Scalar>(&self, step: usize, obj: usize, local: &[T], out: &mut [T]) {
        let e = &self.hard.ellipses_per_step[step][obj];
        let (x, y, psi) = (local[0], local[1], local[2]);
        let a = T::constant(1.0 / (e.semi_major + self.inflation));
        let b = T::constant(1.0 / (e.semi_minor + self.inflation));
        let (cr, sr) = (T::constant(e.cos_rot), T::constant(e.sin_rot));
        let (cx, cy) = (T::constant(e.center.0), T::constant(e.center.1));
        let cos_psi = psi.cos();
        let sin_psi = psi.sin();
        for (j, &off) in self.circle_offsets.iter().enumerate() {
            let px = x + T::constant(off) * cos_psi - cx;
            let py = y + T::constant(off) * sin_psi - cy;
            let u = (cr * px + sr * py) * a;
            let w = (cr * py - sr * px) * b;
            out[j] = T::one() - (u * u + w * w + T::constant(1e-12)).sqrt();
        }
    }
}

impl SeparableNlp for PlannerNlp {
    fn num_vars(&self) -> usize {
        self.free_points.len() * PT_DIM
    }

    fn num_obj_elements(&self) -> usize {
        self.obj_elems.len()
    }
    fn obj_vars(&self, e: usize) -> &[VarRef] {
        &self.obj_elems[e].vars
    }
    fn eval_obj<T: Scalar>(&self, e: usize, local: &[T]) -> T {
        let w = &self.cfg.weights;
        let v_des = self.cfg.desired_speed;
        match &self.obj_elems[e].kind {
            ObjKind::Drive { scale } => {
                costs::cost_asymmetric(local[0], v_des, w.w_drive) * T::constant(*scale)
            }
            ObjKind::AccelComfort { scale } => {
                (costs::cost_value(local[0], 0.0, w.w_accel_value)
                    + costs::cost_range(local[0], w.accel_lo_mps2, w.accel_hi_mps2, w.w_accel_range))
                    * T::constant(*scale)
            }
            ObjKind::LatComfort { scale, m, step } => {
                let model = &self.models[*m][*step];
                let state = [T::zero(), T::zero(), T::zero(), local[0]];
                let input = [local[1], T::zero()];
                let alat =
                    crate::vehicle::lateral_acceleration(model, state, input, &self.cfg.params);
                (costs::cost_value(alat, 0.0, w.w_lat_accel_value)
                    + costs::cost_range(
                        alat,
                        w.lat_accel_lo_mps2,
                        w.lat_accel_hi_mps2,
                        w.w_lat_accel_range,
                    )
                    + costs::cost_value(local[1], 0.0, w.w_steer_value))
                    * T::constant(*scale)
            }
            ObjKind::Jerk { scale } => {
                let jerk = (local[1] - local[0]) * T::constant(1.0 / self.cfg.dt);
                (costs::cost_value(jerk, 0.0, w.w_jerk_value)
                    + costs::cost_range(jerk, w.jerk_lo_mps3, w.jerk_hi_mps3, w.w_jerk_range))
                    * T::constant(*scale)
            }
            ObjKind::Contour { scale } => {
                let (err, _) = self.contour_terms(local[0], local[1], local[2]);
                (costs::cost_value(err.lon, 0.0, w.w_contour_lon)
                    + costs::cost_value(err.lat, 0.0, w.w_contour_lat))
                    * T::constant(*scale)
            }
            ObjKind::PathSpeed { scale } => {
                costs::cost_value(local[0], v_des, w.w_path_speed) * T::constant(*scale)
            }
            ObjKind::Collision { m, step, scale } => {
                let (_, d) = self.contour_terms(local[0], local[1], local[2]);
                let s = local[2];
                let mut total = T::zero();
                for obj in &self.branch_objects[*m] {
                    let idx = (*step).min(obj.frenet_per_step.len() - 1);
                    let (os, od) = obj.frenet_per_step[idx];
                    total += costs::collision_term(
                        s,
                        d,
                        os,
                        od,
                        obj.lambda_lon[idx],
                        obj.lambda_lat[idx],
                    );
                }
                T::constant(w.w_collision * *scale) * total
            }
        }
    }

    fn num_eq_blocks(&self) -> usize {
        self.eq_blocks.len()
    }
    fn eq_dim(&self, _b: usize) -> usize {
        5
    }
    fn eq_vars(&self, b: usize) -> &[VarRef] {
        &self.eq_blocks[b].vars
    }
    fn eval_eq<T: Scalar>(&self, b: usize, local: &[T], out: &mut [T]) {
        let blk = &self.eq_blocks[b];
        let model = &self.models[blk.m][blk.step];
        let state = [local[0], local[1], local[2], local[3]];
        let input = [local[5], local[6]];
        let next = integrate(
            self.cfg.integrator,
            model,
            state,
            input,
            self.cfg.dt,
            &self.cfg.params,
        );
        for i in 0..4 {
            out[i] = local[8 + i] - next[i];
        }
        // Contouring coupling: s advances with the path speed.
        out[4] = local[12] - (local[4] + local[7] * T::constant(self.cfg.dt));
    }

    fn num_ineq_blocks(&self) -> usize {
        self.ineq_blocks.len()
    }
    fn ineq_dim(&self, b: usize) -> usize {
        self.ineq_blocks[b].dim
    }
    fn ineq_vars(&self, b: usize) -> &[VarRef] {
        &self.ineq_blocks[b].vars
    }
    fn eval_ineq<T: Scalar>(&self, b: usize, local: &[T], out: &mut [T]) {
        let w = &self.cfg.weights;
        match &self.ineq_blocks[b].kind {
            IneqKind::Bounds => {
                // vars: [v, steer, acc, sdot]
                let cap = T::constant(self.cfg.speed_cap);
                out[0] = -local[0];
                out[1] = -local[3];
                out[2] = local[1] - T::constant(w.steer_bound_rad);
                out[3] = -local[1] - T::constant(w.steer_bound_rad);
                out[4] = local[2] - T::constant(w.hard_accel_hi_mps2);
                out[5] = T::constant(w.hard_accel_lo_mps2) - local[2];
                out[6] = local[0] - cap;
                out[7] = local[3] - cap;
            }
            IneqKind::LatAcc { m, step } => {
                let model = &self.models[*m][*step];
                let state = [T::zero(), T::zero(), T::zero(), local[0]];
                let input = [local[1], T::zero()];
                let alat =
                    crate::vehicle::lateral_acceleration(model, state, input, &self.cfg.params);
                out[0] = alat - T::constant(w.hard_lat_accel_mps2);
                out[1] = -alat - T::constant(w.hard_lat_accel_mps2);
            }
            IneqKind::ContourBand => {
                let (err, _) = self.contour_terms(local[0], local[1], local[2]);
                out[0] = err.lon - T::constant(w.contour_lon_bound_m);
                out[1] = -err.lon - T::constant(w.contour_lon_bound_m);
                out[2] = err.lat - T::constant(w.contour_lat_bound_m);
                out[3] = -err.lat - T::constant(w.contour_lat_bound_m);
            }
            IneqKind::Circles { step, obj } => self.eval_circles(*step, *obj, local, out),
            IneqKind::ChanceVisibility => {
                let (v, s) = (local[0], local[1]);
                let bound = self.hard.visibility_limit.expect("active indicator");
                out[0] = self.chance_stop_mean(s, v)
                    + self.chance_sigma(v) * T::constant(self.hard.quantile_factor)
                    + T::constant(self.hard.s_min - bound);
            }
            IneqKind::ChanceLeader => {
                let (v, s) = (local[0], local[1]);
                let leader = self.hard.leader_stop.expect("active indicator");
                let sig = {
                    let noise = &self.hard.noise;
                    let a = noise.brake_decel;
                    let c1 = noise.sigma_v2 / (a * a);
                    let c2 = noise.sigma_brake2 / (4.0 * a * a * a * a);
                    let v2 = v * v;
                    (T::constant(noise.sigma_s2 + leader.variance)
                        + T::constant(c1) * v2
                        + T::constant(c2) * v2 * v2
                        + T::constant(1e-12))
                    .sqrt()
                };
                out[0] = self.chance_stop_mean(s, v) - T::constant(leader.mean)
                    + sig * T::constant(self.hard.quantile_factor)
                    + T::constant(self.hard.s_min);
            }
            IneqKind::ChanceYield => {
                let (v, s) = (local[0], local[1]);
                let bound = self.hard.merge_limit.expect("active indicator");
                out[0] = self.chance_stop_mean(s, v)
                    + self.chance_sigma(v) * T::constant(self.hard.quantile_factor)
                    + T::constant(self.hard.s_min - bound);
            }
        }
    }

    fn var_key(&self, v: usize) -> usize {
        self.var_step[v]
    }
}

/// Violation summary of a full parameter vector against the program.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConstraintReport {
    pub max_dynamics: f64,
    pub max_inequality: f64,
}

/// Deterministic-form fallback chance residuals at one step; `None`
/// means the indicator is inactive, non-positive means satisfied.
#[derive(Clone, Copy, Debug, Default)]
pub struct ChanceMargins {
    pub visibility: Option<f64>,
    pub leader: Option<f64>,
    pub yield_point: Option<f64>,
}

impl PlannerNlp {
    /// Free-variable vector read off a full parameter vector.
    pub fn free_values(&self, pv: &ParameterVector) -> Vec<f64> {
        let mut x = vec![0.0; self.num_vars()];
        for (fp, &p) in self.free_points.iter().enumerate() {
            for s in 0..PT_DIM {
                x[fp * PT_DIM + s] = pv.value_at(p, s);
            }
        }
        x
    }

    /// Scatter a solved free-variable vector into a copy of the base.
    pub fn assemble_solution(&self, x: &[f64]) -> ParameterVector {
        let mut pv = self.base.clone();
        for (fp, &p) in self.free_points.iter().enumerate() {
            for s in 0..PT_DIM {
                pv.set_value_at(p, s, x[fp * PT_DIM + s]);
            }
        }
        pv
    }

    /// Solve from the base (warm-start) vector.
    pub fn solve(&self, cfg: &SolverConfig) -> Result<(ParameterVector, SolveResult), SolverError> {
        let x0 = self.free_values(&self.base);
        let result = ipm::solve(self, &x0, cfg)?;
        Ok((self.assemble_solution(&result.x), result))
    }

    /// The weighted objective evaluated at an arbitrary full vector.
    pub fn objective_value(&self, pv: &ParameterVector) -> f64 {
        let x = self.free_values(pv);
        let mut total = 0.0;
        let mut locals: Vec<f64> = Vec::new();
        for e in 0..self.obj_elems.len() {
            locals.clear();
            locals.extend(self.obj_elems[e].vars.iter().map(|vr| match vr {
                VarRef::Free(i) => x[*i],
                VarRef::Fixed(c) => *c,
            }));
            total += self.eval_obj(e, &locals);
        }
        total
    }

    /// Evaluate all constraints of the program at a full vector.
    pub fn constraint_report(&self, pv: &ParameterVector) -> ConstraintReport {
        let x = self.free_values(pv);
        let mut rep = ConstraintReport::default();
        let mut locals: Vec<f64> = Vec::new();
        let mut out = vec![0.0; 8];
        for b in 0..self.eq_blocks.len() {
            locals.clear();
            locals.extend(self.eq_blocks[b].vars.iter().map(|vr| match vr {
                VarRef::Free(i) => x[*i],
                VarRef::Fixed(c) => *c,
            }));
            self.eval_eq(b, &locals, &mut out[..5]);
            for r in 0..5 {
                rep.max_dynamics = rep.max_dynamics.max(out[r].abs());
            }
        }
        for b in 0..self.ineq_blocks.len() {
            let dim = self.ineq_blocks[b].dim;
            locals.clear();
            locals.extend(self.ineq_blocks[b].vars.iter().map(|vr| match vr {
                VarRef::Free(i) => x[*i],
                VarRef::Fixed(c) => *c,
            }));
            self.eval_ineq(b, &locals, &mut out[..dim]);
            for r in 0..dim {
                rep.max_inequality = rep.max_inequality.max(out[r]);
            }
        }
        rep
    }

    /// Circle-to-ellipse residuals at any window step (including pinned
    /// ones), for pre-solve verification and trace margins. Non-positive
    /// means satisfied.
    pub fn circle_residuals_at(&self, pv: &ParameterVector, step: usize) -> Vec<f64> {
        let p = self.layout.point_index(ManeuverId::A, step);
        let local = [
            pv.value_at(p, slot::X),
            pv.value_at(p, slot::Y),
            pv.value_at(p, slot::PSI),
        ];
        let mut res = Vec::new();
        let mut out = vec![0.0; self.circle_offsets.len()];
        for obj in 0..self.hard.ellipses_per_step[step].len() {
            self.eval_circles(step, obj, &local, &mut out);
            res.extend_from_slice(&out);
        }
        res
    }

    /// Fallback chance-constraint residuals at any window step, in the
    /// order (visibility, leader, yield); inactive indicators are skipped.
    pub fn chance_residuals_at(&self, pv: &ParameterVector, step: usize) -> Vec<f64> {
        let m = self.chance_margins_at(pv, step);
        [m.visibility, m.leader, m.yield_point]
            .into_iter()
            .flatten()
            .collect()
    }

    /// Labeled variant of [`Self::chance_residuals_at`].
    pub fn chance_margins_at(&self, pv: &ParameterVector, step: usize) -> ChanceMargins {
        let p = self.layout.point_index(ManeuverId::A, step);
        let v = pv.value_at(p, slot::V);
        let s = pv.value_at(p, slot::S);
        let q = self.hard.quantile_factor;
        let visibility = self.hard.visibility_limit.map(|bound| {
            self.chance_stop_mean(s, v) + self.chance_sigma(v) * q + self.hard.s_min - bound
        });
        let leader = self.hard.leader_stop.map(|leader| {
            let stop = self.hard.noise.stop_distribution(s, v);
            let delta = crate::uncertainty::delta_stop_distance(stop, leader);
            delta.mean + delta.std_dev() * q + self.hard.s_min
        });
        let yield_point = self.hard.merge_limit.map(|bound| {
            self.chance_stop_mean(s, v) + self.chance_sigma(v) * q + self.hard.s_min - bound
        });
        ChanceMargins {
            visibility,
            leader,
            yield_point,
        }
    }

    /// Fallback stop distribution attached to a window step of the plan.
    pub fn fallback_stop_at(&self, pv: &ParameterVector, step: usize) -> GaussianScalar {
        let p = self.layout.point_index(ManeuverId::A, step);
        self.hard
            .noise
            .stop_distribution(pv.value_at(p, slot::S), pv.value_at(p, slot::V))
    }

    pub fn weights(&self) -> (f64, f64) {
        (self.weight_a, self.weight_b)
    }

    pub fn hard_scene(&self) -> &HardConstraintScene {
        &self.hard
    }

    /// Dynamics residual norms per (maneuver, step) over the whole
    /// horizon, pinned steps included.
    pub fn dynamics_residuals(&self, pv: &ParameterVector, m: ManeuverId) -> Vec<f64> {
        let n = self.layout.steps;
        let mut out = Vec::with_capacity(n);
        for step in 0..n {
            let a = pv.support_point(m, step);
            let b = pv.support_point(m, step + 1);
            let model = &self.models[m.index().min(self.models.len() - 1)][step];
            let next = integrate(
                self.cfg.integrator,
                model,
                a.state.to_array(),
                [a.input.steer, a.input.accel],
                self.cfg.dt,
                &self.cfg.params,
            );
            let mut err: f64 = 0.0;
            let nb = b.state.to_array();
            for i in 0..4 {
                err = err.max((next[i] - nb[i]).abs());
            }
            err = err.max((a.arc_len + a.path_speed * self.cfg.dt - b.arc_len).abs());
            out.push(err);
        }
        out
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.cfg
    }

    pub fn model_for(&self, m: ManeuverId, step: usize) -> &VehicleModel {
        &self.models[m.index().min(self.models.len() - 1)][step]
    }

    pub fn base(&self) -> &ParameterVector {
        &self.base
    }

    pub fn ego_state_at(&self, pv: &ParameterVector, step: usize) -> VehicleState {
        pv.support_point(ManeuverId::A, step).state
    }

    /// Human-readable list of violated inequality rows at a vector;
    /// diagnostic only.
    pub fn violated_inequalities(&self, pv: &ParameterVector, tol: f64) -> Vec<String> {
        let x = self.free_values(pv);
        let mut out = Vec::new();
        let mut locals: Vec<f64> = Vec::new();
        let mut buf = vec![0.0; 8];
        for (b, blk) in self.ineq_blocks.iter().enumerate() {
            locals.clear();
            locals.extend(blk.vars.iter().map(|vr| match vr {
                VarRef::Free(i) => x[*i],
                VarRef::Fixed(c) => *c,
            }));
            self.eval_ineq(b, &locals, &mut buf[..blk.dim]);
            for r in 0..blk.dim {
                if buf[r] > tol {
                    let kind = match &blk.kind {
                        IneqKind::Bounds => "bounds",
                        IneqKind::LatAcc { .. } => "lat_acc",
                        IneqKind::ContourBand => "contour",
                        IneqKind::Circles { .. } => "circles",
                        IneqKind::ChanceVisibility => "chance_vis",
                        IneqKind::ChanceLeader => "chance_leader",
                        IneqKind::ChanceYield => "chance_yield",
                    };
                    out.push(format!("block {b} ({kind}) row {r}: {:.4}", buf[r]));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::layout::shift_warm_start;
    use crate::vehicle::ControlInput;

    fn straight_centerline(len: f64) -> Arc<Centerline> {
        let pts: Vec<(f64, f64)> = (0..=40).map(|i| (len * i as f64 / 40.0, 0.0)).collect();
        Arc::new(Centerline::from_waypoints(&pts).unwrap())
    }

    fn base_config() -> PlannerConfig {
        PlannerConfig {
            dt: 0.1,
            desired_speed: 12.5,
            speed_cap: 16.7,
            weights: CostWeights::default(),
            params: VehicleParams::default(),
            integrator: Integrator::RungeKutta4,
            model: ModelKind::Kinematic,
            clearance_m: 0.1,
        }
    }

    fn noise() -> FallbackNoise {
        FallbackNoise {
            sigma_s2: 0.09,
            sigma_v2: 0.04,
            brake_decel: 8.0,
            sigma_brake2: 0.01,
        }
    }

    fn rollout(layout: Layout, speed: f64) -> ParameterVector {
        ParameterVector::rollout(
            layout,
            VehicleState {
                x: 0.0,
                y: 0.0,
                heading: 0.0,
                speed,
            },
            0.0,
            ControlInput::ZERO,
            &VehicleModel::Kinematic,
            Integrator::RungeKutta4,
            &VehicleParams::default(),
            0.1,
        )
    }

    fn free_nlp(layout: Layout, weights: (f64, f64)) -> PlannerNlp {
        let window = 2 * layout.pin_count;
        let hard = HardConstraintScene::empty(window, 2.0, 1.645, noise());
        PlannerNlp::new(
            base_config(),
            straight_centerline(400.0),
            rollout(layout, 8.0),
            vec![Vec::new(), Vec::new()],
            hard,
            weights.0,
            weights.1,
        )
        .unwrap()
    }

    #[test]
    fn rollout_base_satisfies_dynamics() {
        let layout = Layout::new(20, 2, 1).unwrap();
        let nlp = free_nlp(layout, (1.0, 0.0));
        let res = nlp.dynamics_residuals(nlp.base(), ManeuverId::A);
        for (i, r) in res.iter().enumerate() {
            assert!(*r < 1e-12, "residual {r} at step {i}");
        }
    }

    #[test]
    fn perturbation_touches_exactly_two_blocks() {
        let layout = Layout::new(20, 2, 1).unwrap();
        let nlp = free_nlp(layout, (1.0, 0.0));
        let mut pv = nlp.base().clone();
        let step = 10;
        pv.set(
            ManeuverId::A,
            step,
            slot::Y,
            pv.get(ManeuverId::A, step, slot::Y) + 1e-3,
        );
        let res = nlp.dynamics_residuals(&pv, ManeuverId::A);
        let nonzero: Vec<usize> = res
            .iter()
            .enumerate()
            .filter(|(_, r)| **r > 1e-12)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(nonzero, vec![step - 1, step], "locality of the residual");
    }

    #[test]
    fn equality_jacobian_is_block_bidiagonal() {
        let layout = Layout::new(20, 3, 2).unwrap();
        let nlp = free_nlp(layout, (0.5, 0.5));
        let pattern = ipm::equality_jacobian_pattern(&nlp);
        // Group columns by row; each row may touch at most two support
        // points and they must be consecutive steps of one view.
        let mut by_row: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (r, c) in pattern {
            by_row.entry(r).or_default().push(c);
        }
        for (row, cols) in by_row {
            let mut steps: Vec<usize> = cols
                .iter()
                .map(|c| nlp.var_key(*c))
                .collect();
            steps.sort_unstable();
            steps.dedup();
            assert!(
                steps.len() <= 2,
                "row {row} touches steps {steps:?}"
            );
            if steps.len() == 2 {
                assert_eq!(steps[1] - steps[0], 1, "row {row} steps {steps:?}");
            }
        }
    }

    #[test]
    fn degenerate_weight_objective_matches_single_maneuver() {
        let layout2 = Layout::new(20, 2, 2).unwrap();
        let layout1 = Layout::new(20, 2, 1).unwrap();
        let blended = free_nlp(layout2, (1.0, 0.0));
        let single = free_nlp(layout1, (1.0, 0.0));
        // Same straight-coast content in every view: objectives agree.
        let j2 = blended.objective_value(blended.base());
        let j1 = single.objective_value(single.base());
        assert!((j2 - j1).abs() < 1e-9, "{j2} vs {j1}");
    }

    #[test]
    fn equal_weights_identical_branches_match_single() {
        let layout2 = Layout::new(20, 2, 2).unwrap();
        let layout1 = Layout::new(20, 2, 1).unwrap();
        let blended = free_nlp(layout2, (0.5, 0.5));
        let single = free_nlp(layout1, (1.0, 0.0));
        let j2 = blended.objective_value(blended.base());
        let j1 = single.objective_value(single.base());
        assert!((j2 - j1).abs() < 1e-9);
    }

    #[test]
    fn objective_linear_in_weights() {
        let layout = Layout::new(20, 2, 2).unwrap();
        // Give the branches different content so the weighting matters.
        let mut pv = rollout(layout, 8.0);
        for step in 2 * layout.pin_count + 1..=layout.steps {
            let p = layout.point_index(ManeuverId::B, step);
            pv.set_value_at(p, slot::V, pv.value_at(p, slot::V) + 1.5);
        }
        let make = |wa: f64, wb: f64| {
            let window = 2 * layout.pin_count;
            PlannerNlp::new(
                base_config(),
                straight_centerline(400.0),
                pv.clone(),
                vec![Vec::new(), Vec::new()],
                HardConstraintScene::empty(window, 2.0, 1.645, noise()),
                wa,
                wb,
            )
            .unwrap()
        };
        let j_a = make(1.0, 0.0).objective_value(&pv);
        let j_b = make(0.0, 1.0).objective_value(&pv);
        for w in [0.2, 0.5, 0.7] {
            let j_mix = make(w, 1.0 - w).objective_value(&pv);
            let expect = w * j_a + (1.0 - w) * j_b;
            assert!(
                (j_mix - expect).abs() < 1e-9,
                "w={w}: {j_mix} vs {expect}"
            );
        }
    }

    #[test]
    fn negative_weight_rejected() {
        let layout = Layout::new(20, 2, 2).unwrap();
        let window = 2 * layout.pin_count;
        let r = PlannerNlp::new(
            base_config(),
            straight_centerline(400.0),
            rollout(layout, 8.0),
            vec![Vec::new(), Vec::new()],
            HardConstraintScene::empty(window, 2.0, 1.645, noise()),
            -0.2,
            1.2,
        );
        assert!(matches!(r, Err(NlpError::NegativeWeight(_, _))));
    }

    #[test]
    fn free_driving_solve_accelerates_toward_desired_speed() {
        let layout = Layout::new(30, 2, 1).unwrap();
        let nlp = free_nlp(layout, (1.0, 0.0));
        let cfg = SolverConfig::default();
        let (pv, result) = nlp.solve(&cfg).unwrap();
        assert!(
            result.status.is_success(),
            "status {:?}, kkt {:.2e}, viol {:.2e}",
            result.status,
            result.kkt_error,
            result.max_violation
        );
        let terminal = pv.support_point(ManeuverId::A, layout.steps);
        assert!(
            terminal.state.speed > 9.5,
            "terminal speed {}",
            terminal.state.speed
        );
        assert!(result.max_violation <= 1e-6);
        // Pinned block untouched.
        for step in 0..=layout.pin_count {
            assert_eq!(
                pv.support_point(ManeuverId::A, step),
                nlp.base().support_point(ManeuverId::A, step)
            );
        }
    }

    #[test]
    fn visibility_constraint_limits_speed() {
        let layout = Layout::new(30, 2, 1).unwrap();
        let window = 2 * layout.pin_count;
        let mut hard = HardConstraintScene::empty(window, 2.0, 1.645, noise());
        // Visible free space ends 14 m ahead: the fallback must stop
        // within it, which caps speed in the irreversible window.
        hard.visibility_limit = Some(14.0);
        let nlp = PlannerNlp::new(
            base_config(),
            straight_centerline(400.0),
            rollout(layout, 8.0),
            vec![Vec::new()],
            hard,
            1.0,
            0.0,
        )
        .unwrap();
        let (pv, result) = nlp.solve(&SolverConfig::default()).unwrap();
        assert!(result.status.is_success(), "{:?}", result.status);
        for step in layout.pin_count + 1..=window {
            let res = nlp.chance_residuals_at(&pv, step);
            assert!(res[0] <= 1e-6, "step {step} residual {}", res[0]);
        }
    }

    #[test]
    fn shifted_solution_keeps_feasible_dynamics() {
        let layout = Layout::new(30, 2, 1).unwrap();
        let nlp = free_nlp(layout, (1.0, 0.0));
        let (pv, _) = nlp.solve(&SolverConfig::default()).unwrap();
        let shifted = shift_warm_start(
            &pv,
            layout.pin_count,
            layout,
            &VehicleModel::Kinematic,
            Integrator::RungeKutta4,
            &VehicleParams::default(),
            0.1,
        );
        let nlp2 = PlannerNlp::new(
            base_config(),
            straight_centerline(400.0),
            shifted.clone(),
            vec![Vec::new()],
            HardConstraintScene::empty(2 * layout.pin_count, 2.0, 1.645, noise()),
            1.0,
            0.0,
        )
        .unwrap();
        let res = nlp2.dynamics_residuals(&shifted, ManeuverId::A);
        for (i, r) in res.iter().enumerate() {
            assert!(*r < 1e-8, "shifted residual {r} at {i}");
        }
    }
}
