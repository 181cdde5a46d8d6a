//! Parameter-vector layout with pinning and maneuver-split views.
//!
//! A support point bundles the contouring-augmented state
//! `[x, y, psi, v, s]` with the action `[steer, accel, path_speed]`.
//! One maneuver stores `n + 1` points. A second maneuver shares the
//! prefix `0..=2k` (the pinned block plus the segment executed next) and
//! appends `n - 2k` exclusive tail points, so both decoded trajectories
//! are bit-identical on the shared window by construction.

use crate::error::NlpError;
use crate::vehicle::{ControlInput, Integrator, VehicleModel, VehicleParams, VehicleState};

/// Number of values per support point.
pub const PT_DIM: usize = 8;

/// Value slots within a support point.
pub mod slot {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const PSI: usize = 2;
    pub const V: usize = 3;
    pub const S: usize = 4;
    pub const STEER: usize = 5;
    pub const ACC: usize = 6;
    pub const SDOT: usize = 7;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ManeuverId {
    A,
    B,
}

impl ManeuverId {
    pub fn index(self) -> usize {
        match self {
            ManeuverId::A => 0,
            ManeuverId::B => 1,
        }
    }
}

/// Index geometry of the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    /// Horizon steps `n`; points run 0..=n per maneuver.
    pub steps: usize,
    /// Pinned control count `k`.
    pub pin_count: usize,
    /// 1 or 2.
    pub maneuvers: usize,
}

impl Layout {
    pub fn new(steps: usize, pin_count: usize, maneuvers: usize) -> Result<Self, NlpError> {
        if pin_count < 1 || steps <= 2 * pin_count || !(1..=2).contains(&maneuvers) {
            return Err(NlpError::InvalidHorizon {
                n: steps,
                k: pin_count,
            });
        }
        Ok(Layout {
            steps,
            pin_count,
            maneuvers,
        })
    }

    /// Stored support points: `n + 1` plus `n - 2k` extra per added
    /// maneuver.
    pub fn total_points(&self) -> usize {
        (self.steps + 1) + (self.maneuvers - 1) * (self.steps - 2 * self.pin_count)
    }

    pub fn num_values(&self) -> usize {
        self.total_points() * PT_DIM
    }

    /// Storage index of a maneuver-local step.
    pub fn point_index(&self, m: ManeuverId, step: usize) -> usize {
        debug_assert!(step <= self.steps);
        match m {
            ManeuverId::A => step,
            ManeuverId::B => {
                debug_assert!(self.maneuvers == 2);
                let shared_end = 2 * self.pin_count;
                if step <= shared_end {
                    step
                } else {
                    self.steps + (step - shared_end)
                }
            }
        }
    }

    /// Step index of a stored point within the given view, if the point
    /// belongs to it.
    pub fn step_of_point(&self, m: ManeuverId, point: usize) -> Option<usize> {
        let shared_end = 2 * self.pin_count;
        match m {
            ManeuverId::A => (point <= self.steps).then_some(point),
            ManeuverId::B => {
                if point <= shared_end {
                    Some(point)
                } else if point > self.steps {
                    Some(shared_end + (point - self.steps))
                } else {
                    None
                }
            }
        }
    }

    pub fn maneuver_ids(&self) -> impl Iterator<Item = ManeuverId> {
        [ManeuverId::A, ManeuverId::B]
            .into_iter()
            .take(self.maneuvers)
    }
}

/// One decoded support point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupportPoint {
    pub state: VehicleState,
    pub arc_len: f64,
    pub input: ControlInput,
    pub path_speed: f64,
}

/// Flat storage for all support points of a (possibly two-maneuver)
/// trajectory plan.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    pub layout: Layout,
    data: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(layout: Layout) -> Self {
        ParameterVector {
            layout,
            data: vec![0.0; layout.num_values()],
        }
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub fn value_at(&self, point: usize, s: usize) -> f64 {
        self.data[point * PT_DIM + s]
    }

    pub fn set_value_at(&mut self, point: usize, s: usize, v: f64) {
        self.data[point * PT_DIM + s] = v;
    }

    pub fn get(&self, m: ManeuverId, step: usize, s: usize) -> f64 {
        self.value_at(self.layout.point_index(m, step), s)
    }

    pub fn set(&mut self, m: ManeuverId, step: usize, s: usize, v: f64) {
        let p = self.layout.point_index(m, step);
        self.set_value_at(p, s, v);
    }

    pub fn support_point(&self, m: ManeuverId, step: usize) -> SupportPoint {
        let p = self.layout.point_index(m, step);
        SupportPoint {
            state: VehicleState {
                x: self.value_at(p, slot::X),
                y: self.value_at(p, slot::Y),
                heading: self.value_at(p, slot::PSI),
                speed: self.value_at(p, slot::V),
            },
            arc_len: self.value_at(p, slot::S),
            input: ControlInput {
                steer: self.value_at(p, slot::STEER),
                accel: self.value_at(p, slot::ACC),
            },
            path_speed: self.value_at(p, slot::SDOT),
        }
    }

    pub fn set_support_point(&mut self, m: ManeuverId, step: usize, sp: &SupportPoint) {
        let p = self.layout.point_index(m, step);
        self.set_value_at(p, slot::X, sp.state.x);
        self.set_value_at(p, slot::Y, sp.state.y);
        self.set_value_at(p, slot::PSI, sp.state.heading);
        self.set_value_at(p, slot::V, sp.state.speed);
        self.set_value_at(p, slot::S, sp.arc_len);
        self.set_value_at(p, slot::STEER, sp.input.steer);
        self.set_value_at(p, slot::ACC, sp.input.accel);
        self.set_value_at(p, slot::SDOT, sp.path_speed);
    }

    /// Decode one maneuver view as a full trajectory of `n + 1` points.
    pub fn decode_view(&self, m: ManeuverId) -> Vec<SupportPoint> {
        (0..=self.layout.steps)
            .map(|i| self.support_point(m, i))
            .collect()
    }

    /// Initialize every step of every view by forward simulation from a
    /// start state with a constant input.
    pub fn rollout(
        layout: Layout,
        start: VehicleState,
        start_arc_len: f64,
        input: ControlInput,
        model: &VehicleModel,
        integrator: Integrator,
        params: &VehicleParams,
        dt: f64,
    ) -> Self {
        let mut pv = ParameterVector::zeros(layout);
        let mut state = start;
        let mut arc = start_arc_len;
        for step in 0..=layout.steps {
            let path_speed = state.speed.max(0.0);
            let sp = SupportPoint {
                state,
                arc_len: arc,
                input,
                path_speed,
            };
            for m in layout.maneuver_ids() {
                if layout.point_index(m, step) != layout.point_index(ManeuverId::A, step)
                    || m == ManeuverId::A
                {
                    pv.set_support_point(m, step, &sp);
                }
            }
            state = crate::vehicle::step_state(integrator, model, state, input, dt, params);
            arc += path_speed * dt;
        }
        pv
    }
}

/// Shift a solved plan by `steps_executed` steps: surviving points move
/// toward index zero, the tail is padded by forward-simulating the last
/// state with its last action (so padded dynamics residuals vanish), and
/// a fresh second maneuver (when the new layout has one and the old did
/// not) copies the surviving branch.
#[allow(clippy::too_many_arguments)]
pub fn shift_warm_start(
    prev: &ParameterVector,
    steps_executed: usize,
    new_layout: Layout,
    model: &VehicleModel,
    integrator: Integrator,
    params: &VehicleParams,
    dt: f64,
) -> ParameterVector {
    assert_eq!(prev.layout.steps, new_layout.steps, "horizon must not change");
    let n = new_layout.steps;
    let mut out = ParameterVector::zeros(new_layout);
    for m in new_layout.maneuver_ids() {
        // Source view: copy B from B when the old layout had one.
        let src = if m == ManeuverId::B && prev.layout.maneuvers < 2 {
            ManeuverId::A
        } else {
            m
        };
        let mut last = prev.support_point(src, n);
        for step in 0..=n {
            let from = step + steps_executed;
            let sp = if from <= n {
                prev.support_point(src, from)
            } else {
                // Hold the last action and simulate forward.
                let next_state = crate::vehicle::step_state(
                    integrator, model, last.state, last.input, dt, params,
                );
                let path_speed = last.path_speed.max(0.0);
                SupportPoint {
                    state: next_state,
                    arc_len: last.arc_len + path_speed * dt,
                    input: last.input,
                    path_speed,
                }
            };
            if from > n {
                last = sp;
            }
            out.set_support_point(m, step, &sp);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::{integrate_rk4, Integrator, VehicleModel, VehicleParams};

    fn basic_layout(m: usize) -> Layout {
        Layout::new(60, 2, m).unwrap()
    }

    #[test]
    fn point_counts_match_split_layout() {
        assert_eq!(basic_layout(1).total_points(), 61);
        // Two maneuvers add (n - 2k) points.
        assert_eq!(basic_layout(2).total_points(), 61 + 56);
    }

    #[test]
    fn zero_pinning_rejected() {
        assert!(Layout::new(60, 0, 1).is_err());
        assert!(Layout::new(4, 2, 1).is_err());
        assert!(Layout::new(60, 2, 3).is_err());
    }

    #[test]
    fn views_share_prefix_storage() {
        let l = basic_layout(2);
        for step in 0..=2 * l.pin_count {
            assert_eq!(
                l.point_index(ManeuverId::A, step),
                l.point_index(ManeuverId::B, step)
            );
        }
        assert_ne!(
            l.point_index(ManeuverId::A, 2 * l.pin_count + 1),
            l.point_index(ManeuverId::B, 2 * l.pin_count + 1)
        );
        assert_eq!(l.point_index(ManeuverId::B, l.steps), l.total_points() - 1);
    }

    #[test]
    fn decoded_views_agree_on_shared_prefix() {
        let l = basic_layout(2);
        let mut pv = ParameterVector::zeros(l);
        for p in 0..l.total_points() {
            for s in 0..PT_DIM {
                pv.set_value_at(p, s, (p * PT_DIM + s) as f64 * 0.1);
            }
        }
        let a = pv.decode_view(ManeuverId::A);
        let b = pv.decode_view(ManeuverId::B);
        for i in 0..=2 * l.pin_count {
            assert_eq!(a[i], b[i], "shared prefix must decode identically");
        }
        assert_ne!(a[2 * l.pin_count + 1], b[2 * l.pin_count + 1]);
    }

    #[test]
    fn shift_by_zero_is_identity() {
        let l = basic_layout(2);
        let params = VehicleParams::default();
        let model = VehicleModel::Kinematic;
        let pv = ParameterVector::rollout(
            l,
            VehicleState {
                x: 0.0,
                y: 0.0,
                heading: 0.0,
                speed: 8.0,
            },
            0.0,
            ControlInput {
                steer: 0.02,
                accel: 0.3,
            },
            &model,
            Integrator::RungeKutta4,
            &params,
            0.1,
        );
        let shifted = shift_warm_start(&pv, 0, l, &model, Integrator::RungeKutta4, &params, 0.1);
        assert_eq!(pv, shifted);
    }

    #[test]
    fn shift_by_k_moves_executed_block_into_pin_bitexactly() {
        let l = basic_layout(2);
        let params = VehicleParams::default();
        let model = VehicleModel::Kinematic;
        let pv = ParameterVector::rollout(
            l,
            VehicleState {
                x: 1.0,
                y: -2.0,
                heading: 0.1,
                speed: 7.0,
            },
            5.0,
            ControlInput {
                steer: -0.01,
                accel: 0.2,
            },
            &model,
            Integrator::RungeKutta4,
            &params,
            0.1,
        );
        let k = l.pin_count;
        let shifted = shift_warm_start(&pv, k, l, &model, Integrator::RungeKutta4, &params, 0.1);
        for step in 0..=k {
            for s in 0..PT_DIM {
                let want = pv.get(ManeuverId::A, step + k, s);
                let got = shifted.get(ManeuverId::A, step, s);
                assert_eq!(want.to_bits(), got.to_bits(), "step {step} slot {s}");
            }
        }
    }

    #[test]
    fn shift_padding_satisfies_dynamics() {
        let l = basic_layout(1);
        let params = VehicleParams::default();
        let model = VehicleModel::Kinematic;
        let pv = ParameterVector::rollout(
            l,
            VehicleState {
                x: 0.0,
                y: 0.0,
                heading: 0.0,
                speed: 6.0,
            },
            0.0,
            ControlInput {
                steer: 0.05,
                accel: 0.1,
            },
            &model,
            Integrator::RungeKutta4,
            &params,
            0.1,
        );
        let shifted = shift_warm_start(&pv, 4, l, &model, Integrator::RungeKutta4, &params, 0.1);
        // Every consecutive pair must satisfy the integrator relation.
        for i in 0..l.steps {
            let a = shifted.support_point(ManeuverId::A, i);
            let b = shifted.support_point(ManeuverId::A, i + 1);
            let pred = integrate_rk4(
                &model,
                a.state.to_array(),
                [a.input.steer, a.input.accel],
                0.1,
                &params,
            );
            let err = (pred[0] - b.state.x).abs().max((pred[1] - b.state.y).abs())
                .max((pred[2] - b.state.heading).abs())
                .max((pred[3] - b.state.speed).abs())
                .max((a.arc_len + a.path_speed * 0.1 - b.arc_len).abs());
            assert!(err < 1e-9, "padding residual {err} at step {i}");
        }
    }

    #[test]
    fn fresh_branch_copies_survivor() {
        let l1 = basic_layout(1);
        let l2 = basic_layout(2);
        let params = VehicleParams::default();
        let model = VehicleModel::Kinematic;
        let pv = ParameterVector::rollout(
            l1,
            VehicleState {
                x: 0.0,
                y: 0.0,
                heading: 0.0,
                speed: 9.0,
            },
            0.0,
            ControlInput::ZERO,
            &model,
            Integrator::RungeKutta4,
            &params,
            0.1,
        );
        let shifted = shift_warm_start(&pv, 2, l2, &model, Integrator::RungeKutta4, &params, 0.1);
        for step in 0..=l2.steps {
            assert_eq!(
                shifted.support_point(ManeuverId::A, step),
                shifted.support_point(ManeuverId::B, step)
            );
        }
    }
}
