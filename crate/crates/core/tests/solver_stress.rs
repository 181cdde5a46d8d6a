//! Planner-scale solver stress cases distilled from simulation failures.

use std::sync::Arc;

use mmpc::costs::CostWeights;
use mmpc::geometry::Centerline;
use mmpc::nlp::{
    FallbackNoise, HardConstraintScene, Layout, ManeuverId, ModelKind, ParameterVector,
    PlannerConfig, PlannerNlp, SupportPoint,
};
use mmpc::solver::ipm::SolverConfig;
use mmpc::vehicle::{ControlInput, Integrator, VehicleParams, VehicleState};

fn straight() -> Arc<Centerline> {
    let pts: Vec<(f64, f64)> = (0..=60).map(|i| (10.0 * i as f64, 0.0)).collect();
    Arc::new(Centerline::from_waypoints(&pts).unwrap())
}

fn config() -> PlannerConfig {
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

/// Full-braking warm start: the distilled recovery-solve case.
fn braking_start(layout: Layout, v0: f64) -> ParameterVector {
    let params = VehicleParams::default();
    let mut pv = ParameterVector::zeros(layout);
    let mut state = VehicleState {
        x: 20.0,
        y: 0.0,
        heading: 0.0,
        speed: v0,
    };
    let mut arc = 20.0;
    for step in 0..=layout.steps {
        let accel = if state.speed > 1e-9 {
            (-8.0f64).max(-state.speed / 0.1)
        } else {
            0.0
        };
        let sp = SupportPoint {
            state,
            arc_len: arc,
            input: ControlInput { steer: 0.0, accel },
            path_speed: state.speed.max(0.0),
        };
        for m in layout.maneuver_ids() {
            pv.set_support_point(m, step, &sp);
        }
        arc += sp.path_speed * 0.1;
        state = mmpc::vehicle::step_state(
            Integrator::RungeKutta4,
            &mmpc::vehicle::VehicleModel::Kinematic,
            state,
            sp.input,
            0.1,
            &params,
        );
        state.speed = state.speed.max(0.0);
    }
    pv
}

#[test]
fn recovery_solve_from_braking_warm_start() {
    let layout = Layout::new(60, 4, 2).unwrap();
    let mut hard = HardConstraintScene::empty(
        8,
        2.0,
        1.645,
        FallbackNoise {
            sigma_s2: 0.09,
            sigma_v2: 0.04,
            brake_decel: 8.0,
            sigma_brake2: 0.0064,
        },
    );
    hard.visibility_limit = Some(20.0 + 80.0);
    let nlp = PlannerNlp::new(
        config(),
        straight(),
        braking_start(layout, 8.0),
        vec![Vec::new(), Vec::new()],
        hard,
        0.0,
        1.0,
    )
    .unwrap();
    let log = std::env::temp_dir().join("mmpc_stress_iters.csv");
    let mut cfg = SolverConfig::default();
    cfg.debug_iteration_log = Some(log.clone());
    let (pv, result) = nlp.solve(&cfg).unwrap();
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    for l in lines.iter().rev().take(12).rev() {
        println!("{l}");
    }
    println!(
        "status {:?} iters {} kkt {:.2e} viol {:.2e} v_end {:.2}",
        result.status,
        result.iterations,
        result.kkt_error,
        result.max_violation,
        pv.support_point(ManeuverId::A, layout.steps).state.speed
    );
    let executable = result.status.is_success()
        || (result.status == mmpc::solver::ipm::SolveStatus::AcceptablyFeasible
            && result.max_violation <= 1e-5);
    assert!(executable, "{:?}", result.status);
}

/// Stopped behind an ambiguous obstacle, equal maneuver weights: branch A
/// (obstacle real) wants to stay, branch B wants to proceed.
#[test]
fn stopped_vehicle_ambiguous_phantom_blend() {
    let layout = Layout::new(60, 4, 2).unwrap();
    let mut hard = HardConstraintScene::empty(
        8,
        2.0,
        1.645,
        FallbackNoise {
            sigma_s2: 0.09,
            sigma_v2: 0.04,
            brake_decel: 8.0,
            sigma_brake2: 0.0064,
        },
    );
    hard.leader_stop = Some(mmpc::uncertainty::GaussianScalar::new(26.9, 0.34));
    let phantom = mmpc::costs::CollisionObject {
        frenet_per_step: vec![(26.9, 0.0); 61],
        lambda_lon: vec![5.6; 61],
        lambda_lat: vec![1.1; 61],
    };
    // Parked at 19.15 after a full stop.
    let base = braking_start(layout, 0.0);
    let mut shifted = base.clone();
    for m in layout.maneuver_ids() {
        for step in 0..=layout.steps {
            let mut sp = shifted.support_point(m, step);
            sp.arc_len = 19.15;
            sp.state.x = 19.15;
            shifted.set_support_point(m, step, &sp);
        }
    }
    let mut cfg = config();
    cfg.desired_speed = 7.2;
    cfg.speed_cap = 9.6;
    let nlp = PlannerNlp::new(
        cfg,
        straight(),
        shifted,
        vec![vec![phantom], Vec::new()],
        hard,
        0.5,
        0.5,
    )
    .unwrap();
    let mut scfg = SolverConfig::default();
    if std::env::var("MMPC_QN").is_ok() {
        scfg.hessian_mode = mmpc::solver::ipm::HessianMode::QuasiNewton;
    }
    if let Ok(v) = std::env::var("MMPC_ITERS") {
        scfg.max_iters = v.parse().unwrap();
    }
    let (pv, result) = nlp.solve(&scfg).unwrap();
    println!(
        "status {:?} iters {} kkt {:.2e} viol {:.2e}",
        result.status, result.iterations, result.kkt_error, result.max_violation
    );
    let a_end = pv.support_point(ManeuverId::A, layout.steps);
    let b_end = pv.support_point(ManeuverId::B, layout.steps);
    println!("A tail s {:.1} v {:.2} | B tail s {:.1} v {:.2}", a_end.arc_len, a_end.state.speed, b_end.arc_len, b_end.state.speed);
    let executable = result.status.is_success()
        || (result.status == mmpc::solver::ipm::SolveStatus::AcceptablyFeasible
            && result.max_violation <= 1e-5);
    assert!(executable, "{:?}", result.status);
}
