//! End-to-end receding-horizon runs of the bundled scenarios.

use mmpc::sim::{metrics, run_receding_horizon, PlannerKind, Scenario};

fn load(name: &str) -> Scenario {
    let path = format!(
        "{}/../../scenarios/{name}.toml",
        env!("CARGO_MANIFEST_DIR")
    );
    Scenario::load(std::path::Path::new(&path)).expect("bundled scenario loads")
}

#[test]
fn free_straight_converges_to_desired_speed() {
    let sc = load("free_straight");
    let trace = run_receding_horizon(&sc, PlannerKind::DecisionTheoretic, 1).unwrap();
    let v_des = 0.9 * sc.speed_limit_mps;
    let tail: Vec<f64> = trace
        .steps
        .iter()
        .skip(trace.steps.len() - 20)
        .map(|s| s.speed_mps)
        .collect();
    for v in &tail {
        assert!(
            (v - v_des).abs() <= 0.1,
            "tail speed {v} not within 0.1 of {v_des}; profile {:?}",
            trace.steps.iter().map(|s| s.speed_mps).collect::<Vec<_>>()
        );
    }
    let m = metrics(&trace);
    assert_eq!(m.realized_collision_count, 0);
    assert_eq!(m.constraint_violation_count, 0);
}

#[test]
fn phantom_comparison_smoke() {
    for name in ["phantom_cleared", "phantom_persistent"] {
        let sc = load(name);
        let dt = run_receding_horizon(&sc, PlannerKind::DecisionTheoretic, 1).unwrap();
        let conv = run_receding_horizon(&sc, PlannerKind::Conventional, 1).unwrap();
        let (md, mc) = (metrics(&dt), metrics(&conv));
        println!(
            "{name}: dt min_v {:.2} max_dec {:.2} | conv min_v {:.2} max_dec {:.2}",
            md.min_speed_mps, md.max_deceleration_mps2, mc.min_speed_mps, mc.max_deceleration_mps2
        );
        println!(
            "  dt speeds: {:?}",
            dt.steps.iter().step_by(4).map(|s| (s.speed_mps * 10.0).round() / 10.0).collect::<Vec<_>>()
        );
        println!(
            "  cv speeds: {:?}",
            conv.steps.iter().step_by(4).map(|s| (s.speed_mps * 10.0).round() / 10.0).collect::<Vec<_>>()
        );
        println!(
            "  dt zplan steps: {}, conv zplan steps: {}",
            dt.steps.iter().filter(|s| s.zplan_active).count(),
            conv.steps.iter().filter(|s| s.zplan_active).count()
        );
        assert_eq!(metrics(&dt).realized_collision_count, 0, "{name} dt collision");
        assert_eq!(metrics(&conv).realized_collision_count, 0, "{name} conv collision");
    }
}
