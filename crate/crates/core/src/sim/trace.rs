//! Executed-trajectory traces and their CSV/JSON forms.
//!
//! Column order of the CSV is documented in `docs/trace_schema.md`. Wall
//! times are kept in memory for runtime studies but never serialized, so
//! identical (scenario, seed, config) runs produce byte-identical files.

use serde::{Deserialize, Serialize};

/// One executed step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceStep {
    pub index: usize,
    pub t_s: f64,
    pub x_m: f64,
    pub y_m: f64,
    pub heading_rad: f64,
    pub speed_mps: f64,
    pub s_m: f64,
    pub d_m: f64,
    pub steer_rad: f64,
    pub accel_mps2: f64,
    pub jerk_mps3: f64,
    pub weight_a: f64,
    pub weight_b: f64,
    pub fallback_stop_mean_m: f64,
    pub fallback_stop_std_m: f64,
    /// Deterministic-form chance residuals (non-positive = satisfied);
    /// None when the indicator is inactive.
    pub margin_visibility: Option<f64>,
    pub margin_leader: Option<f64>,
    pub margin_yield: Option<f64>,
    /// Worst circle-to-ellipse residual over objects (non-positive =
    /// satisfied); None without obstacles.
    pub margin_circles: Option<f64>,
    pub zplan_active: bool,
    pub collision: bool,
}

/// One planning cycle's solve statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub t_s: f64,
    pub status: String,
    pub iterations: usize,
    pub objective: f64,
    pub kkt_error: f64,
    pub max_violation: f64,
    pub weight_a: f64,
    pub weight_b: f64,
    pub maneuvers: usize,
    /// Measured solve time; deliberately not serialized.
    #[serde(skip)]
    pub wall_time_s: f64,
    /// Shared-segment safety check: true when the blended plan satisfies
    /// the window constraints (recorded each replanning step).
    pub shared_window_safe: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimTrace {
    pub scenario_name: String,
    pub planner: String,
    pub seed: u64,
    pub dt_s: f64,
    pub steps: Vec<TraceStep>,
    pub cycles: Vec<CycleRecord>,
}

pub const CSV_HEADER: &str = "index,t_s,x_m,y_m,heading_rad,speed_mps,s_m,d_m,steer_rad,accel_mps2,jerk_mps3,weight_a,weight_b,fallback_stop_mean_m,fallback_stop_std_m,margin_visibility,margin_leader,margin_yield,margin_circles,zplan_active,collision";

fn opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

impl SimTrace {
    /// Per-step CSV, one row per executed step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                s.index,
                s.t_s,
                s.x_m,
                s.y_m,
                s.heading_rad,
                s.speed_mps,
                s.s_m,
                s.d_m,
                s.steer_rad,
                s.accel_mps2,
                s.jerk_mps3,
                s.weight_a,
                s.weight_b,
                s.fallback_stop_mean_m,
                s.fallback_stop_std_m,
                opt(s.margin_visibility),
                opt(s.margin_leader),
                opt(s.margin_yield),
                opt(s.margin_circles),
                s.zplan_active as u8,
                s.collision as u8,
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// Summary statistics of a trace. Wall-time statistics are computed from
/// the in-memory records and never serialized with the summary.
#[derive(Clone, Debug, Serialize)]
pub struct Metrics {
    pub min_speed_mps: f64,
    pub final_speed_mps: f64,
    pub max_abs_accel_mps2: f64,
    pub max_deceleration_mps2: f64,
    pub max_abs_jerk_mps3: f64,
    /// Arc length at which the strongest deceleration occurred.
    pub peak_decel_position_s_m: f64,
    pub constraint_violation_count: usize,
    pub realized_collision_count: usize,
    pub solve_iterations_mean: f64,
    pub solve_iterations_max: usize,
    #[serde(skip)]
    pub solve_time_mean_s: f64,
    #[serde(skip)]
    pub solve_time_max_s: f64,
}

/// Reduce a trace to its summary.
pub fn metrics(trace: &SimTrace) -> Metrics {
    let mut min_speed = f64::INFINITY;
    let mut max_abs_accel: f64 = 0.0;
    let mut max_decel: f64 = 0.0;
    let mut max_abs_jerk: f64 = 0.0;
    let mut peak_pos = 0.0;
    let mut violations = 0usize;
    let mut collisions = 0usize;
    for s in &trace.steps {
        min_speed = min_speed.min(s.speed_mps);
        max_abs_accel = max_abs_accel.max(s.accel_mps2.abs());
        if -s.accel_mps2 > max_decel {
            max_decel = -s.accel_mps2;
            peak_pos = s.s_m;
        }
        max_abs_jerk = max_abs_jerk.max(s.jerk_mps3.abs());
        let violated = [s.margin_visibility, s.margin_leader, s.margin_yield, s.margin_circles]
            .iter()
            .any(|m| m.is_some_and(|v| v > 1e-6));
        if violated {
            violations += 1;
        }
        if s.collision {
            collisions += 1;
        }
    }
    let n_cycles = trace.cycles.len().max(1) as f64;
    let iter_sum: usize = trace.cycles.iter().map(|c| c.iterations).sum();
    let time_sum: f64 = trace.cycles.iter().map(|c| c.wall_time_s).sum();
    Metrics {
        min_speed_mps: if trace.steps.is_empty() { 0.0 } else { min_speed },
        final_speed_mps: trace.steps.last().map_or(0.0, |s| s.speed_mps),
        max_abs_accel_mps2: max_abs_accel,
        max_deceleration_mps2: max_decel,
        max_abs_jerk_mps3: max_abs_jerk,
        peak_decel_position_s_m: peak_pos,
        constraint_violation_count: violations,
        realized_collision_count: collisions,
        solve_iterations_mean: iter_sum as f64 / n_cycles,
        solve_iterations_max: trace.cycles.iter().map(|c| c.iterations).max().unwrap_or(0),
        solve_time_mean_s: time_sum / n_cycles,
        solve_time_max_s: trace
            .cycles
            .iter()
            .map(|c| c.wall_time_s)
            .fold(0.0, f64::max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(i: usize, speed: f64, accel: f64) -> TraceStep {
        TraceStep {
            index: i,
            t_s: i as f64 * 0.1,
            x_m: i as f64,
            y_m: 0.0,
            heading_rad: 0.0,
            speed_mps: speed,
            s_m: i as f64,
            d_m: 0.0,
            steer_rad: 0.0,
            accel_mps2: accel,
            jerk_mps3: 0.0,
            weight_a: 1.0,
            weight_b: 0.0,
            fallback_stop_mean_m: 10.0,
            fallback_stop_std_m: 0.5,
            margin_visibility: Some(-3.0),
            margin_leader: None,
            margin_yield: None,
            margin_circles: None,
            zplan_active: false,
            collision: false,
        }
    }

    fn tiny_trace() -> SimTrace {
        SimTrace {
            scenario_name: "t".into(),
            planner: "dt".into(),
            seed: 0,
            dt_s: 0.1,
            steps: vec![step(0, 5.0, 0.0), step(1, 5.0, 0.0), step(2, 5.0, 0.0)],
            cycles: vec![],
        }
    }

    #[test]
    fn constant_speed_trace_has_zero_accel_metrics() {
        let m = metrics(&tiny_trace());
        assert_eq!(m.max_abs_accel_mps2, 0.0);
        assert_eq!(m.min_speed_mps, 5.0);
        assert_eq!(m.constraint_violation_count, 0);
    }

    #[test]
    fn full_stop_trace_min_speed_zero() {
        let mut t = tiny_trace();
        t.steps.push(step(3, 0.0, -3.0));
        let m = metrics(&t);
        assert_eq!(m.min_speed_mps, 0.0);
        assert_eq!(m.max_deceleration_mps2, 3.0);
        assert_eq!(m.peak_decel_position_s_m, 3.0);
    }

    #[test]
    fn metrics_idempotent_over_copies() {
        let t = tiny_trace();
        let a = metrics(&t);
        let b = metrics(&t.clone());
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let t = tiny_trace();
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("0,0,"));
        // Inactive margins serialize as empty cells.
        assert!(lines[1].contains(",,"));
    }
}
