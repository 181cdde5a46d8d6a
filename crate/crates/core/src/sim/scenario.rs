//! Declarative scenario files.
//!
//! Scenarios are TOML with unit-suffixed keys; centerlines are inline
//! coordinate lists. Physical quantities are SI throughout.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costs::CostWeights;
use crate::error::SimError;
use crate::nlp::ModelKind;
use crate::solver::ipm::SolverConfig;
use crate::vehicle::{Integrator, VehicleParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub dt_s: f64,
    pub horizon_s: f64,
    pub pin_time_s: f64,
    pub duration_s: f64,
    pub speed_limit_mps: f64,
    pub sensor_range_m: f64,
    pub s_min_m: f64,
    pub risk_alpha: f64,
    #[serde(default = "default_corridor")]
    pub corridor_half_width_m: f64,
    /// Confidence level of the obstacle uncertainty ellipses.
    #[serde(default = "default_crc_alpha")]
    pub ellipse_alpha: f64,
    pub ego: EgoSpec,
    pub centerlines: Vec<CenterlineSpec>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    pub maneuvers: ManeuverSpec,
    #[serde(default)]
    pub intersection: Option<IntersectionSpec>,
    #[serde(default)]
    pub weights: CostWeights,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn default_corridor() -> f64 {
    20.0
}
fn default_crc_alpha() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoSpec {
    pub model: ModelKind,
    #[serde(default = "default_integrator")]
    pub integrator: Integrator,
    pub route: String,
    pub start_s_m: f64,
    #[serde(default)]
    pub start_d_m: f64,
    pub start_speed_mps: f64,
    #[serde(default = "default_sigma_pos")]
    pub sigma_pos_m: f64,
    #[serde(default = "default_sigma_speed")]
    pub sigma_speed_mps: f64,
    #[serde(default = "default_brake")]
    pub brake_decel_mps2: f64,
    #[serde(default = "default_sigma_brake")]
    pub sigma_brake_mps2: f64,
    #[serde(default = "default_comfort")]
    pub comfort_decel_mps2: f64,
    #[serde(default = "default_headway")]
    pub time_headway_s: f64,
    #[serde(default)]
    pub params: VehicleParams,
}

fn default_integrator() -> Integrator {
    Integrator::RungeKutta4
}
fn default_sigma_pos() -> f64 {
    0.3
}
fn default_sigma_speed() -> f64 {
    0.2
}
fn default_brake() -> f64 {
    8.0
}
fn default_sigma_brake() -> f64 {
    0.08
}
fn default_comfort() -> f64 {
    -2.5
}
fn default_headway() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterlineSpec {
    pub id: String,
    pub points_xy_m: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub id: String,
    pub route: String,
    pub start_s_m: f64,
    #[serde(default)]
    pub offset_d_m: f64,
    pub speed_mps: f64,
    #[serde(default = "default_existence")]
    pub existence: f64,
    /// Whether the object is physically present; phantom detections that
    /// are not real set this to false.
    #[serde(default = "default_true")]
    pub exists_in_truth: bool,
    /// When set, existence switches to `resolved_existence` at this time.
    #[serde(default)]
    pub resolve_time_s: Option<f64>,
    #[serde(default)]
    pub resolved_existence: Option<f64>,
    #[serde(default = "default_obj_sigma_pos")]
    pub sigma_pos_m: f64,
    #[serde(default = "default_obj_sigma_speed")]
    pub sigma_speed_mps: f64,
    #[serde(default = "default_obj_len")]
    pub length_m: f64,
    #[serde(default = "default_obj_width")]
    pub width_m: f64,
    #[serde(default = "default_obj_brake")]
    pub brake_decel_mps2: f64,
    /// Piecewise-constant acceleration phases; empty means constant
    /// speed.
    #[serde(default)]
    pub accel_profile: Vec<AccelPhase>,
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default = "default_route_prob")]
    pub route_probability: f64,
}

fn default_existence() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_obj_sigma_pos() -> f64 {
    0.4
}
fn default_obj_sigma_speed() -> f64 {
    0.3
}
fn default_obj_len() -> f64 {
    4.5
}
fn default_obj_width() -> f64 {
    1.8
}
fn default_obj_brake() -> f64 {
    6.0
}
fn default_route_prob() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccelPhase {
    pub t_s: f64,
    pub accel_mps2: f64,
}

/// Names the binary maneuver pair and the weight source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ManeuverSpec {
    /// No alternative maneuvers; plain single-maneuver planning.
    Single,
    /// A: the named detection is real (brake for it); B: it is clear.
    /// Weights from its existence probability.
    Phantom { object: String },
    /// A: group a is real; B: group b is real. Weights from the group
    /// existence probabilities.
    Groups {
        group_a: Vec<String>,
        group_b: Vec<String>,
    },
    /// A: the named oncoming vehicle crosses (stop before the merge
    /// point); B: it yields. Weights from the inferred crossing
    /// probability.
    Crossing { object: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntersectionSpec {
    /// Merge point on the ego route.
    pub merge_point_s_m: f64,
    #[serde(default)]
    pub crossing_route: Option<String>,
    /// Merge point measured along the crossing route.
    #[serde(default)]
    pub crossing_merge_s_m: Option<f64>,
    /// Sight-triangle setbacks of the occluding corner.
    #[serde(default = "default_setback")]
    pub occlusion_setback_ego_m: f64,
    #[serde(default = "default_setback")]
    pub occlusion_setback_cross_m: f64,
    /// Whether the ego must yield at the merge point.
    #[serde(default)]
    pub ego_must_yield: bool,
    /// Speed limit of the crossing road (defaults to the scenario limit).
    #[serde(default)]
    pub crossing_speed_limit_mps: Option<f64>,
}

fn default_setback() -> f64 {
    6.0
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let sc: Scenario = toml::from_str(text).map_err(|e| SimError::BadScenario {
            field: "toml".into(),
            message: e.to_string(),
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    /// Horizon steps `n`.
    pub fn horizon_steps(&self) -> usize {
        (self.horizon_s / self.dt_s).round() as usize
    }

    /// Pin count `k`.
    pub fn pin_count(&self) -> usize {
        (self.pin_time_s / self.dt_s).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |field: &str, message: String| -> SimError {
            SimError::BadScenario {
                field: field.into(),
                message,
            }
        };
        let integral = |v: f64| (v / self.dt_s - (v / self.dt_s).round()).abs() < 1e-9;
        if self.dt_s <= 0.0 {
            return Err(bad("dt_s", "must be positive".into()));
        }
        if !integral(self.horizon_s) {
            return Err(bad("horizon_s", format!("{} not a multiple of dt", self.horizon_s)));
        }
        if !integral(self.pin_time_s) {
            return Err(bad("pin_time_s", format!("{} not a multiple of dt", self.pin_time_s)));
        }
        let n = self.horizon_steps();
        let k = self.pin_count();
        if k < 1 || n <= 2 * k {
            return Err(bad("pin_time_s", format!("need n > 2k >= 2, got n={n}, k={k}")));
        }
        if !(self.risk_alpha > 0.0 && self.risk_alpha <= 0.5) {
            return Err(bad("risk_alpha", format!("{} outside (0, 0.5]", self.risk_alpha)));
        }
        if self.centerlines.is_empty() {
            return Err(bad("centerlines", "at least one centerline required".into()));
        }
        let routes: BTreeMap<&str, usize> = self
            .centerlines
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.as_str(), i))
            .collect();
        if routes.len() != self.centerlines.len() {
            return Err(bad("centerlines", "duplicate centerline ids".into()));
        }
        if !routes.contains_key(self.ego.route.as_str()) {
            return Err(bad("ego.route", format!("unknown route `{}`", self.ego.route)));
        }
        self.ego
            .params
            .validate()
            .map_err(|e| bad("ego.params", e.to_string()))?;
        for o in &self.objects {
            if !routes.contains_key(o.route.as_str()) {
                return Err(bad("objects", format!("object `{}` uses unknown route `{}`", o.id, o.route)));
            }
            if !(0.0..=1.0).contains(&o.existence) {
                return Err(bad("objects", format!("object `{}` existence {} outside [0, 1]", o.id, o.existence)));
            }
            if !(o.route_probability - 1.0).abs().is_finite() || o.route_probability <= 0.0 {
                return Err(bad("objects", format!("object `{}` route probability invalid", o.id)));
            }
        }
        let object_known = |id: &str| self.objects.iter().any(|o| o.id == id);
        match &self.maneuvers {
            ManeuverSpec::Single => {}
            ManeuverSpec::Phantom { object } | ManeuverSpec::Crossing { object } => {
                if !object_known(object) {
                    return Err(bad("maneuvers", format!("unknown object `{object}`")));
                }
            }
            ManeuverSpec::Groups { group_a, group_b } => {
                for id in group_a.iter().chain(group_b) {
                    if !object_known(id) {
                        return Err(bad("maneuvers", format!("unknown object `{id}`")));
                    }
                }
                if group_a.is_empty() || group_b.is_empty() {
                    return Err(bad("maneuvers", "both groups need at least one object".into()));
                }
            }
        }
        if matches!(self.maneuvers, ManeuverSpec::Crossing { .. }) && self.intersection.is_none() {
            return Err(bad("intersection", "crossing maneuvers need an intersection block".into()));
        }
        Ok(())
    }

    /// Apply `key=value` overrides on the TOML representation, returning
    /// the re-validated scenario. Keys use dotted paths.
    pub fn with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self, SimError> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| SimError::BadScenario {
            field: "toml".into(),
            message: e.to_string(),
        })?;
        for (key, raw) in overrides {
            let parsed: toml::Value = raw
                .parse::<f64>()
                .map(toml::Value::from)
                .or_else(|_| raw.parse::<bool>().map(toml::Value::from))
                .unwrap_or_else(|_| toml::Value::String(raw.clone()));
            let mut cursor = &mut value;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                if i + 1 == parts.len() {
                    match cursor {
                        toml::Value::Table(t) => {
                            t.insert(part.to_string(), parsed.clone());
                        }
                        _ => {
                            return Err(SimError::BadScenario {
                                field: key.clone(),
                                message: "override path does not lead to a table".into(),
                            })
                        }
                    }
                } else {
                    cursor = match cursor {
                        toml::Value::Table(t) => t
                            .get_mut(*part)
                            .ok_or_else(|| SimError::BadScenario {
                                field: key.clone(),
                                message: format!("missing segment `{part}`"),
                            })?,
                        toml::Value::Array(a) => {
                            let idx: usize =
                                part.parse().map_err(|_| SimError::BadScenario {
                                    field: key.clone(),
                                    message: format!("segment `{part}` is not an index"),
                                })?;
                            a.get_mut(idx).ok_or_else(|| SimError::BadScenario {
                                field: key.clone(),
                                message: format!("index {idx} out of range"),
                            })?
                        }
                        _ => {
                            return Err(SimError::BadScenario {
                                field: key.clone(),
                                message: "override path too deep".into(),
                            })
                        }
                    };
                }
            }
        }
        let text = toml::to_string(&value).map_err(|e| SimError::BadScenario {
            field: "toml".into(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"
name = "unit"
dt_s = 0.1
horizon_s = 3.0
pin_time_s = 0.2
duration_s = 2.0
speed_limit_mps = 13.9
sensor_range_m = 80.0
s_min_m = 2.0
risk_alpha = 0.05

[ego]
model = "kinematic"
route = "main"
start_s_m = 5.0
start_speed_mps = 8.0

[[centerlines]]
id = "main"
points_xy_m = [[0.0, 0.0], [50.0, 0.0], [100.0, 0.0]]

[maneuvers]
mode = "single"
"#
        .to_string()
    }

    #[test]
    fn minimal_scenario_parses() {
        let sc = Scenario::from_toml_str(&minimal()).unwrap();
        assert_eq!(sc.horizon_steps(), 30);
        assert_eq!(sc.pin_count(), 2);
    }

    #[test]
    fn round_trip_is_identity() {
        let sc = Scenario::from_toml_str(&minimal()).unwrap();
        let text = sc.to_toml_string();
        let again = Scenario::from_toml_str(&text).unwrap();
        assert_eq!(sc, again);
    }

    #[test]
    fn bad_fields_are_named() {
        let text = minimal().replace("risk_alpha = 0.05", "risk_alpha = 0.9");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("risk_alpha"), "{err}");

        let text = minimal().replace("pin_time_s = 0.2", "pin_time_s = 0.25");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("pin_time_s"), "{err}");

        let text = minimal().replace("route = \"main\"", "route = \"nowhere\"");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("ego.route"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected_with_diagnostic() {
        let text = minimal().replace("name = \"unit\"", "name = \"unit\"\nbananas = 3");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("bananas"), "{err}");
    }

    #[test]
    fn overrides_patch_nested_fields() {
        let sc =
            Scenario::with_overrides(&minimal(), &[("sensor_range_m".into(), "30".into()), ("ego.start_speed_mps".into(), "5.5".into())])
                .unwrap();
        assert_eq!(sc.sensor_range_m, 30.0);
        assert_eq!(sc.ego.start_speed_mps, 5.5);
    }
}
