//! TOML schema for robot model files.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{JointSpec, LinkSpec, RobotModel};
use crate::error::{Error, Result};
use crate::geom::{CapsuleShape, Pose, Rotation, Vec3};

pub const DEFAULT_ROBOT_TOML: &str = include_str!("../../configs/robot_default.toml");

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotModelDoc {
    pub base_height: f64,
    pub pendulum_length: f64,
    pub tilt_gain: f64,
    pub tilt_damping: f64,
    pub fall_threshold: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    pub gains: GainsDoc,
    pub links: Vec<LinkDoc>,
    pub joints: Vec<JointDoc>,
}

fn default_gravity() -> f64 {
    9.81
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsDoc {
    pub kp: f64,
    pub kd: f64,
    pub torque_limit: f64,
    pub inertia: f64,
    pub damping: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsuleDoc {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkDoc {
    pub name: String,
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub attach_position: [f64; 3],
    /// Roll, pitch, yaw (rad) applied as yaw * pitch * roll.
    #[serde(default)]
    pub attach_rpy: [f64; 3],
    pub capsule: CapsuleDoc,
    pub mass: f64,
    #[serde(default)]
    pub com: [f64; 3],
    #[serde(default)]
    pub upper_body: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointDoc {
    pub name: String,
    pub link: String,
    pub axis: [f64; 3],
    pub limits: [f64; 2],
    #[serde(default)]
    pub default: f64,
    pub kp: Option<f64>,
    pub kd: Option<f64>,
    pub torque_limit: Option<f64>,
    pub inertia: Option<f64>,
    pub damping: Option<f64>,
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn rpy(r: [f64; 3]) -> Rotation {
    Rotation::from_axis_angle(Vec3::Z, r[2])
        * Rotation::from_axis_angle(Vec3::Y, r[1])
        * Rotation::from_axis_angle(Vec3::X, r[0])
}

impl RobotModelDoc {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn into_model(self) -> Result<RobotModel> {
        let mut link_index = HashMap::new();
        let mut links = Vec::with_capacity(self.links.len());
        for (i, l) in self.links.iter().enumerate() {
            if link_index.insert(l.name.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate link name '{}'", l.name)));
            }
            let parent = match &l.parent {
                None => None,
                Some(p) => match link_index.get(p) {
                    Some(&pi) if pi < i => Some(pi),
                    _ => {
                        return Err(Error::config(format!(
                            "link '{}' names parent '{}' which is not listed before it",
                            l.name, p
                        )))
                    }
                },
            };
            links.push(LinkSpec {
                name: l.name.clone(),
                parent,
                attach: Pose::new(v3(l.attach_position), rpy(l.attach_rpy)),
                joints: Vec::new(),
                capsule: CapsuleShape {
                    endpoint_a: v3(l.capsule.a),
                    endpoint_b: v3(l.capsule.b),
                    radius: l.capsule.radius,
                },
                mass: l.mass,
                com: v3(l.com),
                upper_body: l.upper_body,
            });
        }

        let g = &self.gains;
        let mut joints = Vec::with_capacity(self.joints.len());
        for (j, jd) in self.joints.iter().enumerate() {
            let link = *link_index
                .get(&jd.link)
                .ok_or_else(|| Error::config(format!("joint '{}' references unknown link '{}'", jd.name, jd.link)))?;
            links[link].joints.push(j);
            joints.push(JointSpec {
                name: jd.name.clone(),
                link,
                axis: v3(jd.axis).normalize(),
                lower: jd.limits[0],
                upper: jd.limits[1],
                default: jd.default,
                kp: jd.kp.unwrap_or(g.kp),
                kd: jd.kd.unwrap_or(g.kd),
                torque_limit: jd.torque_limit.unwrap_or(g.torque_limit),
                inertia: jd.inertia.unwrap_or(g.inertia),
                damping: jd.damping.unwrap_or(g.damping),
            });
        }

        let model = RobotModel {
            joints,
            links,
            base_height: self.base_height,
            pendulum_length: self.pendulum_length,
            tilt_gain: self.tilt_gain,
            tilt_damping: self.tilt_damping,
            fall_threshold: self.fall_threshold,
            gravity: self.gravity,
        };
        model.validate()?;
        Ok(model)
    }
}

impl RobotModel {
    /// Built-in 21-joint model.
    pub fn default_model() -> RobotModel {
        RobotModel::from_toml_str(DEFAULT_ROBOT_TOML).expect("built-in robot model is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<RobotModel> {
        RobotModelDoc::parse(text)
            .map_err(|message| Error::Parse { path: "<robot model>".into(), message })?
            .into_model()
    }

    pub fn load(path: &Path) -> Result<RobotModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RobotModelDoc::parse(&text).map_err(|message| Error::Parse { path: path.to_path_buf(), message })?.into_model()
    }
}
