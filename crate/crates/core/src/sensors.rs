//! Distributed egocentric proximity sensing.
//!
//! Sensors sit on the surface of upper-body link capsules with their z-axis
//! along the outward normal. A *field* sensor sees any ball surface within
//! range in every direction; a *ray* sensor casts an 8×8 beam grid inside a
//! square field of view. Only balls are sensed: the robot body and the ground
//! never appear in a signal.
//!
//! Signals:
//! - localization: base-frame position of the nearest detected ball center
//!   when any sensor detects something, else the zero vector;
//! - proximity: range-normalized distance in `[0, 1]`, 1.0 meaning nothing
//!   in range;
//! - binary: 1.0 when a ball is in range, else 0.0.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{point_sphere_distance, ray_sphere_hit, Pose, RayShape, Rotation, SphereShape, Vec3};
use crate::rng;
use crate::robot::RobotModel;

pub const GRID_SIDE: usize = 8;
pub const BEAMS_PER_SENSOR: usize = GRID_SIDE * GRID_SIDE;
pub const DEFAULT_FOV_DEG: f64 = 63.0;
pub const DEFAULT_SENSOR_COUNT: usize = 64;
/// Sensing ranges swept by the default ablation grid (m).
pub const DEFAULT_RANGES: [f64; 4] = [0.2, 0.5, 1.0, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    RayGrid,
    Field,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalFn {
    Localization,
    Proximity,
    Binary,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Full,
    /// Nearest beam reading per ray sensor (proximity only).
    MinBeam,
    /// Any-beam detection flag per ray sensor (binary only).
    AnyBeam,
}

macro_rules! text_enum {
    ($ty:ty { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(Error::config(format!("unknown {} '{}'", stringify!($ty), other))),
                }
            }
        }
    };
}

text_enum!(Geometry { RayGrid => "ray_grid", Field => "field" });
text_enum!(SignalFn { Localization => "localization", Proximity => "proximity", Binary => "binary" });
text_enum!(Reduction { Full => "full", MinBeam => "min_beam", AnyBeam => "any_beam" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorNetConfig {
    pub geometry: Geometry,
    pub signal: SignalFn,
    pub reduction: Reduction,
    /// Maximum sensing range (m).
    pub range: f64,
    pub count: usize,
    /// Full diagonal field of view of a ray sensor (degrees).
    pub fov_deg: f64,
    pub placement_seed: u64,
}

impl Default for SensorNetConfig {
    fn default() -> Self {
        SensorNetConfig {
            geometry: Geometry::Field,
            signal: SignalFn::Proximity,
            reduction: Reduction::Full,
            range: 1.0,
            count: DEFAULT_SENSOR_COUNT,
            fov_deg: DEFAULT_FOV_DEG,
            placement_seed: 0,
        }
    }
}

impl SensorNetConfig {
    pub fn new(geometry: Geometry, signal: SignalFn, reduction: Reduction, range: f64) -> Self {
        SensorNetConfig { geometry, signal, reduction, range, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(Error::config(format!("sensor range must be positive, got {}", self.range)));
        }
        if self.count == 0 {
            return Err(Error::config("sensor count must be at least 1"));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::config("field of view must lie in (0, 180) degrees"));
        }
        match (self.geometry, self.signal, self.reduction) {
            (_, _, Reduction::Full) => Ok(()),
            (Geometry::RayGrid, SignalFn::Proximity, Reduction::MinBeam) => Ok(()),
            (Geometry::RayGrid, SignalFn::Binary, Reduction::AnyBeam) => Ok(()),
            (g, s, r) => Err(Error::config(format!("reduction {r} is not defined for {g} sensors with {s} signals"))),
        }
    }

    /// Short stable identifier, e.g. `ray_grid-proximity-min_beam-1`.
    pub fn label(&self) -> String {
        format!("{}-{}-{}-{}", self.geometry, self.signal, self.reduction, self.range)
    }
}

/// Length of the flat signal vector for `config`.
pub fn observation_dim(config: &SensorNetConfig) -> usize {
    match (config.signal, config.geometry, config.reduction) {
        (SignalFn::Localization, _, _) => 3,
        (_, Geometry::Field, _) => config.count,
        (_, Geometry::RayGrid, Reduction::Full) => BEAMS_PER_SENSOR * config.count,
        (_, Geometry::RayGrid, _) => config.count,
    }
}

/// Mount point of one sensor in its link frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorPose {
    pub link: usize,
    /// z-axis is the outward surface normal.
    pub local: Pose,
}

/// Sample `config.count` mounts uniformly by area over upper-body capsules.
pub fn place_sensors(model: &RobotModel, config: &SensorNetConfig) -> Result<Vec<SensorPose>> {
    if config.count == 0 {
        return Err(Error::config("sensor count must be at least 1"));
    }
    let links: Vec<usize> = (0..model.links.len()).filter(|&i| model.links[i].upper_body).collect();
    if links.is_empty() {
        return Err(Error::config("robot model has no upper-body link to carry sensors"));
    }
    let areas: Vec<f64> = links.iter().map(|&i| model.links[i].capsule.surface_area()).collect();
    let total: f64 = areas.iter().sum();
    let mut rng = rng::stream(config.placement_seed, "sensor-placement");
    let mut out = Vec::with_capacity(config.count);
    for _ in 0..config.count {
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = *links.last().unwrap();
        for (&l, &a) in links.iter().zip(&areas) {
            if pick < a {
                chosen = l;
                break;
            }
            pick -= a;
        }
        let cap = &model.links[chosen].capsule;
        let (position, normal) = sample_capsule_surface(cap.endpoint_a, cap.endpoint_b, cap.radius, &mut rng);
        out.push(SensorPose { link: chosen, local: Pose::new(position, frame_with_z(normal)) });
    }
    Ok(out)
}

/// Uniform point (and outward normal) on a capsule surface.
fn sample_capsule_surface(a: Vec3, b: Vec3, r: f64, rng: &mut impl Rng) -> (Vec3, Vec3) {
    let axis = b - a;
    let len = axis.norm();
    let dir = if len > 0.0 { axis / len } else { Vec3::Z };
    let side_area = 2.0 * PI * r * len;
    let cap_area = 4.0 * PI * r * r;
    let e1 = dir.any_orthogonal();
    let e2 = dir.cross(e1);
    if rng.random::<f64>() * (side_area + cap_area) < side_area {
        let t = rng.random::<f64>();
        let phi = 2.0 * PI * rng.random::<f64>();
        let n = e1 * phi.cos() + e2 * phi.sin();
        (a + axis * t + n * r, n)
    } else {
        // uniform direction on the sphere; the sign of its axial part picks the end cap
        let z = 2.0 * rng.random::<f64>() - 1.0;
        let phi = 2.0 * PI * rng.random::<f64>();
        let s = (1.0 - z * z).max(0.0).sqrt();
        let n = e1 * (s * phi.cos()) + e2 * (s * phi.sin()) + dir * z;
        let center = if z >= 0.0 { b } else { a };
        (center + n * r, n)
    }
}

fn frame_with_z(z: Vec3) -> Rotation {
    let z = z.normalize();
    let x = z.any_orthogonal();
    let y = z.cross(x);
    Rotation::from_basis(x, y, z)
}

/// Half-width of the beam grid on the unit tangent plane.
pub fn grid_half_width(fov_deg: f64) -> f64 {
    (0.5 * fov_deg.to_radians()).tan() / std::f64::consts::SQRT_2
}

/// Beam directions in the sensor frame, index `j * 8 + i` for column `i`
/// (offset along x) and row `j` (offset along y).
pub fn ray_directions(config: &SensorNetConfig) -> Vec<Vec3> {
    let t = grid_half_width(config.fov_deg);
    let last = (GRID_SIDE - 1) as f64;
    let mut dirs = Vec::with_capacity(BEAMS_PER_SENSOR);
    for j in 0..GRID_SIDE {
        let v = t * (2.0 * j as f64 / last - 1.0);
        for i in 0..GRID_SIDE {
            let u = t * (2.0 * i as f64 / last - 1.0);
            dirs.push(Vec3::new(u, v, 1.0).normalize());
        }
    }
    dirs
}

/// A placed sensor network: configuration, mounts and beam pattern.
#[derive(Clone, Debug)]
pub struct SensorNet {
    pub config: SensorNetConfig,
    pub mounts: Vec<SensorPose>,
    beams: Vec<Vec3>,
    /// Cosine of the half-angle of the cone containing every beam.
    cone_cos: f64,
}

impl SensorNet {
    pub fn new(model: &RobotModel, config: SensorNetConfig) -> Result<Self> {
        config.validate()?;
        let mounts = place_sensors(model, &config)?;
        Ok(Self::with_mounts(config, mounts))
    }

    pub fn with_mounts(config: SensorNetConfig, mounts: Vec<SensorPose>) -> Self {
        let beams = ray_directions(&config);
        let cone_cos = (0.5 * config.fov_deg.to_radians()).cos();
        SensorNet { config, mounts, beams, cone_cos }
    }

    pub fn observation_dim(&self) -> usize {
        observation_dim(&SensorNetConfig { count: self.mounts.len(), ..self.config.clone() })
    }

    /// No-detection reading for every entry.
    pub fn sentinel(&self) -> Vec<f64> {
        let fill = match self.config.signal {
            SignalFn::Proximity => 1.0,
            SignalFn::Binary | SignalFn::Localization => 0.0,
        };
        vec![fill; self.observation_dim()]
    }

    /// World poses of all sensors given world link poses.
    pub fn world_poses_into(&self, link_poses: &[Pose], out: &mut Vec<Pose>) {
        out.clear();
        out.extend(self.mounts.iter().map(|m| link_poses[m.link].compose(&m.local)));
    }

    pub fn sense(&self, balls: &[SphereShape], sensor_poses: &[Pose], base: &Pose, out: &mut [f64]) {
        sense_with_beams(balls, sensor_poses, base, &self.config, &self.beams, self.cone_cos, out)
    }
}

/// Stateless form of [`SensorNet::sense`].
pub fn sense(balls: &[SphereShape], sensor_poses: &[Pose], base: &Pose, config: &SensorNetConfig) -> Vec<f64> {
    let dim = observation_dim(&SensorNetConfig { count: sensor_poses.len(), ..config.clone() });
    let mut out = vec![0.0; dim];
    let beams = ray_directions(config);
    let cone_cos = (0.5 * config.fov_deg.to_radians()).cos();
    sense_with_beams(balls, sensor_poses, base, config, &beams, cone_cos, &mut out);
    out
}

/// Nearest beam hit within `range` for one ray sensor, or `None`.
#[inline]
fn beam_hit(origin: Vec3, dir_world: Vec3, ball: &SphereShape, range: f64) -> Option<f64> {
    ray_sphere_hit(&RayShape::new(origin, dir_world), ball).filter(|&t| t <= range)
}

/// Cheap rejection: can any beam of this sensor reach `ball` within `range`?
#[inline]
fn ray_sensor_may_see(pose: &Pose, axis: Vec3, ball: &SphereShape, range: f64, cone_cos: f64) -> bool {
    let to_center = ball.center - pose.position;
    let dist = to_center.norm();
    if dist - ball.radius > range {
        return false;
    }
    if dist <= ball.radius {
        return true;
    }
    // angle between the boresight and the ball, widened by the ball's angular radius
    let cos_center = axis.dot(to_center) / dist;
    let ang_center = cos_center.clamp(-1.0, 1.0).acos();
    let ang_ball = (ball.radius / dist).asin();
    ang_center - ang_ball <= cone_cos.acos() + 1e-9
}

fn sense_with_beams(
    balls: &[SphereShape],
    poses: &[Pose],
    base: &Pose,
    config: &SensorNetConfig,
    beams: &[Vec3],
    cone_cos: f64,
    out: &mut [f64],
) {
    let range = config.range;
    match config.signal {
        SignalFn::Localization => {
            let mut best: Option<(f64, Vec3)> = None;
            for ball in balls {
                let detected = poses.iter().any(|p| match config.geometry {
                    Geometry::Field => point_sphere_distance(p.position, ball) <= range,
                    Geometry::RayGrid => {
                        let axis = p.transform_vector(Vec3::Z);
                        ray_sensor_may_see(p, axis, ball, range, cone_cos)
                            && beams.iter().any(|d| beam_hit(p.position, p.transform_vector(*d), ball, range).is_some())
                    }
                });
                if detected {
                    let local = base.inverse_transform_point(ball.center);
                    let d = local.norm();
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, local));
                    }
                }
            }
            let v = best.map(|(_, p)| p).unwrap_or(Vec3::ZERO);
            out[..3].copy_from_slice(&v.to_array());
        }
        SignalFn::Proximity | SignalFn::Binary => {
            let binary = config.signal == SignalFn::Binary;
            let miss = if binary { 0.0 } else { 1.0 };
            match config.geometry {
                Geometry::Field => {
                    for (s, p) in poses.iter().enumerate() {
                        let nearest =
                            balls.iter().map(|b| point_sphere_distance(p.position, b)).fold(f64::INFINITY, f64::min);
                        out[s] = if nearest <= range {
                            if binary {
                                1.0
                            } else {
                                (nearest / range).clamp(0.0, 1.0)
                            }
                        } else {
                            miss
                        };
                    }
                }
                Geometry::RayGrid => {
                    let full = config.reduction == Reduction::Full;
                    for (s, p) in poses.iter().enumerate() {
                        let axis = p.transform_vector(Vec3::Z);
                        let visible: Vec<&SphereShape> =
                            balls.iter().filter(|b| ray_sensor_may_see(p, axis, b, range, cone_cos)).collect();
                        if full {
                            let image = &mut out[s * BEAMS_PER_SENSOR..(s + 1) * BEAMS_PER_SENSOR];
                            image.fill(miss);
                            if visible.is_empty() {
                                continue;
                            }
                            for (k, d) in beams.iter().enumerate() {
                                let dw = p.transform_vector(*d);
                                let hit = visible
                                    .iter()
                                    .filter_map(|b| beam_hit(p.position, dw, b, range))
                                    .fold(f64::INFINITY, f64::min);
                                if hit.is_finite() {
                                    image[k] = if binary { 1.0 } else { (hit / range).clamp(0.0, 1.0) };
                                }
                            }
                        } else {
                            let mut nearest = f64::INFINITY;
                            for d in beams {
                                let dw = p.transform_vector(*d);
                                for b in &visible {
                                    if let Some(t) = beam_hit(p.position, dw, b, range) {
                                        nearest = nearest.min(t);
                                    }
                                }
                            }
                            out[s] = if nearest.is_finite() {
                                if binary {
                                    1.0
                                } else {
                                    (nearest / range).clamp(0.0, 1.0)
                                }
                            } else {
                                miss
                            };
                        }
                    }
                }
            }
        }
    }
}
