//! Simplified upper-body humanoid.
//!
//! Joints are independent second-order systems driven by a PD law. The
//! floating base is replaced by a two-axis inverted pendulum pivoting at the
//! ground: the base tips under gravity and is pushed by the horizontal offset
//! of the whole-body center of mass, so vigorous upper-body motion risks a
//! fall.
//!
//! Tilt convention: the base orientation is `Ry(-θy) · Rx(-θx)`, so the
//! gravity direction seen from the base is `Rx(θx) · Ry(θy) · (0, 0, -1)`.
//! Positive `θx` tips the top of the robot toward +y and positive `θy` toward
//! -x; a CoM offset toward the tipping side drives the angle further.

mod config;

pub use config::{RobotModelDoc, DEFAULT_ROBOT_TOML};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CapsuleShape, Pose, Rotation, Vec3};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    /// Child link rotated by this joint.
    pub link: usize,
    /// Unit rotation axis in the link attachment frame.
    pub axis: Vec3,
    pub lower: f64,
    pub upper: f64,
    pub default: f64,
    pub kp: f64,
    pub kd: f64,
    pub torque_limit: f64,
    /// Effective inertia (kg·m²).
    pub inertia: f64,
    /// Viscous damping (N·m·s/rad).
    pub damping: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinkSpec {
    pub name: String,
    /// `None` attaches to the base frame.
    pub parent: Option<usize>,
    pub attach: Pose,
    /// Joints applied after `attach`, in order.
    pub joints: Vec<usize>,
    pub capsule: CapsuleShape,
    pub mass: f64,
    pub com: Vec3,
    /// Eligible for sensor placement.
    pub upper_body: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobotModel {
    pub joints: Vec<JointSpec>,
    pub links: Vec<LinkSpec>,
    /// Height of the base frame above the pendulum pivot (m).
    pub base_height: f64,
    pub pendulum_length: f64,
    pub tilt_gain: f64,
    pub tilt_damping: f64,
    pub fall_threshold: f64,
    pub gravity: f64,
}

impl RobotModel {
    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn default_positions(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.default).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() || self.links.is_empty() {
            return Err(Error::config("robot model needs at least one joint and one link"));
        }
        for j in &self.joints {
            if !(j.lower < j.upper) {
                return Err(Error::config(format!("joint '{}': lower limit must be below upper", j.name)));
            }
            if !(j.kp > 0.0 && j.kd > 0.0 && j.inertia > 0.0 && j.torque_limit > 0.0 && j.damping >= 0.0) {
                return Err(Error::config(format!("joint '{}': gains and inertia must be positive", j.name)));
            }
            if !(j.lower..=j.upper).contains(&j.default) {
                return Err(Error::config(format!("joint '{}': default angle outside limits", j.name)));
            }
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("joint '{}': axis must be non-zero", j.name)));
            }
        }
        for (i, l) in self.links.iter().enumerate() {
            if !(l.mass > 0.0) {
                return Err(Error::config(format!("link '{}': mass must be positive", l.name)));
            }
            if !(l.capsule.radius > 0.0) {
                return Err(Error::config(format!("link '{}': capsule radius must be positive", l.name)));
            }
            if matches!(l.parent, Some(p) if p >= i) {
                return Err(Error::config(format!("link '{}': parent must precede child", l.name)));
            }
        }
        if !(self.base_height > 0.0 && self.pendulum_length > 0.0 && self.fall_threshold > 0.0) {
            return Err(Error::config("base height, pendulum length and fall threshold must be positive"));
        }
        if !(self.tilt_damping >= 0.0 && self.gravity > 0.0) {
            return Err(Error::config("tilt damping must be non-negative and gravity positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    /// World position of the base frame origin.
    pub base_pos: Vec3,
    /// World-frame base linear velocity.
    pub base_linvel: Vec3,
    /// Base angular velocity expressed in the base frame.
    pub base_angvel: Vec3,
    pub tilt: [f64; 2],
    pub tilt_rate: [f64; 2],
}

impl RobotState {
    /// Upright, motionless, at the given joint angles.
    pub fn at_rest(model: &RobotModel, q: Vec<f64>) -> Self {
        let n = q.len();
        RobotState {
            q,
            qdot: vec![0.0; n],
            base_pos: Vec3::new(0.0, 0.0, model.base_height),
            base_linvel: Vec3::ZERO,
            base_angvel: Vec3::ZERO,
            tilt: [0.0; 2],
            tilt_rate: [0.0; 2],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.qdot).all(|v| v.is_finite())
            && self.tilt.iter().chain(&self.tilt_rate).all(|v| v.is_finite())
            && self.base_pos.is_finite()
            && self.base_linvel.is_finite()
            && self.base_angvel.is_finite()
    }

    /// World orientation of the base frame.
    pub fn base_orientation(&self) -> Rotation {
        Rotation::from_axis_angle(Vec3::Y, -self.tilt[1]) * Rotation::from_axis_angle(Vec3::X, -self.tilt[0])
    }

    pub fn base_pose(&self) -> Pose {
        Pose::new(self.base_pos, self.base_orientation())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TorqueCommand {
    pub tau: Vec<f64>,
}

/// PD torques toward `q_target` with zero target velocity, saturated per joint.
pub fn pd_torque(q_target: &[f64], state: &RobotState, model: &RobotModel) -> Result<TorqueCommand> {
    let mut tau = vec![0.0; model.num_joints()];
    pd_torque_into(q_target, state, model, &mut tau)?;
    Ok(TorqueCommand { tau })
}

pub fn pd_torque_into(q_target: &[f64], state: &RobotState, model: &RobotModel, tau: &mut [f64]) -> Result<()> {
    let n = model.num_joints();
    if q_target.len() != n || state.q.len() != n || tau.len() != n {
        return Err(Error::config(format!(
            "joint dimension mismatch: model {n}, target {}, state {}",
            q_target.len(),
            state.q.len()
        )));
    }
    for (j, spec) in model.joints.iter().enumerate() {
        let raw = spec.kp * (q_target[j] - state.q[j]) + spec.kd * (0.0 - state.qdot[j]);
        tau[j] = raw.clamp(-spec.torque_limit, spec.torque_limit);
    }
    Ok(())
}

/// Advance the robot by `dt` seconds under `cmd`.
pub fn step_dynamics(state: &RobotState, cmd: &TorqueCommand, dt: f64, model: &RobotModel) -> Result<RobotState> {
    let mut next = state.clone();
    let mut scratch = Vec::with_capacity(model.links.len());
    step_dynamics_in_place(&mut next, &cmd.tau, dt, model, &mut scratch)?;
    Ok(next)
}

/// In-place variant of [`step_dynamics`]; `scratch` holds link poses between calls.
pub fn step_dynamics_in_place(
    state: &mut RobotState,
    tau: &[f64],
    dt: f64,
    model: &RobotModel,
    scratch: &mut Vec<Pose>,
) -> Result<()> {
    if !(dt > 0.0 && dt <= 0.02) {
        return Err(Error::config(format!("dt must lie in (0, 0.02], got {dt}")));
    }
    let n = model.num_joints();
    if tau.len() != n || state.q.len() != n {
        return Err(Error::config("torque/state dimension mismatch"));
    }
    if let Some(j) = tau.iter().position(|t| !t.is_finite()) {
        return Err(Error::Numerical(format!("non-finite torque on joint {}", model.joints[j].name)));
    }

    // Tipping drive from the CoM of the pre-step configuration.
    base_frame_kinematics_into(model, &state.q, scratch);
    let com = compute_com(model, scratch);
    let drive = [com.y, -com.x];

    for (j, spec) in model.joints.iter().enumerate() {
        let acc = (tau[j] - spec.damping * state.qdot[j]) / spec.inertia;
        let mut v = state.qdot[j] + acc * dt;
        let mut q = state.q[j] + v * dt;
        if q <= spec.lower {
            q = spec.lower;
            v = 0.0;
        } else if q >= spec.upper {
            q = spec.upper;
            v = 0.0;
        }
        state.q[j] = q;
        state.qdot[j] = v;
    }

    let g_over_l = model.gravity / model.pendulum_length;
    #[allow(clippy::needless_range_loop)]
    for a in 0..2 {
        let acc = g_over_l * state.tilt[a].sin() + model.tilt_gain * drive[a] - model.tilt_damping * state.tilt_rate[a];
        state.tilt_rate[a] += acc * dt;
        state.tilt[a] += state.tilt_rate[a] * dt;
    }
    update_base_kinematics(state, model);

    if !state.is_finite() {
        return Err(Error::Numerical("robot state became non-finite".into()));
    }
    Ok(())
}

/// Refresh the derived base pose and velocities from the tilt state.
pub fn update_base_kinematics(state: &mut RobotState, model: &RobotModel) {
    let [tx, _] = state.tilt;
    let [rx, ry] = state.tilt_rate;
    let h = model.base_height;
    let omega = Vec3::new(-rx, -ry * tx.cos(), -ry * tx.sin());
    let orientation = state.base_orientation();
    state.base_angvel = omega;
    state.base_pos = orientation.rotate(Vec3::new(0.0, 0.0, h));
    // pivot at the world origin: v = ω × r with r the base offset from the pivot
    state.base_linvel = orientation.rotate(omega.cross(Vec3::new(0.0, 0.0, h)));
}

/// Link poses relative to the (untilted) base frame.
pub fn base_frame_kinematics_into(model: &RobotModel, q: &[f64], poses: &mut Vec<Pose>) {
    poses.clear();
    for link in &model.links {
        let parent = match link.parent {
            Some(p) => poses[p],
            None => Pose::IDENTITY,
        };
        let mut pose = parent.compose(&link.attach);
        for &j in &link.joints {
            let joint = &model.joints[j];
            pose.orientation = pose.orientation * Rotation::from_axis_angle(joint.axis, q[j]);
        }
        poses.push(pose);
    }
}

/// World-frame link poses for `state`, composed along the kinematic tree.
pub fn forward_kinematics(model: &RobotModel, state: &RobotState) -> Vec<Pose> {
    let mut poses = Vec::with_capacity(model.links.len());
    forward_kinematics_into(model, state, &mut poses);
    poses
}

pub fn forward_kinematics_into(model: &RobotModel, state: &RobotState, poses: &mut Vec<Pose>) {
    base_frame_kinematics_into(model, &state.q, poses);
    let base = state.base_pose();
    for p in poses.iter_mut() {
        *p = base.compose(p);
    }
}

/// World-frame collision capsules for the given link poses.
pub fn link_capsules(model: &RobotModel, poses: &[Pose]) -> Vec<CapsuleShape> {
    model.links.iter().zip(poses).map(|(l, p)| l.capsule.transformed(p)).collect()
}

/// Mass-weighted mean of the link CoM positions (in the frame of `poses`).
pub fn compute_com(model: &RobotModel, poses: &[Pose]) -> Vec3 {
    let mut total = 0.0;
    let mut acc = Vec3::ZERO;
    for (link, pose) in model.links.iter().zip(poses) {
        acc += pose.transform_point(link.com) * link.mass;
        total += link.mass;
    }
    acc / total
}

/// World gravity direction `(0, 0, -1)` expressed in the base frame.
pub fn projected_gravity(state: &RobotState) -> Vec3 {
    state.base_orientation().inverse_rotate(Vec3::new(0.0, 0.0, -1.0))
}

/// True once the tilt magnitude strictly exceeds the fall threshold.
pub fn check_fall(state: &RobotState, model: &RobotModel) -> bool {
    state.tilt[0].hypot(state.tilt[1]) > model.fall_threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn one_joint_model(kp: f64, kd: f64, limit: f64, inertia: f64, damping: f64) -> RobotModel {
        RobotModel {
            joints: vec![JointSpec {
                name: "j".into(),
                link: 0,
                axis: Vec3::Z,
                lower: -100.0,
                upper: 100.0,
                default: 0.0,
                kp,
                kd,
                torque_limit: limit,
                inertia,
                damping,
            }],
            links: vec![LinkSpec {
                name: "l".into(),
                parent: None,
                attach: Pose::IDENTITY,
                joints: vec![0],
                capsule: CapsuleShape::new(Vec3::ZERO, Vec3::Z, 0.1),
                mass: 1.0,
                com: Vec3::ZERO,
                upper_body: true,
            }],
            base_height: 1.0,
            pendulum_length: 1.0,
            tilt_gain: 0.0,
            tilt_damping: 0.0,
            fall_threshold: 0.5,
            gravity: 9.81,
        }
    }

    #[test]
    fn pd_examples() {
        let m = one_joint_model(50.0, 2.0, 100.0, 1.0, 0.0);
        let s = RobotState::at_rest(&m, vec![0.0]);
        assert_eq!(pd_torque(&[1.0], &s, &m).unwrap().tau, vec![50.0]);
        assert_eq!(pd_torque(&[10.0], &s, &m).unwrap().tau, vec![100.0]);
        assert_eq!(pd_torque(&[-10.0], &s, &m).unwrap().tau, vec![-100.0]);
        assert_eq!(pd_torque(&[0.0], &s, &m).unwrap().tau, vec![0.0]);
        let mut moving = s.clone();
        moving.qdot[0] = 3.0;
        assert_eq!(pd_torque(&[0.0], &moving, &m).unwrap().tau, vec![-6.0]);
    }

    #[test]
    fn pd_dimension_mismatch_is_config_error() {
        let m = one_joint_model(50.0, 2.0, 100.0, 1.0, 0.0);
        let s = RobotState::at_rest(&m, vec![0.0]);
        assert!(pd_torque(&[0.0, 1.0], &s, &m).unwrap_err().is_config());
    }

    #[test]
    fn semi_implicit_joint_step() {
        let m = one_joint_model(50.0, 2.0, 100.0, 1.0, 0.0);
        let s = RobotState::at_rest(&m, vec![0.3]);
        let next = step_dynamics(&s, &TorqueCommand { tau: vec![1.0] }, 0.01, &m).unwrap();
        assert_abs_diff_eq!(next.qdot[0], 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(next.q[0], 0.3 + 0.0001, epsilon = 1e-15);
    }

    #[test]
    fn upright_centered_robot_stays_upright() {
        let m = one_joint_model(50.0, 2.0, 100.0, 1.0, 0.0);
        let mut s = RobotState::at_rest(&m, vec![0.0]);
        for _ in 0..100 {
            s = step_dynamics(&s, &TorqueCommand { tau: vec![0.0] }, 0.01, &m).unwrap();
        }
        assert_eq!(s.tilt, [0.0, 0.0]);
        assert_eq!(s.tilt_rate, [0.0, 0.0]);
    }

    #[test]
    fn single_tipping_step_matches_hand_computation() {
        let m = one_joint_model(50.0, 2.0, 100.0, 1.0, 0.0);
        let mut s = RobotState::at_rest(&m, vec![0.0]);
        s.tilt = [0.1, 0.0];
        let next = step_dynamics(&s, &TorqueCommand { tau: vec![0.0] }, 0.01, &m).unwrap();
        let expected_rate = 9.81 * 0.1f64.sin() * 0.01;
        assert_abs_diff_eq!(next.tilt_rate[0], expected_rate, epsilon = 1e-6);
        assert_abs_diff_eq!(next.tilt_rate[0], 0.0098, epsilon = 1e-4);
        assert_abs_diff_eq!(next.tilt[0], 0.1 + 0.01 * next.tilt_rate[0], epsilon = 1e-15);
        assert_eq!(next.tilt[1], 0.0);
    }

    #[test]
    fn invalid_dt_and_nan_torque() {
        let m = one_joint_model(50.0, 2.0, 100.0, 1.0, 0.0);
        let s = RobotState::at_rest(&m, vec![0.0]);
        assert!(step_dynamics(&s, &TorqueCommand { tau: vec![0.0] }, 0.05, &m).unwrap_err().is_config());
        let err = step_dynamics(&s, &TorqueCommand { tau: vec![f64::NAN] }, 0.01, &m).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn joint_limit_clamps_and_zeroes_velocity() {
        let mut m = one_joint_model(50.0, 2.0, 100.0, 1.0, 0.0);
        m.joints[0].upper = 0.001;
        let s = RobotState::at_rest(&m, vec![0.0]);
        let next = step_dynamics(&s, &TorqueCommand { tau: vec![100.0] }, 0.01, &m).unwrap();
        assert_eq!(next.q[0], 0.001);
        assert_eq!(next.qdot[0], 0.0);
    }

    #[test]
    fn rest_kinematics_and_single_joint_rotation() {
        let m = RobotModel::default_model();
        let zero = RobotState::at_rest(&m, vec![0.0; m.num_joints()]);
        let poses = forward_kinematics(&m, &zero);
        // rest: compose attachments along the tree, base at (0, 0, h)
        let mut rest: Vec<Pose> = Vec::new();
        for l in &m.links {
            let parent =
                l.parent.map(|p| rest[p]).unwrap_or(Pose::from_translation(Vec3::new(0.0, 0.0, m.base_height)));
            rest.push(parent.compose(&l.attach));
        }
        for (p, r) in poses.iter().zip(&rest) {
            assert!(p.position.distance(r.position) < 1e-12);
        }

        let mut yaw = zero.clone();
        let waist = m.joints.iter().position(|j| j.name == "waist_yaw").unwrap();
        yaw.q[waist] = FRAC_PI_2;
        let turned = forward_kinematics(&m, &yaw);
        let chest = m.links.iter().position(|l| l.name == "chest").unwrap();
        let arm = m.links.iter().position(|l| l.name == "left_upper_arm").unwrap();
        let rel_rest = poses[arm].position - poses[chest].position;
        let rel_turned = turned[arm].position - turned[chest].position;
        let expect = Rotation::from_axis_angle(Vec3::Z, FRAC_PI_2).rotate(rel_rest);
        assert!(rel_turned.distance(expect) < 1e-9);
    }

    #[test]
    fn two_joint_chain_matches_direct_composition() {
        let m = RobotModel::default_model();
        let mut s = RobotState::at_rest(&m, vec![0.0; m.num_joints()]);
        let sp = m.joints.iter().position(|j| j.name == "left_shoulder_pitch").unwrap();
        let el = m.joints.iter().position(|j| j.name == "left_elbow").unwrap();
        s.q[sp] = -0.7;
        s.q[el] = -1.1;
        s.tilt = [0.05, -0.02];
        update_base_kinematics(&mut s, &m);
        let poses = forward_kinematics(&m, &s);
        let hand = m.links.iter().position(|l| l.name == "left_hand").unwrap();

        // independent oracle: apply each transform to the point in sequence
        let link = |name: &str| m.links.iter().find(|l| l.name == name).unwrap();
        let p_local = Vec3::new(0.0, 0.0, -0.1);
        let mut p = link("left_hand").attach.transform_point(p_local);
        p = Rotation::from_axis_angle(Vec3::Y, -1.1).rotate(p);
        p = link("left_forearm").attach.transform_point(p);
        let up = link("left_upper_arm");
        for &j in up.joints.iter().rev() {
            p = Rotation::from_axis_angle(m.joints[j].axis, s.q[j]).rotate(p);
        }
        p = up.attach.transform_point(p);
        p = link("chest").attach.transform_point(p);
        p = link("abdomen").attach.transform_point(p);
        p = link("pelvis").attach.transform_point(p);
        p = s.base_pose().transform_point(p);
        assert!(poses[hand].transform_point(p_local).distance(p) < 1e-9);
    }

    #[test]
    fn rest_pose_com_is_centered() {
        let m = RobotModel::default_model();
        let s = RobotState::at_rest(&m, m.default_positions());
        let com = compute_com(&m, &forward_kinematics(&m, &s));
        assert!(com.x.abs() < 1e-12 && com.y.abs() < 1e-12, "{com:?}");
    }

    #[test]
    fn com_examples() {
        let mut m = one_joint_model(1.0, 1.0, 1.0, 1.0, 0.0);
        m.links[0].com = Vec3::new(0.1, 0.2, 0.3);
        let p = Pose::from_translation(Vec3::new(1.0, 0.0, 0.0));
        assert!(compute_com(&m, &[p]).distance(Vec3::new(1.1, 0.2, 0.3)) < 1e-12);

        let mut two = m.clone();
        two.links[0].com = Vec3::ZERO;
        two.links.push(two.links[0].clone());
        let poses =
            [Pose::from_translation(Vec3::new(0.0, 0.0, 1.0)), Pose::from_translation(Vec3::new(0.0, 0.0, 3.0))];
        assert!(compute_com(&two, &poses).distance(Vec3::new(0.0, 0.0, 2.0)) < 1e-12);
        two.links[1].mass = 3.0;
        let poses = [Pose::IDENTITY, Pose::from_translation(Vec3::new(4.0, 0.0, 0.0))];
        assert!(compute_com(&two, &poses).distance(Vec3::new(3.0, 0.0, 0.0)) < 1e-12);
    }

    #[test]
    fn projected_gravity_examples() {
        let m = one_joint_model(1.0, 1.0, 1.0, 1.0, 0.0);
        let mut s = RobotState::at_rest(&m, vec![0.0]);
        assert!(projected_gravity(&s).distance(Vec3::new(0.0, 0.0, -1.0)) < 1e-12);
        s.tilt = [0.0, FRAC_PI_2];
        assert!(projected_gravity(&s).distance(Vec3::new(-1.0, 0.0, 0.0)) < 1e-9);
        s.tilt = [0.1, 0.0];
        assert_abs_diff_eq!(projected_gravity(&s).z, -(0.1f64).cos(), epsilon = 1e-12);
    }

    #[test]
    fn fall_examples() {
        let m = one_joint_model(1.0, 1.0, 1.0, 1.0, 0.0);
        let mut s = RobotState::at_rest(&m, vec![0.0]);
        assert!(!check_fall(&s, &m));
        s.tilt = [0.6, 0.0];
        assert!(check_fall(&s, &m));
        s.tilt = [0.3, 0.4];
        assert!(!check_fall(&s, &m), "magnitude exactly at the threshold does not fall");
        s.tilt = [0.3, 0.4000001];
        assert!(check_fall(&s, &m));
    }

    #[test]
    fn base_velocity_matches_finite_difference() {
        let m = RobotModel::default_model();
        let mut s = RobotState::at_rest(&m, m.default_positions());
        s.tilt = [0.1, -0.2];
        s.tilt_rate = [0.4, 0.3];
        update_base_kinematics(&mut s, &m);
        let h = 1e-6;
        let mut ahead = s.clone();
        ahead.tilt = [s.tilt[0] + h * s.tilt_rate[0], s.tilt[1] + h * s.tilt_rate[1]];
        update_base_kinematics(&mut ahead, &m);
        let fd = (ahead.base_pos - s.base_pos) / h;
        assert!(fd.distance(s.base_linvel) < 1e-5, "{fd:?} vs {:?}", s.base_linvel);
    }

    proptest! {
        #[test]
        fn damped_free_motion_loses_energy(q0 in proptest::collection::vec(-0.3f64..0.3, 21), v0 in proptest::collection::vec(-3.0f64..3.0, 21)) {
            let m = RobotModel::default_model();
            let mut s = RobotState::at_rest(&m, q0);
            s.qdot = v0;
            let zero = vec![0.0; 21];
            let mut scratch = Vec::new();
            let mut energy: f64 = s.qdot.iter().map(|v| v * v).sum();
            for _ in 0..50 {
                step_dynamics_in_place(&mut s, &zero, 0.005, &m, &mut scratch).unwrap();
                let e: f64 = s.qdot.iter().map(|v| v * v).sum();
                prop_assert!(e <= energy);
                energy = e;
                for (q, j) in s.q.iter().zip(&m.joints) {
                    prop_assert!(*q >= j.lower && *q <= j.upper);
                }
            }
        }

        #[test]
        fn stepping_is_deterministic_and_respects_limits(tau in proptest::collection::vec(-80.0f64..80.0, 21), tilt in (-0.3f64..0.3, -0.3f64..0.3)) {
            let m = RobotModel::default_model();
            let mut s = RobotState::at_rest(&m, m.default_positions());
            s.tilt = [tilt.0, tilt.1];
            let cmd = TorqueCommand { tau };
            let mut a = s.clone();
            let mut b = s.clone();
            for _ in 0..20 {
                a = step_dynamics(&a, &cmd, 0.005, &m).unwrap();
                b = step_dynamics(&b, &cmd, 0.005, &m).unwrap();
            }
            prop_assert_eq!(&a, &b);
            for (q, j) in a.q.iter().zip(&m.joints) {
                prop_assert!(*q >= j.lower && *q <= j.upper);
            }
        }

        #[test]
        fn tipping_is_monotone_with_positive_drive(theta0 in 0.0f64..0.4, offset in 0.001f64..0.2) {
            let mut m = one_joint_model(1.0, 1.0, 1.0, 1.0, 0.0);
            m.tilt_gain = 3.0;
            m.tilt_damping = 0.0;
            m.fall_threshold = 10.0;
            // CoM at +y drives the x-axis tilt
            m.links[0].com = Vec3::new(0.0, offset, 0.5);
            let mut s = RobotState::at_rest(&m, vec![0.0]);
            s.tilt = [theta0, 0.0];
            let mut prev = theta0;
            for _ in 0..100 {
                s = step_dynamics(&s, &TorqueCommand { tau: vec![0.0] }, 0.01, &m).unwrap();
                prop_assert!(s.tilt[0] >= prev);
                prev = s.tilt[0];
            }
        }
    }
}
