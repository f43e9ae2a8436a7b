//! The dodgeball arena.
//!
//! Each episode opens with a ball thrown at the robot; further balls follow
//! at random intervals. Touching a ball or falling over ends the episode.
//! Surviving the success horizon truncates it as a success.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{capsule_sphere_penetration, Pose, SphereShape, Vec3};
use crate::rng::{self, StreamRng};
use crate::robot::{
    check_fall, forward_kinematics_into, pd_torque_into, projected_gravity, step_dynamics_in_place,
    update_base_kinematics, RobotModel, RobotState,
};
use crate::sensors::SensorNet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub position: Vec3,
    pub velocity: Vec3,
    pub radius: f64,
}

impl Ball {
    pub fn sphere(&self) -> SphereShape {
        SphereShape { center: self.position, radius: self.radius }
    }
}

/// Uniform sampling interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Span { lo, hi }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        self.lo + (self.hi - self.lo) * rng.random::<f64>()
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// How a throw's initial velocity is directed at the aim point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AimMode {
    /// Launch angle chosen so the gravity arc passes through the aim point
    /// (low arc). Throws too slow to reach it use the maximum-range angle.
    #[default]
    Ballistic,
    /// Velocity along the straight line from spawn to aim point.
    Straight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub alive: f64,
    pub energy: f64,
    pub posture: f64,
    pub drift: f64,
    pub action_rate: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { alive: 1.0, energy: 0.001, posture: 0.05, drift: 0.5, action_rate: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub dt_control: f64,
    pub substeps: usize,
    pub ball_radius: f64,
    pub spawn_distance: Span,
    pub spawn_height: Span,
    pub speed: Span,
    pub throw_interval: Span,
    pub success_time: f64,
    pub gravity: f64,
    pub cull_distance: f64,
    pub max_balls: usize,
    pub aim: AimMode,
    /// Throws aim uniformly inside a sphere of `aim_radius` centred on the
    /// midpoint of this link's capsule at the moment of the throw.
    pub aim_link: String,
    pub aim_radius: f64,
    /// Targets are `q_default + action_scale * action`, clamped to limits.
    pub action_scale: f64,
    /// Half-width of the uniform joint noise applied at reset (rad).
    pub reset_joint_noise: f64,
    pub reward: RewardWeights,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt_control: 0.02,
            substeps: 4,
            ball_radius: 0.15,
            spawn_distance: Span::new(4.0, 6.0),
            spawn_height: Span::new(2.0, 3.0),
            speed: Span::new(4.0, 8.0),
            throw_interval: Span::new(1.0, 2.0),
            success_time: 3.0,
            gravity: 9.81,
            cull_distance: 8.0,
            max_balls: 4,
            aim: AimMode::Ballistic,
            aim_link: "chest".into(),
            aim_radius: 0.4,
            action_scale: 0.5,
            reset_joint_noise: 0.05,
            reward: RewardWeights::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt_control", self.dt_control),
            ("ball_radius", self.ball_radius),
            ("success_time", self.success_time),
            ("gravity", self.gravity),
            ("cull_distance", self.cull_distance),
            ("aim_radius", self.aim_radius),
            ("action_scale", self.action_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        for (name, s) in [
            ("spawn_distance", self.spawn_distance),
            ("spawn_height", self.spawn_height),
            ("speed", self.speed),
            ("throw_interval", self.throw_interval),
        ] {
            if !(s.lo > 0.0 && s.lo < s.hi) {
                return Err(Error::config(format!("{name} must be a non-degenerate positive interval")));
            }
        }
        if self.substeps == 0 || self.max_balls == 0 {
            return Err(Error::config("substeps and max_balls must be at least 1"));
        }
        let sub = self.physics_dt();
        if !(sub <= 0.02) {
            return Err(Error::config(format!("physics step {sub} s exceeds 0.02 s")));
        }
        if self.reset_joint_noise < 0.0 {
            return Err(Error::config("reset_joint_noise must be non-negative"));
        }
        let w = &self.reward;
        if [w.alive, w.energy, w.posture, w.drift, w.action_rate].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::config("reward weights must be non-negative"));
        }
        Ok(())
    }

    pub fn physics_dt(&self) -> f64 {
        self.dt_control / self.substeps as f64
    }

    /// Control steps in a full-length episode.
    pub fn max_episode_steps(&self) -> usize {
        (self.success_time / self.dt_control - 1e-9).ceil() as usize
    }
}

fn uniform_in_ball(rng: &mut impl Rng, radius: f64) -> Vec3 {
    loop {
        let v = Vec3::new(
            2.0 * rng.random::<f64>() - 1.0,
            2.0 * rng.random::<f64>() - 1.0,
            2.0 * rng.random::<f64>() - 1.0,
        );
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

/// Launch velocity of magnitude `speed` from `from` toward `to` under gravity
/// `g`, on the low arc when reachable, else at the maximum-range elevation.
pub fn ballistic_velocity(from: Vec3, to: Vec3, speed: f64, g: f64) -> Vec3 {
    let delta = to - from;
    let horizontal = Vec3::new(delta.x, delta.y, 0.0);
    let dist = horizontal.norm();
    if dist < 1e-12 {
        return Vec3::new(0.0, 0.0, speed * delta.z.signum());
    }
    let dir = horizontal / dist;
    let v2 = speed * speed;
    let disc = v2 * v2 - g * (g * dist * dist + 2.0 * delta.z * v2);
    let elevation = if disc >= 0.0 {
        ((v2 - disc.sqrt()) / (g * dist)).atan()
    } else {
        // unreachable: the maximum-range angle for a target below the launch point
        let h = (-delta.z).max(0.0);
        (speed / (v2 + 2.0 * g * h).sqrt()).atan()
    };
    (dir * elevation.cos() + Vec3::Z * elevation.sin()) * speed
}

/// Throw from a random point around the robot's ground position toward a
/// random point near `aim_center` (world frame).
pub fn spawn_ball(rng: &mut impl Rng, base_position: Vec3, aim_center: Vec3, config: &EnvConfig) -> Ball {
    let heading = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    let distance = config.spawn_distance.sample(rng);
    let height = config.spawn_height.sample(rng);
    let speed = config.speed.sample(rng);
    let origin = Vec3::new(base_position.x, base_position.y, 0.0);
    let spawn = origin + Vec3::new(heading.cos() * distance, heading.sin() * distance, height);
    let aim = aim_center + uniform_in_ball(rng, config.aim_radius);
    let velocity = match config.aim {
        AimMode::Straight => (aim - spawn).normalize() * speed,
        AimMode::Ballistic => ballistic_velocity(spawn, aim, speed, config.gravity),
    };
    Ball { position: spawn, velocity, radius: config.ball_radius }
}

/// Semi-implicit Euler ballistic step (no drag).
pub fn step_ball(ball: &Ball, dt: f64, gravity: f64) -> Ball {
    let velocity = ball.velocity + Vec3::new(0.0, 0.0, -gravity * dt);
    Ball { position: ball.position + velocity * dt, velocity, radius: ball.radius }
}

/// Survival bonus minus regularization. No term depends on ball clearance.
pub fn compute_reward(
    state: &RobotState,
    model: &RobotModel,
    action: &[f64],
    last_action: &[f64],
    tau: &[f64],
    w: &RewardWeights,
) -> f64 {
    let energy: f64 = tau.iter().zip(&state.qdot).map(|(t, v)| (t * v).abs()).sum();
    let posture: f64 = state.q.iter().zip(&model.joints).map(|(q, j)| (q - j.default).powi(2)).sum();
    let drift = state.tilt[0] * state.tilt[0] + state.tilt[1] * state.tilt[1];
    let rate: f64 = action.iter().zip(last_action).map(|(a, b)| (a - b).powi(2)).sum();
    w.alive - w.energy * energy - w.posture * posture - w.drift * drift - w.action_rate * rate
}

/// Actor and privileged critic observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `[base angular velocity; q - q_default; q̇; projected gravity; sensors]`
    pub actor: Vec<f64>,
    /// `actor` followed by the base-frame linear velocity.
    pub critic: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepInfo {
    pub contact: bool,
    pub fall: bool,
    pub success: bool,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub info: StepInfo,
    /// Episode length in control steps (meaningful when done).
    pub episode_steps: usize,
    /// First observation of the replacement episode after an auto-reset.
    pub reset_observation: Option<Observation>,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeState {
    pub robot: RobotState,
    pub balls: Vec<Ball>,
    pub steps: usize,
    pub time: f64,
    pub next_throw_time: f64,
    pub last_action: Vec<f64>,
    pub rng: StreamRng,
    pub finished: bool,
    pub episode_return: f64,
    link_poses: Vec<Pose>,
    sensor_poses: Vec<Pose>,
    q_target: Vec<f64>,
    tau: Vec<f64>,
}

/// Immutable environment definition shared by every episode.
#[derive(Clone, Debug)]
pub struct Arena {
    pub model: RobotModel,
    pub sensors: SensorNet,
    pub config: EnvConfig,
}

impl Arena {
    pub fn new(model: RobotModel, sensors: SensorNet, config: EnvConfig) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        sensors.config.validate()?;
        if !model.links.iter().any(|l| l.name == config.aim_link) {
            return Err(Error::config(format!("aim_link '{}' is not a link of the robot model", config.aim_link)));
        }
        Ok(Arena { model, sensors, config })
    }

    /// World position throws are aimed around, given current link poses.
    pub fn aim_center(&self, link_poses: &[Pose]) -> Vec3 {
        let k = self.model.links.iter().position(|l| l.name == self.config.aim_link).expect("validated in new");
        let c = &self.model.links[k].capsule;
        link_poses[k].transform_point((c.endpoint_a + c.endpoint_b) * 0.5)
    }

    pub fn num_joints(&self) -> usize {
        self.model.num_joints()
    }

    pub fn proprio_dim(&self) -> usize {
        6 + 2 * self.num_joints()
    }

    pub fn actor_dim(&self) -> usize {
        self.proprio_dim() + self.sensors.observation_dim()
    }

    pub fn critic_dim(&self) -> usize {
        self.actor_dim() + 3
    }

    /// Critic-input value each entry takes when nothing is sensed and the
    /// robot is exactly at rest; the learner stores inputs as sparse
    /// deviations from it.
    pub fn critic_reference(&self) -> Vec<f64> {
        let mut r = vec![0.0; self.critic_dim()];
        let p = self.proprio_dim();
        r[p - 1] = -1.0; // projected gravity z
        r[p..p + self.sensors.observation_dim()].copy_from_slice(&self.sensors.sentinel());
        r
    }

    pub fn reset(&self, seed: u64) -> (EpisodeState, Observation) {
        let mut rng = StreamRng::seed_from_u64(seed);
        let noise = self.config.reset_joint_noise;
        let q = self
            .model
            .joints
            .iter()
            .map(|j| (j.default + noise * (2.0 * rng.random::<f64>() - 1.0)).clamp(j.lower, j.upper))
            .collect();
        let mut robot = RobotState::at_rest(&self.model, q);
        update_base_kinematics(&mut robot, &self.model);
        let mut link_poses = Vec::with_capacity(self.model.links.len());
        forward_kinematics_into(&self.model, &robot, &mut link_poses);
        let first = spawn_ball(&mut rng, robot.base_pos, self.aim_center(&link_poses), &self.config);
        let next_throw_time = self.config.throw_interval.sample(&mut rng);
        let n = self.num_joints();
        let mut ep = EpisodeState {
            robot,
            balls: vec![first],
            steps: 0,
            time: 0.0,
            next_throw_time,
            last_action: vec![0.0; n],
            rng,
            finished: false,
            episode_return: 0.0,
            link_poses,
            sensor_poses: Vec::with_capacity(self.sensors.mounts.len()),
            q_target: vec![0.0; n],
            tau: vec![0.0; n],
        };
        let obs = self.observe(&mut ep);
        (ep, obs)
    }

    /// Assemble observations for the current state.
    pub fn observe(&self, ep: &mut EpisodeState) -> Observation {
        let n = self.num_joints();
        let mut critic = vec![0.0; self.critic_dim()];
        let r = &ep.robot;
        critic[..3].copy_from_slice(&r.base_angvel.to_array());
        for (j, spec) in self.model.joints.iter().enumerate() {
            critic[3 + j] = r.q[j] - spec.default;
            critic[3 + n + j] = r.qdot[j];
        }
        critic[3 + 2 * n..6 + 2 * n].copy_from_slice(&projected_gravity(r).to_array());
        let p = self.proprio_dim();
        let d = self.sensors.observation_dim();
        forward_kinematics_into(&self.model, r, &mut ep.link_poses);
        self.sensors.world_poses_into(&ep.link_poses, &mut ep.sensor_poses);
        let spheres: Vec<SphereShape> = ep.balls.iter().map(Ball::sphere).collect();
        let base = r.base_pose();
        self.sensors.sense(&spheres, &ep.sensor_poses, &base, &mut critic[p..p + d]);
        let lin = base.orientation.inverse_rotate(r.base_linvel);
        critic[p + d..].copy_from_slice(&lin.to_array());
        let actor = critic[..p + d].to_vec();
        Observation { actor, critic }
    }

    fn touching(&self, ep: &mut EpisodeState) -> bool {
        forward_kinematics_into(&self.model, &ep.robot, &mut ep.link_poses);
        ep.balls.iter().any(|b| {
            let s = b.sphere();
            self.model
                .links
                .iter()
                .zip(&ep.link_poses)
                .any(|(l, p)| capsule_sphere_penetration(&l.capsule.transformed(p), &s).is_some())
        })
    }

    /// Advance one control step.
    pub fn step(&self, ep: &mut EpisodeState, action: &[f64]) -> Result<StepResult> {
        if ep.finished {
            return Err(Error::Usage("episode already finished; reset it first".into()));
        }
        let n = self.num_joints();
        if action.len() != n {
            return Err(Error::config(format!("action has {} entries, expected {n}", action.len())));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numerical("non-finite action".into()));
        }
        for (j, spec) in self.model.joints.iter().enumerate() {
            ep.q_target[j] = (spec.default + self.config.action_scale * action[j]).clamp(spec.lower, spec.upper);
        }

        let dt = self.config.physics_dt();
        let mut info = StepInfo::default();
        for _ in 0..self.config.substeps {
            pd_torque_into(&ep.q_target, &ep.robot, &self.model, &mut ep.tau)?;
            if let Err(e) = step_dynamics_in_place(&mut ep.robot, &ep.tau, dt, &self.model, &mut ep.link_poses) {
                match e {
                    Error::Numerical(_) => {
                        info.fall = true;
                        break;
                    }
                    other => return Err(other),
                }
            }
            for b in ep.balls.iter_mut() {
                *b = step_ball(b, dt, self.config.gravity);
            }
            if self.touching(ep) {
                info.contact = true;
                break;
            }
        }
        if !info.contact && !info.fall {
            info.fall = check_fall(&ep.robot, &self.model);
        }

        ep.steps += 1;
        ep.time = ep.steps as f64 * self.config.dt_control;

        let origin = Vec3::new(ep.robot.base_pos.x, ep.robot.base_pos.y, 0.0);
        let cull = self.config.cull_distance;
        ep.balls.retain(|b| b.position.z >= 0.0 && b.position.distance(origin) <= cull);
        if ep.time >= ep.next_throw_time - 1e-9 {
            if ep.balls.len() < self.config.max_balls {
                forward_kinematics_into(&self.model, &ep.robot, &mut ep.link_poses);
                let aim = self.aim_center(&ep.link_poses);
                let ball = spawn_ball(&mut ep.rng, ep.robot.base_pos, aim, &self.config);
                ep.balls.push(ball);
            }
            ep.next_throw_time += self.config.throw_interval.sample(&mut ep.rng);
        }

        let reward = if info.contact {
            0.0
        } else {
            compute_reward(&ep.robot, &self.model, action, &ep.last_action, &ep.tau, &self.config.reward)
        };
        ep.last_action.copy_from_slice(action);
        ep.episode_return += reward;

        let terminated = info.contact || info.fall;
        let truncated = !terminated && ep.time >= self.config.success_time - 1e-9;
        info.success = truncated;
        ep.finished = terminated || truncated;

        let observation = self.observe(ep);
        Ok(StepResult {
            observation,
            reward,
            terminated,
            truncated,
            info,
            episode_steps: ep.steps,
            reset_observation: None,
        })
    }
}

/// One environment slot of a batch: the live episode plus the stream that
/// seeds its successive episodes.
#[derive(Clone, Debug)]
pub struct EnvSlot {
    pub episode: EpisodeState,
    seeder: StreamRng,
}

/// A batch of independent environments stepped together.
pub struct VecEnv {
    pub arena: Arena,
    pub slots: Vec<EnvSlot>,
}

impl VecEnv {
    /// `count` environments whose episode seeds derive from `seed` and the slot index.
    pub fn new(arena: Arena, count: usize, seed: u64) -> (Self, Vec<Observation>) {
        let mut slots = Vec::with_capacity(count);
        let mut obs = Vec::with_capacity(count);
        for i in 0..count {
            let mut seeder = rng::indexed_stream(seed, "env-slot", i as u64);
            let (episode, o) = arena.reset(seeder.random());
            slots.push(EnvSlot { episode, seeder });
            obs.push(o);
        }
        (VecEnv { arena, slots }, obs)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Step every environment with its row of `actions` (row-major, one row
    /// per env). Finished episodes are replaced immediately; the new
    /// episode's first observation is in `reset_observation`.
    pub fn step(&mut self, actions: &[f64]) -> Result<Vec<StepResult>> {
        let n = self.arena.num_joints();
        if actions.len() != n * self.slots.len() {
            return Err(Error::config(format!(
                "action batch has {} values, expected {} envs × {n}",
                actions.len(),
                self.slots.len()
            )));
        }
        let arena = &self.arena;
        self.slots
            .par_iter_mut()
            .zip(actions.par_chunks(n))
            .map(|(slot, a)| {
                let mut res = arena.step(&mut slot.episode, a)?;
                if res.done() {
                    let (episode, obs) = arena.reset(slot.seeder.random());
                    slot.episode = episode;
                    res.reset_observation = Some(obs);
                }
                Ok(res)
            })
            .collect()
    }
}

/// Batched step over explicit episode states (no auto-reset).
pub fn batched_step(arena: &Arena, envs: &mut [EpisodeState], actions: &[f64]) -> Result<Vec<StepResult>> {
    let n = arena.num_joints();
    if actions.len() != n * envs.len() {
        return Err(Error::config("action batch shape does not match the number of environments"));
    }
    envs.par_iter_mut().zip(actions.par_chunks(n)).map(|(ep, a)| arena.step(ep, a)).collect()
}

/// Per-step CSV of ball and link positions for offline visualization.
///
/// Columns: `step,time,kind,id,name,x,y,z,radius`, where `kind` is `ball` or
/// `link`; link rows give both capsule endpoints as consecutive rows with ids
/// `2k` and `2k+1`.
pub struct ReplayWriter<W: Write> {
    out: W,
}

impl<W: Write> ReplayWriter<W> {
    pub const HEADER: &'static str = "step,time,kind,id,name,x,y,z,radius";

    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "{}", Self::HEADER)?;
        Ok(ReplayWriter { out })
    }

    pub fn record(&mut self, arena: &Arena, ep: &EpisodeState) -> std::io::Result<()> {
        let mut poses = Vec::new();
        forward_kinematics_into(&arena.model, &ep.robot, &mut poses);
        for (i, b) in ep.balls.iter().enumerate() {
            let p = b.position;
            writeln!(
                self.out,
                "{},{:.4},ball,{},ball,{:.6},{:.6},{:.6},{}",
                ep.steps, ep.time, i, p.x, p.y, p.z, b.radius
            )?;
        }
        for (k, (link, pose)) in arena.model.links.iter().zip(&poses).enumerate() {
            let cap = link.capsule.transformed(pose);
            for (e, p) in [cap.endpoint_a, cap.endpoint_b].into_iter().enumerate() {
                writeln!(
                    self.out,
                    "{},{:.4},link,{},{},{:.6},{:.6},{:.6},{}",
                    ep.steps,
                    ep.time,
                    2 * k + e,
                    link.name,
                    p.x,
                    p.y,
                    p.z,
                    cap.radius
                )?;
            }
        }
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensors::{Geometry, Reduction, SensorNetConfig, SignalFn};
    use approx::assert_abs_diff_eq;

    fn arena_with(signal: SignalFn) -> Arena {
        let model = RobotModel::default_model();
        let sensors =
            SensorNet::new(&model, SensorNetConfig::new(Geometry::Field, signal, Reduction::Full, 1.0)).unwrap();
        Arena::new(model, sensors, EnvConfig::default()).unwrap()
    }

    #[test]
    fn ball_step_examples() {
        let b = Ball { position: Vec3::new(0.0, 0.0, 10.0), velocity: Vec3::ZERO, radius: 0.15 };
        let n = step_ball(&b, 0.1, 9.81);
        assert_abs_diff_eq!(n.velocity.z, -0.981, epsilon = 1e-12);
        assert_abs_diff_eq!(n.position.z, 9.9019, epsilon = 1e-12);

        let b = Ball { position: Vec3::ZERO, velocity: Vec3::new(3.0, -2.0, 5.0), radius: 0.15 };
        let mut s = b;
        for _ in 0..200 {
            s = step_ball(&s, 0.005, 9.81);
        }
        assert_eq!((s.velocity.x, s.velocity.y), (3.0, -2.0));
        let analytic = 5.0 * 1.0 - 0.5 * 9.81 * 1.0;
        assert!((s.position.z - analytic).abs() < 0.05);
    }

    #[test]
    fn ballistic_arc_passes_through_target() {
        let from = Vec3::new(5.0, 0.0, 2.5);
        let to = Vec3::new(0.0, 0.1, 1.3);
        let v = ballistic_velocity(from, to, 8.0, 9.81);
        assert_abs_diff_eq!(v.norm(), 8.0, epsilon = 1e-12);
        // closed-form time to cover the horizontal distance, then height there
        let horizontal = Vec3::new(to.x - from.x, to.y - from.y, 0.0);
        let t = horizontal.norm() / Vec3::new(v.x, v.y, 0.0).norm();
        let z = from.z + v.z * t - 0.5 * 9.81 * t * t;
        assert_abs_diff_eq!(z, to.z, epsilon = 1e-9);
        let xy = Vec3::new(from.x + v.x * t, from.y + v.y * t, 0.0);
        assert!(xy.distance(Vec3::new(to.x, to.y, 0.0)) < 1e-9);
    }

    #[test]
    fn straight_aim_points_into_chest_sphere() {
        let config = EnvConfig { aim: AimMode::Straight, ..EnvConfig::default() };
        let mut rng = StreamRng::seed_from_u64(1);
        let center = Vec3::new(0.1, -0.2, 1.4);
        for _ in 0..1000 {
            let b = spawn_ball(&mut rng, Vec3::ZERO, center, &config);
            let to_center = center - b.position;
            let cos = b.velocity.normalize().dot(to_center.normalize());
            let half_angle = (config.aim_radius / to_center.norm()).asin();
            assert!(cos >= half_angle.cos() - 1e-12);
        }
    }

    #[test]
    fn spawn_marginals_in_range() {
        let config = EnvConfig::default();
        let mut rng = StreamRng::seed_from_u64(5);
        for _ in 0..10_000 {
            let b = spawn_ball(&mut rng, Vec3::ZERO, Vec3::new(0.0, 0.0, 1.4), &config);
            let d = Vec3::new(b.position.x, b.position.y, 0.0).norm();
            assert!((4.0 - 1e-9..=6.0 + 1e-9).contains(&d), "distance {d}");
            assert!(config.spawn_height.contains(b.position.z));
            let speed = b.velocity.norm();
            assert!((4.0 - 1e-9..=8.0 + 1e-9).contains(&speed), "speed {speed}");
            assert_eq!(b.radius, 0.15);
        }
    }

    #[test]
    fn reward_examples() {
        let model = RobotModel::default_model();
        let n = model.num_joints();
        let w = RewardWeights::default();
        let rest = RobotState::at_rest(&model, model.default_positions());
        let zero = vec![0.0; n];
        assert_abs_diff_eq!(compute_reward(&rest, &model, &zero, &zero, &zero, &w), 1.0, epsilon = 1e-15);

        let mut moving = rest.clone();
        moving.qdot[0] = 0.5;
        moving.qdot[1] = 1.0;
        let mut tau = zero.clone();
        tau[0] = 2.0;
        tau[1] = -3.0;
        let only_energy = RewardWeights { alive: 0.0, energy: 1.0, posture: 0.0, drift: 0.0, action_rate: 0.0 };
        assert_abs_diff_eq!(compute_reward(&moving, &model, &zero, &zero, &tau, &only_energy), -4.0, epsilon = 1e-15);

        let mut tilted = rest.clone();
        tilted.tilt = [0.1, 0.0];
        assert_abs_diff_eq!(compute_reward(&tilted, &model, &zero, &zero, &zero, &w), 0.995, epsilon = 1e-12);
    }

    #[test]
    fn reset_is_deterministic_with_one_ball() {
        let arena = arena_with(SignalFn::Proximity);
        let (a, oa) = arena.reset(11);
        let (_, ob) = arena.reset(11);
        assert_eq!(oa, ob);
        assert_eq!(a.balls.len(), 1);
        assert!(arena.config.throw_interval.contains(a.next_throw_time));
        assert_eq!(oa.actor.len(), arena.actor_dim());
        assert_eq!(oa.critic.len(), arena.actor_dim() + 3);
        assert_eq!(&oa.critic[..oa.actor.len()], &oa.actor[..]);
    }

    #[test]
    fn reset_joint_noise_bounded() {
        let arena = arena_with(SignalFn::Binary);
        for seed in 0..10_000u64 {
            let (ep, _) = arena.reset(seed);
            for (q, j) in ep.robot.q.iter().zip(&arena.model.joints) {
                assert!((q - j.default).abs() <= 0.05 + 1e-15);
            }
        }
    }

    #[test]
    fn contact_terminates_with_zero_reward() {
        let arena = arena_with(SignalFn::Proximity);
        let (mut ep, _) = arena.reset(3);
        // ball parked inside the chest
        ep.balls = vec![Ball { position: Vec3::new(0.0, 0.0, 1.4), velocity: Vec3::ZERO, radius: 0.15 }];
        let res = arena.step(&mut ep, &[0.0; 21]).unwrap();
        assert!(res.terminated && !res.truncated);
        assert!(res.info.contact);
        assert_eq!(res.reward, 0.0);
        assert!(matches!(arena.step(&mut ep, &[0.0; 21]), Err(Error::Usage(_))));
    }

    #[test]
    fn survival_to_horizon_is_success() {
        let mut arena = arena_with(SignalFn::Proximity);
        // push throws far away so nothing interferes
        arena.config.spawn_distance = Span::new(7.5, 7.9);
        arena.config.speed = Span::new(0.1, 0.2);
        arena.config.reset_joint_noise = 0.0;
        let (mut ep, _) = arena.reset(1);
        let zero = vec![0.0; 21];
        let mut last = None;
        for k in 0..150 {
            let res = arena.step(&mut ep, &zero).unwrap();
            if k < 149 {
                assert!(!res.done(), "ended early at {k}: {:?}", res.info);
                assert_abs_diff_eq!(res.reward, 1.0, epsilon = 1e-6);
            }
            last = Some(res);
        }
        let last = last.unwrap();
        assert!(last.truncated && !last.terminated && last.info.success);
        assert_eq!(last.episode_steps, arena.config.max_episode_steps());
    }

    #[test]
    fn fall_terminates() {
        let arena = arena_with(SignalFn::Proximity);
        let (mut ep, _) = arena.reset(1);
        ep.balls.clear();
        ep.robot.tilt = [0.49, 0.0];
        ep.robot.tilt_rate = [2.0, 0.0];
        let res = arena.step(&mut ep, &[0.0; 21]).unwrap();
        assert!(res.terminated && res.info.fall && !res.info.contact);
    }

    #[test]
    fn ball_count_stays_bounded() {
        let arena = arena_with(SignalFn::Proximity);
        let mut config = arena.config.clone();
        config.throw_interval = Span::new(0.02, 0.03);
        config.success_time = 30.0;
        let arena = Arena { config, ..arena };
        let (mut ep, _) = arena.reset(2);
        ep.robot.tilt = [0.0; 2];
        for _ in 0..200 {
            match arena.step(&mut ep, &[0.0; 21]) {
                Ok(r) if r.done() => break,
                Ok(_) => assert!(ep.balls.len() <= 4),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn batched_results_independent_of_workers() {
        let arena = arena_with(SignalFn::Proximity);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let (mut env, _) = VecEnv::new(arena.clone(), 8, 42);
                let mut trace = Vec::new();
                for t in 0..40 {
                    let actions: Vec<f64> = (0..8 * 21).map(|k| ((k * 7 + t) as f64 * 0.37).sin()).collect();
                    for r in env.step(&actions).unwrap() {
                        trace.push((r.reward.to_bits(), r.terminated, r.truncated));
                        trace.extend(r.observation.critic.iter().map(|v| (v.to_bits(), false, false)));
                    }
                }
                trace
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn identical_seeds_give_identical_results() {
        let arena = arena_with(SignalFn::Binary);
        let mut envs: Vec<EpisodeState> = (0..4).map(|_| arena.reset(9).0).collect();
        let actions: Vec<f64> = (0..4).flat_map(|_| (0..21).map(|j| 0.1 * j as f64)).collect();
        let res = batched_step(&arena, &mut envs, &actions).unwrap();
        for r in &res[1..] {
            assert_eq!(r.observation, res[0].observation);
            assert_eq!(r.reward.to_bits(), res[0].reward.to_bits());
        }
        assert!(batched_step(&arena, &mut envs, &actions[..20]).is_err());
    }

    #[test]
    fn replay_rows() {
        let arena = arena_with(SignalFn::Proximity);
        let (ep, _) = arena.reset(0);
        let mut w = ReplayWriter::new(Vec::new()).unwrap();
        w.record(&arena, &ep).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], ReplayWriter::<Vec<u8>>::HEADER);
        assert_eq!(lines.len(), 1 + 1 + 2 * arena.model.links.len());
    }
}
