//! Fixtures shared by the benchmarks.

use dodge_core::config::RunConfig;
use dodge_core::robot::{forward_kinematics, RobotState};
use dodge_core::{Pose, RobotModel, SensorNet, SensorNetConfig, SphereShape, Vec3};

/// A sensor net on the default robot at rest, with its sensor poses, base
/// pose and a handful of balls around the chest.
pub struct SensingScene {
    pub net: SensorNet,
    pub sensor_poses: Vec<Pose>,
    pub base: Pose,
    pub balls: Vec<SphereShape>,
}

pub fn sensing_scene(config: SensorNetConfig) -> SensingScene {
    let model = RobotModel::default_model();
    let state = RobotState::at_rest(&model, model.default_positions());
    let links = forward_kinematics(&model, &state);
    let net = SensorNet::new(&model, config).expect("sensor net builds");
    let mut sensor_poses = Vec::new();
    net.world_poses_into(&links, &mut sensor_poses);
    let balls = [(0.6, 0.0, 1.4), (0.3, 0.4, 1.2), (-0.2, -0.5, 1.6), (1.5, 0.2, 1.0)]
        .into_iter()
        .map(|(x, y, z)| SphereShape::new(Vec3::new(x, y, z), 0.15))
        .collect();
    SensingScene { net, sensor_poses, base: state.base_pose(), balls }
}

/// Run configuration with the given sensors and batch size.
pub fn run_config(sensors: SensorNetConfig, num_envs: usize) -> RunConfig {
    let mut cfg = RunConfig { sensors, ..Default::default() };
    cfg.ppo.num_envs = num_envs;
    cfg
}
