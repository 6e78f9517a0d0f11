//! Two-aircraft dogfight with simplified point-mass kinematics.
//!
//! Red is the learning agent and blue is a scripted expert. Red earns +1 per
//! step it holds a lock on blue, -1 per step it is locked, and -1000 when it
//! leaves the arena. The episode ends at 3000 steps, when either aircraft
//! leaves the arena, or when either side accumulates 1000 lock steps.
//!
//! Attitude is `(heading, pitch, roll)`. Heading is measured counterclockwise
//! from +x in the horizontal plane, pitch is positive nose-up and roll is
//! positive right-wing-down. The body axes are forward, right and up.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, SimRng, StepResult};
use crate::policy::ActionSpace;

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Angle between two vectors in radians, stable near 0 and pi.
pub fn angle_between(a: Vec3, b: Vec3) -> f64 {
    norm(cross(a, b)).atan2(dot(a, b))
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AircraftState {
    pub position: Vec3,
    pub speed: f64,
    pub heading: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl AircraftState {
    pub fn forward(&self) -> Vec3 {
        let (st, ct) = self.pitch.sin_cos();
        let (sp, cp) = self.heading.sin_cos();
        [ct * cp, ct * sp, st]
    }

    fn level_axes(&self) -> (Vec3, Vec3) {
        let (st, ct) = self.pitch.sin_cos();
        let (sp, cp) = self.heading.sin_cos();
        let left = [-sp, cp, 0.0];
        let up = [-st * cp, -st * sp, ct];
        (left, up)
    }

    pub fn up(&self) -> Vec3 {
        let (l0, u0) = self.level_axes();
        let (sr, cr) = self.roll.sin_cos();
        [
            cr * u0[0] - sr * l0[0],
            cr * u0[1] - sr * l0[1],
            cr * u0[2] - sr * l0[2],
        ]
    }

    pub fn right(&self) -> Vec3 {
        let (l0, u0) = self.level_axes();
        let (sr, cr) = self.roll.sin_cos();
        [
            -(cr * l0[0] + sr * u0[0]),
            -(cr * l0[1] + sr * u0[1]),
            -(cr * l0[2] + sr * u0[2]),
        ]
    }

    /// World vector expressed as (forward, right, up) components.
    pub fn to_body(&self, v: Vec3) -> Vec3 {
        [dot(v, self.forward()), dot(v, self.right()), dot(v, self.up())]
    }

    pub fn velocity(&self) -> Vec3 {
        let f = self.forward();
        [f[0] * self.speed, f[1] * self.speed, f[2] * self.speed]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlAction {
    pub throttle_brake: f64,
    pub elevator: f64,
    pub roll: f64,
    pub rudder: f64,
}

impl ControlAction {
    /// Reads up to four values, clamping each to `[-1, 1]`; missing or
    /// non-finite entries become 0.
    pub fn from_slice(a: &[f64]) -> Self {
        let at = |k: usize| {
            let v = a.get(k).copied().unwrap_or(0.0);
            if v.is_finite() {
                v.clamp(-1.0, 1.0)
            } else {
                0.0
            }
        };
        Self {
            throttle_brake: at(0),
            elevator: at(1),
            roll: at(2),
            rudder: at(3),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.throttle_brake, self.elevator, self.roll, self.rudder]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Red,
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Terminal {
    MaxSteps,
    OutOfBounds(Side),
    /// The named side accumulated the lock-step limit.
    LockWin(Side),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EpisodeStatus {
    pub step: usize,
    /// Steps in which red held a lock on blue.
    pub lock_steps_agent: usize,
    /// Steps in which blue held a lock on red.
    pub lock_steps_opponent: usize,
    pub terminal: Option<Terminal>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DogfightState {
    pub red: AircraftState,
    pub blue: AircraftState,
    pub status: EpisodeStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DogfightConfig {
    pub dt: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    pub max_accel: f64,
    /// Maximum pitch, roll and yaw rates in degrees per second.
    pub pitch_rate_deg: f64,
    pub roll_rate_deg: f64,
    pub yaw_rate_deg: f64,
    pub max_pitch_deg: f64,
    pub half_extent: f64,
    pub min_altitude: f64,
    pub max_altitude: f64,
    pub spawn_separation: f64,
    pub spawn_altitude: f64,
    pub spawn_speed: f64,
    pub spawn_jitter_m: f64,
    pub spawn_jitter_deg: f64,
    pub lock_cone_deg: f64,
    pub lock_range: f64,
    /// Boundary rule for the lock cone: `<=` when true, `<` otherwise.
    pub inclusive_cone: bool,
    pub max_steps: usize,
    pub lock_limit: usize,
    pub out_of_bounds_penalty: f64,
    pub dense_reward: bool,
    pub k_pointing: f64,
    pub k_closure: f64,
    pub k_locked: f64,
    pub d_max: f64,
    pub brake_aspect_deg: f64,
    pub brake_distance: f64,
    pub expert_magnitude: f64,
    pub expert_noise: f64,
    pub expert_deadband_deg: f64,
}

impl Default for DogfightConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            min_speed: 50.0,
            max_speed: 400.0,
            max_accel: 20.0,
            pitch_rate_deg: 30.0,
            roll_rate_deg: 90.0,
            yaw_rate_deg: 15.0,
            max_pitch_deg: 85.0,
            half_extent: 10_000.0,
            min_altitude: 100.0,
            max_altitude: 10_000.0,
            spawn_separation: 8_000.0,
            spawn_altitude: 5_000.0,
            spawn_speed: 200.0,
            spawn_jitter_m: 100.0,
            spawn_jitter_deg: 5.0,
            lock_cone_deg: 10.0,
            lock_range: 1_000.0,
            inclusive_cone: true,
            max_steps: 3000,
            lock_limit: 1000,
            out_of_bounds_penalty: -1000.0,
            dense_reward: true,
            k_pointing: 0.1,
            k_closure: 0.1,
            k_locked: 0.01,
            d_max: 10_000.0,
            brake_aspect_deg: 30.0,
            brake_distance: 3_000.0,
            expert_magnitude: 0.9,
            expert_noise: 0.1,
            expert_deadband_deg: 1.0,
        }
    }
}

impl DogfightConfig {
    pub fn in_bounds(&self, a: &AircraftState) -> bool {
        let [x, y, z] = a.position;
        x.abs() <= self.half_extent
            && y.abs() <= self.half_extent
            && z >= self.min_altitude
            && z <= self.max_altitude
    }
}

/// Relative geometry of `target` seen from `attacker`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub distance: f64,
    /// Antenna train angle: attacker forward axis vs line of sight.
    pub ata: f64,
    /// Aspect angle: target tail axis vs line of sight from target to attacker.
    pub aa: f64,
}

pub fn geometry(attacker: &AircraftState, target: &AircraftState) -> Geometry {
    let los = sub(target.position, attacker.position);
    let f_t = target.forward();
    let tail = [-f_t[0], -f_t[1], -f_t[2]];
    Geometry {
        distance: norm(los),
        ata: angle_between(attacker.forward(), los),
        aa: angle_between(tail, [-los[0], -los[1], -los[2]]),
    }
}

/// Whether `attacker` holds a lock on `target`.
pub fn lock_check(attacker: &AircraftState, target: &AircraftState, cfg: &DogfightConfig) -> bool {
    let g = geometry(attacker, target);
    if g.distance == 0.0 || g.distance >= cfg.lock_range {
        return false;
    }
    let cone = cfg.lock_cone_deg.to_radians();
    if cfg.inclusive_cone {
        // Absorbs rounding when the target is constructed exactly on the cone.
        g.ata <= cone + 1e-12
    } else {
        g.ata < cone
    }
}

/// Advances one aircraft by `dt`.
pub fn integrate(a: &AircraftState, u: &ControlAction, cfg: &DogfightConfig) -> AircraftState {
    let dt = cfg.dt;
    let q = u.elevator * cfg.pitch_rate_deg.to_radians();
    let p = u.roll * cfg.roll_rate_deg.to_radians();
    // Positive rudder yaws the nose right.
    let r = u.rudder * cfg.yaw_rate_deg.to_radians();
    let (sr, cr) = a.roll.sin_cos();
    let pitch_dot = q * cr - r * sr;
    let heading_dot = (-q * sr - r * cr) / a.pitch.cos();
    let max_pitch = cfg.max_pitch_deg.to_radians();
    let mut next = AircraftState {
        position: a.position,
        speed: (a.speed + u.throttle_brake * cfg.max_accel * dt).clamp(cfg.min_speed, cfg.max_speed),
        heading: wrap_angle(a.heading + heading_dot * dt),
        pitch: (a.pitch + pitch_dot * dt).clamp(-max_pitch, max_pitch),
        roll: wrap_angle(a.roll + p * dt),
    };
    let v = next.velocity();
    for k in 0..3 {
        next.position[k] += v[k] * dt;
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LockFlags {
    pub red_locks_blue: bool,
    pub blue_locks_red: bool,
}

/// One simulation step. Returns the next state, red's sparse reward and the
/// lock flags evaluated at the new positions.
pub fn step_state(
    state: &DogfightState,
    red_action: &ControlAction,
    blue_action: &ControlAction,
    cfg: &DogfightConfig,
) -> (DogfightState, f64, LockFlags) {
    let red = integrate(&state.red, red_action, cfg);
    let blue = integrate(&state.blue, blue_action, cfg);
    let locks = LockFlags {
        red_locks_blue: lock_check(&red, &blue, cfg),
        blue_locks_red: lock_check(&blue, &red, cfg),
    };
    let mut status = state.status;
    status.step += 1;
    let mut reward = 0.0;
    if locks.red_locks_blue {
        reward += 1.0;
        status.lock_steps_agent += 1;
    }
    if locks.blue_locks_red {
        reward -= 1.0;
        status.lock_steps_opponent += 1;
    }
    let red_out = !cfg.in_bounds(&red);
    let blue_out = !cfg.in_bounds(&blue);
    if red_out {
        reward += cfg.out_of_bounds_penalty;
    }
    status.terminal = if red_out {
        Some(Terminal::OutOfBounds(Side::Red))
    } else if blue_out {
        Some(Terminal::OutOfBounds(Side::Blue))
    } else if status.lock_steps_agent >= cfg.lock_limit {
        Some(Terminal::LockWin(Side::Red))
    } else if status.lock_steps_opponent >= cfg.lock_limit {
        Some(Terminal::LockWin(Side::Blue))
    } else if status.step >= cfg.max_steps {
        Some(Terminal::MaxSteps)
    } else {
        None
    };
    (DogfightState { red, blue, status }, reward, locks)
}

/// What one aircraft sees of the engagement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DogfightObs {
    pub own: AircraftState,
    /// Line of sight to the opponent in own body axes (forward, right, up), meters.
    pub rel_body: Vec3,
    /// Opponent forward axis in own body axes.
    pub opp_forward_body: Vec3,
    pub opp_speed: f64,
    pub geometry: Geometry,
    pub step_fraction: f64,
}

pub const OBS_DIM: usize = 20;

impl DogfightObs {
    pub fn new(own: &AircraftState, opp: &AircraftState, step: usize, cfg: &DogfightConfig) -> Self {
        Self {
            own: *own,
            rel_body: own.to_body(sub(opp.position, own.position)),
            opp_forward_body: own.to_body(opp.forward()),
            opp_speed: opp.speed,
            geometry: geometry(own, opp),
            step_fraction: step as f64 / cfg.max_steps as f64,
        }
    }

    /// Fixed-length, roughly unit-scale encoding.
    pub fn to_vec(&self, cfg: &DogfightConfig) -> Vec<f64> {
        let mid_speed = 0.5 * (cfg.min_speed + cfg.max_speed);
        let half_speed = 0.5 * (cfg.max_speed - cfg.min_speed);
        let mid_alt = 0.5 * (cfg.min_altitude + cfg.max_altitude);
        let half_alt = 0.5 * (cfg.max_altitude - cfg.min_altitude);
        let pi = std::f64::consts::PI;
        let o = &self.own;
        vec![
            o.position[0] / cfg.half_extent,
            o.position[1] / cfg.half_extent,
            (o.position[2] - mid_alt) / half_alt,
            (o.speed - mid_speed) / half_speed,
            o.heading.sin(),
            o.heading.cos(),
            o.pitch.sin(),
            o.roll.sin(),
            o.roll.cos(),
            self.rel_body[0] / cfg.d_max,
            self.rel_body[1] / cfg.d_max,
            self.rel_body[2] / cfg.d_max,
            self.opp_forward_body[0],
            self.opp_forward_body[1],
            self.opp_forward_body[2],
            (self.opp_speed - mid_speed) / half_speed,
            self.geometry.distance / cfg.d_max,
            self.geometry.ata / pi,
            self.geometry.aa / pi,
            self.step_fraction,
        ]
    }
}

/// Scripted pursuer: steer toward the target with fixed-magnitude stick
/// inputs and brake when sitting close behind it.
pub fn expert_policy(obs: &DogfightObs, cfg: &DogfightConfig, rng: &mut SimRng) -> ControlAction {
    let mag = cfg.expert_magnitude;
    let noise = cfg.expert_noise;
    let deadband = cfg.expert_deadband_deg.to_radians();
    let [fwd, right, up] = obs.rel_body;
    let vertical = up.atan2(fwd);
    let lateral = right.atan2(fwd);
    let mut steer = |angle: f64| {
        if angle > deadband {
            mag
        } else if angle < -deadband {
            -mag
        } else {
            rng.random_range(-noise..=noise)
        }
    };
    let elevator = steer(vertical);
    let rudder = steer(lateral);
    let throttle_brake = if obs.geometry.aa < cfg.brake_aspect_deg.to_radians()
        && obs.geometry.distance < cfg.brake_distance
    {
        -mag
    } else {
        mag
    };
    ControlAction {
        throttle_brake,
        elevator,
        roll: rng.random_range(-noise..=noise),
        rudder,
    }
}

/// Shaping term added to the learning reward: rewards pointing at and
/// closing on the opponent, and penalizes being locked.
pub fn dense_reward(prev: &Geometry, cur: &Geometry, being_locked: bool, cfg: &DogfightConfig) -> f64 {
    let pointing = cfg.k_pointing * (cur.ata.cos() - prev.ata.cos());
    let closure = cfg.k_closure * (prev.distance - cur.distance) / cfg.d_max;
    let locked = if being_locked { cfg.k_locked } else { 0.0 };
    pointing + closure - locked
}

/// Mean elevator and roll mapped to `[0, 1]^2`.
pub fn behavior_descriptor(actions: &[ControlAction]) -> Option<[f64; 2]> {
    if actions.is_empty() {
        return None;
    }
    let n = actions.len() as f64;
    let elevator = actions.iter().map(|a| a.elevator).sum::<f64>() / n;
    let roll = actions.iter().map(|a| a.roll).sum::<f64>() / n;
    Some([(elevator + 1.0) / 2.0, (roll + 1.0) / 2.0])
}

/// One recorded step for trajectory export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub red: AircraftState,
    pub blue: AircraftState,
    pub red_action: ControlAction,
    pub blue_action: ControlAction,
    pub locks: LockFlags,
}

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from(
        "step,red_x,red_y,red_z,red_speed,red_heading,red_pitch,red_roll,\
         blue_x,blue_y,blue_z,blue_speed,blue_heading,blue_pitch,blue_roll,\
         red_throttle,red_elevator,red_aileron,red_rudder,\
         blue_throttle,blue_elevator,blue_aileron,blue_rudder,red_locks,blue_locks\n",
    );
    for r in rows {
        let _ = write!(out, "{}", r.step);
        for a in [&r.red, &r.blue] {
            let _ = write!(
                out,
                ",{},{},{},{},{},{},{}",
                a.position[0], a.position[1], a.position[2], a.speed, a.heading, a.pitch, a.roll
            );
        }
        for u in [&r.red_action, &r.blue_action] {
            let _ = write!(out, ",{},{},{},{}", u.throttle_brake, u.elevator, u.roll, u.rudder);
        }
        let _ = writeln!(
            out,
            ",{},{}",
            r.locks.red_locks_blue as u8, r.locks.blue_locks_red as u8
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct DogfightEnv {
    config: DogfightConfig,
    state: DogfightState,
    elevator_sum: f64,
    roll_sum: f64,
    action_count: usize,
    recording: bool,
    trajectory: Vec<TrajectoryRow>,
    last_locks: LockFlags,
}

impl DogfightEnv {
    pub fn new(config: DogfightConfig) -> Self {
        let state = spawn_fixed(&config);
        Self {
            config,
            state,
            elevator_sum: 0.0,
            roll_sum: 0.0,
            action_count: 0,
            recording: false,
            trajectory: Vec::new(),
            last_locks: LockFlags {
                red_locks_blue: false,
                blue_locks_red: false,
            },
        }
    }

    pub fn config(&self) -> &DogfightConfig {
        &self.config
    }

    pub fn state(&self) -> &DogfightState {
        &self.state
    }

    pub fn last_locks(&self) -> LockFlags {
        self.last_locks
    }

    /// Keeps a per-step trajectory for the current episode.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn trajectory(&self) -> &[TrajectoryRow] {
        &self.trajectory
    }

    pub fn write_trajectory_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, trajectory_csv(&self.trajectory))
    }

    fn observe(&self) -> Vec<f64> {
        DogfightObs::new(&self.state.red, &self.state.blue, self.state.status.step, &self.config)
            .to_vec(&self.config)
    }
}

fn spawn_fixed(cfg: &DogfightConfig) -> DogfightState {
    let half = cfg.spawn_separation / 2.0;
    let craft = |x: f64, heading: f64| AircraftState {
        position: [x, 0.0, cfg.spawn_altitude],
        speed: cfg.spawn_speed,
        heading,
        pitch: 0.0,
        roll: 0.0,
    };
    DogfightState {
        red: craft(-half, 0.0),
        blue: craft(half, std::f64::consts::PI),
        status: EpisodeStatus::default(),
    }
}

/// Head-on spawn with seeded position and heading jitter.
pub fn spawn(cfg: &DogfightConfig, rng: &mut SimRng) -> DogfightState {
    let mut s = spawn_fixed(cfg);
    let jm = cfg.spawn_jitter_m;
    let jh = cfg.spawn_jitter_deg.to_radians();
    for a in [&mut s.red, &mut s.blue] {
        for k in 0..3 {
            if jm > 0.0 {
                a.position[k] += rng.random_range(-jm..=jm);
            }
        }
        if jh > 0.0 {
            a.heading = wrap_angle(a.heading + rng.random_range(-jh..=jh));
        }
    }
    s
}

impl Environment for DogfightEnv {
    fn obs_dim(&self) -> usize {
        OBS_DIM
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(4)
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64> {
        self.state = spawn(&self.config, rng);
        self.elevator_sum = 0.0;
        self.roll_sum = 0.0;
        self.action_count = 0;
        self.trajectory.clear();
        self.last_locks = LockFlags {
            red_locks_blue: false,
            blue_locks_red: false,
        };
        self.observe()
    }

    fn step(&mut self, action: &[f64], rng: &mut SimRng) -> StepResult {
        let red_action = ControlAction::from_slice(action);
        let blue_obs =
            DogfightObs::new(&self.state.blue, &self.state.red, self.state.status.step, &self.config);
        let blue_action = expert_policy(&blue_obs, &self.config, rng);
        let prev = geometry(&self.state.red, &self.state.blue);
        let (next, sparse, locks) = step_state(&self.state, &red_action, &blue_action, &self.config);
        let cur = geometry(&next.red, &next.blue);
        self.state = next;
        self.last_locks = locks;
        self.elevator_sum += red_action.elevator;
        self.roll_sum += red_action.roll;
        self.action_count += 1;
        if self.recording {
            self.trajectory.push(TrajectoryRow {
                step: next.status.step,
                red: next.red,
                blue: next.blue,
                red_action,
                blue_action,
                locks,
            });
        }
        let shaping = if self.config.dense_reward {
            dense_reward(&prev, &cur, locks.blue_locks_red, &self.config)
        } else {
            0.0
        };
        StepResult {
            obs: self.observe(),
            reward: sparse + shaping,
            sparse_reward: sparse,
            done: next.status.terminal.is_some(),
        }
    }

    fn behavior_descriptor(&self) -> Option<Vec<f64>> {
        (self.action_count > 0).then(|| {
            let n = self.action_count as f64;
            vec![
                (self.elevator_sum / n + 1.0) / 2.0,
                (self.roll_sum / n + 1.0) / 2.0,
            ]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn level(position: Vec3, heading: f64) -> AircraftState {
        AircraftState {
            position,
            speed: 200.0,
            heading,
            pitch: 0.0,
            roll: 0.0,
        }
    }

    fn cfg() -> DogfightConfig {
        DogfightConfig::default()
    }

    #[test]
    fn body_axes_are_orthonormal() {
        let a = AircraftState {
            position: [0.0; 3],
            speed: 100.0,
            heading: 0.7,
            pitch: -0.3,
            roll: 2.1,
        };
        let (f, r, u) = (a.forward(), a.right(), a.up());
        for (x, y) in [(f, r), (f, u), (r, u)] {
            assert!(dot(x, y).abs() < 1e-12);
        }
        for v in [f, r, u] {
            assert!((norm(v) - 1.0).abs() < 1e-12);
        }
        // Right-handed: forward x right = down.
        let d = cross(f, r);
        assert!((dot(d, u) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn lock_examples() {
        let c = cfg();
        let me = level([0.0, 0.0, 5000.0], 0.0);
        assert!(lock_check(&me, &level([500.0, 0.0, 5000.0], 0.0), &c));
        assert!(!lock_check(&me, &level([-500.0, 0.0, 5000.0], 0.0), &c));
        let t = 10.0f64.to_radians();
        let edge = level([999.0 * t.cos(), 999.0 * t.sin(), 5000.0], 0.0);
        assert!(lock_check(&me, &edge, &c));
        let strict = DogfightConfig {
            inclusive_cone: false,
            ..cfg()
        };
        let t = 10.001f64.to_radians();
        let outside = level([999.0 * t.cos(), 999.0 * t.sin(), 5000.0], 0.0);
        assert!(!lock_check(&me, &outside, &strict));
        assert!(!lock_check(&me, &level([1000.0, 0.0, 5000.0], 0.0), &c));
    }

    proptest! {
        #[test]
        fn target_behind_never_locked(
            heading in -3.1f64..3.1, pitch in -1.4f64..1.4, roll in -3.1f64..3.1,
            dist in 1.0f64..999.0, off_b in -1.2f64..1.2, off_c in -1.2f64..1.2,
        ) {
            let me = AircraftState { position: [0.0, 0.0, 5000.0], speed: 200.0, heading, pitch, roll };
            let f = me.forward();
            let r = me.right();
            let u = me.up();
            // Any direction with a non-positive forward component.
            let dir: Vec3 = [
                -f[0] + off_b * r[0] + off_c * u[0],
                -f[1] + off_b * r[1] + off_c * u[1],
                -f[2] + off_b * r[2] + off_c * u[2],
            ];
            let n = norm(dir);
            let pos = [dist * dir[0] / n, dist * dir[1] / n, 5000.0 + dist * dir[2] / n];
            prop_assert!(!lock_check(&me, &level(pos, 0.0), &cfg()));
        }

        #[test]
        fn integrate_keeps_invariants(
            throttle in -1.0f64..1.0, elev in -1.0f64..1.0, roll in -1.0f64..1.0, rud in -1.0f64..1.0,
            steps in 1usize..200,
        ) {
            let c = cfg();
            let u = ControlAction { throttle_brake: throttle, elevator: elev, roll, rudder: rud };
            let mut a = level([0.0, 0.0, 5000.0], 0.0);
            for _ in 0..steps {
                a = integrate(&a, &u, &c);
            }
            prop_assert!(a.speed >= c.min_speed && a.speed <= c.max_speed);
            prop_assert!(a.pitch.abs() <= c.max_pitch_deg.to_radians() + 1e-12);
            prop_assert!(a.heading.abs() <= std::f64::consts::PI && a.roll.abs() <= std::f64::consts::PI);
        }
    }

    #[test]
    fn step_examples() {
        let c = cfg();
        let idle = ControlAction::from_slice(&[0.0; 4]);
        let far = DogfightState {
            red: level([0.0, 0.0, 5000.0], 0.0),
            blue: level([5000.0, 3000.0, 5000.0], 0.0),
            status: EpisodeStatus::default(),
        };
        let (_, r, _) = step_state(&far, &idle, &idle, &c);
        assert_eq!(r, 0.0);

        // Blue dead ahead at 500 m, flying away so it never locks red.
        let ahead = DogfightState {
            blue: level([500.0, 0.0, 5000.0], 0.0),
            ..far
        };
        let (s, r, locks) = step_state(&ahead, &idle, &idle, &c);
        assert_eq!(r, 1.0);
        assert!(locks.red_locks_blue && !locks.blue_locks_red);
        assert_eq!(s.status.lock_steps_agent, 1);
        assert_eq!(s.status.terminal, None);

        let edge = DogfightState {
            red: level([c.half_extent - 1.0, 0.0, 5000.0], 0.0),
            ..far
        };
        let (s, r, _) = step_state(&edge, &idle, &idle, &c);
        assert_eq!(r, -1000.0);
        assert_eq!(s.status.terminal, Some(Terminal::OutOfBounds(Side::Red)));
    }

    #[test]
    fn mutual_lock_sums_to_zero() {
        let c = cfg();
        let idle = ControlAction::from_slice(&[0.0; 4]);
        let s = DogfightState {
            red: level([0.0, 0.0, 5000.0], 0.0),
            blue: level([600.0, 0.0, 5000.0], std::f64::consts::PI),
            status: EpisodeStatus::default(),
        };
        let (_, r, locks) = step_state(&s, &idle, &idle, &c);
        assert!(locks.red_locks_blue && locks.blue_locks_red);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn lock_limit_terminates() {
        let c = DogfightConfig {
            lock_limit: 3,
            ..cfg()
        };
        let idle = ControlAction::from_slice(&[0.0; 4]);
        let mut s = DogfightState {
            red: level([0.0, 0.0, 5000.0], 0.0),
            blue: level([300.0, 0.0, 5000.0], 0.0),
            status: EpisodeStatus::default(),
        };
        for _ in 0..3 {
            s = step_state(&s, &idle, &idle, &c).0;
        }
        assert_eq!(s.status.terminal, Some(Terminal::LockWin(Side::Red)));
    }

    fn obs_for(own: AircraftState, target: AircraftState) -> DogfightObs {
        DogfightObs::new(&own, &target, 0, &cfg())
    }

    #[test]
    fn expert_rules() {
        let c = cfg();
        let mut rng = SimRng::seed_from_u64(3);
        // Target 5 km dead ahead, crossing (aspect 90 degrees).
        let me = level([0.0, 0.0, 5000.0], 0.0);
        let obs = obs_for(me, level([5000.0, 0.0, 5000.0], std::f64::consts::FRAC_PI_2));
        assert!((obs.geometry.aa.to_degrees() - 90.0).abs() < 1e-9);
        let a = expert_policy(&obs, &c, &mut rng);
        assert_eq!(a.throttle_brake, 0.9);
        assert!(a.elevator.abs() <= 0.1 && a.rudder.abs() <= 0.1 && a.roll.abs() <= 0.1);

        // Target 2 km ahead, flying away slightly off axis: aspect 10 degrees.
        let t = level([2000.0, 0.0, 5000.0], 10f64.to_radians());
        let obs = obs_for(me, t);
        assert!((obs.geometry.aa.to_degrees() - 10.0).abs() < 1e-9);
        assert_eq!(expert_policy(&obs, &c, &mut rng).throttle_brake, -0.9);

        // Target up and to the right.
        let obs = obs_for(me, level([3000.0, -1000.0, 6000.0], 0.0));
        let a = expert_policy(&obs, &c, &mut rng);
        assert_eq!((a.elevator, a.rudder), (0.9, 0.9));

        let a1 = expert_policy(&obs, &c, &mut SimRng::seed_from_u64(9));
        let a2 = expert_policy(&obs, &c, &mut SimRng::seed_from_u64(9));
        assert_eq!(a1, a2);
    }

    #[test]
    fn expert_controls_turn_toward_target() {
        // Rudder right must swing heading right (clockwise) and elevator up
        // must raise the nose.
        let c = cfg();
        let a = level([0.0, 0.0, 5000.0], 0.0);
        let right = integrate(&a, &ControlAction::from_slice(&[0.0, 0.0, 0.0, 1.0]), &c);
        assert!(right.heading < 0.0);
        let up = integrate(&a, &ControlAction::from_slice(&[0.0, 1.0, 0.0, 0.0]), &c);
        assert!(up.pitch > 0.0);
        // Banked right and pulling turns right.
        let banked = AircraftState {
            roll: 0.5,
            ..a
        };
        let turn = integrate(&banked, &ControlAction::from_slice(&[0.0, 1.0, 0.0, 0.0]), &c);
        assert!(turn.heading < 0.0);
    }

    #[test]
    fn dense_reward_examples() {
        let c = cfg();
        let g = Geometry {
            distance: 5000.0,
            ata: 0.3,
            aa: 1.0,
        };
        assert_eq!(dense_reward(&g, &g, false, &c), 0.0);
        let closer = Geometry {
            distance: 4900.0,
            ..g
        };
        assert!((dense_reward(&g, &closer, false, &c) - 0.001).abs() < 1e-15);
        let away = Geometry { ata: 0.6, ..g };
        assert!(dense_reward(&g, &away, false, &c) < 0.0);
        assert!((dense_reward(&g, &g, true, &c) + 0.01).abs() < 1e-15);
    }

    #[test]
    fn descriptor_examples() {
        let zero = ControlAction::from_slice(&[0.0; 4]);
        assert_eq!(behavior_descriptor(&[zero; 5]), Some([0.5, 0.5]));
        let ext = ControlAction::from_slice(&[0.0, 1.0, -1.0, 0.0]);
        assert_eq!(behavior_descriptor(&[ext; 3]), Some([1.0, 0.0]));
        let bd = behavior_descriptor(&[ControlAction::from_slice(&[0.0, -0.3, 0.0, 0.0])]).unwrap();
        assert!((bd[0] - 0.35).abs() < 1e-12);
        assert_eq!((bd[0] * 10.0).floor() as usize, 3);
        assert_eq!(behavior_descriptor(&[]), None);
    }

    #[test]
    fn env_replay_is_bit_identical() {
        let run = || {
            let mut env = DogfightEnv::new(cfg());
            env.set_recording(true);
            let mut rng = SimRng::seed_from_u64(11);
            let mut obs = env.reset(&mut rng);
            let mut total = 0.0;
            loop {
                let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let out = env.step(&a, &mut rng);
                total += out.sparse_reward;
                obs.extend(out.obs);
                if out.done {
                    break;
                }
            }
            (obs, total, trajectory_csv(env.trajectory()))
        };
        let (o1, t1, c1) = run();
        let (o2, t2, c2) = run();
        assert_eq!(o1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), o2.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(t1.to_bits(), t2.to_bits());
        assert_eq!(c1, c2);
        assert!(c1.lines().count() > 1);
    }

    #[test]
    fn obs_is_finite_and_fixed_length() {
        let mut env = DogfightEnv::new(cfg());
        let mut rng = SimRng::seed_from_u64(1);
        let obs = env.reset(&mut rng);
        assert_eq!(obs.len(), OBS_DIM);
        assert!(obs.iter().all(|x| x.is_finite()));
    }
}
