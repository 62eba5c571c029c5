//! Continuous mountain car with classic-control constants.
//!
//! State: position in `[-1.2, 0.6]`, velocity in `[-0.07, 0.07]`.
//! Dynamics per step with (clipped) throttle `a`:
//!   v' = clamp(v + a * 0.0015 - 0.0025 * cos(3 p), +-0.07)
//!   p' = clamp(p + v', [-1.2, 0.6]),  v' := 0 when p' hits the left wall
//! Reward is `-0.1 a^2` per step, plus `+100` (and termination) once
//! `p' >= 0.45`. Episodes truncate at 999 steps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Env, EnvSpec, StepOutcome};
use crate::error::{Error, Result};

const POWER: f64 = 0.0015;
const GRAVITY: f64 = 0.0025;
const GOAL_POSITION: f64 = 0.45;
const MIN_POSITION: f64 = -1.2;
const MAX_POSITION: f64 = 0.6;
const MAX_SPEED: f64 = 0.07;

pub struct MountainCar {
    spec: EnvSpec,
    position: f64,
    velocity: f64,
}

impl MountainCar {
    pub fn new() -> Self {
        MountainCar {
            spec: EnvSpec {
                name: "mountaincar".into(),
                obs_dim: 2,
                act_dim: 1,
                action_low: -1.0,
                action_high: 1.0,
                horizon: 999,
                return_hint: (-100.0, 100.0),
            },
            position: -0.5,
            velocity: 0.0,
        }
    }

    /// Pure single-step dynamics; the struct methods delegate here.
    pub fn dynamics(position: f64, velocity: f64, action: f64) -> (f64, f64, f64, bool) {
        let mut v = velocity + action * POWER - GRAVITY * (3.0 * position).cos();
        v = v.clamp(-MAX_SPEED, MAX_SPEED);
        let mut p = (position + v).clamp(MIN_POSITION, MAX_POSITION);
        if p <= MIN_POSITION && v < 0.0 {
            v = 0.0;
            p = MIN_POSITION;
        }
        let mut reward = -0.1 * action * action;
        let done = p >= GOAL_POSITION;
        if done {
            reward += 100.0;
        }
        (p, v, reward, done)
    }
}

impl Default for MountainCar {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for MountainCar {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.position = rng.gen_range(-0.6..-0.4);
        self.velocity = 0.0;
        vec![self.position, self.velocity]
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite {
                context: "mountaincar action".into(),
            });
        }
        let (p, v, reward, done) = Self::dynamics(self.position, self.velocity, action[0]);
        self.position = p;
        self.velocity = v;
        Ok(StepOutcome {
            obs: vec![p, v],
            reward,
            done,
        })
    }
}
