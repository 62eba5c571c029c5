//! Dense-reward 2-D reaching task: accelerate a point mass from the origin
//! toward a fixed target at (0.6, 0.6). Reward each step is the negative
//! Euclidean distance to the target after moving, so returns vary smoothly
//! with policy quality, unlike mountain car's step-shaped return landscape.

use rand_chacha::ChaCha8Rng;

use super::{Env, EnvSpec, StepOutcome};
use crate::error::{Error, Result};

const TARGET: (f64, f64) = (0.6, 0.6);
const DT: f64 = 0.1;

pub struct PointReacher {
    spec: EnvSpec,
    position: (f64, f64),
    velocity: (f64, f64),
}

impl PointReacher {
    pub fn new() -> Self {
        PointReacher {
            spec: EnvSpec {
                name: "pointreacher".into(),
                obs_dim: 4,
                act_dim: 2,
                action_low: -1.0,
                action_high: 1.0,
                horizon: 100,
                return_hint: (-85.0, 0.0),
            },
            position: (0.0, 0.0),
            velocity: (0.0, 0.0),
        }
    }

    /// Pure single-step dynamics: `v' = v + a dt`, `p' = p + v' dt`,
    /// reward `-|p' - target|`.
    pub fn dynamics(
        position: (f64, f64),
        velocity: (f64, f64),
        action: (f64, f64),
    ) -> ((f64, f64), (f64, f64), f64) {
        let v = (velocity.0 + action.0 * DT, velocity.1 + action.1 * DT);
        let p = (position.0 + v.0 * DT, position.1 + v.1 * DT);
        let reward = -((p.0 - TARGET.0).powi(2) + (p.1 - TARGET.1).powi(2)).sqrt();
        (p, v, reward)
    }

    fn obs(&self) -> Vec<f64> {
        vec![
            self.position.0,
            self.position.1,
            self.velocity.0,
            self.velocity.1,
        ]
    }
}

impl Default for PointReacher {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for PointReacher {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.position = (0.0, 0.0);
        self.velocity = (0.0, 0.0);
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite {
                context: "pointreacher action".into(),
            });
        }
        let (p, v, reward) = Self::dynamics(self.position, self.velocity, (action[0], action[1]));
        self.position = p;
        self.velocity = v;
        Ok(StepOutcome {
            obs: self.obs(),
            reward,
            done: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn reset_is_origin_at_rest() {
        let mut env = PointReacher::new();
        let obs = env.reset(&mut stream_rng(0, Stream::Env));
        assert_eq!(obs, vec![0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_action_reward_is_distance_to_target() {
        let (_, _, reward) = PointReacher::dynamics((0.0, 0.0), (0.0, 0.0), (0.0, 0.0));
        let expect = -(2.0f64).sqrt() * 0.6;
        assert!((reward - expect).abs() < 1e-12);
        assert!((reward - -0.848528).abs() < 1e-6);
    }

    #[test]
    fn acceleration_integrates() {
        let ((px, py), (vx, vy), _) = PointReacher::dynamics((0.0, 0.0), (0.0, 0.0), (1.0, -0.5));
        assert!((vx - 0.1).abs() < 1e-15);
        assert!((vy - -0.05).abs() < 1e-15);
        assert!((px - 0.01).abs() < 1e-15);
        assert!((py - -0.005).abs() < 1e-15);
    }
}
