//! Built-in continuous-control environments with exact, documented dynamics,
//! plus episode rollout and streaming observation normalization.

mod mountain_car;
mod point_reacher;
mod running_stat;

pub use mountain_car::MountainCar;
pub use point_reacher::PointReacher;
pub use running_stat::RunningStat;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::policy::{OutputActivation, PolicyParams};

/// Static description of an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub action_low: f64,
    pub action_high: f64,
    pub horizon: usize,
    /// Rough min/max achievable return, used to pick analysis sweep ranges.
    pub return_hint: (f64, f64),
}

impl EnvSpec {
    pub fn action_bounds(&self) -> (f64, f64) {
        (self.action_low, self.action_high)
    }
}

pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// Advances one step. Callers clip actions to the declared bounds first;
    /// non-finite actions are rejected.
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;
}

/// Environment registry keyed by config name.
pub fn make_env(name: &str) -> Result<Box<dyn Env>> {
    match name {
        "mountaincar" => Ok(Box::new(MountainCar::new())),
        "pointreacher" => Ok(Box::new(PointReacher::new())),
        other => Err(Error::UnknownEnv { name: other.into() }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOutcome {
    /// Undiscounted sum of raw rewards.
    pub ret: f64,
    pub steps: usize,
}

/// One recorded step, for trace-replay checks.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub raw_obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

/// Runs one episode: normalize the observation (updating `stat` first when
/// `update_stats` is set), act through the policy clipped to the action
/// bounds, accumulate raw rewards with discount 1, stop on `done` or at the
/// horizon.
pub fn rollout(
    env: &mut dyn Env,
    theta: &PolicyParams,
    stat: &mut RunningStat,
    rng: &mut ChaCha8Rng,
    update_stats: bool,
    activation: OutputActivation,
) -> Result<RolloutOutcome> {
    rollout_inner(env, theta, stat, rng, update_stats, activation, None)
}

/// [`rollout`] that also records `(raw obs, action, reward)` per step.
pub fn rollout_traced(
    env: &mut dyn Env,
    theta: &PolicyParams,
    stat: &mut RunningStat,
    rng: &mut ChaCha8Rng,
    update_stats: bool,
    activation: OutputActivation,
    trace: &mut Vec<TraceStep>,
) -> Result<RolloutOutcome> {
    rollout_inner(env, theta, stat, rng, update_stats, activation, Some(trace))
}

fn rollout_inner(
    env: &mut dyn Env,
    theta: &PolicyParams,
    stat: &mut RunningStat,
    rng: &mut ChaCha8Rng,
    update_stats: bool,
    activation: OutputActivation,
    mut trace: Option<&mut Vec<TraceStep>>,
) -> Result<RolloutOutcome> {
    let bounds = env.spec().action_bounds();
    let horizon = env.spec().horizon;
    let mut obs = env.reset(rng);
    let mut ret = 0.0;
    let mut steps = 0;
    while steps < horizon {
        if update_stats {
            stat.update(&obs);
        }
        let normalized = stat.normalize(&obs);
        let action = theta.forward(&normalized, bounds, activation)?;
        let action_slice = action.as_slice().expect("contiguous action");
        let outcome = env.step(action_slice)?;
        steps += 1;
        ret += outcome.reward;
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceStep {
                raw_obs: obs.clone(),
                action: action_slice.to_vec(),
                reward: outcome.reward,
            });
        }
        obs = outcome.obs;
        if outcome.done {
            break;
        }
    }
    Ok(RolloutOutcome { ret, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::init_policy;
    use crate::rng::{stream_rng, Stream};

    fn zero_policy(obs: usize, act: usize, hidden: usize) -> PolicyParams {
        let len = hidden * obs + hidden + hidden * hidden + hidden + act * hidden + act;
        PolicyParams::unflatten(obs, act, hidden, &vec![0.0; len]).unwrap()
    }

    #[test]
    fn zero_policy_reacher_return() {
        let mut env = PointReacher::new();
        let theta = zero_policy(4, 2, 16);
        let mut stat = RunningStat::new(4);
        let mut rng = stream_rng(0, Stream::Env);
        let out = rollout(
            &mut env,
            &theta,
            &mut stat,
            &mut rng,
            false,
            OutputActivation::Linear,
        )
        .unwrap();
        let expect = -100.0 * (2.0f64).sqrt() * 0.6;
        assert!((out.ret - expect).abs() < 1e-9, "{} vs {expect}", out.ret);
        assert_eq!(out.steps, 100);
    }

    #[test]
    fn steps_never_exceed_horizon() {
        let mut env = MountainCar::new();
        let theta = init_policy(2, 1, 16, 16, &mut stream_rng(1, Stream::Init)).unwrap();
        let mut stat = RunningStat::new(2);
        let mut rng = stream_rng(1, Stream::Env);
        for _ in 0..5 {
            let out = rollout(
                &mut env,
                &theta,
                &mut stat,
                &mut rng,
                true,
                OutputActivation::Linear,
            )
            .unwrap();
            assert!(out.steps <= env.spec().horizon);
        }
    }

    #[test]
    fn frozen_stats_make_rollouts_reproducible() {
        let mut env = MountainCar::new();
        let theta = init_policy(2, 1, 16, 16, &mut stream_rng(2, Stream::Init)).unwrap();
        let mut stat = RunningStat::new(2);
        stat.update(&[-0.5, 0.0]);
        stat.update(&[-0.45, 0.01]);
        let run = |stat: &RunningStat| {
            let mut env2 = MountainCar::new();
            let mut frozen = stat.clone();
            let mut rng = stream_rng(7, Stream::EvalEnv);
            rollout(
                &mut env2,
                &theta,
                &mut frozen,
                &mut rng,
                false,
                OutputActivation::Linear,
            )
            .unwrap()
        };
        let _ = &mut env;
        let a = run(&stat);
        let b = run(&stat);
        assert_eq!(a.ret.to_bits(), b.ret.to_bits());
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn stats_untouched_without_update_flag() {
        let mut env = PointReacher::new();
        let theta = zero_policy(4, 2, 16);
        let mut stat = RunningStat::new(4);
        stat.update(&[0.1, 0.2, 0.0, 0.0]);
        stat.update(&[0.3, -0.2, 0.0, 0.0]);
        let before = stat.clone();
        let mut rng = stream_rng(3, Stream::Env);
        rollout(
            &mut env,
            &theta,
            &mut stat,
            &mut rng,
            false,
            OutputActivation::Linear,
        )
        .unwrap();
        assert_eq!(stat, before);
    }

    #[test]
    fn return_matches_trace_replay() {
        let mut env = MountainCar::new();
        let theta = init_policy(2, 1, 16, 16, &mut stream_rng(4, Stream::Init)).unwrap();
        let mut stat = RunningStat::new(2);
        let mut rng = stream_rng(4, Stream::Env);
        let mut trace = Vec::new();
        let out = rollout_traced(
            &mut env,
            &theta,
            &mut stat,
            &mut rng,
            true,
            OutputActivation::Linear,
            &mut trace,
        )
        .unwrap();
        assert_eq!(trace.len(), out.steps);

        // Replay the recorded actions through the pure dynamics.
        let (mut p, mut v) = (trace[0].raw_obs[0], trace[0].raw_obs[1]);
        let mut total = 0.0;
        for step in &trace {
            let (np, nv, r, _) = MountainCar::dynamics(p, v, step.action[0]);
            assert_eq!(r.to_bits(), step.reward.to_bits());
            total += r;
            p = np;
            v = nv;
        }
        assert_eq!(total.to_bits(), out.ret.to_bits());
    }

    #[test]
    fn unknown_env_name_errors() {
        assert!(make_env("cartpole").is_err());
        assert!(make_env("mountaincar").is_ok());
        assert!(make_env("pointreacher").is_ok());
    }
}
