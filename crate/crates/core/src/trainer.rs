//! The training outer loop: sample a policy for the current return command,
//! roll it out, store the result, fit the evaluator on stored returns, fit
//! the generator against the evaluator, then raise the command to the best
//! seen return plus the drive parameter. Deterministic given a master seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::buffer::ReplayBuffer;
use crate::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta};
use crate::config::TrainingConfig;
use crate::diffcore::AdamState;
use crate::envs::{make_env, rollout, Env, RunningStat};
use crate::error::{Error, Result};
use crate::fingerprint::{evaluator_update, EvaluatorMeta, EvaluatorParams};
use crate::hypergen::{
    generate, generator_update, sample_policy, GeneratorMeta, GeneratorParams, NoiseSpec,
};
use crate::policy::PolicyParams;
use crate::rng::{stream_rng, Stream};

/// Next exploration command: zero before any data, otherwise the best stored
/// return plus the drive parameter.
pub fn next_command(buffer: &ReplayBuffer, drive: f64) -> f64 {
    match buffer.max_return() {
        Ok(best) => best + drive,
        Err(_) => 0.0,
    }
}

/// Full mutable training state; everything needed to continue a run.
pub struct TrainerState {
    pub gen: GeneratorParams,
    pub gen_opt: AdamState,
    pub eval: EvaluatorParams,
    pub eval_opt: AdamState,
    pub buffer: ReplayBuffer,
    pub stat: RunningStat,
    pub env: Box<dyn Env>,
    pub interactions: u64,
    pub episode: u64,
    pub command: f64,
    pub last_loss_v: f64,
    pub last_loss_g: f64,
    rng_noise: ChaCha8Rng,
    rng_env: ChaCha8Rng,
    rng_sampling: ChaCha8Rng,
    rng_eval: ChaCha8Rng,
}

impl TrainerState {
    /// Fresh state: initializes generator and evaluator from the init stream
    /// and sets the initial return command to zero.
    pub fn new(config: &TrainingConfig) -> Result<Self> {
        let env = make_env(&config.env)?;
        let spec = env.spec().clone();
        let mut init_rng = stream_rng(config.seed, Stream::Init);
        let gen = GeneratorParams::init(
            GeneratorMeta {
                obs_dim: spec.obs_dim,
                act_dim: spec.act_dim,
                hidden: config.hidden,
                slice_size: config.slice_size,
                embedding_dim: config.embedding_dim,
                head_hidden: config.head_hidden,
                output_scaling: config.output_scaling,
                command_scale: config.command_scale,
                bias_head_command: config.bias_head_command,
            },
            &mut init_rng,
        )?;
        let eval = EvaluatorParams::init(
            EvaluatorMeta {
                obs_dim: spec.obs_dim,
                act_dim: spec.act_dim,
                n_probes: config.probing_states,
                u_hidden: config.u_hidden,
            },
            &mut init_rng,
        );
        Ok(TrainerState {
            gen,
            gen_opt: AdamState::new(),
            eval,
            eval_opt: AdamState::new(),
            buffer: ReplayBuffer::new(config.buffer_capacity),
            stat: RunningStat::new(spec.obs_dim),
            env,
            interactions: 0,
            episode: 0,
            command: 0.0,
            last_loss_v: 0.0,
            last_loss_g: 0.0,
            rng_noise: stream_rng(config.seed, Stream::Noise),
            rng_env: stream_rng(config.seed, Stream::Env),
            rng_sampling: stream_rng(config.seed, Stream::Sampling),
            rng_eval: stream_rng(config.seed, Stream::EvalEnv),
        })
    }

    /// Restores a run exactly from a checkpoint (requires a buffer dump).
    pub fn from_checkpoint(config: &TrainingConfig, path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.kind != CheckpointKind::Generator {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "not a training checkpoint".into(),
            });
        }
        if ckpt.meta.env != config.env
            || ckpt.meta.hidden != config.hidden
            || ckpt.meta.slice_size != config.slice_size
            || ckpt.meta.n_probes != config.probing_states
        {
            return Err(Error::Config {
                key: "resume".into(),
                reason: format!(
                    "checkpoint architecture ({} hidden {}) does not match config ({} hidden {})",
                    ckpt.meta.env, ckpt.meta.hidden, config.env, config.hidden
                ),
            });
        }
        let buffer_name = ckpt.meta.buffer_ref.clone().ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            reason: "checkpoint has no buffer dump reference; rerun with dump_buffer = true".into(),
        })?;
        let buffer_path = path.parent().unwrap_or(Path::new(".")).join(buffer_name);
        let (buffer, _) = ReplayBuffer::read_dump(&buffer_path)?;

        let gen = ckpt.generator()?;
        let eval = ckpt.evaluator()?;
        let gen_opt = load_adam(&ckpt.arrays, ckpt.meta.gen_adam_t, "gen.");
        let eval_opt = load_adam(&ckpt.arrays, ckpt.meta.eval_adam_t, "eval.");

        let seed = ckpt.meta.seed;
        let mut restore = |stream: Stream| -> ChaCha8Rng {
            let mut rng = stream_rng(seed, stream);
            if let Some((_, pos)) = ckpt
                .meta
                .rng_pos
                .iter()
                .find(|(id, _)| *id == stream as u8)
            {
                rng.set_word_pos(*pos);
            }
            rng
        };

        Ok(TrainerState {
            gen,
            gen_opt,
            eval,
            eval_opt,
            buffer,
            stat: ckpt.stat.clone(),
            env: make_env(&config.env)?,
            interactions: ckpt.meta.interactions,
            episode: ckpt.meta.episode,
            command: ckpt.meta.command,
            last_loss_v: 0.0,
            last_loss_g: 0.0,
            rng_noise: restore(Stream::Noise),
            rng_env: restore(Stream::Env),
            rng_sampling: restore(Stream::Sampling),
            rng_eval: restore(Stream::EvalEnv),
        })
    }

    fn check_finite(&self, loss: f64, which: &str) -> Result<f64> {
        if !loss.is_finite() {
            return Err(Error::DivergedLoss {
                loss: which.into(),
                episode: self.episode,
                value: loss,
            });
        }
        Ok(loss)
    }

    /// Converts the state into a savable checkpoint. `buffer_ref` is the
    /// relative file name of the buffer dump, when one is written alongside.
    pub fn to_checkpoint(&self, config: &TrainingConfig, buffer_ref: Option<String>) -> Checkpoint {
        let mut arrays = BTreeMap::new();
        for (n, a) in self.gen.named() {
            arrays.insert(n, a.clone());
        }
        for (n, a) in self.eval.named() {
            arrays.insert(n, a.clone());
        }
        for (opt, tag) in [(&self.gen_opt, "m"), (&self.gen_opt, "v")] {
            let src = if tag == "m" { &opt.m } else { &opt.v };
            for (n, a) in src {
                arrays.insert(format!("adam.{tag}.{n}"), a.clone());
            }
        }
        for (opt, tag) in [(&self.eval_opt, "m"), (&self.eval_opt, "v")] {
            let src = if tag == "m" { &opt.m } else { &opt.v };
            for (n, a) in src {
                arrays.insert(format!("adam.{tag}.{n}"), a.clone());
            }
        }
        let return_seen = (
            self.buffer.min_return().unwrap_or(0.0),
            self.buffer.max_return().unwrap_or(0.0),
        );
        Checkpoint {
            kind: CheckpointKind::Generator,
            meta: CheckpointMeta {
                env: config.env.clone(),
                seed: config.seed,
                interactions: self.interactions,
                episode: self.episode,
                command: self.command,
                return_seen,
                obs_dim: self.gen.meta.obs_dim,
                act_dim: self.gen.meta.act_dim,
                hidden: self.gen.meta.hidden,
                slice_size: self.gen.meta.slice_size,
                embedding_dim: self.gen.meta.embedding_dim,
                head_hidden: self.gen.meta.head_hidden,
                n_probes: self.eval.meta.n_probes,
                u_hidden: self.eval.meta.u_hidden,
                command_scale: self.gen.meta.command_scale,
                output_scaling: self.gen.meta.output_scaling,
                bias_head_command: self.gen.meta.bias_head_command,
                output_activation: config.output_activation,
                gen_adam_t: self.gen_opt.t,
                eval_adam_t: self.eval_opt.t,
                rng_pos: vec![
                    (Stream::Noise as u8, self.rng_noise.get_word_pos()),
                    (Stream::Env as u8, self.rng_env.get_word_pos()),
                    (Stream::Sampling as u8, self.rng_sampling.get_word_pos()),
                    (Stream::EvalEnv as u8, self.rng_eval.get_word_pos()),
                ],
                buffer_ref,
            },
            stat: self.stat.clone(),
            arrays,
        }
    }
}

fn load_adam(
    arrays: &BTreeMap<String, Array2<f64>>,
    t: u64,
    param_prefix: &str,
) -> AdamState {
    let mut opt = AdamState::new();
    opt.t = t;
    for (name, arr) in arrays {
        if let Some(rest) = name.strip_prefix("adam.m.") {
            if rest.starts_with(param_prefix) {
                opt.m.insert(rest.to_string(), arr.clone());
            }
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            if rest.starts_with(param_prefix) {
                opt.v.insert(rest.to_string(), arr.clone());
            }
        }
    }
    opt
}

/// One full iteration: sample, roll out, store, update evaluator then
/// generator, refresh the command.
pub fn train_iteration(state: &mut TrainerState, config: &TrainingConfig) -> Result<()> {
    let theta = sample_policy(
        &state.gen,
        state.command,
        NoiseSpec {
            std: config.noise_std,
        },
        &mut state.rng_noise,
    )?;
    let outcome = rollout(
        state.env.as_mut(),
        &theta,
        &mut state.stat,
        &mut state.rng_env,
        true,
        config.output_activation,
    )?;
    state.interactions += outcome.steps as u64;
    state.episode += 1;
    state.buffer.push(outcome.ret, theta.flatten())?;

    let (obs_dim, act_dim, hidden) = (
        state.gen.meta.obs_dim,
        state.gen.meta.act_dim,
        state.gen.meta.hidden,
    );
    for _ in 0..config.evaluator_updates {
        let batch = state.buffer.sample(
            config.batch_size,
            config.recency_exponent,
            &mut state.rng_sampling,
        )?;
        let policies: Vec<(f64, PolicyParams)> = batch
            .iter()
            .map(|e| {
                PolicyParams::unflatten(obs_dim, act_dim, hidden, &e.theta).map(|p| (e.ret, p))
            })
            .collect::<Result<_>>()?;
        let refs: Vec<(f64, &PolicyParams)> = policies.iter().map(|(r, p)| (*r, p)).collect();
        let loss = evaluator_update(
            &mut state.eval,
            &refs,
            &mut state.eval_opt,
            config.evaluator_lr,
            config.output_activation,
        )?;
        state.last_loss_v = state.check_finite(loss, "evaluator")?;
    }

    for _ in 0..config.generator_updates {
        let batch = state.buffer.sample(
            config.batch_size,
            config.recency_exponent,
            &mut state.rng_sampling,
        )?;
        let returns: Vec<f64> = batch.iter().map(|e| e.ret).collect();
        let loss = generator_update(
            &mut state.gen,
            &state.eval,
            &returns,
            &mut state.gen_opt,
            config.generator_lr,
            config.output_activation,
        )?;
        state.last_loss_g = state.check_finite(loss, "generator")?;
    }

    state.command = next_command(&state.buffer, config.drive);
    Ok(())
}

/// Deterministic evaluation: generate at `max seen + drive` without noise and
/// average over `episodes` rollouts with frozen normalization statistics.
pub fn evaluate_generator(state: &mut TrainerState, config: &TrainingConfig) -> Result<(f64, f64, f64)> {
    let command = next_command(&state.buffer, config.drive);
    let theta = generate(&state.gen, command)?;
    let mut env = make_env(&config.env)?;
    let mut returns = Vec::with_capacity(config.eval_episodes);
    for _ in 0..config.eval_episodes {
        let mut frozen = state.stat.clone();
        let out = rollout(
            env.as_mut(),
            &theta,
            &mut frozen,
            &mut state.rng_eval,
            false,
            config.output_activation,
        )?;
        returns.push(out.ret);
    }
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / returns.len() as f64;
    Ok((mean, var.sqrt(), command))
}

/// One evaluation log row; the CSV schema is
/// `interactions,episode,command,eval_return_mean,eval_return_std,best_buffer_return,loss_V,loss_G`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub interactions: u64,
    pub episode: u64,
    pub command: f64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub best_buffer_return: f64,
    /// Empty for runs without losses (the random-search baseline).
    pub loss_v: Option<f64>,
    pub loss_g: Option<f64>,
}

pub const LOG_HEADER: &str =
    "interactions,episode,command,eval_return_mean,eval_return_std,best_buffer_return,loss_V,loss_G";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.interactions,
            self.episode,
            self.command,
            self.eval_return_mean,
            self.eval_return_std,
            self.best_buffer_return,
            opt(self.loss_v),
            opt(self.loss_g),
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub rows: Vec<LogRow>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    /// Mean evaluation return of the last log row.
    pub final_eval_mean: f64,
}

/// Runs the full training loop, writing `config.toml`, `log.csv`,
/// `checkpoint.bin`, and optionally `buffer.bin` into `out_dir`.
///
/// Evaluation fires at every multiple of `eval_interval` crossed by an
/// episode (capped at the interaction budget); an episode crossing several
/// multiples is evaluated once and logged once per multiple, so a run always
/// produces exactly `total_interactions / eval_interval` rows.
pub fn train(config: &TrainingConfig, out_dir: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let config_path = out_dir.join("config.toml");
    std::fs::write(&config_path, crate::config::to_toml(config))
        .map_err(|e| Error::io(config_path.display().to_string(), e))?;

    let mut state = match &config.resume {
        Some(path) => TrainerState::from_checkpoint(config, Path::new(path))?,
        None => TrainerState::new(config)?,
    };

    let log_path = out_dir.join("log.csv");
    let log_file = std::fs::File::create(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;
    let mut log = std::io::BufWriter::new(log_file);
    let log_io = |e| Error::io(log_path.display().to_string(), e);
    writeln!(log, "{LOG_HEADER}").map_err(log_io)?;

    let mut rows = Vec::new();
    while state.interactions < config.total_interactions {
        let before = state.interactions;
        train_iteration(&mut state, config)?;
        let after = state.interactions;

        let first_multiple = before / config.eval_interval + 1;
        let last_multiple = after / config.eval_interval;
        if first_multiple <= last_multiple {
            let (mean, std, command) = evaluate_generator(&mut state, config)?;
            for multiple in first_multiple..=last_multiple {
                let at = multiple * config.eval_interval;
                if at > config.total_interactions {
                    break;
                }
                let row = LogRow {
                    interactions: at,
                    episode: state.episode,
                    command,
                    eval_return_mean: mean,
                    eval_return_std: std,
                    best_buffer_return: state.buffer.max_return()?,
                    loss_v: Some(state.last_loss_v),
                    loss_g: Some(state.last_loss_g),
                };
                writeln!(log, "{}", row.to_csv()).map_err(log_io)?;
                rows.push(row);
            }
            if config.stage_checkpoints {
                let stage_path = out_dir.join(format!("ckpt_{after}.bin"));
                state.to_checkpoint(config, None).save(&stage_path)?;
            }
        }
    }
    log.flush().map_err(log_io)?;

    let buffer_ref = if config.dump_buffer {
        let name = "buffer.bin".to_string();
        state.buffer.write_dump(
            &out_dir.join(&name),
            state.gen.meta.obs_dim,
            state.gen.meta.act_dim,
            state.gen.meta.hidden,
        )?;
        Some(name)
    } else {
        None
    };
    let checkpoint_path = out_dir.join("checkpoint.bin");
    state
        .to_checkpoint(config, buffer_ref)
        .save(&checkpoint_path)?;

    let final_eval_mean = rows.last().map(|r| r.eval_return_mean).unwrap_or(f64::NAN);
    Ok(TrainOutcome {
        rows,
        checkpoint_path,
        log_path,
        final_eval_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainingConfig {
        TrainingConfig {
            env: "pointreacher".into(),
            hidden: 8,
            slice_size: 4,
            embedding_dim: 3,
            head_hidden: 12,
            probing_states: 6,
            u_hidden: 12,
            batch_size: 4,
            generator_updates: 2,
            evaluator_updates: 2,
            total_interactions: 600,
            eval_interval: 200,
            eval_episodes: 2,
            seed: 3,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn next_command_strategy() {
        let mut buffer = ReplayBuffer::new(4);
        assert_eq!(next_command(&buffer, 20.0), 0.0);
        buffer.push(120.0, vec![]).unwrap();
        buffer.push(-5.0, vec![]).unwrap();
        assert_eq!(next_command(&buffer, 20.0), 140.0);
        assert_eq!(next_command(&buffer, 0.0), 120.0);
    }

    #[test]
    fn iteration_bookkeeping() {
        let config = tiny_config();
        let mut state = TrainerState::new(&config).unwrap();
        train_iteration(&mut state, &config).unwrap();
        assert_eq!(state.buffer.len(), 1);
        assert_eq!(state.episode, 1);
        // PointReacher always runs the full 100-step horizon.
        assert_eq!(state.interactions, 100);
        assert_eq!(state.gen_opt.t, config.generator_updates as u64);
        assert_eq!(state.eval_opt.t, config.evaluator_updates as u64);
    }

    #[test]
    fn zero_lr_freezes_params_but_buffer_grows() {
        let config = TrainingConfig {
            generator_lr: 0.0,
            evaluator_lr: 0.0,
            ..tiny_config()
        };
        let mut state = TrainerState::new(&config).unwrap();
        let gen0 = state.gen.clone();
        let eval0 = state.eval.clone();
        for _ in 0..3 {
            train_iteration(&mut state, &config).unwrap();
        }
        assert_eq!(state.gen, gen0);
        assert_eq!(state.eval, eval0);
        assert_eq!(state.buffer.len(), 3);
    }

    #[test]
    fn log_row_count_matches_budget() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let out = train(&config, dir.path()).unwrap();
        assert_eq!(
            out.rows.len() as u64,
            config.total_interactions / config.eval_interval
        );
        let text = std::fs::read_to_string(&out.log_path).unwrap();
        assert!(text.starts_with(LOG_HEADER));
        assert_eq!(text.lines().count(), 1 + out.rows.len());
        assert!(dir.path().join("config.toml").exists());
        assert!(out.checkpoint_path.exists());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = tiny_config();
        train(&config, dir_a.path()).unwrap();
        train(&config, dir_b.path()).unwrap();
        let log_a = std::fs::read(dir_a.path().join("log.csv")).unwrap();
        let log_b = std::fs::read(dir_b.path().join("log.csv")).unwrap();
        assert_eq!(log_a, log_b);
        let ck_a = std::fs::read(dir_a.path().join("checkpoint.bin")).unwrap();
        let ck_b = std::fs::read(dir_b.path().join("checkpoint.bin")).unwrap();
        assert_eq!(ck_a, ck_b);
    }

    #[test]
    fn resume_matches_straight_run() {
        let config_full = TrainingConfig {
            dump_buffer: true,
            ..tiny_config()
        };
        let dir_straight = tempfile::tempdir().unwrap();
        let straight = train(&config_full, dir_straight.path()).unwrap();

        let config_half = TrainingConfig {
            total_interactions: 300,
            ..config_full.clone()
        };
        let dir_half = tempfile::tempdir().unwrap();
        let half = train(&config_half, dir_half.path()).unwrap();

        let config_resume = TrainingConfig {
            resume: Some(half.checkpoint_path.display().to_string()),
            ..config_full.clone()
        };
        let dir_resume = tempfile::tempdir().unwrap();
        let resumed = train(&config_resume, dir_resume.path()).unwrap();

        // The resumed tail must match the straight run's tail exactly.
        let tail: Vec<&LogRow> = straight
            .rows
            .iter()
            .filter(|r| r.interactions > 300)
            .collect();
        assert_eq!(tail.len(), resumed.rows.len());
        for (a, b) in tail.iter().zip(resumed.rows.iter()) {
            assert_eq!(**a, *b);
        }

        // And the final checkpoints must be bit-identical apart from nothing.
        let ck_a = std::fs::read(&straight.checkpoint_path).unwrap();
        let ck_b = std::fs::read(&resumed.checkpoint_path).unwrap();
        assert_eq!(ck_a, ck_b);
    }

    #[test]
    fn checkpoint_roundtrips_through_state() {
        let config = tiny_config();
        let mut state = TrainerState::new(&config).unwrap();
        train_iteration(&mut state, &config).unwrap();
        let ckpt = state.to_checkpoint(&config, None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);
        let gen = back.generator().unwrap();
        assert_eq!(gen, state.gen);
    }
}
