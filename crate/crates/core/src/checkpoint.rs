//! Binary checkpoint container: metadata plus named `f64` arrays, bit-exact
//! across save/load. Training checkpoints carry the generator, evaluator,
//! Adam moments, normalization statistics, RNG stream positions, and an
//! optional reference to a replay-buffer dump so a run can resume exactly
//! where it stopped. Search checkpoints carry the final policy instead.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::envs::RunningStat;
use crate::error::{Error, Result};
use crate::fingerprint::{EvaluatorMeta, EvaluatorParams};
use crate::hypergen::{GeneratorMeta, GeneratorParams};
use crate::policy::{OutputActivation, PolicyParams};

const MAGIC: &[u8; 4] = b"GGPC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Generator + evaluator training state.
    Generator,
    /// Random-search policy state.
    Policy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub env: String,
    pub seed: u64,
    pub interactions: u64,
    pub episode: u64,
    /// Command in effect when the checkpoint was written.
    pub command: f64,
    /// Min/max return observed in the buffer so far.
    pub return_seen: (f64, f64),
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: usize,
    pub slice_size: usize,
    pub embedding_dim: usize,
    pub head_hidden: usize,
    pub n_probes: usize,
    pub u_hidden: usize,
    pub command_scale: f64,
    pub output_scaling: bool,
    pub bias_head_command: bool,
    pub output_activation: OutputActivation,
    pub gen_adam_t: u64,
    pub eval_adam_t: u64,
    /// `(stream id, ChaCha word position)` pairs for exact resume.
    pub rng_pos: Vec<(u8, u128)>,
    /// Relative path of the buffer dump, when one was written.
    pub buffer_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub meta: CheckpointMeta,
    pub stat: RunningStat,
    pub arrays: BTreeMap<String, Array2<f64>>,
}

impl Checkpoint {
    pub fn generator_meta(&self) -> GeneratorMeta {
        GeneratorMeta {
            obs_dim: self.meta.obs_dim,
            act_dim: self.meta.act_dim,
            hidden: self.meta.hidden,
            slice_size: self.meta.slice_size,
            embedding_dim: self.meta.embedding_dim,
            head_hidden: self.meta.head_hidden,
            output_scaling: self.meta.output_scaling,
            command_scale: self.meta.command_scale,
            bias_head_command: self.meta.bias_head_command,
        }
    }

    pub fn evaluator_meta(&self) -> EvaluatorMeta {
        EvaluatorMeta {
            obs_dim: self.meta.obs_dim,
            act_dim: self.meta.act_dim,
            n_probes: self.meta.n_probes,
            u_hidden: self.meta.u_hidden,
        }
    }

    fn require_kind(&self, kind: CheckpointKind, what: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format {
                path: "checkpoint".into(),
                reason: format!("checkpoint does not contain {what}"),
            });
        }
        Ok(())
    }

    pub fn generator(&self) -> Result<GeneratorParams> {
        self.require_kind(CheckpointKind::Generator, "a generator")?;
        GeneratorParams::from_arrays(self.generator_meta(), &self.arrays)
    }

    pub fn evaluator(&self) -> Result<EvaluatorParams> {
        self.require_kind(CheckpointKind::Generator, "an evaluator")?;
        EvaluatorParams::from_arrays(self.evaluator_meta(), &self.arrays)
    }

    pub fn policy(&self) -> Result<PolicyParams> {
        self.require_kind(CheckpointKind::Policy, "a policy")?;
        let fetch = |name: &str| -> Result<Array2<f64>> {
            self.arrays
                .get(name)
                .cloned()
                .ok_or_else(|| Error::MissingBinding { name: name.into() })
        };
        Ok(PolicyParams {
            k1: fetch("policy.k1")?,
            k2: fetch("policy.k2")?,
            k3: fetch("policy.k3")?,
            b1: fetch("policy.b1")?,
            b2: fetch("policy.b2")?,
            b3: fetch("policy.b3")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let p = path.display().to_string();
        let io = |e| Error::io(p.clone(), e);

        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        let kind: u8 = match self.kind {
            CheckpointKind::Generator => 0,
            CheckpointKind::Policy => 1,
        };
        w.write_all(&[kind]).map_err(io)?;
        write_string(&mut w, &self.meta.env, &p)?;
        for v in [self.meta.seed, self.meta.interactions, self.meta.episode] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for v in [
            self.meta.command,
            self.meta.return_seen.0,
            self.meta.return_seen.1,
            self.meta.command_scale,
        ] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for v in [
            self.meta.obs_dim,
            self.meta.act_dim,
            self.meta.hidden,
            self.meta.slice_size,
            self.meta.embedding_dim,
            self.meta.head_hidden,
            self.meta.n_probes,
            self.meta.u_hidden,
        ] {
            w.write_all(&(v as u64).to_le_bytes()).map_err(io)?;
        }
        let flags: u8 = (self.meta.output_scaling as u8)
            | ((self.meta.bias_head_command as u8) << 1)
            | (((self.meta.output_activation == OutputActivation::Tanh) as u8) << 2);
        w.write_all(&[flags]).map_err(io)?;
        for v in [self.meta.gen_adam_t, self.meta.eval_adam_t] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.write_all(&(self.meta.rng_pos.len() as u32).to_le_bytes())
            .map_err(io)?;
        for (id, pos) in &self.meta.rng_pos {
            w.write_all(&[*id]).map_err(io)?;
            w.write_all(&pos.to_le_bytes()).map_err(io)?;
        }
        write_string(&mut w, self.meta.buffer_ref.as_deref().unwrap_or(""), &p)?;

        // Normalization statistics.
        w.write_all(&self.stat.count.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.stat.dim() as u64).to_le_bytes())
            .map_err(io)?;
        for v in self.stat.mean.iter().chain(self.stat.m2.iter()) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }

        // Named arrays.
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())
            .map_err(io)?;
        for (name, arr) in &self.arrays {
            write_string(&mut w, name, &p)?;
            w.write_all(&(arr.nrows() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&(arr.ncols() as u64).to_le_bytes()).map_err(io)?;
            for v in arr.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = BufReader::new(file);
        let p = path.display().to_string();

        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, &p)?;
        if &magic != MAGIC {
            return Err(Error::Format {
                path: p,
                reason: "bad magic (expected GGPC)".into(),
            });
        }
        let version = read_u32(&mut r, &p)?;
        if version != VERSION {
            return Err(Error::Version {
                path: p,
                found: version,
                supported: VERSION,
            });
        }
        let kind = match read_u8(&mut r, &p)? {
            0 => CheckpointKind::Generator,
            1 => CheckpointKind::Policy,
            other => {
                return Err(Error::Format {
                    path: p,
                    reason: format!("unknown checkpoint kind {other}"),
                })
            }
        };
        let env = read_string(&mut r, &p)?;
        let seed = read_u64(&mut r, &p)?;
        let interactions = read_u64(&mut r, &p)?;
        let episode = read_u64(&mut r, &p)?;
        let command = read_f64(&mut r, &p)?;
        let return_min = read_f64(&mut r, &p)?;
        let return_max = read_f64(&mut r, &p)?;
        let command_scale = read_f64(&mut r, &p)?;
        let mut dims = [0usize; 8];
        for d in dims.iter_mut() {
            *d = read_u64(&mut r, &p)? as usize;
        }
        let flags = read_u8(&mut r, &p)?;
        let gen_adam_t = read_u64(&mut r, &p)?;
        let eval_adam_t = read_u64(&mut r, &p)?;
        let n_rng = read_u32(&mut r, &p)? as usize;
        let mut rng_pos = Vec::with_capacity(n_rng);
        for _ in 0..n_rng {
            let id = read_u8(&mut r, &p)?;
            let mut buf = [0u8; 16];
            read_exact(&mut r, &mut buf, &p)?;
            rng_pos.push((id, u128::from_le_bytes(buf)));
        }
        let buffer_ref = {
            let s = read_string(&mut r, &p)?;
            if s.is_empty() {
                None
            } else {
                Some(s)
            }
        };

        let count = read_u64(&mut r, &p)?;
        let dim = read_u64(&mut r, &p)? as usize;
        let mut stat = RunningStat::new(dim);
        stat.count = count;
        for v in stat.mean.iter_mut() {
            *v = read_f64(&mut r, &p)?;
        }
        for v in stat.m2.iter_mut() {
            *v = read_f64(&mut r, &p)?;
        }

        let n_arrays = read_u32(&mut r, &p)? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..n_arrays {
            let name = read_string(&mut r, &p)?;
            let rows = read_u64(&mut r, &p)? as usize;
            let cols = read_u64(&mut r, &p)? as usize;
            let mut data = vec![0.0; rows * cols];
            for v in data.iter_mut() {
                *v = read_f64(&mut r, &p)?;
            }
            arrays.insert(name, Array2::from_shape_vec((rows, cols), data).unwrap());
        }

        Ok(Checkpoint {
            kind,
            meta: CheckpointMeta {
                env,
                seed,
                interactions,
                episode,
                command,
                return_seen: (return_min, return_max),
                obs_dim: dims[0],
                act_dim: dims[1],
                hidden: dims[2],
                slice_size: dims[3],
                embedding_dim: dims[4],
                head_hidden: dims[5],
                n_probes: dims[6],
                u_hidden: dims[7],
                command_scale,
                output_scaling: flags & 1 != 0,
                bias_head_command: flags & 2 != 0,
                output_activation: if flags & 4 != 0 {
                    OutputActivation::Tanh
                } else {
                    OutputActivation::Linear
                },
                gen_adam_t,
                eval_adam_t,
                rng_pos,
                buffer_ref,
            },
            stat,
            arrays,
        })
    }
}

fn write_string(w: &mut impl Write, s: &str, path: &str) -> Result<()> {
    let io = |e| Error::io(path.to_string(), e);
    w.write_all(&(s.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(s.as_bytes()).map_err(io)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path.to_string(), e))
}

fn read_u8(r: &mut impl Read, path: &str) -> Result<u8> {
    let mut buf = [0u8; 1];
    read_exact(r, &mut buf, path)?;
    Ok(buf[0])
}

fn read_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, path)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read, path: &str) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r, path)?))
}

fn read_string(r: &mut impl Read, path: &str) -> Result<String> {
    let len = read_u32(r, path)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, path)?;
    String::from_utf8(buf).map_err(|_| Error::Format {
        path: path.to_string(),
        reason: "non-utf8 string".into(),
    })
}
