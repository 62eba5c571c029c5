//! Replay buffer of (return, flattened policy) pairs with recency-biased
//! sampling: an entry whose data is `x` episodes old is drawn with
//! probability proportional to `1 / x^exponent`, counting the newest entry
//! as age 1.

use std::collections::VecDeque;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub ret: f64,
    pub theta: Vec<f64>,
    /// 1-based episode index at insertion.
    pub episode: u64,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    entries: VecDeque<ReplayEntry>,
    capacity: usize,
    episode: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "buffer capacity must be >= 1");
        ReplayBuffer {
            entries: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
            episode: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Global episode counter (equals the number of pushes so far).
    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn entries(&self) -> impl Iterator<Item = &ReplayEntry> {
        self.entries.iter()
    }

    /// Appends an entry stamped with the next episode index, evicting the
    /// oldest entry when full.
    pub fn push(&mut self, ret: f64, theta: Vec<f64>) -> Result<()> {
        if !ret.is_finite() {
            return Err(Error::NonFinite {
                context: "replay buffer return".into(),
            });
        }
        self.episode += 1;
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(ReplayEntry {
            ret,
            theta,
            episode: self.episode,
        });
        Ok(())
    }

    /// Draws `k` entries with replacement, weighted by `1 / age^exponent`
    /// where `age = current episode - insertion episode + 1`. Exponent 0 is
    /// uniform sampling.
    pub fn sample(&self, k: usize, exponent: f64, rng: &mut ChaCha8Rng) -> Result<Vec<&ReplayEntry>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let weights: Vec<f64> = self
            .entries
            .iter()
            .map(|e| {
                let age = (self.episode - e.episode + 1) as f64;
                age.powf(-exponent)
            })
            .collect();
        let dist = WeightedIndex::new(&weights).expect("positive weights");
        Ok((0..k)
            .map(|_| &self.entries[dist.sample(rng)])
            .collect())
    }

    pub fn max_return(&self) -> Result<f64> {
        self.entries
            .iter()
            .map(|e| e.ret)
            .fold(None, |acc: Option<f64>, r| {
                Some(acc.map_or(r, |a| a.max(r)))
            })
            .ok_or(Error::EmptyBuffer)
    }

    pub fn min_return(&self) -> Result<f64> {
        self.entries
            .iter()
            .map(|e| e.ret)
            .fold(None, |acc: Option<f64>, r| {
                Some(acc.map_or(r, |a| a.min(r)))
            })
            .ok_or(Error::EmptyBuffer)
    }

    /// Writes the dump format consumed by the PCA tool and by training
    /// resume: a header with policy dimensions and counters, then one
    /// `(return, episode, flat theta)` record per entry.
    pub fn write_dump(&self, path: &Path, obs_dim: usize, act_dim: usize, hidden: usize) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path.display().to_string(), e);
        w.write_all(b"GGPB").map_err(io_err)?;
        w.write_all(&1u32.to_le_bytes()).map_err(io_err)?;
        for dim in [obs_dim, act_dim, hidden, self.capacity] {
            w.write_all(&(dim as u64).to_le_bytes()).map_err(io_err)?;
        }
        w.write_all(&self.episode.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        let flat_len = self.entries.front().map_or(0, |e| e.theta.len());
        w.write_all(&(flat_len as u64).to_le_bytes()).map_err(io_err)?;
        for e in &self.entries {
            w.write_all(&e.ret.to_le_bytes()).map_err(io_err)?;
            w.write_all(&e.episode.to_le_bytes()).map_err(io_err)?;
            for v in &e.theta {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    /// Reads a dump written by [`ReplayBuffer::write_dump`]; returns the
    /// buffer plus the stored `(obs_dim, act_dim, hidden)`.
    pub fn read_dump(path: &Path) -> Result<(Self, (usize, usize, usize))> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = BufReader::new(file);
        let io_err = |e| Error::io(path.display().to_string(), e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != b"GGPB" {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "bad magic (expected GGPB)".into(),
            });
        }
        let version = read_u32(&mut r, path)?;
        if version != 1 {
            return Err(Error::Version {
                path: path.display().to_string(),
                found: version,
                supported: 1,
            });
        }
        let obs_dim = read_u64(&mut r, path)? as usize;
        let act_dim = read_u64(&mut r, path)? as usize;
        let hidden = read_u64(&mut r, path)? as usize;
        let capacity = read_u64(&mut r, path)? as usize;
        let episode = read_u64(&mut r, path)?;
        let count = read_u64(&mut r, path)? as usize;
        let flat_len = read_u64(&mut r, path)? as usize;
        let mut entries = VecDeque::with_capacity(count);
        for _ in 0..count {
            let ret = read_f64(&mut r, path)?;
            let ep = read_u64(&mut r, path)?;
            let mut theta = vec![0.0; flat_len];
            for v in theta.iter_mut() {
                *v = read_f64(&mut r, path)?;
            }
            entries.push_back(ReplayEntry {
                ret,
                theta,
                episode: ep,
            });
        }
        Ok((
            ReplayBuffer {
                entries,
                capacity,
                episode,
            },
            (obs_dim, act_dim, hidden),
        ))
    }
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read, path: &Path) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r, path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn ring_evicts_oldest() {
        let mut buf = ReplayBuffer::new(2);
        buf.push(1.0, vec![1.0]).unwrap();
        buf.push(2.0, vec![2.0]).unwrap();
        buf.push(3.0, vec![3.0]).unwrap();
        assert_eq!(buf.len(), 2);
        let rets: Vec<f64> = buf.entries().map(|e| e.ret).collect();
        assert_eq!(rets, vec![2.0, 3.0]);
    }

    #[test]
    fn size_and_episode_indices() {
        let mut buf = ReplayBuffer::new(10);
        for k in 1..=5 {
            buf.push(k as f64, vec![]).unwrap();
            assert_eq!(buf.len(), k);
        }
        let eps: Vec<u64> = buf.entries().map(|e| e.episode).collect();
        assert_eq!(eps, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn rejects_non_finite_return() {
        let mut buf = ReplayBuffer::new(4);
        assert!(buf.push(f64::NAN, vec![]).is_err());
    }

    #[test]
    fn recency_weights_match_derived_probabilities() {
        // Ages {1,2,3} at exponent 1.1 normalize to ~[0.5665, 0.2643, 0.1692]
        // (newest first); entry pushed first has age 3.
        let mut buf = ReplayBuffer::new(10);
        buf.push(10.0, vec![]).unwrap(); // age 3
        buf.push(20.0, vec![]).unwrap(); // age 2
        buf.push(30.0, vec![]).unwrap(); // age 1
        let mut rng = stream_rng(11, Stream::Sampling);
        let n = 100_000;
        let picks = buf.sample(n, 1.1, &mut rng).unwrap();
        let mut counts = [0usize; 3];
        for e in picks {
            counts[(e.episode - 1) as usize] += 1;
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        assert!((freq[2] - 0.5665).abs() < 0.01, "{freq:?}");
        assert!((freq[1] - 0.2643).abs() < 0.01, "{freq:?}");
        assert!((freq[0] - 0.1692).abs() < 0.01, "{freq:?}");
    }

    #[test]
    fn exponent_zero_is_uniform() {
        let mut buf = ReplayBuffer::new(10);
        for k in 0..4 {
            buf.push(k as f64, vec![]).unwrap();
        }
        let mut rng = stream_rng(12, Stream::Sampling);
        let n = 80_000;
        let picks = buf.sample(n, 0.0, &mut rng).unwrap();
        let mut counts = [0usize; 4];
        for e in picks {
            counts[(e.episode - 1) as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn single_entry_always_returned() {
        let mut buf = ReplayBuffer::new(10);
        buf.push(7.0, vec![]).unwrap();
        let mut rng = stream_rng(13, Stream::Sampling);
        for e in buf.sample(32, 1.1, &mut rng).unwrap() {
            assert_eq!(e.ret, 7.0);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let mut buf = ReplayBuffer::new(10);
        for k in 0..6 {
            buf.push(k as f64, vec![]).unwrap();
        }
        let draw = |seed| {
            let mut rng = stream_rng(seed, Stream::Sampling);
            buf.sample(16, 1.1, &mut rng)
                .unwrap()
                .iter()
                .map(|e| e.episode)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn max_return_examples() {
        let mut buf = ReplayBuffer::new(10);
        for r in [-5.0, 120.0, 7.0] {
            buf.push(r, vec![]).unwrap();
        }
        assert_eq!(buf.max_return().unwrap(), 120.0);
        assert_eq!(buf.min_return().unwrap(), -5.0);

        let mut single = ReplayBuffer::new(4);
        single.push(-3.5, vec![]).unwrap();
        assert_eq!(single.max_return().unwrap(), -3.5);
    }

    #[test]
    fn max_recomputed_after_eviction() {
        let mut buf = ReplayBuffer::new(2);
        buf.push(120.0, vec![]).unwrap();
        buf.push(5.0, vec![]).unwrap();
        buf.push(7.0, vec![]).unwrap(); // evicts 120
        assert_eq!(buf.max_return().unwrap(), 7.0);
    }

    #[test]
    fn empty_buffer_errors() {
        let buf = ReplayBuffer::new(4);
        assert!(buf.max_return().is_err());
        let mut rng = stream_rng(0, Stream::Sampling);
        assert!(buf.sample(1, 1.1, &mut rng).is_err());
    }

    #[test]
    fn dump_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buffer.bin");
        let mut buf = ReplayBuffer::new(8);
        buf.push(1.5, vec![0.25, -0.5, 1e-300]).unwrap();
        buf.push(-2.5, vec![0.1, 0.2, 0.3]).unwrap();
        buf.write_dump(&path, 1, 1, 1).unwrap();
        let (back, dims) = ReplayBuffer::read_dump(&path).unwrap();
        assert_eq!(dims, (1, 1, 1));
        assert_eq!(back.episode(), buf.episode());
        assert_eq!(back.capacity(), buf.capacity());
        let a: Vec<_> = buf.entries().collect();
        let b: Vec<_> = back.entries().collect();
        assert_eq!(a, b);
    }
}
