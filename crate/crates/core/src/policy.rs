//! The generated object: a deterministic MLP policy with two tanh hidden
//! layers, plus the hidden-neuron permutation utilities used to assert
//! fingerprint symmetry invariance.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{NodeId, Tape};
use crate::error::{Error, Result};

/// Output head of the policy: linear (clipped to action bounds at rollout
/// time) or tanh-squashed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Linear,
    Tanh,
}

/// Weight matrices `K1..K3` (stored output x input) and bias rows `b1..b3`.
///
/// Flat layout, used by the replay buffer and checkpoints: K1 row-major,
/// b1, K2, b2, K3, b3.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub k1: Array2<f64>, // hidden x obs_dim
    pub k2: Array2<f64>, // hidden x hidden
    pub k3: Array2<f64>, // act_dim x hidden
    pub b1: Array2<f64>, // 1 x hidden
    pub b2: Array2<f64>, // 1 x hidden
    pub b3: Array2<f64>, // 1 x act_dim
}

/// Tape leaves (or generated nodes) for one policy.
#[derive(Debug, Clone, Copy)]
pub struct PolicyNodes {
    pub k1: NodeId,
    pub k2: NodeId,
    pub k3: NodeId,
    pub b1: NodeId,
    pub b2: NodeId,
    pub b3: NodeId,
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization for every layer.
///
/// `slice_size` is the hypernetwork slice width; `hidden` must be divisible by
/// it so the same architecture can also be generated.
pub fn init_policy(
    obs_dim: usize,
    act_dim: usize,
    hidden: usize,
    slice_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PolicyParams> {
    check_dims(obs_dim, act_dim, hidden, slice_size)?;
    let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
    };
    Ok(PolicyParams {
        k1: uniform(hidden, obs_dim, obs_dim),
        b1: uniform(1, hidden, obs_dim),
        k2: uniform(hidden, hidden, hidden),
        b2: uniform(1, hidden, hidden),
        k3: uniform(act_dim, hidden, hidden),
        b3: uniform(1, act_dim, hidden),
    })
}

pub(crate) fn check_dims(
    obs_dim: usize,
    act_dim: usize,
    hidden: usize,
    slice_size: usize,
) -> Result<()> {
    if obs_dim == 0 || act_dim == 0 || hidden == 0 {
        return Err(Error::Config {
            key: "hidden".into(),
            reason: "policy dimensions must be >= 1".into(),
        });
    }
    if hidden % slice_size != 0 {
        return Err(Error::Config {
            key: "hidden".into(),
            reason: format!("hidden width {hidden} is not divisible by slice size {slice_size}"),
        });
    }
    Ok(())
}

impl PolicyParams {
    pub fn obs_dim(&self) -> usize {
        self.k1.ncols()
    }

    pub fn act_dim(&self) -> usize {
        self.k3.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.k1.nrows()
    }

    /// Raw (pre-clip) forward pass:
    /// `a = K3 tanh(K2 tanh(K1 obs + b1) + b2) + b3`, with an optional tanh
    /// on the output.
    pub fn forward_raw(&self, obs: &[f64], activation: OutputActivation) -> Result<Array1<f64>> {
        if obs.len() != self.obs_dim() {
            return Err(Error::Shape {
                context: "policy forward observation".into(),
                expected: format!("{}", self.obs_dim()),
                actual: format!("{}", obs.len()),
            });
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "policy forward observation".into(),
            });
        }
        let x = Array1::from_vec(obs.to_vec());
        let h1 = (self.k1.dot(&x) + &self.b1.row(0)).mapv(f64::tanh);
        let h2 = (self.k2.dot(&h1) + &self.b2.row(0)).mapv(f64::tanh);
        let mut a = self.k3.dot(&h2) + &self.b3.row(0);
        if activation == OutputActivation::Tanh {
            a.mapv_inplace(f64::tanh);
        }
        Ok(a)
    }

    /// Forward pass clipped to `[lo, hi]` per action coordinate.
    pub fn forward(
        &self,
        obs: &[f64],
        bounds: (f64, f64),
        activation: OutputActivation,
    ) -> Result<Array1<f64>> {
        let mut a = self.forward_raw(obs, activation)?;
        a.mapv_inplace(|v| v.clamp(bounds.0, bounds.1));
        Ok(a)
    }

    /// Permutes the neurons of hidden layer 1 or 2: rows of the incoming
    /// matrix and bias, columns of the outgoing matrix. The permutation must
    /// be a bijection on `0..hidden`.
    pub fn permute_hidden(&self, layer: usize, perm: &[usize]) -> Result<PolicyParams> {
        let hidden = self.hidden();
        if perm.len() != hidden {
            return Err(Error::InvalidPermutation {
                context: format!("hidden layer {layer}"),
                reason: format!("length {} != hidden width {hidden}", perm.len()),
            });
        }
        let mut seen = vec![false; hidden];
        for &p in perm {
            if p >= hidden || seen[p] {
                return Err(Error::InvalidPermutation {
                    context: format!("hidden layer {layer}"),
                    reason: format!("index {p} repeated or out of range"),
                });
            }
            seen[p] = true;
        }

        let permute_rows = |m: &Array2<f64>| {
            let mut out = m.clone();
            for (dst, &src) in perm.iter().enumerate() {
                out.row_mut(dst).assign(&m.row(src));
            }
            out
        };
        let permute_cols = |m: &Array2<f64>| {
            let mut out = m.clone();
            for (dst, &src) in perm.iter().enumerate() {
                out.column_mut(dst).assign(&m.column(src));
            }
            out
        };

        let mut out = self.clone();
        match layer {
            1 => {
                out.k1 = permute_rows(&self.k1);
                out.b1 = permute_cols(&self.b1);
                out.k2 = permute_cols(&self.k2);
            }
            2 => {
                out.k2 = permute_rows(&self.k2);
                out.b2 = permute_cols(&self.b2);
                out.k3 = permute_cols(&self.k3);
            }
            other => {
                return Err(Error::InvalidPermutation {
                    context: format!("hidden layer {other}"),
                    reason: "only hidden layers 1 and 2 exist".into(),
                })
            }
        }
        Ok(out)
    }

    /// Flat layout: K1 row-major, b1, K2, b2, K3, b3.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for m in [&self.k1, &self.b1, &self.k2, &self.b2, &self.k3, &self.b3] {
            out.extend(m.iter().copied());
        }
        out
    }

    pub fn flat_len(&self) -> usize {
        let (o, a, h) = (self.obs_dim(), self.act_dim(), self.hidden());
        h * o + h + h * h + h + a * h + a
    }

    /// Inverse of [`PolicyParams::flatten`] for the given dimensions.
    pub fn unflatten(obs_dim: usize, act_dim: usize, hidden: usize, flat: &[f64]) -> Result<Self> {
        let expect = hidden * obs_dim + hidden + hidden * hidden + hidden + act_dim * hidden + act_dim;
        if flat.len() != expect {
            return Err(Error::Shape {
                context: "policy unflatten".into(),
                expected: format!("{expect} values"),
                actual: format!("{}", flat.len()),
            });
        }
        let mut off = 0;
        let mut take = |rows: usize, cols: usize| {
            let len = rows * cols;
            let arr = Array2::from_shape_vec((rows, cols), flat[off..off + len].to_vec()).unwrap();
            off += len;
            arr
        };
        Ok(PolicyParams {
            k1: take(hidden, obs_dim),
            b1: take(1, hidden),
            k2: take(hidden, hidden),
            b2: take(1, hidden),
            k3: take(act_dim, hidden),
            b3: take(1, act_dim),
        })
    }

    /// Declares the six arrays as non-trainable tape inputs under `prefix`.
    pub fn declare_inputs(&self, tape: &mut Tape, prefix: &str) -> PolicyNodes {
        let (o, a, h) = (self.obs_dim(), self.act_dim(), self.hidden());
        PolicyNodes {
            k1: tape.input(&format!("{prefix}.k1"), h, o),
            k2: tape.input(&format!("{prefix}.k2"), h, h),
            k3: tape.input(&format!("{prefix}.k3"), a, h),
            b1: tape.input(&format!("{prefix}.b1"), 1, h),
            b2: tape.input(&format!("{prefix}.b2"), 1, h),
            b3: tape.input(&format!("{prefix}.b3"), 1, a),
        }
    }

    pub fn bind(&self, bindings: &mut crate::diffcore::Bindings, prefix: &str) {
        bindings.insert(format!("{prefix}.k1"), self.k1.clone());
        bindings.insert(format!("{prefix}.k2"), self.k2.clone());
        bindings.insert(format!("{prefix}.k3"), self.k3.clone());
        bindings.insert(format!("{prefix}.b1"), self.b1.clone());
        bindings.insert(format!("{prefix}.b2"), self.b2.clone());
        bindings.insert(format!("{prefix}.b3"), self.b3.clone());
    }
}

/// Builds the batched policy forward graph on a tape: `obs` is `n x obs_dim`,
/// the result is the raw `n x act_dim` action matrix.
pub fn forward_graph(
    tape: &mut Tape,
    nodes: &PolicyNodes,
    obs: NodeId,
    activation: OutputActivation,
) -> Result<NodeId> {
    let z1 = tape.matmul_tb(obs, nodes.k1)?;
    let z1 = tape.add(z1, nodes.b1)?;
    let h1 = tape.tanh(z1);
    let z2 = tape.matmul_tb(h1, nodes.k2)?;
    let z2 = tape.add(z2, nodes.b2)?;
    let h2 = tape.tanh(z2);
    let z3 = tape.matmul_tb(h2, nodes.k3)?;
    let z3 = tape.add(z3, nodes.b3)?;
    Ok(match activation {
        OutputActivation::Linear => z3,
        OutputActivation::Tanh => tape.tanh(z3),
    })
}
