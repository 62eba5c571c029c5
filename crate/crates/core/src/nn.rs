//! Small fully-connected network used by the generator heads and the
//! evaluator MLP: ReLU hidden layers, linear output, stored as `in x out`
//! weight matrices plus `1 x out` bias rows.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{NodeId, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub ws: Vec<Array2<f64>>,
    pub bs: Vec<Array2<f64>>,
}

impl Mlp {
    /// Initializes weights and biases uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let mut ws = Vec::new();
        let mut bs = Vec::new();
        for pair in dims.windows(2) {
            let (din, dout) = (pair[0], pair[1]);
            let bound = 1.0 / (din as f64).sqrt();
            ws.push(Array2::from_shape_fn((din, dout), |_| {
                rng.gen_range(-bound..bound)
            }));
            bs.push(Array2::from_shape_fn((1, dout), |_| {
                rng.gen_range(-bound..bound)
            }));
        }
        Mlp { ws, bs }
    }

    pub fn layer_count(&self) -> usize {
        self.ws.len()
    }

    pub fn input_dim(&self) -> usize {
        self.ws[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.ws[self.ws.len() - 1].ncols()
    }

    /// Direct forward pass: ReLU after every layer except the last.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        let last = self.ws.len() - 1;
        for (i, (w, b)) in self.ws.iter().zip(&self.bs).enumerate() {
            h = h.dot(w) + &b.row(0);
            if i < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        h
    }

    /// Declares this network's parameters on a tape under `prefix.w{i}` /
    /// `prefix.b{i}` and builds the forward graph from `input`.
    pub fn graph(
        &self,
        tape: &mut Tape,
        prefix: &str,
        input: NodeId,
        trainable: bool,
    ) -> Result<NodeId> {
        let nodes = self.declare(tape, prefix, trainable);
        self.graph_with(tape, &nodes, input)
    }

    /// Declares parameter leaves only (used when one network is applied to
    /// several inputs on the same tape).
    pub fn declare(&self, tape: &mut Tape, prefix: &str, trainable: bool) -> Vec<(NodeId, NodeId)> {
        self.ws
            .iter()
            .zip(&self.bs)
            .enumerate()
            .map(|(i, (w, b))| {
                let wn = format!("{prefix}.w{i}");
                let bn = format!("{prefix}.b{i}");
                let (wr, wc) = (w.nrows(), w.ncols());
                let bc = b.ncols();
                if trainable {
                    (tape.param(&wn, wr, wc), tape.param(&bn, 1, bc))
                } else {
                    (tape.input(&wn, wr, wc), tape.input(&bn, 1, bc))
                }
            })
            .collect()
    }

    /// Builds the forward graph from pre-declared parameter nodes.
    pub fn graph_with(
        &self,
        tape: &mut Tape,
        nodes: &[(NodeId, NodeId)],
        input: NodeId,
    ) -> Result<NodeId> {
        let last = nodes.len() - 1;
        let mut h = input;
        for (i, (w, b)) in nodes.iter().enumerate() {
            let z = tape.matmul(h, *w)?;
            let z = tape.add(z, *b)?;
            h = if i < last { tape.relu(z) } else { z };
        }
        Ok(h)
    }

    /// Inserts this network's arrays into a bindings map under `prefix`.
    pub fn bind(&self, bindings: &mut crate::diffcore::Bindings, prefix: &str) {
        for (i, (w, b)) in self.ws.iter().zip(&self.bs).enumerate() {
            bindings.insert(format!("{prefix}.w{i}"), w.clone());
            bindings.insert(format!("{prefix}.b{i}"), b.clone());
        }
    }

    /// Named views over all arrays, `prefix.w0, prefix.b0, prefix.w1, ...`.
    pub fn named(&self, prefix: &str) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.ws.iter().zip(&self.bs).enumerate() {
            out.push((format!("{prefix}.w{i}"), w));
            out.push((format!("{prefix}.b{i}"), b));
        }
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.ws.iter_mut().zip(self.bs.iter_mut()).enumerate() {
            out.push((format!("{prefix}.w{i}"), w));
            out.push((format!("{prefix}.b{i}"), b));
        }
        out
    }

    /// Rebuilds an MLP from named arrays, the inverse of [`Mlp::named`].
    pub fn from_arrays(
        prefix: &str,
        arrays: &std::collections::BTreeMap<String, Array2<f64>>,
        layers: usize,
    ) -> Result<Self> {
        let mut ws = Vec::new();
        let mut bs = Vec::new();
        for i in 0..layers {
            let wn = format!("{prefix}.w{i}");
            let bn = format!("{prefix}.b{i}");
            let w = arrays
                .get(&wn)
                .ok_or_else(|| Error::MissingBinding { name: wn.clone() })?;
            let b = arrays
                .get(&bn)
                .ok_or_else(|| Error::MissingBinding { name: bn.clone() })?;
            ws.push(w.clone());
            bs.push(b.clone());
        }
        Ok(Mlp { ws, bs })
    }
}
