//! Hypernetwork policy generator: a scalar return command is appended to a
//! grid of learned slice embeddings, shared head MLPs map each embedding to
//! one slice of a policy weight matrix, and the slices are concatenated into
//! the full `PolicyParams`.
//!
//! Weight matrices are sliced `slice_size x slice_size` for the hidden layer
//! (`slice_size x obs_dim` for the input layer, `act_dim x slice_size` for
//! the output layer), each produced by a dedicated head. Bias vectors come
//! from a bias head emitting one `slice_size` chunk per embedding, averaged
//! over the grid's input dimension; the output layer's bias has its own
//! small head since its length is `act_dim`, not a slice multiple. Generated
//! weights and biases of every layer are finally scaled by `2 / sqrt(fan_in)`
//! so fresh generators produce policies in the magnitude range of standard
//! initialization schemes.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{adam_step, AdamState, Bindings, NodeId, Tape};
use crate::error::{Error, Result};
use crate::fingerprint::{value_graph, EvaluatorParams};
use crate::nn::Mlp;
use crate::policy::{check_dims, OutputActivation, PolicyNodes, PolicyParams};

pub const DEFAULT_SLICE: usize = 16;
pub const DEFAULT_EMBEDDING: usize = 8;
pub const DEFAULT_HEAD_HIDDEN: usize = 256;

/// Architecture and conditioning switches for one generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorMeta {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: usize,
    /// Slice side length `f`; `hidden` must be a multiple.
    pub slice_size: usize,
    /// Embedding dimension `d`.
    pub embedding_dim: usize,
    /// Hidden width of the head MLPs.
    pub head_hidden: usize,
    /// Multiply each generated layer (weights and bias) by `2 / sqrt(fan_in)`.
    pub output_scaling: bool,
    /// Multiplier applied to commands before they reach the heads.
    pub command_scale: f64,
    /// Whether the bias heads also receive the command input.
    pub bias_head_command: bool,
}

impl GeneratorMeta {
    /// Slices per hidden-layer row/column.
    pub fn grid(&self) -> usize {
        self.hidden / self.slice_size
    }

    fn head_input(&self) -> usize {
        self.embedding_dim + 1
    }

    fn bias_head_input(&self) -> usize {
        if self.bias_head_command {
            self.embedding_dim + 1
        } else {
            self.embedding_dim
        }
    }

    fn layer_scales(&self) -> [f64; 3] {
        [
            2.0 / (self.obs_dim as f64).sqrt(),
            2.0 / (self.hidden as f64).sqrt(),
            2.0 / (self.hidden as f64).sqrt(),
        ]
    }
}

/// Isotropic Gaussian exploration noise in parameter space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub std: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { std: 0.1 }
    }
}

/// Shared head MLPs plus the learned slice-embedding grids.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub meta: GeneratorMeta,
    /// Hidden-layer slices: `d+1 -> head_hidden^2 -> slice^2`.
    pub hidden_head: Mlp,
    /// Input-layer slices: `-> slice * obs_dim`.
    pub input_head: Mlp,
    /// Output-layer slices: `-> act_dim * slice`.
    pub output_head: Mlp,
    /// Bias slices for grid-shaped layers: `-> slice`.
    pub bias_head: Mlp,
    /// Output-layer bias: `-> act_dim`.
    pub out_bias_head: Mlp,
    /// Embedding grids, one row per slice position: layer 1 is `grid x d`
    /// (grid rows, one column), layer 2 `grid^2 x d` (row-major `m * grid + n`),
    /// layer 3 `grid x d` (one row, grid columns).
    pub z1: Array2<f64>,
    pub z2: Array2<f64>,
    pub z3: Array2<f64>,
}

/// Tape leaves for a generator.
pub struct GeneratorNodes {
    hidden_head: Vec<(NodeId, NodeId)>,
    input_head: Vec<(NodeId, NodeId)>,
    output_head: Vec<(NodeId, NodeId)>,
    bias_head: Vec<(NodeId, NodeId)>,
    out_bias_head: Vec<(NodeId, NodeId)>,
    z1: NodeId,
    z2: NodeId,
    z3: NodeId,
}

/// Paper-default generator: 16x16 slices, 8-dim embeddings, 256-wide heads,
/// output scaling on, raw commands, command-conditioned bias heads.
pub fn init_generator(
    obs_dim: usize,
    act_dim: usize,
    hidden: usize,
    slice_size: usize,
    embedding_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratorParams> {
    GeneratorParams::init(
        GeneratorMeta {
            obs_dim,
            act_dim,
            hidden,
            slice_size,
            embedding_dim,
            head_hidden: DEFAULT_HEAD_HIDDEN,
            output_scaling: true,
            command_scale: 1.0,
            bias_head_command: true,
        },
        rng,
    )
}

impl GeneratorParams {
    /// Heads use uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; embeddings use
    /// the same family, `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn init(meta: GeneratorMeta, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_dims(meta.obs_dim, meta.act_dim, meta.hidden, meta.slice_size)?;
        let g = meta.grid();
        let f = meta.slice_size;
        let hh = meta.head_hidden;
        let hidden_head = Mlp::init(&[meta.head_input(), hh, hh, f * f], rng);
        let input_head = Mlp::init(&[meta.head_input(), hh, hh, f * meta.obs_dim], rng);
        let output_head = Mlp::init(&[meta.head_input(), hh, hh, meta.act_dim * f], rng);
        let bias_head = Mlp::init(&[meta.bias_head_input(), hh, hh, f], rng);
        let out_bias_head = Mlp::init(&[meta.bias_head_input(), hh, hh, meta.act_dim], rng);
        let bound = 1.0 / (meta.embedding_dim as f64).sqrt();
        let mut embed = |rows: usize| {
            Array2::from_shape_fn((rows, meta.embedding_dim), |_| rng.gen_range(-bound..bound))
        };
        Ok(GeneratorParams {
            meta,
            hidden_head,
            input_head,
            output_head,
            bias_head,
            out_bias_head,
            z1: embed(g),
            z2: embed(g * g),
            z3: embed(g),
        })
    }

    pub fn declare(&self, tape: &mut Tape, trainable: bool) -> GeneratorNodes {
        let d = self.meta.embedding_dim;
        let g = self.meta.grid();
        let grid = |tape: &mut Tape, name: &str, rows: usize| {
            if trainable {
                tape.param(name, rows, d)
            } else {
                tape.input(name, rows, d)
            }
        };
        GeneratorNodes {
            z1: grid(tape, "gen.z1", g),
            z2: grid(tape, "gen.z2", g * g),
            z3: grid(tape, "gen.z3", g),
            hidden_head: self.hidden_head.declare(tape, "gen.hh", trainable),
            input_head: self.input_head.declare(tape, "gen.ih", trainable),
            output_head: self.output_head.declare(tape, "gen.oh", trainable),
            bias_head: self.bias_head.declare(tape, "gen.bh", trainable),
            out_bias_head: self.out_bias_head.declare(tape, "gen.ob", trainable),
        }
    }

    pub fn bind(&self, bindings: &mut Bindings) {
        bindings.insert("gen.z1".into(), self.z1.clone());
        bindings.insert("gen.z2".into(), self.z2.clone());
        bindings.insert("gen.z3".into(), self.z3.clone());
        self.hidden_head.bind(bindings, "gen.hh");
        self.input_head.bind(bindings, "gen.ih");
        self.output_head.bind(bindings, "gen.oh");
        self.bias_head.bind(bindings, "gen.bh");
        self.out_bias_head.bind(bindings, "gen.ob");
    }

    pub fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("gen.z1".to_string(), &self.z1),
            ("gen.z2".to_string(), &self.z2),
            ("gen.z3".to_string(), &self.z3),
        ];
        out.extend(self.hidden_head.named("gen.hh"));
        out.extend(self.input_head.named("gen.ih"));
        out.extend(self.output_head.named("gen.oh"));
        out.extend(self.bias_head.named("gen.bh"));
        out.extend(self.out_bias_head.named("gen.ob"));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = vec![
            ("gen.z1".to_string(), &mut self.z1),
            ("gen.z2".to_string(), &mut self.z2),
            ("gen.z3".to_string(), &mut self.z3),
        ];
        out.extend(self.hidden_head.named_mut("gen.hh"));
        out.extend(self.input_head.named_mut("gen.ih"));
        out.extend(self.output_head.named_mut("gen.oh"));
        out.extend(self.bias_head.named_mut("gen.bh"));
        out.extend(self.out_bias_head.named_mut("gen.ob"));
        out
    }

    pub fn from_arrays(meta: GeneratorMeta, arrays: &BTreeMap<String, Array2<f64>>) -> Result<Self> {
        let fetch = |name: &str| -> Result<Array2<f64>> {
            arrays
                .get(name)
                .cloned()
                .ok_or_else(|| Error::MissingBinding { name: name.into() })
        };
        Ok(GeneratorParams {
            meta,
            hidden_head: Mlp::from_arrays("gen.hh", arrays, 3)?,
            input_head: Mlp::from_arrays("gen.ih", arrays, 3)?,
            output_head: Mlp::from_arrays("gen.oh", arrays, 3)?,
            bias_head: Mlp::from_arrays("gen.bh", arrays, 3)?,
            out_bias_head: Mlp::from_arrays("gen.ob", arrays, 3)?,
            z1: fetch("gen.z1")?,
            z2: fetch("gen.z2")?,
            z3: fetch("gen.z3")?,
        })
    }

    /// Builds generated-policy nodes for a batch of commands bound as
    /// `cmd0..cmd{n-1}` (`1 x 1` leaves, raw return values). All heads run
    /// once on command-batched inputs; slices are then cut out and
    /// concatenated per command.
    pub fn generate_graph(
        &self,
        tape: &mut Tape,
        nodes: &GeneratorNodes,
        n_commands: usize,
        trainable_commands: bool,
    ) -> Result<Vec<PolicyNodes>> {
        let g = self.meta.grid();
        let f = self.meta.slice_size;
        let (obs, act) = (self.meta.obs_dim, self.meta.act_dim);
        let with_bias_cmd = self.meta.bias_head_command;

        let commands: Vec<NodeId> = (0..n_commands)
            .map(|i| {
                let name = format!("cmd{i}");
                let raw = if trainable_commands {
                    tape.param(&name, 1, 1)
                } else {
                    tape.input(&name, 1, 1)
                };
                tape.scale(raw, self.meta.command_scale)
            })
            .collect();

        let ones_g = tape.literal(Array2::ones((g, 1)));
        let ones_g2 = tape.literal(Array2::ones((g * g, 1)));
        let row_mean = tape.literal(Array2::from_elem((1, g), 1.0 / g as f64));

        let append_cmd = |tape: &mut Tape, z: NodeId, ones: NodeId, c: NodeId| -> Result<NodeId> {
            let col = tape.matmul(ones, c)?;
            tape.concat(&[z, col], 1)
        };

        // One batched forward per head across all commands.
        let mut hh_in = Vec::new();
        let mut ih_in = Vec::new();
        let mut oh_in = Vec::new();
        let mut bh_in = Vec::new();
        let mut ob_in = Vec::new();
        for &c in &commands {
            hh_in.push(append_cmd(tape, nodes.z2, ones_g2, c)?);
            ih_in.push(append_cmd(tape, nodes.z1, ones_g, c)?);
            oh_in.push(append_cmd(tape, nodes.z3, ones_g, c)?);
            if with_bias_cmd {
                bh_in.push(append_cmd(tape, nodes.z2, ones_g2, c)?);
                bh_in.push(append_cmd(tape, nodes.z1, ones_g, c)?);
                ob_in.push(append_cmd(tape, nodes.z3, ones_g, c)?);
            } else {
                bh_in.push(nodes.z2);
                bh_in.push(nodes.z1);
                ob_in.push(nodes.z3);
            }
        }
        let hh_batch = tape.concat(&hh_in, 0)?;
        let ih_batch = tape.concat(&ih_in, 0)?;
        let oh_batch = tape.concat(&oh_in, 0)?;
        let bh_batch = tape.concat(&bh_in, 0)?;
        let ob_batch = tape.concat(&ob_in, 0)?;

        let hh_out = self.hidden_head.graph_with(tape, &nodes.hidden_head, hh_batch)?;
        let ih_out = self.input_head.graph_with(tape, &nodes.input_head, ih_batch)?;
        let oh_out = self.output_head.graph_with(tape, &nodes.output_head, oh_batch)?;
        let bh_out = self.bias_head.graph_with(tape, &nodes.bias_head, bh_batch)?;
        let ob_out = self.out_bias_head.graph_with(tape, &nodes.out_bias_head, ob_batch)?;

        let scales = self.meta.layer_scales();
        let mut policies = Vec::with_capacity(n_commands);
        for i in 0..n_commands {
            // K2: a grid x grid arrangement of f x f slices, row-major.
            let base2 = i * g * g;
            let mut k2_rows = Vec::with_capacity(g);
            for m in 0..g {
                let mut row = Vec::with_capacity(g);
                for n in 0..g {
                    let s = tape.slice_rows(hh_out, base2 + m * g + n, 1)?;
                    row.push(tape.reshape(s, f, f)?);
                }
                k2_rows.push(tape.concat(&row, 1)?);
            }
            let mut k2 = tape.concat(&k2_rows, 0)?;

            // K1: grid slices of f x obs stacked vertically.
            let base1 = i * g;
            let mut k1_parts = Vec::with_capacity(g);
            for m in 0..g {
                let s = tape.slice_rows(ih_out, base1 + m, 1)?;
                k1_parts.push(tape.reshape(s, f, obs)?);
            }
            let mut k1 = tape.concat(&k1_parts, 0)?;

            // K3: grid slices of act x f side by side.
            let mut k3_parts = Vec::with_capacity(g);
            for n in 0..g {
                let s = tape.slice_rows(oh_out, base1 + n, 1)?;
                k3_parts.push(tape.reshape(s, act, f)?);
            }
            let mut k3 = tape.concat(&k3_parts, 1)?;

            // Bias slices: concatenate along the output dimension, average
            // across the grid's input dimension.
            let bias_base = i * (g * g + g);
            let mut b2_parts = Vec::with_capacity(g);
            for m in 0..g {
                let block = tape.slice_rows(bh_out, bias_base + m * g, g)?;
                b2_parts.push(tape.matmul(row_mean, block)?);
            }
            let mut b2 = tape.concat(&b2_parts, 1)?;

            let mut b1_parts = Vec::with_capacity(g);
            for m in 0..g {
                b1_parts.push(tape.slice_rows(bh_out, bias_base + g * g + m, 1)?);
            }
            let mut b1 = tape.concat(&b1_parts, 1)?;

            let ob_block = tape.slice_rows(ob_out, i * g, g)?;
            let mut b3 = tape.matmul(row_mean, ob_block)?;

            if self.meta.output_scaling {
                k1 = tape.scale(k1, scales[0]);
                b1 = tape.scale(b1, scales[0]);
                k2 = tape.scale(k2, scales[1]);
                b2 = tape.scale(b2, scales[1]);
                k3 = tape.scale(k3, scales[2]);
                b3 = tape.scale(b3, scales[2]);
            }
            policies.push(PolicyNodes {
                k1,
                k2,
                k3,
                b1,
                b2,
                b3,
            });
        }
        Ok(policies)
    }
}

/// Deterministic generation: `G(c)` as full policy parameters.
pub fn generate(gen: &GeneratorParams, command: f64) -> Result<PolicyParams> {
    if !command.is_finite() {
        return Err(Error::NonFinite {
            context: "generator command".into(),
        });
    }
    let mut tape = Tape::new();
    let mut bindings = Bindings::new();
    let nodes = gen.declare(&mut tape, false);
    gen.bind(&mut bindings);
    bindings.insert("cmd0".into(), Array2::from_elem((1, 1), command));
    let policies = gen.generate_graph(&mut tape, &nodes, 1, false)?;
    let p = policies[0];
    tape.evaluate(&bindings)?;
    let take = |id: NodeId| tape.value(id).unwrap().clone();
    Ok(PolicyParams {
        k1: take(p.k1),
        k2: take(p.k2),
        k3: take(p.k3),
        b1: take(p.b1),
        b2: take(p.b2),
        b3: take(p.b3),
    })
}

/// `G(c)` plus i.i.d. Gaussian parameter noise of std `noise.std`, applied
/// after output scaling. Zero std returns the deterministic parameters.
pub fn sample_policy(
    gen: &GeneratorParams,
    command: f64,
    noise: NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> Result<PolicyParams> {
    let mut theta = generate(gen, command)?;
    if noise.std == 0.0 {
        return Ok(theta);
    }
    let normal = Normal::new(0.0, noise.std).map_err(|_| Error::Config {
        key: "noise_std".into(),
        reason: format!("invalid noise std {}", noise.std),
    })?;
    for m in [
        &mut theta.k1,
        &mut theta.b1,
        &mut theta.k2,
        &mut theta.b2,
        &mut theta.k3,
        &mut theta.b3,
    ] {
        m.mapv_inplace(|v| v + normal.sample(rng));
    }
    Ok(theta)
}

/// One Adam step on the generator against
/// `mean_r (r - V_w(G(r)))^2` over the batch of stored returns; the
/// evaluator is frozen. Returns the batch loss before the step.
pub fn generator_update(
    gen: &mut GeneratorParams,
    evaluator: &EvaluatorParams,
    returns: &[f64],
    opt: &mut AdamState,
    lr: f64,
    activation: OutputActivation,
) -> Result<f64> {
    if returns.is_empty() {
        return Err(Error::EmptyBatch {
            context: "generator_update".into(),
        });
    }
    let mut tape = Tape::new();
    let mut bindings = Bindings::new();
    let gnodes = gen.declare(&mut tape, true);
    gen.bind(&mut bindings);
    let enodes = evaluator.declare(&mut tape, false);
    evaluator.bind(&mut bindings);
    for (i, r) in returns.iter().enumerate() {
        bindings.insert(format!("cmd{i}"), Array2::from_elem((1, 1), *r));
    }

    let policies = gen.generate_graph(&mut tape, &gnodes, returns.len(), false)?;
    let mut values = Vec::with_capacity(policies.len());
    for p in &policies {
        values.push(value_graph(&mut tape, &enodes, p, evaluator, activation)?);
    }
    let stacked = tape.concat(&values, 0)?;
    let targets = Array2::from_shape_vec((returns.len(), 1), returns.to_vec()).expect("targets");
    let loss = tape.mse_against(stacked, &targets)?;

    tape.evaluate(&bindings)?;
    let loss_value = tape.value(loss).unwrap()[(0, 0)];
    let grads = tape.gradient(loss)?;
    let mut params = gen.named_mut();
    let mut refs: Vec<(&str, &mut Array2<f64>)> = params
        .iter_mut()
        .map(|(n, a)| (n.as_str(), &mut **a))
        .collect();
    adam_step(&mut refs, &grads, opt, lr)?;
    Ok(loss_value)
}
