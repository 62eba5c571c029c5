//! Parameter-based value function via policy fingerprinting: a set of
//! learnable probing states is fed through the policy under evaluation, the
//! resulting probing actions are concatenated, and an MLP regresses that
//! fingerprint to expected return. Probing actions use the raw (pre-clip)
//! policy output, so they are invariant under hidden-neuron permutations of
//! the policy but still differentiable everywhere.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{adam_step, AdamState, Bindings, NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::policy::{forward_graph, OutputActivation, PolicyNodes, PolicyParams};

pub const DEFAULT_PROBES: usize = 200;
pub const DEFAULT_U_HIDDEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvaluatorMeta {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub n_probes: usize,
    pub u_hidden: usize,
}

/// Learnable probing states plus the value MLP `U`; both are trained jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorParams {
    pub meta: EvaluatorMeta,
    /// `n_probes x obs_dim`, initialized uniformly in `[0, 1)`.
    pub probes: Array2<f64>,
    /// `n_probes * act_dim -> u_hidden -> u_hidden -> 1`, ReLU hidden layers.
    pub u: Mlp,
}

/// Tape nodes for the evaluator's parameters.
pub struct EvaluatorNodes {
    pub probes: NodeId,
    pub u: Vec<(NodeId, NodeId)>,
}

/// Uniform `[0,1)` probing states and a PyTorch-default-initialized `U` with
/// two 256-wide hidden layers.
pub fn init_evaluator(
    obs_dim: usize,
    act_dim: usize,
    n_probes: usize,
    rng: &mut ChaCha8Rng,
) -> EvaluatorParams {
    EvaluatorParams::init(
        EvaluatorMeta {
            obs_dim,
            act_dim,
            n_probes,
            u_hidden: DEFAULT_U_HIDDEN,
        },
        rng,
    )
}

impl EvaluatorParams {
    pub fn init(meta: EvaluatorMeta, rng: &mut ChaCha8Rng) -> Self {
        assert!(meta.n_probes >= 1, "need at least one probing state");
        let probes =
            Array2::from_shape_fn((meta.n_probes, meta.obs_dim), |_| rng.gen_range(0.0..1.0));
        let u = Mlp::init(
            &[
                meta.n_probes * meta.act_dim,
                meta.u_hidden,
                meta.u_hidden,
                1,
            ],
            rng,
        );
        EvaluatorParams { meta, probes, u }
    }

    fn check_policy(&self, theta: &PolicyParams) -> Result<()> {
        if theta.obs_dim() != self.meta.obs_dim || theta.act_dim() != self.meta.act_dim {
            return Err(Error::Shape {
                context: "fingerprint policy".into(),
                expected: format!("obs {} act {}", self.meta.obs_dim, self.meta.act_dim),
                actual: format!("obs {} act {}", theta.obs_dim(), theta.act_dim()),
            });
        }
        Ok(())
    }

    /// Raw policy outputs on every probing state, concatenated state-major.
    pub fn probing_actions(
        &self,
        theta: &PolicyParams,
        activation: OutputActivation,
    ) -> Result<Array1<f64>> {
        self.check_policy(theta)?;
        let mut out = Vec::with_capacity(self.meta.n_probes * self.meta.act_dim);
        for row in self.probes.rows() {
            let action = theta.forward_raw(row.to_vec().as_slice(), activation)?;
            out.extend(action.iter().copied());
        }
        Ok(Array1::from_vec(out))
    }

    /// `U(probing_actions(theta))`.
    pub fn evaluate(&self, theta: &PolicyParams, activation: OutputActivation) -> Result<f64> {
        let pa = self.probing_actions(theta, activation)?;
        let input = pa.insert_axis(ndarray::Axis(0));
        Ok(self.u.forward(&input)[(0, 0)])
    }

    /// Declares probes and `U` on a tape; trainable leaves receive gradients.
    pub fn declare(&self, tape: &mut Tape, trainable: bool) -> EvaluatorNodes {
        let probes = if trainable {
            tape.param("eval.probes", self.meta.n_probes, self.meta.obs_dim)
        } else {
            tape.input("eval.probes", self.meta.n_probes, self.meta.obs_dim)
        };
        let u = self.u.declare(tape, "eval.u", trainable);
        EvaluatorNodes { probes, u }
    }

    pub fn bind(&self, bindings: &mut Bindings) {
        bindings.insert("eval.probes".into(), self.probes.clone());
        self.u.bind(bindings, "eval.u");
    }

    pub fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![("eval.probes".to_string(), &self.probes)];
        out.extend(self.u.named("eval.u"));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        out.push(("eval.probes".to_string(), &mut self.probes));
        out.extend(self.u.named_mut("eval.u"));
        out
    }

    /// Rebuilds evaluator parameters from named checkpoint arrays.
    pub fn from_arrays(
        meta: EvaluatorMeta,
        arrays: &BTreeMap<String, Array2<f64>>,
    ) -> Result<Self> {
        let probes = arrays
            .get("eval.probes")
            .ok_or_else(|| Error::MissingBinding {
                name: "eval.probes".into(),
            })?
            .clone();
        let u = Mlp::from_arrays("eval.u", arrays, 3)?;
        Ok(EvaluatorParams { meta, probes, u })
    }
}

/// Builds `V_w(theta)` on a tape from pre-declared evaluator nodes and a
/// policy (leaf-bound or generated): probe forward, flatten state-major,
/// then `U`. Returns the `1 x 1` value node.
pub fn value_graph(
    tape: &mut Tape,
    eval_nodes: &EvaluatorNodes,
    policy: &PolicyNodes,
    evaluator: &EvaluatorParams,
    activation: OutputActivation,
) -> Result<NodeId> {
    let actions = forward_graph(tape, policy, eval_nodes.probes, activation)?;
    let flat = tape.reshape(actions, 1, evaluator.meta.n_probes * evaluator.meta.act_dim)?;
    evaluator.u.graph_with(tape, &eval_nodes.u, flat)
}

/// One Adam step on `{probes, U}` against mean squared error between stored
/// returns and `V_w(theta)`; the policies are constants. Returns the batch
/// loss before the step.
pub fn evaluator_update(
    evaluator: &mut EvaluatorParams,
    batch: &[(f64, &PolicyParams)],
    opt: &mut AdamState,
    lr: f64,
    activation: OutputActivation,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch {
            context: "evaluator_update".into(),
        });
    }
    let mut tape = Tape::new();
    let mut bindings = Bindings::new();
    let nodes = evaluator.declare(&mut tape, true);
    evaluator.bind(&mut bindings);

    let mut values = Vec::with_capacity(batch.len());
    for (i, (_, theta)) in batch.iter().enumerate() {
        evaluator.check_policy(theta)?;
        let prefix = format!("theta{i}");
        let pnodes = theta.declare_inputs(&mut tape, &prefix);
        theta.bind(&mut bindings, &prefix);
        values.push(value_graph(
            &mut tape,
            &nodes,
            &pnodes,
            evaluator,
            activation,
        )?);
    }
    let stacked = tape.concat(&values, 0)?;
    let targets =
        Array2::from_shape_vec((batch.len(), 1), batch.iter().map(|(r, _)| *r).collect())
            .expect("target shape");
    let loss = tape.mse_against(stacked, &targets)?;

    tape.evaluate(&bindings)?;
    let loss_value = tape.value(loss).unwrap()[(0, 0)];
    let grads = tape.gradient(loss)?;
    let mut params = evaluator.named_mut();
    let mut refs: Vec<(&str, &mut Array2<f64>)> = params
        .iter_mut()
        .map(|(n, a)| (n.as_str(), &mut **a))
        .collect();
    adam_step(&mut refs, &grads, opt, lr)?;
    Ok(loss_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_difference;
    use crate::policy::init_policy;
    use crate::rng::{stream_rng, Stream};

    fn tiny_meta() -> EvaluatorMeta {
        EvaluatorMeta {
            obs_dim: 2,
            act_dim: 1,
            n_probes: 8,
            u_hidden: 16,
        }
    }

    #[test]
    fn default_shapes() {
        let mut rng = stream_rng(0, Stream::Init);
        let w = init_evaluator(2, 1, 200, &mut rng);
        assert_eq!(w.u.input_dim(), 200);
        assert_eq!(w.u.output_dim(), 1);
        assert_eq!(w.probes.dim(), (200, 2));
    }

    #[test]
    fn probes_in_unit_interval() {
        let mut rng = stream_rng(1, Stream::Init);
        let w = init_evaluator(3, 2, 50, &mut rng);
        assert!(w.probes.iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_evaluator(2, 1, 16, &mut stream_rng(5, Stream::Init));
        let b = init_evaluator(2, 1, 16, &mut stream_rng(5, Stream::Init));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_policy_gives_zero_probing_actions() {
        let w = EvaluatorParams::init(tiny_meta(), &mut stream_rng(2, Stream::Init));
        let len = 16 * 2 + 16 + 256 + 16 + 16 + 1;
        let theta = PolicyParams::unflatten(2, 1, 16, &vec![0.0; len]).unwrap();
        let pa = w.probing_actions(&theta, OutputActivation::Linear).unwrap();
        assert!(pa.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn probing_actions_match_per_state_loop() {
        let w = EvaluatorParams::init(tiny_meta(), &mut stream_rng(3, Stream::Init));
        let theta = init_policy(2, 1, 16, 4, &mut stream_rng(4, Stream::Init)).unwrap();
        let pa = w.probing_actions(&theta, OutputActivation::Linear).unwrap();
        for (i, row) in w.probes.rows().into_iter().enumerate() {
            let a = theta
                .forward_raw(row.to_vec().as_slice(), OutputActivation::Linear)
                .unwrap();
            assert_eq!(pa[i], a[0]);
        }
    }

    #[test]
    fn probing_actions_invariant_under_permutation() {
        let w = EvaluatorParams::init(tiny_meta(), &mut stream_rng(5, Stream::Init));
        let theta = init_policy(2, 1, 16, 4, &mut stream_rng(6, Stream::Init)).unwrap();
        let mut r = stream_rng(7, Stream::Sampling);
        for layer in [1, 2] {
            let mut perm: Vec<usize> = (0..16).collect();
            for i in (1..16).rev() {
                let j = r.gen_range(0..=i);
                perm.swap(i, j);
            }
            let permuted = theta.permute_hidden(layer, &perm).unwrap();
            let a = w.probing_actions(&theta, OutputActivation::Linear).unwrap();
            let b = w
                .probing_actions(&permuted, OutputActivation::Linear)
                .unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-10);
            }
            let va = w.evaluate(&theta, OutputActivation::Linear).unwrap();
            let vb = w.evaluate(&permuted, OutputActivation::Linear).unwrap();
            assert!((va - vb).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_u_ignores_policy() {
        let mut w = EvaluatorParams::init(tiny_meta(), &mut stream_rng(8, Stream::Init));
        for ws in &mut w.u.ws {
            ws.fill(0.0);
        }
        for bs in &mut w.u.bs {
            bs.fill(0.0);
        }
        let last = w.u.bs.len() - 1;
        w.u.bs[last][(0, 0)] = 5.0;
        let theta = init_policy(2, 1, 16, 4, &mut stream_rng(9, Stream::Init)).unwrap();
        let v = w.evaluate(&theta, OutputActivation::Linear).unwrap();
        assert_eq!(v, 5.0);
    }

    #[test]
    fn evaluate_matches_composed_oracle() {
        let w = EvaluatorParams::init(tiny_meta(), &mut stream_rng(10, Stream::Init));
        let theta = init_policy(2, 1, 16, 4, &mut stream_rng(11, Stream::Init)).unwrap();
        let got = w.evaluate(&theta, OutputActivation::Linear).unwrap();

        // Recompute with explicit loops: probing actions then relu MLP.
        let pa = w.probing_actions(&theta, OutputActivation::Linear).unwrap();
        let mut h: Vec<f64> = pa.to_vec();
        for (li, (ws, bs)) in w.u.ws.iter().zip(&w.u.bs).enumerate() {
            let mut next = vec![0.0; ws.ncols()];
            for (j, item) in next.iter_mut().enumerate() {
                let mut z = bs[(0, j)];
                for (i, &hi) in h.iter().enumerate() {
                    z += hi * ws[(i, j)];
                }
                *item = if li < w.u.ws.len() - 1 { z.max(0.0) } else { z };
            }
            h = next;
        }
        assert!((got - h[0]).abs() < 1e-12);
    }

    #[test]
    fn tape_value_matches_direct_evaluate() {
        let w = EvaluatorParams::init(tiny_meta(), &mut stream_rng(12, Stream::Init));
        let theta = init_policy(2, 1, 16, 4, &mut stream_rng(13, Stream::Init)).unwrap();
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let nodes = w.declare(&mut tape, false);
        w.bind(&mut bindings);
        let pnodes = theta.declare_inputs(&mut tape, "theta");
        theta.bind(&mut bindings, "theta");
        let v = value_graph(&mut tape, &nodes, &pnodes, &w, OutputActivation::Linear).unwrap();
        tape.evaluate(&bindings).unwrap();
        let direct = w.evaluate(&theta, OutputActivation::Linear).unwrap();
        assert!((tape.value(v).unwrap()[(0, 0)] - direct).abs() < 1e-12);
    }

    #[test]
    fn lr_zero_leaves_evaluator_unchanged() {
        let mut w = EvaluatorParams::init(tiny_meta(), &mut stream_rng(14, Stream::Init));
        let before = w.clone();
        let theta = init_policy(2, 1, 16, 4, &mut stream_rng(15, Stream::Init)).unwrap();
        let mut opt = AdamState::new();
        evaluator_update(
            &mut w,
            &[(10.0, &theta)],
            &mut opt,
            0.0,
            OutputActivation::Linear,
        )
        .unwrap();
        assert_eq!(w, before);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn single_pair_regression_converges() {
        let mut w = EvaluatorParams::init(tiny_meta(), &mut stream_rng(16, Stream::Init));
        let theta = init_policy(2, 1, 16, 4, &mut stream_rng(17, Stream::Init)).unwrap();
        let mut opt = AdamState::new();
        let mut last = f64::INFINITY;
        for _ in 0..2000 {
            last = evaluator_update(
                &mut w,
                &[(10.0, &theta)],
                &mut opt,
                5e-3,
                OutputActivation::Linear,
            )
            .unwrap();
        }
        assert!(last < 1e-2, "squared error still {last}");
    }

    #[test]
    fn empty_batch_rejected() {
        let mut w = EvaluatorParams::init(tiny_meta(), &mut stream_rng(18, Stream::Init));
        let mut opt = AdamState::new();
        assert!(evaluator_update(&mut w, &[], &mut opt, 1e-3, OutputActivation::Linear).is_err());
    }

    /// Gradients for probes and U against central finite differences.
    #[test]
    fn evaluator_gradients_match_finite_differences() {
        let w = EvaluatorParams::init(tiny_meta(), &mut stream_rng(19, Stream::Init));
        let thetas: Vec<PolicyParams> = (0..3)
            .map(|i| init_policy(2, 1, 16, 4, &mut stream_rng(20 + i, Stream::Init)).unwrap())
            .collect();
        let targets = [4.0, -2.0, 1.0];

        let build = |w: &EvaluatorParams| -> (Tape, Bindings, NodeId) {
            let mut tape = Tape::new();
            let mut bindings = Bindings::new();
            let nodes = w.declare(&mut tape, true);
            w.bind(&mut bindings);
            let mut values = Vec::new();
            for (i, theta) in thetas.iter().enumerate() {
                let prefix = format!("theta{i}");
                let pnodes = theta.declare_inputs(&mut tape, &prefix);
                theta.bind(&mut bindings, &prefix);
                values.push(
                    value_graph(&mut tape, &nodes, &pnodes, w, OutputActivation::Linear).unwrap(),
                );
            }
            let stacked = tape.concat(&values, 0).unwrap();
            let t = Array2::from_shape_vec((3, 1), targets.to_vec()).unwrap();
            let loss = tape.mse_against(stacked, &t).unwrap();
            (tape, bindings, loss)
        };

        let (mut tape, bindings, loss) = build(&w);
        tape.evaluate(&bindings).unwrap();
        let grads = tape.gradient(loss).unwrap();

        let names: Vec<String> = w.named().iter().map(|(n, _)| n.clone()).collect();
        let flat: Vec<f64> = names
            .iter()
            .flat_map(|n| bindings[n].iter().copied().collect::<Vec<_>>())
            .collect();
        let shapes: Vec<(usize, usize)> = names.iter().map(|n| bindings[n].dim()).collect();
        let eval_at = |xs: &[f64]| -> f64 {
            let mut w2 = w.clone();
            let mut off = 0;
            {
                let mut params = w2.named_mut();
                for ((_, arr), shape) in params.iter_mut().zip(&shapes) {
                    let len = shape.0 * shape.1;
                    **arr = Array2::from_shape_vec(*shape, xs[off..off + len].to_vec()).unwrap();
                    off += len;
                }
            }
            let (mut t, b, l) = build(&w2);
            t.evaluate(&b).unwrap();
            t.value(l).unwrap()[(0, 0)]
        };
        let fd = finite_difference(eval_at, &flat, 1e-5);

        let mut off = 0;
        for (n, shape) in names.iter().zip(&shapes) {
            let g = &grads[n];
            assert_eq!(&g.dim(), shape);
            for &gi in g.iter() {
                let f = fd[off];
                off += 1;
                let denom = gi.abs().max(f.abs()).max(1e-8);
                assert!((gi - f).abs() / denom < 1e-4, "{n}: ad {gi} vs fd {f}");
            }
        }
    }
}
