//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records primitive operations in insertion order during graph
//! construction; [`Tape::evaluate`] runs the forward pass, and
//! [`Tape::gradient`] replays the tape in reverse to accumulate adjoints for
//! every `param` leaf. Tapes are rebuilt per batch; there is no graph reuse
//! or fusion, which keeps evaluation deterministic and bit-reproducible.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Named arrays bound to tape leaves at evaluation time.
pub type Bindings = BTreeMap<String, Array2<f64>>;

#[derive(Debug, Clone)]
enum Op {
    /// Leaf bound by name at evaluation time; `param` leaves receive gradients.
    Leaf { name: String, param: bool },
    /// Leaf with an inline constant value (never differentiated).
    Literal,
    /// `op(a) . op(b)` with optional transposes.
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    },
    /// Elementwise add; `b` may be a `1 x c` row broadcast over the rows of `a`.
    Add { a: NodeId, b: NodeId },
    Tanh { a: NodeId },
    Relu { a: NodeId },
    /// Concatenate along `axis` (0 = stack rows, 1 = side by side).
    Concat { parts: Vec<NodeId>, axis: usize },
    /// Multiply by a fixed scalar.
    Scale { a: NodeId, factor: f64 },
    Square { a: NodeId },
    /// Mean over all entries, producing a `1 x 1` node.
    Mean { a: NodeId },
    /// Row-major reinterpretation; element count is preserved.
    Reshape { a: NodeId },
    /// View of rows `[start, start + len)`.
    SliceRows { a: NodeId, start: usize },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Literal => "literal",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Tanh { .. } => "tanh",
            Op::Relu { .. } => "relu",
            Op::Concat { .. } => "concat",
            Op::Scale { .. } => "scale",
            Op::Square { .. } => "square",
            Op::Mean { .. } => "mean",
            Op::Reshape { .. } => "reshape",
            Op::SliceRows { .. } => "slice_rows",
        }
    }
}

/// Recorded computation graph plus value and adjoint slots.
pub struct Tape {
    ops: Vec<Op>,
    shapes: Vec<(usize, usize)>,
    vals: Vec<Option<Array2<f64>>>,
    adjs: Vec<Option<Array2<f64>>>,
    outputs: Vec<(String, NodeId)>,
    evaluated: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            shapes: Vec::new(),
            vals: Vec::new(),
            adjs: Vec::new(),
            outputs: Vec::new(),
            evaluated: false,
        }
    }

    fn push(&mut self, op: Op, shape: (usize, usize)) -> NodeId {
        let id = NodeId(self.ops.len());
        self.ops.push(op);
        self.shapes.push(shape);
        self.vals.push(None);
        self.adjs.push(None);
        id
    }

    fn shape_err(&self, node: usize, op: &str, expected: String, actual: String) -> Error {
        Error::Shape {
            context: format!("node {node} ({op})"),
            expected,
            actual,
        }
    }

    /// Declares a non-differentiated leaf bound by name at evaluation time.
    pub fn input(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        self.push(
            Op::Leaf {
                name: name.to_string(),
                param: false,
            },
            (rows, cols),
        )
    }

    /// Declares a differentiated leaf; [`Tape::gradient`] reports one gradient
    /// per distinct param name.
    pub fn param(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        self.push(
            Op::Leaf {
                name: name.to_string(),
                param: true,
            },
            (rows, cols),
        )
    }

    /// Embeds a constant matrix directly on the tape.
    pub fn literal(&mut self, value: Array2<f64>) -> NodeId {
        let shape = (value.nrows(), value.ncols());
        let id = self.push(Op::Literal, shape);
        self.vals[id.0] = Some(value);
        id
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.shapes[id.0]
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_opt(a, b, false, false)
    }

    /// `a . b^T`
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_opt(a, b, false, true)
    }

    /// `a^T . b`
    pub fn matmul_ta(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_opt(a, b, true, false)
    }

    pub fn matmul_opt(
        &mut self,
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    ) -> Result<NodeId> {
        let (ar, ac) = self.shapes[a.0];
        let (br, bc) = self.shapes[b.0];
        let (m, ka) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if ka != kb {
            return Err(self.shape_err(
                self.ops.len(),
                "matmul",
                format!("inner dims equal ({m}x{ka} . {kb}x{n})"),
                format!("lhs {ar}x{ac} (trans={trans_a}), rhs {br}x{bc} (trans={trans_b})"),
            ));
        }
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            (m, n),
        ))
    }

    /// Adds `b` to `a`; `b` may have the same shape or be a `1 x c` row vector
    /// broadcast over the rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shapes[a.0];
        let sb = self.shapes[b.0];
        if sa != sb && !(sb.0 == 1 && sb.1 == sa.1) {
            return Err(self.shape_err(
                self.ops.len(),
                "add",
                format!("{}x{} or 1x{}", sa.0, sa.1, sa.1),
                format!("{}x{}", sb.0, sb.1),
            ));
        }
        Ok(self.push(Op::Add { a, b }, sa))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let shape = self.shapes[a.0];
        self.push(Op::Tanh { a }, shape)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shapes[a.0];
        self.push(Op::Relu { a }, shape)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        assert!(axis < 2, "concat axis must be 0 or 1");
        if parts.is_empty() {
            return Err(self.shape_err(
                self.ops.len(),
                "concat",
                "at least one part".into(),
                "0 parts".into(),
            ));
        }
        let first = self.shapes[parts[0].0];
        let mut rows = first.0;
        let mut cols = first.1;
        for &p in &parts[1..] {
            let sp = self.shapes[p.0];
            if axis == 0 {
                if sp.1 != cols {
                    return Err(self.shape_err(
                        self.ops.len(),
                        "concat",
                        format!("all parts with {cols} cols"),
                        format!("{}x{}", sp.0, sp.1),
                    ));
                }
                rows += sp.0;
            } else {
                if sp.0 != rows {
                    return Err(self.shape_err(
                        self.ops.len(),
                        "concat",
                        format!("all parts with {rows} rows"),
                        format!("{}x{}", sp.0, sp.1),
                    ));
                }
                cols += sp.1;
            }
        }
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            (rows, cols),
        ))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let shape = self.shapes[a.0];
        self.push(Op::Scale { a, factor }, shape)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let shape = self.shapes[a.0];
        self.push(Op::Square { a }, shape)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean { a }, (1, 1))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let sa = self.shapes[a.0];
        if sa.0 * sa.1 != rows * cols {
            return Err(self.shape_err(
                self.ops.len(),
                "reshape",
                format!("{} elements", rows * cols),
                format!("{}x{} = {} elements", sa.0, sa.1, sa.0 * sa.1),
            ));
        }
        Ok(self.push(Op::Reshape { a }, (rows, cols)))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sa = self.shapes[a.0];
        if start + len > sa.0 {
            return Err(self.shape_err(
                self.ops.len(),
                "slice_rows",
                format!("rows [{start}, {}) within {}", start + len, sa.0),
                format!("{}x{}", sa.0, sa.1),
            ));
        }
        Ok(self.push(Op::SliceRows { a, start }, (len, sa.1)))
    }

    /// Registers a node under a name in the map returned by [`Tape::evaluate`].
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    /// Runs the forward pass. Leaf values come from `bindings`; every slot is
    /// filled on success. Returns the marked outputs.
    pub fn evaluate(&mut self, bindings: &Bindings) -> Result<BTreeMap<String, Array2<f64>>> {
        for i in 0..self.ops.len() {
            let value = match &self.ops[i] {
                Op::Leaf { name, .. } => {
                    let arr = bindings
                        .get(name)
                        .ok_or_else(|| Error::MissingBinding { name: name.clone() })?;
                    let expect = self.shapes[i];
                    if (arr.nrows(), arr.ncols()) != expect {
                        return Err(Error::Shape {
                            context: format!("leaf '{name}'"),
                            expected: format!("{}x{}", expect.0, expect.1),
                            actual: format!("{}x{}", arr.nrows(), arr.ncols()),
                        });
                    }
                    arr.clone()
                }
                Op::Literal => continue,
                Op::MatMul {
                    a,
                    b,
                    trans_a,
                    trans_b,
                } => {
                    let va = self.vals[a.0].as_ref().unwrap();
                    let vb = self.vals[b.0].as_ref().unwrap();
                    match (trans_a, trans_b) {
                        (false, false) => va.dot(vb),
                        (false, true) => va.dot(&vb.t()),
                        (true, false) => va.t().dot(vb),
                        (true, true) => va.t().dot(&vb.t()),
                    }
                }
                Op::Add { a, b } => {
                    let va = self.vals[a.0].as_ref().unwrap();
                    let vb = self.vals[b.0].as_ref().unwrap();
                    if vb.nrows() == 1 && va.nrows() != 1 {
                        va + &vb.row(0)
                    } else {
                        va + vb
                    }
                }
                Op::Tanh { a } => self.vals[a.0].as_ref().unwrap().mapv(f64::tanh),
                Op::Relu { a } => self.vals[a.0].as_ref().unwrap().mapv(|x| x.max(0.0)),
                Op::Concat { parts, axis } => {
                    let views: Vec<_> = parts
                        .iter()
                        .map(|p| self.vals[p.0].as_ref().unwrap().view())
                        .collect();
                    ndarray::concatenate(Axis(*axis), &views).expect("shapes checked at build")
                }
                Op::Scale { a, factor } => self.vals[a.0].as_ref().unwrap() * *factor,
                Op::Square { a } => self.vals[a.0].as_ref().unwrap().mapv(|x| x * x),
                Op::Mean { a } => {
                    let va = self.vals[a.0].as_ref().unwrap();
                    Array2::from_elem((1, 1), va.mean().unwrap_or(0.0))
                }
                Op::Reshape { a } => {
                    let (r, c) = self.shapes[i];
                    let va = self.vals[a.0].as_ref().unwrap();
                    let flat: Vec<f64> = va.iter().copied().collect();
                    Array2::from_shape_vec((r, c), flat).expect("element count checked at build")
                }
                Op::SliceRows { a, start } => {
                    let (len, _) = self.shapes[i];
                    let va = self.vals[a.0].as_ref().unwrap();
                    va.slice(s![*start..*start + len, ..]).to_owned()
                }
            };
            self.vals[i] = Some(value);
        }
        self.evaluated = true;
        let mut out = BTreeMap::new();
        for (name, id) in &self.outputs {
            out.insert(name.clone(), self.vals[id.0].as_ref().unwrap().clone());
        }
        Ok(out)
    }

    /// Forward value of a node (after [`Tape::evaluate`]).
    pub fn value(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.vals[id.0].as_ref()
    }

    fn accumulate(&mut self, id: NodeId, delta: Array2<f64>) {
        match &mut self.adjs[id.0] {
            Some(adj) => *adj += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse pass from `loss` (must be `1 x 1`). Returns the gradient for
    /// every param leaf name; params unreachable from the loss get zeros.
    /// Adjoint slots are cleared before returning.
    pub fn gradient(&mut self, loss: NodeId) -> Result<BTreeMap<String, Array2<f64>>> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        let (lr, lc) = self.shapes[loss.0];
        if (lr, lc) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: lr, cols: lc });
        }

        for adj in &mut self.adjs {
            *adj = None;
        }
        self.adjs[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..self.ops.len()).rev() {
            let adj = match self.adjs[i].take() {
                Some(adj) => adj,
                None => continue,
            };
            let op = self.ops[i].clone();
            match op {
                Op::Leaf { .. } | Op::Literal => {
                    // Put it back so param gradients can be collected below.
                    self.adjs[i] = Some(adj);
                    continue;
                }
                Op::MatMul {
                    a,
                    b,
                    trans_a,
                    trans_b,
                } => {
                    let (da, db) = {
                        let va = self.vals[a.0].as_ref().unwrap();
                        let vb = self.vals[b.0].as_ref().unwrap();
                        match (trans_a, trans_b) {
                            (false, false) => (adj.dot(&vb.t()), va.t().dot(&adj)),
                            (false, true) => (adj.dot(vb), adj.t().dot(va)),
                            (true, false) => (vb.dot(&adj.t()), va.dot(&adj)),
                            (true, true) => (vb.t().dot(&adj.t()), adj.t().dot(&va.t())),
                        }
                    };
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Add { a, b } => {
                    let sb = self.shapes[b.0];
                    let sa = self.shapes[a.0];
                    if sb.0 == 1 && sa.0 != 1 {
                        let db = adj.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.accumulate(b, db);
                    } else {
                        self.accumulate(b, adj.clone());
                    }
                    self.accumulate(a, adj);
                }
                Op::Tanh { a } => {
                    let y = self.vals[i].as_ref().unwrap();
                    let da = &adj * &y.mapv(|t| 1.0 - t * t);
                    self.accumulate(a, da);
                }
                Op::Relu { a } => {
                    let x = self.vals[a.0].as_ref().unwrap();
                    let da = &adj * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    self.accumulate(a, da);
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0usize;
                    for p in parts {
                        let sp = self.shapes[p.0];
                        let dp = if axis == 0 {
                            adj.slice(s![offset..offset + sp.0, ..]).to_owned()
                        } else {
                            adj.slice(s![.., offset..offset + sp.1]).to_owned()
                        };
                        offset += if axis == 0 { sp.0 } else { sp.1 };
                        self.accumulate(p, dp);
                    }
                }
                Op::Scale { a, factor } => {
                    self.accumulate(a, adj * factor);
                }
                Op::Square { a } => {
                    let x = self.vals[a.0].as_ref().unwrap();
                    let da = &adj * &(x * 2.0);
                    self.accumulate(a, da);
                }
                Op::Mean { a } => {
                    let sa = self.shapes[a.0];
                    let g = adj[(0, 0)] / (sa.0 * sa.1) as f64;
                    self.accumulate(a, Array2::from_elem(sa, g));
                }
                Op::Reshape { a } => {
                    let sa = self.shapes[a.0];
                    let flat: Vec<f64> = adj.iter().copied().collect();
                    let da = Array2::from_shape_vec(sa, flat).unwrap();
                    self.accumulate(a, da);
                }
                Op::SliceRows { a, start } => {
                    let sa = self.shapes[a.0];
                    let mut da = Array2::zeros(sa);
                    da.slice_mut(s![start..start + adj.nrows(), ..])
                        .assign(&adj);
                    self.accumulate(a, da);
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Leaf { name, param: true } = op {
                let g = match self.adjs[i].take() {
                    Some(adj) => adj,
                    None => Array2::zeros(self.shapes[i]),
                };
                match grads.entry(name.clone()) {
                    std::collections::btree_map::Entry::Vacant(e) => {
                        e.insert(g);
                    }
                    std::collections::btree_map::Entry::Occupied(mut e) => {
                        *e.get_mut() += &g;
                    }
                }
            }
        }
        for adj in &mut self.adjs {
            *adj = None;
        }
        Ok(grads)
    }

    /// Convenience for `mean(square(pred - target))` given a constant target.
    pub fn mse_against(&mut self, pred: NodeId, target: &Array2<f64>) -> Result<NodeId> {
        let neg = self.literal(target.mapv(|v| -v));
        let diff = self.add(pred, neg)?;
        let sq = self.square(diff);
        Ok(self.mean(sq))
    }

    pub fn op_kind(&self, id: NodeId) -> &'static str {
        self.ops[id.0].kind()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}
