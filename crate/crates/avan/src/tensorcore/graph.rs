//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built once per model; nodes are appended in topological
//! order by construction, so forward evaluation is a single left-to-right
//! pass and backpropagation a single right-to-left pass. Parameters are
//! looked up by name in a [`ParamStore`] at evaluation time, which keeps the
//! graph itself free of any mutable state: evaluating the same graph twice
//! with the same store and inputs produces identical results.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::kernels;
use super::tensor::{ParamStore, Scalar, Tensor};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

/// Whether batch normalization uses batch statistics (`Train`) or the stored
/// running statistics (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub enum Op<T: Scalar> {
    /// Fed at evaluation time by name.
    Input { name: String },
    /// Resolved from the parameter store by name.
    Param { name: String },
    /// Baked into the graph.
    Const(Rc<Tensor<T>>),
    /// inputs: [x, w] or [x, w, b]; x `[n, in]`, w `[out, in]`, b `[out]`.
    Dense,
    /// inputs: [x, w] or [x, w, b]; x `[n, ci, h, w]`, w `[co, ci, kh, kw]`.
    Conv2d { stride: usize, pad: usize },
    /// inputs: [x, gamma, beta, running_mean, running_var]; the running
    /// statistics must be parameter nodes so batch statistics can be
    /// reported against their names.
    BatchNorm { eps: T },
    Relu,
    Sigmoid,
    Tanh,
    /// Global average pool `[n, c, h, w]` -> `[n, c]`.
    Gap,
    /// Bilinear resize (half-pixel centers) to the stored output size.
    Upsample { oh: usize, ow: usize },
    /// Elementwise product of two same-shape tensors.
    Mul,
    /// Elementwise sum of two same-shape tensors.
    Add,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    /// Sum of squared differences over all elements -> `[1]`.
    SquaredError,
    /// Sum of absolute values over all elements -> `[1]`.
    L1Norm,
    /// Row-wise Euclidean distance between `[n, k]` tensors -> `[n]`.
    RowDist,
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Const(_) => "const",
            Op::Dense => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Gap => "global_avg_pool",
            Op::Upsample { .. } => "upsample",
            Op::Mul => "mul",
            Op::Add => "add",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::SquaredError => "squared_error",
            Op::L1Norm => "l1_norm",
            Op::RowDist => "row_distance",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node<T: Scalar> {
    pub op: Op<T>,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub label: String,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    input_ids: HashMap<String, NodeId>,
    param_ids: HashMap<String, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            input_ids: HashMap::new(),
            param_ids: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn shape_err(&self, label: &str, expected: impl Into<String>, actual: impl Into<String>) -> Error {
        Error::Shape {
            node: label.to_string(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let label = format!("{}#{}", op.name(), id.0);
        self.nodes.push(Node { op, inputs, shape, label });
        id
    }

    // -- leaf nodes ---------------------------------------------------------

    /// Declare a named input. Re-declaring the same name must use the same
    /// shape and returns the original node.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if let Some(&id) = self.input_ids.get(name) {
            if self.nodes[id.0].shape != shape {
                return Err(self.shape_err(
                    &format!("input '{name}'"),
                    format!("{:?}", self.nodes[id.0].shape),
                    format!("{shape:?}"),
                ));
            }
            return Ok(id);
        }
        let id = self.push(Op::Input { name: name.to_string() }, vec![], shape.to_vec());
        self.input_ids.insert(name.to_string(), id);
        Ok(id)
    }

    /// Reference a named parameter with its expected shape. Repeated
    /// references return the same node.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if let Some(&id) = self.param_ids.get(name) {
            if self.nodes[id.0].shape != shape {
                return Err(self.shape_err(
                    &format!("param '{name}'"),
                    format!("{:?}", self.nodes[id.0].shape),
                    format!("{shape:?}"),
                ));
            }
            return Ok(id);
        }
        let id = self.push(Op::Param { name: name.to_string() }, vec![], shape.to_vec());
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Const(Rc::new(t)), vec![], shape)
    }

    pub fn const_filled(&mut self, shape: &[usize], value: f64) -> NodeId {
        self.constant(Tensor::filled(shape, T::from_f64(value)))
    }

    pub fn const_scalar(&mut self, value: f64) -> NodeId {
        self.const_filled(&[1], value)
    }

    // -- layers -------------------------------------------------------------

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(self.shape_err(
                "dense",
                "x [n, in] and w [out, in]",
                format!("x {xs:?}, w {ws:?}"),
            ));
        }
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            let bs = self.shape(b).to_vec();
            if bs != [ws[0]] {
                return Err(self.shape_err("dense", format!("bias [{}]", ws[0]), format!("{bs:?}")));
            }
            inputs.push(b);
        }
        Ok(self.push(Op::Dense, inputs, vec![xs[0], ws[0]]))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(self.shape_err(
                "conv2d",
                "x [n, ci, h, w] and w [co, ci, kh, kw]",
                format!("x {xs:?}, w {ws:?}"),
            ));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::usage(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(self.shape_err(
                "conv2d",
                "kernel no larger than padded input",
                format!("x {xs:?}, w {ws:?}, pad {pad}"),
            ));
        }
        let oh = kernels::conv2d_out_dim(xs[2], ws[2], stride, pad);
        let ow = kernels::conv2d_out_dim(xs[3], ws[3], stride, pad);
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            let bs = self.shape(b).to_vec();
            if bs != [ws[0]] {
                return Err(self.shape_err("conv2d", format!("bias [{}]", ws[0]), format!("{bs:?}")));
            }
            inputs.push(b);
        }
        Ok(self.push(Op::Conv2d { stride, pad }, inputs, vec![xs[0], ws[0], oh, ow]))
    }

    /// Batch normalization over rank-2 (per feature) or rank-4 (per channel)
    /// input. `running_mean` / `running_var` must be parameter nodes; in
    /// training mode the evaluation reports batch statistics against their
    /// names so the caller can fold them into the running estimates.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: NodeId,
        running_var: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let c = match xs.len() {
            2 => xs[1],
            4 => xs[1],
            _ => {
                return Err(self.shape_err("batch_norm", "rank 2 or 4 input", format!("{xs:?}")));
            }
        };
        for (role, id) in [
            ("gamma", gamma),
            ("beta", beta),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            let s = self.shape(id).to_vec();
            if s != [c] {
                return Err(self.shape_err("batch_norm", format!("{role} [{c}]"), format!("{s:?}")));
            }
        }
        for (role, id) in [("running_mean", running_mean), ("running_var", running_var)] {
            if !matches!(self.nodes[id.0].op, Op::Param { .. }) {
                return Err(Error::usage(format!(
                    "batch_norm {role} must be a parameter node"
                )));
            }
        }
        Ok(self.push(
            Op::BatchNorm { eps: T::from_f64(eps) },
            vec![x, gamma, beta, running_mean, running_var],
            xs,
        ))
    }

    fn unary(&mut self, op: Op<T>, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(op, vec![x], shape)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Relu, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Tanh, x)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(self.shape_err("global_avg_pool", "rank 4 input", format!("{xs:?}")));
        }
        Ok(self.push(Op::Gap, vec![x], vec![xs[0], xs[1]]))
    }

    pub fn upsample(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || oh == 0 || ow == 0 {
            return Err(self.shape_err(
                "upsample",
                "rank 4 input and nonzero output size",
                format!("x {xs:?} -> [{oh}, {ow}]"),
            ));
        }
        Ok(self.push(Op::Upsample { oh, ow }, vec![x], vec![xs[0], xs[1], oh, ow]))
    }

    fn binary_same_shape(&mut self, op: Op<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa != sb {
            return Err(self.shape_err(op.name(), format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(self.push(op, vec![a, b], sa))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Mul, a, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Add, a, b)
    }

    /// Scale every element by a compile-time constant (elementwise product
    /// with a filled constant tensor).
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let c = self.const_filled(&shape, factor);
        self.mul(x, c)
    }

    /// Add a compile-time constant to every element.
    pub fn offset(&mut self, x: NodeId, value: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let c = self.const_filled(&shape, value);
        self.add(x, c)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::usage("concat needs at least one input"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::usage(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_len = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(self.shape_err(
                    "concat",
                    format!("{first:?} up to axis {axis}"),
                    format!("{s:?}"),
                ));
            }
            axis_len += s[axis];
        }
        let mut shape = first;
        shape[axis] = axis_len;
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), shape))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(self.shape_err(
                "slice",
                format!("start+len <= {} on axis {axis}", xs.get(axis).copied().unwrap_or(0)),
                format!("start {start}, len {len}, shape {xs:?}"),
            ));
        }
        let mut shape = xs;
        shape[axis] = len;
        Ok(self.push(Op::Slice { axis, start, len }, vec![x], shape))
    }

    /// Sum of squared differences reduced to a single element.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa != sb {
            return Err(self.shape_err("squared_error", format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(self.push(Op::SquaredError, vec![a, b], vec![1]))
    }

    /// Sum of absolute values reduced to a single element.
    pub fn l1_norm(&mut self, x: NodeId) -> NodeId {
        self.push(Op::L1Norm, vec![x], vec![1])
    }

    /// Euclidean distance between corresponding rows of two `[n, k]` tensors.
    pub fn row_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sa != sb {
            return Err(self.shape_err(
                "row_distance",
                "two equal [n, k] tensors",
                format!("a {sa:?}, b {sb:?}"),
            ));
        }
        Ok(self.push(Op::RowDist, vec![a, b], vec![sa[0]]))
    }

    // -- execution ----------------------------------------------------------

    /// Run the graph forward. Every declared input must be fed exactly once;
    /// feeding an undeclared name is an error.
    pub fn evaluate(
        &self,
        params: &ParamStore<T>,
        inputs: &[(&str, &Tensor<T>)],
        mode: Mode,
    ) -> Result<Evaluation<T>> {
        let mut fed: HashMap<&str, &Tensor<T>> = HashMap::new();
        for &(name, t) in inputs {
            if !self.input_ids.contains_key(name) {
                return Err(Error::usage(format!("graph has no input named '{name}'")));
            }
            if fed.insert(name, t).is_some() {
                return Err(Error::usage(format!("input '{name}' fed twice")));
            }
        }
        let mut values: Vec<Vec<T>> = Vec::with_capacity(self.nodes.len());
        let mut bn_saved: Vec<Option<(Vec<T>, Vec<T>)>> = vec![None; self.nodes.len()];
        let mut batch_stats: Vec<BnBatchStats<T>> = Vec::new();

        for (i, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input { name } => {
                    let t = fed.get(name.as_str()).ok_or_else(|| {
                        Error::usage(format!("missing value for input '{name}'"))
                    })?;
                    if t.shape() != node.shape {
                        return Err(self.shape_err(
                            &format!("input '{name}'"),
                            format!("{:?}", node.shape),
                            format!("{:?}", t.shape()),
                        ));
                    }
                    t.data().to_vec()
                }
                Op::Param { name } => {
                    let t = params.require(name)?;
                    if t.shape() != node.shape {
                        return Err(self.shape_err(
                            &format!("param '{name}'"),
                            format!("{:?}", node.shape),
                            format!("{:?}", t.shape()),
                        ));
                    }
                    t.data().to_vec()
                }
                Op::Const(t) => t.data().to_vec(),
                Op::Dense => {
                    let x = &values[node.inputs[0].0];
                    let w = &values[node.inputs[1].0];
                    let b = node.inputs.get(2).map(|id| values[id.0].as_slice());
                    let (n, in_f) = dims2(self.shape(node.inputs[0]));
                    let out_f = self.shape(node.inputs[1])[0];
                    let mut y = vec![T::zero(); n * out_f];
                    kernels::dense_fwd(x, n, in_f, w, out_f, b, &mut y);
                    y
                }
                Op::Conv2d { stride, pad } => {
                    let x = &values[node.inputs[0].0];
                    let w = &values[node.inputs[1].0];
                    let b = node.inputs.get(2).map(|id| values[id.0].as_slice());
                    let xs = self.shape(node.inputs[0]);
                    let ws = self.shape(node.inputs[1]);
                    let mut y = vec![T::zero(); node.shape.iter().product()];
                    kernels::conv2d_fwd(
                        x, xs[0], xs[1], xs[2], xs[3], w, ws[0], ws[2], ws[3], b, *stride, *pad,
                        &mut y,
                    );
                    y
                }
                Op::BatchNorm { eps } => {
                    let x = &values[node.inputs[0].0];
                    let gamma = &values[node.inputs[1].0];
                    let beta = &values[node.inputs[2].0];
                    let xs = &node.shape;
                    let c = xs[1];
                    let mut y = vec![T::zero(); x.len()];
                    match mode {
                        Mode::Train => {
                            let mut mean = vec![T::zero(); c];
                            let mut var = vec![T::zero(); c];
                            kernels::batchnorm_train_fwd(
                                x, xs, gamma, beta, *eps, &mut y, &mut mean, &mut var,
                            );
                            batch_stats.push(BnBatchStats {
                                mean_param: param_name(self, node.inputs[3]),
                                var_param: param_name(self, node.inputs[4]),
                                mean: mean.clone(),
                                var: var.clone(),
                            });
                            bn_saved[i] = Some((mean, var));
                        }
                        Mode::Eval => {
                            let rm = &values[node.inputs[3].0];
                            let rv = &values[node.inputs[4].0];
                            kernels::batchnorm_eval_fwd(x, xs, gamma, beta, rm, rv, *eps, &mut y);
                            bn_saved[i] = Some((rm.clone(), rv.clone()));
                        }
                    }
                    y
                }
                Op::Relu => values[node.inputs[0].0]
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { T::zero() })
                    .collect(),
                Op::Sigmoid => values[node.inputs[0].0]
                    .iter()
                    .map(|&v| T::one() / (T::one() + (-v).exp()))
                    .collect(),
                Op::Tanh => values[node.inputs[0].0].iter().map(|&v| v.tanh()).collect(),
                Op::Gap => {
                    let xs = self.shape(node.inputs[0]);
                    let mut y = vec![T::zero(); xs[0] * xs[1]];
                    kernels::gap_fwd(&values[node.inputs[0].0], xs[0], xs[1], xs[2] * xs[3], &mut y);
                    y
                }
                Op::Upsample { oh, ow } => {
                    let xs = self.shape(node.inputs[0]);
                    let mut y = vec![T::zero(); xs[0] * xs[1] * oh * ow];
                    kernels::upsample_fwd(
                        &values[node.inputs[0].0],
                        xs[0],
                        xs[1],
                        xs[2],
                        xs[3],
                        *oh,
                        *ow,
                        &mut y,
                    );
                    y
                }
                Op::Mul => {
                    let a = &values[node.inputs[0].0];
                    let b = &values[node.inputs[1].0];
                    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
                }
                Op::Add => {
                    let a = &values[node.inputs[0].0];
                    let b = &values[node.inputs[1].0];
                    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
                }
                Op::Concat { axis } => {
                    let shape = &node.shape;
                    let (outer, total_axis, inner) = kernels::axis_split(shape, *axis);
                    let mut y = vec![T::zero(); outer * total_axis * inner];
                    let mut offset = 0usize;
                    for &p in &node.inputs {
                        let ps = self.shape(p);
                        let plen = ps[*axis];
                        let src = &values[p.0];
                        for o in 0..outer {
                            let dst_base = (o * total_axis + offset) * inner;
                            let src_base = o * plen * inner;
                            y[dst_base..dst_base + plen * inner]
                                .copy_from_slice(&src[src_base..src_base + plen * inner]);
                        }
                        offset += plen;
                    }
                    y
                }
                Op::Slice { axis, start, len } => {
                    let xs = self.shape(node.inputs[0]);
                    let (outer, total_axis, inner) = kernels::axis_split(xs, *axis);
                    let src = &values[node.inputs[0].0];
                    let mut y = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        let src_base = (o * total_axis + start) * inner;
                        let dst_base = o * len * inner;
                        y[dst_base..dst_base + len * inner]
                            .copy_from_slice(&src[src_base..src_base + len * inner]);
                    }
                    y
                }
                Op::SquaredError => {
                    let a = &values[node.inputs[0].0];
                    let b = &values[node.inputs[1].0];
                    let mut acc = T::zero();
                    for (&x, &y) in a.iter().zip(b) {
                        let d = x - y;
                        acc = acc + d * d;
                    }
                    vec![acc]
                }
                Op::L1Norm => {
                    let mut acc = T::zero();
                    for &v in &values[node.inputs[0].0] {
                        acc = acc + v.abs();
                    }
                    vec![acc]
                }
                Op::RowDist => {
                    let (n, k) = dims2(self.shape(node.inputs[0]));
                    let mut d = vec![T::zero(); n];
                    kernels::rowdist_fwd(
                        &values[node.inputs[0].0],
                        &values[node.inputs[1].0],
                        n,
                        k,
                        &mut d,
                    );
                    d
                }
            };
            debug_assert_eq!(value.len(), node.shape.iter().product::<usize>(), "{}", node.label);
            values.push(value);
        }
        Ok(Evaluation { values, bn_saved, batch_stats, mode })
    }

    /// Reverse-mode gradients of a scalar `loss` node with respect to every
    /// trainable parameter reachable from it. Must be given the evaluation
    /// (and the parameter store) the forward pass was run with.
    pub fn gradients(
        &self,
        eval: &Evaluation<T>,
        params: &ParamStore<T>,
        loss: NodeId,
    ) -> Result<Gradients<T>> {
        if self.shape(loss).iter().product::<usize>() != 1 {
            return Err(Error::usage(format!(
                "loss node must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        // A node participates in differentiation iff a trainable parameter
        // feeds it. Everything else is constant and skipped outright.
        let mut active = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            active[i] = match &node.op {
                Op::Param { name } => params.require(name)?.requires_grad(),
                _ => node.inputs.iter().any(|id| active[id.0]),
            };
        }
        let mut adjoints: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(vec![T::one()]);
        let mut param_grads: BTreeMap<String, Vec<T>> = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            if !active[i] || adjoints[i].is_none() {
                continue;
            }
            let dy = adjoints[i].take().unwrap();
            let node = &self.nodes[i];
            match &node.op {
                Op::Param { name } => {
                    let slot = param_grads
                        .entry(name.clone())
                        .or_insert_with(|| vec![T::zero(); dy.len()]);
                    for (g, &d) in slot.iter_mut().zip(&dy) {
                        *g = *g + d;
                    }
                }
                Op::Input { .. } | Op::Const(_) => {}
                Op::Dense => {
                    let x_id = node.inputs[0];
                    let w_id = node.inputs[1];
                    let (n, in_f) = dims2(self.shape(x_id));
                    let out_f = self.shape(w_id)[0];
                    let [dx, dw, db] = take3(
                        &mut adjoints,
                        &active,
                        self,
                        [Some(x_id), Some(w_id), node.inputs.get(2).copied()],
                    );
                    kernels::dense_bwd(
                        &dy,
                        &eval.values[x_id.0],
                        n,
                        in_f,
                        &eval.values[w_id.0],
                        out_f,
                        dx,
                        dw,
                        db,
                    );
                }
                Op::Conv2d { stride, pad } => {
                    let x_id = node.inputs[0];
                    let w_id = node.inputs[1];
                    let xs = self.shape(x_id).to_vec();
                    let ws = self.shape(w_id).to_vec();
                    let [dx, dw, db] = take3(
                        &mut adjoints,
                        &active,
                        self,
                        [Some(x_id), Some(w_id), node.inputs.get(2).copied()],
                    );
                    kernels::conv2d_bwd(
                        &dy,
                        &eval.values[x_id.0],
                        xs[0],
                        xs[1],
                        xs[2],
                        xs[3],
                        &eval.values[w_id.0],
                        ws[0],
                        ws[2],
                        ws[3],
                        *stride,
                        *pad,
                        dx,
                        dw,
                        db,
                    );
                }
                Op::BatchNorm { eps } => {
                    let x_id = node.inputs[0];
                    let (mean, var) = eval.bn_saved[i]
                        .as_ref()
                        .expect("batch norm statistics saved during forward pass");
                    let gamma = &eval.values[node.inputs[1].0];
                    let [dx, dgamma, dbeta] = take3(
                        &mut adjoints,
                        &active,
                        self,
                        [Some(x_id), Some(node.inputs[1]), Some(node.inputs[2])],
                    );
                    match eval.mode {
                        Mode::Train => kernels::batchnorm_train_bwd(
                            &dy,
                            &eval.values[x_id.0],
                            &node.shape,
                            gamma,
                            mean,
                            var,
                            *eps,
                            dx,
                            dgamma,
                            dbeta,
                        ),
                        Mode::Eval => kernels::batchnorm_eval_bwd(
                            &dy,
                            &eval.values[x_id.0],
                            &node.shape,
                            gamma,
                            mean,
                            var,
                            *eps,
                            dx,
                            dgamma,
                            dbeta,
                        ),
                    }
                }
                Op::Relu => {
                    if let Some(dx) = take1(&mut adjoints, &active, self, node.inputs[0]) {
                        let x = &eval.values[node.inputs[0].0];
                        for ((d, &g), &v) in dx.iter_mut().zip(&dy).zip(x) {
                            if v > T::zero() {
                                *d = *d + g;
                            }
                        }
                    }
                }
                Op::Sigmoid => {
                    if let Some(dx) = take1(&mut adjoints, &active, self, node.inputs[0]) {
                        let y = &eval.values[i];
                        for ((d, &g), &s) in dx.iter_mut().zip(&dy).zip(y) {
                            *d = *d + g * s * (T::one() - s);
                        }
                    }
                }
                Op::Tanh => {
                    if let Some(dx) = take1(&mut adjoints, &active, self, node.inputs[0]) {
                        let y = &eval.values[i];
                        for ((d, &g), &t) in dx.iter_mut().zip(&dy).zip(y) {
                            *d = *d + g * (T::one() - t * t);
                        }
                    }
                }
                Op::Gap => {
                    if let Some(dx) = take1(&mut adjoints, &active, self, node.inputs[0]) {
                        let xs = self.shape(node.inputs[0]);
                        kernels::gap_bwd(&dy, xs[0], xs[1], xs[2] * xs[3], dx);
                    }
                }
                Op::Upsample { oh, ow } => {
                    if let Some(dx) = take1(&mut adjoints, &active, self, node.inputs[0]) {
                        let xs = self.shape(node.inputs[0]);
                        kernels::upsample_bwd(&dy, xs[0], xs[1], xs[2], xs[3], *oh, *ow, dx);
                    }
                }
                Op::Mul => {
                    let a_id = node.inputs[0];
                    let b_id = node.inputs[1];
                    if active[a_id.0] {
                        let b = eval.values[b_id.0].clone();
                        let da = take1(&mut adjoints, &active, self, a_id).unwrap();
                        for ((d, &g), &bv) in da.iter_mut().zip(&dy).zip(&b) {
                            *d = *d + g * bv;
                        }
                    }
                    if active[b_id.0] {
                        let a = eval.values[a_id.0].clone();
                        let db = take1(&mut adjoints, &active, self, b_id).unwrap();
                        for ((d, &g), &av) in db.iter_mut().zip(&dy).zip(&a) {
                            *d = *d + g * av;
                        }
                    }
                }
                Op::Add => {
                    for &id in &node.inputs {
                        if let Some(dx) = take1(&mut adjoints, &active, self, id) {
                            for (d, &g) in dx.iter_mut().zip(&dy) {
                                *d = *d + g;
                            }
                        }
                    }
                }
                Op::Concat { axis } => {
                    let (outer, total_axis, inner) = kernels::axis_split(&node.shape, *axis);
                    let mut offset = 0usize;
                    for &p in &node.inputs {
                        let plen = self.shape(p)[*axis];
                        if let Some(dx) = take1(&mut adjoints, &active, self, p) {
                            for o in 0..outer {
                                let src_base = (o * total_axis + offset) * inner;
                                let dst_base = o * plen * inner;
                                for j in 0..plen * inner {
                                    dx[dst_base + j] = dx[dst_base + j] + dy[src_base + j];
                                }
                            }
                        }
                        offset += plen;
                    }
                }
                Op::Slice { axis, start, len } => {
                    if let Some(dx) = take1(&mut adjoints, &active, self, node.inputs[0]) {
                        let xs = self.shape(node.inputs[0]);
                        let (outer, total_axis, inner) = kernels::axis_split(xs, *axis);
                        for o in 0..outer {
                            let dst_base = (o * total_axis + start) * inner;
                            let src_base = o * len * inner;
                            for j in 0..len * inner {
                                dx[dst_base + j] = dx[dst_base + j] + dy[src_base + j];
                            }
                        }
                    }
                }
                Op::SquaredError => {
                    let g = dy[0];
                    let a_id = node.inputs[0];
                    let b_id = node.inputs[1];
                    let two = T::from_f64(2.0);
                    if active[a_id.0] {
                        let b = eval.values[b_id.0].clone();
                        let a = eval.values[a_id.0].clone();
                        let da = take1(&mut adjoints, &active, self, a_id).unwrap();
                        for ((d, &x), &y) in da.iter_mut().zip(&a).zip(&b) {
                            *d = *d + g * two * (x - y);
                        }
                    }
                    if active[b_id.0] {
                        let b = eval.values[b_id.0].clone();
                        let a = eval.values[a_id.0].clone();
                        let db = take1(&mut adjoints, &active, self, b_id).unwrap();
                        for ((d, &x), &y) in db.iter_mut().zip(&a).zip(&b) {
                            *d = *d - g * two * (x - y);
                        }
                    }
                }
                Op::L1Norm => {
                    if let Some(dx) = take1(&mut adjoints, &active, self, node.inputs[0]) {
                        let g = dy[0];
                        let x = &eval.values[node.inputs[0].0];
                        for (d, &v) in dx.iter_mut().zip(x) {
                            if v > T::zero() {
                                *d = *d + g;
                            } else if v < T::zero() {
                                *d = *d - g;
                            }
                        }
                    }
                }
                Op::RowDist => {
                    let a_id = node.inputs[0];
                    let b_id = node.inputs[1];
                    let (n, k) = dims2(self.shape(a_id));
                    let [da, db, _] = take3(
                        &mut adjoints,
                        &active,
                        self,
                        [Some(a_id), Some(b_id), None],
                    );
                    kernels::rowdist_bwd(
                        &dy,
                        &eval.values[a_id.0],
                        &eval.values[b_id.0],
                        &eval.values[i],
                        n,
                        k,
                        da,
                        db,
                    );
                }
            }
        }
        Ok(Gradients { params: param_grads })
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn param_name<T: Scalar>(g: &Graph<T>, id: NodeId) -> String {
    match &g.nodes[id.0].op {
        Op::Param { name } => name.clone(),
        _ => unreachable!("validated at construction"),
    }
}

/// Borrow (allocating on first touch) the adjoint buffer of `id` if the node
/// participates in differentiation.
fn take1<'a, T: Scalar>(
    adjoints: &'a mut [Option<Vec<T>>],
    active: &[bool],
    g: &Graph<T>,
    id: NodeId,
) -> Option<&'a mut [T]> {
    if !active[id.0] {
        return None;
    }
    let n: usize = g.shape(id).iter().product();
    Some(adjoints[id.0].get_or_insert_with(|| vec![T::zero(); n]))
}

/// Like [`take1`] for up to three distinct nodes at once (the layer kernels
/// take all gradient outputs in one call).
fn take3<'a, T: Scalar>(
    adjoints: &'a mut [Option<Vec<T>>],
    active: &[bool],
    g: &Graph<T>,
    ids: [Option<NodeId>; 3],
) -> [Option<&'a mut [T]>; 3] {
    // Allocate any missing buffers first, then hand out disjoint borrows.
    for id in ids.iter().flatten() {
        if active[id.0] && adjoints[id.0].is_none() {
            let n: usize = g.shape(*id).iter().product();
            adjoints[id.0] = Some(vec![T::zero(); n]);
        }
    }
    let ptr = adjoints.as_mut_ptr();
    ids.map(|id| {
        let id = id?;
        if !active[id.0] {
            return None;
        }
        debug_assert!(
            ids.iter().flatten().filter(|other| other.0 == id.0).count() == 1,
            "layer inputs must be distinct nodes"
        );
        // SAFETY: the ids are distinct (asserted above), so the three mutable
        // borrows never alias.
        unsafe { (*ptr.add(id.0)).as_deref_mut() }
    })
}

/// Per-layer batch statistics recorded during a training-mode pass, keyed by
/// the running-statistic parameter names they should be folded into.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T: Scalar> {
    pub mean_param: String,
    pub var_param: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Result of a forward pass: one value buffer per node, plus whatever batch
/// normalization saved for the backward pass.
pub struct Evaluation<T: Scalar> {
    values: Vec<Vec<T>>,
    bn_saved: Vec<Option<(Vec<T>, Vec<T>)>>,
    batch_stats: Vec<BnBatchStats<T>>,
    mode: Mode,
}

impl<T: Scalar> Evaluation<T> {
    pub fn value(&self, id: NodeId) -> &[T] {
        &self.values[id.0]
    }

    /// Scalar convenience for `[1]`-shaped nodes.
    pub fn scalar(&self, id: NodeId) -> T {
        debug_assert_eq!(self.values[id.0].len(), 1);
        self.values[id.0][0]
    }

    pub fn tensor(&self, graph: &Graph<T>, id: NodeId) -> Tensor<T> {
        Tensor::new(graph.shape(id), self.values[id.0].clone()).expect("node shape matches value")
    }

    pub fn batch_stats(&self) -> &[BnBatchStats<T>] {
        &self.batch_stats
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Parameter-name-keyed gradients from a backward pass.
pub struct Gradients<T: Scalar> {
    params: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<T>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Fold training-pass batch statistics into the running estimates:
/// `running = (1 - momentum_new) * running + momentum_new * batch`.
pub fn update_running_stats<T: Scalar>(
    params: &mut ParamStore<T>,
    stats: &[BnBatchStats<T>],
    momentum_new: f64,
) -> Result<()> {
    let m = T::from_f64(momentum_new);
    let keep = T::one() - m;
    for s in stats {
        for (name, fresh) in [(&s.mean_param, &s.mean), (&s.var_param, &s.var)] {
            let t = params
                .get_mut(name)
                .ok_or_else(|| Error::runtime(format!("missing running statistic '{name}'")))?;
            for (r, &b) in t.data_mut().iter_mut().zip(fresh) {
                *r = keep * *r + m * b;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::check_gradients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn randt(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap().with_requires_grad(true)
    }

    /// Random values kept away from zero so kinked ops (relu, |·|) see no
    /// finite-difference probe crossing the kink.
    fn randt_off_zero(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(shape, data).unwrap().with_requires_grad(true)
    }

    #[test]
    fn relu_sigmoid_tanh_pointwise_values() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input("x", &[3]).unwrap();
        let r = g.relu(x);
        let s = g.sigmoid(x);
        let t = g.tanh(x);
        let xv = Tensor::from_f64_slice(&[3], &[-1.0, 0.0, 2.0]).unwrap();
        let params = ParamStore::new();
        let eval = g.evaluate(&params, &[("x", &xv)], Mode::Eval).unwrap();
        assert_eq!(eval.value(r), &[0.0, 0.0, 2.0]);
        assert_eq!(eval.value(s)[1], 0.5);
        assert_eq!(eval.value(t)[1], 0.0);
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param("x", &[2]).unwrap();
        let zero = g.const_filled(&[2], 0.0);
        let loss = g.squared_error(x, zero).unwrap();
        let mut params = ParamStore::new();
        params.insert("x", Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap().with_requires_grad(true));
        let eval = g.evaluate(&params, &[], Mode::Eval).unwrap();
        assert_eq!(eval.scalar(loss), 5.0);
        let grads = g.gradients(&eval, &params, loss).unwrap();
        assert_eq!(grads.param("x").unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn segmentation_mask_gradient_is_the_image() {
        // d(x * m)/dm = x
        let mut g: Graph<f64> = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let m = g.param("m", &[1]).unwrap();
        let prod = g.mul(x, m).unwrap();
        let l1 = g.l1_norm(prod);
        let mut params = ParamStore::new();
        params.insert("m", Tensor::from_f64_slice(&[1], &[0.5]).unwrap().with_requires_grad(true));
        let xv = Tensor::from_f64_slice(&[1], &[3.0]).unwrap();
        let eval = g.evaluate(&params, &[("x", &xv)], Mode::Eval).unwrap();
        let grads = g.gradients(&eval, &params, l1).unwrap();
        assert_eq!(grads.param("m").unwrap(), &[3.0]);
    }

    #[test]
    fn evaluate_is_pure() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut g: Graph<f64> = Graph::new();
        let x = g.input("x", &[2, 3, 4, 4]).unwrap();
        let w = g.param("w", &[2, 3, 3, 3]).unwrap();
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        let s = g.sigmoid(y);
        let mut params = ParamStore::new();
        params.insert("w", randt(&mut rng, &[2, 3, 3, 3]));
        let xv = randt(&mut rng, &[2, 3, 4, 4]);
        let a = g.evaluate(&params, &[("x", &xv)], Mode::Eval).unwrap();
        let b = g.evaluate(&params, &[("x", &xv)], Mode::Eval).unwrap();
        assert_eq!(a.value(s), b.value(s));
    }

    /// Build-a-graph helper for the finite-difference suites: returns
    /// (graph, params, loss). The loss is l1(tanh(out)) to keep magnitudes
    /// tame without hiding sign errors.
    fn gc(
        build: impl FnOnce(&mut Graph<f64>, &mut ParamStore<f64>, &mut ChaCha20Rng) -> NodeId,
        seed: u64,
        tol: f64,
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut g: Graph<f64> = Graph::new();
        let mut params = ParamStore::new();
        let out = build(&mut g, &mut params, &mut rng);
        let t = g.tanh(out);
        let loss = g.l1_norm(t);
        let report = check_gradients(&g, &params, &[], Mode::Train, loss, 1e-5).unwrap();
        assert!(
            report.max_rel_err < tol,
            "gradient check failed: {:?} (checked {})",
            report.worst,
            report.checked
        );
    }

    #[test]
    fn gradcheck_dense_with_bias() {
        gc(
            |g, params, rng| {
                params.insert("x", randt(rng, &[3, 4]));
                params.insert("w", randt(rng, &[5, 4]));
                params.insert("b", randt(rng, &[5]));
                let x = g.param("x", &[3, 4]).unwrap();
                let w = g.param("w", &[5, 4]).unwrap();
                let b = g.param("b", &[5]).unwrap();
                g.dense(x, w, Some(b)).unwrap()
            },
            101,
            1e-6,
        );
    }

    #[test]
    fn gradcheck_dense_tanh_micrograph() {
        gc(
            |g, params, rng| {
                params.insert("x", randt(rng, &[2, 3]));
                params.insert("w", randt(rng, &[4, 3]));
                let x = g.param("x", &[2, 3]).unwrap();
                let w = g.param("w", &[4, 3]).unwrap();
                let h = g.dense(x, w, None).unwrap();
                g.tanh(h)
            },
            102,
            1e-6,
        );
    }

    #[test]
    fn gradcheck_conv2d_stride2() {
        gc(
            |g, params, rng| {
                params.insert("x", randt(rng, &[2, 3, 6, 5]));
                params.insert("w", randt(rng, &[4, 3, 3, 3]));
                params.insert("b", randt(rng, &[4]));
                let x = g.param("x", &[2, 3, 6, 5]).unwrap();
                let w = g.param("w", &[4, 3, 3, 3]).unwrap();
                let b = g.param("b", &[4]).unwrap();
                g.conv2d(x, w, Some(b), 2, 1).unwrap()
            },
            103,
            1e-6,
        );
    }

    #[test]
    fn gradcheck_conv2d_stride1_no_bias() {
        gc(
            |g, params, rng| {
                params.insert("x", randt(rng, &[1, 2, 5, 5]));
                params.insert("w", randt(rng, &[3, 2, 3, 3]));
                let x = g.param("x", &[1, 2, 5, 5]).unwrap();
                let w = g.param("w", &[3, 2, 3, 3]).unwrap();
                g.conv2d(x, w, None, 1, 1).unwrap()
            },
            104,
            1e-6,
        );
    }

    fn bn_params(g: &mut Graph<f64>, params: &mut ParamStore<f64>, rng: &mut ChaCha20Rng, c: usize, tag: &str) -> (NodeId, NodeId, NodeId, NodeId) {
        params.insert(format!("{tag}.gamma"), randt_off_zero(rng, &[c]));
        params.insert(format!("{tag}.beta"), randt(rng, &[c]));
        params.insert(
            format!("{tag}.rmean"),
            randt(rng, &[c]).with_requires_grad(false),
        );
        params.insert(
            format!("{tag}.rvar"),
            Tensor::filled(&[c], 0.7).with_requires_grad(false),
        );
        (
            g.param(&format!("{tag}.gamma"), &[c]).unwrap(),
            g.param(&format!("{tag}.beta"), &[c]).unwrap(),
            g.param(&format!("{tag}.rmean"), &[c]).unwrap(),
            g.param(&format!("{tag}.rvar"), &[c]).unwrap(),
        )
    }

    #[test]
    fn gradcheck_batchnorm_train_batch4() {
        gc(
            |g, params, rng| {
                params.insert("x", randt(rng, &[4, 3]));
                let x = g.param("x", &[4, 3]).unwrap();
                let (ga, be, rm, rv) = bn_params(g, params, rng, 3, "bn");
                g.batch_norm(x, ga, be, rm, rv, 1e-5).unwrap()
            },
            105,
            1e-5,
        );
    }

    #[test]
    fn gradcheck_batchnorm_train_rank4() {
        gc(
            |g, params, rng| {
                params.insert("x", randt(rng, &[3, 2, 3, 3]));
                let x = g.param("x", &[3, 2, 3, 3]).unwrap();
                let (ga, be, rm, rv) = bn_params(g, params, rng, 2, "bn");
                g.batch_norm(x, ga, be, rm, rv, 1e-5).unwrap()
            },
            106,
            1e-5,
        );
    }

    #[test]
    fn gradcheck_upsample_gap_pipeline() {
        gc(
            |g, params, rng| {
                params.insert("x", randt(rng, &[2, 3, 3, 4]));
                let x = g.param("x", &[2, 3, 3, 4]).unwrap();
                let up = g.upsample(x, 7, 9).unwrap();
                let pooled = g.global_avg_pool(up).unwrap();
                g.sigmoid(pooled)
            },
            107,
            1e-6,
        );
    }

    #[test]
    fn gradcheck_mul_add_concat_slice() {
        gc(
            |g, params, rng| {
                params.insert("a", randt(rng, &[3, 4]));
                params.insert("b", randt(rng, &[3, 4]));
                let a = g.param("a", &[3, 4]).unwrap();
                let b = g.param("b", &[3, 4]).unwrap();
                let prod = g.mul(a, b).unwrap();
                let sum = g.add(a, b).unwrap();
                let cat = g.concat(&[prod, sum], 1).unwrap();
                g.slice(cat, 1, 2, 4).unwrap()
            },
            108,
            1e-6,
        );
    }

    #[test]
    fn gradcheck_squared_error_and_rowdist() {
        gc(
            |g, params, rng| {
                params.insert("a", randt(rng, &[4, 3]));
                params.insert("b", randt(rng, &[4, 3]));
                params.insert("s", randt(rng, &[4, 3]));
                let a = g.param("a", &[4, 3]).unwrap();
                let b = g.param("b", &[4, 3]).unwrap();
                let s = g.param("s", &[4, 3]).unwrap();
                let d = g.row_distance(a, s).unwrap();
                let d2 = g.row_distance(b, s).unwrap();
                let neg = g.scale(d2, -1.0).unwrap();
                let margin = g.offset(d, 0.3).unwrap();
                let hinge_arg = g.add(margin, neg).unwrap();
                let hinge = g.relu(hinge_arg);
                let cat2 = g.concat(&[hinge], 0).unwrap();
                let se = g.squared_error(a, b).unwrap();
                let sum1 = g.l1_norm(cat2);
                let scaled = g.scale(se, 0.25).unwrap();
                g.add(sum1, scaled).unwrap()
            },
            109,
            1e-6,
        );
    }

    #[test]
    fn gradcheck_relu_l1_off_kink() {
        gc(
            |g, params, rng| {
                params.insert("x", randt_off_zero(rng, &[17]));
                let x = g.param("x", &[17]).unwrap();
                let r = g.relu(x);
                let l = g.l1_norm(r);
                let l2 = g.l1_norm(x);
                let sum = g.add(l, l2).unwrap();
                // Keep the scalar small so the tanh the harness wraps the
                // output in stays well away from saturation.
                g.scale(sum, 0.01).unwrap()
            },
            110,
            1e-6,
        );
    }

    #[test]
    fn gradcheck_batchnorm_eval_mode_uses_running_stats() {
        let mut rng = ChaCha20Rng::seed_from_u64(111);
        let mut g: Graph<f64> = Graph::new();
        let mut params = ParamStore::new();
        params.insert("x", randt(&mut rng, &[4, 3]));
        let x = g.param("x", &[4, 3]).unwrap();
        let (ga, be, rm, rv) = bn_params(&mut g, &mut params, &mut rng, 3, "bn");
        let y = g.batch_norm(x, ga, be, rm, rv, 1e-5).unwrap();
        let t = g.tanh(y);
        let loss = g.l1_norm(t);
        let report = check_gradients(&g, &params, &[], Mode::Eval, loss, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-6, "worst: {:?}", report.worst);
    }

    #[test]
    fn batchnorm_eval_differs_from_train_and_stats_update() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut g: Graph<f64> = Graph::new();
        let mut params = ParamStore::new();
        params.insert("x", randt(&mut rng, &[4, 2]));
        let x = g.param("x", &[4, 2]).unwrap();
        params.insert("gamma", Tensor::filled(&[2], 1.0));
        params.insert("beta", Tensor::filled(&[2], 0.0));
        params.insert("rmean", Tensor::filled(&[2], 0.0).with_requires_grad(false));
        params.insert("rvar", Tensor::filled(&[2], 1.0).with_requires_grad(false));
        let ga = g.param("gamma", &[2]).unwrap();
        let be = g.param("beta", &[2]).unwrap();
        let rm = g.param("rmean", &[2]).unwrap();
        let rv = g.param("rvar", &[2]).unwrap();
        let y = g.batch_norm(x, ga, be, rm, rv, 1e-5).unwrap();

        let train = g.evaluate(&params, &[], Mode::Train).unwrap();
        let eval = g.evaluate(&params, &[], Mode::Eval).unwrap();
        assert_ne!(train.value(y), eval.value(y));

        // Fold the batch statistics in with new-weight 0.1: running mean
        // moves a tenth of the way toward the batch mean.
        let stats = train.batch_stats();
        assert_eq!(stats.len(), 1);
        let batch_mean = stats[0].mean.clone();
        update_running_stats(&mut params, stats, 0.1).unwrap();
        let rm_now = params.require("rmean").unwrap().data().to_vec();
        for (r, b) in rm_now.iter().zip(&batch_mean) {
            assert!((r - 0.1 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input("x", &[2, 3]).unwrap();
        let w = g.param("w", &[4, 5]).unwrap();
        let err = g.dense(x, w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dense") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn unknown_and_missing_inputs_are_errors() {
        let mut g: Graph<f64> = Graph::new();
        let _ = g.input("x", &[1]).unwrap();
        let params = ParamStore::new();
        let t = Tensor::from_f64_slice(&[1], &[1.0]).unwrap();
        assert!(g.evaluate(&params, &[("y", &t)], Mode::Eval).is_err());
        assert!(g.evaluate(&params, &[], Mode::Eval).is_err());
        assert!(g
            .evaluate(&params, &[("x", &t), ("x", &t)], Mode::Eval)
            .is_err());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param("x", &[2]).unwrap();
        let y = g.relu(x);
        let mut params = ParamStore::new();
        params.insert("x", Tensor::filled(&[2], 1.0).with_requires_grad(true));
        let eval = g.evaluate(&params, &[], Mode::Eval).unwrap();
        assert!(g.gradients(&eval, &params, y).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Concatenate-then-slice returns each operand bit-for-bit.
        #[test]
        fn concat_then_slice_recovers_operands(
            outer in 1usize..4,
            lens in proptest::collection::vec(1usize..5, 1..4),
            inner in 1usize..4,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut g: Graph<f64> = Graph::new();
            let mut tensors = Vec::new();
            let mut ids = Vec::new();
            for (i, &l) in lens.iter().enumerate() {
                let shape = [outer, l, inner];
                let t = randt(&mut rng, &shape).with_requires_grad(false);
                ids.push(g.input(&format!("t{i}"), &shape).unwrap());
                tensors.push(t);
            }
            let cat = g.concat(&ids, 1).unwrap();
            let mut start = 0;
            let mut slices = Vec::new();
            for &l in &lens {
                slices.push(g.slice(cat, 1, start, l).unwrap());
                start += l;
            }
            let feeds: Vec<(String, &Tensor<f64>)> = tensors
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("t{i}"), t))
                .collect();
            let feeds_ref: Vec<(&str, &Tensor<f64>)> =
                feeds.iter().map(|(n, t)| (n.as_str(), *t)).collect();
            let eval = g.evaluate(&ParamStore::new(), &feeds_ref, Mode::Eval).unwrap();
            for (s, t) in slices.iter().zip(&tensors) {
                prop_assert_eq!(eval.value(*s), t.data());
            }
        }

        /// Pointwise primitives pass randomized-shape finite-difference
        /// checks at the blanket 1e-4 tolerance.
        #[test]
        fn gradcheck_pointwise_random_shapes(
            n in 1usize..6,
            k in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut g: Graph<f64> = Graph::new();
            let mut params = ParamStore::new();
            params.insert("a", randt_off_zero(&mut rng, &[n, k]));
            params.insert("b", randt_off_zero(&mut rng, &[n, k]));
            let a = g.param("a", &[n, k]).unwrap();
            let b = g.param("b", &[n, k]).unwrap();
            let m = g.mul(a, b).unwrap();
            let s = g.sigmoid(m);
            let t = g.tanh(s);
            let r = g.relu(t);
            let sum = g.add(r, a).unwrap();
            let zeros = g.const_filled(&[n, k], 0.0);
            let loss = g.squared_error(sum, zeros).unwrap();
            let report = check_gradients(&g, &params, &[], Mode::Train, loss, 1e-5).unwrap();
            prop_assert!(report.max_rel_err < 1e-4, "worst: {:?}", report.worst);
        }
    }
}
