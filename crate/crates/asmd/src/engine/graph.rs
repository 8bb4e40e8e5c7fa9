//! Append-only op tape with eager forward evaluation.
//!
//! Each builder call validates shapes, computes the node's value immediately,
//! and returns a [`NodeId`]. `backward` then walks the tape once in reverse,
//! accumulating gradients for every ancestor of the loss and collecting
//! parameter gradients into a map keyed by (partition, index).

use std::collections::BTreeMap;

use super::kernels as k;
use super::store::ParamKey;
use super::tensor::Tensor;
use super::EngineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
pub enum Op {
    /// Leaf with no gradient tracking.
    Input,
    /// Leaf owned by a parameter store partition.
    Param(ParamKey),
    /// inputs: [x, w, b]
    Linear,
    /// inputs: [x, w, b]
    Conv2d { stride: usize },
    Relu,
    Add,
    GlobalAvgPool,
    Concat { axis: usize },
    Scale { factor: f64 },
    /// Identity forward; gradient multiplied by -strength on the way back.
    GradReverse { strength: f64 },
    SoftmaxCrossEntropy {
        classes: Vec<usize>,
        weights: Option<Vec<f64>>,
    },
    SigmoidCrossEntropy {
        targets: Vec<f64>,
        weights: Option<Vec<f64>>,
    },
    FrobeniusSqOfProduct { per_sample: bool },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Backward results: per-node gradients for ancestors of the loss, plus the
/// parameter gradient map used by SGD.
pub struct Gradients {
    node: Vec<Option<Tensor>>,
    params: BTreeMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.node.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &BTreeMap<ParamKey, Tensor> {
        &self.params
    }

    pub fn param(&self, partition: &str, index: usize) -> Option<&Tensor> {
        self.params.get(&ParamKey::new(partition, index))
    }

    pub fn into_params(self) -> BTreeMap<ParamKey, Tensor> {
        self.params
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Smallest |pre-activation| over all relu nodes. Finite differences are
    /// only trustworthy when this is comfortably larger than the probe
    /// epsilon; near a kink the two-sided estimate straddles the
    /// non-differentiable point and legitimately disagrees with the
    /// subgradient.
    pub fn relu_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for n in &self.nodes {
            if matches!(n.op, Op::Relu) {
                for v in self.nodes[n.inputs[0].0].value.iter() {
                    margin = margin.min(v.abs());
                }
            }
        }
        margin
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    // ------------------------------------------------------------ leaves --

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, vec![], value)
    }

    pub fn param(&mut self, partition: &str, index: usize, value: Tensor) -> NodeId {
        self.push(Op::Param(ParamKey::new(partition, index)), vec![], value)
    }

    // --------------------------------------------------------------- ops --

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let value = k::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Linear, vec![x, w, b], value))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    ) -> Result<NodeId, EngineError> {
        let value = k::conv2d(self.value(x), self.value(w), self.value(b), stride)?;
        Ok(self.push(Op::Conv2d { stride }, vec![x, w, b], value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = k::relu(self.value(x));
        self.push(Op::Relu, vec![x], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let value = k::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        let value = k::global_avg_pool(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool, vec![x], value))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, EngineError> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&id| self.value(id)).collect();
        let value = k::concat(&tensors, axis)?;
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), value))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = k::scale(self.value(x), factor);
        self.push(Op::Scale { factor }, vec![x], value)
    }

    /// strength must be non-negative; 0 blocks the gradient entirely.
    pub fn grad_reverse(&mut self, x: NodeId, strength: f64) -> Result<NodeId, EngineError> {
        if !(strength >= 0.0) {
            return Err(EngineError::BadArgument {
                op: "grad_reverse",
                msg: format!("strength must be >= 0, got {strength}"),
            });
        }
        let value = self.value(x).clone();
        Ok(self.push(Op::GradReverse { strength }, vec![x], value))
    }

    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        classes: Vec<usize>,
        weights: Option<Vec<f64>>,
    ) -> Result<NodeId, EngineError> {
        let loss = k::softmax_cross_entropy(self.value(logits), &classes, weights.as_deref())?;
        Ok(self.push(
            Op::SoftmaxCrossEntropy { classes, weights },
            vec![logits],
            Tensor::scalar(loss),
        ))
    }

    pub fn sigmoid_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Vec<f64>,
        weights: Option<Vec<f64>>,
    ) -> Result<NodeId, EngineError> {
        let loss = k::sigmoid_cross_entropy(self.value(logits), &targets, weights.as_deref())?;
        Ok(self.push(
            Op::SigmoidCrossEntropy { targets, weights },
            vec![logits],
            Tensor::scalar(loss),
        ))
    }

    pub fn frobenius_sq_of_product(
        &mut self,
        fs: NodeId,
        fk: NodeId,
        per_sample: bool,
    ) -> Result<NodeId, EngineError> {
        let loss = k::frobenius_sq_of_product(self.value(fs), self.value(fk), per_sample)?;
        Ok(self.push(
            Op::FrobeniusSqOfProduct { per_sample },
            vec![fs, fk],
            Tensor::scalar(loss),
        ))
    }

    // ---------------------------------------------------------- backward --

    /// Reverse-mode sweep from a scalar loss node. Nodes that are not
    /// ancestors of the loss are skipped entirely.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, EngineError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(EngineError::NonScalarLoss(lv.shape().to_vec()));
        }

        // Mark ancestors of the loss.
        let mut live = vec![false; self.nodes.len()];
        let mut stack = vec![loss.0];
        live[loss.0] = true;
        while let Some(i) = stack.pop() {
            for inp in &self.nodes[i].inputs {
                if !live[inp.0] {
                    live[inp.0] = true;
                    stack.push(inp.0);
                }
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]).unwrap());

        for i in (0..=loss.0).rev() {
            if !live[i] {
                continue;
            }
            let Some(dy) = grads[i].clone() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Linear => {
                    let (x, w) = (node.inputs[0], node.inputs[1]);
                    let (dx, dw, db) = k::linear_backward(self.value(x), self.value(w), &dy);
                    self.accumulate(&mut grads, node.inputs[0], dx);
                    self.accumulate(&mut grads, node.inputs[1], dw);
                    self.accumulate(&mut grads, node.inputs[2], db);
                }
                Op::Conv2d { stride } => {
                    let (x, w) = (node.inputs[0], node.inputs[1]);
                    let (dx, dw, db) =
                        k::conv2d_backward(self.value(x), self.value(w), &dy, *stride);
                    self.accumulate(&mut grads, node.inputs[0], dx);
                    self.accumulate(&mut grads, node.inputs[1], dw);
                    self.accumulate(&mut grads, node.inputs[2], db);
                }
                Op::Relu => {
                    let dx = k::relu_backward(self.value(node.inputs[0]), &dy);
                    self.accumulate(&mut grads, node.inputs[0], dx);
                }
                Op::Add => {
                    self.accumulate(&mut grads, node.inputs[0], dy.clone());
                    self.accumulate(&mut grads, node.inputs[1], dy);
                }
                Op::GlobalAvgPool => {
                    let xs = self.value(node.inputs[0]).shape().to_vec();
                    let dx = k::global_avg_pool_backward(&xs, &dy);
                    self.accumulate(&mut grads, node.inputs[0], dx);
                }
                Op::Concat { axis } => {
                    let shapes: Vec<&[usize]> =
                        node.inputs.iter().map(|&id| self.value(id).shape()).collect();
                    let parts = k::concat_backward(&shapes, *axis, &dy);
                    for (inp, part) in node.inputs.iter().zip(parts) {
                        self.accumulate(&mut grads, *inp, part);
                    }
                }
                Op::Scale { factor } => {
                    let dx = k::scale(&dy, *factor);
                    self.accumulate(&mut grads, node.inputs[0], dx);
                }
                Op::GradReverse { strength } => {
                    let dx = k::scale(&dy, -strength);
                    self.accumulate(&mut grads, node.inputs[0], dx);
                }
                Op::SoftmaxCrossEntropy { classes, weights } => {
                    let dx = k::softmax_cross_entropy_backward(
                        self.value(node.inputs[0]),
                        classes,
                        weights.as_deref(),
                        dy.item(),
                    );
                    self.accumulate(&mut grads, node.inputs[0], dx);
                }
                Op::SigmoidCrossEntropy { targets, weights } => {
                    let dx = k::sigmoid_cross_entropy_backward(
                        self.value(node.inputs[0]),
                        targets,
                        weights.as_deref(),
                        dy.item(),
                    );
                    self.accumulate(&mut grads, node.inputs[0], dx);
                }
                Op::FrobeniusSqOfProduct { per_sample } => {
                    let (dfs, dfk) = k::frobenius_sq_of_product_backward(
                        self.value(node.inputs[0]),
                        self.value(node.inputs[1]),
                        *per_sample,
                        dy.item(),
                    );
                    self.accumulate(&mut grads, node.inputs[0], dfs);
                    self.accumulate(&mut grads, node.inputs[1], dfk);
                }
            }
        }

        // Collect parameter gradients. A parameter registered through several
        // leaves accumulates across all of them.
        let mut params: BTreeMap<ParamKey, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(key) = &node.op {
                if let Some(g) = &grads[i] {
                    match params.get_mut(key) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.iter()) {
                                *a += b;
                            }
                        }
                        None => {
                            params.insert(key.clone(), g.clone());
                        }
                    }
                }
            }
        }

        Ok(Gradients {
            node: grads,
            params,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        match &mut grads[id.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                for (a, b) in acc.data_mut().iter_mut().zip(g.iter()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}
