//! Define-then-run computation graph with reverse-mode adjoints.
//!
//! Nodes are appended in topological order by construction, so the forward
//! pass is a single sweep and the backward pass is the reverse sweep.

use super::matrix::{DenseMatrix, Matrix};
use super::params::ParameterVector;
use super::scalar::Scalar;
use super::GraphError;

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum OpKind {
    /// Leaf bound at forward time.
    Input,
    /// Leaf holding a trainable matrix.
    Parameter,
    /// Leaf that never receives an adjoint.
    Constant,
    /// `x·W + b` with `x: n×in`, `W: in×out`, `b: 1×out`.
    Affine,
    Relu,
    /// Row-wise log-softmax.
    LogSoftmax,
    /// Mean of every entry, giving a 1×1 result.
    Mean,
    Scale(f64),
    Add,
    Sub,
    /// Identity forward; the adjoint is multiplied by `-lambda` on the way back.
    NegateGradient(f64),
    /// Picks column `labels[r]` from each row `r`, giving an n×1 result.
    Gather(Vec<usize>),
    /// Elementwise product with a constant mask (dropout).
    Mask(DenseMatrix),
    Abs,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Parameter => "parameter",
            OpKind::Constant => "constant",
            OpKind::Affine => "affine",
            OpKind::Relu => "relu",
            OpKind::LogSoftmax => "log-softmax",
            OpKind::Mean => "mean",
            OpKind::Scale(_) => "scale",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::NegateGradient(_) => "negate-gradient",
            OpKind::Gather(_) => "gather",
            OpKind::Mask(_) => "mask",
            OpKind::Abs => "abs",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ComputeNode<S> {
    pub op: OpKind,
    pub inputs: Vec<NodeId>,
    leaf: Option<Matrix<S>>,
    value: Option<Matrix<S>>,
    adjoint: Option<Matrix<S>>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<ComputeNode<S>>,
    parameters: Vec<NodeId>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), parameters: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &ComputeNode<S> {
        &self.nodes[id.0]
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, leaf: Option<Matrix<S>>) -> NodeId {
        let requires_grad = match op {
            OpKind::Input | OpKind::Parameter => true,
            OpKind::Constant => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(ComputeNode { op, inputs, leaf, value: None, adjoint: None, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self) -> NodeId {
        self.push(OpKind::Input, vec![], None)
    }

    pub fn parameter(&mut self, value: Matrix<S>) -> NodeId {
        let id = self.push(OpKind::Parameter, vec![], Some(value));
        self.parameters.push(id);
        id
    }

    pub fn constant(&mut self, value: Matrix<S>) -> NodeId {
        self.push(OpKind::Constant, vec![], Some(value))
    }

    /// Parameter nodes in registration order.
    pub fn parameters(&self) -> &[NodeId] {
        &self.parameters
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Affine, vec![x, w, b], None)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Relu, vec![x], None)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::LogSoftmax, vec![x], None)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Mean, vec![x], None)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(OpKind::Scale(c), vec![x], None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Add, vec![a, b], None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Sub, vec![a, b], None)
    }

    pub fn negate_gradient(&mut self, x: NodeId, lambda: f64) -> NodeId {
        self.push(OpKind::NegateGradient(lambda), vec![x], None)
    }

    pub fn gather(&mut self, x: NodeId, labels: Vec<usize>) -> NodeId {
        self.push(OpKind::Gather(labels), vec![x], None)
    }

    pub fn mask(&mut self, x: NodeId, mask: DenseMatrix) -> NodeId {
        self.push(OpKind::Mask(mask), vec![x], None)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Abs, vec![x], None)
    }

    /// Mean negative log-likelihood of `labels` under row log-probabilities.
    pub fn nll(&mut self, log_probs: NodeId, labels: Vec<usize>) -> NodeId {
        let picked = self.gather(log_probs, labels);
        let m = self.mean(picked);
        self.scale(m, -1.0)
    }

    /// Weighted sum of scalar nodes; terms with a zero weight are skipped.
    /// Returns `None` when every weight is zero.
    pub fn weighted_sum(&mut self, terms: &[(f64, NodeId)]) -> Option<NodeId> {
        let mut acc: Option<NodeId> = None;
        for &(w, id) in terms {
            if w == 0.0 {
                continue;
            }
            let t = if w == 1.0 { id } else { self.scale(id, w) };
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t),
            });
        }
        acc
    }

    pub fn value(&self, id: NodeId) -> Option<&Matrix<S>> {
        self.nodes[id.0].value.as_ref()
    }

    pub fn adjoint(&self, id: NodeId) -> Option<&Matrix<S>> {
        self.nodes[id.0].adjoint.as_ref()
    }

    /// Adjoint of `id`, or zeros of its forward shape when it was not reached.
    pub fn adjoint_or_zero(&self, id: NodeId) -> Result<Matrix<S>, GraphError> {
        let node = &self.nodes[id.0];
        match (&node.adjoint, &node.value) {
            (Some(a), _) => Ok(a.clone()),
            (None, Some(v)) => Ok(Matrix::zeros(v.rows(), v.cols())),
            (None, None) => Err(GraphError::BackwardBeforeForward),
        }
    }

    /// Binds inputs, evaluates every node, and returns the value of the last one.
    pub fn forward(&mut self, bindings: &[(NodeId, Matrix<S>)]) -> Result<Matrix<S>, GraphError> {
        if self.nodes.is_empty() {
            return Err(GraphError::Layout("empty graph".into()));
        }
        for node in &mut self.nodes {
            node.value = None;
            node.adjoint = None;
        }
        for (id, m) in bindings {
            let node = self.nodes.get_mut(id.0).ok_or(GraphError::UnknownNode(id.0))?;
            if !matches!(node.op, OpKind::Input) {
                return Err(GraphError::shape(id.0, node.op.name(), "only input nodes can be bound"));
            }
            node.value = Some(m.clone());
        }
        for i in 0..self.nodes.len() {
            if self.nodes[i].value.is_some() {
                continue;
            }
            let v = self.eval_node(i)?;
            self.nodes[i].value = Some(v);
        }
        Ok(self.nodes.last().and_then(|n| n.value.clone()).expect("evaluated above"))
    }

    fn input_value(&self, i: usize, k: usize) -> &Matrix<S> {
        let src = self.nodes[i].inputs[k].0;
        self.nodes[src].value.as_ref().expect("inputs precede their consumers")
    }

    fn eval_node(&self, i: usize) -> Result<Matrix<S>, GraphError> {
        let node = &self.nodes[i];
        let name = node.op.name();
        Ok(match &node.op {
            OpKind::Input => return Err(GraphError::UnboundInput(i)),
            OpKind::Parameter | OpKind::Constant => node.leaf.clone().expect("leaf value"),
            OpKind::Affine => {
                let (x, w, b) = (self.input_value(i, 0), self.input_value(i, 1), self.input_value(i, 2));
                if x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols() {
                    return Err(GraphError::shape(i, name, format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape())));
                }
                let mut out = x.matmul(w);
                let cols = out.cols();
                for r in 0..out.rows() {
                    for c in 0..cols {
                        let v = out.get(r, c) + b.get(0, c);
                        out.set(r, c, v);
                    }
                }
                out
            }
            OpKind::Relu => self.input_value(i, 0).map(|v| if v.re() > 0.0 { v } else { S::zero() }),
            OpKind::LogSoftmax => {
                let x = self.input_value(i, 0);
                if x.cols() == 0 {
                    return Err(GraphError::shape(i, name, "zero-width input"));
                }
                let mut out = x.clone();
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let mut mx = row[0];
                    for &v in &row[1..] {
                        if v.re() > mx.re() {
                            mx = v;
                        }
                    }
                    let mut s = S::zero();
                    for &v in row {
                        s += (v - mx).exp();
                    }
                    let lse = mx + s.ln();
                    for c in 0..x.cols() {
                        out.set(r, c, row[c] - lse);
                    }
                }
                out
            }
            OpKind::Mean => {
                let x = self.input_value(i, 0);
                let n = x.values().len();
                if n == 0 {
                    return Err(GraphError::shape(i, name, "mean of an empty matrix"));
                }
                let mut s = S::zero();
                for &v in x.values() {
                    s += v;
                }
                Matrix::filled(1, 1, s.scale(1.0 / n as f64))
            }
            OpKind::Scale(c) => self.input_value(i, 0).map(|v| v.scale(*c)),
            OpKind::Add | OpKind::Sub => {
                let (a, b) = (self.input_value(i, 0), self.input_value(i, 1));
                if a.shape() != b.shape() {
                    return Err(GraphError::shape(i, name, format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                let vals = a
                    .values()
                    .iter()
                    .zip(b.values())
                    .map(|(&x, &y)| if matches!(node.op, OpKind::Add) { x + y } else { x - y })
                    .collect();
                Matrix::new(a.rows(), a.cols(), vals)?
            }
            OpKind::NegateGradient(_) => self.input_value(i, 0).clone(),
            OpKind::Gather(labels) => {
                let x = self.input_value(i, 0);
                if labels.len() != x.rows() {
                    return Err(GraphError::shape(i, name, format!("{} labels for {} rows", labels.len(), x.rows())));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= x.cols()) {
                    return Err(GraphError::shape(i, name, format!("label {bad} out of {} classes", x.cols())));
                }
                let vals = labels.iter().enumerate().map(|(r, &l)| x.get(r, l)).collect();
                Matrix::new(x.rows(), 1, vals)?
            }
            OpKind::Mask(m) => {
                let x = self.input_value(i, 0);
                if x.shape() != m.shape() {
                    return Err(GraphError::shape(i, name, format!("{:?} vs mask {:?}", x.shape(), m.shape())));
                }
                let vals = x.values().iter().zip(m.values()).map(|(&v, &k)| v.scale(k)).collect();
                Matrix::new(x.rows(), x.cols(), vals)?
            }
            OpKind::Abs => self.input_value(i, 0).map(|v| if v.re() < 0.0 { -v } else { v }),
        })
    }

    /// Propagates `seed` (shaped like `output`) back through the graph.
    pub fn backward(&mut self, output: NodeId, seed: &Matrix<S>) -> Result<(), GraphError> {
        let out_shape = self.nodes[output.0].value.as_ref().ok_or(GraphError::BackwardBeforeForward)?.shape();
        if seed.shape() != out_shape {
            return Err(GraphError::shape(output.0, "seed", format!("seed {:?} for output {:?}", seed.shape(), out_shape)));
        }
        for node in &mut self.nodes {
            node.adjoint = None;
        }
        self.nodes[output.0].adjoint = Some(seed.clone());
        for i in (0..=output.0).rev() {
            let Some(adj) = self.nodes[i].adjoint.take() else { continue };
            if !self.nodes[i].requires_grad {
                self.nodes[i].adjoint = Some(adj);
                continue;
            }
            let contributions = self.local_vjp(i, &adj);
            self.nodes[i].adjoint = Some(adj);
            for (src, g) in contributions {
                if !self.nodes[src.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[src.0].adjoint {
                    Some(a) => a.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_vjp(&self, i: usize, adj: &Matrix<S>) -> Vec<(NodeId, Matrix<S>)> {
        let node = &self.nodes[i];
        let inp = |k: usize| node.inputs[k];
        match &node.op {
            OpKind::Input | OpKind::Parameter | OpKind::Constant => vec![],
            OpKind::Affine => {
                let (x, w) = (self.input_value(i, 0), self.input_value(i, 1));
                let mut out = Vec::with_capacity(3);
                if self.nodes[inp(0).0].requires_grad {
                    out.push((inp(0), adj.matmul_t(w)));
                }
                if self.nodes[inp(1).0].requires_grad {
                    out.push((inp(1), x.t_matmul(adj)));
                }
                if self.nodes[inp(2).0].requires_grad {
                    let mut db = Matrix::zeros(1, adj.cols());
                    for r in 0..adj.rows() {
                        for c in 0..adj.cols() {
                            let v = db.get(0, c) + adj.get(r, c);
                            db.set(0, c, v);
                        }
                    }
                    out.push((inp(2), db));
                }
                out
            }
            OpKind::Relu => {
                let x = self.input_value(i, 0);
                let vals = x.values().iter().zip(adj.values()).map(|(&v, &a)| if v.re() > 0.0 { a } else { S::zero() }).collect();
                vec![(inp(0), Matrix::new(x.rows(), x.cols(), vals).expect("same shape"))]
            }
            OpKind::LogSoftmax => {
                let y = node.value.as_ref().expect("forward ran");
                let mut g = adj.clone();
                for r in 0..y.rows() {
                    let mut s = S::zero();
                    for &a in adj.row(r) {
                        s += a;
                    }
                    for c in 0..y.cols() {
                        let v = adj.get(r, c) - y.get(r, c).exp() * s;
                        g.set(r, c, v);
                    }
                }
                vec![(inp(0), g)]
            }
            OpKind::Mean => {
                let x = self.input_value(i, 0);
                let n = x.values().len() as f64;
                vec![(inp(0), Matrix::filled(x.rows(), x.cols(), adj.get(0, 0).scale(1.0 / n)))]
            }
            OpKind::Scale(c) => vec![(inp(0), adj.map(|a| a.scale(*c)))],
            OpKind::Add => vec![(inp(0), adj.clone()), (inp(1), adj.clone())],
            OpKind::Sub => vec![(inp(0), adj.clone()), (inp(1), adj.map(|a| -a))],
            OpKind::NegateGradient(lambda) => vec![(inp(0), adj.map(|a| a.scale(-lambda)))],
            OpKind::Gather(labels) => {
                let x = self.input_value(i, 0);
                let mut g = Matrix::zeros(x.rows(), x.cols());
                for (r, &l) in labels.iter().enumerate() {
                    g.set(r, l, adj.get(r, 0));
                }
                vec![(inp(0), g)]
            }
            OpKind::Mask(m) => {
                let vals = adj.values().iter().zip(m.values()).map(|(&a, &k)| a.scale(k)).collect();
                vec![(inp(0), Matrix::new(adj.rows(), adj.cols(), vals).expect("same shape"))]
            }
            OpKind::Abs => {
                let x = self.input_value(i, 0);
                let vals = x
                    .values()
                    .iter()
                    .zip(adj.values())
                    .map(|(&v, &a)| {
                        if v.re() > 0.0 {
                            a
                        } else if v.re() < 0.0 {
                            -a
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                vec![(inp(0), Matrix::new(x.rows(), x.cols(), vals).expect("same shape"))]
            }
        }
    }

    /// Adjoints of `ids`, zero-filled for nodes the backward pass did not reach.
    pub fn gradients(&self, ids: &[NodeId]) -> Result<Vec<Matrix<S>>, GraphError> {
        ids.iter().map(|&id| self.adjoint_or_zero(id)).collect()
    }
}

impl Graph<f64> {
    /// Gradient of the seeded output with respect to every parameter node,
    /// flattened in registration order.
    pub fn backward_params(&mut self, output: NodeId, seed: &DenseMatrix) -> Result<ParameterVector, GraphError> {
        self.backward(output, seed)?;
        let params = self.parameters.clone();
        Ok(ParameterVector::flatten(&self.gradients(&params)?))
    }

    /// Flattened adjoints of a chosen parameter block.
    pub fn block_gradient(&self, ids: &[NodeId]) -> Result<ParameterVector, GraphError> {
        Ok(ParameterVector::flatten(&self.gradients(ids)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> DenseMatrix {
        DenseMatrix::row_vector(v.to_vec())
    }

    #[test]
    fn identity_affine() {
        let mut g = Graph::new();
        let x = g.input();
        let w = g.parameter(DenseMatrix::identity(2));
        let b = g.parameter(DenseMatrix::zeros(1, 2));
        g.affine(x, w, b);
        assert_eq!(g.forward(&[(x, row(&[2.0, 3.0]))]).unwrap(), row(&[2.0, 3.0]));
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.input();
        g.relu(x);
        assert_eq!(g.forward(&[(x, row(&[-1.0, 2.0]))]).unwrap(), row(&[0.0, 2.0]));
    }

    #[test]
    fn log_softmax_of_zeros() {
        let mut g = Graph::new();
        let x = g.input();
        g.log_softmax(x);
        let out = g.forward(&[(x, row(&[0.0, 0.0]))]).unwrap();
        for &v in out.values() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_relu_gradient() {
        let mut g = Graph::new();
        let x = g.input();
        let r = g.relu(x);
        let m = g.mean(r);
        g.forward(&[(x, row(&[-1.0, 2.0]))]).unwrap();
        g.backward(m, &DenseMatrix::filled(1, 1, 1.0)).unwrap();
        assert_eq!(g.adjoint(x).unwrap(), &row(&[0.0, 0.5]));
    }

    #[test]
    fn negate_gradient_flips_adjoint_and_keeps_forward() {
        let build = |reverse: bool| {
            let mut g = Graph::new();
            let x = g.input();
            let w = g.parameter(DenseMatrix::new(2, 1, vec![0.3, -1.2]).unwrap());
            let b = g.parameter(DenseMatrix::zeros(1, 1));
            let h = g.affine(x, w, b);
            let h = if reverse { g.negate_gradient(h, 1.0) } else { h };
            let m = g.mean(h);
            let out = g.forward(&[(x, row(&[1.5, 0.25]))]).unwrap();
            let grad = g.backward_params(m, &DenseMatrix::filled(1, 1, 1.0)).unwrap();
            (out, grad)
        };
        let (plain_out, plain) = build(false);
        let (rev_out, rev) = build(true);
        assert_eq!(plain_out.values()[0].to_bits(), rev_out.values()[0].to_bits());
        for (a, b) in plain.values().iter().zip(rev.values()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input();
        let m = g.mean(x);
        assert!(matches!(g.backward(m, &DenseMatrix::filled(1, 1, 1.0)), Err(GraphError::BackwardBeforeForward)));
    }

    #[test]
    fn shape_error_names_the_node() {
        let mut g = Graph::new();
        let x = g.input();
        let w = g.parameter(DenseMatrix::zeros(3, 2));
        let b = g.parameter(DenseMatrix::zeros(1, 2));
        let a = g.affine(x, w, b);
        match g.forward(&[(x, row(&[1.0, 2.0]))]) {
            Err(GraphError::Shape { node, op, .. }) => {
                assert_eq!(node, a.index());
                assert_eq!(op, "affine");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn unbound_input_is_reported() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input();
        g.relu(x);
        assert!(matches!(g.forward(&[]), Err(GraphError::UnboundInput(0))));
    }
}
