use smallvec::SmallVec;

use super::{AdError, Op, Tensor};

/// A computation builder. Model code is written once against this trait and
/// run either eagerly ([`Eager`]) or recorded for differentiation ([`Tape`]).
pub trait Graph {
    type Node: Clone;

    fn constant(&mut self, value: Tensor) -> Self::Node;

    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Tensor;

    fn try_apply(&mut self, op: Op, inputs: &[&Self::Node]) -> Result<Self::Node, AdError>;

    /// Applies `op`, panicking on shape errors. Shapes in model code are
    /// fixed by construction, so a mismatch is a bug.
    fn apply(&mut self, op: Op, inputs: &[&Self::Node]) -> Self::Node {
        match self.try_apply(op, inputs) {
            Ok(n) => n,
            Err(e) => panic!("{e}"),
        }
    }

    /// Applies a parameter-free primitive looked up by name.
    fn apply_named(&mut self, name: &str, inputs: &[&Self::Node]) -> Result<Self::Node, AdError> {
        let op = Op::from_name(name)?;
        self.try_apply(op, inputs)
    }

    fn scalar(&mut self, x: f64) -> Self::Node {
        self.constant(Tensor::scalar(x))
    }

    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Self::Node {
        self.apply(Op::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::Node, b: &Self::Node) -> Self::Node {
        self.apply(Op::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::Node, b: &Self::Node) -> Self::Node {
        self.apply(Op::Mul, &[a, b])
    }
    fn div(&mut self, a: &Self::Node, b: &Self::Node) -> Self::Node {
        self.apply(Op::Div, &[a, b])
    }
    fn neg(&mut self, a: &Self::Node) -> Self::Node {
        self.apply(Op::Neg, &[a])
    }
    fn scale(&mut self, a: &Self::Node, c: f64) -> Self::Node {
        self.apply(Op::Scale(c), &[a])
    }
    fn offset(&mut self, a: &Self::Node, c: f64) -> Self::Node {
        self.apply(Op::Offset(c), &[a])
    }
    /// `a + c * b`
    fn axpy(&mut self, a: &Self::Node, c: f64, b: &Self::Node) -> Self::Node {
        self.apply(Op::Axpy(c), &[a, b])
    }
    fn matmul(&mut self, a: &Self::Node, b: &Self::Node) -> Self::Node {
        self.apply(Op::MatMul, &[a, b])
    }
    fn transpose(&mut self, a: &Self::Node) -> Self::Node {
        self.apply(Op::Transpose, &[a])
    }
    fn tanh(&mut self, a: &Self::Node) -> Self::Node {
        self.apply(Op::Tanh, &[a])
    }
    fn exp(&mut self, a: &Self::Node) -> Self::Node {
        self.apply(Op::Exp, &[a])
    }
    fn sin(&mut self, a: &Self::Node) -> Self::Node {
        self.apply(Op::Sin, &[a])
    }
    fn cos(&mut self, a: &Self::Node) -> Self::Node {
        self.apply(Op::Cos, &[a])
    }
    fn abs(&mut self, a: &Self::Node) -> Self::Node {
        self.apply(Op::Abs, &[a])
    }
    fn powf(&mut self, a: &Self::Node, p: f64) -> Self::Node {
        self.apply(Op::Powf(p), &[a])
    }
    fn sum(&mut self, a: &Self::Node) -> Self::Node {
        self.apply(Op::Sum, &[a])
    }
    fn reshape(&mut self, a: &Self::Node, shape: &[usize]) -> Self::Node {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }
    fn slice(&mut self, a: &Self::Node, start: usize, len: usize) -> Self::Node {
        self.apply(Op::Slice { start, len }, &[a])
    }
    fn slice_cols(&mut self, a: &Self::Node, start: usize, len: usize) -> Self::Node {
        self.apply(Op::SliceCols { start, len }, &[a])
    }
    fn concat(&mut self, parts: &[&Self::Node]) -> Self::Node {
        self.apply(Op::Concat, parts)
    }
    fn concat_cols(&mut self, parts: &[&Self::Node]) -> Self::Node {
        self.apply(Op::ConcatCols, parts)
    }
    fn add_row(&mut self, a: &Self::Node, row: &Self::Node) -> Self::Node {
        self.apply(Op::AddRow, &[a, row])
    }
    fn mul_row(&mut self, a: &Self::Node, row: &Self::Node) -> Self::Node {
        self.apply(Op::MulRow, &[a, row])
    }
    fn solve(&mut self, a: &Self::Node, b: &Self::Node) -> Self::Node {
        self.apply(Op::Solve, &[a, b])
    }
    /// Sum of squares.
    fn sum_sq(&mut self, a: &Self::Node) -> Self::Node {
        self.apply(Op::SumSq, &[a])
    }
    /// `R(φ) v`, or `R(φ)ᵀ v` when `transpose`.
    fn rotate(&mut self, phi: &Self::Node, v: &Self::Node, transpose: bool) -> Self::Node {
        self.apply(Op::Rotate { transpose }, &[phi, v])
    }
    fn outer(&mut self, a: &Self::Node, b: &Self::Node) -> Self::Node {
        self.apply(Op::Outer, &[a, b])
    }
    /// `W x + b`
    fn affine(&mut self, w: &Self::Node, x: &Self::Node, b: &Self::Node) -> Self::Node {
        self.apply(Op::Affine, &[w, x, b])
    }
}

/// Immediate evaluation; nodes are plain tensors.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Graph for Eager {
    type Node = Tensor;

    fn constant(&mut self, value: Tensor) -> Tensor {
        value
    }

    fn value<'a>(&'a self, node: &'a Tensor) -> &'a Tensor {
        node
    }

    fn try_apply(&mut self, op: Op, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        op.forward(inputs)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum NodeKind {
    Input,
    Constant,
    Op { op: Op, args: SmallVec<[usize; 3]> },
}

#[derive(Clone, Debug)]
struct Node {
    kind: NodeKind,
    value: Tensor,
    requires_grad: bool,
}

/// Reverse-mode recording. Nodes are appended in evaluation order, so the
/// node list is always topologically sorted.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: Vec<Var>,
    outputs: Vec<Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Registers a differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        let v = self.push(NodeKind::Input, value, true);
        self.inputs.push(v);
        v
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[Var] {
        &self.outputs
    }

    pub fn set_outputs(&mut self, outputs: Vec<Var>) {
        self.outputs = outputs;
    }

    fn push(&mut self, kind: NodeKind, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            kind,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Vector-Jacobian product of `output` with cotangent `seed`, returned for
    /// each node in `wrt`. Nodes not reached by the output get zeros.
    pub fn gradient(&self, output: Var, seed: &Tensor, wrt: &[Var]) -> Result<Vec<Tensor>, AdError> {
        self.gradient_many(&[(output, seed.clone())], wrt)
    }

    pub fn gradient_many(&self, seeds: &[(Var, Tensor)], wrt: &[Var]) -> Result<Vec<Tensor>, AdError> {
        let Some(last) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Ok(wrt
                .iter()
                .map(|v| Tensor::zeros(self.nodes[v.0].value.shape()))
                .collect());
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; last + 1];
        for (v, seed) in seeds {
            let node = &self.nodes[v.0];
            if seed.shape() != node.value.shape() {
                return Err(AdError::Shape(format!(
                    "seed shape {:?} does not match output shape {:?}",
                    seed.shape(),
                    node.value.shape()
                )));
            }
            accumulate(&mut grads[v.0], seed.clone());
        }
        let mut keep = vec![false; last + 1];
        for v in wrt {
            if v.0 <= last {
                keep[v.0] = true;
            }
        }
        let mut needs = Vec::new();
        let mut values: Vec<&Tensor> = Vec::new();
        for i in (0..=last).rev() {
            let node = &self.nodes[i];
            let NodeKind::Op { op, args } = &node.kind else {
                continue;
            };
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let g = if keep[i] { grads[i].clone() } else { grads[i].take() };
            let Some(g) = g else { continue };
            if !g.is_finite() {
                return Err(AdError::NonFiniteGradient { node: i, op: op.name() });
            }
            values.clear();
            values.extend(args.iter().map(|&a| &self.nodes[a].value));
            needs.clear();
            needs.extend(args.iter().map(|&a| self.nodes[a].requires_grad));
            let input_grads = op.backward(&values, &node.value, &g, &needs)?;
            for (&a, ga) in args.iter().zip(input_grads) {
                if let Some(ga) = ga {
                    accumulate(&mut grads[a], ga);
                }
            }
        }
        wrt.iter()
            .map(|v| {
                let g = if v.0 <= last { grads[v.0].clone() } else { None };
                let g = g.unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                if g.is_finite() {
                    Ok(g)
                } else {
                    Err(AdError::NonFiniteGradient { node: v.0, op: "leaf" })
                }
            })
            .collect()
    }

    /// Cotangents of the recorded inputs for one seed per recorded output.
    pub fn vjp(&self, seeds: &[Tensor]) -> Result<Vec<Tensor>, AdError> {
        if seeds.len() != self.outputs.len() {
            return Err(AdError::Shape(format!(
                "{} seeds for {} outputs",
                seeds.len(),
                self.outputs.len()
            )));
        }
        let pairs: Vec<(Var, Tensor)> = self.outputs.iter().copied().zip(seeds.iter().cloned()).collect();
        self.gradient_many(&pairs, &self.inputs)
    }

    /// Re-evaluates every recorded operation from new input values (in the
    /// order they were registered) and returns the recorded outputs.
    pub fn replay(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>, AdError> {
        if inputs.len() != self.inputs.len() {
            return Err(AdError::Shape(format!(
                "replay expects {} inputs, got {}",
                self.inputs.len(),
                inputs.len()
            )));
        }
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut next_input = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.kind {
                NodeKind::Input => {
                    let t = inputs[next_input].clone();
                    next_input += 1;
                    if t.shape() != node.value.shape() {
                        return Err(AdError::Shape(format!(
                            "replay input {} has shape {:?}, recorded {:?}",
                            next_input - 1,
                            t.shape(),
                            node.value.shape()
                        )));
                    }
                    t
                }
                NodeKind::Constant => node.value.clone(),
                NodeKind::Op { op, args } => {
                    let vals: Vec<&Tensor> = args
                        .iter()
                        .map(|&a| values[a].as_ref().expect("topological order"))
                        .collect();
                    op.forward(&vals)?
                }
            };
            values[i] = Some(v);
        }
        Ok(self
            .outputs
            .iter()
            .map(|o| values[o.0].clone().expect("output recorded"))
            .collect())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Graph for Tape {
    type Node = Var;

    fn constant(&mut self, value: Tensor) -> Var {
        self.push(NodeKind::Constant, value, false)
    }

    fn value<'a>(&'a self, node: &'a Var) -> &'a Tensor {
        &self.nodes[node.0].value
    }

    fn try_apply(&mut self, op: Op, inputs: &[&Var]) -> Result<Var, AdError> {
        let value = {
            let vals: SmallVec<[&Tensor; 4]> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&vals)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let args = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(NodeKind::Op { op, args }, value, requires_grad))
    }
}

/// Records `f` applied to fresh input leaves holding `inputs`.
pub fn record<F>(inputs: &[Tensor], f: F) -> Result<(Vec<Tensor>, Tape), AdError>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Vec<Var>, AdError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let outs = f(&mut tape, &vars)?;
    let values = outs.iter().map(|v| tape.value(v).clone()).collect();
    tape.set_outputs(outs);
    Ok((values, tape))
}
