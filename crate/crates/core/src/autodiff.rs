//! Reverse-mode differentiation over a closed set of tensor primitives.
//!
//! A [`Tape`] records every value produced in a forward pass together with
//! the primitive and the inputs that produced it. Nodes are appended in
//! evaluation order, so the tape is a topological order of an acyclic graph
//! and `backward` is a single reverse sweep.

use crate::error::{shape_err, PtdError, Result};
use crate::tensor::{self, Padding, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    /// Trainable input; gradients are reported for it.
    Param,
    /// Constant input; no gradient flows into it.
    Constant,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: Padding,
    },
    LeakyRelu { input: Var, slope: f64 },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Add(Var, Var),
    AddChannelBias { input: Var, bias: Var },
    Scale { input: Var, factor: f64 },
    Mse(Var, Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Param | Op::Constant => vec![],
            Op::Conv2d { input, kernel, bias, .. } => {
                let mut p = vec![input, kernel];
                p.extend(bias);
                p
            }
            Op::LeakyRelu { input, .. } | Op::Scale { input, .. } => vec![input],
            Op::AvgPool2(x) | Op::Upsample2(x) => vec![x],
            Op::Concat(a, b) | Op::Add(a, b) | Op::Mse(a, b) => vec![a, b],
            Op::AddChannelBias { input, bias } => vec![input, bias],
        }
    }
}

#[derive(Debug)]
pub struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn op(&self) -> &Op {
        &self.op
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match op {
            Op::Param => true,
            Op::Constant => false,
            _ => op.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let out = tensor::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            padding,
        )?;
        Ok(self.push(out, Op::Conv2d { input, kernel, bias, padding }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.leaky_relu(input, 0.0)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let out = tensor::leaky_relu(self.value(input), slope);
        self.push(out, Op::LeakyRelu { input, slope })
    }

    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let out = tensor::avg_pool2(self.value(input))?;
        Ok(self.push(out, Op::AvgPool2(input)))
    }

    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let out = tensor::upsample_nearest2(self.value(input))?;
        Ok(self.push(out, Op::Upsample2(input)))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let out = tensor::add_channel_bias(self.value(input), self.value(bias))?;
        Ok(self.push(out, Op::AddChannelBias { input, bias }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).map(|v| v * factor);
        self.push(out, Op::Scale { input, factor })
    }

    /// Scalar mean squared error.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = tensor::mse(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b)))
    }

    /// Reverse sweep from a scalar node. Gradients of nodes used by several
    /// consumers are summed over all paths.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        if !root.value.is_finite() {
            return Err(PtdError::Numeric(format!("loss is {}", root.value.item())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let acc = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match node.op {
                Op::Param | Op::Constant => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { input, kernel, bias, padding } => {
                    let need_input = self.nodes[input.0].requires_grad;
                    let cg = tensor::conv2d_backward(
                        self.value(input),
                        self.value(kernel),
                        &g,
                        padding,
                        need_input,
                    )?;
                    if let Some(dx) = cg.input {
                        acc(input, dx, &mut grads);
                    }
                    acc(kernel, cg.kernel, &mut grads);
                    if let Some(b) = bias {
                        acc(b, cg.bias, &mut grads);
                    }
                }
                Op::LeakyRelu { input, slope } => {
                    let dx = tensor::leaky_relu_backward(self.value(input), &g, slope);
                    acc(input, dx, &mut grads);
                }
                Op::AvgPool2(x) => {
                    let dx = tensor::avg_pool2_backward(self.value(x).shape(), &g);
                    acc(x, dx, &mut grads);
                }
                Op::Upsample2(x) => {
                    let dx = tensor::upsample_nearest2_backward(self.value(x).shape(), &g);
                    acc(x, dx, &mut grads);
                }
                Op::Concat(a, b) => {
                    let (da, db) =
                        tensor::concat_channels_backward(self.value(a).shape(), self.value(b).shape(), &g);
                    acc(a, da, &mut grads);
                    acc(b, db, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(a, g.clone(), &mut grads);
                    acc(b, g, &mut grads);
                }
                Op::AddChannelBias { input, bias } => {
                    let db = tensor::add_channel_bias_backward(self.value(bias).shape(), &g);
                    acc(bias, db, &mut grads);
                    acc(input, g, &mut grads);
                }
                Op::Scale { input, factor } => {
                    acc(input, g.map(|v| v * factor), &mut grads);
                }
                Op::Mse(a, b) => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let k = 2.0 * g.item() / ta.len() as f64;
                    let da = Tensor::from_vec(
                        ta.shape().to_vec(),
                        ta.data().iter().zip(tb.data()).map(|(x, y)| k * (x - y)).collect(),
                    )?;
                    if self.nodes[b.0].requires_grad {
                        acc(b, da.map(|v| -v), &mut grads);
                    }
                    acc(a, da, &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], retained for `Param` nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter node; `None` if the loss does not reach it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter, zeros if the loss is independent of it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}
