use std::rc::Rc;

use super::conv::{conv2d_backward, conv2d_forward};
use super::norm::{batch_norm_backward, batch_norm_forward, BatchMoments, BnMode, BnSaved, RunningStats};
use crate::tensor::{Result, Tensor};

/// The layer vocabulary shared by the recording tape and eager evaluation.
///
/// Model code is written once against this trait; `Tape` records a
/// differentiable trace while `Eager` computes values and frees
/// intermediates as soon as their handles drop.
pub trait Graph {
    type Node: Clone;

    fn leaf(&mut self, value: Tensor) -> Self::Node;
    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Tensor;
    fn conv2d(&mut self, x: &Self::Node, kernel: &Self::Node, bias: &Self::Node) -> Result<Self::Node>;
    /// Returns the batch moments in training mode so the caller can update
    /// its running statistics.
    fn batch_norm(
        &mut self,
        x: &Self::Node,
        gamma: &Self::Node,
        beta: &Self::Node,
        stats: &RunningStats,
        mode: BnMode,
    ) -> Result<(Self::Node, Option<BatchMoments>)>;
    fn relu(&mut self, x: &Self::Node) -> Self::Node;
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
}

fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

fn add_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    b.expect_shape("add", a.shape())?;
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Eager evaluation without gradient bookkeeping.
#[derive(Debug, Default)]
pub struct Eager;

impl Graph for Eager {
    type Node = Rc<Tensor>;

    fn leaf(&mut self, value: Tensor) -> Rc<Tensor> {
        Rc::new(value)
    }

    fn value<'a>(&'a self, node: &'a Rc<Tensor>) -> &'a Tensor {
        node
    }

    fn conv2d(&mut self, x: &Rc<Tensor>, k: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        conv2d_forward(x, k, b).map(Rc::new)
    }

    fn batch_norm(
        &mut self,
        x: &Rc<Tensor>,
        gamma: &Rc<Tensor>,
        beta: &Rc<Tensor>,
        stats: &RunningStats,
        mode: BnMode,
    ) -> Result<(Rc<Tensor>, Option<BatchMoments>)> {
        let f = batch_norm_forward(x, gamma, beta, stats, mode)?;
        Ok((Rc::new(f.output), f.moments))
    }

    fn relu(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(relu_forward(x))
    }

    fn add(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        add_forward(a, b).map(Rc::new)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, kernel: Var, bias: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, mode: BnMode, saved: BnSaved },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    SumSquares { x: Var },
    /// Scalar output whose gradient with respect to `x` was computed alongside
    /// the value (fused loss kernels).
    Fused { x: Var, local_grad: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Linear record of a forward pass, replayed in reverse by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output. Only leaves keep their gradient after the
/// sweep; intermediate buffers are released as soon as they are consumed.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.0.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.0.get_mut(var.0).and_then(Option::take)
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.val(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.val(x).data().iter().sum());
        self.push(value, Op::Sum { x })
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.val(x).data().iter().map(|v| v * v).sum());
        self.push(value, Op::SumSquares { x })
    }

    /// Records a scalar `value` of `x` whose derivative `local_grad` the caller
    /// has already computed.
    pub fn fused_scalar(&mut self, x: Var, value: f64, local_grad: Tensor) -> Result<Var> {
        local_grad.expect_shape("fused_scalar", self.val(x).shape())?;
        Ok(self.push(Tensor::scalar(value), Op::Fused { x, local_grad }))
    }

    /// Reverse sweep seeded with ones at `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.val(output).shape(), 1.0));

        fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Conv2d { x, kernel, bias } => {
                    let g = conv2d_backward(self.val(*x), self.val(*kernel), self.val(*bias), &dy)
                        .expect("shapes validated on forward");
                    accumulate(&mut grads, *x, g.input);
                    accumulate(&mut grads, *kernel, g.kernel);
                    accumulate(&mut grads, *bias, g.bias);
                }
                Op::BatchNorm { x, gamma, beta, mode, saved } => {
                    let g = batch_norm_backward(self.val(*x).shape(), self.val(*gamma), saved, *mode, &dy)
                        .expect("shapes validated on forward");
                    accumulate(&mut grads, *x, g.input);
                    accumulate(&mut grads, *gamma, g.gamma);
                    accumulate(&mut grads, *beta, g.beta);
                }
                Op::Relu { x } => {
                    let mut g = dy;
                    g.data_mut()
                        .iter_mut()
                        .zip(self.val(*x).data())
                        .for_each(|(g, &v)| {
                            if v <= 0.0 {
                                *g = 0.0
                            }
                        });
                    accumulate(&mut grads, *x, g);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    accumulate(&mut grads, *x, dy.map(|v| v * f));
                }
                Op::Sum { x } => {
                    let s = dy.item();
                    accumulate(&mut grads, *x, Tensor::full(self.val(*x).shape(), s));
                }
                Op::SumSquares { x } => {
                    let s = dy.item();
                    accumulate(&mut grads, *x, self.val(*x).map(|v| 2.0 * v * s));
                }
                Op::Fused { x, local_grad } => {
                    let s = dy.item();
                    accumulate(&mut grads, *x, local_grad.map(|v| v * s));
                }
            }
        }
        Gradients(grads)
    }
}

impl Graph for Tape {
    type Node = Var;

    fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn value<'a>(&'a self, node: &'a Var) -> &'a Tensor {
        self.val(*node)
    }

    fn conv2d(&mut self, x: &Var, kernel: &Var, bias: &Var) -> Result<Var> {
        let value = conv2d_forward(self.val(*x), self.val(*kernel), self.val(*bias))?;
        Ok(self.push(value, Op::Conv2d { x: *x, kernel: *kernel, bias: *bias }))
    }

    fn batch_norm(
        &mut self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        stats: &RunningStats,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let f = batch_norm_forward(self.val(*x), self.val(*gamma), self.val(*beta), stats, mode)?;
        let op = Op::BatchNorm {
            x: *x,
            gamma: *gamma,
            beta: *beta,
            mode,
            saved: f.saved,
        };
        Ok((self.push(f.output, op), f.moments))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let value = relu_forward(self.val(*x));
        self.push(value, Op::Relu { x: *x })
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = add_forward(self.val(*a), self.val(*b))?;
        Ok(self.push(value, Op::Add { a: *a, b: *b }))
    }
}
