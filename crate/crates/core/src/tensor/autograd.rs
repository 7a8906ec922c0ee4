//! Reverse-mode differentiation over a recorded tape of tensor ops.
//!
//! A [`Graph`] records every op applied to its variables together with the
//! state its backward needs (im2col columns, shapes). [`Graph::gradients`]
//! then walks the tape backwards once and returns `d loss / d p` for each
//! requested parameter. Parameters are borrowed, so building a graph around
//! a large model does not copy its weights.

use std::borrow::Cow;

use super::ops::{self, Conv2dPlan, ConvTransposePlan};
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        plan: Conv2dPlan,
        cols: Vec<f32>,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
        plan: ConvTransposePlan,
        xm: Vec<f32>,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
        batch: usize,
        n_in: usize,
        n_out: usize,
    },
    Reshape {
        x: Var,
    },
    Mse {
        prediction: Var,
        target: Var,
    },
    Mae {
        prediction: Var,
        target: Var,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<(Var, Tensor)>,
    /// Requested parameters the loss does not depend on. Their entry in
    /// `grads` is all zeros.
    pub unreachable: Vec<Var>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.iter().find(|(v, _)| *v == var).map(|(_, g)| g)
    }

    /// Gradients in the order the parameters were requested.
    pub fn into_tensors(self) -> Vec<Tensor> {
        self.grads.into_iter().map(|(_, g)| g).collect()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf borrowed from the caller.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// A leaf that receives no gradient (inputs, targets).
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let plan = ops::conv2d_plan(xv, wv, bv, stride, padding)?;
        let (out, cols) = ops::conv2d_forward(&plan, xv, wv, bv);
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(Cow::Owned(out), Op::Conv2d { x, w, b, plan, cols }, rg))
    }

    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let plan = ops::conv2d_transpose_plan(xv, wv, bv, stride, padding)?;
        let (out, xm) = ops::conv2d_transpose_forward(&plan, xv, wv, bv);
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(Cow::Owned(out), Op::ConvTranspose { x, w, b, plan, xm }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = ops::leaky_relu(self.value(x), slope);
        let rg = self.needs(&[x]);
        self.push(Cow::Owned(out), Op::LeakyRelu { x, slope }, rg)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (batch, n_in, n_out) = ops::dense_dims(xv, wv, bv)?;
        let out = ops::dense_forward(xv, wv, bv, batch, n_in, n_out);
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(
            Cow::Owned(out),
            Op::Dense {
                x,
                w,
                b,
                batch,
                n_in,
                n_out,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Cow::Owned(out), Op::Reshape { x }, rg))
    }

    pub fn mse_loss(&mut self, prediction: Var, target: Var) -> Result<Var> {
        let l = ops::mse_loss(self.value(prediction), self.value(target))?;
        let rg = self.needs(&[prediction, target]);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(l as f32)),
            Op::Mse { prediction, target },
            rg,
        ))
    }

    pub fn mae(&mut self, prediction: Var, target: Var) -> Result<Var> {
        let l = ops::mae(self.value(prediction), self.value(target))?;
        let rg = self.needs(&[prediction, target]);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(l as f32)),
            Op::Mae { prediction, target },
            rg,
        ))
    }

    /// Reverse-mode pass from a scalar `loss` to each of `params`.
    pub fn gradients(&self, loss: Var, params: &[Var]) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "gradients",
                detail: format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Conv2d { x, w, b, plan, cols } => {
                    let (dx, dw, db) = ops::conv2d_backward(plan, cols, self.value(*w), &g);
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *w, dw);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::ConvTranspose { x, w, b, plan, xm } => {
                    let (dx, dw, db) = ops::conv2d_transpose_backward(plan, xm, self.value(*w), &g);
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *w, dw);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| if xi >= 0.0 { gi } else { gi * slope })
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Dense {
                    x,
                    w,
                    b,
                    batch,
                    n_in,
                    n_out,
                } => {
                    let (batch, n_in, n_out) = (*batch, *n_in, *n_out);
                    if self.nodes[x.0].requires_grad {
                        let mut dx = vec![0.0f32; batch * n_in];
                        ops::gemm(batch, n_out, n_in, &g, false, self.value(*w).data(), false, 0.0, &mut dx);
                        self.accumulate(&mut grads, *x, dx);
                    }
                    let mut dw = vec![0.0f32; n_out * n_in];
                    ops::gemm(n_out, batch, n_in, &g, true, self.value(*x).data(), false, 0.0, &mut dw);
                    self.accumulate(&mut grads, *w, dw);
                    let mut db = vec![0.0f32; n_out];
                    for row in g.chunks_exact(n_out) {
                        for (d, &r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Reshape { x } => {
                    self.accumulate(&mut grads, *x, g);
                }
                Op::Mse { prediction, target } => {
                    let (p, t) = (self.value(*prediction).data(), self.value(*target).data());
                    let scale = 2.0 * g[0] / p.len() as f32;
                    let dp: Vec<f32> = p.iter().zip(t).map(|(&a, &b)| scale * (a - b)).collect();
                    if self.nodes[target.0].requires_grad {
                        self.accumulate(&mut grads, *target, dp.iter().map(|v| -v).collect());
                    }
                    self.accumulate(&mut grads, *prediction, dp);
                }
                Op::Mae { prediction, target } => {
                    let (p, t) = (self.value(*prediction).data(), self.value(*target).data());
                    let scale = g[0] / p.len() as f32;
                    let dp: Vec<f32> = p
                        .iter()
                        .zip(t)
                        .map(|(&a, &b)| {
                            if a > b {
                                scale
                            } else if a < b {
                                -scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    if self.nodes[target.0].requires_grad {
                        self.accumulate(&mut grads, *target, dp.iter().map(|v| -v).collect());
                    }
                    self.accumulate(&mut grads, *prediction, dp);
                }
            }
        }

        let mut out = Vec::with_capacity(params.len());
        let mut unreachable = Vec::new();
        for &p in params {
            let shape = self.value(p).shape().to_vec();
            let g = match grads.get_mut(p.0).and_then(Option::take) {
                Some(data) => Tensor { shape, data },
                None => {
                    unreachable.push(p);
                    Tensor::zeros(shape)
                }
            };
            out.push((p, g));
        }
        Ok(Gradients {
            grads: out,
            unreachable,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, delta: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(&delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::scalar(3.0);
        let zero = Tensor::scalar(0.0);
        let mut g = Graph::new();
        let xv = g.param(&x);
        let t = g.constant(&zero);
        let loss = g.mse_loss(xv, t).unwrap();
        let grads = g.gradients(loss, &[xv]).unwrap();
        assert_eq!(grads.get(xv).unwrap().data(), &[6.0]);
        assert!(grads.unreachable.is_empty());
    }

    #[test]
    fn leaky_relu_negative_side_gradient() {
        let x = Tensor::scalar(-2.0);
        let mut g = Graph::new();
        let xv = g.param(&x);
        let y = g.leaky_relu(xv, 0.01);
        // d/dy of mae(y, y - 1) is 1, so the chain isolates d leaky / dx.
        let shifted = g.constant_owned(Tensor::scalar(g.value(y).data()[0] - 1.0));
        let loss = g.mae(y, shifted).unwrap();
        let grads = g.gradients(loss, &[xv]).unwrap();
        assert!((grads.get(xv).unwrap().data()[0] - 0.01).abs() < 1e-7);
    }

    #[test]
    fn unreachable_parameter_gets_zero_and_is_flagged() {
        let a = Tensor::full([2], 1.0);
        let b = Tensor::full([3], 1.0);
        let mut g = Graph::new();
        let av = g.param(&a);
        let bv = g.param(&b);
        let t = g.constant_owned(Tensor::zeros([2]));
        let loss = g.mse_loss(av, t).unwrap();
        let grads = g.gradients(loss, &[av, bv]).unwrap();
        assert_eq!(grads.unreachable, vec![bv]);
        assert_eq!(grads.get(bv).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let a = Tensor::full([2], 1.0);
        let mut g = Graph::new();
        let av = g.param(&a);
        assert!(g.gradients(av, &[av]).is_err());
    }
}
