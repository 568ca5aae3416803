//! Reverse-mode tape over [`Tensor4`] values.
//!
//! Every operation appends a node holding its output value; [`Graph::backward`]
//! walks the tape in reverse. Nodes created with [`Graph::input`] are constants,
//! nodes created with [`Graph::param`] receive gradients.

use super::kernels::{self, BnSaved};
use super::tensor::Tensor4;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Input,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved,
        training: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Abs(Var),
    Square(Var),
    Scale(Var, f64),
    Concat(Var, Var),
    Narrow {
        x: Var,
        start: usize,
    },
    Crop(Var),
    Upsample2x(Var),
    Warp {
        x: Var,
        flow: Tensor4,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor4,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of the parameter leaves after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the
    /// output.
    pub fn get_or_zeros(&self, v: Var, shape: [usize; 4]) -> Tensor4 {
        self.get(v).cloned().unwrap_or_else(|| Tensor4::zeros(shape))
    }
}

fn same_shape(a: &Tensor4, b: &Tensor4, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn map(t: &Tensor4, f: impl Fn(f64) -> f64) -> Tensor4 {
    Tensor4::from_vec(t.shape(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
}

fn zip(a: &Tensor4, b: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Tensor4 {
    Tensor4::from_vec(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
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

    fn push(&mut self, value: Tensor4, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor4) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor4) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Param,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, &parents))
    }

    /// Batch norm in training mode (`running = None`) or evaluation mode.
    /// Returns the saved batch statistics for running-average updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Tensor4, &Tensor4)>,
    ) -> Result<(Var, BnSaved)> {
        let (out, saved) =
            kernels::batchnorm_forward(self.value(x), self.value(gamma), self.value(beta), running)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            saved: saved.clone(),
            training: running.is_none(),
        };
        Ok((self.push(out, op, &[x, gamma, beta]), saved))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = map(self.value(x), |v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = map(self.value(x), |v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = map(self.value(x), f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = map(self.value(x), f64::abs);
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = map(self.value(x), |v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = map(self.value(x), |v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.shape(a);
        let [nb, cb, hb, wb] = self.shape(b);
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(format!(
                "concat {:?} with {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            data.extend_from_slice(&self.value(a).data()[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&self.value(b).data()[n * cb * plane..(n + 1) * cb * plane]);
        }
        let out = Tensor4::from_vec([na, ca + cb, ha, wa], data)?;
        Ok(self.push(out, Op::Concat(a, b), &[a, b]))
    }

    /// Channels `start..start + len`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if start + len > c {
            return Err(Error::shape(format!("narrow {start}+{len} of {c} channels")));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let off = (b * c + start) * plane;
            data.extend_from_slice(&self.value(x).data()[off..off + len * plane]);
        }
        let out = Tensor4::from_vec([n, len, h, w], data)?;
        Ok(self.push(out, Op::Narrow { x, start }, &[x]))
    }

    /// Keeps the top-left `h × w` region.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let [n, c, xh, xw] = self.shape(x);
        if h > xh || w > xw {
            return Err(Error::shape(format!("crop {h}x{w} of {xh}x{xw}")));
        }
        if (h, w) == (xh, xw) {
            return Ok(x);
        }
        let mut out = Tensor4::zeros([n, c, h, w]);
        let src = self.value(x).data();
        for nc in 0..n * c {
            for y in 0..h {
                let s = &src[(nc * xh + y) * xw..][..w];
                out.data_mut()[(nc * h + y) * w..][..w].copy_from_slice(s);
            }
        }
        Ok(self.push(out, Op::Crop(x), &[x]))
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let out = kernels::upsample2x_forward(self.value(x));
        self.push(out, Op::Upsample2x(x), &[x])
    }

    /// Backward warp by a constant flow `[N, 2, H, W]`.
    pub fn warp(&mut self, x: Var, flow: Tensor4) -> Result<Var> {
        let out = kernels::warp_forward(self.value(x), &flow)?;
        Ok(self.push(out, Op::Warp { x, flow }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor4::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor4::scalar(s), Op::Mean(x), &[x])
    }

    /// Reverse pass from `out`, seeded with ones.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor4::filled(self.shape(out), 1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor4, grads: &mut [Option<Tensor4>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor4| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let cg = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    wants(*x),
                )?;
                if let Some(dx) = cg.dx {
                    acc(*x, dx);
                }
                acc(*w, cg.dw);
                if let Some(b) = b {
                    acc(*b, cg.db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                training,
            } => {
                let bg = kernels::batchnorm_backward(
                    self.value(*x),
                    self.value(*gamma),
                    g,
                    saved,
                    *training,
                );
                acc(*x, bg.dx);
                acc(*gamma, bg.dgamma);
                acc(*beta, bg.dbeta);
            }
            Op::Relu(x) => acc(*x, zip(g, self.value(*x), |d, v| if v > 0.0 { d } else { 0.0 })),
            Op::Sigmoid(x) => acc(*x, zip(g, &node.value, |d, y| d * y * (1.0 - y))),
            Op::Tanh(x) => acc(*x, zip(g, &node.value, |d, y| d * (1.0 - y * y))),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, map(g, |d| -d));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, zip(g, self.value(*b), |d, v| d * v));
                }
                if wants(*b) {
                    acc(*b, zip(g, self.value(*a), |d, v| d * v));
                }
            }
            Op::Abs(x) => acc(*x, zip(g, self.value(*x), |d, v| d * v.signum() * (v != 0.0) as u8 as f64)),
            Op::Square(x) => acc(*x, zip(g, self.value(*x), |d, v| 2.0 * d * v)),
            Op::Scale(x, c) => acc(*x, map(g, |d| d * c)),
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.shape(*a);
                let cb = self.shape(*b)[1];
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for bi in 0..n {
                    let off = bi * (ca + cb) * plane;
                    ga.extend_from_slice(&g.data()[off..off + ca * plane]);
                    gb.extend_from_slice(&g.data()[off + ca * plane..off + (ca + cb) * plane]);
                }
                acc(*a, Tensor4::from_vec([n, ca, h, w], ga)?);
                acc(*b, Tensor4::from_vec([n, cb, h, w], gb)?);
            }
            Op::Narrow { x, start } => {
                let [n, c, h, w] = self.shape(*x);
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut gx = Tensor4::zeros([n, c, h, w]);
                for bi in 0..n {
                    let dst = (bi * c + start) * plane;
                    let src = bi * len * plane;
                    gx.data_mut()[dst..dst + len * plane]
                        .copy_from_slice(&g.data()[src..src + len * plane]);
                }
                acc(*x, gx);
            }
            Op::Crop(x) => {
                let [n, c, xh, xw] = self.shape(*x);
                let [_, _, h, w] = node.value.shape();
                let mut gx = Tensor4::zeros([n, c, xh, xw]);
                for nc in 0..n * c {
                    for y in 0..h {
                        gx.data_mut()[(nc * xh + y) * xw..][..w]
                            .copy_from_slice(&g.data()[(nc * h + y) * w..][..w]);
                    }
                }
                acc(*x, gx);
            }
            Op::Upsample2x(x) => acc(*x, kernels::upsample2x_backward(g, self.shape(*x))),
            Op::Warp { x, flow } => acc(*x, kernels::warp_backward(g, flow)?),
            Op::Sum(x) => acc(*x, Tensor4::filled(self.shape(*x), g.item())),
            Op::Mean(x) => {
                let shape = self.shape(*x);
                let n: usize = shape.iter().product();
                acc(*x, Tensor4::filled(shape, g.item() / n as f64));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_on_scalars() {
        let mut g = Graph::new();
        let a = g.param(Tensor4::scalar(3.0));
        let b = g.input(Tensor4::scalar(2.0));
        let p = g.mul(a, b).unwrap();
        let s = g.square(p);
        let grads = g.backward(s).unwrap();
        // d/da (2a)^2 = 8a
        assert_eq!(grads.get(a).unwrap().item(), 24.0);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn shared_node_accumulates() {
        let mut g = Graph::new();
        let a = g.param(Tensor4::from_vec([1, 1, 1, 2], vec![1.0, -2.0]).unwrap());
        let s = g.add(a, a).unwrap();
        let m = g.sum(s);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn concat_narrow_round_trip() {
        let mut g = Graph::new();
        let a = g.param(Tensor4::filled([2, 1, 2, 2], 1.0));
        let b = g.param(Tensor4::filled([2, 3, 2, 2], 2.0));
        let c = g.concat(a, b).unwrap();
        assert_eq!(g.shape(c), [2, 4, 2, 2]);
        let back = g.narrow(c, 1, 3).unwrap();
        assert_eq!(g.value(back), g.value(b));
        let other = g.input(Tensor4::zeros([1, 1, 2, 2]));
        assert!(g.concat(a, other).is_err());
    }
}
