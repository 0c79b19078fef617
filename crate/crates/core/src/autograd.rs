//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients for
//! every node that depends on a trainable leaf. Graphs are cheap to build and
//! are thrown away after each step; inference uses the same code path and
//! simply never calls `backward`.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{gemm, split_axis, strides, MatRef, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    /// Tanh approximation of GELU.
    Gelu,
    Exp,
    Softplus,
    Sqrt,
    Square,
    Abs,
    /// Zero for d >= 0, quadratic on (-delta, 0), linear below -delta.
    SpacingPenalty(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Binary { a: Var, b: Var, kind: BinaryKind },
    Affine { x: Var, scale: f64 },
    Unary { x: Var, kind: UnaryKind },
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Tensor, rstd: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvTranspose1d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Expand { x: Var },
    SumAxis { x: Var, axis: usize },
    SumAll { x: Var },
    Dft { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fft: Option<FftPlanner<f64>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf whose gradient can be read back from [`Gradients`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id).clone();
        let trainable = store.is_trainable(id);
        self.push(t, Op::Param(id), trainable)
    }

    /// Copies the value of `v` into a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Var {
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            va.zip_map(vb, f)
        } else {
            let out_shape = broadcast_shape(va.shape(), vb.shape());
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for_each_broadcast(&out_shape, va.shape(), vb.shape(), |_, ia, ib| {
                out.push(f(va.data()[ia], vb.data()[ib]));
            });
            Tensor::new(&out_shape, out)
        };
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Binary { a, b, kind }, rg)
    }

    /// Broadcasting add (equal ranks; size-1 axes stretch).
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinaryKind::Mul)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(value, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let value = self.value(x).map(|v| unary_forward(kind, v));
        let rg = self.rg(&[x]);
        self.push(value, Op::Unary { x, kind }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Gelu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Softplus)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Square)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a[..., k] x b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.rank(), 2, "matmul rhs must be 2-D, got {:?}", vb.shape());
        let k = *va.shape().last().expect("matmul lhs must have rank >= 1");
        assert_eq!(k, vb.shape()[0], "matmul inner mismatch {:?} x {:?}", va.shape(), vb.shape());
        let n = vb.shape()[1];
        let m = va.len() / k;
        let mut out = vec![0.0; m * n];
        gemm(MatRef::new(va.data(), m, k), MatRef::new(vb.data(), k, n), &mut out, 0.0);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&shape, out), Op::MatMul { a, b }, rg)
    }

    /// `[N, m, k] x [N, k, n] -> [N, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1], "bmm {sa:?} x {sb:?}");
        let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; nb * m * n];
        for i in 0..nb {
            gemm(
                MatRef::new(&va.data()[i * m * k..(i + 1) * m * k], m, k),
                MatRef::new(&vb.data()[i * k * n..(i + 1) * k * n], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[nb, m, n], out), Op::BatchMatMul { a, b }, rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = *vx.shape().last().unwrap();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(vx.shape(), out);
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax { x }, rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let f = *vx.shape().last().unwrap();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), f);
        let rows = vx.len() / f;
        let mut xhat = vec![0.0; vx.len()];
        let mut out = vec![0.0; vx.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let src = &vx.data()[r * f..(r + 1) * f];
            let mean = src.iter().sum::<f64>() / f as f64;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..f {
                let h = (src[j] - mean) * rs;
                xhat[r * f + j] = h;
                out[r * f + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(vx.shape(), out);
        let xhat = Tensor::new(vx.shape(), xhat);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Group normalization of `[B, C, L]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 3, "group_norm expects [B, C, L]");
        let (nb, c, l) = (s[0], s[1], s[2]);
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let per = c / groups * l;
        let mut xhat = vec![0.0; vx.len()];
        let mut out = vec![0.0; vx.len()];
        let mut rstd = Vec::with_capacity(nb * groups);
        for bi in 0..nb {
            for gi in 0..groups {
                let base = bi * c * l + gi * per;
                let src = &vx.data()[base..base + per];
                let mean = src.iter().sum::<f64>() / per as f64;
                let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd.push(rs);
                for j in 0..per {
                    let ch = gi * (c / groups) + j / l;
                    let h = (src[j] - mean) * rs;
                    xhat[base + j] = h;
                    out[base + j] = h * g[ch] + b[ch];
                }
            }
        }
        let value = Tensor::new(s, out);
        let xhat = Tensor::new(s, xhat);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(value, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }, rg)
    }

    /// 1-D convolution: `x [B, Cin, L]`, `w [Cout, Cin, K]`, `b [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let value = conv1d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        let rg = self.rg(&[x, w, b]);
        self.push(value, Op::Conv1d { x, w, b, stride, pad }, rg)
    }

    /// Transposed 1-D convolution: `x [B, Cin, L]`, `w [Cin, Cout, K]`, `b [Cout]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let value = conv_t1d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        let rg = self.rg(&[x, w, b]);
        self.push(value, Op::ConvTranspose1d { x, w, b, stride, pad }, rg)
    }

    // ---- shape -------------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::cat(&tensors, axis);
        let rg = self.rg(parts);
        self.push(value, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self.value(x).narrow(axis, start, len);
        let rg = self.rg(&[x]);
        self.push(value, Op::Narrow { x, axis, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape { x }, rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let value = self.value(x).permute(perm);
        let rg = self.rg(&[x]);
        self.push(value, Op::Permute { x, perm: perm.to_vec() }, rg)
    }

    /// Broadcasts size-1 axes of `x` up to `shape` (ranks must agree).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Var {
        let vx = self.value(x);
        assert_eq!(broadcast_shape(vx.shape(), shape), shape, "cannot expand {:?} to {shape:?}", vx.shape());
        let mut out = Vec::with_capacity(shape.iter().product());
        for_each_broadcast(shape, vx.shape(), shape, |_, ia, _| out.push(vx.data()[ia]));
        let value = Tensor::new(shape, out);
        let rg = self.rg(&[x]);
        self.push(value, Op::Expand { x }, rg)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let vx = self.value(x);
        let (outer, dim, inner) = split_axis(vx.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &vx.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, out), Op::SumAxis { x, axis }, rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis);
        self.scale(s, 1.0 / n)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::SumAll { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Discrete Fourier transform along axis 1 of `[B, N, C]`.
    ///
    /// Returns `[B, N, 2C]`: real parts in channels `0..C`, imaginary parts in
    /// `C..2C`.
    pub fn dft(&mut self, x: Var) -> Var {
        let vx = self.value(x).clone();
        let s = vx.shape().to_vec();
        assert_eq!(s.len(), 3, "dft expects [B, N, C]");
        let (nb, n, c) = (s[0], s[1], s[2]);
        let plan = self.planner().plan_fft_forward(n);
        let mut out = vec![0.0; nb * n * 2 * c];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for bi in 0..nb {
            for ch in 0..c {
                for t in 0..n {
                    buf[t] = Complex64::new(vx.data()[(bi * n + t) * c + ch], 0.0);
                }
                plan.process(&mut buf);
                for (i, z) in buf.iter().enumerate() {
                    out[(bi * n + i) * 2 * c + ch] = z.re;
                    out[(bi * n + i) * 2 * c + c + ch] = z.im;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[nb, n, 2 * c], out), Op::Dft { x }, rg)
    }

    fn planner(&mut self) -> &mut FftPlanner<f64> {
        self.fft.get_or_insert_with(FftPlanner::new)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![1.0]));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            self.backward_node(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Gradients { grads }
    }

    /// Accumulated gradient per parameter touched by this graph, in store order.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; store.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = &grads.grads[i] {
                    match &mut out[pid.index()] {
                        Some(acc) => acc.add_assign(g),
                        slot => *slot = Some(g.clone()),
                    }
                }
            }
        }
        out
    }

    fn backward_node(&mut self, id: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |g: &Graph, v: Var| g.nodes[v.0].requires_grad;
        match &self.nodes[id].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Binary { a, b, kind } => {
                let (a, b, kind) = (*a, *b, *kind);
                let (va, vb) = (self.value(a), self.value(b));
                let out_shape = gout.shape();
                if needs(self, a) {
                    let mut ga = vec![0.0; va.len()];
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => {
                            for_each_broadcast(out_shape, va.shape(), vb.shape(), |o, ia, _| {
                                ga[ia] += gout.data()[o];
                            });
                        }
                        BinaryKind::Mul => {
                            for_each_broadcast(out_shape, va.shape(), vb.shape(), |o, ia, ib| {
                                ga[ia] += gout.data()[o] * vb.data()[ib];
                            });
                        }
                    }
                    accumulate(grads, a, Tensor::new(va.shape(), ga));
                }
                if needs(self, b) {
                    let mut gb = vec![0.0; vb.len()];
                    match kind {
                        BinaryKind::Add => {
                            for_each_broadcast(out_shape, va.shape(), vb.shape(), |o, _, ib| {
                                gb[ib] += gout.data()[o];
                            });
                        }
                        BinaryKind::Sub => {
                            for_each_broadcast(out_shape, va.shape(), vb.shape(), |o, _, ib| {
                                gb[ib] -= gout.data()[o];
                            });
                        }
                        BinaryKind::Mul => {
                            for_each_broadcast(out_shape, va.shape(), vb.shape(), |o, ia, ib| {
                                gb[ib] += gout.data()[o] * va.data()[ia];
                            });
                        }
                    }
                    accumulate(grads, b, Tensor::new(vb.shape(), gb));
                }
            }
            Op::Affine { x, scale } => {
                let (x, scale) = (*x, *scale);
                accumulate(grads, x, gout.map(|g| g * scale));
            }
            Op::Unary { x, kind } => {
                let (x, kind) = (*x, *kind);
                let vx = self.value(x);
                let vy = &self.nodes[id].value;
                let data: Vec<f64> = gout
                    .data()
                    .iter()
                    .zip(vx.data().iter().zip(vy.data()))
                    .map(|(g, (&xi, &yi))| g * unary_derivative(kind, xi, yi))
                    .collect();
                accumulate(grads, x, Tensor::new(vx.shape(), data));
            }
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (va, vb) = (self.value(a), self.value(b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.len() / k;
                if needs(self, a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(MatRef::new(gout.data(), m, n), MatRef::new(vb.data(), k, n).t(), &mut ga, 0.0);
                    accumulate(grads, a, Tensor::new(va.shape(), ga));
                }
                if needs(self, b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(MatRef::new(va.data(), m, k).t(), MatRef::new(gout.data(), m, n), &mut gb, 0.0);
                    accumulate(grads, b, Tensor::new(vb.shape(), gb));
                }
            }
            Op::BatchMatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (va, vb) = (self.value(a), self.value(b));
                let (nb, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
                if needs(self, a) {
                    let mut ga = vec![0.0; nb * m * k];
                    for i in 0..nb {
                        gemm(
                            MatRef::new(&gout.data()[i * m * n..(i + 1) * m * n], m, n),
                            MatRef::new(&vb.data()[i * k * n..(i + 1) * k * n], k, n).t(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    accumulate(grads, a, Tensor::new(va.shape(), ga));
                }
                if needs(self, b) {
                    let mut gb = vec![0.0; nb * k * n];
                    for i in 0..nb {
                        gemm(
                            MatRef::new(&va.data()[i * m * k..(i + 1) * m * k], m, k).t(),
                            MatRef::new(&gout.data()[i * m * n..(i + 1) * m * n], m, n),
                            &mut gb[i * k * n..(i + 1) * k * n],
                            0.0,
                        );
                    }
                    accumulate(grads, b, Tensor::new(vb.shape(), gb));
                }
            }
            Op::Softmax { x } => {
                let x = *x;
                let y = &self.nodes[id].value;
                let n = *y.shape().last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), dst) in y.data().chunks(n).zip(gout.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, x, Tensor::new(y.shape(), gx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let f = *xhat.shape().last().unwrap();
                let g = self.value(gamma).data();
                let rows = xhat.len() / f;
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; f];
                let mut gbeta = vec![0.0; f];
                for r in 0..rows {
                    let h = &xhat.data()[r * f..(r + 1) * f];
                    let go = &gout.data()[r * f..(r + 1) * f];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..f {
                        let dh = go[j] * g[j];
                        m1 += dh;
                        m2 += dh * h[j];
                        gg[j] += go[j] * h[j];
                        gbeta[j] += go[j];
                    }
                    m1 /= f as f64;
                    m2 /= f as f64;
                    for j in 0..f {
                        gx[r * f + j] = rstd[r] * (go[j] * g[j] - m1 - h[j] * m2);
                    }
                }
                let shape = xhat.shape().to_vec();
                accumulate(grads, x, Tensor::new(&shape, gx));
                accumulate(grads, gamma, Tensor::new(&[f], gg));
                accumulate(grads, beta, Tensor::new(&[f], gbeta));
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                let s = xhat.shape().to_vec();
                let (nb, c, l) = (s[0], s[1], s[2]);
                let g = self.value(gamma).data();
                let per = c / groups * l;
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for bi in 0..nb {
                    for gi in 0..groups {
                        let base = bi * c * l + gi * per;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..per {
                            let ch = gi * (c / groups) + j / l;
                            let go = gout.data()[base + j];
                            let h = xhat.data()[base + j];
                            let dh = go * g[ch];
                            m1 += dh;
                            m2 += dh * h;
                            gg[ch] += go * h;
                            gbeta[ch] += go;
                        }
                        m1 /= per as f64;
                        m2 /= per as f64;
                        let rs = rstd[bi * groups + gi];
                        for j in 0..per {
                            let ch = gi * (c / groups) + j / l;
                            let dh = gout.data()[base + j] * g[ch];
                            gx[base + j] = rs * (dh - m1 - xhat.data()[base + j] * m2);
                        }
                    }
                }
                accumulate(grads, x, Tensor::new(&s, gx));
                accumulate(grads, gamma, Tensor::new(&[c], gg));
                accumulate(grads, beta, Tensor::new(&[c], gbeta));
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let (gx, gw, gb) = conv1d_backward(self.value(x), self.value(w), gout, stride, pad);
                if needs(self, x) {
                    accumulate(grads, x, gx);
                }
                accumulate(grads, w, gw);
                accumulate(grads, b, gb);
            }
            Op::ConvTranspose1d { x, w, b, stride, pad } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let (gx, gw, gb) = conv_t1d_backward(self.value(x), self.value(w), gout, stride, pad);
                if needs(self, x) {
                    accumulate(grads, x, gx);
                }
                accumulate(grads, w, gw);
                accumulate(grads, b, gb);
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let mut start = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[axis];
                    if self.nodes[p.0].requires_grad {
                        accumulate(grads, p, gout.narrow(axis, start, len));
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                let src_shape = self.value(x).shape().to_vec();
                let (outer, dim, inner) = split_axis(&src_shape, axis);
                let len = gout.shape()[axis];
                let mut gx = vec![0.0; src_shape.iter().product()];
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&gout.data()[src..src + len * inner]);
                }
                accumulate(grads, x, Tensor::new(&src_shape, gx));
            }
            Op::Reshape { x } => {
                let x = *x;
                let shape = self.value(x).shape().to_vec();
                accumulate(grads, x, gout.clone().reshape(&shape));
            }
            Op::Permute { x, perm } => {
                let x = *x;
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                accumulate(grads, x, gout.permute(&inv));
            }
            Op::Expand { x } => {
                let x = *x;
                let xs = self.value(x).shape().to_vec();
                let mut gx = vec![0.0; xs.iter().product()];
                for_each_broadcast(gout.shape(), &xs, gout.shape(), |o, ia, _| gx[ia] += gout.data()[o]);
                accumulate(grads, x, Tensor::new(&xs, gx));
            }
            Op::SumAxis { x, axis } => {
                let (x, axis) = (*x, *axis);
                let xs = self.value(x).shape().to_vec();
                let (outer, dim, inner) = split_axis(&xs, axis);
                let mut gx = vec![0.0; xs.iter().product()];
                for o in 0..outer {
                    for d in 0..dim {
                        gx[(o * dim + d) * inner..(o * dim + d + 1) * inner]
                            .copy_from_slice(&gout.data()[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(grads, x, Tensor::new(&xs, gx));
            }
            Op::SumAll { x } => {
                let x = *x;
                let g = gout.item();
                let xs = self.value(x).shape().to_vec();
                accumulate(grads, x, Tensor::full(&xs, g));
            }
            Op::Dft { x } => {
                let x = *x;
                let s = self.value(x).shape().to_vec();
                let (nb, n, c) = (s[0], s[1], s[2]);
                // d/dx_t of Re/Im parts: Re( sum_i (g_re + j g_im) e^{+j 2 pi i t / N} ),
                // i.e. the real part of an unnormalized inverse DFT.
                let plan = self.planner().plan_fft_inverse(n);
                let mut gx = vec![0.0; nb * n * c];
                let mut buf = vec![Complex64::new(0.0, 0.0); n];
                for bi in 0..nb {
                    for ch in 0..c {
                        for i in 0..n {
                            let base = (bi * n + i) * 2 * c;
                            buf[i] = Complex64::new(gout.data()[base + ch], gout.data()[base + c + ch]);
                        }
                        plan.process(&mut buf);
                        for t in 0..n {
                            gx[(bi * n + t) * c + ch] = buf[t].re;
                        }
                    }
                }
                accumulate(grads, x, Tensor::new(&s, gx));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Piecewise spacing penalty for a signed longitudinal gap `d`.
pub fn spacing_penalty(d: f64, delta: f64) -> f64 {
    if d >= 0.0 {
        0.0
    } else if d > -delta {
        0.5 * d * d
    } else {
        delta * (-d - 0.5 * delta)
    }
}

fn unary_forward(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Softplus => softplus(x),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Square => x * x,
        UnaryKind::Abs => x.abs(),
        UnaryKind::SpacingPenalty(delta) => spacing_penalty(x, delta),
    }
}

fn unary_derivative(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Gelu => {
            let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        }
        UnaryKind::Exp => y,
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Sqrt => 0.5 / y,
        UnaryKind::Square => 2.0 * x,
        UnaryKind::Abs => x.signum(),
        UnaryKind::SpacingPenalty(delta) => {
            if x >= 0.0 {
                0.0
            } else if x > -delta {
                x
            } else {
                -delta
            }
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast needs equal ranks: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "incompatible broadcast {a:?} vs {b:?}");
            x.max(y)
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape.iter().zip(out).zip(s).map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st }).collect()
}

/// Visits every output index of a broadcast, passing (out, a, b) flat offsets.
fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let last = rank - 1;
    let inner = out[last];
    let (ia_step, ib_step) = (sa[last], sb[last]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, oa + j * ia_step, ob + j * ib_step);
        }
        o += inner;
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn conv_out_len(l: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(l + 2 * pad >= k, "conv kernel {k} longer than padded input {}", l + 2 * pad);
    (l + 2 * pad - k) / stride + 1
}

/// Unfolds `x [B, Cin, L]` into columns `[Cin*K, B*Lout]`.
fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize, lout: usize) -> Vec<f64> {
    let s = x.shape();
    let (nb, cin, l) = (s[0], s[1], s[2]);
    let ncol = nb * lout;
    let mut cols = vec![0.0; cin * k * ncol];
    for ci in 0..cin {
        for kk in 0..k {
            let row = (ci * k + kk) * ncol;
            for bi in 0..nb {
                let src = &x.data()[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                for o in 0..lout {
                    let pos = (o * stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < l {
                        cols[row + bi * lout + o] = src[pos as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds columns `[Cin*K, B*Lout]` back into `[B, Cin, L]`.
fn col2im(cols: &[f64], shape: &[usize], k: usize, stride: usize, pad: usize, lout: usize) -> Vec<f64> {
    let (nb, cin, l) = (shape[0], shape[1], shape[2]);
    let ncol = nb * lout;
    let mut x = vec![0.0; nb * cin * l];
    for ci in 0..cin {
        for kk in 0..k {
            let row = (ci * k + kk) * ncol;
            for bi in 0..nb {
                for o in 0..lout {
                    let pos = (o * stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < l {
                        x[(bi * cin + ci) * l + pos as usize] += cols[row + bi * lout + o];
                    }
                }
            }
        }
    }
    x
}

/// `[C, B*L]` matrix -> `[B, C, L]` tensor data.
fn mat_to_bcl(m: &[f64], nb: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; nb * c * l];
    for ch in 0..c {
        for bi in 0..nb {
            out[(bi * c + ch) * l..(bi * c + ch + 1) * l]
                .copy_from_slice(&m[ch * nb * l + bi * l..ch * nb * l + (bi + 1) * l]);
        }
    }
    out
}

/// `[B, C, L]` tensor data -> `[C, B*L]` matrix.
fn bcl_to_mat(t: &[f64], nb: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; nb * c * l];
    for ch in 0..c {
        for bi in 0..nb {
            out[ch * nb * l + bi * l..ch * nb * l + (bi + 1) * l]
                .copy_from_slice(&t[(bi * c + ch) * l..(bi * c + ch + 1) * l]);
        }
    }
    out
}

fn conv1d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    assert!(xs.len() == 3 && ws.len() == 3 && xs[1] == ws[1], "conv1d shapes {xs:?} / {ws:?}");
    let (nb, cin, l) = (xs[0], xs[1], xs[2]);
    let (cout, k) = (ws[0], ws[2]);
    let lout = conv_out_len(l, k, stride, pad);
    let cols = im2col(x, k, stride, pad, lout);
    let mut m = vec![0.0; cout * nb * lout];
    gemm(MatRef::new(w.data(), cout, cin * k), MatRef::new(&cols, cin * k, nb * lout), &mut m, 0.0);
    let mut out = mat_to_bcl(&m, nb, cout, lout);
    for bi in 0..nb {
        for co in 0..cout {
            let bias = b.data()[co];
            out[(bi * cout + co) * lout..(bi * cout + co + 1) * lout].iter_mut().for_each(|v| *v += bias);
        }
    }
    Tensor::new(&[nb, cout, lout], out)
}

fn conv1d_backward(x: &Tensor, w: &Tensor, gout: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor, Tensor) {
    let (xs, ws) = (x.shape(), w.shape());
    let (nb, cin) = (xs[0], xs[1]);
    let (cout, k) = (ws[0], ws[2]);
    let lout = gout.shape()[2];
    let cols = im2col(x, k, stride, pad, lout);
    let gm = bcl_to_mat(gout.data(), nb, cout, lout);
    let mut gw = vec![0.0; cout * cin * k];
    gemm(MatRef::new(&gm, cout, nb * lout), MatRef::new(&cols, cin * k, nb * lout).t(), &mut gw, 0.0);
    let mut gcols = vec![0.0; cin * k * nb * lout];
    gemm(MatRef::new(w.data(), cout, cin * k).t(), MatRef::new(&gm, cout, nb * lout), &mut gcols, 0.0);
    let gx = col2im(&gcols, xs, k, stride, pad, lout);
    let gb: Vec<f64> = (0..cout).map(|co| gm[co * nb * lout..(co + 1) * nb * lout].iter().sum()).collect();
    (Tensor::new(xs, gx), Tensor::new(ws, gw), Tensor::new(&[cout], gb))
}

fn conv_t_out_len(l: usize, k: usize, stride: usize, pad: usize) -> usize {
    let full = (l - 1) * stride + k;
    assert!(full > 2 * pad, "transposed conv padding {pad} too large");
    full - 2 * pad
}

fn conv_t1d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    assert!(xs.len() == 3 && ws.len() == 3 && xs[1] == ws[0], "conv_transpose1d shapes {xs:?} / {ws:?}");
    let (nb, cin, l) = (xs[0], xs[1], xs[2]);
    let (cout, k) = (ws[1], ws[2]);
    let lout = conv_t_out_len(l, k, stride, pad);
    let xm = bcl_to_mat(x.data(), nb, cin, l);
    // cols[(co*K + kk), bi*L + i] = sum_ci w[ci, co, kk] x[bi, ci, i]
    let mut cols = vec![0.0; cout * k * nb * l];
    gemm(MatRef::new(w.data(), cin, cout * k).t(), MatRef::new(&xm, cin, nb * l), &mut cols, 0.0);
    // Scatter: output position i*stride + kk - pad is exactly the im2col
    // relation with roles of L and Lout swapped.
    let mut out = col2im_t(&cols, nb, cout, k, l, lout, stride, pad);
    for bi in 0..nb {
        for co in 0..cout {
            let bias = b.data()[co];
            out[(bi * cout + co) * lout..(bi * cout + co + 1) * lout].iter_mut().for_each(|v| *v += bias);
        }
    }
    Tensor::new(&[nb, cout, lout], out)
}

#[allow(clippy::too_many_arguments)]
fn col2im_t(cols: &[f64], nb: usize, cout: usize, k: usize, l: usize, lout: usize, stride: usize, pad: usize) -> Vec<f64> {
    let mut out = vec![0.0; nb * cout * lout];
    let ncol = nb * l;
    for co in 0..cout {
        for kk in 0..k {
            let row = (co * k + kk) * ncol;
            for bi in 0..nb {
                for i in 0..l {
                    let pos = (i * stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < lout {
                        out[(bi * cout + co) * lout + pos as usize] += cols[row + bi * l + i];
                    }
                }
            }
        }
    }
    out
}

fn conv_t1d_backward(x: &Tensor, w: &Tensor, gout: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor, Tensor) {
    let (xs, ws) = (x.shape(), w.shape());
    let (nb, cin, l) = (xs[0], xs[1], xs[2]);
    let (cout, k) = (ws[1], ws[2]);
    let lout = gout.shape()[2];
    let ncol = nb * l;
    let mut gcols = vec![0.0; cout * k * ncol];
    for co in 0..cout {
        for kk in 0..k {
            let row = (co * k + kk) * ncol;
            for bi in 0..nb {
                for i in 0..l {
                    let pos = (i * stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < lout {
                        gcols[row + bi * l + i] = gout.data()[(bi * cout + co) * lout + pos as usize];
                    }
                }
            }
        }
    }
    let xm = bcl_to_mat(x.data(), nb, cin, l);
    let mut gxm = vec![0.0; cin * ncol];
    gemm(MatRef::new(w.data(), cin, cout * k), MatRef::new(&gcols, cout * k, ncol), &mut gxm, 0.0);
    let mut gw = vec![0.0; cin * cout * k];
    gemm(MatRef::new(&xm, cin, ncol), MatRef::new(&gcols, cout * k, ncol).t(), &mut gw, 0.0);
    let mut gb = vec![0.0; cout];
    for bi in 0..nb {
        for co in 0..cout {
            gb[co] += gout.data()[(bi * cout + co) * lout..(bi * cout + co + 1) * lout].iter().sum::<f64>();
        }
    }
    (Tensor::new(xs, mat_to_bcl(&gxm, nb, cin, l)), Tensor::new(ws, gw), Tensor::new(&[cout], gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(w * f(x)))/dx for a graph builder `f`.
    fn check_grad(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars);
        let weights = rand_tensor(&mut rng, g.shape(out));
        let wv = g.input(weights.clone());
        let prod = g.mul(out, wv);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).zip_map(&weights, |a, b| a * b).sum()
        };
        let h = 1e-6;
        for (vi, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[vi]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[vi].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[vi].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                assert!(
                    (a - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {vi} elem {j}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn broadcast_binary_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[2, 1, 4]);
        let c = rand_tensor(&mut rng, &[1, 3, 1]);
        check_grad(vec![a, b, c], |g, v| {
            let m = g.mul(v[0], v[1]);
            let s = g.sub(m, v[2]);
            g.add(s, v[1])
        });
    }

    #[test]
    fn unary_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[3, 5]);
        for kind in [UnaryKind::Sigmoid, UnaryKind::Tanh, UnaryKind::Gelu, UnaryKind::Exp, UnaryKind::Softplus, UnaryKind::Square] {
            check_grad(vec![a.clone()], |g, v| g.unary(v[0], kind));
        }
        let pos = a.map(|x| x.abs() + 0.5);
        check_grad(vec![pos], |g, v| g.sqrt(v[0]));
        let wide = a.map(|x| 4.0 * x);
        check_grad(vec![wide], |g, v| g.unary(v[0], UnaryKind::SpacingPenalty(2.0)));
    }

    #[test]
    fn matmul_and_bmm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[4, 5]);
        check_grad(vec![a.clone(), b], |g, v| g.matmul(v[0], v[1]));
        let c = rand_tensor(&mut rng, &[2, 4, 3]);
        check_grad(vec![a, c], |g, v| g.bmm(v[0], v[1]));
    }

    #[test]
    fn norm_and_softmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 4, 3]);
        let gamma = rand_tensor(&mut rng, &[3]);
        let beta = rand_tensor(&mut rng, &[3]);
        check_grad(vec![x.clone(), gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
        let gg = rand_tensor(&mut rng, &[4]);
        let gb = rand_tensor(&mut rng, &[4]);
        check_grad(vec![x.clone(), gg, gb], |g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-5));
        check_grad(vec![x], |g, v| g.softmax(v[0]));
    }

    #[test]
    fn conv_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[2, 3, 8]);
        let w = rand_tensor(&mut rng, &[4, 3, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        check_grad(vec![x.clone(), w.clone(), b.clone()], |g, v| g.conv1d(v[0], v[1], v[2], 1, 1));
        check_grad(vec![x.clone(), w, b.clone()], |g, v| g.conv1d(v[0], v[1], v[2], 2, 1));
        let wt = rand_tensor(&mut rng, &[3, 4, 4]);
        check_grad(vec![x, wt, b], |g, v| g.conv_transpose1d(v[0], v[1], v[2], 2, 1));
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[2, 3, 7]);
        let w = rand_tensor(&mut rng, &[2, 3, 3]);
        let b = rand_tensor(&mut rng, &[2]);
        let y = conv1d_forward(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), &[2, 2, 4]);
        for bi in 0..2 {
            for co in 0..2 {
                for o in 0..4 {
                    let mut s = b.data()[co];
                    for ci in 0..3 {
                        for kk in 0..3 {
                            let p = (o * 2 + kk) as isize - 1;
                            if p >= 0 && p < 7 {
                                s += w.at(&[co, ci, kk]) * x.at(&[bi, ci, p as usize]);
                            }
                        }
                    }
                    assert!((y.at(&[bi, co, o]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_transpose_doubles_length_and_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[1, 2, 5]);
        let w = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = Tensor::zeros(&[3]);
        let y = conv_t1d_forward(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), &[1, 3, 10]);
        let mut direct = vec![0.0; 30];
        for ci in 0..2 {
            for co in 0..3 {
                for i in 0..5 {
                    for kk in 0..4 {
                        let p = (i * 2 + kk) as isize - 1;
                        if (0..10).contains(&p) {
                            direct[co * 10 + p as usize] += x.at(&[0, ci, i]) * w.at(&[ci, co, kk]);
                        }
                    }
                }
            }
        }
        for (a, b) in y.data().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let y = rand_tensor(&mut rng, &[2, 2, 4]);
        check_grad(vec![x.clone(), y], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1);
            let n = g.narrow(c, 1, 1, 3);
            let p = g.permute(n, &[2, 0, 1]);
            g.reshape(p, &[4, 6])
        });
        let z = rand_tensor(&mut rng, &[2, 1, 4]);
        check_grad(vec![z], |g, v| g.expand(v[0], &[2, 3, 4]));
        check_grad(vec![x.clone()], |g, v| g.mean_axis(v[0], 1));
        check_grad(vec![x], |g, v| g.dft(v[0]));
    }
}
