//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with a
//! closure mapping the output gradient to gradients of the inputs. Calling
//! [`Graph::backward`] walks the tape in reverse once.
//!
//! Only the operations the segmentation network needs are provided; modules can
//! add fused operations through [`Graph::custom`].

use std::cell::RefCell;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Operation tape. Create one per forward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }

    /// Gradient of `var`, or zeros of its shape if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    fn push(&self, value: Tensor<T>, parents: Vec<usize>, backward: Option<BackwardFn<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents, backward, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Value that gradients do not flow into.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, vec![], None, false)
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, vec![], None, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a user-defined operation. `backward` receives the output gradient
    /// and must return one gradient per parent, in order.
    pub fn custom<'g>(
        &'g self,
        parents: &[Var<'g, T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Vec<Tensor<T>> + 'static,
    ) -> Var<'g, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let ids = parents.iter().map(|p| p.id).collect();
        if requires_grad {
            self.push(value, ids, Some(Box::new(backward)), true)
        } else {
            self.push(value, ids, None, false)
        }
    }

    /// Backpropagates from a scalar `output` (seed gradient 1).
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let seed = Tensor::ones(output.value().shape());
        self.backward_with(output, seed)
    }

    pub fn backward_with(&self, output: Var<'_, T>, seed: Tensor<T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[id].as_ref() else { continue };
            let parent_grads = backward(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, value: Tensor<T>, backward: impl Fn(&Tensor<T>) -> Tensor<T> + 'static) -> Self {
        self.graph.custom(&[self], value, move |g| vec![backward(g)])
    }

    pub fn add(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let out = a.zip_map(&b, |x, y| x + y);
        self.graph.custom(&[self, other], out, |g| vec![g.clone(), g.clone()])
    }

    pub fn sub(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let out = a.zip_map(&b, |x, y| x - y);
        self.graph.custom(&[self, other], out, |g| vec![g.clone(), g.map(|x| -x)])
    }

    pub fn mul(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph.custom(&[self, other], out, move |g| vec![g.zip_map(&b, |x, y| x * y), g.zip_map(&a, |x, y| x * y)])
    }

    pub fn scale(self, s: T) -> Self {
        let out = self.value().scale(s);
        self.unary(out, move |g| g.scale(s))
    }

    pub fn relu(self) -> Self {
        let x = self.value();
        let out = x.map(|v| v.max(T::zero()));
        self.unary(out, move |g| g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Self {
        let x = self.value();
        let k = T::of((2.0 / std::f64::consts::PI).sqrt());
        let c = T::of(0.044715);
        let half = T::of(0.5);
        let three = T::of(3.0);
        let out = x.map(|v| half * v * (T::one() + (k * (v + c * v * v * v)).tanh()));
        self.unary(out, move |g| {
            g.zip_map(&x, |gv, v| {
                let t = (k * (v + c * v * v * v)).tanh();
                let d = half * (T::one() + t) + half * v * (T::one() - t * t) * k * (T::one() + three * c * v * v);
                gv * d
            })
        })
    }

    pub fn sum(self) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.unary(out, move |g| Tensor::full(&shape, g.data()[0]))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = x.reshape(shape).expect("reshape: element count mismatch");
        self.unary(out, move |g| g.reshape(&in_shape).unwrap())
    }

    pub fn permute(self, axes: &[usize]) -> Self {
        let out = self.value().permute(axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.unary(out, move |g| g.permute(&inverse))
    }

    pub fn concat(parts: &[Self], axis: usize) -> Self {
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis).expect("concat: incompatible shapes");
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let graph = parts[0].graph;
        graph.custom(parts, out, move |g| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&len| {
                    let part = g.narrow(axis, start, len).unwrap();
                    start += len;
                    part
                })
                .collect()
        })
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Self {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = x.narrow(axis, start, len).expect("narrow out of range");
        self.unary(out, move |g| {
            let outer: usize = in_shape[..axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            let gd = g.data();
            for o in 0..outer {
                let dst = (o * in_shape[axis] + start) * inner;
                let src = o * len * inner;
                d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
            }
            dx
        })
    }

    /// Keeps every `step`-th index along `axis`, starting at 0.
    pub fn subsample(self, axis: usize, step: usize) -> Self {
        if step == 1 {
            return self;
        }
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = x.subsample(axis, step);
        self.unary(out, move |g| {
            let outer: usize = in_shape[..axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let n_in = in_shape[axis];
            let n_out = g.shape()[axis];
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            let gd = g.data();
            for o in 0..outer {
                for j in 0..n_out {
                    let dst = (o * n_in + j * step) * inner;
                    let src = (o * n_out + j) * inner;
                    d[dst..dst + inner].copy_from_slice(&gd[src..src + inner]);
                }
            }
            dx
        })
    }

    /// Mean over the trailing `n` axes.
    pub fn mean_trailing(self, n: usize) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(n <= shape.len());
        let keep = &shape[..shape.len() - n];
        let inner: usize = shape[shape.len() - n..].iter().product();
        let inv = T::one() / T::from_usize(inner).unwrap();
        let data: Vec<T> = x.data().chunks(inner).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new(keep, data).unwrap();
        self.unary(out, move |g| {
            let data: Vec<T> = g.data().iter().flat_map(|&v| std::iter::repeat(v * inv).take(inner)).collect();
            Tensor::new(&shape, data).unwrap()
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Self {
        let x = self.value();
        let d = *x.shape().last().expect("softmax of a scalar");
        let mut y = Tensor::zeros(x.shape());
        for (row, out) in x.data().chunks(d).zip(y.data_mut().chunks_mut(d)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                s += *o;
            }
            for o in out.iter_mut() {
                *o /= s;
            }
        }
        let y_saved = y.clone();
        self.unary(y, move |g| {
            let mut dx = Tensor::zeros(g.shape());
            for ((gr, yr), dr) in g.data().chunks(d).zip(y_saved.data().chunks(d)).zip(dx.data_mut().chunks_mut(d)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            dx
        })
    }

    /// `x @ w^T + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(self, weight: Self, bias: Option<Self>) -> Self {
        let x = self.value();
        let w = weight.value();
        let (n, din) = (x.shape()[0], x.shape()[1]);
        let dout = w.shape()[0];
        assert_eq!(x.ndim(), 2, "linear: input must be 2-d");
        assert_eq!(w.shape(), &[dout, din], "linear: weight shape");
        let mut y = Tensor::zeros(&[n, dout]);
        if let Some(b) = &bias {
            let b = b.value();
            assert_eq!(b.shape(), &[dout], "linear: bias shape");
            for row in y.data_mut().chunks_mut(dout) {
                row.copy_from_slice(b.data());
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(n, din, dout, T::one(), x.data(), (din as isize, 1), w.data(), (1, din as isize), beta, y.data_mut(), (dout as isize, 1));
        let has_bias = bias.is_some();
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.custom(&parents, y, move |g| {
            let mut dx = Tensor::zeros(&[n, din]);
            T::gemm(n, dout, din, T::one(), g.data(), (dout as isize, 1), w.data(), (din as isize, 1), T::zero(), dx.data_mut(), (din as isize, 1));
            let mut dw = Tensor::zeros(&[dout, din]);
            T::gemm(dout, n, din, T::one(), g.data(), (1, dout as isize), x.data(), (din as isize, 1), T::zero(), dw.data_mut(), (din as isize, 1));
            let mut out = vec![dx, dw];
            if has_bias {
                let mut db = Tensor::zeros(&[dout]);
                for row in g.data().chunks(dout) {
                    for (d, &v) in db.data_mut().iter_mut().zip(row) {
                        *d += v;
                    }
                }
                out.push(db);
            }
            out
        })
    }

    /// Batched matrix product. `self: [b, m, k]`; `other: [b, k, n]`, or
    /// `[b, n, k]` when `transpose_other`.
    pub fn bmm(self, other: Self, transpose_other: bool) -> Self {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.ndim(), 3, "bmm: lhs must be 3-d");
        assert_eq!(b.ndim(), 3, "bmm: rhs must be 3-d");
        let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert_eq!(b.shape()[0], batch, "bmm: batch mismatch");
        let n = if transpose_other { b.shape()[1] } else { b.shape()[2] };
        let kb = if transpose_other { b.shape()[2] } else { b.shape()[1] };
        assert_eq!(k, kb, "bmm: inner dims");
        // strides of B viewed as k x n
        let bs: (isize, isize) = if transpose_other { (1, k as isize) } else { (n as isize, 1) };
        let mut y = Tensor::zeros(&[batch, m, n]);
        for i in 0..batch {
            T::gemm(m, k, n, T::one(), &a.data()[i * m * k..], (k as isize, 1), &b.data()[i * k * n..], bs, T::zero(), &mut y.data_mut()[i * m * n..], (n as isize, 1));
        }
        self.graph.custom(&[self, other], y, move |g| {
            let mut da = Tensor::zeros(a.shape());
            let mut db = Tensor::zeros(b.shape());
            for i in 0..batch {
                let gi = &g.data()[i * m * n..];
                // dA = G @ B^T   (B^T viewed as n x k)
                T::gemm(m, n, k, T::one(), gi, (n as isize, 1), &b.data()[i * k * n..], (bs.1, bs.0), T::zero(), &mut da.data_mut()[i * m * k..], (k as isize, 1));
                if transpose_other {
                    // dB [n, k] = G^T @ A
                    T::gemm(n, m, k, T::one(), gi, (1, n as isize), &a.data()[i * m * k..], (k as isize, 1), T::zero(), &mut db.data_mut()[i * k * n..], (k as isize, 1));
                } else {
                    // dB [k, n] = A^T @ G
                    T::gemm(k, m, n, T::one(), &a.data()[i * m * k..], (1, k as isize), gi, (n as isize, 1), T::zero(), &mut db.data_mut()[i * k * n..], (n as isize, 1));
                }
            }
            vec![da, db]
        })
    }

    /// 2-D convolution over the trailing two axes of `x: [n, c, h, w]` with
    /// `weight: [o, c, k, k]`, zero padding `pad` and stride `stride`.
    pub fn conv2d(self, weight: Self, bias: Option<Self>, stride: usize, pad: usize) -> Self {
        let x = self.value();
        let w = weight.value();
        let geo = ConvGeometry::new(x.shape(), w.shape(), stride, pad);
        let ConvGeometry { n, o, ho, wo, .. } = geo;
        let rows = geo.col_rows();
        let cols_n = n * ho * wo;
        let cols = geo.im2col(x.data());
        let mut mat = Tensor::zeros(&[o, cols_n]);
        if let Some(b) = &bias {
            let b = b.value();
            assert_eq!(b.shape(), &[o], "conv2d: bias shape");
            for (row, &bv) in mat.data_mut().chunks_mut(cols_n).zip(b.data()) {
                row.fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(o, rows, cols_n, T::one(), w.data(), (rows as isize, 1), &cols, (cols_n as isize, 1), beta, mat.data_mut(), (cols_n as isize, 1));
        let out = if n == 1 {
            mat.into_reshape(&[1, o, ho, wo]).unwrap()
        } else {
            mat.into_reshape(&[o, n, ho * wo]).unwrap().permute(&[1, 0, 2]).into_reshape(&[n, o, ho, wo]).unwrap()
        };
        let has_bias = bias.is_some();
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.custom(&parents, out, move |g| {
            let gmat = if n == 1 {
                g.clone()
            } else {
                g.reshape(&[n, o, ho * wo]).unwrap().permute(&[1, 0, 2])
            };
            let gm = gmat.data();
            let cols = geo.im2col(x.data());
            let mut dw = Tensor::zeros(w.shape());
            T::gemm(o, cols_n, rows, T::one(), gm, (cols_n as isize, 1), &cols, (1, cols_n as isize), T::zero(), dw.data_mut(), (rows as isize, 1));
            let mut dcols = vec![T::zero(); rows * cols_n];
            T::gemm(rows, o, cols_n, T::one(), w.data(), (1, rows as isize), gm, (cols_n as isize, 1), T::zero(), &mut dcols, (cols_n as isize, 1));
            let dx = Tensor::new(x.shape(), geo.col2im(&dcols)).unwrap();
            let mut out = vec![dx, dw];
            if has_bias {
                let db: Vec<T> = gm.chunks(cols_n).map(|r| r.iter().copied().sum()).collect();
                out.push(Tensor::new(&[o], db).unwrap());
            }
            out
        })
    }

    /// Depth-wise 2-D convolution, stride 1: `x: [n, c, h, w]`, `weight: [c, k, k]`.
    pub fn depthwise_conv2d(self, weight: Self, bias: Option<Self>, pad: usize) -> Self {
        let x = self.value();
        let w = weight.value();
        let (n, c, h, wd) = dims4(x.shape());
        let k = w.shape()[1];
        assert_eq!(w.shape(), &[c, k, k], "depthwise_conv2d: weight shape");
        let ho = h + 2 * pad + 1 - k;
        let wo = wd + 2 * pad + 1 - k;
        let mut y = Tensor::zeros(&[n, c, ho, wo]);
        let bias_v = bias.as_ref().map(|b| b.value());
        {
            let yd = y.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let xin = &x.data()[(b * c + ch) * h * wd..][..h * wd];
                    let ker = &w.data()[ch * k * k..][..k * k];
                    let out = &mut yd[(b * c + ch) * ho * wo..][..ho * wo];
                    let bv = bias_v.as_ref().map_or(T::zero(), |bb| bb.data()[ch]);
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut s = bv;
                            for ky in 0..k {
                                let iy = (oy + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    s += ker[ky * k + kx] * xin[iy as usize * wd + ix as usize];
                                }
                            }
                            out[oy * wo + ox] = s;
                        }
                    }
                }
            }
        }
        let has_bias = bias.is_some();
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.custom(&parents, y, move |g| {
            let mut dx = Tensor::zeros(x.shape());
            let mut dw = Tensor::zeros(w.shape());
            let mut db = Tensor::zeros(&[c]);
            for b in 0..n {
                for ch in 0..c {
                    let xin = &x.data()[(b * c + ch) * h * wd..][..h * wd];
                    let ker = &w.data()[ch * k * k..][..k * k];
                    let gout = &g.data()[(b * c + ch) * ho * wo..][..ho * wo];
                    db.data_mut()[ch] += gout.iter().copied().sum();
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = gout[oy * wo + ox];
                            for ky in 0..k {
                                let iy = (oy + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = iy as usize * wd + ix as usize;
                                    dw.data_mut()[ch * k * k + ky * k + kx] += gv * xin[xi];
                                    dx.data_mut()[(b * c + ch) * h * wd + xi] += gv * ker[ky * k + kx];
                                }
                            }
                        }
                    }
                }
            }
            let mut out = vec![dx, dw];
            if has_bias {
                out.push(db);
            }
            out
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Self, beta: Self, eps: T) -> Self {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let rows = x.len() / d;
        let (gam, bet) = (gamma.value(), beta.value());
        assert_eq!(gam.shape(), &[d], "layer_norm: gamma shape");
        assert_eq!(bet.shape(), &[d], "layer_norm: beta shape");
        let (xhat, inv_std) = normalize_groups(x.data(), rows, d, eps);
        let mut y = Tensor::zeros(x.shape());
        for (r, out) in y.data_mut().chunks_mut(d).enumerate() {
            for j in 0..d {
                out[j] = gam.data()[j] * xhat[r * d + j] + bet.data()[j];
            }
        }
        self.graph.custom(&[self, gamma, beta], y, move |g| {
            let mut dgam = vec![T::zero(); d];
            let mut dbet = vec![T::zero(); d];
            let mut dxhat = vec![T::zero(); rows * d];
            for r in 0..rows {
                for j in 0..d {
                    let gv = g.data()[r * d + j];
                    dgam[j] += gv * xhat[r * d + j];
                    dbet[j] += gv;
                    dxhat[r * d + j] = gv * gam.data()[j];
                }
            }
            let dx = normalize_backward(&dxhat, &xhat, &inv_std, rows, d);
            vec![
                Tensor::new(x.shape(), dx).unwrap(),
                Tensor::new(&[d], dgam).unwrap(),
                Tensor::new(&[d], dbet).unwrap(),
            ]
        })
    }

    /// Group normalization for `x: [c, ...]` (channels first, no batch axis).
    pub fn group_norm(self, groups: usize, gamma: Self, beta: Self, eps: T) -> Self {
        let x = self.value();
        let c = x.shape()[0];
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible into {groups} groups");
        let spatial = x.len() / c;
        let per_group = c / groups * spatial;
        let (gam, bet) = (gamma.value(), beta.value());
        assert_eq!(gam.shape(), &[c], "group_norm: gamma shape");
        let (xhat, inv_std) = normalize_groups(x.data(), groups, per_group, eps);
        let mut y = Tensor::zeros(x.shape());
        for (ch, out) in y.data_mut().chunks_mut(spatial).enumerate() {
            let (gv, bv) = (gam.data()[ch], bet.data()[ch]);
            for (o, &xh) in out.iter_mut().zip(&xhat[ch * spatial..(ch + 1) * spatial]) {
                *o = gv * xh + bv;
            }
        }
        self.graph.custom(&[self, gamma, beta], y, move |g| {
            let mut dgam = vec![T::zero(); c];
            let mut dbet = vec![T::zero(); c];
            let mut dxhat = vec![T::zero(); x.len()];
            for ch in 0..c {
                let range = ch * spatial..(ch + 1) * spatial;
                for i in range {
                    let gv = g.data()[i];
                    dgam[ch] += gv * xhat[i];
                    dbet[ch] += gv;
                    dxhat[i] = gv * gam.data()[ch];
                }
            }
            let dx = normalize_backward(&dxhat, &xhat, &inv_std, groups, per_group);
            vec![
                Tensor::new(x.shape(), dx).unwrap(),
                Tensor::new(&[c], dgam).unwrap(),
                Tensor::new(&[c], dbet).unwrap(),
            ]
        })
    }

    /// Bilinear resize of the trailing two axes (corner-aligned sampling).
    pub fn upsample_bilinear(self, out_h: usize, out_w: usize) -> Self {
        let x = self.value();
        let nd = x.ndim();
        assert!(nd >= 2, "upsample_bilinear needs at least 2 axes");
        let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
        if (h, w) == (out_h, out_w) {
            return self;
        }
        let outer = x.len() / (h * w);
        let wy = interp_weights::<T>(h, out_h);
        let wx = interp_weights::<T>(w, out_w);
        let tmp = interp_axis(x.data(), outer * h, w, 1, &wx, out_w);
        let data = interp_axis(&tmp, outer, h, out_w, &wy, out_h);
        let mut shape = x.shape().to_vec();
        shape[nd - 2] = out_h;
        shape[nd - 1] = out_w;
        let in_shape = x.shape().to_vec();
        let out = Tensor::new(&shape, data).unwrap();
        self.unary(out, move |g| {
            let tmp = interp_axis_transpose(g.data(), outer, h, out_w, &wy, out_h);
            let dx = interp_axis_transpose(&tmp, outer * h, w, 1, &wx, out_w);
            Tensor::new(&in_shape, dx).unwrap()
        })
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected a 4-d [n, c, h, w] tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

/// Per-group standardization; returns normalized values and 1/std per group.
fn normalize_groups<T: Scalar>(x: &[T], groups: usize, size: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let inv_n = T::one() / T::from_usize(size).unwrap();
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for gi in 0..groups {
        let seg = &x[gi * size..(gi + 1) * size];
        let mean = seg.iter().copied().sum::<T>() * inv_n;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in xhat[gi * size..(gi + 1) * size].iter_mut().zip(seg) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (xhat, inv_std)
}

fn normalize_backward<T: Scalar>(dxhat: &[T], xhat: &[T], inv_std: &[T], groups: usize, size: usize) -> Vec<T> {
    let inv_n = T::one() / T::from_usize(size).unwrap();
    let mut dx = vec![T::zero(); dxhat.len()];
    for gi in 0..groups {
        let r = gi * size..(gi + 1) * size;
        let mean_d = dxhat[r.clone()].iter().copied().sum::<T>() * inv_n;
        let mean_dx = dxhat[r.clone()].iter().zip(&xhat[r.clone()]).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
        for i in r {
            dx[i] = inv_std[gi] * (dxhat[i] - mean_d - xhat[i] * mean_dx);
        }
    }
    dx
}

/// Source taps `(i0, i1, frac)` for each output index of a corner-aligned resize.
fn interp_weights<T: Scalar>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T)> {
    (0..n_out)
        .map(|o| {
            if n_out == 1 || n_in == 1 {
                return (0, 0, T::zero());
            }
            let src = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, T::of(src - i0 as f64))
        })
        .collect()
}

fn interp_axis<T: Scalar>(x: &[T], outer: usize, n_in: usize, inner: usize, taps: &[(usize, usize, T)], n_out: usize) -> Vec<T> {
    let mut out = vec![T::zero(); outer * n_out * inner];
    for o in 0..outer {
        let src = &x[o * n_in * inner..][..n_in * inner];
        let dst = &mut out[o * n_out * inner..][..n_out * inner];
        for (j, &(i0, i1, f)) in taps.iter().enumerate() {
            let a = T::one() - f;
            for t in 0..inner {
                dst[j * inner + t] = a * src[i0 * inner + t] + f * src[i1 * inner + t];
            }
        }
    }
    out
}

fn interp_axis_transpose<T: Scalar>(g: &[T], outer: usize, n_in: usize, inner: usize, taps: &[(usize, usize, T)], n_out: usize) -> Vec<T> {
    let mut out = vec![T::zero(); outer * n_in * inner];
    for o in 0..outer {
        let src = &g[o * n_out * inner..][..n_out * inner];
        let dst = &mut out[o * n_in * inner..][..n_in * inner];
        for (j, &(i0, i1, f)) in taps.iter().enumerate() {
            let a = T::one() - f;
            for t in 0..inner {
                let gv = src[j * inner + t];
                dst[i0 * inner + t] += a * gv;
                dst[i1 * inner + t] += f * gv;
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        let (n, c, h, wd) = dims4(x);
        assert_eq!(w.len(), 4, "conv2d: weight must be [o, c, k, k]");
        let (o, k) = (w[0], w[2]);
        assert_eq!(w, &[o, c, k, k], "conv2d: weight shape {w:?} vs input channels {c}");
        assert!(stride >= 1);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        Self { n, c, h, w: wd, o, k, stride, pad, ho, wo }
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Input index for output coordinate `o` and kernel tap `t`.
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let cols_n = self.n * self.ho * self.wo;
        let mut cols = vec![T::zero(); self.col_rows() * cols_n];
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * cols_n..][..cols_n];
                    for b in 0..self.n {
                        let plane = &x[(b * self.c + ci) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.ho {
                            let Some(iy) = self.src(oy, ky, self.h) else { continue };
                            let base = (b * self.ho + oy) * self.wo;
                            for ox in 0..self.wo {
                                if let Some(ix) = self.src(ox, kx, self.w) {
                                    dst[base + ox] = plane[iy * self.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let cols_n = self.n * self.ho * self.wo;
        let mut x = vec![T::zero(); self.n * self.c * self.h * self.w];
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * cols_n..][..cols_n];
                    for b in 0..self.n {
                        let plane = &mut x[(b * self.c + ci) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.ho {
                            let Some(iy) = self.src(oy, ky, self.h) else { continue };
                            let base = (b * self.ho + oy) * self.wo;
                            for ox in 0..self.wo {
                                if let Some(ix) = self.src(ox, kx, self.w) {
                                    plane[iy * self.w + ix] += src[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of `f` w.r.t. every input, using a random
    /// projection of the output as the scalar loss.
    fn check_grads(inputs: Vec<Tensor<f64>>, f: impl for<'g> Fn(&[Var<'g, f64>]) -> Var<'g, f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&vars);
        let proj = random(&out.shape(), &mut rng);
        let p = g.constant(proj.clone());
        let loss = out.mul(p).sum();
        let grads = g.backward(loss);
        let eval = |ins: &[Tensor<f64>]| {
            let g = Graph::new();
            let vars: Vec<_> = ins.iter().map(|t| g.leaf(t.clone())).collect();
            let out = f(&vars);
            out.value().zip_map(&proj, |a, b| a * b).sum()
        };
        let h = 1e-6;
        for (vi, var) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(*var);
            for j in 0..inputs[vi].len() {
                let mut plus = inputs.clone();
                plus[vi].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[vi].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.data()[j];
                let err = (fd - an).abs() / (1e-6 + fd.abs().max(an.abs()));
                assert!(err < 1e-5 || (fd - an).abs() < 1e-8, "input {vi} elem {j}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad, n) in &[(1, 1, 1), (2, 1, 3), (1, 0, 2)] {
            let x = random(&[n, 2, 5, 4], &mut rng);
            let w = random(&[3, 2, 3, 3], &mut rng);
            let b = random(&[3], &mut rng);
            check_grads(vec![x, w, b], |v| v[0].conv2d(v[1], Some(v[2]), stride, pad));
        }
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 3, 5, 6], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let g = Graph::new();
        let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), None, 2, 1).value();
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        for b in 0..2 {
            for o in 0..4 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut s = 0.0;
                        for c in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                        s += w.get(&[o, c, ky, kx]) * x.get(&[b, c, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                        assert!((s - y.get(&[b, o, oy, ox])).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_and_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 4, 4], &mut rng);
        let w = random(&[3, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        check_grads(vec![x.clone(), w, b], |v| v[0].depthwise_conv2d(v[1], Some(v[2]), 1));
        let gam = random(&[4], &mut rng);
        let bet = random(&[4], &mut rng);
        check_grads(vec![x.clone(), gam, bet], |v| v[0].layer_norm(v[1], v[2], 1e-5));
        let gam = random(&[2], &mut rng);
        let bet = random(&[2], &mut rng);
        let y = random(&[2, 3, 4], &mut rng);
        check_grads(vec![y, gam.clone(), bet.clone()], |v| v[0].group_norm(2, v[1], v[2], 1e-5));
    }

    #[test]
    fn matmul_family_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[2, 4, 5], &mut rng);
        let bt = random(&[2, 5, 4], &mut rng);
        check_grads(vec![a.clone(), b], |v| v[0].bmm(v[1], false));
        check_grads(vec![a, bt], |v| v[0].bmm(v[1], true));
        let x = random(&[3, 4], &mut rng);
        let w = random(&[2, 4], &mut rng);
        let bias = random(&[2], &mut rng);
        check_grads(vec![x, w, bias], |v| v[0].linear(v[1], Some(v[2])));
    }

    #[test]
    fn elementwise_and_shape_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[2, 3, 4], &mut rng);
        check_grads(vec![a.clone(), b.clone()], |v| v[0].mul(v[1]).sub(v[1]).gelu().add(v[0].relu()));
        check_grads(vec![a.clone()], |v| v[0].permute(&[2, 0, 1]).reshape(&[4, 6]).softmax_last());
        check_grads(vec![a.clone(), b.clone()], |v| Var::concat(&[v[0], v[1]], 1).narrow(1, 2, 3));
        check_grads(vec![a.clone()], |v| v[0].subsample(2, 3).mean_trailing(2));
        check_grads(vec![a], |v| v[0].upsample_bilinear(5, 7));
    }

    #[test]
    fn bilinear_keeps_corners_and_constants() {
        let g = Graph::<f64>::new();
        let x = Tensor::from_fn(&[1, 2, 2], |i| (i[1] * 2 + i[2]) as f64);
        let y = g.constant(x).upsample_bilinear(4, 4).value();
        assert_eq!(y.get(&[0, 0, 0]), 0.0);
        assert_eq!(y.get(&[0, 3, 3]), 3.0);
        assert_eq!(y.get(&[0, 0, 3]), 1.0);
        let c = g.constant(Tensor::full(&[3, 3], 0.7)).upsample_bilinear(8, 5).value();
        assert!(c.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones(&[2]));
        let b = g.leaf(Tensor::ones(&[2]));
        let out = a.mul(b).sum();
        let grads = g.backward(out);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }
}
