//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Forward
//! values are computed eagerly; [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients for every node that depends on a leaf created
//! with gradient tracking. A graph built with [`Graph::inference`] records no
//! gradient information; its forward values are bit-identical to those of a
//! training graph.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::{gemm, Scalar, Strides};
use crate::tensor::{softmax_in_place, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Abs(Var),
    Exp(Var),
    Silu(Var),
    Sigmoid(Var),
    AddNc(Var, Var),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Depthwise { x: Var, kernel: Rc<Vec<T>>, k: usize },
    Upsample(Var),
    AvgPool(Var),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Rc<Vec<T>>, rstd: Rc<Vec<T>> },
    ConcatChannels(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Rc<Vec<usize>>, probs: Rc<Vec<T>> },
    EmbedMean { table: Var, rows: Rc<Vec<Vec<usize>>> },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    data: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.data[v.0]
            .as_ref()
            .map(|d| Tensor::new(&self.shapes[v.0], d.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, zeros when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<(u64, ParamId), Var>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records gradient information.
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()), grad_enabled: true }
    }

    /// A graph for forward evaluation only.
    pub fn inference() -> Self {
        Graph { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad: needs_grad && self.grad_enabled });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Constant input (no gradient).
    pub fn input(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted.
    pub fn input_with_grad(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter of `store` into the graph. Repeated calls return the
    /// same node so gradients from several uses accumulate.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.borrow().get(&key) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, store.is_trainable(id));
        self.params.borrow_mut().insert(key, v);
        v
    }

    /// Gradients of every parameter of `store` that was bound into this graph.
    pub fn param_grads(&self, grads: &Grads<T>, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let params = self.params.borrow();
        (0..store.len())
            .map(|i| {
                let id = ParamId(i);
                params.get(&(store.uid(), id)).and_then(|&v| grads.get(v))
            })
            .collect()
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(a).map(f);
        self.push(v, op, self.needs(a))
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let v = va.zip_map(&vb, f).unwrap_or_else(|e| panic!("binary op: {e}"));
        self.push(v, op, self.needs(a) || self.needs(b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn offset(&self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::Offset(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `a[N, C, ...] + b[N, C]`, broadcasting `b` over the trailing axes.
    pub fn add_nc(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let (n, c) = (va.dim(0), va.dim(1));
        assert_eq!(vb.shape(), &[n, c], "add_nc: bias shape");
        let plane = va.len() / (n * c);
        let mut out = (*va).clone();
        for (chunk, &bv) in out.data_mut().chunks_mut(plane).zip(vb.data()) {
            chunk.iter_mut().for_each(|x| *x += bv);
        }
        self.push(out, Op::AddNc(a, b), self.needs(a) || self.needs(b))
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let (xs, ws) = (vx.shape(), vw.shape());
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
        let geom = ConvGeom { batch: xs[0], in_ch: xs[1], out_ch: ws[0], h: xs[2], w: xs[3], k: ws[2], stride, pad };
        let vb = b.map(|b| self.value(b));
        let y = kernels::conv2d_forward(vx.data(), vw.data(), vb.as_ref().map(|t| t.data()), &geom);
        let shape = [geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(&shape, y).expect("conv shape"), Op::Conv { x, w, b, geom }, needs)
    }

    /// Same fixed `k x k` kernel applied to every channel, no padding.
    pub fn depthwise_valid(&self, x: Var, kernel: Rc<Vec<T>>, k: usize) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        let planes = s[0] * s[1];
        let y = kernels::depthwise_valid_forward(vx.data(), planes, s[2], s[3], &kernel, k);
        let shape = [s[0], s[1], s[2] - k + 1, s[3] - k + 1];
        self.push(Tensor::new(&shape, y).expect("depthwise shape"), Op::Depthwise { x, kernel, k }, self.needs(x))
    }

    pub fn upsample2x(&self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        let y = kernels::upsample2x_forward(vx.data(), s[0] * s[1], s[2], s[3]);
        let shape = [s[0], s[1], 2 * s[2], 2 * s[3]];
        self.push(Tensor::new(&shape, y).expect("upsample shape"), Op::Upsample(x), self.needs(x))
    }

    pub fn avg_pool2x2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        let y = kernels::avgpool2x2_forward(vx.data(), s[0] * s[1], s[2], s[3]);
        let shape = [s[0], s[1], s[2] / 2, s[3] / 2];
        self.push(Tensor::new(&shape, y).expect("pool shape"), Op::AvgPool(x), self.needs(x))
    }

    /// `[N, C, H, W] -> [N, C]` mean over the spatial axes.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        let plane = s[2] * s[3];
        let inv = T::one() / T::from_usize_lossy(plane);
        let y: Vec<T> = vx.data().chunks(plane).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        self.push(Tensor::new(&[s[0], s[1]], y).expect("gap shape"), Op::GlobalAvgPool(x), self.needs(x))
    }

    /// `x[N, I] * w[O, I]^T + b[O]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let (n, i) = (vx.dim(0), vx.item_len());
        let o = vw.dim(0);
        assert_eq!(vw.item_len(), i, "linear: input width {i} vs weight {:?}", vw.shape());
        let mut y = vec![T::zero(); n * o];
        if let Some(b) = b {
            let vb = self.value(b);
            for row in y.chunks_mut(o) {
                row.copy_from_slice(vb.data());
            }
        }
        gemm(n, i, o, T::one(), vx.data(), Strides::row_major(i), vw.data(), Strides::transposed(i), T::one(), &mut y, Strides::row_major(o));
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(&[n, o], y).expect("linear shape"), Op::Linear { x, w, b }, needs)
    }

    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let s = vx.shape();
        let (n, c) = (s[0], s[1]);
        assert_eq!(c % groups, 0, "group_norm: {c} channels into {groups} groups");
        let plane = vx.len() / (n * c);
        let group_len = (c / groups) * plane;
        let eps = T::lit(1e-5);
        let inv_len = T::one() / T::from_usize_lossy(group_len);
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); n * groups];
        let mut y = vec![T::zero(); vx.len()];
        for (gi, chunk) in vx.data().chunks(group_len).enumerate() {
            let mean = chunk.iter().copied().sum::<T>() * inv_len;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_len;
            let r = T::one() / (var + eps).sqrt();
            rstd[gi] = r;
            let base = gi * group_len;
            for (j, &v) in chunk.iter().enumerate() {
                let ch = ((base + j) / plane) % c;
                let h = (v - mean) * r;
                xhat[base + j] = h;
                y[base + j] = h * vg.data()[ch] + vb.data()[ch];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Tensor::new(s, y).expect("gn shape"),
            Op::GroupNorm { x, gamma, beta, groups, xhat: Rc::new(xhat), rstd: Rc::new(rstd) },
            needs,
        )
    }

    pub fn concat_channels(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(sa[0] == sb[0] && sa[2..] == sb[2..], "concat_channels: {sa:?} vs {sb:?}");
        let n = sa[0];
        let (la, lb) = (va.item_len(), vb.item_len());
        let mut y = Vec::with_capacity(va.len() + vb.len());
        for i in 0..n {
            y.extend_from_slice(&va.data()[i * la..(i + 1) * la]);
            y.extend_from_slice(&vb.data()[i * lb..(i + 1) * lb]);
        }
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        self.push(Tensor::new(&shape, y).expect("concat shape"), Op::ConcatChannels(a, b), self.needs(a) || self.needs(b))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let v = (*self.value(x)).clone().reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.push(v, Op::Reshape(x), self.needs(x))
    }

    pub fn sum(&self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push(Tensor::scalar(v), Op::Sum(x), self.needs(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let v = self.value(x).mean();
        self.push(Tensor::scalar(v), Op::Mean(x), self.needs(x))
    }

    /// Summed cross-entropy of `logits[N, K]` against integer targets.
    /// Each row's gradient depends only on that row.
    pub fn cross_entropy_sum(&self, logits: Var, targets: &[usize]) -> Var {
        let vl = self.value(logits);
        let k = vl.item_len();
        assert_eq!(vl.dim(0), targets.len(), "cross_entropy: batch vs targets");
        let mut probs = vl.data().to_vec();
        let mut loss = T::zero();
        for (row, (p, &t)) in vl.data().chunks(k).zip(probs.chunks_mut(k).zip(targets)) {
            assert!(t < k, "cross_entropy: target {t} out of {k} classes");
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[t];
            softmax_in_place(p);
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: Rc::new(targets.to_vec()), probs: Rc::new(probs) },
            self.needs(logits),
        )
    }

    /// Row `n` of the result is the mean of `table` rows `rows[n]`.
    pub fn embed_mean(&self, table: Var, rows: Vec<Vec<usize>>) -> Var {
        let vt = self.value(table);
        let d = vt.item_len();
        let mut y = vec![T::zero(); rows.len() * d];
        for (out, idx) in y.chunks_mut(d).zip(&rows) {
            assert!(!idx.is_empty(), "embed_mean: empty row list");
            let inv = T::one() / T::from_usize_lossy(idx.len());
            for &r in idx {
                for (o, &v) in out.iter_mut().zip(&vt.data()[r * d..(r + 1) * d]) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let n = rows.len();
        self.push(Tensor::new(&[n, d], y).expect("embed shape"), Op::EmbedMean { table, rows: Rc::new(rows) }, self.needs(table))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        assert_eq!(nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            backprop(&nodes, node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Grads { data: grads, shapes }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_with<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce() -> Vec<T>,
) {
    if nodes[v.0].needs_grad {
        accumulate(nodes, grads, v, f());
    }
}

fn backprop<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate_with(nodes, grads, *a, || dy.to_vec());
            accumulate_with(nodes, grads, *b, || dy.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate_with(nodes, grads, *a, || dy.to_vec());
            accumulate_with(nodes, grads, *b, || dy.iter().map(|&g| -g).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate_with(nodes, grads, *a, || dy.iter().zip(vb.data()).map(|(&g, &y)| g * y).collect());
            accumulate_with(nodes, grads, *b, || dy.iter().zip(va.data()).map(|(&g, &x)| g * x).collect());
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate_with(nodes, grads, *a, || dy.iter().zip(vb.data()).map(|(&g, &y)| g / y).collect());
            accumulate_with(nodes, grads, *b, || {
                dy.iter()
                    .zip(va.data().iter().zip(vb.data()))
                    .map(|(&g, (&x, &y))| -g * x / (y * y))
                    .collect()
            });
        }
        Op::Scale(a, s) => accumulate_with(nodes, grads, *a, || dy.iter().map(|&g| g * *s).collect()),
        Op::Offset(a) => accumulate_with(nodes, grads, *a, || dy.to_vec()),
        Op::Abs(a) => {
            let va = val(*a);
            accumulate_with(nodes, grads, *a, || {
                dy.iter()
                    .zip(va.data())
                    .map(|(&g, &x)| if x > T::zero() { g } else if x < T::zero() { -g } else { T::zero() })
                    .collect()
            });
        }
        Op::Exp(a) => {
            let y = node.value.data();
            accumulate_with(nodes, grads, *a, || dy.iter().zip(y).map(|(&g, &e)| g * e).collect());
        }
        Op::Silu(a) => {
            let va = val(*a);
            accumulate_with(nodes, grads, *a, || {
                dy.iter()
                    .zip(va.data())
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (T::one() - s))
                    })
                    .collect()
            });
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            accumulate_with(nodes, grads, *a, || dy.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect());
        }
        Op::AddNc(a, b) => {
            accumulate_with(nodes, grads, *a, || dy.to_vec());
            let vb = val(*b);
            let plane = dy.len() / vb.len();
            accumulate_with(nodes, grads, *b, || dy.chunks(plane).map(|c| c.iter().copied().sum()).collect());
        }
        Op::Conv { x, w, b, geom } => {
            let need_dx = nodes[x.0].needs_grad;
            let need_dw = nodes[w.0].needs_grad;
            let need_db = b.is_some_and(|b| nodes[b.0].needs_grad);
            let cg = kernels::conv2d_backward(val(*x).data(), val(*w).data(), dy, geom, need_dx, need_dw, need_db);
            if let Some(dx) = cg.dx {
                accumulate(nodes, grads, *x, dx);
            }
            if let Some(dw) = cg.dw {
                accumulate(nodes, grads, *w, dw);
            }
            if let (Some(b), Some(db)) = (b, cg.db) {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Depthwise { x, kernel, k } => {
            let s = val(*x).shape();
            accumulate_with(nodes, grads, *x, || {
                kernels::depthwise_valid_backward(dy, s[0] * s[1], s[2], s[3], kernel, *k)
            });
        }
        Op::Upsample(x) => {
            let s = val(*x).shape();
            accumulate_with(nodes, grads, *x, || kernels::upsample2x_backward(dy, s[0] * s[1], s[2], s[3]));
        }
        Op::AvgPool(x) => {
            let s = val(*x).shape();
            accumulate_with(nodes, grads, *x, || kernels::avgpool2x2_backward(dy, s[0] * s[1], s[2], s[3]));
        }
        Op::GlobalAvgPool(x) => {
            let s = val(*x).shape();
            let plane = s[2] * s[3];
            let inv = T::one() / T::from_usize_lossy(plane);
            accumulate_with(nodes, grads, *x, || dy.iter().flat_map(|&g| std::iter::repeat_n(g * inv, plane)).collect());
        }
        Op::Linear { x, w, b } => {
            let (vx, vw) = (val(*x), val(*w));
            let (n, i) = (vx.dim(0), vx.item_len());
            let o = vw.dim(0);
            accumulate_with(nodes, grads, *x, || {
                let mut dx = vec![T::zero(); n * i];
                gemm(n, o, i, T::one(), dy, Strides::row_major(o), vw.data(), Strides::row_major(i), T::zero(), &mut dx, Strides::row_major(i));
                dx
            });
            accumulate_with(nodes, grads, *w, || {
                let mut dw = vec![T::zero(); o * i];
                gemm(o, n, i, T::one(), dy, Strides::transposed(o), vx.data(), Strides::row_major(i), T::zero(), &mut dw, Strides::row_major(i));
                dw
            });
            if let Some(b) = b {
                accumulate_with(nodes, grads, *b, || {
                    let mut db = vec![T::zero(); o];
                    for row in dy.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                    db
                });
            }
        }
        Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
            let vx = val(*x);
            let vg = val(*gamma);
            let s = vx.shape();
            let (n, c) = (s[0], s[1]);
            let plane = vx.len() / (n * c);
            let group_len = (c / groups) * plane;
            accumulate_with(nodes, grads, *gamma, || {
                let mut dg = vec![T::zero(); c];
                for (j, (&g, &h)) in dy.iter().zip(xhat.iter()).enumerate() {
                    dg[(j / plane) % c] += g * h;
                }
                dg
            });
            accumulate_with(nodes, grads, *beta, || {
                let mut db = vec![T::zero(); c];
                for (j, &g) in dy.iter().enumerate() {
                    db[(j / plane) % c] += g;
                }
                db
            });
            accumulate_with(nodes, grads, *x, || {
                let mut dx = vec![T::zero(); vx.len()];
                let m = T::from_usize_lossy(group_len);
                for gi in 0..n * groups {
                    let base = gi * group_len;
                    let mut sum_d = T::zero();
                    let mut sum_dh = T::zero();
                    for j in base..base + group_len {
                        let d = dy[j] * vg.data()[(j / plane) % c];
                        sum_d += d;
                        sum_dh += d * xhat[j];
                    }
                    let r = rstd[gi] / m;
                    for j in base..base + group_len {
                        let d = dy[j] * vg.data()[(j / plane) % c];
                        dx[j] = r * (m * d - sum_d - xhat[j] * sum_dh);
                    }
                }
                dx
            });
        }
        Op::ConcatChannels(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let n = va.dim(0);
            let (la, lb) = (va.item_len(), vb.item_len());
            accumulate_with(nodes, grads, *a, || (0..n).flat_map(|i| dy[i * (la + lb)..i * (la + lb) + la].to_vec()).collect());
            accumulate_with(nodes, grads, *b, || (0..n).flat_map(|i| dy[i * (la + lb) + la..(i + 1) * (la + lb)].to_vec()).collect());
        }
        Op::Reshape(x) => accumulate_with(nodes, grads, *x, || dy.to_vec()),
        Op::Sum(x) => {
            let len = val(*x).len();
            accumulate_with(nodes, grads, *x, || vec![dy[0]; len]);
        }
        Op::Mean(x) => {
            let len = val(*x).len();
            let g = dy[0] / T::from_usize_lossy(len);
            accumulate_with(nodes, grads, *x, || vec![g; len]);
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let k = val(*logits).item_len();
            accumulate_with(nodes, grads, *logits, || {
                let mut d: Vec<T> = probs.iter().map(|&p| p * dy[0]).collect();
                for (row, &t) in targets.iter().enumerate() {
                    d[row * k + t] -= dy[0];
                }
                d
            });
        }
        Op::EmbedMean { table, rows } => {
            let vt = val(*table);
            let d = vt.item_len();
            accumulate_with(nodes, grads, *table, || {
                let mut dt = vec![T::zero(); vt.len()];
                for (g, idx) in dy.chunks(d).zip(rows.iter()) {
                    let inv = T::one() / T::from_usize_lossy(idx.len());
                    for &r in idx {
                        for (o, &gv) in dt[r * d..(r + 1) * d].iter_mut().zip(g) {
                            *o += gv * inv;
                        }
                    }
                }
                dt
            });
        }
    }
}
