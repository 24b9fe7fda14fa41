//! Append-only tape of primitive operations with a reverse sweep.
//!
//! Nodes are pushed in evaluation order, so every parent precedes its
//! children and the reverse sweep is a plain backwards loop. One tape
//! serves one forward/backward pass; independent samples use separate tapes.

use super::kernels::{self, ConvGeom};
use super::{mismatch, ParamId, ParamStore, Real, Tensor, TensorError, LOG_FLOOR};
use crate::rng::SeededRng;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Relu {
        x: usize,
    },
    GlobalAvgPool {
        x: usize,
    },
    SoftmaxVec {
        x: usize,
    },
    SoftmaxSpatial {
        x: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    CrossEntropy {
        target: Vec<T>,
        pred: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Div {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    AddScalar {
        x: usize,
    },
    Ln {
        x: usize,
    },
    Sum {
        x: usize,
    },
    Reshape {
        x: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bindings: Vec<(usize, ParamId)>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf node; with `requires_grad` its gradient is available after
    /// [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; see [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.leaf(store.get(id).value().clone(), true);
        self.bindings.push((v.0, id));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    fn map3(&self, x: Var) -> Result<(usize, usize, usize), TensorError> {
        match *self.shape(x) {
            [f, h, w] => Ok((f, h, w)),
            ref s => Err(mismatch("feature map", format!("expected [F, H, W], got {s:?}"))),
        }
    }

    /// `y = W x + b` with `W` of shape `[m, n]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (m, n) = match *ws {
            [m, n] => (m, n),
            _ => return Err(mismatch("dense", format!("weight shape {ws:?}"))),
        };
        if xs != [n] || bs != [m] {
            return Err(mismatch("dense", format!("x {xs:?}, W {ws:?}, b {bs:?}")));
        }
        let mut out = self.value(b).data().to_vec();
        T::gemm(
            m,
            n,
            1,
            self.value(w).data(),
            false,
            self.value(x).data(),
            false,
            &mut out,
            true,
        );
        let value = Tensor::new(vec![m], out)?;
        Ok(self.push(
            value,
            Op::Dense {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            &[x.0, w.0, b.0],
        ))
    }

    /// Stride-1 cross-correlation with zero "same" padding.
    /// `kernels` is `[F_out, F_in, k, k]` with odd `k`, `bias` is `[F_out]`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var, TensorError> {
        let (c_in, h, w) = self.map3(x)?;
        let (c_out, k) = match *self.shape(kernels) {
            [o, i, k1, k2] if i == c_in && k1 == k2 => (o, k1),
            ref s => {
                return Err(mismatch(
                    "conv2d",
                    format!("kernels {s:?} for input {:?}", self.shape(x)),
                ))
            }
        };
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel(k));
        }
        if self.shape(bias) != [c_out] {
            return Err(mismatch(
                "conv2d",
                format!("bias {:?} for {c_out} outputs", self.shape(bias)),
            ));
        }
        let geom = ConvGeom { c_in, c_out, h, w, k };
        let plane = geom.plane();
        let mut out = vec![T::zero(); c_out * plane];
        for (o, &bv) in self.value(bias).data().iter().enumerate() {
            out[o * plane..(o + 1) * plane].fill(bv);
        }
        let cols = (k > 1).then(|| {
            let mut cols = vec![T::zero(); geom.col_rows() * plane];
            kernels::im2col(&geom, self.value(x).data(), &mut cols);
            cols
        });
        let rhs = cols.as_deref().unwrap_or(self.value(x).data());
        T::gemm(
            c_out,
            geom.col_rows(),
            plane,
            self.value(kernels).data(),
            false,
            rhs,
            false,
            &mut out,
            true,
        );
        let value = Tensor::new(vec![c_out, h, w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: kernels.0,
                b: bias.0,
                geom,
                cols,
            },
            &[x.0, kernels.0, bias.0],
        ))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let (f, h, w) = self.map3(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::OddExtent(h, w));
        }
        let n = f * (h / 2) * (w / 2);
        let mut out = vec![T::zero(); n];
        let mut argmax = vec![0; n];
        kernels::max_pool2(f, h, w, self.value(x).data(), &mut out, &mut argmax);
        let value = Tensor::new(vec![f, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::MaxPool2 { x: x.0, argmax }, &[x.0]))
    }

    /// Nearest-neighbour 2x replication, `[F, H, W] -> [F, 2H, 2W]`.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var, TensorError> {
        let (f, h, w) = self.map3(x)?;
        let mut out = vec![T::zero(); f * 4 * h * w];
        kernels::upsample_nearest2(f, h, w, self.value(x).data(), &mut out);
        let value = Tensor::new(vec![f, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2 { x: x.0 }, &[x.0]))
    }

    /// Decoder upsampler: nearest-neighbour 2x followed by a learnable conv.
    pub fn upsample2(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var, TensorError> {
        let up = self.upsample_nearest2(x)?;
        self.conv2d(up, kernels, bias)
    }

    /// Stacks along the leading (feature) axis; trailing extents must agree.
    pub fn concat_features(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(mismatch("concat_features", format!("{sa:?} vs {sb:?}")));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = Vec::with_capacity(self.value(a).numel() + self.value(b).numel());
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu { x: x.0 }, &[x.0])
    }

    /// `[F, H, W] -> [F]` of plane means.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let (f, h, w) = self.map3(x)?;
        let plane = h * w;
        let inv = T::one() / T::lit(plane as f64);
        let data = self
            .value(x)
            .data()
            .chunks(plane.max(1))
            .take(f)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![f], data)?;
        Ok(self.push(value, Op::GlobalAvgPool { x: x.0 }, &[x.0]))
    }

    /// Softmax over all elements.
    pub fn softmax_vec(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.numel()];
        kernels::softmax(xv.data(), &mut out);
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::SoftmaxVec { x: x.0 }, &[x.0])
    }

    /// Softmax over each `H x W` plane of an `[F, H, W]` map.
    pub fn softmax_spatial(&mut self, x: Var) -> Result<Var, TensorError> {
        let (_, h, w) = self.map3(x)?;
        let plane = h * w;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.numel()];
        for (src, dst) in xv.data().chunks(plane).zip(out.chunks_mut(plane)) {
            kernels::softmax(src, dst);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::SoftmaxSpatial { x: x.0 }, &[x.0]))
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        rng: &mut SeededRng,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidDropoutRate(rate));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x: x.0, mask }, &[x.0]))
    }

    /// `-sum_i target_i ln(max(pred_i, 1e-12))`, skipping zero-weight terms.
    pub fn cross_entropy(&mut self, target: &Tensor<T>, pred: Var) -> Result<Var, TensorError> {
        let pv = self.value(pred);
        if target.numel() != pv.numel() {
            return Err(mismatch(
                "cross_entropy",
                format!("target {:?} vs prediction {:?}", target.shape(), pv.shape()),
            ));
        }
        let floor = T::lit(LOG_FLOOR);
        let loss: T = target
            .data()
            .iter()
            .zip(pv.data())
            .filter(|(&q, _)| q != T::zero())
            .map(|(&q, &r)| -q * r.max(floor).ln())
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                target: target.data().to_vec(),
                pred: pred.0,
            },
            &[pred.0],
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a: a.0, b: b.0 })
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[x.0])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale { x: x.0, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar { x: x.0 })
    }

    /// Natural log with the argument clamped to at least 1e-12.
    pub fn ln(&mut self, x: Var) -> Var {
        let floor = T::lit(LOG_FLOOR);
        self.unary(x, |v| v.max(floor).ln(), Op::Ln { x: x.0 })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::Sum { x: x.0 }, &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x: x.0 }, &[x.0]))
    }

    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.backward_scaled(loss, T::one())
    }

    /// Reverse sweep seeded with `d loss = seed`. Replaces gradients from any
    /// previous sweep.
    pub fn backward_scaled(&mut self, loss: Var, seed: T) -> Result<(), TensorError> {
        let shape = self.shape(loss);
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let Tape { nodes, grads, .. } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        if !nodes[loss.0].needs_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![seed]);

        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            let node = &nodes[i];
            backward_node(nodes, node, g, lower);
        }
        Ok(())
    }

    /// Distance of the recorded point from the nearest non-differentiable
    /// configuration: the smallest `|x|` entering a ReLU and the smallest gap
    /// between a max-pool winner and its runner-up.
    #[doc(hidden)]
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                &Op::Relu { x } => {
                    for v in self.nodes[x].value.data() {
                        margin = margin.min(v.abs().to_f64().unwrap_or(0.0));
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let src = &self.nodes[*x].value;
                    let w = src.shape()[2];
                    for &best in argmax {
                        let (row, col) = (best / w, best % w);
                        let base = (row - row % 2) * w + col - col % 2;
                        for cand in [base, base + 1, base + w, base + w + 1] {
                            if cand != best {
                                let gap = src.data()[best] - src.data()[cand];
                                margin = margin.min(gap.abs().to_f64().unwrap_or(0.0));
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Adds gradients of parameters bound with [`Tape::param`] into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for &(node, id) in &self.bindings {
            if id.store != store.store_id() {
                continue;
            }
            if let Some(Some(g)) = self.grads.get(node) {
                let pg = store.get_mut(id).grad_mut().data_mut();
                for (d, &v) in pg.iter_mut().zip(g) {
                    *d += v;
                }
            }
        }
    }
}

/// Gradient buffer of parent `p`, allocated on first use; `None` when the
/// parent does not need a gradient.
fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], p: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[p].needs_grad {
        return None;
    }
    Some(grads[p].get_or_insert_with(|| vec![T::zero(); nodes[p].value.numel()]))
}

fn add_into<T: Real>(dst: &mut [T], src: impl Iterator<Item = T>) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += v;
    }
}

fn backward_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], lower: &mut [Option<Vec<T>>]) {
    let val = |p: usize| nodes[p].value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::Dense { x, w, b } => {
            let (m, n) = (node.value.numel(), nodes[x].value.numel());
            if let Some(gw) = slot(nodes, lower, w) {
                // gW += g x^T
                T::gemm(m, 1, n, g, false, val(x), false, gw, true);
            }
            if let Some(gb) = slot(nodes, lower, b) {
                add_into(gb, g.iter().copied());
            }
            if let Some(gx) = slot(nodes, lower, x) {
                // gx += W^T g
                T::gemm(n, m, 1, val(w), true, g, false, gx, true);
            }
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let (x, w, b) = (*x, *w, *b);
            let plane = geom.plane();
            let rows = geom.col_rows();
            if let Some(gb) = slot(nodes, lower, b) {
                for (o, d) in gb.iter_mut().enumerate() {
                    *d += g[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
                }
            }
            let cols = cols.as_deref().unwrap_or(val(x));
            if let Some(gw) = slot(nodes, lower, w) {
                T::gemm(geom.c_out, plane, rows, g, false, cols, true, gw, true);
            }
            if nodes[x].needs_grad {
                let wv = val(w);
                if geom.k == 1 {
                    let gx = slot(nodes, lower, x).expect("needs grad");
                    T::gemm(rows, geom.c_out, plane, wv, true, g, false, gx, true);
                } else {
                    let mut gcols = vec![T::zero(); rows * plane];
                    T::gemm(rows, geom.c_out, plane, wv, true, g, false, &mut gcols, false);
                    let gx = slot(nodes, lower, x).expect("needs grad");
                    kernels::col2im_add(geom, &gcols, gx);
                }
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(gx) = slot(nodes, lower, *x) {
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] += gv;
                }
            }
        }
        &Op::Upsample2 { x } => {
            let s = nodes[x].value.shape();
            let (f, h, w) = (s[0], s[1], s[2]);
            if let Some(gx) = slot(nodes, lower, x) {
                kernels::upsample_nearest2_adjoint(f, h, w, g, gx);
            }
        }
        &Op::Concat { a, b } => {
            let na = nodes[a].value.numel();
            if let Some(ga) = slot(nodes, lower, a) {
                add_into(ga, g[..na].iter().copied());
            }
            if let Some(gb) = slot(nodes, lower, b) {
                add_into(gb, g[na..].iter().copied());
            }
        }
        &Op::Relu { x } => {
            if let Some(gx) = slot(nodes, lower, x) {
                let xv = val(x);
                add_into(
                    gx,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() }),
                );
            }
        }
        &Op::GlobalAvgPool { x } => {
            let s = nodes[x].value.shape();
            let plane = s[1] * s[2];
            let inv = T::one() / T::lit(plane as f64);
            if let Some(gx) = slot(nodes, lower, x) {
                for (c, &gv) in g.iter().enumerate() {
                    gx[c * plane..(c + 1) * plane]
                        .iter_mut()
                        .for_each(|d| *d += gv * inv);
                }
            }
        }
        &Op::SoftmaxVec { x } => {
            if let Some(gx) = slot(nodes, lower, x) {
                kernels::softmax_adjoint(node.value.data(), g, gx);
            }
        }
        &Op::SoftmaxSpatial { x } => {
            let s = node.value.shape();
            let plane = s[1] * s[2];
            if let Some(gx) = slot(nodes, lower, x) {
                for ((y, gp), dx) in node
                    .value
                    .data()
                    .chunks(plane)
                    .zip(g.chunks(plane))
                    .zip(gx.chunks_mut(plane))
                {
                    kernels::softmax_adjoint(y, gp, dx);
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = slot(nodes, lower, *x) {
                add_into(gx, g.iter().zip(mask).map(|(&gv, &m)| gv * m));
            }
        }
        Op::CrossEntropy { target, pred } => {
            let floor = T::lit(LOG_FLOOR);
            let pv = val(*pred);
            let g0 = g[0];
            if let Some(gp) = slot(nodes, lower, *pred) {
                for ((d, &q), &r) in gp.iter_mut().zip(target).zip(pv) {
                    if q != T::zero() && r > floor {
                        *d += -g0 * q / r;
                    }
                }
            }
        }
        &Op::Add { a, b } => {
            if let Some(ga) = slot(nodes, lower, a) {
                add_into(ga, g.iter().copied());
            }
            if let Some(gb) = slot(nodes, lower, b) {
                add_into(gb, g.iter().copied());
            }
        }
        &Op::Sub { a, b } => {
            if let Some(ga) = slot(nodes, lower, a) {
                add_into(ga, g.iter().copied());
            }
            if let Some(gb) = slot(nodes, lower, b) {
                add_into(gb, g.iter().map(|&v| -v));
            }
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            if let Some(ga) = slot(nodes, lower, a) {
                add_into(ga, g.iter().zip(bv).map(|(&gv, &y)| gv * y));
            }
            if let Some(gb) = slot(nodes, lower, b) {
                add_into(gb, g.iter().zip(av).map(|(&gv, &x)| gv * x));
            }
        }
        &Op::Div { a, b } => {
            let (av, bv) = (val(a), val(b));
            if let Some(ga) = slot(nodes, lower, a) {
                add_into(ga, g.iter().zip(bv).map(|(&gv, &y)| gv / y));
            }
            if let Some(gb) = slot(nodes, lower, b) {
                add_into(
                    gb,
                    g.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&gv, (&x, &y))| -gv * x / (y * y)),
                );
            }
        }
        &Op::Scale { x, c } => {
            if let Some(gx) = slot(nodes, lower, x) {
                add_into(gx, g.iter().map(|&v| v * c));
            }
        }
        &Op::AddScalar { x } | &Op::Reshape { x } => {
            if let Some(gx) = slot(nodes, lower, x) {
                add_into(gx, g.iter().copied());
            }
        }
        &Op::Ln { x } => {
            let floor = T::lit(LOG_FLOOR);
            let xv = val(x);
            if let Some(gx) = slot(nodes, lower, x) {
                add_into(
                    gx,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > floor { gv / v } else { T::zero() }),
                );
            }
        }
        &Op::Sum { x } => {
            if let Some(gx) = slot(nodes, lower, x) {
                let g0 = g[0];
                gx.iter_mut().for_each(|d| *d += g0);
            }
        }
    }
}
