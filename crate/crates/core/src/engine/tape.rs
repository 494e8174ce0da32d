//! Reverse-mode automatic differentiation over a linear operation record.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{shape_err, Result, SpnError};
use crate::scalar::Scalar;

/// Probability floor applied before taking logarithms in likelihood losses.
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Max { input: Var, index: usize },
    Reshape(Var),
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom, batch: usize, cols: Vec<S> },
    SoftmaxChannel(Var),
    NormalizeChannel(Var),
    UpsampleBilinear { input: Var, factor: usize },
    AvgPool { input: Var, factor: usize },
    CosineSim { a: Var, b: Var, a_hat: Vec<S>, b_hat: Vec<S>, a_norm: Vec<S>, b_norm: Vec<S>, dim: usize },
    TopKAggregate { sim: Var, source: Var, k: usize, selection: Vec<usize> },
    ClassNll { pred: Var, targets: Vec<usize>, scale: S },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records executed operations so gradients can be replayed in exact reverse
/// order. Leaves marked `requires_grad` receive gradients; everything derived
/// only from constants is skipped during the backward pass.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

/// Splits a tensor of rank >= 2 into (outer, channels, inner) around axis 1.
fn channel_split(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err!("channel op needs rank >= 2, got {:?}", shape));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, what)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    /// Natural logarithm; rejects non-positive inputs.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > S::zero())) {
            return Err(SpnError::Domain(format!("log of non-positive value {bad}")));
        }
        let out = self.value(a).map(|x| x.ln());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: S = v.data().iter().copied().sum();
        let m = s / S::lit(v.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Maximum over all elements; the gradient goes to the first maximiser.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(shape_err!("max of empty tensor"));
        }
        let mut index = 0;
        for (i, &x) in v.data().iter().enumerate() {
            if x > v.data()[index] {
                index = i;
            }
        }
        let out = Tensor::scalar(v.data()[index]);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Max { input: a, index }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// 2-D cross-correlation over an NCHW input with an `O x C x k x k` kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).nchw()?;
        let [o, wc, kh, kw] = self.value(weight).nchw()?;
        if wc != c || kh != kw {
            return Err(shape_err!(
                "conv2d: input {:?} incompatible with weight {:?}",
                self.value(input).shape(),
                self.value(weight).shape()
            ));
        }
        if kh % 2 == 0 {
            return Err(shape_err!("conv2d: kernel size {kh} must be odd"));
        }
        if self.value(bias).shape() != [o] {
            return Err(shape_err!("conv2d: bias shape {:?}, expected [{o}]", self.value(bias).shape()));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kh {
            return Err(shape_err!("conv2d: {h}x{w} input too small for k={kh}, pad={padding}, stride={stride}"));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kh) / stride + 1;
        let geom = ConvGeom { channels: c, height: h, width: w, kernel: kh, stride, padding, out_h, out_w };
        let (q, p) = (geom.rows(), geom.cols());
        let mut cols = vec![S::zero(); n * q * p];
        let mut out = vec![S::zero(); n * o * p];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let b = self.value(bias).data();
            for bi in 0..n {
                let col = &mut cols[bi * q * p..(bi + 1) * q * p];
                kernels::im2col(&x[bi * c * h * w..(bi + 1) * c * h * w], &geom, col);
                let dst = &mut out[bi * o * p..(bi + 1) * o * p];
                for (oc, row) in dst.chunks_mut(p).enumerate() {
                    row.fill(b[oc]);
                }
                kernels::gemm_nn_add(wt, col, dst, o, q, p);
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        if !rg {
            cols = Vec::new();
        }
        let out = Tensor::new(vec![n, o, out_h, out_w], out)?;
        Ok(self.push(out, Op::Conv2d { input, weight, bias, geom, batch: n, cols }, rg))
    }

    /// Softmax over axis 1, computed with max subtraction.
    pub fn softmax_channel(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (outer, ch, inner) = channel_split(v.shape())?;
        let x = v.data();
        let mut y = vec![S::zero(); x.len()];
        for o in 0..outer {
            let base = o * ch * inner;
            for p in 0..inner {
                let mut m = x[base + p];
                for c in 1..ch {
                    m = m.max(x[base + c * inner + p]);
                }
                let mut z = S::zero();
                for c in 0..ch {
                    let e = (x[base + c * inner + p] - m).exp();
                    y[base + c * inner + p] = e;
                    z += e;
                }
                for c in 0..ch {
                    y[base + c * inner + p] /= z;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), y)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SoftmaxChannel(a), rg))
    }

    /// Divides each axis-1 vector by its sum (inputs must be positive).
    pub fn normalize_channel(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (outer, ch, inner) = channel_split(v.shape())?;
        let x = v.data();
        let mut y = x.to_vec();
        for o in 0..outer {
            let base = o * ch * inner;
            for p in 0..inner {
                let z: S = (0..ch).map(|c| x[base + c * inner + p]).sum();
                if !(z > S::zero()) {
                    return Err(SpnError::Domain(format!("normalize_channel: non-positive channel sum {z}")));
                }
                for c in 0..ch {
                    y[base + c * inner + p] /= z;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), y)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::NormalizeChannel(a), rg))
    }

    /// Bilinear upsampling of an NCHW tensor by an integer factor
    /// (half-pixel centres, clamped edges).
    pub fn upsample_bilinear(&mut self, a: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(SpnError::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let v = self.value(a);
        let [n, c, h, w] = v.nchw()?;
        let (oh, ow) = (h * factor, w * factor);
        let ty = kernels::bilinear_taps::<S>(h, factor);
        let tx = kernels::bilinear_taps::<S>(w, factor);
        let x = v.data();
        let mut y = vec![S::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut y[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (S::one() - wx) + src[y0 * w + x1] * wx;
                    let bot = src[y1 * w + x0] * (S::one() - wx) + src[y1 * w + x1] * wx;
                    dst[oy * ow + ox] = top * (S::one() - wy) + bot * wy;
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], y)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::UpsampleBilinear { input: a, factor }, rg))
    }

    /// Mean over non-overlapping `factor x factor` cells of an NCHW tensor.
    pub fn avg_pool(&mut self, a: Var, factor: usize) -> Result<Var> {
        let v = self.value(a);
        let [n, c, h, w] = v.nchw()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(shape_err!("avg_pool: {h}x{w} not divisible by factor {factor}"));
        }
        let (oh, ow) = (h / factor, w / factor);
        let inv = S::one() / S::lit((factor * factor) as f64);
        let x = v.data();
        let mut y = vec![S::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = S::zero();
                    for dy in 0..factor {
                        for dx in 0..factor {
                            s += x[plane * h * w + (oy * factor + dy) * w + ox * factor + dx];
                        }
                    }
                    y[plane * oh * ow + oy * ow + ox] = s * inv;
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], y)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::AvgPool { input: a, factor }, rg))
    }

    /// Cosine similarity between the columns of `a` (`D x Nm`) and `b`
    /// (`D x Nn`), giving an `Nm x Nn` matrix. Zero-norm columns have
    /// similarity 0 to everything. Values are clamped into [-1, 1].
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (&[da, nm], &[db, nn]) = (va.shape(), vb.shape()) else {
            return Err(shape_err!("cosine_similarity expects rank-2 inputs, got {:?} and {:?}", va.shape(), vb.shape()));
        };
        if da != db {
            return Err(shape_err!("cosine_similarity: feature dims {da} and {db} differ"));
        }
        let (a_hat, a_norm) = normalized_columns(va.data(), da, nm);
        let (b_hat, b_norm) = normalized_columns(vb.data(), db, nn);
        let mut m = vec![S::zero(); nm * nn];
        for i in 0..nm {
            let ai = &a_hat[i * da..(i + 1) * da];
            for j in 0..nn {
                let s = kernels::dot(ai, &b_hat[j * da..(j + 1) * da]);
                m[i * nn + j] = s.max(-S::one()).min(S::one());
            }
        }
        let out = Tensor::new(vec![nm, nn], m)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::CosineSim { a, b, a_hat, b_hat, a_norm, b_norm, dim: da }, rg))
    }

    /// For similarity `sim` (`Nm x Nn`) and per-source-point class vectors
    /// `source` (`C x Nn`), returns `C x Nm` scores
    /// `(1/k) * sum_{j in top_k(sim_i)} sim_ij * source_j`.
    ///
    /// The top-k set is chosen by descending similarity with ties going to the
    /// lower source index, and is held constant in the backward pass.
    pub fn top_k_aggregate(&mut self, sim: Var, source: Var, k: usize) -> Result<Var> {
        let (vm, vs) = (self.value(sim), self.value(source));
        let (&[nm, nn], &[c, ns]) = (vm.shape(), vs.shape()) else {
            return Err(shape_err!("top_k_aggregate expects rank-2 inputs, got {:?} and {:?}", vm.shape(), vs.shape()));
        };
        if ns != nn {
            return Err(shape_err!("top_k_aggregate: {nn} similarity columns vs {ns} source points"));
        }
        if k == 0 || k > nn {
            return Err(SpnError::InvalidArgument(format!("K = {k} outside [1, {nn}]")));
        }
        let m = vm.data();
        let src = vs.data();
        let inv_k = S::one() / S::lit(k as f64);
        let mut selection = Vec::with_capacity(nm * k);
        let mut scratch = Vec::with_capacity(nn);
        let mut out = vec![S::zero(); c * nm];
        for i in 0..nm {
            let row = &m[i * nn..(i + 1) * nn];
            let top = kernels::top_k_indices(row, k, &mut scratch);
            for ch in 0..c {
                let s: S = top.iter().map(|&j| row[j] * src[ch * nn + j]).sum();
                out[ch * nm + i] = s * inv_k;
            }
            selection.extend_from_slice(&top);
        }
        let out = Tensor::new(vec![c, nm], out)?;
        let rg = self.rg(sim) || self.rg(source);
        Ok(self.push(out, Op::TopKAggregate { sim, source, k, selection }, rg))
    }

    /// `scale * sum_p -ln(max(pred[target_p, p], 1e-12))` over an
    /// `N x C x ...` probability tensor, one class index per (n, position).
    pub fn class_nll(&mut self, pred: Var, targets: &[usize], scale: S) -> Result<Var> {
        let v = self.value(pred);
        let (outer, ch, inner) = channel_split(v.shape())?;
        if targets.len() != outer * inner {
            return Err(shape_err!("class_nll: {} targets for {} positions", targets.len(), outer * inner));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= ch) {
            return Err(SpnError::InvalidArgument(format!("class index {bad} >= {ch} classes")));
        }
        let floor = S::lit(PROB_CLAMP);
        let x = v.data();
        let mut total = S::zero();
        for (idx, &t) in targets.iter().enumerate() {
            let (o, p) = (idx / inner, idx % inner);
            total += -x[o * ch * inner + t * inner + p].max(floor).ln();
        }
        let out = Tensor::scalar(total * scale);
        let rg = self.rg(pred);
        Ok(self.push(out, Op::ClassNll { pred, targets: targets.to_vec(), scale }, rg))
    }

    /// Back-propagates from a single-element node; returns gradients for
    /// every node that requires them.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        if self.value(root).len() != 1 {
            return Err(shape_err!("backward needs a scalar root, got shape {:?}", self.value(root).shape()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !self.rg(v) {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s)),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if x[i] > S::zero() {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / x[i];
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = S::lit(self.value(*a).len() as f64);
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Max { input, index } => acc(*input, &mut |d| d[*index] += g[0]),
            Op::Reshape(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g)),
            Op::Conv2d { input, weight, bias, geom, batch, cols } => {
                let o = self.value(*weight).shape()[0];
                let (q, p) = (geom.rows(), geom.cols());
                let in_len = geom.channels * geom.height * geom.width;
                acc(*bias, &mut |d| {
                    for bi in 0..*batch {
                        for (oc, row) in g[bi * o * p..(bi + 1) * o * p].chunks(p).enumerate() {
                            d[oc] += row.iter().copied().sum::<S>();
                        }
                    }
                });
                acc(*weight, &mut |d| {
                    for bi in 0..*batch {
                        kernels::gemm_nt_add(&g[bi * o * p..(bi + 1) * o * p], &cols[bi * q * p..(bi + 1) * q * p], d, o, p, q);
                    }
                });
                let w = self.value(*weight).data();
                acc(*input, &mut |d| {
                    let mut dcols = vec![S::zero(); q * p];
                    for bi in 0..*batch {
                        dcols.fill(S::zero());
                        kernels::gemm_tn_add(w, &g[bi * o * p..(bi + 1) * o * p], &mut dcols, o, q, p);
                        kernels::col2im_add(&dcols, geom, &mut d[bi * in_len..(bi + 1) * in_len]);
                    }
                });
            }
            Op::SoftmaxChannel(a) => {
                let y = node.value.data();
                let (outer, ch, inner) = channel_split(node.value.shape()).expect("checked in forward");
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        let base = o * ch * inner;
                        for p in 0..inner {
                            let s: S = (0..ch).map(|c| g[base + c * inner + p] * y[base + c * inner + p]).sum();
                            for c in 0..ch {
                                let i = base + c * inner + p;
                                d[i] += y[i] * (g[i] - s);
                            }
                        }
                    }
                });
            }
            Op::NormalizeChannel(a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let (outer, ch, inner) = channel_split(node.value.shape()).expect("checked in forward");
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        let base = o * ch * inner;
                        for p in 0..inner {
                            let z: S = (0..ch).map(|c| x[base + c * inner + p]).sum();
                            let s: S = (0..ch).map(|c| g[base + c * inner + p] * y[base + c * inner + p]).sum();
                            for c in 0..ch {
                                let i = base + c * inner + p;
                                d[i] += (g[i] - s) / z;
                            }
                        }
                    }
                });
            }
            Op::UpsampleBilinear { input, factor } => {
                let [n, c, h, w] = self.value(*input).nchw().expect("checked in forward");
                let (oh, ow) = (h * factor, w * factor);
                let ty = kernels::bilinear_taps::<S>(h, *factor);
                let tx = kernels::bilinear_taps::<S>(w, *factor);
                acc(*input, &mut |d| {
                    for plane in 0..n * c {
                        let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                        let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                                let gv = src[oy * ow + ox];
                                let top = gv * (S::one() - wy);
                                let bot = gv * wy;
                                dst[y0 * w + x0] += top * (S::one() - wx);
                                dst[y0 * w + x1] += top * wx;
                                dst[y1 * w + x0] += bot * (S::one() - wx);
                                dst[y1 * w + x1] += bot * wx;
                            }
                        }
                    }
                });
            }
            Op::AvgPool { input, factor } => {
                let [n, c, h, w] = self.value(*input).nchw().expect("checked in forward");
                let (oh, ow) = (h / factor, w / factor);
                let inv = S::one() / S::lit((factor * factor) as f64);
                acc(*input, &mut |d| {
                    for plane in 0..n * c {
                        for yy in 0..h {
                            for xx in 0..w {
                                d[plane * h * w + yy * w + xx] += g[plane * oh * ow + (yy / factor) * ow + xx / factor] * inv;
                            }
                        }
                    }
                });
            }
            Op::CosineSim { a, b, a_hat, b_hat, a_norm, b_norm, dim } => {
                let dim = *dim;
                let (nm, nn) = (a_norm.len(), b_norm.len());
                if self.rg(*a) {
                    // d a_hat_i = sum_j g_ij b_hat_j
                    let mut dh = vec![S::zero(); nm * dim];
                    kernels::gemm_nn_add(g, b_hat, &mut dh, nm, nn, dim);
                    acc(*a, &mut |d| unnormalize_grad(&dh, a_hat, a_norm, dim, d));
                }
                if self.rg(*b) {
                    let mut dh = vec![S::zero(); nn * dim];
                    kernels::gemm_tn_add(g, a_hat, &mut dh, nm, nn, dim);
                    acc(*b, &mut |d| unnormalize_grad(&dh, b_hat, b_norm, dim, d));
                }
            }
            Op::TopKAggregate { sim, source, k, selection } => {
                let [nm, nn] = [self.value(*sim).shape()[0], self.value(*sim).shape()[1]];
                let c = self.value(*source).shape()[0];
                let inv_k = S::one() / S::lit(*k as f64);
                let m = self.value(*sim).data();
                let src = self.value(*source).data();
                acc(*sim, &mut |d| {
                    for i in 0..nm {
                        for &j in &selection[i * k..(i + 1) * k] {
                            let s: S = (0..c).map(|ch| g[ch * nm + i] * src[ch * nn + j]).sum();
                            d[i * nn + j] += s * inv_k;
                        }
                    }
                });
                acc(*source, &mut |d| {
                    for i in 0..nm {
                        for &j in &selection[i * k..(i + 1) * k] {
                            let w = m[i * nn + j] * inv_k;
                            for ch in 0..c {
                                d[ch * nn + j] += g[ch * nm + i] * w;
                            }
                        }
                    }
                });
            }
            Op::ClassNll { pred, targets, scale } => {
                let x = self.value(*pred).data();
                let (_, ch, inner) = channel_split(self.value(*pred).shape()).expect("checked in forward");
                let floor = S::lit(PROB_CLAMP);
                acc(*pred, &mut |d| {
                    for (idx, &t) in targets.iter().enumerate() {
                        let (o, p) = (idx / inner, idx % inner);
                        let i = o * ch * inner + t * inner + p;
                        if x[i] > floor {
                            d[i] -= g[0] * *scale / x[i];
                        }
                    }
                });
            }
        }
    }
}

/// Column-normalises a `dim x n` matrix, returning the unit vectors stored
/// point-major (`n x dim`) and the original norms.
fn normalized_columns<S: Scalar>(x: &[S], dim: usize, n: usize) -> (Vec<S>, Vec<S>) {
    let mut hat = vec![S::zero(); n * dim];
    let mut norms = vec![S::zero(); n];
    for j in 0..n {
        let mut ss = S::zero();
        for d in 0..dim {
            ss += x[d * n + j] * x[d * n + j];
        }
        let norm = ss.sqrt();
        norms[j] = norm;
        if norm > S::zero() {
            for d in 0..dim {
                hat[j * dim + d] = x[d * n + j] / norm;
            }
        }
    }
    (hat, norms)
}

/// Chains gradients w.r.t. unit vectors (point-major) back to the raw
/// `dim x n` matrix: `dx = (dh - h (h . dh)) / |x|`.
fn unnormalize_grad<S: Scalar>(dh: &[S], hat: &[S], norms: &[S], dim: usize, out: &mut [S]) {
    let n = norms.len();
    for j in 0..n {
        if !(norms[j] > S::zero()) {
            continue;
        }
        let h = &hat[j * dim..(j + 1) * dim];
        let gh = &dh[j * dim..(j + 1) * dim];
        let proj = kernels::dot(h, gh);
        for d in 0..dim {
            out[d * n + j] += (gh[d] - h[d] * proj) / norms[j];
        }
    }
}
