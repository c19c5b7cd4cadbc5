use rand::Rng;

use crate::error::{shape_err, Error, Result};

use super::kernels;
use super::tensor::MatmulPlan;
use super::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, plan: MatmulPlan },
    TransposeLast2 { a: Var, batch: usize, m: usize, n: usize },
    /// `b`'s shape is a suffix of `a`'s; `b` is repeated over the leading axes.
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: S },
    Relu { a: Var },
    Abs { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    Reshape { a: Var },
    SwapAxes12 { a: Var, dims: [usize; 4] },
    MeanAxis1 { a: Var, dims: [usize; 3] },
    SumAll { a: Var },
    MaskedMean { a: Var, mask: Option<Vec<bool>>, count: usize },
    Dropout { a: Var, scale: Vec<S> },
    MaskFill { x: Var, token: Var, mask: Vec<bool> },
    NllProbs { p: Var, labels: Vec<usize>, live: Vec<bool> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// order is already a topological order.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Lower bound applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: receives a gradient on [`backward`](Self::backward).
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let mut out = vec![S::zero(); plan.out_numel()];
        plan.forward(self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(&plan.out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, plan }, rg))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose_last2()?;
        let s = self.shape(a);
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.value(a).numel() / (m * n);
        let rg = self.rg(a);
        Ok(self.push(value, Op::TransposeLast2 { a, batch, m, n }, rg))
    }

    /// `a + b`, where `b` may be broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(format!("cannot add {sb:?} onto {sa:?}")));
        }
        let bd = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(bd.len()) {
            for (o, &v) in chunk.iter_mut().zip(bd) {
                *o += v;
            }
        }
        let value = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.shape(a), out).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, c }, rg)
    }

    /// ReLU; the derivative at 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).data().iter().map(|&x| if x > S::zero() { x } else { S::zero() }).collect();
        let value = Tensor::new(self.shape(a), out).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Relu { a }, rg)
    }

    /// Elementwise |a|; the derivative at 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).data().iter().map(|&x| x.abs()).collect();
        let value = Tensor::new(self.shape(a), out).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Abs { a }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        let rg = self.rg(a);
        self.push(value, Op::Softmax { a }, rg)
    }

    /// Layer normalization over the last axis with affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(format!(
                "layer_norm over {:?} needs gain/bias [{d}], got {:?} / {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let n = self.value(x).numel();
        let mut out = vec![S::zero(); n];
        let mut xhat = vec![S::zero(); n];
        let mut rstd = vec![S::zero(); n / d];
        kernels::layer_norm(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            d,
            &mut out,
            &mut xhat,
            &mut rstd,
        );
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let dims: [usize; 4] = s
            .try_into()
            .map_err(|_| shape_err(format!("swap_axes12 needs a 4-D tensor, got {s:?}")))?;
        let mut out = vec![S::zero(); self.value(a).numel()];
        kernels::swap_axes12(self.value(a).data(), dims, &mut out);
        let value = Tensor::new(&[dims[0], dims[2], dims[1], dims[3]], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SwapAxes12 { a, dims }, rg))
    }

    /// Mean over axis 1 of a 3-D tensor: `[n, t, d] -> [n, d]`.
    pub fn mean_axis1(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let dims: [usize; 3] = s
            .try_into()
            .map_err(|_| shape_err(format!("mean_axis1 needs a 3-D tensor, got {s:?}")))?;
        let [n, t, d] = dims;
        let src = self.value(a).data();
        let mut out = vec![S::zero(); n * d];
        for i in 0..n {
            let o = &mut out[i * d..(i + 1) * d];
            for row in src[i * t * d..(i + 1) * t * d].chunks_exact(d) {
                for (x, &v) in o.iter_mut().zip(row) {
                    *x += v;
                }
            }
        }
        let inv = S::one() / S::of(t as f64);
        out.iter_mut().for_each(|x| *x *= inv);
        let value = Tensor::new(&[n, d], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MeanAxis1 { a, dims }, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    /// Mean over every element, or over the elements where `mask` is true.
    pub fn masked_mean(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let data = self.value(a).data();
        let (sum, count) = match &mask {
            None => (data.iter().copied().sum::<S>(), data.len()),
            Some(m) => {
                if m.len() != data.len() {
                    return Err(shape_err(format!("mask of {} cells for {} values", m.len(), data.len())));
                }
                let s = data.iter().zip(m).filter(|(_, &k)| k).map(|(&v, _)| v).sum::<S>();
                (s, m.iter().filter(|&&k| k).count())
            }
        };
        if count == 0 {
            return Err(Error::Invalid("mean over zero selected cells".into()));
        }
        let value = Tensor::scalar(sum / S::of(count as f64));
        let rg = self.rg(a);
        Ok(self.push(value, Op::MaskedMean { a, mask, count }, rg))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        self.masked_mean(a, None).expect("tensors are never empty")
    }

    /// Inverted dropout with keep probability `1 - p`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = S::of(1.0 / (1.0 - p));
        let scale: Vec<S> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let out = self.value(a).data().iter().zip(&scale).map(|(&x, &s)| x * s).collect();
        let value = Tensor::new(self.shape(a), out).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Dropout { a, scale }, rg)
    }

    /// Replaces every masked row of the last axis with `token`.
    /// `x` is `[.., d]`, `token` is `[d]`, and `mask` has one entry per row.
    pub fn mask_fill(&mut self, x: Var, token: Var, mask: Vec<bool>) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        if self.shape(token) != [d] {
            return Err(shape_err(format!("mask token {:?} for rows of {d}", self.shape(token))));
        }
        if mask.len() * d != self.value(x).numel() {
            return Err(shape_err(format!("mask of {} rows for {:?}", mask.len(), self.shape(x))));
        }
        let mut out = self.value(x).data().to_vec();
        let tok = self.value(token).data();
        for (row, &m) in out.chunks_exact_mut(d).zip(&mask) {
            if m {
                row.copy_from_slice(tok);
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(x) || self.rg(token);
        Ok(self.push(value, Op::MaskFill { x, token, mask }, rg))
    }

    /// `-(1/N) sum_n log p[n, y_n]` for probabilities `p: [N, C]`, clamped to
    /// `[1e-12, 1 - 1e-12]` before the log.
    pub fn nll_of_probs(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(p);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err(format!("{} labels for probabilities {s:?}", labels.len())));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(shape_err(format!("label {bad} out of range for {c} classes")));
        }
        let (lo, hi) = (S::of(PROB_CLAMP), S::one() - S::of(PROB_CLAMP));
        let data = self.value(p).data();
        let mut total = S::zero();
        let mut live = Vec::with_capacity(labels.len());
        for (n, &y) in labels.iter().enumerate() {
            let v = data[n * c + y];
            live.push(v > lo && v < hi);
            total += v.max(lo).min(hi).ln();
        }
        let value = Tensor::scalar(-total / S::of(labels.len() as f64));
        let rg = self.rg(p);
        Ok(self.push(value, Op::NllProbs { p, labels: labels.to_vec(), live }, rg))
    }

    /// Reverse pass from a scalar. Gradients of trainable leaves accumulate
    /// across calls until [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut g: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        g[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &gi, &mut g);
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(&gi).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(Tensor::new(self.nodes[i].value.shape(), gi)?),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gi: &[S], g: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let want = |v: Var| nodes[v.0].requires_grad;
        macro_rules! with_buf {
            ($v:expr, |$b:ident| $body:expr) => {{
                let v: Var = $v;
                if want(v) {
                    let len = nodes[v.0].value.numel();
                    let $b: &mut Vec<S> = g[v.0].get_or_insert_with(|| vec![S::zero(); len]);
                    $body;
                }
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                with_buf!(*a, |da| plan.backward_lhs(gi, val(*b), da));
                with_buf!(*b, |db| plan.backward_rhs(gi, val(*a), db));
            }
            Op::TransposeLast2 { a, batch, m, n } => {
                let mut t = vec![S::zero(); gi.len()];
                kernels::transpose_last2(gi, *batch, *n, *m, &mut t);
                with_buf!(*a, |da| add_into(da, &t));
            }
            Op::Add { a, b } => {
                with_buf!(*a, |da| add_into(da, gi));
                with_buf!(*b, |db| {
                    let n = db.len();
                    for chunk in gi.chunks_exact(n) {
                        add_into(db, chunk);
                    }
                });
            }
            Op::Sub { a, b } => {
                with_buf!(*a, |da| add_into(da, gi));
                with_buf!(*b, |db| db.iter_mut().zip(gi).for_each(|(d, &v)| *d -= v));
            }
            Op::Mul { a, b } => {
                with_buf!(*a, |da| da.iter_mut().zip(gi).zip(val(*b)).for_each(|((d, &v), &y)| *d += v * y));
                with_buf!(*b, |db| db.iter_mut().zip(gi).zip(val(*a)).for_each(|((d, &v), &x)| *d += v * x));
            }
            Op::Scale { a, c } => {
                with_buf!(*a, |da| da.iter_mut().zip(gi).for_each(|(d, &v)| *d += v * *c));
            }
            Op::Relu { a } => {
                with_buf!(*a, |da| da.iter_mut().zip(gi).zip(val(*a)).for_each(|((d, &v), &x)| {
                    if x > S::zero() {
                        *d += v
                    }
                }));
            }
            Op::Abs { a } => {
                with_buf!(*a, |da| da.iter_mut().zip(gi).zip(val(*a)).for_each(|((d, &v), &x)| {
                    if x > S::zero() {
                        *d += v
                    } else if x < S::zero() {
                        *d -= v
                    }
                }));
            }
            Op::Softmax { a } => {
                let y = nodes[i].value.data();
                let n = *nodes[i].value.shape().last().unwrap_or(&1);
                with_buf!(*a, |da| kernels::softmax_rows_backward(y, gi, n, da));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = nodes[gain.0].value.numel();
                let gain_v = val(*gain);
                with_buf!(*gain, |dg| kernels::layer_norm_backward(gi, xhat, rstd, gain_v, d, None, Some(dg), None));
                with_buf!(*bias, |db| kernels::layer_norm_backward(gi, xhat, rstd, gain_v, d, None, None, Some(db)));
                with_buf!(*x, |dx| kernels::layer_norm_backward(gi, xhat, rstd, gain_v, d, Some(dx), None, None));
            }
            Op::Reshape { a } => {
                with_buf!(*a, |da| add_into(da, gi));
            }
            Op::SwapAxes12 { a, dims } => {
                let [p, q, r, s] = *dims;
                let mut t = vec![S::zero(); gi.len()];
                kernels::swap_axes12(gi, [p, r, q, s], &mut t);
                with_buf!(*a, |da| add_into(da, &t));
            }
            Op::MeanAxis1 { a, dims } => {
                let [n, t, d] = *dims;
                let inv = S::one() / S::of(t as f64);
                with_buf!(*a, |da| {
                    for s in 0..n {
                        let gs = &gi[s * d..(s + 1) * d];
                        for row in da[s * t * d..(s + 1) * t * d].chunks_exact_mut(d) {
                            row.iter_mut().zip(gs).for_each(|(x, &v)| *x += v * inv);
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                let v = gi[0];
                with_buf!(*a, |da| da.iter_mut().for_each(|x| *x += v));
            }
            Op::MaskedMean { a, mask, count } => {
                let v = gi[0] / S::of(*count as f64);
                with_buf!(*a, |da| match mask {
                    None => da.iter_mut().for_each(|x| *x += v),
                    Some(m) => da.iter_mut().zip(m).filter(|(_, &k)| k).for_each(|(x, _)| *x += v),
                });
            }
            Op::Dropout { a, scale } => {
                with_buf!(*a, |da| da.iter_mut().zip(gi).zip(scale).for_each(|((d, &v), &s)| *d += v * s));
            }
            Op::MaskFill { x, token, mask } => {
                let d = nodes[token.0].value.numel();
                with_buf!(*x, |dx| {
                    for ((dr, gr), &m) in dx.chunks_exact_mut(d).zip(gi.chunks_exact(d)).zip(mask) {
                        if !m {
                            add_into(dr, gr);
                        }
                    }
                });
                with_buf!(*token, |dt| {
                    for (gr, &m) in gi.chunks_exact(d).zip(mask) {
                        if m {
                            add_into(dt, gr);
                        }
                    }
                });
            }
            Op::NllProbs { p, labels, live } => {
                let c = nodes[p.0].value.shape()[1];
                let n = S::of(labels.len() as f64);
                let pv = val(*p);
                with_buf!(*p, |dp| {
                    for (row, (&y, &ok)) in labels.iter().zip(live).enumerate() {
                        if ok {
                            dp[row * c + y] -= gi[0] / (n * pv[row * c + y]);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
