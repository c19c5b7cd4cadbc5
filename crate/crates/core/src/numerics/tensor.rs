use crate::error::{shape_err, Result};

use super::kernels;
use super::Scalar;

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(shape_err(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(shape_err(format!("shape {shape:?} needs {numel} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![S::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    /// `n x n` identity.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { S::one() } else { S::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| T::of(v.as_f64())).collect() }
    }

    /// Batched matrix product with broadcasting over leading dimensions.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let plan = MatmulPlan::new(&self.shape, &other.shape)?;
        let mut out = vec![S::zero(); plan.out_numel()];
        plan.forward(&self.data, &other.data, &mut out);
        Tensor::new(&plan.out_shape, out)
    }

    pub fn transpose_last2(&self) -> Result<Tensor<S>> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(shape_err(format!("transpose needs at least 2 dims, got {:?}", self.shape)));
        }
        let (m, n) = (self.shape[nd - 2], self.shape[nd - 1]);
        let mut out = vec![S::zero(); self.numel()];
        kernels::transpose_last2(&self.data, self.numel() / (m * n), m, n, &mut out);
        let mut shape = self.shape.clone();
        shape.swap(nd - 2, nd - 1);
        Tensor::new(&shape, out)
    }

    pub fn softmax_rows(&self) -> Tensor<S> {
        let n = *self.shape.last().unwrap_or(&1);
        let mut out = vec![S::zero(); self.numel()];
        kernels::softmax_rows(&self.data, n, &mut out);
        Tensor { shape: self.shape.clone(), data: out }
    }

    pub fn layer_norm(&self, gain: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let d = *self.shape.last().unwrap_or(&1);
        if gain.shape != [d] || bias.shape != [d] {
            return Err(shape_err(format!(
                "layer_norm over {:?} needs gain/bias [{d}], got {:?} / {:?}",
                self.shape, gain.shape, bias.shape
            )));
        }
        let rows = self.numel() / d;
        let mut out = vec![S::zero(); self.numel()];
        let mut xhat = vec![S::zero(); self.numel()];
        let mut rstd = vec![S::zero(); rows];
        kernels::layer_norm(&self.data, &gain.data, &bias.data, d, &mut out, &mut xhat, &mut rstd);
        Ok(Tensor { shape: self.shape.clone(), data: out })
    }
}

/// Index bookkeeping for a broadcast batched matmul `[.., m, k] x [.., k, n]`.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// For each output batch: (batch index into a, batch index into b).
    pub pairs: Vec<(usize, usize)>,
    /// `b` is a plain matrix shared by every batch of `a`.
    pub shared_rhs: bool,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(shape_err(format!("matmul needs at least 2-D operands, got {a:?} x {b:?}")));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(shape_err(format!("matmul inner extents differ: {a:?} x {b:?}")));
        }
        let ba = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let nd = ba.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; nd - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(nd);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(shape_err(format!("matmul batch extents not broadcastable: {a:?} x {b:?}")));
            }
            batch.push(x.max(y));
        }
        let total: usize = batch.iter().product();
        let strides = |s: &[usize]| {
            let mut st = vec![0; nd];
            let mut acc = 1;
            for i in (0..nd).rev() {
                st[i] = if s[i] == 1 { 0 } else { acc };
                acc *= s[i];
            }
            st
        };
        let (sa, sb) = (strides(&pa), strides(&pb));
        let mut pairs = Vec::with_capacity(total);
        let mut idx = vec![0usize; nd];
        for _ in 0..total {
            let ia = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
            let ib = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
            pairs.push((ia, ib));
            for d in (0..nd).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut out_shape = batch;
        out_shape.extend_from_slice(&[m, n]);
        Ok(Self { m, k, n, out_shape, pairs, shared_rhs: bb.is_empty() })
    }

    pub fn out_numel(&self) -> usize {
        self.pairs.len() * self.m * self.n
    }

    pub fn forward<S: Scalar>(&self, a: &[S], b: &[S], out: &mut [S]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_rhs {
            // Every batch of `a` uses the same matrix: one tall product.
            kernels::gemm_nn(self.pairs.len() * m, k, n, a, b, out);
            return;
        }
        for (bi, &(ia, ib)) in self.pairs.iter().enumerate() {
            kernels::gemm_nn(
                m,
                k,
                n,
                &a[ia * m * k..(ia + 1) * m * k],
                &b[ib * k * n..(ib + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
    }

    /// Accumulates `g * b^T` into `da`.
    pub fn backward_lhs<S: Scalar>(&self, g: &[S], b: &[S], da: &mut [S]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_rhs {
            kernels::gemm_nt(self.pairs.len() * m, n, k, g, b, da);
            return;
        }
        for (bi, &(ia, ib)) in self.pairs.iter().enumerate() {
            kernels::gemm_nt(
                m,
                n,
                k,
                &g[bi * m * n..(bi + 1) * m * n],
                &b[ib * k * n..(ib + 1) * k * n],
                &mut da[ia * m * k..(ia + 1) * m * k],
            );
        }
    }

    /// Accumulates `a^T * g` into `db`.
    pub fn backward_rhs<S: Scalar>(&self, g: &[S], a: &[S], db: &mut [S]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_rhs {
            kernels::gemm_tn(k, self.pairs.len() * m, n, a, g, db);
            return;
        }
        for (bi, &(ia, ib)) in self.pairs.iter().enumerate() {
            kernels::gemm_tn(
                k,
                m,
                n,
                &a[ia * m * k..(ia + 1) * m * k],
                &g[bi * m * n..(bi + 1) * m * n],
                &mut db[ib * k * n..(ib + 1) * k * n],
            );
        }
    }
}
