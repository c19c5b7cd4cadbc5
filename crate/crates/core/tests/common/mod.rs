//! Helpers and brute-force oracles shared by the integration tests. The
//! oracles deliberately avoid the library's kernels: plain loops over indices.
#![allow(dead_code)]

pub mod suites;

use bikescan::data_model::{BikeId, Status};
use bikescan::features::{FeatureTensor, NormStats};
use bikescan::numerics::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut impl Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape, rand_vec(rng, len, lo, hi)).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn rand_tensor_off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Relative error with a floor on the denominator. A central difference
/// with step 1e-6 carries about 1e-10 of rounding noise, so entries whose
/// true gradient is below the floor are effectively held to 1e-9 absolute.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

pub const FD_STEP: f64 = 1e-6;

/// Central-difference check of every input of a scalar function built on a
/// graph. Returns the largest elementwise relative error.
pub fn grad_check(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    assert_eq!(g.shape(loss), &[] as &[usize], "loss must be a scalar");
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&mut g, &vars);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// Scalar readout `sum(out * w)` with fixed random weights, so every output
/// element contributes a distinct gradient.
pub fn readout(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let w = rand_tensor(&mut rng(seed), &shape, -1.0, 1.0);
    let wv = g.constant(w);
    let p = g.mul(out, wv).unwrap();
    g.sum_all(p)
}

/// `softmax(q k^T / sqrt(dk)) v` for one `[t, dk]` slice, triple loops.
pub fn naive_attention(q: &[f64], k: &[f64], v: &[f64], t: usize, dk: usize, dv: usize) -> (Vec<f64>, Vec<f64>) {
    let mut w = vec![0.0; t * t];
    for i in 0..t {
        let mut row = vec![0.0; t];
        for j in 0..t {
            let mut s = 0.0;
            for c in 0..dk {
                s += q[i * dk + c] * k[j * dk + c];
            }
            row[j] = s / (dk as f64).sqrt();
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        for j in 0..t {
            w[i * t + j] = (row[j] - m).exp() / z;
        }
    }
    let mut out = vec![0.0; t * dv];
    for i in 0..t {
        for c in 0..dv {
            let mut s = 0.0;
            for j in 0..t {
                s += w[i * t + j] * v[j * dv + c];
            }
            out[i * dv + c] = s;
        }
    }
    (out, w)
}

/// `x W + b` for `x: [rows, din]`, `W: [din, dout]`.
pub fn naive_affine(x: &[f64], w: &[f64], b: &[f64], rows: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut s = b[o];
            for i in 0..din {
                s += x[r * din + i] * w[i * dout + o];
            }
            out[r * dout + o] = s;
        }
    }
    out
}

pub struct MhaWeights<'a> {
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    pub wk: &'a [f64],
    pub bk: &'a [f64],
    pub wv: &'a [f64],
    pub bv: &'a [f64],
    pub wo: &'a [f64],
    pub bo: &'a [f64],
}

/// Multi-head attention for one sample `x: [t, d]`: per head, take the
/// column slice of the projections, attend, write into the head's slice of
/// the concatenation, then apply the output projection.
pub fn naive_mha(x: &[f64], t: usize, d: usize, heads: usize, w: &MhaWeights) -> Vec<f64> {
    let dk = d / heads;
    let q = naive_affine(x, w.wq, w.bq, t, d, d);
    let k = naive_affine(x, w.wk, w.bk, t, d, d);
    let v = naive_affine(x, w.wv, w.bv, t, d, d);
    let slice = |m: &[f64], h: usize| -> Vec<f64> {
        let mut s = Vec::with_capacity(t * dk);
        for r in 0..t {
            s.extend_from_slice(&m[r * d + h * dk..r * d + (h + 1) * dk]);
        }
        s
    };
    let mut concat = vec![0.0; t * d];
    for h in 0..heads {
        let (o, _) = naive_attention(&slice(&q, h), &slice(&k, h), &slice(&v, h), t, dk, dk);
        for r in 0..t {
            concat[r * d + h * dk..r * d + (h + 1) * dk].copy_from_slice(&o[r * dk..(r + 1) * dk]);
        }
    }
    naive_affine(&concat, w.wo, w.bo, t, d, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Recount {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

pub fn recount(y_true: &[u8], y_pred: &[u8]) -> Recount {
    let mut c = Recount { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for i in 0..y_true.len() {
        if y_true[i] == 1 && y_pred[i] == 1 {
            c.tp += 1;
        }
        if y_true[i] == 0 && y_pred[i] == 1 {
            c.fp += 1;
        }
        if y_true[i] == 0 && y_pred[i] == 0 {
            c.tn += 1;
        }
        if y_true[i] == 1 && y_pred[i] == 0 {
            c.fn_ += 1;
        }
    }
    c
}

/// (acc, precision, recall, f1) with 0 for empty denominators.
pub fn oracle_metrics(c: Recount) -> (f64, f64, f64, f64) {
    let n = (c.tp + c.fp + c.tn + c.fn_) as f64;
    let acc = (c.tp + c.tn) as f64 / n;
    let p = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let r = if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
    // F1 as the harmonic mean written via counts.
    let f1 = if c.tp == 0 { 0.0 } else { 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64 };
    (acc, p, r, f1)
}

/// Mean absolute reconstruction error, explicit loops over `[n, t, d]`;
/// `mask` selects time steps (all when `None`).
pub fn mae_oracle(x: &[f64], xr: &[f64], n: usize, t: usize, d: usize, mask: Option<&[bool]>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for s in 0..t {
            if let Some(m) = mask {
                if !m[i * t + s] {
                    continue;
                }
            }
            for c in 0..d {
                let k = (i * t + s) * d + c;
                sum += (x[k] - xr[k]).abs();
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// Labeled tensor whose classes differ by a constant shift plus noise.
pub fn toy_tensor(n: usize, t: usize, seed: u64) -> FeatureTensor {
    let mut r = rng(seed);
    let labels: Vec<Option<Status>> =
        (0..n).map(|i| Some(if i % 4 == 0 { Status::Unusable } else { Status::Normal })).collect();
    let mut values = Vec::with_capacity(n * t * 5);
    for l in &labels {
        let shift = if *l == Some(Status::Unusable) { 0.9 } else { -0.3 };
        for step in 0..t {
            for c in 0..5 {
                let base = (step as f64 * 0.4 + c as f64).sin();
                values.push((base + shift + r.random_range(-0.3..0.3)) as f32);
            }
        }
    }
    FeatureTensor {
        n,
        t,
        values,
        labels,
        bike_ids: (0..n).map(|i| BikeId::new(format!("T{i:05}")).unwrap()).collect(),
        norm: NormStats { mean: [0.0; 5], std: [1.0; 5] },
    }
}
