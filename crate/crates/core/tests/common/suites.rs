//! Acceptance-style suites. Each returns named checks so that the dedicated
//! test files can assert them one by one and the acceptance runner can
//! summarize them.

use std::fmt;

use bikescan::data_model::Status;
use bikescan::evaluation::{confusion, metrics};
use bikescan::model::{multi_head_attention, scaled_dot_attention, AttentionWeights, Bound, MaskSpec, Mode, ModelConfig, SsTransformer};
use bikescan::numerics::{Graph, Tensor, Var};
use bikescan::training::{ce_loss, mae_loss, mae_loss_node, MaeScope};
use rand::Rng;

use super::*;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    /// Measured error or statistic.
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

impl Check {
    pub fn below(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, bound, pass: value < bound }
    }

    pub fn flag(name: impl Into<String>, pass: bool) -> Self {
        Self { name: name.into(), value: if pass { 0.0 } else { 1.0 }, bound: 0.5, pass }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {:.3e} (bound {:.1e})", if self.pass { "ok  " } else { "FAIL" }, self.name, self.value, self.bound)
    }
}

pub fn worst(checks: &[Check]) -> Option<&Check> {
    checks.iter().max_by(|a, b| (a.value / a.bound).total_cmp(&(b.value / b.bound)))
}

pub const GRAD_TOL: f64 = 1e-4;

fn dims(r: &mut impl Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

/// Central finite-difference check over every parameter the predicate
/// selects. Also reports whether non-selected parameters stayed gradient-free.
pub fn model_grad_check(
    model: &SsTransformer<f64>,
    trainable: impl Fn(usize) -> bool + Copy,
    loss: impl Fn(&SsTransformer<f64>, &mut Graph<f64>, &Bound) -> Var,
) -> (f64, bool) {
    let mut g = Graph::new();
    let b = model.bind(&mut g, trainable);
    let l = loss(model, &mut g, &b);
    g.backward(l).unwrap();
    let frozen_clean = b.vars().iter().enumerate().all(|(i, &v)| trainable(i) || g.grad(v).is_none());
    let analytic: Vec<Option<Tensor<f64>>> = b.vars().iter().map(|&v| g.grad(v).cloned()).collect();

    let eval = |m: &SsTransformer<f64>| -> f64 {
        let mut g = Graph::new();
        let b = m.bind(&mut g, |_| false);
        let l = loss(m, &mut g, &b);
        g.value(l).item()
    };
    let mut m = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..m.params().len() {
        if !trainable(i) {
            continue;
        }
        for j in 0..m.params()[i].numel() {
            let orig = m.params()[i].data()[j];
            m.params_mut()[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&m);
            m.params_mut()[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&m);
            m.params_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i].as_ref().map_or(0.0, |t| t.data()[j]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    (worst, frozen_clean)
}

fn input_batch(r: &mut impl Rng, n: usize, cfg: &ModelConfig) -> Tensor<f64> {
    rand_tensor(r, &[n, cfg.t_steps, cfg.input_dim], -1.5, 1.5)
}

/// Every differentiable op on two random shapes each, then the composed
/// pretraining and fine-tuning losses on several model configurations.
pub fn gradient_suite() -> Vec<Check> {
    let mut out = Vec::new();
    for seed in 0..2u64 {
        let r = &mut rng(1000 + seed);
        let (m, k, n) = (dims(r, 1, 5), dims(r, 1, 5), dims(r, 1, 5));
        let a = rand_tensor(r, &[m, k], -1.0, 1.0);
        let b = rand_tensor(r, &[k, n], -1.0, 1.0);
        out.push(Check::below(format!("matmul [{m},{k}]x[{k},{n}]"), grad_check(&[a, b], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            readout(g, y, seed)
        }), GRAD_TOL));

        let bt = dims(r, 1, 3);
        let a = rand_tensor(r, &[bt, m, k], -1.0, 1.0);
        let b = rand_tensor(r, &[k, n], -1.0, 1.0);
        out.push(Check::below(format!("matmul broadcast [{bt},{m},{k}]x[{k},{n}]"), grad_check(&[a, b], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            readout(g, y, seed)
        }), GRAD_TOL));

        let a = rand_tensor(r, &[2, bt, m, k], -1.0, 1.0);
        let b = rand_tensor(r, &[2, bt, k, n], -1.0, 1.0);
        out.push(Check::below(format!("matmul batched [2,{bt},{m},{k}]"), grad_check(&[a, b], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            readout(g, y, seed)
        }), GRAD_TOL));

        let a = rand_tensor(r, &[bt, m, k], -1.0, 1.0);
        out.push(Check::below(format!("transpose [{bt},{m},{k}]"), grad_check(&[a], |g, v| {
            let y = g.transpose_last2(v[0]).unwrap();
            readout(g, y, seed)
        }), GRAD_TOL));

        let a = rand_tensor(r, &[bt, m, k], -1.0, 1.0);
        let b = rand_tensor(r, &[k], -1.0, 1.0);
        out.push(Check::below(format!("add broadcast [{bt},{m},{k}]+[{k}]"), grad_check(&[a, b], |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            readout(g, y, seed)
        }), GRAD_TOL));

        let a = rand_tensor(r, &[m, k], -1.0, 1.0);
        let b = rand_tensor(r, &[m, k], -1.0, 1.0);
        out.push(Check::below(format!("sub/mul/scale [{m},{k}]"), grad_check(&[a, b], |g, v| {
            let d = g.sub(v[0], v[1]).unwrap();
            let p = g.mul(d, v[1]).unwrap();
            let y = g.scale(p, 0.7);
            readout(g, y, seed)
        }), GRAD_TOL));

        let a = rand_tensor_off_zero(r, &[m, k]);
        out.push(Check::below(format!("relu/abs [{m},{k}]"), grad_check(&[a], |g, v| {
            let x = g.relu(v[0]);
            let y = g.abs(v[0]);
            let s = g.add(x, y).unwrap();
            readout(g, s, seed)
        }), GRAD_TOL));

        let a = rand_tensor(r, &[bt, m, k + 1], -2.0, 2.0);
        out.push(Check::below(format!("softmax [{bt},{m},{}]", k + 1), grad_check(&[a], |g, v| {
            let y = g.softmax_rows(v[0]);
            readout(g, y, seed)
        }), GRAD_TOL));

        let d = k + 1;
        let x = rand_tensor(r, &[bt, m, d], -2.0, 2.0);
        let gain = rand_tensor(r, &[d], 0.5, 1.5);
        let bias = rand_tensor(r, &[d], -0.5, 0.5);
        out.push(Check::below(format!("layer_norm [{bt},{m},{d}]"), grad_check(&[x, gain, bias], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            readout(g, y, seed)
        }), GRAD_TOL));

        let (t, h, dk) = (dims(r, 1, 4), dims(r, 1, 3), dims(r, 1, 3));
        let x = rand_tensor(r, &[bt, t, h * dk], -1.0, 1.0);
        out.push(Check::below(format!("reshape/swap_axes12 [{bt},{t},{h}x{dk}]"), grad_check(&[x], |g, v| {
            let y = g.reshape(v[0], &[bt, t, h, dk]).unwrap();
            let y = g.swap_axes12(y).unwrap();
            readout(g, y, seed)
        }), GRAD_TOL));

        let x = rand_tensor(r, &[bt, t, k], -1.0, 1.0);
        out.push(Check::below(format!("mean_axis1 [{bt},{t},{k}]"), grad_check(&[x], |g, v| {
            let y = g.mean_axis1(v[0]).unwrap();
            readout(g, y, seed)
        }), GRAD_TOL));

        let x = rand_tensor(r, &[m, k], -1.0, 1.0);
        let mut mask: Vec<bool> = (0..m * k).map(|_| r.random::<bool>()).collect();
        mask[0] = true;
        out.push(Check::below(format!("masked_mean/mean_all [{m},{k}]"), grad_check(&[x], |g, v| {
            let w = rand_tensor(&mut rng(seed), &[m, k], -1.0, 1.0);
            let wv = g.constant(w);
            let p = g.mul(v[0], wv).unwrap();
            let a = g.masked_mean(p, Some(mask.clone())).unwrap();
            let b = g.mean_all(p);
            let b = g.scale(b, 0.3);
            g.add(a, b).unwrap()
        }), GRAD_TOL));

        let x = rand_tensor(r, &[m, k], -1.0, 1.0);
        out.push(Check::below(format!("dropout [{m},{k}]"), grad_check(&[x], |g, v| {
            let mut dr = rng(77 + seed);
            let y = g.dropout(v[0], 0.3, &mut dr);
            readout(g, y, seed)
        }), GRAD_TOL));

        let x = rand_tensor(r, &[bt, t, k], -1.0, 1.0);
        let tok = rand_tensor(r, &[k], -1.0, 1.0);
        let rows: Vec<bool> = (0..bt * t).map(|i| i % 2 == 0).collect();
        out.push(Check::below(format!("mask_fill [{bt},{t},{k}]"), grad_check(&[x, tok], |g, v| {
            let y = g.mask_fill(v[0], v[1], rows.clone()).unwrap();
            readout(g, y, seed)
        }), GRAD_TOL));

        let c = dims(r, 2, 4);
        let logits = rand_tensor(r, &[m, c], -2.0, 2.0);
        let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..c)).collect();
        out.push(Check::below(format!("softmax+nll [{m},{c}]"), grad_check(&[logits], |g, v| {
            let p = g.softmax_rows(v[0]);
            g.nll_of_probs(p, &labels).unwrap()
        }), GRAD_TOL));

        let (tq, dq, dv) = (dims(r, 1, 5), dims(r, 1, 4), dims(r, 1, 4));
        let q = rand_tensor(r, &[bt, tq, dq], -1.0, 1.0);
        let k_ = rand_tensor(r, &[bt, tq, dq], -1.0, 1.0);
        let v_ = rand_tensor(r, &[bt, tq, dv], -1.0, 1.0);
        out.push(Check::below(format!("scaled_dot_attention [{bt},{tq},{dq}]"), grad_check(&[q, k_, v_], |g, v| {
            let (o, w) = scaled_dot_attention(g, v[0], v[1], v[2]).unwrap();
            let a = readout(g, o, seed);
            let b = readout(g, w, seed + 10);
            g.add(a, b).unwrap()
        }), GRAD_TOL));

        let (heads, dk) = (dims(r, 1, 3), dims(r, 1, 2));
        let d = heads * dk;
        let x = rand_tensor(r, &[bt, tq, d], -1.0, 1.0);
        let mut ws = vec![x];
        for _ in 0..4 {
            ws.push(rand_tensor(r, &[d, d], -0.8, 0.8));
            ws.push(rand_tensor(r, &[d], -0.2, 0.2));
        }
        out.push(Check::below(format!("multi_head_attention H={heads} d={d} t={tq}"), grad_check(&ws, |g, v| {
            let w = AttentionWeights { w_q: v[1], b_q: v[2], w_k: v[3], b_k: v[4], w_v: v[5], b_v: v[6], w_o: v[7], b_o: v[8] };
            let (o, _) = multi_head_attention(g, v[0], heads, w).unwrap();
            readout(g, o, seed)
        }), GRAD_TOL));
    }

    let configs = [
        (ModelConfig { t_steps: 4, d_model: 4, n_heads: 1, n_layers: 1, d_ff: 6, dropout: 0.0, ..ModelConfig::default() }, 2usize),
        (ModelConfig { t_steps: 5, d_model: 6, n_heads: 2, n_layers: 1, d_ff: 8, dropout: 0.1, ..ModelConfig::default() }, 3),
        (ModelConfig { t_steps: 3, d_model: 8, n_heads: 4, n_layers: 2, d_ff: 4, dropout: 0.2, ..ModelConfig::default() }, 2),
    ];
    for (ci, (cfg, n)) in configs.iter().enumerate() {
        let model = SsTransformer::<f64>::new(cfg.clone(), 500 + ci as u64).unwrap();
        let r = &mut rng(600 + ci as u64);
        let x = input_batch(r, *n, cfg);
        let mut cells = vec![false; n * cfg.t_steps];
        for (i, c) in cells.iter_mut().enumerate() {
            *c = i % 3 == 1;
        }
        let spec = MaskSpec::from_cells(*n, cfg.t_steps, cells).unwrap();
        let tag = format!("L={} H={} d={} T={}", cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.t_steps);

        for (scope_name, masked) in [("full", false), ("masked", true)] {
            let (err, _) = model_grad_check(&model, |_| true, |m, g, b| {
                let xv = g.constant(x.clone());
                let xm = m.apply_mask(g, b, xv, &spec).unwrap();
                let h0 = m.embed(g, b, xm).unwrap();
                let mut dr = rng(900);
                let h = m.encoder_forward(g, b, h0, Mode::Train(&mut dr), None).unwrap();
                let rec = m.reconstruct(g, b, h).unwrap();
                let scope = if masked { MaeScope::Masked(&spec) } else { MaeScope::Full };
                mae_loss_node(g, xv, rec, scope).unwrap()
            });
            out.push(Check::below(format!("pretrain MAE ({scope_name}) {tag}"), err, GRAD_TOL));
        }

        let labels: Vec<usize> = (0..*n).map(|i| i % 2).collect();
        let ce = |m: &SsTransformer<f64>, g: &mut Graph<f64>, b: &Bound| {
            let xv = g.constant(x.clone());
            let h0 = m.embed(g, b, xv).unwrap();
            let h = m.encoder_forward(g, b, h0, Mode::Eval, None).unwrap();
            let p = m.classify(g, b, h).unwrap();
            g.nll_of_probs(p, &labels).unwrap()
        };
        let head = model.head_indices();
        let (err, frozen_clean) = model_grad_check(&model, |i| head.contains(&i), ce);
        out.push(Check::below(format!("finetune CE (head only) {tag}"), err, GRAD_TOL));
        out.push(Check::flag(format!("finetune CE leaves encoder gradient-free {tag}"), frozen_clean));
        let (err, _) = model_grad_check(&model, |_| true, ce);
        out.push(Check::below(format!("supervised CE (all params) {tag}"), err, GRAD_TOL));
    }
    out
}

/// 100 random cases for each attention function against loop oracles.
pub fn attention_suite() -> Vec<Check> {
    let mut sdpa_err: f64 = 0.0;
    let mut mha_err: f64 = 0.0;
    let mut simplex_err: f64 = 0.0;
    for case in 0..100u64 {
        let r = &mut rng(2000 + case);
        let (bt, t, dk, dv) = (dims(r, 1, 3), dims(r, 1, 8), dims(r, 1, 8), dims(r, 1, 8));
        let q = rand_tensor(r, &[bt, t, dk], -2.0, 2.0);
        let k = rand_tensor(r, &[bt, t, dk], -2.0, 2.0);
        let v = rand_tensor(r, &[bt, t, dv], -2.0, 2.0);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let (o, w) = scaled_dot_attention(&mut g, qv, kv, vv).unwrap();
        for b in 0..bt {
            let (eo, ew) = naive_attention(
                &q.data()[b * t * dk..(b + 1) * t * dk],
                &k.data()[b * t * dk..(b + 1) * t * dk],
                &v.data()[b * t * dv..(b + 1) * t * dv],
                t,
                dk,
                dv,
            );
            for (x, y) in g.value(o).data()[b * t * dv..(b + 1) * t * dv].iter().zip(&eo) {
                sdpa_err = sdpa_err.max((x - y).abs());
            }
            for (x, y) in g.value(w).data()[b * t * t..(b + 1) * t * t].iter().zip(&ew) {
                sdpa_err = sdpa_err.max((x - y).abs());
            }
        }
        for row in g.value(w).data().chunks_exact(t) {
            simplex_err = simplex_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }

        let heads = [1usize, 2, 4][r.random_range(0..3)];
        let d = heads * dims(r, 1, 4);
        let x = rand_tensor(r, &[bt, t, d], -1.5, 1.5);
        let ws: Vec<Tensor<f64>> = (0..8)
            .map(|i| if i % 2 == 0 { rand_tensor(r, &[d, d], -0.7, 0.7) } else { rand_tensor(r, &[d], -0.3, 0.3) })
            .collect();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let v: Vec<Var> = ws.iter().map(|t| g.constant(t.clone())).collect();
        let aw = AttentionWeights { w_q: v[0], b_q: v[1], w_k: v[2], b_k: v[3], w_v: v[4], b_v: v[5], w_o: v[6], b_o: v[7] };
        let (o, _) = multi_head_attention(&mut g, xv, heads, aw).unwrap();
        let mw = MhaWeights {
            wq: ws[0].data(),
            bq: ws[1].data(),
            wk: ws[2].data(),
            bk: ws[3].data(),
            wv: ws[4].data(),
            bv: ws[5].data(),
            wo: ws[6].data(),
            bo: ws[7].data(),
        };
        for b in 0..bt {
            let e = naive_mha(&x.data()[b * t * d..(b + 1) * t * d], t, d, heads, &mw);
            for (x, y) in g.value(o).data()[b * t * d..(b + 1) * t * d].iter().zip(&e) {
                mha_err = mha_err.max((x - y).abs());
            }
        }
    }
    vec![
        Check::below("scaled_dot_attention vs loop oracle (100 cases)", sdpa_err, 1e-8),
        Check::below("multi_head_attention vs per-head loop oracle (100 cases)", mha_err, 1e-8),
        Check::below("attention rows sum to 1", simplex_err, 1e-12),
    ]
}

fn to_status(v: u8) -> Status {
    if v == 1 {
        Status::Unusable
    } else {
        Status::Normal
    }
}

/// 1000 random prediction vectors against an independent recount, plus the
/// published precision/recall/F1 pairs.
pub fn metric_suite() -> Vec<Check> {
    let mut count_mismatch = 0usize;
    let mut metric_err: f64 = 0.0;
    let mut acc_swap_err: f64 = 0.0;
    for case in 0..1000u64 {
        let r = &mut rng(3000 + case);
        let n = r.random_range(1..200);
        let p_pos = r.random_range(0.0..1.0);
        let p_flip = r.random_range(0.0..0.6);
        let y: Vec<u8> = (0..n).map(|_| u8::from(r.random::<f64>() < p_pos)).collect();
        let yhat: Vec<u8> = y.iter().map(|&v| if r.random::<f64>() < p_flip { 1 - v } else { v }).collect();
        let want = recount(&y, &yhat);
        let ts: Vec<Status> = y.iter().map(|&v| to_status(v)).collect();
        let ps: Vec<Status> = yhat.iter().map(|&v| to_status(v)).collect();
        let got = confusion(&ts, &ps).unwrap();
        if (got.tp, got.fp, got.tn, got.fn_) != (want.tp, want.fp, want.tn, want.fn_) {
            count_mismatch += 1;
        }
        let m = metrics(&got).unwrap();
        let (acc, p, rc, f1) = oracle_metrics(want);
        for (a, b) in [(m.accuracy, acc), (m.precision, p), (m.recall, rc), (m.f1, f1)] {
            metric_err = metric_err.max((a - b).abs());
        }
        let swapped_t: Vec<Status> = y.iter().map(|&v| to_status(1 - v)).collect();
        let swapped_p: Vec<Status> = yhat.iter().map(|&v| to_status(1 - v)).collect();
        let ms = metrics(&confusion(&swapped_t, &swapped_p).unwrap()).unwrap();
        acc_swap_err = acc_swap_err.max((ms.accuracy - m.accuracy).abs());
    }
    let f1 = |p: f64, r: f64| 2.0 * p * r / (p + r);
    vec![
        Check::below("confusion counts mismatches (1000 vectors)", count_mismatch as f64, 0.5),
        Check::below("metrics vs oracle (1000 vectors)", metric_err, 1e-12),
        Check::below("accuracy invariant under class swap", acc_swap_err, 1e-12),
        Check::below("F1(0.8889, 0.9880) vs 0.9358", (f1(0.8889, 0.9880) - 0.9358).abs(), 5e-4),
        Check::below("F1(0.8787, 0.9879) vs 0.9301", (f1(0.8787, 0.9879) - 0.9301).abs(), 5e-4),
    ]
}

/// MAE against explicit loops, CE at uniform predictions.
pub fn loss_suite() -> Vec<Check> {
    let mut full_err: f64 = 0.0;
    let mut masked_err: f64 = 0.0;
    for case in 0..50u64 {
        let r = &mut rng(4000 + case);
        let (n, t, d) = (dims(r, 1, 6), dims(r, 1, 12), dims(r, 1, 6));
        let x = rand_tensor(r, &[n, t, d], -3.0, 3.0);
        let xr = rand_tensor(r, &[n, t, d], -3.0, 3.0);
        let got = mae_loss(&x, &xr, MaeScope::Full).unwrap();
        full_err = full_err.max((got - mae_oracle(x.data(), xr.data(), n, t, d, None)).abs());
        let mut cells: Vec<bool> = (0..n * t).map(|_| r.random::<bool>()).collect();
        cells[0] = true;
        let spec = MaskSpec::from_cells(n, t, cells.clone()).unwrap();
        let got = mae_loss(&x, &xr, MaeScope::Masked(&spec)).unwrap();
        masked_err = masked_err.max((got - mae_oracle(x.data(), xr.data(), n, t, d, Some(&cells))).abs());
    }
    let mut ce_err: f64 = 0.0;
    for n in [1usize, 2, 7, 64] {
        let labels: Vec<Status> = (0..n).map(|i| if i % 3 == 0 { Status::Unusable } else { Status::Normal }).collect();
        let probs = Tensor::full(&[n, 2], 0.5);
        ce_err = ce_err.max((ce_loss(&labels, &probs).unwrap() - std::f64::consts::LN_2).abs());
    }
    vec![
        Check::below("mae_loss (full) vs triple loop", full_err, 1e-12),
        Check::below("mae_loss (masked) vs triple loop", masked_err, 1e-12),
        Check::below("ce_loss at uniform predictions vs ln 2", ce_err, 1e-9),
    ]
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

fn tensor_hash(t: &Tensor<f32>) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

/// Pretrain briefly, fine-tune, and compare the hash of every tensor.
pub fn freeze_suite() -> Vec<Check> {
    use bikescan::model::HEAD_PARAMS;
    use bikescan::training::{finetune, pretrain, TrainConfig};

    let data = toy_tensor(48, 8, 11);
    let mcfg = ModelConfig { t_steps: 8, d_model: 8, n_heads: 2, n_layers: 2, d_ff: 16, ..ModelConfig::default() };
    let pcfg = TrainConfig { epochs: 2, batch_size: 16, seed: 3, ..TrainConfig::pretrain_default() };
    let (ckpt, _) = pretrain(&data, &mcfg, &pcfg).unwrap();
    let fcfg = TrainConfig { epochs: 5, batch_size: 16, seed: 4, ..TrainConfig::finetune_default() };
    let (ft, _) = finetune(&data, &ckpt, &fcfg).unwrap();

    let mut frozen_equal = true;
    let mut frozen = 0;
    let mut head_changed = true;
    for ((name, before), (name2, after)) in ckpt.tensors.iter().zip(&ft.tensors) {
        assert_eq!(name, name2);
        if HEAD_PARAMS.contains(&name.as_str()) {
            head_changed &= tensor_hash(before) != tensor_hash(after);
        } else {
            frozen += 1;
            frozen_equal &= tensor_hash(before) == tensor_hash(after);
        }
    }
    vec![
        Check::flag(format!("{frozen} non-head tensors hash-identical after finetune"), frozen_equal && frozen > 0),
        Check::flag("head tensors changed", head_changed),
    ]
}

/// Total MACs per sample written out term by term from the layer shapes.
pub fn macs_oracle(cfg: &ModelConfig) -> u64 {
    let (t, din, d, ff, c) = (cfg.t_steps, cfg.input_dim, cfg.d_model, cfg.d_ff, cfg.n_classes);
    let dk = d / cfg.n_heads;
    let mut total = 0usize;
    total += t * din * d; // input projection
    for _ in 0..cfg.n_layers {
        total += 4 * t * d * d; // q, k, v, o
        for _ in 0..cfg.n_heads {
            total += t * t * dk; // scores
            total += t * t * dk; // weighted values
        }
        total += t * d * ff + t * ff * d;
    }
    total += t * d * din; // reconstruction head
    total += d * c; // classifier
    total as u64
}

pub fn complexity_suite() -> Vec<Check> {
    use bikescan::model::count_complexity;
    let r = &mut rng(5000);
    let mut param_mismatch = 0;
    let mut mac_mismatch = 0;
    let mut scaling_fail = 0;
    for _ in 0..10 {
        let heads = [1usize, 2, 4][r.random_range(0..3)];
        let cfg = ModelConfig {
            t_steps: r.random_range(1..40),
            input_dim: r.random_range(1..8),
            d_model: heads * r.random_range(1..12),
            n_heads: heads,
            n_layers: r.random_range(0..4),
            d_ff: r.random_range(1..64),
            n_classes: r.random_range(2..4),
            ..ModelConfig::default()
        };
        let model = SsTransformer::<f32>::new(cfg.clone(), 1).unwrap();
        let enumerated: usize = model.params().iter().map(|p| p.numel()).sum();
        let c = count_complexity(&cfg);
        if c.total_params() != enumerated as u64 {
            param_mismatch += 1;
        }
        if c.macs_per_sample() != macs_oracle(&cfg) {
            mac_mismatch += 1;
        }

        let with = |f: &dyn Fn(&mut ModelConfig)| {
            let mut k = cfg.clone();
            f(&mut k);
            count_complexity(&k)
        };
        // Linear in the number of layers.
        let m: Vec<u64> = (0..4).map(|l| with(&|k| k.n_layers = l).macs_per_sample()).collect();
        let linear_l = m[1] - m[0] == m[2] - m[1] && m[2] - m[1] == m[3] - m[2];
        // FFN term linear in d_ff, nothing else depends on it.
        let f1 = with(&|k| k.d_ff = cfg.d_ff);
        let f2 = with(&|k| k.d_ff = 2 * cfg.d_ff);
        let f3 = with(&|k| k.d_ff = 3 * cfg.d_ff);
        let linear_ff = f2.macs.ffn == 2 * f1.macs.ffn
            && f3.macs.ffn == 3 * f1.macs.ffn
            && f3.macs_per_sample() - f2.macs_per_sample() == f2.macs_per_sample() - f1.macs_per_sample();
        // Attention term quadratic in T, projections linear.
        let t2 = with(&|k| k.t_steps = 2 * cfg.t_steps);
        let t3 = with(&|k| k.t_steps = 3 * cfg.t_steps);
        let quad_t = t2.macs.attention == 4 * c.macs.attention
            && t3.macs.attention == 9 * c.macs.attention
            && t2.macs.projections == 2 * c.macs.projections;
        if !(linear_l && linear_ff && quad_t) {
            scaling_fail += 1;
        }
    }
    vec![
        Check::below("params != enumerated scalars (10 configs)", param_mismatch as f64, 0.5),
        Check::below("MACs != term-by-term oracle (10 configs)", mac_mismatch as f64, 0.5),
        Check::below("MACs scaling violations (L, d_ff, T)", scaling_fail as f64, 0.5),
    ]
}

pub fn split_suite() -> Vec<Check> {
    use bikescan::data_model::{stratified_split, BikeId, BikeRecord};
    let mk = |i: usize, s: Status| BikeRecord {
        bike: BikeId::new(format!("S{i:06}")).unwrap(),
        trips: vec![],
        trajectory: vec![],
        label: Some(s),
    };
    let records: Vec<BikeRecord> = (0..8860)
        .map(|i| mk(i, Status::Normal))
        .chain((0..1870).map(|i| mk(8860 + i, Status::Unusable)))
        .collect();
    let (train, test) = stratified_split(&records, 0.8, 7).unwrap();
    let count = |v: &[BikeRecord], s: Status| v.iter().filter(|r| r.label == Some(s)).count();
    let got = (count(&train, Status::Normal), count(&train, Status::Unusable));
    let held = (count(&test, Status::Normal), count(&test, Status::Unusable));
    vec![
        Check::flag(format!("train per class {got:?} == (7088, 1496)"), got == (7088, 1496)),
        Check::flag(format!("test per class {held:?} == (1772, 374)"), held == (1772, 374)),
    ]
}
