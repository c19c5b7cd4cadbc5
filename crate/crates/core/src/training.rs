//! Reconstruction losses, masked pretraining and frozen-encoder probing.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data_model::{train_count, Status};
use crate::error::{shape_err, Error, Result};
use crate::features::FeatureTensor;
use crate::model::{Checkpoint, CheckpointMeta, MaskSpec, Mode, ModelConfig, SsTransformer};
use crate::numerics::{Adam, AdamConfig, Graph, Precision, Scalar, Tensor, Var};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    #[default]
    Full,
    MaskedOnly,
}

impl FromStr for LossScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "masked_only" | "masked" => Ok(Self::MaskedOnly),
            other => Err(Error::Config(format!("loss_scope: unknown value `{other}` (full | masked_only)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss_scope: LossScope,
    pub label_fraction: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            loss_scope: LossScope::Full,
            label_fraction: 1.0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self::default()
    }

    /// Linear probing on cached encodings: few cheap steps, so a larger rate.
    pub fn finetune_default() -> Self {
        Self { epochs: 30, lr: 1e-2, ..Self::default() }
    }

    /// Supervised training of the whole network.
    pub fn scratch_default() -> Self {
        Self { epochs: 30, ..Self::default() }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config(format!("{section}.epochs: must be at least 1")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{section}.batch_size: must be at least 1")));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("{section}.lr: {} is not a finite non-negative rate", self.lr)));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!("{section}.label_fraction: {} not in (0, 1]", self.label_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
}

/// One record per completed epoch plus a closing snapshot of named metrics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<EpochRecord>,
    pub snapshot: BTreeMap<String, f64>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
        let f = fs::File::open(path)?;
        let mut entries = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line)?);
            }
        }
        Ok(entries)
    }
}

/// Which cells the reconstruction error is averaged over.
#[derive(Debug, Clone, Copy)]
pub enum MaeScope<'a> {
    Full,
    Masked(&'a MaskSpec),
}

/// Mean absolute reconstruction error as a graph node.
pub fn mae_loss_node<S: Scalar>(g: &mut Graph<S>, x: Var, xr: Var, scope: MaeScope<'_>) -> Result<Var> {
    if g.shape(x) != g.shape(xr) {
        return Err(shape_err(format!("reconstruction {:?} vs input {:?}", g.shape(xr), g.shape(x))));
    }
    let diff = g.sub(x, xr)?;
    let abs = g.abs(diff);
    match scope {
        MaeScope::Full => Ok(g.mean_all(abs)),
        MaeScope::Masked(spec) => {
            let s = g.shape(x);
            if s.len() != 3 || s[0] != spec.n() || s[1] != spec.t() {
                return Err(shape_err(format!("mask [{}, {}] for {s:?}", spec.n(), spec.t())));
            }
            let d = s[2];
            g.masked_mean(abs, Some(spec.expand(d)))
        }
    }
}

/// `mean |x - x_r|` over all cells or over masked time steps only.
pub fn mae_loss<S: Scalar>(x: &Tensor<S>, xr: &Tensor<S>, scope: MaeScope<'_>) -> Result<S> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(x.clone()), g.constant(xr.clone()));
    let l = mae_loss_node(&mut g, a, b, scope)?;
    Ok(g.value(l).item())
}

/// Two-class cross-entropy `-(1/N) sum log y_hat[n, y_n]` with clamped probabilities.
pub fn ce_loss<S: Scalar>(labels: &[Status], probs: &Tensor<S>) -> Result<S> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let idx: Vec<usize> = labels.iter().map(|s| s.index()).collect();
    let l = g.nll_of_probs(p, &idx)?;
    Ok(g.value(l).item())
}

fn check_compatible(tensor: &FeatureTensor, cfg: &ModelConfig) -> Result<()> {
    if tensor.t != cfg.t_steps || tensor.d() != cfg.input_dim {
        return Err(Error::Config(format!(
            "feature tensor is [n, {}, {}] but the model expects [n, {}, {}]",
            tensor.t,
            tensor.d(),
            cfg.t_steps,
            cfg.input_dim
        )));
    }
    if tensor.n == 0 {
        return Err(Error::Invalid("feature tensor has no samples".into()));
    }
    Ok(())
}

fn gather<S: Scalar>(tensor: &FeatureTensor, idx: &[usize]) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(idx.len() * tensor.t * tensor.d());
    for &i in idx {
        data.extend(tensor.sample(i).iter().map(|&v| S::from_f32(v)));
    }
    Tensor::new(&[idx.len(), tensor.t, tensor.d()], data)
}

fn grads_of<S: Scalar>(g: &Graph<S>, vars: &[Var]) -> Vec<Tensor<S>> {
    vars.iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect()
}

fn diverged(phase: &str, epoch: usize) -> Error {
    Error::Diverged { phase: phase.into(), epoch }
}

/// Seed-path tags, so every random stream in a run is independent.
mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const MASK: u64 = 4;
    pub const HEAD: u64 = 5;
    pub const SUBSAMPLE: u64 = 6;
}

pub use tag::INIT as INIT_TAG;

/// Masked-reconstruction pretraining of a freshly initialized model.
/// Labels are ignored.
pub fn pretrain(tensor: &FeatureTensor, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    match tcfg.precision {
        Precision::F32 => pretrain_as::<f32>(tensor, mcfg, tcfg),
        Precision::F64 => pretrain_as::<f64>(tensor, mcfg, tcfg),
    }
}

fn pretrain_as<S: Scalar>(tensor: &FeatureTensor, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    mcfg.validate()?;
    tcfg.validate("pretrain")?;
    check_compatible(tensor, mcfg)?;
    let seed = tcfg.seed;
    let mut model = SsTransformer::<S>::new(mcfg.clone(), derive_seed(seed, &[tag::INIT]))?;
    let mut adam = Adam::new(AdamConfig::with_lr(tcfg.lr), model.params());
    let mut order: Vec<usize> = (0..tensor.n).collect();
    let mut shuffle = stream(seed, &[tag::SHUFFLE]);
    let mut log = TrainLog::default();

    for epoch in 1..=tcfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle);
        let mut dropout = stream(seed, &[tag::DROPOUT, epoch as u64]);
        let (mut total, mut seen) = (0.0, 0usize);
        for (bi, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let x = gather::<S>(tensor, batch)?;
            let spec = MaskSpec::generate(
                batch.len(),
                tensor.t,
                mcfg.mask_ratio,
                mcfg.mask_mean_len,
                derive_seed(seed, &[tag::MASK, epoch as u64, bi as u64]),
            );
            let mut g = Graph::new();
            let b = model.bind(&mut g, |_| true);
            let xv = g.constant(x);
            let xm = model.apply_mask(&mut g, &b, xv, &spec)?;
            let h0 = model.embed(&mut g, &b, xm)?;
            let h = model.encoder_forward(&mut g, &b, h0, Mode::Train(&mut dropout), None)?;
            let r = model.reconstruct(&mut g, &b, h)?;
            let scope = match tcfg.loss_scope {
                LossScope::Full => MaeScope::Full,
                LossScope::MaskedOnly => MaeScope::Masked(&spec),
            };
            let loss = mae_loss_node(&mut g, xv, r, scope)?;
            let lv = g.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(diverged("pretrain", epoch));
            }
            g.backward(loss)?;
            let grads = grads_of(&g, b.vars());
            let mut params: Vec<&mut Tensor<S>> = model.params_mut().iter_mut().collect();
            adam.step(&mut params, &grads.iter().collect::<Vec<_>>())?;
            total += lv * batch.len() as f64;
            seen += batch.len();
        }
        let loss = total / seen as f64;
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(diverged("pretrain", epoch));
        }
        log.entries.push(EpochRecord {
            phase: "pretrain".into(),
            epoch,
            loss,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    let final_loss = log.final_loss();
    if let Some(l) = final_loss {
        log.snapshot.insert("final_loss".into(), l);
    }
    let meta = CheckpointMeta { phase: "pretrain".into(), epochs: tcfg.epochs, final_loss, precision: tcfg.precision };
    Ok((Checkpoint::from_model(&model, meta), log))
}

/// Per class, keeps `floor(n_c * fraction)` rows chosen by a seeded shuffle.
/// Returned indices are ascending.
pub fn subsample_per_class(labels: &[Status], fraction: f64, seed: u64) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..labels.len()).collect();
    }
    let mut rng = stream(seed, &[tag::SUBSAMPLE]);
    let mut keep = Vec::new();
    for class in Status::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        idx.truncate(train_count(idx.len(), fraction));
        keep.extend(idx);
    }
    keep.sort_unstable();
    keep
}

/// Eval-mode pooled encodings of the given rows, in chunks to bound memory.
pub fn pooled_features<S: Scalar>(model: &SsTransformer<S>, tensor: &FeatureTensor, idx: &[usize]) -> Result<Tensor<S>> {
    const CHUNK: usize = 128;
    let d = model.config().d_model;
    let mut data = Vec::with_capacity(idx.len() * d);
    for chunk in idx.chunks(CHUNK) {
        let x: Vec<f32> = chunk.iter().flat_map(|&i| tensor.sample(i).iter().copied()).collect();
        data.extend_from_slice(model.encode_pooled(&x, chunk.len())?.data());
    }
    Tensor::new(&[idx.len(), d], data)
}

/// Masked-only reconstruction MAE over a whole tensor, in eval mode. Masks
/// depend only on `mask_seed` and the chunking, so two models scored with
/// the same seed see identical masks.
pub fn reconstruction_mae<S: Scalar>(model: &SsTransformer<S>, tensor: &FeatureTensor, mask_seed: u64) -> Result<f64> {
    const CHUNK: usize = 128;
    let cfg = model.config();
    check_compatible(tensor, cfg)?;
    let stride = tensor.t * tensor.d();
    let (mut sum, mut cells) = (0.0, 0usize);
    for (ci, start) in (0..tensor.n).step_by(CHUNK).enumerate() {
        let end = (start + CHUNK).min(tensor.n);
        let x = &tensor.values[start * stride..end * stride];
        let spec = MaskSpec::generate(end - start, tensor.t, cfg.mask_ratio, cfg.mask_mean_len, derive_seed(mask_seed, &[ci as u64]));
        if spec.total_masked() == 0 {
            continue;
        }
        let xr = model.reconstruct_masked(x, &spec)?;
        let xt = Tensor::new(&[end - start, tensor.t, tensor.d()], x.iter().map(|&v| S::from_f32(v)).collect())?;
        let m = mae_loss(&xt, &xr, MaeScope::Masked(&spec))?.as_f64();
        let k = spec.total_masked() * tensor.d();
        sum += m * k as f64;
        cells += k;
    }
    if cells == 0 {
        return Err(Error::Invalid("no masked cells to score".into()));
    }
    Ok(sum / cells as f64)
}

/// Linear probing: loads the checkpoint, replaces the classification head,
/// and trains only that head with cross-entropy. Everything else is frozen,
/// so the pooled encodings are computed once up front.
pub fn finetune(tensor: &FeatureTensor, ckpt: &Checkpoint, tcfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    match tcfg.precision {
        Precision::F32 => finetune_as::<f32>(tensor, ckpt, tcfg),
        Precision::F64 => finetune_as::<f64>(tensor, ckpt, tcfg),
    }
}

fn finetune_as<S: Scalar>(tensor: &FeatureTensor, ckpt: &Checkpoint, tcfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    tcfg.validate("finetune")?;
    let labels = tensor.require_labels()?;
    check_compatible(tensor, &ckpt.config)?;
    let seed = tcfg.seed;
    let mut model: SsTransformer<S> = ckpt.to_model()?;
    model.reset_head(derive_seed(seed, &[tag::HEAD]));

    let rows = subsample_per_class(&labels, tcfg.label_fraction, seed);
    if rows.is_empty() {
        return Err(Error::Invalid(format!(
            "label_fraction {} leaves no training rows out of {}",
            tcfg.label_fraction,
            labels.len()
        )));
    }
    let pooled = pooled_features(&model, tensor, &rows)?;
    let y: Vec<usize> = rows.iter().map(|&i| labels[i].index()).collect();
    let d = model.config().d_model;
    let [hw, hb] = model.head_indices();
    let mut adam = Adam::new(AdamConfig::with_lr(tcfg.lr), [&model.params()[hw], &model.params()[hb]]);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut shuffle = stream(seed, &[tag::SHUFFLE]);
    let mut log = TrainLog::default();

    for epoch in 1..=tcfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle);
        let (mut total, mut seen) = (0.0, 0usize);
        for batch in order.chunks(tcfg.batch_size) {
            let feats: Vec<S> = batch.iter().flat_map(|&i| pooled.data()[i * d..(i + 1) * d].iter().copied()).collect();
            let by: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new();
            let w = g.param(model.params()[hw].clone());
            let b = g.param(model.params()[hb].clone());
            let f = g.constant(Tensor::new(&[batch.len(), d], feats)?);
            let logits = g.matmul(f, w)?;
            let logits = g.add(logits, b)?;
            let p = g.softmax_rows(logits);
            let loss = g.nll_of_probs(p, &by)?;
            let lv = g.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(diverged("finetune", epoch));
            }
            g.backward(loss)?;
            let grads = grads_of(&g, &[w, b]);
            let (left, right) = model.params_mut().split_at_mut(hb);
            adam.step(&mut [&mut left[hw], &mut right[0]], &[&grads[0], &grads[1]])?;
            total += lv * batch.len() as f64;
            seen += batch.len();
        }
        log.entries.push(EpochRecord {
            phase: "finetune".into(),
            epoch,
            loss: total / seen as f64,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    let mut g = Graph::new();
    let bound = model.bind(&mut g, |_| false);
    let f = g.constant(pooled);
    let p = model.classify_pooled(&mut g, &bound, f)?;
    let probs = g.value(p).data();
    let c = model.config().n_classes;
    let correct = (0..rows.len())
        .filter(|&r| {
            let row = &probs[r * c..(r + 1) * c];
            let best = (0..c).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best == y[r]
        })
        .count();
    log.snapshot.insert("train_rows".into(), rows.len() as f64);
    log.snapshot.insert("train_accuracy".into(), correct as f64 / rows.len() as f64);
    if let Some(l) = log.final_loss() {
        log.snapshot.insert("final_loss".into(), l);
    }
    let meta = CheckpointMeta {
        phase: "finetune".into(),
        epochs: tcfg.epochs,
        final_loss: log.final_loss(),
        precision: tcfg.precision,
    };
    Ok((Checkpoint::from_model(&model, meta), log))
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    ckpt.save(dir)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(dir)
}
