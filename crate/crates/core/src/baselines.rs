//! Comparison models: logistic regression and k-nearest-neighbours on
//! per-bike summary vectors, and the same Transformer trained end to end
//! from random initialization.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data_model::Status;
use crate::error::{shape_err, Error, Result};
use crate::features::FeatureTensor;
use crate::model::{Checkpoint, CheckpointMeta, Mode, ModelConfig, SsTransformer};
use crate::numerics::{Adam, AdamConfig, Graph, Precision, Scalar, Tensor};
use crate::rng::{derive_seed, stream};
use crate::training::{subsample_per_class, EpochRecord, TrainConfig, TrainLog, INIT_TAG};

pub const FLAT_DIM: usize = 5;
pub const FLAT_NAMES: [&str; FLAT_DIM] = ["cum_distance_km", "trip_count", "total_time_min", "mean_lat", "mean_lon"];

/// One standardized 5-vector per bike: the three aggregates followed by the
/// mean position. Built from an already standardized tensor by averaging each
/// channel over time.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatFeatures {
    pub rows: Vec<[f64; FLAT_DIM]>,
}

impl FlatFeatures {
    pub fn from_tensor(t: &FeatureTensor) -> Self {
        let rows = (0..t.n)
            .map(|i| {
                let mut mean = [0.0; 5];
                for step in t.sample(i).chunks_exact(5) {
                    for (m, &v) in mean.iter_mut().zip(step) {
                        *m += f64::from(v);
                    }
                }
                let m = mean.map(|v| v / t.t as f64);
                [m[2], m[3], m[4], m[0], m[1]]
            })
            .collect();
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self { rows: idx.iter().map(|&i| self.rows[i]).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogRegConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 0.1, batch_size: 32, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LogReg {
    pub w: [f64; FLAT_DIM],
    pub b: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogReg {
    pub fn prob_unusable(&self, x: &[f64; FLAT_DIM]) -> f64 {
        sigmoid(self.b + self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
    }

    pub fn predict(&self, x: &[f64; FLAT_DIM]) -> Status {
        let p = self.prob_unusable(x);
        crate::evaluation::decide(1.0 - p, p)
    }

    /// Mean binary cross-entropy over `idx` and its gradient `[dw.., db]`.
    pub fn loss_and_grad(&self, x: &FlatFeatures, y: &[Status], idx: &[usize]) -> (f64, [f64; FLAT_DIM + 1]) {
        let mut loss = 0.0;
        let mut grad = [0.0; FLAT_DIM + 1];
        for &i in idx {
            let z = self.b + self.w.iter().zip(&x.rows[i]).map(|(w, v)| w * v).sum::<f64>();
            let t = y[i].index() as f64;
            // log(1 + e^z) - t z, written to avoid overflow.
            loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z;
            let r = sigmoid(z) - t;
            for (g, v) in grad.iter_mut().zip(&x.rows[i]) {
                *g += r * v;
            }
            grad[FLAT_DIM] += r;
        }
        let n = idx.len().max(1) as f64;
        (loss / n, grad.map(|g| g / n))
    }
}

fn check_two_classes(y: &[Status]) -> Result<()> {
    for class in Status::ALL {
        if !y.contains(&class) {
            return Err(Error::Invalid(format!("training labels contain no {class:?} samples")));
        }
    }
    Ok(())
}

/// Minibatch gradient descent from zero weights.
pub fn train_logreg(x: &FlatFeatures, y: &[Status], cfg: &LogRegConfig) -> Result<LogReg> {
    if x.len() != y.len() {
        return Err(shape_err(format!("{} feature rows vs {} labels", x.len(), y.len())));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("logreg: epochs and batch_size must be at least 1".into()));
    }
    check_two_classes(y)?;
    let mut model = LogReg::default();
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut rng = stream(cfg.seed, &[7]);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (_, g) = model.loss_and_grad(x, y, batch);
            for (w, gw) in model.w.iter_mut().zip(&g) {
                *w -= cfg.lr * gw;
            }
            model.b -= cfg.lr * g[FLAT_DIM];
        }
    }
    Ok(model)
}

/// Majority label of the `k` nearest training rows by Euclidean distance.
/// Equal distances prefer the lower training index; a split vote goes to Normal.
pub fn knn_predict(train: &FlatFeatures, labels: &[Status], query: &[f64; FLAT_DIM], k: usize) -> Result<Status> {
    if train.is_empty() {
        return Err(Error::Invalid("kNN needs at least one training row".into()));
    }
    if train.len() != labels.len() {
        return Err(shape_err(format!("{} training rows vs {} labels", train.len(), labels.len())));
    }
    if k == 0 || k > train.len() {
        return Err(Error::Config(format!("knn.k: {k} not in [1, {}]", train.len())));
    }
    let mut d: Vec<(f64, usize)> = train
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
        .collect();
    d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let unusable = d[..k].iter().filter(|(_, i)| labels[*i] == Status::Unusable).count();
    Ok(if 2 * unusable > k { Status::Unusable } else { Status::Normal })
}

/// Trains every parameter of a freshly initialized model with cross-entropy.
/// No pretraining and no freezing; `label_fraction` subsamples as in finetuning.
pub fn train_scratch_transformer(
    tensor: &FeatureTensor,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    match tcfg.precision {
        Precision::F32 => scratch_as::<f32>(tensor, mcfg, tcfg),
        Precision::F64 => scratch_as::<f64>(tensor, mcfg, tcfg),
    }
}

fn scratch_as<S: Scalar>(tensor: &FeatureTensor, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    mcfg.validate()?;
    tcfg.validate("scratch")?;
    let labels = tensor.require_labels()?;
    if tensor.t != mcfg.t_steps || tensor.d() != mcfg.input_dim {
        return Err(Error::Config(format!(
            "feature tensor is [n, {}, {}] but the model expects [n, {}, {}]",
            tensor.t,
            tensor.d(),
            mcfg.t_steps,
            mcfg.input_dim
        )));
    }
    let seed = tcfg.seed;
    let rows = subsample_per_class(&labels, tcfg.label_fraction, seed);
    if rows.is_empty() {
        return Err(Error::Invalid("label_fraction leaves no training rows".into()));
    }
    let mut model = SsTransformer::<S>::new(mcfg.clone(), derive_seed(seed, &[INIT_TAG]))?;
    let mut adam = Adam::new(AdamConfig::with_lr(tcfg.lr), model.params());
    let mut order = rows.clone();
    let mut shuffle = stream(seed, &[2]);
    let mut log = TrainLog::default();
    let (t, d) = (tensor.t, tensor.d());

    for epoch in 1..=tcfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle);
        let mut dropout = stream(seed, &[3, epoch as u64]);
        let (mut total, mut seen) = (0.0, 0usize);
        for batch in order.chunks(tcfg.batch_size) {
            let x: Vec<S> = batch.iter().flat_map(|&i| tensor.sample(i).iter().map(|&v| S::from_f32(v))).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i].index()).collect();
            let mut g = Graph::new();
            let b = model.bind(&mut g, |_| true);
            let xv = g.constant(Tensor::new(&[batch.len(), t, d], x)?);
            let h0 = model.embed(&mut g, &b, xv)?;
            let h = model.encoder_forward(&mut g, &b, h0, Mode::Train(&mut dropout), None)?;
            let p = model.classify(&mut g, &b, h)?;
            let loss = g.nll_of_probs(p, &y)?;
            let lv = g.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::Diverged { phase: "scratch".into(), epoch });
            }
            g.backward(loss)?;
            let grads: Vec<Tensor<S>> = b
                .vars()
                .iter()
                .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
                .collect();
            let mut params: Vec<&mut Tensor<S>> = model.params_mut().iter_mut().collect();
            adam.step(&mut params, &grads.iter().collect::<Vec<_>>())?;
            total += lv * batch.len() as f64;
            seen += batch.len();
        }
        log.entries.push(EpochRecord {
            phase: "scratch".into(),
            epoch,
            loss: total / seen as f64,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    log.snapshot.insert("train_rows".into(), rows.len() as f64);
    if let Some(l) = log.final_loss() {
        log.snapshot.insert("final_loss".into(), l);
    }
    let meta = CheckpointMeta { phase: "scratch".into(), epochs: tcfg.epochs, final_loss: log.final_loss(), precision: tcfg.precision };
    Ok((Checkpoint::from_model(&model, meta), log))
}
