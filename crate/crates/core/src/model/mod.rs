//! Transformer encoder with learnable embeddings, a masked-reconstruction
//! head and a linear classification head.
//!
//! Parameters live in a flat, named list whose order is fixed by
//! [`param_specs`]. Forward passes bind that list onto a [`Graph`] and return
//! graph handles, so the same code serves training, probing and inference.

mod checkpoint;
mod complexity;
mod masking;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use complexity::{count_complexity, Complexity, MacBreakdown, ParamBreakdown};
pub use masking::MaskSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub t_steps: usize,
    pub input_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub mask_ratio: f64,
    pub mask_mean_len: f64,
    pub dropout: f64,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_steps: 64,
            input_dim: 5,
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            d_ff: 256,
            mask_ratio: 0.15,
            mask_mean_len: 3.0,
            dropout: 0.1,
            n_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t_steps", self.t_steps),
            ("input_dim", self.input_dim),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name}: must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model: {} is not divisible by n_heads = {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("model.mask_ratio: {} not in [0, 1)", self.mask_ratio)));
        }
        if !(self.mask_mean_len >= 1.0) {
            return Err(Error::Config(format!("model.mask_mean_len: {} must be >= 1", self.mask_mean_len)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout: {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Xavier,
    Zeros,
    Ones,
    Small,
}

fn layout_entries(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, dd, t, ff, c) = (cfg.input_dim, cfg.d_model, cfg.t_steps, cfg.d_ff, cfg.n_classes);
    let mut v = vec![
        ("embed.w_in".to_string(), vec![d, dd], Init::Xavier),
        ("embed.b_in".into(), vec![dd], Init::Zeros),
        ("embed.pos".into(), vec![t, dd], Init::Small),
        ("mask_token".into(), vec![d], Init::Small),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        v.extend([
            (p("ln1.gain"), vec![dd], Init::Ones),
            (p("ln1.bias"), vec![dd], Init::Zeros),
            (p("attn.w_q"), vec![dd, dd], Init::Xavier),
            (p("attn.b_q"), vec![dd], Init::Zeros),
            (p("attn.w_k"), vec![dd, dd], Init::Xavier),
            (p("attn.b_k"), vec![dd], Init::Zeros),
            (p("attn.w_v"), vec![dd, dd], Init::Xavier),
            (p("attn.b_v"), vec![dd], Init::Zeros),
            (p("attn.w_o"), vec![dd, dd], Init::Xavier),
            (p("attn.b_o"), vec![dd], Init::Zeros),
            (p("ln2.gain"), vec![dd], Init::Ones),
            (p("ln2.bias"), vec![dd], Init::Zeros),
            (p("ffn.w1"), vec![dd, ff], Init::Xavier),
            (p("ffn.b1"), vec![ff], Init::Zeros),
            (p("ffn.w2"), vec![ff, dd], Init::Xavier),
            (p("ffn.b2"), vec![dd], Init::Zeros),
        ]);
    }
    v.extend([
        ("recon.w".to_string(), vec![dd, d], Init::Xavier),
        ("recon.b".into(), vec![d], Init::Zeros),
        ("head.w".into(), vec![dd, c], Init::Xavier),
        ("head.b".into(), vec![c], Init::Zeros),
    ]);
    v
}

/// Names and shapes of every trainable tensor, in storage order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    layout_entries(cfg)
        .into_iter()
        .map(|(name, shape, _)| ParamSpec { name, shape })
        .collect()
}

/// Names of the classification head tensors, the only ones trained by linear probing.
pub const HEAD_PARAMS: [&str; 2] = ["head.w", "head.b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSlots {
    ln1_g: usize,
    ln1_b: usize,
    w_q: usize,
    b_q: usize,
    w_k: usize,
    b_k: usize,
    w_v: usize,
    b_v: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    w_in: usize,
    b_in: usize,
    pos: usize,
    mask_token: usize,
    layers: Vec<LayerSlots>,
    recon_w: usize,
    recon_b: usize,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    fn new(n_layers: usize) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                let o = 4 + 16 * l;
                LayerSlots {
                    ln1_g: o,
                    ln1_b: o + 1,
                    w_q: o + 2,
                    b_q: o + 3,
                    w_k: o + 4,
                    b_k: o + 5,
                    w_v: o + 6,
                    b_v: o + 7,
                    w_o: o + 8,
                    b_o: o + 9,
                    ln2_g: o + 10,
                    ln2_b: o + 11,
                    w1: o + 12,
                    b1: o + 13,
                    w2: o + 14,
                    b2: o + 15,
                }
            })
            .collect();
        let tail = 4 + 16 * n_layers;
        Self {
            w_in: 0,
            b_in: 1,
            pos: 2,
            mask_token: 3,
            layers,
            recon_w: tail,
            recon_b: tail + 1,
            head_w: tail + 2,
            head_b: tail + 3,
        }
    }
}

/// Whether dropout is active.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Model parameters bound onto a graph, one handle per tensor.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// The encoder with both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct SsTransformer<S> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<S>>,
    layout: Layout,
}

impl<S: Scalar> SsTransformer<S> {
    /// Seeded random initialization: Xavier-uniform matrices, zero biases,
    /// unit layer-norm gains, and N(0, 0.02) position table and mask token.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let small = Normal::new(0.0, 0.02).expect("valid normal");
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in layout_entries(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<S> = match init {
                Init::Zeros => vec![S::zero(); n],
                Init::Ones => vec![S::one(); n],
                Init::Small => (0..n).map(|_| S::of(small.sample(&mut rng))).collect(),
                Init::Xavier => {
                    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let u = Uniform::new_inclusive(-limit, limit).expect("valid range");
                    (0..n).map(|_| S::of(u.sample(&mut rng))).collect()
                }
            };
            names.push(name);
            params.push(Tensor::new(&shape, data)?);
        }
        let layout = Layout::new(config.n_layers);
        Ok(Self { config, names, params, layout })
    }

    /// Builds a model from explicit tensors, validated against the layout.
    pub fn from_params(config: ModelConfig, named: Vec<(String, Tensor<S>)>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != named.len() {
            return Err(shape_err(format!("expected {} parameter tensors, got {}", specs.len(), named.len())));
        }
        for (spec, (name, t)) in specs.iter().zip(&named) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(shape_err(format!(
                    "parameter {name} {:?} does not match layout entry {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self { layout: Layout::new(config.n_layers), config, names, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    pub fn head_indices(&self) -> [usize; 2] {
        [self.layout.head_w, self.layout.head_b]
    }

    /// Number of trainable scalars actually held by this model.
    pub fn registered_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn to_precision<T: Scalar>(&self) -> SsTransformer<T> {
        SsTransformer {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Replaces the classification head with a freshly initialized one.
    pub fn reset_head(&mut self, seed: u64) {
        let fresh = SsTransformer::<S>::new(self.config.clone(), seed).expect("config already validated");
        for i in self.head_indices() {
            self.params[i] = fresh.params[i].clone();
        }
    }

    /// Registers every tensor on `g`; those for which `trainable` returns true
    /// become gradient-receiving leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph<S>, trainable: impl Fn(usize) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, t)| if trainable(i) { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Input embedding `x W_in + b_in + P`, with `P` the learnable position
    /// table broadcast over the batch.
    pub fn embed(&self, g: &mut Graph<S>, b: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] != self.config.t_steps || s[2] != self.config.input_dim {
            return Err(shape_err(format!(
                "input {s:?} does not match [n, {}, {}]",
                self.config.t_steps, self.config.input_dim
            )));
        }
        let v = &b.vars;
        let h = g.matmul(x, v[self.layout.w_in])?;
        let h = g.add(h, v[self.layout.b_in])?;
        g.add(h, v[self.layout.pos])
    }

    /// Multi-head self-attention of one layer. Returns the output and the
    /// attention weights `[n, heads, t, t]`.
    pub fn multi_head_attention(&self, g: &mut Graph<S>, b: &Bound, layer: usize, h: Var) -> Result<(Var, Var)> {
        let slots = self.layout.layers[layer];
        let v = &b.vars;
        multi_head_attention(
            g,
            h,
            self.config.n_heads,
            AttentionWeights {
                w_q: v[slots.w_q],
                b_q: v[slots.b_q],
                w_k: v[slots.w_k],
                b_k: v[slots.b_k],
                w_v: v[slots.w_v],
                b_v: v[slots.b_v],
                w_o: v[slots.w_o],
                b_o: v[slots.b_o],
            },
        )
    }

    /// Stack of pre-norm blocks: `h + MHA(LN(h))`, then `h + FFN(LN(h))`.
    /// Attention weights of every layer are appended to `attn` when given.
    pub fn encoder_forward(
        &self,
        g: &mut Graph<S>,
        b: &Bound,
        h0: Var,
        mut mode: Mode<'_>,
        mut attn: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let p = self.config.dropout;
        let v = &b.vars;
        let mut h = h0;
        for (l, slots) in self.layout.layers.iter().enumerate() {
            let n1 = g.layer_norm(h, v[slots.ln1_g], v[slots.ln1_b])?;
            let (a, w) = self.multi_head_attention(g, b, l, n1)?;
            if let Some(trace) = attn.as_deref_mut() {
                trace.push(w);
            }
            let a = match &mut mode {
                Mode::Train(rng) => g.dropout(a, p, *rng),
                Mode::Eval => a,
            };
            h = g.add(h, a)?;

            let n2 = g.layer_norm(h, v[slots.ln2_g], v[slots.ln2_b])?;
            let f = g.matmul(n2, v[slots.w1])?;
            let f = g.add(f, v[slots.b1])?;
            let f = g.relu(f);
            let f = g.matmul(f, v[slots.w2])?;
            let f = g.add(f, v[slots.b2])?;
            let f = match &mut mode {
                Mode::Train(rng) => g.dropout(f, p, *rng),
                Mode::Eval => f,
            };
            h = g.add(h, f)?;
        }
        Ok(h)
    }

    /// Replaces all channels of masked time steps with the learnable mask token.
    pub fn apply_mask(&self, g: &mut Graph<S>, b: &Bound, x: Var, spec: &MaskSpec) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || s[0] != spec.n() || s[1] != spec.t() {
            return Err(shape_err(format!("mask [{}, {}] for input {s:?}", spec.n(), spec.t())));
        }
        g.mask_fill(x, b.vars[self.layout.mask_token], spec.cells().to_vec())
    }

    /// Per-position linear map back to the input channels.
    pub fn reconstruct(&self, g: &mut Graph<S>, b: &Bound, h: Var) -> Result<Var> {
        let r = g.matmul(h, b.vars[self.layout.recon_w])?;
        g.add(r, b.vars[self.layout.recon_b])
    }

    /// Mean over time steps: `[n, t, d_model] -> [n, d_model]`.
    pub fn pool(&self, g: &mut Graph<S>, h: Var) -> Result<Var> {
        g.mean_axis1(h)
    }

    /// Class probabilities from pooled encodings.
    pub fn classify_pooled(&self, g: &mut Graph<S>, b: &Bound, pooled: Var) -> Result<Var> {
        let logits = g.matmul(pooled, b.vars[self.layout.head_w])?;
        let logits = g.add(logits, b.vars[self.layout.head_b])?;
        Ok(g.softmax_rows(logits))
    }

    /// Mean-pool, linear head, softmax.
    pub fn classify(&self, g: &mut Graph<S>, b: &Bound, h: Var) -> Result<Var> {
        let pooled = self.pool(g, h)?;
        self.classify_pooled(g, b, pooled)
    }

    fn batch_input(&self, g: &mut Graph<S>, x: &[f32], n: usize) -> Result<Var> {
        let t = Tensor::new(
            &[n, self.config.t_steps, self.config.input_dim],
            x.iter().map(|&v| S::from_f32(v)).collect(),
        )?;
        Ok(g.constant(t))
    }

    /// Eval-mode pooled encodings of `n` samples laid out as `[n, t, input_dim]`.
    pub fn encode_pooled(&self, x: &[f32], n: usize) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let xv = self.batch_input(&mut g, x, n)?;
        let h0 = self.embed(&mut g, &b, xv)?;
        let h = self.encoder_forward(&mut g, &b, h0, Mode::Eval, None)?;
        let p = self.pool(&mut g, h)?;
        Ok(g.value(p).clone())
    }

    /// Eval-mode class probabilities `[n, n_classes]`.
    pub fn predict_proba(&self, x: &[f32], n: usize) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let xv = self.batch_input(&mut g, x, n)?;
        let h0 = self.embed(&mut g, &b, xv)?;
        let h = self.encoder_forward(&mut g, &b, h0, Mode::Eval, None)?;
        let p = self.classify(&mut g, &b, h)?;
        Ok(g.value(p).clone())
    }

    /// Eval-mode reconstruction of masked inputs.
    pub fn reconstruct_masked(&self, x: &[f32], spec: &MaskSpec) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let xv = self.batch_input(&mut g, x, spec.n())?;
        let xm = self.apply_mask(&mut g, &b, xv, spec)?;
        let h0 = self.embed(&mut g, &b, xm)?;
        let h = self.encoder_forward(&mut g, &b, h0, Mode::Eval, None)?;
        let r = self.reconstruct(&mut g, &b, h)?;
        Ok(g.value(r).clone())
    }
}

/// Projection weights of one attention block. Matrices are `[d_model, d_model]`
/// and map row vectors (`x W`).
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

/// `softmax(Q K^T / sqrt(d_k)) V` over the last two axes. Returns the output
/// and the attention weights.
pub fn scaled_dot_attention<S: Scalar>(g: &mut Graph<S>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() < 2 || sq != sk || sk[..sk.len() - 1] != sv[..sv.len() - 1] {
        return Err(shape_err(format!("attention operands Q {sq:?}, K {sk:?}, V {sv:?}")));
    }
    let d_k = *sq.last().expect("checked rank");
    let kt = g.transpose_last2(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, S::one() / S::of(d_k as f64).sqrt());
    let weights = g.softmax_rows(scores);
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention: project, split the model width into `n_heads`
/// slices, attend per head, concatenate, project with `W_o`.
pub fn multi_head_attention<S: Scalar>(
    g: &mut Graph<S>,
    h: Var,
    n_heads: usize,
    w: AttentionWeights,
) -> Result<(Var, Var)> {
    let s = g.shape(h).to_vec();
    if s.len() != 3 {
        return Err(shape_err(format!("attention input must be [n, t, d_model], got {s:?}")));
    }
    let (n, t, d) = (s[0], s[1], s[2]);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!("d_model {d} is not divisible by {n_heads} heads")));
    }
    let dk = d / n_heads;
    let heads = |wm: Var, bias: Var, g: &mut Graph<S>| -> Result<Var> {
        let p = g.matmul(h, wm)?;
        let p = g.add(p, bias)?;
        let p = g.reshape(p, &[n, t, n_heads, dk])?;
        g.swap_axes12(p)
    };
    let q = heads(w.w_q, w.b_q, g)?;
    let k = heads(w.w_k, w.b_k, g)?;
    let v = heads(w.w_v, w.b_v, g)?;
    let (o, weights) = scaled_dot_attention(g, q, k, v)?;
    let o = g.swap_axes12(o)?;
    let o = g.reshape(o, &[n, t, d])?;
    let o = g.matmul(o, w.w_o)?;
    let o = g.add(o, w.b_o)?;
    Ok((o, weights))
}
