//! Confusion counts, classification metrics and the comparison table.
//! The positive class is [`Status::Unusable`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data_model::Status;
use crate::error::{shape_err, Error, Result};
use crate::features::FeatureTensor;
use crate::model::{count_complexity, SsTransformer};
use crate::numerics::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(y_true: &[Status], y_pred: &[Status]) -> Result<ConfusionCounts> {
    if y_true.len() != y_pred.len() {
        return Err(shape_err(format!("{} labels vs {} predictions", y_true.len(), y_pred.len())));
    }
    if y_true.is_empty() {
        return Err(Error::Invalid("no samples to score".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t, p) {
            (Status::Unusable, Status::Unusable) => c.tp += 1,
            (Status::Normal, Status::Unusable) => c.fp += 1,
            (Status::Normal, Status::Normal) => c.tn += 1,
            (Status::Unusable, Status::Normal) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    #[serde(rename = "acc")]
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    /// Set when precision, recall or F1 had a zero denominator and was reported as 0.
    #[serde(default, skip_serializing_if = "is_false")]
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macs_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_m: Option<f64>,
}

impl MetricsReport {
    pub fn named(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn with_complexity(mut self, params_m: f64, macs_g: f64) -> Self {
        self.params_m = Some(params_m);
        self.macs_g = Some(macs_g);
        self
    }
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall and F1 from counts.
pub fn metrics(c: &ConfusionCounts) -> Result<MetricsReport> {
    if c.total() == 0 {
        return Err(Error::Invalid("empty confusion matrix".into()));
    }
    let mut degenerate = false;
    let accuracy = (c.tp + c.tn) as f64 / c.total() as f64;
    let precision = ratio(c.tp, c.tp + c.fp, &mut degenerate);
    let recall = ratio(c.tp, c.tp + c.fn_, &mut degenerate);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    Ok(MetricsReport {
        model: String::new(),
        accuracy,
        recall,
        precision,
        f1,
        degenerate,
        macs_g: None,
        params_m: None,
    })
}

/// Argmax over class probabilities; an exact tie goes to Normal.
pub fn decide(p_normal: f64, p_unusable: f64) -> Status {
    if p_unusable > p_normal {
        Status::Unusable
    } else {
        Status::Normal
    }
}

/// Eval-mode class probabilities `[n, 2]` for every sample, flattened.
pub fn predict_all<S: Scalar>(model: &SsTransformer<S>, tensor: &FeatureTensor) -> Result<Vec<[f64; 2]>> {
    const CHUNK: usize = 128;
    let cfg = model.config();
    if tensor.t != cfg.t_steps || tensor.d() != cfg.input_dim || cfg.n_classes != 2 {
        return Err(Error::Config(format!(
            "model expects [n, {}, {}] with 2 classes; tensor is [n, {}, {}]",
            cfg.t_steps,
            cfg.input_dim,
            tensor.t,
            tensor.d()
        )));
    }
    let stride = tensor.t * tensor.d();
    let mut out = Vec::with_capacity(tensor.n);
    for start in (0..tensor.n).step_by(CHUNK) {
        let end = (start + CHUNK).min(tensor.n);
        let p = model.predict_proba(&tensor.values[start * stride..end * stride], end - start)?;
        out.extend(p.data().chunks_exact(2).map(|r| [r[0].as_f64(), r[1].as_f64()]));
    }
    Ok(out)
}

/// Scores `model` on a labeled tensor and attaches its complexity.
pub fn evaluate<S: Scalar>(model: &SsTransformer<S>, tensor: &FeatureTensor, name: &str) -> Result<MetricsReport> {
    let labels = tensor.require_labels()?;
    let preds: Vec<Status> = predict_all(model, tensor)?.iter().map(|p| decide(p[0], p[1])).collect();
    let c = count_complexity(model.config());
    Ok(metrics(&confusion(&labels, &preds)?)?
        .named(name)
        .with_complexity(c.params_millions(), c.macs_giga()))
}

/// Text table plus one JSON object per row, both in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedTable {
    pub text: String,
    pub rows: Vec<String>,
}

impl RenderedTable {
    pub fn jsonl(&self) -> String {
        self.rows.iter().map(|r| format!("{r}\n")).collect()
    }
}

pub fn render_table(reports: &[MetricsReport]) -> Result<RenderedTable> {
    if reports.is_empty() {
        return Err(Error::Invalid("no reports to render".into()));
    }
    let header = ["Model", "ACC", "Recall", "Precision", "F1 Score", "MACs (G)", "Params (M)"];
    let opt = |v: Option<f64>| v.map_or_else(|| "---".to_string(), |x| format!("{x:.4}"));
    let cells: Vec<[String; 7]> = reports
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                format!("{:.4}", r.accuracy),
                format!("{:.4}", r.recall),
                format!("{:.4}", r.precision),
                format!("{:.4}", r.f1),
                opt(r.macs_g),
                opt(r.params_m),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut text = String::new();
    let line = |text: &mut String, row: &[String]| {
        for (i, (c, w)) in row.iter().zip(widths).enumerate() {
            if i == 0 {
                let _ = write!(text, "{c:<w$}");
            } else {
                let _ = write!(text, "  {c:>w$}");
            }
        }
        text.push('\n');
    };
    line(&mut text, &header.map(String::from));
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut text, &rule);
    for row in &cells {
        line(&mut text, row);
    }
    let rows = reports.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
    Ok(RenderedTable { text, rows })
}

pub fn parse_rows(jsonl: &str) -> Result<Vec<MetricsReport>> {
    jsonl
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
