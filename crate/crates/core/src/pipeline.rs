//! File-based stages: each reads its declared inputs from disk, writes its
//! outputs into one directory, and drops the resolved configuration there.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{knn_predict, train_logreg, train_scratch_transformer, FlatFeatures, LogReg, LogRegConfig};
use crate::data_model::{
    assemble_records, parse_gps, parse_labels, parse_trips, stratified_split, BikeId, BikeRecord, Status, TimeWindow,
};
use crate::error::{Error, Result};
use crate::evaluation::{confusion, decide, metrics, parse_rows, predict_all, render_table, MetricsReport};
use crate::features::{build_dataset, observed_max_steps, FeatureTensor, Normalization, DEFAULT_T_STEPS};
use crate::model::{count_complexity, Checkpoint, ModelConfig};
use crate::numerics::Precision;
use crate::synthetic::{generate_fleet, Manifest, SynthConfig, GPS_FILE, LABELS_FILE, TRIPS_FILE};
use crate::training::{finetune, pretrain, LossScope, TrainConfig, TrainLog};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TABLE_FILE: &str = "table.txt";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

pub const SS_NAME: &str = "SSTransformer";
pub const SCRATCH_NAME: &str = "Transformer";
pub const LOGREG_NAME: &str = "LogReg";
pub const KNN_NAME: &str = "kNN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub t_steps: usize,
    /// Use the longest training trajectory (capped) instead of `t_steps`.
    pub use_observed_max: bool,
    pub max_steps_cap: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { t_steps: DEFAULT_T_STEPS, use_observed_max: false, max_steps_cap: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainOn {
    #[default]
    Train,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub logreg: LogRegConfig,
    pub knn_k: usize,
    pub scratch: TrainConfig,
    pub run_scratch: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { logreg: LogRegConfig::default(), knn_k: 5, scratch: TrainConfig::scratch_default(), run_scratch: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub ingest: PathBuf,
    pub features: PathBuf,
    pub pretrain: PathBuf,
    pub finetune: PathBuf,
    pub baselines: PathBuf,
    pub eval: PathBuf,
    pub predict: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self::under(Path::new("runs"))
    }
}

impl Paths {
    /// One subdirectory per stage below `root`.
    pub fn under(root: &Path) -> Self {
        Self {
            data: root.join("data"),
            ingest: root.join("ingest"),
            features: root.join("features"),
            pretrain: root.join("pretrain"),
            finetune: root.join("finetune"),
            baselines: root.join("baselines"),
            eval: root.join("eval"),
            predict: root.join("predict"),
            report: root.join("report"),
        }
    }
}

/// Every setting of a run. Loaded from JSON, then adjusted by command-line
/// overrides, then echoed into each output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces every component seed.
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub window: Option<TimeWindow>,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub pretrain_on: PretrainOn,
    pub finetune: TrainConfig,
    pub baselines: BaselineConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            synth: SynthConfig::default(),
            split_ratio: 0.8,
            split_seed: 0,
            window: None,
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            pretrain_on: PretrainOn::Train,
            finetune: TrainConfig::finetune_default(),
            baselines: BaselineConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Command-line adjustments applied on top of a loaded configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub label_fraction: Option<f64>,
    pub loss_scope: Option<LossScope>,
    pub precision: Option<Precision>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let at = |e: serde_json::Error| Error::Config(format!("{}: {e}", path.display()));
        let user: serde_json::Value = serde_json::from_str(&text).map_err(at)?;
        if !user.is_object() {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        }
        // Sections are merged over their own defaults, so a partial
        // `finetune` block keeps the finetune defaults for missing keys.
        let mut merged = serde_json::to_value(Self::default())?;
        merge(&mut merged, user);
        serde_json::from_value(merged).map_err(at)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.split_seed = s;
            self.pretrain.seed = s;
            self.finetune.seed = s;
            self.baselines.scratch.seed = s;
            self.baselines.logreg.seed = s;
        }
        if let Some(f) = o.label_fraction {
            self.finetune.label_fraction = f;
            self.baselines.scratch.label_fraction = f;
        }
        if let Some(l) = o.loss_scope {
            self.pretrain.loss_scope = l;
        }
        if let Some(p) = o.precision {
            self.pretrain.precision = p;
            self.finetune.precision = p;
            self.baselines.scratch.precision = p;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio: {} not in (0, 1)", self.split_ratio)));
        }
        if self.features.t_steps == 0 || self.features.max_steps_cap == 0 {
            return Err(Error::Config("features.t_steps: must be at least 1".into()));
        }
        let mut model = self.model.clone();
        model.t_steps = self.features.t_steps;
        model.validate()?;
        self.pretrain.validate("pretrain")?;
        self.finetune.validate("finetune")?;
        self.baselines.scratch.validate("baselines.scratch")?;
        if self.baselines.knn_k == 0 {
            return Err(Error::Config("baselines.knn_k: must be at least 1".into()));
        }
        if self.baselines.logreg.epochs == 0 || self.baselines.logreg.batch_size == 0 {
            return Err(Error::Config("baselines.logreg: epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Writes `config.resolved.json` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED_CONFIG), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}


pub fn run_synth(cfg: &RunConfig) -> Result<Manifest> {
    let fleet = generate_fleet(&cfg.synth)?;
    fleet.write(&cfg.paths.data)?;
    cfg.echo(&cfg.paths.data)?;
    Ok(fleet.manifest)
}


#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<BikeId>,
    pub test: Vec<BikeId>,
    pub unlabeled: Vec<BikeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub bikes: usize,
    pub skipped: Vec<BikeId>,
    pub trips: usize,
    pub gps_points: usize,
    /// `[normal, unusable]` counts.
    pub train_counts: [usize; 2],
    pub test_counts: [usize; 2],
    pub unlabeled: usize,
}

pub struct Ingested {
    pub records: Vec<BikeRecord>,
    pub split: SplitIds,
    pub report: IngestReport,
}

fn class_counts(records: &[BikeRecord]) -> [usize; 2] {
    let mut c = [0; 2];
    for r in records {
        if let Some(s) = r.label {
            c[s.index()] += 1;
        }
    }
    c
}

/// Parses raw feeds from `dir`, joins them and splits the labeled bikes.
pub fn ingest_dir(cfg: &RunConfig, dir: &Path) -> Result<Ingested> {
    for name in [TRIPS_FILE, GPS_FILE] {
        require(&dir.join(name))?;
    }
    let trips = parse_trips(dir.join(TRIPS_FILE))?;
    let gps = parse_gps(dir.join(GPS_FILE))?;
    let labels_path = dir.join(LABELS_FILE);
    let labels = if labels_path.exists() { parse_labels(labels_path)? } else { Vec::new() };
    let (records, skipped) = assemble_records(&trips, &gps, &labels, cfg.window);
    let labeled: Vec<BikeRecord> = records.iter().filter(|r| r.label.is_some()).cloned().collect();
    let unlabeled: Vec<BikeId> = records.iter().filter(|r| r.label.is_none()).map(|r| r.bike.clone()).collect();
    let (train, test) = if labeled.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        stratified_split(&labeled, cfg.split_ratio, cfg.split_seed)?
    };
    let report = IngestReport {
        bikes: records.len(),
        skipped: skipped.skipped,
        trips: trips.len(),
        gps_points: gps.len(),
        train_counts: class_counts(&train),
        test_counts: class_counts(&test),
        unlabeled: unlabeled.len(),
    };
    let ids = |v: &[BikeRecord]| v.iter().map(|r| r.bike.clone()).collect();
    let split = SplitIds { train: ids(&train), test: ids(&test), unlabeled };
    Ok(Ingested { records, split, report })
}

pub fn run_ingest(cfg: &RunConfig) -> Result<IngestReport> {
    let ing = ingest_dir(cfg, &cfg.paths.data)?;
    let out = &cfg.paths.ingest;
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(fs::File::create(out.join(RECORDS_FILE))?);
    for r in &ing.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    fs::write(out.join(SPLIT_FILE), serde_json::to_string_pretty(&ing.split)? + "\n")?;
    fs::write(out.join("ingest_report.json"), serde_json::to_string_pretty(&ing.report)? + "\n")?;
    cfg.echo(out)?;
    Ok(ing.report)
}

fn load_ingested(dir: &Path) -> Result<(Vec<BikeRecord>, SplitIds)> {
    let path = dir.join(RECORDS_FILE);
    require(&path)?;
    require(&dir.join(SPLIT_FILE))?;
    let mut records = Vec::new();
    for line in BufReader::new(fs::File::open(&path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    let split = serde_json::from_slice(&fs::read(dir.join(SPLIT_FILE))?)?;
    Ok((records, split))
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizeSummary {
    pub t_steps: usize,
    pub all: usize,
    pub train: usize,
    pub test: usize,
}

/// Builds the all-bikes tensor at the top of the features directory and the
/// `train/` and `test/` tensors below it. Statistics come from training bikes
/// only. The input may be an ingest directory or a raw data directory.
pub fn run_featurize(cfg: &RunConfig) -> Result<FeaturizeSummary> {
    let input = &cfg.paths.ingest;
    let (records, split) = if input.join(RECORDS_FILE).exists() {
        load_ingested(input)?
    } else if input.join(TRIPS_FILE).exists() {
        let ing = ingest_dir(cfg, input)?;
        (ing.records, ing.split)
    } else {
        return Err(Error::MissingArtifact(input.join(RECORDS_FILE)));
    };
    let pick = |ids: &[BikeId]| -> Vec<BikeRecord> {
        let set: std::collections::BTreeSet<&BikeId> = ids.iter().collect();
        records.iter().filter(|r| set.contains(&r.bike)).cloned().collect()
    };
    let train = pick(&split.train);
    let test = pick(&split.test);
    let fit_on = if train.is_empty() { &records } else { &train };
    let t = if cfg.features.use_observed_max {
        observed_max_steps(fit_on, cfg.features.max_steps_cap)
    } else {
        cfg.features.t_steps
    };
    let (train_t, stats) = build_dataset(fit_on, Normalization::Fit, t)?;
    let (all_t, _) = build_dataset(&records, Normalization::Use(&stats), t)?;
    let out = &cfg.paths.features;
    all_t.save(out)?;
    let mut summary = FeaturizeSummary { t_steps: t, all: all_t.n, train: 0, test: 0 };
    if !train.is_empty() {
        train_t.save(out.join("train"))?;
        summary.train = train_t.n;
    }
    if !test.is_empty() {
        let (test_t, _) = build_dataset(&test, Normalization::Use(&stats), t)?;
        test_t.save(out.join("test"))?;
        summary.test = test_t.n;
    }
    let mut resolved = cfg.clone();
    resolved.features.t_steps = t;
    resolved.echo(out)?;
    Ok(summary)
}

/// `dir/sub` when that tensor exists, otherwise `dir` itself.
fn tensor_in(dir: &Path, sub: &str) -> Result<FeatureTensor> {
    let nested = dir.join(sub);
    if nested.join("meta.json").exists() {
        FeatureTensor::load(nested)
    } else {
        FeatureTensor::load(dir)
    }
}


fn save_run(dir: &Path, ckpt: &Checkpoint, log: &TrainLog, log_name: &str) -> Result<()> {
    ckpt.save(dir)?;
    log.write_jsonl(dir.join(log_name))?;
    fs::write(dir.join("train_summary.json"), serde_json::to_string_pretty(&log.snapshot)? + "\n")?;
    Ok(())
}

pub fn run_pretrain(cfg: &RunConfig) -> Result<TrainLog> {
    let tensor = match cfg.pretrain_on {
        PretrainOn::Train => tensor_in(&cfg.paths.features, "train")?,
        PretrainOn::All => FeatureTensor::load(&cfg.paths.features)?,
    };
    let mut resolved = cfg.clone();
    resolved.model.t_steps = tensor.t;
    resolved.features.t_steps = tensor.t;
    let (ckpt, log) = pretrain(&tensor, &resolved.model, &resolved.pretrain)?;
    save_run(&cfg.paths.pretrain, &ckpt, &log, "train_log.jsonl")?;
    resolved.echo(&cfg.paths.pretrain)?;
    Ok(log)
}

pub fn run_finetune(cfg: &RunConfig) -> Result<TrainLog> {
    let tensor = tensor_in(&cfg.paths.features, "train")?;
    let ckpt = Checkpoint::load(&cfg.paths.pretrain)?;
    let (ft, log) = finetune(&tensor, &ckpt, &cfg.finetune)?;
    save_run(&cfg.paths.finetune, &ft, &log, "train_log.jsonl")?;
    cfg.echo(&cfg.paths.finetune)?;
    Ok(log)
}


/// Stored kNN "model": the labeled training vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub rows: Vec<[f64; 5]>,
    pub labels: Vec<Status>,
}

pub fn run_baselines(cfg: &RunConfig) -> Result<()> {
    let tensor = tensor_in(&cfg.paths.features, "train")?;
    let labels = tensor.require_labels()?;
    let flat = FlatFeatures::from_tensor(&tensor);
    let out = &cfg.paths.baselines;
    fs::create_dir_all(out)?;
    let lr = train_logreg(&flat, &labels, &cfg.baselines.logreg)?;
    fs::write(out.join("logreg.json"), serde_json::to_string_pretty(&lr)? + "\n")?;
    let k = cfg.baselines.knn_k.min(flat.len());
    let knn = KnnModel { k, rows: flat.rows, labels };
    fs::write(out.join("knn.json"), serde_json::to_vec(&knn)?)?;
    if cfg.baselines.run_scratch {
        let mut model = cfg.model.clone();
        model.t_steps = tensor.t;
        let (ckpt, log) = train_scratch_transformer(&tensor, &model, &cfg.baselines.scratch)?;
        save_run(&out.join("scratch"), &ckpt, &log, "train_log.jsonl")?;
    }
    cfg.echo(out)?;
    Ok(())
}


fn checkpoint_probs(ckpt: &Checkpoint, tensor: &FeatureTensor, precision: Precision) -> Result<Vec<[f64; 2]>> {
    match precision {
        Precision::F32 => predict_all(&ckpt.to_model::<f32>()?, tensor),
        Precision::F64 => predict_all(&ckpt.to_model::<f64>()?, tensor),
    }
}

fn score(name: &str, truth: &[Status], preds: &[Status]) -> Result<MetricsReport> {
    Ok(metrics(&confusion(truth, preds)?)?.named(name))
}

fn neural_report(name: &str, ckpt: &Checkpoint, tensor: &FeatureTensor, truth: &[Status], p: Precision) -> Result<MetricsReport> {
    let preds: Vec<Status> = checkpoint_probs(ckpt, tensor, p)?.iter().map(|q| decide(q[0], q[1])).collect();
    let c = count_complexity(&ckpt.config);
    Ok(score(name, truth, &preds)?.with_complexity(c.params_millions(), c.macs_giga()))
}

/// Scores every available model on the test tensor. Baselines are included
/// when their directory exists, or always when `require_baselines` is set.
pub fn run_eval(cfg: &RunConfig, require_baselines: bool) -> Result<Vec<MetricsReport>> {
    let ft_dir = &cfg.paths.finetune;
    require(ft_dir)?;
    let ckpt = Checkpoint::load(ft_dir)?;
    let tensor = tensor_in(&cfg.paths.features, "test")?;
    let truth = tensor.require_labels()?;
    let precision = cfg.finetune.precision;

    let mut reports = Vec::new();
    let bdir = &cfg.paths.baselines;
    if require_baselines || bdir.join("logreg.json").exists() {
        require(&bdir.join("logreg.json"))?;
        require(&bdir.join("knn.json"))?;
        let flat = FlatFeatures::from_tensor(&tensor);
        let lr: LogReg = serde_json::from_slice(&fs::read(bdir.join("logreg.json"))?)?;
        let preds: Vec<Status> = flat.rows.iter().map(|x| lr.predict(x)).collect();
        reports.push(score(LOGREG_NAME, &truth, &preds)?);
        let knn: KnnModel = serde_json::from_slice(&fs::read(bdir.join("knn.json"))?)?;
        let train = FlatFeatures { rows: knn.rows };
        let preds = flat
            .rows
            .iter()
            .map(|q| knn_predict(&train, &knn.labels, q, knn.k))
            .collect::<Result<Vec<_>>>()?;
        reports.push(score(KNN_NAME, &truth, &preds)?);
        let scratch = bdir.join("scratch");
        if scratch.join("meta.json").exists() {
            let sc = Checkpoint::load(&scratch)?;
            reports.push(neural_report(SCRATCH_NAME, &sc, &tensor, &truth, cfg.baselines.scratch.precision)?);
        }
    }
    reports.push(neural_report(SS_NAME, &ckpt, &tensor, &truth, precision)?);

    let out = &cfg.paths.eval;
    write_reports(out, &reports)?;
    cfg.echo(out)?;
    Ok(reports)
}

fn write_reports(dir: &Path, reports: &[MetricsReport]) -> Result<String> {
    fs::create_dir_all(dir)?;
    let table = render_table(reports)?;
    fs::write(dir.join(METRICS_FILE), table.jsonl())?;
    fs::write(dir.join(TABLE_FILE), &table.text)?;
    Ok(table.text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub bike: BikeId,
    pub prob_unusable: f64,
    pub status: Status,
}

/// Scores every bike of the top-level features tensor and writes
/// `predictions.csv` with `bike_id,prob_unusable,status` rows.
pub fn run_predict(cfg: &RunConfig) -> Result<Vec<Prediction>> {
    let ckpt = Checkpoint::load(&cfg.paths.finetune)?;
    let tensor = FeatureTensor::load(&cfg.paths.features)?;
    let probs = checkpoint_probs(&ckpt, &tensor, cfg.finetune.precision)?;
    let preds: Vec<Prediction> = tensor
        .bike_ids
        .iter()
        .zip(&probs)
        .map(|(b, p)| Prediction { bike: b.clone(), prob_unusable: p[1], status: decide(p[0], p[1]) })
        .collect();
    let out = &cfg.paths.predict;
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(fs::File::create(out.join(PREDICTIONS_FILE))?);
    writeln!(w, "bike_id,prob_unusable,status")?;
    for p in &preds {
        writeln!(w, "{},{:.6},{}", p.bike, p.prob_unusable, p.status.as_u8())?;
    }
    w.flush()?;
    cfg.echo(out)?;
    Ok(preds)
}

/// Merges the metric rows found in `inputs` (default: the eval directory)
/// into one table.
pub fn run_report(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<String> {
    let defaults = [cfg.paths.eval.clone()];
    let inputs = if inputs.is_empty() { &defaults[..] } else { inputs };
    let mut reports = Vec::new();
    for dir in inputs {
        let path = if dir.is_file() { dir.clone() } else { dir.join(METRICS_FILE) };
        require(&path)?;
        reports.extend(parse_rows(&fs::read_to_string(&path)?)?);
    }
    let out = &cfg.paths.report;
    let text = write_reports(out, &reports)?;
    cfg.echo(out)?;
    Ok(text)
}

/// Every stage in order.
pub fn run_pipeline(cfg: &RunConfig) -> Result<String> {
    run_synth(cfg)?;
    run_ingest(cfg)?;
    run_featurize(cfg)?;
    run_pretrain(cfg)?;
    run_finetune(cfg)?;
    run_baselines(cfg)?;
    run_eval(cfg, true)?;
    run_predict(cfg)?;
    run_report(cfg, &[])
}
