use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bikescan::numerics::Precision;
use bikescan::pipeline::{self, Overrides, RunConfig};
use bikescan::training::{LossScope, TrainLog};
use bikescan::Result;

#[derive(Parser, Debug)]
#[command(name = "bikescan", version, about = "Detect unusable shared bikes from GPS trajectories and trip records")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory of the stage (for `pipeline`, the root of all stages).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Features directory produced by `featurize`.
    #[arg(long, global = true)]
    tensor: Option<PathBuf>,
    /// Checkpoint directory to start from.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Raw data directory (`ingest`) or ingest directory (`featurize`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Baselines directory to include in `eval`.
    #[arg(long, global = true)]
    baselines: Option<PathBuf>,
    /// Directories or files with metric rows, for `report`.
    #[arg(long = "reports", global = true, num_args = 1..)]
    reports: Vec<PathBuf>,
    #[arg(long, global = true)]
    label_fraction: Option<f64>,
    /// full | masked
    #[arg(long, global = true)]
    loss_scope: Option<LossScope>,
    /// f32 | f64
    #[arg(long, global = true)]
    precision: Option<Precision>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate a labeled synthetic fleet.
    Synth,
    /// Parse and join raw feeds, then split labeled bikes into train and test.
    Ingest,
    /// Build standardized feature tensors.
    Featurize,
    /// Masked-reconstruction pretraining.
    Pretrain,
    /// Train a new classification head on the frozen pretrained encoder.
    Finetune,
    /// Train the comparison models.
    TrainBaselines,
    /// Score models on the test tensor.
    Eval,
    /// Write per-bike predictions.
    Predict,
    /// Render the comparison table from metric rows.
    Report,
    /// Run every stage in order.
    Pipeline,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        label_fraction: cli.label_fraction,
        loss_scope: cli.loss_scope,
        precision: cli.precision,
    });
    let p = &mut cfg.paths;
    if let Some(t) = &cli.tensor {
        p.features = t.clone();
    }
    if let Some(b) = &cli.baselines {
        p.baselines = b.clone();
    }
    match cli.command {
        Command::Ingest => set(&mut p.data, &cli.data),
        Command::Featurize => set(&mut p.ingest, &cli.data),
        Command::Finetune => set(&mut p.pretrain, &cli.checkpoint),
        Command::Eval | Command::Predict => set(&mut p.finetune, &cli.checkpoint),
        _ => {}
    }
    if let Some(out) = &cli.out {
        let out = out.clone();
        match cli.command {
            Command::Synth => p.data = out,
            Command::Ingest => p.ingest = out,
            Command::Featurize => p.features = out,
            Command::Pretrain => p.pretrain = out,
            Command::Finetune => p.finetune = out,
            Command::TrainBaselines => p.baselines = out,
            Command::Eval => p.eval = out,
            Command::Predict => p.predict = out,
            Command::Report => p.report = out,
            Command::Pipeline => *p = pipeline::Paths::under(&out),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set(slot: &mut PathBuf, v: &Option<PathBuf>) {
    if let Some(v) = v {
        *slot = v.clone();
    }
}

fn print_log(log: &TrainLog) {
    if let (Some(first), Some(last)) = (log.entries.first(), log.entries.last()) {
        let secs: f64 = log.entries.iter().map(|e| e.seconds).sum();
        println!(
            "{}: {} epochs, loss {:.6} -> {:.6} ({secs:.1}s)",
            last.phase,
            log.entries.len(),
            first.loss,
            last.loss
        );
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    let p = &cfg.paths;
    match cli.command {
        Command::Synth => {
            let m = pipeline::run_synth(&cfg)?;
            println!(
                "wrote {} bikes ({} unusable), {} trips, {} gps points to {}",
                m.normal.bikes + m.faulty.bikes,
                m.faulty.bikes,
                m.trips,
                m.gps_points,
                p.data.display()
            );
        }
        Command::Ingest => {
            let r = pipeline::run_ingest(&cfg)?;
            println!(
                "{} bikes ({} skipped, {} unlabeled); train {:?}, test {:?} -> {}",
                r.bikes,
                r.skipped.len(),
                r.unlabeled,
                r.train_counts,
                r.test_counts,
                p.ingest.display()
            );
        }
        Command::Featurize => {
            let s = pipeline::run_featurize(&cfg)?;
            println!(
                "T = {}: {} bikes, {} train, {} test -> {}",
                s.t_steps,
                s.all,
                s.train,
                s.test,
                p.features.display()
            );
        }
        Command::Pretrain => print_log(&pipeline::run_pretrain(&cfg)?),
        Command::Finetune => print_log(&pipeline::run_finetune(&cfg)?),
        Command::TrainBaselines => {
            pipeline::run_baselines(&cfg)?;
            println!("baselines -> {}", p.baselines.display());
        }
        Command::Eval => {
            let reports = pipeline::run_eval(&cfg, cli.baselines.is_some())?;
            print!("{}", bikescan::evaluation::render_table(&reports)?.text);
        }
        Command::Predict => {
            let preds = pipeline::run_predict(&cfg)?;
            let flagged = preds.iter().filter(|x| x.status == bikescan::data_model::Status::Unusable).count();
            println!("{} bikes scored, {flagged} flagged unusable -> {}", preds.len(), p.predict.display());
        }
        Command::Report => print!("{}", pipeline::run_report(&cfg, &cli.reports)?),
        Command::Pipeline => print!("{}", pipeline::run_pipeline(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
