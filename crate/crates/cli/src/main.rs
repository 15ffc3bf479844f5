use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use calec_core::checkpoint::{Checkpoint, Stage};
use calec_core::config::Config;
use calec_core::data::{prepare_all, Dataset};
use calec_core::diagnostics::GradCheckSetup;
use calec_core::eval::{evaluate, evaluate_record};
use calec_core::model::GenerationMode;
use calec_core::parallel::Execution;
use calec_core::train::{self, TrainReport};

#[derive(Parser, Debug)]
#[command(name = "calec", version, about = "Chunk-aware visual entailment with constrained explanations")]
struct Cli {
    /// TOML config file; built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of whatever the subcommand randomizes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (directory, checkpoint file or report stem).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset splits and lexicon.
    GenData,
    /// Pre-train the encoder and interactor on chunk-region alignment.
    PretrainAlign {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train encoder, interactor and relation inferrer.
    TrainInference {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Pre-trained checkpoint; fresh initialization when absent.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train the explanation generator with everything else frozen.
    TrainGenerator {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "runs/stage1.ckpt")]
        init: PathBuf,
        /// Train on the plain vocabulary distribution.
        #[arg(long)]
        no_lexical: bool,
    },
    /// Score a split and write the summary CSV and per-sample JSON lines.
    Evaluate {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "runs/stage2.ckpt")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value_t = Mode::Full)]
        mode: Mode,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Print the prediction, constraint set and explanation of one record.
    Explain {
        record_id: String,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "runs/stage2.ckpt")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Full)]
        mode: Mode,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Compare analytic and finite-difference gradients of every stage loss.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Lexical mixture and constrained beam sample.
    Full,
    /// Lexical mixture, plain beam sample.
    NoConstraint,
    /// Vocabulary softmax only, plain beam sample.
    NoLexical,
}

impl Mode {
    fn generation(self) -> GenerationMode {
        match self {
            Mode::Full => GenerationMode::FULL,
            Mode::NoConstraint => GenerationMode { lexical: true, constrained: false },
            Mode::NoLexical => GenerationMode { lexical: false, constrained: false },
        }
    }
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Beams kept per step.
    #[arg(long)]
    beam: Option<usize>,
    /// Tokens drawn per beam per step.
    #[arg(long)]
    sample_size: Option<usize>,
    /// Candidates kept before sampling.
    #[arg(long)]
    top_k: Option<usize>,
    /// Longest explanation in tokens.
    #[arg(long)]
    max_len: Option<usize>,
    /// Score multiplier for a constraint-word hit.
    #[arg(long)]
    lambda: Option<f64>,
}

impl DecodeArgs {
    fn apply(&self, cfg: &mut Config) {
        let d = &mut cfg.decode;
        d.beam = self.beam.unwrap_or(d.beam);
        d.sample_size = self.sample_size.unwrap_or(d.sample_size);
        d.top_k = self.top_k.unwrap_or(d.top_k);
        d.max_len = self.max_len.unwrap_or(d.max_len);
        d.lambda = self.lambda.unwrap_or(d.lambda);
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Config::default(),
    };
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from(default));

    match &cli.cmd {
        Command::GenData => {
            if let Some(s) = cli.seed {
                cfg.data.seed = s;
            }
            let dir = out("data");
            let ds = Dataset::synthetic(&cfg.data)?;
            ds.write(&dir, cli.force)?;
            println!(
                "wrote {} pretrain, {} train, {} val, {} test records to {}",
                ds.pretrain.len(),
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                dir.display()
            );
        }
        Command::PretrainAlign { data, init } => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            let path = out("runs/pretrain.ckpt");
            guard(&[&path, &path.with_extension("csv")], cli.force)?;
            let ds = Dataset::load(data)?;
            let vocab = ds.vocab();
            let pre = prepare_all(&ds.pretrain, &vocab, &ds.lexicon)?;
            let val = prepare_all(&ds.val, &vocab, &ds.lexicon)?;
            let init = init.as_deref().map(Checkpoint::load).transpose()?;
            let t = Instant::now();
            let (ck, report) = train::pretrain_csi(&cfg, init, &pre, &val, &vocab, exec)?;
            finish(&ck, &report, &path, "val_alignment_accuracy", t, cli.force)?;
        }
        Command::TrainInference { data, init } => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            let path = out("runs/stage1.ckpt");
            guard(&[&path, &path.with_extension("csv")], cli.force)?;
            let ds = Dataset::load(data)?;
            let vocab = ds.vocab();
            let tr = prepare_all(&ds.train, &vocab, &ds.lexicon)?;
            let val = prepare_all(&ds.val, &vocab, &ds.lexicon)?;
            let init = init.as_deref().map(Checkpoint::load).transpose()?;
            let t = Instant::now();
            let (ck, report) = train::train_stage1(&cfg, init, &tr, &val, &vocab, exec)?;
            finish(&ck, &report, &path, "val_accuracy", t, cli.force)?;
        }
        Command::TrainGenerator { data, init, no_lexical } => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            let path = out("runs/stage2.ckpt");
            guard(&[&path, &path.with_extension("csv")], cli.force)?;
            let ds = Dataset::load(data)?;
            let vocab = ds.vocab();
            let tr = prepare_all(&ds.train, &vocab, &ds.lexicon)?;
            let val = prepare_all(&ds.val, &vocab, &ds.lexicon)?;
            let stage1 = Checkpoint::load(init)?;
            let t = Instant::now();
            let (ck, report) = train::train_stage2(&cfg, stage1, &tr, &val, &vocab, !no_lexical, exec)?;
            finish(&ck, &report, &path, "val_neg_nll_per_token", t, cli.force)?;
        }
        Command::Evaluate { data, checkpoint, split, mode, decode } => {
            let ck = Checkpoint::load(checkpoint)?;
            ck.require(&[Stage::Stage2])?;
            let mut run_cfg = ck.config.clone();
            if cli.config.is_some() {
                run_cfg.decode = cfg.decode.clone();
            }
            decode.apply(&mut run_cfg);
            if let Some(s) = cli.seed {
                run_cfg.decode.seed = s;
            }
            let stem = out("runs/eval");
            guard(&[&stem.with_extension("csv"), &stem.with_extension("jsonl")], cli.force)?;
            let ds = Dataset::load(data)?;
            let records = ds.split(split)?;
            let model = ck.model();
            let report = evaluate(&model, records, &ds.vocab(), &ds.lexicon, &run_cfg.decode, mode.generation(), exec)?;
            let (csv, jsonl) = report.write(&stem, cli.force)?;
            println!(
                "S_T {:.4}  S_E {:.4}  S_O {:.4}  failed {}  constraint hits {:.3}",
                report.s_t,
                report.s_e,
                report.s_o,
                report.failed,
                report.mean_constraint_hits()
            );
            println!("wrote {} and {}", csv.display(), jsonl.display());
        }
        Command::Explain { record_id, data, checkpoint, mode, decode } => {
            let ck = Checkpoint::load(checkpoint)?;
            ck.require(&[Stage::Stage2])?;
            let mut run_cfg = ck.config.clone();
            decode.apply(&mut run_cfg);
            if let Some(s) = cli.seed {
                run_cfg.decode.seed = s;
            }
            let ds = Dataset::load(data)?;
            let record = ["pretrain", "train", "val", "test"]
                .iter()
                .flat_map(|s| ds.split(s).expect("known split"))
                .find(|r| &r.id == record_id)
                .with_context(|| format!("no record with id {record_id}"))?;
            let row = evaluate_record(&ck.model(), record, &ds.vocab(), &ds.lexicon, &run_cfg.decode, mode.generation());
            let text = serde_json::to_string_pretty(&row)?;
            match &cli.out {
                Some(p) => {
                    guard(&[p], cli.force)?;
                    std::fs::write(p, text)?;
                }
                None => println!("{text}"),
            }
            if let Some(e) = row.error {
                bail!("record {record_id} failed: {e}");
            }
        }
        Command::GradCheck { epsilon, tolerance } => {
            let setup = GradCheckSetup::new(cli.seed.unwrap_or(3))?;
            let mut worst: f64 = 0.0;
            let mut lines = Vec::new();
            for (name, report) in [
                ("alignment", setup.check_alignment(*epsilon, exec)?),
                ("stage1", setup.check_stage1(*epsilon, exec)?),
                ("stage2", setup.check_stage2(*epsilon, exec)?),
            ] {
                let line = format!(
                    "{name}: max relative error {:.3e} at {}[{}] over {} coordinates",
                    report.max_rel_error, report.worst_param, report.worst_index, report.coordinates
                );
                println!("{line}");
                lines.push(line);
                worst = worst.max(report.max_rel_error);
            }
            if let Some(p) = &cli.out {
                guard(&[p], cli.force)?;
                std::fs::write(p, lines.join("\n") + "\n")?;
            }
            if worst >= *tolerance {
                bail!("gradient check failed: {worst:.3e} >= {tolerance:.1e}");
            }
        }
    }
    Ok(())
}

/// Refuses to start a run whose outputs already exist.
fn guard(paths: &[&Path], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    if let Some(p) = paths.iter().find(|p| p.exists()) {
        bail!("{} exists; pass --force to overwrite", p.display());
    }
    Ok(())
}

fn finish(ck: &Checkpoint, report: &TrainReport, path: &Path, metric: &str, started: Instant, force: bool) -> Result<()> {
    ck.save(path, force)?;
    let curve = path.with_extension("csv");
    report.write_csv(&curve, metric, force)?;
    println!(
        "{}: best {metric} {:.4} at epoch {} of {} ({:.1}s){}",
        ck.stage,
        report.best_metric(),
        report.best_epoch,
        report.curve.len() - 1,
        started.elapsed().as_secs_f64(),
        if report.stopped_early { ", stopped early" } else { "" }
    );
    println!("wrote {} and {}", path.display(), curve.display());
    Ok(())
}
