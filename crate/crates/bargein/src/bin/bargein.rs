//! Command-line front end for the barge-in verification toolkit.
//!
//! Exit codes: 0 success, 1 runtime/validation failure, 2 usage or
//! configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bargein::baseline::RecurrentBaseline;
use bargein::config::{parse_override, RunConfig};
use bargein::data::{load_corpus, save_corpus, CorpusManifest, Split};
use bargein::datagen::{expected_audio_only_ceiling, generate};
use bargein::eval::{
    benchmark_latency, evaluate_split, write_latency_samples, EvalReport, EvalScores,
    LatencySummary, ReportRow,
};
use bargein::fusion::{FusionConfig, FusionModel};
use bargein::infusion::InfusionModel;
use bargein::{Error, Result};

#[derive(Parser)]
#[command(name = "bargein", version, about = "Barge-in verification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.epochs=4. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let overrides = self
            .overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>>>()?;
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dialogue corpus (audio + manifest).
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for the corpus; must not already hold one.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the speech stack to predict text-encoder word embeddings.
    PretrainInfuse {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the fusion classifier (speech + prompt + context branches).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Optional infusion checkpoint to seed the speech branch from.
        #[arg(long)]
        infusion: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the filterbank + recurrent audio-only reference model.
    TrainBaseline {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained classifier on one split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Fusion checkpoint from train.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure batch-1 single-thread inference latency.
    BenchLatency {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Worker threads; anything other than 1 is rejected.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the input-branch ablation grid plus the baseline.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Optional infusion checkpoint shared by all fusion variants.
        #[arg(long)]
        infusion: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "validation" | "val" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!(
            "unknown split `{name}` (train|validation|test)"
        ))),
    }
}

/// Creates `dir` if needed and refuses to clobber `fresh` files inside it,
/// so re-running a command never silently rewrites an earlier run.
fn prepare_out(dir: &Path, fresh: &[&str]) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Io(format!("creating {}: {e}", dir.display())))?;
    for name in fresh {
        let p = dir.join(name);
        if p.exists() {
            return Err(Error::Validation(format!(
                "{} already exists; pick a fresh output directory",
                p.display()
            )));
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))
}

fn load_corpus_dir(dir: &Path) -> Result<CorpusManifest> {
    load_corpus(&dir.join("manifest.jsonl"))
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_text(&out.join("config.resolved"), &cfg.render())
}

fn train_fusion(
    cfg: &RunConfig,
    fusion_cfg: FusionConfig,
    corpus: &CorpusManifest,
    infusion: Option<&Path>,
) -> Result<FusionModel> {
    let mut model = FusionModel::new(fusion_cfg);
    if let Some(path) = infusion {
        let src = InfusionModel::load(path)?;
        let n = model.import_speech_branch(&src.store);
        eprintln!("seeded {n} speech-branch tensors from {}", path.display());
    }
    let curve = model.train(corpus, &cfg.train)?;
    if let Some(last) = curve.last() {
        eprintln!(
            "epoch {}: train_loss {:.4} val_recall {:.1} val_f1 {:.1}",
            last.epoch, last.train_loss, last.val_recall, last.val_f1
        );
    }
    Ok(model)
}

fn scores_json(scores: &EvalScores) -> String {
    serde_json::to_string_pretty(scores).expect("scores serialize") + "\n"
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.resolve()?;
            prepare_out(&out, &["manifest.jsonl"])?;
            let corpus = generate(&cfg.gen)?;
            let manifest = save_corpus(&corpus, &out)?;
            echo_config(&cfg, &out)?;
            println!(
                "wrote {} turns to {} (audio-only ceiling {:.3})",
                corpus.turns.len(),
                manifest.display(),
                expected_audio_only_ceiling(&cfg.gen)
            );
        }
        Command::PretrainInfuse { config, data, out } => {
            let cfg = config.resolve()?;
            prepare_out(&out, &["infusion.ckpt"])?;
            let corpus = load_corpus_dir(&data)?;
            let mut model = InfusionModel::new(cfg.infusion_config());
            let outcome = model.pretrain(&corpus, &cfg.pretrain)?;
            model.save(&out.join("infusion.ckpt"))?;
            let curve: String = outcome
                .loss_curve
                .iter()
                .enumerate()
                .map(|(i, l)| format!("{i},{l}\n"))
                .collect();
            write_text(&out.join("pretrain_loss.csv"), &format!("step,loss\n{curve}"))?;
            echo_config(&cfg, &out)?;
            println!(
                "pretrained {} steps (first loss {:.4}, last {:.4}, {} unaligned skipped)",
                outcome.loss_curve.len(),
                outcome.loss_curve.first().copied().unwrap_or(f64::NAN),
                outcome.loss_curve.last().copied().unwrap_or(f64::NAN),
                outcome.skipped_unaligned
            );
        }
        Command::Train {
            config,
            data,
            infusion,
            out,
        } => {
            let cfg = config.resolve()?;
            prepare_out(&out, &["model.ckpt"])?;
            let corpus = load_corpus_dir(&data)?;
            let model = train_fusion(&cfg, cfg.fusion_config(), &corpus, infusion.as_deref())?;
            model.save(&out.join("model.ckpt"))?;
            let scores = evaluate_split(&model, &corpus, Split::Validation)?;
            write_text(&out.join("val_scores.json"), &scores_json(&scores))?;
            echo_config(&cfg, &out)?;
            println!(
                "validation: avg_recall {:.1} f1 {:.1} over {} turns",
                scores.avg_recall, scores.f1, scores.count
            );
        }
        Command::TrainBaseline { config, data, out } => {
            let cfg = config.resolve()?;
            prepare_out(&out, &["baseline.ckpt"])?;
            let corpus = load_corpus_dir(&data)?;
            let mut model = RecurrentBaseline::new(cfg.baseline_config());
            let curve = model.train(&corpus, &cfg.train)?;
            model.save(&out.join("baseline.ckpt"))?;
            echo_config(&cfg, &out)?;
            if let Some(last) = curve.last() {
                println!(
                    "baseline epoch {}: train_loss {:.4} val_recall {:.1} val_f1 {:.1}",
                    last.epoch, last.train_loss, last.val_recall, last.val_f1
                );
            }
        }
        Command::Evaluate {
            data,
            model,
            split,
            out,
        } => {
            let split = parse_split(&split)?;
            prepare_out(&out, &["scores.json"])?;
            let corpus = load_corpus_dir(&data)?;
            let model = FusionModel::load(&model)?;
            let scores = evaluate_split(&model, &corpus, split)?;
            write_text(&out.join("scores.json"), &scores_json(&scores))?;
            println!(
                "{split}: avg_recall {:.1} f1 {:.1} accuracy {:.1} over {} turns",
                scores.avg_recall, scores.f1, scores.accuracy, scores.count
            );
        }
        Command::BenchLatency {
            config,
            data,
            model,
            split,
            threads,
            out,
        } => {
            let cfg = config.resolve()?;
            let split = parse_split(&split)?;
            prepare_out(&out, &["latency.json", "latency_samples.csv"])?;
            let corpus = load_corpus_dir(&data)?;
            let model = FusionModel::load(&model)?;
            let summary = benchmark_latency(
                &model,
                &corpus,
                split,
                cfg.latency_warmup,
                cfg.latency_runs,
                threads,
            )?;
            write_latency_samples(&summary.samples, &out.join("latency_samples.csv"))?;
            let brief = LatencySummary {
                samples: Vec::new(),
                ..summary.clone()
            };
            write_text(
                &out.join("latency.json"),
                &(serde_json::to_string_pretty(&brief).expect("latency serialize") + "\n"),
            )?;
            println!(
                "latency: median {:.2} ms p95 {:.2} ms (branches speech {:.2} / prompt {:.2} / context {:.2} ms)",
                summary.median_ms,
                summary.p95_ms,
                summary.branch_median_ms[0],
                summary.branch_median_ms[1],
                summary.branch_median_ms[2]
            );
        }
        Command::Ablate {
            config,
            data,
            infusion,
            out,
        } => {
            let cfg = config.resolve()?;
            prepare_out(&out, &["report.csv", "report.txt"])?;
            let corpus = load_corpus_dir(&data)?;
            let report = ablation_suite(&cfg, &corpus, infusion.as_deref())?;
            report.write(&out)?;
            echo_config(&cfg, &out)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

/// Trains the baseline plus every enabled-branch combination of the fusion
/// model (with and without the infusion checkpoint when one is supplied)
/// and scores them all on the test split.
fn ablation_suite(
    cfg: &RunConfig,
    corpus: &CorpusManifest,
    infusion: Option<&Path>,
) -> Result<EvalReport> {
    let mut rows = Vec::new();

    let mut baseline = RecurrentBaseline::new(cfg.baseline_config());
    baseline.train(corpus, &cfg.train)?;
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for turn in corpus.split(Split::Test) {
        preds.push(baseline.predict(&turn.user)?);
        truths.push(turn.label);
    }
    let (recall, f1) = bargein::eval::metrics(&preds, &truths)?;
    rows.push(ReportRow {
        model: "filterbank-recurrent".into(),
        inputs: "audio".into(),
        avg_recall: recall,
        f1,
        latency_ms_median: f64::NAN,
        latency_ms_p95: f64::NAN,
    });

    let combos = [
        (false, false, "audio"),
        (true, false, "audio+prompt"),
        (false, true, "audio+context"),
        (true, true, "audio+prompt+context"),
    ];
    let variants: Vec<(Option<&Path>, &str)> = match infusion {
        Some(path) => vec![(None, "fusion"), (Some(path), "fusion-infused")],
        None => vec![(None, "fusion")],
    };
    for (ckpt, name) in variants {
        for (use_prompt, use_context, inputs) in combos {
            let mut fusion_cfg = cfg.fusion_config();
            fusion_cfg.use_prompt = use_prompt;
            fusion_cfg.use_context = use_context;
            let model = train_fusion(cfg, fusion_cfg, corpus, ckpt)?;
            let scores = evaluate_split(&model, corpus, Split::Test)?;
            let latency = benchmark_latency(
                &model,
                corpus,
                Split::Test,
                cfg.latency_warmup,
                1,
                1,
            )?;
            rows.push(ReportRow {
                model: name.into(),
                inputs: inputs.into(),
                avg_recall: scores.avg_recall,
                f1: scores.f1,
                latency_ms_median: latency.median_ms,
                latency_ms_p95: latency.p95_ms,
            });
        }
    }
    Ok(EvalReport { rows })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
