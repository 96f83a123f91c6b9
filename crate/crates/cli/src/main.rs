//! `lvqa`: dataset generation, training, evaluation, the scalability sweep
//! and the component ablation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lvqa_core::config::RunConfig;
use lvqa_core::experiments::{bench_csv, run_ablation, run_bench};
use lvqa_core::metrics::{format_predictions, parse_predictions};
use lvqa_core::pipeline::{evaluate, oracle_predictions, predict_all, train, train_grounder, Model, TrainLogRow};
use lvqa_core::synthbench::{load_dataset, save_dataset, Dataset, Split, NUM_CHANNELS};
use lvqa_core::Error;

const CONFIG_HELP: &str = "\
Config files hold one `section.key=value` per line; `#` starts a comment.
Sections: run, ftc, tms, answerer, synthbench, metrics, bench. Unknown keys
are rejected. Every command writes `config.resolved` and `VERSION` into --out.

Exit codes: 0 success, 1 invalid input or configuration, 2 numeric failure.";

#[derive(Parser, Debug)]
#[command(name = "lvqa", version, about = "Long-video question answering at desk scale", after_help = CONFIG_HELP)]
struct Cli {
    /// Config file of `section.key=value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (overrides `run.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `run.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset directory from `lvqa gen`; generated in memory from the
    /// config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark.
    ///
    /// Writes `manifest`, `vocab.txt`, `videos/*.bin` and `qa/*.txt`.
    Gen,
    /// Train the model under the joint objective, then its grounder.
    ///
    /// Writes `checkpoint/` and `train_log.csv` with columns
    /// step,L_QA,L_ret,L_policy,total.
    Train {
        #[command(flatten)]
        data: DataArg,
    },
    /// Run inference on a split and score it.
    ///
    /// Writes `predictions.tsv` (id<TAB>answer) and `report.csv` with columns
    /// split,metric,value.
    Eval {
        #[command(flatten)]
        data: DataArg,
        /// Checkpoint directory from `lvqa train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Score an existing prediction file instead of running a model.
        #[arg(long, conflicts_with_all = ["checkpoint", "oracle_answers"])]
        predictions: Option<PathBuf>,
        /// Score answers read off the pixels by the generator's rule.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle_answers: bool,
    },
    /// Sweep the input frame count with and without consolidation.
    ///
    /// Writes `bench.csv` with columns
    /// mode,frames,visual_tokens,arena_bytes,runtime_ms,kacc.
    Bench {
        /// Checkpoint of a model trained with `run.ftc=true`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint of a model trained with `run.ftc=false`.
        #[arg(long)]
        frame_checkpoint: PathBuf,
    },
    /// Train both models and evaluate the four component arms.
    ///
    /// Writes `ablation.csv` with columns arm,subset,metric,value, plus both
    /// checkpoints and training logs.
    Ablate {
        #[command(flatten)]
        data: DataArg,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        cfg.apply_text(&std::fs::read_to_string(p)?)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("run.seed", &s.to_string())?;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(cfg: &RunConfig, force: bool) -> Result<PathBuf, Error> {
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory (use --out or run.out)".into()))?;
    if out.exists() && std::fs::read_dir(&out)?.next().is_some() && !force {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("{} is not empty (use --force to overwrite)", out.display()),
        )));
    }
    std::fs::create_dir_all(&out)?;
    Ok(out)
}

fn version_stamp() -> String {
    let describe = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into());
    format!("lvqa {} ({describe})\n", env!("CARGO_PKG_VERSION"))
}

fn write_stamps(out: &Path, cfg: &RunConfig) -> Result<(), Error> {
    std::fs::write(out.join("config.resolved"), cfg.to_text())?;
    std::fs::write(out.join("VERSION"), version_stamp())?;
    Ok(())
}

fn dataset(arg: &DataArg, cfg: &RunConfig) -> Result<Dataset, Error> {
    match &arg.data {
        Some(dir) => load_dataset(dir),
        None => Dataset::generate(&cfg.synth),
    }
}

fn cmd_train(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<(), Error> {
    let mut model = Model::new(cfg, ds.tokenizer.clone(), NUM_CHANNELS)?;
    eprintln!(
        "parameters: {} total, {} in the answerer",
        model.num_params(),
        model.answerer.num_params(&model.store)
    );
    let report = train(&mut model, ds, cfg, |r: &TrainLogRow| {
        if r.step.is_multiple_of(25) {
            eprintln!("step {} total {:.4}", r.step, r.total);
        }
    })?;
    std::fs::write(out.join("train_log.csv"), report.log_csv())?;
    if let Some(e) = report.failure {
        model.save(&out.join("checkpoint"))?;
        return Err(e);
    }
    if cfg.toggles.ftc || cfg.toggles.tg {
        let losses = train_grounder(&mut model, ds, cfg)?;
        eprintln!("grounder epoch losses: {losses:?}");
    }
    model.save(&out.join("checkpoint"))
}

fn cmd_eval(
    cfg: &RunConfig,
    ds: &Dataset,
    out: &Path,
    split: &str,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    oracle: bool,
) -> Result<(), Error> {
    let split: Split = split.parse()?;
    let qas = ds.split(split);
    if qas.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = if let Some(p) = predictions {
        parse_predictions(&std::fs::read_to_string(p)?)
    } else if oracle {
        oracle_predictions(ds, &qas)?
    } else {
        let dir = checkpoint
            .ok_or_else(|| Error::Config("eval needs --checkpoint, --predictions or --oracle-answers".into()))?;
        let model = Model::load(dir)?;
        // the architecture comes from the checkpoint, the inference switches
        // from the run config
        let run = RunConfig {
            toggles: lvqa_core::config::Toggles {
                ftc: model.config.toggles.ftc,
                ..cfg.toggles
            },
            ..cfg.clone()
        };
        predict_all(&model, &run, ds, &qas)?
            .into_iter()
            .map(|p| (p.id, p.answer))
            .collect()
    };
    let ordered: Vec<(&str, &str)> = qas
        .iter()
        .map(|q| (q.id.as_str(), preds.get(&q.id).map_or("", String::as_str)))
        .collect();
    std::fs::write(out.join("predictions.tsv"), format_predictions(ordered))?;
    let report = evaluate(&preds, &qas)?;
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    if report.empty_predictions() > 0 {
        eprintln!("{} empty predictions scored as 0", report.empty_predictions());
    }
    print!("{}", report.to_csv());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = resolve_config(&cli)?;
    let out = prepare_out(&cfg, cli.force)?;
    match &cli.command {
        Command::Gen => {
            let ds = Dataset::generate(&cfg.synth)?;
            save_dataset(&ds, &out, true)?;
            eprintln!("{} questions written to {}", ds.qas.len(), out.display());
        }
        Command::Train { data } => cmd_train(&cfg, &dataset(data, &cfg)?, &out)?,
        Command::Eval {
            data,
            checkpoint,
            split,
            predictions,
            oracle_answers,
        } => cmd_eval(
            &cfg,
            &dataset(data, &cfg)?,
            &out,
            split,
            checkpoint.as_deref(),
            predictions.as_deref(),
            *oracle_answers,
        )?,
        Command::Bench {
            checkpoint,
            frame_checkpoint,
        } => {
            let ftc = Model::load(checkpoint)?;
            let frames = Model::load(frame_checkpoint)?;
            if !ftc.config.toggles.ftc || frames.config.toggles.ftc {
                return Err(Error::Config(
                    "--checkpoint needs an FTC model and --frame-checkpoint a frame-token model".into(),
                ));
            }
            let rows = run_bench(&cfg, &ftc, &frames)?;
            let csv = bench_csv(&rows);
            std::fs::write(out.join("bench.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Ablate { data } => {
            let ds = dataset(data, &cfg)?;
            let ab = run_ablation(&cfg, &ds, |m| eprintln!("{m}"))?;
            ab.ftc_model.save(&out.join("checkpoint-ftc"))?;
            ab.frame_model.save(&out.join("checkpoint-frames"))?;
            std::fs::write(out.join("train_log_ftc.csv"), ab.ftc_log.log_csv())?;
            std::fs::write(out.join("train_log_frames.csv"), ab.frame_log.log_csv())?;
            std::fs::write(out.join("ablation.csv"), ab.to_csv())?;
            print!("{}", ab.to_csv());
        }
    }
    write_stamps(&out, &cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
