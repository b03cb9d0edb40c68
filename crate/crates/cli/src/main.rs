mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use softshape::checkpoint::{Checkpoint, CheckpointMeta};
use softshape::data::{align_labels, load_ucr_tsv, prepare, prepare_with_means, split_indices, Dataset};
use softshape::export::{attention_map, write_attention, write_embeddings, Stage};
use softshape::params::ParamGroup;
use softshape::report::{write_experts_file, write_metrics_file, Summary};
use softshape::train::{evaluate, run, sweep_eta, ModelState, SweepRow, SPARSE_RATIOS};
use softshape::Error;

use crate::config::{RunConfig, OUT_DIR_ENV};

#[derive(Parser, Debug)]
#[command(name = "softshape", version, about = "Soft-shape time series classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Select the window length (unless fixed), train, and score the test split.
    Train(RunArgs),
    /// Accuracy of a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the dataset recorded in the checkpoint.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Per-timestep attention scores for one sample.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        sample: usize,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Shape embeddings of every sample at one stage (input, intra, inter, output).
    ExportEmbed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        stage: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train once per sparse ratio and write sweep.csv.
    SweepEta {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated sparse ratios.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (beats the environment and the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
    All,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::EmptyDataset(_)
            | Error::NonNumeric { .. }
            | Error::TooFewFields { .. }
            | Error::TooFewSamples { .. }
            | Error::UnknownLabel(_) => Failure::data(e.to_string()),
            _ => Failure::config(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    load_ucr_tsv(path).map_err(|e| Failure::data(e.to_string()))
}

fn load_run(args: &RunArgs) -> Result<(RunConfig, PathBuf, Dataset, PathBuf), Failure> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides).map_err(Failure::config)?;
    let dataset_path = cfg
        .dataset
        .clone()
        .ok_or_else(|| Failure::config("no dataset given (set \"dataset\" in the config or --set dataset=PATH)"))?;
    let raw = load_dataset(&dataset_path)?;
    let env = std::env::var(OUT_DIR_ENV).ok();
    let out = cfg.resolve_output(args.out.as_deref(), env.as_deref());
    fs::create_dir_all(&out).map_err(|e| Failure::config(format!("cannot create {}: {e}", out.display())))?;
    Ok((cfg, dataset_path, raw, out))
}

fn cmd_train(args: &RunArgs) -> CmdResult {
    let started = Instant::now();
    let (cfg, dataset_path, raw, out) = load_run(args)?;
    let data = prepare(&raw, cfg.train.seed)?;
    let result = run::<f32>(&data, &cfg.train)?;
    let outcome = &result.outcome;
    let state = &outcome.state;

    write_metrics_file(out.join("metrics.csv"), &outcome.metrics)?;
    write_experts_file(out.join("experts.csv"), &outcome.metrics)?;
    let meta = CheckpointMeta {
        dataset: dataset_path.display().to_string(),
        split_seed: data.split.seed,
        class_labels: data.dataset.class_labels.clone(),
        impute_means: data.impute_means.clone(),
        train_config: cfg.train.clone(),
    };
    Checkpoint::from_state(state, meta).save(out.join("checkpoint.json"))?;
    let best = outcome
        .metrics
        .iter()
        .find(|m| m.epoch == state.epoch)
        .expect("selected epoch was recorded");
    let summary = Summary {
        dataset: data.dataset.name.clone(),
        m: result.m,
        m_scores: result.m_scores.clone(),
        test_accuracy: result.test_accuracy,
        val_accuracy: outcome.best_val_accuracy,
        val_loss: outcome.best_val_loss,
        best_epoch: state.epoch,
        epochs_run: outcome.metrics.len(),
        lambda: cfg.train.lambda,
        loss: softshape::model::LossParts::compose(best.ce, best.imp, best.load, cfg.train.lambda),
        num_params: state.model.params.num_params(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    summary.save(out.join("summary.json"))?;
    println!(
        "{}: m={} test_accuracy={:.4} best_epoch={} -> {}",
        summary.dataset,
        summary.m,
        summary.test_accuracy,
        summary.best_epoch,
        out.display()
    );
    Ok(())
}

struct Loaded {
    state: ModelState<f32>,
    dataset: Dataset,
    split_seed: u64,
}

fn load_checkpoint(checkpoint: &Path, dataset: Option<&Path>) -> Result<Loaded, Failure> {
    let ck = Checkpoint::load(checkpoint)?;
    let state = ck.to_state::<f32>()?;
    let path = dataset.map_or_else(|| PathBuf::from(&ck.meta.dataset), Path::to_path_buf);
    let raw = load_dataset(&path)?;
    let aligned = align_labels(&raw, &ck.meta.class_labels)?;
    let prepared = prepare_with_means(&aligned, &ck.meta.impute_means).map_err(|e| Failure::data(e.to_string()))?;
    Ok(Loaded {
        state,
        dataset: prepared,
        split_seed: ck.meta.split_seed,
    })
}

fn emit(output: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> softshape::Result<()>) -> CmdResult {
    match output {
        Some(p) => {
            let mut f = fs::File::create(p).map_err(|e| Failure::config(format!("cannot create {}: {e}", p.display())))?;
            write(&mut f)?;
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)?;
        }
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, dataset: Option<&Path>, split: Split) -> CmdResult {
    let l = load_checkpoint(checkpoint, dataset)?;
    let n = l.dataset.sample_count();
    let indices = match split {
        Split::All => (0..n).collect(),
        other => {
            let s = split_indices(n, l.split_seed)?;
            match other {
                Split::Train => s.train,
                Split::Val => s.val,
                _ => s.test,
            }
        }
    };
    let acc = evaluate(&l.state, &l.dataset.subset(&indices))?;
    let report = serde_json::json!({
        "split": format!("{split:?}").to_lowercase(),
        "samples": indices.len(),
        "accuracy": acc,
    });
    println!("{report}");
    Ok(())
}

fn cmd_export_attn(checkpoint: &Path, dataset: Option<&Path>, sample: usize, output: Option<&Path>) -> CmdResult {
    let l = load_checkpoint(checkpoint, dataset)?;
    let rec = l.dataset.records.get(sample).ok_or(Error::IndexOutOfRange {
        index: sample,
        len: l.dataset.sample_count(),
    })?;
    let series: Vec<f32> = rec.values.iter().map(|&v| v as f32).collect();
    let map = attention_map(&l.state, &series)?;
    emit(output, |w| write_attention(w, &map))
}

fn cmd_export_embed(checkpoint: &Path, dataset: Option<&Path>, stage: &str, output: Option<&Path>) -> CmdResult {
    let stage: Stage = stage.parse()?;
    let l = load_checkpoint(checkpoint, dataset)?;
    emit(output, |w| write_embeddings(w, &l.state, &l.dataset, stage))
}

fn write_sweep(path: &Path, rows: &[SweepRow]) -> CmdResult {
    let mut text = String::from("sparse_ratio,eta,m,val_accuracy,test_accuracy,best_epoch,final_shapes\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sparse_ratio, r.eta, r.m, r.val_accuracy, r.test_accuracy, r.best_epoch, r.final_shapes
        ));
    }
    fs::write(path, &text).map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))?;
    print!("{text}");
    Ok(())
}

fn cmd_sweep(args: &RunArgs, ratios: Option<&[f64]>) -> CmdResult {
    let (cfg, _, raw, out) = load_run(args)?;
    let data = prepare(&raw, cfg.train.seed)?;
    let rows = sweep_eta::<f32>(&data, &cfg.train, ratios.unwrap_or(&SPARSE_RATIOS))?;
    write_sweep(&out.join("sweep.csv"), &rows)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval {
            checkpoint,
            dataset,
            split,
        } => cmd_eval(checkpoint, dataset.as_deref(), *split),
        Command::ExportAttn {
            checkpoint,
            dataset,
            sample,
            output,
        } => cmd_export_attn(checkpoint, dataset.as_deref(), *sample, output.as_deref()),
        Command::ExportEmbed {
            checkpoint,
            dataset,
            stage,
            output,
        } => cmd_export_embed(checkpoint, dataset.as_deref(), stage, output.as_deref()),
        Command::SweepEta { run, ratios } => cmd_sweep(run, ratios.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
