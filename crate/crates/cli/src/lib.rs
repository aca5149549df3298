//! The `den` command line: training runs, evaluation, analytics, a gradient
//! oracle check and synthetic data export.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use den_core::analysis::{self, Deployment, ModelHistogram};
use den_core::checkpoint::{load_checkpoint, save_checkpoint};
use den_core::config::{load_config, RunConfig};
use den_core::data::{self, Dataset, SyntheticSpec};
use den_core::metrics::write_metrics;
use den_core::objective::check_score_function;
use den_core::selector::SelectorConfig;
use den_core::trainer::run_training;
use den_core::{Error, EstimatorConfig, EstimatorParams, ModelStructure, SelectorParams};

pub const CHECKPOINT_FILE: &str = "checkpoint.denc";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "den", version, about = "Deep elastic networks: instance-wise sub-model selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Runs alternating training and writes a checkpoint plus metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the run seed and the synthetic data seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Records elapsed seconds in the metrics; logs are then no longer
        /// reproducible byte for byte.
        #[arg(long)]
        wall_clock: bool,
    },
    /// Accuracy and cost of a checkpoint under argmax deployment.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
    },
    /// Model histograms, mean level probabilities and retrieval examples.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
    },
    /// Compares sampled and exact selector gradients on a toy problem.
    CheckGrad {
        #[arg(long)]
        h: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes a synthetic suite as `train.csv`, `val.csv`, `test.csv`.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    /// The command ran but its check did not pass.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `argv` (program name first) and runs the command.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Train {
            config,
            seed,
            out,
            wall_clock,
        } => train(&config, seed, &out, wall_clock),
        Command::Eval { ckpt, config, split } => eval(&ckpt, &config, &split),
        Command::Analyze {
            ckpt,
            config,
            out,
            top_k,
            split,
        } => analyze(&ckpt, &config, &out, top_k, &split),
        Command::CheckGrad { h, n, samples, seed } => check_grad(h, n, samples, seed),
        Command::GenData { spec, out } => gen_data(&spec, &out),
    }
}

/// Prints to stdout; a closed pipe is not an error.
fn say(text: &str) -> Outcome {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &Value) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn selector_config(cfg: &RunConfig, est: &EstimatorConfig) -> SelectorConfig {
    SelectorConfig {
        input_width: est.input_width(),
        hidden_width: cfg.selector.hidden,
        levels: est.levels(),
        blocks: est.block_count(),
    }
}

fn train(config: &Path, seed: Option<u64>, out: &Path, wall_clock: bool) -> Outcome {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let est_cfg = cfg.estimator_config()?;
    let suite = cfg.load_suite()?;
    fs::create_dir_all(out)?;
    info!("training with seed {} into {}", cfg.seed, out.display());
    let outcome = run_training(&est_cfg, cfg.selector.hidden, &cfg.train_config(), &suite, wall_clock)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.estimator, &outcome.selector)?;
    write_metrics(&out.join(METRICS_FILE), &outcome.metrics)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_json()? + "\n")?;
    let zs = analysis::deploy(&outcome.selector, &suite.test, Deployment::Argmax)?;
    let report = analysis::evaluate(&outcome.estimator, &est_cfg, &suite.test, &zs)?;
    say(&format!(
        "trained {} epochs: test accuracy {:.4}, mean density {:.4}",
        outcome.metrics.len(),
        report.accuracy,
        report.cost.mean_density
    ))?;
    Ok(())
}

struct Loaded {
    est_cfg: EstimatorConfig,
    estimator: EstimatorParams,
    selector: SelectorParams,
    dataset: Dataset,
}

fn load_run(ckpt: &Path, config: &Path, split: &str) -> std::result::Result<Loaded, Failure> {
    let cfg = load_config(config)?;
    let est_cfg = cfg.estimator_config()?;
    let (estimator, selector) = load_checkpoint(ckpt, &est_cfg, selector_config(&cfg, &est_cfg))?;
    let dataset = cfg.load_suite()?.split(split)?.clone();
    Ok(Loaded {
        est_cfg,
        estimator,
        selector,
        dataset,
    })
}

fn eval(ckpt: &Path, config: &Path, split: &str) -> Outcome {
    let run = load_run(ckpt, config, split)?;
    let zs = analysis::deploy(&run.selector, &run.dataset, Deployment::Argmax)?;
    let report = analysis::evaluate(&run.estimator, &run.est_cfg, &run.dataset, &zs)?;
    let mut value = serde_json::to_value(&report).map_err(|e| Error::Format(e.to_string()))?;
    value["split"] = json!(split);
    say(&serde_json::to_string_pretty(&value).map_err(|e| Error::Format(e.to_string()))?)?;
    Ok(())
}

fn ranked_json(h: &ModelHistogram, top_k: usize) -> Value {
    let top: Vec<Value> = h
        .ranked()
        .into_iter()
        .take(top_k)
        .map(|(structure, count)| json!({ "structure": structure, "count": count }))
        .collect();
    json!({ "total": h.total(), "distinct": h.distinct(), "top": top })
}

fn analyze(ckpt: &Path, config: &Path, out: &Path, top_k: usize, split: &str) -> Outcome {
    let run = load_run(ckpt, config, split)?;
    fs::create_dir_all(out)?;
    let data = &run.dataset;
    let zs = analysis::deploy(&run.selector, data, Deployment::Argmax)?;

    let per_task: Vec<Value> = (0..run.est_cfg.task_count())
        .map(|t| {
            let own: Vec<ModelStructure> = data.task_indices(t).iter().map(|&i| zs[i].clone()).collect();
            let mut v = ranked_json(&ModelHistogram::from_structures(&own), top_k);
            v["task"] = json!(t);
            v
        })
        .collect();
    let mut hist = ranked_json(&ModelHistogram::from_structures(&zs), top_k);
    hist["per_task"] = json!(per_task);
    write_json(&out.join("histogram.json"), &hist)?;

    let stats = analysis::mean_level_probability(&run.selector, data)?;
    write_json(
        &out.join("level_probs.json"),
        &json!({ "mean": stats.rows(), "column_sums": stats.column_sums() }),
    )?;

    let k = top_k.min(data.len());
    let mut examples = Vec::new();
    for t in 0..run.est_cfg.task_count() {
        let Some(&q) = data.task_indices(t).first() else { continue };
        let query = data.get(q);
        let neighbors: Vec<Value> = analysis::nearest_by_distribution(&run.selector, &query.x, data, k)?
            .into_iter()
            .map(|nb| {
                let s = data.get(nb.index);
                json!({ "index": nb.index, "task": s.t, "label": s.y, "distance": nb.distance })
            })
            .collect();
        examples.push(json!({ "query": q, "task": query.t, "label": query.y, "neighbors": neighbors }));
    }
    write_json(&out.join("retrieval.json"), &json!(examples))?;

    let den = analysis::evaluate(&run.estimator, &run.est_cfg, data, &zs)?;
    let rz = analysis::matched_random_structures(&zs, run.est_cfg.levels(), zs.len(), 0)?;
    let random = analysis::evaluate(&run.estimator, &run.est_cfg, data, &rz)?;
    write_json(
        &out.join("selector_vs_random.json"),
        &json!({
            "selector": { "accuracy": den.accuracy, "cost": den.cost },
            "random": { "accuracy": random.accuracy, "cost": random.cost },
            "gap": den.accuracy - random.accuracy,
        }),
    )?;
    say(&format!(
        "{} distinct structures; selector accuracy {:.4} vs random {:.4}",
        hist["distinct"], den.accuracy, random.accuracy
    ))?;
    Ok(())
}

fn check_grad(h: usize, n: usize, samples: usize, seed: u64) -> Outcome {
    let check = check_score_function(h, n, samples, seed)?;
    say(&format!("max_z {:.4} cosine {:.6} coordinates {}", check.max_z, check.cosine, check.exact.len()))?;
    if check.max_z < 4.0 {
        Ok(())
    } else {
        Err(Failure::Check(format!("max z-score {:.3} is not below 4", check.max_z)))
    }
}

fn gen_data(spec: &Path, out: &Path) -> Outcome {
    let text = fs::read_to_string(spec)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let spec: SyntheticSpec = serde_path_to_error::deserialize(de).map_err(|e| Error::Validation {
        key: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    let suite = data::gen_synthetic_tasks(&spec)?;
    fs::create_dir_all(out)?;
    for (name, d) in [("train", &suite.train), ("val", &suite.val), ("test", &suite.test)] {
        data::write_csv(BufWriter::new(File::create(out.join(format!("{name}.csv")))?), d)?;
    }
    say(&format!("wrote {} + {} + {} rows to {}", suite.train.len(), suite.val.len(), suite.test.len(), out.display()))?;
    Ok(())
}
