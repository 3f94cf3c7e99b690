//! Command-line front end.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{load_triplets, split, DatasetBundle, DatasetDescriptor, TrainingData, TripletFormat};
use crate::error::{Error, Result};
use crate::experiments::{
    ablation_af, ablation_ca, ablation_depth, compare_presets, run_once, sweep_ds, ExperimentData, SweepResult,
};
use crate::gradients::{gradcheck, GradcheckReport, Probe};
use crate::metrics::evaluate;
use crate::model::{init_params, ContextId, EntityCounts, HyperParams};
use crate::reductions::PresetRegistry;
use crate::training::trained_counts;

/// Relative error at or above which `gradcheck` fails.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

const DEFAULT_COMPARISON: [&str; 5] = ["mf", "biased_mf", "cmf", "biased_cmf", "dacona"];

#[derive(Debug, Parser)]
#[command(name = "dacona", version, about = "Rating prediction with shared, context-adapted embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand that reads a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Model seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset descriptor (TOML).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Directory dataset paths resolve against [default: $DACONA_DATA_ROOT or ./data].
    #[arg(long)]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    /// Vary the independence dimension.
    Ds,
    /// Compare presets.
    Presets,
    /// With and without context adaptation.
    Ca,
    /// Network depth.
    Depth,
    /// With and without hidden activations.
    Af,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model and score the test split.
    Train(CommonArgs),
    /// Score a saved model on the test split.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run a repeated study and write CSV results.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value = "ds")]
        study: Study,
    },
    /// Compare backpropagated gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Coordinates checked per tensor and probe.
        #[arg(long, default_value_t = 100)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        /// Observed entries differentiated per context.
        #[arg(long, default_value_t = 3)]
        probes: usize,
    },
    /// Convert a raw dataset file to `row<TAB>col<TAB>value` plus id maps.
    ConvertDataset {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        format: TripletFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the built-in presets.
    Presets,
}

/// Loads `--config` (if any) and applies the flags on top.
pub fn resolve_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &args.preset {
        c.model.preset = Some(p.clone());
    }
    if let Some(s) = args.seed {
        c.training.seed = Some(s);
    }
    if let Some(d) = &args.dataset {
        c.data.dataset = Some(d.clone());
    }
    if let Some(o) = &args.out {
        c.output.dir = Some(o.clone());
    }
    if let Some(b) = args.batch_size {
        c.training.batch_size = Some(b);
    }
    if let Some(r) = args.repeats {
        c.experiments.repeats = Some(r);
    }
    if let Some(root) = &args.data_root {
        c.data.root = Some(root.clone());
    }
    Ok(c)
}

fn load_dataset(c: &RunConfig) -> Result<(String, DatasetBundle)> {
    let path = c.data.dataset.as_ref().ok_or_else(|| Error::Config("no dataset given (use --dataset)".into()))?;
    let descriptor = DatasetDescriptor::from_file(path)?;
    let bundle = descriptor.load(&c.data_root())?;
    log::info!(
        "{}: {} ratings, {} users, {} items",
        descriptor.name,
        bundle.ratings.len(),
        bundle.ratings.n_rows(),
        bundle.ratings.n_cols()
    );
    Ok((descriptor.name, bundle))
}

fn hyper(c: &RunConfig) -> Result<HyperParams> {
    PresetRegistry::builtin().expand(c.preset(), &c.overrides())
}

fn out_dir(c: &RunConfig, default: &str) -> Result<PathBuf> {
    let dir = c.output.dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(default));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Final record of a `train` run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub preset: String,
    pub dataset: String,
    pub seed: u64,
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub wall_time_s: f64,
}

/// Fits, evaluates, and writes `epochs.jsonl`, `checkpoint.json`,
/// `config.toml` and `summary.json` into the output directory.
pub fn cmd_train(c: &RunConfig) -> Result<Summary> {
    let start = Instant::now();
    let (name, bundle) = load_dataset(c)?;
    let h = hyper(c)?;
    let data = ExperimentData::from_bundle(&bundle, c.split_spec(), c.clamp());
    let dir = out_dir(c, &format!("{name}_{}", c.preset()))?;
    let outcome = run_once(&data, &h, c.split_spec().seed)?;
    outcome.report.save_jsonl(&dir.join("epochs.jsonl"))?;
    Checkpoint { preset: c.preset().to_string(), hyper: h.clone(), params: outcome.params }
        .save(&dir.join("checkpoint.json"))?;
    write_file(&dir.join("config.toml"), &c.to_toml())?;
    let summary = Summary {
        preset: c.preset().to_string(),
        dataset: name,
        seed: h.seed,
        rmse: outcome.eval.rmse,
        mae: outcome.eval.mae,
        n: outcome.eval.n,
        epochs: outcome.report.epochs.len(),
        best_epoch: outcome.report.best_epoch,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    write_file(&dir.join("summary.json"), &format!("{}\n", serde_json::to_string(&summary).expect("plain data")))?;
    Ok(summary)
}

pub fn cmd_evaluate(c: &RunConfig, checkpoint: &Path) -> Result<crate::metrics::EvalResult> {
    let ck = Checkpoint::load(checkpoint)?;
    let (_, bundle) = load_dataset(c)?;
    let parts = split(&bundle.ratings, &c.split_spec())?;
    evaluate(&ck.params, &ck.hyper, &parts.test, c.clamp())
}

pub fn cmd_sweep(c: &RunConfig, study: Study) -> Result<SweepResult> {
    let (name, bundle) = load_dataset(c)?;
    let data = ExperimentData::from_bundle(&bundle, c.split_spec(), c.clamp());
    let registry = PresetRegistry::builtin();
    let o = c.overrides();
    let repeats = c.repeats();
    let (stem, result) = match study {
        Study::Ds => ("ds", sweep_ds(&data, &registry, c.preset(), &o, &c.ds_values(), repeats)?),
        Study::Presets => {
            let names: Vec<&str> = match &c.experiments.presets {
                Some(p) => p.iter().map(String::as_str).collect(),
                None => DEFAULT_COMPARISON.to_vec(),
            };
            ("presets", compare_presets(&data, &registry, &names, &o, repeats)?)
        }
        Study::Ca => ("ca", ablation_ca(&data, &registry, &o, repeats)?),
        Study::Depth => ("depth", ablation_depth(&data, &registry, &o, repeats)?),
        Study::Af => ("af", ablation_af(&data, &registry, &o, repeats)?),
    };
    let dir = out_dir(c, &format!("{name}_sweeps"))?;
    result.save(&dir, stem)?;
    write_file(&dir.join(format!("{stem}.config.toml")), &c.to_toml())?;
    Ok(result)
}

/// Checks gradients at a fresh initialization, on the dataset's shapes when
/// one is given and on a small three-context model otherwise.
pub fn cmd_gradcheck(c: &RunConfig, coords: usize, epsilon: f64, probes_per_context: usize) -> Result<GradcheckReport> {
    let h = hyper(c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(h.seed);
    let (params, probes) = if c.data.dataset.is_some() {
        let (_, bundle) = load_dataset(c)?;
        let data = TrainingData::from_bundle(&bundle, bundle.ratings.clone());
        let params = init_params(&h, &trained_counts(&h, &data), h.seed)?;
        let mut probes = Vec::new();
        for ctx in ContextId::ALL.into_iter().filter(|&ctx| params.has_context(ctx)) {
            let m = data.matrix(ctx).expect("allocated contexts have data");
            for _ in 0..probes_per_context.min(m.len()) {
                let e = m.entries()[rng.random_range(0..m.len())];
                probes.push(Probe { ctx, row: e.row, col: e.col, target: e.value });
            }
        }
        (params, probes)
    } else {
        let counts = EntityCounts { users: 6, items: 5, item_aux: Some(4), user_aux: Some(3) };
        let counts = EntityCounts {
            item_aux: counts.item_aux.filter(|_| h.alpha > 0.0),
            user_aux: counts.user_aux.filter(|_| h.beta > 0.0),
            ..counts
        };
        let params = init_params(&h, &counts, h.seed)?;
        let mut probes = Vec::new();
        for ctx in ContextId::ALL.into_iter().filter(|&ctx| params.has_context(ctx)) {
            let (l, r) = ctx.entities();
            for _ in 0..probes_per_context {
                probes.push(Probe {
                    ctx,
                    row: rng.random_range(0..counts.get(l).expect("allocated")),
                    col: rng.random_range(0..counts.get(r).expect("allocated")),
                    target: rng.random_range(1.0..5.0),
                });
            }
        }
        (params, probes)
    };
    gradcheck(&params, &h, &probes, coords, epsilon, h.seed)
}

/// Returns the number of entries written.
pub fn cmd_convert(input: &Path, format: TripletFormat, out: &Path) -> Result<usize> {
    let loaded = load_triplets(input, format)?;
    loaded.triplets.write_tsv(out)?;
    let sidecar = |suffix: &str| {
        let mut name = out.file_stem().unwrap_or_default().to_os_string();
        name.push(suffix);
        out.with_file_name(name)
    };
    loaded.row_ids.write(&sidecar(".row_ids.tsv"))?;
    loaded.col_ids.write(&sidecar(".col_ids.tsv"))?;
    Ok(loaded.triplets.len())
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(args) => {
            let summary = cmd_train(&resolve_config(&args)?)?;
            println!("{}", serde_json::to_string(&summary).expect("plain data"));
        }
        Command::Evaluate { common, checkpoint } => {
            let r = cmd_evaluate(&resolve_config(&common)?, &checkpoint)?;
            println!("{}", serde_json::to_string(&r).expect("plain data"));
        }
        Command::Sweep { common, study } => {
            let result = cmd_sweep(&resolve_config(&common)?, study)?;
            result.write_csv(std::io::stdout().lock())?;
        }
        Command::Gradcheck { common, coords, epsilon, probes } => {
            let report = cmd_gradcheck(&resolve_config(&common)?, coords, epsilon, probes)?;
            println!("{:<14} {:>7} {:>14}", "tensor", "coords", "max_rel_error");
            for t in &report.tensors {
                println!("{:<14} {:>7} {:>14.3e}", t.tensor, t.coordinates, t.max_rel_error);
            }
            let ok = report.passes(GRADCHECK_TOLERANCE);
            println!(
                "{} (max {:.3e}, tolerance {GRADCHECK_TOLERANCE:e})",
                if ok { "PASS" } else { "FAIL" },
                report.max_rel_error()
            );
            if !ok {
                return Ok(1);
            }
        }
        Command::ConvertDataset { input, format, out } => {
            let n = cmd_convert(&input, format, &out)?;
            println!("{n} entries written to {}", out.display());
        }
        Command::Presets => {
            for p in PresetRegistry::builtin().iter() {
                println!("{:<20} {}", p.name(), p.description());
            }
        }
    }
    Ok(0)
}
