//! Repeated train/evaluate runs over a family of settings.
//!
//! Repeat `r` of every setting uses split seed `split.seed + r` and model
//! seed `seed + r`, so settings are compared on the same splits.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split, DatasetBundle, SparseTriplets, SplitSpec, TrainingData};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::model::{HyperParams, ModelParams};
use crate::reductions::{HyperOverrides, PresetRegistry};
use crate::training::{fit, RunReport};

/// Width every `d_s` setting keeps the network input at: `d_c + 2 d_s`.
pub const DS_SWEEP_INPUT: usize = 40;

/// Everything a run needs besides its hyperparameters.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub ratings: SparseTriplets,
    pub item_aux: Option<SparseTriplets>,
    pub user_aux: Option<SparseTriplets>,
    pub split: SplitSpec,
    /// Clip test predictions into this range before scoring.
    pub clamp: Option<(f64, f64)>,
}

impl ExperimentData {
    pub fn from_bundle(bundle: &DatasetBundle, split: SplitSpec, clamp: Option<(f64, f64)>) -> Self {
        ExperimentData {
            ratings: bundle.ratings.clone(),
            item_aux: bundle.item_aux.clone(),
            user_aux: bundle.user_aux.clone(),
            split,
            clamp,
        }
    }
}

pub struct RunOutcome {
    pub eval: EvalResult,
    pub report: RunReport,
    pub params: ModelParams,
}

/// Splits with `split_seed`, fits, and scores the test part.
pub fn run_once(data: &ExperimentData, h: &HyperParams, split_seed: u64) -> Result<RunOutcome> {
    let parts = split(&data.ratings, &SplitSpec { seed: split_seed, ..data.split })?;
    if parts.test.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let train = TrainingData { ratings: parts.train, item_aux: data.item_aux.clone(), user_aux: data.user_aux.clone() };
    let (params, report) = fit(h, &train, &parts.val)?;
    let eval = evaluate(&params, h, &parts.test, data.clamp)?;
    Ok(RunOutcome { eval, report, params })
}

/// One run of one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub setting: String,
    pub repeat: usize,
    pub split_seed: u64,
    pub model_seed: u64,
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
    pub epochs: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub mean_rmse: f64,
    pub mean_mae: f64,
    pub n_repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: String,
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunRecord>,
}

impl SweepResult {
    pub fn row(&self, setting: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Config(format!("csv: {e}")))?;
        }
        w.flush().map_err(|e| Error::io("csv output", e))
    }

    pub fn write_runs_jsonl(&self, mut out: impl Write) -> Result<()> {
        for run in &self.runs {
            let line = serde_json::to_string(run).expect("plain data");
            writeln!(out, "{line}").map_err(|e| Error::io("run log", e))?;
        }
        Ok(())
    }

    /// Writes `<stem>.csv` and `<stem>.runs.jsonl` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        self.write_csv(std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?)?;
        let log_path = dir.join(format!("{stem}.runs.jsonl"));
        self.write_runs_jsonl(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?)
    }
}

/// Runs every setting `repeats` times. Runs are independent and execute in
/// parallel; results come back in setting order.
pub fn run_settings(
    data: &ExperimentData,
    axis: &str,
    settings: &[(String, HyperParams)],
    repeats: usize,
) -> Result<SweepResult> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..settings.len()).flat_map(|s| (0..repeats).map(move |r| (s, r))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(s, r)| {
            let (name, base) = &settings[s];
            let h = HyperParams { seed: base.seed + r as u64, ..base.clone() };
            let split_seed = data.split.seed + r as u64;
            let out = run_once(data, &h, split_seed)?;
            log::info!("{axis}={name} repeat {r}: rmse {:.4} mae {:.4}", out.eval.rmse, out.eval.mae);
            Ok(RunRecord {
                setting: name.clone(),
                repeat: r,
                split_seed,
                model_seed: h.seed,
                rmse: out.eval.rmse,
                mae: out.eval.mae,
                n: out.eval.n,
                epochs: out.report.epochs.len(),
                best_epoch: out.report.best_epoch,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = settings
        .iter()
        .map(|(name, _)| {
            let mine: Vec<EvalResult> = runs
                .iter()
                .filter(|r| &r.setting == name)
                .map(|r| EvalResult { rmse: r.rmse, mae: r.mae, n: r.n })
                .collect();
            let mean = EvalResult::mean(&mine)?;
            Ok(SweepRow { setting: name.clone(), mean_rmse: mean.rmse, mean_mae: mean.mae, n_repeats: mine.len() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { axis: axis.to_string(), rows, runs })
}

/// Varies `d_s` with `d_c = 40 − 2 d_s`; values leaving `d_c < 1` are skipped.
pub fn sweep_ds(
    data: &ExperimentData,
    registry: &PresetRegistry,
    preset: &str,
    overrides: &HyperOverrides,
    ds_values: &[usize],
    repeats: usize,
) -> Result<SweepResult> {
    let mut settings = Vec::new();
    for &d_s in ds_values {
        if 2 * d_s >= DS_SWEEP_INPUT {
            log::warn!("skipping d_s = {d_s}: it leaves no room for interaction dimensions");
            continue;
        }
        let d_c = DS_SWEEP_INPUT - 2 * d_s;
        let o = overrides.merged(&HyperOverrides {
            d_s: Some(d_s),
            d_c: Some(d_c),
            d_c_adapted: Some(d_c),
            ..Default::default()
        });
        settings.push((d_s.to_string(), registry.expand(preset, &o)?));
    }
    run_settings(data, "d_s", &settings, repeats)
}

/// Runs each named preset with the same overrides.
pub fn compare_presets(
    data: &ExperimentData,
    registry: &PresetRegistry,
    presets: &[&str],
    overrides: &HyperOverrides,
    repeats: usize,
) -> Result<SweepResult> {
    let settings = presets
        .iter()
        .map(|&name| Ok((name.to_string(), registry.expand(name, overrides)?)))
        .collect::<Result<Vec<_>>>()?;
    run_settings(data, "preset", &settings, repeats)
}

pub fn ablation_ca(
    data: &ExperimentData,
    registry: &PresetRegistry,
    overrides: &HyperOverrides,
    repeats: usize,
) -> Result<SweepResult> {
    compare_presets(data, registry, &["dacona", "dacona_without_ca"], overrides, repeats)
}

pub fn ablation_depth(
    data: &ExperimentData,
    registry: &PresetRegistry,
    overrides: &HyperOverrides,
    repeats: usize,
) -> Result<SweepResult> {
    let names: Vec<String> = (1..=crate::reductions::DEPTH_LAYERS.len()).map(|k| format!("dacona_depth_{k}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut result = compare_presets(data, registry, &names, overrides, repeats)?;
    result.axis = "depth".into();
    Ok(result)
}

pub fn ablation_af(
    data: &ExperimentData,
    registry: &PresetRegistry,
    overrides: &HyperOverrides,
    repeats: usize,
) -> Result<SweepResult> {
    compare_presets(data, registry, &["dacona", "dacona_without_af"], overrides, repeats)
}
