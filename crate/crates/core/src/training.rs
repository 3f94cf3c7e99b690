//! Adam optimizer, alternating-context epochs, and validation-based stopping.
//!
//! One epoch is a shuffled pass over the rating entries, then one over the
//! item-auxiliary entries, then one over the user-auxiliary entries. Each
//! sample's gradients are computed at a single parameter snapshot and then
//! applied block by block in [`TensorId`](crate::model::TensorId) order.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SparseTriplets, TrainingData};
use crate::error::{Error, Result};
use crate::gradients::{backward_sample, GradSet};
use crate::metrics::evaluate;
use crate::model::{init_params, ContextId, EntityCounts, HyperParams, ModelParams, ParamGroup};

/// Validation RMSE above this multiple of the initial one aborts the run.
const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConsts {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConsts {
    fn default() -> Self {
        AdamConsts { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of a block at global step `t` (1-based).
pub fn adam_update(param: &mut [f64], m: &mut [f64], v: &mut [f64], grad: &[f64], lr: f64, t: u64, c: &AdamConsts) {
    debug_assert!(param.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len());
    let bc1 = 1.0 - c.beta1.powf(t as f64);
    let bc2 = 1.0 - c.beta2.powf(t as f64);
    for i in 0..grad.len() {
        let g = grad[i];
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
        param[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
    }
}

/// Moment accumulators mirroring [`ModelParams`], with one step counter
/// shared by all blocks. Untouched blocks keep their moments between steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
    pub consts: AdamConsts,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), t: 0, consts: AdamConsts::default() }
    }

    /// Applies `grads` block by block, skipping frozen groups.
    pub fn step(&mut self, params: &mut ModelParams, grads: &GradSet, lr: f64, frozen: &BTreeSet<ParamGroup>) {
        self.t += 1;
        for (&(id, row), g) in grads.iter() {
            if g.is_empty() || frozen.contains(&id.group()) {
                continue;
            }
            let p = params.block_mut(id, row).expect("gradient block matches a parameter");
            let m = self.m.block_mut(id, row).expect("moments mirror parameters");
            let v = self.v.block_mut(id, row).expect("moments mirror parameters");
            adam_update(p, m, v, g, lr, self.t, &self.consts);
        }
    }
}

pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub epoch: usize,
    pub best_val_rmse: Option<f64>,
    pub epochs_since_improvement: usize,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep the shuffle stream apart from the initialization stream.
        rng.set_stream(1);
        TrainState {
            adam: AdamState::new(&params),
            params,
            epoch: 0,
            best_val_rmse: None,
            epochs_since_improvement: 0,
            rng,
        }
    }
}

/// Mean weighted per-sample loss of each context's pass; `None` when the
/// pass was skipped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub z: Option<f64>,
}

impl EpochLosses {
    fn set(&mut self, ctx: ContextId, value: f64) {
        match ctx {
            ContextId::RatingX => self.x = Some(value),
            ContextId::ItemAuxY => self.y = Some(value),
            ContextId::UserAuxZ => self.z = Some(value),
        }
    }
}

fn context_pass(state: &mut TrainState, h: &HyperParams, ctx: ContextId, m: &SparseTriplets) -> Result<f64> {
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.shuffle(&mut state.rng);
    let entries = m.entries();
    let mut total = 0.0;
    for batch in order.chunks(h.batch_size) {
        let mut grads = GradSet::new();
        for &k in batch {
            let e = entries[k];
            let (loss, g) = backward_sample(&state.params, h, ctx, e.row, e.col, e.value)?;
            let value = loss.value(h.lambda);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss of {} sample ({}, {})", ctx.label(), e.row, e.col)));
            }
            total += value;
            if batch.len() == 1 {
                grads = g;
            } else {
                grads.merge(&g);
            }
        }
        if batch.len() > 1 {
            grads.scale(1.0 / batch.len() as f64);
        }
        state.adam.step(&mut state.params, &grads, h.learning_rate, &h.frozen);
    }
    Ok(total / m.len().max(1) as f64)
}

/// One epoch: a shuffled pass over each context with nonzero weight, in
/// the order X, Y, Z.
pub fn train_epoch(state: &mut TrainState, h: &HyperParams, data: &TrainingData) -> Result<EpochLosses> {
    let mut losses = EpochLosses::default();
    for ctx in ContextId::ALL {
        let Some(m) = data.matrix(ctx) else { continue };
        if h.context_weight(ctx) == 0.0 || !state.params.has_context(ctx) || m.is_empty() {
            continue;
        }
        losses.set(ctx, context_pass(state, h, ctx, m)?);
    }
    state.epoch += 1;
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss_x: Option<f64>,
    pub train_loss_y: Option<f64>,
    pub train_loss_z: Option<f64>,
    pub val_rmse: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub initial_val_rmse: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; 0 means the initial ones.
    pub best_epoch: usize,
    pub best_val_rmse: Option<f64>,
    pub stop: StopReason,
}

impl RunReport {
    /// One JSON object per epoch.
    pub fn write_jsonl(&self, out: &mut impl Write) -> std::io::Result<()> {
        for record in &self.epochs {
            serde_json::to_writer(&mut *out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_jsonl(&mut file).and_then(|_| file.flush()).map_err(|e| Error::io(path, e))
    }
}

/// Entity counts for the contexts a run actually trains: auxiliary
/// contexts with zero weight are left unallocated.
pub fn trained_counts(h: &HyperParams, data: &TrainingData) -> EntityCounts {
    let mut counts = EntityCounts::of_data(data);
    if h.context_weight(ContextId::ItemAuxY) == 0.0 {
        counts.item_aux = None;
    }
    if h.context_weight(ContextId::UserAuxZ) == 0.0 {
        counts.user_aux = None;
    }
    counts
}

/// Initializes from `h.seed` and trains; see [`fit_from`].
pub fn fit(h: &HyperParams, data: &TrainingData, val: &SparseTriplets) -> Result<(ModelParams, RunReport)> {
    let params = init_params(h, &trained_counts(h, data), h.seed)?;
    fit_from(params, h, data, val)
}

/// Trains until validation RMSE has failed to improve by `min_delta` for
/// more than `patience` consecutive epochs, or `max_epochs` is reached,
/// and returns the parameters of the best validation epoch. With an empty
/// validation set the run always lasts `max_epochs` and returns the final
/// parameters.
pub fn fit_from(
    params: ModelParams,
    h: &HyperParams,
    data: &TrainingData,
    val: &SparseTriplets,
) -> Result<(ModelParams, RunReport)> {
    h.validate()?;
    let validate = |p: &ModelParams| -> Result<Option<f64>> {
        if val.is_empty() {
            Ok(None)
        } else {
            evaluate(p, h, val, None).map(|r| Some(r.rmse))
        }
    };
    let initial = validate(&params)?;
    let mut state = TrainState::new(params, h.seed);
    let mut best_params = state.params.clone();
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    while state.epoch < h.max_epochs {
        let losses = train_epoch(&mut state, h, data)?;
        let val_rmse = validate(&state.params)?;
        epochs.push(EpochRecord {
            epoch: state.epoch,
            train_loss_x: losses.x,
            train_loss_y: losses.y,
            train_loss_z: losses.z,
            val_rmse,
        });
        log::debug!("epoch {} losses {:?} val_rmse {:?}", state.epoch, losses, val_rmse);

        let Some(rmse) = val_rmse else { continue };
        if !rmse.is_finite() || initial.is_some_and(|i| rmse > DIVERGENCE_FACTOR * i) {
            return Err(Error::Diverged(format!(
                "validation RMSE {rmse} at epoch {} (initial {:?})",
                state.epoch, initial
            )));
        }
        if state.best_val_rmse.is_none_or(|best| best - rmse >= h.min_delta) {
            state.best_val_rmse = Some(rmse);
            state.epochs_since_improvement = 0;
            best_params.clone_from(&state.params);
            best_epoch = state.epoch;
        } else {
            state.epochs_since_improvement += 1;
            if state.epochs_since_improvement > h.patience {
                stop = StopReason::Patience;
                break;
            }
        }
    }

    if val.is_empty() {
        best_params = state.params;
        best_epoch = epochs.len();
    }
    let report = RunReport { initial_val_rmse: initial, epochs, best_epoch, best_val_rmse: state.best_val_rmse, stop };
    Ok((best_params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Entry;
    use crate::model::tests::mf_hyper;
    use crate::model::TensorId;
    use crate::objective::total_objective;
    use crate::synthetic::{observe, rank_one};

    fn scalar_state() -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (vec![0.0], vec![0.0], vec![0.0])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut p, mut m, mut v) = (vec![1.5, -2.0], vec![0.0; 2], vec![0.0; 2]);
        for t in 1..=10 {
            adam_update(&mut p, &mut m, &mut v, &[0.0, 0.0], 0.1, t, &AdamConsts::default());
        }
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn constant_gradient_steps_are_bounded_by_lr() {
        let (mut p, mut m, mut v) = scalar_state();
        let lr = 0.01;
        for t in 1..=500 {
            let before = p[0];
            adam_update(&mut p, &mut m, &mut v, &[37.0], lr, t, &AdamConsts::default());
            let step = (p[0] - before).abs();
            assert!(step <= lr * (1.0 + 1e-6), "step {step} at t={t}");
            assert!(step > 0.5 * lr);
        }
    }

    #[test]
    fn quadratic_converges_to_minimizer() {
        // f(x) = (x - 3)^2, minimized at 3.
        let (mut p, mut m, mut v) = scalar_state();
        for t in 1..=2000 {
            let g = 2.0 * (p[0] - 3.0);
            adam_update(&mut p, &mut m, &mut v, &[g], 1e-2, t, &AdamConsts::default());
        }
        assert!((p[0] - 3.0).abs() < 1e-3, "x = {}", p[0]);
    }

    fn toy_data() -> TrainingData {
        let e = |row, col, value| Entry { row, col, value };
        let ratings = SparseTriplets::new(
            3,
            3,
            vec![e(0, 0, 5.0), e(0, 1, 3.0), e(1, 1, 4.0), e(1, 2, 1.0), e(2, 0, 2.0), e(2, 2, 4.0)],
        )
        .unwrap();
        let item_aux = SparseTriplets::new(3, 2, vec![e(0, 0, 1.0), e(1, 1, 1.0), e(2, 0, 1.0)]).unwrap();
        TrainingData { ratings, item_aux: Some(item_aux), user_aux: None }
    }

    fn toy_hyper() -> HyperParams {
        HyperParams {
            d_c: 3,
            d_s: 1,
            d_c_adapted: 3,
            layers: vec![4, 2],
            learning_rate: 1e-2,
            ..HyperParams::default()
        }
    }

    #[test]
    fn zero_alpha_leaves_item_aux_context_untouched() {
        let h = HyperParams { alpha: 0.0, ..toy_hyper() };
        let data = toy_data();
        let params = init_params(&h, &EntityCounts::of_data(&data), 1).unwrap();
        let mut state = TrainState::new(params.clone(), 1);
        let losses = train_epoch(&mut state, &h, &data).unwrap();
        assert!(losses.x.is_some() && losses.y.is_none());
        for id in params.tensor_ids() {
            let y_only =
                id.group().to_string().ends_with('Y') || id == TensorId::Interaction(crate::model::EntityKind::ItemAux);
            if y_only {
                assert_eq!(params.tensor(id), state.params.tensor(id), "{id}");
            }
        }
        assert_ne!(params, state.params);
    }

    #[test]
    fn training_descends_on_toy() {
        let h = toy_hyper();
        let data = toy_data();
        let params = init_params(&h, &EntityCounts::of_data(&data), 3).unwrap();
        let mut state = TrainState::new(params, 3);
        train_epoch(&mut state, &h, &data).unwrap();
        let after_one = total_objective(&state.params, &h, &data).unwrap();
        for _ in 1..50 {
            train_epoch(&mut state, &h, &data).unwrap();
        }
        let after_fifty = total_objective(&state.params, &h, &data).unwrap();
        assert!(after_fifty < after_one, "{after_fifty} vs {after_one}");
    }

    #[test]
    fn frozen_groups_stay_bitwise_identical() {
        let mut h = toy_hyper();
        h.frozen.insert(ParamGroup::Network(ContextId::RatingX));
        h.frozen.insert(ParamGroup::Adaptation(ContextId::ItemAuxY));
        let data = toy_data();
        let params = init_params(&h, &EntityCounts::of_data(&data), 2).unwrap();
        let mut state = TrainState::new(params.clone(), 2);
        for _ in 0..5 {
            train_epoch(&mut state, &h, &data).unwrap();
        }
        for id in params.tensor_ids() {
            if h.frozen.contains(&id.group()) {
                assert_eq!(params.tensor(id), state.params.tensor(id), "{id}");
                assert!(state.adam.m.tensor(id).unwrap().iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn rank_one_recovery() {
        let full = rank_one(30, 30, 4);
        let (seen, hidden) = observe(&full, 0.6, 5).unwrap();
        let h = HyperParams { lambda: 0.0, learning_rate: 1e-2, max_epochs: 300, ..mf_hyper(2, 0) };
        let data = TrainingData { ratings: seen, item_aux: None, user_aux: None };
        let (p, _) = fit(&h, &data, &SparseTriplets::empty(30, 30)).unwrap();
        let r = evaluate(&p, &h, &hidden, None).unwrap();
        assert!(r.rmse < 0.05, "{r:?}");
    }

    #[test]
    fn two_by_two_reaches_zero_objective() {
        let e = |row, col, value| Entry { row, col, value };
        let ratings = SparseTriplets::new(2, 2, vec![e(0, 0, 1.0), e(0, 1, 2.0), e(1, 0, 3.0), e(1, 1, 4.0)]).unwrap();
        let data = TrainingData { ratings, item_aux: None, user_aux: None };
        // 250 epochs of 4 samples: 1,000 steps.
        let h = HyperParams { lambda: 0.0, learning_rate: 0.05, max_epochs: 250, ..mf_hyper(2, 0) };
        let (p, report) = fit(&h, &data, &SparseTriplets::empty(2, 2)).unwrap();
        assert_eq!(report.epochs.len(), 250);
        let objective = total_objective(&p, &h, &data).unwrap();
        assert!(objective < 1e-4, "objective {objective}");
    }

    #[test]
    fn patience_zero_stops_at_first_non_improvement() {
        // A huge min_delta makes every epoch after the first a non-improvement.
        let data = toy_data();
        let val = SparseTriplets::new(3, 3, vec![Entry { row: 0, col: 2, value: 3.0 }]).unwrap();
        for patience in [0, 3] {
            let h = HyperParams { patience, min_delta: 1e9, max_epochs: 50, ..toy_hyper() };
            let (p, report) = fit(&h, &data, &val).unwrap();
            assert_eq!(report.epochs.len(), patience + 2);
            assert_eq!(report.stop, StopReason::Patience);
            assert_eq!(report.best_epoch, 1);
            let best = evaluate(&p, &h, &val, None).unwrap().rmse;
            assert_eq!(Some(best), report.epochs[0].val_rmse);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let data = toy_data();
        let val = SparseTriplets::new(3, 3, vec![Entry { row: 0, col: 2, value: 3.0 }]).unwrap();
        let h = HyperParams { max_epochs: 20, batch_size: 2, ..toy_hyper() };
        let (pa, ra) = fit(&h, &data, &val).unwrap();
        let (pb, rb) = fit(&h, &data, &val).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ra, rb);
        let (mut la, mut lb) = (Vec::new(), Vec::new());
        ra.write_jsonl(&mut la).unwrap();
        rb.write_jsonl(&mut lb).unwrap();
        assert_eq!(la, lb);
        let other = HyperParams { seed: 1, ..h };
        assert_ne!(fit(&other, &data, &val).unwrap().1, ra);
    }

    #[test]
    fn zero_weight_contexts_are_not_allocated() {
        let h = HyperParams { alpha: 0.0, max_epochs: 2, ..toy_hyper() };
        let (p, report) = fit(&h, &toy_data(), &SparseTriplets::empty(3, 3)).unwrap();
        assert!(!p.has_context(ContextId::ItemAuxY));
        assert!(report.epochs.iter().all(|r| r.train_loss_y.is_none()));
    }

    #[test]
    fn batched_gradients_are_averaged() {
        // With one batch covering the matrix, the epoch is a single Adam
        // step on the mean gradient, which moves each coordinate by
        // lr · g / (|g| + eps).
        let h = HyperParams { batch_size: 100, max_epochs: 1, ..toy_hyper() };
        let data = toy_data();
        let params = init_params(&h, &EntityCounts::of_data(&data), 5).unwrap();
        let mut state = TrainState::new(params.clone(), 5);
        let mut mean = GradSet::new();
        for e in data.ratings.entries() {
            mean.merge(&crate::gradients::backward(&params, &h, ContextId::RatingX, e.row, e.col, e.value).unwrap());
        }
        mean.scale(1.0 / data.ratings.len() as f64);
        let x_only = TrainingData { item_aux: None, ..data };
        train_epoch(&mut state, &h, &x_only).unwrap();
        for (&(id, row), g) in mean.iter() {
            let before = params.block(id, row).unwrap();
            let after = state.params.block(id, row).unwrap();
            for k in 0..g.len() {
                let expect = h.learning_rate * g[k] / (g[k].abs() + 1e-8);
                assert!((before[k] - after[k] - expect).abs() < 1e-12, "{id}");
            }
        }
    }

    #[test]
    fn nan_targets_abort_with_sample() {
        let h = toy_hyper();
        let data = toy_data();
        let params = init_params(&h, &EntityCounts::of_data(&data), 1).unwrap();
        let mut state = TrainState::new(params, 1);
        let mut bad = state.params.clone();
        bad.tensor_mut(TensorId::Bias(ContextId::RatingX, 2)).unwrap()[0] = f64::NAN;
        state.params = bad;
        let err = train_epoch(&mut state, &h, &data).unwrap_err();
        assert!(err.to_string().contains("X"), "{err}");
    }
}
