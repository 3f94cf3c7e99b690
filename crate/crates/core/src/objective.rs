//! Squared losses, L2 regularizers, and the context-weighted total objective.
//!
//! Training works per observed entry: each sample is charged the
//! regularizers of the two entities it touches plus the squared norm of its
//! context's network. [`total_objective`] instead evaluates the global form,
//! where every entity of a context is regularized once.

use serde::{Deserialize, Serialize};

use crate::data::TrainingData;
use crate::error::{Error, Result};
use crate::model::{predict, ContextId, HyperParams, ModelParams, Side};
use crate::numerics;

/// `½ (pred − target)²`
pub fn sample_loss(pred: f64, target: f64) -> f64 {
    0.5 * (pred - target) * (pred - target)
}

/// The loss of one observed entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleLoss {
    pub ctx: ContextId,
    /// `½ (pred − target)²`.
    pub squared_error: f64,
    /// Unscaled regularizer sum, see [`reg_terms`].
    pub reg_term: f64,
    /// Mixing weight of the context.
    pub weight: f64,
}

impl SampleLoss {
    /// `weight · (½ e² + λ/2 · reg)`
    pub fn value(&self, lambda: f64) -> f64 {
        self.weight * (self.squared_error + 0.5 * lambda * self.reg_term)
    }
}

/// Squared norm of one entity's adapted interaction vector in `ctx`.
fn adapted_sq_norm(p: &ModelParams, ctx: ContextId, side: Side, index: usize) -> f64 {
    let cp = p.context(ctx).expect("allocated context");
    let raw = p.interaction(ctx.entity(side)).expect("allocated entity").row(index);
    match cp.adaptation.matrix(side) {
        None => numerics::sq_norm(raw),
        Some(d) => (0..d.rows()).map(|r| numerics::dot(d.row(r), raw).powi(2)).sum(),
    }
}

fn entity_reg(p: &ModelParams, ctx: ContextId, side: Side, index: usize) -> f64 {
    let cp = p.context(ctx).expect("allocated context");
    numerics::sq_norm(cp.independence[side.index()].row(index)) + adapted_sq_norm(p, ctx, side, index)
}

fn check_sample(p: &ModelParams, ctx: ContextId, row: usize, col: usize) -> Result<()> {
    if !p.has_context(ctx) {
        return Err(Error::Config(format!("context {} is not allocated", ctx.label())));
    }
    for (side, index) in [(Side::Left, row), (Side::Right, col)] {
        let kind = ctx.entity(side);
        let count = p.entity_count(kind).unwrap_or(0);
        if index >= count {
            return Err(Error::IndexOutOfRange { what: kind.symbol(), index, count });
        }
    }
    Ok(())
}

/// Regularizer charged to one sample of `ctx`, e.g. for the rating context
/// `‖U^X_i‖² + ‖D^X U_i‖² + ‖V^X_j‖² + ‖D^X V_j‖² + ‖θ_fX‖²`.
pub fn reg_terms(p: &ModelParams, ctx: ContextId, row: usize, col: usize) -> Result<f64> {
    check_sample(p, ctx, row, col)?;
    let net = &p.context(ctx).expect("checked").network;
    Ok(entity_reg(p, ctx, Side::Left, row) + entity_reg(p, ctx, Side::Right, col) + net.sq_norm())
}

pub fn per_sample(
    p: &ModelParams,
    h: &HyperParams,
    ctx: ContextId,
    row: usize,
    col: usize,
    target: f64,
) -> Result<SampleLoss> {
    let (pred, _) = predict(p, h, ctx, row, col)?;
    Ok(SampleLoss {
        ctx,
        squared_error: sample_loss(pred, target),
        reg_term: reg_terms(p, ctx, row, col)?,
        weight: h.context_weight(ctx),
    })
}

/// The global regularizer of `ctx`: every entity of both sides once, plus the network.
pub fn context_reg(p: &ModelParams, ctx: ContextId) -> Result<f64> {
    let cp = p.context(ctx).ok_or_else(|| Error::Config(format!("context {} is not allocated", ctx.label())))?;
    let mut reg = cp.network.sq_norm();
    for side in Side::BOTH {
        let n = p.entity_count(ctx.entity(side)).unwrap_or(0);
        reg += (0..n).map(|i| entity_reg(p, ctx, side, i)).sum::<f64>();
    }
    Ok(reg)
}

/// `½ Σ_Ω (pred − target)² + λ/2 · Reg_ctx`, unweighted.
pub fn context_loss(p: &ModelParams, h: &HyperParams, ctx: ContextId, data: &TrainingData) -> Result<f64> {
    let m = data.matrix(ctx).ok_or_else(|| Error::Config(format!("no data for context {}", ctx.label())))?;
    let mut err = 0.0;
    for e in m.entries() {
        err += sample_loss(predict(p, h, ctx, e.row, e.col)?.0, e.value);
    }
    Ok(err + 0.5 * h.lambda * context_reg(p, ctx)?)
}

/// `(1 − α − β) loss_X + α loss_Y + β loss_Z`, over the contexts present in
/// both the data and the parameters.
pub fn total_objective(p: &ModelParams, h: &HyperParams, data: &TrainingData) -> Result<f64> {
    if h.alpha + h.beta > 1.0 + 1e-12 {
        return Err(Error::Config(format!("alpha + beta must not exceed 1, got {}", h.alpha + h.beta)));
    }
    let mut total = 0.0;
    for ctx in ContextId::ALL {
        let w = h.context_weight(ctx);
        if w == 0.0 || data.matrix(ctx).is_none() || !p.has_context(ctx) {
            continue;
        }
        total += w * context_loss(p, h, ctx, data)?;
    }
    Ok(total)
}

/// Sum of the per-sample losses training actually descends.
pub fn per_sample_objective(p: &ModelParams, h: &HyperParams, data: &TrainingData) -> Result<f64> {
    let mut total = 0.0;
    for ctx in ContextId::ALL {
        let (Some(m), true) = (data.matrix(ctx), p.has_context(ctx)) else { continue };
        for e in m.entries() {
            total += per_sample(p, h, ctx, e.row, e.col, e.value)?.value(h.lambda);
        }
    }
    Ok(total)
}

/// Global regularizer restricted to entities observed in `ctx`, recovered
/// from per-sample charges by dividing each entity's term by its number of
/// observations (and the network term by `|Ω|`).
pub fn reg_from_samples(p: &ModelParams, ctx: ContextId, data: &TrainingData) -> Result<f64> {
    let m = data.matrix(ctx).ok_or_else(|| Error::Config(format!("no data for context {}", ctx.label())))?;
    let rows = m.row_counts();
    let cols = m.col_counts();
    let net = p.context(ctx).map_or(0.0, |cp| cp.network.sq_norm());
    let mut reg = 0.0;
    for e in m.entries() {
        reg += entity_reg(p, ctx, Side::Left, e.row) / rows[e.row] as f64
            + entity_reg(p, ctx, Side::Right, e.col) / cols[e.col] as f64
            + net / m.len() as f64;
    }
    Ok(reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Entry, SparseTriplets};
    use crate::model::{init_params, AdaptationMode, EntityCounts, EntityKind, NetworkInit, TensorId};

    fn toy_data() -> TrainingData {
        let e = |row, col, value| Entry { row, col, value };
        TrainingData {
            ratings: SparseTriplets::new(2, 2, vec![e(0, 0, 4.0), e(0, 1, 2.0), e(1, 1, 5.0)]).unwrap(),
            item_aux: Some(SparseTriplets::new(2, 2, vec![e(0, 1, 1.0), e(1, 0, 0.0)]).unwrap()),
            user_aux: None,
        }
    }

    fn toy_hyper() -> HyperParams {
        HyperParams {
            d_c: 2,
            d_s: 1,
            d_c_adapted: 2,
            layers: vec![3],
            alpha: 0.3,
            lambda: 0.1,
            ..HyperParams::default()
        }
    }

    fn toy_params(seed: u64) -> ModelParams {
        let counts = EntityCounts { users: 2, items: 2, item_aux: Some(2), user_aux: None };
        init_params(&toy_hyper(), &counts, seed).unwrap()
    }

    #[test]
    fn sample_loss_examples() {
        assert_eq!(sample_loss(3.0, 3.0), 0.0);
        assert_eq!(sample_loss(4.0, 2.0), 2.0);
    }

    #[test]
    fn sample_loss_sum_matches_manual() {
        let preds = [1.0, 2.5, -0.5, 4.0];
        let targets = [1.5, 2.0, 0.5, 1.0];
        let total: f64 = preds.iter().zip(&targets).map(|(&p, &t)| sample_loss(p, t)).sum();
        // 0.125 + 0.125 + 0.5 + 4.5
        assert!((total - 5.25).abs() < 1e-15);
    }

    #[test]
    fn reg_zero_params() {
        let p = toy_params(0).zeros_like();
        assert_eq!(reg_terms(&p, ContextId::RatingX, 1, 1).unwrap(), 0.0);
    }

    #[test]
    fn reg_hand_arithmetic() {
        let mut p = toy_params(0).zeros_like();
        p.tensor_mut(TensorId::Adaptation(ContextId::RatingX, None)).unwrap().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        p.block_mut(TensorId::Interaction(EntityKind::User), Some(0)).unwrap()[0] = 1.0;
        assert_eq!(reg_terms(&p, ContextId::RatingX, 0, 1).unwrap(), 1.0);
        p.block_mut(TensorId::Independence(ContextId::RatingX, Side::Left), Some(0)).unwrap()[0] = 1.0;
        assert_eq!(reg_terms(&p, ContextId::RatingX, 0, 1).unwrap(), 2.0);
    }

    #[test]
    fn reg_matches_flatten_and_sum() {
        let p = toy_params(4);
        let (i, j) = (1, 0);
        let cp = p.context(ContextId::RatingX).unwrap();
        let d = p.tensor(TensorId::Adaptation(ContextId::RatingX, None)).unwrap();
        let mut want = 0.0;
        for (raw, indep) in [
            (p.block(TensorId::Interaction(EntityKind::User), Some(i)).unwrap(), cp.independence[0].row(i)),
            (p.block(TensorId::Interaction(EntityKind::Item), Some(j)).unwrap(), cp.independence[1].row(j)),
        ] {
            for r in 0..2 {
                let adapted = d[r * 2] * raw[0] + d[r * 2 + 1] * raw[1];
                want += adapted * adapted;
            }
            want += indep.iter().map(|x| x * x).sum::<f64>();
        }
        for id in p.tensor_ids() {
            if matches!(id, TensorId::Weight(ContextId::RatingX, _) | TensorId::Bias(ContextId::RatingX, _)) {
                want += p.tensor(id).unwrap().iter().map(|x| x * x).sum::<f64>();
            }
        }
        assert!((reg_terms(&p, ContextId::RatingX, i, j).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn alpha_extremes() {
        let p = toy_params(1);
        let data = toy_data();
        let h0 = HyperParams { alpha: 0.0, ..toy_hyper() };
        let lx = context_loss(&p, &h0, ContextId::RatingX, &data).unwrap();
        assert!((total_objective(&p, &h0, &data).unwrap() - lx).abs() < 1e-12);
        let h1 = HyperParams { alpha: 1.0, ..toy_hyper() };
        let ly = context_loss(&p, &h1, ContextId::ItemAuxY, &data).unwrap();
        assert!((total_objective(&p, &h1, &data).unwrap() - ly).abs() < 1e-12);
    }

    #[test]
    fn alpha_beta_over_one_rejected() {
        let h = HyperParams { alpha: 0.7, beta: 0.5, ..toy_hyper() };
        assert!(total_objective(&toy_params(0), &h, &toy_data()).is_err());
    }

    /// Straight-line recomputation of the weighted objective on the toy data.
    #[test]
    fn total_matches_independent_recomputation() {
        let p = toy_params(2);
        let h = toy_hyper();
        let data = toy_data();
        let mut want = 0.0;
        for (ctx, w) in [(ContextId::RatingX, 1.0 - h.alpha), (ContextId::ItemAuxY, h.alpha)] {
            let m = data.matrix(ctx).unwrap();
            let cp = p.context(ctx).unwrap();
            let mut loss = 0.0;
            for e in m.entries() {
                let pred = predict(&p, &h, ctx, e.row, e.col).unwrap().0;
                loss += 0.5 * (pred - e.value).powi(2);
            }
            let d = cp.adaptation.matrix(Side::Left).unwrap();
            let mut reg = 0.0;
            for (side, kind) in [(0, ctx.entities().0), (1, ctx.entities().1)] {
                let emb = p.interaction(kind).unwrap();
                for n in 0..emb.rows() {
                    for r in 0..2 {
                        let a = d.get(r, 0) * emb.get(n, 0) + d.get(r, 1) * emb.get(n, 1);
                        reg += a * a;
                    }
                    reg += cp.independence[side].row(n).iter().map(|x| x * x).sum::<f64>();
                }
            }
            for l in &cp.network.layers {
                reg += l.weight.as_slice().iter().chain(l.bias.as_slice()).map(|x| x * x).sum::<f64>();
            }
            want += w * (loss + 0.5 * h.lambda * reg);
        }
        let got = total_objective(&p, &h, &data).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn nonnegative_and_monotone_in_lambda() {
        let p = toy_params(3);
        let data = toy_data();
        let mut prev = -1.0;
        for lambda in [0.0, 1e-3, 0.1, 1.0, 10.0] {
            let h = HyperParams { lambda, ..toy_hyper() };
            let v = total_objective(&p, &h, &data).unwrap();
            assert!(v >= 0.0 && v >= prev);
            prev = v;
        }
    }

    #[test]
    fn bilinear_scaling_on_mf_reduction() {
        let h = HyperParams {
            d_c: 3,
            d_s: 0,
            d_c_adapted: 3,
            layers: vec![],
            use_activation: false,
            adaptation_mode: AdaptationMode::Identity,
            alpha: 0.0,
            network_init: NetworkInit::SummingOnes,
            ..HyperParams::default()
        };
        let counts = EntityCounts { users: 3, items: 3, item_aux: None, user_aux: None };
        let p = init_params(&h, &counts, 5).unwrap();
        let mut doubled = p.clone();
        for e in [EntityKind::User, EntityKind::Item] {
            doubled.tensor_mut(TensorId::Interaction(e)).unwrap().iter_mut().for_each(|x| *x *= 2.0);
        }
        for (i, j) in [(0, 1), (2, 2)] {
            let a = predict(&p, &h, ContextId::RatingX, i, j).unwrap().0;
            let b = predict(&doubled, &h, ContextId::RatingX, i, j).unwrap().0;
            assert!((b - 4.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn multiplicity_identity() {
        let p = toy_params(6);
        let data = toy_data();
        for ctx in [ContextId::RatingX, ContextId::ItemAuxY] {
            let m = data.matrix(ctx).unwrap();
            let rows = m.row_counts();
            let cols = m.col_counts();
            let cp = p.context(ctx).unwrap();
            let mut global = cp.network.sq_norm();
            for (i, &c) in rows.iter().enumerate() {
                if c > 0 {
                    global += entity_reg(&p, ctx, Side::Left, i);
                }
            }
            for (j, &c) in cols.iter().enumerate() {
                if c > 0 {
                    global += entity_reg(&p, ctx, Side::Right, j);
                }
            }
            let got = reg_from_samples(&p, ctx, &data).unwrap();
            assert!((got - global).abs() < 1e-12, "{got} vs {global}");
        }
    }
}
