//! Hand-written reverse-mode gradients of the per-sample loss, and a
//! central finite-difference oracle to check them against.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{predict, Adaptation, ContextId, HyperParams, ModelParams, Side, TensorId};
use crate::numerics;
use crate::objective::{per_sample, reg_terms, sample_loss, SampleLoss};

/// Address of a gradient block: a whole tensor, or one entity row of an
/// embedding tensor.
pub type BlockKey = (TensorId, Option<usize>);

/// Sparse gradients of one sample (or the sum over a batch).
///
/// Blocks iterate in [`TensorId`] order, which is the order the optimizer
/// applies them in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradSet {
    blocks: BTreeMap<BlockKey, Vec<f64>>,
}

impl GradSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn get(&self, id: TensorId, row: Option<usize>) -> Option<&[f64]> {
        self.blocks.get(&(id, row)).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BlockKey, &[f64])> {
        self.blocks.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &BlockKey> {
        self.blocks.keys()
    }

    /// Adds `values` into the block, creating it if absent.
    pub fn accumulate(&mut self, id: TensorId, row: Option<usize>, values: &[f64]) {
        match self.blocks.get_mut(&(id, row)) {
            Some(dst) => numerics::axpy(1.0, values, dst),
            None => {
                self.blocks.insert((id, row), values.to_vec());
            }
        }
    }

    pub fn merge(&mut self, other: &GradSet) {
        for (&(id, row), values) in &other.blocks {
            self.accumulate(id, row, values);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for values in self.blocks.values_mut() {
            values.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn insert(&mut self, id: TensorId, row: Option<usize>, values: Vec<f64>) {
        self.blocks.insert((id, row), values);
    }
}

/// Loss and gradients of one observed entry.
pub fn backward_sample(
    p: &ModelParams,
    h: &HyperParams,
    ctx: ContextId,
    row: usize,
    col: usize,
    target: f64,
) -> Result<(SampleLoss, GradSet)> {
    let (pred, tape) = predict(p, h, ctx, row, col)?;
    let loss = SampleLoss {
        ctx,
        squared_error: sample_loss(pred, target),
        reg_term: reg_terms(p, ctx, row, col)?,
        weight: h.context_weight(ctx),
    };
    let cp = p.context(ctx).expect("predict checked the context");
    let w = h.context_weight(ctx);
    let wl = w * h.lambda;
    let mut grads = GradSet::new();

    // Network, from the head down. `g` is the gradient w.r.t. the current
    // layer's output.
    let layers = &cp.network.layers;
    let mut g = vec![w * (pred - target)];
    for k in (0..layers.len()).rev() {
        let layer = &layers[k];
        if k + 1 < layers.len() && h.use_activation {
            let a = &tape.activations[k + 1];
            g.iter_mut().zip(a).for_each(|(gi, ai)| *gi *= 1.0 - ai * ai);
        }
        let input = &tape.activations[k];
        let mut dw: Vec<f64> = layer.weight.as_slice().iter().map(|x| wl * x).collect();
        numerics::outer_acc(&g, input, &mut dw);
        let mut db: Vec<f64> = layer.bias.as_slice().iter().map(|x| wl * x).collect();
        numerics::axpy(1.0, &g, &mut db);
        let mut g_in = vec![0.0; input.len()];
        numerics::matvec_t_acc(&layer.weight, &g, &mut g_in);
        grads.insert(TensorId::Weight(ctx, k), None, dw);
        grads.insert(TensorId::Bias(ctx, k), None, db);
        g = g_in;
    }

    // `g` now covers the concatenated input: [hadamard ; left indep ; right indep].
    let adapted_dim = tape.adapted[0].len();
    let d_s = cp.independence[0].cols();
    let indices = [row, col];
    for side in Side::BOTH {
        let s = side.index();
        let offset = adapted_dim + s * d_s;
        let mut dx = g[offset..offset + d_s].to_vec();
        numerics::axpy(wl, cp.independence[s].row(indices[s]), &mut dx);
        grads.insert(TensorId::Independence(ctx, side), Some(indices[s]), dx);
    }

    let dhad = &g[..adapted_dim];
    let d_adapted = Side::BOTH.map(|side| {
        let (own, other) = (&tape.adapted[side.index()], &tape.adapted[1 - side.index()]);
        dhad.iter().zip(other).zip(own).map(|((d, o), a)| d * o + wl * a).collect::<Vec<f64>>()
    });

    let raw = Side::BOTH.map(|side| {
        let kind = ctx.entity(side);
        p.interaction(kind).expect("predict checked the entity").row(indices[side.index()])
    });
    for side in Side::BOTH {
        let s = side.index();
        let id = TensorId::Interaction(ctx.entity(side));
        match cp.adaptation.matrix(side) {
            None => grads.insert(id, Some(indices[s]), d_adapted[s].clone()),
            Some(d) => {
                let mut du = vec![0.0; d.cols()];
                numerics::matvec_t_acc(d, &d_adapted[s], &mut du);
                grads.insert(id, Some(indices[s]), du);
            }
        }
    }
    match &cp.adaptation {
        Adaptation::Identity => {}
        Adaptation::Shared(d) => {
            let mut dd = vec![0.0; d.rows() * d.cols()];
            for s in 0..2 {
                numerics::outer_acc(&d_adapted[s], raw[s], &mut dd);
            }
            grads.insert(TensorId::Adaptation(ctx, None), None, dd);
        }
        Adaptation::PerEntity(ds) => {
            for side in Side::BOTH {
                let s = side.index();
                let mut dd = vec![0.0; ds[s].rows() * ds[s].cols()];
                numerics::outer_acc(&d_adapted[s], raw[s], &mut dd);
                grads.insert(TensorId::Adaptation(ctx, Some(side)), None, dd);
            }
        }
    }

    for (&(id, row), values) in &grads.blocks {
        if !values.iter().all(|v| v.is_finite()) {
            let at = row.map_or(String::new(), |r| format!(" row {r}"));
            return Err(Error::NonFinite(format!("gradient of {id}{at}")));
        }
    }
    Ok((loss, grads))
}

/// Gradients of `weight · (½ (pred − target)² + λ/2 · reg)` for one sample.
pub fn backward(
    p: &ModelParams,
    h: &HyperParams,
    ctx: ContextId,
    row: usize,
    col: usize,
    target: f64,
) -> Result<GradSet> {
    backward_sample(p, h, ctx, row, col, target).map(|(_, g)| g)
}

fn sample_value(p: &ModelParams, h: &HyperParams, ctx: ContextId, row: usize, col: usize, target: f64) -> Result<f64> {
    Ok(per_sample(p, h, ctx, row, col, target)?.value(h.lambda))
}

/// Central difference on a scratch copy; the coordinate is restored afterwards.
#[allow(clippy::too_many_arguments)]
fn central_diff(
    scratch: &mut ModelParams,
    h: &HyperParams,
    ctx: ContextId,
    row: usize,
    col: usize,
    target: f64,
    id: TensorId,
    flat_index: usize,
    epsilon: f64,
) -> Result<f64> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let len = scratch.tensor(id).ok_or_else(|| Error::Config(format!("tensor {id} is not allocated")))?.len();
    if flat_index >= len {
        return Err(Error::IndexOutOfRange { what: "tensor coordinate", index: flat_index, count: len });
    }
    let orig = scratch.tensor(id).expect("checked")[flat_index];
    let mut at = |x: f64| -> Result<f64> {
        scratch.tensor_mut(id).expect("checked")[flat_index] = x;
        sample_value(scratch, h, ctx, row, col, target)
    };
    let plus = at(orig + epsilon);
    let minus = at(orig - epsilon);
    scratch.tensor_mut(id).expect("checked")[flat_index] = orig;
    Ok((plus? - minus?) / (2.0 * epsilon))
}

/// `(L(θ + ε e_k) − L(θ − ε e_k)) / 2ε` for coordinate `flat_index` of tensor `id`.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff(
    p: &ModelParams,
    h: &HyperParams,
    ctx: ContextId,
    row: usize,
    col: usize,
    target: f64,
    id: TensorId,
    flat_index: usize,
    epsilon: f64,
) -> Result<f64> {
    central_diff(&mut p.clone(), h, ctx, row, col, target, id, flat_index, epsilon)
}

/// `|a − b| / max(1e-8, |a| + |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub tensor: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub epsilon: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

/// One observed entry to differentiate at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub ctx: ContextId,
    pub row: usize,
    pub col: usize,
    pub target: f64,
}

/// Compares [`backward`] against central differences on up to
/// `coords_per_tensor` random coordinates of every tensor each probe
/// touches. Embedding coordinates are drawn from the touched rows.
pub fn gradcheck(
    p: &ModelParams,
    h: &HyperParams,
    probes: &[Probe],
    coords_per_tensor: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scratch = p.clone();
    let mut worst: BTreeMap<TensorId, (usize, f64)> = BTreeMap::new();
    for probe in probes {
        let grads = backward(p, h, probe.ctx, probe.row, probe.col, probe.target)?;
        for (&(id, row), values) in grads.iter() {
            let base = row.map_or(0, |r| r * values.len());
            let n = values.len().min(coords_per_tensor);
            for k in sample(&mut rng, values.len(), n) {
                let fd = central_diff(
                    &mut scratch,
                    h,
                    probe.ctx,
                    probe.row,
                    probe.col,
                    probe.target,
                    id,
                    base + k,
                    epsilon,
                )?;
                let entry = worst.entry(id).or_insert((0, 0.0));
                entry.0 += 1;
                entry.1 = entry.1.max(relative_error(values[k], fd));
            }
        }
    }
    let tensors = worst
        .into_iter()
        .map(|(id, (coordinates, max_rel_error))| TensorCheck { tensor: id.to_string(), coordinates, max_rel_error })
        .collect();
    Ok(GradcheckReport { epsilon, tensors })
}
