//! Parameter container and forward prediction.
//!
//! Every data context scores a pair of entities. The two interaction vectors
//! are adapted into the context, multiplied elementwise, concatenated with
//! the two context-specific independence vectors, and fed through the
//! context's fully connected network:
//!
//! ```text
//! X̂_ij = f_X([D^X U_i ∘ D^X V_j ; U^X_i ; V^X_j])
//! Ŷ_jk = f_Y([D^Y V_j ∘ D^Y C_k ; V^Y_j ; C^Y_k])
//! Ẑ_il = f_Z([D^Z U_i ∘ D^Z T_l ; U^Z_i ; T^Z_l])
//! ```
//!
//! Embedding matrices are stored entity-major: row `i` of `U` holds the
//! column vector `U_i`.

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, DenseMatrix, DenseVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContextId {
    RatingX,
    ItemAuxY,
    UserAuxZ,
}

impl ContextId {
    pub const ALL: [ContextId; 3] = [ContextId::RatingX, ContextId::ItemAuxY, ContextId::UserAuxZ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The (row, column) entity kinds this context relates.
    pub fn entities(self) -> (EntityKind, EntityKind) {
        match self {
            ContextId::RatingX => (EntityKind::User, EntityKind::Item),
            ContextId::ItemAuxY => (EntityKind::Item, EntityKind::ItemAux),
            ContextId::UserAuxZ => (EntityKind::User, EntityKind::UserAux),
        }
    }

    pub fn entity(self, side: Side) -> EntityKind {
        let (l, r) = self.entities();
        match side {
            Side::Left => l,
            Side::Right => r,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ContextId::RatingX => "X",
            ContextId::ItemAuxY => "Y",
            ContextId::UserAuxZ => "Z",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityKind {
    User,
    Item,
    /// Auxiliary entities coupled to items (genres): `C`.
    ItemAux,
    /// Auxiliary entities coupled to users (trustees): `T`.
    UserAux,
}

impl EntityKind {
    pub const ALL: [EntityKind; 4] = [EntityKind::User, EntityKind::Item, EntityKind::ItemAux, EntityKind::UserAux];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            EntityKind::User => "U",
            EntityKind::Item => "V",
            EntityKind::ItemAux => "C",
            EntityKind::UserAux => "T",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationMode {
    /// One learnable matrix per context, applied to both entities.
    Shared,
    /// No adaptation; interaction vectors enter the context unchanged.
    Identity,
    /// A separate learnable matrix for each side of each context.
    PerEntity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkInit {
    Xavier,
    /// Every weight 1, every bias 0: the network sums its input.
    SummingOnes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationInit {
    Xavier,
    Identity,
}

/// A group of tensors that can be excluded from optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Interaction(EntityKind),
    Independence(ContextId),
    Adaptation(ContextId),
    Network(ContextId),
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::Interaction(e) => write!(f, "{}", e.symbol()),
            ParamGroup::Independence(c) => write!(f, "independence^{}", c.label()),
            ParamGroup::Adaptation(c) => write!(f, "D^{}", c.label()),
            ParamGroup::Network(c) => write!(f, "theta_f{}", c.label()),
        }
    }
}

/// Name of one parameter tensor. The derived order is the block order in
/// which a sample's gradients are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TensorId {
    Interaction(EntityKind),
    Independence(ContextId, Side),
    /// `None` is the shared matrix; `Some(side)` the per-entity ones.
    Adaptation(ContextId, Option<Side>),
    Weight(ContextId, usize),
    Bias(ContextId, usize),
}

impl TensorId {
    pub fn group(self) -> ParamGroup {
        match self {
            TensorId::Interaction(e) => ParamGroup::Interaction(e),
            TensorId::Independence(c, _) => ParamGroup::Independence(c),
            TensorId::Adaptation(c, _) => ParamGroup::Adaptation(c),
            TensorId::Weight(c, _) | TensorId::Bias(c, _) => ParamGroup::Network(c),
        }
    }

    /// Embedding tensors are updated one entity row at a time.
    pub fn is_embedding(self) -> bool {
        matches!(self, TensorId::Interaction(_) | TensorId::Independence(..))
    }

    pub fn parse(name: &str) -> Option<TensorId> {
        let ctx = |s: &str| ContextId::ALL.into_iter().find(|c| c.label() == s);
        let entity = |s: &str| EntityKind::ALL.into_iter().find(|e| e.symbol() == s);
        if let Some(e) = entity(name) {
            return Some(TensorId::Interaction(e));
        }
        if let Some(rest) = name.strip_prefix("D^") {
            return match rest.split_once('.') {
                None => Some(TensorId::Adaptation(ctx(rest)?, None)),
                Some((c, "left")) => Some(TensorId::Adaptation(ctx(c)?, Some(Side::Left))),
                Some((c, "right")) => Some(TensorId::Adaptation(ctx(c)?, Some(Side::Right))),
                _ => None,
            };
        }
        if let Some(rest) = name.strip_prefix('f') {
            let (c, layer) = rest.split_once('.')?;
            let c = ctx(c)?;
            if let Some(k) = layer.strip_prefix('W') {
                return Some(TensorId::Weight(c, k.parse().ok()?));
            }
            if let Some(k) = layer.strip_prefix('b') {
                return Some(TensorId::Bias(c, k.parse().ok()?));
            }
            return None;
        }
        let (e, c) = name.split_once('^')?;
        let (e, c) = (entity(e)?, ctx(c)?);
        Side::BOTH.into_iter().find(|&s| c.entity(s) == e).map(|s| TensorId::Independence(c, s))
    }
}

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TensorId::Interaction(e) => write!(f, "{}", e.symbol()),
            TensorId::Independence(c, s) => write!(f, "{}^{}", c.entity(s).symbol(), c.label()),
            TensorId::Adaptation(c, None) => write!(f, "D^{}", c.label()),
            TensorId::Adaptation(c, Some(Side::Left)) => write!(f, "D^{}.left", c.label()),
            TensorId::Adaptation(c, Some(Side::Right)) => write!(f, "D^{}.right", c.label()),
            TensorId::Weight(c, k) => write!(f, "f{}.W{k}", c.label()),
            TensorId::Bias(c, k) => write!(f, "f{}.b{k}", c.label()),
        }
    }
}

/// Model and optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    /// Interaction vector dimension.
    pub d_c: usize,
    /// Independence vector dimension.
    pub d_s: usize,
    /// Row count of the adaptation matrices.
    pub d_c_adapted: usize,
    /// Hidden layer widths; an affine `→ 1` output head always follows.
    pub layers: Vec<usize>,
    pub use_activation: bool,
    pub adaptation_mode: AdaptationMode,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub network_init: NetworkInit,
    pub adaptation_init: AdaptationInit,
    pub frozen: BTreeSet<ParamGroup>,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            d_c: 20,
            d_s: 10,
            d_c_adapted: 20,
            layers: vec![40, 20, 10],
            use_activation: true,
            adaptation_mode: AdaptationMode::Shared,
            alpha: 0.9,
            beta: 0.0,
            lambda: 1e-5,
            learning_rate: 1e-3,
            max_epochs: 1000,
            patience: 10,
            min_delta: 1e-4,
            batch_size: 1,
            seed: 0,
            network_init: NetworkInit::Xavier,
            adaptation_init: AdaptationInit::Xavier,
            frozen: BTreeSet::new(),
        }
    }
}

impl HyperParams {
    /// Length of each network's input vector.
    pub fn input_dim(&self) -> usize {
        self.adapted_dim() + 2 * self.d_s
    }

    /// Dimension of the adapted interaction vectors.
    pub fn adapted_dim(&self) -> usize {
        match self.adaptation_mode {
            AdaptationMode::Identity => self.d_c,
            _ => self.d_c_adapted,
        }
    }

    /// Weight of `ctx` in the total objective.
    pub fn context_weight(&self, ctx: ContextId) -> f64 {
        match ctx {
            ContextId::RatingX => 1.0 - self.alpha - self.beta,
            ContextId::ItemAuxY => self.alpha,
            ContextId::UserAuxZ => self.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_c == 0 {
            return fail("d_c must be positive".into());
        }
        if self.adaptation_mode != AdaptationMode::Identity && self.d_c_adapted == 0 {
            return fail("d_c_adapted must be positive".into());
        }
        if self.adaptation_mode == AdaptationMode::Identity && self.d_c_adapted != self.d_c {
            return fail(format!(
                "identity adaptation needs d_c_adapted == d_c, got {} and {}",
                self.d_c_adapted, self.d_c
            ));
        }
        if self.adaptation_init == AdaptationInit::Identity && self.d_c_adapted != self.d_c {
            return fail("identity-initialized adaptation matrices must be square".into());
        }
        if self.layers.contains(&0) {
            return fail(format!("hidden layer widths must be positive, got {:?}", self.layers));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.alpha + self.beta > 1.0 + 1e-12 {
            return fail(format!("alpha + beta must not exceed 1, got {}", self.alpha + self.beta));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return fail(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        Ok(())
    }
}

/// Entity counts; `None` marks an absent auxiliary context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityCounts {
    pub users: usize,
    pub items: usize,
    pub item_aux: Option<usize>,
    pub user_aux: Option<usize>,
}

impl EntityCounts {
    pub fn get(&self, kind: EntityKind) -> Option<usize> {
        match kind {
            EntityKind::User => Some(self.users),
            EntityKind::Item => Some(self.items),
            EntityKind::ItemAux => self.item_aux,
            EntityKind::UserAux => self.user_aux,
        }
    }

    pub fn has_context(&self, ctx: ContextId) -> bool {
        match ctx {
            ContextId::RatingX => true,
            ContextId::ItemAuxY => self.item_aux.is_some(),
            ContextId::UserAuxZ => self.user_aux.is_some(),
        }
    }

    pub fn contexts(&self) -> Vec<ContextId> {
        ContextId::ALL.into_iter().filter(|&c| self.has_context(c)).collect()
    }

    pub fn of_data(data: &crate::data::TrainingData) -> Self {
        EntityCounts {
            users: data.ratings.n_rows(),
            items: data.ratings.n_cols(),
            item_aux: data.item_aux.as_ref().map(|y| y.n_cols()),
            user_aux: data.user_aux.as_ref().map(|z| z.n_cols()),
        }
    }

    pub fn of_bundle(bundle: &crate::data::DatasetBundle) -> Self {
        EntityCounts {
            users: bundle.ratings.n_rows(),
            items: bundle.ratings.n_cols(),
            item_aux: bundle.item_aux.as_ref().map(|y| y.n_cols()),
            user_aux: bundle.user_aux.as_ref().map(|z| z.n_cols()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`.
    pub weight: DenseMatrix,
    pub bias: DenseVector,
}

/// Hidden layers followed by a one-unit output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Dense>,
}

impl Network {
    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn sq_norm(&self) -> f64 {
        self.layers.iter().map(|l| l.weight.sq_norm() + l.bias.sq_norm()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Adaptation {
    Identity,
    Shared(DenseMatrix),
    PerEntity([DenseMatrix; 2]),
}

impl Adaptation {
    pub fn matrix(&self, side: Side) -> Option<&DenseMatrix> {
        match self {
            Adaptation::Identity => None,
            Adaptation::Shared(d) => Some(d),
            Adaptation::PerEntity(ds) => Some(&ds[side.index()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextParams {
    /// `[left, right]` independence embeddings, entity-major with `d_s` columns.
    pub independence: [DenseMatrix; 2],
    pub adaptation: Adaptation,
    pub network: Network,
}

/// All learnable tensors. Only contexts present in the data are allocated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    interaction: [Option<DenseMatrix>; 4],
    contexts: [Option<ContextParams>; 3],
}

impl ModelParams {
    pub fn interaction(&self, kind: EntityKind) -> Option<&DenseMatrix> {
        self.interaction[kind.index()].as_ref()
    }

    pub fn context(&self, ctx: ContextId) -> Option<&ContextParams> {
        self.contexts[ctx.index()].as_ref()
    }

    pub fn context_mut(&mut self, ctx: ContextId) -> Option<&mut ContextParams> {
        self.contexts[ctx.index()].as_mut()
    }

    pub fn has_context(&self, ctx: ContextId) -> bool {
        self.contexts[ctx.index()].is_some()
    }

    /// Every allocated tensor, in block order.
    pub fn tensor_ids(&self) -> Vec<TensorId> {
        let mut ids = Vec::new();
        for e in EntityKind::ALL {
            if self.interaction(e).is_some() {
                ids.push(TensorId::Interaction(e));
            }
        }
        for c in ContextId::ALL {
            let Some(cp) = self.context(c) else { continue };
            ids.extend(Side::BOTH.map(|s| TensorId::Independence(c, s)));
            match cp.adaptation {
                Adaptation::Identity => {}
                Adaptation::Shared(_) => ids.push(TensorId::Adaptation(c, None)),
                Adaptation::PerEntity(_) => {
                    ids.extend(Side::BOTH.map(|s| TensorId::Adaptation(c, Some(s))));
                }
            }
            for k in 0..cp.network.layers.len() {
                ids.push(TensorId::Weight(c, k));
                ids.push(TensorId::Bias(c, k));
            }
        }
        ids.sort();
        ids
    }

    /// `(rows, cols)` of a tensor; embeddings are `(entities, dim)`.
    pub fn tensor_shape(&self, id: TensorId) -> Option<(usize, usize)> {
        Some(match id {
            TensorId::Bias(c, k) => (self.context(c)?.network.layers.get(k)?.bias.len(), 1),
            _ => self.matrix(id)?.shape(),
        })
    }

    fn matrix(&self, id: TensorId) -> Option<&DenseMatrix> {
        match id {
            TensorId::Interaction(e) => self.interaction(e),
            TensorId::Independence(c, s) => Some(&self.context(c)?.independence[s.index()]),
            TensorId::Adaptation(c, side) => match (&self.context(c)?.adaptation, side) {
                (Adaptation::Shared(d), None) => Some(d),
                (Adaptation::PerEntity(ds), Some(s)) => Some(&ds[s.index()]),
                _ => None,
            },
            TensorId::Weight(c, k) => Some(&self.context(c)?.network.layers.get(k)?.weight),
            TensorId::Bias(..) => None,
        }
    }

    pub fn tensor(&self, id: TensorId) -> Option<&[f64]> {
        match id {
            TensorId::Bias(c, k) => Some(self.context(c)?.network.layers.get(k)?.bias.as_slice()),
            _ => self.matrix(id).map(DenseMatrix::as_slice),
        }
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> Option<&mut [f64]> {
        match id {
            TensorId::Interaction(e) => self.interaction[e.index()].as_mut().map(DenseMatrix::as_mut_slice),
            TensorId::Independence(c, s) => Some(self.context_mut(c)?.independence[s.index()].as_mut_slice()),
            TensorId::Adaptation(c, side) => match (&mut self.context_mut(c)?.adaptation, side) {
                (Adaptation::Shared(d), None) => Some(d.as_mut_slice()),
                (Adaptation::PerEntity(ds), Some(s)) => Some(ds[s.index()].as_mut_slice()),
                _ => None,
            },
            TensorId::Weight(c, k) => Some(self.context_mut(c)?.network.layers.get_mut(k)?.weight.as_mut_slice()),
            TensorId::Bias(c, k) => Some(self.context_mut(c)?.network.layers.get_mut(k)?.bias.as_mut_slice()),
        }
    }

    /// The row of an embedding tensor, or the whole tensor when `row` is `None`.
    pub fn block(&self, id: TensorId, row: Option<usize>) -> Option<&[f64]> {
        let data = self.tensor(id)?;
        match row {
            None => Some(data),
            Some(r) => {
                let (_, cols) = self.tensor_shape(id)?;
                data.get(r * cols..(r + 1) * cols)
            }
        }
    }

    pub fn block_mut(&mut self, id: TensorId, row: Option<usize>) -> Option<&mut [f64]> {
        let cols = self.tensor_shape(id)?.1;
        let data = self.tensor_mut(id)?;
        match row {
            None => Some(data),
            Some(r) => data.get_mut(r * cols..(r + 1) * cols),
        }
    }

    /// A structurally identical copy with every value set to zero.
    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for id in z.tensor_ids() {
            z.tensor_mut(id).expect("listed tensor").fill(0.0);
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.tensor_ids().into_iter().all(|id| self.tensor(id).is_some_and(|t| t.iter().all(|x| x.is_finite())))
    }

    pub fn entity_count(&self, kind: EntityKind) -> Option<usize> {
        self.interaction(kind).map(DenseMatrix::rows)
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_sum: usize) -> DenseMatrix {
    if rows * cols == 0 {
        return DenseMatrix::zeros(rows, cols);
    }
    let std = (2.0 / fan_sum as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("sized")
}

/// Draws all parameters for the contexts present in `counts`.
///
/// Weights are zero-mean normal with variance `2 / (fan_in + fan_out)`
/// (for an embedding matrix: dimension plus entity count); biases are zero.
/// The draw order is fixed so a seed fully determines the result.
pub fn init_params(h: &HyperParams, counts: &EntityCounts, seed: u64) -> Result<ModelParams> {
    h.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut interaction: [Option<DenseMatrix>; 4] = Default::default();
    for kind in EntityKind::ALL {
        if let Some(n) = counts.get(kind) {
            if n == 0 {
                return Err(Error::Config(format!("entity count for {} is zero", kind.symbol())));
            }
            interaction[kind.index()] = Some(xavier(&mut rng, n, h.d_c, h.d_c + n));
        }
    }
    let mut contexts: [Option<ContextParams>; 3] = Default::default();
    for ctx in counts.contexts() {
        let independence = Side::BOTH.map(|s| {
            let n = counts.get(ctx.entity(s)).expect("present context");
            xavier(&mut rng, n, h.d_s, h.d_s + n)
        });
        let draw_d = |rng: &mut ChaCha8Rng| match h.adaptation_init {
            AdaptationInit::Identity => DenseMatrix::identity(h.d_c),
            AdaptationInit::Xavier => xavier(rng, h.d_c_adapted, h.d_c, h.d_c_adapted + h.d_c),
        };
        let adaptation = match h.adaptation_mode {
            AdaptationMode::Identity => Adaptation::Identity,
            AdaptationMode::Shared => Adaptation::Shared(draw_d(&mut rng)),
            AdaptationMode::PerEntity => {
                let left = draw_d(&mut rng);
                Adaptation::PerEntity([left, draw_d(&mut rng)])
            }
        };
        let mut layers = Vec::with_capacity(h.layers.len() + 1);
        let mut fan_in = h.input_dim();
        for &width in h.layers.iter().chain(std::iter::once(&1)) {
            let weight = match h.network_init {
                NetworkInit::SummingOnes => DenseMatrix::filled(width, fan_in, 1.0),
                NetworkInit::Xavier => xavier(&mut rng, width, fan_in, fan_in + width),
            };
            layers.push(Dense { weight, bias: DenseVector::zeros(width) });
            fan_in = width;
        }
        contexts[ctx.index()] = Some(ContextParams { independence, adaptation, network: Network { layers } });
    }
    Ok(ModelParams { interaction, contexts })
}

/// Projects an interaction vector into `ctx`.
pub fn adapt(p: &ModelParams, ctx: ContextId, side: Side, v: &DenseVector) -> Result<DenseVector> {
    let cp = p.context(ctx).ok_or_else(|| Error::Config(format!("context {} is not allocated", ctx.label())))?;
    let d_c = p.interaction(EntityKind::User).map_or(0, DenseMatrix::cols);
    if v.len() != d_c {
        return Err(Error::shape("adapt", format!("d_c = {d_c}"), format!("vector len {}", v.len())));
    }
    match cp.adaptation.matrix(side) {
        None => Ok(v.clone()),
        Some(d) => numerics::matvec(d, v),
    }
}

/// Intermediates of one forward pass, kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTape {
    pub ctx: ContextId,
    pub row: usize,
    pub col: usize,
    /// Adapted interaction vectors `[D·left, D·right]`.
    pub adapted: [Vec<f64>; 2],
    /// `activations[0]` is the concatenated network input (its first
    /// `adapted_dim` entries are the elementwise product); `activations[k]`
    /// is the output of hidden layer `k`.
    pub activations: Vec<Vec<f64>>,
    pub prediction: f64,
}

impl ForwardTape {
    pub fn hadamard(&self) -> &[f64] {
        &self.activations[0][..self.adapted[0].len()]
    }
}

fn check_index(p: &ModelParams, kind: EntityKind, index: usize) -> Result<()> {
    let count = p.entity_count(kind).unwrap_or(0);
    if index >= count {
        return Err(Error::IndexOutOfRange { what: kind.symbol(), index, count });
    }
    Ok(())
}

/// Predicts entry `(row, col)` of the matrix behind `ctx`.
pub fn predict(p: &ModelParams, h: &HyperParams, ctx: ContextId, row: usize, col: usize) -> Result<(f64, ForwardTape)> {
    let cp = p.context(ctx).ok_or_else(|| Error::Config(format!("context {} is not allocated", ctx.label())))?;
    let (lk, rk) = ctx.entities();
    check_index(p, lk, row)?;
    check_index(p, rk, col)?;
    let indices = [row, col];
    let kinds = [lk, rk];

    let adapted = Side::BOTH.map(|s| {
        let raw = p.interaction(kinds[s.index()]).expect("checked").row(indices[s.index()]);
        match cp.adaptation.matrix(s) {
            None => raw.to_vec(),
            Some(d) => {
                let mut out = vec![0.0; d.rows()];
                numerics::matvec_into(d, raw, &mut out);
                out
            }
        }
    });

    let net = &cp.network;
    let mut input = Vec::with_capacity(net.layers[0].weight.cols());
    input.extend(adapted[0].iter().zip(&adapted[1]).map(|(a, b)| a * b));
    input.extend_from_slice(cp.independence[0].row(row));
    input.extend_from_slice(cp.independence[1].row(col));
    if input.len() != net.layers[0].weight.cols() {
        return Err(Error::shape(
            "predict",
            format!("network input width {}", net.layers[0].weight.cols()),
            format!("feature len {} (check d_c_adapted + 2 d_s)", input.len()),
        ));
    }
    debug_assert_eq!(input.len(), h.input_dim());

    let mut activations = Vec::with_capacity(net.layers.len());
    activations.push(input);
    for layer in &net.layers[..net.hidden_count()] {
        let mut z = layer.bias.as_slice().to_vec();
        numerics::matvec_acc(&layer.weight, activations.last().expect("input"), &mut z);
        if h.use_activation {
            z.iter_mut().for_each(|x| *x = x.tanh());
        }
        activations.push(z);
    }
    let head = net.layers.last().expect("output head");
    let prediction = numerics::dot(head.weight.row(0), activations.last().expect("input")) + head.bias[0];
    if !prediction.is_finite() {
        return Err(Error::NonFinite(format!("prediction for {} ({row}, {col})", ctx.label())));
    }
    Ok((prediction, ForwardTape { ctx, row, col, adapted, activations, prediction }))
}
