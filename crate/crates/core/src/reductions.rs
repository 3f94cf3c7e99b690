//! Named model presets: the matrix-factorization baselines the architecture
//! reduces to, and the ablation variants.
//!
//! A preset fills in a [`HyperParams`] and may pin some fields. Overrides
//! are applied on top; overriding a pinned field with a different value is
//! an error, since the result would no longer be the named model.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{AdaptationInit, AdaptationMode, ContextId, HyperParams, NetworkInit, ParamGroup};

/// Hidden widths of the depth family, shallowest first.
pub const DEPTH_LAYERS: [&[usize]; 5] = [&[10], &[20, 10], &[40, 20, 10], &[80, 40, 20, 10], &[160, 80, 40, 20, 10]];

/// Partial hyperparameters; `None` keeps the preset's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperOverrides {
    pub d_c: Option<usize>,
    pub d_s: Option<usize>,
    pub d_c_adapted: Option<usize>,
    pub layers: Option<Vec<usize>>,
    pub use_activation: Option<bool>,
    pub adaptation_mode: Option<AdaptationMode>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub lambda: Option<f64>,
    pub learning_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub min_delta: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub network_init: Option<NetworkInit>,
    pub adaptation_init: Option<AdaptationInit>,
    /// Added to the preset's frozen groups.
    pub frozen: Option<BTreeSet<ParamGroup>>,
}

impl HyperOverrides {
    /// Overrides in `other` win over those in `self`.
    pub fn merged(&self, other: &HyperOverrides) -> HyperOverrides {
        let mut base = serde_json::to_value(self).expect("plain data");
        let top = serde_json::to_value(other).expect("plain data");
        for (k, v) in top.as_object().expect("struct").iter() {
            if !v.is_null() {
                base[k] = v.clone();
            }
        }
        serde_json::from_value(base).expect("same shape")
    }

    fn set_fields(&self) -> BTreeMap<String, Value> {
        let v = serde_json::to_value(self).expect("plain data");
        v.as_object()
            .expect("struct")
            .iter()
            .filter(|(_, v)| !v.is_null())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

pub trait Preset: Send + Sync {
    fn name(&self) -> &str;

    fn description(&self) -> &str;

    /// Writes the preset's settings into `h`.
    fn configure(&self, h: &mut HyperParams);

    /// Fields whose preset values define the model.
    fn pinned(&self) -> &'static [&'static str] {
        &[]
    }

    /// Parameter groups excluded from optimizer updates.
    fn freeze_mask(&self) -> BTreeSet<ParamGroup> {
        BTreeSet::new()
    }

    /// Preset settings plus `overrides`, validated.
    fn expand(&self, overrides: &HyperOverrides) -> Result<HyperParams> {
        let mut h = HyperParams::default();
        self.configure(&mut h);
        let preset_value = serde_json::to_value(&h).expect("plain data");
        let set = overrides.set_fields();
        for &field in self.pinned() {
            if let Some(v) = set.get(field) {
                if *v != preset_value[field] {
                    return Err(Error::Config(format!(
                        "preset `{}` fixes {field} = {}, cannot override with {v}",
                        self.name(),
                        preset_value[field]
                    )));
                }
            }
        }
        let mut merged = preset_value;
        for (k, v) in &set {
            if k != "frozen" {
                merged[k] = v.clone();
            }
        }
        let mut h: HyperParams =
            serde_json::from_value(merged).map_err(|e| Error::Config(format!("overrides: {e}")))?;
        if overrides.d_c_adapted.is_none() {
            h.d_c_adapted = h.d_c;
        }
        h.frozen.extend(self.freeze_mask());
        if let Some(extra) = &overrides.frozen {
            h.frozen.extend(extra.iter().copied());
        }
        h.validate()?;
        Ok(h)
    }
}

/// The factorization family: plain or biased, single or collective.
struct Factorization {
    name: &'static str,
    description: &'static str,
    biased: bool,
    collective: bool,
}

const MF_PINNED: &[&str] = &["adaptation_mode", "d_s", "layers", "use_activation", "network_init", "alpha", "beta"];
const CMF_PINNED: &[&str] = &["adaptation_mode", "d_s", "layers", "use_activation", "network_init", "beta"];

impl Preset for Factorization {
    fn name(&self) -> &str {
        self.name
    }

    fn description(&self) -> &str {
        self.description
    }

    fn configure(&self, h: &mut HyperParams) {
        h.adaptation_mode = AdaptationMode::Identity;
        h.layers = vec![];
        h.use_activation = false;
        h.network_init = NetworkInit::SummingOnes;
        h.beta = 0.0;
        // Ten predictive factors in total; the biased variants spend two on biases.
        h.d_s = usize::from(self.biased);
        h.d_c = if self.biased { 8 } else { 10 };
        h.d_c_adapted = h.d_c;
        if self.collective {
            h.alpha = 0.5;
            h.learning_rate = 5e-4;
            h.lambda = 1e-5;
        } else {
            h.alpha = 0.0;
            h.learning_rate = 1e-4;
            h.lambda = 1e-4;
        }
    }

    fn pinned(&self) -> &'static [&'static str] {
        if self.collective {
            CMF_PINNED
        } else {
            MF_PINNED
        }
    }

    fn freeze_mask(&self) -> BTreeSet<ParamGroup> {
        let contexts: &[ContextId] = if self.collective { &ContextId::ALL } else { &[ContextId::RatingX] };
        contexts.iter().map(|&c| ParamGroup::Network(c)).collect()
    }
}

/// The full model and its single-change variants.
struct Dacona {
    name: String,
    description: String,
    variant: Variant,
}

#[derive(Clone, Copy)]
enum Variant {
    Full,
    WithoutAdaptation,
    PerEntityAdaptation,
    Depth(usize),
    WithoutActivation,
}

impl Preset for Dacona {
    fn name(&self) -> &str {
        &self.name
    }

    fn description(&self) -> &str {
        &self.description
    }

    fn configure(&self, h: &mut HyperParams) {
        match self.variant {
            Variant::Full => {}
            Variant::WithoutAdaptation => {
                h.adaptation_mode = AdaptationMode::Shared;
                h.adaptation_init = AdaptationInit::Identity;
            }
            Variant::PerEntityAdaptation => h.adaptation_mode = AdaptationMode::PerEntity,
            Variant::Depth(k) => h.layers = DEPTH_LAYERS[k - 1].to_vec(),
            Variant::WithoutActivation => h.use_activation = false,
        }
    }

    fn pinned(&self) -> &'static [&'static str] {
        match self.variant {
            Variant::Full => &[],
            Variant::WithoutAdaptation => &["adaptation_mode", "adaptation_init"],
            Variant::PerEntityAdaptation => &["adaptation_mode"],
            Variant::Depth(_) => &["layers"],
            Variant::WithoutActivation => &["use_activation"],
        }
    }

    fn freeze_mask(&self) -> BTreeSet<ParamGroup> {
        match self.variant {
            Variant::WithoutAdaptation => ContextId::ALL.into_iter().map(ParamGroup::Adaptation).collect(),
            _ => BTreeSet::new(),
        }
    }
}

/// Presets by name.
pub struct PresetRegistry {
    presets: BTreeMap<String, Box<dyn Preset>>,
}

impl PresetRegistry {
    pub fn empty() -> Self {
        PresetRegistry { presets: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        let families = [
            ("mf", "matrix factorization: inner product of user and item vectors", false, false),
            ("biased_mf", "matrix factorization with scalar user and item biases", true, false),
            ("cmf", "collective matrix factorization sharing item vectors with the auxiliary matrix", false, true),
            ("biased_cmf", "collective matrix factorization with scalar biases", true, true),
        ];
        for (name, description, biased, collective) in families {
            r.register(Box::new(Factorization { name, description, biased, collective }));
        }
        let mut dacona = |name: String, description: String, variant| {
            r.register(Box::new(Dacona { name, description, variant }));
        };
        dacona("dacona".into(), "full model".into(), Variant::Full);
        dacona(
            "dacona_without_ca".into(),
            "adaptation matrices fixed to the identity".into(),
            Variant::WithoutAdaptation,
        );
        dacona("dacona_sep".into(), "separate adaptation matrix per entity side".into(), Variant::PerEntityAdaptation);
        for k in 1..=DEPTH_LAYERS.len() {
            dacona(format!("dacona_depth_{k}"), format!("hidden layers {:?}", DEPTH_LAYERS[k - 1]), Variant::Depth(k));
        }
        dacona("dacona_without_af".into(), "linear hidden layers".into(), Variant::WithoutActivation);
        r
    }

    /// Adds or replaces a preset.
    pub fn register(&mut self, preset: Box<dyn Preset>) {
        self.presets.insert(preset.name().to_string(), preset);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Preset> {
        self.presets.get(name).map(|p| p.as_ref()).ok_or_else(|| Error::UnknownPreset(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.presets.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn Preset> {
        self.presets.values().map(|p| p.as_ref())
    }

    pub fn expand(&self, name: &str, overrides: &HyperOverrides) -> Result<HyperParams> {
        self.get(name)?.expand(overrides)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Entry, SparseTriplets, TrainingData};
    use crate::model::{init_params, predict, EntityCounts, EntityKind, Side, TensorId};
    use crate::numerics;
    use crate::training::fit;
    use proptest::prelude::*;

    fn reg() -> PresetRegistry {
        PresetRegistry::builtin()
    }

    fn none() -> HyperOverrides {
        HyperOverrides::default()
    }

    #[test]
    fn every_preset_expands() {
        let r = reg();
        assert_eq!(r.names().count(), 13);
        for p in r.iter() {
            let h = p.expand(&none()).unwrap();
            assert!(p.freeze_mask().is_subset(&h.frozen), "{}", p.name());
        }
        assert!(matches!(r.get("nope"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn depth_family_structures() {
        let r = reg();
        let expect: [&[usize]; 5] = [&[10], &[20, 10], &[40, 20, 10], &[80, 40, 20, 10], &[160, 80, 40, 20, 10]];
        for (k, layers) in expect.iter().enumerate() {
            let h = r.expand(&format!("dacona_depth_{}", k + 1), &none()).unwrap();
            assert_eq!(h.layers, *layers);
        }
        assert_eq!(r.expand("dacona", &none()).unwrap().layers, vec![40, 20, 10]);
    }

    #[test]
    fn freeze_masks() {
        let r = reg();
        assert!(r.get("dacona").unwrap().freeze_mask().is_empty());
        assert!(r.get("mf").unwrap().freeze_mask().contains(&ParamGroup::Network(ContextId::RatingX)));
        let two_contexts: BTreeSet<_> = r
            .get("dacona_without_ca")
            .unwrap()
            .freeze_mask()
            .into_iter()
            .filter(|g| !matches!(g, ParamGroup::Adaptation(ContextId::UserAuxZ)))
            .collect();
        assert_eq!(
            two_contexts,
            [ParamGroup::Adaptation(ContextId::RatingX), ParamGroup::Adaptation(ContextId::ItemAuxY)].into()
        );
    }

    #[test]
    fn contradictory_overrides_rejected() {
        let r = reg();
        let bad = HyperOverrides { d_s: Some(3), ..none() };
        assert!(r.expand("mf", &bad).is_err());
        assert!(r.expand("dacona_depth_2", &HyperOverrides { layers: Some(vec![5]), ..none() }).is_err());
        // Restating a pinned value is fine.
        assert!(r.expand("mf", &HyperOverrides { d_s: Some(0), ..none() }).is_ok());
        // Unpinned fields are free.
        let h = r.expand("dacona", &HyperOverrides { d_s: Some(5), d_c: Some(30), ..none() }).unwrap();
        assert_eq!((h.d_s, h.d_c, h.d_c_adapted, h.input_dim()), (5, 30, 30, 40));
        // Overrides that break validation surface as errors.
        assert!(r.expand("dacona", &HyperOverrides { alpha: Some(1.5), ..none() }).is_err());
    }

    #[test]
    fn biased_mf_dimension_convention() {
        let h = reg().expand("biased_mf", &none()).unwrap();
        assert_eq!((h.d_c, h.d_s), (8, 1));
        let h = reg().expand("biased_mf", &HyperOverrides { d_c: Some(9), ..none() }).unwrap();
        assert_eq!(h.d_c_adapted, 9);
    }

    fn counts() -> EntityCounts {
        EntityCounts { users: 6, items: 5, item_aux: Some(3), user_aux: None }
    }

    proptest! {
        #[test]
        fn mf_predicts_inner_product(seed in any::<u64>(), row in 0usize..6, col in 0usize..5) {
            let h = reg().expand("mf", &none()).unwrap();
            let p = init_params(&h, &EntityCounts { item_aux: None, ..counts() }, seed).unwrap();
            let (pred, _) = predict(&p, &h, ContextId::RatingX, row, col).unwrap();
            let u = p.interaction(EntityKind::User).unwrap().row(row);
            let v = p.interaction(EntityKind::Item).unwrap().row(col);
            prop_assert!((pred - numerics::dot(u, v)).abs() < 1e-12);
        }

        #[test]
        fn biased_mf_adds_two_scalars(seed in any::<u64>(), row in 0usize..6, col in 0usize..5) {
            let h = reg().expand("biased_mf", &none()).unwrap();
            let p = init_params(&h, &EntityCounts { item_aux: None, ..counts() }, seed).unwrap();
            let (pred, _) = predict(&p, &h, ContextId::RatingX, row, col).unwrap();
            let u = p.interaction(EntityKind::User).unwrap().row(row);
            let v = p.interaction(EntityKind::Item).unwrap().row(col);
            let cx = p.context(ContextId::RatingX).unwrap();
            let bu = cx.independence[Side::Left.index()].row(row);
            let bv = cx.independence[Side::Right.index()].row(col);
            prop_assert_eq!((bu.len(), bv.len()), (1, 1));
            prop_assert!((pred - (numerics::dot(u, v) + bu[0] + bv[0])).abs() < 1e-12);
        }
    }

    #[test]
    fn cmf_scores_both_contexts_by_inner_product() {
        let h = reg().expand("cmf", &none()).unwrap();
        let p = init_params(&h, &counts(), 3).unwrap();
        let (pred, _) = predict(&p, &h, ContextId::ItemAuxY, 4, 2).unwrap();
        let v = p.interaction(EntityKind::Item).unwrap().row(4);
        let c = p.interaction(EntityKind::ItemAux).unwrap().row(2);
        assert!((pred - numerics::dot(v, c)).abs() < 1e-12);
    }

    #[test]
    fn frozen_tensors_survive_a_fit_for_every_preset() {
        let e = |row, col, value| Entry { row, col, value };
        let ratings = SparseTriplets::new(
            3,
            3,
            vec![e(0, 0, 5.0), e(0, 1, 3.0), e(1, 1, 4.0), e(1, 2, 1.0), e(2, 0, 2.0), e(2, 2, 4.0)],
        )
        .unwrap();
        let item_aux = SparseTriplets::new(3, 2, vec![e(0, 0, 1.0), e(1, 1, 1.0), e(2, 0, 1.0)]).unwrap();
        let data = TrainingData { ratings, item_aux: Some(item_aux), user_aux: None };
        let val = SparseTriplets::new(3, 3, vec![e(0, 2, 3.0)]).unwrap();
        let r = reg();
        for preset in r.iter() {
            let small = HyperOverrides { max_epochs: Some(5), learning_rate: Some(1e-2), ..none() };
            let h = preset.expand(&small).unwrap();
            let init = init_params(&h, &crate::training::trained_counts(&h, &data), h.seed).unwrap();
            let (p, _) = fit(&h, &data, &val).unwrap();
            let mut frozen = 0;
            for id in init.tensor_ids() {
                if h.frozen.contains(&id.group()) {
                    frozen += 1;
                    let before: Vec<u64> = init.tensor(id).unwrap().iter().map(|x| x.to_bits()).collect();
                    let after: Vec<u64> = p.tensor(id).unwrap().iter().map(|x| x.to_bits()).collect();
                    assert_eq!(before, after, "{} {id}", preset.name());
                }
            }
            if !preset.freeze_mask().is_empty() {
                assert!(frozen > 0, "{}", preset.name());
            }
            if preset.name() == "dacona_without_ca" {
                let d = p.tensor(TensorId::Adaptation(ContextId::RatingX, None)).unwrap();
                assert_eq!(d, crate::numerics::DenseMatrix::identity(h.d_c).as_slice());
            }
        }
    }

    #[test]
    fn merged_overrides_prefer_the_later_source() {
        let file = HyperOverrides { seed: Some(1), alpha: Some(0.2), ..none() };
        let flags = HyperOverrides { seed: Some(7), ..none() };
        let m = file.merged(&flags);
        assert_eq!((m.seed, m.alpha), (Some(7), Some(0.2)));
    }
}
