//! Test-set error metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SparseTriplets;
use crate::error::{Error, Result};
use crate::model::{predict, ContextId, HyperParams, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

impl EvalResult {
    /// RMSE and MAE of `(prediction, target)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let (mut sq, mut abs, mut n) = (0.0, 0.0, 0usize);
        for (pred, target) in pairs {
            let e = pred - target;
            sq += e * e;
            abs += e.abs();
            n += 1;
        }
        if n == 0 {
            return Err(Error::Empty("evaluation set"));
        }
        Ok(EvalResult { rmse: (sq / n as f64).sqrt(), mae: abs / n as f64, n })
    }

    /// Arithmetic mean of several results; `n` is summed.
    pub fn mean(results: &[EvalResult]) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::Empty("results to average"));
        }
        let k = results.len() as f64;
        Ok(EvalResult {
            rmse: results.iter().map(|r| r.rmse).sum::<f64>() / k,
            mae: results.iter().map(|r| r.mae).sum::<f64>() / k,
            n: results.iter().map(|r| r.n).sum(),
        })
    }
}

/// Scores every entry of `test` in the rating context. When `clamp` is set,
/// predictions are clipped into that range first.
pub fn evaluate(
    p: &ModelParams,
    h: &HyperParams,
    test: &SparseTriplets,
    clamp: Option<(f64, f64)>,
) -> Result<EvalResult> {
    let preds = test
        .entries()
        .par_iter()
        .map(|e| {
            let (pred, _) = predict(p, h, ContextId::RatingX, e.row, e.col)?;
            Ok((clamp.map_or(pred, |(lo, hi)| pred.clamp(lo, hi)), e.value))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_pairs(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictor() {
        let r = EvalResult::from_pairs([(1.0, 1.0), (4.0, 4.0)]).unwrap();
        assert_eq!((r.rmse, r.mae, r.n), (0.0, 0.0, 2));
    }

    #[test]
    fn constant_predictor_at_midpoint() {
        let r = EvalResult::from_pairs([(3.0, 1.0), (3.0, 5.0)]).unwrap();
        assert_eq!((r.rmse, r.mae), (2.0, 2.0));
        let off = EvalResult::from_pairs([(2.5, 1.0), (2.5, 5.0)]).unwrap();
        assert!(off.rmse > r.rmse);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(EvalResult::from_pairs(std::iter::empty()).is_err());
        assert!(EvalResult::mean(&[]).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariant(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = EvalResult::from_pairs(pairs).unwrap();
            let b = EvalResult::from_pairs(shuffled).unwrap();
            prop_assert!((a.rmse - b.rmse).abs() < 1e-12);
            prop_assert!((a.mae - b.mae).abs() < 1e-12);
        }

        #[test]
        fn equal_magnitudes_give_equal_rmse_and_mae(m in 0.0f64..3.0, signs in prop::collection::vec(any::<bool>(), 1..30)) {
            let pairs = signs.iter().map(|&s| (if s { m } else { -m }, 0.0));
            let r = EvalResult::from_pairs(pairs).unwrap();
            prop_assert!((r.rmse - r.mae).abs() < 1e-12);
            prop_assert!(r.rmse >= 0.0 && r.mae >= 0.0);
        }
    }
}
