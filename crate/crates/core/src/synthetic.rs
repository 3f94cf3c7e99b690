//! Planted-structure matrices for recovery and ablation experiments.
//!
//! Every generator returns fully observed matrices; pick the observed part
//! with [`crate::data::split`] or [`observe`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::{split, Entry, SparseTriplets, SplitSpec};
use crate::error::Result;

fn dense(rows: usize, cols: usize, mut value: impl FnMut(usize, usize) -> f64) -> SparseTriplets {
    let entries = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(row, col)| Entry { row, col, value: value(row, col) })
        .collect();
    SparseTriplets::new(rows, cols, entries).expect("dense grid is valid")
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect()).collect()
}

/// Keeps a uniformly drawn `frac` of the entries (and returns the rest).
pub fn observe(full: &SparseTriplets, frac: f64, seed: u64) -> Result<(SparseTriplets, SparseTriplets)> {
    let s = split(full, &SplitSpec { train_frac: frac, val_frac_of_train: 0.0, seed })?;
    Ok((s.train, s.test))
}

/// `X = u vᵀ` with factors drawn from `[0.5, 1.5)`.
pub fn rank_one(rows: usize, cols: usize, seed: u64) -> SparseTriplets {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = uniform_vec(&mut rng, rows, 0.5, 1.5);
    let v = uniform_vec(&mut rng, cols, 0.5, 1.5);
    dense(rows, cols, |r, c| u[r] * v[c])
}

/// `X = u vᵀ + b_row + b_col` with biases drawn from `[-1, 1)`.
pub fn biased_rank_one(rows: usize, cols: usize, seed: u64) -> SparseTriplets {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = uniform_vec(&mut rng, rows, 0.5, 1.5);
    let v = uniform_vec(&mut rng, cols, 0.5, 1.5);
    let br = uniform_vec(&mut rng, rows, -1.0, 1.0);
    let bc = uniform_vec(&mut rng, cols, -1.0, 1.0);
    dense(rows, cols, |r, c| u[r] * v[c] + br[r] + bc[c])
}

/// Shapes of a multi-context planted model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedSpec {
    pub users: usize,
    pub items: usize,
    pub item_aux: usize,
    pub user_aux: usize,
    /// Dimension of the shared factors.
    pub dim: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

/// Fully observed matrices of a planted model.
#[derive(Debug, Clone)]
pub struct PlantedMatrices {
    pub ratings: SparseTriplets,
    pub item_aux: SparseTriplets,
    pub user_aux: SparseTriplets,
}

/// Shared factors seen through a different random projection per context:
/// each entry is `offset + Σ_k tanh((M a)_k (M b)_k)` with the context's
/// own `M`. A single, unadapted embedding cannot serve two contexts whose
/// projections disagree.
pub fn rotated_contexts(spec: &PlantedSpec) -> PlantedMatrices {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let users = gaussian_rows(&mut rng, spec.users, spec.dim);
    let items = gaussian_rows(&mut rng, spec.items, spec.dim);
    let item_aux = gaussian_rows(&mut rng, spec.item_aux, spec.dim);
    let user_aux = gaussian_rows(&mut rng, spec.user_aux, spec.dim);
    let scale = 1.0 / (spec.dim as f64).sqrt();
    let projections: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|_| {
            gaussian_rows(&mut rng, spec.dim, spec.dim)
                .into_iter()
                .map(|r| r.iter().map(|x| x * scale).collect())
                .collect()
        })
        .collect();
    let project = |m: &[Vec<f64>], a: &[f64]| -> Vec<f64> {
        m.iter().map(|row| row.iter().zip(a).map(|(x, y)| x * y).sum()).collect()
    };
    let score = |m: &[Vec<f64>], a: &[f64], b: &[f64]| -> f64 {
        let (pa, pb) = (project(m, a), project(m, b));
        pa.iter().zip(&pb).map(|(x, y)| (x * y).tanh()).sum()
    };
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let mut with_noise = |v: f64| if spec.noise > 0.0 { v + noise.sample(&mut noise_rng) } else { v };
    let ratings = dense(spec.users, spec.items, |r, c| with_noise(3.0 + score(&projections[0], &users[r], &items[c])));
    let item_aux = dense(spec.items, spec.item_aux, |r, c| with_noise(score(&projections[1], &items[r], &item_aux[c])));
    let user_aux = dense(spec.users, spec.user_aux, |r, c| with_noise(score(&projections[2], &users[r], &user_aux[c])));
    PlantedMatrices { ratings, item_aux, user_aux }
}
