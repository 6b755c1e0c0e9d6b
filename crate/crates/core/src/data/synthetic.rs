//! Seeded compositional embeddings: each image is
//! `normalize(A_s·u_state + A_o·u_object + σ·ε)` with fixed Gaussian mixing maps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::dataset::{EmbeddingDataset, Split};
use super::space::CompositionSpace;
use crate::error::{DuplexError, Result};
use crate::kernel::{normalize, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub states: usize,
    pub objects: usize,
    pub dim: usize,
    pub noise: f64,
    pub seen_fraction: f64,
    pub train_per_pair: usize,
    pub val_per_pair: usize,
    pub test_per_pair: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            states: 8,
            objects: 10,
            dim: 32,
            noise: 0.05,
            seen_fraction: 0.7,
            train_per_pair: 50,
            val_per_pair: 10,
            test_per_pair: 10,
            seed: 0,
        }
    }
}

/// Generator internals, exposed so tests can rebuild noiseless embeddings.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    pub state_mix: Matrix,
    pub object_mix: Matrix,
    /// One latent per state, `M × d`.
    pub state_latents: Matrix,
    /// One latent per object, `N × d`.
    pub object_latents: Matrix,
}

impl SyntheticSource {
    /// `A_s·u_m + A_o·u_n` before noise and normalization.
    pub fn signal(&self, state: usize, object: usize) -> Vec<f64> {
        let d = self.state_mix.rows();
        (0..d)
            .map(|i| {
                let a: f64 = self
                    .state_mix
                    .row(i)
                    .iter()
                    .zip(self.state_latents.row(state))
                    .map(|(x, y)| x * y)
                    .sum();
                let b: f64 = self
                    .object_mix
                    .row(i)
                    .iter()
                    .zip(self.object_latents.row(object))
                    .map(|(x, y)| x * y)
                    .sum();
                a + b
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: EmbeddingDataset,
    pub space: CompositionSpace,
    pub source: SyntheticSource,
}

/// Number of seen pairs for a fraction of `total`, robust to float fuzz (0.7·80 = 56).
fn seen_count(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64) - 1e-9).ceil() as usize
}

fn sample_seen<R: Rng>(m: usize, n: usize, k: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut states: Vec<usize> = (0..m).collect();
    let mut objects: Vec<usize> = (0..n).collect();
    states.shuffle(rng);
    objects.shuffle(rng);
    // a diagonal walk over the shuffled vocabularies touches every primitive
    let cover = m.max(n);
    let mut seen: Vec<(usize, usize)> = (0..cover).map(|i| (states[i % m], objects[i % n])).collect();
    let mut rest: Vec<(usize, usize)> = (0..m)
        .flat_map(|a| (0..n).map(move |b| (a, b)))
        .filter(|p| !seen.contains(p))
        .collect();
    rest.shuffle(rng);
    seen.extend(rest.into_iter().take(k - cover));
    seen.sort_unstable();
    seen
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Synthetic> {
    let (m, n, d) = (cfg.states, cfg.objects, cfg.dim);
    if m < 2 || n < 2 {
        return Err(DuplexError::InvalidArgument("need at least 2 states and 2 objects".into()));
    }
    if d < 4 {
        return Err(DuplexError::InvalidArgument("embedding dim must be ≥ 4".into()));
    }
    if !(cfg.seen_fraction > 0.0 && cfg.seen_fraction < 1.0) {
        return Err(DuplexError::InvalidArgument("seen_fraction must lie in (0, 1)".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(DuplexError::InvalidArgument("noise must be finite and ≥ 0".into()));
    }
    if cfg.train_per_pair == 0 {
        return Err(DuplexError::InvalidArgument("train_per_pair must be ≥ 1".into()));
    }
    let total = m * n;
    let k = seen_count(cfg.seen_fraction, total);
    if k < m.max(n) {
        return Err(DuplexError::InvalidArgument(format!(
            "seen_fraction {} gives {k} seen pairs, too few to cover {m} states and {n} objects",
            cfg.seen_fraction
        )));
    }
    if k >= total {
        return Err(DuplexError::InvalidArgument(format!(
            "seen_fraction {} leaves no unseen pairs",
            cfg.seen_fraction
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (d as f64).sqrt();
    let source = SyntheticSource {
        state_mix: Matrix::gaussian(d, d, scale, &mut rng),
        object_mix: Matrix::gaussian(d, d, scale, &mut rng),
        state_latents: Matrix::gaussian(m, d, 1.0, &mut rng),
        object_latents: Matrix::gaussian(n, d, 1.0, &mut rng),
    };
    let seen = sample_seen(m, n, k, &mut rng);
    let unseen: Vec<(usize, usize)> = (0..m)
        .flat_map(|a| (0..n).map(move |b| (a, b)))
        .filter(|p| seen.binary_search(p).is_err())
        .collect();
    let space = CompositionSpace::new(
        (0..m).map(|i| format!("state{i}")).collect(),
        (0..n).map(|i| format!("object{i}")).collect(),
        seen.iter().copied(),
        unseen.iter().copied(),
    )?;

    let mut all: Vec<(usize, usize)> = seen.iter().chain(&unseen).copied().collect();
    all.sort_unstable();
    let plan = [
        (Split::Train, &seen, cfg.train_per_pair),
        (Split::Val, &all, cfg.val_per_pair),
        (Split::Test, &all, cfg.test_per_pair),
    ];
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (split, pairs, per_pair) in plan {
        for &(s, o) in pairs {
            let signal = source.signal(s, o);
            for _ in 0..per_pair {
                let mut v = signal.clone();
                if cfg.noise > 0.0 {
                    for x in v.iter_mut() {
                        *x += cfg.noise * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                rows.push(normalize(&v, "synthetic embedding")?.0);
                labels.push((s, o));
                splits.push(split);
            }
        }
    }
    let dataset = EmbeddingDataset::new(Matrix::from_rows(&rows)?, labels, splits, &space)?;
    Ok(Synthetic { dataset, space, source })
}
