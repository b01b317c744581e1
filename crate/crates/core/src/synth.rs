//! Confounded synthetic data with known preferences.
//!
//! Users and items get standard-normal latent vectors (the true affinity is
//! their inner product) and Dirichlet bias rows over behaviors. Interaction
//! probabilities mix affinity with the biases, so observed behavior
//! frequencies carry the confounder.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::corpus::{BehaviorSchema, InteractionDataset};
use crate::math::{log2, powf, sigmoid};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_behaviors: usize,
    pub d_true: usize,
    /// Expected interactions per user and behavior.
    pub density: f64,
    pub bias_strength: f64,
    /// Target interactions require an auxiliary interaction on the same pair.
    pub cascade: bool,
    pub dirichlet_concentration: f64,
    /// Divides the affinity inside the logistic.
    pub affinity_temperature: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::fixture(0)
    }
}

impl SynthConfig {
    /// The desk-scale configuration used by the deconfounding experiment.
    pub fn fixture(seed: u64) -> Self {
        Self {
            num_users: 300,
            num_items: 300,
            num_behaviors: 3,
            d_true: 8,
            density: 50.0,
            bias_strength: 2.0,
            cascade: true,
            dirichlet_concentration: 1.0,
            affinity_temperature: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items == 0 || self.d_true == 0 || self.num_behaviors < 2
        {
            return Err(Error::InvalidInput(
                "synthetic sizes must be at least 1, with at least 2 behaviors".into(),
            ));
        }
        if !(self.density > 0.0) || !self.density.is_finite() {
            return Err(Error::InvalidInput("density must be positive".into()));
        }
        if !(self.bias_strength >= 0.0) || !self.bias_strength.is_finite() {
            return Err(Error::InvalidInput(
                "bias_strength must be nonnegative".into(),
            ));
        }
        if !(self.dirichlet_concentration > 0.0) || !(self.affinity_temperature > 0.0) {
            return Err(Error::InvalidInput(
                "dirichlet concentration and affinity temperature must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Behavior names `b0 .. b{K-2}` plus `target` last.
    pub fn schema(&self) -> BehaviorSchema {
        let k = self.num_behaviors;
        let names = (0..k)
            .map(|b| {
                if b + 1 == k {
                    "target".into()
                } else {
                    alloc::format!("b{b}")
                }
            })
            .collect();
        BehaviorSchema::new(names, k - 1).expect("generated schema is valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub num_users: usize,
    pub num_items: usize,
    pub num_behaviors: usize,
    /// `M × N` row-major.
    pub affinity: Vec<f64>,
    /// `M × K` row-major.
    pub bias_user: Vec<f64>,
    /// `N × K` row-major.
    pub bias_item: Vec<f64>,
}

impl GroundTruth {
    pub fn new(
        num_users: usize,
        num_items: usize,
        num_behaviors: usize,
        affinity: Vec<f64>,
        bias_user: Vec<f64>,
        bias_item: Vec<f64>,
    ) -> Result<Self> {
        if affinity.len() != num_users * num_items
            || bias_user.len() != num_users * num_behaviors
            || bias_item.len() != num_items * num_behaviors
        {
            return Err(Error::ShapeMismatch(
                "ground truth arrays disagree with declared sizes".into(),
            ));
        }
        if affinity
            .iter()
            .chain(&bias_user)
            .chain(&bias_item)
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite("ground truth".into()));
        }
        Ok(Self {
            num_users,
            num_items,
            num_behaviors,
            affinity,
            bias_user,
            bias_item,
        })
    }

    pub fn affinity_row(&self, u: u32) -> &[f64] {
        let n = self.num_items;
        &self.affinity[u as usize * n..(u as usize + 1) * n]
    }

    pub fn user_bias(&self, u: u32) -> &[f64] {
        let k = self.num_behaviors;
        &self.bias_user[u as usize * k..(u as usize + 1) * k]
    }

    pub fn item_bias(&self, i: u32) -> &[f64] {
        let k = self.num_behaviors;
        &self.bias_item[i as usize * k..(i as usize + 1) * k]
    }
}

fn dirichlet_rows(rng: &mut ChaCha8Rng, rows: usize, k: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    let mut out = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        let start = out.len();
        let mut sum = 0.0;
        for _ in 0..k {
            let g: f64 = gamma.sample(rng);
            sum += g;
            out.push(g);
        }
        if sum > 0.0 {
            out[start..].iter_mut().for_each(|x| *x /= sum);
        } else {
            out[start..].iter_mut().for_each(|x| *x = 1.0 / k as f64);
        }
    }
    out
}

/// Finds `c` with `Σ min(1, c·w) ≈ target` by bisection.
fn calibrate(weights: &[f64], target: f64) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mass = |c: f64| weights.iter().map(|w| (c * w).min(1.0)).sum::<f64>();
    let (mut lo, mut hi) = (0.0, target / total);
    while mass(hi) < target && hi < 1e300 {
        if weights.iter().all(|&w| w == 0.0 || hi * w >= 1.0) {
            return hi;
        }
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Samples a dataset whose last behavior is the target.
pub fn generate_confounded(cfg: &SynthConfig) -> Result<(InteractionDataset, GroundTruth)> {
    cfg.validate()?;
    let (m, n, k, d) = (cfg.num_users, cfg.num_items, cfg.num_behaviors, cfg.d_true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latent_u: Vec<f64> = (0..m * d).map(|_| rng.sample(StandardNormal)).collect();
    let latent_i: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let bias_user = dirichlet_rows(&mut rng, m, k, cfg.dirichlet_concentration);
    let bias_item = dirichlet_rows(&mut rng, n, k, cfg.dirichlet_concentration);
    let mut affinity = vec![0.0; m * n];
    for u in 0..m {
        for i in 0..n {
            affinity[u * n + i] =
                crate::math::dot(&latent_u[u * d..(u + 1) * d], &latent_i[i * d..(i + 1) * d]);
        }
    }
    let logistic: Vec<f64> = affinity
        .iter()
        .map(|a| sigmoid(a / cfg.affinity_temperature))
        .collect();

    let target = k - 1;
    let mut any_aux = vec![false; m * n];
    let mut edges = vec![Vec::new(); k];
    let goal = cfg.density * m as f64;
    // auxiliaries first so the cascade gate is known when the target is drawn
    for b in (0..k)
        .filter(|&b| b != target)
        .chain(core::iter::once(target))
    {
        let gated = cfg.cascade && b == target && k > 1;
        let mut w = vec![0.0; m * n];
        for u in 0..m {
            for i in 0..n {
                if gated && !any_aux[u * n + i] {
                    continue;
                }
                let conf = bias_user[u * k + b] * bias_item[i * k + b];
                w[u * n + i] = logistic[u * n + i] * powf(conf, cfg.bias_strength);
            }
        }
        let c = calibrate(&w, goal);
        for u in 0..m {
            for i in 0..n {
                let p = (c * w[u * n + i]).min(1.0);
                if p > 0.0 && rng.random::<f64>() < p {
                    edges[b].push((u as u32, i as u32));
                    if b != target {
                        any_aux[u * n + i] = true;
                    }
                }
            }
        }
    }
    let ds = InteractionDataset::from_edges(cfg.schema(), m, n, edges)?;
    let gt = GroundTruth::new(m, n, k, affinity, bias_user, bias_item)?;
    Ok((ds, gt))
}

/// Relevant items per user for the true-preference metric.
pub const TRUE_RELEVANT: usize = 10;

/// Indices of the `t` best-scored candidates, ties by ascending id.
fn top_candidates(scores: &[f64], excluded: &[u32], t: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..scores.len() as u32)
        .filter(|c| excluded.binary_search(c).is_err())
        .collect();
    idx.sort_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
    idx.truncate(t);
    idx
}

/// Mean NDCG@`k_eval` of a scorer against the top-`relevant` items by true
/// affinity. Target-behavior train positives are excluded from both the
/// relevance set and the ranking.
pub fn true_preference_metric<F>(
    mut scorer: F,
    gt: &GroundTruth,
    k_eval: usize,
    relevant: usize,
    train: &InteractionDataset,
) -> Result<f64>
where
    F: FnMut(u32, &mut [f64]),
{
    if train.num_users() != gt.num_users || train.num_items() != gt.num_items {
        return Err(Error::ShapeMismatch(
            "ground truth and dataset sizes differ".into(),
        ));
    }
    let t = train.target();
    let mut scores = vec![0.0; gt.num_items];
    let (mut sum, mut users) = (0.0, 0usize);
    for u in 0..gt.num_users as u32 {
        let seen = train.items_of(t, u);
        let rel = top_candidates(gt.affinity_row(u), seen, relevant);
        if rel.is_empty() {
            continue;
        }
        scorer(u, &mut scores);
        let ranked = top_candidates(&scores, seen, k_eval);
        let dcg: f64 = ranked
            .iter()
            .enumerate()
            .filter(|(_, c)| rel.contains(c))
            .map(|(r, _)| 1.0 / log2(r as f64 + 2.0))
            .sum();
        let idcg: f64 = (0..rel.len().min(k_eval))
            .map(|r| 1.0 / log2(r as f64 + 2.0))
            .sum();
        sum += dcg / idcg;
        users += 1;
    }
    if users == 0 {
        return Err(Error::InvalidInput(
            "every user has an empty relevance set".into(),
        ));
    }
    Ok(sum / users as f64)
}
