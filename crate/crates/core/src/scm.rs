//! Finite structural causal model over the bias/feature/mediator/outcome
//! graph, used as a brute-force witness of the backdoor adjustment.
//!
//! Edges: `B_u → U`, `B_i → I`, `{B_u, B_i, U, I} → M`, `{M, U, I} → Y`.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Number of values each discrete variable takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cardinalities {
    pub bias_user: usize,
    pub bias_item: usize,
    pub user: usize,
    pub item: usize,
    pub mediator: usize,
    pub outcome: usize,
}

impl Cardinalities {
    pub const BINARY: Self = Self::uniform(2);

    pub const fn uniform(n: usize) -> Self {
        Self {
            bias_user: n,
            bias_item: n,
            user: n,
            item: n,
            mediator: n,
            outcome: n,
        }
    }

    pub fn as_array(&self) -> [usize; 6] {
        [
            self.bias_user,
            self.bias_item,
            self.user,
            self.item,
            self.mediator,
            self.outcome,
        ]
    }

    fn validate(&self) -> Result<()> {
        match self.as_array().into_iter().find(|&c| c < 2) {
            Some(c) => Err(Error::InvalidCardinality(c)),
            None => Ok(()),
        }
    }
}

/// Conditional probability tables, each flattened row-major with the
/// conditioned-on variable last:
///
/// * `p_bu[bu]`, `p_bi[bi]`
/// * `p_u_given_bu[bu][u]`, `p_i_given_bi[bi][i]`
/// * `p_m[bi][bu][i][u][m]`
/// * `p_y[m][i][u][y]`
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteScm {
    pub card: Cardinalities,
    pub p_bu: Vec<f64>,
    pub p_bi: Vec<f64>,
    pub p_u_given_bu: Vec<f64>,
    pub p_i_given_bi: Vec<f64>,
    pub p_m: Vec<f64>,
    pub p_y: Vec<f64>,
}

fn random_slices(rng: &mut ChaCha8Rng, slices: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(slices * width);
    for _ in 0..slices {
        let start = out.len();
        for _ in 0..width {
            // bounded away from zero so every slice is strictly positive
            out.push(0.05 + rng.random::<f64>());
        }
        let total: f64 = out[start..].iter().sum();
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    out
}

/// A random SCM with strictly positive, normalized tables.
pub fn build_random_scm(card: Cardinalities, seed: u64) -> Result<DiscreteScm> {
    card.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = card;
    Ok(DiscreteScm {
        card,
        p_bu: random_slices(&mut rng, 1, c.bias_user),
        p_bi: random_slices(&mut rng, 1, c.bias_item),
        p_u_given_bu: random_slices(&mut rng, c.bias_user, c.user),
        p_i_given_bi: random_slices(&mut rng, c.bias_item, c.item),
        p_m: random_slices(
            &mut rng,
            c.bias_item * c.bias_user * c.item * c.user,
            c.mediator,
        ),
        p_y: random_slices(&mut rng, c.mediator * c.item * c.user, c.outcome),
    })
}

impl DiscreteScm {
    #[inline]
    pub fn p_m_at(&self, bi: usize, bu: usize, i: usize, u: usize, m: usize) -> f64 {
        let c = &self.card;
        self.p_m[(((bi * c.bias_user + bu) * c.item + i) * c.user + u) * c.mediator + m]
    }

    #[inline]
    pub fn p_y_at(&self, m: usize, i: usize, u: usize, y: usize) -> f64 {
        let c = &self.card;
        self.p_y[((m * c.item + i) * c.user + u) * c.outcome + y]
    }

    #[inline]
    fn p_u_at(&self, bu: usize, u: usize) -> f64 {
        self.p_u_given_bu[bu * self.card.user + u]
    }

    #[inline]
    fn p_i_at(&self, bi: usize, i: usize) -> f64 {
        self.p_i_given_bi[bi * self.card.item + i]
    }

    /// Largest deviation of any conditional slice from summing to one, and
    /// whether every entry is nonnegative.
    pub fn normalization_error(&self) -> (f64, bool) {
        let c = &self.card;
        let tables: [(&[f64], usize); 6] = [
            (&self.p_bu, c.bias_user),
            (&self.p_bi, c.bias_item),
            (&self.p_u_given_bu, c.user),
            (&self.p_i_given_bi, c.item),
            (&self.p_m, c.mediator),
            (&self.p_y, c.outcome),
        ];
        let mut worst = 0.0f64;
        let mut nonneg = true;
        for (t, w) in tables {
            for slice in t.chunks(w) {
                worst = worst.max((slice.iter().sum::<f64>() - 1.0).abs());
                nonneg &= slice.iter().all(|&p| p >= 0.0);
            }
        }
        (worst, nonneg)
    }

    fn check_treatment(&self, u: usize, i: usize) -> Result<()> {
        if u >= self.card.user {
            return Err(Error::OutOfRange {
                what: "u",
                value: u,
                bound: self.card.user,
            });
        }
        if i >= self.card.item {
            return Err(Error::OutOfRange {
                what: "i",
                value: i,
                bound: self.card.item,
            });
        }
        Ok(())
    }

    /// Enumerates the joint of a model whose `U` and `I` mechanisms are
    /// supplied by `p_u(bu, u)` and `p_i(bi, i)`, and returns `P(Y | U=u, I=i)`.
    fn conditional_by_enumeration(
        &self,
        u_obs: usize,
        i_obs: usize,
        p_u: impl Fn(usize, usize) -> f64,
        p_i: impl Fn(usize, usize) -> f64,
    ) -> Vec<f64> {
        let c = &self.card;
        let mut joint_y = vec![0.0; c.outcome];
        let mut evidence = 0.0;
        for bu in 0..c.bias_user {
            for bi in 0..c.bias_item {
                for u in 0..c.user {
                    for i in 0..c.item {
                        if u != u_obs || i != i_obs {
                            continue;
                        }
                        let prefix = self.p_bu[bu] * self.p_bi[bi] * p_u(bu, u) * p_i(bi, i);
                        for m in 0..c.mediator {
                            let pm = prefix * self.p_m_at(bi, bu, i, u, m);
                            for (y, acc) in joint_y.iter_mut().enumerate() {
                                let p = pm * self.p_y_at(m, i, u, y);
                                *acc += p;
                                evidence += p;
                            }
                        }
                    }
                }
            }
        }
        joint_y.iter().map(|p| p / evidence).collect()
    }

    /// `P(Y | do(U=u), do(I=i))` from the mutilated model: the `B_u → U` and
    /// `B_i → I` mechanisms are replaced by point masses at `u` and `i`, and
    /// the full joint is enumerated.
    pub fn interventional_distribution(&self, u: usize, i: usize) -> Result<Vec<f64>> {
        self.check_treatment(u, i)?;
        let point_u = |_bu: usize, v: usize| if v == u { 1.0 } else { 0.0 };
        let point_i = |_bi: usize, v: usize| if v == i { 1.0 } else { 0.0 };
        Ok(self.conditional_by_enumeration(u, i, point_u, point_i))
    }

    /// Observational `P(Y | U=u, I=i)` by enumeration of the unmodified joint.
    pub fn observational_conditional(&self, u: usize, i: usize) -> Result<Vec<f64>> {
        self.check_treatment(u, i)?;
        Ok(self.conditional_by_enumeration(
            u,
            i,
            |bu, v| self.p_u_at(bu, v),
            |bi, v| self.p_i_at(bi, v),
        ))
    }

    /// Backdoor adjustment using only observational tables:
    /// `Σ_{B_i} P(B_i) Σ_{B_u} P(B_u) Σ_m P(Y | m, I, U) P(m | B_i, B_u, I, U)`.
    pub fn backdoor_estimate(&self, u: usize, i: usize) -> Result<Vec<f64>> {
        self.check_treatment(u, i)?;
        let c = &self.card;
        let mut out = vec![0.0; c.outcome];
        for bi in 0..c.bias_item {
            for bu in 0..c.bias_user {
                let w = self.p_bi[bi] * self.p_bu[bu];
                for m in 0..c.mediator {
                    let pm = w * self.p_m_at(bi, bu, i, u, m);
                    for (y, o) in out.iter_mut().enumerate() {
                        *o += pm * self.p_y_at(m, i, u, y);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Max over all `(u, i, y)` of `|backdoor − interventional|`.
    pub fn max_backdoor_deviation(&self) -> f64 {
        let mut worst = 0.0f64;
        for u in 0..self.card.user {
            for i in 0..self.card.item {
                let a = self.backdoor_estimate(u, i).expect("in range");
                let b = self.interventional_distribution(u, i).expect("in range");
                for (x, y) in a.iter().zip(&b) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        worst
    }
}

/// Result of checking the backdoor identity over many random models.
#[derive(Debug, Clone, PartialEq)]
pub struct BackdoorReport {
    pub trials: usize,
    pub max_deviation: f64,
    pub threshold: f64,
}

impl BackdoorReport {
    pub fn passed(&self) -> bool {
        self.max_deviation < self.threshold
    }
}

/// Builds SCMs with seeds `seed, seed+1, ...` and records the worst
/// deviation between the adjustment formula and the interventional truth.
pub fn verify_backdoor(
    card: Cardinalities,
    trials: usize,
    seed: u64,
    threshold: f64,
) -> Result<BackdoorReport> {
    let mut max_deviation = 0.0f64;
    for t in 0..trials as u64 {
        let scm = build_random_scm(card, seed + t)?;
        max_deviation = max_deviation.max(scm.max_backdoor_deviation());
    }
    Ok(BackdoorReport {
        trials,
        max_deviation,
        threshold,
    })
}
