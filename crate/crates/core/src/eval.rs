//! Full-ranking evaluation, user/item group analyses and the paired t-test.

use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::EmbeddingSet;
use crate::causal::inference_score;
use crate::corpus::{InteractionDataset, SplitDataset};
use crate::math::{exp, ln, ln_gamma, log2, sqrt};
use crate::{Error, Result};

/// Guards the item ratio against items with no auxiliary interactions.
pub const RATIO_EPSILON: f64 = 1e-8;
pub const DEFAULT_TOP_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserRank {
    pub user: u32,
    pub item: u32,
    /// 1-based position of the held-out item among the candidates.
    pub rank: usize,
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RankingResult {
    pub entries: Vec<UserRank>,
}

/// Rank of `held` under the fixed tie rule: strictly higher scores rank
/// first, equal scores are ordered by ascending item id. Items in
/// `excluded` (sorted) are not candidates.
pub fn rank_of(scores: &[f64], held: u32, excluded: &[u32]) -> (usize, usize) {
    let target = scores[held as usize];
    let mut rank = 1;
    let mut candidates = 0;
    for (c, &s) in scores.iter().enumerate() {
        let c = c as u32;
        if excluded.binary_search(&c).is_ok() {
            continue;
        }
        candidates += 1;
        if c == held {
            continue;
        }
        if s > target || (s == target && c < held) {
            rank += 1;
        }
    }
    (rank, candidates)
}

/// Ranks the held-out items of `users` with an arbitrary scorer that fills
/// one score per item.
pub fn rank_users<F>(split: &SplitDataset, users: &[u32], mut scorer: F) -> Vec<UserRank>
where
    F: FnMut(u32, &mut [f64]),
{
    let t = split.train.target();
    let mut scores = vec![0.0; split.train.num_items()];
    users
        .iter()
        .filter_map(|&u| split.test_positives[u as usize].map(|i| (u, i)))
        .map(|(u, item)| {
            scorer(u, &mut scores);
            let (rank, candidates) = rank_of(&scores, item, split.train.items_of(t, u));
            UserRank {
                user: u,
                item,
                rank,
                candidates,
            }
        })
        .collect()
}

pub fn rank_with<F>(split: &SplitDataset, scorer: F) -> Result<RankingResult>
where
    F: FnMut(u32, &mut [f64]),
{
    if split.num_test() == 0 {
        return Err(Error::NoTestPositives);
    }
    let users: Vec<u32> = split.test_pairs().map(|(u, _)| u).collect();
    Ok(RankingResult {
        entries: rank_users(split, &users, scorer),
    })
}

/// Writes `ŷ_ui` for every item into `out`.
pub fn score_items(es: &EmbeddingSet, target: usize, u: u32, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = inference_score(es, target, u, i as u32);
    }
}

/// Ranks every test positive by the inference score.
pub fn rank_all(es: &EmbeddingSet, split: &SplitDataset) -> Result<RankingResult> {
    let t = split.train.target();
    rank_with(split, |u, out| score_items(es, t, u, out))
}

/// Per-entry `(hit, ndcg)` at cutoff `k`.
pub fn entry_metrics(entry: &UserRank, k: usize) -> (f64, f64) {
    if entry.rank <= k {
        (1.0, 1.0 / log2(entry.rank as f64 + 1.0))
    } else {
        (0.0, 0.0)
    }
}

/// `(HR@K, NDCG@K)` averaged over test users.
pub fn hr_ndcg(rr: &RankingResult, k: usize) -> (f64, f64) {
    if rr.entries.is_empty() {
        return (0.0, 0.0);
    }
    let (h, n) = rr
        .entries
        .iter()
        .map(|e| entry_metrics(e, k))
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let m = rr.entries.len() as f64;
    (h / m, n / m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    /// Users split by total interaction count (active vs less active).
    UserActivity,
    /// Items split by target / auxiliary interaction ratio.
    ItemRatio,
}

impl GroupKind {
    pub fn labels(&self) -> [&'static str; 2] {
        match self {
            GroupKind::UserActivity => ["AU", "LAU"],
            GroupKind::ItemRatio => ["high_ratio", "low_ratio"],
        }
    }
}

/// Two-way partition: `in_top[e]` marks the top group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub kind: GroupKind,
    pub top_fraction: f64,
    pub in_top: Vec<bool>,
}

impl GroupSpec {
    pub fn top_size(&self) -> usize {
        self.in_top.iter().filter(|&&t| t).count()
    }
}

fn top_by<K: PartialOrd>(keys: &[K], fraction: f64) -> Vec<bool> {
    let n = keys.len();
    let take = libm::ceil(fraction * n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    // descending key, ascending id on ties
    order.sort_by(|&a, &b| {
        keys[b]
            .partial_cmp(&keys[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut in_top = vec![false; n];
    for &e in order.iter().take(take) {
        in_top[e] = true;
    }
    in_top
}

fn check_fraction(fraction: f64, n: usize, what: &str) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidInput(alloc::format!(
            "group fraction {fraction} outside (0, 1)"
        )));
    }
    if n < 5 {
        return Err(Error::InvalidInput(alloc::format!(
            "group analysis needs at least 5 {what}, got {n}"
        )));
    }
    Ok(())
}

/// Top `⌈fraction · M⌉` users by interaction count across all behaviors.
pub fn group_users(ds: &InteractionDataset, top_fraction: f64) -> Result<GroupSpec> {
    check_fraction(top_fraction, ds.num_users(), "users")?;
    Ok(GroupSpec {
        kind: GroupKind::UserActivity,
        top_fraction,
        in_top: top_by(&ds.user_activity(), top_fraction),
    })
}

/// Target count over `(auxiliary count + ε)` per item.
pub fn item_ratios(ds: &InteractionDataset) -> Vec<f64> {
    let k = ds.num_behaviors();
    let t = ds.target();
    ds.item_behavior_counts()
        .chunks(k)
        .map(|row| {
            let aux: usize = row
                .iter()
                .enumerate()
                .filter(|(b, _)| *b != t)
                .map(|(_, c)| c)
                .sum();
            row[t] as f64 / (aux as f64 + RATIO_EPSILON)
        })
        .collect()
}

/// Top `⌈fraction · N⌉` items by [`item_ratios`].
pub fn group_items(ds: &InteractionDataset, top_fraction: f64) -> Result<GroupSpec> {
    check_fraction(top_fraction, ds.num_items(), "items")?;
    Ok(GroupSpec {
        kind: GroupKind::ItemRatio,
        top_fraction,
        in_top: top_by(&item_ratios(ds), top_fraction),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetric {
    pub label: &'static str,
    /// Test entries that fall in the group.
    pub members: usize,
    /// Recall@K over those entries; `None` when the group has none.
    pub value: Option<f64>,
}

/// Recall@K per group. User groups select test users; item groups select
/// test entries whose held-out item belongs to the group. With one held-out
/// item per user, recall equals the hit rate.
pub fn group_metrics(rr: &RankingResult, spec: &GroupSpec, k: usize) -> Vec<GroupMetric> {
    let member = |e: &UserRank| -> bool {
        match spec.kind {
            GroupKind::UserActivity => spec.in_top[e.user as usize],
            GroupKind::ItemRatio => spec.in_top[e.item as usize],
        }
    };
    let labels = spec.kind.labels();
    [true, false]
        .iter()
        .zip(labels)
        .map(|(&top, label)| {
            let (hits, members) = rr
                .entries
                .iter()
                .filter(|e| member(e) == top)
                .fold((0.0, 0usize), |(h, n), e| {
                    (h + entry_metrics(e, k).0, n + 1)
                });
            GroupMetric {
                label,
                members,
                value: (members > 0).then(|| hits / members as f64),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p_value: f64,
    pub dof: usize,
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 500;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = exp(ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * ln(x) + b * ln(1.0 - x));
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// `P(|T| ≥ |t|)` for Student's t with `dof` degrees of freedom.
pub fn student_t_two_sided(t: f64, dof: f64) -> f64 {
    regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))
}

/// Paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "paired samples of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidInput(
            "paired t-test needs at least 2 pairs".into(),
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let t = mean / (sqrt(var) / sqrt(n as f64));
    Ok(TTest {
        t,
        p_value: student_t_two_sided(t, (n - 1) as f64),
        dof: n - 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{split_leave_one_out, BehaviorSchema};
    use proptest::prelude::*;

    fn rr(ranks: &[usize]) -> RankingResult {
        RankingResult {
            entries: ranks
                .iter()
                .enumerate()
                .map(|(u, &rank)| UserRank {
                    user: u as u32,
                    item: 0,
                    rank,
                    candidates: 100,
                })
                .collect(),
        }
    }

    #[test]
    fn hr_ndcg_examples() {
        assert_eq!(hr_ndcg(&rr(&[1]), 10), (1.0, 1.0));
        assert_eq!(hr_ndcg(&rr(&[11]), 10), (0.0, 0.0));
        let (hr, ndcg) = hr_ndcg(&rr(&[1, 3, 20]), 10);
        assert!((hr - 2.0 / 3.0).abs() < 1e-15);
        assert!((ndcg - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rank_tie_rule() {
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 0, &[]), (1, 3));
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 2, &[]), (3, 3));
        assert_eq!(rank_of(&[0.1, 5.0, 1.0], 1, &[]), (1, 3));
        // excluded items are not candidates even if they score higher
        assert_eq!(rank_of(&[9.0, 1.0, 2.0], 1, &[0]), (2, 2));
    }

    fn tiny_split() -> SplitDataset {
        let edges = vec![
            vec![(0, 1), (1, 2)],
            (0..5u32)
                .flat_map(|u| [(u, u % 7), (u, (u + 3) % 7)])
                .collect(),
        ];
        let ds = InteractionDataset::from_edges(
            BehaviorSchema::with_target(&["click", "buy"], "buy").unwrap(),
            5,
            7,
            edges,
        )
        .unwrap();
        split_leave_one_out(&ds, 1)
    }

    #[test]
    fn rank_all_requires_test_positives() {
        let mut s = tiny_split();
        s.test_positives.iter_mut().for_each(|t| *t = None);
        let es = EmbeddingSet::zeros(5, 7, 2, 2);
        assert_eq!(rank_all(&es, &s).unwrap_err(), Error::NoTestPositives);
    }

    #[test]
    fn constant_scores_rank_by_item_id() {
        let s = tiny_split();
        let es = EmbeddingSet::zeros(5, 7, 2, 2);
        let r = rank_all(&es, &s).unwrap();
        for e in &r.entries {
            let train = s.train.items_of(1, e.user);
            let smaller = (0..e.item).filter(|c| !train.contains(c)).count();
            assert_eq!(e.rank, smaller + 1);
            assert_eq!(e.candidates, 7 - train.len());
        }
    }

    #[test]
    fn monotone_transforms_preserve_ranks() {
        let s = tiny_split();
        let score = |u: u32, i: usize| ((u as f64 + 1.0) * (i as f64 * 1.7).sin()).tanh();
        let base = rank_with(&s, |u, out| {
            out.iter_mut()
                .enumerate()
                .for_each(|(i, o)| *o = score(u, i))
        })
        .unwrap();
        let ex = rank_with(&s, |u, out| {
            out.iter_mut()
                .enumerate()
                .for_each(|(i, o)| *o = score(u, i).exp())
        })
        .unwrap();
        let af = rank_with(&s, |u, out| {
            out.iter_mut()
                .enumerate()
                .for_each(|(i, o)| *o = 3.0 * score(u, i) + 2.0)
        })
        .unwrap();
        assert_eq!(base, ex);
        assert_eq!(base, af);
    }

    fn group_fixture(counts: &[usize]) -> InteractionDataset {
        let m = counts.len();
        let edges: Vec<(u32, u32)> = counts
            .iter()
            .enumerate()
            .flat_map(|(u, &c)| (0..c as u32).map(move |i| (u as u32, i)))
            .collect();
        InteractionDataset::from_edges(
            BehaviorSchema::with_target(&["click", "buy"], "buy").unwrap(),
            m,
            20,
            vec![edges, vec![]],
        )
        .unwrap()
    }

    #[test]
    fn user_groups() {
        let g = group_users(&group_fixture(&[3, 9, 1, 4, 2]), 0.2).unwrap();
        assert_eq!(g.in_top, vec![false, true, false, false, false]);
        let g = group_users(&group_fixture(&[2; 10]), 0.2).unwrap();
        assert_eq!(
            g.in_top,
            [true, true]
                .iter()
                .chain(&[false; 8])
                .copied()
                .collect::<Vec<_>>()
        );
        let counts: Vec<usize> = (0..100).map(|u| (u * 37) % 11).collect();
        assert_eq!(
            group_users(&group_fixture(&counts), 0.2)
                .unwrap()
                .top_size(),
            20
        );
        assert!(group_users(&group_fixture(&[1, 2, 3]), 0.2).is_err());
    }

    #[test]
    fn item_groups() {
        // item 0: target only; item 1: aux only; items 2..: both
        let ds = InteractionDataset::from_edges(
            BehaviorSchema::with_target(&["click", "buy"], "buy").unwrap(),
            2,
            6,
            vec![
                vec![(0, 1), (0, 2), (0, 3), (1, 4), (1, 5), (0, 5)],
                vec![(0, 0), (1, 2), (1, 3), (0, 4), (1, 5)],
            ],
        )
        .unwrap();
        let r = item_ratios(&ds);
        assert!(r[0] > 1e7);
        assert_eq!(r[1], 0.0);
        let g = group_items(&ds, 0.2).unwrap();
        assert_eq!(g.top_size(), 2);
        assert!(g.in_top[0]);
    }

    #[test]
    fn group_metric_absent_and_degenerate() {
        let r = rr(&[1, 30, 5]);
        let all_top = GroupSpec {
            kind: GroupKind::UserActivity,
            top_fraction: 0.5,
            in_top: vec![true; 3],
        };
        let m = group_metrics(&r, &all_top, 10);
        assert_eq!(m[0].value, Some(hr_ndcg(&r, 10).0));
        assert_eq!(m[1].value, None);
        assert_eq!(m[1].members, 0);
    }

    #[test]
    fn t_test_symmetric_null() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.5, 1.5, 3.5, 3.5];
        let r = paired_t_test(&a, &b).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn t_test_matches_reference() {
        // reference from scipy.stats.ttest_rel
        let a = [0.5, 0.7, 0.2, 0.9, 0.4];
        let d = [0.1, 0.2, -0.05, 0.15, 0.1];
        let b: Vec<f64> = a.iter().zip(&d).map(|(x, y)| x - y).collect();
        let r = paired_t_test(&a, &b).unwrap();
        assert_eq!(r.dof, 4);
        assert!((r.t - 2.390457218668787).abs() < 1e-9, "{}", r.t);
        assert!(
            (r.p_value - 0.07513045462522976).abs() < 1e-9,
            "{}",
            r.p_value
        );
    }

    #[test]
    fn t_test_zero_variance_errors() {
        assert_eq!(
            paired_t_test(&[2.0, 2.0, 2.0, 2.0], &[1.0, 1.0, 1.0, 1.0]).unwrap_err(),
            Error::ZeroVariance
        );
    }

    #[test]
    fn incomplete_beta_closed_forms() {
        // I_x(1, 1) = x; I_x(a, 1) = x^a
        for &x in &[0.1, 0.5, 0.93] {
            assert!((regularized_incomplete_beta(1.0, 1.0, x) - x).abs() < 1e-14);
            assert!((regularized_incomplete_beta(3.0, 1.0, x) - x * x * x).abs() < 1e-14);
        }
        // t with 1 dof is Cauchy: P(|T| ≥ 1) = 0.5
        assert!((student_t_two_sided(1.0, 1.0) - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ndcg_bounded_by_hr_and_monotone(ranks in proptest::collection::vec(1usize..60, 1..30), k in 1usize..50) {
            let r = rr(&ranks);
            let (h, n) = hr_ndcg(&r, k);
            prop_assert!(n <= h + 1e-15);
            let (h2, n2) = hr_ndcg(&r, k + 1);
            prop_assert!(h2 >= h && n2 >= n);
        }
    }
}
