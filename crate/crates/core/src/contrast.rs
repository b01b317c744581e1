//! Bias-aware contrastive alignment of behavior views.
//!
//! The same user (or item) seen through two behaviors forms a positive pair;
//! other entities' embeddings in the downstream view are the negatives.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::backbone::EmbeddingSet;
use crate::corpus::BiasTable;
use crate::math::{axpy, dot, exp, ln, sqrt};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TemperatureRule {
    /// `τ0 (1 − α b)`
    BiasAware {
        tau0: f64,
        alpha: f64,
    },
    Fixed {
        tau: f64,
    },
    /// One trainable scalar, clamped to `[min, max]`.
    Learnable {
        init: f64,
        min: f64,
        max: f64,
    },
    /// One uniform draw per batch.
    Random {
        lo: f64,
        hi: f64,
    },
    /// `τ0 (1 + α b)`
    LinearAlt {
        tau0: f64,
        alpha: f64,
    },
    /// `τ0 (1 − α / b)`, floored at `tau_min`.
    InverseAlt {
        tau0: f64,
        alpha: f64,
        tau_min: f64,
    },
}

impl Default for TemperatureRule {
    fn default() -> Self {
        TemperatureRule::BiasAware {
            tau0: 0.2,
            alpha: 0.5,
        }
    }
}

impl TemperatureRule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            TemperatureRule::BiasAware { tau0, alpha } => tau0 > 0.0 && (0.0..1.0).contains(&alpha),
            TemperatureRule::Fixed { tau } => tau > 0.0,
            TemperatureRule::Learnable { init, min, max } => {
                min > 0.0 && min <= max && init.is_finite()
            }
            TemperatureRule::Random { lo, hi } => lo > 0.0 && lo <= hi,
            TemperatureRule::LinearAlt { tau0, alpha } => tau0 > 0.0 && alpha >= 0.0,
            TemperatureRule::InverseAlt {
                tau0,
                alpha,
                tau_min,
            } => tau0 > 0.0 && alpha > 0.0 && tau_min > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(alloc::format!(
                "temperature rule {self:?} can produce non-positive temperatures"
            )))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TemperatureRule::BiasAware { .. } => "bias_aware",
            TemperatureRule::Fixed { .. } => "fixed",
            TemperatureRule::Learnable { .. } => "learnable",
            TemperatureRule::Random { .. } => "random",
            TemperatureRule::LinearAlt { .. } => "linear",
            TemperatureRule::InverseAlt { .. } => "inverse",
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, TemperatureRule::Learnable { .. })
    }

    /// The per-batch scalar consumed by [`temperature`]: the current raw
    /// parameter for `Learnable`, a fresh uniform draw for `Random`, unused
    /// (0) otherwise.
    pub fn batch_value<R: Rng + ?Sized>(&self, rng: &mut R, learnable_raw: f64) -> f64 {
        match *self {
            TemperatureRule::Learnable { .. } => learnable_raw,
            TemperatureRule::Random { lo, hi } => {
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            }
            _ => 0.0,
        }
    }
}

/// Temperature for an anchor whose downstream-view bias is `b`.
pub fn temperature(rule: &TemperatureRule, b: f64, batch_value: f64) -> f64 {
    match *rule {
        TemperatureRule::BiasAware { tau0, alpha } => tau0 * (1.0 - alpha * b),
        TemperatureRule::Fixed { tau } => tau,
        TemperatureRule::Learnable { min, max, .. } => batch_value.clamp(min, max),
        TemperatureRule::Random { .. } => batch_value,
        TemperatureRule::LinearAlt { tau0, alpha } => tau0 * (1.0 + alpha * b),
        TemperatureRule::InverseAlt {
            tau0,
            alpha,
            tau_min,
        } => (tau0 * (1.0 - alpha / b.max(alpha))).max(tau_min),
    }
}

/// `∂τ / ∂batch_value`; nonzero only for an unclamped learnable temperature.
pub fn temperature_grad(rule: &TemperatureRule, batch_value: f64) -> f64 {
    match *rule {
        TemperatureRule::Learnable { min, max, .. } if batch_value > min && batch_value < max => {
            1.0
        }
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InfoNceOutput {
    pub loss: f64,
    /// Vectors with zero norm encountered (their similarities count as 0).
    pub zero_norm: usize,
}

/// Gradients of the mean InfoNCE loss.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceGrad {
    pub anchors: Vec<Vec<f64>>,
    pub candidates: Vec<Vec<f64>>,
    pub temps: Vec<f64>,
}

/// Row-normalized copy of `rows` (flat, `rows.len() × d`) and the norms.
fn unit_rows(rows: &[&[f64]], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut flat = vec![0.0; rows.len() * d];
    let mut norms = Vec::with_capacity(rows.len());
    for (dst, v) in flat.chunks_exact_mut(d).zip(rows) {
        let n = sqrt(dot(v, v));
        if n > 0.0 {
            dst.iter_mut().zip(v.iter()).for_each(|(o, x)| *o = x / n);
        }
        norms.push(n);
    }
    (flat, norms)
}

/// Mean over anchors of `−log(exp(s_ap/τ_a) / Σ_c exp(s_ac/τ_a))` with cosine
/// similarity `s`, where `positive[a]` indexes the anchor's positive among
/// `candidates`.
pub fn infonce_general(
    anchors: &[&[f64]],
    candidates: &[&[f64]],
    positive: &[usize],
    temps: &[f64],
    want_grad: bool,
) -> Result<(InfoNceOutput, Option<InfoNceGrad>)> {
    let n = anchors.len();
    if n == 0 || positive.len() != n || temps.len() != n {
        return Err(Error::ShapeMismatch("infonce batch".into()));
    }
    let d = anchors[0].len();
    if d == 0 || anchors.iter().chain(candidates).any(|v| v.len() != d) {
        return Err(Error::ShapeMismatch("infonce vector dimension".into()));
    }
    if positive.iter().any(|&p| p >= candidates.len()) {
        return Err(Error::ShapeMismatch("positive index".into()));
    }
    if temps.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidInput("temperatures must be positive".into()));
    }
    let m = candidates.len();
    let (a_unit, a_norm) = unit_rows(anchors, d);
    let (c_unit, c_norm) = unit_rows(candidates, d);
    let zero_norm = a_norm.iter().chain(&c_norm).filter(|&&x| x == 0.0).count();

    // gradients w.r.t. the unit vectors; mapped back through the norms last
    let mut g_a = if want_grad {
        vec![0.0; n * d]
    } else {
        Vec::new()
    };
    let mut g_c = if want_grad {
        vec![0.0; m * d]
    } else {
        Vec::new()
    };
    let mut g_t = if want_grad { vec![0.0; n] } else { Vec::new() };
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut sims = vec![0.0; m];
    let mut probs = vec![0.0; m];
    for a in 0..n {
        let tau = temps[a];
        let inv_tau = 1.0 / tau;
        let au = &a_unit[a * d..(a + 1) * d];
        for (s, cu) in sims.iter_mut().zip(c_unit.chunks_exact(d)) {
            *s = dot(au, cu);
        }
        let max = sims.iter().fold(f64::NEG_INFINITY, |acc, &s| acc.max(s)) * inv_tau;
        let mut z = 0.0;
        for (p, &s) in probs.iter_mut().zip(&sims) {
            *p = exp(s * inv_tau - max);
            z += *p;
        }
        let inv_z = 1.0 / z;
        let pos = positive[a];
        total += -(sims[pos] * inv_tau) + max + ln(z);
        if !want_grad {
            continue;
        }
        probs.iter_mut().for_each(|p| *p *= inv_z);
        g_t[a] = inv_n * (sims[pos] - dot(&probs, &sims)) * inv_tau * inv_tau;
        // dℓ/ds_c = (p_c − [c = pos]) / τ
        let ga = &mut g_a[a * d..(a + 1) * d];
        for (c, (cu, gc)) in c_unit
            .chunks_exact(d)
            .zip(g_c.chunks_exact_mut(d))
            .enumerate()
        {
            let ds = inv_n * inv_tau * (probs[c] - if c == pos { 1.0 } else { 0.0 });
            axpy(ga, ds, cu);
            axpy(gc, ds, au);
        }
    }
    let grad = want_grad.then(|| {
        let back = |g: &mut [f64], units: &[f64], norms: &[f64]| -> Vec<Vec<f64>> {
            g.chunks_exact_mut(d)
                .zip(units.chunks_exact(d))
                .zip(norms)
                .map(|((gv, u), &nrm)| {
                    if nrm > 0.0 {
                        project_onto_sphere(gv, u, nrm);
                        gv.to_vec()
                    } else {
                        vec![0.0; d]
                    }
                })
                .collect()
        };
        InfoNceGrad {
            anchors: back(&mut g_a, &a_unit, &a_norm),
            candidates: back(&mut g_c, &c_unit, &c_norm),
            temps: g_t,
        }
    });
    Ok((
        InfoNceOutput {
            loss: total * inv_n,
            zero_norm,
        },
        grad,
    ))
}

/// Turns a gradient w.r.t. `x/‖x‖` into one w.r.t. `x`, given the unit
/// vector and the norm.
fn project_onto_sphere(g: &mut [f64], unit: &[f64], norm: f64) {
    let proj = dot(g, unit);
    for (x, y) in g.iter_mut().zip(unit) {
        *x = (*x - proj * y) / norm;
    }
}

/// In-batch InfoNCE: `positives[a]` is anchor `a`'s positive, every other
/// entry of `positives` is a negative.
pub fn infonce_loss(
    anchors: &[&[f64]],
    positives: &[&[f64]],
    temps: &[f64],
) -> Result<InfoNceOutput> {
    if anchors.len() != positives.len() {
        return Err(Error::ShapeMismatch(
            "anchors and positives differ in length".into(),
        ));
    }
    let idx: Vec<usize> = (0..anchors.len()).collect();
    infonce_general(anchors, positives, &idx, temps, false).map(|(o, _)| o)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PairPolicy {
    /// Every ordered pair `(k_i, k_j)` with `k_i ≠ k_j`.
    AllOrdered,
    Explicit(Vec<(usize, usize)>),
}

impl PairPolicy {
    pub fn pairs(&self, num_behaviors: usize) -> Vec<(usize, usize)> {
        match self {
            PairPolicy::AllOrdered => (0..num_behaviors)
                .flat_map(|a| {
                    (0..num_behaviors)
                        .filter(move |&b| b != a)
                        .map(move |b| (a, b))
                })
                .collect(),
            PairPolicy::Explicit(p) => p
                .iter()
                .copied()
                .filter(|&(a, b)| a != b && a < num_behaviors && b < num_behaviors)
                .collect(),
        }
    }
}

/// Where the denominator's negatives come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativePool {
    InBatch,
    /// Every entity of the same side that passes the interaction filter.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClConfig {
    pub beta: f64,
    pub lambda_cl: f64,
    pub pairs: PairPolicy,
    pub min_interaction_filter: bool,
    pub cl_enabled: bool,
    pub negatives: NegativePool,
}

impl Default for ClConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda_cl: 0.1,
            pairs: PairPolicy::AllOrdered,
            min_interaction_filter: true,
            cl_enabled: true,
            negatives: NegativePool::InBatch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClOutput {
    /// `user + β · item`
    pub loss: f64,
    pub user: f64,
    pub item: f64,
    pub zero_norm: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    User,
    Item,
}

struct SideCtx<'a> {
    es: &'a EmbeddingSet,
    bias: &'a BiasTable,
    side: Side,
}

impl SideCtx<'_> {
    fn vec(&self, k: usize, id: u32) -> &[f64] {
        match self.side {
            Side::User => self.es.user(k, id),
            Side::Item => self.es.item(k, id),
        }
    }

    fn bias(&self, id: u32, k: usize) -> f64 {
        match self.side {
            Side::User => self.bias.user(id, k),
            Side::Item => self.bias.item(id, k),
        }
    }

    fn population(&self) -> u32 {
        match self.side {
            Side::User => self.es.num_users() as u32,
            Side::Item => self.es.num_items() as u32,
        }
    }
}

fn accumulate(grad: &mut EmbeddingSet, side: Side, k: usize, id: u32, g: &[f64]) {
    let dst = match side {
        Side::User => grad.user_mut(k, id),
        Side::Item => grad.item_mut(k, id),
    };
    for (d, s) in dst.iter_mut().zip(g) {
        *d += s;
    }
}

/// Returns the summed per-pair losses of one side; pushes `scale ·` the
/// gradient into `grad` and returns `∂/∂batch_value` alongside.
#[allow(clippy::too_many_arguments)]
fn side_loss(
    ctx: &SideCtx<'_>,
    batch: &[u32],
    cfg: &ClConfig,
    rule: &TemperatureRule,
    batch_value: f64,
    scale: f64,
    mut grad: Option<&mut EmbeddingSet>,
    zero_norm: &mut usize,
) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut d_batch_value = 0.0;
    let dtau = temperature_grad(rule, batch_value);
    for (ki, kj) in cfg.pairs.pairs(ctx.es.num_behaviors()) {
        let keep = |id: &u32| {
            !cfg.min_interaction_filter || (ctx.bias(*id, ki) > 0.0 && ctx.bias(*id, kj) > 0.0)
        };
        let anchors_ids: Vec<u32> = batch.iter().copied().filter(keep).collect();
        if anchors_ids.is_empty() {
            continue;
        }
        let cand_ids: Vec<u32> = match cfg.negatives {
            NegativePool::InBatch => anchors_ids.clone(),
            NegativePool::Full => (0..ctx.population()).filter(keep).collect(),
        };
        let positive: Vec<usize> = match cfg.negatives {
            NegativePool::InBatch => (0..anchors_ids.len()).collect(),
            NegativePool::Full => anchors_ids
                .iter()
                .map(|id| {
                    cand_ids
                        .binary_search(id)
                        .expect("anchor passes the same filter")
                })
                .collect(),
        };
        let anchors: Vec<&[f64]> = anchors_ids.iter().map(|&id| ctx.vec(ki, id)).collect();
        let cands: Vec<&[f64]> = cand_ids.iter().map(|&id| ctx.vec(kj, id)).collect();
        let temps: Vec<f64> = anchors_ids
            .iter()
            .map(|&id| temperature(rule, ctx.bias(id, kj), batch_value))
            .collect();
        let (out, g) = infonce_general(&anchors, &cands, &positive, &temps, grad.is_some())?;
        total += out.loss;
        *zero_norm += out.zero_norm;
        if let (Some(dst), Some(g)) = (grad.as_deref_mut(), g) {
            for (id, ga) in anchors_ids.iter().zip(&g.anchors) {
                let scaled: Vec<f64> = ga.iter().map(|x| x * scale).collect();
                accumulate(dst, ctx.side, ki, *id, &scaled);
            }
            for (id, gc) in cand_ids.iter().zip(&g.candidates) {
                let scaled: Vec<f64> = gc.iter().map(|x| x * scale).collect();
                accumulate(dst, ctx.side, kj, *id, &scaled);
            }
            d_batch_value += scale * dtau * g.temps.iter().sum::<f64>();
        }
    }
    Ok((total, d_batch_value))
}

fn dedup_sorted(ids: &[u32]) -> Vec<u32> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Contrastive loss over all behavior pairs for the batch's users and items.
#[allow(clippy::too_many_arguments)]
pub fn cl_total(
    es: &EmbeddingSet,
    bias: &BiasTable,
    users: &[u32],
    items: &[u32],
    cfg: &ClConfig,
    rule: &TemperatureRule,
    batch_value: f64,
) -> Result<ClOutput> {
    cl_total_with_grad(es, bias, users, items, cfg, rule, batch_value, 1.0, None).map(|(o, _)| o)
}

/// [`cl_total`], also accumulating `scale · ∂L_CL/∂e` into `grad` when given.
/// The second return value is `scale · ∂L_CL/∂batch_value`.
#[allow(clippy::too_many_arguments)]
pub fn cl_total_with_grad(
    es: &EmbeddingSet,
    bias: &BiasTable,
    users: &[u32],
    items: &[u32],
    cfg: &ClConfig,
    rule: &TemperatureRule,
    batch_value: f64,
    scale: f64,
    mut grad: Option<&mut EmbeddingSet>,
) -> Result<(ClOutput, f64)> {
    if !cfg.cl_enabled {
        return Ok((ClOutput::default(), 0.0));
    }
    let users = dedup_sorted(users);
    let items = dedup_sorted(items);
    let mut zero_norm = 0;
    let user_ctx = SideCtx {
        es,
        bias,
        side: Side::User,
    };
    let (user, du) = side_loss(
        &user_ctx,
        &users,
        cfg,
        rule,
        batch_value,
        scale,
        grad.as_deref_mut(),
        &mut zero_norm,
    )?;
    let (item, di) = if cfg.beta != 0.0 {
        let item_ctx = SideCtx {
            es,
            bias,
            side: Side::Item,
        };
        side_loss(
            &item_ctx,
            &items,
            cfg,
            rule,
            batch_value,
            scale * cfg.beta,
            grad,
            &mut zero_norm,
        )?
    } else {
        (0.0, 0.0)
    };
    Ok((
        ClOutput {
            loss: user + cfg.beta * item,
            user,
            item,
            zero_norm,
        },
        du + di,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::BiasTable;
    use proptest::prelude::*;

    #[test]
    fn bias_aware_examples() {
        let r = TemperatureRule::BiasAware {
            tau0: 0.2,
            alpha: 0.5,
        };
        assert!((temperature(&r, 0.5, 0.0) - 0.15).abs() < 1e-15);
        assert_eq!(temperature(&r, 0.0, 0.0), 0.2);
        assert_eq!(temperature(&r, 1.0, 0.0), 0.2 * (1.0 - 0.5));
        assert_eq!(
            temperature(&TemperatureRule::Fixed { tau: 0.1 }, 0.7, 0.0),
            0.1
        );
    }

    #[test]
    fn alternative_rules() {
        let lin = TemperatureRule::LinearAlt {
            tau0: 0.2,
            alpha: 0.5,
        };
        assert!((temperature(&lin, 0.5, 0.0) - 0.25).abs() < 1e-15);
        let inv = TemperatureRule::InverseAlt {
            tau0: 0.2,
            alpha: 0.5,
            tau_min: 0.01,
        };
        assert_eq!(temperature(&inv, 0.1, 0.0), 0.01);
        assert!((temperature(&inv, 1.0, 0.0) - 0.1).abs() < 1e-15);
        let learn = TemperatureRule::Learnable {
            init: 0.2,
            min: 0.01,
            max: 1.0,
        };
        assert_eq!(temperature(&learn, 0.3, 5.0), 1.0);
        assert_eq!(temperature(&learn, 0.3, 0.3), 0.3);
        assert_eq!(temperature_grad(&learn, 0.3), 1.0);
        assert_eq!(temperature_grad(&learn, 5.0), 0.0);
        assert!(TemperatureRule::BiasAware {
            tau0: 0.2,
            alpha: 1.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn random_rule_is_seeded_and_bounded() {
        use rand::SeedableRng;
        let r = TemperatureRule::Random { lo: 0.1, hi: 0.5 };
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = r.batch_value(&mut a, 0.0);
            assert_eq!(x, r.batch_value(&mut b, 0.0));
            assert!((0.1..=0.5).contains(&temperature(&r, 0.9, x)));
        }
    }

    #[test]
    fn single_anchor_has_zero_loss() {
        let out = infonce_loss(&[&[0.3, 0.1]], &[&[-1.0, 2.0]], &[0.2]).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn identical_pairs_give_log_two() {
        let v = [0.6, -0.8];
        for tau in [0.05, 0.2, 1.0, 3.0] {
            let out = infonce_loss(&[&v, &v], &[&v, &v], &[tau, tau]).unwrap();
            assert!((out.loss - core::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_norm_counts_and_uses_zero_similarity() {
        let z = [0.0, 0.0];
        let out =
            infonce_loss(&[&z, &[1.0, 0.0]], &[&[1.0, 0.0], &[1.0, 0.0]], &[0.5, 0.5]).unwrap();
        assert_eq!(out.zero_norm, 1);
        assert!(out.loss.is_finite());
    }

    #[test]
    fn infonce_gradient_matches_central_difference() {
        let anchors = [[0.3, -0.7, 0.2], [1.1, 0.4, -0.5], [-0.2, 0.9, 0.8]];
        let cands = [
            [0.5, 0.1, -0.3],
            [0.2, -0.4, 0.9],
            [-1.0, 0.3, 0.3],
            [0.7, 0.7, 0.1],
        ];
        let pos = [2usize, 0, 3];
        let temps = [0.2, 0.35, 0.5];
        let eval = |a: &[[f64; 3]; 3], c: &[[f64; 3]; 4], t: &[f64; 3]| {
            let ar: Vec<&[f64]> = a.iter().map(|x| &x[..]).collect();
            let cr: Vec<&[f64]> = c.iter().map(|x| &x[..]).collect();
            infonce_general(&ar, &cr, &pos, t, false).unwrap().0.loss
        };
        let ar: Vec<&[f64]> = anchors.iter().map(|x| &x[..]).collect();
        let cr: Vec<&[f64]> = cands.iter().map(|x| &x[..]).collect();
        let (_, g) = infonce_general(&ar, &cr, &pos, &temps, true).unwrap();
        let g = g.unwrap();
        let h = 1e-6;
        for a in 0..3 {
            for j in 0..3 {
                let mut p = anchors;
                let mut m = anchors;
                p[a][j] += h;
                m[a][j] -= h;
                let fd = (eval(&p, &cands, &temps) - eval(&m, &cands, &temps)) / (2.0 * h);
                assert!((fd - g.anchors[a][j]).abs() < 1e-7, "anchor {a},{j}");
            }
            let mut tp = temps;
            let mut tm = temps;
            tp[a] += h;
            tm[a] -= h;
            let fd = (eval(&anchors, &cands, &tp) - eval(&anchors, &cands, &tm)) / (2.0 * h);
            assert!((fd - g.temps[a]).abs() < 1e-6, "temp {a}");
        }
        for c in 0..4 {
            for j in 0..3 {
                let mut p = cands;
                let mut m = cands;
                p[c][j] += h;
                m[c][j] -= h;
                let fd = (eval(&anchors, &p, &temps) - eval(&anchors, &m, &temps)) / (2.0 * h);
                assert!((fd - g.candidates[c][j]).abs() < 1e-7, "cand {c},{j}");
            }
        }
    }

    fn two_behavior_fixture() -> (EmbeddingSet, BiasTable) {
        // 2 users, 1 item, 2 behaviors, d = 2
        let b0 = vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5];
        let b1 = vec![0.8, 0.6, -0.6, 0.8, 0.1, 0.2];
        let es = EmbeddingSet::from_blocks(2, 1, 2, vec![b0, b1]).unwrap();
        let bias = BiasTable::from_rows(2, vec![0.5, 0.5, 0.25, 0.75], vec![0.5, 0.5]).unwrap();
        (es, bias)
    }

    #[test]
    fn single_behavior_has_no_pairs() {
        let es = EmbeddingSet::from_blocks(2, 1, 2, vec![vec![1.0; 6]]).unwrap();
        let bias = BiasTable::from_rows(1, vec![1.0, 1.0], vec![1.0]).unwrap();
        let out = cl_total(
            &es,
            &bias,
            &[0, 1],
            &[0],
            &ClConfig::default(),
            &TemperatureRule::default(),
            0.0,
        )
        .unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn two_behavior_user_loss_by_hand() {
        let (es, bias) = two_behavior_fixture();
        let rule = TemperatureRule::default();
        let cfg = ClConfig {
            beta: 0.0,
            ..ClConfig::default()
        };
        let out = cl_total(&es, &bias, &[0, 1], &[0], &cfg, &rule, 0.0).unwrap();
        // direct evaluation of both ordered pairs
        let cos = |a: [f64; 2], b: [f64; 2]| {
            (a[0] * b[0] + a[1] * b[1])
                / ((a[0] * a[0] + a[1] * a[1]).sqrt() * (b[0] * b[0] + b[1] * b[1]).sqrt())
        };
        let u0 = [[1.0, 0.0], [0.8, 0.6]];
        let u1 = [[0.0, 1.0], [-0.6, 0.8]];
        let bu = [[0.5, 0.5], [0.25, 0.75]];
        let term = |a: [f64; 2], pos: [f64; 2], neg: [f64; 2], tau: f64| {
            let p = (cos(a, pos) / tau).exp();
            let n = (cos(a, neg) / tau).exp();
            -(p / (p + n)).ln()
        };
        let tau = |b: f64| 0.2 * (1.0 - 0.5 * b);
        // pair (0 -> 1): temperature keyed on downstream bias b_{u,1}
        let l01 = 0.5
            * (term(u0[0], u0[1], u1[1], tau(bu[0][1])) + term(u1[0], u1[1], u0[1], tau(bu[1][1])));
        let l10 = 0.5
            * (term(u0[1], u0[0], u1[0], tau(bu[0][0])) + term(u1[1], u1[0], u0[0], tau(bu[1][0])));
        assert!((out.user - (l01 + l10)).abs() < 1e-12);
        assert_eq!(out.item, 0.0);
        assert_eq!(out.loss, out.user);
    }

    #[test]
    fn disabled_cl_is_zero() {
        let (es, bias) = two_behavior_fixture();
        let cfg = ClConfig {
            cl_enabled: false,
            ..ClConfig::default()
        };
        let out = cl_total(
            &es,
            &bias,
            &[0, 1],
            &[0],
            &cfg,
            &TemperatureRule::default(),
            0.0,
        )
        .unwrap();
        assert_eq!(out, ClOutput::default());
    }

    #[test]
    fn filter_drops_entities_without_interactions() {
        let (es, _) = two_behavior_fixture();
        let bias = BiasTable::from_rows(2, vec![1.0, 0.0, 0.25, 0.75], vec![0.5, 0.5]).unwrap();
        let cfg = ClConfig {
            beta: 0.0,
            ..ClConfig::default()
        };
        // user 0 has no behavior-1 interactions: only user 1 remains, loss 0
        let out = cl_total(
            &es,
            &bias,
            &[0, 1],
            &[0],
            &cfg,
            &TemperatureRule::default(),
            0.0,
        )
        .unwrap();
        assert_eq!(out.user, 0.0);
        let unfiltered = ClConfig {
            min_interaction_filter: false,
            ..cfg
        };
        let out = cl_total(
            &es,
            &bias,
            &[0, 1],
            &[0],
            &unfiltered,
            &TemperatureRule::default(),
            0.0,
        )
        .unwrap();
        assert!(out.user > 0.0);
    }

    proptest! {
        #[test]
        fn infonce_is_nonnegative(
            vs in proptest::collection::vec(proptest::collection::vec(-3.0..3.0f64, 3), 2..8),
            tau in 0.01..2.0f64,
        ) {
            let n = vs.len() / 2;
            prop_assume!(n >= 1);
            let a: Vec<&[f64]> = vs[..n].iter().map(|v| &v[..]).collect();
            let p: Vec<&[f64]> = vs[n..2 * n].iter().map(|v| &v[..]).collect();
            let out = infonce_loss(&a, &p, &vec![tau; n]).unwrap();
            prop_assert!(out.loss >= -1e-12);
        }

        #[test]
        fn bias_aware_is_strictly_decreasing(b1 in 0.0..1.0f64, b2 in 0.0..1.0f64, alpha in 0.01..0.99f64) {
            prop_assume!(b1 < b2);
            let r = TemperatureRule::BiasAware { tau0: 0.2, alpha };
            let (t1, t2) = (temperature(&r, b1, 0.0), temperature(&r, b2, 0.0));
            prop_assert!(t1 > t2);
            prop_assert!(t2 >= 0.2 * (1.0 - alpha) - 1e-15 && t1 <= 0.2);
        }

        #[test]
        fn permuting_negatives_keeps_anchor_losses(seed in 0u64..200) {
            use rand::{SeedableRng, seq::SliceRandom, Rng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let a: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let p: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let ar: Vec<&[f64]> = a.iter().map(|v| &v[..]).collect();
            let pr: Vec<&[f64]> = p.iter().map(|v| &v[..]).collect();
            let shuffled: Vec<&[f64]> = perm.iter().map(|&j| &p[j][..]).collect();
            let inverse: Vec<usize> = (0..n).map(|i| perm.iter().position(|&j| j == i).unwrap()).collect();
            for anchor in 0..n {
                let t = [0.3];
                let base = infonce_general(&ar[anchor..=anchor], &pr, &[anchor], &t, false).unwrap().0.loss;
                let moved = infonce_general(&ar[anchor..=anchor], &shuffled, &[inverse[anchor]], &t, false).unwrap().0.loss;
                prop_assert!((base - moved).abs() < 1e-12);
            }
        }
    }
}
