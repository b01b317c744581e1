//! Loss assembly with exact gradients, Adam, the training loop, finite
//! difference gradient checking, and the incremental cost estimator.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{match_score, BackboneKind, EmbeddingSet, PropagationGraph};
use crate::causal::{base_score, bias_factor, DebiasParams};
use crate::contrast::{cl_total_with_grad, ClConfig, NegativePool, TemperatureRule};
use crate::corpus::{
    compute_bias_table, compute_jaccard, sample_negatives_in, split_leave_one_out, BehaviorSchema,
    BiasTable, InteractionDataset, JaccardTable, SplitDataset,
};
use crate::eval::{hr_ndcg, rank_all};
use crate::fusion::{
    contribution, contribution_grad, final_score, gate_input, FusionParams, MoeCache, MoeWeights,
};
use crate::math::{axpy, sigmoid, softplus, sqrt};
use crate::model::{Ablation, Dims, Model, ModelConfig};
use crate::params::ParamStore;
use crate::{Error, Result};

/// Everything the loss reads besides the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub split: SplitDataset,
    pub bias: BiasTable,
    pub jaccard: JaccardTable,
    pub graph: PropagationGraph,
}

impl TrainingData {
    pub fn new(split: SplitDataset, bias: BiasTable, jaccard: JaccardTable) -> Self {
        let graph = PropagationGraph::from_dataset(&split.train);
        Self {
            split,
            bias,
            jaccard,
            graph,
        }
    }

    /// Bias proxies and Jaccard statistics computed from the train part.
    pub fn from_split(split: SplitDataset) -> Self {
        let bias = compute_bias_table(&split.train);
        let jaccard = compute_jaccard(&split.train);
        Self::new(split, bias, jaccard)
    }

    pub fn dims(&self) -> Dims {
        let t = &self.split.train;
        Dims {
            num_users: t.num_users(),
            num_items: t.num_items(),
            num_behaviors: t.num_behaviors(),
            target: t.target(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub neg_per_pos: usize,
    /// Epochs without improvement before stopping; 0 disables early stop.
    pub patience: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            l2: 1e-5,
            epochs: 100,
            batch_size: 1024,
            neg_per_pos: 1,
            patience: 10,
            seed: 42,
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.neg_per_pos == 0 {
            return Err(Error::InvalidInput(
                "lr must be positive; epochs, batch_size and neg_per_pos at least 1".into(),
            ));
        }
        if self.l2 < 0.0 {
            return Err(Error::InvalidInput("l2 must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One BPR comparison: `pos` should outscore `neg` for `user` under
/// `behavior`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub behavior: usize,
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub triples: Vec<Triple>,
    /// Contrastive anchors (deduplicated inside the loss).
    pub users: Vec<u32>,
    pub items: Vec<u32>,
    /// Per-batch temperature draw for the random rule.
    pub random_temperature: f64,
}

impl Batch {
    pub fn from_triples(triples: Vec<Triple>, random_temperature: f64) -> Self {
        let users = triples.iter().map(|t| t.user).collect();
        let items = triples.iter().map(|t| t.pos).collect();
        Self {
            triples,
            users,
            items,
            random_temperature,
        }
    }
}

/// `total = bpr + λ_CL · cl + l2`, with `l2 = coef · ‖θ‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub cl: f64,
    pub l2: f64,
    pub total: f64,
    pub zero_norm: usize,
}

/// `−log σ(s⁺ − s⁻)`.
pub fn bpr_loss(s_pos: f64, s_neg: f64) -> f64 {
    softplus(-(s_pos - s_neg))
}

/// Mean BPR over `(s⁺, s⁻)` pairs.
pub fn bpr_mean(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|&(p, n)| bpr_loss(p, n)).sum::<f64>() / pairs.len() as f64
}

struct AuxTrace {
    k: usize,
    f: f64,
    jaccard: f64,
    g_moe: f64,
    cache: Option<MoeCache>,
}

struct ScoreTrace {
    behavior: usize,
    u: u32,
    i: u32,
    g: f64,
    s_base: f64,
    c: f64,
    aux: Vec<AuxTrace>,
    value: f64,
}

struct Ctx<'a> {
    model: &'a Model,
    data: &'a TrainingData,
    es: &'a EmbeddingSet,
    fusion: FusionParams,
}

impl Ctx<'_> {
    fn debias(&self) -> &DebiasParams {
        &self.model.config.debias
    }

    fn score(&self, behavior: usize, u: u32, i: u32) -> ScoreTrace {
        let b = &self.data.bias;
        let f = match_score(self.es, behavior, u, i);
        let g = bias_factor(b.user(u, behavior), b.item(i, behavior), self.debias());
        let s_base = base_score(f, g);
        let target = self.model.dims.target;
        let p = &self.fusion;
        let mut aux = Vec::new();
        let mut c = 0.0;
        if behavior == target && p.agg_enabled && (p.jaccard_enabled || p.moe_enabled) {
            let gate = self.model.moe();
            for k in (0..self.model.dims.num_behaviors).filter(|&k| k != target) {
                let fk = match_score(self.es, k, u, i);
                let jac = self.data.jaccard.get(u, k);
                let (g_moe, cache) = if p.moe_enabled {
                    let mut cache = MoeCache::default();
                    let x = gate_input(
                        self.es.user(k, u),
                        self.es.item(k, i),
                        b.user(u, k),
                        b.item(i, k),
                    );
                    (gate.forward_cached(x, &mut cache), Some(cache))
                } else {
                    (0.0, None)
                };
                c += contribution(fk, jac, g_moe, p);
                aux.push(AuxTrace {
                    k,
                    f: fk,
                    jaccard: jac,
                    g_moe,
                    cache,
                });
            }
        }
        let value = if behavior == target {
            final_score(s_base, c)
        } else {
            s_base
        };
        ScoreTrace {
            behavior,
            u,
            i,
            g,
            s_base,
            c,
            aux,
            value,
        }
    }

    fn push_match_grad(&self, grad: &mut EmbeddingSet, k: usize, u: u32, i: u32, df: f64) {
        if df == 0.0 {
            return;
        }
        axpy(grad.user_mut(k, u), df, self.es.item(k, i));
        axpy(grad.item_mut(k, i), df, self.es.user(k, u));
    }

    fn backward(&self, t: &ScoreTrace, upstream: f64, acc: &mut Accumulator) {
        let target = self.model.dims.target;
        let d_base = if t.behavior == target {
            upstream * (1.0 + t.c)
        } else {
            upstream
        };
        self.push_match_grad(&mut acc.emb, t.behavior, t.u, t.i, d_base * t.g);
        if t.behavior != target {
            return;
        }
        let d_c = upstream * t.s_base;
        let gate = self.model.moe();
        let d = self.model.config.dim;
        for a in &t.aux {
            let cg = contribution_grad(a.f, a.jaccard, a.g_moe, &self.fusion);
            acc.lambda_j += d_c * cg.d_lambda_j;
            acc.lambda_m += d_c * cg.d_lambda_m;
            self.push_match_grad(&mut acc.emb, a.k, t.u, t.i, d_c * cg.d_f);
            if let Some(cache) = &a.cache {
                let mut dx = vec![0.0; 2 * d + 2];
                gate.backward(cache, d_c * cg.d_gmoe, &mut acc.moe, &mut dx);
                axpy(acc.emb.user_mut(a.k, t.u), 1.0, &dx[..d]);
                axpy(acc.emb.item_mut(a.k, t.i), 1.0, &dx[d..2 * d]);
            }
        }
    }
}

struct Accumulator {
    emb: EmbeddingSet,
    moe: MoeWeights,
    lambda_j: f64,
    lambda_m: f64,
    tau: f64,
}

fn evaluate(
    model: &Model,
    data: &TrainingData,
    batch: &Batch,
    l2_coef: f64,
    freeze_backbone: bool,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<ParamStore>)> {
    if batch.triples.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let es = model.embeddings(&data.graph)?;
    let ctx = Ctx {
        model,
        data,
        es: &es,
        fusion: model.fusion(),
    };
    let mut acc = want_grad.then(|| Accumulator {
        emb: EmbeddingSet::zeros(es.num_users(), es.num_items(), es.num_behaviors(), es.dim()),
        moe: MoeWeights::zeros(model.moe().shape),
        lambda_j: 0.0,
        lambda_m: 0.0,
        tau: 0.0,
    });

    let inv_n = 1.0 / batch.triples.len() as f64;
    let mut bpr = 0.0;
    for tr in &batch.triples {
        let pos = ctx.score(tr.behavior, tr.user, tr.pos);
        let neg = ctx.score(tr.behavior, tr.user, tr.neg);
        let diff = pos.value - neg.value;
        bpr += softplus(-diff) * inv_n;
        if let Some(acc) = acc.as_mut() {
            let d_diff = -sigmoid(-diff) * inv_n;
            ctx.backward(&pos, d_diff, acc);
            ctx.backward(&neg, -d_diff, acc);
        }
    }

    let cfg = &model.config;
    let batch_value = match model.tau_raw() {
        Some(raw) => raw,
        None => batch.random_temperature,
    };
    let (cl_out, d_tau) = cl_total_with_grad(
        &es,
        &data.bias,
        &batch.users,
        &batch.items,
        &cfg.cl,
        &cfg.temperature,
        batch_value,
        cfg.cl.lambda_cl,
        acc.as_mut().map(|a| &mut a.emb),
    )?;
    if let Some(acc) = acc.as_mut() {
        acc.tau += d_tau;
    }

    let l2 = l2_coef * model.params.squared_norm();
    let loss = LossBreakdown {
        bpr,
        cl: cl_out.loss,
        l2,
        total: bpr + cfg.cl.lambda_cl * cl_out.loss + l2,
        zero_norm: cl_out.zero_norm,
    };
    for (name, v) in [("bpr", loss.bpr), ("cl", loss.cl), ("l2", loss.l2)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(String::from(name)));
        }
    }
    let Some(acc) = acc else {
        return Ok((loss, None));
    };

    let mut grads = model.params.zeros_like();
    let (user_slots, item_slots) = model.table_slots();
    if !freeze_backbone {
        let (gu, gi) = model.backbone().backward(&acc.emb, Some(&data.graph));
        for (slot, g) in user_slots.iter().zip(gu).chain(item_slots.iter().zip(gi)) {
            grads.data_mut(*slot).copy_from_slice(&g);
        }
    }
    let moe_parts: [&[f64]; 6] = [
        &acc.moe.router_w,
        &acc.moe.router_b,
        &acc.moe.w1,
        &acc.moe.b1,
        &acc.moe.w2,
        &acc.moe.b2,
    ];
    for (slot, g) in model.moe_slots().iter().zip(moe_parts) {
        grads.data_mut(*slot).copy_from_slice(g);
    }
    let (lj, lm) = model.lambda_slots();
    grads.data_mut(lj)[0] = acc.lambda_j;
    grads.data_mut(lm)[0] = acc.lambda_m;
    if let Some(slot) = model.tau_slot() {
        grads.data_mut(slot)[0] = acc.tau;
    }
    if l2_coef != 0.0 {
        let frozen: Vec<usize> = if freeze_backbone {
            model.backbone_groups().collect()
        } else {
            Vec::new()
        };
        for (idx, (g, p)) in grads
            .groups_mut()
            .iter_mut()
            .zip(model.params.groups())
            .enumerate()
        {
            if frozen.contains(&idx) {
                continue;
            }
            axpy(&mut g.data, 2.0 * l2_coef, &p.data);
        }
    }
    if let Some(name) = grads.all_finite() {
        return Err(Error::NonFinite(alloc::format!("gradient of {name}")));
    }
    Ok((loss, Some(grads)))
}

/// Loss of one batch under the full scoring pipeline.
pub fn total_loss(
    model: &Model,
    data: &TrainingData,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    evaluate(model, data, batch, cfg.l2, cfg.freeze_backbone, false).map(|(l, _)| l)
}

/// Loss and exact gradients for every parameter group.
pub fn gradients(
    model: &Model,
    data: &TrainingData,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ParamStore)> {
    evaluate(model, data, batch, cfg.l2, cfg.freeze_backbone, true)
        .map(|(l, g)| (l, g.expect("requested")))
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        params.check_layout(grads)?;
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .groups_mut()
            .iter_mut()
            .zip(grads.groups())
            .zip(self.m.groups_mut())
            .zip(self.v.groups_mut())
        {
            for (((x, &gx), mx), vx) in p
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(&mut m.data)
                .zip(&mut v.data)
            {
                *mx = b1 * *mx + (1.0 - b1) * gx;
                *vx = b2 * *vx + (1.0 - b2) * gx * gx;
                let m_hat = *mx / bc1;
                let v_hat = *vx / bc2;
                *x -= lr * m_hat / (sqrt(v_hat) + eps);
            }
        }
        if let Some(name) = params.all_finite() {
            return Err(Error::NonFinite(alloc::format!(
                "parameters of {name} after update"
            )));
        }
        Ok(())
    }
}

/// Early-stopping bookkeeping over a metric where larger is better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records an epoch's metric; returns `(improved, should_stop)`.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        if metric > self.best || self.best == f64::NEG_INFINITY {
            self.best = metric;
            self.best_epoch = epoch;
            self.since_best = 0;
            return (true, false);
        }
        self.since_best += 1;
        (false, self.patience > 0 && self.since_best >= self.patience)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bpr: f64,
    pub cl: f64,
    pub l2: f64,
    pub total: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Parameters from the best epoch.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Cutoff of the per-epoch validation hit rate.
pub const EARLY_STOP_K: usize = 10;

const SHUFFLE_SALT: u64 = 0x0073_6875_6666_6c65;

/// All positives the loop iterates over: the target behavior, plus every
/// auxiliary behavior when `aux_bpr` is on.
fn training_positives(ds: &InteractionDataset, aux_bpr: bool) -> Vec<(usize, u32, u32)> {
    let t = ds.target();
    let mut out = Vec::new();
    for k in 0..ds.num_behaviors() {
        if k != t && !aux_bpr {
            continue;
        }
        for (u, items) in ds.behavior_lists(k).iter().enumerate() {
            out.extend(items.iter().map(|&i| (k, u as u32, i)));
        }
    }
    out
}

/// [`fit`] with the default evaluator (HR@10 over the test positives).
pub fn fit(data: &TrainingData, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<FitResult> {
    fit_with(data, model_cfg, cfg, |_, es| {
        let rr = rank_all(es, &data.split)?;
        Ok(hr_ndcg(&rr, EARLY_STOP_K).0)
    })
}

/// Trains with a caller-supplied per-epoch metric (larger is better).
pub fn fit_with<E>(
    data: &TrainingData,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut evaluator: E,
) -> Result<FitResult>
where
    E: FnMut(&Model, &EmbeddingSet) -> Result<f64>,
{
    cfg.validate()?;
    let mut model = Model::new(model_cfg.clone(), data.dims(), cfg.seed)?;
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut positives = training_positives(&data.split.train, model_cfg.aux_bpr);
    if positives.is_empty() {
        return Err(Error::InvalidInput("no training positives".into()));
    }
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        positives.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in positives.chunks(cfg.batch_size) {
            let mut triples = Vec::with_capacity(chunk.len() * cfg.neg_per_pos);
            for &(k, u, i) in chunk {
                for neg in sample_negatives_in(&data.split.train, k, u, cfg.neg_per_pos, &mut rng)?
                {
                    triples.push(Triple {
                        behavior: k,
                        user: u,
                        pos: i,
                        neg,
                    });
                }
            }
            let draw = model_cfg
                .temperature
                .batch_value(&mut rng, model.tau_raw().unwrap_or(0.0));
            let batch = Batch::from_triples(triples, draw);
            let (loss, grads) = gradients(&model, data, &batch, cfg)?;
            adam.update(&mut model.params, &grads, cfg.lr)?;
            sums.bpr += loss.bpr;
            sums.cl += loss.cl;
            sums.l2 += loss.l2;
            sums.total += loss.total;
            batches += 1;
        }
        let es = model.embeddings(&data.graph)?;
        let metric = evaluator(&model, &es)?;
        let nb = batches as f64;
        history.push(EpochRecord {
            epoch,
            bpr: sums.bpr / nb,
            cl: sums.cl / nb,
            l2: sums.l2 / nb,
            total: sums.total / nb,
            metric,
        });
        let (improved, stop) = stopper.observe(epoch, metric);
        if improved {
            best = model.clone();
        }
        if stop {
            break;
        }
    }
    Ok(FitResult {
        model: best,
        history,
        best_epoch: stopper.best_epoch,
        best_metric: stopper.best,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub trials: usize,
    /// Central-difference step.
    pub h: f64,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            h: 1e-6,
            seed: 0,
            threshold: 1e-4,
        }
    }
}

/// Gradient entries smaller than this are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub trial: usize,
    pub backbone: BackboneKind,
    pub ablation_mask: u8,
    pub temperature: &'static str,
    /// `(group, max relative error)` in parameter order.
    pub groups: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub trials: Vec<TrialReport>,
    /// Worst error per group name over all trials.
    pub per_group: BTreeMap<String, f64>,
    pub max_error: f64,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.threshold
    }

    pub fn distinct_masks(&self) -> usize {
        let mut m: Vec<u8> = self.trials.iter().map(|t| t.ablation_mask).collect();
        m.sort_unstable();
        m.dedup();
        m.len()
    }
}

/// A small random problem: data, model, batch and train config.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub data: TrainingData,
    pub model: Model,
    pub batch: Batch,
    pub train: TrainConfig,
}

/// Builds the `trial`-th random instance. Backbones cycle through MF,
/// LightProp and Cascade; ablation masks are drawn without replacement.
pub fn grad_check_instance(seed: u64, trial: usize) -> Result<GradCheckInstance> {
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks: Vec<u8> = (0..64).collect();
    masks.shuffle(&mut mask_rng);
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(trial as u64 + 1));

    let m = rng.random_range(4..=6usize);
    let n = rng.random_range(5..=7usize);
    let k = rng.random_range(2..=3usize);
    let d = rng.random_range(2..=3usize);
    let names: Vec<String> = (0..k).map(|b| alloc::format!("b{b}")).collect();
    let schema = BehaviorSchema::new(names, k - 1)?;
    let mut edges = vec![Vec::new(); k];
    for (b, list) in edges.iter_mut().enumerate() {
        for u in 0..m as u32 {
            for i in 0..n as u32 {
                let p = if b == k - 1 { 0.35 } else { 0.5 };
                if rng.random::<f64>() < p {
                    list.push((u, i));
                }
            }
            // every user keeps one target interaction and one free item
            if b == k - 1 && !list.iter().any(|&(x, _)| x == u) {
                list.push((u, u % n as u32));
            }
        }
    }
    edges[k - 1].retain(|&(u, i)| i != (u + 1) % n as u32);
    let ds = InteractionDataset::from_edges(schema, m, n, edges)?;
    let split = split_leave_one_out(&ds, rng.random());
    let data = TrainingData::from_split(split);

    let backbone = match trial % 3 {
        0 => BackboneKind::Mf,
        1 => BackboneKind::LightProp {
            layers: rng.random_range(1..=2),
        },
        _ => BackboneKind::Cascade {
            layers: rng.random_range(1..=2),
        },
    };
    let ablation = Ablation::from_mask(masks[trial % masks.len()]);
    let gammas = [0.01, 0.1, 0.5, 1.0];
    let temperature = match rng.random_range(0..6) {
        0 => TemperatureRule::BiasAware {
            tau0: 0.3,
            alpha: 0.5,
        },
        1 => TemperatureRule::Fixed { tau: 0.4 },
        2 => TemperatureRule::Learnable {
            init: rng.random_range(0.2..0.6),
            min: 0.01,
            max: 1.0,
        },
        3 => TemperatureRule::Random { lo: 0.1, hi: 0.5 },
        4 => TemperatureRule::LinearAlt {
            tau0: 0.3,
            alpha: 0.5,
        },
        _ => TemperatureRule::InverseAlt {
            tau0: 0.3,
            alpha: 0.5,
            tau_min: 0.05,
        },
    };
    let config = ModelConfig {
        backbone,
        dim: d,
        n_experts: rng.random_range(1..=3),
        expert_hidden: 3,
        debias: DebiasParams {
            gamma_u: gammas[rng.random_range(0..4)],
            gamma_i: gammas[rng.random_range(0..4)],
            ..DebiasParams::default()
        },
        fusion: FusionParams {
            lambda_j: rng.random_range(0.2..0.8),
            lambda_m: rng.random_range(0.2..0.8),
            ..FusionParams::default()
        },
        temperature,
        cl: ClConfig {
            beta: rng.random_range(0.3..1.5),
            lambda_cl: 0.5,
            min_interaction_filter: rng.random(),
            negatives: if rng.random() {
                NegativePool::InBatch
            } else {
                NegativePool::Full
            },
            ..ClConfig::default()
        },
        aux_bpr: rng.random(),
    }
    .with_ablation(ablation);
    let mut model = Model::new(config.clone(), data.dims(), rng.random())?;
    // larger embeddings so scores and gradients are not vanishingly small
    for slot in model.backbone_groups().collect::<Vec<_>>() {
        model
            .params
            .data_mut(slot)
            .iter_mut()
            .for_each(|x| *x *= 5.0);
    }
    let mut triples = Vec::new();
    for (kk, u, i) in training_positives(&data.split.train, config.aux_bpr) {
        if rng.random::<f64>() < 0.6 {
            let neg = sample_negatives_in(&data.split.train, kk, u, 1, &mut rng)?[0];
            triples.push(Triple {
                behavior: kk,
                user: u,
                pos: i,
                neg,
            });
        }
    }
    let t = data.split.train.target();
    if !triples.iter().any(|tr| tr.behavior == t) {
        let (u, i) = (0u32, data.split.train.items_of(t, 0)[0]);
        let neg = sample_negatives_in(&data.split.train, t, u, 1, &mut rng)?[0];
        triples.push(Triple {
            behavior: t,
            user: u,
            pos: i,
            neg,
        });
    }
    let draw = config
        .temperature
        .batch_value(&mut rng, model.tau_raw().unwrap_or(0.0));
    let batch = Batch::from_triples(triples, draw);
    let train = TrainConfig {
        l2: 1e-3,
        freeze_backbone: false,
        ..TrainConfig::default()
    };
    Ok(GradCheckInstance {
        data,
        model,
        batch,
        train,
    })
}

/// Max over a group's entries of `|a − n| / max(|a|, |n|, floor)`.
pub fn group_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR))
        .fold(0.0, f64::max)
}

/// Central differences for every entry of every group.
pub fn numeric_gradients(inst: &GradCheckInstance, h: f64) -> Result<ParamStore> {
    let mut model = inst.model.clone();
    let mut out = model.params.zeros_like();
    for g in 0..model.params.groups().len() {
        for j in 0..model.params.data(g).len() {
            let orig = model.params.data(g)[j];
            model.params.data_mut(g)[j] = orig + h;
            let plus = total_loss(&model, &inst.data, &inst.batch, &inst.train)?.total;
            model.params.data_mut(g)[j] = orig - h;
            let minus = total_loss(&model, &inst.data, &inst.batch, &inst.train)?.total;
            model.params.data_mut(g)[j] = orig;
            out.data_mut(g)[j] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(out)
}

pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    grad_check_impl(cfg, false)
}

/// Like [`grad_check`], but perturbs every analytic gradient first. Used to
/// confirm the check can fail.
#[doc(hidden)]
pub fn grad_check_corrupted(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    grad_check_impl(cfg, true)
}

fn grad_check_impl(cfg: &GradCheckConfig, corrupt: bool) -> Result<GradCheckReport> {
    if !(cfg.h > 0.0) {
        return Err(Error::InvalidInput(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut trials = Vec::with_capacity(cfg.trials);
    let mut per_group: BTreeMap<String, f64> = BTreeMap::new();
    let mut max_error = 0.0f64;
    for trial in 0..cfg.trials {
        let inst = grad_check_instance(cfg.seed, trial)?;
        let (_, mut analytic) = gradients(&inst.model, &inst.data, &inst.batch, &inst.train)?;
        if corrupt {
            for g in analytic.groups_mut() {
                g.data.iter_mut().for_each(|x| *x = *x * 1.01 + 1e-3);
            }
        }
        let numeric = numeric_gradients(&inst, cfg.h)?;
        let groups: Vec<(String, f64)> = analytic
            .groups()
            .iter()
            .zip(numeric.groups())
            .map(|(a, n)| (a.name.clone(), group_relative_error(&a.data, &n.data)))
            .collect();
        for (name, e) in &groups {
            let slot = per_group.entry(name.clone()).or_insert(0.0);
            *slot = slot.max(*e);
            max_error = max_error.max(*e);
        }
        trials.push(TrialReport {
            trial,
            backbone: inst.model.config.backbone,
            ablation_mask: inst.model.config.ablation().mask(),
            temperature: inst.model.config.temperature.name(),
            groups,
        });
    }
    Ok(GradCheckReport {
        trials,
        per_group,
        max_error,
        threshold: cfg.threshold,
    })
}

/// Incremental cost of the framework in abstract operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostEstimate {
    pub num_items: u64,
    pub behaviors: u64,
    pub jaccard_cost: u64,
    pub n_experts: u64,
    pub dim: u64,
    pub user_batch: u64,
    pub item_batch: u64,
    /// `N · B² · r`
    pub jaccard_term: u128,
    /// `N · B² · k_exp · d`
    pub moe_term: u128,
    /// `N · B² · (r + k_exp · d)`
    pub aggregation_term: u128,
    /// `(u_s + i_s) · B² · d²`
    pub contrastive_term: u128,
    pub total: u128,
    /// With fewer than two behaviors there are no contrastive pairs.
    pub pairs_vanish: bool,
}

pub fn estimate_cost(
    n: u64,
    b: u64,
    r: u64,
    k_exp: u64,
    d: u64,
    u_s: u64,
    i_s: u64,
) -> CostEstimate {
    let (n128, b2, d128) = (n as u128, (b as u128) * (b as u128), d as u128);
    let jaccard_term = n128 * b2 * r as u128;
    let moe_term = n128 * b2 * k_exp as u128 * d128;
    let contrastive_term = (u_s as u128 + i_s as u128) * b2 * d128 * d128;
    CostEstimate {
        num_items: n,
        behaviors: b,
        jaccard_cost: r,
        n_experts: k_exp,
        dim: d,
        user_batch: u_s,
        item_batch: i_s,
        jaccard_term,
        moe_term,
        aggregation_term: jaccard_term + moe_term,
        contrastive_term,
        total: jaccard_term + moe_term + contrastive_term,
        pairs_vanish: b < 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpr_examples() {
        assert!((bpr_loss(0.7, 0.7) - core::f64::consts::LN_2).abs() < 1e-15);
        // −ln σ(1) = ln(1 + e^{-1})
        assert!((bpr_loss(1.0, 0.0) - 0.313_261_687_518_222_8).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for gap in [-3.0, 0.0, 1.0, 5.0, 40.0] {
            let l = bpr_loss(gap, 0.0);
            assert!(l < prev);
            prev = l;
        }
        assert!(bpr_loss(800.0, 0.0) < 1e-300);
    }

    #[test]
    fn adam_first_step() {
        let mut p = ParamStore::new();
        p.push(crate::params::ParamGroup::new("x", vec![1], vec![2.0]).unwrap());
        let mut g = p.zeros_like();
        g.data_mut(0)[0] = 1.0;
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &g, 0.1).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        assert!((p.data(0)[0] - (2.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = ParamStore::new();
        p.push(crate::params::ParamGroup::new("x", vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = p.clone();
        let g = p.zeros_like();
        let mut adam = Adam::new(&p);
        for _ in 0..3 {
            adam.update(&mut p, &g, 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn early_stopping_rule() {
        let mut s = EarlyStopping::new(2);
        assert_eq!(s.observe(1, 0.1), (true, false));
        assert_eq!(s.observe(2, 0.3), (true, false));
        assert_eq!(s.observe(3, 0.2), (false, false));
        assert_eq!(s.observe(4, 0.1), (false, true));
        assert_eq!(s.best_epoch, 2);
        let mut never = EarlyStopping::new(0);
        for e in 1..50 {
            assert!(!never.observe(e, -(e as f64)).1);
        }
    }

    #[test]
    fn cost_examples() {
        let c = estimate_cost(10_000, 3, 5, 4, 64, 1024, 1024);
        assert_eq!(c.total, 10_000 * 9 * (5 + 256) + 2048 * 9 * 4096);
        assert_eq!(c.aggregation_term, 10_000 * 9 * 261);
        let c2 = estimate_cost(10_000, 3, 5, 4, 128, 1024, 1024);
        assert_eq!(c2.moe_term, 2 * c.moe_term);
        assert_eq!(c2.contrastive_term, 4 * c.contrastive_term);
        let one = estimate_cost(10, 1, 2, 4, 8, 3, 3);
        assert!(one.pairs_vanish);
        assert_eq!(one.contrastive_term, 6 * 64);
    }

    #[test]
    fn grad_check_instances_are_deterministic() {
        let a = grad_check_instance(3, 4).unwrap();
        let b = grad_check_instance(3, 4).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.batch, b.batch);
    }
}
