//! Multi-behavior interaction data: schema, dense id maps, per-behavior
//! adjacency, leave-one-out splits, bias proxies and Jaccard statistics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Default smoothing constant added to Jaccard denominators.
pub const DEFAULT_JACCARD_EPSILON: f64 = 1e-8;

/// Ordered behavior labels and the index of the target behavior.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorSchema {
    names: Vec<String>,
    target_index: usize,
}

impl BehaviorSchema {
    pub fn new(names: Vec<String>, target_index: usize) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::InvalidSchema(format!(
                "need at least 2 behaviors, got {}",
                names.len()
            )));
        }
        if target_index >= names.len() {
            return Err(Error::InvalidSchema(format!(
                "target index {target_index} outside {} behaviors",
                names.len()
            )));
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(Error::InvalidSchema(format!("duplicate behavior '{a}'")));
            }
        }
        Ok(Self {
            names,
            target_index,
        })
    }

    /// Builds a schema whose target is identified by name.
    pub fn with_target<S: AsRef<str>>(names: &[S], target: &str) -> Result<Self> {
        let names: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
        let target_index = names
            .iter()
            .position(|n| n == target)
            .ok_or_else(|| Error::InvalidSchema(format!("target '{target}' is not a behavior")))?;
        Self::new(names, target_index)
    }

    pub fn num_behaviors(&self) -> usize {
        self.names.len()
    }

    pub fn target(&self) -> usize {
        self.target_index
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Indices of every behavior other than the target, in schema order.
    pub fn auxiliaries(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.names.len()).filter(move |&k| k != self.target_index)
    }
}

/// Bijection between external string ids and dense integer ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    external: Vec<String>,
    dense: BTreeMap<String, u32>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a map from external ids listed in dense order.
    pub fn from_external(ids: Vec<String>) -> Result<Self> {
        let mut dense = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            if dense.insert(id.clone(), i as u32).is_some() {
                return Err(Error::InvalidInput(format!("duplicate external id '{id}'")));
            }
        }
        Ok(Self {
            external: ids,
            dense,
        })
    }

    /// Sequential ids `prefix0, prefix1, ...`.
    pub fn sequential(prefix: &str, n: usize) -> Self {
        let ids = (0..n).map(|i| format!("{prefix}{i}")).collect();
        Self::from_external(ids).expect("sequential ids are unique")
    }

    pub fn get_or_insert(&mut self, id: &str) -> u32 {
        if let Some(&d) = self.dense.get(id) {
            return d;
        }
        let d = self.external.len() as u32;
        self.external.push(id.to_string());
        self.dense.insert(id.to_string(), d);
        d
    }

    pub fn dense(&self, id: &str) -> Option<u32> {
        self.dense.get(id).copied()
    }

    pub fn external(&self, dense: u32) -> Option<&str> {
        self.external.get(dense as usize).map(String::as_str)
    }

    pub fn external_ids(&self) -> &[String] {
        &self.external
    }

    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }
}

/// Per-behavior user→item adjacency over dense ids.
///
/// `adj[k][u]` is the sorted, duplicate-free list of items user `u`
/// interacted with under behavior `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    schema: BehaviorSchema,
    num_users: usize,
    num_items: usize,
    adj: Vec<Vec<Vec<u32>>>,
    users: IdMap,
    items: IdMap,
}

impl InteractionDataset {
    /// Parses one `user<TAB>item` text source per behavior (schema order).
    ///
    /// Dense ids are assigned in first-seen order across every source in
    /// schema order. Blank lines are skipped, CRLF endings are accepted.
    pub fn from_sources<S: AsRef<str>>(schema: BehaviorSchema, sources: &[S]) -> Result<Self> {
        let k = schema.num_behaviors();
        if sources.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "{} sources for {k} behaviors",
                sources.len()
            )));
        }
        let mut users = IdMap::new();
        let mut items = IdMap::new();
        let mut edges: Vec<Vec<(u32, u32)>> = vec![Vec::new(); k];
        for (b, src) in sources.iter().enumerate() {
            for (lineno, raw) in src.as_ref().split('\n').enumerate() {
                let line = raw.strip_suffix('\r').unwrap_or(raw);
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 2 || fields[0].is_empty() || fields[1].is_empty() {
                    return Err(Error::MalformedLine {
                        source_index: b,
                        line: lineno + 1,
                        fields: fields.len(),
                    });
                }
                let u = users.get_or_insert(fields[0]);
                let i = items.get_or_insert(fields[1]);
                edges[b].push((u, i));
            }
        }
        if users.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Self::assemble(schema, users, items, edges)
    }

    /// Builds a dataset from dense edges with generated external ids
    /// (`u0, u1, ...` and `i0, i1, ...`).
    pub fn from_edges(
        schema: BehaviorSchema,
        num_users: usize,
        num_items: usize,
        edges: Vec<Vec<(u32, u32)>>,
    ) -> Result<Self> {
        Self::from_edges_with_ids(
            schema,
            IdMap::sequential("u", num_users),
            IdMap::sequential("i", num_items),
            edges,
        )
    }

    pub fn from_edges_with_ids(
        schema: BehaviorSchema,
        users: IdMap,
        items: IdMap,
        edges: Vec<Vec<(u32, u32)>>,
    ) -> Result<Self> {
        if edges.len() != schema.num_behaviors() {
            return Err(Error::ShapeMismatch(format!(
                "{} edge lists for {} behaviors",
                edges.len(),
                schema.num_behaviors()
            )));
        }
        for list in &edges {
            for &(u, i) in list {
                if u as usize >= users.len() {
                    return Err(Error::OutOfRange {
                        what: "user",
                        value: u as usize,
                        bound: users.len(),
                    });
                }
                if i as usize >= items.len() {
                    return Err(Error::OutOfRange {
                        what: "item",
                        value: i as usize,
                        bound: items.len(),
                    });
                }
            }
        }
        Self::assemble(schema, users, items, edges)
    }

    fn assemble(
        schema: BehaviorSchema,
        users: IdMap,
        items: IdMap,
        edges: Vec<Vec<(u32, u32)>>,
    ) -> Result<Self> {
        let m = users.len();
        let adj = edges
            .into_iter()
            .map(|list| {
                let mut per_user = vec![Vec::new(); m];
                for (u, i) in list {
                    per_user[u as usize].push(i);
                }
                for l in &mut per_user {
                    l.sort_unstable();
                    l.dedup();
                }
                per_user
            })
            .collect();
        Ok(Self {
            schema,
            num_users: m,
            num_items: items.len(),
            adj,
            users,
            items,
        })
    }

    pub fn schema(&self) -> &BehaviorSchema {
        &self.schema
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_behaviors(&self) -> usize {
        self.schema.num_behaviors()
    }

    pub fn target(&self) -> usize {
        self.schema.target()
    }

    pub fn user_ids(&self) -> &IdMap {
        &self.users
    }

    pub fn item_ids(&self) -> &IdMap {
        &self.items
    }

    /// Items `u` interacted with under behavior `k`, ascending.
    pub fn items_of(&self, k: usize, u: u32) -> &[u32] {
        &self.adj[k][u as usize]
    }

    pub fn behavior_lists(&self, k: usize) -> &[Vec<u32>] {
        &self.adj[k]
    }

    pub fn num_edges(&self, k: usize) -> usize {
        self.adj[k].iter().map(Vec::len).sum()
    }

    /// Total interactions of each user summed over behaviors.
    pub fn user_activity(&self) -> Vec<usize> {
        (0..self.num_users)
            .map(|u| self.adj.iter().map(|b| b[u].len()).sum())
            .collect()
    }

    /// `counts[i * K + k]` = number of users that interacted with item `i`
    /// under behavior `k`.
    pub fn item_behavior_counts(&self) -> Vec<usize> {
        let k = self.num_behaviors();
        let mut counts = vec![0usize; self.num_items * k];
        for (b, lists) in self.adj.iter().enumerate() {
            for l in lists {
                for &i in l {
                    counts[i as usize * k + b] += 1;
                }
            }
        }
        counts
    }

    fn with_target_lists(&self, target_lists: Vec<Vec<u32>>) -> Self {
        let mut out = self.clone();
        out.adj[self.target()] = target_lists;
        out
    }
}

/// Training data plus at most one held-out target item per user.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: InteractionDataset,
    pub test_positives: Vec<Option<u32>>,
    pub seed: u64,
}

impl SplitDataset {
    pub fn num_test(&self) -> usize {
        self.test_positives.iter().filter(|t| t.is_some()).count()
    }

    /// `(user, held-out item)` pairs in ascending user order.
    pub fn test_pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.test_positives
            .iter()
            .enumerate()
            .filter_map(|(u, t)| t.map(|i| (u as u32, i)))
    }
}

/// Moves one uniformly chosen target interaction to the test set for every
/// user with at least two target interactions.
pub fn split_leave_one_out(ds: &InteractionDataset, seed: u64) -> SplitDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = ds.target();
    let mut test = vec![None; ds.num_users()];
    let lists = ds
        .behavior_lists(t)
        .iter()
        .enumerate()
        .map(|(u, items)| {
            if items.len() < 2 {
                return items.clone();
            }
            let pick = rng.random_range(0..items.len());
            test[u] = Some(items[pick]);
            let mut rest = items.clone();
            rest.remove(pick);
            rest
        })
        .collect();
    SplitDataset {
        train: ds.with_target_lists(lists),
        test_positives: test,
        seed,
    }
}

/// Relative-frequency bias proxies `b_{u,k}` and `b_{i,k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasTable {
    num_behaviors: usize,
    user: Vec<f64>,
    item: Vec<f64>,
}

fn normalize_rows(counts: &[usize], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; counts.len()];
    for (row_out, row) in out.chunks_mut(k).zip(counts.chunks(k)) {
        let total: usize = row.iter().sum();
        if total == 0 {
            continue;
        }
        for (o, &c) in row_out.iter_mut().zip(row) {
            *o = c as f64 / total as f64;
        }
    }
    out
}

impl BiasTable {
    /// Builds a table from row-major `M×K` and `N×K` matrices.
    pub fn from_rows(num_behaviors: usize, user: Vec<f64>, item: Vec<f64>) -> Result<Self> {
        if num_behaviors == 0
            || !user.len().is_multiple_of(num_behaviors)
            || !item.len().is_multiple_of(num_behaviors)
        {
            return Err(Error::ShapeMismatch("bias rows must have K columns".into()));
        }
        Ok(Self {
            num_behaviors,
            user,
            item,
        })
    }

    pub fn num_behaviors(&self) -> usize {
        self.num_behaviors
    }

    pub fn num_users(&self) -> usize {
        self.user.len() / self.num_behaviors
    }

    pub fn num_items(&self) -> usize {
        self.item.len() / self.num_behaviors
    }

    pub fn user(&self, u: u32, k: usize) -> f64 {
        self.user[u as usize * self.num_behaviors + k]
    }

    pub fn item(&self, i: u32, k: usize) -> f64 {
        self.item[i as usize * self.num_behaviors + k]
    }

    pub fn user_row(&self, u: u32) -> &[f64] {
        let k = self.num_behaviors;
        &self.user[u as usize * k..(u as usize + 1) * k]
    }

    pub fn item_row(&self, i: u32) -> &[f64] {
        let k = self.num_behaviors;
        &self.item[i as usize * k..(i as usize + 1) * k]
    }
}

/// `b_{u,k} = |I_u^k| / Σ_j |I_u^j|`, and the item analogue; entities with
/// no interactions get all-zero rows.
pub fn compute_bias_table(ds: &InteractionDataset) -> BiasTable {
    let k = ds.num_behaviors();
    let mut user_counts = vec![0usize; ds.num_users() * k];
    for b in 0..k {
        for (u, l) in ds.behavior_lists(b).iter().enumerate() {
            user_counts[u * k + b] = l.len();
        }
    }
    BiasTable {
        num_behaviors: k,
        user: normalize_rows(&user_counts, k),
        item: normalize_rows(&ds.item_behavior_counts(), k),
    }
}

/// Per-user overlap `J(u, k, K_t)` between each behavior and the target.
#[derive(Debug, Clone, PartialEq)]
pub struct JaccardTable {
    num_behaviors: usize,
    values: Vec<f64>,
    epsilon: f64,
}

impl JaccardTable {
    pub fn get(&self, u: u32, k: usize) -> f64 {
        self.values[u as usize * self.num_behaviors + k]
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn num_users(&self) -> usize {
        self.values.len() / self.num_behaviors
    }
}

/// Sizes of intersection and union of two ascending, duplicate-free lists.
pub fn sorted_overlap(a: &[u32], b: &[u32]) -> (usize, usize) {
    let (mut i, mut j, mut inter) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
            core::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    (inter, a.len() + b.len() - inter)
}

pub fn compute_jaccard(ds: &InteractionDataset) -> JaccardTable {
    compute_jaccard_with(ds, DEFAULT_JACCARD_EPSILON)
}

pub fn compute_jaccard_with(ds: &InteractionDataset, epsilon: f64) -> JaccardTable {
    let k = ds.num_behaviors();
    let t = ds.target();
    let mut values = vec![0.0; ds.num_users() * k];
    for u in 0..ds.num_users() {
        let target = ds.items_of(t, u as u32);
        for b in 0..k {
            let (inter, union) = sorted_overlap(ds.items_of(b, u as u32), target);
            values[u * k + b] = inter as f64 / (union as f64 + epsilon);
        }
    }
    JaccardTable {
        num_behaviors: k,
        values,
        epsilon,
    }
}

/// Draws `n` items uniformly (with replacement) among those `u` has not
/// interacted with under the split's target behavior.
pub fn sample_negatives<R: Rng + ?Sized>(
    split: &SplitDataset,
    u: u32,
    n: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    sample_negatives_in(&split.train, split.train.target(), u, n, rng)
}

/// Negative sampling against an arbitrary behavior's train list.
pub fn sample_negatives_in<R: Rng + ?Sized>(
    ds: &InteractionDataset,
    behavior: usize,
    u: u32,
    n: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    if u as usize >= ds.num_users() {
        return Err(Error::OutOfRange {
            what: "user",
            value: u as usize,
            bound: ds.num_users(),
        });
    }
    let seen = ds.items_of(behavior, u);
    let n_items = ds.num_items();
    if seen.len() >= n_items {
        return Err(Error::NoNegativeCandidates { user: u, behavior });
    }
    let mut out = Vec::with_capacity(n);
    if seen.len() * 2 <= n_items {
        while out.len() < n {
            let cand = rng.random_range(0..n_items as u32);
            if seen.binary_search(&cand).is_err() {
                out.push(cand);
            }
        }
    } else {
        let free: Vec<u32> = (0..n_items as u32)
            .filter(|c| seen.binary_search(c).is_err())
            .collect();
        for _ in 0..n {
            out.push(free[rng.random_range(0..free.len())]);
        }
    }
    Ok(out)
}
