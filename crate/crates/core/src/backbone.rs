//! Embedding backbones: per-behavior tables (MF), light propagation over
//! each behavior graph, and a cascaded variant that feeds each behavior's
//! output into the next.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::InteractionDataset;
use crate::math::{axpy, dot, sqrt};
use crate::{Error, Result};

/// Standard deviation of the initial embedding entries.
pub const INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Mf,
    LightProp { layers: usize },
    Cascade { layers: usize },
}

impl BackboneKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BackboneKind::LightProp { layers: 0 } | BackboneKind::Cascade { layers: 0 } => Err(
                Error::InvalidInput("graph backbones need at least one layer".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn uses_graph(&self) -> bool {
        !matches!(self, BackboneKind::Mf)
    }

    /// Base tables per side: one per behavior for MF, one shared otherwise.
    pub fn tables_per_side(&self, num_behaviors: usize) -> usize {
        match self {
            BackboneKind::Mf => num_behaviors,
            _ => 1,
        }
    }

    pub fn layers(&self) -> usize {
        match *self {
            BackboneKind::Mf => 0,
            BackboneKind::LightProp { layers } | BackboneKind::Cascade { layers } => layers,
        }
    }
}

/// Symmetrically normalized bipartite adjacency over `M + N` nodes (users
/// first, then items) in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    offsets: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn from_lists(num_users: usize, num_items: usize, lists: &[Vec<u32>]) -> Self {
        let n = num_users + num_items;
        let mut deg = vec![0usize; n];
        for (u, l) in lists.iter().enumerate() {
            deg[u] = l.len();
            for &i in l {
                deg[num_users + i as usize] += 1;
            }
        }
        let mut offsets = vec![0usize; n + 1];
        for v in 0..n {
            offsets[v + 1] = offsets[v] + deg[v];
        }
        let mut cols = vec![0u32; offsets[n]];
        let mut vals = vec![0.0; offsets[n]];
        let mut fill = offsets.clone();
        for (u, l) in lists.iter().enumerate() {
            for &i in l {
                let iv = num_users + i as usize;
                let w = 1.0 / sqrt((deg[u] * deg[iv]) as f64);
                cols[fill[u]] = iv as u32;
                vals[fill[u]] = w;
                fill[u] += 1;
                cols[fill[iv]] = u as u32;
                vals[fill[iv]] = w;
                fill[iv] += 1;
            }
        }
        Self {
            offsets,
            cols,
            vals,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Neighbor ids and weights of node `v`.
    pub fn row(&self, v: usize) -> (&[u32], &[f64]) {
        let r = self.offsets[v]..self.offsets[v + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    /// `out = Â x` for node-major `x` with `d` columns.
    pub fn apply(&self, x: &[f64], d: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for v in 0..self.num_nodes() {
            let (cols, vals) = self.row(v);
            let dst = &mut out[v * d..(v + 1) * d];
            for (&c, &w) in cols.iter().zip(vals) {
                axpy(dst, w, &x[c as usize * d..(c as usize + 1) * d]);
            }
        }
    }

    /// Mean of `x, Âx, …, Â^L x`. The operator is self-adjoint because `Â`
    /// is symmetric, so the same routine backpropagates gradients.
    pub fn layer_mean(&self, x: &[f64], d: usize, layers: usize) -> Vec<f64> {
        let mut acc = x.to_vec();
        let mut cur = x.to_vec();
        let mut next = vec![0.0; x.len()];
        for _ in 0..layers {
            self.apply(&cur, d, &mut next);
            axpy(&mut acc, 1.0, &next);
            core::mem::swap(&mut cur, &mut next);
        }
        let scale = 1.0 / (layers + 1) as f64;
        acc.iter_mut().for_each(|a| *a *= scale);
        acc
    }
}

/// One normalized adjacency per behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationGraph {
    pub num_users: usize,
    pub num_items: usize,
    pub behaviors: Vec<NormalizedAdjacency>,
}

impl PropagationGraph {
    pub fn from_dataset(ds: &InteractionDataset) -> Self {
        Self {
            num_users: ds.num_users(),
            num_items: ds.num_items(),
            behaviors: (0..ds.num_behaviors())
                .map(|k| {
                    NormalizedAdjacency::from_lists(
                        ds.num_users(),
                        ds.num_items(),
                        ds.behavior_lists(k),
                    )
                })
                .collect(),
        }
    }
}

/// Behavior-specific embeddings for every user and item. Each behavior
/// stores one node-major `(M + N) × d` block, users first.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    num_users: usize,
    num_items: usize,
    dim: usize,
    blocks: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn zeros(num_users: usize, num_items: usize, num_behaviors: usize, dim: usize) -> Self {
        Self {
            num_users,
            num_items,
            dim,
            blocks: vec![vec![0.0; (num_users + num_items) * dim]; num_behaviors],
        }
    }

    pub fn from_blocks(
        num_users: usize,
        num_items: usize,
        dim: usize,
        blocks: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if blocks
            .iter()
            .any(|b| b.len() != (num_users + num_items) * dim)
        {
            return Err(Error::ShapeMismatch("embedding block size".into()));
        }
        Ok(Self {
            num_users,
            num_items,
            dim,
            blocks,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_behaviors(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block(&self, k: usize) -> &[f64] {
        &self.blocks[k]
    }

    pub fn user(&self, k: usize, u: u32) -> &[f64] {
        let d = self.dim;
        &self.blocks[k][u as usize * d..(u as usize + 1) * d]
    }

    pub fn item(&self, k: usize, i: u32) -> &[f64] {
        let d = self.dim;
        let v = self.num_users + i as usize;
        &self.blocks[k][v * d..(v + 1) * d]
    }

    pub fn user_mut(&mut self, k: usize, u: u32) -> &mut [f64] {
        let d = self.dim;
        &mut self.blocks[k][u as usize * d..(u as usize + 1) * d]
    }

    pub fn item_mut(&mut self, k: usize, i: u32) -> &mut [f64] {
        let d = self.dim;
        let v = self.num_users + i as usize;
        &mut self.blocks[k][v * d..(v + 1) * d]
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|x| x.is_finite())
    }
}

/// Initial base tables: `user[t]` is `M × d`, `item[t]` is `N × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseTables {
    pub user: Vec<Vec<f64>>,
    pub item: Vec<Vec<f64>>,
}

/// i.i.d. `N(0, 0.1²)` base tables, `tables_per_side` of each.
pub fn init_embeddings(
    kind: BackboneKind,
    num_users: usize,
    num_items: usize,
    num_behaviors: usize,
    dim: usize,
    seed: u64,
) -> BaseTables {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("positive std");
    let t = kind.tables_per_side(num_behaviors);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
    let user = (0..t).map(|_| draw(num_users * dim)).collect();
    let item = (0..t).map(|_| draw(num_items * dim)).collect();
    BaseTables { user, item }
}

/// Shape description of a backbone instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backbone {
    pub kind: BackboneKind,
    pub num_users: usize,
    pub num_items: usize,
    pub num_behaviors: usize,
    pub dim: usize,
}

impl Backbone {
    fn check(
        &self,
        user: &[&[f64]],
        item: &[&[f64]],
        graph: Option<&PropagationGraph>,
    ) -> Result<()> {
        let t = self.kind.tables_per_side(self.num_behaviors);
        if user.len() != t || item.len() != t {
            return Err(Error::ShapeMismatch(format!(
                "expected {t} tables per side, got {}/{}",
                user.len(),
                item.len()
            )));
        }
        if user.iter().any(|x| x.len() != self.num_users * self.dim)
            || item.iter().any(|x| x.len() != self.num_items * self.dim)
        {
            return Err(Error::ShapeMismatch("base table size".into()));
        }
        if self.kind.uses_graph() {
            let g =
                graph.ok_or_else(|| Error::InvalidInput("graph backbone needs graphs".into()))?;
            if g.behaviors.len() != self.num_behaviors
                || g.num_users != self.num_users
                || g.num_items != self.num_items
            {
                return Err(Error::ShapeMismatch("propagation graph".into()));
            }
        }
        Ok(())
    }

    fn stack(user: &[f64], item: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(user.len() + item.len());
        v.extend_from_slice(user);
        v.extend_from_slice(item);
        v
    }

    /// Computes every `e_{u,k}` and `e_{i,k}` from the base tables.
    pub fn forward(
        &self,
        user: &[&[f64]],
        item: &[&[f64]],
        graph: Option<&PropagationGraph>,
    ) -> Result<EmbeddingSet> {
        self.check(user, item, graph)?;
        let d = self.dim;
        let blocks = match self.kind {
            BackboneKind::Mf => (0..self.num_behaviors)
                .map(|k| Self::stack(user[k], item[k]))
                .collect(),
            BackboneKind::LightProp { layers } => {
                let g = graph.expect("checked");
                let base = Self::stack(user[0], item[0]);
                g.behaviors
                    .iter()
                    .map(|a| a.layer_mean(&base, d, layers))
                    .collect()
            }
            BackboneKind::Cascade { layers } => {
                let g = graph.expect("checked");
                let base = Self::stack(user[0], item[0]);
                let mut blocks: Vec<Vec<f64>> = Vec::with_capacity(self.num_behaviors);
                for (k, a) in g.behaviors.iter().enumerate() {
                    let input = if k == 0 {
                        base.clone()
                    } else {
                        let mut x = blocks[k - 1].clone();
                        axpy(&mut x, 1.0, &base);
                        x
                    };
                    blocks.push(a.layer_mean(&input, d, layers));
                }
                blocks
            }
        };
        EmbeddingSet::from_blocks(self.num_users, self.num_items, d, blocks)
    }

    /// Pulls embedding gradients back onto the base tables. Returns
    /// `(user, item)` gradients laid out like the forward inputs.
    pub fn backward(
        &self,
        grad: &EmbeddingSet,
        graph: Option<&PropagationGraph>,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let d = self.dim;
        let split_at = self.num_users * d;
        let split = |block: Vec<f64>| -> (Vec<f64>, Vec<f64>) {
            let mut u = block;
            let i = u.split_off(split_at);
            (u, i)
        };
        match self.kind {
            BackboneKind::Mf => (0..self.num_behaviors)
                .map(|k| split(grad.block(k).to_vec()))
                .unzip(),
            BackboneKind::LightProp { layers } => {
                let g = graph.expect("graph backbone");
                let mut total = vec![0.0; grad.block(0).len()];
                for (k, a) in g.behaviors.iter().enumerate() {
                    axpy(&mut total, 1.0, &a.layer_mean(grad.block(k), d, layers));
                }
                let (u, i) = split(total);
                (vec![u], vec![i])
            }
            BackboneKind::Cascade { layers } => {
                let g = graph.expect("graph backbone");
                let mut total = vec![0.0; grad.block(0).len()];
                // gradient w.r.t. the input of behavior k+1
                let mut carry: Option<Vec<f64>> = None;
                for k in (0..self.num_behaviors).rev() {
                    let mut g_out = grad.block(k).to_vec();
                    if let Some(c) = &carry {
                        axpy(&mut g_out, 1.0, c);
                    }
                    let g_in = g.behaviors[k].layer_mean(&g_out, d, layers);
                    axpy(&mut total, 1.0, &g_in);
                    carry = Some(g_in);
                }
                let (u, i) = split(total);
                (vec![u], vec![i])
            }
        }
    }
}

/// `f_k(u, i) = ⟨e_{u,k}, e_{i,k}⟩`.
pub fn match_score(es: &EmbeddingSet, k: usize, u: u32, i: u32) -> f64 {
    dot(es.user(k, u), es.item(k, i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::BehaviorSchema;

    fn one_edge_graph() -> PropagationGraph {
        let ds = InteractionDataset::from_edges(
            BehaviorSchema::with_target(&["click", "buy"], "buy").unwrap(),
            1,
            1,
            vec![vec![(0, 0)], vec![]],
        )
        .unwrap();
        PropagationGraph::from_dataset(&ds)
    }

    #[test]
    fn init_is_seeded_with_expected_table_counts() {
        let a = init_embeddings(BackboneKind::Mf, 1, 1, 3, 1, 7);
        assert_eq!(a, init_embeddings(BackboneKind::Mf, 1, 1, 3, 1, 7));
        assert_eq!(a.user.len() + a.item.len(), 6);
        let g = init_embeddings(BackboneKind::LightProp { layers: 2 }, 4, 5, 3, 2, 7);
        assert_eq!(g.user.len() + g.item.len(), 2);
        assert_eq!(g.user[0].len(), 8);
        assert_eq!(g.item[0].len(), 10);
    }

    #[test]
    fn init_sample_mean_within_three_standard_errors() {
        let t = init_embeddings(
            BackboneKind::LightProp { layers: 1 },
            500_000,
            500_000,
            2,
            1,
            3,
        );
        let n = 1_000_000.0;
        let mean: f64 = t.user[0].iter().chain(&t.item[0]).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * INIT_STD / 1000.0, "mean {mean}");
    }

    #[test]
    fn single_edge_propagation_by_hand() {
        let g = one_edge_graph();
        let bb = Backbone {
            kind: BackboneKind::LightProp { layers: 1 },
            num_users: 1,
            num_items: 1,
            num_behaviors: 2,
            dim: 1,
        };
        let es = bb.forward(&[&[2.0]], &[&[4.0]], Some(&g)).unwrap();
        assert_eq!(es.user(0, 0), &[3.0]);
        assert_eq!(es.item(0, 0), &[3.0]);
        // behavior 1 has no edges: mean of {base, 0}
        assert_eq!(es.user(1, 0), &[1.0]);
        assert_eq!(es.item(1, 0), &[2.0]);
    }

    #[test]
    fn empty_graph_scales_base_by_layer_count() {
        let g = one_edge_graph();
        let bb = Backbone {
            kind: BackboneKind::LightProp { layers: 3 },
            num_users: 1,
            num_items: 1,
            num_behaviors: 2,
            dim: 1,
        };
        let es = bb.forward(&[&[2.0]], &[&[4.0]], Some(&g)).unwrap();
        assert_eq!(es.user(1, 0), &[0.5]);
        assert_eq!(es.item(1, 0), &[1.0]);
    }

    #[test]
    fn mf_forward_is_identity() {
        let bb = Backbone {
            kind: BackboneKind::Mf,
            num_users: 1,
            num_items: 2,
            num_behaviors: 2,
            dim: 2,
        };
        let u = [[1.0, 2.0], [3.0, 4.0]];
        let i = [[5.0, 6.0, 7.0, 8.0], [9.0, 10.0, 11.0, 12.0]];
        let es = bb.forward(&[&u[0], &u[1]], &[&i[0], &i[1]], None).unwrap();
        assert_eq!(es.user(1, 0), &[3.0, 4.0]);
        assert_eq!(es.item(0, 1), &[7.0, 8.0]);
        assert_eq!(match_score(&es, 0, 0, 1), 1.0 * 7.0 + 2.0 * 8.0);
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let bb = Backbone {
            kind: BackboneKind::LightProp { layers: 1 },
            num_users: 1,
            num_items: 1,
            num_behaviors: 2,
            dim: 1,
        };
        assert!(bb.forward(&[&[1.0]], &[&[1.0]], None).is_err());
        assert!(bb
            .forward(&[&[1.0, 2.0]], &[&[1.0]], Some(&one_edge_graph()))
            .is_err());
        assert!(BackboneKind::Cascade { layers: 0 }.validate().is_err());
    }

    #[test]
    fn normalized_weights_use_both_degrees() {
        // user 0 -> items {0, 1}; user 1 -> item {0}
        let a = NormalizedAdjacency::from_lists(2, 2, &[vec![0, 1], vec![0]]);
        let (cols, vals) = a.row(0);
        assert_eq!(cols, &[2, 3]);
        assert!((vals[0] - 1.0 / 2.0f64.sqrt() / 2.0f64.sqrt()).abs() < 1e-15);
        assert!((vals[1] - 1.0 / 2.0f64.sqrt()).abs() < 1e-15);
        assert_eq!(a.nnz(), 6);
    }
}
