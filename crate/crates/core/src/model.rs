//! Model configuration, ablation switches and the trainable parameter
//! layout.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{init_embeddings, Backbone, BackboneKind, EmbeddingSet, PropagationGraph};
use crate::causal::DebiasParams;
use crate::contrast::{ClConfig, TemperatureRule};
use crate::fusion::{FusionParams, MoeGate, MoeShape, MoeWeights};
use crate::params::{ParamGroup, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub dim: usize,
    pub n_experts: usize,
    pub expert_hidden: usize,
    pub debias: DebiasParams,
    /// Initial λ values and the aggregation switches.
    pub fusion: FusionParams,
    pub temperature: TemperatureRule,
    pub cl: ClConfig,
    /// Also train each auxiliary behavior with BPR on its base score.
    pub aux_bpr: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::LightProp { layers: 2 },
            dim: 64,
            n_experts: 4,
            expert_hidden: 64,
            debias: DebiasParams::default(),
            fusion: FusionParams::default(),
            temperature: TemperatureRule::default(),
            cl: ClConfig::default(),
            aux_bpr: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.temperature.validate()?;
        if self.dim == 0 || self.n_experts == 0 || self.expert_hidden == 0 {
            return Err(Error::InvalidInput(
                "dim, n_experts and expert_hidden must be positive".into(),
            ));
        }
        if !(self.debias.eps_b > 0.0) {
            return Err(Error::InvalidInput("eps_b must be positive".into()));
        }
        if self.cl.beta < 0.0 || self.cl.lambda_cl < 0.0 {
            return Err(Error::InvalidInput(
                "beta and lambda_cl must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            user_bias: self.debias.user_bias_enabled,
            item_bias: self.debias.item_bias_enabled,
            jaccard: self.fusion.jaccard_enabled,
            moe: self.fusion.moe_enabled,
            agg: self.fusion.agg_enabled,
            cl: self.cl.cl_enabled,
        }
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.debias.user_bias_enabled = a.user_bias;
        self.debias.item_bias_enabled = a.item_bias;
        self.fusion.jaccard_enabled = a.jaccard;
        self.fusion.moe_enabled = a.moe;
        self.fusion.agg_enabled = a.agg;
        self.cl.cl_enabled = a.cl;
        self
    }
}

/// Component switches; `true` means the component is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ablation {
    pub user_bias: bool,
    pub item_bias: bool,
    pub jaccard: bool,
    pub moe: bool,
    pub agg: bool,
    pub cl: bool,
}

impl Ablation {
    pub const FULL: Self = Self::from_mask(0b11_1111);
    /// Every component off: the plain backbone trained with BPR.
    pub const VANILLA: Self = Self::from_mask(0);

    /// Bit order (low to high): user_bias, item_bias, jaccard, moe, agg, cl.
    pub const fn from_mask(mask: u8) -> Self {
        Self {
            user_bias: mask & 1 != 0,
            item_bias: mask & 2 != 0,
            jaccard: mask & 4 != 0,
            moe: mask & 8 != 0,
            agg: mask & 16 != 0,
            cl: mask & 32 != 0,
        }
    }

    pub fn mask(&self) -> u8 {
        (self.user_bias as u8)
            | (self.item_bias as u8) << 1
            | (self.jaccard as u8) << 2
            | (self.moe as u8) << 3
            | (self.agg as u8) << 4
            | (self.cl as u8) << 5
    }

    /// The full model and the six single-component removals, in table order.
    pub fn standard_variants() -> [(&'static str, Ablation); 7] {
        let f = Self::FULL;
        [
            ("full", f),
            (
                "w/o U-Bias",
                Ablation {
                    user_bias: false,
                    ..f
                },
            ),
            (
                "w/o I-Bias",
                Ablation {
                    item_bias: false,
                    ..f
                },
            ),
            ("w/o Agg.", Ablation { agg: false, ..f }),
            (
                "w/o Jaccard",
                Ablation {
                    jaccard: false,
                    ..f
                },
            ),
            ("w/o MoE", Ablation { moe: false, ..f }),
            ("w/o CL", Ablation { cl: false, ..f }),
        ]
    }
}

/// Sizes of the data a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub num_users: usize,
    pub num_items: usize,
    pub num_behaviors: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    user_tables: Vec<usize>,
    item_tables: Vec<usize>,
    router_w: usize,
    router_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    lambda_j: usize,
    lambda_m: usize,
    tau: Option<usize>,
}

/// A configured model with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: Dims,
    pub params: ParamStore,
    layout: Layout,
}

const MOE_SEED_SALT: u64 = 0x6d6f_655f_6761_7465;

fn table_name(side: &str, kind: BackboneKind, t: usize) -> alloc::string::String {
    match kind {
        BackboneKind::Mf => format!("{side}_emb.{t}"),
        _ => format!("{side}_emb"),
    }
}

/// Builds the named, shaped (but zero-filled) groups for a configuration.
fn skeleton(config: &ModelConfig, dims: Dims) -> ParamStore {
    let d = config.dim;
    let t = config.backbone.tables_per_side(dims.num_behaviors);
    let shape = MoeShape::for_embedding_dim(d, config.n_experts, config.expert_hidden);
    let mut p = ParamStore::new();
    for k in 0..t {
        p.push(ParamGroup::zeros(
            table_name("user", config.backbone, k),
            vec![dims.num_users, d],
        ));
    }
    for k in 0..t {
        p.push(ParamGroup::zeros(
            table_name("item", config.backbone, k),
            vec![dims.num_items, d],
        ));
    }
    let (e, h, x) = (shape.n_experts, shape.hidden, shape.input_dim);
    p.push(ParamGroup::zeros("moe.router_w", vec![e, x]));
    p.push(ParamGroup::zeros("moe.router_b", vec![e]));
    p.push(ParamGroup::zeros("moe.expert_w1", vec![e, h, x]));
    p.push(ParamGroup::zeros("moe.expert_b1", vec![e, h]));
    p.push(ParamGroup::zeros("moe.expert_w2", vec![e, h]));
    p.push(ParamGroup::zeros("moe.expert_b2", vec![e]));
    p.push(ParamGroup::zeros("fusion.lambda_j", vec![1]));
    p.push(ParamGroup::zeros("fusion.lambda_m", vec![1]));
    if config.temperature.is_learnable() {
        p.push(ParamGroup::zeros("contrast.tau", vec![1]));
    }
    p
}

fn layout_of(config: &ModelConfig, p: &ParamStore) -> Layout {
    let t = p
        .groups()
        .iter()
        .filter(|g| g.name.starts_with("user_emb"))
        .count();
    let idx = |n: &str| p.index_of(n).expect("skeleton group");
    Layout {
        user_tables: (0..t).collect(),
        item_tables: (t..2 * t).collect(),
        router_w: idx("moe.router_w"),
        router_b: idx("moe.router_b"),
        w1: idx("moe.expert_w1"),
        b1: idx("moe.expert_b1"),
        w2: idx("moe.expert_w2"),
        b2: idx("moe.expert_b2"),
        lambda_j: idx("fusion.lambda_j"),
        lambda_m: idx("fusion.lambda_m"),
        tau: config
            .temperature
            .is_learnable()
            .then(|| idx("contrast.tau")),
    }
}

impl Model {
    /// Fresh parameters: embeddings from `seed`, gate weights from a salted
    /// stream, `λ` from the configured initial values.
    pub fn new(config: ModelConfig, dims: Dims, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = skeleton(&config, dims);
        let layout = layout_of(&config, &params);
        let tables = init_embeddings(
            config.backbone,
            dims.num_users,
            dims.num_items,
            dims.num_behaviors,
            config.dim,
            seed,
        );
        for (slot, data) in layout.user_tables.iter().zip(tables.user) {
            params.data_mut(*slot).copy_from_slice(&data);
        }
        for (slot, data) in layout.item_tables.iter().zip(tables.item) {
            params.data_mut(*slot).copy_from_slice(&data);
        }
        let shape = MoeShape::for_embedding_dim(config.dim, config.n_experts, config.expert_hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ MOE_SEED_SALT);
        let moe = MoeWeights::init(shape, &mut rng);
        params
            .data_mut(layout.router_w)
            .copy_from_slice(&moe.router_w);
        params.data_mut(layout.w1).copy_from_slice(&moe.w1);
        params.data_mut(layout.w2).copy_from_slice(&moe.w2);
        params.data_mut(layout.lambda_j)[0] = config.fusion.lambda_j;
        params.data_mut(layout.lambda_m)[0] = config.fusion.lambda_m;
        if let (Some(slot), TemperatureRule::Learnable { init, .. }) =
            (layout.tau, config.temperature)
        {
            params.data_mut(slot)[0] = init;
        }
        Ok(Self {
            config,
            dims,
            params,
            layout,
        })
    }

    /// Wraps loaded parameters, checking names and shapes against the
    /// configuration.
    pub fn from_params(config: ModelConfig, dims: Dims, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = skeleton(&config, dims);
        expected.check_layout(&params)?;
        let layout = layout_of(&config, &params);
        Ok(Self {
            config,
            dims,
            params,
            layout,
        })
    }

    pub fn backbone(&self) -> Backbone {
        Backbone {
            kind: self.config.backbone,
            num_users: self.dims.num_users,
            num_items: self.dims.num_items,
            num_behaviors: self.dims.num_behaviors,
            dim: self.config.dim,
        }
    }

    pub fn embeddings(&self, graph: &PropagationGraph) -> Result<EmbeddingSet> {
        let user: Vec<&[f64]> = self
            .layout
            .user_tables
            .iter()
            .map(|&i| self.params.data(i))
            .collect();
        let item: Vec<&[f64]> = self
            .layout
            .item_tables
            .iter()
            .map(|&i| self.params.data(i))
            .collect();
        self.backbone().forward(&user, &item, Some(graph))
    }

    pub fn moe(&self) -> MoeGate<'_> {
        let l = &self.layout;
        MoeGate {
            shape: MoeShape::for_embedding_dim(
                self.config.dim,
                self.config.n_experts,
                self.config.expert_hidden,
            ),
            router_w: self.params.data(l.router_w),
            router_b: self.params.data(l.router_b),
            w1: self.params.data(l.w1),
            b1: self.params.data(l.b1),
            w2: self.params.data(l.w2),
            b2: self.params.data(l.b2),
        }
    }

    /// Current `λ_J`, `λ_M` with the configured switches.
    pub fn fusion(&self) -> FusionParams {
        FusionParams {
            lambda_j: self.params.data(self.layout.lambda_j)[0],
            lambda_m: self.params.data(self.layout.lambda_m)[0],
            ..self.config.fusion
        }
    }

    pub fn tau_raw(&self) -> Option<f64> {
        self.layout.tau.map(|i| self.params.data(i)[0])
    }

    /// Group indices of the backbone base tables.
    pub fn backbone_groups(&self) -> impl Iterator<Item = usize> + '_ {
        self.layout
            .user_tables
            .iter()
            .chain(&self.layout.item_tables)
            .copied()
    }

    pub(crate) fn table_slots(&self) -> (&[usize], &[usize]) {
        (&self.layout.user_tables, &self.layout.item_tables)
    }

    pub(crate) fn moe_slots(&self) -> [usize; 6] {
        let l = &self.layout;
        [l.router_w, l.router_b, l.w1, l.b1, l.w2, l.b2]
    }

    pub(crate) fn lambda_slots(&self) -> (usize, usize) {
        (self.layout.lambda_j, self.layout.lambda_m)
    }

    pub(crate) fn tau_slot(&self) -> Option<usize> {
        self.layout.tau
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> Dims {
        Dims {
            num_users: 3,
            num_items: 4,
            num_behaviors: 3,
            target: 2,
        }
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let cfg = ModelConfig {
            dim: 2,
            n_experts: 2,
            expert_hidden: 3,
            ..ModelConfig::default()
        };
        let a = Model::new(cfg.clone(), dims(), 1).unwrap();
        let b = Model::new(cfg.clone(), dims(), 99).unwrap();
        assert_eq!(a.params.num_values(), b.params.num_values());
        // shared tables (3+4)*2, router 2*6+2, experts 2*3*6 + 6 + 6 + 2, λ 2
        assert_eq!(a.params.num_values(), 14 + 14 + 36 + 14 + 2);
        let mf = Model::new(
            ModelConfig {
                backbone: BackboneKind::Mf,
                ..cfg
            },
            dims(),
            1,
        )
        .unwrap();
        assert_eq!(mf.params.num_values(), 3 * 14 + 14 + 36 + 14 + 2);
    }

    #[test]
    fn learnable_tau_adds_a_group() {
        let cfg = ModelConfig {
            dim: 2,
            temperature: TemperatureRule::Learnable {
                init: 0.3,
                min: 0.01,
                max: 1.0,
            },
            ..ModelConfig::default()
        };
        let m = Model::new(cfg, dims(), 0).unwrap();
        assert_eq!(m.tau_raw(), Some(0.3));
        assert_eq!(m.fusion().lambda_j, 0.5);
    }

    #[test]
    fn from_params_rejects_foreign_layout() {
        let cfg = ModelConfig {
            dim: 2,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg.clone(), dims(), 0).unwrap();
        assert!(Model::from_params(cfg.clone(), dims(), m.params.clone()).is_ok());
        let other = ModelConfig { dim: 3, ..cfg };
        assert!(Model::from_params(other, dims(), m.params).is_err());
    }

    #[test]
    fn ablation_masks_round_trip() {
        for mask in 0..64u8 {
            assert_eq!(Ablation::from_mask(mask).mask(), mask);
        }
        let variants = Ablation::standard_variants();
        assert_eq!(variants.len(), 7);
        assert_eq!(variants[0].1, Ablation::FULL);
        for (_, v) in &variants[1..] {
            assert_eq!(v.mask().count_ones(), 5);
        }
    }
}
