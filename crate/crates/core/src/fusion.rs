//! Adaptive aggregation of auxiliary behaviors: a structural (Jaccard) gate
//! and a semantic mixture-of-experts gate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::math::{axpy, dot, exp, sigmoid, sqrt};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoeShape {
    pub n_experts: usize,
    pub input_dim: usize,
    pub hidden: usize,
}

impl MoeShape {
    /// Gate input is `[e_u, e_i, b_u, b_i]`.
    pub fn for_embedding_dim(d: usize, n_experts: usize, hidden: usize) -> Self {
        Self {
            n_experts,
            input_dim: 2 * d + 2,
            hidden,
        }
    }

    pub fn router_w_len(&self) -> usize {
        self.n_experts * self.input_dim
    }

    pub fn w1_len(&self) -> usize {
        self.n_experts * self.hidden * self.input_dim
    }

    pub fn hidden_len(&self) -> usize {
        self.n_experts * self.hidden
    }
}

/// Borrowed view of the gate parameters.
///
/// Layout: `router_w[e][x]`, `router_b[e]`, `w1[e][h][x]`, `b1[e][h]`,
/// `w2[e][h]`, `b2[e]`.
#[derive(Debug, Clone, Copy)]
pub struct MoeGate<'a> {
    pub shape: MoeShape,
    pub router_w: &'a [f64],
    pub router_b: &'a [f64],
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
}

/// Owned gate parameters (also used to accumulate gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct MoeWeights {
    pub shape: MoeShape,
    pub router_w: Vec<f64>,
    pub router_b: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MoeWeights {
    pub fn zeros(shape: MoeShape) -> Self {
        Self {
            shape,
            router_w: vec![0.0; shape.router_w_len()],
            router_b: vec![0.0; shape.n_experts],
            w1: vec![0.0; shape.w1_len()],
            b1: vec![0.0; shape.hidden_len()],
            w2: vec![0.0; shape.hidden_len()],
            b2: vec![0.0; shape.n_experts],
        }
    }

    /// Normal weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(shape: MoeShape, rng: &mut R) -> Self {
        let mut w = Self::zeros(shape);
        let fill = |v: &mut [f64], fan_in: usize, rng: &mut R| {
            let n = Normal::new(0.0, 1.0 / sqrt(fan_in as f64)).expect("positive std");
            v.iter_mut().for_each(|x| *x = n.sample(rng));
        };
        fill(&mut w.router_w, shape.input_dim, rng);
        fill(&mut w.w1, shape.input_dim, rng);
        fill(&mut w.w2, shape.hidden, rng);
        w
    }

    pub fn view(&self) -> MoeGate<'_> {
        MoeGate {
            shape: self.shape,
            router_w: &self.router_w,
            router_b: &self.router_b,
            w1: &self.w1,
            b1: &self.b1,
            w2: &self.w2,
            b2: &self.b2,
        }
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct MoeCache {
    pub input: Vec<f64>,
    pub probs: Vec<f64>,
    pub hidden: Vec<f64>,
    pub outputs: Vec<f64>,
    pub value: f64,
}

pub fn gate_input(e_u: &[f64], e_i: &[f64], b_u: f64, b_i: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(e_u.len() + e_i.len() + 2);
    x.extend_from_slice(e_u);
    x.extend_from_slice(e_i);
    x.push(b_u);
    x.push(b_i);
    x
}

/// In-place numerically stable softmax.
pub fn softmax(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = exp(*x - max);
        total += *x;
    }
    xs.iter_mut().for_each(|x| *x /= total);
}

impl MoeGate<'_> {
    fn check(&self) -> Result<()> {
        let s = &self.shape;
        let ok = self.router_w.len() == s.router_w_len()
            && self.router_b.len() == s.n_experts
            && self.w1.len() == s.w1_len()
            && self.b1.len() == s.hidden_len()
            && self.w2.len() == s.hidden_len()
            && self.b2.len() == s.n_experts;
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("moe gate parameters".into()))
        }
    }

    pub fn forward_cached(&self, input: Vec<f64>, cache: &mut MoeCache) -> f64 {
        let s = self.shape;
        let (dx, h) = (s.input_dim, s.hidden);
        let mut probs: Vec<f64> = (0..s.n_experts)
            .map(|e| dot(&self.router_w[e * dx..(e + 1) * dx], &input) + self.router_b[e])
            .collect();
        softmax(&mut probs);
        let mut hidden = vec![0.0; s.hidden_len()];
        let mut outputs = vec![0.0; s.n_experts];
        for e in 0..s.n_experts {
            for j in 0..h {
                let row = (e * h + j) * dx;
                let z = dot(&self.w1[row..row + dx], &input) + self.b1[e * h + j];
                hidden[e * h + j] = if z > 0.0 { z } else { 0.0 };
            }
            outputs[e] =
                dot(&self.w2[e * h..(e + 1) * h], &hidden[e * h..(e + 1) * h]) + self.b2[e];
        }
        let value = dot(&probs, &outputs);
        *cache = MoeCache {
            input,
            probs,
            hidden,
            outputs,
            value,
        };
        value
    }

    pub fn forward(&self, input: Vec<f64>) -> f64 {
        let mut cache = MoeCache::default();
        self.forward_cached(input, &mut cache)
    }

    /// Accumulates `upstream · ∂g_moe/∂θ` into `grads` and `upstream ·
    /// ∂g_moe/∂input` into `dinput`.
    pub fn backward(
        &self,
        cache: &MoeCache,
        upstream: f64,
        grads: &mut MoeWeights,
        dinput: &mut [f64],
    ) {
        let s = self.shape;
        let (dx, h) = (s.input_dim, s.hidden);
        let x = &cache.input;
        for e in 0..s.n_experts {
            let p = cache.probs[e];
            let dr = upstream * p * (cache.outputs[e] - cache.value);
            axpy(&mut grads.router_w[e * dx..(e + 1) * dx], dr, x);
            grads.router_b[e] += dr;
            axpy(dinput, dr, &self.router_w[e * dx..(e + 1) * dx]);

            let dout = upstream * p;
            grads.b2[e] += dout;
            for j in 0..h {
                let hj = cache.hidden[e * h + j];
                grads.w2[e * h + j] += dout * hj;
                if hj > 0.0 {
                    let dz = dout * self.w2[e * h + j];
                    let row = (e * h + j) * dx;
                    axpy(&mut grads.w1[row..row + dx], dz, x);
                    grads.b1[e * h + j] += dz;
                    axpy(dinput, dz, &self.w1[row..row + dx]);
                }
            }
        }
    }
}

/// `g_moe = Σ_e softmax(router · x)_e · expert_e(x)` with
/// `x = [e_u, e_i, b_u, b_i]`.
pub fn moe_gate_forward(
    gate: &MoeGate<'_>,
    e_u: &[f64],
    e_i: &[f64],
    b_u: f64,
    b_i: f64,
) -> Result<f64> {
    gate.check()?;
    if e_u.len() != e_i.len() || 2 * e_u.len() + 2 != gate.shape.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "gate expects input {}, got embeddings {}/{}",
            gate.shape.input_dim,
            e_u.len(),
            e_i.len()
        )));
    }
    Ok(gate.forward(gate_input(e_u, e_i, b_u, b_i)))
}

/// Path weights and the aggregation ablation switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub lambda_j: f64,
    pub lambda_m: f64,
    pub jaccard_enabled: bool,
    pub moe_enabled: bool,
    pub agg_enabled: bool,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            lambda_j: 0.5,
            lambda_m: 0.5,
            jaccard_enabled: true,
            moe_enabled: true,
            agg_enabled: true,
        }
    }
}

/// `Con(k → K_t) = λ_J σ(f_k J) + λ_M σ(f_k g_moe)`; disabled paths add 0.
pub fn contribution(f_k: f64, jaccard: f64, g_moe: f64, p: &FusionParams) -> f64 {
    let mut con = 0.0;
    if p.jaccard_enabled {
        con += p.lambda_j * sigmoid(f_k * jaccard);
    }
    if p.moe_enabled {
        con += p.lambda_m * sigmoid(f_k * g_moe);
    }
    con
}

/// Partial derivatives of [`contribution`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ContributionGrad {
    pub d_f: f64,
    pub d_gmoe: f64,
    pub d_lambda_j: f64,
    pub d_lambda_m: f64,
}

pub fn contribution_grad(f_k: f64, jaccard: f64, g_moe: f64, p: &FusionParams) -> ContributionGrad {
    let mut g = ContributionGrad::default();
    if p.jaccard_enabled {
        let s = sigmoid(f_k * jaccard);
        g.d_lambda_j = s;
        g.d_f += p.lambda_j * s * (1.0 - s) * jaccard;
    }
    if p.moe_enabled {
        let s = sigmoid(f_k * g_moe);
        g.d_lambda_m = s;
        let ds = p.lambda_m * s * (1.0 - s);
        g.d_f += ds * g_moe;
        g.d_gmoe = ds * f_k;
    }
    g
}

/// `C_{K_t} = Σ_{k≠K_t} Con(k → K_t)`, or 0 with aggregation disabled.
pub fn total_contribution(contributions: &[f64], p: &FusionParams) -> f64 {
    if p.agg_enabled {
        contributions.iter().sum()
    } else {
        0.0
    }
}

/// `S_final = S_base · (1 + C)`.
#[inline]
pub fn final_score(s_base: f64, c: f64) -> f64 {
    s_base * (1.0 + c)
}
