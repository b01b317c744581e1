//! Training-time debiasing: the bias factor `g_k`, the debiased base score,
//! and the bias-free inference score.

use crate::backbone::{match_score, EmbeddingSet};
use crate::math::powf;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DebiasParams {
    pub gamma_u: f64,
    pub gamma_i: f64,
    pub eps_b: f64,
    pub user_bias_enabled: bool,
    pub item_bias_enabled: bool,
}

impl Default for DebiasParams {
    fn default() -> Self {
        Self {
            gamma_u: 0.1,
            gamma_i: 0.01,
            eps_b: 1e-3,
            user_bias_enabled: true,
            item_bias_enabled: true,
        }
    }
}

/// `g = (b_u + ε_b)^γ_u · (b_i + ε_b)^γ_i`; a disabled side contributes 1.
pub fn bias_factor(b_u: f64, b_i: f64, p: &DebiasParams) -> f64 {
    let user = if p.user_bias_enabled {
        powf(b_u + p.eps_b, p.gamma_u)
    } else {
        1.0
    };
    let item = if p.item_bias_enabled {
        powf(b_i + p.eps_b, p.gamma_i)
    } else {
        1.0
    };
    user * item
}

/// `S_base,k = f_k · g_k`.
#[inline]
pub fn base_score(f_k: f64, g_k: f64) -> f64 {
    f_k * g_k
}

/// `ŷ_ui = ⟨e_{u,K_t}, e_{i,K_t}⟩`. Reads nothing but the embeddings.
pub fn inference_score(es: &EmbeddingSet, target: usize, u: u32, i: u32) -> f64 {
    match_score(es, target, u, i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_exponents_give_unit_factor() {
        let p = DebiasParams {
            gamma_u: 0.0,
            gamma_i: 0.0,
            ..Default::default()
        };
        assert_eq!(bias_factor(0.3, 0.9, &p), 1.0);
    }

    #[test]
    fn item_only_factor() {
        let p = DebiasParams {
            gamma_u: 1.0,
            gamma_i: 1.0,
            eps_b: 1e-3,
            user_bias_enabled: false,
            item_bias_enabled: true,
        };
        assert!((bias_factor(0.9, 0.5, &p) - 0.501).abs() < 1e-15);
    }

    #[test]
    fn factor_increases_with_user_bias() {
        let p = DebiasParams {
            gamma_u: 0.5,
            ..Default::default()
        };
        for j in 0..100 {
            let lo = j as f64 / 101.0;
            let hi = lo + 0.5 / 101.0;
            assert!(bias_factor(hi, 0.2, &p) > bias_factor(lo, 0.2, &p));
        }
    }

    #[test]
    fn factor_is_positive_at_zero_bias() {
        let p = DebiasParams {
            gamma_u: 1.0,
            gamma_i: 1.0,
            ..Default::default()
        };
        assert!(bias_factor(0.0, 0.0, &p) > 0.0);
    }

    #[test]
    fn disabling_both_sides_makes_base_equal_match() {
        let p = DebiasParams {
            gamma_u: 1.0,
            gamma_i: 0.5,
            user_bias_enabled: false,
            item_bias_enabled: false,
            ..Default::default()
        };
        for f in [-2.5, 0.0, 0.125, 7.0] {
            assert_eq!(base_score(f, bias_factor(0.4, 0.1, &p)), f);
        }
    }

    #[test]
    fn base_score_examples() {
        assert_eq!(base_score(3.5, 1.0), 3.5);
        assert_eq!(base_score(0.0, 0.7), 0.0);
        assert_eq!(base_score(2.0, 0.25), 0.5);
    }

    #[test]
    fn inference_uses_target_block_only() {
        let es = EmbeddingSet::from_blocks(
            1,
            2,
            2,
            vec![
                vec![9.0, 9.0, 9.0, 9.0, 9.0, 9.0],
                vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.25],
            ],
        )
        .unwrap();
        assert_eq!(inference_score(&es, 1, 0, 0), 0.0);
        assert_eq!(inference_score(&es, 1, 0, 1), 0.5);
        assert_eq!(inference_score(&es, 1, 0, 1), match_score(&es, 1, 0, 1));
    }
}
