use mclmr_core::causal::{base_score, bias_factor, DebiasParams};
use mclmr_core::contrast::{infonce_loss, temperature, TemperatureRule};
use mclmr_core::corpus::{compute_bias_table, BehaviorSchema, InteractionDataset};
use mclmr_core::fusion::{contribution, final_score, total_contribution, FusionParams};
use proptest::prelude::*;

fn dataset(users: usize, items: usize, edges: &[(usize, u32, u32)]) -> InteractionDataset {
    let schema = BehaviorSchema::new(vec!["view".into(), "cart".into(), "buy".into()], 2).unwrap();
    let mut lists = vec![Vec::new(); 3];
    for &(k, u, i) in edges {
        lists[k].push((u % users as u32, i % items as u32));
    }
    InteractionDataset::from_edges(schema, users, items, lists).unwrap()
}

proptest! {
    #[test]
    fn bias_rows_sum_to_one(edges in prop::collection::vec((0usize..3, 0u32..50, 0u32..50), 1..200)) {
        let ds = dataset(7, 9, &edges);
        let bias = compute_bias_table(&ds);
        for u in 0..7u32 {
            let s: f64 = bias.user_row(u).iter().sum();
            prop_assert!(s == 0.0 || (s - 1.0).abs() <= 1e-12);
        }
        for i in 0..9u32 {
            let s: f64 = bias.item_row(i).iter().sum();
            prop_assert!(s == 0.0 || (s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn aggregation_off_leaves_base_score(f in -5.0f64..5.0, bu in 0.0f64..1.0, bi in 0.0f64..1.0,
                                         cons in prop::collection::vec((-5.0f64..5.0, 0.0f64..1.0, -3.0f64..3.0), 1..4)) {
        let p = FusionParams { agg_enabled: false, ..FusionParams::default() };
        let s_base = base_score(f, bias_factor(bu, bi, &DebiasParams::default()));
        let c: Vec<f64> = cons.iter().map(|&(fk, j, g)| contribution(fk, j, g, &p)).collect();
        prop_assert_eq!(final_score(s_base, total_contribution(&c, &p)), s_base);
    }
}

#[test]
fn bias_aware_temperature_endpoints() {
    let rule = TemperatureRule::BiasAware {
        tau0: 0.2,
        alpha: 0.5,
    };
    assert_eq!(temperature(&rule, 0.0, 0.0), 0.2);
    assert_eq!(temperature(&rule, 1.0, 0.0), 0.2 * (1.0 - 0.5));
    assert_eq!(temperature(&rule, 1.0, 0.0), 0.1);
}

#[test]
fn infonce_reference_values() {
    let a = [0.3, -1.2, 0.7];
    let p = [1.0, 0.4, -0.2];
    let one = infonce_loss(&[&a[..]], &[&p[..]], &[0.2]).unwrap();
    assert_eq!(one.loss, 0.0);
    let twin = infonce_loss(&[&a[..], &a[..]], &[&a[..], &a[..]], &[0.2, 0.7]).unwrap();
    assert!(
        (twin.loss - std::f64::consts::LN_2).abs() < 1e-12,
        "{}",
        twin.loss
    );
}
