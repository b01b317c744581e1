use mclmr_core::scm::{build_random_scm, verify_backdoor, Cardinalities};

#[test]
fn binary_scms_match_the_intervention() {
    let start = std::time::Instant::now();
    let r = verify_backdoor(Cardinalities::BINARY, 100, 0, 1e-10).unwrap();
    assert_eq!(r.trials, 100);
    assert!(r.passed(), "max deviation {}", r.max_deviation);
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn larger_cardinalities_also_match() {
    let card = Cardinalities {
        bias_user: 3,
        bias_item: 2,
        user: 4,
        item: 3,
        mediator: 3,
        outcome: 2,
    };
    let r = verify_backdoor(card, 20, 1000, 1e-10).unwrap();
    assert!(r.passed(), "max deviation {}", r.max_deviation);
}

#[test]
fn observational_conditional_is_confounded() {
    // the plain conditional differs from the intervention on a generic SCM
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let scm = build_random_scm(Cardinalities::BINARY, seed).unwrap();
        for u in 0..2 {
            for i in 0..2 {
                let obs = scm.observational_conditional(u, i).unwrap();
                let int = scm.interventional_distribution(u, i).unwrap();
                for (a, b) in obs.iter().zip(&int) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    assert!(worst > 1e-3, "{worst}");
}
