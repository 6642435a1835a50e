use clearcf_core::baselines::*;
use clearcf_core::classifier::{ClassifierConfig, ClassifierModel};
use clearcf_core::Graph;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(seed: u64, n: usize, p: f64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut edges = vec![];
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(format!("g{seed}"), n, 3, features, &edges, rng.random_range(0..2u8), 0).unwrap()
}

fn model(seed: u64) -> ClassifierModel {
    ClassifierModel::new(ClassifierConfig::new(12, 3), seed)
}

fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

#[test]
fn zero_budget_returns_input() {
    let clf = model(1);
    let g = random_graph(3, 8, 0.3);
    for method in BaselineMethod::ALL {
        let cfg = BaselineConfig { method, max_steps: 0, seed: 1 };
        let out = run_baseline(&cfg, &clf, &g, 1 - g.label, 0).unwrap();
        assert_eq!(out.steps, 0);
        assert_eq!(out.counterfactual.a_cf, g.adjacency());
        assert_eq!(out.counterfactual.predicted, clf.predict(&g).unwrap().label);
    }
}

#[test]
fn removal_on_edgeless_graph_changes_nothing() {
    let clf = model(2);
    let g = random_graph(4, 7, 0.0);
    let y_star = 1 - clf.predict(&g).unwrap().label;
    let out = run_baseline(&BaselineConfig::new(BaselineMethod::EgRm, 5), &clf, &g, y_star, 0).unwrap();
    assert_eq!(out.steps, 150);
    assert_eq!(out.counterfactual.a_cf, g.adjacency());
    assert!(!out.counterfactual.is_valid());
}

#[test]
fn stops_as_soon_as_the_target_is_hit() {
    let clf = model(3);
    let g = random_graph(5, 9, 0.3);
    // already classified as the target: one draw, then stop
    let current = clf.predict(&g).unwrap().label;
    for method in BaselineMethod::ALL {
        let out = run_baseline(&BaselineConfig::new(method, 1), &clf, &g, current, 0).unwrap();
        assert_eq!(out.steps, 1);
        assert!(out.counterfactual.is_valid());
    }
}

#[test]
fn runs_are_reproducible_and_features_untouched() {
    let clf = model(6);
    let graphs: Vec<Graph> = (0..4).map(|s| random_graph(s, 6 + s as usize, 0.4)).collect();
    let refs: Vec<&Graph> = graphs.iter().collect();
    let cfg = BaselineConfig::new(BaselineMethod::Random, 9);
    let a = explain_graphs(&cfg, &clf, &refs, 3).unwrap();
    assert_eq!(explain_graphs(&cfg, &clf, &refs, 3).unwrap(), a);
    for (g, row) in graphs.iter().zip(&a) {
        assert_eq!(row.len(), 3);
        for cf in row {
            assert_eq!(cf.x_cf, g.features);
            assert_eq!(cf.desired, 1 - g.label);
            assert_eq!(cf.predicted, clf.predict(&cf.to_graph().unwrap()).unwrap().label);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn budget_and_monotonicity(seed in any::<u64>(), n in 2usize..12, p in 0.0f64..1.0, t in 0usize..40, sample in 0usize..3) {
        let clf = model(seed % 5);
        let g = random_graph(seed, n, p);
        for method in BaselineMethod::ALL {
            let cfg = BaselineConfig { method, max_steps: t, seed };
            let out = run_baseline(&cfg, &clf, &g, 1 - g.label, sample).unwrap();
            let a = &out.counterfactual.a_cf;
            prop_assert!(out.steps <= t);
            prop_assert!(hamming(a, g.adjacency()) <= 2 * t);
            for (before, after) in g.adjacency().iter().zip(a) {
                match method {
                    BaselineMethod::EgIst => prop_assert!(after >= before),
                    BaselineMethod::EgRm => prop_assert!(after <= before),
                    BaselineMethod::Random => {}
                }
            }
            prop_assert!(out.counterfactual.to_graph().is_ok());
        }
    }
}
