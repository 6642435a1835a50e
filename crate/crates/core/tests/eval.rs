use clearcf_core::counterfactual::Counterfactual;
use clearcf_core::eval::*;
use clearcf_core::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cf_of(g: &Graph, x: Vec<f64>, a: Vec<u8>, predicted: u8, j: usize) -> Counterfactual {
    Counterfactual {
        source_id: g.id.clone(),
        sample_index: j,
        n: g.n,
        feature_dim: g.feature_dim,
        x_cf: x,
        a_hat: None,
        a_cf: a,
        predicted,
        desired: 1 - g.label,
        s: g.s,
    }
}

fn random_adj(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<u8> {
    let mut a = vec![0u8; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let e = (rng.random::<f64>() < p) as u8;
            a[i * n + j] = e;
            a[j * n + i] = e;
        }
    }
    a
}

/// Random features with some all-zero rows so both cosine conventions fire.
fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    (0..n)
        .flat_map(|_| {
            let zero = rng.random::<f64>() < 0.15;
            (0..d).map(|_| if zero { 0.0 } else { rng.random_range(-2.0..2.0) }).collect::<Vec<_>>()
        })
        .collect()
}

// ----- naive references -----

fn naive_validity(preds: &[Vec<u8>], desired: &[u8]) -> f64 {
    let mut total = 0.0;
    for i in 0..preds.len() {
        let mut hits = 0.0;
        for j in 0..preds[i].len() {
            if preds[i][j] == desired[i] {
                hits += 1.0;
            }
        }
        total += hits / preds[i].len() as f64;
    }
    total / preds.len() as f64
}

fn naive_sim_x(a: &[f64], b: &[f64], n: usize, d: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for c in 0..d {
            dot += a[i * d + c] * b[i * d + c];
            na += a[i * d + c] * a[i * d + c];
            nb += b[i * d + c] * b[i * d + c];
        }
        total += if na == 0.0 && nb == 0.0 {
            1.0
        } else if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na.sqrt() * nb.sqrt())
        };
    }
    total / n as f64
}

fn naive_sim_a(a: &[u8], b: &[u8], n: usize) -> f64 {
    let mut same = 0;
    for i in 0..n {
        for j in 0..n {
            if a[i * n + j] == b[i * n + j] {
                same += 1;
            }
        }
    }
    same as f64 / (n * n) as f64
}

/// Mean degree of the first and second halves, counting every edge endpoint.
fn naive_community_degrees(a: &[u8], n: usize) -> (f64, f64) {
    let half = n / 2;
    let (mut d1, mut d2) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if a[i * n + j] == 1 {
                if i < half {
                    d1 += 1.0;
                } else {
                    d2 += 1.0;
                }
            }
        }
    }
    (d1 / half as f64, d2 / (n - half) as f64)
}

/// Enumerated truth table of the intended reading for `a -> b` with `b`
/// moving opposite to `a`.
fn naive_causal(before: (f64, f64), after: (f64, f64), tol: f64) -> bool {
    let (da, db) = (after.0 - before.0, after.1 - before.1);
    if da > tol {
        db < -tol
    } else if da < -tol {
        db > tol
    } else {
        true
    }
}

#[test]
fn enumerated_examples() {
    assert_eq!(validity(&[vec![1, 0], vec![1, 1]], &[1, 1]).unwrap(), 0.75);

    let g = Graph::from_edges("g", 4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0], &[(0, 1), (1, 2), (2, 3)], 0, 0)
        .unwrap();
    let mut a = g.adjacency().to_vec();
    a[3] = 1;
    a[12] = 1;
    let negated: Vec<f64> = g.features.iter().map(|v| -v).collect();
    let p = proximity(&g, &cf_of(&g, negated, a, 1, 0)).unwrap();
    assert_eq!(p.sim_a, 0.875);
    assert!((p.sim_x + 1.0).abs() < 1e-12);
}

#[test]
fn identity_submission() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let graphs: Vec<Graph> = (0..10)
        .map(|i| {
            let a = random_adj(&mut rng, 8, 0.3);
            Graph::from_dense(format!("g{i}"), 8, 3, random_features(&mut rng, 8, 3), a, (i % 2) as u8, 0).unwrap()
        })
        .collect();
    let refs: Vec<&Graph> = graphs.iter().collect();
    // an unchanged graph keeps its (correct) label, so it never reaches y*
    let cfs: Vec<Vec<Counterfactual>> = graphs
        .iter()
        .map(|g| (0..3).map(|j| cf_of(g, g.features.clone(), g.adjacency().to_vec(), g.label, j)).collect())
        .collect();
    let (r, details) =
        evaluate(&refs, &cfs, &CausalConstraint::new(ConstraintKind::Community), 3.0).unwrap();
    assert_eq!(r.validity, 0.0);
    assert_eq!(r.proximity_x, 1.0);
    assert_eq!(r.proximity_a, 1.0);
    assert_eq!(r.causality, 1.0);
    assert_eq!(r.time_per_cf, 0.1);
    assert_eq!(details.len(), 30);
}

#[test]
fn matches_naive_references_on_random_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for fixture in 0..100 {
        let n_graphs = rng.random_range(1..6);
        let n_cf = rng.random_range(1..4);
        let (n, d) = (2 * rng.random_range(1..6), rng.random_range(1..4));
        let graphs: Vec<Graph> = (0..n_graphs)
            .map(|i| {
                let a = random_adj(&mut rng, n, 0.4);
                let f = random_features(&mut rng, n, d);
                Graph::from_dense(format!("f{fixture}-{i}"), n, d, f, a, rng.random_range(0..2), 0).unwrap()
            })
            .collect();
        let cfs: Vec<Vec<Counterfactual>> = graphs
            .iter()
            .map(|g| {
                (0..n_cf)
                    .map(|j| {
                        let a = random_adj(&mut rng, n, 0.4);
                        let f = random_features(&mut rng, n, d);
                        cf_of(g, f, a, rng.random_range(0..2), j)
                    })
                    .collect()
            })
            .collect();
        let refs: Vec<&Graph> = graphs.iter().collect();
        let constraint = CausalConstraint::new(ConstraintKind::Community);
        let (report, details) = evaluate(&refs, &cfs, &constraint, 1.0).unwrap();

        let preds: Vec<Vec<u8>> = cfs.iter().map(|r| r.iter().map(|c| c.predicted).collect()).collect();
        let desired: Vec<u8> = graphs.iter().map(|g| 1 - g.label).collect();
        assert_eq!(report.validity, naive_validity(&preds, &desired));
        assert_eq!(validity(&preds, &desired).unwrap(), naive_validity(&preds, &desired));

        let mut row = 0;
        for (g, cs) in graphs.iter().zip(&cfs) {
            let before = naive_community_degrees(g.adjacency(), n);
            for c in cs {
                let det = &details[row];
                assert_eq!(det.sim_x, naive_sim_x(&g.features, &c.x_cf, n, d));
                assert_eq!(det.sim_a, naive_sim_a(g.adjacency(), &c.a_cf, n));
                let after = naive_community_degrees(&c.a_cf, n);
                assert_eq!((det.cause_before, det.effect_before), before);
                assert_eq!((det.cause_after, det.effect_after), after);
                assert_eq!(det.causal, naive_causal(before, after, DEGREE_TOL));
                row += 1;
            }
        }
        let mean = |f: &dyn Fn(&DetailRow) -> f64| details.iter().map(f).sum::<f64>() / details.len() as f64;
        assert_eq!(report.proximity_x, mean(&|r| r.sim_x));
        assert_eq!(report.proximity_a, mean(&|r| r.sim_a));
        assert_eq!(report.causality, mean(&|r| r.causal as u8 as f64));
    }
}

#[test]
fn causality_truth_table() {
    let c = CausalConstraint::new(ConstraintKind::Community);
    let steps = [-1.0, 0.0, 1.0];
    for da in steps {
        for db in steps {
            let got = c.holds((2.0, 2.0), (2.0 + da, 2.0 + db));
            assert_eq!(got, naive_causal((2.0, 2.0), (2.0 + da, 2.0 + db), DEGREE_TOL), "da {da} db {db}");
            // literal reading: (up -> down) or (down -> up) is only false when both fire, which cannot happen
            assert!(c.literal().holds((2.0, 2.0), (2.0 + da, 2.0 + db)));
        }
    }
    // changes inside the tolerance do not count
    assert!(c.holds((2.0, 2.0), (2.0 + 1e-12, 5.0)));
}

#[test]
fn feature_constraints_read_appended_columns() {
    // last two columns of a molhiv-style graph are X1 (per node) and X2 (constant)
    let g = Graph::from_edges("m", 2, 3, vec![0.5, 0.2, 0.9, -0.5, 0.4, 0.9], &[(0, 1)], 0, 0).unwrap();
    let c = CausalConstraint::new(ConstraintKind::Molhiv);
    let raise_both = cf_of(&g, vec![0.5, 0.5, 1.2, -0.5, 0.5, 1.2], g.adjacency().to_vec(), 1, 0);
    assert!(c.check(&g, &raise_both).unwrap());
    let raise_x1_only = cf_of(&g, vec![0.5, 0.5, 0.9, -0.5, 0.5, 0.9], g.adjacency().to_vec(), 1, 0);
    assert!(!c.check(&g, &raise_x1_only).unwrap());

    let imdb = CausalConstraint::new(ConstraintKind::Imdb);
    let h = Graph::from_edges("i", 3, 1, vec![0.3; 3], &[(0, 1)], 0, 0).unwrap();
    let denser = cf_of(&h, vec![0.8; 3], vec![0, 1, 1, 1, 0, 0, 1, 0, 0], 1, 0);
    assert!(imdb.check(&h, &denser).unwrap());
    let denser_lower = cf_of(&h, vec![0.1; 3], vec![0, 1, 1, 1, 0, 0, 1, 0, 0], 1, 0);
    assert!(!imdb.check(&h, &denser_lower).unwrap());
}

#[test]
fn ragged_or_mismatched_inputs_are_rejected() {
    let g = Graph::from_edges("g", 2, 1, vec![1.0, 1.0], &[(0, 1)], 0, 0).unwrap();
    let ok = cf_of(&g, vec![1.0, 1.0], g.adjacency().to_vec(), 1, 0);
    let c = CausalConstraint::new(ConstraintKind::Community);
    assert!(evaluate(&[&g, &g], &[vec![ok.clone()], vec![ok.clone(), ok.clone()]], &c, 1.0).is_err());
    let mut wrong_size = ok.clone();
    wrong_size.n = 3;
    assert!(proximity(&g, &wrong_size).is_err());
    let mut stranger = ok;
    stranger.source_id = "h".into();
    assert!(evaluate(&[&g], &[vec![stranger]], &c, 1.0).is_err());
}

#[test]
fn csv_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("results.csv");
    let report = MetricsReport {
        validity: 0.5,
        proximity_x: 0.25,
        proximity_a: 0.75,
        causality: 0.125,
        time_per_cf: 0.001,
        n_graphs: 4,
        n_cf: 3,
    };
    let rows = vec![ResultRow::new("clear", "community", 1, &report), ResultRow::new("random", "community", 2, &report)];
    write_csv(&p, &rows).unwrap();
    assert_eq!(read_csv::<ResultRow>(&p).unwrap(), rows);
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("method,dataset,seed,validity,proximity_x,proximity_a,causality,time_per_cf\n"));
}
