use clearcf_core::datagen::{
    community_p2, gen_collab_like, gen_community, gen_molecule_like, simulate_imdb_labels, simulate_molhiv_labels,
    CommunityParams, StratifiedNoise,
};
use clearcf_core::save_dataset;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn community_monte_carlo_moments() {
    let ds = gen_community(&CommunityParams { n_graphs: 4000, seed: 21, ..Default::default() }).unwrap();
    let p1: Vec<f64> = ds.graphs.iter().map(|g| g.meta["p1"]).collect();
    let p2: Vec<f64> = ds.graphs.iter().map(|g| g.meta["p2"]).collect();
    assert!(pearson(&p1, &p2) < 0.0);
    let mean_p1 = p1.iter().sum::<f64>() / p1.len() as f64;
    assert!((0.48..=0.52).contains(&mean_p1), "mean p1 {mean_p1}");
    let rate = ds.stats().positive_rate;
    assert!((0.45..=0.55).contains(&rate), "positive rate {rate}");
    for g in &ds.graphs {
        let (lo, hi) = CommunityParams::default().u2_range(g.s);
        let u2 = g.meta["u2"];
        assert!(u2 >= lo && u2 <= hi);
        assert_eq!(g.meta["p2"], community_p2(g.meta["p1"], u2));
    }
    // ADG1 is near the expected 9 * 0.5 + 10 * 0.05
    let adg1 = ds.header.constants["adg1"];
    assert!((adg1 - 5.0).abs() < 0.1, "adg1 {adg1}");
}

#[test]
fn same_seed_reproduces_bytes() {
    let p = CommunityParams { n_graphs: 60, seed: 5, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    save_dataset(&gen_community(&p).unwrap(), &a).unwrap();
    save_dataset(&gen_community(&p).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let other = gen_community(&CommunityParams { seed: 6, ..p }).unwrap();
    assert_ne!(other.graphs, gen_community(&p).unwrap().graphs);
}

#[test]
fn corpora_have_target_statistics() {
    let mol = gen_molecule_like(2000, 3).unwrap().stats();
    assert!((mol.avg_nodes - 21.0).abs() < 0.5, "{mol:?}");
    assert!(mol.max_nodes <= 30);
    assert!((mol.avg_edges / mol.avg_nodes - 1.07).abs() < 0.08, "{mol:?}");
    let col = gen_collab_like(2000, 3).unwrap();
    let st = col.stats();
    assert!((st.avg_nodes - 9.5).abs() < 0.3, "{st:?}");
    assert!(st.max_nodes <= 15);
    assert!(col.graphs.iter().all(|g| g.features.iter().all(|v| *v == 1.0)));
}

#[test]
fn molhiv_simulation_structure() {
    let base = gen_molecule_like(1500, 8).unwrap();
    let sim = simulate_molhiv_labels(&base, 9, StratifiedNoise::default()).unwrap();
    assert_eq!(sim.feature_dim(), base.feature_dim() + 2);
    assert_eq!(sim.splits, base.splits);
    let avg = sim.header.constants["avg_x1"];
    let x1: Vec<f64> = sim.graphs.iter().map(|g| g.meta["x1"]).collect();
    assert!((avg - x1.iter().sum::<f64>() / x1.len() as f64).abs() < 1e-12);
    for g in &sim.graphs {
        let d = g.feature_dim;
        // appended x1 column averages to the recorded X1
        assert!((g.feature_mean(d - 2) - g.meta["x1"]).abs() < 1e-12);
        assert!((0..g.n).all(|i| g.feature_row(i)[d - 1] == g.meta["x2"]));
        assert!((g.meta["x2"] - g.meta["u2"] - 0.5 * g.meta["x1"]).abs() < 1e-12);
    }
    // labels lean toward graphs with above-average X1
    let above: Vec<f64> = sim.graphs.iter().filter(|g| g.meta["x1"] > avg).map(|g| g.label as f64).collect();
    let below: Vec<f64> = sim.graphs.iter().filter(|g| g.meta["x1"] <= avg).map(|g| g.label as f64).collect();
    let rate = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(rate(&above) > rate(&below));
}

#[test]
fn imdb_simulation_structure() {
    let base = gen_collab_like(1500, 8).unwrap();
    let sim = simulate_imdb_labels(&base, 2, 0.01).unwrap();
    let adg = sim.header.constants["adg"];
    let degs: Vec<f64> = base.graphs.iter().map(|g| g.mean_degree()).collect();
    assert!((adg - degs.iter().sum::<f64>() / degs.len() as f64).abs() < 1e-12);
    for g in &sim.graphs {
        let x1 = g.meta["u1"] + 0.5 * g.mean_degree() / adg;
        assert!((g.meta["x1"] - x1).abs() < 1e-12);
        assert!((0..g.n).all(|i| g.feature_row(i)[1] == x1));
    }
    // the label is a steep function of degree; above-average graphs are mostly positive
    let pos: Vec<f64> = sim
        .graphs
        .iter()
        .filter(|g| g.mean_degree() > adg + 1.0)
        .map(|g| g.label as f64)
        .collect();
    assert!(pos.iter().sum::<f64>() / pos.len() as f64 > 0.7);
}
