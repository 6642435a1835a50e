//! Synthetic datasets with known causal structure.
//!
//! * [`gen_community`]: two 10-node Erdős–Rényi communities whose edge rates
//!   are tied by a structural equation, labelled from community-1 degree.
//! * [`simulate_molhiv_labels`] / [`simulate_imdb_labels`]: add a label and a
//!   feature-level causal relation on top of any existing graph corpus.
//! * [`gen_molecule_like`] / [`gen_collab_like`]: small E-R corpora with
//!   roughly molecule / collaboration-network statistics to feed the two
//!   simulations when no real data is at hand.
//!
//! Every graph draws from its own generator seeded from `(seed, index)`, and
//! dataset-wide constants (ADG₁ and friends) are computed in a second pass
//! before labels are drawn.

use std::collections::BTreeMap;

use clearcf_numerics::sigmoid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, CoreError, Result};
use crate::graphs::{Dataset, DatasetHeader, Graph, Meta, Partition};

const LABEL_STREAM: u64 = 0x4c41_4245_4c53;
const SPLIT_STREAM: u64 = 0x5350_4c49_54;

/// SplitMix64 finalizer over `(seed, index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn graph_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index))
}

fn bernoulli(rng: &mut impl Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommunityParams {
    pub n_graphs: usize,
    pub community_size: usize,
    pub cross_rate: f64,
    pub delta: f64,
    pub offset: f64,
    pub eps_y_sigma: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for CommunityParams {
    fn default() -> Self {
        Self {
            n_graphs: 10_000,
            community_size: 10,
            cross_rate: 0.05,
            delta: 0.085,
            offset: 0.15,
            eps_y_sigma: 0.01,
            feature_dim: 16,
            seed: 0,
        }
    }
}

impl CommunityParams {
    pub fn validate(&self) -> Result<()> {
        if (self.delta * 10.0 + self.offset - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config(format!(
                "delta*10 + offset must equal 1 (got {})",
                self.delta * 10.0 + self.offset
            )));
        }
        if !(0.0..=1.0).contains(&self.cross_rate) {
            return Err(CoreError::Config("cross_rate must lie in [0, 1]".into()));
        }
        if self.community_size == 0 || self.n_graphs == 0 {
            return Err(CoreError::Config("n_graphs and community_size must be positive".into()));
        }
        if self.eps_y_sigma < 0.0 {
            return Err(CoreError::Config("eps_y_sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// Support of U₂ given S.
    pub fn u2_range(&self, s: u8) -> (f64, f64) {
        let s = s as f64;
        (self.delta * s + self.offset, self.delta * (s + 1.0) + self.offset)
    }

    pub fn partition(&self) -> Partition {
        Partition::leading(2 * self.community_size, self.community_size)
    }
}

/// Exogenous draws for one Community graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommunityExogenous {
    pub s: u8,
    pub u1: f64,
    pub u2: f64,
    pub eps_y: f64,
}

/// `p₂ = clamp(-0.15 p₁ + U₂, 0, 1)`.
pub fn community_p2(p1: f64, u2: f64) -> f64 {
    (-0.15 * p1 + u2).clamp(0.0, 1.0)
}

/// Builds the (unlabelled) graph from its exogenous variables. Edges are
/// drawn in a fixed order: community-1 pairs, community-2 pairs, then
/// cross pairs, each as `(i < j)` row-major.
pub fn build_community_graph(
    params: &CommunityParams,
    id: String,
    exo: CommunityExogenous,
    rng: &mut impl Rng,
) -> Result<Graph> {
    let c = params.community_size;
    let n = 2 * c;
    let p1 = exo.u1;
    let p2 = community_p2(p1, exo.u2);
    let mut edges = Vec::new();
    for (base, p) in [(0, p1), (c, p2)] {
        for i in 0..c {
            for j in i + 1..c {
                if bernoulli(rng, p) {
                    edges.push((base + i, base + j));
                }
            }
        }
    }
    for i in 0..c {
        for j in c..n {
            if bernoulli(rng, params.cross_rate) {
                edges.push((i, j));
            }
        }
    }
    let d = params.feature_dim;
    let features = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let meta: Meta = [
        ("p1".to_string(), p1),
        ("p2".to_string(), p2),
        ("u1".to_string(), exo.u1),
        ("u2".to_string(), exo.u2),
        ("eps_y".to_string(), exo.eps_y),
    ]
    .into_iter()
    .collect();
    Ok(Graph::from_edges(id, n, d, features, &edges, 0, exo.s)?.with_meta(meta))
}

pub fn gen_community(params: &CommunityParams) -> Result<Dataset> {
    params.validate()?;
    let partition = params.partition();
    let eps_dist = Normal::new(0.0, params.eps_y_sigma).map_err(|e| CoreError::Config(e.to_string()))?;
    let mut graphs = Vec::with_capacity(params.n_graphs);
    for idx in 0..params.n_graphs {
        let mut rng = graph_rng(params.seed, idx as u64);
        let s = rng.random_range(0..10u8);
        let u1 = rng.random_range(0.0..=1.0);
        let (lo, hi) = params.u2_range(s);
        let u2 = rng.random_range(lo..=hi);
        let eps_y = eps_dist.sample(&mut rng);
        let exo = CommunityExogenous { s, u1, u2, eps_y };
        graphs.push(build_community_graph(params, format!("community-{idx}"), exo, &mut rng)?);
    }

    let deg1: Vec<f64> = graphs
        .iter()
        .map(|g| g.community_degrees(&partition).map(|(d1, _)| d1))
        .collect::<Result<_>>()?;
    let adg1 = deg1.iter().sum::<f64>() / deg1.len() as f64;
    for (idx, g) in graphs.iter_mut().enumerate() {
        let mut rng = graph_rng(params.seed ^ LABEL_STREAM, idx as u64);
        let eps = g.meta["eps_y"];
        g.label = bernoulli(&mut rng, sigmoid(deg1[idx] - adg1 + eps)) as u8;
    }

    let header = DatasetHeader {
        kind: "community".into(),
        max_nodes: 2 * params.community_size,
        feature_dim: params.feature_dim,
        constants: BTreeMap::from([
            ("adg1".to_string(), adg1),
            ("delta".to_string(), params.delta),
            ("offset".to_string(), params.offset),
            ("community_size".to_string(), params.community_size as f64),
            ("cross_rate".to_string(), params.cross_rate),
        ]),
    };
    Dataset::new(header, graphs, derive_seed(params.seed, SPLIT_STREAM))
}

/// Stratification of the second exogenous variable, shared by the
/// molecule-style simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StratifiedNoise {
    pub delta: f64,
    pub offset: f64,
}

impl Default for StratifiedNoise {
    fn default() -> Self {
        Self { delta: 0.085, offset: 0.15 }
    }
}

impl StratifiedNoise {
    pub fn range(&self, s: u8) -> (f64, f64) {
        let s = s as f64;
        (self.delta * s + self.offset, self.delta * (s + 1.0) + self.offset)
    }
}

/// `X₂ = U₂ + 0.5 X₁`.
pub fn molhiv_x2(u2: f64, x1: f64) -> f64 {
    u2 + 0.5 * x1
}

/// `X₁ = U₁ + 0.5 deg(A) / ADG`.
pub fn imdb_x1(u1: f64, deg: f64, adg: f64) -> f64 {
    u1 + 0.5 * deg / adg
}

/// Label probabilities `sigmoid(v - mean(v) + eps)`.
pub fn centered_label_probabilities(values: &[f64], eps: &[f64]) -> Vec<f64> {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().zip(eps).map(|(v, e)| sigmoid(v - mean + e)).collect()
}

fn append_columns(g: &Graph, cols: &[Vec<f64>]) -> Result<Graph> {
    let d = g.feature_dim + cols.len();
    let mut features = Vec::with_capacity(g.n * d);
    for i in 0..g.n {
        features.extend_from_slice(g.feature_row(i));
        features.extend(cols.iter().map(|c| c[i]));
    }
    let mut out = Graph::from_dense(g.id.clone(), g.n, d, features, g.adjacency().to_vec(), g.label, g.s)?;
    out.meta = g.meta.clone();
    Ok(out)
}

/// Molecule-style simulation. Appends two columns: a per-node `x1 ~ U(0,1)`
/// and the graph-level `X₂ = U₂ + 0.5 X₁` (constant over nodes), where `X₁`
/// is the node mean of `x1` and `U₂` is S-stratified. Labels follow
/// `Bernoulli(sigmoid(X₁ - AVG_x1))`.
pub fn simulate_molhiv_labels(ds: &Dataset, seed: u64, noise: StratifiedNoise) -> Result<Dataset> {
    if ds.is_empty() {
        return contract("cannot simulate labels on an empty dataset");
    }
    let mut staged = Vec::with_capacity(ds.len());
    let mut x1s = Vec::with_capacity(ds.len());
    for (idx, g) in ds.graphs.iter().enumerate() {
        let mut rng = graph_rng(seed, idx as u64);
        let s = rng.random_range(0..10u8);
        let x1: Vec<f64> = (0..g.n).map(|_| rng.random_range(0.0..1.0)).collect();
        let x1_mean = x1.iter().sum::<f64>() / g.n as f64;
        let (lo, hi) = noise.range(s);
        let u2 = rng.random_range(lo..=hi);
        let x2 = molhiv_x2(u2, x1_mean);
        let mut out = append_columns(g, &[x1, vec![x2; g.n]])?;
        out.s = s;
        out.meta.insert("x1".into(), x1_mean);
        out.meta.insert("x2".into(), x2);
        out.meta.insert("u2".into(), u2);
        x1s.push(x1_mean);
        staged.push(out);
    }
    let probs = centered_label_probabilities(&x1s, &vec![0.0; x1s.len()]);
    let avg = x1s.iter().sum::<f64>() / x1s.len() as f64;
    for (idx, g) in staged.iter_mut().enumerate() {
        let mut rng = graph_rng(seed ^ LABEL_STREAM, idx as u64);
        g.label = bernoulli(&mut rng, probs[idx]) as u8;
    }
    let mut header = ds.header.clone();
    header.kind = "molhiv".into();
    header.feature_dim += 2;
    header.constants.insert("avg_x1".into(), avg);
    header.constants.insert("delta".into(), noise.delta);
    header.constants.insert("offset".into(), noise.offset);
    Dataset::with_splits(header, staged, ds.splits.clone())
}

/// Collaboration-style simulation. Appends one graph-level column
/// `X₁ = U₁ + 0.5 deg(A)/ADG` with `U₁ ~ U[0.1S, 0.1S+0.1]`; labels follow
/// `Bernoulli(sigmoid(deg(A) - ADG + eps_y))`.
pub fn simulate_imdb_labels(ds: &Dataset, seed: u64, eps_y_sigma: f64) -> Result<Dataset> {
    if ds.is_empty() {
        return contract("cannot simulate labels on an empty dataset");
    }
    let eps_dist = Normal::new(0.0, eps_y_sigma).map_err(|e| CoreError::Config(e.to_string()))?;
    let degs: Vec<f64> = ds.graphs.iter().map(Graph::mean_degree).collect();
    let adg = degs.iter().sum::<f64>() / degs.len() as f64;
    if adg <= 0.0 {
        return contract("average degree is zero; X1 = U1 + 0.5 deg/ADG is undefined");
    }
    let mut staged = Vec::with_capacity(ds.len());
    let mut eps = Vec::with_capacity(ds.len());
    for (idx, g) in ds.graphs.iter().enumerate() {
        let mut rng = graph_rng(seed, idx as u64);
        let s = rng.random_range(0..10u8);
        let lo = 0.1 * s as f64;
        let u1 = rng.random_range(lo..=lo + 0.1);
        let e = eps_dist.sample(&mut rng);
        let x1 = imdb_x1(u1, degs[idx], adg);
        let mut out = append_columns(g, &[vec![x1; g.n]])?;
        out.s = s;
        out.meta.insert("u1".into(), u1);
        out.meta.insert("x1".into(), x1);
        out.meta.insert("deg".into(), degs[idx]);
        out.meta.insert("eps_y".into(), e);
        eps.push(e);
        staged.push(out);
    }
    let probs = centered_label_probabilities(&degs, &eps);
    for (idx, g) in staged.iter_mut().enumerate() {
        let mut rng = graph_rng(seed ^ LABEL_STREAM, idx as u64);
        g.label = bernoulli(&mut rng, probs[idx]) as u8;
    }
    let mut header = ds.header.clone();
    header.kind = "imdb".into();
    header.feature_dim += 1;
    header.constants.insert("adg".into(), adg);
    Dataset::with_splits(header, staged, ds.splits.clone())
}

fn er_corpus(
    kind: &str,
    n_graphs: usize,
    nodes: (usize, usize),
    feature_dim: usize,
    edge_prob: impl Fn(usize) -> f64,
    features: impl Fn(&mut ChaCha8Rng) -> f64,
    seed: u64,
) -> Result<Dataset> {
    let mut graphs = Vec::with_capacity(n_graphs);
    for idx in 0..n_graphs {
        let mut rng = graph_rng(seed, idx as u64);
        let n = rng.random_range(nodes.0..=nodes.1);
        let p = edge_prob(n);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if bernoulli(&mut rng, p) {
                    edges.push((i, j));
                }
            }
        }
        let feats = (0..n * feature_dim).map(|_| features(&mut rng)).collect();
        graphs.push(Graph::from_edges(format!("{kind}-{idx}"), n, feature_dim, feats, &edges, 0, 0)?);
    }
    let header = DatasetHeader {
        kind: kind.into(),
        max_nodes: nodes.1,
        feature_dim,
        constants: BTreeMap::new(),
    };
    Dataset::new(header, graphs, derive_seed(seed, SPLIT_STREAM))
}

/// Sparse E-R graphs, 12–30 nodes (mean 21), ~1.07 edges per node, 9 features.
pub fn gen_molecule_like(n_graphs: usize, seed: u64) -> Result<Dataset> {
    er_corpus(
        "molecule-like",
        n_graphs,
        (12, 30),
        9,
        |n| (2.14 / (n as f64 - 1.0)).min(1.0),
        |rng| rng.sample(StandardNormal),
        seed,
    )
}

/// Dense E-R graphs, 4–15 nodes (mean 9.5), edge rate 0.83, one constant feature.
pub fn gen_collab_like(n_graphs: usize, seed: u64) -> Result<Dataset> {
    er_corpus("collab-like", n_graphs, (4, 15), 1, |_| 0.83, |_| 1.0, seed)
}
