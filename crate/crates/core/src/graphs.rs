//! Graph data model, padding to a fixed node budget, datasets, splits and the
//! JSON Lines file format.
//!
//! A dataset file holds an optional header line followed by one graph per
//! line:
//!
//! ```text
//! {"header":{"kind":"community","max_nodes":20,"feature_dim":16,"constants":{"adg1":4.99}}}
//! {"id":"g0","n":3,"features":[[..],[..],[..]],"edges":[[0,1],[1,2]],"label":1,"s":4,"meta":{"p1":0.7}}
//! ```
//!
//! Edges are stored once (`i < j`) and symmetrized on load. The split
//! assignment lives in a sidecar `{"train":[ids],"val":[ids],"test":[ids]}`.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use clearcf_numerics::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, CoreError, Result};

/// Generation parameters and intermediates kept alongside a graph.
pub type Meta = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub id: String,
    pub n: usize,
    pub feature_dim: usize,
    /// `n x feature_dim`, row-major.
    pub features: Vec<f64>,
    /// `n x n`, entries 0/1, symmetric and hollow.
    adjacency: Vec<u8>,
    pub label: u8,
    pub s: u8,
    pub meta: Meta,
}

impl Graph {
    /// Builds a graph from an edge list. Edges may be given in either
    /// orientation; self-loops and out-of-range endpoints are rejected.
    pub fn from_edges(
        id: impl Into<String>,
        n: usize,
        feature_dim: usize,
        features: Vec<f64>,
        edges: &[(usize, usize)],
        label: u8,
        s: u8,
    ) -> Result<Self> {
        let id = id.into();
        let mut adjacency = vec![0u8; n * n];
        for &(i, j) in edges {
            if i == j {
                return Err(invalid(&id, format!("self-loop on node {i}")));
            }
            if i >= n || j >= n {
                return Err(invalid(&id, format!("edge ({i},{j}) outside {n} nodes")));
            }
            adjacency[i * n + j] = 1;
            adjacency[j * n + i] = 1;
        }
        let g = Self {
            id,
            n,
            feature_dim,
            features,
            adjacency,
            label,
            s,
            meta: Meta::new(),
        };
        g.validate()?;
        Ok(g)
    }

    /// Builds a graph from a dense `n x n` 0/1 adjacency, which must already be
    /// symmetric and hollow.
    pub fn from_dense(
        id: impl Into<String>,
        n: usize,
        feature_dim: usize,
        features: Vec<f64>,
        adjacency: Vec<u8>,
        label: u8,
        s: u8,
    ) -> Result<Self> {
        let g = Self {
            id: id.into(),
            n,
            feature_dim,
            features,
            adjacency,
            label,
            s,
            meta: Meta::new(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if n == 0 {
            return Err(invalid(&self.id, "graph has no nodes"));
        }
        if self.features.len() != n * self.feature_dim {
            return Err(invalid(
                &self.id,
                format!("{} feature values for {n}x{}", self.features.len(), self.feature_dim),
            ));
        }
        if self.adjacency.len() != n * n {
            return Err(invalid(&self.id, "adjacency size mismatch"));
        }
        for i in 0..n {
            if self.adjacency[i * n + i] != 0 {
                return Err(invalid(&self.id, format!("self-loop on node {i}")));
            }
            for j in 0..n {
                let a = self.adjacency[i * n + j];
                if a > 1 {
                    return Err(invalid(&self.id, format!("non-binary entry at ({i},{j})")));
                }
                if a != self.adjacency[j * n + i] {
                    return Err(invalid(&self.id, format!("asymmetric entry at ({i},{j})")));
                }
            }
        }
        if self.label > 1 {
            return Err(invalid(&self.id, format!("label {} not in {{0,1}}", self.label)));
        }
        if self.s > 9 {
            return Err(invalid(&self.id, format!("aux variable {} not in 0..=9", self.s)));
        }
        Ok(())
    }

    pub fn with_meta(mut self, meta: Meta) -> Self {
        self.meta = meta;
        self
    }

    pub fn adjacency(&self) -> &[u8] {
        &self.adjacency
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j] == 1
    }

    /// Sets or clears the undirected edge `{i, j}`; `i != j`.
    pub fn set_edge(&mut self, i: usize, j: usize, present: bool) {
        debug_assert!(i != j);
        let v = present as u8;
        self.adjacency[i * self.n + j] = v;
        self.adjacency[j * self.n + i] = v;
    }

    /// Undirected edges as `(i, j)` with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(|v| *v as usize).sum::<usize>() / 2
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency
            .chunks(self.n)
            .map(|row| row.iter().map(|v| *v as usize).sum())
            .collect()
    }

    /// Mean degree over all nodes.
    pub fn mean_degree(&self) -> f64 {
        2.0 * self.edge_count() as f64 / self.n as f64
    }

    /// Mean full-graph degree of the nodes in each community.
    pub fn community_degrees(&self, partition: &Partition) -> Result<(f64, f64)> {
        partition.check(self.n)?;
        let deg = self.degrees();
        let mean = |nodes: &[usize]| nodes.iter().map(|i| deg[*i] as f64).sum::<f64>() / nodes.len() as f64;
        Ok((mean(&partition.first), mean(&partition.second)))
    }

    pub fn degree_stats(&self, partition: Option<&Partition>) -> Result<DegreeStats> {
        match partition {
            Some(p) => {
                let (deg1, deg2) = self.community_degrees(p)?;
                Ok(DegreeStats::Communities { deg1, deg2 })
            }
            None => Ok(DegreeStats::Whole { deg: self.mean_degree() }),
        }
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Mean of feature column `col` over nodes.
    pub fn feature_mean(&self, col: usize) -> f64 {
        (0..self.n).map(|i| self.features[i * self.feature_dim + col]).sum::<f64>() / self.n as f64
    }

    /// Zero-extends to `k` nodes.
    pub fn pad(&self, k: usize) -> Result<PaddedGraph> {
        if self.n > k {
            return Err(CoreError::Size { n: self.n, k });
        }
        let (n, d) = (self.n, self.feature_dim);
        let mut features = vec![0.0; k * d];
        features[..n * d].copy_from_slice(&self.features);
        let mut adjacency = vec![0.0; k * k];
        for i in 0..n {
            for j in 0..n {
                adjacency[i * k + j] = self.adjacency[i * n + j] as f64;
            }
        }
        let mut mask = vec![0.0; k];
        mask[..n].iter_mut().for_each(|m| *m = 1.0);
        Ok(PaddedGraph {
            n,
            k,
            feature_dim: d,
            features,
            adjacency,
            mask,
        })
    }

    /// Returns a copy with nodes relabeled so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.n;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|p| *p >= n || std::mem::replace(&mut seen[*p], true)) {
            return contract("permutation must be a bijection on the nodes");
        }
        let d = self.feature_dim;
        let mut features = vec![0.0; n * d];
        let mut adjacency = vec![0u8; n * n];
        for i in 0..n {
            features[perm[i] * d..(perm[i] + 1) * d].copy_from_slice(self.feature_row(i));
            for j in 0..n {
                adjacency[perm[i] * n + perm[j]] = self.adjacency[i * n + j];
            }
        }
        let mut g = Graph::from_dense(self.id.clone(), n, d, features, adjacency, self.label, self.s)?;
        g.meta = self.meta.clone();
        Ok(g)
    }
}

fn invalid(id: &str, reason: impl Into<String>) -> CoreError {
    CoreError::Validation {
        id: id.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DegreeStats {
    Communities { deg1: f64, deg2: f64 },
    Whole { deg: f64 },
}

/// Two-community split of a graph's nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

impl Partition {
    /// Nodes `0..size` form community 1, the rest community 2.
    pub fn leading(n: usize, size: usize) -> Self {
        Self {
            first: (0..size.min(n)).collect(),
            second: (size.min(n)..n).collect(),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.first.is_empty() || self.second.is_empty() {
            return contract("partition has an empty community");
        }
        let mut seen = vec![false; n];
        for &i in self.first.iter().chain(&self.second) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return contract(format!("partition is not a split of 0..{n}"));
            }
        }
        if seen.iter().any(|s| !s) {
            return contract(format!("partition does not cover 0..{n}"));
        }
        Ok(())
    }
}

/// One graph zero-extended to `k` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedGraph {
    pub n: usize,
    pub k: usize,
    pub feature_dim: usize,
    pub features: Vec<f64>,
    pub adjacency: Vec<f64>,
    pub mask: Vec<f64>,
}

impl PaddedGraph {
    /// Strips the padding, returning `(features n x d, adjacency n x n)`.
    pub fn unpad(&self) -> (Vec<f64>, Vec<u8>) {
        let (n, k, d) = (self.n, self.k, self.feature_dim);
        let features = self.features[..n * d].to_vec();
        let mut adjacency = vec![0u8; n * n];
        for i in 0..n {
            for j in 0..n {
                adjacency[i * n + j] = (self.adjacency[i * k + j] > 0.5) as u8;
            }
        }
        (features, adjacency)
    }
}

/// A batch of padded graphs as tensors.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    /// `[B, k, d]`
    pub features: Tensor,
    /// `[B, k, k]`
    pub adjacency: Tensor,
    /// `[B, k]`, 1 for real nodes.
    pub node_mask: Tensor,
    pub labels: Vec<usize>,
    pub aux: Vec<u8>,
    pub node_counts: Vec<usize>,
}

impl PaddedBatch {
    pub fn from_graphs(graphs: &[&Graph], k: usize, d: usize) -> Result<Self> {
        let b = graphs.len();
        let mut features = Vec::with_capacity(b * k * d);
        let mut adjacency = Vec::with_capacity(b * k * k);
        let mut mask = Vec::with_capacity(b * k);
        for g in graphs {
            if g.feature_dim != d {
                return Err(invalid(&g.id, format!("feature width {} != {d}", g.feature_dim)));
            }
            let p = g.pad(k)?;
            features.extend_from_slice(&p.features);
            adjacency.extend_from_slice(&p.adjacency);
            mask.extend_from_slice(&p.mask);
        }
        Ok(Self {
            features: Tensor::new(vec![b, k, d], features)?,
            adjacency: Tensor::new(vec![b, k, k], adjacency)?,
            node_mask: Tensor::new(vec![b, k], mask)?,
            labels: graphs.iter().map(|g| g.label as usize).collect(),
            aux: graphs.iter().map(|g| g.s).collect(),
            node_counts: graphs.iter().map(|g| g.n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Seeded shuffle into `train_frac`/`val_frac`/rest.
    pub fn random(n: usize, train_frac: f64, val_frac: f64, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (n as f64 * train_frac).floor() as usize;
        let n_val = (n as f64 * val_frac).floor() as usize;
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Self { train: idx, val, test }
    }

    fn check(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return contract("splits overlap or reference missing graphs");
            }
        }
        if seen.iter().any(|s| !s) {
            return contract("splits do not cover every graph");
        }
        Ok(())
    }
}

/// Dataset-level constants written as the first line of a dataset file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub kind: String,
    pub max_nodes: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub constants: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub graphs: Vec<Graph>,
    pub splits: Splits,
}

impl Dataset {
    /// Checks the graphs against the header limits and attaches a default
    /// 60/20/20 split.
    pub fn new(header: DatasetHeader, graphs: Vec<Graph>, split_seed: u64) -> Result<Self> {
        let splits = Splits::random(graphs.len(), 0.6, 0.2, split_seed);
        Self::with_splits(header, graphs, splits)
    }

    pub fn with_splits(header: DatasetHeader, graphs: Vec<Graph>, splits: Splits) -> Result<Self> {
        for g in &graphs {
            if g.n > header.max_nodes {
                return Err(CoreError::Size { n: g.n, k: header.max_nodes });
            }
            if g.feature_dim != header.feature_dim {
                return Err(invalid(
                    &g.id,
                    format!("feature width {} != {}", g.feature_dim, header.feature_dim),
                ));
            }
        }
        splits.check(graphs.len())?;
        Ok(Self { header, graphs, splits })
    }

    pub fn max_nodes(&self) -> usize {
        self.header.max_nodes
    }

    pub fn feature_dim(&self) -> usize {
        self.header.feature_dim
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<&Graph> {
        idx.iter().map(|i| &self.graphs[*i]).collect()
    }

    pub fn train(&self) -> Vec<&Graph> {
        self.subset(&self.splits.train)
    }

    pub fn val(&self) -> Vec<&Graph> {
        self.subset(&self.splits.val)
    }

    pub fn test(&self) -> Vec<&Graph> {
        self.subset(&self.splits.test)
    }

    pub fn stats(&self) -> DatasetStats {
        let n = self.graphs.len().max(1) as f64;
        DatasetStats {
            n_graphs: self.graphs.len(),
            avg_nodes: self.graphs.iter().map(|g| g.n as f64).sum::<f64>() / n,
            avg_edges: self.graphs.iter().map(|g| g.edge_count() as f64).sum::<f64>() / n,
            max_nodes: self.graphs.iter().map(|g| g.n).max().unwrap_or(0),
            positive_rate: self.graphs.iter().map(|g| g.label as f64).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n_graphs: usize,
    pub avg_nodes: f64,
    pub avg_edges: f64,
    pub max_nodes: usize,
    pub positive_rate: f64,
}

/// Serialized form of one graph line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub id: String,
    pub n: usize,
    pub features: Vec<Vec<f64>>,
    pub edges: Vec<[usize; 2]>,
    pub label: u8,
    pub s: u8,
    #[serde(default)]
    pub meta: Meta,
}

impl From<&Graph> for GraphRecord {
    fn from(g: &Graph) -> Self {
        Self {
            id: g.id.clone(),
            n: g.n,
            features: (0..g.n).map(|i| g.feature_row(i).to_vec()).collect(),
            edges: g.edges().into_iter().map(|(i, j)| [i, j]).collect(),
            label: g.label,
            s: g.s,
            meta: g.meta.clone(),
        }
    }
}

impl GraphRecord {
    pub fn into_graph(self) -> Result<Graph> {
        if self.features.len() != self.n {
            return Err(invalid(&self.id, format!("{} feature rows for {} nodes", self.features.len(), self.n)));
        }
        let d = self.features.first().map_or(0, Vec::len);
        if self.features.iter().any(|r| r.len() != d) {
            return Err(invalid(&self.id, "ragged feature rows"));
        }
        let features = self.features.into_iter().flatten().collect();
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        Ok(Graph::from_edges(self.id, self.n, d, features, &edges, self.label, self.s)?.with_meta(self.meta))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: DatasetHeader,
}

pub fn write_graphs_jsonl(path: &Path, header: Option<&DatasetHeader>, graphs: &[Graph]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    if let Some(h) = header {
        serde_json::to_writer(&mut w, &HeaderLine { header: h.clone() })?;
        w.write_all(b"\n")?;
    }
    for g in graphs {
        serde_json::to_writer(&mut w, &GraphRecord::from(g))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSONL graph file; returns the header line if present.
pub fn read_graphs_jsonl(path: &Path) -> Result<(Option<DatasetHeader>, Vec<Graph>)> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut header = None;
    let mut graphs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 && line.trim_start().starts_with("{\"header\"") {
            let h: HeaderLine = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
                line: lineno,
                reason: e.to_string(),
            })?;
            header = Some(h.header);
            continue;
        }
        let rec: GraphRecord = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        graphs.push(rec.into_graph()?);
    }
    Ok((header, graphs))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitIds {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

/// Path of the split sidecar for a dataset file: `foo.jsonl` -> `foo.splits.json`.
pub fn splits_path(dataset: &Path) -> std::path::PathBuf {
    dataset.with_extension("splits.json")
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_graphs_jsonl(path, Some(&ds.header), &ds.graphs)?;
    let ids = |idx: &[usize]| idx.iter().map(|i| ds.graphs[*i].id.clone()).collect();
    let sidecar = SplitIds {
        train: ids(&ds.splits.train),
        val: ids(&ds.splits.val),
        test: ids(&ds.splits.test),
    };
    std::fs::write(splits_path(path), serde_json::to_vec(&sidecar)?)?;
    Ok(())
}

/// Loads a dataset and its split sidecar. Without a sidecar a seeded 60/20/20
/// split is drawn; without a header one is inferred from the graphs.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (header, graphs) = read_graphs_jsonl(path)?;
    let header = header.unwrap_or_else(|| DatasetHeader {
        kind: "generic".into(),
        max_nodes: graphs.iter().map(|g| g.n).max().unwrap_or(0),
        feature_dim: graphs.first().map_or(0, |g| g.feature_dim),
        constants: BTreeMap::new(),
    });
    let sidecar = splits_path(path);
    if !sidecar.exists() {
        return Dataset::new(header, graphs, 0);
    }
    let ids: SplitIds = serde_json::from_slice(&std::fs::read(&sidecar)?)?;
    let index: HashMap<&str, usize> = graphs.iter().enumerate().map(|(i, g)| (g.id.as_str(), i)).collect();
    if index.len() != graphs.len() {
        return contract("duplicate graph ids");
    }
    let resolve = |names: &[String]| -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| index.get(n.as_str()).copied().ok_or_else(|| CoreError::Contract(format!("split references unknown graph {n}"))))
            .collect()
    };
    let splits = Splits {
        train: resolve(&ids.train)?,
        val: resolve(&ids.val)?,
        test: resolve(&ids.test)?,
    };
    Dataset::with_splits(header, graphs, splits)
}
