//! Counterfactual records shared by every explanation method, and their
//! JSONL form.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graphs::Graph;

#[derive(Debug, Clone, PartialEq)]
pub struct Counterfactual {
    pub source_id: String,
    pub sample_index: usize,
    pub n: usize,
    pub feature_dim: usize,
    /// `n x d`
    pub x_cf: Vec<f64>,
    /// Edge probabilities `n x n`; only for generative methods.
    pub a_hat: Option<Vec<f64>>,
    /// Binary `n x n`, symmetric and hollow.
    pub a_cf: Vec<u8>,
    pub predicted: u8,
    pub desired: u8,
    pub s: u8,
}

impl Counterfactual {
    pub fn is_valid(&self) -> bool {
        self.predicted == self.desired
    }

    /// The counterfactual as a graph labelled with its predicted class.
    pub fn to_graph(&self) -> Result<Graph> {
        Graph::from_dense(
            format!("{}#{}", self.source_id, self.sample_index),
            self.n,
            self.feature_dim,
            self.x_cf.clone(),
            self.a_cf.clone(),
            self.predicted,
            self.s,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CounterfactualRecord {
    id: String,
    n: usize,
    features: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    label: u8,
    s: u8,
    source_id: String,
    sample_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a_hat: Option<Vec<Vec<f64>>>,
    predicted: u8,
    desired: u8,
}

impl CounterfactualRecord {
    fn from_cf(cf: &Counterfactual) -> Result<Self> {
        let g = cf.to_graph()?;
        let d = cf.feature_dim;
        Ok(Self {
            id: g.id.clone(),
            n: cf.n,
            features: (0..cf.n).map(|i| cf.x_cf[i * d..(i + 1) * d].to_vec()).collect(),
            edges: g.edges().into_iter().map(|(i, j)| [i, j]).collect(),
            label: cf.predicted,
            s: cf.s,
            source_id: cf.source_id.clone(),
            sample_index: cf.sample_index,
            a_hat: cf.a_hat.as_ref().map(|a| a.chunks(cf.n).map(<[f64]>::to_vec).collect()),
            predicted: cf.predicted,
            desired: cf.desired,
        })
    }

    fn into_cf(self, line: usize) -> Result<Counterfactual> {
        let bad = |reason: String| CoreError::Parse { line, reason };
        let d = self.features.first().map_or(0, Vec::len);
        if self.features.len() != self.n || self.features.iter().any(|r| r.len() != d) {
            return Err(bad("feature rows do not match n".into()));
        }
        let mut a_cf = vec![0u8; self.n * self.n];
        for [i, j] in &self.edges {
            if *i >= self.n || *j >= self.n || i == j {
                return Err(bad(format!("bad edge ({i},{j})")));
            }
            a_cf[i * self.n + j] = 1;
            a_cf[j * self.n + i] = 1;
        }
        let a_hat = match self.a_hat {
            Some(rows) if rows.len() != self.n || rows.iter().any(|r| r.len() != self.n) => {
                return Err(bad("a_hat is not n x n".into()))
            }
            Some(rows) => Some(rows.into_iter().flatten().collect()),
            None => None,
        };
        Ok(Counterfactual {
            source_id: self.source_id,
            sample_index: self.sample_index,
            n: self.n,
            feature_dim: d,
            x_cf: self.features.into_iter().flatten().collect(),
            a_hat,
            a_cf,
            predicted: self.predicted,
            desired: self.desired,
            s: self.s,
        })
    }
}

pub fn write_counterfactuals(path: &Path, cfs: &[Counterfactual], with_a_hat: bool) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for cf in cfs {
        let mut rec = CounterfactualRecord::from_cf(cf)?;
        if !with_a_hat {
            rec.a_hat = None;
        }
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_counterfactuals(path: &Path) -> Result<Vec<Counterfactual>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CounterfactualRecord =
            serde_json::from_str(&line).map_err(|e| CoreError::Parse { line: idx + 1, reason: e.to_string() })?;
        out.push(rec.into_cf(idx + 1)?);
    }
    Ok(out)
}

/// Bernoulli-samples a symmetric hollow binary matrix from the strict upper
/// triangle of `probs` (`n x n`), row-major over `i < j`.
pub fn sample_adjacency(probs: &[f64], n: usize, rng: &mut impl rand::Rng) -> Vec<u8> {
    let mut a = vec![0u8; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let e = (rng.random::<f64>() < probs[i * n + j]) as u8;
            a[i * n + j] = e;
            a[j * n + i] = e;
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_cf(with_hat: bool) -> Counterfactual {
        Counterfactual {
            source_id: "g7".into(),
            sample_index: 2,
            n: 3,
            feature_dim: 2,
            x_cf: vec![0.1, -0.2, 0.3, 0.4, 1.5, 0.0],
            a_hat: with_hat.then(|| vec![0.0, 0.9, 0.2, 0.9, 0.0, 0.6, 0.2, 0.6, 0.0]),
            a_cf: vec![0, 1, 0, 1, 0, 1, 0, 1, 0],
            predicted: 1,
            desired: 1,
            s: 4,
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cf.jsonl");
        let cfs = vec![sample_cf(true), sample_cf(false)];
        write_counterfactuals(&p, &cfs, true).unwrap();
        assert_eq!(read_counterfactuals(&p).unwrap(), cfs);
        write_counterfactuals(&p, &cfs, false).unwrap();
        assert!(read_counterfactuals(&p).unwrap().iter().all(|c| c.a_hat.is_none()));
    }

    #[test]
    fn degenerate_probabilities_are_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let probs = vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        for _ in 0..50 {
            assert_eq!(sample_adjacency(&probs, 3, &mut rng), vec![0, 1, 0, 1, 0, 0, 0, 0, 0]);
        }
    }
}
