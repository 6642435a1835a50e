//! Validity, proximity and causality of counterfactuals, plus CSV reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::counterfactual::Counterfactual;
use crate::error::{contract, CoreError, Result};
use crate::graphs::{Graph, Partition};

pub const DEGREE_TOL: f64 = 1e-9;
pub const FEATURE_TOL: f64 = 1e-6;

/// Mean over graphs of the per-graph fraction of predictions equal to `y*`.
pub fn validity(predictions: &[Vec<u8>], desired: &[u8]) -> Result<f64> {
    if predictions.len() != desired.len() || predictions.is_empty() {
        return contract("one prediction row per desired label");
    }
    let width = predictions[0].len();
    if width == 0 || predictions.iter().any(|r| r.len() != width) {
        return contract("prediction table must be rectangular and non-empty");
    }
    let per_graph = predictions
        .iter()
        .zip(desired)
        .map(|(row, y)| row.iter().filter(|p| *p == y).count() as f64 / width as f64);
    Ok(per_graph.sum::<f64>() / predictions.len() as f64)
}

/// Cosine similarity where two zero vectors count as identical and a zero
/// against a non-zero vector as 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Proximity {
    pub sim_x: f64,
    pub sim_a: f64,
}

/// Feature similarity as the mean per-node cosine; structural similarity as
/// the fraction of agreeing entries over all `n^2` adjacency cells.
pub fn proximity(g: &Graph, cf: &Counterfactual) -> Result<Proximity> {
    let (n, d) = (g.n, g.feature_dim);
    if cf.n != n || cf.feature_dim != d || cf.x_cf.len() != n * d || cf.a_cf.len() != n * n {
        return contract(format!("counterfactual of {} does not match its explainee's size", g.id));
    }
    let sim_x = (0..n).map(|i| cosine(g.feature_row(i), &cf.x_cf[i * d..(i + 1) * d])).sum::<f64>() / n as f64;
    let equal = g.adjacency().iter().zip(&cf.a_cf).filter(|(a, b)| a == b).count();
    Ok(Proximity { sim_x, sim_a: equal as f64 / (n * n) as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    /// `deg1 -> deg2`, opposite directions.
    Community,
    /// `X1 -> X2`, same direction.
    Molhiv,
    /// `deg -> X1`, same direction.
    Imdb,
}

impl ConstraintKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "community" => Ok(Self::Community),
            "molhiv" => Ok(Self::Molhiv),
            "imdb" => Ok(Self::Imdb),
            other => contract(format!("no causal constraint for dataset kind {other:?}")),
        }
    }
}

/// A two-variable causal constraint `a -> b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CausalConstraint {
    pub kind: ConstraintKind,
    /// Tolerance on the cause.
    pub tol_a: f64,
    /// Tolerance on the effect.
    pub tol_b: f64,
    /// Evaluate the constraint as a disjunction of material implications.
    pub literal: bool,
}

impl CausalConstraint {
    pub fn new(kind: ConstraintKind) -> Self {
        let (tol_a, tol_b) = match kind {
            ConstraintKind::Community => (DEGREE_TOL, DEGREE_TOL),
            ConstraintKind::Molhiv => (FEATURE_TOL, FEATURE_TOL),
            ConstraintKind::Imdb => (DEGREE_TOL, FEATURE_TOL),
        };
        Self { kind, tol_a, tol_b, literal: false }
    }

    pub fn literal(mut self) -> Self {
        self.literal = true;
        self
    }

    /// Whether `b` moves with `a` (true) or against it.
    pub fn same_direction(&self) -> bool {
        self.kind != ConstraintKind::Community
    }

    /// `(cause, effect)` for a graph given as features and adjacency.
    pub fn variables(&self, n: usize, d: usize, features: &[f64], adjacency: &[u8]) -> Result<(f64, f64)> {
        let g = Graph::from_dense("cf", n, d, features.to_vec(), adjacency.to_vec(), 0, 0)?;
        let col_mean = |c: usize| g.feature_mean(c);
        match self.kind {
            ConstraintKind::Community => {
                if n < 2 || n % 2 != 0 {
                    return contract(format!("community graphs split into two equal halves, got {n} nodes"));
                }
                g.community_degrees(&Partition::leading(n, n / 2))
            }
            ConstraintKind::Molhiv if d >= 2 => Ok((col_mean(d - 2), col_mean(d - 1))),
            ConstraintKind::Imdb if d >= 1 => Ok((g.mean_degree(), col_mean(d - 1))),
            _ => contract(format!("{:?} constraint needs the appended feature columns", self.kind)),
        }
    }

    /// Checks the constraint on a pair of `(cause, effect)` values.
    pub fn holds(&self, before: (f64, f64), after: (f64, f64)) -> bool {
        let dir = |delta: f64, tol: f64| -> i8 {
            if delta > tol {
                1
            } else if delta < -tol {
                -1
            } else {
                0
            }
        };
        let da = dir(after.0 - before.0, self.tol_a);
        let db = dir(after.1 - before.1, self.tol_b);
        let expected = |a: i8| if self.same_direction() { a } else { -a };
        if self.literal {
            let up = da != 1 || db == expected(1);
            let down = da != -1 || db == expected(-1);
            up || down
        } else {
            da == 0 || db == expected(da)
        }
    }

    pub fn check(&self, g: &Graph, cf: &Counterfactual) -> Result<bool> {
        let before = self.variables(g.n, g.feature_dim, &g.features, g.adjacency())?;
        let after = self.variables(cf.n, cf.feature_dim, &cf.x_cf, &cf.a_cf)?;
        Ok(self.holds(before, after))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub validity: f64,
    pub proximity_x: f64,
    pub proximity_a: f64,
    pub causality: f64,
    pub time_per_cf: f64,
    pub n_graphs: usize,
    pub n_cf: usize,
}

/// One audited counterfactual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailRow {
    pub source_id: String,
    pub sample_index: usize,
    pub desired: u8,
    pub predicted: u8,
    pub valid: bool,
    pub sim_x: f64,
    pub sim_a: f64,
    pub causal: bool,
    pub cause_before: f64,
    pub cause_after: f64,
    pub effect_before: f64,
    pub effect_after: f64,
}

/// Aggregates metrics over `cfs[i]`, the counterfactuals of `graphs[i]`.
/// `elapsed_secs` is the generation time for all of them.
pub fn evaluate(
    graphs: &[&Graph],
    cfs: &[Vec<Counterfactual>],
    constraint: &CausalConstraint,
    elapsed_secs: f64,
) -> Result<(MetricsReport, Vec<DetailRow>)> {
    if graphs.is_empty() || graphs.len() != cfs.len() {
        return contract("one counterfactual list per explained graph");
    }
    let n_cf = cfs[0].len();
    for (g, row) in graphs.iter().zip(cfs) {
        if row.len() != n_cf || n_cf == 0 {
            return contract(format!("graph {} has {} counterfactuals, expected {n_cf}", g.id, row.len()));
        }
        if let Some(c) = row.iter().find(|c| c.source_id != g.id) {
            return contract(format!("counterfactual of {} listed under {}", c.source_id, g.id));
        }
    }
    let mut details = Vec::with_capacity(graphs.len() * n_cf);
    for (g, row) in graphs.iter().zip(cfs) {
        let before = constraint.variables(g.n, g.feature_dim, &g.features, g.adjacency())?;
        for cf in row {
            let p = proximity(g, cf)?;
            let after = constraint.variables(cf.n, cf.feature_dim, &cf.x_cf, &cf.a_cf)?;
            details.push(DetailRow {
                source_id: g.id.clone(),
                sample_index: cf.sample_index,
                desired: cf.desired,
                predicted: cf.predicted,
                valid: cf.is_valid(),
                sim_x: p.sim_x,
                sim_a: p.sim_a,
                causal: constraint.holds(before, after),
                cause_before: before.0,
                cause_after: after.0,
                effect_before: before.1,
                effect_after: after.1,
            });
        }
    }
    let preds: Vec<Vec<u8>> = cfs.iter().map(|r| r.iter().map(|c| c.predicted).collect()).collect();
    let desired: Vec<u8> = cfs.iter().map(|r| r[0].desired).collect();
    let total = details.len() as f64;
    let mean = |f: &dyn Fn(&DetailRow) -> f64| details.iter().map(f).sum::<f64>() / total;
    let report = MetricsReport {
        validity: validity(&preds, &desired)?,
        proximity_x: mean(&|r| r.sim_x),
        proximity_a: mean(&|r| r.sim_a),
        causality: mean(&|r| r.causal as u8 as f64),
        time_per_cf: elapsed_secs / total,
        n_graphs: graphs.len(),
        n_cf,
    };
    Ok((report, details))
}

/// A results-table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub validity: f64,
    pub proximity_x: f64,
    pub proximity_a: f64,
    pub causality: f64,
    pub time_per_cf: f64,
}

impl ResultRow {
    pub fn new(method: &str, dataset: &str, seed: u64, r: &MetricsReport) -> Self {
        Self {
            method: method.into(),
            dataset: dataset.into(),
            seed,
            validity: r.validity,
            proximity_x: r.proximity_x,
            proximity_a: r.proximity_a,
            causality: r.causality,
            time_per_cf: r.time_per_cf,
        }
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> CoreError {
    CoreError::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validity_enumerated_case() {
        assert_eq!(validity(&[vec![1, 0], vec![1, 1]], &[1, 1]).unwrap(), 0.75);
        assert_eq!(validity(&[vec![0, 0]], &[0]).unwrap(), 1.0);
        assert_eq!(validity(&[vec![1]], &[0]).unwrap(), 0.0);
        assert!(validity(&[vec![1, 0], vec![1]], &[1, 1]).is_err());
    }

    #[test]
    fn cosine_zero_conventions() {
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[-1.0, -2.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn community_truth_table() {
        let c = CausalConstraint::new(ConstraintKind::Community);
        let base = (4.0, 3.0);
        assert!(c.holds(base, (5.0, 2.5)));
        assert!(!c.holds(base, (5.0, 3.5)));
        assert!(!c.holds(base, (5.0, 3.0)));
        assert!(c.holds(base, (3.0, 3.5)));
        assert!(!c.holds(base, (3.0, 2.0)));
        assert!(c.holds(base, (4.0, 9.0)));
        // the literal reading is satisfied whenever only one antecedent fires
        let lit = c.literal();
        assert!(lit.holds(base, (5.0, 3.5)));
        assert!(lit.holds(base, (3.0, 2.0)));
        assert!(lit.holds(base, base));
    }

    #[test]
    fn same_direction_kinds() {
        let c = CausalConstraint::new(ConstraintKind::Molhiv);
        assert!(c.holds((0.5, 0.6), (0.7, 0.8)));
        assert!(!c.holds((0.5, 0.6), (0.7, 0.5)));
        assert!(ConstraintKind::parse("mutag").is_err());
    }
}
