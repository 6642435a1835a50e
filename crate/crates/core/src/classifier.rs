//! The graph classifier `f`: feature gate, three graph convolutions,
//! mean + max pooling and a two-layer head.

use std::path::Path;

use clearcf_numerics::{load_checkpoint, save_checkpoint, AdamConfig, ParameterStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::derive_seed;
use crate::error::{contract, CoreError, Result};
use crate::graphs::{Dataset, Graph, PaddedBatch};
use crate::nn::{apply_bn_updates, gcn_layer, init_batch_norm, init_linear, normalized_adjacency, Binder};

const PREDICT_CHUNK: usize = 256;

/// Architecture header stored with every checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub k: usize,
    pub d: usize,
    pub hidden: usize,
    pub classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl ClassifierConfig {
    pub fn new(k: usize, d: usize) -> Self {
        Self { k, d, hidden: 32, classes: 2, dropout: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { epochs: 600, batch_size: 500, lr: 1e-3, weight_decay: 1e-5, seed: 0 }
    }
}

/// Dense node features and a possibly relaxed adjacency for one graph.
#[derive(Debug, Clone, Copy)]
pub struct GraphView<'a> {
    pub n: usize,
    /// `n x d`
    pub features: &'a [f64],
    /// `n x n`, entries in `[0, 1]`
    pub adjacency: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: u8,
    pub log_probs: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub config: ClassifierConfig,
    pub store: ParameterStore,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifierReport {
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

impl ClassifierModel {
    pub fn new(config: ClassifierConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let h = config.hidden;
        store.insert("clf.gate", Tensor::zeros(&[config.d]));
        init_linear(&mut store, "clf.gc1", config.d, h, &mut rng);
        init_linear(&mut store, "clf.gc2", h, h, &mut rng);
        init_linear(&mut store, "clf.gc3", h, h, &mut rng);
        init_linear(&mut store, "clf.fc1", 2 * h, h, &mut rng);
        init_batch_norm(&mut store, "clf.bn1", h);
        init_linear(&mut store, "clf.fc2", h, config.classes, &mut rng);
        Self { config, store }
    }

    /// Log-probabilities `[B, 2]` for node features `x [B, k, d]` and
    /// adjacency `adj [B, k, k]`, which may be relaxed.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var, adj: Var, mask: &Tensor) -> Result<Var> {
        let (k, d) = (self.config.k, self.config.d);
        let xs = tape.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != k || xs[2] != d || tape.shape(adj) != [xs[0], k, k] || mask.shape != [xs[0], k] {
            return Err(CoreError::Numerics(clearcf_numerics::NumericsError::Dimension {
                op: "classifier",
                detail: format!("x {:?}, adj {:?}, mask {:?} for k={k}, d={d}", xs, tape.shape(adj), mask.shape),
            }));
        }
        let gate = binder.weight(tape, "clf.gate")?;
        let gate = tape.sigmoid(gate);
        let mut h = tape.mul(x, gate)?;
        let a = normalized_adjacency(tape, adj, mask)?;
        for layer in ["clf.gc1", "clf.gc2", "clf.gc3"] {
            h = gcn_layer(binder, tape, layer, a, h)?;
        }
        let mean = tape.pool_mean(h, mask)?;
        let max = tape.pool_max(h, mask)?;
        let pooled = tape.concat(&[mean, max])?;
        let z = binder.linear(tape, "clf.fc1", pooled)?;
        let z = binder.batch_norm(tape, "clf.bn1", z)?;
        let z = tape.relu(z);
        let z = binder.dropout(tape, z, self.config.dropout)?;
        let logits = binder.linear(tape, "clf.fc2", z)?;
        Ok(tape.log_softmax(logits)?)
    }

    /// Eval-mode prediction on binary graphs.
    pub fn predict_graphs(&self, graphs: &[&Graph]) -> Result<Vec<Prediction>> {
        let dense: Vec<Vec<f64>> = graphs.iter().map(|g| g.adjacency().iter().map(|v| *v as f64).collect()).collect();
        let views: Vec<GraphView> = graphs
            .iter()
            .zip(&dense)
            .map(|(g, a)| GraphView { n: g.n, features: &g.features, adjacency: a })
            .collect();
        self.predict_views(&views)
    }

    pub fn predict(&self, g: &Graph) -> Result<Prediction> {
        Ok(self.predict_graphs(&[g])?.remove(0))
    }

    /// Eval-mode prediction on dense or relaxed views. Sums over nodes are
    /// order-independent, so relabeling nodes gives bit-identical output.
    pub fn predict_views(&self, views: &[GraphView]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(views.len());
        for chunk in views.chunks(PREDICT_CHUNK) {
            let mut tape = Tape::order_free();
            out.extend(self.eval_chunk(&mut tape, chunk)?);
        }
        Ok(out)
    }

    fn eval_chunk(&self, tape: &mut Tape, views: &[GraphView]) -> Result<Vec<Prediction>> {
        let (k, d) = (self.config.k, self.config.d);
        let b = views.len();
        let mut x = vec![0.0; b * k * d];
        let mut a = vec![0.0; b * k * k];
        let mut m = vec![0.0; b * k];
        for (g, v) in views.iter().enumerate() {
            if v.n > k {
                return Err(CoreError::Size { n: v.n, k });
            }
            if v.n == 0 || v.features.len() != v.n * d || v.adjacency.len() != v.n * v.n {
                return contract(format!("view with {} nodes does not match feature width {d}", v.n));
            }
            x[g * k * d..g * k * d + v.n * d].copy_from_slice(v.features);
            for i in 0..v.n {
                a[g * k * k + i * k..g * k * k + i * k + v.n].copy_from_slice(&v.adjacency[i * v.n..(i + 1) * v.n]);
                m[g * k + i] = 1.0;
            }
        }
        let mask = Tensor::new(vec![b, k], m)?;
        let xv = tape.constant(Tensor::new(vec![b, k, d], x)?);
        let av = tape.constant(Tensor::new(vec![b, k, k], a)?);
        let mut binder = Binder::eval(&self.store);
        let lp = self.forward(tape, &mut binder, xv, av, &mask)?;
        Ok(tape.value(lp).data.chunks(2).map(prediction).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_checkpoint(path, &self.config, &self.store)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, loaded): (ClassifierConfig, ParameterStore) = load_checkpoint(path)?;
        let mut model = Self::new(config, 0);
        model.store.load_from(loaded)?;
        Ok(model)
    }
}

/// Argmax with ties going to class 0.
fn prediction(lp: &[f64]) -> Prediction {
    Prediction { label: (lp[1] > lp[0]) as u8, log_probs: [lp[0], lp[1]] }
}

pub fn accuracy(model: &ClassifierModel, graphs: &[&Graph]) -> Result<f64> {
    if graphs.is_empty() {
        return contract("accuracy over an empty set");
    }
    let preds = model.predict_graphs(graphs)?;
    let hits = preds.iter().zip(graphs).filter(|(p, g)| p.label == g.label).count();
    Ok(hits as f64 / graphs.len() as f64)
}

/// Area under the ROC curve of `P(y = 1)`, with ties counted as one half.
pub fn auc_roc(model: &ClassifierModel, graphs: &[&Graph]) -> Result<f64> {
    let preds = model.predict_graphs(graphs)?;
    let pos: Vec<f64> = preds.iter().zip(graphs).filter(|(_, g)| g.label == 1).map(|(p, _)| p.log_probs[1]).collect();
    let neg: Vec<f64> = preds.iter().zip(graphs).filter(|(_, g)| g.label == 0).map(|(p, _)| p.log_probs[1]).collect();
    if pos.is_empty() || neg.is_empty() {
        return contract("AUC needs both classes");
    }
    let mut score = 0.0;
    for p in &pos {
        for n in &neg {
            score += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    Ok(score / (pos.len() * neg.len()) as f64)
}

/// One Adam step on a mini-batch; returns the mean NLL.
fn train_step(model: &mut ClassifierModel, batch: &PaddedBatch, adam: &AdamConfig, rng: ChaCha8Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, updates) = {
        let mut binder = Binder::train(&model.store, rng);
        let x = tape.constant(batch.features.clone());
        let a = tape.constant(batch.adjacency.clone());
        let lp = model.forward(&mut tape, &mut binder, x, a, &batch.node_mask)?;
        let nll = tape.nll(lp, &batch.labels)?;
        (tape.mean(nll), binder.bn_updates)
    };
    let grads = tape.backward(loss)?;
    model.store.absorb_grads(&tape, &grads)?;
    let loss_value = tape.value(loss).item()?;
    model.store.adam_step(adam)?;
    apply_bn_updates(&mut model.store, &updates)?;
    Ok(loss_value)
}

/// Adam on the train split; keeps the parameters with the best validation
/// accuracy (earliest epoch on ties).
pub fn train_classifier(ds: &Dataset, cfg: &ClassifierTrainConfig) -> Result<(ClassifierModel, ClassifierReport)> {
    let train = ds.train();
    let val = ds.val();
    if train.is_empty() || val.is_empty() {
        return contract("classifier training needs non-empty train and validation splits");
    }
    if cfg.batch_size == 0 {
        return Err(CoreError::Config("batch_size must be positive".into()));
    }
    let config = ClassifierConfig::new(ds.max_nodes(), ds.feature_dim());
    let mut model = ClassifierModel::new(config, derive_seed(cfg.seed, 0));
    let adam = AdamConfig::new(cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut best = (model.store.clone(), 0usize, f64::NEG_INFINITY);
    let mut report = ClassifierReport { best_epoch: 0, best_val_accuracy: 0.0, train_loss: vec![], val_accuracy: vec![] };
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let graphs: Vec<&Graph> = chunk.iter().map(|i| train[*i]).collect();
            let batch = PaddedBatch::from_graphs(&graphs, config.k, config.d)?;
            let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0xd50f, step));
            epoch_loss += train_step(&mut model, &batch, &adam, rng)?;
            batches += 1;
            step += 1;
        }
        report.train_loss.push(epoch_loss / batches as f64);
        let acc = accuracy(&model, &val)?;
        report.val_accuracy.push(acc);
        if acc > best.2 {
            best = (model.store.clone(), epoch, acc);
        }
    }
    if cfg.epochs > 0 {
        model.store = best.0;
        report.best_epoch = best.1;
        report.best_val_accuracy = best.2;
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_graph(n: usize, d: usize, edges: &[(usize, usize)]) -> Graph {
        let f = (0..n * d).map(|i| (i as f64 * 0.37).sin()).collect();
        Graph::from_edges("t", n, d, f, edges, 0, 0).unwrap()
    }

    #[test]
    fn output_shape_and_normalization() {
        let model = ClassifierModel::new(ClassifierConfig::new(20, 16), 1);
        let graphs: Vec<Graph> = (0..7).map(|i| tiny_graph(5 + i, 16, &[(0, 1), (1, 2)])).collect();
        let refs: Vec<&Graph> = graphs.iter().collect();
        let batch = PaddedBatch::from_graphs(&refs, 20, 16).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::eval(&model.store);
        let x = tape.constant(batch.features.clone());
        let a = tape.constant(batch.adjacency.clone());
        let lp = model.forward(&mut tape, &mut b, x, a, &batch.node_mask).unwrap();
        assert_eq!(tape.value(lp).shape, vec![7, 2]);
        for row in tape.value(lp).data.chunks(2) {
            assert!((row[0].exp() + row[1].exp() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn wrong_width_is_a_dimension_error() {
        let model = ClassifierModel::new(ClassifierConfig::new(6, 3), 1);
        let g = tiny_graph(4, 2, &[]);
        assert!(model.predict(&g).is_err());
    }

    #[test]
    fn ties_go_to_class_zero() {
        assert_eq!(prediction(&[-0.5f64.ln().abs(), -0.5f64.ln().abs()]).label, 0);
        assert_eq!(prediction(&[-1.0, -0.1]).label, 1);
    }

    #[test]
    fn empty_split_rejected() {
        let header = crate::graphs::DatasetHeader { kind: "x".into(), max_nodes: 3, feature_dim: 1, ..Default::default() };
        let ds = Dataset::with_splits(header, vec![tiny_graph(3, 1, &[])], crate::graphs::Splits {
            train: vec![0],
            val: vec![],
            test: vec![],
        })
        .unwrap();
        assert!(matches!(train_classifier(&ds, &ClassifierTrainConfig::default()), Err(CoreError::Contract(_))));
    }
}
