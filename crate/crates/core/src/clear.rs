//! The counterfactual generator: a conditional VAE whose prior depends on
//! the desired label and the auxiliary variable S.
//!
//! Training minimizes
//! `d_A + beta * d_X + alpha * NLL(f(X_cf, A_hat), y*) + KL(Q || P)`
//! with `f` frozen and fed the relaxed edge probabilities so that the whole
//! objective is differentiable. Generated slots are aligned to the
//! explainee's nodes by position.

use std::path::Path;

use clearcf_numerics::{load_checkpoint, save_checkpoint, AdamConfig, ParameterStore, Tape, Tensor, Var, PROB_EPS};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierModel, GraphView};
use crate::counterfactual::{sample_adjacency, Counterfactual};
use crate::datagen::derive_seed;
use crate::error::{contract, CoreError, Result};
use crate::graphs::{Dataset, Graph, PaddedBatch};
use crate::nn::{apply_bn_updates, gcn_layer, init_batch_norm, init_linear, normalized_adjacency, pair_mask, Binder};

/// Log-variances are kept in this range to keep `exp` finite early in training.
const LOG_VAR_RANGE: (f64, f64) = (-10.0, 10.0);
const GENERATE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossToggles {
    pub prediction: bool,
    pub adjacency: bool,
    pub features: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self { prediction: true, adjacency: true, features: true }
    }
}

/// The full model and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Clear,
    ClearVae,
    ClearNc,
    ClearNpa,
    ClearNpx,
    ClearNp,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Clear, Variant::ClearVae, Variant::ClearNc, Variant::ClearNpa, Variant::ClearNpx, Variant::ClearNp];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Clear => "clear",
            Variant::ClearVae => "clear-vae",
            Variant::ClearNc => "clear-nc",
            Variant::ClearNpa => "clear-npa",
            Variant::ClearNpx => "clear-npx",
            Variant::ClearNp => "clear-np",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn apply(self, cfg: &mut ClearConfig) {
        cfg.use_aux_s = self != Variant::ClearVae;
        cfg.toggles = LossToggles {
            prediction: self != Variant::ClearNc,
            adjacency: !matches!(self, Variant::ClearNpa | Variant::ClearNp),
            features: !matches!(self, Variant::ClearNpx | Variant::ClearNp),
        };
    }
}

/// Architecture and objective weights; stored with checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClearConfig {
    pub k: usize,
    pub d: usize,
    pub latent: usize,
    pub hidden: usize,
    pub alpha: f64,
    pub beta: f64,
    pub use_aux_s: bool,
    pub toggles: LossToggles,
}

impl ClearConfig {
    pub fn new(k: usize, d: usize) -> Self {
        Self { k, d, latent: 32, hidden: 64, alpha: 5.0, beta: 10.0, use_aux_s: true, toggles: LossToggles::default() }
    }

    pub fn variant(mut self, v: Variant) -> Self {
        v.apply(&mut self);
        self
    }

    fn cond_width(&self) -> usize {
        1 + self.use_aux_s as usize
    }

    fn pairs(&self) -> usize {
        self.k * (self.k - 1) / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClearTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Validation validity is checked every this many epochs (and after the last).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for ClearTrainConfig {
    fn default() -> Self {
        Self { epochs: 1000, batch_size: 500, lr: 1e-3, weight_decay: 0.0, eval_every: 10, seed: 0 }
    }
}

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDiag {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianDiag {
    /// `mean + sigma * eps`.
    pub fn sample(&self, eps: &[f64]) -> Vec<f64> {
        self.mean.iter().zip(&self.log_var).zip(eps).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect()
    }
}

/// Closed-form `KL(q || p)` summed over dimensions.
pub fn kl_diag_gaussians(q: &GaussianDiag, p: &GaussianDiag) -> Result<f64> {
    let dims = q.mean.len();
    if [q.log_var.len(), p.mean.len(), p.log_var.len()].iter().any(|l| *l != dims) {
        return contract("KL between Gaussians of different dimension");
    }
    Ok((0..dims)
        .map(|i| {
            let (vq, vp) = (q.log_var[i].exp(), p.log_var[i].exp());
            0.5 * (p.log_var[i] - q.log_var[i]) + (vq + (q.mean[i] - p.mean[i]).powi(2)) / (2.0 * vp) - 0.5
        })
        .sum())
}

/// Tape-level batch of Gaussians, `[B, latent]` each.
#[derive(Debug, Clone, Copy)]
pub struct GaussVars {
    pub mean: Var,
    pub log_var: Var,
}

/// Per-row KL, shape `[B]`.
pub fn kl_tape(tape: &mut Tape, q: GaussVars, p: GaussVars) -> Result<Var> {
    let diff = tape.sub(p.log_var, q.log_var)?;
    let half = tape.scale(diff, 0.5);
    let vq = tape.exp(q.log_var);
    let dm = tape.sub(q.mean, p.mean)?;
    let dm2 = tape.square(dm);
    let num = tape.add(vq, dm2)?;
    let vp = tape.exp(p.log_var);
    let ratio = tape.div(num, vp)?;
    let ratio = tape.scale(ratio, 0.5);
    let term = tape.add(half, ratio)?;
    let term = tape.add_scalar(term, -0.5);
    Ok(tape.sum_axis(term, 1)?)
}

/// `z = mean + exp(log_var / 2) * eps`.
pub fn reparam_sample(tape: &mut Tape, dist: GaussVars, eps: Tensor) -> Result<Var> {
    let half = tape.scale(dist.log_var, 0.5);
    let sd = tape.exp(half);
    let e = tape.constant(eps);
    let noise = tape.mul(sd, e)?;
    Ok(tape.add(dist.mean, noise)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityLoss {
    pub d_a: f64,
    pub d_x: f64,
    pub total: f64,
}

/// Reference similarity on aligned `n`-node arrays: mean clamped BCE over
/// all `n^2` adjacency entries plus `beta` times the mean per-node L2 distance.
pub fn similarity_loss(g: &Graph, x_cf: &[f64], a_hat: &[f64], beta: f64) -> Result<SimilarityLoss> {
    let (n, d) = (g.n, g.feature_dim);
    if x_cf.len() != n * d || a_hat.len() != n * n {
        return contract("similarity inputs are not aligned to the explainee");
    }
    let mut d_a = 0.0;
    for (a, p) in g.adjacency().iter().zip(a_hat) {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        d_a -= if *a == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    d_a /= (n * n) as f64;
    let d_x = (0..n)
        .map(|i| {
            g.feature_row(i).iter().zip(&x_cf[i * d..(i + 1) * d]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        })
        .sum::<f64>()
        / n as f64;
    Ok(SimilarityLoss { d_a, d_x, total: d_a + beta * d_x })
}

/// Batch-mean loss terms; `total` is their sum.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub d_a: Var,
    pub beta_d_x: Var,
    pub alpha_nll: Var,
    pub kl: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossValues {
    pub total: f64,
    pub d_a: f64,
    pub beta_d_x: f64,
    pub alpha_nll: f64,
    pub kl: f64,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> Result<LossValues> {
        Ok(LossValues {
            total: tape.value(self.total).item()?,
            d_a: tape.value(self.d_a).item()?,
            beta_d_x: tape.value(self.beta_d_x).item()?,
            alpha_nll: tape.value(self.alpha_nll).item()?,
            kl: tape.value(self.kl).item()?,
        })
    }
}

/// Decoder output: `x [B, k, d]`, `a_hat [B, k, k]`.
#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    pub x: Var,
    pub a_hat: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClearModel {
    pub config: ClearConfig,
    pub store: ParameterStore,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClearReport {
    pub losses: Vec<LossValues>,
    pub val_validity: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub best_val_validity: f64,
}

fn two_layer(store: &mut ParameterStore, prefix: &str, i: usize, h: usize, o: usize, rng: &mut ChaCha8Rng) {
    init_linear(store, &format!("{prefix}.l1"), i, h, rng);
    init_linear(store, &format!("{prefix}.l2"), h, o, rng);
}

fn bn_head(store: &mut ParameterStore, prefix: &str, i: usize, h: usize, o: usize, rng: &mut ChaCha8Rng) {
    init_linear(store, &format!("{prefix}.l1"), i, h, rng);
    init_batch_norm(store, &format!("{prefix}.bn1"), h);
    init_linear(store, &format!("{prefix}.l2"), h, o, rng);
}

fn three_layer(store: &mut ParameterStore, prefix: &str, i: usize, h: usize, o: usize, rng: &mut ChaCha8Rng) {
    init_linear(store, &format!("{prefix}.l1"), i, h, rng);
    init_batch_norm(store, &format!("{prefix}.bn1"), h);
    init_linear(store, &format!("{prefix}.l2"), h, h, rng);
    init_batch_norm(store, &format!("{prefix}.bn2"), h);
    init_linear(store, &format!("{prefix}.l3"), h, o, rng);
}

impl ClearModel {
    pub fn new(config: ClearConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let (c, h, l) = (config.cond_width(), config.hidden, config.latent);
        two_layer(&mut store, "prior.mean", c, h, l, &mut rng);
        two_layer(&mut store, "prior.logvar", c, h, l, &mut rng);
        init_linear(&mut store, "enc.gc", config.d + c, h, &mut rng);
        bn_head(&mut store, "enc.mean", h, h, l, &mut rng);
        bn_head(&mut store, "enc.logvar", h, h, l, &mut rng);
        three_layer(&mut store, "dec.x", l + 1, h, config.k * config.d, &mut rng);
        three_layer(&mut store, "dec.a", l + 1, h, config.pairs(), &mut rng);
        Self { config, store }
    }

    /// Conditioning rows `[y*, S/9]`, or `[y*]` without the auxiliary variable.
    pub fn conditioning(&self, y_star: &[u8], s: &[u8]) -> Tensor {
        let c = self.config.cond_width();
        let mut data = Vec::with_capacity(y_star.len() * c);
        for (y, s) in y_star.iter().zip(s) {
            data.push(*y as f64);
            if self.config.use_aux_s {
                data.push(*s as f64 / 9.0);
            }
        }
        Tensor { shape: vec![y_star.len(), c], data }
    }

    fn log_var(tape: &mut Tape, raw: Var) -> Var {
        tape.clamp(raw, LOG_VAR_RANGE.0, LOG_VAR_RANGE.1)
    }

    pub fn prior(&self, tape: &mut Tape, binder: &Binder, cond: Var) -> Result<GaussVars> {
        let mut heads = [cond; 2];
        for (slot, prefix) in heads.iter_mut().zip(["prior.mean", "prior.logvar"]) {
            let h = binder.linear(tape, &format!("{prefix}.l1"), cond)?;
            let h = tape.relu(h);
            *slot = binder.linear(tape, &format!("{prefix}.l2"), h)?;
        }
        Ok(GaussVars { mean: heads[0], log_var: Self::log_var(tape, heads[1]) })
    }

    /// Posterior `Q(Z | G, S, y*)` for padded node features `x [B, k, d]`.
    pub fn encode_vars(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        adj: Var,
        mask: &Tensor,
        cond: &Tensor,
    ) -> Result<GaussVars> {
        let (b, k) = (mask.shape[0], mask.shape[1]);
        let c = cond.shape[1];
        // conditioning broadcast onto every real node
        let mut node_cond = vec![0.0; b * k * c];
        for g in 0..b {
            for i in 0..k {
                if mask.data[g * k + i] != 0.0 {
                    node_cond[(g * k + i) * c..(g * k + i + 1) * c].copy_from_slice(&cond.data[g * c..(g + 1) * c]);
                }
            }
        }
        let nc = tape.constant(Tensor::new(vec![b, k, c], node_cond)?);
        let h = tape.concat(&[x, nc])?;
        let a = normalized_adjacency(tape, adj, mask)?;
        let h = gcn_layer(binder, tape, "enc.gc", a, h)?;
        let pooled = tape.pool_mean(h, mask)?;
        let mut heads = [pooled; 2];
        for (slot, prefix) in heads.iter_mut().zip(["enc.mean", "enc.logvar"]) {
            let z = binder.linear(tape, &format!("{prefix}.l1"), pooled)?;
            let z = binder.batch_norm(tape, &format!("{prefix}.bn1"), z)?;
            let z = tape.relu(z);
            *slot = binder.linear(tape, &format!("{prefix}.l2"), z)?;
        }
        Ok(GaussVars { mean: heads[0], log_var: Self::log_var(tape, heads[1]) })
    }

    /// Decodes `z [B, latent]` given desired labels `y_star [B, 1]`.
    pub fn decode_vars(&self, tape: &mut Tape, binder: &mut Binder, z: Var, y_star: Var) -> Result<Decoded> {
        let (k, d) = (self.config.k, self.config.d);
        let b = tape.shape(z)[0];
        let input = tape.concat(&[z, y_star])?;
        let mut outs = [input; 2];
        for (slot, prefix) in outs.iter_mut().zip(["dec.x", "dec.a"]) {
            let mut h = input;
            for layer in 1..=2 {
                h = binder.linear(tape, &format!("{prefix}.l{layer}"), h)?;
                h = binder.batch_norm(tape, &format!("{prefix}.bn{layer}"), h)?;
                h = tape.relu(h);
            }
            *slot = binder.linear(tape, &format!("{prefix}.l3"), h)?;
        }
        let x = tape.reshape(outs[0], &[b, k, d])?;
        let probs = tape.sigmoid(outs[1]);
        let a_hat = tape.sym_from_upper(probs, k)?;
        Ok(Decoded { x, a_hat })
    }

    /// The training objective on one batch with fixed reparameterization noise
    /// `eps [B, latent]`. `clf` is evaluated frozen on the relaxed output.
    pub fn loss(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        clf: &ClassifierModel,
        batch: &PaddedBatch,
        y_star: &[u8],
        eps: Tensor,
    ) -> Result<LossVars> {
        let cfg = &self.config;
        let (b, k) = (batch.len(), cfg.k);
        if y_star.len() != b {
            return contract("one desired label per graph");
        }
        let cond = self.conditioning(y_star, &batch.aux);
        let x = tape.constant(batch.features.clone());
        let adj = tape.constant(batch.adjacency.clone());
        let cond_v = tape.constant(cond.clone());
        let prior = self.prior(tape, binder, cond_v)?;
        let post = self.encode_vars(tape, binder, x, adj, &batch.node_mask, &cond)?;
        let z = reparam_sample(tape, post, eps)?;
        let ys = tape.constant(Tensor::new(vec![b, 1], y_star.iter().map(|y| *y as f64).collect())?);
        let dec = self.decode_vars(tape, binder, z, ys)?;

        let inv_n = |p: i32| Tensor {
            shape: vec![b],
            data: batch.node_counts.iter().map(|n| 1.0 / (*n as f64).powi(p)).collect(),
        };

        // d_A: clamped BCE averaged over each explainee's n x n block
        let pm = tape.constant(pair_mask(&batch.node_mask));
        let p = tape.clamp(dec.a_hat, PROB_EPS, 1.0 - PROB_EPS);
        let lp = tape.log(p)?;
        let q = tape.neg(p);
        let q = tape.add_scalar(q, 1.0);
        let lq = tape.log(q)?;
        let not_adj = tape.constant(Tensor::new(vec![b, k, k], batch.adjacency.data.iter().map(|a| 1.0 - a).collect())?);
        let t1 = tape.mul(adj, lp)?;
        let t0 = tape.mul(not_adj, lq)?;
        let ll = tape.add(t1, t0)?;
        let ll = tape.mul(ll, pm)?;
        let ll = tape.sum_axis(ll, 2)?;
        let ll = tape.sum_axis(ll, 1)?;
        let n2 = tape.constant(inv_n(2));
        let ll = tape.mul(ll, n2)?;
        let d_a = tape.neg(ll);

        // d_X: mean L2 distance over the explainee's nodes
        let diff = tape.sub(dec.x, x)?;
        let dist = tape.row_norm(diff)?;
        let mask = tape.constant(batch.node_mask.clone());
        let dist = tape.mul(dist, mask)?;
        let dist = tape.sum_axis(dist, 1)?;
        let n1 = tape.constant(inv_n(1));
        let d_x = tape.mul(dist, n1)?;

        // prediction loss on the relaxed counterfactual restricted to n nodes
        let node_mask3 = tape.constant(batch.node_mask.clone().reshaped(vec![b, k, 1])?);
        let x_cf = tape.mul(dec.x, node_mask3)?;
        let mut frozen = Binder::eval(&clf.store);
        let logp = clf.forward(tape, &mut frozen, x_cf, dec.a_hat, &batch.node_mask)?;
        let targets: Vec<usize> = y_star.iter().map(|y| *y as usize).collect();
        let nll = tape.nll(logp, &targets)?;

        let kl = kl_tape(tape, post, prior)?;

        let w = |on: bool, c: f64| if on { c } else { 0.0 };
        let d_a = tape.scale(d_a, w(cfg.toggles.adjacency, 1.0));
        let d_a = tape.mean(d_a);
        let beta_d_x = tape.scale(d_x, w(cfg.toggles.features, cfg.beta));
        let beta_d_x = tape.mean(beta_d_x);
        let alpha_nll = tape.scale(nll, w(cfg.toggles.prediction, cfg.alpha));
        let alpha_nll = tape.mean(alpha_nll);
        let kl = tape.mean(kl);
        let s1 = tape.add(d_a, beta_d_x)?;
        let s2 = tape.add(s1, alpha_nll)?;
        let total = tape.add(s2, kl)?;
        Ok(LossVars { total, d_a, beta_d_x, alpha_nll, kl })
    }

    /// Eval-mode posterior for a single graph.
    pub fn encode(&self, g: &Graph, y_star: u8) -> Result<GaussianDiag> {
        let batch = PaddedBatch::from_graphs(&[g], self.config.k, self.config.d)?;
        let mut tape = Tape::order_free();
        let mut binder = Binder::eval(&self.store);
        let x = tape.constant(batch.features.clone());
        let a = tape.constant(batch.adjacency.clone());
        let cond = self.conditioning(&[y_star], &[g.s]);
        let q = self.encode_vars(&mut tape, &mut binder, x, a, &batch.node_mask, &cond)?;
        Ok(GaussianDiag { mean: tape.value(q.mean).data.clone(), log_var: tape.value(q.log_var).data.clone() })
    }

    /// Eval-mode decode of one latent vector: `(x k*d, a_hat k*k)`.
    pub fn decode(&self, z: &[f64], y_star: u8) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::order_free();
        let mut binder = Binder::eval(&self.store);
        let zv = tape.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
        let yv = tape.constant(Tensor::new(vec![1, 1], vec![y_star as f64])?);
        let dec = self.decode_vars(&mut tape, &mut binder, zv, yv)?;
        Ok((tape.value(dec.x).data.clone(), tape.value(dec.a_hat).data.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_checkpoint(path, &self.config, &self.store)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, loaded): (ClearConfig, ParameterStore) = load_checkpoint(path)?;
        let mut model = Self::new(config, 0);
        model.store.load_from(loaded)?;
        Ok(model)
    }
}

/// Desired label: the flipped ground truth.
pub fn desired_label(g: &Graph) -> u8 {
    1 - g.label
}

fn id_seed(seed: u64, id: &str) -> u64 {
    // FNV-1a keeps per-graph streams independent of list position
    let h = id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    derive_seed(seed, h)
}

/// Draws `n_cf` counterfactuals per graph. Each graph uses its own random
/// stream derived from `seed` and its id, so results do not depend on how
/// graphs are batched.
pub fn generate(
    model: &ClearModel,
    clf: &ClassifierModel,
    graphs: &[&Graph],
    n_cf: usize,
    seed: u64,
) -> Result<Vec<Vec<Counterfactual>>> {
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(GENERATE_CHUNK) {
        out.extend(generate_chunk(model, clf, chunk, n_cf, seed)?);
    }
    Ok(out)
}

fn generate_chunk(
    model: &ClearModel,
    clf: &ClassifierModel,
    graphs: &[&Graph],
    n_cf: usize,
    seed: u64,
) -> Result<Vec<Vec<Counterfactual>>> {
    let cfg = &model.config;
    let (k, d, l) = (cfg.k, cfg.d, cfg.latent);
    let b = graphs.len();
    let batch = PaddedBatch::from_graphs(graphs, k, d)?;
    let y_star: Vec<u8> = graphs.iter().map(|g| desired_label(g)).collect();
    let mut rngs: Vec<ChaCha8Rng> = graphs.iter().map(|g| ChaCha8Rng::seed_from_u64(id_seed(seed, &g.id))).collect();

    let mut tape = Tape::order_free();
    let mut binder = Binder::eval(&model.store);
    let x = tape.constant(batch.features.clone());
    let a = tape.constant(batch.adjacency.clone());
    let cond = model.conditioning(&y_star, &batch.aux);
    let q = model.encode_vars(&mut tape, &mut binder, x, a, &batch.node_mask, &cond)?;
    let ys = tape.constant(Tensor::new(vec![b, 1], y_star.iter().map(|y| *y as f64).collect())?);

    let mut per_graph: Vec<Vec<Counterfactual>> = vec![Vec::with_capacity(n_cf); b];
    for j in 0..n_cf {
        let mut eps = Vec::with_capacity(b * l);
        for rng in rngs.iter_mut() {
            eps.extend((0..l).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)));
        }
        let z = reparam_sample(&mut tape, q, Tensor::new(vec![b, l], eps)?)?;
        let dec = model.decode_vars(&mut tape, &mut binder, z, ys)?;
        let (xs, ahs) = (tape.value(dec.x).data.clone(), tape.value(dec.a_hat).data.clone());
        for (gi, g) in graphs.iter().enumerate() {
            let n = g.n;
            let x_cf = xs[gi * k * d..gi * k * d + n * d].to_vec();
            let mut a_hat = vec![0.0; n * n];
            for r in 0..n {
                a_hat[r * n..(r + 1) * n].copy_from_slice(&ahs[gi * k * k + r * k..gi * k * k + r * k + n]);
            }
            let a_cf = sample_adjacency(&a_hat, n, &mut rngs[gi]);
            per_graph[gi].push(Counterfactual {
                source_id: g.id.clone(),
                sample_index: j,
                n,
                feature_dim: d,
                x_cf,
                a_hat: Some(a_hat),
                a_cf,
                predicted: 0,
                desired: y_star[gi],
                s: g.s,
            });
        }
    }
    let dense: Vec<Vec<f64>> = per_graph.iter().flatten().map(|c| c.a_cf.iter().map(|v| *v as f64).collect()).collect();
    let views: Vec<GraphView> = per_graph
        .iter()
        .flatten()
        .zip(&dense)
        .map(|(c, a)| GraphView { n: c.n, features: &c.x_cf, adjacency: a })
        .collect();
    let preds = clf.predict_views(&views)?;
    for (cf, p) in per_graph.iter_mut().flatten().zip(preds) {
        cf.predicted = p.label;
    }
    Ok(per_graph)
}

/// Fraction of graphs whose single generated counterfactual hits `y*`.
pub fn validity_of(model: &ClearModel, clf: &ClassifierModel, graphs: &[&Graph], seed: u64) -> Result<f64> {
    let cfs = generate(model, clf, graphs, 1, seed)?;
    Ok(cfs.iter().flatten().filter(|c| c.is_valid()).count() as f64 / graphs.len().max(1) as f64)
}

/// Adam over the batch-mean objective, pairing each training graph with its
/// flipped label; keeps the parameters with the best validation validity.
pub fn train_clear(
    ds: &Dataset,
    clf: &ClassifierModel,
    config: ClearConfig,
    cfg: &ClearTrainConfig,
) -> Result<(ClearModel, ClearReport)> {
    let train = ds.train();
    let val = ds.val();
    if train.is_empty() || val.is_empty() {
        return contract("generator training needs non-empty train and validation splits");
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(CoreError::Config("batch_size and eval_every must be positive".into()));
    }
    if config.k != clf.config.k || config.d != clf.config.d {
        return contract("generator and classifier disagree on k or d");
    }
    let mut model = ClearModel::new(config, derive_seed(cfg.seed, 10));
    let adam = AdamConfig::new(cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11));
    let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 12));
    let val_seed = derive_seed(cfg.seed, 13);
    let mut report = ClearReport { losses: vec![], val_validity: vec![], best_epoch: 0, best_val_validity: f64::NEG_INFINITY };
    let mut best = model.store.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let graphs: Vec<&Graph> = chunk.iter().map(|i| train[*i]).collect();
            let batch = PaddedBatch::from_graphs(&graphs, config.k, config.d)?;
            let y_star: Vec<u8> = graphs.iter().map(|g| desired_label(g)).collect();
            let eps: Vec<f64> = (0..graphs.len() * config.latent).map(|_| StandardNormal.sample(&mut noise)).collect();
            let eps = Tensor::new(vec![graphs.len(), config.latent], eps)?;
            let mut tape = Tape::new();
            let (parts, updates) = {
                let mut binder = Binder::train(&model.store, ChaCha8Rng::seed_from_u64(0));
                let parts = model.loss(&mut tape, &mut binder, clf, &batch, &y_star, eps)?;
                (parts, binder.bn_updates)
            };
            let values = parts.values(&tape)?;
            if !values.total.is_finite() {
                return contract(format!("generator loss became non-finite at epoch {epoch}"));
            }
            let grads = tape.backward(parts.total)?;
            model.store.absorb_grads(&tape, &grads)?;
            model.store.adam_step(&adam)?;
            apply_bn_updates(&mut model.store, &updates)?;
            report.losses.push(values);
        }
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let v = validity_of(&model, clf, &val, val_seed)?;
            report.val_validity.push((epoch, v));
            if v > report.best_val_validity {
                report.best_val_validity = v;
                report.best_epoch = epoch;
                best = model.store.clone();
            }
        }
    }
    model.store = best;
    Ok((model, report))
}
