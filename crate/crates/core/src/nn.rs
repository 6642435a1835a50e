//! Layer building blocks shared by the classifier and the generator.

use clearcf_numerics::{ParameterStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics observed by a training-mode batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Binds one model's parameters onto a tape.
///
/// `trainable` decides whether gradients are tracked for the weights;
/// `training` switches batch-norm to batch statistics and enables dropout.
pub struct Binder<'s> {
    store: &'s ParameterStore,
    trainable: bool,
    training: bool,
    dropout_rng: Option<ChaCha8Rng>,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'s> Binder<'s> {
    pub fn train(store: &'s ParameterStore, dropout_rng: ChaCha8Rng) -> Self {
        Self { store, trainable: true, training: true, dropout_rng: Some(dropout_rng), bn_updates: vec![] }
    }

    /// Frozen weights, running statistics, no dropout.
    pub fn eval(store: &'s ParameterStore) -> Self {
        Self { store, trainable: false, training: false, dropout_rng: None, bn_updates: vec![] }
    }

    /// Tracked weights with eval-mode normalization; for gradient checks.
    pub fn eval_tracked(store: &'s ParameterStore) -> Self {
        Self { store, trainable: true, training: false, dropout_rng: None, bn_updates: vec![] }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn weight(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(if self.trainable { tape.param(self.store, name)? } else { tape.frozen(self.store, name)? })
    }

    /// `x [N, in] @ W + b`.
    pub fn linear(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let w = self.weight(tape, &format!("{prefix}.w"))?;
        let b = self.weight(tape, &format!("{prefix}.b"))?;
        let h = tape.matmul(x, w)?;
        Ok(tape.add(h, b)?)
    }

    /// Batch norm over the leading axis of `[N, c]`.
    pub fn batch_norm(&mut self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.weight(tape, &format!("{prefix}.gamma"))?;
        let beta = self.weight(tape, &format!("{prefix}.beta"))?;
        let normed = if self.training {
            let n = tape.shape(x)[0];
            let mean = tape.mean_axis(x, 0)?;
            let centered = tape.sub(x, mean)?;
            let sq = tape.square(centered);
            let var = tape.mean_axis(sq, 0)?;
            let unbiased = n as f64 / (n.max(2) - 1) as f64;
            self.bn_updates.push(BnUpdate {
                prefix: prefix.to_string(),
                mean: tape.value(mean).data.clone(),
                var: tape.value(var).data.iter().map(|v| v * unbiased).collect(),
            });
            let shifted = tape.add_scalar(var, BN_EPS);
            let sd = tape.sqrt(shifted)?;
            tape.div(centered, sd)?
        } else {
            let rm = self.store.buffer(&format!("{prefix}.running_mean"))?;
            let rv = self.store.buffer(&format!("{prefix}.running_var"))?;
            let inv_sd = Tensor::new(rv.shape.clone(), rv.data.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect())?;
            let rm = tape.constant(rm.clone());
            let inv_sd = tape.constant(inv_sd);
            let centered = tape.sub(x, rm)?;
            tape.mul(centered, inv_sd)?
        };
        let scaled = tape.mul(normed, gamma)?;
        Ok(tape.add(scaled, beta)?)
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut().filter(|_| self.training && p > 0.0) else {
            return Ok(x);
        };
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        Ok(tape.mul(x, m)?)
    }
}

/// Folds observed batch statistics into the running buffers.
pub fn apply_bn_updates(store: &mut ParameterStore, updates: &[BnUpdate]) -> Result<()> {
    for u in updates {
        let rm = store.buffer_mut(&format!("{}.running_mean", u.prefix))?;
        for (r, m) in rm.data.iter_mut().zip(&u.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = store.buffer_mut(&format!("{}.running_var", u.prefix))?;
        for (r, v) in rv.data.iter_mut().zip(&u.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
    Ok(())
}

/// Glorot-uniform weights and zero bias.
pub fn init_linear(store: &mut ParameterStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    store.insert(format!("{prefix}.w"), Tensor::new(vec![fan_in, fan_out], w).expect("sized"));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_batch_norm(store: &mut ParameterStore, prefix: &str, width: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[width], 1.0));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[width]));
    store.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[width]));
    store.insert_buffer(format!("{prefix}.running_var"), Tensor::full(&[width], 1.0));
}

/// `mask_i * mask_j` over `[B, k, k]`.
pub fn pair_mask(mask: &Tensor) -> Tensor {
    let (b, k) = (mask.shape[0], mask.shape[1]);
    let mut out = vec![0.0; b * k * k];
    for g in 0..b {
        let m = &mask.data[g * k..(g + 1) * k];
        for i in 0..k {
            for j in 0..k {
                out[g * k * k + i * k + j] = m[i] * m[j];
            }
        }
    }
    Tensor { shape: vec![b, k, k], data: out }
}

/// `D^-1/2 (A + I) D^-1/2` over the real nodes; padded rows and columns are
/// zero. `adj` may be relaxed (entries in `[0, 1]`).
pub fn normalized_adjacency(tape: &mut Tape, adj: Var, mask: &Tensor) -> Result<Var> {
    let (b, k) = (mask.shape[0], mask.shape[1]);
    let mut eye = vec![0.0; b * k * k];
    for g in 0..b {
        for i in 0..k {
            eye[g * k * k + i * k + i] = mask.data[g * k + i];
        }
    }
    let pm = tape.constant(pair_mask(mask));
    let eye = tape.constant(Tensor::new(vec![b, k, k], eye)?);
    let masked = tape.mul(adj, pm)?;
    let with_loops = tape.add(masked, eye)?;
    let deg = tape.sum_axis(with_loops, 2)?;
    // padded nodes get degree 1 so the power stays finite; their rows are zero anyway
    let pad = tape.constant(Tensor::new(vec![b, k], mask.data.iter().map(|m| 1.0 - m).collect())?);
    let deg = tape.add(deg, pad)?;
    let dinv = tape.powf(deg, -0.5)?;
    let rows = tape.reshape(dinv, &[b, k, 1])?;
    let cols = tape.reshape(dinv, &[b, 1, k])?;
    let left = tape.mul(with_loops, rows)?;
    Ok(tape.mul(left, cols)?)
}

/// One graph-convolution layer `relu(Â H W + b)` on `[B, k, c]` node states.
pub fn gcn_layer(binder: &Binder, tape: &mut Tape, prefix: &str, a_norm: Var, h: Var) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    let (b, k, c) = (s[0], s[1], s[2]);
    let flat = tape.reshape(h, &[b * k, c])?;
    let hw = binder.linear(tape, prefix, flat)?;
    let out = tape.shape(hw)[1];
    let hw = tape.reshape(hw, &[b, k, out])?;
    let agg = tape.bmm(a_norm, hw)?;
    Ok(tape.relu(agg))
}
