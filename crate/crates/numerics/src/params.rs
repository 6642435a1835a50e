//! Named parameters, Adam state and the JSON checkpoint format.

use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{NumericsError, Result};
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    value: Tensor,
    grad: Option<Vec<f64>>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Trainable parameters by name, their Adam moments, and non-trainable
/// buffers (batch-norm running statistics).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: IndexMap<String, Slot>,
    buffers: IndexMap<String, Tensor>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let n = value.numel();
        self.params.insert(
            name.into(),
            Slot {
                value,
                grad: None,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| NumericsError::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|s| &mut s.value)
            .ok_or_else(|| NumericsError::Contract(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| NumericsError::Contract(format!("unknown buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| NumericsError::Contract(format!("unknown buffer {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Adam step counter.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|s| s.grad.as_deref())
    }

    pub fn set_grad(&mut self, name: &str, grad: Vec<f64>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| NumericsError::Contract(format!("unknown parameter {name}")))?;
        if grad.len() != slot.value.numel() {
            return Err(NumericsError::Dimension {
                op: "set_grad",
                detail: format!("{name}: {} vs {}", grad.len(), slot.value.numel()),
            });
        }
        slot.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for slot in self.params.values_mut() {
            slot.grad = None;
        }
    }

    /// Copies gradients of every parameter bound on `tape` into the store.
    pub fn absorb_grads(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for (name, var) in tape.bindings() {
            let g = grads
                .get(*var)
                .ok_or_else(|| NumericsError::Contract(format!("no gradient for {name}")))?;
            self.set_grad(name, g.to_vec())?;
        }
        Ok(())
    }

    /// One Adam update over every parameter. L2 weight decay enters as
    /// `g + weight_decay * w` before the moment update.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, s)| s.grad.is_none()) {
            return Err(NumericsError::Contract(format!("missing gradient for {name}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for slot in self.params.values_mut() {
            let grad = slot.grad.take().expect("checked above");
            for i in 0..grad.len() {
                let w = &mut slot.value.data[i];
                let g = grad[i] + cfg.weight_decay * *w;
                slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
                slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Replaces values, buffers and optimizer state with `other`'s, which must
    /// define exactly the same names and shapes.
    pub fn load_from(&mut self, other: ParameterStore) -> Result<()> {
        self.check_compatible(&other)?;
        *self = other;
        Ok(())
    }

    pub fn check_compatible(&self, other: &ParameterStore) -> Result<()> {
        let mismatch = |what: &str, name: &str| {
            Err(NumericsError::Checkpoint(format!("{what} mismatch for {name}")))
        };
        if self.params.len() != other.params.len() || self.buffers.len() != other.buffers.len() {
            return Err(NumericsError::Checkpoint(format!(
                "expected {} parameters / {} buffers, checkpoint has {} / {}",
                self.params.len(),
                self.buffers.len(),
                other.params.len(),
                other.buffers.len()
            )));
        }
        for (name, slot) in &self.params {
            match other.params.get(name) {
                None => return mismatch("missing parameter", name),
                Some(o) if o.value.shape != slot.value.shape => return mismatch("shape", name),
                _ => {}
            }
        }
        for (name, buf) in &self.buffers {
            match other.buffers.get(name) {
                None => return mismatch("missing buffer", name),
                Some(o) if o.shape != buf.shape => return mismatch("buffer shape", name),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let tensors = |it: &mut dyn Iterator<Item = (&String, &Tensor)>| {
            Value::Object(
                it.map(|(k, t)| (k.clone(), serde_json::to_value(t).expect("tensor serializes")))
                    .collect(),
            )
        };
        let vecs = |f: &dyn Fn(&Slot) -> &Vec<f64>| {
            Value::Object(
                self.params
                    .iter()
                    .map(|(k, s)| (k.clone(), serde_json::to_value(f(s)).expect("vec serializes")))
                    .collect(),
            )
        };
        serde_json::json!({
            "parameters": tensors(&mut self.params.iter().map(|(k, s)| (k, &s.value))),
            "buffers": tensors(&mut self.buffers.iter()),
            "adam": { "m": vecs(&|s| &s.m), "v": vecs(&|s| &s.v), "t": self.step },
        })
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let bad = |msg: &str| NumericsError::Checkpoint(msg.to_string());
        let obj = value.as_object().ok_or_else(|| bad("checkpoint is not an object"))?;
        let params: IndexMap<String, Tensor> = serde_json::from_value(
            obj.get("parameters").cloned().ok_or_else(|| bad("missing \"parameters\""))?,
        )?;
        let buffers: IndexMap<String, Tensor> = match obj.get("buffers") {
            Some(b) => serde_json::from_value(b.clone())?,
            None => IndexMap::new(),
        };
        #[derive(Deserialize)]
        struct Adam {
            m: IndexMap<String, Vec<f64>>,
            v: IndexMap<String, Vec<f64>>,
            t: u64,
        }
        let adam: Adam =
            serde_json::from_value(obj.get("adam").cloned().ok_or_else(|| bad("missing \"adam\""))?)?;
        let mut store = ParameterStore::new();
        for (name, t) in params {
            let t = Tensor::new(t.shape, t.data)?;
            let n = t.numel();
            let m = adam.m.get(&name).cloned().unwrap_or_else(|| vec![0.0; n]);
            let v = adam.v.get(&name).cloned().unwrap_or_else(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(bad(&format!("adam state shape mismatch for {name}")));
            }
            store.params.insert(name, Slot { value: t, grad: None, m, v });
        }
        for (name, t) in buffers {
            store.buffers.insert(name, Tensor::new(t.shape, t.data)?);
        }
        store.step = adam.t;
        Ok(store)
    }
}

/// Writes `{"config": cfg, "parameters": .., "buffers": .., "adam": ..}`.
pub fn save_checkpoint<C: Serialize>(path: &Path, config: &C, store: &ParameterStore) -> Result<()> {
    let mut doc = store.to_json();
    doc.as_object_mut()
        .expect("store json is an object")
        .insert("config".into(), serde_json::to_value(config)?);
    std::fs::write(path, serde_json::to_vec(&doc)?)?;
    Ok(())
}

pub fn load_checkpoint<C: DeserializeOwned>(path: &Path) -> Result<(C, ParameterStore)> {
    let bytes = std::fs::read(path)?;
    let doc: Value = serde_json::from_slice(&bytes)?;
    let cfg = doc
        .get("config")
        .cloned()
        .ok_or_else(|| NumericsError::Checkpoint("missing \"config\"".into()))?;
    Ok((serde_json::from_value(cfg)?, ParameterStore::from_json(&doc)?))
}
