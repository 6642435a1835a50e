//! Experiment manifests: one JSON file with a section per stage, layered
//! over a scale preset and overridden by command-line flags.

use std::path::{Path, PathBuf};

use clearcf_core::classifier::ClassifierTrainConfig;
use clearcf_core::clear::{ClearConfig, ClearTrainConfig, LossToggles, Variant};
use clearcf_core::datagen::{CommunityParams, StratifiedNoise};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// 2,000 graphs, 150 classifier epochs, 300 generator epochs.
    #[default]
    Desk,
    /// Full-size data and epoch counts.
    Paper,
}

impl Scale {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(HarnessError::Config(format!("unknown scale {other:?}; expected desk or paper"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Community,
    Molhiv,
    Imdb,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Community => "community",
            DatasetKind::Molhiv => "molhiv",
            DatasetKind::Imdb => "imdb",
        }
    }
}

/// Label simulation over a molecule-style corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MolhivParams {
    /// Generic JSONL graph file; a synthetic sparse corpus is drawn when absent.
    pub source: Option<PathBuf>,
    pub n_graphs: usize,
    pub seed: u64,
    pub noise: StratifiedNoise,
}

impl Default for MolhivParams {
    fn default() -> Self {
        Self { source: None, n_graphs: 2000, seed: 1, noise: StratifiedNoise::default() }
    }
}

/// Label simulation over a collaboration-style corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImdbParams {
    pub source: Option<PathBuf>,
    pub n_graphs: usize,
    pub seed: u64,
    pub eps_y_sigma: f64,
}

impl Default for ImdbParams {
    fn default() -> Self {
        Self { source: None, n_graphs: 1500, seed: 1, eps_y_sigma: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Where the dataset file lives; defaults to `<out>/data/<kind>.jsonl`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub community: CommunityParams,
    #[serde(default)]
    pub molhiv: MolhivParams,
    #[serde(default)]
    pub imdb: ImdbParams,
}

/// Generator architecture, objective weights and optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClearSection {
    pub alpha: f64,
    pub beta: f64,
    pub latent: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub use_aux_s: bool,
    pub toggles: LossToggles,
}

impl Default for ClearSection {
    fn default() -> Self {
        let c = ClearConfig::new(1, 1);
        let t = ClearTrainConfig::default();
        Self {
            alpha: c.alpha,
            beta: c.beta,
            latent: c.latent,
            hidden: c.hidden,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            eval_every: t.eval_every,
            use_aux_s: c.use_aux_s,
            toggles: c.toggles,
        }
    }
}

impl ClearSection {
    /// Model and training configs for a variant; the variant decides the
    /// loss toggles and conditioning, overriding this section.
    pub fn resolve(&self, k: usize, d: usize, variant: Option<Variant>, seed: u64) -> (ClearConfig, ClearTrainConfig) {
        let mut model = ClearConfig::new(k, d);
        model.alpha = self.alpha;
        model.beta = self.beta;
        model.latent = self.latent;
        model.hidden = self.hidden;
        model.use_aux_s = self.use_aux_s;
        model.toggles = self.toggles;
        if let Some(v) = variant {
            v.apply(&mut model);
        }
        let train = ClearTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            eval_every: self.eval_every,
            seed,
        };
        (model, train)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    /// Step budget `T`.
    pub max_steps: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self { max_steps: 150 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_cf: usize,
    /// Score causality as a disjunction of material implications.
    pub literal_causality: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { n_cf: 3, literal_causality: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub latent: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            alpha: vec![0.01, 0.1, 1.0, 5.0, 10.0],
            beta: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            batch_size: vec![100, 500, 1000, 2000],
            latent: vec![8, 16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scale: Scale,
    pub dataset: DatasetConfig,
    pub classifier: ClassifierTrainConfig,
    pub clear: ClearSection,
    pub baselines: BaselineSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    /// Seeds for repeated runs in ablations.
    pub seeds: Vec<u64>,
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads for per-graph explanation.
    pub workers: usize,
}

impl ExperimentConfig {
    pub fn preset(scale: Scale) -> Self {
        let (n_graphs, clf_epochs, clear_epochs) = match scale {
            Scale::Desk => (2000, 150, 300),
            Scale::Paper => (10_000, ClassifierTrainConfig::default().epochs, ClearTrainConfig::default().epochs),
        };
        Self {
            scale,
            dataset: DatasetConfig {
                kind: DatasetKind::Community,
                path: None,
                community: CommunityParams { n_graphs, seed: 1, ..Default::default() },
                molhiv: MolhivParams { n_graphs, ..Default::default() },
                imdb: ImdbParams::default(),
            },
            classifier: ClassifierTrainConfig { epochs: clf_epochs, seed: 1, ..Default::default() },
            clear: ClearSection { epochs: clear_epochs, ..Default::default() },
            baselines: BaselineSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            seeds: vec![1, 2, 3],
            seed: 1,
            out: PathBuf::from("results"),
            workers: 1,
        }
    }

    /// Layers a (possibly partial) JSON manifest over the preset of its scale.
    /// `scale` overrides the manifest's own `scale` key.
    pub fn from_json(manifest: &Value, scale: Option<Scale>) -> Result<Self> {
        let scale = match (scale, manifest.get("scale")) {
            (Some(s), _) => s,
            (None, Some(v)) => serde_json::from_value(v.clone())?,
            (None, None) => Scale::Desk,
        };
        let mut base = serde_json::to_value(Self::preset(scale))?;
        merge(&mut base, manifest);
        base["scale"] = serde_json::to_value(scale)?;
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, scale: Option<Scale>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io { path: path.to_path_buf(), source: e })?;
        let manifest: Value = serde_json::from_str(&text)?;
        Self::from_json(&manifest, scale)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("classifier.epochs", self.classifier.epochs),
            ("classifier.batch_size", self.classifier.batch_size),
            ("clear.epochs", self.clear.epochs),
            ("clear.batch_size", self.clear.batch_size),
            ("clear.latent", self.clear.latent),
            ("clear.hidden", self.clear.hidden),
            ("clear.eval_every", self.clear.eval_every),
            ("eval.n_cf", self.eval.n_cf),
            ("workers", self.workers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(HarnessError::Config(format!("{name} must be positive")));
        }
        if !(self.clear.alpha >= 0.0 && self.clear.beta >= 0.0 && self.clear.lr > 0.0 && self.classifier.lr > 0.0) {
            return Err(HarnessError::Config("weights must be non-negative and learning rates positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must list at least one seed".into()));
        }
        if self.dataset.kind == DatasetKind::Community {
            self.dataset.community.validate()?;
        }
        for source in [&self.dataset.molhiv.source, &self.dataset.imdb.source].into_iter().flatten() {
            if !source.exists() {
                return Err(HarnessError::Config(format!("dataset source {} does not exist", source.display())));
            }
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.path.clone().unwrap_or_else(|| self.out.join("data").join(format!("{}.jsonl", self.dataset.kind.name())))
    }
}

/// Recursive object merge; non-object values in `over` replace those in `base`.
fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}
