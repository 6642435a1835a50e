//! Pipeline stages. Each stage reads the previous stage's files under the
//! output directory and writes its own, so any stage can be re-run alone.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clearcf_core::baselines::{self, BaselineConfig, BaselineMethod};
use clearcf_core::classifier::{train_classifier, ClassifierModel, ClassifierReport};
use clearcf_core::clear::{generate, train_clear, ClearModel, ClearReport, Variant};
use clearcf_core::counterfactual::{read_counterfactuals, write_counterfactuals, Counterfactual};
use clearcf_core::datagen::{gen_collab_like, gen_community, gen_molecule_like, simulate_imdb_labels, simulate_molhiv_labels};
use clearcf_core::eval::{evaluate, write_csv, CausalConstraint, ConstraintKind, DetailRow, MetricsReport, ResultRow};
use clearcf_core::{load_dataset, save_dataset, Dataset, Graph, Partition};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, ExperimentConfig};
use crate::error::{HarnessError, Result};

/// An explanation method: a generator variant or a search baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Clear(Variant),
    Baseline(BaselineMethod),
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        let canon = s.to_ascii_lowercase().replace('_', "-");
        if let Some(v) = Variant::parse(&canon) {
            return Ok(Method::Clear(v));
        }
        BaselineMethod::parse(&canon).map(Method::Baseline).ok_or_else(|| HarnessError::UnknownMethod(s.into()))
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Clear(v) => v.name(),
            Method::Baseline(b) => b.name(),
        }
    }

    /// Every method with an explanation stage, generators first.
    pub fn all() -> Vec<Method> {
        Variant::ALL.into_iter().map(Method::Clear).chain(BaselineMethod::ALL.into_iter().map(Method::Baseline)).collect()
    }
}

/// File locations under the output directory.
pub struct Layout<'a>(pub &'a ExperimentConfig);

impl Layout<'_> {
    pub fn dataset(&self) -> PathBuf {
        self.0.dataset_path()
    }

    pub fn classifier(&self) -> PathBuf {
        self.0.out.join("models").join("classifier.json")
    }

    pub fn generator(&self, v: Variant) -> PathBuf {
        self.0.out.join("models").join(format!("{}.json", v.name()))
    }

    pub fn counterfactuals(&self, m: Method) -> PathBuf {
        self.0.out.join("cf").join(format!("{}.jsonl", m.name()))
    }

    pub fn timing(&self, m: Method) -> PathBuf {
        self.0.out.join("cf").join(format!("{}.timing.json", m.name()))
    }

    pub fn results(&self, file: &str) -> PathBuf {
        self.0.out.join("results").join(file)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn require(path: PathBuf, what: &'static str, stage: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(HarnessError::MissingStage { what, stage, path })
    }
}

/// Copies the resolved configuration into the output directory.
pub fn record_config(cfg: &ExperimentConfig) -> Result<()> {
    write_json(&cfg.out.join("config.json"), cfg)
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    Ok(match d.kind {
        DatasetKind::Community => gen_community(&d.community)?,
        DatasetKind::Molhiv => {
            let p = &d.molhiv;
            let base = match &p.source {
                Some(path) => load_dataset(path)?,
                None => gen_molecule_like(p.n_graphs, p.seed)?,
            };
            simulate_molhiv_labels(&base, p.seed, p.noise)?
        }
        DatasetKind::Imdb => {
            let p = &d.imdb;
            let base = match &p.source {
                Some(path) => load_dataset(path)?,
                None => gen_collab_like(p.n_graphs, p.seed)?,
            };
            simulate_imdb_labels(&base, p.seed, p.eps_y_sigma)?
        }
    })
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    record_config(cfg)?;
    let ds = build_dataset(cfg)?;
    let path = Layout(cfg).dataset();
    ensure_parent(&path)?;
    save_dataset(&ds, &path)?;
    Ok(ds)
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(load_dataset(&require(Layout(cfg).dataset(), "dataset", "gen-data")?)?)
}

pub fn cmd_train_clf(cfg: &ExperimentConfig) -> Result<ClassifierReport> {
    record_config(cfg)?;
    let ds = load_data(cfg)?;
    let train_cfg = clearcf_core::classifier::ClassifierTrainConfig { seed: cfg.seed, ..cfg.classifier };
    let (model, report) = train_classifier(&ds, &train_cfg)?;
    let path = Layout(cfg).classifier();
    ensure_parent(&path)?;
    model.save(&path)?;
    write_json(&path.with_extension("report.json"), &report)?;
    Ok(report)
}

pub fn load_classifier(cfg: &ExperimentConfig) -> Result<ClassifierModel> {
    Ok(ClassifierModel::load(&require(Layout(cfg).classifier(), "classifier checkpoint", "train-clf")?)?)
}

fn check_finite(report: &ClearReport, what: &str) -> Result<()> {
    if report.losses.iter().all(|l| l.total.is_finite()) {
        Ok(())
    } else {
        Err(HarnessError::NumericFailure(format!("{what}: training loss became non-finite")))
    }
}

/// Trains one generator variant with the configured section and `seed`.
pub fn fit_generator(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    clf: &ClassifierModel,
    variant: Variant,
    seed: u64,
) -> Result<(ClearModel, ClearReport)> {
    let (model_cfg, train_cfg) = cfg.clear.resolve(ds.max_nodes(), ds.feature_dim(), Some(variant), seed);
    let (model, report) = train_clear(ds, clf, model_cfg, &train_cfg)?;
    check_finite(&report, variant.name())?;
    Ok((model, report))
}

pub fn cmd_train_cfe(cfg: &ExperimentConfig, variant: Variant) -> Result<ClearReport> {
    record_config(cfg)?;
    let ds = load_data(cfg)?;
    let clf = load_classifier(cfg)?;
    let (model, report) = fit_generator(cfg, &ds, &clf, variant, cfg.seed)?;
    let path = Layout(cfg).generator(variant);
    ensure_parent(&path)?;
    model.save(&path)?;
    write_json(&path.with_extension("report.json"), &report)?;
    Ok(report)
}

pub fn load_generator(cfg: &ExperimentConfig, variant: Variant) -> Result<ClearModel> {
    Ok(ClearModel::load(&require(Layout(cfg).generator(variant), "generator checkpoint", "train-cfe")?)?)
}

/// Explains every graph with `n_cf` counterfactuals over `workers` threads.
/// Returns the counterfactuals and the wall-clock seconds spent.
pub fn explain_graphs(
    cfg: &ExperimentConfig,
    clf: &ClassifierModel,
    generator: Option<&ClearModel>,
    method: Method,
    graphs: &[&Graph],
) -> Result<(Vec<Vec<Counterfactual>>, f64)> {
    let n_cf = cfg.eval.n_cf;
    let chunk = graphs.len().div_ceil(cfg.workers).max(1);
    let run = |part: &[&Graph]| -> Result<Vec<Vec<Counterfactual>>> {
        match (method, generator) {
            (Method::Clear(_), Some(model)) => Ok(generate(model, clf, part, n_cf, cfg.seed)?),
            (Method::Clear(_), None) => Err(HarnessError::Config("generator methods need a trained model".into())),
            (Method::Baseline(b), _) => {
                let bc = BaselineConfig { method: b, max_steps: cfg.baselines.max_steps, seed: cfg.seed };
                Ok(baselines::explain_graphs(&bc, clf, part, n_cf)?)
            }
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;
    let start = Instant::now();
    let parts: Vec<Vec<Vec<Counterfactual>>> =
        pool.install(|| graphs.par_chunks(chunk).map(run).collect::<Result<_>>())?;
    let elapsed = start.elapsed().as_secs_f64();
    Ok((parts.into_iter().flatten().collect(), elapsed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub elapsed_secs: f64,
    pub counterfactuals: usize,
}

pub fn cmd_explain(cfg: &ExperimentConfig, method: Method) -> Result<Vec<Vec<Counterfactual>>> {
    record_config(cfg)?;
    let ds = load_data(cfg)?;
    let clf = load_classifier(cfg)?;
    let generator = match method {
        Method::Clear(v) => Some(load_generator(cfg, v)?),
        Method::Baseline(_) => None,
    };
    let test = ds.test();
    let (cfs, elapsed) = explain_graphs(cfg, &clf, generator.as_ref(), method, &test)?;
    let layout = Layout(cfg);
    let path = layout.counterfactuals(method);
    ensure_parent(&path)?;
    let flat: Vec<Counterfactual> = cfs.iter().flatten().cloned().collect();
    write_counterfactuals(&path, &flat, matches!(method, Method::Clear(_)))?;
    write_json(&layout.timing(method), &Timing { elapsed_secs: elapsed, counterfactuals: flat.len() })?;
    Ok(cfs)
}

pub fn constraint_for(cfg: &ExperimentConfig) -> CausalConstraint {
    let kind = match cfg.dataset.kind {
        DatasetKind::Community => ConstraintKind::Community,
        DatasetKind::Molhiv => ConstraintKind::Molhiv,
        DatasetKind::Imdb => ConstraintKind::Imdb,
    };
    let c = CausalConstraint::new(kind);
    if cfg.eval.literal_causality {
        c.literal()
    } else {
        c
    }
}

/// Groups a flat list by explainee, in the order of `graphs`.
fn group(graphs: &[&Graph], cfs: Vec<Counterfactual>) -> Result<Vec<Vec<Counterfactual>>> {
    let mut by_id: HashMap<String, Vec<Counterfactual>> = HashMap::new();
    for cf in cfs {
        by_id.entry(cf.source_id.clone()).or_default().push(cf);
    }
    let grouped = graphs
        .iter()
        .map(|g| {
            let mut row = by_id.remove(&g.id).unwrap_or_default();
            row.sort_by_key(|c| c.sample_index);
            row
        })
        .collect();
    if let Some(stray) = by_id.keys().next() {
        return Err(HarnessError::Config(format!("counterfactual for {stray}, which is not a test graph")));
    }
    Ok(grouped)
}

pub fn evaluate_method(
    cfg: &ExperimentConfig,
    graphs: &[&Graph],
    cfs: &[Vec<Counterfactual>],
    elapsed: f64,
) -> Result<(MetricsReport, Vec<DetailRow>)> {
    Ok(evaluate(graphs, cfs, &constraint_for(cfg), elapsed)?)
}

/// Scores the stored counterfactuals of each method (all methods with files
/// when `methods` is empty) and writes `results.csv` plus per-method details.
pub fn cmd_evaluate(cfg: &ExperimentConfig, methods: &[Method]) -> Result<Vec<ResultRow>> {
    record_config(cfg)?;
    let ds = load_data(cfg)?;
    let test = ds.test();
    let layout = Layout(cfg);
    let chosen: Vec<Method> = if methods.is_empty() {
        Method::all().into_iter().filter(|m| layout.counterfactuals(*m).exists()).collect()
    } else {
        methods.to_vec()
    };
    if chosen.is_empty() {
        return Err(HarnessError::MissingStage { what: "counterfactuals", stage: "explain", path: cfg.out.join("cf") });
    }
    let mut rows = Vec::new();
    for m in chosen {
        let cfs = read_counterfactuals(&require(layout.counterfactuals(m), "counterfactuals", "explain")?)?;
        let timing_path = require(layout.timing(m), "timing record", "explain")?;
        let timing: Timing = serde_json::from_str(&std::fs::read_to_string(&timing_path).map_err(io_err(&timing_path))?)?;
        let grouped = group(&test, cfs)?;
        let (report, details) = evaluate_method(cfg, &test, &grouped, timing.elapsed_secs)?;
        let path = layout.results(&format!("details-{}.csv", m.name()));
        ensure_parent(&path)?;
        write_csv(&path, &details)?;
        rows.push(ResultRow::new(m.name(), cfg.dataset.kind.name(), cfg.seed, &report));
    }
    write_csv(&layout.results("results.csv"), &rows)?;
    Ok(rows)
}

/// Trains and scores every generator variant for every configured seed.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    record_config(cfg)?;
    let ds = load_data(cfg)?;
    let clf = load_classifier(cfg)?;
    let test = ds.test();
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let run_cfg = ExperimentConfig { seed, ..cfg.clone() };
        for v in Variant::ALL {
            let (model, _) = fit_generator(&run_cfg, &ds, &clf, v, seed)?;
            let (cfs, elapsed) = explain_graphs(&run_cfg, &clf, Some(&model), Method::Clear(v), &test)?;
            let (report, _) = evaluate_method(&run_cfg, &test, &cfs, elapsed)?;
            rows.push(ResultRow::new(v.name(), cfg.dataset.kind.name(), seed, &report));
        }
    }
    let path = Layout(cfg).results("ablation.csv");
    ensure_parent(&path)?;
    write_csv(&path, &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `alpha-beta`, `batch_size` or `latent`.
    pub grid: String,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub latent: usize,
    pub seed: u64,
    pub validity: f64,
    pub proximity_x: f64,
    pub proximity_a: f64,
    pub causality: f64,
    pub time_per_cf: f64,
}

/// The alpha x beta grid, then one-at-a-time batch size and latent width.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    record_config(cfg)?;
    let ds = load_data(cfg)?;
    let clf = load_classifier(cfg)?;
    let test = ds.test();
    let base = cfg.clear;
    let mut settings = Vec::new();
    for &alpha in &cfg.sweep.alpha {
        for &beta in &cfg.sweep.beta {
            settings.push(("alpha-beta", crate::config::ClearSection { alpha, beta, ..base }));
        }
    }
    for &batch_size in &cfg.sweep.batch_size {
        settings.push(("batch_size", crate::config::ClearSection { batch_size, ..base }));
    }
    for &latent in &cfg.sweep.latent {
        settings.push(("latent", crate::config::ClearSection { latent, ..base }));
    }
    let mut rows = Vec::new();
    for (grid, section) in settings {
        let run_cfg = ExperimentConfig { clear: section, ..cfg.clone() };
        let (model, _) = fit_generator(&run_cfg, &ds, &clf, Variant::Clear, cfg.seed)?;
        let (cfs, elapsed) = explain_graphs(&run_cfg, &clf, Some(&model), Method::Clear(Variant::Clear), &test)?;
        let (r, _) = evaluate_method(&run_cfg, &test, &cfs, elapsed)?;
        if ![r.validity, r.proximity_x, r.proximity_a, r.causality].iter().all(|v| v.is_finite()) {
            return Err(HarnessError::NumericFailure(format!("{grid} run produced non-finite metrics")));
        }
        rows.push(SweepRow {
            grid: grid.into(),
            alpha: section.alpha,
            beta: section.beta,
            batch_size: section.batch_size,
            latent: section.latent,
            seed: cfg.seed,
            validity: r.validity,
            proximity_x: r.proximity_x,
            proximity_a: r.proximity_a,
            causality: r.causality,
            time_per_cf: r.time_per_cf,
        });
    }
    let path = Layout(cfg).results("sweep.csv");
    ensure_parent(&path)?;
    write_csv(&path, &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    /// `original`, `clear` or `clear-vae`.
    pub source: String,
    pub graph_id: String,
    pub sample_index: Option<usize>,
    pub deg1: f64,
    pub deg2: f64,
    pub s: u8,
}

/// Community degrees of test graphs and of their generated counterfactuals.
pub fn cmd_scatter(cfg: &ExperimentConfig) -> Result<Vec<ScatterRow>> {
    record_config(cfg)?;
    if cfg.dataset.kind != DatasetKind::Community {
        return Err(HarnessError::Config("scatter data is defined for community graphs only".into()));
    }
    let ds = load_data(cfg)?;
    let size = cfg.dataset.community.community_size;
    let degrees = |g: &Graph| -> Result<(f64, f64)> { Ok(g.community_degrees(&Partition::leading(g.n, size))?) };
    let mut rows = Vec::new();
    for g in ds.test() {
        let (deg1, deg2) = degrees(g)?;
        rows.push(ScatterRow { source: "original".into(), graph_id: g.id.clone(), sample_index: None, deg1, deg2, s: g.s });
    }
    let layout = Layout(cfg);
    let sources: Vec<Method> = [Variant::Clear, Variant::ClearVae]
        .into_iter()
        .map(Method::Clear)
        .filter(|m| layout.counterfactuals(*m).exists())
        .collect();
    if sources.is_empty() {
        return Err(HarnessError::MissingStage {
            what: "clear or clear-vae counterfactuals",
            stage: "explain --method clear",
            path: layout.counterfactuals(Method::Clear(Variant::Clear)),
        });
    }
    for m in sources {
        for cf in read_counterfactuals(&layout.counterfactuals(m))? {
            let (deg1, deg2) = degrees(&cf.to_graph()?)?;
            rows.push(ScatterRow {
                source: m.name().into(),
                graph_id: cf.source_id.clone(),
                sample_index: Some(cf.sample_index),
                deg1,
                deg2,
                s: cf.s,
            });
        }
    }
    let path = layout.results("scatter.csv");
    ensure_parent(&path)?;
    write_csv(&path, &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names() {
        for m in Method::all() {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert_eq!(Method::parse("EG_IST").unwrap(), Method::Baseline(BaselineMethod::EgIst));
        assert!(matches!(Method::parse("gnnexplainer"), Err(HarnessError::UnknownMethod(_))));
    }
}
