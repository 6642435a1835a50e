//! Random edge-perturbation baselines with a step budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::counterfactual::Counterfactual;
use crate::datagen::derive_seed;
use crate::error::Result;
use crate::graphs::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    /// Toggle the drawn pair.
    Random,
    /// Insert the drawn pair if absent.
    EgIst,
    /// Remove the drawn pair if present.
    EgRm,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 3] = [BaselineMethod::Random, BaselineMethod::EgIst, BaselineMethod::EgRm];

    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Random => "random",
            BaselineMethod::EgIst => "eg-ist",
            BaselineMethod::EgRm => "eg-rm",
        }
    }

    /// Accepts `eg-ist` as well as `eg_ist`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.replace('_', "-");
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub max_steps: usize,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn new(method: BaselineMethod, seed: u64) -> Self {
        Self { method, max_steps: 150, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutcome {
    pub counterfactual: Counterfactual,
    /// Draws consumed, no-ops included.
    pub steps: usize,
}

fn stream_seed(seed: u64, id: &str, sample: usize) -> u64 {
    let h = id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    derive_seed(derive_seed(seed, h), sample as u64)
}

/// Perturbs one edge slot per step for at most `max_steps` steps, stopping
/// as soon as `clf` predicts `y_star`. Node features are never touched.
pub fn run_baseline(
    cfg: &BaselineConfig,
    clf: &ClassifierModel,
    g: &Graph,
    y_star: u8,
    sample_index: usize,
) -> Result<BaselineOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &g.id, sample_index));
    let mut cur = g.clone();
    let n = g.n;
    let pairs = n * n.saturating_sub(1) / 2;
    let mut predicted = None;
    let mut steps = 0;
    while steps < cfg.max_steps {
        steps += 1;
        if pairs == 0 {
            continue;
        }
        let (i, j) = pair_from_index(rng.random_range(0..pairs), n);
        let present = cur.has_edge(i, j);
        let changed = match cfg.method {
            BaselineMethod::Random => {
                cur.set_edge(i, j, !present);
                true
            }
            BaselineMethod::EgIst if !present => {
                cur.set_edge(i, j, true);
                true
            }
            BaselineMethod::EgRm if present => {
                cur.set_edge(i, j, false);
                true
            }
            _ => false,
        };
        // a no-op leaves the prediction where it was
        if changed || predicted.is_none() {
            predicted = Some(clf.predict(&cur)?.label);
        }
        if predicted == Some(y_star) {
            break;
        }
    }
    let predicted = match predicted {
        Some(p) => p,
        None => clf.predict(&cur)?.label,
    };
    Ok(BaselineOutcome {
        counterfactual: Counterfactual {
            source_id: g.id.clone(),
            sample_index,
            n,
            feature_dim: g.feature_dim,
            x_cf: cur.features.clone(),
            a_hat: None,
            a_cf: cur.adjacency().to_vec(),
            predicted,
            desired: y_star,
            s: g.s,
        },
        steps,
    })
}

/// Maps `0..n(n-1)/2` onto the pairs `(i < j)` in row-major order.
fn pair_from_index(mut idx: usize, n: usize) -> (usize, usize) {
    for i in 0..n {
        let row = n - 1 - i;
        if idx < row {
            return (i, i + 1 + idx);
        }
        idx -= row;
    }
    unreachable!("pair index out of range")
}

/// `n_cf` independent runs per graph, desired label flipped from ground truth.
pub fn explain_graphs(
    cfg: &BaselineConfig,
    clf: &ClassifierModel,
    graphs: &[&Graph],
    n_cf: usize,
) -> Result<Vec<Vec<Counterfactual>>> {
    graphs
        .iter()
        .map(|g| {
            (0..n_cf)
                .map(|j| run_baseline(cfg, clf, g, 1 - g.label, j).map(|o| o.counterfactual))
                .collect()
        })
        .collect()
}
