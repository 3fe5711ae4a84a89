//! Seeded random-search hyperparameter optimization over
//! (focal alpha, focal gamma, learning rate, dropout), maximizing the mean
//! cross-validation balanced accuracy.
//!
//! Trials draw from independent `(seed, trial_id)` streams, so they can run
//! concurrently and still reproduce the sequential trial table; a failed
//! fold fails its trial without aborting the search.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::netcore::ArchConfig;
use crate::pixelpipe::{AugPolicy, HedStats, InputMode};
use crate::rng::Stream;
use crate::splits::FoldAssignment;
use crate::trainer::{train, TrainConfig};

const TAG_TRIAL: u64 = 0x5452_4941; // "TRIA"

#[derive(Debug, thiserror::Error)]
pub enum HpoError {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("n_trials must be >= 1")]
    NoTrials,
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Uniform (and log-uniform, for the learning rate) sampling ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub alpha: (f64, f64),
    pub gamma: (f64, f64),
    /// sampled as `exp(uniform(ln lo, ln hi))`
    pub lr: (f64, f64),
    pub dropout: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            alpha: (0.1, 0.9),
            gamma: (0.0, 5.0),
            lr: (1e-5, 1e-3),
            dropout: (0.0, 0.5),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), HpoError> {
        for (name, (lo, hi)) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("lr", self.lr),
            ("dropout", self.dropout),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(HpoError::InvalidSpace(format!(
                    "{name} range ({lo}, {hi}) is not ordered"
                )));
            }
        }
        if self.lr.0 <= 0.0 {
            return Err(HpoError::InvalidSpace(
                "lr range must be positive for log-uniform sampling".into(),
            ));
        }
        Ok(())
    }
}

/// One sampled hyperparameter tuple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HpSample {
    pub alpha: f64,
    pub gamma: f64,
    pub lr: f64,
    pub dropout: f64,
}

/// Independent draws per dimension, in the fixed order alpha, gamma, lr,
/// dropout; the learning rate is log-uniform.
pub fn sample_config(space: &SearchSpace, stream: &mut Stream) -> HpSample {
    let alpha = stream.uniform(space.alpha.0, space.alpha.1);
    let gamma = stream.uniform(space.gamma.0, space.gamma.1);
    let lr = if space.lr.0 == space.lr.1 {
        space.lr.0
    } else {
        stream.uniform(space.lr.0.ln(), space.lr.1.ln()).exp()
    };
    let dropout = stream.uniform(space.dropout.0, space.dropout.1);
    HpSample {
        alpha,
        gamma,
        lr,
        dropout,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    Failed,
}

/// One evaluated configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: usize,
    pub config: HpSample,
    /// best validation balanced accuracy per fold
    pub fold_balanced_accuracies: Vec<f64>,
    /// mean balanced accuracy; recorded only for complete trials
    pub objective: Option<f64>,
    pub status: TrialStatus,
    pub error: Option<String>,
}

/// Applies a sample onto the base configs.
fn configure(
    base: &TrainConfig,
    arch: &ArchConfig,
    hp: &HpSample,
) -> (TrainConfig, ArchConfig) {
    let mut cfg = base.clone();
    cfg.focal.alpha = hp.alpha;
    cfg.focal.gamma = hp.gamma;
    cfg.lr0 = hp.lr;
    let mut arch = arch.clone();
    arch.dropout = hp.dropout;
    (cfg, arch)
}

/// Trains every fold under one hyperparameter sample and returns the
/// per-fold best validation balanced accuracies.
#[allow(clippy::too_many_arguments)]
pub fn run_trial(
    dataset: &Dataset,
    folds: &FoldAssignment,
    arch: &ArchConfig,
    base: &TrainConfig,
    policy: &AugPolicy,
    mode: InputMode,
    hed: Option<&HedStats>,
    hp: &HpSample,
) -> Result<Vec<f64>, String> {
    let (cfg, arch) = configure(base, arch, hp);
    let mut bas = Vec::with_capacity(folds.k());
    for fold in 0..folds.k() {
        let result = train(dataset, folds, fold, &arch, &cfg, policy, mode, hed, None)
            .map_err(|e| format!("fold {fold}: {e}"))?;
        bas.push(result.best_val_balanced_accuracy);
    }
    Ok(bas)
}

/// Random search: `n_trials` independent samples, each scored by the mean
/// cross-validation balanced accuracy. Returns the index of the best
/// complete trial (ties go to the lowest trial id) and the full table.
#[allow(clippy::too_many_arguments)]
pub fn run_search(
    dataset: &Dataset,
    folds: &FoldAssignment,
    arch: &ArchConfig,
    base: &TrainConfig,
    policy: &AugPolicy,
    mode: InputMode,
    hed: Option<&HedStats>,
    space: &SearchSpace,
    n_trials: usize,
    seed: u64,
) -> Result<(Option<usize>, Vec<Trial>), HpoError> {
    space.validate()?;
    if n_trials == 0 {
        return Err(HpoError::NoTrials);
    }

    let trials: Vec<Trial> = (0..n_trials)
        .into_par_iter()
        .map(|trial_id| {
            let mut stream = Stream::derived(seed, &[TAG_TRIAL, trial_id as u64]);
            let hp = sample_config(space, &mut stream);
            match run_trial(dataset, folds, arch, base, policy, mode, hed, &hp) {
                Ok(bas) => {
                    let objective = bas.iter().sum::<f64>() / bas.len() as f64;
                    Trial {
                        trial_id,
                        config: hp,
                        fold_balanced_accuracies: bas,
                        objective: Some(objective),
                        status: TrialStatus::Complete,
                        error: None,
                    }
                }
                Err(e) => Trial {
                    trial_id,
                    config: hp,
                    fold_balanced_accuracies: Vec::new(),
                    objective: None,
                    status: TrialStatus::Failed,
                    error: Some(e),
                },
            }
        })
        .collect();

    let best = trials
        .iter()
        .filter(|t| t.objective.is_some())
        .max_by(|a, b| {
            a.objective
                .partial_cmp(&b.objective)
                .unwrap_or(std::cmp::Ordering::Equal)
                // prefer the lower trial id on ties
                .then(b.trial_id.cmp(&a.trial_id))
        })
        .map(|t| t.trial_id);
    Ok((best, trials))
}

/// `trials.csv`: one row per trial with per-fold balanced accuracies.
pub fn write_trials_csv(path: &Path, trials: &[Trial], k: usize) -> Result<(), HpoError> {
    let io = |source| HpoError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let fold_cols: Vec<String> = (0..k).map(|i| format!("ba_fold{i}")).collect();
    writeln!(
        f,
        "trial_id,alpha,gamma,lr,dropout,{},mean_ba,status",
        fold_cols.join(",")
    )
    .map_err(io)?;
    for t in trials {
        let mut fold_values: Vec<String> = t
            .fold_balanced_accuracies
            .iter()
            .map(|v| v.to_string())
            .collect();
        fold_values.resize(k, String::new());
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            t.trial_id,
            t.config.alpha,
            t.config.gamma,
            t.config.lr,
            t.config.dropout,
            fold_values.join(","),
            t.objective.map(|o| o.to_string()).unwrap_or_default(),
            match t.status {
                TrialStatus::Complete => "complete",
                TrialStatus::Failed => "failed",
            }
        )
        .map_err(io)?;
    }
    f.flush().map_err(io)?;
    Ok(())
}

/// `best.json`: the winning configuration and its objective.
pub fn write_best_json(path: &Path, trial: &Trial) -> Result<(), HpoError> {
    let io = |source| HpoError::Io {
        path: path.display().to_string(),
        source,
    };
    let body = serde_json::to_string_pretty(trial).expect("trial serializes");
    std::fs::write(path, body + "\n").map_err(io)
}
