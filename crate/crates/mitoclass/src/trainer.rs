//! AdamW optimization with a cosine-annealed learning rate, the epoch loop
//! over augmented batches, and early stopping on validation balanced
//! accuracy with best-checkpoint retention.
//!
//! Every random decision (batch shuffling, augmentation draws, dropout
//! masks) derives from `(config.seed, patch_id/epoch/batch)` streams, so a
//! training run is a pure function of its inputs.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, Dataset, HardnessLabel, PatchRecord};
use crate::eval::{balanced_accuracy_from_confusion, Confusion, PredictionRow, PredictionSet};
use crate::losses::{
    combined_loss, focal_binary, focal_binary_grad, focal_multiclass, focal_multiclass_grad,
    FocalParams, LossCombination, LossError,
};
use crate::netcore::{
    predict, save_checkpoint, ArchConfig, CheckpointError, HardnessGrads, HardnessOutput,
    HeadGrads, HeadOutputs, Model, ModelError, ModelParams, TensorMap,
};
use crate::pixelpipe::{apply_policy, AugPolicy, HedStats, InputMode, PixelError, PixelTensor};
use crate::rng::{str_tag, stream_seed, Stream};
use crate::splits::{fold_slices, FoldAssignment, SplitError};

const TAG_EPOCH_SHUFFLE: u64 = 0x4550_5348; // "EPSH"
const TAG_AUG: u64 = 0x4155_474D; // "AUGM"
const TAG_BATCH_DROPOUT: u64 = 0x4244_524F; // "BDRO"
const TAG_FOLD_INIT: u64 = 0x464C_4449; // "FLDI"

/// Samples evaluated per forward pass on the validation slice.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("patch id '{0}' is not in the dataset")]
    UnknownId(String),
    #[error(transparent)]
    Pixel(#[from] PixelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub eta_min: f64,
    pub theta: f64,
    pub focal: FocalParams,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            batch_size: 8,
            max_epochs: 50,
            patience: 20,
            eta_min: 0.0,
            theta: 0.5,
            focal: FocalParams::default(),
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr0 > self.eta_min && self.eta_min >= 0.0) {
            return Err(TrainError::Config(format!(
                "need lr0 > eta_min >= 0, got lr0={} eta_min={}",
                self.lr0, self.eta_min
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::Config("max_epochs must be >= 1".into()));
        }
        self.focal
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        LossCombination { theta: self.theta }
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Cosine annealing from `lr0` at epoch 0 down to `eta_min` at `total_epochs`.
pub fn cosine_lr(epoch: usize, config: &TrainConfig, total_epochs: usize) -> f64 {
    debug_assert!(epoch <= total_epochs);
    let t = epoch as f64 / total_epochs as f64;
    config.eta_min
        + 0.5 * (config.lr0 - config.eta_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// First/second-moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptState {
    pub step: u64,
    m: TensorMap,
    v: TensorMap,
}

impl OptState {
    pub fn new(params: &TensorMap) -> Self {
        OptState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One AdamW update: bias-corrected moments and decoupled weight decay
/// (`p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`).
pub fn adamw_step(
    params: &mut TensorMap,
    grads: &TensorMap,
    state: &mut OptState,
    lr: f64,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Model(ModelError::ShapeMismatch(format!(
            "optimizer saw {} parameter tensors, {} gradient tensors, {} state tensors",
            params.len(),
            grads.len(),
            state.m.len()
        ))));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);

    for (((pn, p), (gn, g)), ((mn, m), (_, v))) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if pn != gn || pn != mn {
            return Err(TrainError::Model(ModelError::ShapeMismatch(format!(
                "optimizer tensor order mismatch: '{pn}' vs '{gn}'/'{mn}'"
            ))));
        }
        if p.dims() != g.dims() {
            return Err(TrainError::Model(ModelError::ShapeMismatch(format!(
                "gradient for '{pn}' has dims {:?}, parameter has {:?}",
                g.dims(),
                p.dims()
            ))));
        }
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = config.beta1 * *mv + (1.0 - config.beta1) * gv;
            *vv = config.beta2 * *vv + (1.0 - config.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * (m_hat / (v_hat.sqrt() + config.eps_adam) + config.weight_decay * *pv);
        }
    }
    Ok(())
}

/// Early-stopping bookkeeping: strict improvements move the best epoch;
/// training halts before any epoch further than `patience` past the best.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
        }
    }

    /// Should training halt instead of running `epoch`?
    pub fn should_stop(&self, epoch: usize) -> bool {
        match self.best {
            Some((best_epoch, _)) => epoch - best_epoch > self.patience,
            None => false,
        }
    }

    /// Records the metric for `epoch`; returns true on strict improvement
    /// (ties keep the earlier epoch).
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        match self.best {
            Some((_, best_metric)) if metric <= best_metric => false,
            _ => {
                self.best = Some((epoch, metric));
                true
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_balanced_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub best_epoch: usize,
    pub best_val_balanced_accuracy: f64,
    pub epochs_run: usize,
    pub history: Vec<EpochStats>,
    pub best_checkpoint_path: Option<PathBuf>,
}

/// Loss targets for one batch, derived from the expert labels.
#[derive(Debug, Clone)]
pub struct BatchTargets {
    /// per-sample expert label codes (AMF=0 / NMF=1)
    pub expert: Vec<[u8; 3]>,
    /// hardness codes (hard=0 / easy=1)
    pub hardness: Vec<u8>,
    /// combined (consensus x hardness) class indices
    pub four_class: Vec<usize>,
}

/// Index of the combined (consensus, hardness) class:
/// AMF-hard=0, AMF-easy=1, NMF-hard=2, NMF-easy=3.
pub fn four_class_index(consensus: ClassLabel, hardness: HardnessLabel) -> usize {
    (consensus.code() * 2 + hardness.code()) as usize
}

impl BatchTargets {
    pub fn from_records(records: &[&PatchRecord]) -> Self {
        let mut expert = Vec::with_capacity(records.len());
        let mut hardness = Vec::with_capacity(records.len());
        let mut four_class = Vec::with_capacity(records.len());
        for r in records {
            expert.push([
                r.expert_labels[0].code(),
                r.expert_labels[1].code(),
                r.expert_labels[2].code(),
            ]);
            hardness.push(r.hardness.code());
            four_class.push(four_class_index(r.consensus, r.hardness));
        }
        BatchTargets {
            expert,
            hardness,
            four_class,
        }
    }
}

/// Inverse-frequency weights over the four combined classes, normalized to
/// mean 1; empty classes count as one observation to stay finite.
pub fn four_class_alpha(records: &[&PatchRecord]) -> [f64; 4] {
    let mut counts = [0usize; 4];
    for r in records {
        counts[four_class_index(r.consensus, r.hardness)] += 1;
    }
    let n: usize = counts.iter().sum();
    let mut w = [0.0; 4];
    for (wi, &c) in w.iter_mut().zip(&counts) {
        *wi = n as f64 / (4.0 * c.max(1) as f64);
    }
    let mean = (w[0] + w[1] + w[2] + w[3]) / 4.0;
    for wi in &mut w {
        *wi /= mean;
    }
    w
}

/// Mean combined focal loss of a batch and its gradients with respect to the
/// head pre-activations.
///
/// Per sample the loss is `theta * mean(expert focal losses) + (1 - theta) *
/// hardness loss`, with each expert head trained on that expert's own label;
/// the batch loss is the sample mean.
pub fn loss_and_grads(
    outputs: &HeadOutputs,
    targets: &BatchTargets,
    focal: &FocalParams,
    alpha4: &[f64; 4],
    comb: &LossCombination,
) -> Result<(f64, HeadGrads), LossError> {
    let n = outputs.batch_len();
    assert_eq!(targets.expert.len(), n, "targets do not cover the batch");
    let inv_n = 1.0 / n as f64;
    let theta = comb.theta;

    let mut total = 0.0;
    let mut expert_grads = vec![[0.0f64; 3]; n];
    let mut hardness_grads = match &outputs.hardness {
        HardnessOutput::Binary(_) => HardnessGrads::Binary(vec![0.0; n]),
        HardnessOutput::FourClass(_) => HardnessGrads::FourClass(vec![[0.0; 4]; n]),
    };

    for i in 0..n {
        let mut expert_losses = [0.0f64; 3];
        for e in 0..3 {
            let p = outputs.expert_probs[i][e];
            let y = targets.expert[i][e];
            expert_losses[e] = focal_binary(p, y, focal);
            // d(batch loss)/dz = (theta/3) * (1/n) * dl/dp * sigmoid'(z)
            expert_grads[i][e] =
                (theta / 3.0) * inv_n * focal_binary_grad(p, y, focal) * p * (1.0 - p);
        }

        let hardness_loss = match (&outputs.hardness, &mut hardness_grads) {
            (HardnessOutput::Binary(probs), HardnessGrads::Binary(grads)) => {
                let q = probs[i];
                let y = targets.hardness[i];
                grads[i] =
                    (1.0 - theta) * inv_n * focal_binary_grad(q, y, focal) * q * (1.0 - q);
                focal_binary(q, y, focal)
            }
            (HardnessOutput::FourClass(rows), HardnessGrads::FourClass(grads)) => {
                let row = &rows[i];
                let y = targets.four_class[i];
                let loss = focal_multiclass(row, y, alpha4, focal.gamma)?;
                let g_y = focal_multiclass_grad(row, y, alpha4, focal.gamma)?;
                // softmax chain: dz_k = g_y * p_y * (delta_yk - p_k)
                let p_y = row[y];
                for (k, gk) in grads[i].iter_mut().enumerate() {
                    let delta = if k == y { 1.0 } else { 0.0 };
                    *gk = (1.0 - theta) * inv_n * g_y * p_y * (delta - row[k]);
                }
                loss
            }
            _ => unreachable!("hardness grads were built from the same output variant"),
        };

        total += combined_loss(&expert_losses, hardness_loss, comb);
    }

    Ok((
        total * inv_n,
        HeadGrads {
            expert: expert_grads,
            hardness: hardness_grads,
        },
    ))
}

fn lookup<'a>(dataset: &'a Dataset, id: &str) -> Result<&'a PatchRecord, TrainError> {
    dataset.get(id).ok_or_else(|| TrainError::UnknownId(id.to_string()))
}

fn augmented_batch(
    dataset: &Dataset,
    ids: &[String],
    policy: &AugPolicy,
    mode: InputMode,
    hed: Option<&HedStats>,
    seed: u64,
    epoch: usize,
) -> Result<Vec<PixelTensor>, TrainError> {
    ids.par_iter()
        .map(|id| {
            let record = lookup(dataset, id)?;
            let stream = stream_seed(seed, &[TAG_AUG, str_tag(id), epoch as u64]);
            apply_policy(record, policy, mode, stream, hed).map_err(TrainError::from)
        })
        .collect()
}

/// One pass over the training slice: seeded shuffle, augmented batches (the
/// final partial batch is kept), forward, combined focal loss, backward and
/// an AdamW step per batch. Returns the mean of the per-batch losses.
#[allow(clippy::too_many_arguments)]
pub fn run_epoch(
    model: &Model,
    params: &mut ModelParams,
    state: &mut OptState,
    dataset: &Dataset,
    train_ids: &[String],
    policy: &AugPolicy,
    mode: InputMode,
    hed: Option<&HedStats>,
    config: &TrainConfig,
    alpha4: &[f64; 4],
    epoch: usize,
) -> Result<f64, TrainError> {
    if train_ids.is_empty() {
        return Err(TrainError::Config("empty training slice".into()));
    }
    let lr = cosine_lr(epoch, config, config.max_epochs);
    let mut shuffled = train_ids.to_vec();
    Stream::derived(config.seed, &[TAG_EPOCH_SHUFFLE, epoch as u64]).shuffle(&mut shuffled);

    let comb = LossCombination {
        theta: config.theta,
    };
    let mut batch_losses = Vec::new();
    for (batch_index, chunk) in shuffled.chunks(config.batch_size).enumerate() {
        let tensors = augmented_batch(dataset, chunk, policy, mode, hed, config.seed, epoch)?;
        let records: Vec<&PatchRecord> = chunk
            .iter()
            .map(|id| lookup(dataset, id))
            .collect::<Result<_, _>>()?;
        let targets = BatchTargets::from_records(&records);

        let dropout_seed = stream_seed(
            config.seed,
            &[TAG_BATCH_DROPOUT, epoch as u64, batch_index as u64],
        );
        let (outputs, cache) = model.forward(params, &tensors, true, dropout_seed)?;
        let (loss, head_grads) = loss_and_grads(&outputs, &targets, &config.focal, alpha4, &comb)?;
        let grads = model.backward(params, &cache, &head_grads)?;
        adamw_step(&mut params.tensors, &grads, state, lr, config)?;
        batch_losses.push(loss);
    }
    Ok(batch_losses.iter().sum::<f64>() / batch_losses.len() as f64)
}

/// Scores a slice with augmentation disabled: one prediction row per patch,
/// with consensus labels as truth.
pub fn predictions_for_slice(
    model: &Model,
    params: &ModelParams,
    dataset: &Dataset,
    ids: &[String],
    policy: &AugPolicy,
    mode: InputMode,
    hed: Option<&HedStats>,
) -> Result<PredictionSet, TrainError> {
    let eval_policy = policy.disabled();
    let mut preds = PredictionSet::new();
    for chunk in ids.chunks(EVAL_CHUNK) {
        let tensors = augmented_batch(dataset, chunk, &eval_policy, mode, hed, 0, 0)?;
        let (outputs, _) = model.forward(params, &tensors, false, 0)?;
        for (pred, id) in predict(&outputs).iter().zip(chunk) {
            let record = lookup(dataset, id)?;
            preds.push(PredictionRow::new(
                record.patch_id.clone(),
                pred.score,
                record.consensus,
                record.domain.domain_id(),
            ));
        }
    }
    Ok(preds)
}

/// Validation balanced accuracy of `params` on a slice.
pub fn validation_balanced_accuracy(
    model: &Model,
    params: &ModelParams,
    dataset: &Dataset,
    ids: &[String],
    policy: &AugPolicy,
    mode: InputMode,
    hed: Option<&HedStats>,
) -> Result<f64, TrainError> {
    let preds = predictions_for_slice(model, params, dataset, ids, policy, mode, hed)?;
    let mut conf = Confusion::default();
    for r in preds.rows() {
        match (r.truth, r.predicted) {
            (ClassLabel::Amf, ClassLabel::Amf) => conf.tp += 1,
            (ClassLabel::Nmf, ClassLabel::Nmf) => conf.tn += 1,
            (ClassLabel::Nmf, ClassLabel::Amf) => conf.fp += 1,
            (ClassLabel::Amf, ClassLabel::Nmf) => conf.fn_ += 1,
        }
    }
    Ok(balanced_accuracy_from_confusion(&conf))
}

/// Serialized alongside every training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfigFile {
    pub train: TrainConfig,
    pub arch: ArchConfig,
    pub policy: AugPolicy,
    pub input_mode: InputMode,
}

/// Trains one fold: epoch loop with per-epoch validation, early stopping on
/// balanced accuracy (check happens before each epoch, so at most
/// `best_epoch + patience + 1` epochs run), and retention of the checkpoint
/// from the best epoch (ties keep the earliest).
///
/// With an output directory the run emits `config.json`, `history.csv`
/// (`epoch,train_loss,val_balanced_accuracy,lr`) and `best.ckpt`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    dataset: &Dataset,
    assignment: &FoldAssignment,
    fold: usize,
    arch: &ArchConfig,
    config: &TrainConfig,
    policy: &AugPolicy,
    mode: InputMode,
    hed: Option<&HedStats>,
    out_dir: Option<&Path>,
) -> Result<TrainResult, TrainError> {
    config.validate()?;
    policy.validate()?;
    if arch.input_channels != mode.channels() {
        return Err(TrainError::Config(format!(
            "input mode {} feeds {} channels but the architecture expects {}",
            mode.as_str(),
            mode.channels(),
            arch.input_channels
        )));
    }
    let (train_ids, val_ids) = fold_slices(assignment, fold)?;
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(TrainError::Config(format!(
            "fold {fold} leaves an empty train or validation slice"
        )));
    }

    let model = Model::new(arch.clone())?;
    let mut params = model.init_params(stream_seed(config.seed, &[TAG_FOLD_INIT, fold as u64]));
    let mut state = OptState::new(&params.tensors);

    let train_records: Vec<&PatchRecord> = train_ids
        .iter()
        .map(|id| lookup(dataset, id))
        .collect::<Result<_, _>>()?;
    let alpha4 = four_class_alpha(&train_records);

    let io = |path: &Path| {
        let p = path.display().to_string();
        move |source| TrainError::Io { path: p, source }
    };
    let ckpt_path = out_dir.map(|d| d.join("best.ckpt"));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let cfg_path = dir.join("config.json");
        let body = serde_json::to_string_pretty(&RunConfigFile {
            train: config.clone(),
            arch: arch.clone(),
            policy: policy.clone(),
            input_mode: mode,
        })
        .expect("config serializes");
        std::fs::write(&cfg_path, body + "\n").map_err(io(&cfg_path))?;
    }

    let mut stopper = EarlyStopper::new(config.patience);
    let mut history: Vec<EpochStats> = Vec::new();
    for epoch in 0..config.max_epochs {
        if stopper.should_stop(epoch) {
            break;
        }
        let lr = cosine_lr(epoch, config, config.max_epochs);
        let train_loss = run_epoch(
            &model, &mut params, &mut state, dataset, &train_ids, policy, mode, hed, config,
            &alpha4, epoch,
        )?;
        let val_ba =
            validation_balanced_accuracy(&model, &params, dataset, &val_ids, policy, mode, hed)?;
        if stopper.observe(epoch, val_ba) {
            if let Some(path) = &ckpt_path {
                let meta = serde_json::json!({
                    "fold": fold,
                    "epoch": epoch,
                    "val_balanced_accuracy": val_ba,
                    "input_mode": mode.as_str(),
                    "resize_to": policy.resize_to,
                });
                save_checkpoint(path, &params, &meta)?;
            }
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_balanced_accuracy: val_ba,
            lr,
        });
    }

    if let Some(dir) = out_dir {
        let hist_path = dir.join("history.csv");
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(&hist_path).map_err(io(&hist_path))?,
        );
        writeln!(f, "epoch,train_loss,val_balanced_accuracy,lr").map_err(io(&hist_path))?;
        for row in &history {
            writeln!(
                f,
                "{},{},{},{}",
                row.epoch, row.train_loss, row.val_balanced_accuracy, row.lr
            )
            .map_err(io(&hist_path))?;
        }
        f.flush().map_err(io(&hist_path))?;
    }

    let (best_epoch, best_val) = stopper.best().expect("at least one epoch ran");
    Ok(TrainResult {
        best_epoch,
        best_val_balanced_accuracy: best_val,
        epochs_run: history.len(),
        history,
        best_checkpoint_path: ckpt_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Tensor;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let c = cfg();
        assert_eq!(cosine_lr(0, &c, 50), 1e-4);
        assert!(cosine_lr(50, &c, 50).abs() < 1e-20);
        assert!((cosine_lr(25, &c, 50) - 5e-5).abs() < 1e-18);
        let floor = TrainConfig {
            eta_min: 1e-6,
            ..cfg()
        };
        assert_eq!(cosine_lr(40, &floor, 40), 1e-6);
    }

    #[test]
    fn cosine_is_non_increasing() {
        let c = cfg();
        let mut prev = f64::INFINITY;
        for e in 0..=100 {
            let lr = cosine_lr(e, &c, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn scalar_params(value: f64) -> TensorMap {
        let mut t = TensorMap::new();
        t.insert("w", Tensor::from_vec(&[1], vec![value]));
        t
    }

    fn scalar_grads(value: f64) -> TensorMap {
        scalar_params(value)
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_exact_noop() {
        let mut params = scalar_params(1.2345);
        let mut state = OptState::new(&params);
        let c = TrainConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        adamw_step(&mut params, &scalar_grads(0.0), &mut state, 0.1, &c).unwrap();
        assert_eq!(params.get("w").unwrap().data()[0].to_bits(), 1.2345f64.to_bits());
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        // theta=1, g=1, lr=0.1, wd=0: bias-corrected m_hat=v_hat=1, so
        // theta' = 1 - 0.1 * (1 / (1 + 1e-8))
        let mut params = scalar_params(1.0);
        let mut state = OptState::new(&params);
        let c = TrainConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        adamw_step(&mut params, &scalar_grads(1.0), &mut state, 0.1, &c).unwrap();
        let got = params.get("w").unwrap().data()[0];
        assert!((got - 0.9).abs() <= 1e-6, "{got}");
        assert!((got - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adamw_pure_decay_path() {
        let theta = 0.75;
        let mut params = scalar_params(theta);
        let mut state = OptState::new(&params);
        let c = TrainConfig {
            weight_decay: 0.01,
            ..cfg()
        };
        adamw_step(&mut params, &scalar_grads(0.0), &mut state, 0.1, &c).unwrap();
        let got = params.get("w").unwrap().data()[0];
        let expected = theta * (1.0 - 0.1 * 0.01);
        assert!((got - expected).abs() <= 1e-18, "{got} vs {expected}");
    }

    #[test]
    fn adamw_matches_scalar_reference_over_many_steps() {
        let c = TrainConfig {
            weight_decay: 0.004,
            ..cfg()
        };
        let mut params = scalar_params(0.5);
        let mut state = OptState::new(&params);

        // independent scalar reference implementation
        let (mut rp, mut rm, mut rv) = (0.5f64, 0.0f64, 0.0f64);
        let lr = 0.02;
        for t in 1..=200 {
            let g = (t as f64 * 0.37).sin();
            adamw_step(&mut params, &scalar_grads(g), &mut state, lr, &c).unwrap();
            rm = c.beta1 * rm + (1.0 - c.beta1) * g;
            rv = c.beta2 * rv + (1.0 - c.beta2) * g * g;
            let mh = rm / (1.0 - c.beta1.powi(t));
            let vh = rv / (1.0 - c.beta2.powi(t));
            rp -= lr * (mh / (vh.sqrt() + c.eps_adam) + c.weight_decay * rp);
            let got = params.get("w").unwrap().data()[0];
            assert!((got - rp).abs() < 1e-12, "step {t}: {got} vs {rp}");
        }
    }

    #[test]
    fn adamw_shape_mismatch_is_rejected() {
        let mut params = scalar_params(1.0);
        let mut state = OptState::new(&params);
        let mut grads = TensorMap::new();
        grads.insert("w", Tensor::from_vec(&[2], vec![0.0, 0.0]));
        assert!(adamw_step(&mut params, &grads, &mut state, 0.1, &cfg()).is_err());
    }

    #[test]
    fn early_stopping_frozen_metric_stops_at_patience_boundary() {
        // metric improves through epoch 3, then freezes; patience 20:
        // training halts at epoch 24 with best_epoch 3.
        let mut stopper = EarlyStopper::new(20);
        let metric = |e: usize| if e < 4 { 0.5 + 0.1 * e as f64 } else { 0.8 };
        let mut epochs_run = 0;
        let mut stopped_at = None;
        for epoch in 0..100 {
            if stopper.should_stop(epoch) {
                stopped_at = Some(epoch);
                break;
            }
            stopper.observe(epoch, metric(epoch));
            epochs_run += 1;
        }
        assert_eq!(stopped_at, Some(24));
        assert_eq!(stopper.best(), Some((3, 0.8)));
        assert_eq!(epochs_run, 24);
        // invariant: epochs_run <= best_epoch + patience + 1
        assert!(epochs_run <= 3 + 20 + 1);
    }

    #[test]
    fn early_stopping_never_triggers_on_improving_sequences() {
        let mut stopper = EarlyStopper::new(5);
        for epoch in 0..200 {
            assert!(!stopper.should_stop(epoch));
            stopper.observe(epoch, epoch as f64);
        }
        assert_eq!(stopper.best(), Some((199, 199.0)));
    }

    #[test]
    fn early_stopping_tie_keeps_earliest_epoch() {
        let mut stopper = EarlyStopper::new(3);
        stopper.observe(0, 0.7);
        assert!(!stopper.observe(1, 0.7));
        assert_eq!(stopper.best(), Some((0, 0.7)));
    }

    #[test]
    fn four_class_indices_and_alpha_weights() {
        use ClassLabel::{Amf, Nmf};
        use HardnessLabel::{Easy, Hard};
        assert_eq!(four_class_index(Amf, Hard), 0);
        assert_eq!(four_class_index(Amf, Easy), 1);
        assert_eq!(four_class_index(Nmf, Hard), 2);
        assert_eq!(four_class_index(Nmf, Easy), 3);

        let cfg = crate::dataset::SyntheticConfig {
            n_patches: 200,
            amf_rate: 0.25,
            hard_rate: 0.3,
            n_domains: 2,
            seed: 3,
        };
        let ds = crate::dataset::generate_synthetic(&cfg).unwrap();
        let records: Vec<&PatchRecord> = ds.iter().collect();
        let alpha = four_class_alpha(&records);
        let mean = alpha.iter().sum::<f64>() / 4.0;
        assert!((mean - 1.0).abs() < 1e-12);
        // rarer classes carry larger weights: AMF classes outweigh NMF ones
        assert!(alpha[0] > alpha[3]);
    }
}
