//! The differentiable model: pluggable convolutional backbone, shared fully
//! connected layer, three per-expert binary heads and a hardness head
//! (binary or four-class), with an explicit reverse-mode gradient contract
//! and bit-exact checkpoint serialization.

pub mod checkpoint;
mod desk;
mod tensor;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointError};
pub use desk::{DeskCnn, DESK_CHANNELS, DESK_FEATURE_DIM};
pub use tensor::{Tensor, TensorMap};

use std::any::Any;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, HardnessLabel};
use crate::pixelpipe::PixelTensor;
use crate::rng::{str_tag, Stream};

const TAG_INIT: u64 = 0x494E_4954; // "INIT"
const TAG_DROPOUT: u64 = 0x44524F50; // "DROP"

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stale activation cache: {0}")]
    StaleCache(String),
    #[error("the 'external' backbone is an integration point; construct the model with `Model::with_backbone`")]
    ExternalBackbone,
    #[error("invalid architecture: {0}")]
    BadArch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// The built-in desk-scale CNN.
    DeskCnn,
    /// A caller-supplied backbone plugged in via [`Model::with_backbone`]
    /// (e.g. a full-scale pretrained network).
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardnessHeadMode {
    Binary,
    FourClass,
}

impl HardnessHeadMode {
    pub fn classes(self) -> usize {
        match self {
            HardnessHeadMode::Binary => 1,
            HardnessHeadMode::FourClass => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HardnessHeadMode::Binary => "binary",
            HardnessHeadMode::FourClass => "four_class",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "binary" => Some(HardnessHeadMode::Binary),
            "four_class" => Some(HardnessHeadMode::FourClass),
            _ => None,
        }
    }
}

/// Architecture description; also stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub backbone: BackboneKind,
    pub feature_dim: usize,
    pub shared_dim: usize,
    pub n_expert_heads: usize,
    pub hardness_head_mode: HardnessHeadMode,
    pub dropout: f64,
    pub input_channels: usize,
}

impl ArchConfig {
    /// Desk profile: 64-dim features, 32-dim shared layer.
    pub fn desk(input_channels: usize, hardness_head_mode: HardnessHeadMode) -> Self {
        ArchConfig {
            backbone: BackboneKind::DeskCnn,
            feature_dim: DESK_FEATURE_DIM,
            shared_dim: 32,
            n_expert_heads: 3,
            hardness_head_mode,
            dropout: 0.0,
            input_channels,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.feature_dim == 0 || self.shared_dim == 0 {
            return Err(ModelError::BadArch(
                "feature_dim and shared_dim must be positive".into(),
            ));
        }
        if self.n_expert_heads != 3 {
            return Err(ModelError::BadArch(format!(
                "the model carries exactly 3 expert heads, got {}",
                self.n_expert_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadArch(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.input_channels != 3 && self.input_channels != 6 {
            return Err(ModelError::BadArch(format!(
                "input_channels must be 3 or 6, got {}",
                self.input_channels
            )));
        }
        Ok(())
    }
}

/// Returns the desk architecture plus a layer-by-layer description of the
/// built-in backbone.
pub fn desk_backbone_spec() -> (ArchConfig, Vec<String>) {
    let arch = ArchConfig::desk(3, HardnessHeadMode::Binary);
    let layers = DeskCnn::layer_summary(arch.input_channels);
    (arch, layers)
}

/// All trainable tensors plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub tensors: TensorMap,
}

/// Per-head probabilities for one batch.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    /// `batch x 3`, probability of NMF (label code 1) per expert head.
    pub expert_probs: Vec<[f64; 3]>,
    pub hardness: HardnessOutput,
}

#[derive(Debug, Clone)]
pub enum HardnessOutput {
    /// Probability of Easy (label code 1) per sample.
    Binary(Vec<f64>),
    /// Simplex rows over (consensus x hardness) classes per sample.
    FourClass(Vec<[f64; 4]>),
}

impl HeadOutputs {
    pub fn batch_len(&self) -> usize {
        self.expert_probs.len()
    }
}

/// Gradients of the total loss with respect to head pre-activations.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub expert: Vec<[f64; 3]>,
    pub hardness: HardnessGrads,
}

#[derive(Debug, Clone)]
pub enum HardnessGrads {
    Binary(Vec<f64>),
    FourClass(Vec<[f64; 4]>),
}

/// Inference outcome for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub class: ClassLabel,
    /// Mean expert probability of NMF.
    pub score: f64,
    pub hardness: HardnessPrediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HardnessPrediction {
    Binary(HardnessLabel),
    /// Index into the four (consensus x hardness) classes.
    FourClass(usize),
}

/// Pluggable feature extractor. The built-in implementation is [`DeskCnn`];
/// full-scale deployments may plug a pretrained network behind this trait.
pub trait Backbone: Send + Sync {
    fn kind_name(&self) -> &'static str;
    fn feature_dim(&self) -> usize;
    fn param_specs(&self, input_channels: usize) -> Vec<(String, Vec<usize>)>;
    fn forward(
        &self,
        params: &TensorMap,
        input: &PixelTensor,
    ) -> Result<(Vec<f64>, Box<dyn Any + Send + Sync>), ModelError>;
    fn backward(
        &self,
        params: &TensorMap,
        cache: &dyn Any,
        dfeature: &[f64],
        grads: &mut TensorMap,
    ) -> Result<(), ModelError>;
}

struct SampleCache {
    backbone: Box<dyn Any + Send + Sync>,
    feature: Vec<f64>,
    /// post-ReLU shared activations (pre-dropout)
    shared_act: Vec<f64>,
    /// what the heads consumed (post-dropout)
    shared_out: Vec<f64>,
    dropout_mask: Option<Vec<f64>>,
}

/// Activations retained by [`Model::forward`] for the matching backward call.
pub struct ForwardCache {
    samples: Vec<SampleCache>,
    input_channels: usize,
    hardness_classes: usize,
}

impl ForwardCache {
    /// Backbone feature vector of one sample; test/diagnostic hook.
    pub fn debug_feature(&self, sample: usize) -> Vec<f64> {
        self.samples[sample].feature.clone()
    }
}

pub struct Model {
    arch: ArchConfig,
    backbone: Box<dyn Backbone>,
}

impl Model {
    pub fn new(arch: ArchConfig) -> Result<Self, ModelError> {
        match arch.backbone {
            BackboneKind::DeskCnn => Model::with_backbone(arch, Box::new(DeskCnn)),
            BackboneKind::External => Err(ModelError::ExternalBackbone),
        }
    }

    /// Builds a model around a caller-supplied backbone.
    pub fn with_backbone(arch: ArchConfig, backbone: Box<dyn Backbone>) -> Result<Self, ModelError> {
        arch.validate()?;
        if backbone.feature_dim() != arch.feature_dim {
            return Err(ModelError::BadArch(format!(
                "backbone produces {} features but the architecture expects {}",
                backbone.feature_dim(),
                arch.feature_dim
            )));
        }
        Ok(Model { arch, backbone })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Names and shapes of every trainable tensor, in parameter order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = self.backbone.param_specs(self.arch.input_channels);
        specs.push((
            "shared.weight".into(),
            vec![self.arch.feature_dim, self.arch.shared_dim],
        ));
        specs.push(("shared.bias".into(), vec![self.arch.shared_dim]));
        for e in 0..self.arch.n_expert_heads {
            specs.push((format!("expert{e}.weight"), vec![self.arch.shared_dim, 1]));
            specs.push((format!("expert{e}.bias"), vec![1]));
        }
        let hk = self.arch.hardness_head_mode.classes();
        specs.push(("hardness.weight".into(), vec![self.arch.shared_dim, hk]));
        specs.push(("hardness.bias".into(), vec![hk]));
        specs
    }

    /// He-uniform weights, zero biases, seeded per tensor name.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut tensors = TensorMap::new();
        for (name, dims) in self.param_specs() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&dims)
            } else {
                let fan_in: usize = dims[..dims.len() - 1].iter().product();
                let limit = (6.0 / fan_in as f64).sqrt();
                let mut s = Stream::derived(seed, &[TAG_INIT, str_tag(&name)]);
                let data = (0..dims.iter().product::<usize>())
                    .map(|_| s.uniform(-limit, limit))
                    .collect();
                Tensor::from_vec(&dims, data)
            };
            tensors.insert(&name, t);
        }
        ModelParams {
            arch: self.arch.clone(),
            tensors,
        }
    }

    fn check_params(&self, params: &ModelParams) -> Result<(), ModelError> {
        if params.arch != self.arch {
            return Err(ModelError::ShapeMismatch(
                "parameters were built for a different architecture".into(),
            ));
        }
        Ok(())
    }

    /// Runs the batch through backbone, shared layer and heads.
    ///
    /// In train mode a seeded dropout mask is applied after the shared ReLU
    /// (per-sample streams derived from `dropout_seed`); eval mode is
    /// dropout-free and deterministic. `dropout = 0` makes the two modes
    /// exactly equal.
    pub fn forward(
        &self,
        params: &ModelParams,
        batch: &[PixelTensor],
        train_mode: bool,
        dropout_seed: u64,
    ) -> Result<(HeadOutputs, ForwardCache), ModelError> {
        self.check_params(params)?;
        if batch.is_empty() {
            return Err(ModelError::ShapeMismatch("empty batch".into()));
        }
        for img in batch {
            if img.channels != self.arch.input_channels {
                return Err(ModelError::ShapeMismatch(format!(
                    "batch has {} channels, architecture expects {}",
                    img.channels, self.arch.input_channels
                )));
            }
        }

        let apply_dropout = train_mode && self.arch.dropout > 0.0;
        let results: Vec<Result<(SampleCache, [f64; 3], Vec<f64>), ModelError>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, img)| self.forward_sample(params, img, apply_dropout, dropout_seed, i))
            .collect();

        let mut samples = Vec::with_capacity(batch.len());
        let mut expert_probs = Vec::with_capacity(batch.len());
        let mut hardness_rows = Vec::with_capacity(batch.len());
        for r in results {
            let (cache, experts, hardness) = r?;
            samples.push(cache);
            expert_probs.push(experts);
            hardness_rows.push(hardness);
        }

        let hardness = match self.arch.hardness_head_mode {
            HardnessHeadMode::Binary => {
                HardnessOutput::Binary(hardness_rows.into_iter().map(|r| r[0]).collect())
            }
            HardnessHeadMode::FourClass => HardnessOutput::FourClass(
                hardness_rows
                    .into_iter()
                    .map(|r| [r[0], r[1], r[2], r[3]])
                    .collect(),
            ),
        };

        Ok((
            HeadOutputs {
                expert_probs,
                hardness,
            },
            ForwardCache {
                samples,
                input_channels: self.arch.input_channels,
                hardness_classes: self.arch.hardness_head_mode.classes(),
            },
        ))
    }

    fn forward_sample(
        &self,
        params: &ModelParams,
        img: &PixelTensor,
        apply_dropout: bool,
        dropout_seed: u64,
        sample_index: usize,
    ) -> Result<(SampleCache, [f64; 3], Vec<f64>), ModelError> {
        let (feature, bb_cache) = self.backbone.forward(&params.tensors, img)?;

        let w = required(params, "shared.weight")?;
        let b = required(params, "shared.bias")?;
        let mut shared_act = fc_forward(&feature, w.data(), b.data(), self.arch.shared_dim);
        for v in &mut shared_act {
            *v = v.max(0.0);
        }

        let (shared_out, dropout_mask) = if apply_dropout {
            let p = self.arch.dropout;
            let mut s = Stream::derived(dropout_seed, &[TAG_DROPOUT, sample_index as u64]);
            let scale = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..shared_act.len())
                .map(|_| if s.next_f64() < p { 0.0 } else { scale })
                .collect();
            let out = shared_act
                .iter()
                .zip(&mask)
                .map(|(&a, &m)| a * m)
                .collect();
            (out, Some(mask))
        } else {
            (shared_act.clone(), None)
        };

        let mut experts = [0.0f64; 3];
        for (e, slot) in experts.iter_mut().enumerate() {
            let w = required(params, &format!("expert{e}.weight"))?;
            let b = required(params, &format!("expert{e}.bias"))?;
            let z = fc_forward(&shared_out, w.data(), b.data(), 1)[0];
            *slot = sigmoid(z);
        }

        let hw = required(params, "hardness.weight")?;
        let hb = required(params, "hardness.bias")?;
        let hk = self.arch.hardness_head_mode.classes();
        let z = fc_forward(&shared_out, hw.data(), hb.data(), hk);
        let hardness = match self.arch.hardness_head_mode {
            HardnessHeadMode::Binary => vec![sigmoid(z[0])],
            HardnessHeadMode::FourClass => softmax(&z),
        };

        Ok((
            SampleCache {
                backbone: bb_cache,
                feature,
                shared_act,
                shared_out,
                dropout_mask,
            },
            experts,
            hardness,
        ))
    }

    /// Accumulates gradients for every named tensor given the loss gradients
    /// with respect to head pre-activations. Per-sample contributions are
    /// computed independently and reduced in sample order, so the result does
    /// not depend on scheduling.
    pub fn backward(
        &self,
        params: &ModelParams,
        cache: &ForwardCache,
        loss_grads: &HeadGrads,
    ) -> Result<TensorMap, ModelError> {
        self.check_params(params)?;
        let n = cache.samples.len();
        if loss_grads.expert.len() != n {
            return Err(ModelError::StaleCache(format!(
                "cache holds {n} samples but loss gradients cover {}",
                loss_grads.expert.len()
            )));
        }
        let hardness_len = match &loss_grads.hardness {
            HardnessGrads::Binary(v) => {
                if cache.hardness_classes != 1 {
                    return Err(ModelError::StaleCache(
                        "binary hardness gradients against a four-class cache".into(),
                    ));
                }
                v.len()
            }
            HardnessGrads::FourClass(v) => {
                if cache.hardness_classes != 4 {
                    return Err(ModelError::StaleCache(
                        "four-class hardness gradients against a binary cache".into(),
                    ));
                }
                v.len()
            }
        };
        if hardness_len != n {
            return Err(ModelError::StaleCache(
                "hardness gradient batch size mismatch".into(),
            ));
        }
        if cache.input_channels != self.arch.input_channels {
            return Err(ModelError::StaleCache(
                "cache was produced under a different input configuration".into(),
            ));
        }

        let per_sample: Vec<Result<TensorMap, ModelError>> = (0..n)
            .into_par_iter()
            .map(|i| self.backward_sample(params, &cache.samples[i], loss_grads, i))
            .collect();

        let mut total = params.tensors.zeros_like();
        for g in per_sample {
            total.add_assign(&g?);
        }
        Ok(total)
    }

    fn backward_sample(
        &self,
        params: &ModelParams,
        sample: &SampleCache,
        loss_grads: &HeadGrads,
        i: usize,
    ) -> Result<TensorMap, ModelError> {
        let mut grads = params.tensors.zeros_like();
        let sd = self.arch.shared_dim;
        let mut dshared_out = vec![0.0; sd];

        // expert heads
        for e in 0..3 {
            let dz = loss_grads.expert[i][e];
            let wname = format!("expert{e}.weight");
            let bname = format!("expert{e}.bias");
            let w = required(params, &wname)?;
            let (dw, db) = grads
                .get_two_mut(&wname, &bname)
                .expect("grads mirror params");
            fc_backward(
                &sample.shared_out,
                w.data(),
                &[dz],
                dw.data_mut(),
                db.data_mut(),
                Some(&mut dshared_out),
            );
        }

        // hardness head
        let dz_hard: Vec<f64> = match &loss_grads.hardness {
            HardnessGrads::Binary(v) => vec![v[i]],
            HardnessGrads::FourClass(v) => v[i].to_vec(),
        };
        let hw = required(params, "hardness.weight")?;
        let (dw, db) = grads
            .get_two_mut("hardness.weight", "hardness.bias")
            .expect("grads mirror params");
        fc_backward(
            &sample.shared_out,
            hw.data(),
            &dz_hard,
            dw.data_mut(),
            db.data_mut(),
            Some(&mut dshared_out),
        );

        // dropout and ReLU
        if let Some(mask) = &sample.dropout_mask {
            for (d, &m) in dshared_out.iter_mut().zip(mask) {
                *d *= m;
            }
        }
        for (d, &a) in dshared_out.iter_mut().zip(&sample.shared_act) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }

        // shared layer
        let sw = required(params, "shared.weight")?;
        let mut dfeature = vec![0.0; self.arch.feature_dim];
        let (dw, db) = grads
            .get_two_mut("shared.weight", "shared.bias")
            .expect("grads mirror params");
        fc_backward(
            &sample.feature,
            sw.data(),
            &dshared_out,
            dw.data_mut(),
            db.data_mut(),
            Some(&mut dfeature),
        );
        debug_assert_eq!(dshared_out.len(), sd);

        // backbone
        self.backbone.backward(
            &params.tensors,
            sample.backbone.as_ref(),
            &dfeature,
            &mut grads,
        )?;
        Ok(grads)
    }
}

/// `out[j] = sum_i input[i] * weight[i * out_dim + j] + bias[j]`.
fn fc_forward(input: &[f64], weight: &[f64], bias: &[f64], out_dim: usize) -> Vec<f64> {
    debug_assert_eq!(weight.len(), input.len() * out_dim);
    let mut out = bias.to_vec();
    for (i, &v) in input.iter().enumerate() {
        let wrow = &weight[i * out_dim..][..out_dim];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += v * wv;
        }
    }
    out
}

/// Accumulating gradients of [`fc_forward`].
fn fc_backward(
    input: &[f64],
    weight: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    dinput: Option<&mut [f64]>,
) {
    let out_dim = dout.len();
    for (db, &d) in dbias.iter_mut().zip(dout) {
        *db += d;
    }
    for (i, &v) in input.iter().enumerate() {
        let dwrow = &mut dweight[i * out_dim..][..out_dim];
        for (dw, &d) in dwrow.iter_mut().zip(dout) {
            *dw += v * d;
        }
    }
    if let Some(din) = dinput {
        for (i, dv) in din.iter_mut().enumerate() {
            let wrow = &weight[i * out_dim..][..out_dim];
            let mut s = 0.0;
            for (&wv, &d) in wrow.iter().zip(dout) {
                s += wv * d;
            }
            *dv += s;
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Inference rule: the class score is the mean of the three expert
/// probabilities (probability of NMF); NMF wins ties at 0.5. The binary
/// hardness head thresholds at 0.5 (ties toward Easy); the four-class head
/// takes the argmax (ties toward the lowest index).
pub fn predict(outputs: &HeadOutputs) -> Vec<Prediction> {
    let n = outputs.batch_len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let e = &outputs.expert_probs[i];
        let score = (e[0] + e[1] + e[2]) / 3.0;
        let class = if score >= 0.5 {
            ClassLabel::Nmf
        } else {
            ClassLabel::Amf
        };
        let hardness = match &outputs.hardness {
            HardnessOutput::Binary(p) => HardnessPrediction::Binary(if p[i] >= 0.5 {
                HardnessLabel::Easy
            } else {
                HardnessLabel::Hard
            }),
            HardnessOutput::FourClass(rows) => {
                let row = &rows[i];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                HardnessPrediction::FourClass(best)
            }
        };
        out.push(Prediction {
            class,
            score,
            hardness,
        });
    }
    out
}

fn required<'a>(params: &'a ModelParams, name: &str) -> Result<&'a Tensor, ModelError> {
    params
        .tensors
        .get(name)
        .ok_or_else(|| ModelError::ShapeMismatch(format!("missing tensor '{name}'")))
}
