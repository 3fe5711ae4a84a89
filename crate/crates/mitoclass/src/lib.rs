//! Multi-head, imbalance-aware classification of atypical vs. normal mitotic
//! figures, runnable and verifiable at desk scale on synthetic patches.
//!
//! The pipeline: three expert annotations per patch are reduced to a
//! consensus label and a hardness flag ([`dataset`]); patches are split by a
//! deterministic stratified k-fold over class x hardness ([`splits`]); a
//! seeded augmentation pipeline with optional HED stain deconvolution feeds
//! the model ([`pixelpipe`]); a small CNN backbone drives three per-expert
//! heads plus a hardness head trained with a theta-weighted combination of
//! focal losses ([`losses`], [`netcore`], [`trainer`]); predictions are
//! scored with challenge-style metrics ([`eval`]); and a seeded random
//! search tunes the focal/optimizer hyperparameters ([`hpo`]). The `cli`
//! module wires everything into reproducible runs.

pub mod cli;
pub mod dataset;
pub mod eval;
pub mod hpo;
pub mod losses;
pub mod netcore;
pub mod pixelpipe;
pub mod rng;
pub mod splits;
pub mod trainer;
