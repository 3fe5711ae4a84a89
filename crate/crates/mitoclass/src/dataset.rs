//! Patch records, consensus/hardness derivation, manifest I/O and the
//! synthetic desk-scale dataset generator.
//!
//! A dataset is a list of 128x128 RGB patches, each carrying three expert
//! labels from which a majority consensus and a hardness flag are derived.
//! Consensus and hardness are always recomputed from the expert columns at
//! load time; they are never trusted from a file.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::ImageEncoder;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::Stream;

/// Patch side length in pixels; every stored image is this size.
pub const PATCH_DIM: usize = 128;
/// Bytes per stored patch (RGB8).
pub const PATCH_BYTES: usize = PATCH_DIM * PATCH_DIM * 3;

/// Mitotic-figure phenotype. Integer codes are fixed: AMF = 0, NMF = 1,
/// everywhere (loss targets, metrics, serialization).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    /// Atypical mitotic figure (code 0, the minority/positive class in metrics).
    Amf,
    /// Normal mitotic figure (code 1).
    Nmf,
}

impl ClassLabel {
    pub fn code(self) -> u8 {
        match self {
            ClassLabel::Amf => 0,
            ClassLabel::Nmf => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ClassLabel::Amf),
            1 => Some(ClassLabel::Nmf),
            _ => None,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassLabel::Amf => "AMF",
            ClassLabel::Nmf => "NMF",
        })
    }
}

/// Annotator-agreement difficulty. Codes fixed: Hard = 0, Easy = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HardnessLabel {
    Hard,
    Easy,
}

impl HardnessLabel {
    pub fn code(self) -> u8 {
        match self {
            HardnessLabel::Hard => 0,
            HardnessLabel::Easy => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(HardnessLabel::Hard),
            1 => Some(HardnessLabel::Easy),
            _ => None,
        }
    }
}

impl fmt::Display for HardnessLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HardnessLabel::Hard => "hard",
            HardnessLabel::Easy => "easy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Species {
    Human,
    Canine,
}

impl Species {
    pub fn as_str(self) -> &'static str {
        match self {
            Species::Human => "human",
            Species::Canine => "canine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "human" => Some(Species::Human),
            "canine" => Some(Species::Canine),
            _ => None,
        }
    }
}

/// Acquisition provenance of a patch. A domain is one unique combination of
/// tumor type, species, scanner and laboratory.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainMeta {
    pub tumor_type: String,
    pub species: Species,
    pub scanner: String,
    pub lab: String,
}

impl DomainMeta {
    /// Deterministic identifier derived from the four metadata fields.
    pub fn domain_id(&self) -> String {
        format!(
            "{}:{}:{}:{}",
            self.tumor_type,
            self.species.as_str(),
            self.scanner,
            self.lab
        )
    }
}

/// Shared, immutable 128x128x3 RGB pixel buffer.
///
/// Cheap to clone; manifest loading deduplicates buffers by image path.
#[derive(Clone, PartialEq, Eq)]
pub struct Pixels(Arc<[u8]>);

impl Pixels {
    pub fn new(data: Vec<u8>) -> Result<Self, DatasetError> {
        if data.len() != PATCH_BYTES {
            return Err(DatasetError::BadPixelBuffer {
                expected: PATCH_BYTES,
                got: data.len(),
            });
        }
        Ok(Pixels(data.into()))
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    /// Value at (row, col, channel), channels are R,G,B.
    pub fn at(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.0[(row * PATCH_DIM + col) * 3 + channel]
    }
}

impl fmt::Debug for Pixels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pixels(128x128x3)")
    }
}

/// One labeled patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub patch_id: String,
    pub pixels: Pixels,
    pub expert_labels: [ClassLabel; 3],
    pub consensus: ClassLabel,
    pub hardness: HardnessLabel,
    pub domain: DomainMeta,
}

impl PatchRecord {
    /// Builds a record, deriving consensus and hardness from the expert labels.
    pub fn new(
        patch_id: String,
        pixels: Pixels,
        expert_labels: [ClassLabel; 3],
        domain: DomainMeta,
    ) -> Self {
        let [e1, e2, e3] = expert_labels;
        PatchRecord {
            patch_id,
            pixels,
            expert_labels,
            consensus: consensus_label(e1, e2, e3),
            hardness: hardness_label(e1, e2, e3),
            domain,
        }
    }
}

/// Majority vote of three annotators. With three voters and two labels a tie
/// is impossible.
pub fn consensus_label(e1: ClassLabel, e2: ClassLabel, e3: ClassLabel) -> ClassLabel {
    if e1 == e2 || e1 == e3 {
        e1
    } else {
        e2
    }
}

/// Easy iff all three annotators agree.
pub fn hardness_label(e1: ClassLabel, e2: ClassLabel, e3: ClassLabel) -> HardnessLabel {
    if e1 == e2 && e2 == e3 {
        HardnessLabel::Easy
    } else {
        HardnessLabel::Hard
    }
}

/// An ordered collection of records with unique patch ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<PatchRecord>,
    by_id: HashMap<String, usize>,
}

impl Dataset {
    pub fn from_records(records: Vec<PatchRecord>) -> Result<Self, DatasetError> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if by_id.insert(r.patch_id.clone(), i).is_some() {
                return Err(DatasetError::DuplicateId {
                    row: i + 1,
                    patch_id: r.patch_id.clone(),
                });
            }
        }
        Ok(Dataset { records, by_id })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PatchRecord] {
        &self.records
    }

    pub fn get(&self, patch_id: &str) -> Option<&PatchRecord> {
        self.by_id.get(patch_id).map(|&i| &self.records[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PatchRecord> {
        self.records.iter()
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
    }
}

/// Configuration for the synthetic desk-scale dataset.
///
/// The generated set has exactly `round_half_up(n_patches * amf_rate)` AMF
/// patches and `round_half_up(n_patches * hard_rate)` hard patches; the two
/// properties are planted independently.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_patches: usize,
    pub amf_rate: f64,
    pub hard_rate: f64,
    pub n_domains: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n_patches == 0 {
            return Err(DatasetError::InvalidConfig(
                "n_patches must be at least 1".into(),
            ));
        }
        if self.n_domains == 0 {
            return Err(DatasetError::InvalidConfig(
                "n_domains must be at least 1".into(),
            ));
        }
        for (name, v) in [("amf_rate", self.amf_rate), ("hard_rate", self.hard_rate)] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(DatasetError::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("manifest is missing required column '{0}'")]
    MissingColumn(String),
    #[error("row {row}, column '{column}': label code '{value}' is not 0 or 1")]
    BadLabelCode {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column '{column}': bad value '{value}'")]
    BadField {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: duplicate patch_id '{patch_id}'")]
    DuplicateId { row: usize, patch_id: String },
    #[error("row {row}: cannot read image '{path}': {reason}")]
    UnreadableImage {
        row: usize,
        path: PathBuf,
        reason: String,
    },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("pixel buffer must hold {expected} bytes, got {got}")]
    BadPixelBuffer { expected: usize, got: usize },
    #[error("manifest {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

// Stream tags for the independent random decisions of a synthetic dataset.
const TAG_CLASS_SHUFFLE: u64 = 1;
const TAG_HARD_SHUFFLE: u64 = 2;
const TAG_DOMAIN: u64 = 3;
const TAG_PATCH: u64 = 4;

/// Per-domain appearance shift simulating scanner/stain variation.
struct DomainLook {
    brightness: f64,
    tint: [f64; 3],
}

fn domain_look(seed: u64, domain_index: usize) -> DomainLook {
    let mut s = Stream::derived(seed, &[TAG_DOMAIN, domain_index as u64]);
    DomainLook {
        brightness: s.uniform(0.97, 1.03),
        tint: [
            s.uniform(-0.015, 0.015),
            s.uniform(-0.015, 0.015),
            s.uniform(-0.015, 0.015),
        ],
    }
}

fn domain_meta(domain_index: usize) -> DomainMeta {
    DomainMeta {
        tumor_type: format!("tumor{:02}", domain_index % 7),
        species: if domain_index % 2 == 0 {
            Species::Canine
        } else {
            Species::Human
        },
        scanner: format!("scanner{}", domain_index % 5),
        lab: format!("lab{}", domain_index % 4),
    }
}

/// Draws a unit vector by rejection sampling from the square; uses only
/// arithmetic with exact IEEE rounding (no transcendentals), so the result is
/// identical across platforms.
fn unit_vector(s: &mut Stream) -> (f64, f64) {
    loop {
        let x = s.uniform(-1.0, 1.0);
        let y = s.uniform(-1.0, 1.0);
        let n2 = x * x + y * y;
        if n2 > 0.01 && n2 <= 1.0 {
            let n = n2.sqrt();
            return (x / n, y / n);
        }
    }
}

/// Rotation by a fixed angle with compile-time constant sine/cosine.
fn rotate_vec(v: (f64, f64), cos_a: f64, sin_a: f64) -> (f64, f64) {
    (v.0 * cos_a - v.1 * sin_a, v.0 * sin_a + v.1 * cos_a)
}

const COS_120: f64 = -0.5;
const SIN_120: f64 = 0.866_025_403_784_438_6;

/// One nuclear lobe: an anisotropic quartic kernel around `center`.
struct Lobe {
    center: (f64, f64),
    axis: (f64, f64),
    along: f64,
    across: f64,
}

impl Lobe {
    /// Kernel weight in [0,1] at pixel (x, y).
    fn weight(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        let a = dx * self.axis.0 + dy * self.axis.1;
        let b = -dx * self.axis.1 + dy * self.axis.0;
        let d2 = (a / self.along) * (a / self.along) + (b / self.across) * (b / self.across);
        let t = 1.0 - d2;
        if t <= 0.0 {
            0.0
        } else {
            t * t
        }
    }
}

/// Renders one stained-tissue-like patch: pinkish background with a dark
/// nuclear blob. Normal figures get a bipolar symmetric blob (2 lobes),
/// atypical figures a multipolar irregular one (3-4 lobes).
fn synth_pixels(
    stream: &mut Stream,
    true_class: ClassLabel,
    hard: bool,
    look: &DomainLook,
) -> Vec<u8> {
    let base = [0.93, 0.76, 0.84];
    let nucleus = [0.36, 0.10, 0.58];
    let bg: Vec<f64> = (0..3)
        .map(|c| (base[c] * look.brightness + look.tint[c]).clamp(0.0, 1.0))
        .collect();

    let cx = 64.0 + stream.uniform(-6.0, 6.0);
    let cy = 64.0 + stream.uniform(-6.0, 6.0);
    let dir = unit_vector(stream);
    let reach = stream.uniform(13.0, 16.0);

    let mut lobes: Vec<Lobe> = Vec::new();
    match true_class {
        ClassLabel::Nmf => {
            // Bipolar and symmetric: the same lobe mirrored through the center.
            let along = stream.uniform(12.0, 14.0);
            let across = along * 0.6;
            for sign in [1.0, -1.0] {
                lobes.push(Lobe {
                    center: (cx + dir.0 * reach * sign, cy + dir.1 * reach * sign),
                    axis: dir,
                    along,
                    across,
                });
            }
        }
        ClassLabel::Amf => {
            // Multipolar and irregular: 3 or 4 heavyset lobes at fixed
            // angular steps with per-lobe radius jitter. The extra poles
            // carry visibly more nuclear material than a bipolar figure.
            let k = 3 + (stream.next_u64() & 1) as usize;
            let mut d = dir;
            for _ in 0..k {
                let r = reach * stream.uniform(0.9, 1.1);
                let along = if k == 3 {
                    stream.uniform(17.0, 19.0)
                } else {
                    stream.uniform(15.0, 17.0)
                };
                lobes.push(Lobe {
                    center: (cx + d.0 * r, cy + d.1 * r),
                    axis: d,
                    along,
                    across: along * 0.6,
                });
                d = if k == 3 {
                    rotate_vec(d, COS_120, SIN_120)
                } else {
                    // 90 degrees
                    (-d.1, d.0)
                };
            }
        }
    }

    let noise_amp = if hard { 0.04 } else { 0.02 };
    let mut out = Vec::with_capacity(PATCH_BYTES);
    for y in 0..PATCH_DIM {
        for x in 0..PATCH_DIM {
            let (xf, yf) = (x as f64, y as f64);
            let mut w = 0.0;
            for lobe in &lobes {
                w += lobe.weight(xf, yf);
            }
            let w = w.min(1.0);
            for c in 0..3 {
                let v = bg[c] * (1.0 - w)
                    + nucleus[c] * w
                    + stream.uniform(-noise_amp, noise_amp);
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Builds record `index` of the synthetic dataset. Pure function of
/// `(cfg.seed, index, planted flags)`; callable in parallel.
fn build_patch(cfg: &SyntheticConfig, index: usize, is_amf: bool, is_hard: bool) -> PatchRecord {
    let mut stream = Stream::derived(cfg.seed, &[TAG_PATCH, index as u64]);
    let true_class = if is_amf {
        ClassLabel::Amf
    } else {
        ClassLabel::Nmf
    };
    let domain_index = index % cfg.n_domains;
    let look = domain_look(cfg.seed, domain_index);
    let pixels = synth_pixels(&mut stream, true_class, is_hard, &look);

    let flipped = if true_class == ClassLabel::Amf {
        ClassLabel::Nmf
    } else {
        ClassLabel::Amf
    };
    let mut expert_labels = [true_class; 3];
    if is_hard {
        // Exactly one annotator dissents; the 2-vs-1 majority still recovers
        // the planted class.
        let dissenter = stream.below(3) as usize;
        expert_labels[dissenter] = flipped;
    }

    PatchRecord::new(
        format!("syn{index:06}"),
        Pixels::new(pixels).expect("synthesized buffer has fixed size"),
        expert_labels,
        domain_meta(domain_index),
    )
}

/// Generates a deterministic synthetic dataset with planted class and
/// hardness signal.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset, DatasetError> {
    cfg.validate()?;
    let n = cfg.n_patches;
    let n_amf = round_half_up(n as f64 * cfg.amf_rate).min(n);
    let n_hard = round_half_up(n as f64 * cfg.hard_rate).min(n);

    let mut amf_flags: Vec<bool> = (0..n).map(|i| i < n_amf).collect();
    Stream::derived(cfg.seed, &[TAG_CLASS_SHUFFLE]).shuffle(&mut amf_flags);
    let mut hard_flags: Vec<bool> = (0..n).map(|i| i < n_hard).collect();
    Stream::derived(cfg.seed, &[TAG_HARD_SHUFFLE]).shuffle(&mut hard_flags);

    // Per-patch streams are independent, so parallel rendering equals the
    // sequential result.
    let records: Vec<PatchRecord> = (0..n)
        .into_par_iter()
        .map(|i| build_patch(cfg, i, amf_flags[i], hard_flags[i]))
        .collect();
    Dataset::from_records(records)
}

// ---------------------------------------------------------------------------
// Manifest I/O
// ---------------------------------------------------------------------------

const MANIFEST_COLUMNS: [&str; 9] = [
    "patch_id",
    "image_path",
    "expert1",
    "expert2",
    "expert3",
    "tumor_type",
    "species",
    "scanner",
    "lab",
];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads a manifest CSV, decoding every referenced PNG and recomputing
/// consensus/hardness from the expert columns. Image buffers are shared
/// between rows that reference the same file.
pub fn load_manifest(path: &Path) -> Result<Dataset, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|source| DatasetError::Csv {
            path: path.to_path_buf(),
            source,
        })?;

    let headers = reader
        .headers()
        .map_err(|source| DatasetError::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    let mut col = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        col.insert(h.to_string(), i);
    }
    for required in MANIFEST_COLUMNS {
        if !col.contains_key(required) {
            return Err(DatasetError::MissingColumn(required.to_string()));
        }
    }
    let idx = |name: &str| col[name];

    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut image_cache: HashMap<PathBuf, Pixels> = HashMap::new();
    let mut records = Vec::new();
    let mut seen = HashMap::new();

    for (row_index, row) in reader.records().enumerate() {
        let row_no = row_index + 1; // 1-based data row for messages
        let row = row.map_err(|source| DatasetError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let field = |name: &str| row.get(idx(name)).unwrap_or("").to_string();

        let patch_id = field("patch_id");
        if seen.insert(patch_id.clone(), row_no).is_some() {
            return Err(DatasetError::DuplicateId {
                row: row_no,
                patch_id,
            });
        }

        let mut experts = [ClassLabel::Nmf; 3];
        for (slot, column) in ["expert1", "expert2", "expert3"].iter().enumerate() {
            let raw = field(column);
            let code: u8 = raw.trim().parse().map_err(|_| DatasetError::BadLabelCode {
                row: row_no,
                column: column.to_string(),
                value: raw.clone(),
            })?;
            experts[slot] =
                ClassLabel::from_code(code).ok_or_else(|| DatasetError::BadLabelCode {
                    row: row_no,
                    column: column.to_string(),
                    value: raw.clone(),
                })?;
        }

        let species_raw = field("species");
        let species =
            Species::parse(species_raw.trim()).ok_or_else(|| DatasetError::BadField {
                row: row_no,
                column: "species".into(),
                value: species_raw,
            })?;

        let image_path = base_dir.join(field("image_path"));
        let pixels = match image_cache.get(&image_path) {
            Some(p) => p.clone(),
            None => {
                let p = load_png(&image_path, row_no)?;
                image_cache.insert(image_path.clone(), p.clone());
                p
            }
        };

        records.push(PatchRecord::new(
            patch_id,
            pixels,
            experts,
            DomainMeta {
                tumor_type: field("tumor_type"),
                species,
                scanner: field("scanner"),
                lab: field("lab"),
            },
        ));
    }

    Dataset::from_records(records)
}

fn load_png(path: &Path, row: usize) -> Result<Pixels, DatasetError> {
    let unreadable = |reason: String| DatasetError::UnreadableImage {
        row,
        path: path.to_path_buf(),
        reason,
    };
    let img = image::open(path).map_err(|e| unreadable(e.to_string()))?;
    let rgb = img.to_rgb8();
    if rgb.width() as usize != PATCH_DIM || rgb.height() as usize != PATCH_DIM {
        return Err(unreadable(format!(
            "expected {PATCH_DIM}x{PATCH_DIM} pixels, got {}x{}",
            rgb.width(),
            rgb.height()
        )));
    }
    Pixels::new(rgb.into_raw())
}

/// Writes `dataset` as `<dir>/manifest.csv` plus one PNG per patch under
/// `<dir>/images/`. Returns the manifest path.
pub fn write_manifest(dataset: &Dataset, dir: &Path) -> Result<PathBuf, DatasetError> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;

    // PNG encoding dominates here; encode in parallel, write rows in order.
    let encoded: Vec<Vec<u8>> = dataset
        .records()
        .par_iter()
        .map(|r| {
            let mut buf = Vec::new();
            image::codecs::png::PngEncoder::new(&mut buf)
                .write_image(
                    r.pixels.as_slice(),
                    PATCH_DIM as u32,
                    PATCH_DIM as u32,
                    image::ExtendedColorType::Rgb8,
                )
                .expect("in-memory png encode");
            buf
        })
        .collect();

    let manifest_path = dir.join("manifest.csv");
    let mut out = csv::Writer::from_path(&manifest_path).map_err(|source| DatasetError::Csv {
        path: manifest_path.clone(),
        source,
    })?;
    out.write_record(MANIFEST_COLUMNS)
        .map_err(|source| DatasetError::Csv {
            path: manifest_path.clone(),
            source,
        })?;
    for (r, png) in dataset.records().iter().zip(&encoded) {
        let rel = format!("images/{}.png", r.patch_id);
        let img_path = dir.join(&rel);
        std::fs::write(&img_path, png).map_err(io_err(&img_path))?;
        out.write_record([
            r.patch_id.as_str(),
            rel.as_str(),
            &r.expert_labels[0].code().to_string(),
            &r.expert_labels[1].code().to_string(),
            &r.expert_labels[2].code().to_string(),
            r.domain.tumor_type.as_str(),
            r.domain.species.as_str(),
            r.domain.scanner.as_str(),
            r.domain.lab.as_str(),
        ])
        .map_err(|source| DatasetError::Csv {
            path: manifest_path.clone(),
            source,
        })?;
    }
    out.flush().map_err(io_err(&manifest_path))?;
    Ok(manifest_path)
}

/// Writes the synthetic-truth oracle file (`patch_id,true_class,planted_hard`).
/// For synthetic data the planted class equals the consensus and the planted
/// hardness equals the derived hardness, so the oracle is read off the records.
pub fn write_truth(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    writeln!(f, "patch_id,true_class,planted_hard").map_err(io_err(path))?;
    for r in dataset.records() {
        writeln!(
            f,
            "{},{},{}",
            r.patch_id,
            r.consensus.code(),
            // planted_hard is 1 for hard (note: distinct from the hardness
            // label code, where hard = 0)
            u8::from(r.hardness == HardnessLabel::Hard)
        )
        .map_err(io_err(path))?;
    }
    Ok(())
}
