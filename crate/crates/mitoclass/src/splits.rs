//! Deterministic stratified k-fold assignment over class x hardness strata.
//!
//! Within each of the four strata (AMF/NMF x hard/easy) the patch ids are
//! shuffled by a stratum-specific seeded stream and dealt round-robin to the
//! folds, starting at fold `stratum_index mod k`. Round-robin dealing makes
//! the per-fold stratum counts exact to within one.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::dataset::Dataset;
use crate::rng::Stream;

const TAG_STRATUM_SHUFFLE: u64 = 0x5354_5241; // "STRA"

#[derive(Debug, thiserror::Error)]
pub enum SplitError {
    #[error("k must be between 2 and the dataset size ({size}), got {k}")]
    InvalidK { k: usize, size: usize },
    #[error("fold {fold} out of range for k={k}")]
    FoldOutOfRange { fold: usize, k: usize },
    #[error("fold file {path}: {reason}")]
    BadFoldFile { path: String, reason: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Mapping of patch ids to fold indices, kept in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldAssignment {
    k: usize,
    seed: u64,
    entries: Vec<(String, usize)>,
    by_id: HashMap<String, usize>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fold_of(&self, patch_id: &str) -> Option<usize> {
        self.by_id.get(patch_id).copied()
    }

    /// `(patch_id, fold)` pairs in dataset order.
    pub fn entries(&self) -> &[(String, usize)] {
        &self.entries
    }

    fn from_entries(
        k: usize,
        seed: u64,
        entries: Vec<(String, usize)>,
    ) -> Result<Self, SplitError> {
        let mut by_id = HashMap::with_capacity(entries.len());
        for (id, fold) in &entries {
            if *fold >= k {
                return Err(SplitError::FoldOutOfRange { fold: *fold, k });
            }
            by_id.insert(id.clone(), *fold);
        }
        Ok(FoldAssignment {
            k,
            seed,
            entries,
            by_id,
        })
    }

    /// Writes the fold file: a `# k=.. seed=..` comment line, a header, then
    /// one `patch_id,fold` row per patch in dataset order.
    pub fn write(&self, path: &Path) -> Result<(), SplitError> {
        let io = |source| SplitError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        writeln!(f, "# k={} seed={}", self.k, self.seed).map_err(io)?;
        writeln!(f, "patch_id,fold").map_err(io)?;
        for (id, fold) in &self.entries {
            writeln!(f, "{id},{fold}").map_err(io)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SplitError> {
        let io = |source| SplitError::Io {
            path: path.display().to_string(),
            source,
        };
        let bad = |reason: String| SplitError::BadFoldFile {
            path: path.display().to_string(),
            reason,
        };
        let file = std::fs::File::open(path).map_err(io)?;
        let mut k = None;
        let mut seed = 0;
        let mut entries = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(io)?;
            let line = line.trim();
            if line.is_empty() || line == "patch_id,fold" {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                for token in comment.split_whitespace() {
                    if let Some(v) = token.strip_prefix("k=") {
                        k = Some(
                            v.parse::<usize>()
                                .map_err(|_| bad(format!("bad k value '{v}'")))?,
                        );
                    } else if let Some(v) = token.strip_prefix("seed=") {
                        seed = v
                            .parse::<u64>()
                            .map_err(|_| bad(format!("bad seed value '{v}'")))?;
                    }
                }
                continue;
            }
            let (id, fold) = line
                .split_once(',')
                .ok_or_else(|| bad(format!("malformed row '{line}'")))?;
            let fold = fold
                .trim()
                .parse::<usize>()
                .map_err(|_| bad(format!("bad fold index '{fold}'")))?;
            entries.push((id.to_string(), fold));
        }
        let k = k.ok_or_else(|| bad("missing '# k=..' header".into()))?;
        Self::from_entries(k, seed, entries)
    }
}

/// Index of the (consensus, hardness) stratum of a record, in [0, 4).
fn stratum_index(r: &crate::dataset::PatchRecord) -> usize {
    (r.consensus.code() * 2 + r.hardness.code()) as usize
}

/// Stratified k-fold split, deterministic in (dataset order, k, seed).
pub fn stratified_kfold(
    dataset: &Dataset,
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, SplitError> {
    if k < 2 || k > dataset.len() {
        return Err(SplitError::InvalidK {
            k,
            size: dataset.len(),
        });
    }

    let mut strata: [Vec<&str>; 4] = Default::default();
    for r in dataset.iter() {
        strata[stratum_index(r)].push(&r.patch_id);
    }

    let mut fold_by_id: HashMap<&str, usize> = HashMap::with_capacity(dataset.len());
    for (s, ids) in strata.iter_mut().enumerate() {
        Stream::derived(seed, &[TAG_STRATUM_SHUFFLE, s as u64]).shuffle(ids);
        for (i, id) in ids.iter().enumerate() {
            fold_by_id.insert(id, (s + i) % k);
        }
    }

    let entries = dataset
        .iter()
        .map(|r| (r.patch_id.clone(), fold_by_id[r.patch_id.as_str()]))
        .collect();
    FoldAssignment::from_entries(k, seed, entries)
}

/// Splits an assignment into `(train_ids, val_ids)` for one fold; both sides
/// preserve dataset order.
pub fn fold_slices(
    assignment: &FoldAssignment,
    fold: usize,
) -> Result<(Vec<String>, Vec<String>), SplitError> {
    if fold >= assignment.k {
        return Err(SplitError::FoldOutOfRange {
            fold,
            k: assignment.k,
        });
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (id, f) in &assignment.entries {
        if *f == fold {
            val.push(id.clone());
        } else {
            train.push(id.clone());
        }
    }
    Ok((train, val))
}

/// Per-fold, per-stratum counts; used by stratification checks.
pub fn stratum_counts(dataset: &Dataset, assignment: &FoldAssignment) -> Vec<[usize; 4]> {
    let mut counts = vec![[0usize; 4]; assignment.k];
    for r in dataset.iter() {
        if let Some(f) = assignment.fold_of(&r.patch_id) {
            counts[f][stratum_index(r)] += 1;
        }
    }
    counts
}
