//! Dataset ingestion: scanning a two-class image tree, pruning undecodable
//! files, deterministic three-way splitting, and epoch batching.
//!
//! Everything downstream of a fixed `(tree, seed)` pair is byte-reproducible:
//! scans sort lexicographically, the split shuffle uses the seeded generator,
//! and manifests serialize with a fixed field order.

pub mod imageio;

use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

pub use imageio::{bilinear_resize, load_and_resize};

pub const CLASS_DIR_FRACTURED: &str = "Fractured";
pub const CLASS_DIR_NON_FRACTURED: &str = "Non_fractured";

/// Default split ratios: 80% train, 11.5% validation, 8.5% test.
pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.80, 0.115, 0.085);

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing class directory {0:?} under dataset root")]
    MissingClassDir(String),
    #[error("class {0:?} contains no images")]
    EmptyClass(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("ratios {0:?} must be positive and sum to 1 within 1e-9")]
    BadRatios([f64; 3]),
    #[error("fixed assignment references unknown path {0:?}")]
    UnknownFixedPath(String),
    #[error("fixed assignments put {have} entries into {split} but the ratio allows {target}")]
    FixedOverflow {
        split: Split,
        have: usize,
        target: usize,
    },
    #[error("split is empty")]
    EmptySplit,
    #[error("batch size must be at least 1")]
    BadBatchSize,
    #[error("manifest json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Fractured,
    NonFractured,
}

impl Label {
    /// Class index used by the classifier; the positive class is Fractured.
    pub fn index(self) -> usize {
        match self {
            Label::NonFractured => 0,
            Label::Fractured => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

pub const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset root, with `/` separators.
    pub path: String,
    pub label: Label,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Unix seconds at scan time; excluded from persisted split manifests.
    pub scanned_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub path: String,
    pub label: Label,
    pub split: Split,
}

/// The persisted, reproducible assignment of every accepted image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub root: String,
    pub seed: u64,
    pub ratios: [f64; 3],
    pub entries: Vec<SplitEntry>,
    pub rejected: Vec<Rejection>,
}

impl SplitManifest {
    pub fn counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for e in &self.entries {
            counts[SPLITS.iter().position(|&s| s == e.split).unwrap()] += 1;
        }
        counts
    }

    pub fn entries_for(&self, split: Split) -> Vec<&SplitEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn to_json(&self) -> Result<String, DataError> {
        let mut s =
            serde_json::to_string_pretty(self).map_err(|e| DataError::Json(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(json: &str) -> Result<Self, DataError> {
        serde_json::from_str(json).map_err(|e| DataError::Json(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_json()?).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(&text)
    }
}

// ---- scanning -----------------------------------------------------------------

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| {
            let e = e.to_ascii_lowercase();
            e == "png" || e == "jpg" || e == "jpeg"
        })
        .unwrap_or(false)
}

fn collect_images(
    root: &Path,
    dir: &Path,
    label: Label,
    out: &mut Vec<ManifestEntry>,
) -> Result<(), DataError> {
    let read = std::fs::read_dir(dir).map_err(|e| DataError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    for item in read {
        let item = item.map_err(|e| DataError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let path = item.path();
        if path.is_dir() {
            collect_images(root, &path, label, out)?;
        } else if is_image_file(&path) {
            let meta = std::fs::metadata(&path).map_err(|e| DataError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            let rel = path
                .strip_prefix(root)
                .expect("path under root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            out.push(ManifestEntry {
                path: rel,
                label,
                bytes: meta.len(),
            });
        }
    }
    Ok(())
}

/// Recursively enumerates `.png`/`.jpg`/`.jpeg` files under the two class
/// directories, lexicographically sorted by relative path.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest, DataError> {
    let mut entries = Vec::new();
    for (dir_name, label) in [
        (CLASS_DIR_FRACTURED, Label::Fractured),
        (CLASS_DIR_NON_FRACTURED, Label::NonFractured),
    ] {
        let dir = root.join(dir_name);
        if !dir.is_dir() {
            return Err(DataError::MissingClassDir(dir_name.to_string()));
        }
        let before = entries.len();
        collect_images(root, &dir, label, &mut entries)?;
        if entries.len() == before {
            return Err(DataError::EmptyClass(dir_name.to_string()));
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let scanned_at = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
        scanned_at,
    })
}

// ---- corruption pruning ----------------------------------------------------------

fn classify_decode_failure(err: &image::ImageError) -> String {
    // Walk the error chain looking for a truncated stream.
    let mut cursor: Option<&(dyn StdError + 'static)> = Some(err);
    while let Some(e) = cursor {
        if let Some(io) = e.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::UnexpectedEof {
                return "truncated stream".to_string();
            }
        }
        cursor = e.source();
    }
    let text = err.to_string();
    let lowered = text.to_ascii_lowercase();
    if lowered.contains("unexpected end") || lowered.contains("unexpected eof") {
        "truncated stream".to_string()
    } else {
        let mut reason = String::new();
        let _ = write!(reason, "decode failure: {text}");
        reason
    }
}

/// Fully decodes every file; undecodable or truncated files move to the
/// rejection log. Accepted entries keep their order. Corruption is data,
/// not failure: this never errors on bad images.
pub fn prune_corrupted(manifest: &DatasetManifest) -> (DatasetManifest, Vec<Rejection>) {
    let mut accepted = Vec::with_capacity(manifest.entries.len());
    let mut rejected = Vec::new();
    for entry in &manifest.entries {
        let full = manifest.root.join(&entry.path);
        let outcome = image::ImageReader::open(&full)
            .map_err(|e| e.to_string())
            .and_then(|r| {
                r.with_guessed_format()
                    .map_err(|e| e.to_string())?
                    .decode()
                    .map_err(|e| classify_decode_failure(&e))
            });
        match outcome {
            Ok(_) => accepted.push(entry.clone()),
            Err(reason) => rejected.push(Rejection {
                path: entry.path.clone(),
                reason,
            }),
        }
    }
    (
        DatasetManifest {
            root: manifest.root.clone(),
            entries: accepted,
            scanned_at: manifest.scanned_at,
        },
        rejected,
    )
}

// ---- splitting ----------------------------------------------------------------------

/// Integer apportionment: floor counts first, then leftovers to the largest
/// fractional remainders (ties to the earlier split).
pub fn largest_remainder(total: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..total.saturating_sub(assigned) {
        counts[order[i % 3]] += 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Assigns every accepted entry to train/val/test.
///
/// Entries named in `fixed` keep their provider-assigned split; the rest are
/// shuffled by the seeded generator and fill each split up to the
/// largest-remainder allocation of the ratios over the accepted total.
/// Deterministic for a fixed (manifest, seed).
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
    fixed: Option<&BTreeMap<String, Split>>,
    rejected: Vec<Rejection>,
) -> Result<SplitManifest, DataError> {
    let ratio_arr = [ratios.0, ratios.1, ratios.2];
    if ratio_arr.iter().any(|&r| r <= 0.0) || (ratio_arr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios(ratio_arr));
    }
    if let Some(fixed) = fixed {
        for path in fixed.keys() {
            if !manifest.entries.iter().any(|e| &e.path == path) {
                return Err(DataError::UnknownFixedPath(path.clone()));
            }
        }
    }

    let total = manifest.entries.len();
    let targets = largest_remainder(total, ratio_arr);

    let mut fixed_counts = [0usize; 3];
    let mut free_indices = Vec::with_capacity(total);
    let mut assignment: Vec<Option<Split>> = vec![None; total];
    for (i, entry) in manifest.entries.iter().enumerate() {
        match fixed.and_then(|f| f.get(&entry.path)) {
            Some(&split) => {
                let si = SPLITS.iter().position(|&s| s == split).unwrap();
                fixed_counts[si] += 1;
                assignment[i] = Some(split);
            }
            None => free_indices.push(i),
        }
    }
    for (si, split) in SPLITS.iter().enumerate() {
        if fixed_counts[si] > targets[si] {
            return Err(DataError::FixedOverflow {
                split: *split,
                have: fixed_counts[si],
                target: targets[si],
            });
        }
    }

    let mut rng = SplitMix64::new(derive_seed(seed, &[0x73706c6974]));
    rng.shuffle(&mut free_indices);
    let mut cursor = free_indices.into_iter();
    for (si, split) in SPLITS.iter().enumerate() {
        for _ in 0..targets[si] - fixed_counts[si] {
            let idx = cursor.next().expect("quotas sum to the free total");
            assignment[idx] = Some(*split);
        }
    }

    let entries = manifest
        .entries
        .iter()
        .zip(assignment)
        .map(|(e, split)| SplitEntry {
            path: e.path.clone(),
            label: e.label,
            split: split.expect("every entry assigned"),
        })
        .collect();
    Ok(SplitManifest {
        root: manifest.root.display().to_string(),
        seed,
        ratios: ratio_arr,
        entries,
        rejected,
    })
}

// ---- batching -------------------------------------------------------------------------

/// Seeded per-epoch shuffle into batches; every index appears exactly once.
/// The final short batch is kept unless `drop_last`.
pub fn make_batches(
    n_entries: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    drop_last: bool,
) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size == 0 {
        return Err(DataError::BadBatchSize);
    }
    if n_entries == 0 {
        return Err(DataError::EmptySplit);
    }
    let mut order: Vec<usize> = (0..n_entries).collect();
    let mut rng = SplitMix64::new(derive_seed(seed, &[0x6261746368, epoch as u64]));
    rng.shuffle(&mut order);
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .map(|chunk| chunk.to_vec())
        .collect();
    if drop_last
        && batches
            .last()
            .map(|b| b.len() < batch_size)
            .unwrap_or(false)
        && batches.len() > 1
    {
        batches.pop();
    }
    Ok(batches)
}

/// Loads a split's images into memory as normalized `channels x H x W`
/// tensors plus class indices.
pub fn load_entries(
    root: &Path,
    entries: &[&SplitEntry],
    channels: usize,
    target: (usize, usize),
) -> Result<(Vec<Tensor<f32>>, Vec<usize>), DataError> {
    let mut images = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    for entry in entries {
        images.push(load_and_resize(&root.join(&entry.path), target, channels)?);
        labels.push(entry.label.index());
    }
    Ok((images, labels))
}
