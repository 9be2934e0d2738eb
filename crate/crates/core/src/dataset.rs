//! Archive ingestion, preprocessing, the pre-train/train/val/test split and
//! batch sampling.
//!
//! The archive layout is one directory per dataset holding
//! `<name>_TRAIN.tsv` and `<name>_TEST.tsv`; every line is
//! `label<TAB>v1<TAB>v2...`, with trailing `NaN` fields padding
//! variable-length series. Both files are merged into a single pool per
//! dataset before splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng;

/// Standard deviation below which a series is treated as constant.
pub const CONSTANT_STD: f64 = 1e-8;

/// Smallest dataset that still yields at least one sample per split.
pub const MIN_SPLIT_SAMPLES: usize = 10;

/// One univariate series.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    /// Class index in `0..C`, absent for unlabeled (pre-training) samples.
    pub label: Option<usize>,
    pub dataset_id: String,
    /// Unique within the dataset.
    pub sample_id: String,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Merged pools keyed by dataset id.
pub type Archive = BTreeMap<String, Vec<TimeSeries>>;

struct RawRow {
    label: f64,
    values: Vec<f64>,
}

fn parse_ucr_file(path: &Path) -> Result<Vec<RawRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        let ingest = |message: String| Error::Ingest {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() < 2 {
            return Err(ingest(format!("expected a label and at least one value, found {} field(s)", fields.len())));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| ingest(format!("non-numeric field `{s}`")))
        };
        let label = parse(fields[0])?;
        if !label.is_finite() {
            return Err(ingest(format!("label `{}` is not finite", fields[0])));
        }
        let mut values = fields[1..].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?;
        while values.last().is_some_and(|v| v.is_nan()) {
            values.pop();
        }
        if values.is_empty() {
            return Err(ingest("series has no values".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(ingest(format!("non-finite value at position {}", pos + 1)));
        }
        rows.push(RawRow { label, values });
    }
    Ok(rows)
}

/// Loads every dataset under `root`, merging its train and test files.
///
/// Labels are remapped to `0..C` in ascending order of the original values.
pub fn load_archive(root: &Path) -> Result<Archive> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(format!("reading archive {}", root.display()), e))?;
    let mut dirs: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("reading archive {}", root.display()), e))?;
        if entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    let mut archive = Archive::new();
    for dir in dirs {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let train_path = dir.join(format!("{name}_TRAIN.tsv"));
        let test_path = dir.join(format!("{name}_TEST.tsv"));
        let train = parse_ucr_file(&train_path)?;
        let test = parse_ucr_file(&test_path)?;
        archive.insert(name.clone(), merge_pool(&name, train, test));
    }
    Ok(archive)
}

fn merge_pool(name: &str, train: Vec<RawRow>, test: Vec<RawRow>) -> Vec<TimeSeries> {
    let mut classes: Vec<f64> = train.iter().chain(&test).map(|r| r.label).collect();
    classes.sort_by(f64::total_cmp);
    classes.dedup();
    let class_of = |label: f64| classes.iter().position(|&c| c == label).unwrap();
    let tagged = train
        .into_iter()
        .enumerate()
        .map(|(i, r)| (format!("train-{i:05}"), r))
        .chain(test.into_iter().enumerate().map(|(i, r)| (format!("test-{i:05}"), r)));
    tagged
        .map(|(sample_id, r)| TimeSeries {
            label: Some(class_of(r.label)),
            values: r.values,
            dataset_id: name.to_string(),
            sample_id,
        })
        .collect()
}

/// Zero mean, unit population standard deviation; constant series map to zeros.
pub fn znormalize_values(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < CONSTANT_STD {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

pub fn znormalize(series: &TimeSeries) -> TimeSeries {
    TimeSeries {
        values: znormalize_values(&series.values),
        ..series.clone()
    }
}

/// Linear interpolation over the index axis to `target` samples.
///
/// Endpoints are reproduced exactly. A single-sample input can only be
/// "resampled" to length 1.
pub fn resample(values: &[f64], target: usize) -> Result<Vec<f64>> {
    let n = values.len();
    if n == target {
        return Ok(values.to_vec());
    }
    if n < 2 || target < 2 {
        return Err(Error::invalid(format!("cannot interpolate a length-{n} series to length {target}")));
    }
    let span = target - 1;
    Ok((0..target)
        .map(|i| {
            let num = i * (n - 1);
            let lo = num / span;
            let rem = num % span;
            if rem == 0 {
                values[lo]
            } else {
                let f = rem as f64 / span as f64;
                values[lo] * (1.0 - f) + values[lo + 1] * f
            }
        })
        .collect())
}

pub fn canonicalize_length(series: &TimeSeries, target_len: usize) -> Result<TimeSeries> {
    if target_len < 2 && series.len() != target_len {
        return Err(Error::invalid("target length must be at least 2"));
    }
    Ok(TimeSeries {
        values: resample(&series.values, target_len)?,
        ..series.clone()
    })
}

/// Lower median of the pool's lengths.
pub fn median_length(pool: &[TimeSeries]) -> usize {
    let mut lens: Vec<usize> = pool.iter().map(TimeSeries::len).collect();
    lens.sort_unstable();
    lens[(lens.len() - 1) / 2]
}

/// Resamples every dataset to its median length, then z-normalizes each series.
pub fn preprocess(archive: &Archive) -> Result<Archive> {
    let mut out = Archive::new();
    for (id, pool) in archive {
        if pool.is_empty() {
            out.insert(id.clone(), Vec::new());
            continue;
        }
        let target = median_length(pool).max(2);
        let mut series = Vec::with_capacity(pool.len());
        for s in pool {
            let s = if s.len() == 1 {
                // a lone sample has no slope; hold it constant
                TimeSeries {
                    values: vec![s.values[0]; target],
                    ..s.clone()
                }
            } else {
                canonicalize_length(s, target)?
            };
            series.push(znormalize(&s));
        }
        out.insert(id.clone(), series);
    }
    Ok(out)
}

/// `(pretrain, train, val, test)` sizes for a merged pool of `n` samples.
///
/// Half (rounded down) goes to pre-training; of the remainder `r`, val and
/// test get `floor(r / 5)` each and train keeps the rest.
pub fn split_counts(n: usize) -> (usize, usize, usize, usize) {
    let pretrain = n / 2;
    let rest = n - pretrain;
    let fifth = rest / 5;
    (pretrain, rest - 2 * fifth, fifth, fifth)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplit {
    pub pretrain: Vec<String>,
    pub test: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl DatasetSplit {
    pub fn total(&self) -> usize {
        self.pretrain.len() + self.train.len() + self.val.len() + self.test.len()
    }
}

/// Which sample lands in which split, for every dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub seed: u64,
    pub datasets: BTreeMap<String, DatasetSplit>,
}

#[derive(Serialize)]
struct ManifestBody<'a> {
    datasets: &'a BTreeMap<String, DatasetSplit>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    content_hash: String,
    datasets: BTreeMap<String, DatasetSplit>,
    seed: u64,
}

impl SplitManifest {
    /// SHA-256 of the compact JSON of `{datasets, seed}`.
    pub fn content_hash(&self) -> String {
        let body = ManifestBody {
            datasets: &self.datasets,
            seed: self.seed,
        };
        let bytes = serde_json::to_vec(&body).expect("manifest serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Pretty JSON with sorted keys and an embedded content hash.
    pub fn to_json(&self) -> String {
        let file = ManifestFile {
            content_hash: self.content_hash(),
            datasets: self.datasets.clone(),
            seed: self.seed,
        };
        let mut s = serde_json::to_string_pretty(&file).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ManifestFile = serde_json::from_str(text)?;
        let manifest = Self {
            seed: file.seed,
            datasets: file.datasets,
        };
        if manifest.content_hash() != file.content_hash {
            return Err(Error::Checkpoint("manifest content hash does not match its contents".into()));
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    /// Checks disjointness, coverage and split sizes against `archive`.
    pub fn validate(&self, archive: &Archive) -> Result<()> {
        for (id, pool) in archive {
            let split = self.datasets.get(id).ok_or_else(|| Error::Split {
                dataset: id.clone(),
                message: "missing from manifest".into(),
            })?;
            let fail = |message: String| Error::Split {
                dataset: id.clone(),
                message,
            };
            let mut seen = BTreeSet::new();
            for sid in split.pretrain.iter().chain(&split.train).chain(&split.val).chain(&split.test) {
                if !seen.insert(sid.as_str()) {
                    return Err(fail(format!("sample `{sid}` assigned twice")));
                }
            }
            let all: BTreeSet<&str> = pool.iter().map(|s| s.sample_id.as_str()).collect();
            if seen != all {
                return Err(fail("splits do not cover the merged pool exactly".into()));
            }
            let (p, tr, va, te) = split_counts(pool.len());
            if (split.pretrain.len(), split.train.len(), split.val.len(), split.test.len()) != (p, tr, va, te) {
                return Err(fail("split sizes violate the 50% / 3:1:1 rule".into()));
            }
        }
        Ok(())
    }
}

/// Shuffles each dataset with its own stream and cuts it into
/// pre-train / train / val / test.
pub fn make_splits(archive: &Archive, seed: u64) -> Result<SplitManifest> {
    let mut datasets = BTreeMap::new();
    for (id, pool) in archive {
        if pool.len() < MIN_SPLIT_SAMPLES {
            return Err(Error::Split {
                dataset: id.clone(),
                message: format!("{} samples, need at least {MIN_SPLIT_SAMPLES}", pool.len()),
            });
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut rng = rng::stream(seed, id);
        order.shuffle(&mut rng);
        let (p, tr, va, _) = split_counts(pool.len());
        let ids = |range: &[usize]| {
            let mut idx = range.to_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| pool[i].sample_id.clone()).collect::<Vec<_>>()
        };
        datasets.insert(
            id.clone(),
            DatasetSplit {
                pretrain: ids(&order[..p]),
                train: ids(&order[p..p + tr]),
                val: ids(&order[p + tr..p + tr + va]),
                test: ids(&order[p + tr + va..]),
            },
        );
    }
    Ok(SplitManifest { seed, datasets })
}

/// Unlabeled pre-training pools, one per dataset.
#[derive(Clone, Debug, Default)]
pub struct PretrainCorpus {
    pub datasets: BTreeMap<String, Vec<Vec<f64>>>,
}

impl PretrainCorpus {
    /// Pre-train samples named by `manifest`, with labels dropped.
    pub fn from_manifest(archive: &Archive, manifest: &SplitManifest) -> Result<Self> {
        let mut datasets = BTreeMap::new();
        for (id, split) in &manifest.datasets {
            let pool = archive.get(id).ok_or_else(|| Error::Split {
                dataset: id.clone(),
                message: "in manifest but not in archive".into(),
            })?;
            let rows = lookup(pool, id, &split.pretrain)?
                .into_iter()
                .map(|s| s.values)
                .collect();
            datasets.insert(id.clone(), rows);
        }
        Ok(Self { datasets })
    }

    pub fn total_samples(&self) -> usize {
        self.datasets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_samples() == 0
    }

    /// SHA-256 over dataset ids and sample values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (id, rows) in &self.datasets {
            h.update(id.as_bytes());
            h.update([0u8]);
            for r in rows {
                h.update((r.len() as u64).to_le_bytes());
                for v in r {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

fn lookup(pool: &[TimeSeries], dataset: &str, ids: &[String]) -> Result<Vec<TimeSeries>> {
    let by_id: BTreeMap<&str, &TimeSeries> = pool.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    ids.iter()
        .map(|sid| {
            by_id.get(sid.as_str()).map(|s| (*s).clone()).ok_or_else(|| Error::Split {
                dataset: dataset.to_string(),
                message: format!("sample `{sid}` not found in archive"),
            })
        })
        .collect()
}

/// A downstream classification task: one dataset's labeled splits.
#[derive(Clone, Debug)]
pub struct Task {
    pub id: String,
    /// Class count of the whole merged dataset, not just the train split.
    pub num_classes: usize,
    pub train: Vec<TimeSeries>,
    pub val: Vec<TimeSeries>,
    pub test: Vec<TimeSeries>,
}

impl Task {
    pub fn from_manifest(archive: &Archive, manifest: &SplitManifest, id: &str) -> Result<Self> {
        let split = manifest.datasets.get(id).ok_or_else(|| Error::UnknownTask(id.to_string()))?;
        let pool = archive.get(id).ok_or_else(|| Error::UnknownTask(id.to_string()))?;
        let num_classes = pool.iter().filter_map(|s| s.label).max().map_or(0, |m| m + 1);
        let task = Self {
            id: id.to_string(),
            num_classes,
            train: lookup(pool, id, &split.train)?,
            val: lookup(pool, id, &split.val)?,
            test: lookup(pool, id, &split.test)?,
        };
        let train_classes: BTreeSet<usize> = task.train.iter().filter_map(|s| s.label).collect();
        for s in task.val.iter().chain(&task.test) {
            if let Some(l) = s.label {
                if !train_classes.contains(&l) {
                    log::warn!("task {id}: class {l} appears in val/test but not in train");
                    break;
                }
            }
        }
        Ok(task)
    }

    pub fn series_len(&self) -> usize {
        self.train.first().map_or(0, TimeSeries::len)
    }
}

/// Equal-length rows from a single dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, L]`
    pub data: Tensor,
    pub lengths: Vec<usize>,
    pub labels: Option<Vec<usize>>,
    pub dataset_id: String,
}

impl Batch {
    pub fn from_rows(rows: &[Vec<f64>], labels: Option<Vec<usize>>, dataset_id: &str) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::Shape("batch rows must share one length".into()));
        }
        Ok(Self {
            data: Tensor::from_rows(rows),
            lengths: vec![len; rows.len()],
            labels,
            dataset_id: dataset_id.to_string(),
        })
    }

    pub fn size(&self) -> usize {
        self.data.dim(0)
    }

    pub fn series_len(&self) -> usize {
        self.data.dim(1)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.size()).map(|i| self.data.row(i).to_vec()).collect()
    }

    /// Short SHA-256 of the batch values, for diagnostics.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.data.to_le_bytes())[..8])
    }
}

/// Draws a dataset uniformly, then `batch_size` of its pre-train samples
/// without replacement (with replacement when the pool is smaller).
pub fn sample_pretrain_batch<R: Rng + ?Sized>(corpus: &PretrainCorpus, batch_size: usize, rng: &mut R) -> Result<Batch> {
    if batch_size < 2 {
        return Err(Error::invalid("contrastive batches need at least 2 rows"));
    }
    let ids: Vec<&String> = corpus.datasets.iter().filter(|(_, p)| !p.is_empty()).map(|(k, _)| k).collect();
    if ids.is_empty() {
        return Err(Error::invalid("pre-training corpus is empty"));
    }
    let id = ids[rng.random_range(0..ids.len())];
    let pool = &corpus.datasets[id];
    let picks: Vec<usize> = if pool.len() >= batch_size {
        index::sample(rng, pool.len(), batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.random_range(0..pool.len())).collect()
    };
    let rows: Vec<Vec<f64>> = picks.iter().map(|&i| pool[i].clone()).collect();
    Batch::from_rows(&rows, None, id)
}
