//! Supervised fine-tuning, model selection, evaluation and rank reports.

use std::cmp::Ordering;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbones::{build_with_layout, predict_logits, Ctx, EncoderBundle, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT};
use crate::dataset::{Batch, Task, TimeSeries};
use crate::error::{Error, Result};
use crate::losses::{self, graph as lg};
use crate::nn::{Adam, AdamConfig, Graph, Tensor};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    Random,
    Pretrained,
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitStrategy::Random => "random",
            InitStrategy::Pretrained => "pretrained",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            optimizer: AdamConfig::default(),
        }
    }
}

/// Exact `correct / total`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn value(self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

impl PartialEq for Accuracy {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Accuracy {}

impl PartialOrd for Accuracy {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Accuracy {
    fn cmp(&self, other: &Self) -> Ordering {
        let a = self.correct as u128 * other.total as u128;
        let b = other.correct as u128 * self.total as u128;
        a.cmp(&b)
    }
}

impl fmt::Display for Accuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.correct, self.total)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneLog {
    pub task: String,
    pub init: InitStrategy,
    pub seed: u64,
    /// Validation accuracy and loss before the first update.
    pub initial_val_acc: f64,
    pub initial_val_loss: f64,
    /// Epochs 1, 2, ... in order.
    pub epochs: Vec<EpochRecord>,
}

impl FineTuneLog {
    pub fn val_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_acc).collect()
    }
}

pub struct FineTuned {
    /// Weights of the best validation epoch.
    pub bundle: EncoderBundle,
    pub log: FineTuneLog,
    pub best_epoch: usize,
}

fn labeled_rows(split: &[TimeSeries]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut rows = Vec::with_capacity(split.len());
    let mut labels = Vec::with_capacity(split.len());
    for s in split {
        let label = s
            .label
            .ok_or_else(|| Error::invalid(format!("series {} has no label", s.sample_id)))?;
        rows.push(s.values.clone());
        labels.push(label);
    }
    Ok((rows, labels))
}

const EVAL_CHUNK: usize = 256;

/// Logits for `rows` in evaluation mode, computed in chunks.
fn logits(bundle: &EncoderBundle, rows: &[Vec<f64>]) -> Result<Tensor> {
    let c = bundle.num_classes.ok_or_else(|| Error::invalid("bundle has no classifier"))?;
    let mut data = Vec::with_capacity(rows.len() * c);
    for chunk in rows.chunks(EVAL_CHUNK) {
        let batch = Batch::from_rows(chunk, None, "eval")?;
        data.extend_from_slice(predict_logits(bundle, &batch)?.data());
    }
    Ok(Tensor::new(&[rows.len(), c], data))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn score(bundle: &EncoderBundle, split: &[TimeSeries]) -> Result<(Accuracy, f64)> {
    if split.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty split"));
    }
    let (rows, labels) = labeled_rows(split)?;
    let z = logits(bundle, &rows)?;
    let c = z.dim(1);
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(&z.data()[i * c..(i + 1) * c]) == l)
        .count();
    let loss = losses::cross_entropy(&z, &labels)?;
    Ok((
        Accuracy {
            correct,
            total: labels.len(),
        },
        loss,
    ))
}

/// Test accuracy of a classifier bundle. Never touches the weights.
pub fn evaluate(bundle: &EncoderBundle, split: &[TimeSeries]) -> Result<Accuracy> {
    Ok(score(bundle, split)?.0)
}

/// The bundle fine-tuning starts from: the pre-trained weights, or fresh
/// weights of the same architecture, with a new classifier either way.
pub fn initial_bundle(base: &EncoderBundle, init: InitStrategy, num_classes: usize, seed: u64) -> Result<EncoderBundle> {
    let mut bundle = match init {
        InitStrategy::Pretrained => {
            let mut b = base.clone();
            b.params.remove(CLASSIFIER_WEIGHT);
            b.params.remove(CLASSIFIER_BIAS);
            b.num_classes = None;
            b
        }
        InitStrategy::Random => {
            let mut b = build_with_layout(&base.config, base.layout, seed)?;
            b.provenance.method = "none".into();
            b
        }
    };
    bundle.add_classifier(num_classes, seed)?;
    Ok(bundle)
}

/// Trains encoder, projector and classifier end to end with cross-entropy
/// and keeps the weights of the best validation epoch (earliest on ties).
pub fn finetune(
    base: &EncoderBundle,
    init: InitStrategy,
    task: &Task,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FineTuned> {
    if task.train.is_empty() {
        return Err(Error::invalid(format!("task {} has an empty train split", task.id)));
    }
    if task.num_classes < 2 {
        return Err(Error::invalid(format!("task {} has fewer than 2 classes", task.id)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("fine-tune batch_size must be positive".into()));
    }
    let mut bundle = initial_bundle(base, init, task.num_classes, seed)?;
    let (rows, labels) = labeled_rows(&task.train)?;
    let (val_acc, val_loss) = score(&bundle, &task.val)?;
    let mut log = FineTuneLog {
        task: task.id.clone(),
        init,
        seed,
        initial_val_acc: val_acc.value(),
        initial_val_loss: val_loss,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut best: Option<(Accuracy, usize, crate::nn::ParamStore)> = None;
    let mut adam = Adam::new(cfg.optimizer);
    let batch = cfg.batch_size.min(rows.len());
    let key = format!("finetune/{}/{init}", task.id);
    for epoch in 1..=cfg.epochs {
        let mut r = rng::indexed_stream(seed, &key, epoch as u64);
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut r);
        let mut total_loss = 0.0;
        for idx in order.chunks(batch) {
            let x: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].clone()).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let inputs = bundle.tower_inputs(&x)?;
            let mut g = Graph::new();
            let p = bundle.params.bind(&mut g);
            let mut ctx = Ctx {
                rng: Some(&mut r),
                dropout: bundle.config.dropout,
            };
            let z = bundle.graph_logits(&mut g, &p, &inputs, None, &mut ctx);
            let loss = lg::cross_entropy(&mut g, z, &y);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite fine-tune loss on task {} epoch {epoch}",
                    task.id
                )));
            }
            total_loss += value * idx.len() as f64;
            let mut grads = g.backward(loss);
            let grads = p.collect(&mut grads, &bundle.params);
            adam.update(&mut bundle.params, &grads);
        }
        let (acc, vloss) = score(&bundle, &task.val)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: total_loss / rows.len() as f64,
            val_acc: acc.value(),
            val_loss: vloss,
        });
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, epoch, bundle.params.clone()));
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            bundle.params = params;
            epoch
        }
        None => 0,
    };
    Ok(FineTuned {
        bundle,
        log,
        best_epoch,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    pub epoch: usize,
    pub init: InitStrategy,
    pub val_acc: f64,
}

/// Best `(epoch, init)` by validation accuracy; ties go to the earlier
/// epoch, then to the pre-trained initialization. A log without epochs
/// offers its initial state as epoch 0.
pub fn select_model(logs: &[FineTuneLog]) -> Result<Selection> {
    let mut best: Option<Selection> = None;
    for log in logs {
        let candidates: Vec<(usize, f64)> = if log.epochs.is_empty() {
            vec![(0, log.initial_val_acc)]
        } else {
            log.epochs.iter().map(|e| (e.epoch, e.val_acc)).collect()
        };
        for (epoch, acc) in candidates {
            let cand = Selection {
                epoch,
                init: log.init,
                val_acc: acc,
            };
            let better = match &best {
                None => true,
                Some(b) => {
                    acc > b.val_acc
                        || (acc == b.val_acc
                            && (epoch < b.epoch
                                || (epoch == b.epoch
                                    && cand.init == InitStrategy::Pretrained
                                    && b.init == InitStrategy::Random)))
                }
            };
            if better {
                best = Some(cand);
            }
        }
    }
    best.ok_or_else(|| Error::invalid("model selection needs at least one fine-tune log"))
}

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub task: String,
    pub method: String,
    pub accuracy_num: usize,
    pub accuracy_den: usize,
    pub epoch: Option<usize>,
    pub init: Option<InitStrategy>,
}

impl RunResult {
    pub fn accuracy(&self) -> Accuracy {
        Accuracy {
            correct: self.accuracy_num,
            total: self.accuracy_den,
        }
    }
}

pub fn write_results(path: &Path, rows: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_results(path: &Path) -> Result<Vec<RunResult>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub datasets: Vec<String>,
    /// `ranks[m][d]`, 1 = best.
    pub ranks: Vec<Vec<f64>>,
    pub mean_ranks: Vec<f64>,
}

/// Ranks methods per dataset (higher accuracy ranks lower; ties share the
/// mean of their positions) and averages over datasets.
pub fn average_rank<T: PartialOrd + Copy>(
    methods: &[String],
    datasets: &[String],
    acc: &[Vec<Option<T>>],
) -> Result<RankTable> {
    if methods.is_empty() || datasets.is_empty() {
        return Err(Error::invalid("rank table needs at least one method and one dataset"));
    }
    if acc.len() != methods.len() || acc.iter().any(|r| r.len() != datasets.len()) {
        return Err(Error::Shape("accuracy matrix does not match methods × datasets".into()));
    }
    let mut missing = Vec::new();
    for (m, row) in acc.iter().enumerate() {
        for (d, v) in row.iter().enumerate() {
            if v.is_none() {
                missing.push(format!("({}, {})", methods[m], datasets[d]));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteResults(missing.len(), missing.join(", ")));
    }
    let mm = methods.len();
    let mut ranks = vec![vec![0.0; datasets.len()]; mm];
    for d in 0..datasets.len() {
        let col: Vec<T> = acc.iter().map(|r| r[d].expect("checked")).collect();
        for m in 0..mm {
            let better = col.iter().filter(|v| **v > col[m]).count();
            let equal = col.iter().filter(|v| **v == col[m]).count();
            if better + equal + col.iter().filter(|v| **v < col[m]).count() != mm {
                return Err(Error::invalid(format!("unordered accuracy on dataset {}", datasets[d])));
            }
            // positions better+1 ..= better+equal
            ranks[m][d] = better as f64 + (equal as f64 + 1.0) / 2.0;
        }
    }
    let mean_ranks = ranks.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    Ok(RankTable {
        methods: methods.to_vec(),
        datasets: datasets.to_vec(),
        ranks,
        mean_ranks,
    })
}

/// Builds the methods × datasets matrix from result rows.
pub fn accuracy_matrix(results: &[RunResult]) -> (Vec<String>, Vec<String>, Vec<Vec<Option<Accuracy>>>) {
    let mut methods: Vec<String> = results.iter().map(|r| r.method.clone()).collect();
    let mut datasets: Vec<String> = results.iter().map(|r| r.task.clone()).collect();
    methods.sort();
    methods.dedup();
    datasets.sort();
    datasets.dedup();
    let mut acc = vec![vec![None; datasets.len()]; methods.len()];
    for r in results {
        let m = methods.binary_search(&r.method).expect("collected");
        let d = datasets.binary_search(&r.task).expect("collected");
        acc[m][d] = Some(r.accuracy());
    }
    (methods, datasets, acc)
}

/// Mean absolute difference between successive values.
pub fn smoothness(curve: &[f64]) -> f64 {
    if curve.len() < 2 {
        return 0.0;
    }
    curve.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (curve.len() - 1) as f64
}

#[derive(Serialize, Deserialize)]
struct CurveRow {
    epoch: usize,
    train_loss: f64,
    val_acc: f64,
    val_loss: f64,
    init_strategy: InitStrategy,
}

/// Writes `<stem>.csv` and `<stem>.svg` under `dir` and returns the smoothness of the validation curve.
pub fn export_convergence(log: &FineTuneLog, dir: &Path, stem: &str) -> Result<f64> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::invalid(format!("{}: {e}", csv_path.display())))?;
    for e in &log.epochs {
        w.serialize(CurveRow {
            epoch: e.epoch,
            train_loss: e.train_loss,
            val_acc: e.val_acc,
            val_loss: e.val_loss,
            init_strategy: log.init,
        })?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;
    let svg = line_plot(&[(log.init.to_string(), log.val_curve())], &format!("{} validation accuracy", log.task));
    let svg_path = dir.join(format!("{stem}.svg"));
    std::fs::write(&svg_path, svg).map_err(|e| Error::io(format!("writing {}", svg_path.display()), e))?;
    Ok(smoothness(&log.val_curve()))
}

/// Reads a convergence CSV back into epoch records and the strategy.
pub fn read_convergence(path: &Path) -> Result<(Vec<EpochRecord>, Option<InitStrategy>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    let mut init = None;
    for row in r.deserialize::<CurveRow>() {
        let row = row?;
        init = Some(row.init_strategy);
        out.push(EpochRecord {
            epoch: row.epoch,
            train_loss: row.train_loss,
            val_acc: row.val_acc,
            val_loss: row.val_loss,
        });
    }
    Ok((out, init))
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Minimal SVG line chart of curves on `[0, 1]`, x = epoch index from 1.
pub fn line_plot(series: &[(String, Vec<f64>)], title: &str) -> String {
    let (w, h, pad) = (480.0, 300.0, 40.0);
    let n = series.iter().map(|(_, c)| c.len()).max().unwrap_or(0).max(2);
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v.clamp(0.0, 1.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{pad}" y="20" font-size="13">{title}</text>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
    for (k, (name, curve)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = curve.iter().enumerate().map(|(i, v)| format!("{:.1},{:.1}", x(i), y(*v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{name}</text>"#,
            w - pad - 80.0,
            pad + 14.0 * k as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Wins, ties and losses of `a` against `b` over the datasets both report.
pub fn win_tie_loss(a: &[Option<Accuracy>], b: &[Option<Accuracy>]) -> (usize, usize, usize) {
    let mut out = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        if let (Some(x), Some(y)) = (x, y) {
            match x.cmp(y) {
                Ordering::Greater => out.0 += 1,
                Ordering::Equal => out.1 += 1,
                Ordering::Less => out.2 += 1,
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(init: InitStrategy, accs: &[f64]) -> FineTuneLog {
        FineTuneLog {
            task: "t".into(),
            init,
            seed: 0,
            initial_val_acc: 0.0,
            initial_val_loss: 0.0,
            epochs: accs
                .iter()
                .enumerate()
                .map(|(i, &a)| EpochRecord {
                    epoch: i + 1,
                    train_loss: 0.0,
                    val_acc: a,
                    val_loss: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn selection_rules() {
        let s = select_model(&[log(InitStrategy::Random, &[0.1, 0.2, 0.3])]).unwrap();
        assert_eq!((s.epoch, s.init), (3, InitStrategy::Random));
        let s = select_model(&[log(InitStrategy::Random, &[0.85]), log(InitStrategy::Pretrained, &[0.9])]).unwrap();
        assert_eq!(s.init, InitStrategy::Pretrained);
        let s = select_model(&[log(InitStrategy::Random, &[0.5, 0.7]), log(InitStrategy::Pretrained, &[0.4, 0.7])]).unwrap();
        assert_eq!((s.epoch, s.init), (2, InitStrategy::Pretrained));
        assert!(select_model(&[]).is_err());
    }

    #[test]
    fn accuracy_is_exact() {
        let a = Accuracy { correct: 1, total: 3 };
        let b = Accuracy { correct: 2, total: 6 };
        assert_eq!(a, b);
        assert!(Accuracy { correct: 2, total: 5 } > a);
    }

    #[test]
    fn smoothness_cases() {
        assert_eq!(smoothness(&[0.5; 6]), 0.0);
        let alt: Vec<f64> = (0..11).map(|i| (i % 2) as f64).collect();
        assert_eq!(smoothness(&alt), 1.0);
    }

    #[test]
    fn missing_entries_rejected() {
        let m = vec!["a".to_string(), "b".to_string()];
        let d = vec!["x".to_string()];
        assert!(average_rank(&m, &d, &[vec![Some(0.5)], vec![None]]).is_err());
    }
}
