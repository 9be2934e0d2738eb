//! Self-supervised pre-training over the multi-domain corpus.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    apply, mix, sample_params, sample_scale_negate_view, sample_timeclr_view, AugKind, AugmentConfig,
};
use crate::backbones::{
    build_with_layout, frequency_input, Checkpoint, Ctx, EncoderBundle, EncoderConfig, Layout, OutputMode,
};
use crate::dataset::{sample_pretrain_batch, Batch, PretrainCorpus};
use crate::error::{Error, Result};
use crate::losses::{graph as lg, Denominator, TfcWeights};
use crate::nn::{Adam, AdamConfig, Bound, Graph, Tensor, Var};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    SimClr,
    Ts2Vec,
    MixingUp,
    Tfc,
    TimeClr,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::SimClr, Method::Ts2Vec, Method::MixingUp, Method::Tfc, Method::TimeClr];

    pub fn name(self) -> &'static str {
        match self {
            Method::SimClr => "simclr",
            Method::Ts2Vec => "ts2vec",
            Method::MixingUp => "mixingup",
            Method::Tfc => "tfc",
            Method::TimeClr => "timeclr",
        }
    }

    pub fn default_temperature(self) -> f64 {
        match self {
            Method::Tfc => 0.2,
            _ => 0.5,
        }
    }

    pub fn layout(self) -> Layout {
        match self {
            Method::Tfc => Layout::TimeFrequency,
            _ => Layout::Single,
        }
    }

    pub fn output_mode(self) -> OutputMode {
        match self {
            Method::Ts2Vec => OutputMode::PerStep,
            _ => OutputMode::Pooled,
        }
    }

    pub fn width_scale(self) -> f64 {
        match self {
            Method::Tfc => 0.5,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(&key))
            .ok_or_else(|| {
                Error::invalid(format!("unknown method `{s}` (expected simclr, ts2vec, mixingup, tfc or timeclr)"))
            })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Method default when absent.
    pub temperature: Option<f64>,
    pub denominator: Denominator,
    pub tfc_weights: TfcWeights,
    /// TS2Vec hierarchy depth cap; halves down to one step when absent.
    pub max_levels: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub method: Method,
    pub encoder: EncoderConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// `ceil(corpus size / batch size)` when absent.
    pub steps_per_epoch: Option<usize>,
    pub optimizer: AdamConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self::for_method(Method::TimeClr, EncoderConfig::default())
    }
}

impl PretrainConfig {
    /// Defaults for `method`, with the encoder mode and width scale it requires.
    pub fn for_method(method: Method, mut encoder: EncoderConfig) -> Self {
        encoder.output_mode = method.output_mode();
        encoder.width_scale = method.width_scale();
        Self {
            method,
            encoder,
            batch_size: 128,
            epochs: 200,
            steps_per_epoch: None,
            optimizer: AdamConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.loss.temperature.unwrap_or_else(|| self.method.default_temperature())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.augment.validate()?;
        if self.encoder.output_mode != self.method.output_mode() {
            return Err(Error::Config(format!(
                "{} needs {:?} encoder output",
                self.method,
                self.method.output_mode()
            )));
        }
        if self.encoder.width_scale != self.method.width_scale() {
            return Err(Error::Config(format!(
                "{} needs width_scale {}",
                self.method,
                self.method.width_scale()
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        let tau = self.temperature();
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        if !(self.optimizer.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// One row of `pretrain_log.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub dataset_id: String,
    pub loss: f64,
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Runs one graph, back-propagates and applies an optimizer update.
fn optimize(
    bundle: &mut EncoderBundle,
    adam: &mut Adam,
    f: impl FnOnce(&mut Graph, &Bound) -> Var,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = bundle.params.bind(&mut g);
    let loss = f(&mut g, &p);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let mut grads = g.backward(loss);
    let grads = p.collect(&mut grads, &bundle.params);
    adam.update(&mut bundle.params, &grads);
    if !bundle.params.all_finite() {
        return Err(Error::Numeric("weights became non-finite after an update".into()));
    }
    Ok(value)
}

fn stack(a: &[Vec<f64>], b: &[Vec<f64>]) -> Tensor {
    let rows: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    Tensor::from_rows(&rows)
}

/// Projected pooled features of the stacked views `[2B or 3B, L]`, split into groups of `b` rows.
fn pooled_groups<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Bound,
    bundle: &EncoderBundle,
    x: Tensor,
    b: usize,
    rng: &mut R,
) -> Vec<Var> {
    let mut ctx = Ctx {
        rng: Some(rng),
        dropout: bundle.config.dropout,
    };
    let h = bundle.graph_features(g, p, &[x], OutputMode::Pooled, None, &mut ctx);
    let z = bundle.graph_project(g, p, &h);
    let n = g.shape(z)[0] / b;
    (0..n).map(|i| g.narrow(z, 0, i * b, b)).collect()
}

fn contrast_views<R: Rng + ?Sized>(
    bundle: &mut EncoderBundle,
    adam: &mut Adam,
    v0: &[Vec<f64>],
    v1: &[Vec<f64>],
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<f64> {
    let b = v0.len();
    let x = stack(v0, v1);
    let tau = cfg.temperature();
    let denom = cfg.loss.denominator;
    let snapshot = bundle.clone();
    optimize(bundle, adam, |g, p| {
        let z = pooled_groups(g, p, &snapshot, x, b, rng);
        lg::nt_xent(g, z[0], z[1], tau, denom)
    })
}

fn check_batch(batch: &Batch) -> Result<()> {
    if batch.size() < 2 {
        return Err(Error::invalid("contrastive steps need at least 2 series"));
    }
    if !batch.data.is_finite() {
        return Err(Error::invalid("batch contains non-finite values"));
    }
    Ok(())
}

/// Two scale-and-negate views per series, contrasted with NT-Xent.
pub fn simclr_step<R: Rng + ?Sized>(
    bundle: &mut EncoderBundle,
    adam: &mut Adam,
    batch: &Batch,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<f64> {
    check_batch(batch)?;
    let rows = batch.rows();
    let mut v0 = Vec::with_capacity(rows.len());
    let mut v1 = Vec::with_capacity(rows.len());
    for r in &rows {
        v0.push(sample_scale_negate_view(r, &cfg.augment, rng)?.0);
        v1.push(sample_scale_negate_view(r, &cfg.augment, rng)?.0);
    }
    contrast_views(bundle, adam, &v0, &v1, cfg, rng)
}

/// Two single-augmentation views per series and the kinds drawn, view 0 then view 1.
pub fn timeclr_views<R: Rng + ?Sized>(
    rows: &[Vec<f64>],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<[AugKind; 2]>)> {
    let mut v0 = Vec::with_capacity(rows.len());
    let mut v1 = Vec::with_capacity(rows.len());
    let mut kinds = Vec::with_capacity(rows.len());
    for r in rows {
        let (a, sa) = sample_timeclr_view(r, cfg, rng)?;
        let (b, sb) = sample_timeclr_view(r, cfg, rng)?;
        v0.push(a);
        v1.push(b);
        kinds.push([sa.kind(), sb.kind()]);
    }
    Ok((v0, v1, kinds))
}

/// SimCLR with views from the single-augmentation pool.
pub fn timeclr_step<R: Rng + ?Sized>(
    bundle: &mut EncoderBundle,
    adam: &mut Adam,
    batch: &Batch,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<f64> {
    check_batch(batch)?;
    let (v0, v1, _) = timeclr_views(&batch.rows(), &cfg.augment, rng)?;
    contrast_views(bundle, adam, &v0, &v1, cfg, rng)
}

/// Two overlapping crops of a length-`len` series.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropPair {
    /// `[start, end)` of view 0.
    pub view0: (usize, usize),
    /// `[start, end)` of view 1.
    pub view1: (usize, usize),
    /// `[start, end)` shared by both.
    pub overlap: (usize, usize),
}

/// Samples a crop pair whose overlap is at least two samples long and
/// starts an even number of samples into view 0, so stride-2 steps align.
pub fn sample_crop_pair<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<CropPair> {
    if len < 2 {
        return Err(Error::invalid(format!("cannot crop a series of length {len}")));
    }
    let crop = rng.random_range(2..=len);
    let left = rng.random_range(0..=len - crop);
    let right = left + crop;
    let eleft = left - 2 * rng.random_range(0..=left / 2);
    let eright = rng.random_range(right..=len);
    Ok(CropPair {
        view0: (eleft, right),
        view1: (left, eright),
        overlap: (left, right),
    })
}

/// Feature-step range covered by input range `[start, end)` after the stride-2 stem.
pub fn feature_range(start: usize, end: usize) -> (usize, usize) {
    (start.div_ceil(2), end.div_ceil(2))
}

/// Contextual-consistency step on per-step features.
pub fn ts2vec_step<R: Rng + ?Sized>(
    bundle: &mut EncoderBundle,
    adam: &mut Adam,
    batch: &Batch,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<f64> {
    check_batch(batch)?;
    if bundle.config.output_mode != OutputMode::PerStep {
        return Err(Error::invalid("TS2Vec needs a per-step encoder"));
    }
    let len = batch.series_len();
    let pair = sample_crop_pair(len, rng)?;
    let (len0, len1) = (pair.view0.1 - pair.view0.0, pair.view1.1 - pair.view1.0);
    // One shift per row, keeping every crop inside the series.
    let lo = -(pair.view0.0.min(pair.view1.0) as i64);
    let hi = (len - pair.view0.1.max(pair.view1.1)) as i64;
    let rows = batch.rows();
    let mut a = Vec::with_capacity(rows.len());
    let mut b = Vec::with_capacity(rows.len());
    for r in &rows {
        let shift = rng.random_range(lo..=hi);
        let at = |s: usize| (s as i64 + shift) as usize;
        a.push(r[at(pair.view0.0)..at(pair.view0.0) + len0].to_vec());
        b.push(r[at(pair.view1.0)..at(pair.view1.0) + len1].to_vec());
    }
    let overlap = pair.overlap.1 - pair.overlap.0;
    let start0 = (pair.overlap.0 - pair.view0.0) / 2;
    let steps = overlap.div_ceil(2);
    let tau = cfg.temperature();
    let levels = cfg.loss.max_levels;
    let dropout = bundle.config.dropout;
    let snapshot = bundle.clone();
    let xa = Tensor::from_rows(&a);
    let xb = Tensor::from_rows(&b);
    optimize(bundle, adam, |g, p| {
        let mut ctx = Ctx { rng: Some(rng), dropout };
        let ha = snapshot.graph_features(g, p, &[xa], OutputMode::PerStep, None, &mut ctx);
        let hb = snapshot.graph_features(g, p, &[xb], OutputMode::PerStep, None, &mut ctx);
        let za = snapshot.graph_project(g, p, &ha);
        let zb = snapshot.graph_project(g, p, &hb);
        let za = g.narrow(za, 1, start0, steps);
        let zb = g.narrow(zb, 1, 0, steps);
        lg::ts2vec_loss(g, za, zb, tau, levels)
    })
}

/// A uniformly random permutation of `0..n` without fixed points.
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::invalid("a derangement needs at least 2 elements"));
    }
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return Ok(p);
        }
    }
}

/// Predicts each mixture's weight from its two sources.
pub fn mixingup_step<R: Rng + ?Sized>(
    bundle: &mut EncoderBundle,
    adam: &mut Adam,
    batch: &Batch,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<f64> {
    check_batch(batch)?;
    let rows = batch.rows();
    let partner = derangement(rows.len(), rng)?;
    let mut xi = Vec::with_capacity(rows.len());
    let mut xj = Vec::with_capacity(rows.len());
    let mut xk = Vec::with_capacity(rows.len());
    let mut lambda = Vec::with_capacity(rows.len());
    for (i, &j) in partner.iter().enumerate() {
        let m = mix(&rows[i], &rows[j], None, cfg.augment.mix_alpha, rng)?;
        lambda.push(m.lambda);
        xi.push(m.x_i);
        xj.push(m.x_j);
        xk.push(m.x_k);
    }
    let b = rows.len();
    let all: Vec<&Vec<f64>> = xi.iter().chain(&xj).chain(&xk).collect();
    let x = Tensor::from_rows(&all);
    let tau = cfg.temperature();
    let snapshot = bundle.clone();
    optimize(bundle, adam, |g, p| {
        let z = pooled_groups(g, p, &snapshot, x, b, rng);
        lg::mixing_loss(g, z[0], z[1], z[2], &lambda, tau)
    })
}

/// Time and frequency towers with a cross-domain consistency term.
pub fn tfc_step<R: Rng + ?Sized>(
    bundle: &mut EncoderBundle,
    adam: &mut Adam,
    batch: &Batch,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<f64> {
    check_batch(batch)?;
    if bundle.layout != Layout::TimeFrequency {
        return Err(Error::invalid("TF-C needs a time/frequency tower pair"));
    }
    let rows = batch.rows();
    let len = batch.series_len();
    let mut jittered = Vec::with_capacity(rows.len());
    let mut spec0 = Vec::with_capacity(rows.len());
    let mut spec1 = Vec::with_capacity(rows.len());
    for r in &rows {
        let j = sample_params(AugKind::Jitter, len, &cfg.augment, rng)?;
        jittered.push(apply(r, &j)?);
        let f = sample_params(AugKind::FreqPerturb, len, &cfg.augment, rng)?;
        spec0.push(frequency_input(r)?);
        spec1.push(frequency_input(&apply(r, &f)?)?);
    }
    let b = rows.len();
    let time = stack(&rows, &jittered);
    let freq = stack(&spec0, &spec1);
    let tau = cfg.temperature();
    let (weights, denom) = (cfg.loss.tfc_weights, cfg.loss.denominator);
    let dropout = bundle.config.dropout;
    let snapshot = bundle.clone();
    optimize(bundle, adam, |g, p| {
        let mut ctx = Ctx { rng: Some(rng), dropout };
        let towers = snapshot.towers();
        let h = snapshot.graph_features(g, p, &[time, freq], OutputMode::Pooled, None, &mut ctx);
        let zt = towers[0].project(g, p, h[0]);
        let zf = towers[1].project(g, p, h[1]);
        let t0 = g.narrow(zt, 0, 0, b);
        let t1 = g.narrow(zt, 0, b, b);
        let f0 = g.narrow(zf, 0, 0, b);
        let f1 = g.narrow(zf, 0, b, b);
        lg::tfc_loss(g, [t0, t1, f0, f1], tau, weights, denom)
    })
}

/// Dispatches to the step of `cfg.method`.
pub fn step<R: Rng + ?Sized>(
    bundle: &mut EncoderBundle,
    adam: &mut Adam,
    batch: &Batch,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<f64> {
    match cfg.method {
        Method::SimClr => simclr_step(bundle, adam, batch, cfg, rng),
        Method::TimeClr => timeclr_step(bundle, adam, batch, cfg, rng),
        Method::Ts2Vec => ts2vec_step(bundle, adam, batch, cfg, rng),
        Method::MixingUp => mixingup_step(bundle, adam, batch, cfg, rng),
        Method::Tfc => tfc_step(bundle, adam, batch, cfg, rng),
    }
}

/// A fresh encoder and optimizer for `cfg`.
pub fn init_checkpoint(cfg: &PretrainConfig, corpus: &PretrainCorpus) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut bundle = build_with_layout(&cfg.encoder, cfg.method.layout(), cfg.seed)?;
    bundle.provenance.method = cfg.method.name().to_string();
    bundle.provenance.corpus_hash = corpus.content_hash();
    let mut ckpt = Checkpoint::new(bundle);
    ckpt.optimizer = Some(Adam::new(cfg.optimizer));
    ckpt.extra = serde_json::to_value(cfg)?;
    Ok(ckpt)
}

/// Batch size actually drawn: capped by the smallest non-empty pool.
pub fn effective_batch_size(cfg: &PretrainConfig, corpus: &PretrainCorpus) -> usize {
    let smallest = corpus.datasets.values().map(Vec::len).filter(|&n| n > 0).min().unwrap_or(0);
    cfg.batch_size.min(smallest)
}

pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    /// Rows for the epochs run by this call.
    pub log: Vec<LogRow>,
}

/// Trains until `cfg.epochs` epochs are done, starting from `resume` when given.
///
/// Each epoch draws from its own generator, so resuming after epoch `k`
/// reproduces an uninterrupted run exactly.
pub fn pretrain(cfg: &PretrainConfig, corpus: &PretrainCorpus, resume: Option<Checkpoint>) -> Result<PretrainOutput> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("pre-training corpus is empty"));
    }
    let batch_size = effective_batch_size(cfg, corpus);
    if batch_size < 2 {
        return Err(Error::invalid("every corpus dataset needs at least 2 pre-train samples"));
    }
    if batch_size < cfg.batch_size {
        log::info!("batch size capped at {batch_size} by the smallest pre-train pool");
    }
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| corpus.total_samples().div_ceil(batch_size));
    let mut ckpt = match resume {
        Some(c) => {
            if c.bundle.provenance.method != cfg.method.name() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was trained with {}, not {}",
                    c.bundle.provenance.method, cfg.method
                )));
            }
            if c.bundle.config != cfg.encoder {
                return Err(Error::Checkpoint("checkpoint encoder config differs from the run config".into()));
            }
            c
        }
        None => init_checkpoint(cfg, corpus)?,
    };
    let mut adam = ckpt.optimizer.take().unwrap_or_else(|| Adam::new(cfg.optimizer));
    adam.config = cfg.optimizer;
    let mut log_rows = Vec::new();
    let key = format!("pretrain/{}", cfg.method);
    for epoch in ckpt.state.epochs_done..cfg.epochs {
        let mut rng = rng::indexed_stream(cfg.seed, &key, epoch as u64);
        let mut sum = 0.0;
        for _ in 0..steps {
            let batch = sample_pretrain_batch(corpus, batch_size, &mut rng)?;
            let step_no = ckpt.state.steps_done;
            let loss = step(&mut ckpt.bundle, &mut adam, &batch, cfg, &mut rng).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!(
                    "{m} at step {step_no} (epoch {epoch}, dataset {}, batch {})",
                    batch.dataset_id,
                    batch.hash()
                )),
                other => other,
            })?;
            sum += loss;
            log_rows.push(LogRow {
                step: step_no,
                epoch,
                dataset_id: batch.dataset_id.clone(),
                loss,
            });
            ckpt.state.steps_done += 1;
        }
        ckpt.state.epochs_done = epoch + 1;
        log::info!("{} epoch {}: mean loss {:.5}", cfg.method, epoch + 1, sum / steps as f64);
    }
    ckpt.bundle.provenance.epochs = ckpt.state.epochs_done;
    ckpt.optimizer = Some(adam);
    ckpt.extra = serde_json::to_value(cfg)?;
    Ok(PretrainOutput {
        checkpoint: ckpt,
        log: log_rows,
    })
}
