//! Encoder architectures, heads and checkpoints.
//!
//! Every encoder starts with a stride-2 convolution stem and ends with a
//! width→width linear layer. The projector and classifier sit on top.
//! Parameters live in a flat [`ParamStore`] keyed by dotted names; the
//! two-tower time/frequency layout prefixes each tower with `time.` or
//! `freq.`.

mod arch;
mod checkpoint;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub(crate) use arch::{Ctx, Tower};
pub use checkpoint::{Checkpoint, TrainState, CHECKPOINT_MAGIC};

use crate::augment::transforms::magnitude_spectrum;
use crate::dataset::{resample, Batch};
use crate::error::{Error, Result};
use crate::nn::{init_normal, init_orthogonal, init_uniform, Bound, Graph, ParamStore, Tensor, Var};
use crate::rng::{self, Rng};
use arch::Init;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Lstm,
    Gru,
    #[serde(rename = "resnet")]
    ResNet,
    Transformer,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Lstm, Arch::Gru, Arch::ResNet, Arch::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Lstm => "lstm",
            Arch::Gru => "gru",
            Arch::ResNet => "resnet",
            Arch::Transformer => "transformer",
        }
    }

    pub fn default_layers(self) -> usize {
        match self {
            Arch::Lstm | Arch::Gru => 2,
            Arch::ResNet => 3,
            Arch::Transformer => 4,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown backbone `{s}` (expected lstm, gru, resnet or transformer)")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    #[default]
    Pooled,
    PerStep,
}

/// One encoder, or a time-domain and a frequency-domain tower side by side.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    Single,
    TimeFrequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub arch: Arch,
    pub width: usize,
    pub heads: usize,
    /// Per-arch default when absent.
    pub layers: Option<usize>,
    pub output_mode: OutputMode,
    /// Fraction of the full-width parameter budget given to each tower.
    pub width_scale: f64,
    pub dropout: f64,
    pub ff_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Transformer,
            width: 64,
            heads: 8,
            layers: None,
            output_mode: OutputMode::Pooled,
            width_scale: 1.0,
            dropout: 0.1,
            ff_mult: 4,
        }
    }
}

impl EncoderConfig {
    pub fn new(arch: Arch) -> Self {
        Self { arch, ..Self::default() }
    }

    pub fn depth(&self) -> usize {
        self.layers.unwrap_or_else(|| self.arch.default_layers())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width < 2 || self.width % 2 != 0 {
            return bad(format!("width must be even and at least 2, got {}", self.width));
        }
        if self.depth() == 0 {
            return bad("layers must be positive".into());
        }
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return bad(format!("width_scale must lie in (0, 1], got {}", self.width_scale));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.ff_mult == 0 {
            return bad("ff_mult must be positive".into());
        }
        if self.arch == Arch::Transformer {
            if self.heads == 0 || self.width % self.heads != 0 {
                return bad(format!("width {} is not divisible by heads {}", self.width, self.heads));
            }
            if (self.width / self.heads) == 0 {
                return bad("attention dimension is zero".into());
            }
        }
        Ok(())
    }

    /// Per-head attention dimension of a full-width Transformer.
    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }

    fn tower(&self, prefix: &str, width: usize, heads: usize) -> Tower {
        Tower {
            prefix: prefix.to_string(),
            arch: self.arch,
            width,
            heads,
            layers: self.depth(),
            ff_mult: self.ff_mult,
        }
    }

    /// Width and head count of one tower.
    ///
    /// At `width_scale` 1 this is `(width, heads)`. Otherwise the head count
    /// scales linearly and the width is the multiple of the head count (and of
    /// 2) whose tower parameter count is closest to `width_scale` times the
    /// full-width count.
    pub fn tower_geometry(&self) -> (usize, usize) {
        if self.width_scale == 1.0 {
            return (self.width, self.heads);
        }
        let heads = match self.arch {
            Arch::Transformer => ((self.heads as f64 * self.width_scale).round() as usize).max(1),
            _ => self.heads,
        };
        let step = match self.arch {
            Arch::Transformer => lcm(heads, 2),
            _ => 2,
        };
        let target = self.width_scale * self.tower("", self.width, self.heads).num_params() as f64;
        let mut best = (step, f64::INFINITY);
        let mut w = step;
        while w <= self.width {
            let gap = (self.tower("", w, heads).num_params() as f64 - target).abs();
            if gap < best.1 {
                best = (w, gap);
            }
            w += step;
        }
        (best.0, heads)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    let (mut x, mut y) = (a, b);
    while y != 0 {
        (x, y) = (y, x % y);
    }
    a / x * b
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub method: String,
    pub seed: u64,
    pub corpus_hash: String,
    pub epochs: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderBundle {
    pub config: EncoderConfig,
    pub layout: Layout,
    pub params: ParamStore,
    pub num_classes: Option<usize>,
    pub provenance: Provenance,
}

pub const CLASSIFIER_WEIGHT: &str = "classifier.w";
pub const CLASSIFIER_BIAS: &str = "classifier.b";

/// A fresh single-tower encoder with projector.
pub fn build_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderBundle> {
    build_with_layout(config, Layout::Single, seed)
}

/// A fresh encoder with the given tower layout.
pub fn build_with_layout(config: &EncoderConfig, layout: Layout, seed: u64) -> Result<EncoderBundle> {
    config.validate()?;
    if layout == Layout::TimeFrequency && config.width_scale == 1.0 {
        log::warn!("two-tower encoder built at full width per tower");
    }
    let mut bundle = EncoderBundle {
        config: config.clone(),
        layout,
        params: ParamStore::new(),
        num_classes: None,
        provenance: Provenance {
            seed,
            ..Provenance::default()
        },
    };
    for tower in bundle.towers() {
        let mut rng = rng::stream(seed, &format!("init/{}", tower.prefix));
        for spec in tower.param_specs() {
            let t = init_tensor(&mut rng, &spec.shape, spec.init);
            bundle.params.insert(spec.name, t);
        }
    }
    Ok(bundle)
}

fn init_tensor(rng: &mut Rng, shape: &[usize], init: Init) -> Tensor {
    match init {
        Init::Uniform { fan_in } => init_uniform(rng, shape, fan_in),
        Init::Orthogonal => init_orthogonal(rng, shape[0], shape[1]),
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::Normal(std) => init_normal(rng, shape, std),
    }
}

impl EncoderBundle {
    pub(crate) fn towers(&self) -> Vec<Tower> {
        let (width, heads) = match self.layout {
            Layout::Single => (self.config.width, self.config.heads),
            Layout::TimeFrequency => self.config.tower_geometry(),
        };
        let prefixes: &[&str] = match self.layout {
            Layout::Single => &[""],
            Layout::TimeFrequency => &["time.", "freq."],
        };
        prefixes.iter().map(|p| self.config.tower(p, width, heads)).collect()
    }

    /// Width of one tower.
    pub fn tower_width(&self) -> usize {
        self.towers()[0].width
    }

    /// Width of the features fed to the classifier.
    pub fn feature_width(&self) -> usize {
        self.towers().iter().map(|t| t.width).sum()
    }

    /// Scalar count of every tower, projector included, classifier excluded.
    pub fn encoder_params(&self) -> usize {
        self.params.num_scalars() - self.params.count_with_prefix("classifier.")
    }

    /// Adds (or replaces) a classifier for `num_classes` classes.
    pub fn add_classifier(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::invalid(format!("a classifier needs at least 2 classes, got {num_classes}")));
        }
        let d = self.feature_width();
        let mut rng = rng::stream(seed, "init/classifier");
        self.params.insert(CLASSIFIER_WEIGHT, init_uniform(&mut rng, &[d, num_classes], d));
        self.params.insert(CLASSIFIER_BIAS, Tensor::zeros(&[num_classes]));
        self.num_classes = Some(num_classes);
        Ok(())
    }

    /// Checks that every parameter has the shape the config dictates.
    pub fn check_shapes(&self) -> Result<()> {
        let mut expected = 0;
        for tower in self.towers() {
            for spec in tower.param_specs() {
                expected += 1;
                match self.params.get(&spec.name) {
                    Some(t) if t.shape() == spec.shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::Shape(format!(
                            "parameter `{}` has shape {:?}, expected {:?}",
                            spec.name,
                            t.shape(),
                            spec.shape
                        )))
                    }
                    None => return Err(Error::Shape(format!("missing parameter `{}`", spec.name))),
                }
            }
        }
        if let Some(c) = self.num_classes {
            expected += 2;
            let d = self.feature_width();
            let ok = self.params.get(CLASSIFIER_WEIGHT).map(|t| t.shape() == [d, c]).unwrap_or(false)
                && self.params.get(CLASSIFIER_BIAS).map(|t| t.shape() == [c]).unwrap_or(false);
            if !ok {
                return Err(Error::Shape(format!("classifier does not match {d} features × {c} classes")));
            }
        }
        if expected != self.params.len() {
            return Err(Error::Shape(format!(
                "bundle holds {} tensors, config dictates {expected}",
                self.params.len()
            )));
        }
        Ok(())
    }

    /// Per-tower inputs for a batch: the series itself, or its resized
    /// magnitude spectrum for the frequency tower.
    pub(crate) fn tower_inputs(&self, rows: &[Vec<f64>]) -> Result<Vec<Tensor>> {
        let mut out = vec![Tensor::from_rows(rows)];
        if self.layout == Layout::TimeFrequency {
            let spec = rows.iter().map(|r| frequency_input(r)).collect::<Result<Vec<_>>>()?;
            out.push(Tensor::from_rows(&spec));
        }
        Ok(out)
    }

    /// Head output of every tower for a batch. Concatenated along the last axis.
    pub(crate) fn graph_features<R: rand::Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        inputs: &[Tensor],
        mode: OutputMode,
        valid: Option<&[usize]>,
        ctx: &mut Ctx<'_, R>,
    ) -> Vec<Var> {
        self.towers()
            .iter()
            .zip(inputs)
            .map(|(tower, x)| {
                let x = g.constant(x.clone());
                tower.features(g, p, x, mode, valid, ctx)
            })
            .collect()
    }

    /// Per-tower projections, concatenated along the last axis.
    pub(crate) fn graph_project(&self, g: &mut Graph, p: &Bound, features: &[Var]) -> Var {
        let parts: Vec<Var> = self
            .towers()
            .iter()
            .zip(features)
            .map(|(tower, h)| tower.project(g, p, *h))
            .collect();
        if parts.len() == 1 {
            parts[0]
        } else {
            let axis = g.shape(parts[0]).len() - 1;
            g.concat(&parts, axis)
        }
    }

    pub(crate) fn graph_classify(&self, g: &mut Graph, p: &Bound, z: Var) -> Var {
        let y = g.matmul(z, p.get(CLASSIFIER_WEIGHT));
        g.add_bias(y, p.get(CLASSIFIER_BIAS))
    }

    /// Logits for a batch: encoder, projector, classifier.
    pub(crate) fn graph_logits<R: rand::Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        inputs: &[Tensor],
        valid: Option<&[usize]>,
        ctx: &mut Ctx<'_, R>,
    ) -> Var {
        let h = self.graph_features(g, p, inputs, OutputMode::Pooled, valid, ctx);
        let z = self.graph_project(g, p, &h);
        self.graph_classify(g, p, z)
    }
}

/// Magnitude spectrum of `x` (length `L/2 + 1`) linearly resized to `L`.
pub fn frequency_input(x: &[f64]) -> Result<Vec<f64>> {
    resample(&magnitude_spectrum(x), x.len())
}

/// `T × width` sinusoidal position table.
pub fn sinusoidal_positions(steps: usize, width: usize) -> Result<Tensor> {
    if width % 2 != 0 {
        return Err(Error::invalid(format!("positional width must be even, got {width}")));
    }
    Ok(arch::sinusoidal_table(steps, width))
}

fn check_batch(batch: &Batch) -> Result<()> {
    if batch.size() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if batch.series_len() < 2 {
        return Err(Error::invalid(format!("series length must be at least 2, got {}", batch.series_len())));
    }
    if !batch.data.is_finite() {
        return Err(Error::invalid("batch contains non-finite values"));
    }
    Ok(())
}

/// Per-row valid lengths when some rows are padded.
fn padding(batch: &Batch) -> Option<&[usize]> {
    let l = batch.series_len();
    batch.lengths.iter().any(|&n| n < l).then_some(batch.lengths.as_slice())
}

fn eval_features(bundle: &EncoderBundle, batch: &Batch, mode: OutputMode) -> Result<Tensor> {
    check_batch(batch)?;
    let mut g = Graph::new();
    let p = bundle.params.bind_frozen(&mut g);
    let inputs = bundle.tower_inputs(&batch.rows())?;
    let mut ctx: Ctx<'_, Rng> = Ctx { rng: None, dropout: 0.0 };
    let parts = bundle.graph_features(&mut g, &p, &inputs, mode, padding(batch), &mut ctx);
    let out = if parts.len() == 1 {
        parts[0]
    } else {
        let axis = g.shape(parts[0]).len() - 1;
        g.concat(&parts, axis)
    };
    let t = g.value(out).clone();
    if !t.is_finite() {
        return Err(Error::Numeric("encoder produced non-finite features".into()));
    }
    Ok(t)
}

/// Pooled features `[B, D]` (backbone and final linear layer).
pub fn encode(bundle: &EncoderBundle, batch: &Batch) -> Result<Tensor> {
    eval_features(bundle, batch, OutputMode::Pooled)
}

/// Per-step features `[B, ceil(L/2), D]`.
pub fn encode_sequence(bundle: &EncoderBundle, batch: &Batch) -> Result<Tensor> {
    if bundle.config.output_mode != OutputMode::PerStep {
        return Err(Error::invalid("encode_sequence needs an encoder configured for per-step output"));
    }
    eval_features(bundle, batch, OutputMode::PerStep)
}

/// Projector applied to `[B, D]` or `[B, T, D]` features.
pub fn project(bundle: &EncoderBundle, features: &Tensor) -> Result<Tensor> {
    let d = bundle.feature_width();
    if features.rank() < 2 || features.shape()[features.rank() - 1] != d {
        return Err(Error::Shape(format!(
            "projector expects trailing width {d}, got shape {:?}",
            features.shape()
        )));
    }
    let mut g = Graph::new();
    let p = bundle.params.bind_frozen(&mut g);
    let x = g.constant(features.clone());
    let axis = features.rank() - 1;
    let parts: Vec<Var> = if bundle.layout == Layout::Single {
        vec![x]
    } else {
        let w = bundle.tower_width();
        vec![g.narrow(x, axis, 0, w), g.narrow(x, axis, w, w)]
    };
    let z = bundle.graph_project(&mut g, &p, &parts);
    Ok(g.value(z).clone())
}

/// Classifier logits `[B, C]` from projector output `[B, D]`.
pub fn classify(bundle: &EncoderBundle, features: &Tensor, num_classes: usize) -> Result<Tensor> {
    match bundle.num_classes {
        None => return Err(Error::invalid("bundle has no classifier")),
        Some(c) if c != num_classes => {
            return Err(Error::invalid(format!("classifier has {c} classes, {num_classes} requested")))
        }
        _ => {}
    }
    let d = bundle.feature_width();
    if features.rank() != 2 || features.dim(1) != d {
        return Err(Error::Shape(format!("classifier expects [B, {d}], got {:?}", features.shape())));
    }
    let mut g = Graph::new();
    let p = bundle.params.bind_frozen(&mut g);
    let x = g.constant(features.clone());
    let y = bundle.graph_classify(&mut g, &p, x);
    Ok(g.value(y).clone())
}

/// Logits for a batch through encoder, projector and classifier, in evaluation mode.
pub fn predict_logits(bundle: &EncoderBundle, batch: &Batch) -> Result<Tensor> {
    check_batch(batch)?;
    if bundle.num_classes.is_none() {
        return Err(Error::invalid("bundle has no classifier"));
    }
    let mut g = Graph::new();
    let p = bundle.params.bind_frozen(&mut g);
    let inputs = bundle.tower_inputs(&batch.rows())?;
    let mut ctx: Ctx<'_, Rng> = Ctx { rng: None, dropout: 0.0 };
    let y = bundle.graph_logits(&mut g, &p, &inputs, padding(batch), &mut ctx);
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: usize, len: usize, seed: u64) -> Batch {
        use rand::Rng as _;
        let mut r = rng::stream(seed, "test");
        let data: Vec<Vec<f64>> = (0..rows).map(|_| (0..len).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        Batch::from_rows(&data, None, "t").unwrap()
    }

    fn small(arch: Arch) -> EncoderConfig {
        EncoderConfig {
            width: 8,
            heads: 2,
            ..EncoderConfig::new(arch)
        }
    }

    #[test]
    fn arch_parsing() {
        assert_eq!("ResNet".parse::<Arch>().unwrap(), Arch::ResNet);
        assert_eq!("LSTM".parse::<Arch>().unwrap(), Arch::Lstm);
        assert!("mlp".parse::<Arch>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::default();
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 8);
        c.heads = 5;
        assert!(c.validate().is_err());
        let c = EncoderConfig { width: 7, ..EncoderConfig::new(Arch::Gru) };
        assert!(c.validate().is_err());
    }

    #[test]
    fn shapes_and_determinism() {
        for arch in Arch::ALL {
            let a = build_encoder(&small(arch), 3).unwrap();
            let b = build_encoder(&small(arch), 3).unwrap();
            a.check_shapes().unwrap();
            assert_eq!(a.params.content_hash(), b.params.content_hash());
            let f = encode(&a, &batch(3, 11, 1)).unwrap();
            assert_eq!(f.shape(), &[3, 8]);
            let z = project(&a, &f).unwrap();
            assert_eq!(z.shape(), &[3, 8]);
        }
    }

    #[test]
    fn per_step_requires_mode() {
        let mut c = small(Arch::ResNet);
        let b = build_encoder(&c, 0).unwrap();
        assert!(encode_sequence(&b, &batch(2, 9, 0)).is_err());
        c.output_mode = OutputMode::PerStep;
        let b = build_encoder(&c, 0).unwrap();
        assert_eq!(encode_sequence(&b, &batch(2, 9, 0)).unwrap().shape(), &[2, 5, 8]);
    }

    #[test]
    fn classifier_contract() {
        let mut b = build_encoder(&small(Arch::Gru), 0).unwrap();
        let f = Tensor::zeros(&[2, 8]);
        assert!(classify(&b, &f, 3).is_err());
        b.add_classifier(3, 0).unwrap();
        assert!(classify(&b, &f, 2).is_err());
        assert_eq!(classify(&b, &f, 3).unwrap().shape(), &[2, 3]);
        b.check_shapes().unwrap();
    }

    #[test]
    fn sinusoid_rejects_odd_width() {
        assert!(sinusoidal_positions(3, 5).is_err());
        assert_eq!(sinusoidal_positions(3, 4).unwrap().shape(), &[3, 4]);
    }

    #[test]
    fn two_tower_budget_matches_one_encoder() {
        for arch in Arch::ALL {
            let full = build_encoder(&EncoderConfig::new(arch), 0).unwrap().encoder_params();
            let cfg = EncoderConfig { width_scale: 0.5, ..EncoderConfig::new(arch) };
            let pair = build_with_layout(&cfg, Layout::TimeFrequency, 0).unwrap();
            let ratio = pair.encoder_params() as f64 / full as f64;
            eprintln!("{arch}: tower width {} ratio {ratio:.3}", pair.tower_width());
            assert!((ratio - 1.0).abs() <= 0.1, "{arch}: {ratio}");
        }
    }
}
