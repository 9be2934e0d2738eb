//! Seeded time-series augmentations.
//!
//! Each augmentation is described by an [`AugmentationSpec`]: the kind, its
//! drawn parameters and a sub-seed for the only residual randomness (jitter
//! noise). Replaying a spec with [`apply`] reproduces the transform exactly.

mod spline;
pub mod transforms;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use spline::{spline_curve, NaturalSpline};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    Jitter,
    Smooth,
    MagnitudeWarp,
    TimeWarp,
    CircularShift,
    AddSlope,
    AddSpike,
    AddStep,
    Mask,
    Crop,
    Scale,
    Negate,
    FreqPerturb,
}

/// The single-augmentation pool sampled for every contrastive view.
pub const TIMECLR_KINDS: [AugKind; 10] = [
    AugKind::Jitter,
    AugKind::Smooth,
    AugKind::MagnitudeWarp,
    AugKind::TimeWarp,
    AugKind::CircularShift,
    AugKind::AddSlope,
    AugKind::AddSpike,
    AugKind::AddStep,
    AugKind::Mask,
    AugKind::Crop,
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub position: usize,
    pub magnitude: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqEdit {
    pub bin: usize,
    /// 0 removes the component, values above 1 boost it.
    pub factor: f64,
}

/// Pinned parameters for one augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum AugParams {
    Jitter { sigma: f64 },
    Smooth { window: usize },
    MagnitudeWarp { knots: Vec<f64> },
    TimeWarp { knots: Vec<f64> },
    CircularShift { offset: usize },
    AddSlope { slope: f64 },
    AddSpike { spikes: Vec<Spike> },
    AddStep { position: usize, height: f64 },
    Mask { start: usize, len: usize },
    Crop { start: usize, len: usize },
    Scale { factor: f64 },
    Negate { flip: bool },
    FreqPerturb { edits: Vec<FreqEdit> },
}

impl AugParams {
    pub fn kind(&self) -> AugKind {
        match self {
            AugParams::Jitter { .. } => AugKind::Jitter,
            AugParams::Smooth { .. } => AugKind::Smooth,
            AugParams::MagnitudeWarp { .. } => AugKind::MagnitudeWarp,
            AugParams::TimeWarp { .. } => AugKind::TimeWarp,
            AugParams::CircularShift { .. } => AugKind::CircularShift,
            AugParams::AddSlope { .. } => AugKind::AddSlope,
            AugParams::AddSpike { .. } => AugKind::AddSpike,
            AugParams::AddStep { .. } => AugKind::AddStep,
            AugParams::Mask { .. } => AugKind::Mask,
            AugParams::Crop { .. } => AugKind::Crop,
            AugParams::Scale { .. } => AugKind::Scale,
            AugParams::Negate { .. } => AugKind::Negate,
            AugParams::FreqPerturb { .. } => AugKind::FreqPerturb,
        }
    }
}

/// Serializes as `{"kind": ..., "params": {...}, "subseed": n}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    #[serde(flatten)]
    pub params: AugParams,
    pub subseed: u64,
}

impl AugmentationSpec {
    pub fn new(params: AugParams, subseed: u64) -> Self {
        Self { params, subseed }
    }

    pub fn kind(&self) -> AugKind {
        self.params.kind()
    }
}

/// Parameter ranges the samplers draw from. Amplitudes assume z-normalized input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub jitter_sigma: [f64; 2],
    pub smooth_windows: Vec<usize>,
    pub warp_knots: usize,
    pub warp_sigma: [f64; 2],
    /// Bound `A` for slope, spike and step magnitudes.
    pub amplitude: f64,
    pub max_spikes: usize,
    pub mask_fraction: [f64; 2],
    pub crop_fraction: [f64; 2],
    pub freq_max_bins: usize,
    /// Boost factors are drawn from `U(1, 1 + freq_boost)`.
    pub freq_boost: f64,
    /// Symmetric Beta parameter for mixing weights.
    pub mix_alpha: f64,
    /// Standard deviation of the scaling factor around 1.
    pub scale_sigma: f64,
    pub negate_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter_sigma: [0.01, 0.2],
            smooth_windows: vec![3, 5, 7],
            warp_knots: 4,
            warp_sigma: [0.05, 0.3],
            amplitude: 1.0,
            max_spikes: 3,
            mask_fraction: [0.05, 0.3],
            crop_fraction: [0.5, 0.9],
            freq_max_bins: 3,
            freq_boost: 0.5,
            mix_alpha: 0.2,
            scale_sigma: 0.2,
            negate_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, r: [f64; 2], lo: f64, hi: f64| {
            if r[0] <= r[1] && r[0] >= lo && r[1] <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!("augment.{name} must be an ordered range within [{lo}, {hi}]")))
            }
        };
        range("jitter_sigma", self.jitter_sigma, 0.0, f64::INFINITY)?;
        range("warp_sigma", self.warp_sigma, 0.0, f64::INFINITY)?;
        range("mask_fraction", self.mask_fraction, 0.0, 1.0)?;
        range("crop_fraction", self.crop_fraction, f64::MIN_POSITIVE, 1.0)?;
        if self.smooth_windows.is_empty() || self.smooth_windows.iter().any(|w| w % 2 == 0) {
            return Err(Error::Config("augment.smooth_windows must be non-empty and odd".into()));
        }
        if self.warp_knots < 2 {
            return Err(Error::Config("augment.warp_knots must be >= 2".into()));
        }
        if !(self.mix_alpha > 0.0) || !(self.amplitude >= 0.0) || !(self.scale_sigma >= 0.0) || !(self.freq_boost >= 0.0) {
            return Err(Error::Config("augment magnitudes must be non-negative (mix_alpha positive)".into()));
        }
        if !(0.0..=1.0).contains(&self.negate_probability) {
            return Err(Error::Config("augment.negate_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn gaussian_knots<R: Rng + ?Sized>(rng: &mut R, count: usize, sigma: f64, floor: Option<f64>) -> Vec<f64> {
    let dist = Normal::new(1.0, sigma).expect("finite sigma");
    (0..count)
        .map(|_| {
            let v = dist.sample(rng);
            floor.map_or(v, |f| v.max(f))
        })
        .collect()
}

/// Draws parameters of `kind` for a series of length `len`.
pub fn sample_params<R: Rng + ?Sized>(kind: AugKind, len: usize, cfg: &AugmentConfig, rng: &mut R) -> Result<AugmentationSpec> {
    if len == 0 {
        return Err(Error::invalid("augmentation input is empty"));
    }
    let amp = cfg.amplitude;
    let params = match kind {
        AugKind::Jitter => AugParams::Jitter {
            sigma: uniform(rng, cfg.jitter_sigma),
        },
        AugKind::Smooth => AugParams::Smooth {
            window: cfg.smooth_windows[rng.random_range(0..cfg.smooth_windows.len())],
        },
        AugKind::MagnitudeWarp => {
            let sigma = uniform(rng, cfg.warp_sigma);
            AugParams::MagnitudeWarp {
                knots: gaussian_knots(rng, cfg.warp_knots, sigma, None),
            }
        }
        AugKind::TimeWarp => {
            let sigma = uniform(rng, cfg.warp_sigma);
            AugParams::TimeWarp {
                knots: gaussian_knots(rng, cfg.warp_knots, sigma, Some(transforms::MIN_WARP_SPEED)),
            }
        }
        AugKind::CircularShift => AugParams::CircularShift {
            offset: rng.random_range(0..len),
        },
        AugKind::AddSlope => AugParams::AddSlope {
            slope: if len < 2 || amp == 0.0 { 0.0 } else { rng.random_range(-amp..amp) },
        },
        AugKind::AddSpike => {
            let max = cfg.max_spikes.min(len);
            let spikes = if max == 0 {
                Vec::new()
            } else {
                let k = rng.random_range(1..=max);
                let positions = index::sample(rng, len, k).into_vec();
                positions
                    .into_iter()
                    .map(|position| {
                        let size = if amp == 0.0 { 0.0 } else { rng.random_range(amp / 2.0..=amp) };
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        Spike {
                            position,
                            magnitude: sign * size,
                        }
                    })
                    .collect()
            };
            AugParams::AddSpike { spikes }
        }
        AugKind::AddStep => {
            if len < 2 {
                AugParams::AddStep {
                    position: 0,
                    height: 0.0,
                }
            } else {
                AugParams::AddStep {
                    position: rng.random_range(1..len),
                    height: if amp == 0.0 { 0.0 } else { rng.random_range(-amp..amp) },
                }
            }
        }
        AugKind::Mask => {
            let w = transforms::mask_len(uniform(rng, cfg.mask_fraction), len)?;
            AugParams::Mask {
                start: rng.random_range(0..=len - w),
                len: w,
            }
        }
        AugKind::Crop => {
            let w = transforms::crop_len(uniform(rng, cfg.crop_fraction), len)?;
            AugParams::Crop {
                start: rng.random_range(0..=len - w),
                len: w,
            }
        }
        AugKind::Scale => AugParams::Scale {
            factor: Normal::new(1.0, cfg.scale_sigma).expect("finite sigma").sample(rng),
        },
        AugKind::Negate => AugParams::Negate {
            flip: rng.random_bool(cfg.negate_probability),
        },
        AugKind::FreqPerturb => {
            let available = len / 2;
            let max = cfg.freq_max_bins.min(available);
            let edits = if max == 0 {
                Vec::new()
            } else {
                let k = rng.random_range(1..=max);
                let mut bins: Vec<usize> = index::sample(rng, available, k).into_iter().map(|b| b + 1).collect();
                bins.sort_unstable();
                bins.into_iter()
                    .map(|bin| {
                        let factor = if rng.random_bool(0.5) {
                            0.0
                        } else {
                            uniform(rng, [1.0, 1.0 + cfg.freq_boost])
                        };
                        FreqEdit { bin, factor }
                    })
                    .collect()
            };
            AugParams::FreqPerturb { edits }
        }
    };
    Ok(AugmentationSpec::new(params, rng::subseed(rng)))
}

/// Applies a pinned spec. Deterministic in `(x, spec)`.
pub fn apply(x: &[f64], spec: &AugmentationSpec) -> Result<Vec<f64>> {
    use transforms as t;
    match &spec.params {
        AugParams::Jitter { sigma } => {
            let mut r = rng::stream(spec.subseed, "jitter");
            t::jitter(x, *sigma, &mut r)
        }
        AugParams::Smooth { window } => t::smooth(x, *window),
        AugParams::MagnitudeWarp { knots } => t::magnitude_warp(x, knots),
        AugParams::TimeWarp { knots } => t::time_warp(x, knots),
        AugParams::CircularShift { offset } => t::circular_shift(x, *offset),
        AugParams::AddSlope { slope } => {
            if *slope == 0.0 && x.len() == 1 {
                Ok(x.to_vec())
            } else {
                t::add_slope(x, *slope)
            }
        }
        AugParams::AddSpike { spikes } => {
            let pairs: Vec<(usize, f64)> = spikes.iter().map(|s| (s.position, s.magnitude)).collect();
            t::add_spikes(x, &pairs)
        }
        AugParams::AddStep { position, height } => {
            if *height == 0.0 && x.len() == 1 {
                Ok(x.to_vec())
            } else {
                t::add_step(x, *position, *height)
            }
        }
        AugParams::Mask { start, len } => t::mask(x, *start, *len),
        AugParams::Crop { start, len } => t::crop(x, *start, *len),
        AugParams::Scale { factor } => t::scale(x, *factor),
        AugParams::Negate { flip } => {
            if *flip {
                t::negate(x)
            } else {
                t::scale(x, 1.0)
            }
        }
        AugParams::FreqPerturb { edits } => {
            let pairs: Vec<(usize, f64)> = edits.iter().map(|e| (e.bin, e.factor)).collect();
            t::freq_perturb(x, &pairs)
        }
    }
}

/// Draws one kind uniformly from [`TIMECLR_KINDS`], samples its parameters
/// and applies it once.
pub fn sample_timeclr_view<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Result<(Vec<f64>, AugmentationSpec)> {
    let kind = TIMECLR_KINDS[rng.random_range(0..TIMECLR_KINDS.len())];
    let spec = sample_params(kind, x.len(), cfg, rng)?;
    let out = apply(x, &spec)?;
    Ok((out, spec))
}

/// Random scaling followed by random negation.
pub fn sample_scale_negate_view<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Result<(Vec<f64>, [AugmentationSpec; 2])> {
    let s = sample_params(AugKind::Scale, x.len(), cfg, rng)?;
    let n = sample_params(AugKind::Negate, x.len(), cfg, rng)?;
    let out = apply(&apply(x, &s)?, &n)?;
    Ok((out, [s, n]))
}

/// Two equal-length series and their convex combination.
#[derive(Clone, Debug, PartialEq)]
pub struct MixSample {
    pub x_i: Vec<f64>,
    pub x_j: Vec<f64>,
    pub lambda: f64,
    pub x_k: Vec<f64>,
}

/// `lambda · x_i + (1 − lambda) · x_j`; `lambda` defaults to a draw from
/// `Beta(alpha, alpha)`.
pub fn mix<R: Rng + ?Sized>(x_i: &[f64], x_j: &[f64], lambda: Option<f64>, alpha: f64, rng: &mut R) -> Result<MixSample> {
    if x_i.len() != x_j.len() {
        return Err(Error::Shape(format!("cannot mix lengths {} and {}", x_i.len(), x_j.len())));
    }
    let lambda = match lambda {
        Some(l) if (0.0..=1.0).contains(&l) => l,
        Some(l) => return Err(Error::invalid(format!("mixing weight {l} outside [0, 1]"))),
        None => sample_mix_weight(alpha, rng)?,
    };
    let x_k = x_i.iter().zip(x_j).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
    Ok(MixSample {
        x_i: x_i.to_vec(),
        x_j: x_j.to_vec(),
        lambda,
        x_k,
    })
}

pub fn sample_mix_weight<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(format!("Beta({alpha}, {alpha}): {e}")))?;
    Ok(beta.sample(rng))
}
