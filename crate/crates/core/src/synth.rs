//! Synthetic multi-domain archive for smoke runs and end-to-end checks.
//!
//! Each domain is one waveform family; its classes differ by frequency.
//! Phase, amplitude and a small frequency jitter vary per series, and
//! Gaussian noise is added.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Archive, TimeSeries};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Waveform {
    Sine,
    Square,
    Triangle,
}

impl Waveform {
    pub const ALL: [Waveform; 3] = [Waveform::Sine, Waveform::Square, Waveform::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Waveform::Sine => "sine",
            Waveform::Square => "square",
            Waveform::Triangle => "triangle",
        }
    }

    /// Value at phase `p` (radians), period `2π`, range `[-1, 1]`.
    pub fn at(self, p: f64) -> f64 {
        let u = p.rem_euclid(2.0 * PI) / (2.0 * PI);
        match self {
            Waveform::Sine => p.sin(),
            Waveform::Square => {
                if u < 0.5 {
                    1.0
                } else {
                    -1.0
                }
            }
            Waveform::Triangle => 1.0 - 4.0 * (u - 0.5).abs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub series_per_domain: usize,
    pub length: usize,
    /// Cycles per series for each class.
    pub class_cycles: Vec<f64>,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            series_per_domain: 60,
            length: 64,
            class_cycles: vec![1.0, 3.0, 9.0],
            noise: 0.1,
            seed: 0,
        }
    }
}

/// One dataset per waveform, classes balanced and interleaved.
pub fn generate(cfg: &SynthConfig) -> Result<Archive> {
    if cfg.length < 2 || cfg.class_cycles.len() < 2 || cfg.series_per_domain < cfg.class_cycles.len() {
        return Err(Error::invalid("synthetic archive needs length >= 2, two classes and a sample per class"));
    }
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::invalid(format!("noise: {e}")))?;
    let mut archive = Archive::new();
    for wave in Waveform::ALL {
        let mut r = rng::stream(cfg.seed, &format!("synth/{}", wave.name()));
        let mut pool = Vec::with_capacity(cfg.series_per_domain);
        for i in 0..cfg.series_per_domain {
            let label = i % cfg.class_cycles.len();
            let cycles = cfg.class_cycles[label] * r.random_range(0.9..1.1);
            let phase = r.random_range(0.0..2.0 * PI);
            let amp = r.random_range(0.8..1.2);
            let values = (0..cfg.length)
                .map(|t| {
                    let p = phase + 2.0 * PI * cycles * t as f64 / cfg.length as f64;
                    amp * wave.at(p) + noise.sample(&mut r)
                })
                .collect();
            pool.push(TimeSeries {
                values,
                label: Some(label),
                dataset_id: wave.name().to_string(),
                sample_id: format!("synth-{i:05}"),
            });
        }
        archive.insert(wave.name().to_string(), pool);
    }
    Ok(archive)
}

/// Writes `archive` in the tab-separated archive layout, alternating
/// samples between the train and test files. Labels are written from 1.
pub fn write_archive(root: &Path, archive: &Archive) -> Result<()> {
    for (name, pool) in archive {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (part, parity) in [("TRAIN", 0), ("TEST", 1)] {
            let path = dir.join(format!("{name}_{part}.tsv"));
            let mut out = String::new();
            for s in pool.iter().skip(parity).step_by(2) {
                let label = s.label.map_or(0, |l| l + 1);
                out.push_str(&label.to_string());
                for v in &s.values {
                    out.push('\t');
                    out.push_str(&format!("{v:.17e}"));
                }
                out.push('\n');
            }
            let mut f = fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
            f.write_all(out.as_bytes())
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
    }
    Ok(())
}
