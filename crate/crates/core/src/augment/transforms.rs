//! Pure time-series transforms with fully pinned parameters.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::spline::spline_curve;
use crate::dataset::resample;
use crate::error::{Error, Result};

/// Lower bound applied to time-warp speed knots and the speed curve.
pub const MIN_WARP_SPEED: f64 = 0.1;

fn non_empty(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        Err(Error::invalid("augmentation input is empty"))
    } else {
        Ok(())
    }
}

/// Adds i.i.d. `N(0, sigma²)` noise.
pub fn jitter<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    non_empty(x)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("jitter sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.to_vec());
    }
    let noise = Normal::new(0.0, sigma).expect("valid sigma");
    Ok(x.iter().map(|v| v + noise.sample(rng)).collect())
}

/// Centered moving average of odd width, replicating edge samples.
pub fn smooth(x: &[f64], window: usize) -> Result<Vec<f64>> {
    non_empty(x)?;
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid(format!("smoothing window must be odd and positive, got {window}")));
    }
    let half = (window / 2) as isize;
    let n = x.len() as isize;
    Ok((0..n)
        .map(|t| {
            let s: f64 = (t - half..=t + half).map(|i| x[i.clamp(0, n - 1) as usize]).sum();
            s / window as f64
        })
        .collect())
}

/// Multiplies by the natural spline through `knots` spread over the series.
pub fn magnitude_warp(x: &[f64], knots: &[f64]) -> Result<Vec<f64>> {
    non_empty(x)?;
    if knots.len() < 2 {
        return Err(Error::invalid("magnitude warp needs at least 2 knots"));
    }
    let curve = spline_curve(knots, x.len());
    Ok(x.iter().zip(curve).map(|(v, c)| v * c).collect())
}

/// Samples `x` at fractional index positions by linear interpolation.
pub fn sample_at(x: &[f64], positions: &[f64]) -> Vec<f64> {
    let last = x.len() - 1;
    positions
        .iter()
        .map(|&p| {
            let p = p.clamp(0.0, last as f64);
            let lo = (p.floor() as usize).min(last);
            let f = p - lo as f64;
            if f == 0.0 || lo == last {
                x[lo]
            } else {
                x[lo] * (1.0 - f) + x[lo + 1] * f
            }
        })
        .collect()
}

/// Monotone warp path from speed knots: cumulative spline speed rescaled so
/// that the path starts at 0 and ends at `len - 1`.
pub fn warp_path(knots: &[f64], len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![0.0];
    }
    let clipped: Vec<f64> = knots.iter().map(|k| k.max(MIN_WARP_SPEED)).collect();
    let speed = spline_curve(&clipped, len);
    let mut cum = Vec::with_capacity(len);
    let mut acc = 0.0;
    for s in speed {
        acc += s.max(MIN_WARP_SPEED);
        cum.push(acc);
    }
    let (first, total) = (cum[0], cum[len - 1] - cum[0]);
    let span = (len - 1) as f64;
    let mut path: Vec<f64> = cum.iter().map(|c| (c - first) / total * span).collect();
    path[0] = 0.0;
    path[len - 1] = span;
    path
}

/// Resamples `x` along the warp path built from speed `knots`.
pub fn time_warp(x: &[f64], knots: &[f64]) -> Result<Vec<f64>> {
    non_empty(x)?;
    if knots.len() < 2 {
        return Err(Error::invalid("time warp needs at least 2 knots"));
    }
    Ok(sample_at(x, &warp_path(knots, x.len())))
}

/// Rotates right by `offset`: `out[t] = x[(t - offset) mod L]`.
pub fn circular_shift(x: &[f64], offset: usize) -> Result<Vec<f64>> {
    non_empty(x)?;
    let n = x.len();
    let s = offset % n;
    Ok((0..n).map(|t| x[(t + n - s) % n]).collect())
}

/// Adds the line from 0 at the start to `slope` at the end.
pub fn add_slope(x: &[f64], slope: f64) -> Result<Vec<f64>> {
    non_empty(x)?;
    if x.len() < 2 {
        return Err(Error::invalid("adding a slope needs at least 2 samples"));
    }
    let span = (x.len() - 1) as f64;
    Ok(x.iter().enumerate().map(|(t, v)| v + slope * t as f64 / span).collect())
}

/// Adds `magnitude` at each `(position, magnitude)` pair.
pub fn add_spikes(x: &[f64], spikes: &[(usize, f64)]) -> Result<Vec<f64>> {
    non_empty(x)?;
    let mut out = x.to_vec();
    for &(p, m) in spikes {
        let slot = out
            .get_mut(p)
            .ok_or_else(|| Error::invalid(format!("spike position {p} outside series")))?;
        *slot += m;
    }
    Ok(out)
}

/// Adds `height` to every sample from `position` on.
pub fn add_step(x: &[f64], position: usize, height: f64) -> Result<Vec<f64>> {
    non_empty(x)?;
    if x.len() < 2 {
        return Err(Error::invalid("adding a step needs at least 2 samples"));
    }
    if position > x.len() {
        return Err(Error::invalid(format!("step position {position} outside series")));
    }
    Ok(x.iter().enumerate().map(|(t, v)| if t >= position { v + height } else { *v }).collect())
}

/// Zeroes the window `start..start + len`.
pub fn mask(x: &[f64], start: usize, len: usize) -> Result<Vec<f64>> {
    non_empty(x)?;
    if start + len > x.len() {
        return Err(Error::invalid("mask window outside series"));
    }
    let mut out = x.to_vec();
    out[start..start + len].fill(0.0);
    Ok(out)
}

/// Window length for a mask fraction.
pub fn mask_len(fraction: f64, len: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("mask fraction must lie in [0, 1], got {fraction}")));
    }
    Ok(((fraction * len as f64).round() as usize).min(len))
}

/// Takes `start..start + len` and stretches it back to the input length.
pub fn crop(x: &[f64], start: usize, len: usize) -> Result<Vec<f64>> {
    non_empty(x)?;
    if len == 0 || start + len > x.len() {
        return Err(Error::invalid("crop window outside series"));
    }
    if len == 1 {
        return Ok(vec![x[start]; x.len()]);
    }
    resample(&x[start..start + len], x.len())
}

/// Crop length for a crop fraction: `max(2, round(c·L))`, capped at `L`.
pub fn crop_len(fraction: f64, len: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("crop fraction must lie in (0, 1], got {fraction}")));
    }
    Ok(((fraction * len as f64).round() as usize).max(2).min(len))
}

pub fn scale(x: &[f64], factor: f64) -> Result<Vec<f64>> {
    non_empty(x)?;
    Ok(x.iter().map(|v| v * factor).collect())
}

pub fn negate(x: &[f64]) -> Result<Vec<f64>> {
    non_empty(x)?;
    Ok(x.iter().map(|v| -v).collect())
}

/// Scaling by `factor`, then negation when `flip` is set.
pub fn scale_or_negate(x: &[f64], factor: f64, flip: bool) -> Result<Vec<f64>> {
    let s = scale(x, factor)?;
    if flip {
        negate(&s)
    } else {
        Ok(s)
    }
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut planner = FftPlanner::new();
    if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    }
}

/// Forward DFT of a real series.
pub fn dft(x: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    plan(x.len(), false).process(&mut buf);
    buf
}

/// Inverse DFT, normalized by `1/n`.
pub fn idft(spectrum: &[Complex<f64>]) -> Vec<Complex<f64>> {
    let mut buf = spectrum.to_vec();
    plan(buf.len(), true).process(&mut buf);
    let n = buf.len() as f64;
    buf.iter_mut().for_each(|c| *c /= n);
    buf
}

/// `|X_k|` for `k = 0..=L/2`.
pub fn magnitude_spectrum(x: &[f64]) -> Vec<f64> {
    dft(x).iter().take(x.len() / 2 + 1).map(|c| c.norm()).collect()
}

/// Scales the listed frequency bins (and their conjugate mirrors) by real
/// factors; factor 0 removes a component. Returns the real series and the
/// largest imaginary residue of the inverse transform.
pub fn freq_perturb_with_residue(x: &[f64], edits: &[(usize, f64)]) -> Result<(Vec<f64>, f64)> {
    non_empty(x)?;
    let n = x.len();
    let mut spec = dft(x);
    for &(bin, factor) in edits {
        if bin == 0 || bin > n / 2 {
            return Err(Error::invalid(format!("frequency bin {bin} outside 1..={}", n / 2)));
        }
        spec[bin] *= factor;
        let mirror = n - bin;
        if mirror != bin {
            spec[mirror] *= factor;
        }
    }
    let back = idft(&spec);
    let residue = back.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    Ok((back.iter().map(|c| c.re).collect(), residue))
}

pub fn freq_perturb(x: &[f64], edits: &[(usize, f64)]) -> Result<Vec<f64>> {
    freq_perturb_with_residue(x, edits).map(|(v, _)| v)
}
