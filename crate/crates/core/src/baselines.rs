//! One-nearest-neighbor classifiers with Euclidean and DTW distances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ed,
    Dtw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceSpec {
    pub metric: Metric,
    /// Sakoe-Chiba radius; unconstrained when absent.
    pub window: Option<usize>,
}

impl DistanceSpec {
    pub fn euclidean() -> Self {
        Self {
            metric: Metric::Ed,
            window: None,
        }
    }

    pub fn dtw(window: Option<usize>) -> Self {
        Self {
            metric: Metric::Dtw,
            window,
        }
    }

    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self.metric {
            Metric::Ed => euclidean(x, y),
            Metric::Dtw => dtw(x, y, self.window),
        }
    }
}

pub fn euclidean(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("euclidean distance of lengths {} and {}", x.len(), y.len())));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// DTW with squared cell cost and a final square root.
pub fn dtw(x: &[f64], y: &[f64], window: Option<usize>) -> Result<f64> {
    let (n, m) = (x.len(), y.len());
    if n == 0 || m == 0 {
        return Err(Error::invalid("dtw of an empty series"));
    }
    if let Some(w) = window {
        if n.abs_diff(m) > w {
            return Err(Error::invalid(format!(
                "band radius {w} cannot align lengths {n} and {m}"
            )));
        }
    }
    let w = window.unwrap_or(n.max(m));
    let inf = f64::INFINITY;
    let mut prev = vec![inf; m + 1];
    let mut cur = vec![inf; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur.fill(inf);
        let lo = i.saturating_sub(w).max(1);
        let hi = (i + w).min(m);
        for j in lo..=hi {
            let d = x[i - 1] - y[j - 1];
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = d * d + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m].sqrt())
}

/// Label of the nearest training series; the lowest index wins ties.
pub fn one_nn(train: &[(Vec<f64>, usize)], query: &[f64], spec: &DistanceSpec) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (x, label) in train {
        let d = spec.distance(x, query)?;
        if best.is_none_or(|(b, _)| d < b) {
            best = Some((d, *label));
        }
    }
    best.map(|(_, l)| l).ok_or_else(|| Error::invalid("1-NN needs a non-empty training set"))
}

/// Number of correct 1-NN predictions on `test`.
pub fn one_nn_correct(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)], spec: &DistanceSpec) -> Result<usize> {
    let mut correct = 0;
    for (x, label) in test {
        if one_nn(train, x, spec)? == *label {
            correct += 1;
        }
    }
    Ok(correct)
}
