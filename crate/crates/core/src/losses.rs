//! Contrastive and supervised objectives.
//!
//! Each loss exists twice: a graph form in [`graph`] that records onto a
//! [`Graph`] for training, and a value form here that validates its inputs
//! and returns a plain number.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor};

/// Which entries enter the NT-Xent denominator besides the anchor's negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Every other row except the anchor and its positive.
    #[default]
    ExcludePositive,
    /// Every other row except the anchor.
    IncludePositive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TfcWeights {
    pub time: f64,
    pub freq: f64,
    pub consistency: f64,
}

impl Default for TfcWeights {
    fn default() -> Self {
        Self {
            time: 1.0,
            freq: 1.0,
            consistency: 1.0,
        }
    }
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

fn check_pair(a: &Tensor, b: &Tensor, rank: usize) -> Result<()> {
    if a.shape() != b.shape() || a.rank() != rank {
        return Err(Error::Shape(format!(
            "expected two rank-{rank} tensors of one shape, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_rows(t: &Tensor) -> Result<()> {
    let d = *t.shape().last().unwrap_or(&0);
    if d == 0 || !t.is_finite() {
        return Err(Error::invalid("features must be finite and non-empty"));
    }
    if t.data().chunks(d).any(|r| r.iter().all(|v| *v == 0.0)) {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok(())
}

fn check_batch(b: usize) -> Result<()> {
    if b < 2 {
        return Err(Error::invalid(format!("contrastive losses need at least 2 rows, got {b}")));
    }
    Ok(())
}

fn eval(inputs: &[&Tensor], f: impl FnOnce(&mut Graph, &[crate::nn::Var]) -> crate::nn::Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

/// NT-Xent over the `2B` rows of `H0 ∪ H1`, averaged over all `2B` anchors.
pub fn nt_xent(h0: &Tensor, h1: &Tensor, tau: f64, denom: Denominator) -> Result<f64> {
    check_pair(h0, h1, 2)?;
    check_batch(h0.dim(0))?;
    check_tau(tau)?;
    check_rows(h0)?;
    check_rows(h1)?;
    Ok(eval(&[h0, h1], |g, v| graph::nt_xent(g, v[0], v[1], tau, denom)))
}

/// Hierarchical temporal plus instance contrast on per-step features
/// `[B, T, D]` already restricted to the crop overlap.
pub fn ts2vec_loss(z0: &Tensor, z1: &Tensor, tau: f64, max_levels: Option<usize>) -> Result<f64> {
    check_pair(z0, z1, 3)?;
    if z0.dim(1) == 0 {
        return Err(Error::invalid("empty crop overlap"));
    }
    if z0.dim(0) == 0 {
        return Err(Error::invalid("empty batch"));
    }
    check_tau(tau)?;
    check_rows(z0)?;
    check_rows(z1)?;
    Ok(eval(&[z0, z1], |g, v| graph::ts2vec_loss(g, v[0], v[1], tau, max_levels)))
}

/// Predicts the mixing weight of `h_k` between `h_i` and `h_j`.
pub fn mixing_loss(hi: &Tensor, hj: &Tensor, hk: &Tensor, lambda: &[f64], tau: f64) -> Result<f64> {
    check_pair(hi, hj, 2)?;
    check_pair(hi, hk, 2)?;
    check_batch(hi.dim(0))?;
    check_tau(tau)?;
    if lambda.len() != hi.dim(0) {
        return Err(Error::Shape(format!("{} mixing weights for {} rows", lambda.len(), hi.dim(0))));
    }
    if lambda.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::invalid("mixing weights must lie in [0, 1]"));
    }
    for t in [hi, hj, hk] {
        check_rows(t)?;
    }
    Ok(eval(&[hi, hj, hk], |g, v| graph::mixing_loss(g, v[0], v[1], v[2], lambda, tau)))
}

/// Time and frequency NT-Xent plus a time/frequency consistency term on
/// the original views.
pub fn tfc_loss(
    time0: &Tensor,
    time1: &Tensor,
    freq0: &Tensor,
    freq1: &Tensor,
    tau: f64,
    weights: TfcWeights,
    denom: Denominator,
) -> Result<f64> {
    for t in [time1, freq0, freq1] {
        check_pair(time0, t, 2)?;
    }
    check_batch(time0.dim(0))?;
    check_tau(tau)?;
    for t in [time0, time1, freq0, freq1] {
        check_rows(t)?;
    }
    Ok(eval(&[time0, time1, freq0, freq1], |g, v| {
        graph::tfc_loss(g, [v[0], v[1], v[2], v[3]], tau, weights, denom)
    }))
}

/// Mean negative log-softmax of the true class.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let c = logits.dim(1);
    if let Some(l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {l} out of range for {c} classes")));
    }
    Ok(eval(&[logits], |g, v| graph::cross_entropy(g, v[0], labels)))
}

/// Number of hierarchy levels for `t` steps: halve (rounding up) until one step remains.
pub fn hierarchy_depth(t: usize) -> usize {
    let mut n = 1;
    let mut t = t;
    while t > 1 {
        t = t.div_ceil(2);
        n += 1;
    }
    n
}

/// Graph forms of the losses. Shapes are asserted, not validated.
pub mod graph {
    use super::*;
    use crate::nn::Var;

    /// Cosine similarity matrix `[.., n, n] / tau` of the rows of `x: [.., n, d]`.
    fn similarity(g: &mut Graph, x: Var, tau: f64) -> Var {
        let shape = g.shape(x).to_vec();
        let (n, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let x = g.reshape(x, &[batch, n, d]);
        let u = g.normalize_rows(x);
        let s = g.bmm(u, u, true);
        g.scale(s, 1.0 / tau)
    }

    /// Mean over anchors of `lse(masked row) - s[anchor, positive]` where
    /// `s` is `[G, n, n]`, row `a` pairs with `(a + n/2) mod n`.
    fn paired_contrast(g: &mut Graph, s: Var, denom: Denominator) -> Var {
        let (groups, n) = (g.shape(s)[0], g.shape(s)[1]);
        let half = n / 2;
        let pos = |a: usize| (a + half) % n;
        let mut mask = Vec::with_capacity(groups * n * n);
        for _ in 0..groups {
            for a in 0..n {
                for k in 0..n {
                    let keep = k != a && (denom == Denominator::IncludePositive || k != pos(a));
                    mask.push(keep);
                }
            }
        }
        let lse = g.logsumexp(s, Some(Rc::from(mask)));
        let flat = g.reshape(s, &[groups * n, n]);
        let idx = (0..groups).flat_map(|_| (0..n).map(pos)).collect();
        let p = g.gather(flat, idx);
        let lse = g.reshape(lse, &[groups * n]);
        let terms = g.sub(lse, p);
        g.mean(terms)
    }

    pub fn nt_xent(g: &mut Graph, h0: Var, h1: Var, tau: f64, denom: Denominator) -> Var {
        let z = g.concat(&[h0, h1], 0);
        let s = similarity(g, z, tau);
        paired_contrast(g, s, denom)
    }

    fn instance_term(g: &mut Graph, z0: Var, z1: Var, tau: f64) -> Var {
        // [B, T, D] → [T, 2B, D]
        let a = g.permute(z0, &[1, 0, 2]);
        let b = g.permute(z1, &[1, 0, 2]);
        let z = g.concat(&[a, b], 1);
        let s = similarity(g, z, tau);
        paired_contrast(g, s, Denominator::IncludePositive)
    }

    fn temporal_term(g: &mut Graph, z0: Var, z1: Var, tau: f64) -> Var {
        let z = g.concat(&[z0, z1], 1);
        let s = similarity(g, z, tau);
        paired_contrast(g, s, Denominator::IncludePositive)
    }

    pub fn ts2vec_loss(g: &mut Graph, z0: Var, z1: Var, tau: f64, max_levels: Option<usize>) -> Var {
        let (mut a, mut b) = (z0, z1);
        let batch = g.shape(a)[0];
        if batch < 2 {
            log::warn!("instance contrast needs two series; only the temporal term is used");
        }
        let mut levels = Vec::new();
        loop {
            let t = g.shape(a)[1];
            let mut level = g.constant(Tensor::scalar(0.0));
            if t > 1 {
                let temp = temporal_term(g, a, b, tau);
                level = g.add(level, temp);
            }
            if batch >= 2 {
                let inst = instance_term(g, a, b, tau);
                level = g.add(level, inst);
            }
            let level = g.scale(level, 0.5);
            levels.push(g.reshape(level, &[1]));
            if t == 1 || max_levels.is_some_and(|m| levels.len() >= m) {
                break;
            }
            a = g.max_pool_time(a);
            b = g.max_pool_time(b);
        }
        let n = levels.len();
        let stacked = g.concat(&levels, 0);
        let total = g.sum(stacked);
        g.scale(total, 1.0 / n as f64)
    }

    pub fn mixing_loss(g: &mut Graph, hi: Var, hj: Var, hk: Var, lambda: &[f64], tau: f64) -> Var {
        let b = g.shape(hi)[0];
        let ni = g.normalize_rows(hi);
        let nj = g.normalize_rows(hj);
        let nk = g.normalize_rows(hk);
        let pool = g.concat(&[ni, nj], 0);
        let d = g.shape(pool)[1];
        let nk = g.reshape(nk, &[1, b, d]);
        let pool = g.reshape(pool, &[1, 2 * b, d]);
        let s = g.bmm(nk, pool, true);
        let s = g.scale(s, 1.0 / tau);
        let s = g.reshape(s, &[b, 2 * b]);
        let lse = g.logsumexp(s, None);
        let si = g.gather(s, (0..b).collect());
        let sj = g.gather(s, (b..2 * b).collect());
        let wi = g.constant(Tensor::new(&[b], lambda.to_vec()));
        let wj = g.constant(Tensor::new(&[b], lambda.iter().map(|l| 1.0 - l).collect()));
        let ti = g.mul(wi, si);
        let tj = g.mul(wj, sj);
        let t = g.add(ti, tj);
        let terms = g.sub(lse, t);
        g.mean(terms)
    }

    /// `h = [time0, time1, freq0, freq1]`.
    pub fn tfc_loss(g: &mut Graph, h: [Var; 4], tau: f64, w: TfcWeights, denom: Denominator) -> Var {
        let lt = nt_xent(g, h[0], h[1], tau, denom);
        let lf = nt_xent(g, h[2], h[3], tau, denom);
        let b = g.shape(h[0])[0];
        let nt = g.normalize_rows(h[0]);
        let nf = g.normalize_rows(h[2]);
        let dots = g.mul(nt, nf);
        let total_cos = g.sum(dots);
        // consistency = 1 - mean cosine
        let neg_mean = g.scale(total_cos, -1.0 / b as f64);
        let one = g.constant(Tensor::scalar(1.0));
        let lc = g.add(one, neg_mean);
        let lt = g.scale(lt, w.time);
        let lf = g.scale(lf, w.freq);
        let lc = g.scale(lc, w.consistency);
        let s = g.add(lt, lf);
        g.add(s, lc)
    }

    pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
        let lse = g.logsumexp(logits, None);
        let picked = g.gather(logits, labels.to_vec());
        let terms = g.sub(lse, picked);
        g.mean(terms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn analytic_nt_xent() {
        let h = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let got = nt_xent(&h, &h, 1.0, Denominator::ExcludePositive).unwrap();
        assert!((got - (2f64.ln() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let h = t(&[&[1.0, 0.0]]);
        assert!(nt_xent(&h, &h, 1.0, Denominator::ExcludePositive).is_err());
        let h = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(nt_xent(&h, &h, 0.0, Denominator::ExcludePositive).is_err());
        assert!(cross_entropy(&h, &[0, 2]).is_err());
        assert!(mixing_loss(&h, &h, &h, &[0.5, 1.5], 1.0).is_err());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let z = Tensor::zeros(&[3, 4]);
        assert!((cross_entropy(&z, &[0, 1, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let sharp = t(&[&[50.0, 0.0], &[0.0, 50.0]]);
        assert!(cross_entropy(&sharp, &[0, 1]).unwrap() < 1e-6);
    }

    #[test]
    fn depth_counts() {
        assert_eq!(hierarchy_depth(8), 4);
        assert_eq!(hierarchy_depth(1), 1);
        assert_eq!(hierarchy_depth(5), 4);
    }

    #[test]
    fn single_step_has_no_temporal_term() {
        let z0 = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let got = ts2vec_loss(&z0, &z0, 1.0, None).unwrap();
        // instance only: each anchor sees its positive (sim 1) and two zeros.
        let inst = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((got - inst / 2.0).abs() < 1e-12);
    }
}
