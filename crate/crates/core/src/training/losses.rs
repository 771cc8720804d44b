//! Training objectives. Every cross-entropy term is the mean over the positions it counts.

use crate::error::{invalid, Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::synthdata::PAD;

/// Loss components of one stage-2 step, before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub offline: f64,
    pub refiner: f64,
    pub prefix: f64,
    pub norm: f64,
}

/// Weights of the refiner, prefix and normalization terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub offline: f64,
    pub refiner: f64,
    pub prefix: f64,
    pub norm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            offline: 1.0,
            refiner: 0.2,
            prefix: 0.2,
            norm: 0.01,
        }
    }
}

/// Mean NLL over the positions where `keep` is set; a constant zero when none are.
pub fn masked_nll(g: &mut Graph, logits: Var, targets: &[usize], keep: &[bool]) -> Result<Var> {
    if keep.len() != targets.len() {
        return Err(invalid(format!(
            "{} mask entries for {} targets",
            keep.len(),
            targets.len()
        )));
    }
    let count = keep.iter().filter(|k| **k).count();
    if count == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let nll = g.cross_entropy(logits, targets)?;
    if count == keep.len() {
        return g.mean_axis(nll, 0);
    }
    let m = g.constant(Tensor::vector(
        keep.iter().map(|k| if *k { 1.0 } else { 0.0 }).collect(),
    ));
    let kept = g.mul(nll, m)?;
    let s = g.sum(kept);
    Ok(g.scale(s, 1.0 / count as f64))
}

/// Mean cross-entropy over every non-pad target (EOS included).
pub fn offline_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let keep: Vec<bool> = targets.iter().map(|t| *t != PAD).collect();
    masked_nll(g, logits, targets, &keep)
}

/// Same reduction as [`offline_loss`], applied to refiner logits.
pub fn refiner_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    offline_loss(g, logits, targets)
}

/// NLL restricted to positions whose gate score is below `lambda`.
pub fn prefix_loss(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    p: &[f64],
    lambda: f64,
) -> Result<Var> {
    if p.len() != targets.len() {
        return Err(invalid(format!(
            "{} gate scores for {} targets",
            p.len(),
            targets.len()
        )));
    }
    let keep: Vec<bool> = targets
        .iter()
        .zip(p)
        .map(|(t, s)| *t != PAD && *s < lambda)
        .collect();
    masked_nll(g, logits, targets, &keep)
}

/// `(min(l_p, l_b)·0.5 + (l_g − l_p)) / l_g`.
pub fn norm_target(l_p: usize, l_g: usize, l_b: usize) -> Result<f64> {
    if l_g == 0 {
        return Err(invalid("norm target of an empty input"));
    }
    if l_p > l_g {
        return Err(invalid(format!("prefix {l_p} longer than input {l_g}")));
    }
    Ok((l_p.min(l_b) as f64 * 0.5 + (l_g - l_p) as f64) / l_g as f64)
}

/// Smooth-L1 between the mean of the gate scores `p` and `target`.
pub fn norm_loss(g: &mut Graph, p: Var, target: f64) -> Result<Var> {
    let mean = g.mean_axis(p, 0)?;
    Ok(g.smooth_l1(mean, target))
}

fn check_finite(parts: &LossParts) -> Result<()> {
    for (name, v) in [
        ("offline", parts.offline),
        ("refiner", parts.refiner),
        ("prefix", parts.prefix),
        ("norm", parts.norm),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    Ok(())
}

/// `w_o·L_off + w_r·L_ref + w_p·L_pre + w_n·L_norm`; non-finite parts are an error.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    check_finite(parts)?;
    Ok(w.offline * parts.offline
        + w.refiner * parts.refiner
        + w.prefix * parts.prefix
        + w.norm * parts.norm)
}

/// Graph form of [`total_loss`]; terms with zero weight are left out of the record.
pub fn combine(g: &mut Graph, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (v, w) in terms {
        if *w == 0.0 {
            continue;
        }
        let s = g.scale(*v, *w);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}
