//! Latency and quality metrics, and the threshold sweep.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::model::Model;
use crate::policy::{greedy_offline, run_stream};
use crate::synthdata::{FramedDataset, EOS};

/// Delays of one hypothesis, all in source units.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRecord {
    pub delays: Vec<f64>,
    pub source_len: f64,
    pub ref_len: usize,
}

impl LatencyRecord {
    pub fn hyp_len(&self) -> usize {
        self.delays.len()
    }

    fn validate(&self) -> Result<()> {
        if self.delays.is_empty() {
            return Err(invalid("latency of an empty hypothesis"));
        }
        if !(self.source_len > 0.0) {
            return Err(invalid("source length must be > 0"));
        }
        if self.delays.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("delays must be non-decreasing"));
        }
        Ok(())
    }

    /// Index count up to and including the first delay that covers the full source.
    fn tau(&self) -> usize {
        self.delays
            .iter()
            .position(|d| *d >= self.source_len)
            .map_or(self.delays.len(), |i| i + 1)
    }

    fn lagging(&self, delays: &[f64], rate_len: usize) -> f64 {
        let tau = self.tau();
        let step = self.source_len / rate_len as f64;
        let sum: f64 = delays[..tau]
            .iter()
            .enumerate()
            .map(|(i, d)| d - i as f64 * step)
            .sum();
        sum / tau as f64
    }
}

/// `AL = (1/τ) Σ_{i≤τ} [d_i − (i−1)·|X|/|Ŷ|]`, `τ` the first index with `d_i = |X|`.
pub fn average_lagging(rec: &LatencyRecord) -> Result<f64> {
    rec.validate()?;
    Ok(rec.lagging(&rec.delays, rec.hyp_len()))
}

/// AL with the oracle rate `|X| / max(|Y|, |Ŷ|)`.
pub fn laal(rec: &LatencyRecord) -> Result<f64> {
    rec.validate()?;
    Ok(rec.lagging(&rec.delays, rec.hyp_len().max(rec.ref_len)))
}

/// AL computed on delays that also count elapsed compute time, converted with
/// `units_per_second` source units per second. `τ` is taken from the plain delays.
/// Returns `(AL, AL_CA)`.
pub fn computation_aware(
    rec: &LatencyRecord,
    write_times: &[f64],
    units_per_second: f64,
) -> Result<(f64, f64)> {
    rec.validate()?;
    if write_times.len() != rec.delays.len() {
        return Err(invalid(format!(
            "{} timestamps for {} writes",
            write_times.len(),
            rec.delays.len()
        )));
    }
    if write_times.iter().any(|t| !(*t >= 0.0)) || write_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid(
            "write timestamps must be non-negative and monotonic",
        ));
    }
    let ca: Vec<f64> = rec
        .delays
        .iter()
        .zip(write_times)
        .map(|(d, t)| d + t * units_per_second)
        .collect();
    Ok((
        rec.lagging(&rec.delays, rec.hyp_len()),
        rec.lagging(&ca, rec.hyp_len()),
    ))
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 on token ids, in `[0, 100]`.
///
/// Orders with no matches use `1 / (total + 1)`; the brevity penalty is
/// `exp(1 − r/c)` when the hypotheses are shorter than the references.
pub fn bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    if hyps.is_empty() {
        return Err(invalid("BLEU of an empty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(invalid(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            for (g, k) in &hc {
                matches[n - 1] += (*k).min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| {
            let p = if matches[i] == 0 {
                1.0 / (totals[i] as f64 + 1.0)
            } else {
                matches[i] as f64 / totals[i] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / 4.0;
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_p.exp())
}

/// Position-wise matches of `hyp + [EOS]` against `reference` (which ends in EOS).
pub fn token_matches(hyp: &[usize], reference: &[usize]) -> usize {
    hyp.iter()
        .chain(std::iter::once(&EOS))
        .zip(reference)
        .filter(|(a, b)| a == b)
        .count()
}

/// Corpus token accuracy: total matches over total reference positions (EOS included).
pub fn token_accuracy(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    if hyps.is_empty() || hyps.len() != refs.len() {
        return Err(invalid("token accuracy needs equal, non-zero counts"));
    }
    let m: usize = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| token_matches(h, r))
        .sum();
    let n: usize = refs.iter().map(Vec::len).sum();
    Ok(m as f64 / n.max(1) as f64)
}

/// One row of the quality/latency curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub lambda: f64,
    /// Token accuracy in `[0, 1]`.
    pub quality: f64,
    pub bleu: f64,
    #[serde(rename = "AL")]
    pub al: f64,
    #[serde(rename = "LAAL")]
    pub laal: f64,
    pub wall_ms_per_token: f64,
    pub n_samples: usize,
    /// Fraction of emitted tokens whose delay lies within `[lag − 1, lag + 2]` source tokens of the target's true lag.
    pub delay_in_band: f64,
    pub truncated: usize,
}

/// Per-sample outcome of one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleOutcome {
    pub id: u64,
    pub tokens: Vec<usize>,
    /// Delays in source tokens.
    pub delays: Vec<f64>,
    pub al: f64,
    pub laal: f64,
}

fn summarize(
    lambda: f64,
    data: &FramedDataset,
    outcomes: &[SampleOutcome],
    wall_s: f64,
) -> Result<CurvePoint> {
    let hyps: Vec<Vec<usize>> = outcomes.iter().map(|o| o.tokens.clone()).collect();
    let refs: Vec<Vec<usize>> = data.samples.iter().map(|s| s.target.clone()).collect();
    let content_refs: Vec<Vec<usize>> = data.samples.iter().map(|s| s.content().to_vec()).collect();
    let n = outcomes.len() as f64;
    let emitted: usize = hyps.iter().map(Vec::len).sum();
    let (mut in_band, mut counted) = (0usize, 0usize);
    for (o, s) in outcomes.iter().zip(&data.samples) {
        for (d, lag) in o.delays.iter().zip(&s.true_lag) {
            counted += 1;
            let ex = d - *lag as f64;
            if (-1.0..=2.0).contains(&ex) {
                in_band += 1;
            }
        }
    }
    Ok(CurvePoint {
        lambda,
        quality: token_accuracy(&hyps, &refs)?,
        bleu: bleu(&hyps, &content_refs)?,
        al: outcomes.iter().map(|o| o.al).sum::<f64>() / n,
        laal: outcomes.iter().map(|o| o.laal).sum::<f64>() / n,
        wall_ms_per_token: 1e3 * wall_s / emitted.max(1) as f64,
        n_samples: outcomes.len(),
        delay_in_band: in_band as f64 / counted.max(1) as f64,
        truncated: 0,
    })
}

fn outcome(
    id: u64,
    tokens: Vec<usize>,
    delays: Vec<f64>,
    source_len: f64,
    ref_len: usize,
) -> Result<SampleOutcome> {
    // an empty hypothesis lags by the whole source
    let (al, laal) = if delays.is_empty() {
        (source_len, source_len)
    } else {
        let rec = LatencyRecord {
            delays: delays.clone(),
            source_len,
            ref_len,
        };
        (average_lagging(&rec)?, laal(&rec)?)
    };
    Ok(SampleOutcome {
        id,
        tokens,
        delays,
        al,
        laal,
    })
}

/// Run the threshold agent on every sample at one `lambda`.
pub fn evaluate_lambda(
    model: &Model,
    data: &FramedDataset,
    lambda: f64,
    max_len: usize,
) -> Result<(CurvePoint, Vec<SampleOutcome>)> {
    let k = data.spec.frames_per_token as f64;
    let clock = Instant::now();
    let mut outcomes = Vec::with_capacity(data.len());
    let mut truncated = 0;
    for (s, f) in data.samples.iter().zip(&data.frames) {
        let r = run_stream(model, f, lambda, max_len)?;
        truncated += r.truncated as usize;
        let delays = r.delays.iter().map(|d| *d as f64 / k).collect();
        outcomes.push(outcome(
            s.id,
            r.tokens,
            delays,
            s.source.len() as f64,
            s.content().len(),
        )?);
    }
    let mut point = summarize(lambda, data, &outcomes, clock.elapsed().as_secs_f64())?;
    point.truncated = truncated;
    Ok((point, outcomes))
}

/// Offline greedy decoding of every sample, reported as the `λ = 0` row.
pub fn evaluate_offline(
    model: &Model,
    data: &FramedDataset,
    max_len: usize,
) -> Result<(CurvePoint, Vec<SampleOutcome>)> {
    let clock = Instant::now();
    let mut outcomes = Vec::with_capacity(data.len());
    let mut truncated = 0;
    for (s, f) in data.samples.iter().zip(&data.frames) {
        let (tokens, cut) = greedy_offline(model, f, max_len)?;
        truncated += cut as usize;
        let x = s.source.len() as f64;
        let delays = vec![x; tokens.len()];
        outcomes.push(outcome(s.id, tokens, delays, x, s.content().len())?);
    }
    let mut point = summarize(0.0, data, &outcomes, clock.elapsed().as_secs_f64())?;
    point.truncated = truncated;
    Ok((point, outcomes))
}

/// One curve point per λ, sorted by λ descending.
pub fn sweep(
    model: &Model,
    data: &FramedDataset,
    lambdas: &[f64],
    max_len: usize,
) -> Result<Vec<CurvePoint>> {
    if data.is_empty() {
        return Err(invalid("sweep over an empty dataset"));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted
        .into_iter()
        .map(|l| evaluate_lambda(model, data, l, max_len).map(|r| r.0))
        .collect()
}

pub const CSV_HEADER: &str = "lambda,quality,AL,LAAL,wall_ms_per_token,n_samples";

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            p.lambda, p.quality, p.al, p.laal, p.wall_ms_per_token, p.n_samples
        );
    }
    out
}
