//! Read/write agents over a streaming encoder.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{Model, StreamingEncState};
use crate::numerics::Tensor;
use crate::synthdata::{BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Action {
    Read,
    Write,
}

/// One line of the JSONL trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Source frames read when the event happened.
    pub t: usize,
    pub action: Action,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub token: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p: Option<f64>,
    pub lambda: f64,
    /// Seconds since the stream started, from a monotonic clock.
    pub wall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamResult {
    /// Emitted content tokens (EOS excluded).
    pub tokens: Vec<usize>,
    /// Frames read when each content token was written.
    pub delays: Vec<usize>,
    /// Wall-clock seconds at each content write.
    pub write_times: Vec<f64>,
    pub source_frames: usize,
    pub truncated: bool,
    pub trace: Vec<TraceEvent>,
}

/// Per-stream state of the threshold agent.
pub struct StreamSession<'a> {
    model: &'a Model,
    frames: &'a Tensor,
    enc: StreamingEncState,
    h: Tensor,
    pub emitted: Vec<usize>,
    pub delays: Vec<usize>,
    pub eost_seen: bool,
    pub lambda: f64,
    /// Logits and gate score of the most recent decision.
    pending: Option<(Vec<f64>, f64)>,
}

impl<'a> StreamSession<'a> {
    /// Start a stream and read its first chunk.
    pub fn new(model: &'a Model, frames: &'a Tensor, lambda: f64) -> Result<Self> {
        let (n, _) = frames.dims2()?;
        if n == 0 {
            return Err(invalid("empty input stream"));
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(invalid(format!(
                "threshold must lie in (0, 1), got {lambda}"
            )));
        }
        let mut s = Self {
            model,
            frames,
            enc: StreamingEncState::new(&model.config),
            h: Tensor::zeros(&[0, 0]),
            emitted: Vec::new(),
            delays: Vec::new(),
            eost_seen: false,
            lambda,
            pending: None,
        };
        s.read()?;
        Ok(s)
    }

    pub fn frames_read(&self) -> usize {
        self.enc.frames_read
    }

    pub fn total_frames(&self) -> usize {
        self.frames.dims2().map(|d| d.0).unwrap_or(0)
    }

    /// Current prefix encoding.
    pub fn h_prefix(&self) -> &Tensor {
        &self.h
    }

    /// Consume the next chunk, flagging end-of-stream on the final one.
    pub fn read(&mut self) -> Result<()> {
        let total = self.total_frames();
        let start = self.enc.frames_read;
        let len = self.model.config.chunk_frames.min(total - start);
        let is_last = start + len == total;
        let chunk = self.frames.slice_rows(start, len)?;
        self.h = self
            .model
            .encode_stream_step(&mut self.enc, &chunk, is_last)?;
        self.eost_seen = is_last;
        self.pending = None;
        Ok(())
    }

    /// Score the next target position on the current prefix.
    pub fn score(&mut self) -> Result<f64> {
        let mut y_in = Vec::with_capacity(self.emitted.len() + 1);
        y_in.push(BOS);
        y_in.extend_from_slice(&self.emitted);
        let out = self.model.decode_teacher_forced(&self.h, &y_in)?;
        let last = y_in.len() - 1;
        let o_last = out.o_dec.slice_rows(last, 1)?;
        let p = self.model.gate_scores(&o_last)?[0];
        self.pending = Some((out.logits.row(last).to_vec(), p));
        Ok(p)
    }

    /// Greedy token at the next position (uses the logits of the last [`score`](Self::score)).
    pub fn write(&mut self) -> Result<usize> {
        if self.pending.is_none() {
            self.score()?;
        }
        let (logits, _) = self.pending.take().expect("scored above");
        let tok = argmax(&logits);
        if tok != EOS {
            self.emitted.push(tok);
            self.delays.push(self.enc.frames_read);
        }
        Ok(tok)
    }
}

/// Index of the largest value (first on ties).
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Threshold rule: write when `p < λ`, or unconditionally once the stream has ended.
pub fn decide(p: f64, lambda: f64, eost_seen: bool) -> Action {
    if eost_seen || p < lambda {
        Action::Write
    } else {
        Action::Read
    }
}

/// Decide the next action from the gate score at the next target position.
pub fn agent_step(session: &mut StreamSession) -> Result<(Action, f64)> {
    let p = session.score()?;
    Ok((decide(p, session.lambda, session.eost_seen), p))
}

/// Run the threshold agent to EOS or `max_len` content tokens.
pub fn run_stream(
    model: &Model,
    frames: &Tensor,
    lambda: f64,
    max_len: usize,
) -> Result<StreamResult> {
    let clock = Instant::now();
    let mut s = StreamSession::new(model, frames, lambda)?;
    let mut trace = vec![TraceEvent {
        t: s.frames_read(),
        action: Action::Read,
        token: None,
        p: None,
        lambda,
        wall: clock.elapsed().as_secs_f64(),
    }];
    let mut write_times = Vec::new();
    let mut truncated = false;
    loop {
        if s.emitted.len() >= max_len {
            truncated = true;
            break;
        }
        let (action, p) = agent_step(&mut s)?;
        match action {
            Action::Read => s.read()?,
            Action::Write => {
                let tok = s.write()?;
                let wall = clock.elapsed().as_secs_f64();
                trace.push(TraceEvent {
                    t: s.frames_read(),
                    action,
                    token: Some(tok),
                    p: Some(p),
                    lambda,
                    wall,
                });
                if tok == EOS {
                    break;
                }
                write_times.push(wall);
                continue;
            }
        }
        trace.push(TraceEvent {
            t: s.frames_read(),
            action,
            token: None,
            p: Some(p),
            lambda,
            wall: clock.elapsed().as_secs_f64(),
        });
    }
    Ok(StreamResult {
        tokens: s.emitted,
        delays: s.delays,
        write_times,
        source_frames: frames.dims2()?.0,
        truncated,
        trace,
    })
}

/// Greedy decoding of the one-shot encoding of the whole input.
pub fn greedy_offline(
    model: &Model,
    frames: &Tensor,
    max_len: usize,
) -> Result<(Vec<usize>, bool)> {
    let h = model.encode_offline(frames, true)?;
    greedy_from(model, &h, &[], max_len)
}

/// Continue greedy decoding on fixed encoder states after `emitted`; returns content tokens and a truncation flag.
fn greedy_from(
    model: &Model,
    h: &Tensor,
    emitted: &[usize],
    max_len: usize,
) -> Result<(Vec<usize>, bool)> {
    let mut y: Vec<usize> = emitted.to_vec();
    while y.len() < max_len {
        let tok = next_token(model, h, &y)?;
        if tok == EOS {
            return Ok((y, false));
        }
        y.push(tok);
    }
    Ok((y, true))
}

fn next_token(model: &Model, h: &Tensor, emitted: &[usize]) -> Result<usize> {
    let mut y_in = vec![BOS];
    y_in.extend_from_slice(emitted);
    let out = model.decode_teacher_forced(h, &y_in)?;
    Ok(argmax(out.logits.row(emitted.len())))
}

/// Delays (in chunks) of the wait-k schedule for `source_chunks` chunks and `targets` tokens.
///
/// Nothing is written before chunk `k`; from then on each chunk adds `ratio` to an
/// accumulator and its integer part is written. Leftover tokens are flushed at the end.
pub fn waitk_schedule(
    source_chunks: usize,
    targets: usize,
    k: usize,
    ratio: f64,
) -> Result<Vec<usize>> {
    if k == 0 || !(ratio > 0.0 && ratio.is_finite()) || source_chunks == 0 {
        return Err(invalid(format!(
            "wait-k needs k >= 1, ratio > 0 and a non-empty source (k={k}, ratio={ratio})"
        )));
    }
    let mut delays = Vec::with_capacity(targets);
    let mut acc = 0.0;
    for c in k.min(source_chunks)..=source_chunks {
        acc += ratio;
        while acc >= 1.0 && delays.len() < targets {
            delays.push(c);
            acc -= 1.0;
        }
    }
    delays.resize(targets, source_chunks);
    Ok(delays)
}

/// Wait-k over a token oracle `next(chunks_read, emitted) -> token`; stops at EOS or `max_len`.
pub fn waitk_run<F>(
    source_chunks: usize,
    k: usize,
    ratio: f64,
    max_len: usize,
    mut next: F,
) -> Result<(Vec<usize>, Vec<usize>)>
where
    F: FnMut(usize, &[usize]) -> Result<usize>,
{
    let plan = waitk_schedule(source_chunks, max_len, k, ratio)?;
    let mut tokens = Vec::new();
    let mut delays = Vec::new();
    for c in plan {
        let tok = next(c, &tokens)?;
        if tok == EOS {
            break;
        }
        tokens.push(tok);
        delays.push(c);
    }
    Ok((tokens, delays))
}

/// Wait-k with the model's decoder re-run on the available prefix at every write.
/// Delays are returned in frames.
pub fn waitk_model_run(
    model: &Model,
    frames: &Tensor,
    k: usize,
    ratio: f64,
    max_len: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let total = frames.dims2()?.0;
    let chunk = model.config.chunk_frames;
    let n_chunks = total.div_ceil(chunk);
    let mut enc = StreamingEncState::new(&model.config);
    let mut h = None;
    let (tokens, delays) = waitk_run(n_chunks, k, ratio, max_len, |c, emitted| {
        while enc.chunks_read < c {
            let start = enc.frames_read;
            let len = chunk.min(total - start);
            let piece = frames.slice_rows(start, len)?;
            h = Some(model.encode_stream_step(&mut enc, &piece, start + len == total)?);
        }
        next_token(model, h.as_ref().expect("at least one chunk"), emitted)
    })?;
    let delays = delays.into_iter().map(|c| (c * chunk).min(total)).collect();
    Ok((tokens, delays))
}

/// First violation of the monotonicity property.
#[derive(Clone, Debug, PartialEq)]
pub struct Counterexample {
    pub target: usize,
    pub higher_lambda: f64,
    pub lower_lambda: f64,
    pub time_higher: usize,
    pub time_lower: usize,
}

/// Emission times of the threshold rule under a history-free score `p(t, i)`,
/// with `t` the number of reads so far (1-based) and `i` the 0-based target index.
pub fn emission_times(
    p: impl Fn(usize, usize) -> f64,
    reads: usize,
    targets: usize,
    lambda: f64,
) -> Vec<usize> {
    let mut t = 1;
    let mut out = Vec::with_capacity(targets);
    while out.len() < targets {
        let i = out.len();
        if decide(p(t, i), lambda, t >= reads) == Action::Write {
            out.push(t);
        } else {
            t += 1;
        }
    }
    out
}

/// Check that emission times never increase when λ grows. Returns every λ's schedule on success.
pub fn threshold_monotonicity_check(
    p: impl Fn(usize, usize) -> f64,
    reads: usize,
    targets: usize,
    lambdas: &[f64],
) -> std::result::Result<Vec<(f64, Vec<usize>)>, Counterexample> {
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let runs: Vec<(f64, Vec<usize>)> = sorted
        .iter()
        .map(|l| (*l, emission_times(&p, reads, targets, *l)))
        .collect();
    for pair in runs.windows(2) {
        let (lo, lo_t) = &pair[0];
        let (hi, hi_t) = &pair[1];
        for i in 0..targets {
            if hi_t[i] > lo_t[i] {
                return Err(Counterexample {
                    target: i,
                    higher_lambda: *hi,
                    lower_lambda: *lo,
                    time_higher: hi_t[i],
                    time_lower: lo_t[i],
                });
            }
        }
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_rule() {
        assert_eq!(decide(0.3, 0.5, false), Action::Write);
        assert_eq!(decide(0.7, 0.5, false), Action::Read);
        assert_eq!(decide(0.99, 0.5, true), Action::Write);
    }

    #[test]
    fn waitk_examples() {
        assert_eq!(waitk_schedule(4, 4, 1, 1.0).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(waitk_schedule(5, 5, 2, 1.0).unwrap(), vec![2, 3, 4, 5, 5]);
        assert_eq!(waitk_schedule(6, 3, 1, 0.5).unwrap(), vec![2, 4, 6]);
        assert!(waitk_schedule(4, 4, 0, 1.0).is_err());
    }

    #[test]
    fn constant_oracle() {
        let p = |_: usize, _: usize| 0.5;
        assert_eq!(emission_times(p, 6, 3, 0.6), vec![1, 1, 1]);
        assert_eq!(emission_times(p, 6, 3, 0.4), vec![6, 6, 6]);
    }

    #[test]
    fn single_lambda_is_vacuous() {
        assert!(threshold_monotonicity_check(|t, i| (t + i) as f64 / 20.0, 6, 6, &[0.5]).is_ok());
    }

    #[test]
    fn trace_serializes_without_empty_fields() {
        let e = TraceEvent {
            t: 4,
            action: Action::Read,
            token: None,
            p: Some(0.75),
            lambda: 0.5,
            wall: 0.0,
        };
        let s = serde_json::to_string(&e).unwrap();
        assert_eq!(
            s,
            r#"{"t":4,"action":"READ","p":0.75,"lambda":0.5,"wall":0.0}"#
        );
    }
}
