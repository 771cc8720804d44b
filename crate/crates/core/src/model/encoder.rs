//! Streaming encoder: block-causal cached layers followed by bidirectional layers.

use rand_chacha::ChaCha8Rng;

use super::layers::{build_mask, Attention, LayerNorm, Linear, Mlp};
use super::params::{normal_init, Ctx, ParamId, ParamStore};
use super::ModelConfig;
use crate::error::{invalid, Error, Result};
use crate::numerics::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), cfg.d_model),
            attn: Attention::new(ps, rng, &format!("{name}.attn"), cfg.d_model, cfg.n_heads),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), cfg.d_model),
            mlp: Mlp::new(
                ps,
                rng,
                &format!("{name}.mlp"),
                cfg.d_model,
                cfg.ffn_dim,
                cfg.d_model,
            ),
        }
    }

    fn forward(&self, cx: &mut Ctx, x: Var, mask: &Tensor) -> Result<Var> {
        let h = self.ln1.forward(cx, x)?;
        let a = self.attn.forward(cx, h, h, Some(mask))?;
        let x = cx.g.add(x, a)?;
        self.feed_forward(cx, x)
    }

    fn feed_forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.ln2.forward(cx, x)?;
        let m = self.mlp.forward(cx, h)?;
        cx.g.add(x, m)
    }

    /// Process one new chunk against cached keys/values, then append its own.
    fn forward_cached(
        &self,
        cx: &mut Ctx,
        x: Var,
        cache: &mut KvCache,
        valid_total: usize,
    ) -> Result<Var> {
        let h = self.ln1.forward(cx, x)?;
        let q = self.attn.q.forward(cx, h)?;
        let k_new = self.attn.k.forward(cx, h)?;
        let v_new = self.attn.v.forward(cx, h)?;
        let k_new_t = cx.value(k_new).clone();
        let v_new_t = cx.value(v_new).clone();
        let (k, v) = match (&cache.k, &cache.v) {
            (Some(kc), Some(vc)) => {
                let kc = cx.g.constant(kc.clone());
                let vc = cx.g.constant(vc.clone());
                (cx.g.concat(&[kc, k_new], 0)?, cx.g.concat(&[vc, v_new], 0)?)
            }
            _ => (k_new, v_new),
        };
        let rows = cx.value(q).dims2()?.0;
        let cols = cx.value(k).dims2()?.0;
        let mask = build_mask(rows, cols, |_, j| j < valid_total);
        let a = self.attn.attend(cx, q, k, v, Some(&mask))?;
        cache.append(k_new_t, v_new_t)?;
        let x = cx.g.add(x, a)?;
        self.feed_forward(cx, x)
    }
}

/// Cached keys and values of one block-causal layer.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    pub k: Option<Tensor>,
    pub v: Option<Tensor>,
}

impl KvCache {
    fn append(&mut self, k: Tensor, v: Tensor) -> Result<()> {
        self.k = Some(match self.k.take() {
            Some(old) => Tensor::vstack(&[&old, &k])?,
            None => k,
        });
        self.v = Some(match self.v.take() {
            Some(old) => Tensor::vstack(&[&old, &v])?,
            None => v,
        });
        Ok(())
    }

    /// Number of cached rows.
    pub fn len(&self) -> usize {
        self.k.as_ref().map_or(0, |k| k.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Block-causal stack output: padded rows plus the count of real frames.
#[derive(Clone, Copy, Debug)]
pub struct ChunkArOutput {
    pub rows: Var,
    pub valid: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    input: Linear,
    chunk_ar: Vec<EncoderBlock>,
    nar: Vec<EncoderBlock>,
    pub(crate) eost: ParamId,
    ln_f: LayerNorm,
}

impl Encoder {
    pub(crate) fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let input = Linear::new(ps, rng, "enc.in", cfg.d_model, cfg.d_model);
        let chunk_ar = (0..cfg.n_chunkar_blocks)
            .map(|i| EncoderBlock::new(ps, rng, &format!("enc.car.{i}"), cfg))
            .collect();
        let nar = (0..cfg.n_nar_blocks)
            .map(|i| EncoderBlock::new(ps, rng, &format!("enc.nar.{i}"), cfg))
            .collect();
        let eost = ps.add("enc.eost", normal_init(rng, &[2, cfg.d_model], 1.0));
        let ln_f = LayerNorm::new(ps, "enc.ln_f", cfg.d_model);
        Self {
            input,
            chunk_ar,
            nar,
            eost,
            ln_f,
        }
    }

    /// Project frames and add positions starting at `offset`.
    fn embed(&self, cx: &mut Ctx, frames: Tensor, pos: &Tensor, offset: usize) -> Result<Var> {
        let n = frames.dims2()?.0;
        let x = cx.g.constant(frames);
        let x = self.input.forward(cx, x)?;
        let p = cx.g.constant(pos.slice_rows(offset, n)?);
        cx.g.add(x, p)
    }

    /// Block-causal stack over a whole (right-padded) input.
    pub fn chunk_ar(
        &self,
        cx: &mut Ctx,
        cfg: &ModelConfig,
        pos: &Tensor,
        frames: &Tensor,
    ) -> Result<ChunkArOutput> {
        let (n, d) = frames.dims2()?;
        if n == 0 {
            return Err(invalid("empty frame sequence"));
        }
        if d != cfg.d_model {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("frame width {d}, model width {}", cfg.d_model),
            });
        }
        if n > cfg.max_frames() {
            return Err(invalid(format!(
                "{n} frames exceed the {} frame limit",
                cfg.max_frames()
            )));
        }
        let c = cfg.chunk_frames;
        let padded = n.div_ceil(c) * c;
        let frames = pad_rows(frames, padded)?;
        let mut x = self.embed(cx, frames, pos, 0)?;
        let mask = build_mask(padded, padded, |i, j| j / c <= i / c && j < n);
        for block in &self.chunk_ar {
            x = block.forward(cx, x, &mask)?;
        }
        Ok(ChunkArOutput { rows: x, valid: n })
    }

    /// Bidirectional stack with the end-of-stream flag; returns the `valid` real rows.
    pub fn nar(&self, cx: &mut Ctx, rows: Var, valid: usize, eost: bool) -> Result<Var> {
        let n = cx.value(rows).dims2()?.0;
        let table = cx.p(self.eost);
        let flag = cx.g.embedding(table, &vec![eost as usize; n])?;
        let mut x = cx.g.add(rows, flag)?;
        let mask = build_mask(n, n, |_, j| j < valid);
        for block in &self.nar {
            x = block.forward(cx, x, &mask)?;
        }
        let x = self.ln_f.forward(cx, x)?;
        if valid == n {
            Ok(x)
        } else {
            cx.g.slice(x, 0, 0, valid)
        }
    }

    pub fn step(
        &self,
        cx: &mut Ctx,
        cfg: &ModelConfig,
        pos: &Tensor,
        state: &mut StreamingEncState,
        chunk: &Tensor,
        is_last: bool,
    ) -> Result<Var> {
        if state.finished {
            return Err(Error::StreamFinished);
        }
        let (n, _) = chunk.dims2()?;
        let c = cfg.chunk_frames;
        if n == 0 || n > c || (n < c && !is_last) {
            return Err(invalid(format!(
                "chunk of {n} frames (expected {c}; only the last may be shorter)"
            )));
        }
        if state.rows_len() + c > cfg.max_frames() {
            return Err(invalid(format!(
                "stream exceeds the {} frame limit",
                cfg.max_frames()
            )));
        }
        let offset = state.rows_len();
        let valid_total = state.frames_read + n;
        let frames = pad_rows(chunk, c)?;
        let mut x = self.embed(cx, frames, pos, offset)?;
        for (block, cache) in self.chunk_ar.iter().zip(state.caches.iter_mut()) {
            x = block.forward_cached(cx, x, cache, valid_total)?;
        }
        let new_rows = cx.value(x).clone();
        state.rows = Some(match state.rows.take() {
            Some(old) => Tensor::vstack(&[&old, &new_rows])?,
            None => new_rows,
        });
        state.frames_read = valid_total;
        state.chunks_read += 1;
        state.finished = is_last;
        state.last_eost = is_last;
        let rows = cx.g.constant(state.rows.clone().expect("just set"));
        self.nar(cx, rows, valid_total, is_last)
    }
}

fn pad_rows(frames: &Tensor, rows: usize) -> Result<Tensor> {
    let (n, d) = frames.dims2()?;
    if n == rows {
        return Ok(frames.clone());
    }
    let mut data = frames.data().to_vec();
    data.resize(rows * d, 0.0);
    Tensor::new(vec![rows, d], data)
}

/// Per-stream encoder state: block-causal caches, their outputs, and read progress.
#[derive(Clone, Debug)]
pub struct StreamingEncState {
    pub caches: Vec<KvCache>,
    rows: Option<Tensor>,
    pub frames_read: usize,
    pub chunks_read: usize,
    pub finished: bool,
    /// Flag used by the most recent bidirectional pass.
    pub last_eost: bool,
}

impl StreamingEncState {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            caches: vec![KvCache::default(); cfg.n_chunkar_blocks],
            rows: None,
            frames_read: 0,
            chunks_read: 0,
            finished: false,
            last_eost: false,
        }
    }

    fn rows_len(&self) -> usize {
        self.rows.as_ref().map_or(0, |r| r.shape()[0])
    }
}
