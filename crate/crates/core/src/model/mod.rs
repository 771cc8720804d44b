//! The streaming encoder, text decoder, routing gate and mixture-of-experts refiner.

mod config;
mod decoder;
mod encoder;
mod layers;
mod params;
mod refiner;

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::{ModelConfig, RefinerAttention};
pub use encoder::{ChunkArOutput, KvCache, StreamingEncState};
pub use layers::{build_mask, sinusoid_table};
pub use params::{Ctx, ParamId, ParamStore};
pub use refiner::RefinerInputs;

use self::decoder::Decoder;
use self::encoder::Encoder;
use self::layers::Linear;
use self::params::normal_init;
use self::refiner::{Gate, Refiner};
use crate::error::{invalid, Error, Result};
use crate::numerics::{Tensor, Var};

/// Tensor-level encoder results for one training sample.
#[derive(Clone, Debug)]
pub struct EncoderOutputs {
    pub h_offline: Tensor,
    pub h_prefix: Tensor,
    /// Time-mean of `h_offline`.
    pub h_global: Tensor,
}

#[derive(Clone, Debug)]
pub struct DecoderOutputs {
    pub o_dec: Tensor,
    pub logits: Tensor,
}

/// Graph handles of one decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub o_dec: Var,
    pub logits: Var,
}

/// Graph handles of the routing gate.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    /// Pre-sigmoid logits, before noise.
    pub logits: Var,
    /// `P_Eg`; the prefix expert receives `1 − p`.
    pub p: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    gate: Gate,
    refiner: Refiner,
    tok_emb: ParamId,
    head: Linear,
    pos: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut ps = ParamStore::default();
        let encoder = Encoder::new(&mut ps, &mut rng, &config);
        let decoder = Decoder::new(&mut ps, &mut rng, &config);
        let tok_emb = ps.add(
            "tok_emb",
            normal_init(&mut rng, &[config.vocab_size, config.d_model], 1.0),
        );
        let head = Linear::new(&mut ps, &mut rng, "head", config.d_model, config.vocab_size);
        let gate = Gate::new(&mut ps, &mut rng, &config);
        let refiner = Refiner::new(&mut ps, &mut rng, &config);
        let pos = sinusoid_table(
            config.max_frames().max(config.max_target_len + 1),
            config.d_model,
        );
        Ok(Self {
            config,
            params: ps,
            encoder,
            decoder,
            gate,
            refiner,
            tok_emb,
            head,
            pos,
        })
    }

    /// Parameters of the input projection and the block-causal stack (frozen in stage 2).
    pub fn is_chunk_ar_param(name: &str) -> bool {
        name.starts_with("enc.in.") || name.starts_with("enc.car.")
    }

    pub fn is_gate_param(name: &str) -> bool {
        name.starts_with("gate.")
    }

    pub fn is_refiner_param(name: &str) -> bool {
        name.starts_with("ref.")
    }

    pub fn trainable_mask(&self, keep: impl Fn(&str) -> bool) -> Vec<bool> {
        self.params
            .ids()
            .map(|id| keep(self.params.name(id)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        self.params.load(path)
    }

    // ---- graph-level building blocks -------------------------------------------------

    pub fn chunk_ar(&self, cx: &mut Ctx, frames: &Tensor) -> Result<ChunkArOutput> {
        self.encoder.chunk_ar(cx, &self.config, &self.pos, frames)
    }

    /// Bidirectional layers over the first `rows_len` block-causal rows, of which `valid` are real.
    pub fn nar(
        &self,
        cx: &mut Ctx,
        car: ChunkArOutput,
        rows_len: usize,
        valid: usize,
        eost: bool,
    ) -> Result<Var> {
        let total = cx.value(car.rows).dims2()?.0;
        let rows = if rows_len == total {
            car.rows
        } else {
            cx.g.slice(car.rows, 0, 0, rows_len)?
        };
        self.encoder.nar(cx, rows, valid, eost)
    }

    /// One-shot encoding of the whole input.
    pub fn encode(&self, cx: &mut Ctx, frames: &Tensor, eost: bool) -> Result<Var> {
        let car = self.chunk_ar(cx, frames)?;
        let rows_len = cx.value(car.rows).dims2()?.0;
        self.nar(cx, car, rows_len, car.valid, eost)
    }

    /// Token embeddings plus positions.
    pub fn embed_tokens(&self, cx: &mut Ctx, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.config.max_target_len + 1 {
            return Err(invalid(format!(
                "{} target positions exceed model.max_target_len",
                ids.len()
            )));
        }
        let table = cx.p(self.tok_emb);
        let x = cx.g.embedding(table, ids)?;
        let p = cx.g.constant(self.pos.slice_rows(0, ids.len())?);
        cx.g.add(x, p)
    }

    pub fn lm_head(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        self.head.forward(cx, x)
    }

    /// Teacher-forced decoder pass; `y_in` starts with BOS.
    pub fn decode(
        &self,
        cx: &mut Ctx,
        h: Var,
        memory_keep: Option<&[bool]>,
        y_in: &[usize],
    ) -> Result<DecoderVars> {
        if y_in.is_empty() {
            return Err(invalid("empty decoder input"));
        }
        if let Some(keep) = memory_keep {
            let m = cx.value(h).dims2()?.0;
            if keep.len() != m || !keep.iter().any(|k| *k) {
                return Err(invalid(
                    "memory mask must cover every row and keep at least one",
                ));
            }
        }
        let x = self.embed_tokens(cx, y_in)?;
        let o_dec = self.decoder.forward(cx, x, h, memory_keep)?;
        let logits = self.lm_head(cx, o_dec)?;
        Ok(DecoderVars { o_dec, logits })
    }

    /// `p_i = sigmoid(MLP(o_dec_i) + ε_i)` with `ε_i ~ N(0, σ²)`; no noise is drawn when `σ = 0`.
    pub fn gate(
        &self,
        cx: &mut Ctx,
        o_dec: Var,
        sigma: f64,
        rng: &mut impl Rng,
    ) -> Result<GateVars> {
        if !(sigma >= 0.0) {
            return Err(invalid(format!("noise sigma must be >= 0, got {sigma}")));
        }
        let logits = self.gate.logits(cx, o_dec)?;
        let z = if sigma > 0.0 {
            let n = cx.value(logits).len();
            let normal = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
            let noise =
                cx.g.constant(Tensor::vector((0..n).map(|_| normal.sample(rng)).collect()));
            cx.g.add(logits, noise)?
        } else {
            logits
        };
        let p = cx.g.sigmoid(z);
        Ok(GateVars { logits, p })
    }

    /// Refiner logits; position `i` consumes `y_in[i]` and predicts the next target.
    pub fn refiner(
        &self,
        cx: &mut Ctx,
        y_in: &[usize],
        o_dec: Var,
        h_prefix: Var,
        h_global: Var,
        p: Var,
    ) -> Result<Var> {
        let n = y_in.len();
        let od = cx.value(o_dec).dims2()?.0;
        let pn = cx.value(p).shape().to_vec();
        let gd = cx.value(h_global).shape().to_vec();
        if od != n || pn != [n] || gd != [self.config.d_model] {
            return Err(Error::Shape {
                op: "refiner",
                detail: format!("{n} inputs, o_dec rows {od}, p {pn:?}, h_global {gd:?}"),
            });
        }
        let x = self.embed_tokens(cx, y_in)?;
        let hidden = self.refiner.forward(
            cx,
            &RefinerInputs {
                x,
                o_dec,
                h_prefix,
                h_global,
                p,
            },
        )?;
        self.lm_head(cx, hidden)
    }

    // ---- tensor-level conveniences ----------------------------------------------------

    pub fn encode_offline(&self, frames: &Tensor, eost: bool) -> Result<Tensor> {
        let mut cx = Ctx::eval(&self.params);
        let h = self.encode(&mut cx, frames, eost)?;
        Ok(cx.value(h).clone())
    }

    /// Offline encoding of the whole input (EoSt set), the prefix of `prefix_frames`
    /// frames (EoSt set only when the prefix is the whole input), and the pooled global vector.
    pub fn encoder_outputs(&self, frames: &Tensor, prefix_frames: usize) -> Result<EncoderOutputs> {
        let total = frames.dims2()?.0;
        if prefix_frames == 0 || prefix_frames > total {
            return Err(invalid(format!(
                "prefix of {prefix_frames} frames for input of {total}"
            )));
        }
        let mut cx = Ctx::eval(&self.params);
        let car = self.chunk_ar(&mut cx, frames)?;
        let padded = cx.value(car.rows).dims2()?.0;
        let h_off = self.nar(&mut cx, car, padded, total, true)?;
        let h_glob = cx.g.mean_axis(h_off, 0)?;
        let h_pre = if prefix_frames == total {
            h_off
        } else {
            let rows = prefix_frames.div_ceil(self.config.chunk_frames) * self.config.chunk_frames;
            if rows != prefix_frames {
                return Err(invalid("prefix must end on a chunk boundary"));
            }
            self.nar(&mut cx, car, rows, prefix_frames, false)?
        };
        Ok(EncoderOutputs {
            h_offline: cx.value(h_off).clone(),
            h_prefix: cx.value(h_pre).clone(),
            h_global: cx.value(h_glob).clone(),
        })
    }

    /// Feed one chunk: block-causal layers see only the new frames (against their caches),
    /// bidirectional layers recompute over everything received. Returns the prefix states.
    pub fn encode_stream_step(
        &self,
        state: &mut StreamingEncState,
        chunk: &Tensor,
        is_last: bool,
    ) -> Result<Tensor> {
        let mut cx = Ctx::eval(&self.params);
        let h = self
            .encoder
            .step(&mut cx, &self.config, &self.pos, state, chunk, is_last)?;
        Ok(cx.value(h).clone())
    }

    pub fn decode_teacher_forced(&self, h: &Tensor, y_in: &[usize]) -> Result<DecoderOutputs> {
        self.decode_masked(h, None, y_in)
    }

    pub fn decode_masked(
        &self,
        h: &Tensor,
        memory_keep: Option<&[bool]>,
        y_in: &[usize],
    ) -> Result<DecoderOutputs> {
        let mut cx = Ctx::eval(&self.params);
        let hv = cx.g.constant(h.clone());
        let out = self.decode(&mut cx, hv, memory_keep, y_in)?;
        Ok(DecoderOutputs {
            o_dec: cx.value(out.o_dec).clone(),
            logits: cx.value(out.logits).clone(),
        })
    }

    /// Noise-free gate scores for each row of `o_dec`.
    pub fn gate_scores(&self, o_dec: &Tensor) -> Result<Vec<f64>> {
        self.gate_scores_noisy(o_dec, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
    }

    pub fn gate_scores_noisy(
        &self,
        o_dec: &Tensor,
        sigma: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        let mut cx = Ctx::eval(&self.params);
        let o = cx.g.constant(o_dec.clone());
        let gv = self.gate(&mut cx, o, sigma, rng)?;
        Ok(cx.value(gv.p).data().to_vec())
    }

    pub fn refiner_forward(
        &self,
        y_in: &[usize],
        o_dec: &Tensor,
        h_prefix: &Tensor,
        h_global: &Tensor,
        p: &[f64],
    ) -> Result<Tensor> {
        let mut cx = Ctx::eval(&self.params);
        let o = cx.g.constant(o_dec.clone());
        let hp = cx.g.constant(h_prefix.clone());
        let hg = cx.g.constant(h_global.clone());
        let pv = cx.g.constant(Tensor::vector(p.to_vec()));
        let logits = self.refiner(&mut cx, y_in, o, hp, hg, pv)?;
        Ok(cx.value(logits).clone())
    }
}
