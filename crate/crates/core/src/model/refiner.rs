//! Routing gate and the dual-expert refiner.
//!
//! Each refiner block runs three sub-layers:
//!
//! 1. previous-output attention: position `i` reads decoder outputs `o_dec[<i]`
//!    (plus a fixed null slot so position 0 has something to attend to);
//! 2. the expert mixture `x + p·E_g(x̂, H_global) + (1 − p)·E_p(x̂, h_prefix)`
//!    with `x̂ = LayerNorm(x)`;
//! 3. a position-wise MLP with residual.
//!
//! Nothing in (1)–(3) mixes refiner states across positions, so the global
//! embedding can only reach position `i` through its own gate weight `p_i`.

use rand_chacha::ChaCha8Rng;

use super::layers::{build_mask, Attention, LayerNorm, Linear, Mlp};
use super::params::{Ctx, ParamStore};
use super::{ModelConfig, RefinerAttention};
use crate::error::Result;
use crate::numerics::{Tensor, Var};

/// Two-layer MLP with a sigmoid head, shared by every refiner block.
#[derive(Clone, Debug)]
pub struct Gate {
    pub(crate) mlp: Mlp,
}

impl Gate {
    pub(crate) fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        // final bias starts at zero via Linear::new, so initial scores sit near 0.5
        Self {
            mlp: Mlp::new(ps, rng, "gate", cfg.d_model, cfg.gate_hidden_dim, 1),
        }
    }

    /// Pre-sigmoid logits, shape `[n]`.
    pub fn logits(&self, cx: &mut Ctx, o_dec: Var) -> Result<Var> {
        let n = cx.value(o_dec).dims2()?.0;
        let z = self.mlp.forward(cx, o_dec)?;
        cx.g.reshape(z, vec![n])
    }
}

#[derive(Clone, Debug)]
struct RefinerBlock {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_expert: LayerNorm,
    global_in: Linear,
    global_out: Linear,
    prefix: Attention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Refiner {
    blocks: Vec<RefinerBlock>,
    ln_f: LayerNorm,
    mode: RefinerAttention,
}

/// Inputs shared by every refiner block.
pub struct RefinerInputs {
    /// Embedded, position-encoded shifted targets `[n, d]`.
    pub x: Var,
    pub o_dec: Var,
    pub h_prefix: Var,
    pub h_global: Var,
    /// Gate scores `[n]`.
    pub p: Var,
}

impl Refiner {
    pub(crate) fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let blocks = (0..cfg.n_refiner_blocks)
            .map(|i| {
                let name = format!("ref.{i}");
                RefinerBlock {
                    ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), d),
                    attn: Attention::new(ps, rng, &format!("{name}.poa"), d, cfg.n_heads),
                    ln_expert: LayerNorm::new(ps, &format!("{name}.ln_expert"), d),
                    global_in: Linear::new(
                        ps,
                        rng,
                        &format!("{name}.eg.in"),
                        2 * d,
                        cfg.expert_hidden_dim,
                    ),
                    global_out: Linear::new(
                        ps,
                        rng,
                        &format!("{name}.eg.out"),
                        cfg.expert_hidden_dim,
                        d,
                    ),
                    prefix: Attention::new(ps, rng, &format!("{name}.ep"), d, cfg.n_heads),
                    ln_mlp: LayerNorm::new(ps, &format!("{name}.ln_mlp"), d),
                    mlp: Mlp::new(ps, rng, &format!("{name}.mlp"), d, cfg.ffn_dim, d),
                }
            })
            .collect();
        Self {
            blocks,
            ln_f: LayerNorm::new(ps, "ref.ln_f", d),
            mode: cfg.refiner_attention,
        }
    }

    /// Final hidden states `[n, d]`, before the shared head.
    pub fn forward(&self, cx: &mut Ctx, inp: &RefinerInputs) -> Result<Var> {
        let (n, d) = cx.value(inp.x).dims2()?;
        let mut x = inp.x;
        let (memory, mask) = match self.mode {
            RefinerAttention::PreviousOutput => {
                // slot 0 is a null state, slot j + 1 holds o_dec[j]
                let null = cx.g.constant(Tensor::zeros(&[1, d]));
                let memory = if n > 1 {
                    let prev = cx.g.slice(inp.o_dec, 0, 0, n - 1)?;
                    cx.g.concat(&[null, prev], 0)?
                } else {
                    null
                };
                (Some(memory), build_mask(n, n, |i, j| j <= i))
            }
            RefinerAttention::SelfAttention => {
                x = cx.g.add(x, inp.o_dec)?;
                (None, build_mask(n, n, |i, j| j <= i))
            }
        };
        let q_gate = {
            let neg = cx.g.scale(inp.p, -1.0);
            cx.g.shift(neg, 1.0)
        };
        let global = cx.g.repeat_rows(inp.h_global, n)?;
        for b in &self.blocks {
            let h = b.ln_attn.forward(cx, x)?;
            let a = b.attn.forward(cx, h, memory.unwrap_or(h), Some(&mask))?;
            x = cx.g.add(x, a)?;

            let xh = b.ln_expert.forward(cx, x)?;
            let cat = cx.g.concat(&[xh, global], 1)?;
            let eg = b.global_in.forward(cx, cat)?;
            let eg = cx.g.relu(eg);
            let eg = b.global_out.forward(cx, eg)?;
            let ep = b.prefix.forward(cx, xh, inp.h_prefix, None)?;
            let eg = cx.g.scale_rows(eg, inp.p)?;
            let ep = cx.g.scale_rows(ep, q_gate)?;
            x = cx.g.add(x, eg)?;
            x = cx.g.add(x, ep)?;

            let h = b.ln_mlp.forward(cx, x)?;
            let m = b.mlp.forward(cx, h)?;
            x = cx.g.add(x, m)?;
        }
        self.ln_f.forward(cx, x)
    }
}
