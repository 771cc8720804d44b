use rand_chacha::ChaCha8Rng;

use super::layers::{build_mask, Attention, LayerNorm, Mlp};
use super::params::{Ctx, ParamStore};
use super::ModelConfig;
use crate::error::Result;
use crate::numerics::Var;

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    mlp: Mlp,
}

/// Autoregressive decoder: causal self-attention, cross-attention over encoder states.
#[derive(Clone, Debug)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
    ln_f: LayerNorm,
}

impl Decoder {
    pub(crate) fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.n_decoder_layers)
            .map(|i| {
                let name = format!("dec.{i}");
                DecoderLayer {
                    ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d),
                    self_attn: Attention::new(ps, rng, &format!("{name}.self"), d, cfg.n_heads),
                    ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d),
                    cross_attn: Attention::new(ps, rng, &format!("{name}.cross"), d, cfg.n_heads),
                    ln3: LayerNorm::new(ps, &format!("{name}.ln3"), d),
                    mlp: Mlp::new(ps, rng, &format!("{name}.mlp"), d, cfg.ffn_dim, d),
                }
            })
            .collect();
        Self {
            layers,
            ln_f: LayerNorm::new(ps, "dec.ln_f", d),
        }
    }

    /// `x` is the embedded, position-encoded input; `memory_keep[j] = false` hides memory row `j`.
    pub fn forward(
        &self,
        cx: &mut Ctx,
        mut x: Var,
        memory: Var,
        memory_keep: Option<&[bool]>,
    ) -> Result<Var> {
        let n = cx.value(x).dims2()?.0;
        let m = cx.value(memory).dims2()?.0;
        let causal = build_mask(n, n, |i, j| j <= i);
        let cross = memory_keep.map(|keep| build_mask(n, m, |_, j| keep[j]));
        for layer in &self.layers {
            let h = layer.ln1.forward(cx, x)?;
            let a = layer.self_attn.forward(cx, h, h, Some(&causal))?;
            x = cx.g.add(x, a)?;
            let h = layer.ln2.forward(cx, x)?;
            let a = layer.cross_attn.forward(cx, h, memory, cross.as_ref())?;
            x = cx.g.add(x, a)?;
            let h = layer.ln3.forward(cx, x)?;
            let f = layer.mlp.forward(cx, h)?;
            x = cx.g.add(x, f)?;
        }
        self.ln_f.forward(cx, x)
    }
}
