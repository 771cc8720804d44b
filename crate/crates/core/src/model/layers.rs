use rand_chacha::ChaCha8Rng;

use super::params::{uniform_init, Ctx, ParamId, ParamStore};
use crate::error::Result;
use crate::numerics::{Tensor, Var, MASK_NEG};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            uniform_init(rng, &[fan_in, fan_out], fan_in),
        );
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let b = cx.p(self.b);
        let y = cx.g.matmul(x, w)?;
        cx.g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = ps.add(format!("{name}.g"), Tensor::filled(&[d], 1.0));
        let beta = ps.add(format!("{name}.b"), Tensor::zeros(&[d]));
        Self { gamma, beta }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let g = cx.p(self.gamma);
        let b = cx.p(self.beta);
        cx.g.layer_norm(x, g, b)
    }
}

/// Two-layer position-wise ReLU network.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), d_in, hidden),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), hidden, d_out),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.g.relu(h);
        self.fc2.forward(cx, h)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl Attention {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        n_heads: usize,
    ) -> Self {
        Self {
            q: Linear::new(ps, rng, &format!("{name}.q"), d, d),
            k: Linear::new(ps, rng, &format!("{name}.k"), d, d),
            v: Linear::new(ps, rng, &format!("{name}.v"), d, d),
            o: Linear::new(ps, rng, &format!("{name}.o"), d, d),
            n_heads,
        }
    }

    pub fn forward(
        &self,
        cx: &mut Ctx,
        query: Var,
        memory: Var,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let q = self.q.forward(cx, query)?;
        let k = self.k.forward(cx, memory)?;
        let v = self.v.forward(cx, memory)?;
        self.attend(cx, q, k, v, mask)
    }

    /// Attention over already-projected keys and values, followed by the output projection.
    pub fn attend(
        &self,
        cx: &mut Ctx,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let heads = multi_head(cx, q, k, v, mask, self.n_heads)?;
        self.o.forward(cx, heads)
    }
}

/// `concat_h softmax(q_h k_hᵀ / √d_h + mask) v_h`.
pub fn multi_head(
    cx: &mut Ctx,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor>,
    n_heads: usize,
) -> Result<Var> {
    let d = cx.value(q).dims2()?.1;
    let scale = 1.0 / ((d / n_heads) as f64).sqrt();
    let qs = cx.g.split(q, 1, n_heads)?;
    let ks = cx.g.split(k, 1, n_heads)?;
    let vs = cx.g.split(v, 1, n_heads)?;
    let mut outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let kt = cx.g.transpose(ks[h])?;
        let s = cx.g.matmul(qs[h], kt)?;
        let s = cx.g.scale(s, scale);
        let a = cx.g.softmax(s, mask)?;
        outs.push(cx.g.matmul(a, vs[h])?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    cx.g.concat(&outs, 1)
}

/// Standard sinusoidal position table, `rows × d`.
pub fn sinusoid_table(rows: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; rows * d];
    for pos in 0..rows {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![rows, d], data).unwrap()
}

/// Additive mask from an `allowed(query, key)` predicate.
pub fn build_mask(rows: usize, cols: usize, allowed: impl Fn(usize, usize) -> bool) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            if !allowed(i, j) {
                data[i * cols + j] = MASK_NEG;
            }
        }
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}
