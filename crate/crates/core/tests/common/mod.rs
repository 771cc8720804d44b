//! Probes shared by the model tests and the acceptance target.
#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simulmega::model::{Ctx, Model, ModelConfig, RefinerAttention, StreamingEncState};
use simulmega::numerics::Tensor;
use simulmega::synthdata::{Sample, TaskKind, TaskSpec};
use simulmega::training::{stage2_objective, PrefixSample, TrainConfig};

/// One block per stack, small enough for coordinate-wise finite differences.
pub fn tiny_config(mode: RefinerAttention) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_chunkar_blocks: 1,
        n_nar_blocks: 1,
        n_decoder_layers: 1,
        n_refiner_blocks: 1,
        vocab_size: 10,
        chunk_frames: 2,
        max_chunks: 8,
        buffer_frames: 2,
        gate_hidden_dim: 6,
        ffn_dim: 12,
        expert_hidden_dim: 10,
        max_target_len: 12,
        refiner_attention: mode,
        init_seed: 3,
    }
}

pub fn tiny_task(d_model: usize) -> TaskSpec {
    TaskSpec {
        kind: TaskKind::DelayedCopy { d: 1 },
        vocab_size: 10,
        min_len: 3,
        max_len: 5,
        frames_per_token: 2,
        frame_noise: 0.1,
        frame_dim: d_model,
        seed: 11,
    }
}

pub fn sample_with_frames(spec: &TaskSpec, id: u64) -> (Sample, Tensor) {
    let table = spec.embedding_table().unwrap();
    let s = spec.make_sample(id);
    let f = spec.frames(&table, &s).unwrap();
    (s, f)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-6)`. The floor keeps parameters whose exact
/// gradient is zero (attention key biases shift every score of a row equally)
/// from turning finite-difference roundoff into a relative error near 1.
pub fn floored_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-6)
}

/// Relative error of the analytic stage-2 gradient against central differences,
/// per parameter tensor, on at most `coords` coordinates of each.
pub fn model_gradcheck(mode: RefinerAttention, coords: usize) -> Vec<(String, f64)> {
    let model = Model::new(tiny_config(mode)).unwrap();
    let spec = tiny_task(model.config.d_model);
    let (sample, frames) = sample_with_frames(&spec, 5);
    let l_g = frames.dims2().unwrap().0;
    // a strict prefix exercises both EoSt states and both gate experts
    let prefix = PrefixSample { l_p: 2, l_g };
    let cfg = TrainConfig {
        noise_sigma: 1.0,
        ..TrainConfig::default()
    };
    let loss_at = |params: &simulmega::model::ParamStore| -> f64 {
        let mut m = model.clone();
        m.params = params.clone();
        let mut cx = Ctx::eval(&m.params);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let v = stage2_objective(&m, &mut cx, &cfg, &sample, &frames, prefix, &mut rng).unwrap();
        cx.value(v.total).item().unwrap()
    };
    let mask = vec![true; model.params.len()];
    let analytic = {
        let mut cx = Ctx::train(&model.params, &mask);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let v =
            stage2_objective(&model, &mut cx, &cfg, &sample, &frames, prefix, &mut rng).unwrap();
        let mut grads = cx.g.backward(v.total).unwrap();
        cx.param_grads(&mut grads)
    };
    let mut pick = ChaCha8Rng::seed_from_u64(23);
    let eps = 1e-5;
    let mut out = Vec::new();
    for id in model.params.ids() {
        let name = model.params.name(id).to_string();
        let n = model.params.get(id).len();
        let grad = analytic[id.index()]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(model.params.get(id).shape()));
        let idx: Vec<usize> = if n <= coords {
            (0..n).collect()
        } else {
            (0..coords).map(|_| pick.random_range(0..n)).collect()
        };
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for &i in &idx {
            let mut ps = model.params.clone();
            let orig = ps.get(id).data()[i];
            ps.get_mut(id).data_mut()[i] = orig + eps;
            let up = loss_at(&ps);
            ps.get_mut(id).data_mut()[i] = orig - eps;
            let down = loss_at(&ps);
            a.push(grad.data()[i]);
            b.push((up - down) / (2.0 * eps));
        }
        out.push((name, floored_relative_error(&a, &b)));
    }
    out
}

/// Largest |stepwise − one-shot| over `inputs` random inputs, each with its own
/// chunk size, length and frame values. Every intermediate prefix is compared.
pub fn streaming_max_delta(inputs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..inputs {
        let chunk = rng.random_range(1..=5);
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            chunk_frames: chunk,
            max_chunks: 12,
            ffn_dim: 32,
            init_seed: case as u64,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg.clone()).unwrap();
        let total = rng.random_range(chunk..=chunk * 12);
        let frames = Tensor::matrix(
            total,
            cfg.d_model,
            (0..total * cfg.d_model)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        )
        .unwrap();
        let full = model.encode_offline(&frames, true).unwrap();
        let mut state = StreamingEncState::new(&cfg);
        let mut start = 0;
        while start < total {
            let len = chunk.min(total - start);
            let last = start + len == total;
            let piece = frames.slice_rows(start, len).unwrap();
            let h = model.encode_stream_step(&mut state, &piece, last).unwrap();
            start += len;
            let reference = if last {
                full.clone()
            } else {
                model.encoder_outputs(&frames, start).unwrap().h_prefix
            };
            worst = worst.max(h.max_abs_diff(&reference));
        }
    }
    worst
}

/// Refiner logits at `p = 0` for a clean and a perturbed input (beyond the prefix).
/// POA reads `o_dec` from the prefix pass; the self-attention ablation reads it
/// from the offline pass. Returns whether the two logit tensors are bit-identical.
pub fn leakage_invariant(mode: RefinerAttention, trials: usize) -> bool {
    let model = Model::new(ModelConfig {
        refiner_attention: mode,
        init_seed: 9,
        ..ModelConfig::default()
    })
    .unwrap();
    let spec = TaskSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for t in 0..trials {
        let (s, frames) = sample_with_frames(&spec, 500 + t as u64);
        let (total, d) = frames.dims2().unwrap();
        let chunk = model.config.chunk_frames;
        let l_p = chunk * rng.random_range(1..total / chunk);
        let mut perturbed = frames.clone();
        for v in &mut perturbed.data_mut()[l_p * d..] {
            *v += rng.random_range(-3.0..3.0);
        }
        let y_in = s.decoder_input();
        let logits = |f: &Tensor| {
            let enc = model.encoder_outputs(f, l_p).unwrap();
            let src = match mode {
                RefinerAttention::PreviousOutput => &enc.h_prefix,
                RefinerAttention::SelfAttention => &enc.h_offline,
            };
            let dec = model.decode_teacher_forced(src, &y_in).unwrap();
            let p = vec![0.0; y_in.len()];
            model
                .refiner_forward(&y_in, &dec.o_dec, &enc.h_prefix, &enc.h_global, &p)
                .unwrap()
        };
        let a = logits(&frames);
        let b = logits(&perturbed);
        let same = a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return false;
        }
    }
    true
}
