mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simulmega::model::{Model, ModelConfig, RefinerAttention};
use simulmega::synthdata::TaskSpec;
use tempfile::TempDir;

use common::*;

#[test]
fn gradients_match_finite_differences_for_every_parameter() {
    for mode in [
        RefinerAttention::PreviousOutput,
        RefinerAttention::SelfAttention,
    ] {
        let errs = model_gradcheck(mode, 6);
        assert!(errs.len() > 20);
        for (name, err) in errs {
            assert!(err < 1e-4, "{mode:?} {name}: {err:e}");
        }
    }
}

#[test]
fn streaming_encoder_matches_one_shot() {
    let worst = streaming_max_delta(12, 5);
    assert!(worst < 1e-5, "max |Δ| = {worst:e}");
}

#[test]
fn poa_refiner_cannot_see_unread_input() {
    assert!(leakage_invariant(RefinerAttention::PreviousOutput, 5));
}

#[test]
fn self_attention_ablation_leaks_offline_states() {
    assert!(!leakage_invariant(RefinerAttention::SelfAttention, 5));
}

#[test]
fn gate_weight_one_removes_the_prefix_expert() {
    // at p = 1 the refiner must ignore h_prefix; at p = 0 it must ignore h_global
    let model = Model::new(ModelConfig::default()).unwrap();
    let spec = TaskSpec::default();
    let (s, frames) = sample_with_frames(&spec, 3);
    let enc = model.encoder_outputs(&frames, 8).unwrap();
    let y = s.decoder_input();
    let dec = model.decode_teacher_forced(&enc.h_prefix, &y).unwrap();
    let mut other = enc.h_prefix.clone();
    for v in other.data_mut() {
        *v = -*v + 0.5;
    }
    let mut other_global = enc.h_global.clone();
    for v in other_global.data_mut() {
        *v *= 3.0;
    }
    let ones = vec![1.0; y.len()];
    let zeros = vec![0.0; y.len()];
    let at = |hp: &simulmega::numerics::Tensor, hg: &simulmega::numerics::Tensor, p: &[f64]| {
        model.refiner_forward(&y, &dec.o_dec, hp, hg, p).unwrap()
    };
    assert_eq!(
        at(&enc.h_prefix, &enc.h_global, &ones),
        at(&other, &enc.h_global, &ones)
    );
    assert_eq!(
        at(&enc.h_prefix, &enc.h_global, &zeros),
        at(&enc.h_prefix, &other_global, &zeros)
    );
    assert_ne!(
        at(&enc.h_prefix, &enc.h_global, &ones),
        at(&enc.h_prefix, &other_global, &ones)
    );
}

#[test]
fn shapes_follow_the_config() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone()).unwrap();
    let spec = TaskSpec::default();
    let (s, frames) = sample_with_frames(&spec, 1);
    let l_g = frames.dims2().unwrap().0;
    let enc = model.encoder_outputs(&frames, 4).unwrap();
    assert_eq!(enc.h_offline.shape(), [l_g, cfg.d_model]);
    assert_eq!(enc.h_prefix.shape(), [4, cfg.d_model]);
    assert_eq!(enc.h_global.shape(), [cfg.d_model]);
    let y = s.decoder_input();
    let dec = model.decode_teacher_forced(&enc.h_prefix, &y).unwrap();
    assert_eq!(dec.o_dec.shape(), [y.len(), cfg.d_model]);
    assert_eq!(dec.logits.shape(), [y.len(), cfg.vocab_size]);
    let p = model.gate_scores(&dec.o_dec).unwrap();
    assert_eq!(p.len(), y.len());
    assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
    let r = model
        .refiner_forward(&y, &dec.o_dec, &enc.h_prefix, &enc.h_global, &p)
        .unwrap();
    assert_eq!(r.shape(), [y.len(), cfg.vocab_size]);
    assert!(model.encoder_outputs(&frames, 3).is_err());
    assert!(model.encoder_outputs(&frames, 0).is_err());
}

#[test]
fn end_of_stream_flag_changes_the_encoding() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let (_, frames) = sample_with_frames(&TaskSpec::default(), 2);
    let a = model.encode_offline(&frames, true).unwrap();
    let b = model.encode_offline(&frames, false).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn gate_noise_is_zero_mean_in_logit_space() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let (s, frames) = sample_with_frames(&TaskSpec::default(), 4);
    let enc = model.encoder_outputs(&frames, 8).unwrap();
    let dec = model
        .decode_teacher_forced(&enc.h_prefix, &s.decoder_input())
        .unwrap();
    let clean = model.gate_scores(&dec.o_dec).unwrap();
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draws = 400;
    let mut mean_shift = 0.0;
    let mut sq = 0.0;
    for _ in 0..draws {
        let noisy = model.gate_scores_noisy(&dec.o_dec, 1.0, &mut rng).unwrap();
        let e = logit(noisy[0]) - logit(clean[0]);
        mean_shift += e;
        sq += e * e;
    }
    let mean = mean_shift / draws as f64;
    let var = sq / draws as f64 - mean * mean;
    // standard error of the mean is 0.05; of the variance about 0.07
    assert!(mean.abs() < 0.2, "mean {mean}");
    assert!((var - 1.0).abs() < 0.3, "variance {var}");
    assert_eq!(
        model.gate_scores_noisy(&dec.o_dec, 0.0, &mut rng).unwrap(),
        clean
    );
}

#[test]
fn checkpoint_round_trip_is_f32_exact() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut model = Model::new(ModelConfig::default()).unwrap();
    model.params.round_to_f32();
    model.save(&path).unwrap();
    let mut other = Model::new(ModelConfig {
        init_seed: 77,
        ..ModelConfig::default()
    })
    .unwrap();
    assert_ne!(other.params.digest(|_| true), model.params.digest(|_| true));
    other.load_params(&path).unwrap();
    assert_eq!(other.params.digest(|_| true), model.params.digest(|_| true));
    let mut small = Model::new(tiny_config(RefinerAttention::PreviousOutput)).unwrap();
    assert!(small.load_params(&path).is_err());
}
