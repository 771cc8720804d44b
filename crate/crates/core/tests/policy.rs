mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simulmega::model::{Model, ModelConfig};
use simulmega::policy::*;
use simulmega::synthdata::{generate, TaskSpec, EOS};

use common::oracles;

const GRID_LAMBDAS: [f64; 7] = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];

#[test]
fn waitk_schedule_examples() {
    assert_eq!(waitk_schedule(4, 4, 1, 1.0).unwrap(), [1, 2, 3, 4]);
    assert_eq!(waitk_schedule(5, 5, 2, 1.0).unwrap(), [2, 3, 4, 5, 5]);
}

proptest! {
    #[test]
    fn waitk_matches_closed_form(
        chunks in 1usize..30,
        targets in 0usize..40,
        k in 1usize..6,
        ratio in prop::sample::select(vec![0.25, 0.5, 1.0, 1.5, 2.0, 3.0]),
    ) {
        let got = waitk_schedule(chunks, targets, k, ratio).unwrap();
        let want: Vec<usize> = (0..targets)
            .map(|i| oracles::waitk_delay(i, k, ratio, chunks))
            .collect();
        prop_assert_eq!(&got, &want);
        // no chunk before the flush writes more than ⌈ratio⌉ tokens
        for c in 1..chunks {
            prop_assert!(got.iter().filter(|d| **d == c).count() <= ratio.ceil() as usize);
        }
    }

    #[test]
    fn threshold_agent_is_monotone_on_random_grids(
        cells in prop::collection::vec(0.0f64..1.0, 36),
    ) {
        let p = |t: usize, i: usize| cells[(t - 1) * 6 + i];
        prop_assert!(threshold_monotonicity_check(p, 6, 6, &GRID_LAMBDAS).is_ok());
    }
}

#[test]
fn monotone_in_time_oracles_on_six_by_six_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut failures = 0;
    for _ in 0..2000 {
        // scores fall as more source arrives
        let mut cells = [[0.0f64; 6]; 6];
        for i in 0..6 {
            let mut v = 1.0;
            for t in 0..6 {
                v *= rng.random_range(0.3..1.0);
                cells[t][i] = v;
            }
        }
        let p = |t: usize, i: usize| cells[t - 1][i];
        let runs = match threshold_monotonicity_check(p, 6, 6, &GRID_LAMBDAS) {
            Ok(r) => r,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        // independent replay of the rule for each λ
        for (lambda, times) in runs {
            let mut t = 1;
            for (i, got) in times.iter().enumerate() {
                while t < 6 && cells[t - 1][i] >= lambda {
                    t += 1;
                }
                assert_eq!(*got, t);
            }
        }
    }
    assert_eq!(failures, 0);
}

#[test]
fn waitk_run_stops_at_end_marker() {
    let (tokens, delays) = waitk_run(6, 2, 1.0, 10, |c, emitted| {
        Ok(if emitted.len() == 3 { EOS } else { 10 + c })
    })
    .unwrap();
    assert_eq!(tokens, [12, 13, 14]);
    assert_eq!(delays, [2, 3, 4]);
}

fn small_model() -> (Model, simulmega::synthdata::FramedDataset) {
    let model = Model::new(ModelConfig {
        init_seed: 4,
        ..ModelConfig::default()
    })
    .unwrap();
    let spec = TaskSpec {
        max_len: 10,
        ..TaskSpec::default()
    };
    (model, generate(&spec, 4).unwrap().materialize().unwrap())
}

#[test]
fn stream_invariants_hold_for_any_threshold() {
    let (model, data) = small_model();
    for f in &data.frames {
        let total = f.dims2().unwrap().0;
        for lambda in [0.05, 0.3, 0.5, 0.8, 0.999] {
            let r = run_stream(&model, f, lambda, 16).unwrap();
            assert_eq!(r.tokens.len(), r.delays.len());
            assert!(r.delays.windows(2).all(|w| w[0] <= w[1]));
            assert!(r.delays.iter().all(|d| *d <= total && *d >= 1));
            let mut ended = false;
            for ev in &r.trace[1..] {
                match ev.action {
                    Action::Read => {
                        assert!(!ended, "read after end of stream");
                        assert!(ev.p.unwrap() >= lambda);
                    }
                    Action::Write => {
                        assert!(ended || ev.p.unwrap() < lambda);
                    }
                }
                ended = ev.t == total;
                assert!(ev.p.is_some_and(|p| p > 0.0 && p < 1.0));
            }
        }
    }
}

#[test]
fn vanishing_threshold_reproduces_offline_decoding() {
    let (model, data) = small_model();
    for f in &data.frames {
        let total = f.dims2().unwrap().0;
        let r = run_stream(&model, f, 1e-6, 16).unwrap();
        let (offline, cut) = greedy_offline(&model, f, 16).unwrap();
        assert_eq!(r.tokens, offline);
        assert_eq!(r.truncated, cut);
        assert!(r.delays.iter().all(|d| *d == total));
    }
}

#[test]
fn invalid_stream_requests_are_errors() {
    let (model, data) = small_model();
    assert!(run_stream(&model, &data.frames[0], 0.0, 8).is_err());
    assert!(run_stream(&model, &data.frames[0], 1.0, 8).is_err());
    let empty = simulmega::numerics::Tensor::zeros(&[0, 64]);
    assert!(run_stream(&model, &empty, 0.5, 8).is_err());
}

#[test]
fn waitk_model_run_uses_the_schedule() {
    let (model, data) = small_model();
    let f = &data.frames[0];
    let total = f.dims2().unwrap().0;
    let chunks = total.div_ceil(model.config.chunk_frames);
    let (tokens, delays) = waitk_model_run(&model, f, 2, 1.0, 12).unwrap();
    assert_eq!(tokens.len(), delays.len());
    let plan = waitk_schedule(chunks, tokens.len(), 2, 1.0).unwrap();
    let frames: Vec<usize> = plan
        .iter()
        .map(|c| (c * model.config.chunk_frames).min(total))
        .collect();
    assert_eq!(delays, frames);
}
