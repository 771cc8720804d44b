mod common;

use proptest::prelude::*;
use simulmega::metrics::*;
use simulmega::model::{Model, RefinerAttention};
use simulmega::synthdata::{generate, EOS};

use common::oracles;
use common::*;

fn rec(d: &[f64], x: f64, y: usize) -> LatencyRecord {
    LatencyRecord {
        delays: d.to_vec(),
        source_len: x,
        ref_len: y,
    }
}

#[test]
fn average_lagging_table() {
    for (d, want) in [
        ([1.0, 2.0, 3.0, 4.0], 1.0),
        ([4.0, 4.0, 4.0, 4.0], 4.0),
        ([1.0, 1.0, 1.0, 1.0], -0.5),
    ] {
        let r = rec(&d, 4.0, 4);
        assert_eq!(average_lagging(&r).unwrap(), want);
        assert_eq!(oracles::lagging(&d, 4.0, 4), want);
    }
}

#[test]
fn laal_table() {
    let short = rec(&[1.0, 2.0], 4.0, 4);
    assert_eq!(laal(&short).unwrap(), 1.0);
    assert_eq!(laal(&short).unwrap(), oracles::lagging(&[1.0, 2.0], 4.0, 4));
    let equal = rec(&[2.0, 2.0, 3.0, 4.0], 4.0, 4);
    assert_eq!(laal(&equal).unwrap(), average_lagging(&equal).unwrap());
    let long = rec(&[1.0, 2.0, 2.0, 3.0, 4.0, 4.0], 4.0, 3);
    assert_eq!(laal(&long).unwrap(), average_lagging(&long).unwrap());
}

#[test]
fn malformed_latency_records_are_errors() {
    assert!(average_lagging(&rec(&[], 4.0, 4)).is_err());
    assert!(laal(&rec(&[2.0, 1.0], 4.0, 4)).is_err());
    assert!(average_lagging(&rec(&[1.0], 0.0, 4)).is_err());
}

#[test]
fn computation_aware_delay() {
    let r = rec(&[1.0, 2.0, 3.0, 4.0], 4.0, 4);
    let (al, ca) = computation_aware(&r, &[0.0; 4], 2.0).unwrap();
    assert_eq!(al, ca);
    // 10 ms per step, one step per write, at 50 source units per second
    let times: Vec<f64> = (1..=4).map(|i| 0.010 * i as f64).collect();
    let (al, ca) = computation_aware(&r, &times, 50.0).unwrap();
    let added: f64 = times.iter().map(|t| t * 50.0).sum::<f64>() / 4.0;
    assert!((ca - al - added).abs() < 1e-12);
    assert!(computation_aware(&r, &[0.0, 0.2, 0.1, 0.3], 1.0).is_err());
}

#[test]
fn bleu_reference_cases() {
    let refs = vec![vec![3, 4, 5, 6, 7], vec![8, 9, 10, 11]];
    assert!((bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-9);
    let disjoint_h: Vec<Vec<usize>> = vec![(100..130).collect()];
    let disjoint_r: Vec<Vec<usize>> = vec![(200..230).collect()];
    let b = bleu(&disjoint_h, &disjoint_r).unwrap();
    assert!(b > 0.0 && b < 5.0, "{b}");
    assert!(bleu(&[], &[]).is_err());
    let hyps = vec![vec![3, 4, 5, 9, 7, 3], vec![8, 9, 11]];
    let want = oracles::bleu(&hyps, &refs);
    assert!((bleu(&hyps, &refs).unwrap() - want).abs() < 1e-9);
}

#[test]
fn token_accuracy_counts_the_end_marker() {
    let refs = vec![vec![5, 6, EOS], vec![7, EOS]];
    assert_eq!(token_accuracy(&[vec![5, 6], vec![7]], &refs).unwrap(), 1.0);
    assert_eq!(
        token_accuracy(&[vec![5, 9], vec![]], &refs).unwrap(),
        2.0 / 5.0
    );
}

proptest! {
    #[test]
    fn lagging_matches_definition(
        steps in prop::collection::vec(0u8..4, 1..12),
        x in 1usize..15,
        y in 1usize..15,
    ) {
        let mut d = Vec::new();
        let mut acc = 1.0f64;
        for s in steps {
            acc = (acc + s as f64).min(x as f64);
            d.push(acc);
        }
        let r = rec(&d, x as f64, y);
        let al = average_lagging(&r).unwrap();
        let la = laal(&r).unwrap();
        prop_assert!((al - oracles::lagging(&d, x as f64, d.len())).abs() < 1e-9);
        prop_assert!((la - oracles::lagging(&d, x as f64, d.len().max(y))).abs() < 1e-9);
        if y > d.len() {
            prop_assert!(la >= al - 1e-12);
        } else {
            prop_assert!(la == al);
        }
    }

    #[test]
    fn bleu_matches_linear_search_oracle(
        pairs in prop::collection::vec(
            (prop::collection::vec(3usize..9, 0..10), prop::collection::vec(3usize..9, 1..10)),
            1..5,
        )
    ) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let b = bleu(&h, &r).unwrap();
        prop_assert!((b - oracles::bleu(&h, &r)).abs() < 1e-9);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
    }
}

#[test]
fn sweep_is_sorted_and_offline_row_lags_by_the_whole_source() {
    let model = Model::new(tiny_config(RefinerAttention::PreviousOutput)).unwrap();
    let data = generate(&tiny_task(model.config.d_model), 5)
        .unwrap()
        .materialize()
        .unwrap();
    let points = sweep(&model, &data, &[0.1, 0.9, 0.5, 0.3, 0.7], 8).unwrap();
    let lambdas: Vec<f64> = points.iter().map(|p| p.lambda).collect();
    assert_eq!(lambdas, [0.9, 0.7, 0.5, 0.3, 0.1]);
    assert!(points.iter().all(|p| p.n_samples == 5));
    let (off, outcomes) = evaluate_offline(&model, &data, 8).unwrap();
    let mean_x = data
        .samples
        .iter()
        .map(|s| s.source.len() as f64)
        .sum::<f64>()
        / 5.0;
    assert!((off.al - mean_x).abs() < 1e-9);
    assert_eq!(outcomes.len(), 5);
    let csv = curve_csv(&points);
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn single_sample_corpus_quality_is_sentence_quality() {
    let model = Model::new(tiny_config(RefinerAttention::PreviousOutput)).unwrap();
    let data = generate(&tiny_task(model.config.d_model), 1)
        .unwrap()
        .materialize()
        .unwrap();
    let (point, outcomes) = evaluate_lambda(&model, &data, 0.5, 8).unwrap();
    let s = &data.samples[0];
    let sentence = token_matches(&outcomes[0].tokens, &s.target) as f64 / s.target.len() as f64;
    assert_eq!(point.quality, sentence);
}
