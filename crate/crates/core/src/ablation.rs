//! Stage-2 ablation grid and the gate statistics used to compare its runs.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::metrics::{evaluate_lambda, evaluate_offline};
use crate::model::{Model, RefinerAttention};
use crate::synthdata::FramedDataset;
use crate::training::{norm_target, sample_prefix, train_stage2, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoiseZero,
    NoiseThree,
    NormOff,
    DropOffline,
    DropPrefix,
    SelfAttention,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoiseZero,
        Variant::NoiseThree,
        Variant::NormOff,
        Variant::DropOffline,
        Variant::DropPrefix,
        Variant::SelfAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoiseZero => "noise_0",
            Variant::NoiseThree => "noise_3",
            Variant::NormOff => "norm_off",
            Variant::DropOffline => "drop_offline",
            Variant::DropPrefix => "drop_prefix",
            Variant::SelfAttention => "self_attention",
        }
    }

    /// Training config and refiner attention mode of this variant.
    pub fn apply(
        self,
        base: &TrainConfig,
        mode: RefinerAttention,
    ) -> (TrainConfig, RefinerAttention) {
        let mut c = base.clone();
        let mut m = mode;
        match self {
            Variant::Full => {}
            Variant::NoiseZero => c.noise_sigma = 0.0,
            Variant::NoiseThree => c.noise_sigma = 3.0,
            Variant::NormOff => c.normalization = false,
            Variant::DropOffline => c.drop_offline_loss = true,
            Variant::DropPrefix => c.drop_prefix_loss = true,
            Variant::SelfAttention => m = RefinerAttention::SelfAttention,
        }
        (c, m)
    }
}

/// Noise-free gate scores on teacher-forced, randomly truncated validation inputs.
#[derive(Clone, Debug, Default, Serialize)]
pub struct GateStats {
    /// Every score, in sample order.
    pub scores: Vec<f64>,
    /// Per-sample `(mean score, normalization target)`.
    pub per_sample: Vec<(f64, f64)>,
    /// Scores at positions whose source is not yet fully in the prefix.
    pub missing_mean: f64,
    /// Scores at positions whose source is already in the prefix.
    pub available_mean: f64,
}

impl GateStats {
    /// Fraction of scores in `[0, 0.1] ∪ [0.9, 1]`.
    pub fn extreme_mass(&self) -> f64 {
        let n = self.scores.len().max(1) as f64;
        self.scores
            .iter()
            .filter(|p| **p <= 0.1 || **p >= 0.9)
            .count() as f64
            / n
    }

    /// Mean over samples of `|mean score − target|`.
    pub fn norm_deviation(&self) -> f64 {
        let n = self.per_sample.len().max(1) as f64;
        self.per_sample
            .iter()
            .map(|(m, t)| (m - t).abs())
            .sum::<f64>()
            / n
    }
}

pub fn gate_statistics(model: &Model, data: &FramedDataset, seed: u64) -> Result<GateStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chunk = model.config.chunk_frames;
    let k = data.spec.frames_per_token;
    let mut stats = GateStats::default();
    let (mut miss, mut n_miss, mut avail, mut n_avail) = (0.0, 0usize, 0.0, 0usize);
    for (s, f) in data.samples.iter().zip(&data.frames) {
        let l_g = f.dims2()?.0;
        let prefix = sample_prefix(l_g, chunk, &mut rng)?;
        let enc = model.encoder_outputs(f, prefix.l_p)?;
        let dec = model.decode_teacher_forced(&enc.h_prefix, &s.decoder_input())?;
        let p = model.gate_scores(&dec.o_dec)?;
        let target = norm_target(prefix.l_p, l_g, model.config.buffer_frames)?;
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        stats.per_sample.push((mean, target));
        let read_tokens = prefix.l_p / k;
        for (i, score) in p.iter().enumerate() {
            // the EOS position needs the whole source
            let lag = s.true_lag.get(i).copied().unwrap_or(s.source.len());
            if lag > read_tokens {
                miss += score;
                n_miss += 1;
            } else {
                avail += score;
                n_avail += 1;
            }
        }
        stats.scores.extend(p);
    }
    stats.missing_mean = miss / n_miss.max(1) as f64;
    stats.available_mean = avail / n_avail.max(1) as f64;
    Ok(stats)
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub offline_accuracy: f64,
    pub accuracy_at_half: f64,
    pub al_at_half: f64,
    pub extreme_mass: f64,
    pub norm_deviation: f64,
    pub missing_mean: f64,
    pub available_mean: f64,
    pub final_loss: f64,
}

/// Train one stage-2 variant from the stage-1 weights and evaluate it.
pub fn run_variant(
    stage1: &Model,
    variant: Variant,
    base: &TrainConfig,
    train: &FramedDataset,
    valid: &FramedDataset,
    max_len: usize,
    log: Option<&mut dyn Write>,
) -> Result<(Model, VariantReport)> {
    let (cfg, mode) = variant.apply(base, stage1.config.refiner_attention);
    let mut mc = stage1.config.clone();
    mc.refiner_attention = mode;
    let mut model = Model::new(mc)?;
    model.params = stage1.params.clone();
    let report = train_stage2(&mut model, train, &cfg, log)?;
    let (offline, _) = evaluate_offline(&model, valid, max_len)?;
    let (half, _) = evaluate_lambda(&model, valid, 0.5, max_len)?;
    let stats = gate_statistics(&model, valid, base.seed ^ 0x5eed)?;
    Ok((
        model,
        VariantReport {
            variant,
            offline_accuracy: offline.quality,
            accuracy_at_half: half.quality,
            al_at_half: half.al,
            extreme_mass: stats.extreme_mass(),
            norm_deviation: stats.norm_deviation(),
            missing_mean: stats.missing_mean,
            available_mean: stats.available_mean,
            final_loss: report.final_loss().unwrap_or(f64::NAN),
        },
    ))
}
