//! Two-stage training: offline pretraining, then simultaneous training of the
//! gate and refiner with the block-causal encoder layers frozen.

mod losses;
mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use losses::{
    combine, masked_nll, norm_loss, norm_target, offline_loss, prefix_loss, refiner_loss,
    total_loss, LossParts, LossWeights,
};
pub use optim::{clip_global_norm, AdamW, Schedule};

use crate::error::{invalid, Error, Result};
use crate::model::{Ctx, Model};
use crate::numerics::{Tensor, Var};
use crate::synthdata::{FramedDataset, Sample};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub w_r: f64,
    pub w_p: f64,
    pub w_n: f64,
    pub lambda_train: f64,
    pub noise_sigma: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Ablation: leave `L_offline` out of the stage-2 objective.
    pub drop_offline_loss: bool,
    /// Ablation: leave `L_prefix` out of the stage-2 objective.
    pub drop_prefix_loss: bool,
    /// Ablation: `false` removes the gate normalization term.
    pub normalization: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            w_r: 0.2,
            w_p: 0.2,
            w_n: 0.01,
            lambda_train: 0.5,
            noise_sigma: 1.0,
            lr_stage1: 1e-3,
            lr_stage2: 1e-3,
            steps_stage1: 1500,
            steps_stage2: 2500,
            batch_size: 8,
            warmup_steps: 200,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            drop_offline_loss: false,
            drop_prefix_loss: false,
            normalization: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (k, v) in [
            ("w_r", self.w_r),
            ("w_p", self.w_p),
            ("w_n", self.w_n),
            ("noise_sigma", self.noise_sigma),
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("train.{k} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.lambda_train > 0.0 && self.lambda_train < 1.0) {
            return bad(format!(
                "train.lambda_train must lie in (0, 1), got {}",
                self.lambda_train
            ));
        }
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        Ok(())
    }

    /// Effective stage-2 weights after ablation flags.
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            offline: if self.drop_offline_loss { 0.0 } else { 1.0 },
            refiner: self.w_r,
            prefix: if self.drop_prefix_loss { 0.0 } else { self.w_p },
            norm: if self.normalization { self.w_n } else { 0.0 },
        }
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let f = |k: &str, v: String| (format!("train.{k}"), v);
        vec![
            f("w_r", self.w_r.to_string()),
            f("w_p", self.w_p.to_string()),
            f("w_n", self.w_n.to_string()),
            f("lambda_train", self.lambda_train.to_string()),
            f("noise_sigma", self.noise_sigma.to_string()),
            f("lr_stage1", self.lr_stage1.to_string()),
            f("lr_stage2", self.lr_stage2.to_string()),
            f("steps_stage1", self.steps_stage1.to_string()),
            f("steps_stage2", self.steps_stage2.to_string()),
            f("batch_size", self.batch_size.to_string()),
            f("warmup_steps", self.warmup_steps.to_string()),
            f("weight_decay", self.weight_decay.to_string()),
            f("clip_norm", self.clip_norm.to_string()),
            f("seed", self.seed.to_string()),
            f("drop_offline_loss", self.drop_offline_loss.to_string()),
            f("drop_prefix_loss", self.drop_prefix_loss.to_string()),
            f("normalization", self.normalization.to_string()),
        ]
    }

    /// Apply one `train.*` key; returns `false` when the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("train.") else {
            return Ok(false);
        };
        let err = |what: &str| Error::Config(format!("{key}: expected {what}, got `{value}`"));
        let float = || value.parse::<f64>().map_err(|_| err("number"));
        let uint = || value.parse::<usize>().map_err(|_| err("unsigned integer"));
        let flag = || value.parse::<bool>().map_err(|_| err("true or false"));
        match field {
            "w_r" => self.w_r = float()?,
            "w_p" => self.w_p = float()?,
            "w_n" => self.w_n = float()?,
            "lambda_train" => self.lambda_train = float()?,
            "noise_sigma" => self.noise_sigma = float()?,
            "lr_stage1" => self.lr_stage1 = float()?,
            "lr_stage2" => self.lr_stage2 = float()?,
            "steps_stage1" => self.steps_stage1 = uint()?,
            "steps_stage2" => self.steps_stage2 = uint()?,
            "batch_size" => self.batch_size = uint()?,
            "warmup_steps" => self.warmup_steps = uint()?,
            "weight_decay" => self.weight_decay = float()?,
            "clip_norm" => self.clip_norm = float()?,
            "seed" => self.seed = uint()? as u64,
            "drop_offline_loss" => self.drop_offline_loss = flag()?,
            "drop_prefix_loss" => self.drop_prefix_loss = flag()?,
            "normalization" => self.normalization = flag()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(true)
    }
}

/// A chunk-aligned truncation of an input of `l_g` frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrefixSample {
    pub l_p: usize,
    pub l_g: usize,
}

/// `l_p = c·chunk` with `c` uniform over `1..=⌈l_g/chunk⌉`; the last chunk yields `l_p = l_g`.
pub fn sample_prefix(l_g: usize, chunk_frames: usize, rng: &mut impl Rng) -> Result<PrefixSample> {
    if chunk_frames == 0 || l_g < chunk_frames {
        return Err(invalid(format!(
            "input of {l_g} frames is shorter than one chunk of {chunk_frames}"
        )));
    }
    let chunks = l_g.div_ceil(chunk_frames);
    let c = rng.random_range(1..=chunks);
    Ok(PrefixSample {
        l_p: (c * chunk_frames).min(l_g),
        l_g,
    })
}

fn check_data(data: &FramedDataset, model: &Model) -> Result<()> {
    let cfg = &model.config;
    for (s, f) in data.samples.iter().zip(&data.frames) {
        let (n, dim) = f.dims2()?;
        if dim != cfg.d_model {
            return Err(Error::Config(format!(
                "frame width {dim} differs from model.d_model {}",
                cfg.d_model
            )));
        }
        if n > cfg.max_frames() || n < cfg.chunk_frames {
            return Err(Error::Config(format!(
                "sample {} has {n} frames, outside {}..={}",
                s.id,
                cfg.chunk_frames,
                cfg.max_frames()
            )));
        }
        if s.target.len() > cfg.max_target_len {
            return Err(Error::Config(format!(
                "sample {} target longer than model.max_target_len",
                s.id
            )));
        }
        if cfg.buffer_frames as f64 * 0.5 > n as f64 {
            return Err(Error::Config(format!(
                "sample {}: buffer of {} frames puts the gate target outside [0, 1]",
                s.id, cfg.buffer_frames
            )));
        }
    }
    Ok(())
}

/// One JSON line of the training log.
#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub stage: u8,
    pub step: usize,
    pub loss: f64,
    pub offline: f64,
    pub refiner: f64,
    pub prefix: f64,
    pub norm: f64,
    pub p_mean: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Graph handles and values of one stage-2 sample.
pub struct Stage2Vars {
    pub total: Var,
    pub parts: LossParts,
    pub p: Var,
    pub prefix: PrefixSample,
}

/// Build the stage-2 objective for one sample into `cx`.
pub fn stage2_objective(
    model: &Model,
    cx: &mut Ctx,
    cfg: &TrainConfig,
    sample: &Sample,
    frames: &Tensor,
    prefix: PrefixSample,
    rng: &mut impl Rng,
) -> Result<Stage2Vars> {
    let mc = &model.config;
    let w = cfg.weights();
    let l_g = frames.dims2()?.0;
    if prefix.l_g != l_g || prefix.l_p == 0 || prefix.l_p > l_g {
        return Err(invalid(format!("prefix {prefix:?} for {l_g} frames")));
    }
    let y_in = sample.decoder_input();
    let y = &sample.target;

    let car = model.chunk_ar(cx, frames)?;
    let padded = cx.value(car.rows).dims2()?.0;
    let h_off = model.nar(cx, car, padded, l_g, true)?;
    let h_glob = cx.g.mean_axis(h_off, 0)?;

    let l_off = if w.offline > 0.0 {
        let dec = model.decode(cx, h_off, None, &y_in)?;
        Some(offline_loss(&mut cx.g, dec.logits, y)?)
    } else {
        None
    };

    let h_pre = if prefix.l_p == l_g {
        h_off
    } else {
        let rows = prefix.l_p.div_ceil(mc.chunk_frames) * mc.chunk_frames;
        model.nar(cx, car, rows, prefix.l_p, false)?
    };
    let dec = model.decode(cx, h_pre, None, &y_in)?;
    let gate = model.gate(cx, dec.o_dec, cfg.noise_sigma, rng)?;
    let p_vals = cx.value(gate.p).data().to_vec();
    let l_pre = if w.prefix > 0.0 {
        Some(prefix_loss(
            &mut cx.g,
            dec.logits,
            y,
            &p_vals,
            cfg.lambda_train,
        )?)
    } else {
        None
    };

    let ref_logits = model.refiner(cx, &y_in, dec.o_dec, h_pre, h_glob, gate.p)?;
    let l_ref = refiner_loss(&mut cx.g, ref_logits, y)?;

    let target = norm_target(prefix.l_p, l_g, mc.buffer_frames)?;
    let l_norm = norm_loss(&mut cx.g, gate.p, target)?;

    let val = |cx: &Ctx, v: Option<Var>| v.map(|v| cx.value(v).data()[0]).unwrap_or(0.0);
    let parts = LossParts {
        offline: val(cx, l_off),
        refiner: val(cx, Some(l_ref)),
        prefix: val(cx, l_pre),
        norm: val(cx, Some(l_norm)),
    };
    total_loss(&parts, &w)?;
    let terms: Vec<(Var, f64)> = [
        l_off.map(|l| (l, w.offline)),
        Some((l_ref, w.refiner)),
        l_pre.map(|l| (l, w.prefix)),
        Some((l_norm, w.norm)),
    ]
    .into_iter()
    .flatten()
    .collect();
    let total = combine(&mut cx.g, &terms)?;
    Ok(Stage2Vars {
        total,
        parts,
        p: gate.p,
        prefix,
    })
}

fn accumulate(acc: &mut [Option<Tensor>], grads: Vec<Option<Tensor>>, scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        match a {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += scale * y;
                }
            }
            None => {
                let mut g = g;
                for x in g.data_mut() {
                    *x *= scale;
                }
                *a = Some(g);
            }
        }
    }
}

fn write_log(log: &mut Option<&mut dyn Write>, entry: &StepLog) -> Result<()> {
    if let Some(w) = log {
        serde_json::to_writer(&mut **w, entry)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

struct Loop {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Loop {
    fn new(seed: u64, stage: u64, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stage);
        Self {
            rng,
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Offline pretraining: `L_offline` only; gate and refiner parameters are not touched.
pub fn train_stage1(
    model: &mut Model,
    data: &FramedDataset,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(data, model)?;
    if data.is_empty() {
        return Err(invalid("empty training set"));
    }
    let mask = model.trainable_mask(|n| !Model::is_gate_param(n) && !Model::is_refiner_param(n));
    let sched = Schedule {
        peak: cfg.lr_stage1,
        warmup: cfg.warmup_steps,
        total: cfg.steps_stage1,
    };
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut lp = Loop::new(cfg.seed, 1, data.len());
    let mut report = TrainReport::default();
    for step in 0..cfg.steps_stage1 {
        let mut acc: Vec<Option<Tensor>> = vec![None; model.params.len()];
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let i = lp.next();
            let s = &data.samples[i];
            let mut cx = Ctx::train(&model.params, &mask);
            let h = model.encode(&mut cx, &data.frames[i], true)?;
            let dec = model.decode(&mut cx, h, None, &s.decoder_input())?;
            let loss = offline_loss(&mut cx.g, dec.logits, &s.target)?;
            let lv = cx.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::NonFinite("offline"));
            }
            loss_sum += lv;
            let mut grads = cx.g.backward(loss)?;
            let pg = cx.param_grads(&mut grads);
            accumulate(&mut acc, pg, 1.0 / cfg.batch_size as f64);
        }
        let grad_norm = clip_global_norm(&mut acc, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let lr = sched.lr(step);
        opt.step(&mut model.params, &acc, lr);
        let loss = loss_sum / cfg.batch_size as f64;
        let entry = StepLog {
            stage: 1,
            step,
            loss,
            offline: loss,
            refiner: 0.0,
            prefix: 0.0,
            norm: 0.0,
            p_mean: f64::NAN,
            lr,
            grad_norm,
        };
        write_log(&mut log, &entry)?;
        report.steps.push(entry);
    }
    Ok(report)
}

/// Simultaneous training on the weighted objective; block-causal encoder parameters stay frozen.
pub fn train_stage2(
    model: &mut Model,
    data: &FramedDataset,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(data, model)?;
    if data.is_empty() {
        return Err(invalid("empty training set"));
    }
    let mask = model.trainable_mask(|n| !Model::is_chunk_ar_param(n));
    let sched = Schedule {
        peak: cfg.lr_stage2,
        warmup: cfg.warmup_steps,
        total: cfg.steps_stage2,
    };
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut lp = Loop::new(cfg.seed, 2, data.len());
    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise.set_stream(3);
    let w = cfg.weights();
    let mut report = TrainReport::default();
    let chunk = model.config.chunk_frames;
    for step in 0..cfg.steps_stage2 {
        let mut acc: Vec<Option<Tensor>> = vec![None; model.params.len()];
        let mut sums = LossParts::default();
        let mut p_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let i = lp.next();
            let frames = &data.frames[i];
            let prefix = sample_prefix(frames.dims2()?.0, chunk, &mut lp.rng)?;
            let mut cx = Ctx::train(&model.params, &mask);
            let out = stage2_objective(
                model,
                &mut cx,
                cfg,
                &data.samples[i],
                frames,
                prefix,
                &mut noise,
            )?;
            sums.offline += out.parts.offline;
            sums.refiner += out.parts.refiner;
            sums.prefix += out.parts.prefix;
            sums.norm += out.parts.norm;
            let p = cx.value(out.p).data();
            p_sum += p.iter().sum::<f64>() / p.len() as f64;
            let mut grads = cx.g.backward(out.total)?;
            let pg = cx.param_grads(&mut grads);
            accumulate(&mut acc, pg, 1.0 / cfg.batch_size as f64);
        }
        for (a, keep) in acc.iter_mut().zip(&mask) {
            if !keep {
                *a = None;
            }
        }
        let grad_norm = clip_global_norm(&mut acc, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let lr = sched.lr(step);
        opt.step(&mut model.params, &acc, lr);
        let b = cfg.batch_size as f64;
        let parts = LossParts {
            offline: sums.offline / b,
            refiner: sums.refiner / b,
            prefix: sums.prefix / b,
            norm: sums.norm / b,
        };
        let entry = StepLog {
            stage: 2,
            step,
            loss: total_loss(&parts, &w)?,
            offline: parts.offline,
            refiner: parts.refiner,
            prefix: parts.prefix,
            norm: parts.norm,
            p_mean: p_sum / b,
            lr,
            grad_norm,
        };
        write_log(&mut log, &entry)?;
        report.steps.push(entry);
    }
    Ok(report)
}
