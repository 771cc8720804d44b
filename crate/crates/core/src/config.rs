//! Run configuration: `key = value` text with dotted keys, `#` comments.
//!
//! ```text
//! # delayed copy, desk scale
//! task.kind = delayed_copy:2
//! model.d_model = 64
//! train.noise_sigma = 1
//! eval.lambdas = 0.9, 0.7, 0.5, 0.3, 0.1
//! ```

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::synthdata::TaskSpec;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub lambdas: Vec<f64>,
    /// Content-token cap per hypothesis.
    pub max_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.9, 0.7, 0.5, 0.3, 0.1],
            max_len: 48,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub eval: EvalConfig,
}

fn parse_lambdas(key: &str, value: &str) -> Result<Vec<f64>> {
    let lambdas = value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{key}: bad number `{}`", v.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
        return Err(Error::Config(format!(
            "{key}: thresholds must lie in (0, 1)"
        )));
    }
    Ok(lambdas)
}

impl RunConfig {
    /// Apply one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if self.model.set(key, value)? || self.train.set(key, value)? {
            return Ok(());
        }
        let err = |what: &str| Error::Config(format!("{key}: expected {what}, got `{value}`"));
        let uint = || value.parse::<usize>().map_err(|_| err("unsigned integer"));
        match key {
            "task.kind" => self.task.kind = value.parse()?,
            "task.vocab_size" => self.task.vocab_size = uint()?,
            "task.min_len" => self.task.min_len = uint()?,
            "task.max_len" => self.task.max_len = uint()?,
            "task.frames_per_token" => self.task.frames_per_token = uint()?,
            "task.frame_noise" => {
                self.task.frame_noise = value.parse().map_err(|_| err("number"))?
            }
            "task.frame_dim" => self.task.frame_dim = uint()?,
            "task.seed" => self.task.seed = uint()? as u64,
            "eval.lambdas" => self.eval.lambdas = parse_lambdas(key, value)?,
            "eval.max_len" => self.eval.max_len = uint()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Apply the lines of a config file on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                e => Error::Config(format!("line {}: {e}", i + 1)),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.task.vocab_size != self.model.vocab_size {
            return bad(format!(
                "task.vocab_size {} differs from model.vocab_size {}",
                self.task.vocab_size, self.model.vocab_size
            ));
        }
        if self.task.frame_dim != self.model.d_model {
            return bad(format!(
                "task.frame_dim {} differs from model.d_model {}",
                self.task.frame_dim, self.model.d_model
            ));
        }
        if self.task.max_len * self.task.frames_per_token > self.model.max_frames() {
            return bad("longest source exceeds model.max_chunks × model.chunk_frames".into());
        }
        if self.task.min_len * self.task.frames_per_token < self.model.chunk_frames {
            return bad("shortest source is shorter than one chunk".into());
        }
        if self.task.max_len + 1 > self.model.max_target_len {
            return bad("longest target exceeds model.max_target_len".into());
        }
        if self.eval.max_len == 0 || self.eval.max_len > self.model.max_target_len {
            return bad("eval.max_len must lie in 1..=model.max_target_len".into());
        }
        Ok(())
    }

    /// Every effective value, sorted by key.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let t = &self.task;
        let mut kv = self.model.to_kv();
        kv.extend(self.train.to_kv());
        kv.extend([
            ("task.kind".into(), t.kind.to_string()),
            ("task.vocab_size".into(), t.vocab_size.to_string()),
            ("task.min_len".into(), t.min_len.to_string()),
            ("task.max_len".into(), t.max_len.to_string()),
            (
                "task.frames_per_token".into(),
                t.frames_per_token.to_string(),
            ),
            ("task.frame_noise".into(), t.frame_noise.to_string()),
            ("task.frame_dim".into(), t.frame_dim.to_string()),
            ("task.seed".into(), t.seed.to_string()),
            (
                "eval.lambdas".into(),
                self.eval
                    .lambdas
                    .iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("eval.max_len".into(), self.eval.max_len.to_string()),
        ]);
        kv.sort();
        kv
    }

    /// Canonical text form, parseable by [`RunConfig::apply_text`].
    pub fn dump(&self) -> String {
        self.to_kv()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of [`RunConfig::dump`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.dump().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// `<checkpoint>.cfg`: the effective run configuration stored next to the weights.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Write the weights and the configuration sidecar.
pub fn save_checkpoint(model: &Model, cfg: &RunConfig, path: &Path) -> Result<()> {
    if model.config != cfg.model {
        return Err(Error::Config(
            "model config differs from the run config being saved".into(),
        ));
    }
    model.save(path)?;
    let text = format!("# config_hash = {}\n{}", cfg.hash(), cfg.dump());
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

/// Rebuild a model from its weights and sidecar.
pub fn load_checkpoint(path: &Path) -> Result<(Model, RunConfig)> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(Error::Checkpoint(format!(
            "missing configuration sidecar {}",
            side.display()
        )));
    }
    let cfg = RunConfig::from_file(&side)?;
    let mut model = Model::new(cfg.model.clone())?;
    model.load_params(path)?;
    Ok((model, cfg))
}
