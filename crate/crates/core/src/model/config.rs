use crate::error::{Error, Result};

/// Attention used by the refiner's first sub-layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefinerAttention {
    /// Position `i` attends only to decoder outputs at positions `< i`.
    PreviousOutput,
    /// Causal self-attention over the refiner's own hidden states (ablation).
    SelfAttention,
}

impl RefinerAttention {
    pub fn as_str(self) -> &'static str {
        match self {
            RefinerAttention::PreviousOutput => "poa",
            RefinerAttention::SelfAttention => "self",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "poa" => Ok(Self::PreviousOutput),
            "self" => Ok(Self::SelfAttention),
            other => Err(Error::Config(format!(
                "unknown refiner attention `{other}` (poa|self)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_chunkar_blocks: usize,
    pub n_nar_blocks: usize,
    pub n_decoder_layers: usize,
    pub n_refiner_blocks: usize,
    pub vocab_size: usize,
    /// Frames per chunk; one Read consumes one chunk.
    pub chunk_frames: usize,
    pub max_chunks: usize,
    /// Score-normalization buffer `l_b`, in frames.
    pub buffer_frames: usize,
    pub gate_hidden_dim: usize,
    pub ffn_dim: usize,
    pub expert_hidden_dim: usize,
    pub max_target_len: usize,
    pub refiner_attention: RefinerAttention,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_chunkar_blocks: 2,
            n_nar_blocks: 1,
            n_decoder_layers: 2,
            n_refiner_blocks: 2,
            vocab_size: 64,
            chunk_frames: 4,
            max_chunks: 32,
            buffer_frames: 4,
            gate_hidden_dim: 64,
            ffn_dim: 256,
            expert_hidden_dim: 128,
            max_target_len: 64,
            refiner_attention: RefinerAttention::PreviousOutput,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_chunkar_blocks", self.n_chunkar_blocks),
            ("n_nar_blocks", self.n_nar_blocks),
            ("n_decoder_layers", self.n_decoder_layers),
            ("n_refiner_blocks", self.n_refiner_blocks),
            ("chunk_frames", self.chunk_frames),
            ("max_chunks", self.max_chunks),
            ("buffer_frames", self.buffer_frames),
            ("gate_hidden_dim", self.gate_hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("expert_hidden_dim", self.expert_hidden_dim),
            ("max_target_len", self.max_target_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model ({}) not divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= crate::synthdata::FIRST_CONTENT_TOKEN {
            return Err(Error::Config(
                "model.vocab_size leaves no content tokens".into(),
            ));
        }
        Ok(())
    }

    pub fn max_frames(&self) -> usize {
        self.max_chunks * self.chunk_frames
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_chunkar_blocks", self.n_chunkar_blocks),
            ("n_nar_blocks", self.n_nar_blocks),
            ("n_decoder_layers", self.n_decoder_layers),
            ("n_refiner_blocks", self.n_refiner_blocks),
            ("vocab_size", self.vocab_size),
            ("chunk_frames", self.chunk_frames),
            ("max_chunks", self.max_chunks),
            ("buffer_frames", self.buffer_frames),
            ("gate_hidden_dim", self.gate_hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("expert_hidden_dim", self.expert_hidden_dim),
            ("max_target_len", self.max_target_len),
        ]
        .into_iter()
        .map(|(k, v)| (format!("model.{k}"), v.to_string()))
        .collect();
        kv.push((
            "model.refiner_attention".into(),
            self.refiner_attention.as_str().into(),
        ));
        kv.push(("model.init_seed".into(), self.init_seed.to_string()));
        kv
    }

    /// Apply one `model.*` key; returns `false` when the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let field = match key.strip_prefix("model.") {
            Some(f) => f,
            None => return Ok(false),
        };
        let num = || -> Result<usize> {
            value.parse().map_err(|_| {
                Error::Config(format!("{key}: expected unsigned integer, got `{value}`"))
            })
        };
        match field {
            "d_model" => self.d_model = num()?,
            "n_heads" => self.n_heads = num()?,
            "n_chunkar_blocks" => self.n_chunkar_blocks = num()?,
            "n_nar_blocks" => self.n_nar_blocks = num()?,
            "n_decoder_layers" => self.n_decoder_layers = num()?,
            "n_refiner_blocks" => self.n_refiner_blocks = num()?,
            "vocab_size" => self.vocab_size = num()?,
            "chunk_frames" => self.chunk_frames = num()?,
            "max_chunks" => self.max_chunks = num()?,
            "buffer_frames" => self.buffer_frames = num()?,
            "gate_hidden_dim" => self.gate_hidden_dim = num()?,
            "ffn_dim" => self.ffn_dim = num()?,
            "expert_hidden_dim" => self.expert_hidden_dim = num()?,
            "max_target_len" => self.max_target_len = num()?,
            "refiner_attention" => self.refiner_attention = RefinerAttention::parse(value)?,
            "init_seed" => self.init_seed = num()? as u64,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            n_heads: 5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            chunk_frames: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig {
            d_model: 32,
            refiner_attention: RefinerAttention::SelfAttention,
            ..Default::default()
        };
        let mut back = ModelConfig::default();
        for (k, v) in cfg.to_kv() {
            assert!(back.set(&k, &v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(!back.set("train.w_r", "0.2").unwrap());
        assert!(back.set("model.bogus", "1").is_err());
    }
}
