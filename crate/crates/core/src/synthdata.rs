//! Desk-scale transduction tasks with a controllable information lag.
//!
//! Source tokens are turned into "acoustic" frames by repeating a fixed random
//! embedding per token and adding Gaussian noise. Only token ids are stored on
//! disk; frames are regenerated from the task spec and the sample id.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const FIRST_CONTENT_TOKEN: usize = 3;

// stream ids keep the per-sample token and frame-noise draws independent
const TOKEN_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 1 << 32;
const TABLE_STREAM: u64 = u64::MAX;
const MAP_STREAM: u64 = u64::MAX - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    /// Target token `i` is source token `min(i + d, |X|)`.
    DelayedCopy {
        d: usize,
    },
    /// Source reversed within consecutive windows of `w`.
    WindowReorder {
        w: usize,
    },
    /// Position-wise bijective relabelling of content tokens.
    TokenMap,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Copy => write!(f, "copy"),
            TaskKind::DelayedCopy { d } => write!(f, "delayed_copy:{d}"),
            TaskKind::WindowReorder { w } => write!(f, "window_reorder:{w}"),
            TaskKind::TokenMap => write!(f, "token_map"),
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    /// `copy`, `delayed_copy:D`, `window_reorder:W` or `token_map`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<usize> {
            a.ok_or_else(|| Error::Config(format!("task `{name}` needs a parameter")))?
                .parse()
                .map_err(|_| Error::Config(format!("bad task parameter in `{s}`")))
        };
        match name {
            "copy" => Ok(TaskKind::Copy),
            "delayed_copy" => Ok(TaskKind::DelayedCopy { d: num(arg)? }),
            "window_reorder" => Ok(TaskKind::WindowReorder { w: num(arg)? }),
            "token_map" => Ok(TaskKind::TokenMap),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub frames_per_token: usize,
    pub frame_noise: f64,
    pub frame_dim: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::DelayedCopy { d: 2 },
            vocab_size: 64,
            min_len: 8,
            max_len: 24,
            frames_per_token: 2,
            frame_noise: 0.05,
            frame_dim: 64,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_len == 0 || self.max_len < self.min_len {
            return bad(format!(
                "length range {}..={} is empty or starts at 0",
                self.min_len, self.max_len
            ));
        }
        if self.frames_per_token == 0 || self.frame_dim == 0 {
            return bad("frames_per_token and frame_dim must be >= 1".into());
        }
        if !(self.frame_noise >= 0.0 && self.frame_noise.is_finite()) {
            return bad(format!(
                "frame_noise must be >= 0, got {}",
                self.frame_noise
            ));
        }
        if let TaskKind::WindowReorder { w: 0 } = self.kind {
            return bad("window_reorder needs w >= 1".into());
        }
        // a bijection over content tokens needs at least two of them to be non-trivial
        let min_vocab = match self.kind {
            TaskKind::TokenMap => FIRST_CONTENT_TOKEN + 2,
            _ => FIRST_CONTENT_TOKEN + 1,
        };
        if self.vocab_size < min_vocab {
            return bad(format!(
                "vocab_size {} too small for {} (need {min_vocab})",
                self.vocab_size, self.kind
            ));
        }
        Ok(())
    }

    pub fn content_tokens(&self) -> usize {
        self.vocab_size - FIRST_CONTENT_TOKEN
    }

    /// Permutation used by `token_map`, indexed by token id (specials map to themselves).
    pub fn token_permutation(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(MAP_STREAM);
        let mut perm: Vec<usize> = (FIRST_CONTENT_TOKEN..self.vocab_size).collect();
        // reject identity points so every content token actually changes
        loop {
            perm.shuffle(&mut rng);
            if perm
                .iter()
                .enumerate()
                .all(|(i, t)| *t != i + FIRST_CONTENT_TOKEN)
            {
                break;
            }
        }
        (0..FIRST_CONTENT_TOKEN).chain(perm).collect()
    }

    /// Target (without EOS) and per-token lag for a source sequence.
    pub fn transduce(&self, source: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let n = source.len();
        match self.kind {
            TaskKind::Copy => (source.to_vec(), (1..=n).collect()),
            TaskKind::DelayedCopy { d } => {
                let lag: Vec<usize> = (1..=n).map(|i| (i + d).min(n)).collect();
                (lag.iter().map(|l| source[l - 1]).collect(), lag)
            }
            TaskKind::WindowReorder { w } => {
                let mut target = Vec::with_capacity(n);
                let mut lag = Vec::with_capacity(n);
                for start in (0..n).step_by(w) {
                    let end = (start + w).min(n);
                    target.extend(source[start..end].iter().rev());
                    lag.extend(std::iter::repeat_n(end, end - start));
                }
                (target, lag)
            }
            TaskKind::TokenMap => {
                let perm = self.token_permutation();
                (source.iter().map(|t| perm[*t]).collect(), (1..=n).collect())
            }
        }
    }

    /// Fixed `[vocab, frame_dim]` N(0, 1) table; errors if two rows coincide.
    pub fn embedding_table(&self) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(TABLE_STREAM);
        let n = self.vocab_size * self.frame_dim;
        let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let table = Tensor::matrix(self.vocab_size, self.frame_dim, data)?;
        for a in 0..self.vocab_size {
            for b in a + 1..self.vocab_size {
                if table.row(a) == table.row(b) {
                    return Err(invalid(format!("frame embeddings of {a} and {b} coincide")));
                }
            }
        }
        Ok(table)
    }

    fn sample_rng(&self, id: u64, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.wrapping_add(id));
        rng
    }

    pub fn make_sample(&self, id: u64) -> Sample {
        let mut rng = self.sample_rng(id, TOKEN_STREAM);
        let len = rng.random_range(self.min_len..=self.max_len);
        let source: Vec<usize> = (0..len)
            .map(|_| rng.random_range(FIRST_CONTENT_TOKEN..self.vocab_size))
            .collect();
        let (mut target, true_lag) = self.transduce(&source);
        target.push(EOS);
        Sample {
            id,
            source,
            target,
            true_lag,
        }
    }

    /// Frames of a sample, regenerated deterministically from `(seed, id)`.
    pub fn frames(&self, table: &Tensor, sample: &Sample) -> Result<Tensor> {
        let mut rng = self.sample_rng(sample.id, NOISE_STREAM);
        frames_from_tokens(
            &sample.source,
            self.frames_per_token,
            self.frame_noise,
            table,
            &mut rng,
        )
    }
}

/// Each token's embedding row repeated `k` times, plus N(0, σ²) noise per value.
pub fn frames_from_tokens(
    tokens: &[usize],
    k: usize,
    sigma: f64,
    table: &Tensor,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let (vocab, dim) = table.dims2()?;
    if k == 0 {
        return Err(invalid("frames_per_token must be >= 1"));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(tokens.len() * k * dim);
    for &t in tokens {
        if t >= vocab {
            return Err(invalid(format!("token {t} outside table of {vocab}")));
        }
        for _ in 0..k {
            if sigma > 0.0 {
                data.extend(table.row(t).iter().map(|v| v + noise.sample(rng)));
            } else {
                data.extend_from_slice(table.row(t));
            }
        }
    }
    Tensor::matrix(tokens.len() * k, dim, data)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: u64,
    pub source: Vec<usize>,
    /// Target tokens followed by EOS.
    pub target: Vec<usize>,
    /// Source tokens needed before each target content token is determined.
    pub true_lag: Vec<usize>,
}

impl Sample {
    /// Target without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        &self.target[..self.target.len() - 1]
    }

    /// Decoder input `[BOS, y_1, …, y_n]` paired with [`Sample::target`].
    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(BOS)
            .chain(self.content().iter().copied())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    source: Vec<usize>,
    target: Vec<usize>,
    true_lag: Vec<usize>,
    spec: TaskSpec,
}

/// `n` samples with ids `first_id..first_id + n`.
pub fn generate_range(spec: &TaskSpec, first_id: u64, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(invalid("dataset size must be >= 1"));
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples: (0..n as u64)
            .map(|i| spec.make_sample(first_id + i))
            .collect(),
    })
}

pub fn generate(spec: &TaskSpec, n: usize) -> Result<Dataset> {
    generate_range(spec, 0, n)
}

/// Samples paired with their regenerated frames.
#[derive(Clone, Debug)]
pub struct FramedDataset {
    pub spec: TaskSpec,
    pub samples: Vec<Sample>,
    pub frames: Vec<Tensor>,
}

impl FramedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

impl Dataset {
    pub fn materialize(&self) -> Result<FramedDataset> {
        let table = self.spec.embedding_table()?;
        let frames = self
            .samples
            .iter()
            .map(|s| self.spec.frames(&table, s))
            .collect::<Result<_>>()?;
        Ok(FramedDataset {
            spec: self.spec.clone(),
            samples: self.samples.clone(),
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for s in &self.samples {
            let rec = Record {
                id: s.id,
                source: s.source.clone(),
                target: s.target.clone(),
                true_lag: s.true_lag.clone(),
                spec: self.spec.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut spec: Option<TaskSpec> = None;
        let mut samples = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Data {
                path: path.to_path_buf(),
                line: lineno,
                msg,
            };
            let rec: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            rec.spec.validate().map_err(|e| err(e.to_string()))?;
            match &spec {
                None => spec = Some(rec.spec.clone()),
                Some(s) if *s != rec.spec => {
                    return Err(err("spec differs from earlier records".into()))
                }
                Some(_) => {}
            }
            let s = Sample {
                id: rec.id,
                source: rec.source,
                target: rec.target,
                true_lag: rec.true_lag,
            };
            check_sample(&rec.spec, &s).map_err(err)?;
            samples.push(s);
        }
        let spec = spec.ok_or_else(|| invalid(format!("{}: no records", path.display())))?;
        Ok(Self { spec, samples })
    }
}

fn check_sample(spec: &TaskSpec, s: &Sample) -> std::result::Result<(), String> {
    if s.source.is_empty() {
        return Err("empty source".into());
    }
    if let Some(t) = s
        .source
        .iter()
        .find(|t| **t < FIRST_CONTENT_TOKEN || **t >= spec.vocab_size)
    {
        return Err(format!("source token {t} outside content range"));
    }
    if s.target.last() != Some(&EOS) {
        return Err("target must end with EOS".into());
    }
    let (target, lag) = spec.transduce(&s.source);
    if s.content() != target.as_slice() {
        return Err("target does not follow the task rule".into());
    }
    if s.true_lag != lag {
        return Err("true_lag does not follow the task rule".into());
    }
    Ok(())
}
