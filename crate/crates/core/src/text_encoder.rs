//! Prompt tokenization and a frozen text encoder.
//!
//! Tokens are lowercase runs of letters and digits (a `.` between two digits
//! stays inside the run, so `5.250` is one token); every other non-space
//! character is a token of its own. Each token maps to
//! `4 + fnv1a64(utf8) mod (V − 4)`, leaving ids 0-3 for pad, unknown, begin
//! and end. Sequences are `begin, tokens…, end`, truncated so that `end`
//! lands at the last slot, and right-padded to `max_len`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::peft::{masked_mean_pool, sinusoidal_positions, Encoder, EncoderConfig, Param, Parameters, TrainPolicy};
use crate::scalar::Scalar;

pub const PAD_ID: u32 = 0;
pub const UNKNOWN_ID: u32 = 1;
pub const BEGIN_ID: u32 = 2;
pub const END_ID: u32 = 3;
const RESERVED: u32 = 4;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: u32,
    pub max_len: usize,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            size: 4096,
            max_len: 64,
        }
    }
}

/// Splits text into word, number and punctuation pieces.
pub fn split_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            cur.push(c);
            continue;
        }
        let inner_point = c == '.'
            && cur.chars().last().is_some_and(|p| p.is_ascii_digit())
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if inner_point {
            cur.push(c);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl Vocabulary {
    pub fn validate(&self) -> Result<()> {
        if self.size <= RESERVED || self.max_len < 2 {
            return Err(Error::Config(format!(
                "vocabulary needs size > {RESERVED} and max_len >= 2: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn token_id(&self, token: &str) -> u32 {
        let span = u64::from(self.size - RESERVED);
        RESERVED + (fnv1a(token.as_bytes()) % span) as u32
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(self.max_len);
        ids.push(BEGIN_ID);
        ids.extend(
            split_tokens(text)
                .iter()
                .take(self.max_len - 2)
                .map(|t| self.token_id(t)),
        );
        ids.push(END_ID);
        ids.resize(self.max_len, PAD_ID);
        ids
    }
}

/// Per-token features and which rows are real tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures<T> {
    pub features: Matrix<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> TokenFeatures<T> {
    /// Mean over non-pad tokens.
    pub fn pooled(&self) -> Vec<T> {
        masked_mean_pool(&self.features, &self.valid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab: Vocabulary,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab: Vocabulary::default(),
            encoder: EncoderConfig::default(),
            seed: 0x5EED_7E47,
        }
    }
}

/// Embedding table, sinusoidal positions and an encoder stack, all frozen.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TextEncoder<T> {
    pub config: TextEncoderConfig,
    pub embedding: Param<T>,
    pub encoder: Encoder<T>,
    #[serde(skip)]
    positions: Option<Matrix<T>>,
}

impl<T: Scalar> TextEncoder<T> {
    pub fn new(config: TextEncoderConfig) -> Result<Self> {
        config.vocab.validate()?;
        config.encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.encoder.d_model;
        let embedding = Param::frozen(crate::peft::gaussian(&mut rng, config.vocab.size as usize, d, 1.0));
        let mut unused = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA5A5);
        let mut encoder = Encoder::init(config.encoder, TrainPolicy::frozen(), &mut rng, &mut unused)?;
        encoder.freeze_all();
        Ok(Self {
            config,
            embedding,
            encoder,
            positions: Some(sinusoidal_positions(config.vocab.max_len, d)),
        })
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.config.vocab.tokenize(text)
    }

    fn embed(&self, ids: &[u32]) -> Result<Matrix<T>> {
        let d = self.config.encoder.d_model;
        let max_len = self.config.vocab.max_len;
        if ids.len() > max_len {
            return Err(Error::Shape(format!("{} ids exceed max_len {max_len}", ids.len())));
        }
        let fallback;
        let pos = match &self.positions {
            Some(p) => p,
            None => {
                fallback = sinusoidal_positions(max_len, d);
                &fallback
            }
        };
        let table = &self.embedding.value;
        let mut x = Matrix::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            if id >= self.config.vocab.size {
                return Err(Error::Validation(format!(
                    "token id {id} outside vocabulary of {}",
                    self.config.vocab.size
                )));
            }
            let src = table.row(id as usize);
            for ((o, &e), &p) in x.row_mut(r).iter_mut().zip(src).zip(pos.row(r)) {
                *o = e + p;
            }
        }
        Ok(x)
    }

    /// Full `[max_len × d_model]` features; pad tokens are masked as keys.
    pub fn encode(&self, ids: &[u32]) -> Result<TokenFeatures<T>> {
        let x = self.embed(ids)?;
        let valid: Vec<bool> = ids.iter().map(|&id| id != PAD_ID).collect();
        let features = self.encoder.forward(&x, &valid)?;
        Ok(TokenFeatures { features, valid })
    }

    /// Pooled features of the non-pad prefix. Pads are never attended to, so
    /// this equals `encode(ids).pooled()` without computing the pad rows.
    pub fn encode_pooled(&self, ids: &[u32]) -> Result<Vec<T>> {
        let len = ids.iter().position(|&id| id == PAD_ID).unwrap_or(ids.len());
        if ids[len..].iter().any(|&id| id != PAD_ID) {
            return self.encode(ids).map(|f| f.pooled());
        }
        let x = self.embed(&ids[..len])?;
        let valid = vec![true; len];
        let features = self.encoder.forward(&x, &valid)?;
        Ok(masked_mean_pool(&features, &valid))
    }

    pub fn encode_text(&self, text: &str) -> Result<TokenFeatures<T>> {
        self.encode(&self.tokenize(text))
    }

    pub fn param_count(&self) -> usize {
        self.embedding.len() + self.encoder.param_counts().1
    }
}

impl<T: Scalar> Parameters<T> for TextEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&crate::peft::join(prefix, "embedding"), &self.embedding);
        self.encoder.visit(&crate::peft::join(prefix, "encoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&crate::peft::join(prefix, "embedding"), &mut self.embedding);
        self.encoder.visit_mut(&crate::peft::join(prefix, "encoder"), f);
    }
}
