use candle_core::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{device, gaussian_vec, rng};

pub const START_TOKEN: &str = "<sot>";
pub const END_TOKEN: &str = "<eot>";
pub const PAD_TOKEN: &str = "<pad>";

/// Per-token text embeddings with the token strings they came from.
#[derive(Debug, Clone)]
pub struct TextCondition {
    /// `(L, d_text)`.
    pub token_embeddings: Tensor,
    pub token_labels: Vec<String>,
}

impl TextCondition {
    pub fn new(token_embeddings: Tensor, token_labels: Vec<String>) -> Result<Self> {
        let (l, _) = token_embeddings.dims2()?;
        if l == 0 || l != token_labels.len() {
            return Err(Error::contract(format!(
                "text condition needs L >= 1 embeddings matching {} labels, got {l}",
                token_labels.len()
            )));
        }
        Ok(TextCondition {
            token_embeddings,
            token_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.token_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.token_embeddings.dims()[1]
    }
}

/// Lowercased alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Deterministic stand-in for a contrastive text encoder: every word maps to a
/// fixed pseudo-random vector derived from its hash. Captions are framed as
/// `<sot> words... <eot> <pad>...` up to `context_length`.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    dim: usize,
    context_length: usize,
    seed: u64,
}

impl ToyTextEncoder {
    pub fn new(dim: usize, context_length: usize, seed: u64) -> Result<Self> {
        if dim == 0 || context_length < 3 {
            return Err(Error::Config(format!(
                "text encoder needs dim >= 1 and context_length >= 3, got {dim}/{context_length}"
            )));
        }
        Ok(ToyTextEncoder {
            dim,
            context_length,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn context_length(&self) -> usize {
        self.context_length
    }

    pub fn word_embedding(&self, word: &str) -> Vec<f64> {
        let digest = Sha256::digest(word.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        let mut r = rng(u64::from_le_bytes(b) ^ self.seed);
        gaussian_vec(self.dim, &mut r)
    }

    /// Token strings for `caption`, framed and padded to the context length.
    pub fn frame(&self, caption: &str) -> Result<Vec<String>> {
        let words = tokenize(caption);
        if words.is_empty() {
            return Err(Error::Input("caption has no tokens".into()));
        }
        let mut tokens = Vec::with_capacity(self.context_length);
        tokens.push(START_TOKEN.to_string());
        tokens.extend(words.into_iter().take(self.context_length - 2));
        tokens.push(END_TOKEN.to_string());
        while tokens.len() < self.context_length {
            tokens.push(PAD_TOKEN.to_string());
        }
        Ok(tokens)
    }

    pub fn encode(&self, caption: &str) -> Result<TextCondition> {
        let tokens = self.frame(caption)?;
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for (pos, tok) in tokens.iter().enumerate() {
            let e = self.word_embedding(tok);
            for (i, v) in e.into_iter().enumerate() {
                // small positional signature so repeated tokens stay distinguishable
                let phase = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / self.dim as f64);
                let p = if i % 2 == 0 { phase.sin() } else { phase.cos() };
                data.push(v + 0.1 * p);
            }
        }
        let t = Tensor::from_vec(data, (tokens.len(), self.dim), &device())?;
        TextCondition::new(t, tokens)
    }

    /// Embedding of an object label in the shared sketch/text space: mean of
    /// its word embeddings, without positional terms.
    pub fn label_embedding(&self, label: &str) -> Result<Vec<f64>> {
        let words = tokenize(label);
        if words.is_empty() {
            return Err(Error::Input(format!("label {label:?} has no tokens")));
        }
        let mut acc = vec![0.0; self.dim];
        for w in &words {
            for (a, v) in acc.iter_mut().zip(self.word_embedding(w)) {
                *a += v / words.len() as f64;
            }
        }
        Ok(acc)
    }
}
