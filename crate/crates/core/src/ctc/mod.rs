//! Character vocabulary, DNN probe, CTC loss and decoders.

mod decode;
mod loss;

use std::collections::BTreeSet;

use rand::Rng;
use thiserror::Error;

pub use decode::{beam_search, greedy_decode, greedy_ids, BeamConfig, CtcHypothesis};
pub use loss::{ctc_loss, ctc_loss_var, feasible, CtcError};

use crate::encoder::Dense;
use crate::params::{Group, ParamStore};
use crate::tensor::{Graph, Result, Var};

pub const BLANK: usize = 0;

#[derive(Debug, Error, PartialEq)]
pub enum VocabError {
    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),
    #[error("token id {0} out of range")]
    BadId(usize),
    #[error("vocabulary is empty")]
    Empty,
}

/// Blank (id 0) followed by sorted characters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
}

impl Vocabulary {
    /// Characters harvested from lowercased transcripts.
    pub fn from_transcripts<S: AsRef<str>>(texts: impl IntoIterator<Item = S>) -> std::result::Result<Self, VocabError> {
        let set: BTreeSet<char> = texts.into_iter().flat_map(|t| normalize_transcript(t.as_ref()).chars().collect::<Vec<_>>()).collect();
        Self::from_chars(set.into_iter().collect())
    }

    pub fn from_chars(mut chars: Vec<char>) -> std::result::Result<Self, VocabError> {
        chars.sort_unstable();
        chars.dedup();
        if chars.is_empty() {
            return Err(VocabError::Empty);
        }
        Ok(Self { chars })
    }

    /// Number of ids including blank.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.chars.binary_search(&c).ok().map(|i| i + 1)
    }

    pub fn token(&self, id: usize) -> Option<char> {
        id.checked_sub(1).and_then(|i| self.chars.get(i).copied())
    }

    pub fn space_id(&self) -> Option<usize> {
        self.id(' ')
    }

    pub fn encode(&self, text: &str) -> std::result::Result<Vec<usize>, VocabError> {
        normalize_transcript(text).chars().map(|c| self.id(c).ok_or(VocabError::UnknownChar(c))).collect()
    }

    /// Text for non-blank ids.
    pub fn decode(&self, ids: &[usize]) -> std::result::Result<String, VocabError> {
        ids.iter().filter(|&&i| i != BLANK).map(|&i| self.token(i).ok_or(VocabError::BadId(i))).collect()
    }

    /// JSON string of the character list, for config blobs.
    pub fn to_config_value(&self) -> String {
        serde_json::to_string(&self.chars.iter().collect::<String>()).expect("string serializes")
    }

    pub fn from_config_value(v: &str) -> std::result::Result<Self, VocabError> {
        let s: String = serde_json::from_str(v).map_err(|_| VocabError::Empty)?;
        Self::from_chars(s.chars().collect())
    }
}

/// Lowercase and collapse whitespace runs to single spaces.
pub fn normalize_transcript(text: &str) -> String {
    text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub hidden_dim: usize,
    pub n_hidden: usize,
    pub dropout: f32,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 1024,
            n_hidden: 3,
            dropout: 0.15,
        }
    }
}

/// `n_hidden × (linear → GELU → dropout)`, then linear to the vocabulary and log-softmax.
#[derive(Debug, Clone)]
pub struct Probe {
    pub cfg: ProbeConfig,
    hidden: Vec<Dense>,
    out: Dense,
    pub vocab_size: usize,
}

impl Probe {
    pub fn new<R: Rng>(cfg: ProbeConfig, d_model: usize, vocab_size: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let mut hidden = Vec::with_capacity(cfg.n_hidden);
        let mut fan_in = d_model;
        for i in 0..cfg.n_hidden {
            hidden.push(Dense::new(store, &format!("probe.hidden.{i}"), fan_in, cfg.hidden_dim, Group::Head, rng));
            fan_in = cfg.hidden_dim;
        }
        let out = Dense::scaled(store, "probe.out", fan_in, vocab_size, Group::Head, 0.1, rng);
        Self { cfg, hidden, out, vocab_size }
    }

    /// `[T', d_model]` → log-probabilities `[T', V]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let mut x = h;
        for layer in &self.hidden {
            x = layer.forward(g, store, x)?;
            x = g.gelu(x);
            x = g.dropout(x, self.cfg.dropout);
        }
        let logits = self.out.forward(g, store, x)?;
        Ok(g.log_softmax(logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vocabulary_is_dense_with_blank_zero() {
        let v = Vocabulary::from_transcripts(["Hello World", "low"]).unwrap();
        assert_eq!(v.size(), 1 + " dehlorw".len());
        assert_eq!(v.token(0), None);
        for id in 1..v.size() {
            assert_eq!(v.id(v.token(id).unwrap()), Some(id));
        }
        let ids = v.encode("hello  world").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "hello world");
        assert_eq!(v.encode("x"), Err(VocabError::UnknownChar('x')));
        assert_eq!(Vocabulary::from_config_value(&v.to_config_value()).unwrap(), v);
    }

    #[test]
    fn probe_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let probe = Probe::new(ProbeConfig { hidden_dim: 32, ..Default::default() }, 16, 7, &mut store, &mut rng);
        for t in [1, 5, 13] {
            let x = Tensor::randn(&[t, 16], 1.0, &mut rng);
            let mut g = Graph::new();
            let xv = g.input(&x);
            let a = probe.forward(&mut g, &store, xv).unwrap();
            let b = probe.forward(&mut g, &store, xv).unwrap();
            assert_eq!(g.shape(a), &[t, 7]);
            assert_eq!(g.value(a), g.value(b));
            for row in g.value(a).chunks(7) {
                let s: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
