//! Encoder plus optional pre-training and CTC heads, with checkpoint conversion.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bestrq::{Quantizer, QuantizerConfig, SslHead};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::chunking::ChunkPolicy;
use crate::ctc::{greedy_decode, Probe, ProbeConfig, Vocabulary};
use crate::encoder::{Encoder, EncoderConfig};
use crate::frontend::FeatureSequence;
use crate::params::ParamStore;
use crate::tensor::{Graph, Result, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint has no CTC probe; fine-tune it first")]
    NotFinetuned,
    #[error("checkpoint has no pre-training head")]
    NoSslHead,
    #[error("model config: {0}")]
    Config(String),
}

impl From<crate::encoder::ConfigError> for ModelError {
    fn from(e: crate::encoder::ConfigError) -> Self {
        ModelError::Config(e.0)
    }
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Config(e.to_string())
    }
}

/// Pre-training head and its frozen target quantizer (kept outside the store).
#[derive(Debug, Clone)]
pub struct SslParts {
    pub head: SslHead,
    pub quantizer: Quantizer,
}

#[derive(Debug, Clone)]
pub struct CtcParts {
    pub probe: Probe,
    pub vocab: Vocabulary,
}

#[derive(Debug, Clone)]
pub struct AsrModel {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub ssl: Option<SslParts>,
    pub ctc: Option<CtcParts>,
}

fn get<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> std::result::Result<T, ModelError> {
    ck.config_value(key)
        .ok_or_else(|| ModelError::Config(format!("missing config key {key}")))?
        .parse()
        .map_err(|_| ModelError::Config(format!("bad value for {key}")))
}

impl AsrModel {
    /// Fresh encoder with a pre-training head.
    pub fn for_pretraining(enc: EncoderConfig, qcfg: QuantizerConfig, seed: u64) -> std::result::Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(enc, &mut store, &mut rng)?;
        let quantizer = Quantizer::new(qcfg)?;
        let head = SslHead::new(&mut store, encoder.cfg.d_model, quantizer.cfg.codebook_size, &mut rng);
        Ok(Self {
            store,
            encoder,
            ssl: Some(SslParts { head, quantizer }),
            ctc: None,
        })
    }

    /// Fresh encoder with a CTC probe (no pre-training).
    pub fn for_finetuning(enc: EncoderConfig, vocab: Vocabulary, probe: ProbeConfig, seed: u64) -> std::result::Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(enc, &mut store, &mut rng)?;
        let mut m = Self {
            store,
            encoder,
            ssl: None,
            ctc: None,
        };
        m.attach_probe(vocab, probe, seed ^ 0x9e37_79b9);
        Ok(m)
    }

    /// Keep only the encoder weights and add a freshly initialized probe.
    pub fn into_finetuning(self, vocab: Vocabulary, probe: ProbeConfig, seed: u64) -> std::result::Result<Self, ModelError> {
        let mut fresh = Self::for_finetuning(self.encoder.cfg.clone(), vocab, probe, seed)?;
        for (id, p) in self.store.iter() {
            if let Some(dst) = fresh.store.find(&p.name) {
                debug_assert_eq!(id.0, dst.0, "encoder parameters register first in both models");
                *fresh.store.get_mut(dst) = p.tensor.clone();
            }
        }
        // only encoder names match; the old head names do not exist in `fresh`
        Ok(fresh)
    }

    fn attach_probe(&mut self, vocab: Vocabulary, cfg: ProbeConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = Probe::new(cfg, self.encoder.cfg.d_model, vocab.size(), &mut self.store, &mut rng);
        self.ctc = Some(CtcParts { probe, vocab });
    }

    pub fn ctc(&self) -> std::result::Result<&CtcParts, ModelError> {
        self.ctc.as_ref().ok_or(ModelError::NotFinetuned)
    }

    pub fn ssl(&self) -> std::result::Result<&SslParts, ModelError> {
        self.ssl.as_ref().ok_or(ModelError::NoSslHead)
    }

    pub fn encode(&self, g: &mut Graph, feats: &FeatureSequence, policy: ChunkPolicy) -> Result<Var> {
        self.encoder.forward(g, &self.store, feats, policy)
    }

    /// CTC log-probabilities `[T', V]`.
    pub fn log_probs(&self, g: &mut Graph, feats: &FeatureSequence, policy: ChunkPolicy) -> Result<Var> {
        let ctc = self.ctc.as_ref().ok_or_else(|| TensorError::Usage("model has no CTC probe".into()))?;
        let h = self.encode(g, feats, policy)?;
        ctc.probe.forward(g, &self.store, h)
    }

    /// Eval-mode log-probabilities as a flat `[T', V]` vector.
    pub fn log_probs_eval(&self, feats: &FeatureSequence, policy: ChunkPolicy) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let lp = self.log_probs(&mut g, feats, policy)?;
        g.ensure_finite()?;
        Ok(g.value(lp).to_vec())
    }

    pub fn transcribe_greedy(&self, feats: &FeatureSequence, policy: ChunkPolicy) -> Result<String> {
        let lp = self.log_probs_eval(feats, policy)?;
        let vocab = &self.ctc.as_ref().expect("log_probs checked the probe").vocab;
        Ok(greedy_decode(&lp, vocab))
    }

    pub fn config(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        self.encoder.cfg.to_kv("encoder.", &mut kv);
        kv.insert("encoder.preset".into(), self.encoder.cfg.preset_name().to_string());
        if let Some(ssl) = &self.ssl {
            let q = &ssl.quantizer.cfg;
            kv.insert("quantizer.seed".into(), q.seed.to_string());
            kv.insert("quantizer.codebook_size".into(), q.codebook_size.to_string());
            kv.insert("quantizer.code_dim".into(), q.code_dim.to_string());
            kv.insert("quantizer.input_dim".into(), q.input_dim.to_string());
        }
        if let Some(ctc) = &self.ctc {
            kv.insert("probe.hidden_dim".into(), ctc.probe.cfg.hidden_dim.to_string());
            kv.insert("probe.n_hidden".into(), ctc.probe.cfg.n_hidden.to_string());
            kv.insert("probe.dropout".into(), ctc.probe.cfg.dropout.to_string());
            kv.insert("vocab.chars".into(), ctc.vocab.to_config_value());
        }
        kv
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            config: self.config(),
            tensors: Vec::with_capacity(self.store.len() + 2),
        };
        for (_, p) in self.store.iter() {
            ck.push(p.name.clone(), p.tensor.shape(), p.tensor.data().to_vec());
        }
        if let Some(ssl) = &self.ssl {
            let q = &ssl.quantizer;
            ck.push("quantizer.projection", &[q.cfg.input_dim, q.cfg.code_dim], q.projection().to_vec());
            ck.push("quantizer.codebook", &[q.cfg.codebook_size, q.cfg.code_dim], q.codebook().to_vec());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> std::result::Result<Self, ModelError> {
        let enc = EncoderConfig::from_kv("encoder.", &ck.config)?;
        if let Some(name) = ck.config_value("encoder.preset") {
            if name != enc.preset_name() {
                return Err(ModelError::Config(format!("config declares preset {name} but dims do not match it")));
            }
        }
        let mut m = if ck.config.contains_key("quantizer.codebook_size") {
            let qcfg = QuantizerConfig {
                seed: get(ck, "quantizer.seed")?,
                codebook_size: get(ck, "quantizer.codebook_size")?,
                code_dim: get(ck, "quantizer.code_dim")?,
                input_dim: get(ck, "quantizer.input_dim")?,
            };
            let mut m = Self::for_pretraining(enc, qcfg.clone(), 0)?;
            let a = ck.expect("quantizer.projection", &[qcfg.input_dim, qcfg.code_dim])?;
            let v = ck.expect("quantizer.codebook", &[qcfg.codebook_size, qcfg.code_dim])?;
            m.ssl.as_mut().expect("pretraining model").quantizer = Quantizer::from_parts(qcfg, a.data.clone(), v.data.clone())?;
            m
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut store = ParamStore::new();
            let encoder = Encoder::new(enc, &mut store, &mut rng)?;
            Self {
                store,
                encoder,
                ssl: None,
                ctc: None,
            }
        };
        if let Some(chars) = ck.config_value("vocab.chars") {
            let vocab = Vocabulary::from_config_value(chars).map_err(|e| ModelError::Config(e.to_string()))?;
            let cfg = ProbeConfig {
                hidden_dim: get(ck, "probe.hidden_dim")?,
                n_hidden: get(ck, "probe.n_hidden")?,
                dropout: get(ck, "probe.dropout")?,
            };
            m.attach_probe(vocab, cfg, 0);
        }
        let ids: Vec<_> = m.store.iter().map(|(id, p)| (id, p.name.clone(), p.tensor.shape().to_vec())).collect();
        for (id, name, dims) in ids {
            let t = ck.expect(&name, &dims)?;
            m.store.get_mut(id).data_mut().copy_from_slice(&t.data);
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::result::Result<(), ModelError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> std::result::Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_ctc() -> AsrModel {
        let vocab = Vocabulary::from_transcripts(["abc def"]).unwrap();
        AsrModel::for_finetuning(EncoderConfig::tiny(), vocab, ProbeConfig { hidden_dim: 16, ..Default::default() }, 3).unwrap()
    }

    #[test]
    fn model_checkpoint_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for m in [
            tiny_ctc(),
            AsrModel::for_pretraining(EncoderConfig::tiny(), QuantizerConfig::test_preset(1), 5).unwrap(),
        ] {
            let p1 = dir.path().join("a");
            let p2 = dir.path().join("b");
            m.save(&p1).unwrap();
            AsrModel::load(&p1).unwrap().save(&p2).unwrap();
            assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        }
    }

    #[test]
    fn missing_tensor_is_reported() {
        let mut ck = tiny_ctc().to_checkpoint();
        ck.tensors.retain(|t| t.name != "probe.out.bias");
        assert!(matches!(
            AsrModel::from_checkpoint(&ck),
            Err(ModelError::Checkpoint(CheckpointError::MissingTensor(n))) if n == "probe.out.bias"
        ));
    }

    #[test]
    fn finetune_conversion_keeps_encoder_weights() {
        let pre = AsrModel::for_pretraining(EncoderConfig::tiny(), QuantizerConfig::test_preset(1), 5).unwrap();
        let vocab = Vocabulary::from_transcripts(["ab"]).unwrap();
        let ft = pre.clone().into_finetuning(vocab, ProbeConfig { hidden_dim: 8, ..Default::default() }, 1).unwrap();
        let name = "encoder.layers.1.attn.q.weight";
        assert_eq!(
            pre.store.get(pre.store.find(name).unwrap()).data(),
            ft.store.get(ft.store.find(name).unwrap()).data()
        );
        assert!(ft.ssl.is_none() && ft.ctc.is_some());
        assert!(matches!(pre.ctc(), Err(ModelError::NotFinetuned)));
    }
}
