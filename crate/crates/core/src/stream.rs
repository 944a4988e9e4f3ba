//! Incremental streaming inference.
//!
//! Audio arrives in pushes of any size. Feature frames are computed as soon
//! as their 25 ms window is complete, normalized (running CMVN, or fixed
//! statistics in test mode), and buffered until the next encoder chunk of
//! `chunk_size` frames can be formed (`4·chunk_size` feature frames). The
//! chunk is subsampled from the feature rows it needs, passed through every
//! block attending to the cached keys/values of the previous `left` chunks,
//! and greedily decoded. Outputs match the offline encoder under the same
//! chunked policy.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::chunking::{latency_ms, ChunkPolicy, ConvContext, LeftContext, ENCODER_FRAME_MS};
use crate::ctc::BLANK;
use crate::encoder::{subsampled_len, AttnInputs, ConvInputs, FeatureWindow, SUBSAMPLE_FACTOR};
use crate::frontend::{CmvnStats, MelExtractor, HOP_SAMPLES, N_MELS, VAR_FLOOR, WINDOW_SAMPLES};
use crate::model::AsrModel;
use crate::tensor::{Graph, TensorError};

pub const MAX_CHUNK: usize = 128;
pub const CMVN_DECAY: f64 = 0.999;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("checkpoint has no CTC probe; fine-tune it first")]
    NotFinetuned,
    #[error("stream config: {0}")]
    Config(String),
    #[error("stream usage: {0}")]
    Usage(&'static str),
    #[error(transparent)]
    Numeric(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emit {
    Partial,
    FinalOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CmvnMode {
    /// Exponential moving statistics, initialized from the first chunk.
    Running,
    /// Precomputed statistics (makes streaming match offline exactly).
    Fixed(CmvnStats),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub chunk_size: usize,
    pub left: LeftContext,
    pub emit: Emit,
    pub cmvn: CmvnMode,
    /// Keep every encoder output frame (for equivalence checks).
    pub record_encoder: bool,
}

impl StreamConfig {
    pub fn new(chunk_size: usize, left: LeftContext) -> Self {
        Self {
            chunk_size,
            left,
            emit: Emit::Partial,
            cmvn: CmvnMode::Running,
            record_encoder: false,
        }
    }

    pub fn policy(&self) -> ChunkPolicy {
        ChunkPolicy::Chunked {
            chunk_size: self.chunk_size,
            left: self.left,
        }
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        if !(1..=MAX_CHUNK).contains(&self.chunk_size) {
            return Err(StreamError::Config(format!("chunk_size {} outside [1, {MAX_CHUNK}]", self.chunk_size)));
        }
        if let CmvnMode::Fixed(s) = &self.cmvn {
            if s.mean.len() != N_MELS || s.std.len() != N_MELS {
                return Err(StreamError::Config("fixed CMVN statistics must have 80 dims".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    /// Chunk duration: the wait before a chunk's first frame can be decoded.
    pub algorithmic_ms: f64,
    pub chunks: usize,
    pub compute_mean_ms: f64,
    pub compute_p95_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalResult {
    pub transcript: String,
    /// Tokens emitted by `finalize` itself.
    pub flushed: String,
    pub latency: LatencyReport,
}

#[derive(Debug, Clone)]
struct RunningCmvn {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl RunningCmvn {
    fn from_frames(rows: &[f32]) -> Self {
        let n = (rows.len() / N_MELS).max(1) as f64;
        let mut mean = vec![0.0; N_MELS];
        for r in rows.chunks(N_MELS) {
            mean.iter_mut().zip(r).for_each(|(m, &v)| *m += v as f64 / n);
        }
        let mut var = vec![0.0; N_MELS];
        for r in rows.chunks(N_MELS) {
            var.iter_mut().zip(r).zip(&mean).for_each(|((s, &v), m)| *s += (v as f64 - m).powi(2) / n);
        }
        Self { mean, var }
    }

    fn normalize(&self, row: &mut [f32]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.var) {
            *v = ((*v as f64 - m) / s.max(VAR_FLOOR).sqrt()) as f32;
        }
    }

    fn update(&mut self, row: &[f32]) {
        for ((m, s), &v) in self.mean.iter_mut().zip(self.var.iter_mut()).zip(row) {
            *m = CMVN_DECAY * *m + (1.0 - CMVN_DECAY) * v as f64;
            *s = CMVN_DECAY * *s + (1.0 - CMVN_DECAY) * (v as f64 - *m).powi(2);
        }
    }
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    /// Per cached chunk: keys and values, `rows × d_model` each.
    chunks: VecDeque<(Vec<f32>, Vec<f32>, usize)>,
    /// Trailing depthwise-conv inputs (causal-past convolution only).
    conv_tail: Vec<f32>,
}

impl LayerCache {
    fn frames(&self) -> usize {
        self.chunks.iter().map(|c| c.2).sum()
    }
}

/// One live decoding session over a shared model.
#[derive(Debug)]
pub struct Session<'m> {
    model: &'m AsrModel,
    cfg: StreamConfig,
    extractor: Arc<MelExtractor>,
    samples: Vec<f32>,
    /// Global index of `samples[0]`.
    sample_first: usize,
    /// Raw frames waiting for the running-CMVN warm start.
    pending_raw: Vec<f32>,
    running: Option<RunningCmvn>,
    /// Normalized feature rows from global row `feat_first`.
    feats: Vec<f32>,
    feat_first: usize,
    n_feats: usize,
    next_frame: usize,
    caches: Vec<LayerCache>,
    last_id: usize,
    ids: Vec<usize>,
    chunks_processed: usize,
    compute_ms: Vec<f64>,
    encoder_out: Vec<f32>,
    finalized: bool,
}

impl<'m> Session<'m> {
    pub fn open(model: &'m AsrModel, cfg: StreamConfig) -> Result<Self, StreamError> {
        model.ctc().map_err(|_| StreamError::NotFinetuned)?;
        cfg.validate()?;
        if model.encoder.cfg.n_mels != N_MELS {
            return Err(StreamError::Config("streaming expects an 80-bin encoder".into()));
        }
        let running = match &cfg.cmvn {
            CmvnMode::Running => None,
            CmvnMode::Fixed(_) => Some(RunningCmvn { mean: vec![], var: vec![] }),
        };
        Ok(Self {
            model,
            extractor: Arc::new(MelExtractor::new()),
            samples: Vec::new(),
            sample_first: 0,
            pending_raw: Vec::new(),
            running,
            feats: Vec::new(),
            feat_first: 0,
            n_feats: 0,
            next_frame: 0,
            caches: vec![LayerCache::default(); model.encoder.n_layers()],
            last_id: BLANK,
            ids: Vec::new(),
            chunks_processed: 0,
            compute_ms: Vec::new(),
            encoder_out: Vec::new(),
            finalized: false,
            cfg,
        })
    }

    pub fn chunks_processed(&self) -> usize {
        self.chunks_processed
    }

    pub fn transcript(&self) -> String {
        self.vocab_decode(&self.ids)
    }

    /// Encoder frames produced so far.
    pub fn frames_decoded(&self) -> usize {
        self.next_frame
    }

    pub fn config(&self) -> &StreamConfig {
        &self.cfg
    }

    /// Recorded encoder outputs `[frames, d_model]` (with `record_encoder`).
    pub fn encoder_outputs(&self) -> &[f32] {
        &self.encoder_out
    }

    /// Frames currently held in each layer's attention cache.
    pub fn cached_frames(&self) -> Vec<usize> {
        self.caches.iter().map(LayerCache::frames).collect()
    }

    pub fn algorithmic_latency_ms(&self) -> f64 {
        latency_ms(self.cfg.policy(), ENCODER_FRAME_MS)
    }

    fn vocab_decode(&self, ids: &[usize]) -> String {
        self.model.ctc.as_ref().expect("checked at open").vocab.decode(ids).expect("ids from the probe")
    }

    /// Feed samples; returns newly emitted text (empty in final-only mode).
    pub fn push_audio(&mut self, samples: &[f32]) -> Result<String, StreamError> {
        if self.finalized {
            return Err(StreamError::Usage("push after finalize"));
        }
        self.samples.extend_from_slice(samples);
        self.extract_frames();
        let before = self.ids.len();
        let c = self.cfg.chunk_size;
        while self.n_feats >= SUBSAMPLE_FACTOR * (self.next_frame + c) {
            self.process_chunk(self.next_frame + c, None)?;
        }
        Ok(match self.cfg.emit {
            Emit::Partial => self.vocab_decode(&self.ids[before..]),
            Emit::FinalOnly => String::new(),
        })
    }

    /// Flush the remaining audio as a final (possibly short) chunk.
    pub fn finalize(&mut self) -> Result<FinalResult, StreamError> {
        if self.finalized {
            return Err(StreamError::Usage("session already finalized"));
        }
        self.finalized = true;
        if self.running.is_none() && self.n_feats + self.pending_raw.len() / N_MELS > 0 {
            self.warm_start();
        }
        let before = self.ids.len();
        let total = self.n_feats;
        let t_enc = subsampled_len(total);
        while self.next_frame < t_enc {
            let b = (self.next_frame + self.cfg.chunk_size).min(t_enc);
            self.process_chunk(b, Some(total))?;
        }
        Ok(FinalResult {
            transcript: self.transcript(),
            flushed: self.vocab_decode(&self.ids[before..]),
            latency: self.latency_report(),
        })
    }

    pub fn latency_report(&self) -> LatencyReport {
        let n = self.compute_ms.len();
        let mean = if n == 0 { 0.0 } else { self.compute_ms.iter().sum::<f64>() / n as f64 };
        let p95 = if n == 0 {
            0.0
        } else {
            let mut s = self.compute_ms.clone();
            s.sort_by(f64::total_cmp);
            s[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1]
        };
        LatencyReport {
            algorithmic_ms: self.algorithmic_latency_ms(),
            chunks: self.chunks_processed,
            compute_mean_ms: mean,
            compute_p95_ms: p95,
        }
    }

    fn extract_frames(&mut self) {
        let mut row = vec![0.0f32; N_MELS];
        loop {
            let start = self.next_raw_frame() * HOP_SAMPLES;
            let lo = start - self.sample_first;
            if lo + WINDOW_SAMPLES > self.samples.len() {
                break;
            }
            self.extractor.frame(&self.samples[lo..lo + WINDOW_SAMPLES], &mut row);
            self.accept_raw_frame(&row);
        }
        // drop samples no future window needs
        let keep_from = self.next_raw_frame() * HOP_SAMPLES;
        let drop = keep_from.saturating_sub(self.sample_first).min(self.samples.len());
        self.samples.drain(..drop);
        self.sample_first += drop;
    }

    fn next_raw_frame(&self) -> usize {
        self.n_feats + self.pending_raw.len() / N_MELS
    }

    fn accept_raw_frame(&mut self, raw: &[f32]) {
        let mut row = raw.to_vec();
        match (&self.cfg.cmvn, &mut self.running) {
            (CmvnMode::Fixed(stats), _) => stats.normalize_frame(&mut row),
            (CmvnMode::Running, Some(r)) => {
                r.update(&row);
                r.normalize(&mut row);
            }
            (CmvnMode::Running, None) => {
                self.pending_raw.extend_from_slice(&row);
                if self.pending_raw.len() / N_MELS >= SUBSAMPLE_FACTOR * self.cfg.chunk_size {
                    self.warm_start();
                }
                return;
            }
        }
        self.feats.extend_from_slice(&row);
        self.n_feats += 1;
    }

    fn warm_start(&mut self) {
        let r = RunningCmvn::from_frames(&self.pending_raw);
        let mut rows = std::mem::take(&mut self.pending_raw);
        for row in rows.chunks_mut(N_MELS) {
            r.normalize(row);
        }
        self.n_feats += rows.len() / N_MELS;
        self.feats.extend_from_slice(&rows);
        self.running = Some(r);
    }

    /// Encoder frames `next_frame..b`; `total` is the final feature count when known.
    fn process_chunk(&mut self, b: usize, total: Option<usize>) -> Result<(), StreamError> {
        let started = Instant::now();
        let a = self.next_frame;
        let n = b - a;
        let m = self.model;
        let enc = &m.encoder;
        let d = enc.cfg.d_model;
        let k = enc.cfg.conv_kernel;
        let half = k / 2;
        let mut g = Graph::new();
        let win = FeatureWindow {
            rows: &self.feats,
            first: self.feat_first,
            total,
        };
        let mut h = enc.subsample_range(&mut g, &m.store, win, a, b)?;
        let causal = enc.cfg.conv_context == ConvContext::CausalPast;
        for (l, cache) in self.caches.iter_mut().enumerate() {
            let past = if cache.chunks.is_empty() {
                None
            } else {
                let rows = cache.frames();
                let kk: Vec<f32> = cache.chunks.iter().flat_map(|c| c.0.iter().copied()).collect();
                let vv: Vec<f32> = cache.chunks.iter().flat_map(|c| c.1.iter().copied()).collect();
                Some((g.constant(&[rows, d], kk)?, g.constant(&[rows, d], vv)?))
            };
            let past_rows = if causal { cache.conv_tail.len() / d } else { 0 };
            let mut valid = vec![false; n * k];
            for t in 0..n {
                for tap in 0..k {
                    let j = t as isize + tap as isize - half as isize;
                    valid[t * k + tap] = j >= -(past_rows as isize) && j < n as isize;
                }
            }
            let conv_past = if past_rows > 0 {
                Some(g.constant(&[past_rows, d], cache.conv_tail.clone())?)
            } else {
                None
            };
            let out = enc.block_forward(
                &mut g,
                &m.store,
                l,
                h,
                AttnInputs { bias: None, past },
                &ConvInputs {
                    valid: Arc::new(valid),
                    past: conv_past,
                },
            )?;
            cache.chunks.push_back((g.value(out.k).to_vec(), g.value(out.v).to_vec(), n));
            let limit = match self.cfg.left {
                LeftContext::Full => usize::MAX,
                LeftContext::Chunks(c) => c,
            };
            while cache.chunks.len() > limit {
                cache.chunks.pop_front();
            }
            if causal {
                let mut tail = std::mem::take(&mut cache.conv_tail);
                tail.extend_from_slice(g.value(out.conv_in));
                let keep = half.min(tail.len() / d) * d;
                cache.conv_tail = tail.split_off(tail.len() - keep);
            }
            h = out.y;
        }
        let ctc = m.ctc.as_ref().expect("checked at open");
        let lp = ctc.probe.forward(&mut g, &m.store, h)?;
        g.ensure_finite()?;
        if self.cfg.record_encoder {
            self.encoder_out.extend_from_slice(g.value(h));
        }
        let v = ctc.vocab.size();
        for row in g.value(lp).chunks(v) {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            if best != BLANK && best != self.last_id {
                self.ids.push(best);
            }
            self.last_id = best;
        }
        self.next_frame = b;
        self.chunks_processed += 1;
        if total.is_none() {
            // cache bound: full chunks only before the flush
            let bound = match self.cfg.left {
                LeftContext::Full => self.chunks_processed,
                LeftContext::Chunks(c) => self.chunks_processed.min(c),
            } * self.cfg.chunk_size;
            assert!(self.caches.iter().all(|c| c.frames() == bound), "attention cache exceeds its bound");
        }
        // feature rows before 4b-3 are no longer needed
        let keep_from = (SUBSAMPLE_FACTOR * b).saturating_sub(3).max(self.feat_first);
        let drop = ((keep_from - self.feat_first) * N_MELS).min(self.feats.len());
        self.feats.drain(..drop);
        self.feat_first += drop / N_MELS;
        self.compute_ms.push(started.elapsed().as_secs_f64() * 1e3);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::{ProbeConfig, Vocabulary};
    use crate::encoder::EncoderConfig;
    use crate::frontend::{cmvn, log_mel, AudioBuffer, FeatureSequence};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> AsrModel {
        let vocab = Vocabulary::from_transcripts(["abc"]).unwrap();
        AsrModel::for_finetuning(EncoderConfig::tiny(), vocab, ProbeConfig { hidden_dim: 16, ..Default::default() }, 4).unwrap()
    }

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn fresh_session_and_immediate_finalize() {
        let m = model();
        let mut s = Session::open(&m, StreamConfig::new(8, LeftContext::Chunks(2))).unwrap();
        assert_eq!(s.chunks_processed(), 0);
        assert_eq!(s.transcript(), "");
        assert_eq!(s.algorithmic_latency_ms(), 320.0);
        let r = s.finalize().unwrap();
        assert_eq!(r.transcript, "");
        assert_eq!(r.latency.chunks, 0);
        assert!(matches!(s.finalize(), Err(StreamError::Usage(_))));
        assert!(matches!(s.push_audio(&[0.0]), Err(StreamError::Usage(_))));
    }

    #[test]
    fn pretrain_only_checkpoint_is_rejected() {
        let m = AsrModel::for_pretraining(EncoderConfig::tiny(), crate::bestrq::QuantizerConfig::test_preset(0), 0).unwrap();
        assert!(matches!(Session::open(&m, StreamConfig::new(8, LeftContext::Full)), Err(StreamError::NotFinetuned)));
        assert!(matches!(Session::open(&model(), StreamConfig::new(0, LeftContext::Full)), Err(StreamError::Config(_))));
    }

    #[test]
    fn short_push_only_buffers() {
        let m = model();
        let mut s = Session::open(&m, StreamConfig::new(8, LeftContext::Chunks(2))).unwrap();
        assert_eq!(s.push_audio(&noise(160, 0)).unwrap(), "");
        assert_eq!(s.chunks_processed(), 0);
    }

    #[test]
    fn first_chunk_needs_chunk_duration_of_audio() {
        let m = model();
        let mut s = Session::open(&m, StreamConfig::new(8, LeftContext::Chunks(2))).unwrap();
        // 32 feature frames need 400 + 31·160 samples
        let need = WINDOW_SAMPLES + 31 * HOP_SAMPLES;
        let audio = noise(need, 1);
        s.push_audio(&audio[..need - 1]).unwrap();
        assert_eq!(s.chunks_processed(), 0);
        s.push_audio(&audio[need - 1..]).unwrap();
        assert_eq!(s.chunks_processed(), 1);
        assert!(need as f64 / 16.0 >= 320.0);
    }

    #[test]
    fn matches_offline_with_fixed_cmvn() {
        let m = model();
        let audio = AudioBuffer::new(noise(16000 + 37, 2));
        let raw = log_mel(&audio).unwrap();
        let stats = CmvnStats::from_features(&raw).unwrap();
        let feats: FeatureSequence = cmvn(&raw).unwrap();
        for (c, left) in [(3, LeftContext::Chunks(1)), (8, LeftContext::Full)] {
            let cfg = StreamConfig {
                cmvn: CmvnMode::Fixed(stats.clone()),
                record_encoder: true,
                ..StreamConfig::new(c, left)
            };
            let mut s = Session::open(&m, cfg.clone()).unwrap();
            for piece in audio.samples.chunks(777) {
                s.push_audio(piece).unwrap();
            }
            let fin = s.finalize().unwrap();
            let mut g = Graph::new();
            let h = m.encode(&mut g, &feats, cfg.policy()).unwrap();
            let off = g.value(h);
            assert_eq!(off.len(), s.encoder_outputs().len());
            let diff = off.iter().zip(s.encoder_outputs()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff <= 1e-4, "max diff {diff}");
            assert_eq!(fin.transcript, m.transcribe_greedy(&feats, cfg.policy()).unwrap());
        }
    }

    #[test]
    fn sessions_are_independent() {
        let m = model();
        let a_audio = noise(12000, 3);
        let b_audio = noise(9000, 4);
        let cfg = StreamConfig::new(4, LeftContext::Chunks(1));
        let solo = |audio: &[f32]| {
            let mut s = Session::open(&m, cfg.clone()).unwrap();
            s.push_audio(audio).unwrap();
            s.finalize().unwrap().transcript
        };
        let (ta, tb) = (solo(&a_audio), solo(&b_audio));
        let mut sa = Session::open(&m, cfg.clone()).unwrap();
        let mut sb = Session::open(&m, cfg.clone()).unwrap();
        let mut xs = a_audio.chunks(1000);
        let mut ys = b_audio.chunks(1000);
        loop {
            let (x, y) = (xs.next(), ys.next());
            if x.is_none() && y.is_none() {
                break;
            }
            x.map(|x| sa.push_audio(x).unwrap());
            y.map(|y| sb.push_audio(y).unwrap());
        }
        assert_eq!(sa.finalize().unwrap().transcript, ta);
        assert_eq!(sb.finalize().unwrap().transcript, tb);
    }
}
