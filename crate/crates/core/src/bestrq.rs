//! Random-projection quantizer targets and masked-prediction pre-training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use sha2::{Digest, Sha256};

use crate::chunking::ChunkPolicy;
use crate::encoder::{subsampled_len, Dense, Encoder, SUBSAMPLE_FACTOR};
use crate::frontend::FeatureSequence;
use crate::params::{Group, ParamStore};
use crate::tensor::{shape_err, Graph, Result, TensorError, Var};

/// Feature frames stacked into one quantizer input.
pub const STACK: usize = SUBSAMPLE_FACTOR;
const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerConfig {
    pub seed: u64,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub input_dim: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            codebook_size: 8192,
            code_dim: 16,
            input_dim: STACK * 80,
        }
    }
}

impl QuantizerConfig {
    pub fn test_preset(seed: u64) -> Self {
        Self {
            seed,
            codebook_size: 64,
            ..Self::default()
        }
    }
}

/// Frozen projection `A: [input_dim, code_dim]` and unit-norm codebook `V: [N, code_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    pub cfg: QuantizerConfig,
    projection: Vec<f32>,
    codebook: Vec<f32>,
}

impl Quantizer {
    pub fn new(cfg: QuantizerConfig) -> std::result::Result<Self, TensorError> {
        if cfg.codebook_size < 2 || cfg.code_dim == 0 || cfg.input_dim == 0 {
            return Err(TensorError::Config(format!(
                "quantizer needs N >= 2 and positive dims, got N={} d={} in={}",
                cfg.codebook_size, cfg.code_dim, cfg.input_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = 1.0 / (cfg.input_dim as f32).sqrt();
        let projection = (0..cfg.input_dim * cfg.code_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|v: f32| v * scale)
            .collect();
        let mut codebook: Vec<f32> = (0..cfg.codebook_size * cfg.code_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for row in codebook.chunks_mut(cfg.code_dim) {
            let n = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
        }
        Ok(Self { cfg, projection, codebook })
    }

    /// Rebuild from stored tensors (checkpoint load).
    pub fn from_parts(cfg: QuantizerConfig, projection: Vec<f32>, codebook: Vec<f32>) -> std::result::Result<Self, TensorError> {
        if projection.len() != cfg.input_dim * cfg.code_dim || codebook.len() != cfg.codebook_size * cfg.code_dim {
            return Err(shape_err("quantizer", "stored tensor sizes disagree with config"));
        }
        Ok(Self { cfg, projection, codebook })
    }

    pub fn projection(&self) -> &[f32] {
        &self.projection
    }

    pub fn codebook(&self) -> &[f32] {
        &self.codebook
    }

    /// SHA-256 over `A` then `V` (little-endian f32).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.projection.iter().chain(&self.codebook) {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `normalize(x·A)` in f64.
    pub fn project(&self, x: &[f32]) -> Vec<f64> {
        let d = self.cfg.code_dim;
        let mut p = vec![0.0f64; d];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.projection[i * d..(i + 1) * d];
            for (pj, &a) in p.iter_mut().zip(row) {
                *pj += xi as f64 * a as f64;
            }
        }
        let n = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        p.iter_mut().for_each(|v| *v /= n);
        p
    }

    /// Nearest code per row of `stacked: [T', input_dim]`; ties go to the lowest index.
    pub fn quantize(&self, stacked: &[f32]) -> Result<Vec<usize>> {
        let din = self.cfg.input_dim;
        if !stacked.len().is_multiple_of(din) {
            return Err(shape_err("quantize", format!("{} values is not a multiple of {din}", stacked.len())));
        }
        let d = self.cfg.code_dim;
        Ok(stacked
            .chunks(din)
            .map(|x| {
                let p = self.project(x);
                let mut best = (f64::INFINITY, 0usize);
                for (n, code) in self.codebook.chunks(d).enumerate() {
                    let dist: f64 = p.iter().zip(code).map(|(a, &b)| (a - b as f64).powi(2)).sum();
                    if dist < best.0 {
                        best = (dist, n);
                    }
                }
                best.1
            })
            .collect())
    }
}

/// Stack feature rows `4u..4u+4` for each encoder frame `u` (zero past the end).
pub fn stack_frames(feats: &FeatureSequence) -> Vec<f32> {
    let d = feats.n_mels;
    let t_enc = subsampled_len(feats.n_frames);
    let mut out = vec![0.0f32; t_enc * STACK * d];
    let avail = feats.n_frames * d;
    let n = avail.min(out.len());
    out[..n].copy_from_slice(&feats.frames[..n]);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    /// Feature frames per segment; equals the subsampling factor.
    pub segment_frames: usize,
    pub p_start: f64,
    pub span_segments: usize,
    pub noise_std: f32,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            segment_frames: SUBSAMPLE_FACTOR,
            p_start: 0.15,
            span_segments: 4,
            noise_std: 0.1,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> std::result::Result<(), TensorError> {
        if self.segment_frames != SUBSAMPLE_FACTOR {
            return Err(TensorError::Config(format!("segment_frames must be {SUBSAMPLE_FACTOR}")));
        }
        if !(0.0..=1.0).contains(&self.p_start) || self.span_segments == 0 || self.noise_std < 0.0 {
            return Err(TensorError::Config("mask spec out of range".into()));
        }
        Ok(())
    }

    /// `1 - (1 - p)^span`, the expected fraction of masked frames away from the edges.
    pub fn expected_coverage(&self) -> f64 {
        1.0 - (1.0 - self.p_start).powi(self.span_segments as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskRealization {
    /// One flag per encoder frame.
    pub masked: Vec<bool>,
    pub segment_frames: usize,
}

impl MaskRealization {
    pub fn is_empty(&self) -> bool {
        !self.masked.iter().any(|&m| m)
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.masked.len().max(1) as f64
    }

    /// Per feature frame flags for an utterance of `t_feat` frames.
    pub fn feature_mask(&self, t_feat: usize) -> Vec<bool> {
        (0..t_feat).map(|r| self.masked.get(r / self.segment_frames).copied().unwrap_or(false)).collect()
    }
}

fn draw_spans<R: Rng + ?Sized>(t_enc: usize, spec: &MaskSpec, rng: &mut R) -> Vec<bool> {
    let mut masked = vec![false; t_enc];
    for s in 0..t_enc {
        if rng.random_bool(spec.p_start) {
            let end = (s + spec.span_segments).min(t_enc);
            masked[s..end].iter_mut().for_each(|m| *m = true);
        }
    }
    masked
}

/// I.i.d. span starts over encoder frames; an empty draw is retried once.
pub fn sample_mask<R: Rng + ?Sized>(t_enc: usize, spec: &MaskSpec, rng: &mut R) -> MaskRealization {
    let mut masked = draw_spans(t_enc, spec, rng);
    if !masked.iter().any(|&m| m) {
        masked = draw_spans(t_enc, spec, rng);
    }
    MaskRealization {
        masked,
        segment_frames: spec.segment_frames,
    }
}

/// Replace masked feature frames with Gaussian noise.
pub fn apply_mask<R: Rng + ?Sized>(feats: &FeatureSequence, mask: &MaskRealization, noise_std: f32, rng: &mut R) -> FeatureSequence {
    let mut out = feats.clone();
    let noise = Normal::new(0.0f32, noise_std.max(0.0)).expect("finite std");
    let d = feats.n_mels;
    for (r, m) in mask.feature_mask(feats.n_frames).into_iter().enumerate() {
        if m {
            out.frames[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = noise.sample(rng));
        }
    }
    out
}

/// Linear classifier `d_model -> N` over encoder frames.
#[derive(Debug, Clone, Copy)]
pub struct SslHead {
    pub proj: Dense,
    pub n_codes: usize,
}

impl SslHead {
    pub fn new<R: Rng>(store: &mut ParamStore, d_model: usize, n_codes: usize, rng: &mut R) -> Self {
        Self {
            // small logits at init so the starting loss sits at ln N
            proj: Dense::scaled(store, "ssl_head", d_model, n_codes, Group::Head, 0.1, rng),
            n_codes,
        }
    }
}

/// Masked-prediction loss for one utterance.
#[derive(Debug, Clone)]
pub struct PretrainLoss {
    pub loss: Var,
    pub logits: Var,
    pub n_masked: usize,
    pub targets: Vec<usize>,
    pub mask: MaskRealization,
}

/// Mean cross-entropy over masked encoder frames. `None` when the mask is
/// empty even after its resample.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    store: &ParamStore,
    encoder: &Encoder,
    head: &SslHead,
    q: &Quantizer,
    spec: &MaskSpec,
    feats: &FeatureSequence,
    policy: ChunkPolicy,
    rng: &mut R,
) -> Result<Option<PretrainLoss>> {
    let targets = q.quantize(&stack_frames(feats))?;
    let mask = sample_mask(targets.len(), spec, rng);
    if mask.is_empty() {
        return Ok(None);
    }
    let noisy = apply_mask(feats, &mask, spec.noise_std, rng);
    let h = encoder.forward(g, store, &noisy, policy)?;
    let logits = head.proj.forward(g, store, h)?;
    let logp = g.log_softmax(logits);
    let n = head.n_codes;
    let idx: Vec<usize> = (0..targets.len()).filter(|&t| mask.masked[t]).map(|t| t * n + targets[t]).collect();
    let loss = g.pick_sum(logp, &idx, -1.0 / idx.len() as f32)?;
    Ok(Some(PretrainLoss {
        loss,
        logits,
        n_masked: idx.len(),
        targets,
        mask,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::tensor::Tensor;

    #[test]
    fn quantizer_is_deterministic_and_unit_norm() {
        let a = Quantizer::new(QuantizerConfig::test_preset(3)).unwrap();
        let b = Quantizer::new(QuantizerConfig::test_preset(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        for row in a.codebook().chunks(16) {
            let n: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn seeds_change_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[50, 320], 1.0, &mut rng).into_vec();
        let la = Quantizer::new(QuantizerConfig::test_preset(1)).unwrap().quantize(&x).unwrap();
        let lb = Quantizer::new(QuantizerConfig::test_preset(2)).unwrap().quantize(&x).unwrap();
        assert!(la.iter().zip(&lb).any(|(a, b)| a != b));
    }

    #[test]
    fn aligned_input_gets_its_code() {
        let q = Quantizer::new(QuantizerConfig::test_preset(5)).unwrap();
        // least-squares x with x·A = 3·V_5, via the 16x16 normal equations
        let a = nalgebra::DMatrix::from_row_slice(320, 16, &q.projection().iter().map(|&v| v as f64).collect::<Vec<_>>());
        let target = nalgebra::DVector::from_iterator(16, q.codebook()[5 * 16..6 * 16].iter().map(|&v| 3.0 * v as f64));
        let gram = a.transpose() * &a;
        let x = &a * gram.lu().solve(&target).unwrap();
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        assert_eq!(q.quantize(&xf).unwrap(), vec![5]);
    }

    #[test]
    fn zero_input_still_gets_a_label() {
        let q = Quantizer::new(QuantizerConfig::test_preset(5)).unwrap();
        let l = q.quantize(&[0.0; 640]).unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!(l[0], l[1]);
    }

    #[test]
    fn degenerate_mask_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let none = MaskSpec { p_start: 0.0, ..MaskSpec::default() };
        assert!(sample_mask(100, &none, &mut rng).is_empty());
        let all = MaskSpec { p_start: 1.0, ..MaskSpec::default() };
        assert_eq!(sample_mask(100, &all, &mut rng).count(), 100);
    }

    #[test]
    fn coverage_near_closed_form() {
        let spec = MaskSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = sample_mask(10_000, &spec, &mut rng).coverage();
        assert!((0.44..=0.52).contains(&c), "coverage {c}");
        assert!((spec.expected_coverage() - 0.4780).abs() < 1e-4);
    }

    #[test]
    fn apply_mask_only_touches_masked_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = FeatureSequence::new(Tensor::randn(&[40, 80], 1.0, &mut rng).into_vec(), 80, true).unwrap();
        let empty = MaskRealization { masked: vec![false; 10], segment_frames: 4 };
        assert_eq!(apply_mask(&f, &empty, 0.1, &mut rng), f);
        let mut m = vec![false; 10];
        m[3] = true;
        let mask = MaskRealization { masked: m, segment_frames: 4 };
        let out = apply_mask(&f, &mask, 0.1, &mut ChaCha8Rng::seed_from_u64(4));
        let again = apply_mask(&f, &mask, 0.1, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(out, again);
        for r in 0..40 {
            let same = out.frame(r) == f.frame(r);
            assert_eq!(same, !(12..16).contains(&r), "row {r}");
        }
    }

    #[test]
    fn full_mask_decorrelates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = FeatureSequence::new(Tensor::randn(&[1000, 80], 1.0, &mut rng).into_vec(), 80, true).unwrap();
        let mask = MaskRealization { masked: vec![true; 250], segment_frames: 4 };
        let out = apply_mask(&f, &mask, 0.1, &mut rng);
        let (x, y) = (&f.frames, &out.frames);
        let n = x.len() as f64;
        let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let my = y.iter().map(|&v| v as f64).sum::<f64>() / n;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (&a, &b) in x.iter().zip(y) {
            let (a, b) = (a as f64 - mx, b as f64 - my);
            sxy += a * b;
            sxx += a * a;
            syy += b * b;
        }
        assert!((sxy / (sxx * syy).sqrt()).abs() < 0.1);
    }

    #[test]
    fn initial_loss_is_near_uniform_and_ignores_unmasked_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let enc = Encoder::new(EncoderConfig::tiny(), &mut store, &mut rng).unwrap();
        let head = SslHead::new(&mut store, 64, 64, &mut rng);
        let q = Quantizer::new(QuantizerConfig::test_preset(0)).unwrap();
        let f = FeatureSequence::new(Tensor::randn(&[200, 80], 1.0, &mut rng).into_vec(), 80, true).unwrap();
        let mut g = Graph::new();
        let out = pretrain_loss(&mut g, &store, &enc, &head, &q, &MaskSpec::default(), &f, ChunkPolicy::FullContext, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap()
            .unwrap();
        let l = g.scalar_value(out.loss);
        assert!((l - 64f32.ln()).abs() <= 0.3, "loss {l}");
        g.backward(out.loss).unwrap();
        let gl = g.grad(out.logits).unwrap();
        for (t, &m) in out.mask.masked.iter().enumerate() {
            if !m {
                assert!(gl[t * 64..(t + 1) * 64].iter().all(|&v| v == 0.0));
            }
        }
    }
}
