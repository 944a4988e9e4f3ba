//! Audio ingestion and log-mel feature extraction.
//!
//! 16 kHz mono input, 25 ms Hann window with 10 ms hop, 512-point FFT,
//! 80 triangular mel filters over 0–8000 Hz, natural log with a 1e-10 floor.
//! `T = floor((num_samples - 400) / 160) + 1` frames for any input of at
//! least one window.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW_SAMPLES: usize = 400;
pub const HOP_SAMPLES: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const N_MELS: usize = 80;
pub const LOG_FLOOR: f32 = 1e-10;
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum FrontendError {
    #[error("audio format error: {0}")]
    Format(String),
    #[error("audio i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("audio too short: {samples} samples, need at least {WINDOW_SAMPLES}")]
    TooShort { samples: usize },
    #[error("feature error: {0}")]
    Features(String),
}

pub type Result<T> = std::result::Result<T, FrontendError>;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn map_hound(e: hound::Error) -> FrontendError {
    match e {
        hound::Error::IoError(io) => FrontendError::Io(io),
        other => FrontendError::Format(other.to_string()),
    }
}

/// Reads a RIFF/WAVE file holding mono 16 kHz PCM16 or IEEE float32 samples.
///
/// No resampling or downmixing: any other layout is a format error.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let reader = hound::WavReader::open(path).map_err(map_hound)?;
    read_wav(reader)
}

pub fn read_wav_from<R: Read>(r: R) -> Result<AudioBuffer> {
    read_wav(hound::WavReader::new(r).map_err(map_hound)?)
}

fn read_wav<R: Read>(mut reader: hound::WavReader<R>) -> Result<AudioBuffer> {
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(FrontendError::Format(format!(
            "sample rate {} Hz, expected {SAMPLE_RATE}",
            spec.sample_rate
        )));
    }
    if spec.channels != 1 {
        return Err(FrontendError::Format(format!("{} channels, expected mono", spec.channels)));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(FrontendError::Format(format!("unsupported sample format {fmt:?}/{bits} bit")));
        }
    };
    if samples.len() as u32 != reader.duration() {
        return Err(FrontendError::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "truncated data chunk",
        )));
    }
    if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0 + 1e-6) {
        return Err(FrontendError::Format(format!("sample {bad} outside [-1, 1]")));
    }
    Ok(AudioBuffer::new(samples))
}

/// Writes mono PCM16 (samples are clamped to [-1, 1]).
pub fn write_wav_pcm16(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(map_hound)?;
    for &s in &audio.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)
}

/// Time-major `T × n_mels` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Vec<f32>,
    pub n_frames: usize,
    pub n_mels: usize,
    pub frame_hop_ms: u32,
    pub frame_window_ms: u32,
    pub normalized: bool,
}

impl FeatureSequence {
    pub fn new(frames: Vec<f32>, n_mels: usize, normalized: bool) -> Result<Self> {
        if n_mels == 0 || !frames.len().is_multiple_of(n_mels) {
            return Err(FrontendError::Features(format!("{} values not divisible by {n_mels}", frames.len())));
        }
        Ok(Self {
            n_frames: frames.len() / n_mels,
            frames,
            n_mels,
            frame_hop_ms: 10,
            frame_window_ms: 25,
            normalized,
        })
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Frame count for `num_samples` of audio (0 when shorter than one window).
    pub fn expected_frames(num_samples: usize) -> usize {
        if num_samples < WINDOW_SAMPLES {
            0
        } else {
            (num_samples - WINDOW_SAMPLES) / HOP_SAMPLES + 1
        }
    }

    /// Raw dump: `u32 T`, `u32 D`, then `T·D` little-endian f32 values.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.n_frames as u32).to_le_bytes())?;
        w.write_all(&(self.n_mels as u32).to_le_bytes())?;
        for v in &self.frames {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let mut hdr = [0u8; 8];
        r.read_exact(&mut hdr)?;
        let t = u32::from_le_bytes(hdr[0..4].try_into().expect("4 bytes")) as usize;
        let d = u32::from_le_bytes(hdr[4..8].try_into().expect("4 bytes")) as usize;
        let mut buf = vec![0u8; t * d * 4];
        r.read_exact(&mut buf)?;
        let frames = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(frames, d, false)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `n_mels × (FFT_SIZE/2 + 1)` weights.
pub fn mel_filterbank(n_mels: usize, f_min: f64, f_max: f64) -> Vec<Vec<f32>> {
    let n_bins = FFT_SIZE / 2 + 1;
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
                    let w = if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    };
                    w as f32
                })
                .collect()
        })
        .collect()
}

/// Reusable per-frame log-mel extractor (holds the FFT plan, window and filters).
#[derive(Clone)]
pub struct MelExtractor {
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    filters: Vec<(usize, Vec<f32>)>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("n_mels", &self.filters.len()).finish()
    }
}

impl Default for MelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl MelExtractor {
    pub fn new() -> Self {
        let fft = FftPlanner::<f32>::new().plan_fft_forward(FFT_SIZE);
        // periodic Hann
        let window = (0..WINDOW_SAMPLES)
            .map(|n| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW_SAMPLES as f64).cos()) as f32)
            .collect();
        // store only the nonzero span of each filter
        let filters = mel_filterbank(N_MELS, 0.0, SAMPLE_RATE as f64 / 2.0)
            .into_iter()
            .map(|w| {
                let first = w.iter().position(|&v| v > 0.0).unwrap_or(0);
                let last = w.iter().rposition(|&v| v > 0.0).unwrap_or(0);
                (first, w[first..=last.max(first)].to_vec())
            })
            .collect();
        Self { fft, window, filters }
    }

    /// Log-mel vector of one 400-sample window.
    pub fn frame(&self, samples: &[f32], out: &mut [f32]) {
        debug_assert_eq!(samples.len(), WINDOW_SAMPLES);
        let mut buf: Vec<Complex<f32>> = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        for (i, (s, w)) in samples.iter().zip(&self.window).enumerate() {
            buf[i] = Complex::new(s * w, 0.0);
        }
        self.fft.process(&mut buf);
        let power: Vec<f32> = buf[..FFT_SIZE / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for ((first, w), o) in self.filters.iter().zip(out.iter_mut()) {
            let e: f64 = w.iter().zip(&power[*first..]).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            *o = (e as f32).max(LOG_FLOOR).ln();
        }
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }
}

/// Log-mel features of a whole utterance.
pub fn log_mel(audio: &AudioBuffer) -> Result<FeatureSequence> {
    log_mel_with(&MelExtractor::new(), audio)
}

pub fn log_mel_with(ex: &MelExtractor, audio: &AudioBuffer) -> Result<FeatureSequence> {
    if audio.sample_rate != SAMPLE_RATE {
        return Err(FrontendError::Format(format!("sample rate {}", audio.sample_rate)));
    }
    let t = FeatureSequence::expected_frames(audio.samples.len());
    if t == 0 {
        return Err(FrontendError::TooShort {
            samples: audio.samples.len(),
        });
    }
    let d = ex.n_mels();
    let mut frames = vec![0.0f32; t * d];
    for (i, out) in frames.chunks_mut(d).enumerate() {
        let start = i * HOP_SAMPLES;
        ex.frame(&audio.samples[start..start + WINDOW_SAMPLES], out);
    }
    FeatureSequence::new(frames, d, false)
}

/// Per-dimension mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct CmvnStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl CmvnStats {
    pub fn from_features(f: &FeatureSequence) -> Result<Self> {
        if f.n_frames < 2 {
            return Err(FrontendError::Features(format!("cmvn needs T >= 2, got {}", f.n_frames)));
        }
        let d = f.n_mels;
        let mut mean = vec![0.0f64; d];
        for t in 0..f.n_frames {
            for (m, &v) in mean.iter_mut().zip(f.frame(t)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= f.n_frames as f64);
        let mut var = vec![0.0f64; d];
        for t in 0..f.n_frames {
            for ((s, &v), m) in var.iter_mut().zip(f.frame(t)).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        Ok(Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var
                .iter()
                .map(|&s| (s / f.n_frames as f64).max(VAR_FLOOR).sqrt() as f32)
                .collect(),
        })
    }

    pub fn normalize_frame(&self, frame: &mut [f32]) {
        for ((v, m), s) in frame.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }
}

/// Per-utterance mean/variance normalization. Zero-variance dimensions are
/// floored (they come out as all zeros).
pub fn cmvn(features: &FeatureSequence) -> Result<FeatureSequence> {
    let stats = CmvnStats::from_features(features)?;
    let mut out = features.clone();
    for frame in out.frames.chunks_mut(out.n_mels) {
        stats.normalize_frame(frame);
    }
    out.normalized = true;
    Ok(out)
}

/// `log_mel` followed by `cmvn`.
pub fn extract_normalized(audio: &AudioBuffer) -> Result<FeatureSequence> {
    cmvn(&log_mel(audio)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn sine(freq: f64, n: usize) -> AudioBuffer {
        AudioBuffer::new(
            (0..n)
                .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()) as f32)
                .collect(),
        )
    }

    #[test]
    fn one_second_gives_98_frames() {
        let f = log_mel(&AudioBuffer::new(vec![0.0; 16000])).unwrap();
        assert_eq!(f.n_frames, 98);
        assert_eq!(f.n_mels, 80);
    }

    #[test]
    fn silence_hits_the_floor() {
        let f = log_mel(&AudioBuffer::new(vec![0.0; 4000])).unwrap();
        let floor = LOG_FLOOR.ln();
        assert!(f.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn too_short_is_an_error() {
        assert!(matches!(
            log_mel(&AudioBuffer::new(vec![0.0; 399])),
            Err(FrontendError::TooShort { samples: 399 })
        ));
    }

    #[test]
    fn sine_peaks_in_the_filter_covering_1khz() {
        // independent: the triangle (edges equally spaced in mel) that is highest at 1 kHz
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let top = mel(8000.0);
        let edge = |i: usize| hz(top * i as f64 / 81.0);
        let weight = |m: usize| {
            let (l, c, r) = (edge(m), edge(m + 1), edge(m + 2));
            if 1000.0 <= c { (1000.0 - l) / (c - l) } else { (r - 1000.0) / (r - c) }
        };
        let expected = (0..80).max_by(|&a, &b| weight(a).partial_cmp(&weight(b)).unwrap()).unwrap();
        let f = log_mel(&sine(1000.0, 8000)).unwrap();
        for t in 0..f.n_frames {
            let row = f.frame(t);
            let arg = (0..80).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert_eq!(arg, expected, "frame {t}");
        }
    }

    #[test]
    fn cmvn_statistics() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..50 * 80).map(|_| rng.random_range(-5.0..20.0)).collect();
        let f = FeatureSequence::new(data, 80, false).unwrap();
        let n = cmvn(&f).unwrap();
        assert!(n.normalized);
        let stats = CmvnStats::from_features(&n).unwrap();
        for d in 0..80 {
            assert!(stats.mean[d].abs() <= 1e-6, "mean {}", stats.mean[d]);
            let var = stats.std[d] * stats.std[d];
            assert!((0.99..=1.01).contains(&var));
        }
        // idempotent up to the floor
        let again = cmvn(&n).unwrap();
        for (a, b) in again.frames.iter().zip(&n.frames) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn cmvn_constant_dimension_becomes_zero() {
        let mut data = vec![0.0f32; 10 * 2];
        for t in 0..10 {
            data[t * 2] = 4.0;
            data[t * 2 + 1] = t as f32;
        }
        let n = cmvn(&FeatureSequence::new(data, 2, false).unwrap()).unwrap();
        assert!((0..10).all(|t| n.frame(t)[0] == 0.0));
    }

    #[test]
    fn cmvn_needs_two_frames() {
        let f = FeatureSequence::new(vec![1.0; 80], 80, false).unwrap();
        assert!(cmvn(&f).is_err());
    }

    #[test]
    fn wav_pcm16_scaling_and_rate_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(16384i16).unwrap();
        for _ in 0..15999 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let a = load_wav(&p).unwrap();
        assert_eq!(a.samples.len(), 16000);
        assert_eq!(a.samples[0], 0.5);
        assert!(a.samples[1..].iter().all(|&s| s == 0.0));

        let p2 = dir.path().join("b.wav");
        let mut w = hound::WavWriter::create(&p2, hound::WavSpec { sample_rate: 44100, ..spec }).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&p2), Err(FrontendError::Format(_))));

        let p3 = dir.path().join("c.wav");
        let mut w = hound::WavWriter::create(&p3, hound::WavSpec { channels: 2, ..spec }).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&p3), Err(FrontendError::Format(_))));
    }

    #[test]
    fn truncated_wav_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        write_wav_pcm16(&p, &AudioBuffer::new(vec![0.25; 1000])).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 500]).unwrap();
        assert!(matches!(load_wav(&p), Err(FrontendError::Io(_))));
    }

    #[test]
    fn float_wav_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for v in [0.1f32, -0.75, 1.0] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        assert_eq!(load_wav(&p).unwrap().samples, vec![0.1, -0.75, 1.0]);
    }

    #[test]
    fn feature_dump_roundtrip() {
        let f = FeatureSequence::new((0..160).map(|v| v as f32 * 0.5).collect(), 80, false).unwrap();
        let mut buf = Vec::new();
        f.write_dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 160 * 4);
        assert_eq!(&buf[0..4], &2u32.to_le_bytes());
        assert_eq!(FeatureSequence::read_dump(&buf[..]).unwrap(), f);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn frame_count_formula(n in 400usize..6000) {
            let f = log_mel(&AudioBuffer::new(vec![0.01; n])).unwrap();
            prop_assert_eq!(f.n_frames, (n - 400) / 160 + 1);
            prop_assert!(f.frames.iter().all(|v| v.is_finite()));
        }
    }
}
