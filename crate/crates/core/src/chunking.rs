//! Context regimes for chunked attention and dynamic chunk convolution.
//!
//! Encoder frame `i` belongs to chunk `⌊i/C⌋`. Under a chunked policy a frame
//! attends to every frame of its own chunk plus up to `L` previous chunks
//! (or all previous chunks with [`LeftContext::Full`]); it never sees a
//! later chunk. Convolution taps are restricted to the frame's own chunk
//! (or, with [`ConvContext::CausalPast`], to any non-future chunk).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

/// Duration of one encoder frame (4 × 10 ms feature frames).
pub const ENCODER_FRAME_MS: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LeftContext {
    Full,
    Chunks(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChunkPolicy {
    FullContext,
    Chunked { chunk_size: usize, left: LeftContext },
}

/// Which past frames a chunked convolution may read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ConvContext {
    /// Taps confined to the output frame's own chunk.
    #[default]
    WithinChunk,
    /// Taps may also reach into earlier chunks (never later ones).
    CausalPast,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("invalid chunk policy: {0}")]
    Invalid(String),
}

impl ChunkPolicy {
    pub fn chunked(chunk_size: usize, left: LeftContext) -> Result<Self, PolicyError> {
        if chunk_size == 0 {
            return Err(PolicyError::Invalid("chunk_size must be >= 1".into()));
        }
        Ok(Self::Chunked { chunk_size, left })
    }

    pub fn chunk_size(&self) -> Option<usize> {
        match self {
            Self::FullContext => None,
            Self::Chunked { chunk_size, .. } => Some(*chunk_size),
        }
    }

    /// Build from CLI-style values: `context = "full"` or a chunk size with
    /// `left = "full" | <n>`.
    pub fn from_flags(context: Option<&str>, chunk_size: Option<usize>, left: Option<&str>) -> Result<Self, PolicyError> {
        match (context, chunk_size) {
            (Some("full"), None) => Ok(Self::FullContext),
            (Some("full"), Some(_)) => Err(PolicyError::Invalid("--context full conflicts with --chunk-size".into())),
            (Some(other), _) => Err(PolicyError::Invalid(format!("unknown context '{other}'"))),
            (None, None) => Ok(Self::FullContext),
            (None, Some(c)) => {
                let left = match left {
                    None => LeftContext::Full,
                    Some(s) => s.parse()?,
                };
                Self::chunked(c, left)
            }
        }
    }
}

impl FromStr for LeftContext {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "full" {
            return Ok(Self::Full);
        }
        s.parse::<usize>()
            .map(Self::Chunks)
            .map_err(|_| PolicyError::Invalid(format!("left context '{s}' is neither 'full' nor a count")))
    }
}

impl fmt::Display for LeftContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Full => write!(f, "full"),
            Self::Chunks(n) => write!(f, "{n}"),
        }
    }
}

impl fmt::Display for ChunkPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::FullContext => write!(f, "full"),
            Self::Chunked { chunk_size, left } => write!(f, "chunk={chunk_size},left={left}"),
        }
    }
}

impl FromStr for ConvContext {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "within_chunk" => Ok(Self::WithinChunk),
            "causal_past" => Ok(Self::CausalPast),
            other => Err(PolicyError::Invalid(format!("conv context '{other}'"))),
        }
    }
}

impl fmt::Display for ConvContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::WithinChunk => "within_chunk",
            Self::CausalPast => "causal_past",
        })
    }
}

/// Row-major boolean matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl BoolMask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|b| **b).count()
    }

    /// Additive attention bias: 0 where allowed, `neg` elsewhere.
    pub fn to_bias(&self, neg: f32) -> Vec<f32> {
        self.allowed.iter().map(|&a| if a { 0.0 } else { neg }).collect()
    }
}

/// `allowed[i, j]`: query frame `i` may attend to key frame `j`.
pub fn attention_mask(t: usize, policy: ChunkPolicy) -> BoolMask {
    let mut allowed = vec![true; t * t];
    if let ChunkPolicy::Chunked { chunk_size: c, left } = policy {
        for i in 0..t {
            let ci = i / c;
            let lo = match left {
                LeftContext::Full => 0,
                LeftContext::Chunks(l) => ci.saturating_sub(l),
            };
            for j in 0..t {
                let cj = j / c;
                allowed[i * t + j] = cj >= lo && cj <= ci;
            }
        }
    }
    BoolMask {
        rows: t,
        cols: t,
        allowed,
    }
}

/// `allowed[i, k]`: kernel tap `k` (reading frame `i + k - K/2`) is usable at output `i`.
///
/// Out-of-range taps are never valid (zero padding). The left-context budget
/// of the policy does not widen the convolution.
pub fn conv_validity(t: usize, policy: ChunkPolicy, k: usize, ctx: ConvContext) -> BoolMask {
    let half = (k / 2) as isize;
    let mut allowed = vec![false; t * k];
    for i in 0..t {
        for tap in 0..k {
            let j = i as isize + tap as isize - half;
            if j < 0 || j >= t as isize {
                continue;
            }
            let j = j as usize;
            allowed[i * k + tap] = match policy {
                ChunkPolicy::FullContext => true,
                ChunkPolicy::Chunked { chunk_size: c, .. } => match ctx {
                    ConvContext::WithinChunk => j / c == i / c,
                    ConvContext::CausalPast => j / c <= i / c,
                },
            };
        }
    }
    BoolMask {
        rows: t,
        cols: k,
        allowed,
    }
}

/// Algorithmic latency: a frame's output is ready once its chunk is complete.
/// Full context has no bounded latency and yields `f64::INFINITY`.
pub fn latency_ms(policy: ChunkPolicy, frame_ms: f64) -> f64 {
    match policy {
        ChunkPolicy::FullContext => f64::INFINITY,
        ChunkPolicy::Chunked { chunk_size, .. } => chunk_size as f64 * frame_ms,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Mixed schedule: some batches full context, the rest dynamically chunked.
    Pretrain,
    /// Every batch dynamically chunked.
    Finetune,
    /// Every batch full context.
    Offline,
}

impl FromStr for Phase {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "finetune" => Ok(Self::Finetune),
            "offline" => Ok(Self::Offline),
            other => Err(PolicyError::Invalid(format!("phase '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub p_full: f64,
    pub chunk_range: (usize, usize),
    pub p_limited_left: f64,
    pub left_range: (usize, usize),
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            p_full: 0.40,
            chunk_range: (8, 32),
            p_limited_left: 0.75,
            left_range: (2, 32),
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_full) || !prob(self.p_limited_left) {
            return Err(PolicyError::Invalid("probabilities must lie in [0, 1]".into()));
        }
        if self.chunk_range.0 == 0 || self.chunk_range.0 > self.chunk_range.1 || self.left_range.0 > self.left_range.1 {
            return Err(PolicyError::Invalid("empty or zero chunk/left range".into()));
        }
        Ok(())
    }
}

/// Draw the policy for one batch. Bounds are inclusive.
pub fn sample_policy<R: Rng + ?Sized>(rng: &mut R, schedule: &ScheduleConfig, phase: Phase) -> ChunkPolicy {
    let p_full = match phase {
        Phase::Pretrain => schedule.p_full,
        Phase::Finetune => 0.0,
        Phase::Offline => return ChunkPolicy::FullContext,
    };
    if p_full > 0.0 && rng.random_bool(p_full.min(1.0)) {
        return ChunkPolicy::FullContext;
    }
    let chunk_size = rng.random_range(schedule.chunk_range.0..=schedule.chunk_range.1);
    let left = if rng.random_bool(schedule.p_limited_left) {
        LeftContext::Chunks(rng.random_range(schedule.left_range.0..=schedule.left_range.1))
    } else {
        LeftContext::Full
    };
    ChunkPolicy::Chunked { chunk_size, left }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chunked(c: usize, l: Option<usize>) -> ChunkPolicy {
        ChunkPolicy::Chunked {
            chunk_size: c,
            left: l.map_or(LeftContext::Full, LeftContext::Chunks),
        }
    }

    #[test]
    fn full_context_is_all_true() {
        let m = attention_mask(4, ChunkPolicy::FullContext);
        assert_eq!(m.count(), 16);
    }

    #[test]
    fn one_left_chunk_rows() {
        let m = attention_mask(6, chunked(2, Some(1)));
        let row = |i: usize| (0..6).filter(|&j| m.get(i, j)).collect::<Vec<_>>();
        assert_eq!(row(4), vec![2, 3, 4, 5]);
        assert_eq!(row(1), vec![0, 1]);
    }

    #[test]
    fn zero_left_is_block_diagonal() {
        let m = attention_mask(6, chunked(2, Some(0)));
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(m.get(i, j), i / 2 == j / 2);
            }
        }
    }

    #[test]
    fn conv_within_chunk_example() {
        let m = conv_validity(8, chunked(4, Some(1)), 5, ConvContext::WithinChunk);
        // i = 3 reads j = 1..=5 through taps 0..=4
        assert_eq!((0..5).map(|k| m.get(3, k)).collect::<Vec<_>>(), vec![true, true, true, false, false]);
    }

    #[test]
    fn conv_chunk_one_is_pointwise() {
        let m = conv_validity(7, chunked(1, None), 5, ConvContext::WithinChunk);
        for i in 0..7 {
            for k in 0..5 {
                assert_eq!(m.get(i, k), k == 2);
            }
        }
    }

    #[test]
    fn conv_full_context_pads_only() {
        let m = conv_validity(5, ChunkPolicy::FullContext, 3, ConvContext::WithinChunk);
        assert!(!m.get(0, 0) && !m.get(4, 2));
        assert_eq!(m.count(), 15 - 2);
    }

    #[test]
    fn causal_past_reaches_back_not_forward() {
        let m = conv_validity(8, chunked(4, Some(0)), 5, ConvContext::CausalPast);
        assert!(m.get(4, 0) && m.get(4, 1)); // frames 2, 3 of chunk 0
        assert!(!m.get(3, 3) && !m.get(3, 4)); // frames 4, 5 of chunk 1
    }

    #[test]
    fn latency_values() {
        assert_eq!(latency_ms(chunked(8, None), ENCODER_FRAME_MS), 320.0);
        assert_eq!(latency_ms(chunked(32, None), ENCODER_FRAME_MS), 1280.0);
        assert_eq!(latency_ms(chunked(16, Some(2)), ENCODER_FRAME_MS), 640.0);
        assert!(latency_ms(ChunkPolicy::FullContext, ENCODER_FRAME_MS).is_infinite());
    }

    #[test]
    fn degenerate_schedules() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let always_full = ScheduleConfig {
            p_full: 1.0,
            ..Default::default()
        };
        assert!((0..100).all(|_| sample_policy(&mut rng, &always_full, Phase::Pretrain) == ChunkPolicy::FullContext));
        let s = ScheduleConfig::default();
        assert!((0..1000).all(|_| sample_policy(&mut rng, &s, Phase::Finetune) != ChunkPolicy::FullContext));
        assert!((0..10).all(|_| sample_policy(&mut rng, &s, Phase::Offline) == ChunkPolicy::FullContext));
    }

    #[test]
    fn sampled_values_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = ScheduleConfig::default();
        for _ in 0..2000 {
            if let ChunkPolicy::Chunked { chunk_size, left } = sample_policy(&mut rng, &s, Phase::Pretrain) {
                assert!((8..=32).contains(&chunk_size));
                if let LeftContext::Chunks(l) = left {
                    assert!((2..=32).contains(&l));
                }
            }
        }
    }

    #[test]
    fn flag_parsing() {
        assert_eq!(ChunkPolicy::from_flags(Some("full"), None, None).unwrap(), ChunkPolicy::FullContext);
        assert_eq!(ChunkPolicy::from_flags(None, Some(8), Some("2")).unwrap(), chunked(8, Some(2)));
        assert_eq!(ChunkPolicy::from_flags(None, Some(8), Some("full")).unwrap(), chunked(8, None));
        assert!(ChunkPolicy::from_flags(None, Some(0), None).is_err());
        assert!(ChunkPolicy::from_flags(Some("full"), Some(4), None).is_err());
        assert!(ChunkPolicy::from_flags(None, Some(4), Some("many")).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(ScheduleConfig::default().validate().is_ok());
        let bad = ScheduleConfig {
            chunk_range: (9, 8),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
