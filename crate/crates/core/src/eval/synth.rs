//! Seeded synthetic corpus: pseudo air-traffic phrases rendered as tone
//! sequences, one tone per letter and a noise burst per space.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{write_manifest, ManifestEntry, Role};
use crate::frontend::{write_wav_pcm16, AudioBuffer, FrontendError, SAMPLE_RATE};

const NATO: [&str; 26] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliett", "kilo", "lima", "mike", "november", "oscar", "papa", "quebec",
    "romeo", "sierra", "tango", "uniform", "victor", "whiskey", "xray", "yankee", "zulu",
];
const DIGITS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "niner"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Phrases longer than this are redrawn (a bounded number of times,
    /// after which the shortest draw is kept).
    pub max_chars: usize,
    pub tone_ms: f64,
    pub gap_ms: f64,
    pub edge_ms: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_chars: 48,
            tone_ms: 60.0,
            gap_ms: 20.0,
            edge_ms: 100.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub utt_id: String,
    pub text: String,
    pub role: Role,
    pub audio: AudioBuffer,
}

fn digits<R: Rng>(rng: &mut R, n: usize) -> String {
    (0..n).map(|_| *DIGITS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn callsign<R: Rng>(rng: &mut R) -> String {
    format!("{} {}", NATO.choose(rng).unwrap(), NATO.choose(rng).unwrap())
}

fn instruction<R: Rng>(rng: &mut R) -> String {
    match rng.random_range(0..6) {
        0 => format!("climb flight level {}", digits(rng, 3)),
        1 => format!("descend flight level {}", digits(rng, 3)),
        2 => format!("turn left heading {}", digits(rng, 3)),
        3 => format!("turn right heading {}", digits(rng, 3)),
        4 => format!("contact tower {}", digits(rng, 3)),
        _ => format!("cleared to land runway {}", digits(rng, 2)),
    }
}

/// One phrase for `role`.
pub fn phrase<R: Rng>(rng: &mut R, role: Role) -> String {
    match role {
        Role::C => format!("{} {}", callsign(rng), instruction(rng)),
        Role::P => match rng.random_range(0..3) {
            0 => format!("{} {}", instruction(rng), callsign(rng)),
            1 => format!("wilco {}", callsign(rng)),
            _ => format!("roger {}", callsign(rng)),
        },
        Role::A => match rng.random_range(0..2) {
            0 => format!("information {} wind {}", NATO.choose(rng).unwrap(), digits(rng, 3)),
            _ => format!("runway {} in use qnh {}", digits(rng, 2), digits(rng, 2)),
        },
    }
}

fn letter_freq(c: char) -> Option<f64> {
    let i = (c as u32).checked_sub('a' as u32).filter(|&i| i < 26)? as f64;
    // mel-spaced between 300 Hz and 5 kHz
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let (lo, hi) = (mel(300.0), mel(5000.0));
    Some(hz(lo + (hi - lo) * i / 25.0))
}

/// Render `text` to audio: a tone per letter, a noise burst per space, short
/// gaps between symbols and silence at both ends. Unknown characters render as gaps.
pub fn render<R: Rng>(text: &str, cfg: &SynthConfig, rng: &mut R) -> AudioBuffer {
    let sr = SAMPLE_RATE as f64;
    let pitch: f64 = rng.random_range(0.98..1.02);
    let tempo: f64 = rng.random_range(0.9..1.1);
    let n = |ms: f64| (ms * tempo * sr / 1000.0).round() as usize;
    let floor = Normal::new(0.0, 0.003).unwrap();
    let mut out: Vec<f32> = (0..n(cfg.edge_ms)).map(|_| floor.sample(rng) as f32).collect();
    let ramp = (0.005 * sr) as usize;
    for c in text.chars() {
        let len = n(cfg.tone_ms);
        let env = |i: usize| {
            let e = i.min(len - 1 - i).min(ramp) as f64 / ramp as f64;
            0.5 - 0.5 * (PI * e).cos()
        };
        match (c, letter_freq(c)) {
            (_, Some(f)) => {
                let f = f * pitch;
                let phase: f64 = rng.random_range(0.0..2.0 * PI);
                out.extend((0..len).map(|i| (0.3 * env(i) * (2.0 * PI * f * i as f64 / sr + phase).sin() + floor.sample(rng)) as f32));
            }
            (' ', None) => {
                let burst = Normal::new(0.0, 0.08).unwrap();
                out.extend((0..len).map(|i| (env(i) * burst.sample(rng)) as f32));
            }
            _ => out.extend((0..len).map(|_| floor.sample(rng) as f32)),
        }
        out.extend((0..n(cfg.gap_ms)).map(|_| floor.sample(rng) as f32));
    }
    out.extend((0..n(cfg.edge_ms)).map(|_| floor.sample(rng) as f32));
    AudioBuffer::new(out)
}

/// `n` utterances with roles cycling C, P, A.
pub fn generate(n: usize, cfg: &SynthConfig) -> Vec<SynthUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..n)
        .map(|i| {
            let role = Role::ALL[i % 3];
            let mut text = phrase(&mut rng, role);
            for _ in 0..64 {
                if text.len() <= cfg.max_chars {
                    break;
                }
                let t = phrase(&mut rng, role);
                if t.len() < text.len() {
                    text = t;
                }
            }
            let audio = render(&text, cfg, &mut rng);
            SynthUtterance {
                utt_id: format!("synth{:05}", i),
                text,
                role,
                audio,
            }
        })
        .collect()
}

/// Text-only phrases (for LM training).
pub fn text_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| phrase(&mut rng, Role::ALL[i % 3])).collect()
}

/// Files written by [`write_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub train: PathBuf,
    pub test: PathBuf,
    pub lm_text: PathBuf,
}

/// Write `wav/*.wav`, `train.jsonl`, `test.jsonl` and `lm.txt` under `dir`.
pub fn write_corpus(dir: &Path, n_train: usize, n_test: usize, n_lm: usize, cfg: &SynthConfig) -> Result<CorpusPaths, FrontendError> {
    std::fs::create_dir_all(dir.join("wav"))?;
    let utts = generate(n_train + n_test, cfg);
    let mut entries = Vec::with_capacity(utts.len());
    for u in &utts {
        let rel = PathBuf::from("wav").join(format!("{}.wav", u.utt_id));
        write_wav_pcm16(dir.join(&rel), &u.audio)?;
        entries.push(ManifestEntry {
            utt_id: u.utt_id.clone(),
            audio: rel,
            text: u.text.clone(),
            role: Some(u.role),
            duration_s: Some(u.audio.duration_s()),
        });
    }
    let paths = CorpusPaths {
        train: dir.join("train.jsonl"),
        test: dir.join("test.jsonl"),
        lm_text: dir.join("lm.txt"),
    };
    write_manifest(std::fs::File::create(&paths.train)?, &entries[..n_train])?;
    write_manifest(std::fs::File::create(&paths.test)?, &entries[n_train..])?;
    let mut lm = std::io::BufWriter::new(std::fs::File::create(&paths.lm_text)?);
    for u in &utts[..n_train] {
        writeln!(lm, "{}", u.text)?;
    }
    for line in text_corpus(n_lm, cfg.seed ^ 0x5eed) {
        writeln!(lm, "{line}")?;
    }
    lm.flush()?;
    Ok(paths)
}
