//! Corpus evaluation: WER with a per-role breakdown and the latency/context sweep.

mod manifest;
pub mod synth;
mod wer;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

pub use manifest::{load_manifest, read_manifest, write_manifest, ManifestEntry, ManifestError, Role};
pub use wer::{align, normalize_text, wer, WerStats};

use crate::chunking::{latency_ms, ChunkPolicy, LeftContext, ENCODER_FRAME_MS};
use crate::ctc::{beam_search, greedy_decode, BeamConfig};
use crate::exec;
use crate::frontend::{extract_normalized, load_wav, FeatureSequence};
use crate::model::AsrModel;
use crate::ngram::NgramLm;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("model has no CTC probe; fine-tune it first")]
    NotFinetuned,
    #[error("numeric failure decoding {utt_id}: {msg}")]
    Numeric { utt_id: String, msg: String },
    #[error("decoding {utt_id}: {msg}")]
    Decode { utt_id: String, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    Greedy,
    Beam(BeamConfig),
}

#[derive(Debug, Clone)]
pub struct DecodeOptions<'a> {
    pub policy: ChunkPolicy,
    pub decoder: Decoder,
    /// Only consulted by the beam decoder.
    pub lm: Option<&'a NgramLm>,
}

impl DecodeOptions<'_> {
    pub fn greedy(policy: ChunkPolicy) -> Self {
        Self {
            policy,
            decoder: Decoder::Greedy,
            lm: None,
        }
    }
}

/// Decode one normalized feature sequence to text (whitespace collapsed).
pub fn decode_features(model: &AsrModel, feats: &FeatureSequence, opts: &DecodeOptions) -> Result<String, TensorError> {
    let ctc = model.ctc().map_err(|e| TensorError::Usage(e.to_string()))?;
    let lp = model.log_probs_eval(feats, opts.policy)?;
    let text = match &opts.decoder {
        Decoder::Greedy => greedy_decode(&lp, &ctc.vocab),
        Decoder::Beam(cfg) => beam_search(&lp, &ctc.vocab, opts.lm, cfg)?.text,
    };
    Ok(text.split_whitespace().collect::<Vec<_>>().join(" "))
}

/// An utterance with features already extracted.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub utt_id: String,
    pub role: Option<Role>,
    pub text: String,
    pub feats: FeatureSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntryError {
    pub utt_id: String,
    pub message: String,
}

/// Load audio and extract normalized features; unreadable entries are returned
/// separately instead of aborting.
pub fn load_utterances(entries: &[ManifestEntry]) -> (Vec<Utterance>, Vec<EntryError>) {
    let loaded = exec::map_indexed(entries.len(), |i| {
        let e = &entries[i];
        load_wav(&e.audio).and_then(|a| extract_normalized(&a)).map(|feats| Utterance {
            utt_id: e.utt_id.clone(),
            role: e.role,
            text: e.text.clone(),
            feats,
        })
    });
    let mut ok = Vec::new();
    let mut errors = Vec::new();
    for (e, r) in entries.iter().zip(loaded) {
        match r {
            Ok(u) => ok.push(u),
            Err(err) => errors.push(EntryError {
                utt_id: e.utt_id.clone(),
                message: err.to_string(),
            }),
        }
    }
    (ok, errors)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisRecord {
    pub utt_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    pub reference: String,
    pub hypothesis: String,
    pub stats: WerStats,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct EvalReport {
    pub overall: WerStats,
    pub per_role: BTreeMap<Role, WerStats>,
    pub hyps: Vec<HypothesisRecord>,
    pub errors: Vec<EntryError>,
}

fn fmt_wer(s: &WerStats) -> String {
    let w = s.wer();
    if w.is_finite() {
        format!("{:.2}", 100.0 * w)
    } else {
        "inf".into()
    }
}

impl EvalReport {
    /// Plain-text summary with one WER column per role.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>8} {:>6} {:>6} {:>6} {:>6}", "set", "WER%", "sub", "ins", "del", "words");
        let mut row = |name: &str, st: &WerStats| {
            let _ = writeln!(
                s,
                "{:<8} {:>8} {:>6} {:>6} {:>6} {:>6}",
                name,
                fmt_wer(st),
                st.substitutions,
                st.insertions,
                st.deletions,
                st.ref_words
            );
        };
        row("all", &self.overall);
        for r in Role::ALL {
            match self.per_role.get(&r) {
                Some(st) => row(&r.to_string(), st),
                None => row(&r.to_string(), &WerStats::default()),
            }
        }
        let _ = writeln!(s, "decoded {} utterances, {} errors", self.hyps.len(), self.errors.len());
        for e in &self.errors {
            let _ = writeln!(s, "  error {}: {}", e.utt_id, e.message);
        }
        s
    }

    /// Hypotheses as JSON lines.
    pub fn write_hyps<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for h in &self.hyps {
            serde_json::to_writer(&mut w, h)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Decode every utterance (in parallel) and aggregate in input order.
pub fn evaluate_utterances(model: &AsrModel, utts: &[Utterance], opts: &DecodeOptions) -> Result<EvalReport, EvalError> {
    model.ctc().map_err(|_| EvalError::NotFinetuned)?;
    let decoded = exec::map_indexed(utts.len(), |i| decode_features(model, &utts[i].feats, opts));
    let mut report = EvalReport::default();
    for (u, d) in utts.iter().zip(decoded) {
        let hyp = d.map_err(|e| match e {
            TensorError::NonFinite(_) => EvalError::Numeric {
                utt_id: u.utt_id.clone(),
                msg: e.to_string(),
            },
            e => EvalError::Decode {
                utt_id: u.utt_id.clone(),
                msg: e.to_string(),
            },
        })?;
        let stats = wer(&u.text, &hyp);
        report.overall += stats;
        if let Some(r) = u.role {
            *report.per_role.entry(r).or_default() += stats;
        }
        report.hyps.push(HypothesisRecord {
            utt_id: u.utt_id.clone(),
            role: u.role,
            reference: u.text.clone(),
            hypothesis: hyp,
            stats,
        });
    }
    Ok(report)
}

/// Load, decode and score a manifest. Missing or unreadable audio is recorded
/// in the report's error list.
pub fn evaluate(model: &AsrModel, entries: &[ManifestEntry], opts: &DecodeOptions) -> Result<EvalReport, EvalError> {
    model.ctc().map_err(|_| EvalError::NotFinetuned)?;
    let (utts, errors) = load_utterances(entries);
    let mut report = evaluate_utterances(model, &utts, opts)?;
    report.errors = errors;
    Ok(report)
}

/// One sweep cell. `None` chunk size / left context mean full context.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub chunk_size: String,
    pub left_chunks: String,
    /// Empty for the full-context cell (latency is the utterance length).
    pub latency_ms: Option<f64>,
    pub wer: f64,
    pub errors: usize,
    pub ref_words: usize,
}

fn left_label(l: LeftContext) -> String {
    match l {
        LeftContext::Full => "full".into(),
        LeftContext::Chunks(n) => n.to_string(),
    }
}

/// Evaluate every `(chunk, left)` cell plus one full-context cell.
pub fn sweep(
    model: &AsrModel,
    utts: &[Utterance],
    chunk_sizes: &[usize],
    lefts: &[LeftContext],
    decoder: &Decoder,
    lm: Option<&NgramLm>,
) -> Result<Vec<SweepRow>, EvalError> {
    let mut cells = Vec::with_capacity(chunk_sizes.len() * lefts.len() + 1);
    for &c in chunk_sizes {
        for &l in lefts {
            let policy = ChunkPolicy::chunked(c, l).map_err(|e| EvalError::Decode {
                utt_id: String::new(),
                msg: e.to_string(),
            })?;
            cells.push(policy);
        }
    }
    cells.push(ChunkPolicy::FullContext);
    let mut rows = Vec::with_capacity(cells.len());
    for policy in cells {
        let opts = DecodeOptions {
            policy,
            decoder: decoder.clone(),
            lm,
        };
        let rep = evaluate_utterances(model, utts, &opts)?;
        let (chunk_size, left_chunks) = match policy {
            ChunkPolicy::FullContext => ("full".to_string(), "full".to_string()),
            ChunkPolicy::Chunked { chunk_size, left } => (chunk_size.to_string(), left_label(left)),
        };
        let lat = latency_ms(policy, ENCODER_FRAME_MS);
        log::info!("sweep cell chunk={chunk_size} left={left_chunks}: wer {:.4}", rep.overall.wer());
        rows.push(SweepRow {
            chunk_size,
            left_chunks,
            latency_ms: lat.is_finite().then_some(lat),
            wer: rep.overall.wer(),
            errors: rep.overall.errors(),
            ref_words: rep.overall.ref_words,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
