use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use streamrq::bestrq::{MaskSpec, QuantizerConfig};
use streamrq::chunking::{ChunkPolicy, LeftContext, Phase, ScheduleConfig};
use streamrq::ctc::{beam_search, greedy_decode, BeamConfig, ProbeConfig, Vocabulary};
use streamrq::encoder::{EncoderConfig, Preset};
use streamrq::eval::{self, synth, DecodeOptions, Decoder, Utterance};
use streamrq::exec::{self, Exec};
use streamrq::frontend::{load_wav, FeatureSequence, SAMPLE_RATE};
use streamrq::model::AsrModel;
use streamrq::ngram::NgramLm;
use streamrq::optim::AdamWConfig;
use streamrq::stream::{Emit, Session, StreamConfig};
use streamrq::train::{finetune, pretrain, FinetuneConfig, Labeled, LogRow, PretrainConfig};

use crate::error::{usage, CliResult, Classify, Kind};
use crate::{BeamArgs, Cli, Command, OptimArgs, PolicyArgs, ScheduleArgs};

pub fn run(cli: Cli) -> CliResult<()> {
    exec::init_threads(cli.threads);
    if cli.sequential {
        exec::set_mode(Exec::Sequential);
    }
    let seed = cli.seed;
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a, seed),
        Command::Finetune(a) => cmd_finetune(a, seed),
        Command::Decode(a) => cmd_decode(a),
        Command::Stream(a) => cmd_stream(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::LmTrain(a) => cmd_lm_train(a),
        Command::SynthCorpus(a) => cmd_synth(a, seed),
    }
}

fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).kind(Kind::Data, &format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn policy(a: &PolicyArgs) -> CliResult<ChunkPolicy> {
    ChunkPolicy::from_flags(a.context.as_deref(), a.chunk_size, a.left_chunks.as_deref()).kind(Kind::Usage, "context policy")
}

/// A fixed policy when any policy flag is present, else the schedule decides.
fn fixed_policy(a: &PolicyArgs) -> CliResult<Option<ChunkPolicy>> {
    if a.context.is_none() && a.chunk_size.is_none() {
        if a.left_chunks.is_some() {
            return Err(usage("--left-chunks needs --chunk-size"));
        }
        return Ok(None);
    }
    policy(a).map(Some)
}

fn schedule(a: &ScheduleArgs, default_phase: Phase) -> CliResult<(ScheduleConfig, Phase)> {
    let s = ScheduleConfig {
        p_full: a.p_full,
        chunk_range: (a.chunk_min, a.chunk_max),
        p_limited_left: a.p_limited_left,
        left_range: (a.left_min, a.left_max),
    };
    s.validate().kind(Kind::Usage, "chunk schedule")?;
    let phase = match &a.policy_phase {
        Some(p) => p.parse().kind(Kind::Usage, "--policy-phase")?,
        None => default_phase,
    };
    Ok((s, phase))
}

fn optim(a: &OptimArgs, lr_encoder: f32, lr_head: f32) -> AdamWConfig {
    AdamWConfig {
        lr_encoder,
        lr_head,
        beta1: a.beta1,
        beta2: a.beta2,
        weight_decay: a.weight_decay,
        warmup: a.warmup,
        clip_norm: a.clip_norm,
        ..AdamWConfig::default()
    }
}

/// Load a manifest and its features; any unreadable entry is a data error.
fn load_corpus(path: &Path) -> CliResult<Vec<Utterance>> {
    let entries = load_entries(path)?;
    if entries.is_empty() {
        return Err(crate::error::Failure {
            kind: Kind::Data,
            err: anyhow::anyhow!("manifest {} is empty", path.display()),
        });
    }
    let (utts, errors) = eval::load_utterances(&entries);
    if let Some(e) = errors.first() {
        return Err(crate::error::Failure {
            kind: Kind::Data,
            err: anyhow::anyhow!("{}: {} ({} unreadable entries)", e.utt_id, e.message, errors.len()),
        });
    }
    Ok(utts)
}

fn load_entries(path: &Path) -> CliResult<Vec<eval::ManifestEntry>> {
    eval::load_manifest(path).kind(Kind::Data, &format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> CliResult<AsrModel> {
    AsrModel::load(path).map_err(|e| {
        let mut f = crate::error::Failure::from(e);
        f.err = f.err.context(format!("loading {}", path.display()));
        f
    })
}

fn log_writer(path: Option<&Path>) -> CliResult<csv::Writer<Box<dyn Write>>> {
    Ok(csv::Writer::from_writer(output(path)?))
}

fn cmd_pretrain(a: crate::PretrainArgs, seed: u64) -> CliResult<()> {
    let preset: Preset = a.preset.parse().kind(Kind::Usage, "--preset")?;
    let (sched, phase) = schedule(&a.schedule, Phase::Pretrain)?;
    let cfg = PretrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        optim: optim(&a.optim, a.lr, a.lr),
        schedule: sched,
        phase,
        fixed_policy: fixed_policy(&a.policy)?,
        mask: MaskSpec {
            p_start: a.mask_p_start,
            span_segments: a.mask_span,
            noise_std: a.mask_noise_std,
            ..MaskSpec::default()
        },
        seed,
    };
    let qcfg = QuantizerConfig {
        seed,
        codebook_size: a.codebook_size,
        code_dim: a.code_dim,
        ..QuantizerConfig::default()
    };
    let utts = load_corpus(&a.manifest)?;
    let feats: Vec<FeatureSequence> = utts.into_iter().map(|u| u.feats).collect();
    let mut model = AsrModel::for_pretraining(EncoderConfig::preset(preset), qcfg, seed)?;
    log::info!("pre-training {} preset on {} utterances for {} steps", a.preset, feats.len(), a.steps);
    let mut log = log_writer(a.log.as_deref())?;
    let mut write_err = None;
    let report = pretrain(&mut model, &feats, &cfg, |row| {
        if write_err.is_none() {
            write_err = log.serialize(row).err();
        }
        if row.step % 50 == 0 {
            log::info!("step {} loss {:.4} ({})", row.step, row.loss, row.policy_mode);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    log.flush()?;
    if report.skipped > 0 {
        log::warn!("{} steps had no masked frames", report.skipped);
    }
    model.save(&a.out)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_finetune(a: crate::FinetuneArgs, seed: u64) -> CliResult<()> {
    let (sched, phase) = schedule(&a.schedule, Phase::Finetune)?;
    let utts = load_corpus(&a.manifest)?;
    let texts: Vec<String> = utts.iter().map(|u| eval::normalize_text(&u.text)).collect();
    let probe = ProbeConfig {
        hidden_dim: a.probe_hidden,
        n_hidden: a.probe_layers,
        dropout: a.probe_dropout,
    };
    let mut model = match &a.init {
        Some(p) => {
            let m = load_model(p)?;
            if m.ctc.is_some() {
                m
            } else {
                let vocab = Vocabulary::from_transcripts(&texts).kind(Kind::Data, "building vocabulary")?;
                m.into_finetuning(vocab, probe, seed)?
            }
        }
        None => {
            let preset: Preset = a.preset.parse().kind(Kind::Usage, "--preset")?;
            let vocab = Vocabulary::from_transcripts(&texts).kind(Kind::Data, "building vocabulary")?;
            AsrModel::for_finetuning(EncoderConfig::preset(preset), vocab, probe, seed)?
        }
    };
    let vocab = model.ctc()?.vocab.clone();
    let mut data = Vec::with_capacity(utts.len());
    for (u, t) in utts.into_iter().zip(&texts) {
        let target = vocab.encode(t).kind(Kind::Data, &format!("transcript of {}", u.utt_id))?;
        data.push(Labeled { feats: u.feats, target });
    }
    let cfg = FinetuneConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        optim: optim(&a.optim, a.lr_encoder, a.lr_head),
        schedule: sched,
        phase,
        fixed_policy: fixed_policy(&a.policy)?,
        seed,
    };
    log::info!("fine-tuning on {} utterances for {} steps ({} symbols)", data.len(), a.steps, vocab.size());
    let mut log = log_writer(a.log.as_deref())?;
    let mut write_err = None;
    let on_step = |row: &LogRow| {
        if write_err.is_none() {
            write_err = log.serialize(row).err();
        }
        if row.step.is_multiple_of(50) {
            log::info!("step {} loss {:.4} ({})", row.step, row.loss, row.policy_mode);
        }
    };
    finetune(&mut model, &data, &cfg, on_step)?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    log.flush()?;
    model.save(&a.out)?;
    log::info!("wrote {}", a.out.display());
    if let Some(dev) = &a.dev {
        let entries = load_entries(dev)?;
        let rep = eval::evaluate(&model, &entries, &DecodeOptions::greedy(ChunkPolicy::FullContext))?;
        eprint!("dev set (full context, greedy):\n{}", rep.render());
    }
    Ok(())
}

fn load_lm(b: &BeamArgs) -> CliResult<Option<NgramLm>> {
    match &b.lm {
        Some(p) => Ok(Some(NgramLm::import_arpa(p)?)),
        None => Ok(None),
    }
}

fn decoder(b: &BeamArgs) -> CliResult<Decoder> {
    match b.beam {
        None if b.lm.is_some() => Err(usage("--lm needs --beam")),
        None => Ok(Decoder::Greedy),
        Some(0) => Err(usage("--beam must be >= 1")),
        Some(beam) => Ok(Decoder::Beam(BeamConfig {
            beam,
            alpha: b.alpha,
            beta: b.beta,
        })),
    }
}

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Serialize)]
struct HypLine {
    utt_id: String,
    text: String,
    score_total: f64,
    score_acoustic: f64,
    score_lm: f64,
}

fn cmd_decode(a: crate::DecodeArgs) -> CliResult<()> {
    let model = load_model(&a.ckpt)?;
    let vocab = model.ctc()?.vocab.clone();
    let policy = policy(&a.policy)?;
    let dec = decoder(&a.beam)?;
    let lm = load_lm(&a.beam)?;
    let entries = load_entries(&a.manifest)?;
    let (utts, errors) = eval::load_utterances(&entries);
    for e in &errors {
        log::error!("skipping {}: {}", e.utt_id, e.message);
    }
    let results = exec::map_indexed(utts.len(), |i| -> CliResult<HypLine> {
        let lp = model.log_probs_eval(&utts[i].feats, policy)?;
        let utt_id = utts[i].utt_id.clone();
        Ok(match &dec {
            Decoder::Greedy => {
                let v = vocab.size();
                let best: f64 = lp.chunks(v).map(|r| r.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64).sum();
                HypLine {
                    utt_id,
                    text: collapse(&greedy_decode(&lp, &vocab)),
                    score_total: best,
                    score_acoustic: best,
                    score_lm: 0.0,
                }
            }
            Decoder::Beam(cfg) => {
                let h = beam_search(&lp, &vocab, lm.as_ref(), cfg)?;
                HypLine {
                    utt_id,
                    text: collapse(&h.text),
                    score_total: h.score_total,
                    score_acoustic: h.score_acoustic,
                    score_lm: h.score_lm,
                }
            }
        })
    });
    let mut out = output(a.out.as_deref())?;
    for r in results {
        serde_json::to_writer(&mut out, &r?)?;
        writeln!(out)?;
    }
    out.flush()?;
    if !errors.is_empty() {
        return Err(crate::error::Failure {
            kind: Kind::Data,
            err: anyhow::anyhow!("{} entries could not be read", errors.len()),
        });
    }
    Ok(())
}

fn cmd_stream(a: crate::StreamArgs) -> CliResult<()> {
    let model = load_model(&a.ckpt)?;
    let left: LeftContext = a.left_chunks.parse().kind(Kind::Usage, "--left-chunks")?;
    let mut cfg = StreamConfig::new(a.chunk_size, left);
    if a.final_only {
        cfg.emit = Emit::FinalOnly;
    }
    let audio = load_wav(&a.wav)?;
    let step = ((a.pushes_ms / 1000.0) * SAMPLE_RATE as f64).round() as usize;
    if step == 0 {
        return Err(usage("--pushes-ms must cover at least one sample"));
    }
    let mut session = Session::open(&model, cfg)?;
    let mut out = io::stdout().lock();
    let t0 = Instant::now();
    for (i, piece) in audio.samples.chunks(step).enumerate() {
        let text = session.push_audio(piece)?;
        if !text.is_empty() {
            let audio_ms = ((i + 1) * step).min(audio.samples.len()) as f64 * 1000.0 / SAMPLE_RATE as f64;
            writeln!(out, "[{:>8.0} ms audio | {:>8.1} ms wall] {}", audio_ms, t0.elapsed().as_secs_f64() * 1e3, session.transcript())?;
        }
    }
    let fin = session.finalize()?;
    writeln!(out, "final: {}", fin.transcript)?;
    let l = &fin.latency;
    writeln!(
        out,
        "latency: algorithmic {:.0} ms, {} chunks, compute mean {:.2} ms, p95 {:.2} ms",
        l.algorithmic_ms, l.chunks, l.compute_mean_ms, l.compute_p95_ms
    )?;
    Ok(())
}

fn cmd_evaluate(a: crate::EvaluateArgs) -> CliResult<()> {
    let model = load_model(&a.ckpt)?;
    let lm = load_lm(&a.beam)?;
    let opts = DecodeOptions {
        policy: policy(&a.policy)?,
        decoder: decoder(&a.beam)?,
        lm: lm.as_ref(),
    };
    let entries = load_entries(&a.manifest)?;
    let rep = eval::evaluate(&model, &entries, &opts)?;
    if let Some(p) = &a.hyps {
        let mut w = output(Some(p))?;
        rep.write_hyps(&mut w)?;
        w.flush()?;
    }
    let mut out = io::stdout().lock();
    if a.json {
        #[derive(Serialize)]
        struct Summary<'a> {
            policy: String,
            wer: f64,
            overall: &'a eval::WerStats,
            per_role: &'a std::collections::BTreeMap<eval::Role, eval::WerStats>,
            errors: &'a [eval::EntryError],
        }
        let s = Summary {
            policy: opts.policy.to_string(),
            wer: rep.overall.wer(),
            overall: &rep.overall,
            per_role: &rep.per_role,
            errors: &rep.errors,
        };
        serde_json::to_writer_pretty(&mut out, &s)?;
        writeln!(out)?;
    } else {
        writeln!(out, "policy: {}", opts.policy)?;
        write!(out, "{}", rep.render())?;
    }
    Ok(())
}

fn cmd_sweep(a: crate::SweepArgs) -> CliResult<()> {
    let model = load_model(&a.ckpt)?;
    let lefts = a
        .left_contexts
        .iter()
        .map(|s| s.parse::<LeftContext>())
        .collect::<Result<Vec<_>, _>>()
        .kind(Kind::Usage, "--left-contexts")?;
    if a.chunk_sizes.contains(&0) {
        return Err(usage("chunk sizes must be >= 1"));
    }
    let dec = decoder(&a.beam)?;
    let lm = load_lm(&a.beam)?;
    let utts = load_corpus(&a.manifest)?;
    let rows = eval::sweep(&model, &utts, &a.chunk_sizes, &lefts, &dec, lm.as_ref())?;
    let out = output(a.out.as_deref())?;
    eval::write_sweep_csv(out, &rows)?;
    Ok(())
}

fn cmd_lm_train(a: crate::LmTrainArgs) -> CliResult<()> {
    let mut lines = Vec::new();
    for p in &a.text {
        let f = File::open(p).kind(Kind::Data, &format!("opening {}", p.display()))?;
        for line in io::BufReader::new(f).lines() {
            let line = eval::normalize_text(&line?);
            if !line.is_empty() {
                lines.push(line);
            }
        }
    }
    let lm = NgramLm::train_with_discount(&lines, a.order, a.discount)?;
    lm.export_arpa(&a.out)?;
    log::info!("{}-gram LM over {} words from {} lines, counts {:?}", a.order, lm.vocab_size(), lines.len(), lm.ngram_counts());
    Ok(())
}

fn cmd_synth(a: crate::SynthArgs, seed: u64) -> CliResult<()> {
    let cfg = synth::SynthConfig {
        seed,
        max_chars: a.max_chars,
        ..Default::default()
    };
    let paths = synth::write_corpus(&a.out, a.train, a.test, a.lm_lines, &cfg)?;
    log::info!("wrote {}, {} and {}", paths.train.display(), paths.test.display(), paths.lm_text.display());
    Ok(())
}
