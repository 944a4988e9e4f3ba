//! Pre-training and fine-tuning loops.
//!
//! Each step draws one context policy for the whole batch, builds one graph
//! per utterance (in parallel), sums the per-utterance gradients in batch
//! order and applies one AdamW update.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bestrq::{pretrain_loss, MaskSpec};
use crate::chunking::{sample_policy, ChunkPolicy, LeftContext, Phase, ScheduleConfig};
use crate::ctc::{ctc_loss_var, feasible};
use crate::encoder::subsampled_len;
use crate::exec;
use crate::frontend::FeatureSequence;
use crate::model::AsrModel;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::collect_grads;
use crate::tensor::{Graph, ParamId, Result, TensorError};

/// One row of the step-indexed loss log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub policy_mode: &'static str,
    pub chunk_size: usize,
    pub left: String,
}

impl LogRow {
    fn new(step: usize, loss: f64, policy: ChunkPolicy) -> Self {
        let (policy_mode, chunk_size, left) = match policy {
            ChunkPolicy::FullContext => ("full", 0, "full".to_string()),
            ChunkPolicy::Chunked { chunk_size, left } => (
                "chunked",
                chunk_size,
                match left {
                    LeftContext::Full => "full".to_string(),
                    LeftContext::Chunks(n) => n.to_string(),
                },
            ),
        };
        Self {
            step,
            loss,
            policy_mode,
            chunk_size,
            left,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub rows: Vec<LogRow>,
    /// Steps skipped because no frame of the batch was masked.
    pub skipped: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    /// Mean loss of the last `n` logged steps.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let k = n.min(self.rows.len());
        (k > 0).then(|| self.rows[self.rows.len() - k..].iter().map(|r| r.loss).sum::<f64>() / k as f64)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub optim: AdamWConfig,
    pub schedule: ScheduleConfig,
    pub phase: Phase,
    /// Overrides the schedule when set.
    pub fixed_policy: Option<ChunkPolicy>,
    pub mask: MaskSpec,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            lr: 1e-4,
            optim: AdamWConfig::default(),
            schedule: ScheduleConfig::default(),
            phase: Phase::Pretrain,
            fixed_policy: None,
            mask: MaskSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub schedule: ScheduleConfig,
    pub phase: Phase,
    pub fixed_policy: Option<ChunkPolicy>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            optim: AdamWConfig::default(),
            schedule: ScheduleConfig::default(),
            phase: Phase::Finetune,
            fixed_policy: None,
            seed: 0,
        }
    }
}

/// Training example for CTC fine-tuning.
#[derive(Debug, Clone)]
pub struct Labeled {
    pub feats: FeatureSequence,
    pub target: Vec<usize>,
}

type Grads = Vec<(ParamId, Vec<f32>)>;

fn pick_batch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    if batch >= n {
        (0..n).collect()
    } else {
        let mut idx = sample(rng, n, batch).into_vec();
        idx.sort_unstable();
        idx
    }
}

fn step_policy(rng: &mut ChaCha8Rng, fixed: Option<ChunkPolicy>, schedule: &ScheduleConfig, phase: Phase) -> ChunkPolicy {
    match fixed {
        Some(p) => p,
        None => sample_policy(rng, schedule, phase),
    }
}

/// Sum per-utterance results in batch order, scaled by `1/count`, into the store.
fn apply(model: &mut AsrModel, opt: &mut AdamW, results: Vec<(f64, Grads)>) -> f64 {
    let n = results.len() as f32;
    let mut loss = 0.0;
    for (l, grads) in results {
        loss += l;
        let scaled: Grads = grads.into_iter().map(|(id, g)| (id, g.into_iter().map(|x| x / n).collect())).collect();
        model.store.accumulate_list(&scaled);
    }
    opt.step(&mut model.store);
    loss / n as f64
}

fn utterance_seed(step_seed: u64, i: usize) -> u64 {
    step_seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Masked-prediction pre-training; `on_step` sees every logged row as it happens.
pub fn pretrain(model: &mut AsrModel, data: &[FeatureSequence], cfg: &PretrainConfig, mut on_step: impl FnMut(&LogRow)) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(TensorError::Usage("pre-training needs at least one utterance".into()));
    }
    model.ssl().map_err(|e| TensorError::Usage(e.to_string()))?;
    cfg.mask.validate()?;
    let mut opt = AdamW::new(AdamWConfig {
        lr_encoder: cfg.lr,
        lr_head: cfg.lr,
        ..cfg.optim.clone()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    for step in 1..=cfg.steps {
        let batch = pick_batch(&mut rng, data.len(), cfg.batch_size);
        let policy = step_policy(&mut rng, cfg.fixed_policy, &cfg.schedule, cfg.phase);
        let step_seed: u64 = rng.random();
        let m = &*model;
        let ssl = m.ssl.as_ref().expect("checked above");
        let results: Vec<Result<Option<(f64, Grads)>>> = exec::map_indexed(batch.len(), |i| {
            let mut r = ChaCha8Rng::seed_from_u64(utterance_seed(step_seed, i));
            let mut g = Graph::training(r.random());
            let out = pretrain_loss(&mut g, &m.store, &m.encoder, &ssl.head, &ssl.quantizer, &cfg.mask, &data[batch[i]], policy, &mut r)?;
            let Some(out) = out else { return Ok(None) };
            g.ensure_finite()?;
            g.backward(out.loss)?;
            Ok(Some((g.scalar_value(out.loss) as f64, collect_grads(&g))))
        });
        let results: Vec<(f64, Grads)> = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
        if results.is_empty() {
            report.skipped += 1;
            log::warn!("step {step}: no masked frames in batch, skipped");
            continue;
        }
        let loss = apply(model, &mut opt, results);
        let row = LogRow::new(step, loss, policy);
        on_step(&row);
        report.rows.push(row);
    }
    Ok(report)
}

/// CTC fine-tuning of encoder and probe with per-group learning rates.
/// The per-utterance loss is normalized by target length.
pub fn finetune(model: &mut AsrModel, data: &[Labeled], cfg: &FinetuneConfig, mut on_step: impl FnMut(&LogRow)) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(TensorError::Usage("fine-tuning needs at least one utterance".into()));
    }
    model.ctc().map_err(|e| TensorError::Usage(e.to_string()))?;
    for (i, ex) in data.iter().enumerate() {
        let frames = subsampled_len(ex.feats.n_frames);
        if !feasible(frames, &ex.target) {
            return Err(TensorError::Usage(format!(
                "utterance {i}: {frames} encoder frames cannot carry a {}-token target",
                ex.target.len()
            )));
        }
    }
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    for step in 1..=cfg.steps {
        let batch = pick_batch(&mut rng, data.len(), cfg.batch_size);
        let policy = step_policy(&mut rng, cfg.fixed_policy, &cfg.schedule, cfg.phase);
        let step_seed: u64 = rng.random();
        let m = &*model;
        let results: Vec<Result<(f64, Grads)>> = exec::map_indexed(batch.len(), |i| {
            let ex = &data[batch[i]];
            let mut g = Graph::training(utterance_seed(step_seed, i));
            let lp = m.log_probs(&mut g, &ex.feats, policy)?;
            g.ensure_finite()?;
            let loss = ctc_loss_var(&mut g, lp, &ex.target, 1.0 / ex.target.len().max(1) as f32)?;
            g.backward(loss)?;
            Ok((g.scalar_value(loss) as f64, collect_grads(&g)))
        });
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let loss = apply(model, &mut opt, results);
        let row = LogRow::new(step, loss, policy);
        on_step(&row);
        report.rows.push(row);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bestrq::QuantizerConfig;
    use crate::ctc::{ProbeConfig, Vocabulary};
    use crate::encoder::EncoderConfig;
    use crate::tensor::Tensor;

    fn feats(t: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSequence::new(Tensor::randn(&[t, 80], 1.0, &mut rng).into_vec(), 80, true).unwrap()
    }

    #[test]
    fn pretraining_overfits_one_utterance() {
        let mut m = AsrModel::for_pretraining(EncoderConfig::tiny(), QuantizerConfig::test_preset(0), 1).unwrap();
        let data = vec![feats(120, 1)];
        let cfg = PretrainConfig {
            steps: 200,
            batch_size: 1,
            lr: 2e-3,
            ..Default::default()
        };
        let rep = pretrain(&mut m, &data, &cfg, |_| {}).unwrap();
        let first = rep.rows[0].loss;
        let last = rep.tail_mean(10).unwrap();
        assert!(last <= 0.5 * first, "loss {first} -> {last}");
    }

    #[test]
    fn training_is_identical_across_exec_modes() {
        let vocab = Vocabulary::from_transcripts(["ab ba"]).unwrap();
        let data: Vec<Labeled> = (0..3)
            .map(|i| Labeled {
                feats: feats(40, i),
                target: vocab.encode("ab ba").unwrap(),
            })
            .collect();
        let cfg = FinetuneConfig {
            steps: 3,
            batch_size: 3,
            ..Default::default()
        };
        let run = |mode| {
            exec::set_mode(mode);
            let mut m = AsrModel::for_finetuning(EncoderConfig::tiny(), vocab.clone(), ProbeConfig { hidden_dim: 16, ..Default::default() }, 2).unwrap();
            let rep = finetune(&mut m, &data, &cfg, |_| {}).unwrap();
            (rep.rows, m.to_checkpoint())
        };
        let a = run(exec::Exec::Sequential);
        let b = run(exec::Exec::Parallel);
        exec::set_mode(exec::Exec::Parallel);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn infeasible_targets_are_rejected_up_front() {
        let vocab = Vocabulary::from_transcripts(["abcdefgh"]).unwrap();
        let mut m = AsrModel::for_finetuning(EncoderConfig::tiny(), vocab.clone(), ProbeConfig { hidden_dim: 8, ..Default::default() }, 2).unwrap();
        let data = vec![Labeled {
            feats: feats(16, 0),
            target: vocab.encode("abcdefgh").unwrap(),
        }];
        assert!(finetune(&mut m, &data, &FinetuneConfig::default(), |_| {}).is_err());
    }
}
