//! Same workloads under `Exec::Sequential` and `Exec::Parallel`.
//! Without the `parallel` feature both rows run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamrq::chunking::{ChunkPolicy, LeftContext};
use streamrq::ctc::{ProbeConfig, Vocabulary};
use streamrq::encoder::EncoderConfig;
use streamrq::eval::{evaluate_utterances, synth, DecodeOptions, Utterance};
use streamrq::exec::{self, Exec};
use streamrq::frontend::extract_normalized;
use streamrq::model::AsrModel;
use streamrq::tensor::{Graph, Tensor};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn gemm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("gemm_256");
    let a = Tensor::new(&[256, 256], random(256 * 256, &mut rng)).unwrap();
    let b = Tensor::new(&[256, 256], random(256 * 256, &mut rng)).unwrap();
    for (name, mode) in MODES {
        exec::set_mode(mode);
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.input(&a), g.input(&b));
                g.matmul(x, y).unwrap()
            })
        });
    }
    group.finish();
}

fn corpus(n: usize) -> (AsrModel, Vec<Utterance>) {
    let data = synth::generate(n, &synth::SynthConfig { seed: 1, ..Default::default() });
    let vocab = Vocabulary::from_transcripts(data.iter().map(|u| u.text.as_str())).unwrap();
    let probe = ProbeConfig { hidden_dim: 128, n_hidden: 2, dropout: 0.0 };
    let model = AsrModel::for_finetuning(EncoderConfig::tiny(), vocab, probe, 0).unwrap();
    let utts = data
        .into_iter()
        .map(|u| Utterance {
            utt_id: u.utt_id,
            role: Some(u.role),
            text: u.text,
            feats: extract_normalized(&u.audio).unwrap(),
        })
        .collect();
    (model, utts)
}

fn encoder_forward(c: &mut Criterion) {
    let (model, utts) = corpus(1);
    let mut group = c.benchmark_group("tiny_encoder_forward");
    let policy = ChunkPolicy::chunked(8, LeftContext::Chunks(2)).unwrap();
    for (name, mode) in MODES {
        exec::set_mode(mode);
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                model.encode(&mut g, &utts[0].feats, policy).unwrap()
            })
        });
    }
    group.finish();
}

fn batch_decode(c: &mut Criterion) {
    let (model, utts) = corpus(8);
    let opts = DecodeOptions::greedy(ChunkPolicy::FullContext);
    let mut group = c.benchmark_group("batch_decode_8");
    group.sample_size(10);
    for (name, mode) in MODES {
        exec::set_mode(mode);
        group.bench_function(BenchmarkId::from_parameter(name), |bench| bench.iter(|| evaluate_utterances(&model, &utts, &opts).unwrap()));
    }
    group.finish();
    exec::set_mode(Exec::Parallel);
}

criterion_group!(benches, gemm, encoder_forward, batch_decode);
criterion_main!(benches);
