use proptest::prelude::*;
use streamrq::chunking::{attention_mask, conv_validity, latency_ms, ChunkPolicy, ConvContext, LeftContext};
use streamrq::ctc::{beam_search, ctc_loss, greedy_decode, BeamConfig, Vocabulary};
use streamrq::eval::wer;
use streamrq::ngram::NgramLm;
use streamrq::tensor::{Graph, Tensor};

fn policy() -> impl Strategy<Value = ChunkPolicy> {
    prop_oneof![
        Just(ChunkPolicy::FullContext),
        (1usize..10, prop::option::of(0usize..5)).prop_map(|(c, l)| ChunkPolicy::chunked(c, l.map_or(LeftContext::Full, LeftContext::Chunks)).unwrap()),
    ]
}

fn log_rows(t: usize, v: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.05f32..1.0, t * v).prop_map(move |raw| {
        raw.chunks(v)
            .flat_map(|r| {
                let z: f32 = r.iter().sum();
                r.iter().map(move |x| (x / z).ln()).collect::<Vec<_>>()
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn masks_keep_the_diagonal_and_never_look_ahead(t in 1usize..40, p in policy()) {
        let m = attention_mask(t, p);
        let c = p.chunk_size().unwrap_or(t);
        for i in 0..t {
            prop_assert!(m.get(i, i));
            for j in 0..t {
                if m.get(i, j) {
                    prop_assert!(j / c <= i / c);
                }
            }
        }
        let v = conv_validity(t, p, 5, ConvContext::WithinChunk);
        for i in 0..t {
            prop_assert!(v.get(i, 2));
        }
    }

    #[test]
    fn wider_left_context_only_adds_keys(t in 1usize..40, c in 1usize..8, l in 0usize..4) {
        let narrow = attention_mask(t, ChunkPolicy::chunked(c, LeftContext::Chunks(l)).unwrap());
        let wide = attention_mask(t, ChunkPolicy::chunked(c, LeftContext::Chunks(l + 1)).unwrap());
        prop_assert!(narrow.allowed.iter().zip(&wide.allowed).all(|(n, w)| !n || *w));
    }

    #[test]
    fn latency_is_chunk_duration(c in 1usize..64) {
        let p = ChunkPolicy::chunked(c, LeftContext::Full).unwrap();
        prop_assert_eq!(latency_ms(p, 40.0), 40.0 * c as f64);
    }

    #[test]
    fn ctc_feasibility_and_bounds(t in 1usize..8, y in prop::collection::vec(1usize..3, 0..5), seed in 0u64..1000) {
        let v = 3;
        let lp: Vec<f32> = (0..t * v).map(|k| (((k as u64 * 7919 + seed) % 97) as f32 / 97.0 + 0.1).ln()).collect::<Vec<_>>()
            .chunks(v).flat_map(|r| { let z: f32 = r.iter().map(|x| x.exp()).sum(); r.iter().map(move |x| x - z.ln()).collect::<Vec<_>>() }).collect();
        let repeats = y.windows(2).filter(|w| w[0] == w[1]).count();
        match ctc_loss(&lp, v, &y) {
            Ok((loss, grad)) => {
                prop_assert!(t >= y.len() + repeats);
                prop_assert!(loss.is_finite() && loss >= -1e-6);
                prop_assert!(grad.iter().all(|g| g.is_finite()));
            }
            Err(_) => prop_assert!(t < y.len() + repeats),
        }
    }

    #[test]
    fn beam_one_is_greedy(lp in (1usize..10).prop_flat_map(|t| log_rows(t, 4))) {
        let vocab = Vocabulary::from_chars(vec!['a', 'b', ' ']).unwrap();
        let cfg = BeamConfig { beam: 1, alpha: 0.0, beta: 0.0 };
        prop_assert_eq!(beam_search(&lp, &vocab, None, &cfg).unwrap().text, greedy_decode(&lp, &vocab));
    }

    #[test]
    fn exhaustive_beam_finds_best_labeling(lp in log_rows(4, 3)) {
        // V=3, T=4: the best labeling by total probability over its alignments
        let vocab = Vocabulary::from_chars(vec!['a', 'b']).unwrap();
        let mut best = (f64::NEG_INFINITY, Vec::new());
        let mut labelings: Vec<Vec<usize>> = vec![vec![]];
        for len in 1..=4 {
            for m in 0..(1usize << len) {
                labelings.push((0..len).map(|b| 1 + ((m >> b) & 1)).collect());
            }
        }
        for y in labelings {
            if let Ok((loss, _)) = ctc_loss(&lp, 3, &y) {
                if -loss > best.0 + 1e-9 {
                    best = (-loss, y);
                }
            }
        }
        let hyp = beam_search(&lp, &vocab, None, &BeamConfig { beam: 81, alpha: 0.0, beta: 0.0 }).unwrap();
        prop_assert_eq!(hyp.text, vocab.decode(&best.1).unwrap());
        prop_assert!((hyp.score_total - best.0).abs() < 1e-6);
    }

    #[test]
    fn ops_stay_finite(data in prop::collection::vec(-30.0f32..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(&[3, 4], data).unwrap());
        let ones = g.constant(&[4], vec![1.0; 4]).unwrap();
        let zeros = g.constant(&[4], vec![0.0; 4]).unwrap();
        let outs = [g.softmax(x), g.log_softmax(x), g.gelu(x), g.swish(x), g.sigmoid(x), g.layer_norm(x, ones, zeros, 1e-5).unwrap()];
        for o in outs {
            prop_assert!(g.value(o).iter().all(|v| v.is_finite()));
        }
        let s = g.softmax(x);
        for row in g.value(s).chunks(4) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn lm_distribution_sums_to_one(h in prop::collection::vec(0usize..6, 0..3)) {
        let lines = ["climb flight level one", "descend flight level two", "one two three", "contact tower"];
        let lm = NgramLm::train(&lines, 3).unwrap();
        let words: Vec<String> = lm.words().iter().filter(|w| w.as_str() != "<s>").cloned().collect();
        let hist: Vec<&str> = h.iter().map(|&i| words[i % words.len()].as_str()).collect();
        let total: f64 = words.iter().map(|w| 10f64.powf(lm.log10_prob(&hist, w))).sum();
        prop_assert!((total - 1.0).abs() < 1e-6, "sum {}", total);
    }

    #[test]
    fn wer_errors_are_symmetric(r in "[ab ]{0,12}", h in "[ab ]{0,12}") {
        let (a, b) = (wer(&r, &h), wer(&h, &r));
        prop_assert_eq!(a.errors(), b.errors());
        prop_assert_eq!(a.insertions, b.deletions);
    }
}
