//! Greedy and prefix beam search decoding with word-level n-gram fusion.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Vocabulary, BLANK};
use crate::ngram::NgramLm;
use crate::tensor::{Result, TensorError};

/// Per-frame argmax (lowest id on ties), repeats collapsed, blanks dropped.
pub fn greedy_ids(logp: &[f32], v: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = BLANK;
    for row in logp.chunks(v) {
        let mut best = 0;
        for (k, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = k;
            }
        }
        if best != BLANK && best != prev {
            out.push(best);
        }
        prev = best;
    }
    out
}

pub fn greedy_decode(logp: &[f32], vocab: &Vocabulary) -> String {
    vocab.decode(&greedy_ids(logp, vocab.size())).expect("argmax ids are in range")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam: usize,
    /// LM weight; 0 disables fusion.
    pub alpha: f64,
    /// Per-word bonus, applied only while fusion is active.
    pub beta: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam: 32, alpha: 0.8, beta: 1.0 }
    }
}

/// `score_total = score_acoustic + alpha·score_lm + beta·n_words` with the
/// effective weights (both 0 without fusion). Scores are natural logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtcHypothesis {
    pub text: String,
    pub score_total: f64,
    pub score_acoustic: f64,
    pub score_lm: f64,
    pub n_words: usize,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone)]
struct Beam {
    pb: f64,
    pnb: f64,
    hist: Vec<u32>,
    partial: String,
    lm: f64,
    n_words: usize,
}

fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

struct Fusion<'a> {
    lm: &'a NgramLm,
    alpha: f64,
    beta: f64,
}

impl Fusion<'_> {
    /// Natural-log LM score of `word` after `hist`; updates the history.
    fn word(&self, hist: &mut Vec<u32>, word: &str) -> f64 {
        let id = self.lm.word_id(word);
        let s = self.lm.log10_prob_ids(hist, id) * std::f64::consts::LN_10;
        hist.push(id);
        let keep = self.lm.order().saturating_sub(1);
        if hist.len() > keep {
            hist.drain(..hist.len() - keep);
        }
        s
    }
}

impl Beam {
    fn acoustic(&self) -> f64 {
        lse(self.pb, self.pnb)
    }

    fn score(&self, f: Option<&Fusion>) -> f64 {
        match f {
            Some(f) => self.acoustic() + f.alpha * self.lm + f.beta * self.n_words as f64,
            None => self.acoustic(),
        }
    }

    fn extend(&self, c: char, f: Option<&Fusion>) -> Beam {
        let mut b = Beam {
            pb: f64::NEG_INFINITY,
            pnb: f64::NEG_INFINITY,
            hist: self.hist.clone(),
            partial: self.partial.clone(),
            lm: self.lm,
            n_words: self.n_words,
        };
        match f {
            Some(f) if c == ' ' => {
                if !b.partial.is_empty() {
                    let w = std::mem::take(&mut b.partial);
                    b.lm += f.word(&mut b.hist, &w);
                    b.n_words += 1;
                }
            }
            _ => b.partial.push(c),
        }
        b
    }

    /// Scores the unfinished last word as a complete word.
    fn finish(&mut self, f: Option<&Fusion>) {
        if let Some(f) = f {
            if !self.partial.is_empty() {
                let w = std::mem::take(&mut self.partial);
                self.lm += f.word(&mut self.hist, &w);
                self.n_words += 1;
            }
        }
    }
}

/// Prefix beam search over `logp: [T, V]`.
pub fn beam_search(logp: &[f32], vocab: &Vocabulary, lm: Option<&NgramLm>, cfg: &BeamConfig) -> Result<CtcHypothesis> {
    if cfg.beam == 0 {
        return Err(TensorError::Config("beam size must be at least 1".into()));
    }
    let v = vocab.size();
    if !logp.len().is_multiple_of(v) {
        return Err(TensorError::Shape {
            op: "beam_search",
            detail: format!("{} values for V={v}", logp.len()),
        });
    }
    let fusion = lm.filter(|_| cfg.alpha != 0.0).map(|lm| Fusion { lm, alpha: cfg.alpha, beta: cfg.beta });
    let f = fusion.as_ref();
    let ninf = f64::NEG_INFINITY;
    let root = Beam {
        pb: 0.0,
        pnb: ninf,
        hist: lm.map(|l| vec![l.bos_id()]).unwrap_or_default(),
        partial: String::new(),
        lm: 0.0,
        n_words: 0,
    };
    let mut beams: Vec<(Vec<u16>, Beam)> = vec![(Vec::new(), root)];
    let mut order: Vec<usize> = (0..v).collect();
    let mut keep = vec![true; v];
    for row in logp.chunks(v) {
        // only the frame's top `beam` tokens are expanded (lowest id on ties)
        if cfg.beam < v {
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            keep.fill(false);
            order[..cfg.beam].iter().for_each(|&k| keep[k] = true);
        }
        let mut next: HashMap<Vec<u16>, Beam> = HashMap::with_capacity(beams.len() * v);
        for (prefix, b) in &beams {
            let total = b.acoustic();
            let last = prefix.last().map(|&c| c as usize);
            let e = next.entry(prefix.clone()).or_insert_with(|| Beam {
                pb: ninf,
                pnb: ninf,
                ..b.clone()
            });
            if keep[BLANK] {
                e.pb = lse(e.pb, total + row[BLANK] as f64);
            }
            if let Some(l) = last.filter(|&l| keep[l]) {
                e.pnb = lse(e.pnb, b.pnb + row[l] as f64);
            }
            for (c, &lp) in row.iter().enumerate().skip(1) {
                if !keep[c] {
                    continue;
                }
                let lp = lp as f64;
                let from = if Some(c) == last { b.pb } else { total };
                if from == ninf {
                    continue;
                }
                let mut key = prefix.clone();
                key.push(c as u16);
                let ch = vocab.token(c).expect("id in range");
                let e = next.entry(key).or_insert_with(|| b.extend(ch, f));
                e.pnb = lse(e.pnb, from + lp);
            }
        }
        let mut cands: Vec<(Vec<u16>, Beam, f64)> = next
            .into_iter()
            .map(|(k, b)| {
                let s = b.score(f);
                (k, b, s)
            })
            .collect();
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
        cands.truncate(cfg.beam);
        beams = cands.into_iter().map(|(k, b, _)| (k, b)).collect();
    }
    let mut best: Option<(f64, Vec<u16>, Beam)> = None;
    for (k, mut b) in beams {
        b.finish(f);
        let s = b.score(f);
        let better = match &best {
            None => true,
            Some((bs, bk, _)) => s > *bs || (s == *bs && k < *bk),
        };
        if better {
            best = Some((s, k, b));
        }
    }
    let (score_total, prefix, b) = best.expect("beam is never empty");
    let ids: Vec<usize> = prefix.iter().map(|&c| c as usize).collect();
    let (alpha, beta) = f.map_or((0.0, 0.0), |f| (f.alpha, f.beta));
    Ok(CtcHypothesis {
        text: vocab.decode(&ids).expect("ids in range"),
        score_total,
        score_acoustic: b.acoustic(),
        score_lm: if f.is_some() { b.lm } else { 0.0 },
        n_words: b.n_words,
        alpha,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_ab() -> Vocabulary {
        Vocabulary::from_chars(vec!['a', 'b']).unwrap()
    }

    fn rows(ids: &[usize], v: usize) -> Vec<f32> {
        ids.iter()
            .flat_map(|&k| (0..v).map(move |j| if j == k { 0.9f32.ln() } else { (0.1 / (v - 1) as f32).ln() }))
            .collect()
    }

    #[test]
    fn greedy_collapse_rules() {
        let v = vocab_ab();
        assert_eq!(greedy_decode(&rows(&[0, 1, 1, 0, 2], 3), &v), "ab");
        assert_eq!(greedy_decode(&rows(&[0, 0, 0], 3), &v), "");
        assert_eq!(greedy_decode(&rows(&[1, 0, 1], 3), &v), "aa");
    }

    #[test]
    fn beam_zero_is_config_error() {
        let r = beam_search(&rows(&[1], 3), &vocab_ab(), None, &BeamConfig { beam: 0, ..Default::default() });
        assert!(matches!(r, Err(TensorError::Config(_))));
    }

    #[test]
    fn beam_one_without_lm_matches_greedy_on_peaky_rows() {
        let v = vocab_ab();
        let lp = rows(&[0, 1, 1, 0, 2, 2, 0, 1], 3);
        let h = beam_search(&lp, &v, None, &BeamConfig { beam: 1, alpha: 0.0, beta: 1.0 }).unwrap();
        assert_eq!(h.text, greedy_decode(&lp, &v));
        assert_eq!(h.score_total, h.score_acoustic);
    }

    #[test]
    fn beam_one_matches_greedy_on_flat_rows() {
        use rand::{Rng, SeedableRng};
        let v = Vocabulary::from_chars(vec!['a', 'b', 'c']).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let t = rng.random_range(1..12);
            let lp: Vec<f32> = (0..t * 4)
                .map(|_| rng.random_range(0.2f32..1.0))
                .collect::<Vec<_>>()
                .chunks(4)
                .flat_map(|r| {
                    let z: f32 = r.iter().sum();
                    r.iter().map(move |x| (x / z).ln()).collect::<Vec<_>>()
                })
                .collect();
            let cfg = BeamConfig { beam: 1, alpha: 0.0, beta: 0.0 };
            assert_eq!(beam_search(&lp, &v, None, &cfg).unwrap().text, greedy_decode(&lp, &v));
        }
    }

    #[test]
    fn lm_breaks_an_acoustic_tie() {
        // e n o u w -> ids 1..=5; frames tie o/w, n/u, e/n so "one" and "wun" score alike
        let v = Vocabulary::from_chars(vec!['e', 'n', 'o', 'u', 'w']).unwrap();
        let frame = |a: usize, b: usize| (0..6).map(move |k| if k == a || k == b { 0.45f32.ln() } else { 0.025f32.ln() });
        let lp: Vec<f32> = frame(3, 5).chain(frame(2, 4)).chain(frame(1, 2)).collect();
        let lm = NgramLm::train(&["one"], 2).unwrap();
        let fused = beam_search(&lp, &v, Some(&lm), &BeamConfig { beam: 16, alpha: 0.8, beta: 0.0 }).unwrap();
        assert_eq!(fused.text, "one");
    }
}
