//! Word error rate.

use std::ops::AddAssign;

use serde::Serialize;

/// Lowercase, drop punctuation (hyphens survive only between word characters),
/// collapse whitespace. Applied to references and hypotheses alike.
pub fn normalize_text(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
        } else if c == '-' && i > 0 && i + 1 < chars.len() && chars[i - 1].is_alphanumeric() && chars[i + 1].is_alphanumeric() {
            out.push('-');
        } else {
            out.push(' ');
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct WerStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
}

impl WerStats {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// `(S+I+D)/N`; an empty reference yields 0 when there are no errors and
    /// `f64::INFINITY` otherwise.
    pub fn wer(&self) -> f64 {
        match (self.ref_words, self.errors()) {
            (0, 0) => 0.0,
            (0, _) => f64::INFINITY,
            (n, e) => e as f64 / n as f64,
        }
    }
}

impl AddAssign for WerStats {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
        self.ref_words += o.ref_words;
    }
}

/// Unit-cost alignment of token sequences. Among minimum-cost alignments,
/// fewer insertions win, then fewer deletions.
pub fn align<T: PartialEq>(r: &[T], h: &[T]) -> WerStats {
    // cell = (cost, insertions, deletions); tuples compare lexicographically
    let w = h.len() + 1;
    let mut dp = vec![(0usize, 0usize, 0usize); (r.len() + 1) * w];
    for (j, cell) in dp[..w].iter_mut().enumerate() {
        *cell = (j, j, 0);
    }
    for i in 1..=r.len() {
        dp[i * w] = (i, 0, i);
        for j in 1..=h.len() {
            let (c, ins, del) = dp[(i - 1) * w + j - 1];
            let diag = if r[i - 1] == h[j - 1] { (c, ins, del) } else { (c + 1, ins, del) };
            let (c, ins, del) = dp[i * w + j - 1];
            let left = (c + 1, ins + 1, del);
            let (c, ins, del) = dp[(i - 1) * w + j];
            let up = (c + 1, ins, del + 1);
            dp[i * w + j] = diag.min(left).min(up);
        }
    }
    let (cost, insertions, deletions) = dp[r.len() * w + h.len()];
    WerStats {
        substitutions: cost - insertions - deletions,
        insertions,
        deletions,
        ref_words: r.len(),
    }
}

/// WER statistics of normalized, whitespace-tokenized texts.
pub fn wer(reference: &str, hypothesis: &str) -> WerStats {
    let r = normalize_text(reference);
    let h = normalize_text(hypothesis);
    let rw: Vec<&str> = r.split_whitespace().collect();
    let hw: Vec<&str> = h.split_whitespace().collect();
    align(&rw, &hw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(wer("a b", "a b").wer(), 0.0);
        let s = wer("hello world", "hello word");
        assert_eq!((s.substitutions, s.wer()), (1, 0.5));
        let s = wer("a b c", "a x b c y");
        assert_eq!((s.insertions, s.substitutions, s.deletions), (2, 0, 0));
        assert!((s.wer() - 2.0 / 3.0).abs() < 1e-12);
        let s = wer("", "uh oh");
        assert_eq!((s.insertions, s.ref_words), (2, 0));
        assert!(s.wer().is_infinite());
        assert_eq!(wer("", "").wer(), 0.0);
    }

    #[test]
    fn tie_break_prefers_substitutions() {
        // "a b" vs "b c": cost 2 either as 2 subs or 1 del + 1 ins
        let s = wer("a b", "b c");
        assert_eq!((s.substitutions, s.insertions, s.deletions), (2, 0, 0));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_text("  Hello, World!  "), "hello world");
        assert_eq!(normalize_text("Air-France 12 -- go"), "air-france 12 go");
        assert_eq!(normalize_text("end-"), "end");
    }

    proptest! {
        #[test]
        fn insertions_can_push_wer_past_one(n in 1usize..5, extra in 1usize..8) {
            let r = vec!["x"; n].join(" ");
            let h = format!("{r} {}", vec!["y"; n + extra].join(" "));
            let s = wer(&r, &h);
            prop_assert!(s.wer() > 1.0);
        }
    }
}
