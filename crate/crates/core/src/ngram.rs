//! Word-level n-gram language model: interpolated absolute discounting,
//! stored and queried in ARPA backoff form.
//!
//! For a context `h` with counts `c(h, w)`, total `c(h)` and `n1(h)` distinct
//! followers, `P(w|h) = max(c(h,w) - D, 0)/c(h) + γ(h)·P(w|h')` with
//! `γ(h) = D·n1(h)/c(h)` and `h'` the context minus its oldest word. The
//! unigram level interpolates with a uniform distribution over the vocabulary
//! (excluding `<s>`, including `<unk>`). Writing `P(w|h)` for every seen
//! n-gram and `γ(h)` as the backoff weight reproduces the interpolated model
//! exactly under standard ARPA backoff lookup.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_DISCOUNT: f64 = 0.75;
const UNK_ID: u32 = 0;
const BOS_ID: u32 = 1;
const EOS_ID: u32 = 2;
/// ARPA convention for "impossible" (used for `P(<s>)`).
const LOG_ZERO: f64 = -99.0;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("language model config: {0}")]
    Config(String),
    #[error("ARPA line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

fn parse_err(line: usize, msg: impl Into<String>) -> LmError {
    LmError::Parse { line, msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    log10_prob: f64,
    log10_backoff: f64,
}

#[derive(Debug, Clone)]
pub struct NgramLm {
    order: usize,
    words: Vec<String>,
    ids: HashMap<String, u32>,
    /// `tables[n-1]` holds the n-grams.
    tables: Vec<HashMap<Vec<u32>, Entry>>,
}

/// Lowercased whitespace tokens.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(|w| w.to_lowercase()).collect()
}

impl NgramLm {
    fn empty(order: usize) -> Self {
        let mut lm = Self {
            order,
            words: Vec::new(),
            ids: HashMap::new(),
            tables: vec![HashMap::new(); order],
        };
        for w in [UNK, BOS, EOS] {
            lm.intern(w);
        }
        lm
    }

    fn intern(&mut self, w: &str) -> u32 {
        if let Some(&id) = self.ids.get(w) {
            return id;
        }
        let id = self.words.len() as u32;
        self.words.push(w.to_string());
        self.ids.insert(w.to_string(), id);
        id
    }

    /// Train on text lines with the default discount.
    pub fn train<S: AsRef<str>>(lines: &[S], order: usize) -> Result<Self, LmError> {
        Self::train_with_discount(lines, order, DEFAULT_DISCOUNT)
    }

    pub fn train_with_discount<S: AsRef<str>>(lines: &[S], order: usize, discount: f64) -> Result<Self, LmError> {
        if order == 0 {
            return Err(LmError::Config("order must be at least 1".into()));
        }
        if !(0.0 < discount && discount < 1.0) {
            return Err(LmError::Config(format!("discount {discount} outside (0, 1)")));
        }
        let mut lm = Self::empty(order);
        let mut counts: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
        let mut any = false;
        for line in lines {
            let words = tokenize(line.as_ref());
            if words.is_empty() {
                continue;
            }
            any = true;
            let mut toks = vec![BOS_ID];
            toks.extend(words.iter().map(|w| lm.intern(w)));
            toks.push(EOS_ID);
            for i in 1..toks.len() {
                for n in 1..=order.min(i + 1) {
                    *counts[n - 1].entry(toks[i + 1 - n..=i].to_vec()).or_insert(0) += 1;
                }
            }
        }
        if !any {
            return Err(LmError::Config("empty training corpus".into()));
        }

        // unigrams: discounted counts plus uniform share of the freed mass
        let total: u64 = counts[0].values().sum();
        let vocab = (lm.words.len() - 1) as f64;
        let freed = discount * counts[0].len() as f64 / total as f64;
        for id in 0..lm.words.len() as u32 {
            let log10_prob = if id == BOS_ID {
                LOG_ZERO
            } else {
                let c = counts[0].get(&vec![id]).copied().unwrap_or(0) as f64;
                (((c - discount).max(0.0) / total as f64) + freed / vocab).log10()
            };
            lm.tables[0].insert(vec![id], Entry { log10_prob, log10_backoff: 0.0 });
        }

        for n in 2..=order {
            let mut ctx: HashMap<&[u32], (u64, u64)> = HashMap::new();
            for (g, &c) in &counts[n - 1] {
                let e = ctx.entry(&g[..n - 1]).or_insert((0, 0));
                e.0 += c;
                e.1 += 1;
            }
            // backoff weights live on the context's own entry
            for (h, &(c, n1)) in &ctx {
                let gamma = discount * n1 as f64 / c as f64;
                let e = lm.tables[n - 2].get_mut(*h).expect("context is a counted lower-order n-gram");
                e.log10_backoff = gamma.log10();
            }
            let mut table = HashMap::with_capacity(counts[n - 1].len());
            for (g, &c) in &counts[n - 1] {
                let (ch, n1) = ctx[&g[..n - 1]];
                let gamma = discount * n1 as f64 / ch as f64;
                let lower = 10f64.powf(lm.log10_prob_ids(&g[1..n - 1], g[n - 1]));
                let p = (c as f64 - discount) / ch as f64 + gamma * lower;
                table.insert(
                    g.clone(),
                    Entry {
                        log10_prob: p.log10(),
                        log10_backoff: 0.0,
                    },
                );
            }
            lm.tables[n - 1] = table;
        }
        Ok(lm)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Word id with OOV words mapped to `<unk>`.
    pub fn word_id(&self, w: &str) -> u32 {
        self.ids.get(w).copied().unwrap_or(UNK_ID)
    }

    pub fn bos_id(&self) -> u32 {
        BOS_ID
    }

    pub fn eos_id(&self) -> u32 {
        EOS_ID
    }

    pub fn ngram_counts(&self) -> Vec<usize> {
        self.tables.iter().map(HashMap::len).collect()
    }

    /// `log10 P(w | history)` by ARPA backoff; only the last `order-1` history words matter.
    pub fn log10_prob_ids(&self, history: &[u32], w: u32) -> f64 {
        let keep = history.len().min(self.order - 1);
        let mut h = &history[history.len() - keep..];
        let mut bo = 0.0;
        let mut key = Vec::with_capacity(self.order);
        loop {
            key.clear();
            key.extend_from_slice(h);
            key.push(w);
            if let Some(e) = self.tables[h.len()].get(&key) {
                return bo + e.log10_prob;
            }
            if h.is_empty() {
                // ids outside the table only arise from foreign vocabularies
                return bo + self.tables[0][&vec![UNK_ID]].log10_prob;
            }
            if let Some(e) = self.tables[h.len() - 1].get(h) {
                bo += e.log10_backoff;
            }
            h = &h[1..];
        }
    }

    pub fn log10_prob(&self, history: &[&str], w: &str) -> f64 {
        let h: Vec<u32> = history.iter().map(|x| self.word_id(x)).collect();
        self.log10_prob_ids(&h, self.word_id(w))
    }

    /// log10 probability of a whole sentence, `<s>`/`</s>` included.
    pub fn score<S: AsRef<str>>(&self, words: &[S]) -> f64 {
        let mut hist = vec![BOS_ID];
        let mut total = 0.0;
        for w in words {
            let id = self.word_id(&w.as_ref().to_lowercase());
            total += self.log10_prob_ids(&hist, id);
            hist.push(id);
        }
        total + self.log10_prob_ids(&hist, EOS_ID)
    }

    pub fn score_text(&self, line: &str) -> f64 {
        self.score(&tokenize(line))
    }

    /// Per-token perplexity (`</s>` counted as a token) over non-empty lines.
    pub fn perplexity<S: AsRef<str>>(&self, lines: &[S]) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for line in lines {
            let toks = tokenize(line.as_ref());
            if toks.is_empty() {
                continue;
            }
            n += toks.len() + 1;
            total += self.score(&toks);
        }
        10f64.powf(-total / n.max(1) as f64)
    }

    pub fn write_arpa<W: Write>(&self, out: W) -> Result<(), LmError> {
        let mut out = BufWriter::new(out);
        writeln!(out, "\\data\\")?;
        for (n, t) in self.tables.iter().enumerate() {
            writeln!(out, "ngram {}={}", n + 1, t.len())?;
        }
        for (n, t) in self.tables.iter().enumerate() {
            writeln!(out)?;
            writeln!(out, "\\{}-grams:", n + 1)?;
            let mut keys: Vec<&Vec<u32>> = t.keys().collect();
            keys.sort();
            for k in keys {
                let e = t[k];
                let words: Vec<&str> = k.iter().map(|&i| self.words[i as usize].as_str()).collect();
                write!(out, "{:.7}\t{}", e.log10_prob, words.join(" "))?;
                if n + 1 < self.order && e.log10_backoff != 0.0 {
                    write!(out, "\t{:.7}", e.log10_backoff)?;
                }
                writeln!(out)?;
            }
        }
        writeln!(out)?;
        writeln!(out, "\\end\\")?;
        out.flush()?;
        Ok(())
    }

    pub fn export_arpa(&self, path: impl AsRef<Path>) -> Result<(), LmError> {
        self.write_arpa(std::fs::File::create(path)?)
    }

    pub fn import_arpa(path: impl AsRef<Path>) -> Result<Self, LmError> {
        Self::read_arpa(BufReader::new(std::fs::File::open(path)?))
    }

    pub fn read_arpa<R: BufRead>(input: R) -> Result<Self, LmError> {
        let mut declared: Vec<usize> = Vec::new();
        let mut lm: Option<Self> = None;
        let mut section: Option<usize> = None;
        let mut in_data = false;
        let mut ended = false;
        let mut last_line = 0;
        for (i, line) in input.lines().enumerate() {
            let ln = i + 1;
            last_line = ln;
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if ended {
                return Err(parse_err(ln, "content after \\end\\"));
            }
            if line == "\\data\\" {
                if in_data || lm.is_some() {
                    return Err(parse_err(ln, "duplicate \\data\\ section"));
                }
                in_data = true;
                continue;
            }
            if line == "\\end\\" {
                if let Some(n) = section {
                    check_count(&lm, &declared, n, ln)?;
                }
                ended = true;
                continue;
            }
            if let Some(rest) = line.strip_prefix('\\') {
                let n: usize = rest
                    .strip_suffix("-grams:")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| parse_err(ln, format!("unknown section header {line:?}")))?;
                if lm.is_none() {
                    if declared.is_empty() {
                        return Err(parse_err(ln, "n-gram section before \\data\\ counts"));
                    }
                    lm = Some(Self {
                        order: declared.len(),
                        words: Vec::new(),
                        ids: HashMap::new(),
                        tables: vec![HashMap::new(); declared.len()],
                    });
                }
                if let Some(prev) = section {
                    check_count(&lm, &declared, prev, ln)?;
                }
                let expected = section.map_or(1, |p| p + 1);
                if n != expected || n > declared.len() {
                    return Err(parse_err(ln, format!("expected section \\{expected}-grams:, found {line:?}")));
                }
                in_data = false;
                section = Some(n);
                continue;
            }
            if in_data {
                let spec = line.strip_prefix("ngram ").ok_or_else(|| parse_err(ln, format!("expected 'ngram N=count', found {line:?}")))?;
                let (n, c) = spec.split_once('=').ok_or_else(|| parse_err(ln, "missing '=' in count line"))?;
                let n: usize = n.trim().parse().map_err(|_| parse_err(ln, "bad n-gram order"))?;
                let c: usize = c.trim().parse().map_err(|_| parse_err(ln, "bad n-gram count"))?;
                if n != declared.len() + 1 {
                    return Err(parse_err(ln, format!("count for order {n} out of sequence")));
                }
                declared.push(c);
                continue;
            }
            let n = section.ok_or_else(|| parse_err(ln, "data outside any section"))?;
            let lm = lm.as_mut().expect("section implies model");
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != n + 1 && fields.len() != n + 2 {
                return Err(parse_err(ln, format!("expected {} or {} fields, found {}", n + 1, n + 2, fields.len())));
            }
            let log10_prob: f64 = fields[0].parse().map_err(|_| parse_err(ln, format!("bad probability {:?}", fields[0])))?;
            let log10_backoff: f64 = match fields.get(n + 1) {
                Some(b) => b.parse().map_err(|_| parse_err(ln, format!("bad backoff {b:?}")))?,
                None => 0.0,
            };
            let key: Vec<u32> = if n == 1 {
                vec![lm.intern(fields[1])]
            } else {
                fields[1..=n]
                    .iter()
                    .map(|w| lm.ids.get(*w).copied().ok_or_else(|| parse_err(ln, format!("word {w:?} missing from unigrams"))))
                    .collect::<Result<_, _>>()?
            };
            lm.tables[n - 1].insert(key, Entry { log10_prob, log10_backoff });
        }
        if !ended {
            return Err(parse_err(last_line, "missing \\end\\ marker"));
        }
        let mut lm = lm.ok_or_else(|| parse_err(last_line, "no n-gram sections"))?;
        if section != Some(declared.len()) {
            return Err(parse_err(last_line, format!("expected {} n-gram sections", declared.len())));
        }
        for w in [UNK, BOS, EOS] {
            if !lm.ids.contains_key(w) {
                return Err(parse_err(last_line, format!("unigram section lacks {w}")));
            }
        }
        // keep the conventional ids for the special tokens
        let mut order: Vec<String> = vec![UNK.into(), BOS.into(), EOS.into()];
        order.extend(lm.words.iter().filter(|w| ![UNK, BOS, EOS].contains(&w.as_str())).cloned());
        let remap: HashMap<u32, u32> = order.iter().enumerate().map(|(new, w)| (lm.ids[w], new as u32)).collect();
        lm.tables = lm
            .tables
            .into_iter()
            .map(|t| t.into_iter().map(|(k, e)| (k.iter().map(|i| remap[i]).collect(), e)).collect())
            .collect();
        lm.ids = order.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        lm.words = order;
        Ok(lm)
    }
}

fn check_count(lm: &Option<NgramLm>, declared: &[usize], n: usize, ln: usize) -> Result<(), LmError> {
    let found = lm.as_ref().map_or(0, |l| l.tables[n - 1].len());
    if found != declared[n - 1] {
        return Err(parse_err(ln, format!("header declares {} {n}-grams, section has {found}", declared[n - 1])));
    }
    Ok(())
}
