//! Tokenization, vocabulary and the token layout of a ⟨source, hypothesis⟩ pair.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

/// Default pair length: 120 tokens plus the three special markers.
pub const DEFAULT_MAX_LEN: usize = 123;

/// Whitespace tokenization.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    text.split_whitespace()
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    to_id: HashMap<String, usize>,
    tokens: Vec<String>,
    min_count: usize,
}

impl Vocabulary {
    /// Ids are assigned by descending frequency, ties broken lexicographically,
    /// starting after the reserved ids. Tokens seen fewer than `min_count`
    /// times are left out.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Self> {
        if corpus.iter().all(Vec::is_empty) {
            return Err(Error::Empty("vocabulary corpus"));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for tok in corpus.iter().flatten() {
            *counts.entry(tok.as_ref()).or_default() += 1;
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && !RESERVED.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Ok(Self::from_tokens(tokens, min_count))
    }

    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let to_id = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            to_id,
            tokens,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> usize {
        self.to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    /// `token<TAB>id` lines, one per entry, in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse = |msg: &str| Error::Parse {
                line: n + 1,
                msg: msg.to_string(),
            };
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| parse("expected token<TAB>id"))?;
            let id: usize = id.parse().map_err(|_| parse("bad id"))?;
            if id != tokens.len() {
                return Err(parse("ids must be contiguous from 0"));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Parse {
                line: 1,
                msg: "reserved tokens missing".into(),
            });
        }
        Ok(Self::from_tokens(tokens, 1))
    }
}

/// Token ids of `[CLS] source [SEP] hypothesis [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairLayout {
    /// Source token count (after truncation).
    pub m: usize,
    /// Hypothesis token count (after truncation).
    pub n: usize,
    pub ids: Vec<usize>,
}

impl PairLayout {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn source_sep(&self) -> usize {
        self.m + 1
    }

    pub fn final_sep(&self) -> usize {
        self.m + self.n + 2
    }

    /// Source tokens plus the source `[SEP]`: positions `1..=m+1`.
    pub fn source_range(&self) -> std::ops::Range<usize> {
        1..self.m + 2
    }

    /// Hypothesis tokens plus the final `[SEP]`: positions `m+2..=m+n+2`.
    pub fn hypothesis_range(&self) -> std::ops::Range<usize> {
        self.m + 2..self.m + self.n + 3
    }

    /// 0 for `[CLS]` through the source `[SEP]`, 1 afterwards.
    pub fn segments(&self) -> Vec<usize> {
        (0..self.len()).map(|p| usize::from(p > self.m + 1)).collect()
    }
}

/// Lays out a pair, truncating the hypothesis tail first and then the source
/// tail until the total (markers included) fits in `max_len`.
pub fn encode_pair<S: AsRef<str>>(
    source: &[S],
    hypothesis: &[S],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<PairLayout> {
    if max_len < 3 {
        return Err(Error::Contract(format!("max_len {max_len} cannot hold the markers")));
    }
    let budget = max_len - 3;
    let mut m = source.len();
    let mut n = hypothesis.len();
    if m + n > budget {
        n = budget.saturating_sub(m);
        m = m.min(budget);
        log::debug!(
            "truncated pair from ({}, {}) to ({m}, {n}) tokens",
            source.len(),
            hypothesis.len()
        );
    }
    let mut ids = Vec::with_capacity(m + n + 3);
    ids.push(CLS);
    ids.extend(vocab.encode(&source[..m]));
    ids.push(SEP);
    ids.extend(vocab.encode(&hypothesis[..n]));
    ids.push(SEP);
    Ok(PairLayout { m, n, ids })
}
