//! Span edits between a sentence and its correction, and the per-token
//! quality labels derived from them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditKind {
    Delete,
    Insert,
    Replace,
}

impl fmt::Display for EditKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EditKind::Delete => "Delete",
            EditKind::Insert => "Insert",
            EditKind::Replace => "Replace",
        })
    }
}

impl FromStr for EditKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Delete" => Ok(EditKind::Delete),
            "Insert" => Ok(EditKind::Insert),
            "Replace" => Ok(EditKind::Replace),
            other => Err(Error::Parse {
                line: 0,
                msg: format!("unknown edit kind `{other}`"),
            }),
        }
    }
}

/// One span edit over the labeled sentence. `start..end` is half-open;
/// inserts have `start == end`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edit {
    pub kind: EditKind,
    pub start: usize,
    pub end: usize,
    pub replacement: Vec<String>,
}

impl Edit {
    /// Unit cost of the edit under an optimal alignment of its span.
    pub fn cost(&self) -> usize {
        (self.end - self.start).max(self.replacement.len())
    }

    /// `kind<TAB>start<TAB>end<TAB>replacement`
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.kind,
            self.start,
            self.end,
            self.replacement.join(" ")
        )
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Parse {
            line: 0,
            msg: format!("{msg}: `{line}`"),
        };
        let mut fields = line.splitn(4, '\t');
        let kind: EditKind = fields.next().ok_or_else(|| bad("missing kind"))?.parse()?;
        let start = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad start"))?;
        let end = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad end"))?;
        let replacement = fields
            .next()
            .unwrap_or("")
            .split_whitespace()
            .map(String::from)
            .collect();
        if start > end {
            return Err(bad("start after end"));
        }
        Ok(Self {
            kind,
            start,
            end,
            replacement,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Match,
    Replace,
    Delete,
    Insert,
}

/// Minimal unit-cost token edits turning `sent` into `gold`.
///
/// Among equally cheap alignments the backtrace prefers match, then replace,
/// then delete, then insert. Runs of non-match steps between two matches are
/// merged into a single span edit.
pub fn extract_edits<S: AsRef<str>>(sent: &[S], gold: &[S]) -> Vec<Edit> {
    let (n, m) = (sent.len(), gold.len());
    let w = m + 1;
    let mut dist = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dist[i * w] = i;
    }
    for j in 0..=m {
        dist[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = usize::from(sent[i - 1].as_ref() != gold[j - 1].as_ref());
            dist[i * w + j] = (dist[(i - 1) * w + j - 1] + sub)
                .min(dist[(i - 1) * w + j] + 1)
                .min(dist[i * w + j - 1] + 1);
        }
    }

    let mut steps = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[i * w + j];
        let step = if i > 0 && j > 0 && sent[i - 1].as_ref() == gold[j - 1].as_ref() && dist[(i - 1) * w + j - 1] == here {
            Step::Match
        } else if i > 0 && j > 0 && dist[(i - 1) * w + j - 1] + 1 == here {
            Step::Replace
        } else if i > 0 && dist[(i - 1) * w + j] + 1 == here {
            Step::Delete
        } else {
            Step::Insert
        };
        match step {
            Step::Match | Step::Replace => {
                i -= 1;
                j -= 1;
            }
            Step::Delete => i -= 1,
            Step::Insert => j -= 1,
        }
        steps.push(step);
    }
    steps.reverse();

    let mut edits = Vec::new();
    let (mut i, mut j) = (0, 0);
    let mut open: Option<(usize, usize)> = None;
    let close = |open: &mut Option<(usize, usize)>, i: usize, j: usize, edits: &mut Vec<Edit>| {
        if let Some((i0, j0)) = open.take() {
            let kind = if i0 == i {
                EditKind::Insert
            } else if j0 == j {
                EditKind::Delete
            } else {
                EditKind::Replace
            };
            edits.push(Edit {
                kind,
                start: i0,
                end: i,
                replacement: gold[j0..j].iter().map(|t| t.as_ref().to_string()).collect(),
            });
        }
    };
    for step in steps {
        if step == Step::Match {
            close(&mut open, i, j, &mut edits);
        } else if open.is_none() {
            open = Some((i, j));
        }
        match step {
            Step::Match | Step::Replace => {
                i += 1;
                j += 1;
            }
            Step::Delete => i += 1,
            Step::Insert => j += 1,
        }
    }
    close(&mut open, i, j, &mut edits);
    edits
}

/// Unit-cost token edit distance, as the total cost of the extracted edits.
pub fn edit_distance<S: AsRef<str>>(sent: &[S], gold: &[S]) -> usize {
    extract_edits(sent, gold).iter().map(Edit::cost).sum()
}

/// Applies sorted, non-overlapping edits to `sent`.
pub fn apply_edits<S: AsRef<str>>(sent: &[S], edits: &[Edit]) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(sent.len());
    let mut cursor = 0;
    for e in edits {
        if e.start < cursor || e.end > sent.len() || e.start > e.end {
            return Err(Error::Contract(format!(
                "edit {}..{} overlaps or exceeds sentence of {}",
                e.start,
                e.end,
                sent.len()
            )));
        }
        out.extend(sent[cursor..e.start].iter().map(|t| t.as_ref().to_string()));
        out.extend(e.replacement.iter().cloned());
        cursor = e.end;
    }
    out.extend(sent[cursor..].iter().map(|t| t.as_ref().to_string()));
    Ok(out)
}

/// Per-token labels: 1 = correct, 0 = incorrect. One slot per token plus a
/// final slot for the sentence-end `[SEP]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLabelSeq(pub Vec<u8>);

impl TokenLabelSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn all_correct(&self) -> bool {
        self.0.iter().all(|&l| l == 1)
    }
}

/// Labels implied by `edits` over a sentence of `len` tokens.
pub fn labels_from_edits(len: usize, edits: &[Edit]) -> TokenLabelSeq {
    let mut labels = vec![1u8; len + 1];
    for e in edits {
        match e.kind {
            EditKind::Insert => labels[e.start] = 0,
            EditKind::Delete | EditKind::Replace => {
                labels[e.start..e.end].fill(0);
            }
        }
    }
    TokenLabelSeq(labels)
}

pub fn label_tokens<S: AsRef<str>>(sent: &[S], gold: &[S]) -> TokenLabelSeq {
    labels_from_edits(sent.len(), &extract_edits(sent, gold))
}

/// Source and hypothesis labels against the same gold correction.
pub fn label_pair<S: AsRef<str>>(
    source: &[S],
    hypothesis: &[S],
    gold: &[S],
) -> (TokenLabelSeq, TokenLabelSeq) {
    (label_tokens(source, gold), label_tokens(hypothesis, gold))
}
