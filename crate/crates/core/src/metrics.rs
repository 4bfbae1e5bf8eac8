//! Detection and correction metrics: token- and span-level P/R/F0.5,
//! sentence GLEU and Pearson correlation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::annotator::Edit;
use crate::error::{Error, Result};

pub const BETA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// `(1+β²)·P·R / (β²·P + R)`, or 0 when the denominator vanishes.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom > 0.0 {
        (1.0 + b2) * precision * recall / denom
    } else {
        0.0
    }
}

impl Prf {
    /// Precision and recall fall back to 0 when undefined.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self {
            precision,
            recall,
            f_beta: f_beta(precision, recall, BETA),
            tp,
            fp,
            fn_,
        }
    }

    pub fn merge(self, other: Prf) -> Prf {
        Prf::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }
}

/// Binarises `P(y=0)` into labels (0 = incorrect) with the `> 0.5` rule.
pub fn predict_labels(p_incorrect: &[f64]) -> Vec<u8> {
    p_incorrect.iter().map(|&p| u8::from(p <= 0.5)).collect()
}

/// Micro-averaged detection of the incorrect class (label 0) over sentences.
pub fn token_prf(predicted: &[Vec<u8>], gold: &[Vec<u8>]) -> Result<Prf> {
    if predicted.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predicted sentences vs {} gold",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (i, (p, g)) in predicted.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Contract(format!(
                "sentence {i}: {} predicted labels vs {} gold",
                p.len(),
                g.len()
            )));
        }
        for (&pl, &gl) in p.iter().zip(g) {
            match (pl == 0, gl == 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// Exact-match counts of system edits against one reference.
pub fn edit_counts(system: &[Edit], gold: &[Edit]) -> Prf {
    let mut pool: HashMap<&Edit, usize> = HashMap::new();
    for e in gold {
        *pool.entry(e).or_default() += 1;
    }
    let mut tp = 0;
    for e in system {
        if let Some(c) = pool.get_mut(e) {
            if *c > 0 {
                *c -= 1;
                tp += 1;
            }
        }
    }
    Prf::from_counts(tp, system.len() - tp, gold.len() - tp)
}

/// Counts for the reference that gives this sentence its best F0.5
/// (ties: more true positives, then fewer errors, then earlier reference).
pub fn best_reference_counts(system: &[Edit], references: &[Vec<Edit>]) -> Prf {
    references
        .iter()
        .map(|r| edit_counts(system, r))
        .reduce(|best, c| {
            let better = c.f_beta > best.f_beta
                || (c.f_beta == best.f_beta
                    && (c.tp > best.tp || (c.tp == best.tp && c.fp + c.fn_ < best.fp + best.fn_)));
            if better {
                c
            } else {
                best
            }
        })
        .unwrap_or_else(|| edit_counts(system, &[]))
}

/// Corpus span-level P/R/F0.5. `references[i]` holds one edit list per
/// reference correction of sentence `i`.
pub fn span_prf(system: &[Vec<Edit>], references: &[Vec<Vec<Edit>>]) -> Result<Prf> {
    if system.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} system sentences vs {} references",
            system.len(),
            references.len()
        )));
    }
    Ok(system
        .iter()
        .zip(references)
        .map(|(s, r)| best_reference_counts(s, r))
        .fold(Prf::default(), Prf::merge))
}

/// Sentence-level F0.5 of one hypothesis. Proposing no edit where none is
/// needed scores 1.
pub fn sentence_f05(system: &[Edit], references: &[Vec<Edit>]) -> f64 {
    if system.is_empty() && references.iter().any(Vec::is_empty) {
        return 1.0;
    }
    best_reference_counts(system, references).f_beta
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    counts
}

fn gleu_single<S: AsRef<str>>(candidate: &[S], source: &[S], reference: &[S], max_n: usize) -> f64 {
    let orders = max_n.min(candidate.len());
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let src = ngram_counts(source, n);
        let total: usize = cand.values().sum();
        let mut matches = 0isize;
        let mut penalty = 0isize;
        for (g, &c) in &cand {
            let r = refc.get(g).copied().unwrap_or(0);
            matches += c.min(r) as isize;
            // source n-grams the reference does not keep
            let s_only = src.get(g).copied().unwrap_or(0).saturating_sub(r);
            penalty += c.min(s_only) as isize;
        }
        let p = (matches - penalty).max(0) as f64 / total as f64;
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let bp = (1.0 - reference.len() as f64 / candidate.len() as f64).exp().min(1.0);
    bp * (log_sum / orders as f64).exp()
}

/// Sentence GLEU: source-penalised n-gram precision (orders `1..=max_n`,
/// capped by the candidate length) with a brevity penalty, averaged over
/// references.
pub fn gleu<S: AsRef<str>>(candidate: &[S], source: &[S], references: &[Vec<S>], max_n: usize) -> f64 {
    if candidate.is_empty() || references.is_empty() || max_n == 0 {
        return 0.0;
    }
    references
        .iter()
        .map(|r| gleu_single(candidate, source, r, max_n))
        .sum::<f64>()
        / references.len() as f64
}

/// Sample Pearson correlation.
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Mean of per-group correlations, skipping groups where it is undefined.
pub fn pcc_per_group(groups: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let vals: Vec<f64> = groups.iter().filter_map(|(x, y)| pcc(x, y).ok()).collect();
    if vals.is_empty() {
        return Err(Error::UndefinedCorrelation("no group has a defined correlation"));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator::extract_edits;
    use crate::textpipe::tokenize;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s, false)
    }

    #[test]
    fn token_prf_examples() {
        let gold = vec![vec![1, 0, 1, 0]];
        let p = token_prf(&gold, &gold).unwrap();
        assert_eq!((p.precision, p.recall, p.f_beta), (1.0, 1.0, 1.0));

        let none = token_prf(&[vec![1, 1, 1, 1]], &gold).unwrap();
        assert_eq!((none.precision, none.recall, none.f_beta), (0.0, 0.0, 0.0));

        let p = Prf::from_counts(3, 1, 7);
        assert_eq!(p.precision, 0.75);
        assert!((p.recall - 0.3).abs() < 1e-15);
        assert!((p.f_beta - 0.576923).abs() < 1e-6);

        assert!(token_prf(&[vec![1]], &[vec![1, 0]]).is_err());
        assert!(token_prf(&[vec![1]], &[]).is_err());
        assert_eq!(predict_labels(&[0.7, 0.5, 0.2]), vec![0, 1, 1]);
    }

    #[test]
    fn span_prf_examples() {
        let edits = extract_edits(&toks("a b c d"), &toks("a x c"));
        let p = span_prf(std::slice::from_ref(&edits), &[vec![edits.clone()]]).unwrap();
        assert_eq!(p.f_beta, 1.0);

        let p = span_prf(&[vec![]], &[vec![edits]]).unwrap();
        assert_eq!((p.precision, p.recall, p.f_beta), (0.0, 0.0, 0.0));

        let p = Prf::from_counts(2, 1, 2);
        assert!((p.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.recall, 0.5);
        assert!((p.f_beta - 0.625).abs() < 1e-12);
    }

    #[test]
    fn multi_reference_keeps_the_best() {
        let src = toks("he go to school");
        let sys = extract_edits(&src, &toks("he goes to school"));
        let r1 = extract_edits(&src, &toks("he went to school"));
        let r2 = extract_edits(&src, &toks("he goes to school"));
        let p = span_prf(std::slice::from_ref(&sys), &[vec![r1.clone(), r2]]).unwrap();
        assert_eq!(p.f_beta, 1.0);
        assert_eq!(sentence_f05(&sys, &[r1]), 0.0);
        assert_eq!(sentence_f05(&[], &[vec![]]), 1.0);
    }

    #[test]
    fn gleu_examples() {
        let s = toks("the cat sat on the mat");
        assert_eq!(gleu(&s, &s, std::slice::from_ref(&s), 4), 1.0);
        assert_eq!(gleu(&toks("x y z"), &s, std::slice::from_ref(&s), 4), 0.0);
        assert_eq!(gleu(&[] as &[String], &s, std::slice::from_ref(&s), 4), 0.0);

        // Hand count, orders 1..=2:
        //   unigrams: matches {a, b} = 2, source-only {x, c} hits {c} = 1 -> p1 = 1/3
        //   bigrams:  matches {a b} = 1, source-only {a x, x c} hits none   -> p2 = 1/2
        //   brevity penalty 1 (equal lengths) -> sqrt(1/6)
        let v = gleu(&toks("a b c"), &toks("a x c"), &[toks("a b d")], 2);
        assert!((v - (1.0f64 / 6.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pcc_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pcc(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pcc(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        assert!((pcc(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(pcc(&x, &[1.0; 4]), Err(Error::UndefinedCorrelation(_))));
        assert!(pcc(&[1.0], &[2.0]).is_err());
    }

    proptest! {
        #[test]
        fn f05_favours_precision(tp in 1usize..50, fp in 0usize..50, fn_ in 0usize..50) {
            let p = Prf::from_counts(tp, fp, fn_);
            let f1 = f_beta(p.precision, p.recall, 1.0);
            if p.precision > p.recall {
                prop_assert!(p.f_beta > f1);
            }
            if fp == fn_ {
                prop_assert!((p.f_beta - p.precision).abs() < 1e-12);
            }
            prop_assert!((0.0..=1.0).contains(&p.f_beta));
        }

        #[test]
        fn gleu_of_identity_is_one(words in proptest::collection::vec(0u8..6, 1..15)) {
            let s: Vec<String> = words.iter().map(|w| format!("w{w}")).collect();
            prop_assert!((gleu(&s, &s, std::slice::from_ref(&s), 4) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pcc_affine_invariance(xs in proptest::collection::vec(-10.0f64..10.0, 3..20), a in 0.1f64..5.0, b in -5.0f64..5.0) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * x + i as f64).collect();
            if let (Ok(r), Ok(r2)) = (pcc(&xs, &ys), pcc(&xs.iter().map(|x| a * x + b).collect::<Vec<_>>(), &ys)) {
                prop_assert!((r - r2).abs() < 1e-9);
            }
        }

        #[test]
        fn span_prf_swaps_precision_and_recall(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut sent = || (0..rng.random_range(1..8)).map(|_| format!("t{}", rng.random_range(0..5))).collect::<Vec<_>>();
            let (src, a, b) = (sent(), sent(), sent());
            let ea = extract_edits(&src, &a);
            let eb = extract_edits(&src, &b);
            let ab = span_prf(std::slice::from_ref(&ea), &[vec![eb.clone()]]).unwrap();
            let ba = span_prf(&[eb], &[vec![ea]]).unwrap();
            prop_assert_eq!(ab.precision, ba.recall);
            prop_assert_eq!(ab.recall, ba.precision);
        }
    }
}
