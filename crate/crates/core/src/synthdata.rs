//! Seeded synthetic corpus: grammatical template sentences, corrupted into
//! sources, with K beam-like hypotheses of graded quality.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::annotator::{apply_edits, edit_distance, extract_edits};
use crate::error::{Error, Result};
use crate::group::{Hypothesis, HypothesisGroup};

const NOUNS: &[(&str, &str)] = &[
    ("cat", "cats"),
    ("dog", "dogs"),
    ("student", "students"),
    ("teacher", "teachers"),
    ("girl", "girls"),
    ("boy", "boys"),
    ("child", "children"),
    ("man", "men"),
    ("woman", "women"),
    ("doctor", "doctors"),
    ("farmer", "farmers"),
    ("artist", "artists"),
    ("friend", "friends"),
    ("neighbor", "neighbors"),
    ("apple", "apples"),
    ("orange", "oranges"),
    ("egg", "eggs"),
    ("umbrella", "umbrellas"),
    ("elephant", "elephants"),
    ("owl", "owls"),
    ("book", "books"),
    ("letter", "letters"),
    ("car", "cars"),
    ("box", "boxes"),
    ("bag", "bags"),
    ("ball", "balls"),
    ("picture", "pictures"),
    ("song", "songs"),
    ("idea", "ideas"),
    ("engineer", "engineers"),
];

const PLACES: &[&str] = &[
    "park", "garden", "kitchen", "school", "office", "river", "house", "library", "market", "station",
];

const ADJECTIVES: &[&str] = &[
    "big", "small", "old", "young", "red", "happy", "angry", "quiet", "tall", "new", "ugly", "clever", "lazy", "busy",
];

/// `(base, third person singular, past)`.
const TRANSITIVE: &[(&str, &str, &str)] = &[
    ("see", "sees", "saw"),
    ("like", "likes", "liked"),
    ("eat", "eats", "ate"),
    ("read", "reads", "read"),
    ("want", "wants", "wanted"),
    ("find", "finds", "found"),
    ("carry", "carries", "carried"),
    ("watch", "watches", "watched"),
    ("help", "helps", "helped"),
    ("buy", "buys", "bought"),
    ("paint", "paints", "painted"),
    ("clean", "cleans", "cleaned"),
    ("open", "opens", "opened"),
    ("visit", "visits", "visited"),
    ("follow", "follows", "followed"),
    ("draw", "draws", "drew"),
    ("write", "writes", "wrote"),
    ("take", "takes", "took"),
    ("bring", "brings", "brought"),
    ("hold", "holds", "held"),
];

const INTRANSITIVE: &[(&str, &str, &str)] = &[
    ("sleep", "sleeps", "slept"),
    ("run", "runs", "ran"),
    ("walk", "walks", "walked"),
    ("sit", "sits", "sat"),
    ("wait", "waits", "waited"),
    ("arrive", "arrives", "arrived"),
    ("laugh", "laughs", "laughed"),
    ("work", "works", "worked"),
    ("play", "plays", "played"),
    ("suffer", "suffers", "suffered"),
];

const PREPOSITIONS: &[&str] = &["in", "on", "at", "near", "behind", "under"];

/// `(subject, object, third person singular)`.
const PRONOUNS: &[(&str, &str, bool)] = &[
    ("I", "me", false),
    ("you", "you", false),
    ("he", "him", true),
    ("she", "her", true),
    ("it", "it", true),
    ("we", "us", false),
    ("they", "them", false),
];

const SINGULAR_DETS: &[&str] = &["the", "a", "this", "my", "his", "her", "our", "their"];
const PLURAL_DETS: &[&str] = &["the", "these", "some", "my", "his", "her", "our", "their"];

/// Function words used for spurious insertions.
const INSERTABLE: &[&str] = &["the", "a", "to", "of", "is", "very", "and"];

const ARTICLES: &[&str] = &["a", "an", "the"];

fn starts_with_vowel(word: &str) -> bool {
    word.starts_with(['a', 'e', 'i', 'o', 'u'])
}

/// Generator of grammatical sentences over a fixed toy vocabulary.
#[derive(Debug, Clone, Copy, Default)]
pub struct Grammar;

impl Grammar {
    /// Every token the grammar, the lexicon and insertions can produce.
    pub fn vocabulary(&self) -> BTreeSet<String> {
        let mut v: BTreeSet<String> = BTreeSet::new();
        for (s, p) in NOUNS {
            v.insert(s.to_string());
            v.insert(p.to_string());
        }
        for (a, b, c) in TRANSITIVE.iter().chain(INTRANSITIVE) {
            v.extend([a, b, c].map(|w| w.to_string()));
        }
        for (s, o, _) in PRONOUNS {
            v.insert(s.to_string());
            v.insert(o.to_string());
        }
        let lists = [PLACES, ADJECTIVES, PREPOSITIONS, SINGULAR_DETS, PLURAL_DETS, INSERTABLE, ARTICLES];
        for w in lists.iter().flat_map(|l| l.iter()) {
            v.insert(w.to_string());
        }
        v.extend(["yesterday", "every", "day", "often", "."].map(String::from));
        v
    }

    fn noun_phrase<R: Rng>(&self, rng: &mut R, head: &str, plural: bool, out: &mut Vec<String>) {
        let det = *if plural { PLURAL_DETS } else { SINGULAR_DETS }.choose(rng).expect("non-empty");
        let adj = rng.random_bool(0.4).then(|| *ADJECTIVES.choose(rng).expect("non-empty"));
        let next = adj.unwrap_or(head);
        if det == "a" && starts_with_vowel(next) {
            out.push("an".into());
        } else {
            out.push(det.into());
        }
        if let Some(a) = adj {
            out.push(a.into());
        }
        out.push(head.into());
    }

    /// One sentence with subject-verb, article and tense agreement.
    pub fn sentence<R: Rng>(&self, rng: &mut R) -> Vec<String> {
        let mut out = Vec::new();
        let third_singular = if rng.random_bool(0.3) {
            let (s, _, third) = *PRONOUNS.choose(rng).expect("non-empty");
            out.push(s.into());
            third
        } else {
            let (sg, pl) = *NOUNS.choose(rng).expect("non-empty");
            let plural = rng.random_bool(0.4);
            self.noun_phrase(rng, if plural { pl } else { sg }, plural, &mut out);
            !plural
        };
        let past = rng.random_bool(0.4);
        let transitive = rng.random_bool(0.6);
        let (base, third, past_form) = *if transitive { TRANSITIVE } else { INTRANSITIVE }
            .choose(rng)
            .expect("non-empty");
        out.push(
            if past {
                past_form
            } else if third_singular {
                third
            } else {
                base
            }
            .into(),
        );
        if transitive {
            if rng.random_bool(0.2) {
                out.push(PRONOUNS.choose(rng).expect("non-empty").1.into());
            } else {
                let (sg, pl) = *NOUNS.choose(rng).expect("non-empty");
                let plural = rng.random_bool(0.4);
                self.noun_phrase(rng, if plural { pl } else { sg }, plural, &mut out);
            }
        }
        if !transitive || rng.random_bool(0.4) {
            out.push(PREPOSITIONS.choose(rng).expect("non-empty").to_string());
            let place = *PLACES.choose(rng).expect("non-empty");
            self.noun_phrase(rng, place, false, &mut out);
        }
        if past && rng.random_bool(0.5) {
            out.push("yesterday".into());
        } else if !past && rng.random_bool(0.3) {
            if rng.random_bool(0.5) {
                out.extend(["every", "day"].map(String::from));
            } else {
                out.push("often".into());
            }
        }
        out.push(".".into());
        out
    }
}

/// Plausible replacements for each token: article swaps, number and verb
/// form toggles, preposition and pronoun case confusions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionLexicon(pub BTreeMap<String, Vec<String>>);

impl ConfusionLexicon {
    fn link(map: &mut BTreeMap<String, BTreeSet<String>>, group: &[&str]) {
        for a in group {
            for b in group {
                if a != b {
                    map.entry(a.to_string()).or_default().insert(b.to_string());
                }
            }
        }
    }

    pub fn morphological() -> Self {
        let mut map = BTreeMap::new();
        Self::link(&mut map, ARTICLES);
        Self::link(&mut map, &["this", "these"]);
        Self::link(&mut map, PREPOSITIONS);
        for (s, p) in NOUNS {
            Self::link(&mut map, &[s, p]);
        }
        for (a, b, c) in TRANSITIVE.iter().chain(INTRANSITIVE) {
            Self::link(&mut map, &[a, b, c]);
        }
        for (s, o, _) in PRONOUNS {
            Self::link(&mut map, &[s, o]);
        }
        Self(map.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect())
    }

    pub fn alternatives(&self, token: &str) -> &[String] {
        self.0.get(token).map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Default for ConfusionLexicon {
    fn default() -> Self {
        Self::morphological()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionConfig {
    /// Per-token probability of corruption.
    pub rate: f64,
    pub p_delete: f64,
    pub p_insert: f64,
    pub p_replace: f64,
    pub p_swap: f64,
    pub lexicon: ConfusionLexicon,
    /// Hypotheses per group.
    pub k: usize,
    /// Standard deviation of the noise added to pseudo decoder scores.
    pub score_noise: f64,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            p_delete: 0.15,
            p_insert: 0.15,
            p_replace: 0.6,
            p_swap: 0.1,
            lexicon: ConfusionLexicon::default(),
            k: 5,
            score_noise: 1.0,
            seed: 23,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!("corruption rate {} outside [0, 1]", self.rate)));
        }
        let mix = [self.p_delete, self.p_insert, self.p_replace, self.p_swap];
        if mix.iter().any(|p| *p < 0.0) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("operation mix {mix:?} must be non-negative and sum to 1")));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.score_noise >= 0.0) {
            return Err(Error::Config("score noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Delete,
    Insert,
    Replace,
    Swap,
}

fn pick_op<R: Rng>(config: &CorruptionConfig, rng: &mut R) -> Op {
    let u: f64 = rng.random();
    if u < config.p_delete {
        Op::Delete
    } else if u < config.p_delete + config.p_insert {
        Op::Insert
    } else if u < config.p_delete + config.p_insert + config.p_replace {
        Op::Replace
    } else {
        Op::Swap
    }
}

/// A different token: a lexicon alternative when one exists, otherwise a
/// function word.
fn replacement<R: Rng>(token: &str, lexicon: &ConfusionLexicon, rng: &mut R) -> String {
    if let Some(alt) = lexicon.alternatives(token).choose(rng) {
        return alt.clone();
    }
    loop {
        let w = *INSERTABLE.choose(rng).expect("non-empty");
        if w != token {
            return w.to_string();
        }
    }
}

/// Corrupts `gold`, returning the source and the number of positions
/// selected for corruption.
pub fn corrupt_traced<R: Rng>(gold: &[String], config: &CorruptionConfig, rng: &mut R) -> (Vec<String>, usize) {
    let n = gold.len();
    let flags: Vec<bool> = (0..n).map(|_| rng.random_bool(config.rate)).collect();
    let corrupted = flags.iter().filter(|&&f| f).count();
    let mut out = Vec::with_capacity(n + 2);
    let mut i = 0;
    while i < n {
        if !flags[i] {
            out.push(gold[i].clone());
            i += 1;
            continue;
        }
        match pick_op(config, rng) {
            Op::Delete => {}
            Op::Insert => {
                out.push(gold[i].clone());
                out.push(INSERTABLE.choose(rng).expect("non-empty").to_string());
            }
            Op::Replace => out.push(replacement(&gold[i], &config.lexicon, rng)),
            Op::Swap if i + 1 < n && gold[i + 1] != gold[i] => {
                out.push(gold[i + 1].clone());
                out.push(gold[i].clone());
                i += 1;
            }
            Op::Swap => out.push(replacement(&gold[i], &config.lexicon, rng)),
        }
        i += 1;
    }
    if corrupted > 0 && (out == gold || out.is_empty()) {
        if out.is_empty() {
            out.push(gold[0].clone());
        }
        let pos = rng.random_range(0..out.len());
        out[pos] = replacement(&out[pos], &config.lexicon, rng);
    }
    (out, corrupted)
}

pub fn corrupt<R: Rng>(gold: &[String], config: &CorruptionConfig, rng: &mut R) -> Vec<String> {
    corrupt_traced(gold, config, rng).0
}

/// K hypotheses for `source`, best pseudo decoder score first. Hypothesis
/// `r` repairs each source-to-gold edit with a probability falling from 0.9
/// to 0.3 across ranks and picks up a spurious replacement with a
/// probability rising from 0.1 to 0.4. Scores are `-distance + noise`.
pub fn make_hypotheses<R: Rng>(
    source: &[String],
    gold: &[String],
    config: &CorruptionConfig,
    rng: &mut R,
) -> Result<Vec<Hypothesis>> {
    let k = config.k;
    let noise = Normal::new(0.0, config.score_noise).map_err(|e| Error::Config(e.to_string()))?;
    let edits = extract_edits(source, gold);
    let base = edit_distance(source, gold);
    let mut candidates: Vec<Vec<String>> = Vec::with_capacity(k);
    if edits.is_empty() {
        candidates.resize(k, gold.to_vec());
    } else {
        for r in 0..k {
            let t = if k == 1 { 0.0 } else { r as f64 / (k - 1) as f64 };
            let subset: Vec<_> = edits.iter().filter(|_| rng.random_bool(0.9 - 0.6 * t)).cloned().collect();
            let mut hyp = apply_edits(source, &subset)?;
            if !hyp.is_empty() && rng.random_bool(0.1 + 0.3 * t) {
                let pos = rng.random_range(0..hyp.len());
                hyp[pos] = replacement(&hyp[pos], &config.lexicon, rng);
            }
            candidates.push(hyp);
        }
        if candidates.iter().all(|c| edit_distance(c, gold) >= base) {
            let e = edits.choose(rng).expect("non-empty").clone();
            candidates[0] = apply_edits(source, &[e])?;
        }
    }
    let mut scored: Vec<(f64, Vec<String>)> = candidates
        .into_iter()
        .map(|c| (noise.sample(rng) - edit_distance(&c, gold) as f64, c))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(scored
        .into_iter()
        .map(|(s, tokens)| Hypothesis {
            tokens,
            model_score: Some(s),
        })
        .collect())
}

/// One generated example.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthExample {
    pub gold: Vec<String>,
    pub group: HypothesisGroup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub groups: usize,
    pub corruption: CorruptionConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            groups: 1000,
            corruption: CorruptionConfig::default(),
        }
    }
}

/// Example `index` of the corpus. Each example draws from its own ChaCha
/// stream so that any subset can be regenerated independently.
pub fn example(index: u64, config: &CorruptionConfig) -> Result<SynthExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let gold = Grammar.sentence(&mut rng);
    let source = corrupt(&gold, config, &mut rng);
    let hypotheses = make_hypotheses(&source, &gold, config, &mut rng)?;
    Ok(SynthExample {
        gold,
        group: HypothesisGroup::new(source, hypotheses)?,
    })
}

pub fn generate(config: &SynthConfig) -> Result<Vec<SynthExample>> {
    config.corruption.validate()?;
    (0..config.groups as u64).map(|i| example(i, &config.corruption)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Two-row Levenshtein distance over tokens.
    fn lev(a: &[String], b: &[String]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for (i, x) in a.iter().enumerate() {
            let mut cur = vec![i + 1; b.len() + 1];
            for (j, y) in b.iter().enumerate() {
                cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
            }
            prev = cur;
        }
        prev[b.len()]
    }

    #[test]
    fn vocabulary_is_about_two_hundred() {
        let vocab = Grammar.vocabulary();
        assert!((180..=230).contains(&vocab.len()), "{}", vocab.len());
        let mut r = rng(1);
        for _ in 0..500 {
            for t in Grammar.sentence(&mut r) {
                assert!(vocab.contains(&t), "{t}");
            }
        }
        for (k, alts) in &ConfusionLexicon::default().0 {
            assert!(vocab.contains(k));
            assert!(alts.iter().all(|a| vocab.contains(a) && a != k));
        }
    }

    #[test]
    fn sentences_respect_agreement() {
        let mut r = rng(2);
        for _ in 0..500 {
            let s = Grammar.sentence(&mut r);
            assert_eq!(s.last().map(String::as_str), Some("."));
            for w in s.windows(2) {
                if w[0] == "a" {
                    assert!(!starts_with_vowel(&w[1]), "{s:?}");
                }
                if w[0] == "an" {
                    assert!(starts_with_vowel(&w[1]), "{s:?}");
                }
            }
            if s.contains(&"yesterday".to_string()) {
                assert!(TRANSITIVE.iter().chain(INTRANSITIVE).any(|v| s.contains(&v.2.to_string())));
            }
        }
    }

    #[test]
    fn zero_rate_is_identity() {
        let config = CorruptionConfig {
            rate: 0.0,
            ..CorruptionConfig::default()
        };
        let mut r = rng(3);
        for _ in 0..100 {
            let g = Grammar.sentence(&mut r);
            assert_eq!(corrupt(&g, &config, &mut r), g);
        }
    }

    #[test]
    fn full_rate_always_changes_the_sentence() {
        let config = CorruptionConfig {
            rate: 1.0,
            ..CorruptionConfig::default()
        };
        let mut r = rng(4);
        for _ in 0..500 {
            let g = Grammar.sentence(&mut r);
            assert_ne!(corrupt(&g, &config, &mut r), g);
        }
        let one = vec!["cat".to_string()];
        for _ in 0..100 {
            assert_ne!(corrupt(&one, &config, &mut r), one);
        }
    }

    #[test]
    fn corruption_is_seeded() {
        let config = SynthConfig {
            groups: 50,
            corruption: CorruptionConfig::default(),
        };
        assert_eq!(generate(&config).unwrap(), generate(&config).unwrap());
        assert_eq!(example(7, &config.corruption).unwrap(), generate(&config).unwrap()[7]);
    }

    #[test]
    fn empirical_rate_matches() {
        let config = CorruptionConfig {
            rate: 0.3,
            ..CorruptionConfig::default()
        };
        let mut r = rng(5);
        let (mut tokens, mut hits) = (0, 0);
        while tokens < 10_000 {
            let g = Grammar.sentence(&mut r);
            let (_, c) = corrupt_traced(&g, &config, &mut r);
            tokens += g.len();
            hits += c;
        }
        let frac = hits as f64 / tokens as f64;
        assert!((frac - 0.3).abs() < 0.02, "{frac}");
    }

    #[test]
    fn clean_source_yields_gold_hypotheses() {
        let config = CorruptionConfig::default();
        let mut r = rng(6);
        let g = Grammar.sentence(&mut r);
        let hyps = make_hypotheses(&g, &g, &config, &mut r).unwrap();
        assert_eq!(hyps.len(), config.k);
        assert!(hyps.iter().all(|h| h.tokens == g));
    }

    #[test]
    fn hypotheses_are_graded_and_one_improves() {
        let config = CorruptionConfig {
            rate: 0.25,
            ..CorruptionConfig::default()
        };
        let mut rank_dist = vec![0usize; config.k];
        let mut counted = 0;
        for i in 0..1000 {
            let ex = example(i, &config).unwrap();
            let hyps = &ex.group.hypotheses;
            let scores: Vec<f64> = hyps.iter().map(|h| h.model_score.unwrap()).collect();
            assert!(scores.windows(2).all(|w| w[0] >= w[1]));
            let base = lev(&ex.group.source, &ex.gold);
            if base == 0 {
                continue;
            }
            counted += 1;
            assert!(hyps.iter().any(|h| lev(&h.tokens, &ex.gold) < base), "group {i}");
            for (r, h) in hyps.iter().enumerate() {
                rank_dist[r] += lev(&h.tokens, &ex.gold);
            }
        }
        assert!(counted > 500);
        assert!(rank_dist.windows(2).all(|w| w[0] <= w[1]), "{rank_dist:?}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = CorruptionConfig::default();
        c.p_swap = 0.5;
        assert!(c.validate().is_err());
        let c = CorruptionConfig {
            k: 0,
            ..CorruptionConfig::default()
        };
        assert!(c.validate().is_err());
        let c = CorruptionConfig {
            rate: 1.5,
            ..CorruptionConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
