//! Subcommand implementations and the JSON-lines record formats.
//!
//! Each command reads whole inputs, returns its outputs as strings and
//! counts record-level failures so the binary can choose an exit code.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::annotator::{extract_edits, label_tokens, Edit, TokenLabelSeq};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::group::{Hypothesis, HypothesisGroup};
use crate::metrics::{gleu, pcc, pcc_per_group, predict_labels, sentence_f05, span_prf, token_prf};
use crate::model::{Model, ModelConfig};
use crate::reranker::{build_features, coordinate_ascent, objective, rank, RankGroup, RankObjective, RankerWeights};
use crate::synthdata::generate;
use crate::textpipe::{tokenize, Vocabulary};
use crate::trainer::{grad_check, label_group, perturb, GradCheckReport, LabeledGroup, LogRecord, MaskPolicy, TrainState};

/// One reference or several.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    One(String),
    Many(Vec<String>),
}

impl Gold {
    pub fn texts(&self) -> Vec<&str> {
        match self {
            Gold::One(s) => vec![s.as_str()],
            Gold::Many(v) => v.iter().map(String::as_str).collect(),
        }
    }
}

/// A hypothesis line. Score fields appear once a file has been scored or
/// reranked.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HypRecord {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncated: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ged: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gqe: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qe: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_score: Option<f64>,
    /// Position in the original beam, set by reranking.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beam_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Gold>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    pub hypotheses: Vec<HypRecord>,
}

impl DatasetRecord {
    pub fn group(&self, lowercase: bool) -> Result<HypothesisGroup> {
        HypothesisGroup::new(
            tokenize(&self.source, lowercase),
            self.hypotheses
                .iter()
                .map(|h| Hypothesis {
                    tokens: tokenize(&h.text, lowercase),
                    model_score: h.model_score,
                })
                .collect(),
        )
    }

    pub fn references(&self, lowercase: bool) -> Option<Vec<Vec<String>>> {
        self.gold
            .as_ref()
            .map(|g| g.texts().into_iter().map(|t| tokenize(t, lowercase)).collect())
    }
}

/// Parses JSON lines, skipping blank lines. A malformed line is fatal.
pub fn read_records<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<(usize, T)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|r| (i + 1, r))
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })
        })
        .collect()
}

fn to_lines<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Output plus the number of records that could not be processed.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub text: String,
    pub failures: usize,
}

fn record_error(line: usize, msg: impl std::fmt::Display) {
    log::error!("line {line}: {msg}");
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedHypothesis {
    pub text: String,
    pub labels: Vec<u8>,
    pub edits: Vec<Edit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedRecord {
    pub source: String,
    pub gold: Gold,
    pub source_labels: Vec<u8>,
    pub source_edits: Vec<Edit>,
    pub hypotheses: Vec<AnnotatedHypothesis>,
}

/// Token labels and edits of each source and hypothesis against the first
/// reference.
pub fn annotate(input: &str, config: &RunConfig) -> Result<Output> {
    let lc = config.model.lowercase;
    let mut out = Vec::new();
    let mut failures = 0;
    for (line, rec) in read_records::<DatasetRecord>(input)? {
        let Some(gold) = rec.gold.clone() else {
            record_error(line, "gold correction missing");
            failures += 1;
            continue;
        };
        let Some(reference) = rec.references(lc).and_then(|r| r.into_iter().next()) else {
            record_error(line, "empty reference list");
            failures += 1;
            continue;
        };
        let source = tokenize(&rec.source, lc);
        let source_edits = extract_edits(&source, &reference);
        let hypotheses = rec
            .hypotheses
            .iter()
            .map(|h| {
                let toks = tokenize(&h.text, lc);
                AnnotatedHypothesis {
                    text: h.text.clone(),
                    labels: label_tokens(&toks, &reference).0,
                    edits: extract_edits(&toks, &reference),
                }
            })
            .collect();
        out.push(AnnotatedRecord {
            source: rec.source,
            gold,
            source_labels: label_tokens(&source, &reference).0,
            source_edits,
            hypotheses,
        });
    }
    Ok(Output {
        text: to_lines(&out)?,
        failures,
    })
}

/// A seeded synthetic dataset.
pub fn synth(config: &RunConfig) -> Result<String> {
    let records: Vec<DatasetRecord> = generate(&config.synth)?
        .into_iter()
        .map(|ex| DatasetRecord {
            source: ex.group.source.join(" "),
            gold: Some(Gold::One(ex.gold.join(" "))),
            gamma: None,
            hypotheses: ex
                .group
                .hypotheses
                .into_iter()
                .map(|h| HypRecord {
                    text: h.tokens.join(" "),
                    model_score: h.model_score,
                    ..HypRecord::default()
                })
                .collect(),
        })
        .collect();
    to_lines(&records)
}

/// Labeled groups from records with gold; records without are failures.
pub fn labeled_groups(input: &str, lowercase: bool) -> Result<(Vec<LabeledGroup>, usize)> {
    let mut groups = Vec::new();
    let mut failures = 0;
    for (line, rec) in read_records::<DatasetRecord>(input)? {
        let refs = match rec.references(lowercase) {
            Some(r) if !r.is_empty() => r,
            _ => {
                record_error(line, "gold correction missing");
                failures += 1;
                continue;
            }
        };
        match rec.group(lowercase).and_then(|g| label_group(g, &refs)) {
            Ok(g) => groups.push(g),
            Err(e) => {
                record_error(line, e);
                failures += 1;
            }
        }
    }
    Ok((groups, failures))
}

/// Vocabulary over every source, hypothesis and reference in training data.
pub fn build_vocabulary(groups: &[LabeledGroup], min_count: usize) -> Result<Vocabulary> {
    let mut corpus: Vec<Vec<String>> = Vec::new();
    for g in groups {
        corpus.push(g.group.source.clone());
        corpus.extend(g.group.hypotheses.iter().map(|h| h.tokens.clone()));
    }
    Vocabulary::build(&corpus, min_count)
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: String,
    pub failures: usize,
}

/// Trains from scratch, or continues `resume` up to `config.train.epochs`.
pub fn train(train_input: &str, dev_input: Option<&str>, config: &RunConfig, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    let lc = config.model.lowercase;
    let (train_groups, mut failures) = labeled_groups(train_input, lc)?;
    if train_groups.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let dev_groups = match dev_input {
        Some(d) => {
            let (g, f) = labeled_groups(d, lc)?;
            failures += f;
            g
        }
        None => Vec::new(),
    };
    let (mut state, prior_best) = match resume {
        Some(ck) => {
            let mut s = ck.state;
            s.config.epochs = config.train.epochs;
            (s, ck.best)
        }
        None => {
            let vocab = build_vocabulary(&train_groups, config.model.min_count)?;
            let model = Model::init(config.model.clone(), vocab)?;
            (TrainState::new(model, config.train.clone())?, None)
        }
    };
    let mut log = String::new();
    let best = state.train(&train_groups, &dev_groups, |r| {
        if let LogRecord::Epoch { .. } = r {
            log::info!("{}", serde_json::to_string(r).unwrap_or_default());
        }
        if let Ok(s) = serde_json::to_string(r) {
            log.push_str(&s);
            log.push('\n');
        }
    })?;
    let best = match (prior_best, best) {
        (Some(a), Some(b)) => Some(if b.metric > a.metric { b } else { a }),
        (a, b) => b.or(a),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint { state, best },
        log,
        failures,
    })
}

/// Scores every record, attaching `f`, `token_probs` and `gamma`.
pub fn score(input: &str, checkpoint: &Checkpoint, baselines: bool) -> Result<Output> {
    let model = checkpoint.scoring_model();
    let lc = model.config.lowercase;
    let mut out = Vec::new();
    let mut failures = 0;
    for (line, mut rec) in read_records::<DatasetRecord>(input)? {
        let scored = rec.group(lc).and_then(|g| model.score(&g, baselines));
        match scored {
            Ok(s) => {
                for (h, hs) in rec.hypotheses.iter_mut().zip(s.hypotheses) {
                    h.f = Some(hs.f);
                    h.token_probs = Some(hs.token_probs);
                    h.truncated = hs.truncated.then_some(true);
                    h.ged = hs.ged;
                    h.gqe = hs.gqe;
                    h.qe = hs.qe;
                }
                rec.gamma = Some(s.gamma);
                out.push(rec);
            }
            Err(e) => {
                record_error(line, e);
                failures += 1;
            }
        }
    }
    Ok(Output {
        text: to_lines(&out)?,
        failures,
    })
}

/// Gold sentence F0.5 of every hypothesis against the best reference.
pub fn gold_f05(rec: &DatasetRecord, lowercase: bool) -> Option<Vec<f64>> {
    let refs = rec.references(lowercase)?;
    let source = tokenize(&rec.source, lowercase);
    let ref_edits: Vec<Vec<Edit>> = refs.iter().map(|r| extract_edits(&source, r)).collect();
    Some(
        rec.hypotheses
            .iter()
            .map(|h| sentence_f05(&extract_edits(&source, &tokenize(&h.text, lowercase)), &ref_edits))
            .collect(),
    )
}

pub struct RerankOutcome {
    pub output: Output,
    pub weights: RankerWeights,
    /// `(objective with learned weights, objective of the beam order)` on
    /// the input, when gold is available.
    pub objectives: Option<(f64, f64)>,
}

/// Reorders scored records. With `learn`, fits weights on the input first;
/// otherwise applies `weights`.
pub fn rerank(input: &str, config: &RunConfig, weights: Option<RankerWeights>, learn: bool) -> Result<RerankOutcome> {
    let lc = config.model.lowercase;
    let records: Vec<(usize, DatasetRecord)> = read_records(input)?;
    let mut failures = 0;
    let mut kept = Vec::new();
    for (line, rec) in records {
        if rec.hypotheses.is_empty() {
            record_error(line, "no hypotheses");
            failures += 1;
        } else if config.rerank.features.vernet_f && rec.hypotheses.iter().any(|h| h.f.is_none()) {
            record_error(line, "hypotheses are not scored; run `score` first");
            failures += 1;
        } else {
            kept.push(rec);
        }
    }
    let groups: Vec<HypothesisGroup> = kept.iter().map(|r| r.group(lc)).collect::<Result<_>>()?;
    let f: Vec<Vec<f64>> = kept
        .iter()
        .map(|r| r.hypotheses.iter().map(|h| h.f.unwrap_or(0.0)).collect())
        .collect();
    let (features, rows) = build_features(&groups, Some(&f), config.rerank.features)?;

    let golds: Vec<Option<Vec<f64>>> = kept.iter().map(|r| gold_f05(r, lc)).collect();
    let rank_groups: Vec<RankGroup> = rows
        .iter()
        .zip(&golds)
        .filter_map(|(r, g)| {
            g.as_ref().map(|g| RankGroup {
                features: r.clone(),
                gold: g.clone(),
            })
        })
        .collect();

    let weights = if learn {
        if rank_groups.is_empty() {
            return Err(Error::Contract("learning weights requires gold corrections".into()));
        }
        coordinate_ascent(&rank_groups, features.clone(), &config.rerank.ca)?.weights
    } else {
        let w = weights.ok_or_else(|| Error::Config("no weights given and --learn not set".into()))?;
        if w.features != features {
            return Err(Error::Version(format!(
                "weights cover {:?} but the data provides {:?}",
                w.features.iter().map(|f| f.name()).collect::<Vec<_>>(),
                features.iter().map(|f| f.name()).collect::<Vec<_>>()
            )));
        }
        w
    };

    let objectives = (!rank_groups.is_empty()).then(|| {
        let kind = config.rerank.ca.objective;
        let beam = rank_groups.iter().map(|g| top_of_beam(g, kind)).sum::<f64>() / rank_groups.len() as f64;
        (objective(&rank_groups, &weights.weights, kind), beam)
    });

    let mut out = Vec::with_capacity(kept.len());
    for (mut rec, r) in kept.into_iter().zip(&rows) {
        let order = rank(r, &weights.weights);
        let mut hyps = Vec::with_capacity(order.len());
        for &k in &order {
            let mut h = rec.hypotheses[k].clone();
            h.rank_score = Some(crate::reranker::linear_score(&r[k], &weights.weights));
            h.beam_rank = Some(k);
            hyps.push(h);
        }
        rec.hypotheses = hyps;
        out.push(rec);
    }
    Ok(RerankOutcome {
        output: Output {
            text: to_lines(&out)?,
            failures,
        },
        weights,
        objectives,
    })
}

fn top_of_beam(g: &RankGroup, kind: RankObjective) -> f64 {
    match kind {
        RankObjective::TopF05 => g.gold[0],
        RankObjective::PrecisionAt1 => {
            let best = g.gold.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            f64::from(u8::from(g.gold[0] == best))
        }
    }
}

/// Metric name to value, in a stable order.
pub type Report = BTreeMap<String, f64>;

/// Correction metrics of each record's first hypothesis, plus detection and
/// correlation metrics when the records carry scores.
pub fn eval(input: &str, config: &RunConfig) -> Result<(Report, usize)> {
    let lc = config.model.lowercase;
    let mut failures = 0;
    let mut system = Vec::new();
    let mut references = Vec::new();
    let mut gleu_sum = 0.0;
    let (mut pred, mut gold_labels) = (Vec::new(), Vec::new());
    let (mut fs, mut golds, mut per_group) = (Vec::new(), Vec::new(), Vec::new());
    let mut scored = true;
    let mut n = 0usize;
    for (line, rec) in read_records::<DatasetRecord>(input)? {
        let refs = match rec.references(lc) {
            Some(r) if !r.is_empty() => r,
            _ => {
                record_error(line, "gold correction missing");
                failures += 1;
                continue;
            }
        };
        let Some(top) = rec.hypotheses.first() else {
            record_error(line, "no hypotheses");
            failures += 1;
            continue;
        };
        n += 1;
        let source = tokenize(&rec.source, lc);
        let cand = tokenize(&top.text, lc);
        system.push(extract_edits(&source, &cand));
        references.push(refs.iter().map(|r| extract_edits(&source, r)).collect::<Vec<_>>());
        gleu_sum += gleu(&cand, &source, &refs, config.eval.gleu_order);

        let gf = gold_f05(&rec, lc).expect("gold present");
        let mut gf_group = Vec::new();
        let mut f_group = Vec::new();
        for (h, g) in rec.hypotheses.iter().zip(&gf) {
            let (Some(f), Some(probs)) = (h.f, h.token_probs.as_ref()) else {
                scored = false;
                continue;
            };
            let toks = tokenize(&h.text, lc);
            let labels: TokenLabelSeq = label_tokens(&toks, &refs[0]);
            if probs.len() == toks.len() {
                let p_incorrect: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
                pred.push(predict_labels(&p_incorrect));
                gold_labels.push(labels.0[..toks.len()].to_vec());
            }
            fs.push(f);
            golds.push(*g);
            f_group.push(f);
            gf_group.push(*g);
        }
        per_group.push((f_group, gf_group));
    }
    if n == 0 {
        return Err(Error::Empty("evaluation records with gold"));
    }
    let span = span_prf(&system, &references)?;
    let mut report = Report::new();
    report.insert("records".into(), n as f64);
    report.insert("span_precision".into(), span.precision);
    report.insert("span_recall".into(), span.recall);
    report.insert("span_f05".into(), span.f_beta);
    report.insert("gleu".into(), gleu_sum / n as f64);
    if scored && !pred.is_empty() {
        let tok = token_prf(&pred, &gold_labels)?;
        report.insert("token_precision".into(), tok.precision);
        report.insert("token_recall".into(), tok.recall);
        report.insert("token_f05".into(), tok.f_beta);
        if let Ok(p) = pcc(&fs, &golds) {
            report.insert("pcc".into(), p);
        }
        if let Ok(p) = pcc_per_group(&per_group) {
            report.insert("pcc_per_group".into(), p);
        }
    }
    Ok((report, failures))
}

/// Aligned `metric value` columns.
pub fn report_text(report: &Report) -> String {
    let width = report.keys().map(String::len).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in report {
        let _ = writeln!(out, "{k:<width$}  {v:.6}");
    }
    out
}

pub fn report_json(report: &Report) -> Result<String> {
    Ok(serde_json::to_string(report)? + "\n")
}

/// The fixed toy group used for gradient checks: a 4-token source and up
/// to five hypotheses of at most 5 tokens.
pub fn gradcheck_group(k: usize) -> Result<LabeledGroup> {
    let hyps = ["he goes to school .", "she go school", "he go to the school", "he goes school .", "he went to school"];
    if k == 0 || k > hyps.len() {
        return Err(Error::Config(format!("gradcheck.k must lie in 1..={}", hyps.len())));
    }
    let group = HypothesisGroup::new(
        tokenize("he go to school", false),
        hyps[..k]
            .iter()
            .map(|h| Hypothesis {
                tokens: tokenize(h, false),
                model_score: None,
            })
            .collect(),
    )?;
    label_group(group, &[tokenize("he goes to school .", false)])
}

/// Finite-difference check of the full loss, baseline heads included, on a
/// small perturbed model.
pub fn gradcheck(config: &RunConfig) -> Result<GradCheckReport> {
    let g = &config.gradcheck;
    let lg = gradcheck_group(g.k)?;
    let mut corpus = vec![lg.group.source.clone()];
    corpus.extend(lg.group.hypotheses.iter().map(|h| h.tokens.clone()));
    let vocab = Vocabulary::build(&corpus, 1)?;
    let model_config = ModelConfig {
        encoder: EncoderConfig {
            d_model: g.d_model,
            layers: g.layers,
            heads: g.heads,
            ff_dim: g.ff_dim,
            max_positions: 16,
            vocab_size: 0,
            seed: config.model.encoder.seed,
        },
        max_len: 16,
        ..ModelConfig::default()
    };
    let mut model = Model::init(model_config, vocab)?;
    perturb(&mut model.store, g.perturb, config.model.encoder.seed)?;
    grad_check(&mut model, &lg, MaskPolicy::Joint, true, g.step)
}

pub fn gradcheck_text(report: &GradCheckReport, tolerance: f64) -> String {
    let width = report.per_param.iter().map(|p| p.0.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (name, err) in &report.per_param {
        let _ = writeln!(out, "{name:<width$}  {err:.3e}");
    }
    let _ = writeln!(
        out,
        "worst {:.3e} tolerance {tolerance:.1e} step {:.1e} {}",
        report.worst(),
        report.step,
        if report.passes(tolerance) { "PASS" } else { "FAIL" }
    );
    out
}
