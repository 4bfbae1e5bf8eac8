//! Joint token-level training of the encoder and head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotator::{extract_edits, label_tokens, TokenLabelSeq};
use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::group::HypothesisGroup;
use crate::metrics::{pcc, predict_labels, sentence_f05, token_prf, Prf};
use crate::model::Model;
use crate::textpipe::PairLayout;

/// Which label slots contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskPolicy {
    /// Source tokens, source `[SEP]`, hypothesis tokens and final `[SEP]`.
    Joint,
    Source,
    Hypothesis,
}

impl std::str::FromStr for MaskPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "source" => Ok(Self::Source),
            "hypothesis" => Ok(Self::Hypothesis),
            _ => Err(Error::Config(format!("unknown mask policy `{s}`"))),
        }
    }
}

impl std::fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Joint => "joint",
            Self::Source => "source",
            Self::Hypothesis => "hypothesis",
        })
    }
}

/// Dev metric used to keep the best checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectMetric {
    TokenF05,
    Pcc,
}

impl std::str::FromStr for SelectMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token_f05" => Ok(Self::TokenF05),
            "pcc" => Ok(Self::Pcc),
            _ => Err(Error::Config(format!("unknown selection metric `{s}`"))),
        }
    }
}

impl std::fmt::Display for SelectMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TokenF05 => "token_f05",
            Self::Pcc => "pcc",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Groups per batch.
    pub batch_size: usize,
    /// Batches accumulated per optimizer step.
    pub accumulation: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mask_policy: MaskPolicy,
    /// Also train the single-node baseline heads.
    pub baseline_heads: bool,
    pub select_metric: SelectMetric,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch_size: 8,
            accumulation: 4,
            epochs: 3,
            seed: 17,
            mask_policy: MaskPolicy::Joint,
            baseline_heads: false,
            select_metric: SelectMetric::TokenF05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.accumulation == 0 || self.epochs == 0 {
            return Err(Error::Config("lr, batch_size, accumulation and epochs must be positive".into()));
        }
        Ok(())
    }

    fn groups_per_step(&self) -> usize {
        self.batch_size * self.accumulation
    }
}

/// A group with gold-derived supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledGroup {
    pub group: HypothesisGroup,
    pub source_labels: TokenLabelSeq,
    pub hypothesis_labels: Vec<TokenLabelSeq>,
    /// Sentence F0.5 of each hypothesis against the best reference.
    pub gold_f05: Vec<f64>,
    /// Whether each hypothesis equals one of the references.
    pub exact: Vec<bool>,
}

/// Labels a group against its references. Token labels use the first
/// reference; sentence F0.5 takes the best reference.
pub fn label_group(group: HypothesisGroup, references: &[Vec<String>]) -> Result<LabeledGroup> {
    let gold = references.first().ok_or(Error::Empty("references"))?;
    let ref_edits: Vec<_> = references.iter().map(|r| extract_edits(&group.source, r)).collect();
    let source_labels = label_tokens(&group.source, gold);
    let mut hypothesis_labels = Vec::with_capacity(group.k());
    let mut gold_f05 = Vec::with_capacity(group.k());
    let mut exact = Vec::with_capacity(group.k());
    for h in &group.hypotheses {
        hypothesis_labels.push(label_tokens(&h.tokens, gold));
        gold_f05.push(sentence_f05(&extract_edits(&group.source, &h.tokens), &ref_edits));
        exact.push(references.contains(&h.tokens));
    }
    Ok(LabeledGroup {
        group,
        source_labels,
        hypothesis_labels,
        gold_f05,
        exact,
    })
}

/// Per-position targets and loss mask of one node. Slots follow the layout:
/// `[CLS]` is never supervised; truncated tokens drop their labels while the
/// two `[SEP]` slots keep theirs.
pub fn node_targets(
    layout: &PairLayout,
    source: &TokenLabelSeq,
    hypothesis: &TokenLabelSeq,
    policy: MaskPolicy,
) -> Result<(Vec<usize>, Vec<bool>)> {
    let (m, n) = (layout.m, layout.n);
    if source.len() < m + 1 || hypothesis.len() < n + 1 {
        return Err(Error::Contract(format!(
            "labels ({}, {}) do not cover layout ({m}, {n})",
            source.len(),
            hypothesis.len()
        )));
    }
    let mut targets = vec![1usize; layout.len()];
    for i in 0..m {
        targets[1 + i] = source.0[i] as usize;
    }
    targets[m + 1] = *source.0.last().expect("non-empty") as usize;
    for j in 0..n {
        targets[m + 2 + j] = hypothesis.0[j] as usize;
    }
    targets[m + n + 2] = *hypothesis.0.last().expect("non-empty") as usize;
    let mask = (0..layout.len())
        .map(|p| match policy {
            MaskPolicy::Joint => p >= 1,
            MaskPolicy::Source => layout.source_range().contains(&p),
            MaskPolicy::Hypothesis => layout.hypothesis_range().contains(&p),
        })
        .collect();
    Ok((targets, mask))
}

/// `(1/K) Σ_k mean_p CE(w_p^k)` over each node's supervised positions,
/// plus the baseline-head losses when requested.
pub fn group_loss(
    model: &Model,
    tape: &mut Tape,
    labeled: &LabeledGroup,
    policy: MaskPolicy,
    baseline_heads: bool,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let k = labeled.group.k();
    if labeled.hypothesis_labels.len() != k || labeled.gold_f05.len() != k {
        return Err(Error::Contract("training requires labels for every hypothesis".into()));
    }
    let (batch, out) = model.forward(tape, &labeled.group, baseline_heads, dropout_rng)?;
    let mut terms = Vec::with_capacity(k);
    for (idx, node) in batch.nodes().iter().enumerate() {
        let (targets, mask) = node_targets(
            &node.layout,
            &labeled.source_labels,
            &labeled.hypothesis_labels[idx],
            policy,
        )?;
        terms.push(tape.cross_entropy(out.logits[idx], &targets, &mask)?);
        if let Some(base) = &out.baselines {
            let b = &base[idx];
            terms.push(tape.cross_entropy(b.ged_logits, &targets, &mask)?);
            let sent = usize::from(labeled.exact[idx]);
            terms.push(tape.cross_entropy(b.gqe_logits, &[sent], &[true])?);
            let target = tape.constant(Tensor::scalar(-labeled.gold_f05[idx]));
            let diff = tape.add(b.qe, target)?;
            terms.push(tape.mul(diff, diff)?);
        }
    }
    let stacked = tape.concat(&terms, crate::diffcore::Axis::Rows)?;
    let total = tape.sum(stacked)?;
    tape.scale(total, 1.0 / k as f64)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn update(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        epoch: usize,
        loss: f64,
    },
    Epoch {
        epoch: usize,
        train_loss: f64,
        dev_token_f05: Option<f64>,
        dev_pcc: Option<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    /// Detection over hypothesis tokens plus final `[SEP]`.
    pub hypothesis_tokens: Prf,
    /// Detection over source tokens plus source `[SEP]`.
    pub source_tokens: Prf,
    /// Pooled correlation between sentence scores and gold sentence F0.5.
    pub pcc: Option<f64>,
    pub scores: Vec<Vec<f64>>,
}

/// Token detection and sentence-score correlation of `model` on labeled groups.
pub fn evaluate(model: &Model, groups: &[LabeledGroup]) -> Result<EvalSummary> {
    let (mut hyp_pred, mut hyp_gold) = (Vec::new(), Vec::new());
    let (mut src_pred, mut src_gold) = (Vec::new(), Vec::new());
    let (mut fs, mut golds) = (Vec::new(), Vec::new());
    let mut scores = Vec::with_capacity(groups.len());
    for lg in groups {
        let mut tape = Tape::new();
        let (batch, out) = model.forward::<ChaCha8Rng>(&mut tape, &lg.group, false, None)?;
        let mut group_scores = Vec::with_capacity(lg.group.k());
        for (k, node) in batch.nodes().iter().enumerate() {
            let (targets, _) = node_targets(&node.layout, &lg.source_labels, &lg.hypothesis_labels[k], MaskPolicy::Joint)?;
            let probs = tape.value(out.probs[k]);
            let p0: Vec<f64> = (0..node.layout.len()).map(|p| probs.get(p, 0)).collect();
            let labels: Vec<u8> = targets.iter().map(|&t| t as u8).collect();
            hyp_pred.push(predict_labels(&p0[node.layout.hypothesis_range()]));
            hyp_gold.push(labels[node.layout.hypothesis_range()].to_vec());
            if k == 0 {
                src_pred.push(predict_labels(&p0[node.layout.source_range()]));
                src_gold.push(labels[node.layout.source_range()].to_vec());
            }
            let f = tape.value(out.scores[k]).item();
            fs.push(f);
            golds.push(lg.gold_f05[k]);
            group_scores.push(f);
        }
        scores.push(group_scores);
    }
    Ok(EvalSummary {
        hypothesis_tokens: token_prf(&hyp_pred, &hyp_gold)?,
        source_tokens: token_prf(&src_pred, &src_gold)?,
        pcc: pcc(&fs, &golds).ok(),
        scores,
    })
}

/// Mutable training state: everything a checkpoint needs to resume.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub metric: f64,
    pub store: ParamStore,
}

impl TrainState {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&model.store, config.lr, config.beta1, config.beta2, config.eps);
        Ok(Self {
            model,
            adam,
            config,
            epoch: 0,
        })
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Runs one epoch over `train`, returning per-step log records.
    pub fn run_epoch(&mut self, train: &[LabeledGroup]) -> Result<Vec<LogRecord>> {
        if train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let epoch = self.epoch + 1;
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let use_dropout = self.model.config.head.dropout > 0.0;
        let mut records = Vec::new();
        self.model.store.zero_grad();
        for chunk in order.chunks(self.config.groups_per_step()) {
            let scale = 1.0 / chunk.len() as f64;
            let mut total = 0.0;
            for &i in chunk {
                let mut tape = Tape::new();
                let loss = group_loss(
                    &self.model,
                    &mut tape,
                    &train[i],
                    self.config.mask_policy,
                    self.config.baseline_heads,
                    if use_dropout { Some(&mut rng) } else { None },
                )
                .map_err(|e| self.diverged(e))?;
                let scaled = tape.scale(loss, scale)?;
                total += tape.value(scaled).item();
                tape.backward(scaled, &mut self.model.store).map_err(|e| self.diverged(e))?;
            }
            if !total.is_finite() {
                return Err(Error::Divergence {
                    step: self.adam.step as usize + 1,
                    detail: format!("loss {total}"),
                });
            }
            self.adam.update(&mut self.model.store);
            self.model.store.zero_grad();
            records.push(LogRecord::Step {
                step: self.adam.step,
                epoch,
                loss: total,
            });
        }
        self.epoch = epoch;
        Ok(records)
    }

    fn diverged(&self, e: Error) -> Error {
        match e {
            Error::Contract(msg) if msg.starts_with("non-finite") => Error::Divergence {
                step: self.adam.step as usize + 1,
                detail: msg,
            },
            other => other,
        }
    }

    /// Trains until `config.epochs` epochs are complete, evaluating on `dev`
    /// after each one and keeping the best parameters.
    pub fn train(&mut self, train: &[LabeledGroup], dev: &[LabeledGroup], mut on_log: impl FnMut(&LogRecord)) -> Result<Option<BestSnapshot>> {
        let mut best: Option<BestSnapshot> = None;
        while self.epoch < self.config.epochs {
            let steps = self.run_epoch(train)?;
            let mut sum = 0.0;
            for r in &steps {
                if let LogRecord::Step { loss, .. } = r {
                    sum += loss;
                }
                on_log(r);
            }
            let (dev_f, dev_pcc) = if dev.is_empty() {
                (None, None)
            } else {
                let eval = evaluate(&self.model, dev)?;
                (Some(eval.hypothesis_tokens.f_beta), eval.pcc)
            };
            let record = LogRecord::Epoch {
                epoch: self.epoch,
                train_loss: sum / steps.len() as f64,
                dev_token_f05: dev_f,
                dev_pcc,
            };
            on_log(&record);
            let metric = match self.config.select_metric {
                SelectMetric::TokenF05 => dev_f,
                SelectMetric::Pcc => dev_pcc,
            };
            if let Some(metric) = metric {
                if best.as_ref().is_none_or(|b| metric > b.metric) {
                    best = Some(BestSnapshot {
                        epoch: self.epoch,
                        metric,
                        store: self.model.store.clone(),
                    });
                }
            }
        }
        Ok(best)
    }
}

/// Gradient norms below this are compared in absolute terms. Tensors such
/// as key biases have an exactly zero gradient because softmax ignores a
/// constant shift, and their finite differences are pure rounding noise.
pub const GRAD_NORM_FLOOR: f64 = 1e-5;

/// Per-tensor gradient check report.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(name, ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor))`.
    pub per_param: Vec<(String, f64)>,
    pub step: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_param.iter().map(|p| p.1).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst() < tolerance
    }
}

/// Compares `analytic` gradients (one tensor per parameter of `store`, in
/// store order) with central differences of `loss_at`.
pub fn compare_gradients(
    store: &mut ParamStore,
    analytic: &[Tensor],
    step: f64,
    mut loss_at: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut per_param = Vec::with_capacity(ids.len());
    for (idx, id) in ids.into_iter().enumerate() {
        let n = store.value(id).len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + step;
            let plus = loss_at(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - step;
            let minus = loss_at(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let a = analytic[idx].data();
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(GRAD_NORM_FLOOR);
        per_param.push((store.get(id).name.clone(), rel));
    }
    Ok(GradCheckReport { per_param, step })
}

/// Adds seeded `N(0, std²)` noise to every parameter. Gradient checks use it
/// to move away from the near-uniform attention of a fresh initialization.
pub fn perturb(store: &mut ParamStore, std: f64, seed: u64) -> Result<()> {
    use rand_distr::{Distribution, Normal};
    let noise = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(())
}

/// Gradient check of the full training loss on one labeled group.
pub fn grad_check(model: &mut Model, labeled: &LabeledGroup, policy: MaskPolicy, baseline_heads: bool, step: f64) -> Result<GradCheckReport> {
    model.store.zero_grad();
    let mut tape = Tape::new();
    let loss = group_loss(model, &mut tape, labeled, policy, baseline_heads, None)?;
    tape.backward(loss, &mut model.store)?;
    let analytic: Vec<Tensor> = model.store.iter().map(|(_, p)| p.grad.clone()).collect();
    model.store.zero_grad();

    let mut store = model.store.clone();
    let probe = model.clone();
    compare_gradients(&mut store, &analytic, step, |s| {
        let m = Model {
            store: s.clone(),
            ..probe.clone()
        };
        let mut tape = Tape::new();
        let loss = group_loss(&m, &mut tape, labeled, policy, baseline_heads, None)?;
        Ok(tape.value(loss).item())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::group::Hypothesis;
    use crate::model::ModelConfig;
    use crate::textpipe::{tokenize, Vocabulary};

    fn toks(s: &str) -> Vec<String> {
        tokenize(s, false)
    }

    fn tiny(seed: u64) -> Model {
        let corpus = vec![toks("she he goes go to school home . the a cat cats sat sits on mat")];
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let config = ModelConfig {
            encoder: EncoderConfig {
                d_model: 8,
                layers: 1,
                heads: 2,
                ff_dim: 16,
                max_positions: 24,
                vocab_size: 0,
                seed,
            },
            max_len: 24,
            ..ModelConfig::default()
        };
        Model::init(config, vocab).unwrap()
    }

    fn scramble(model: &mut Model, std: f64, seed: u64) {
        perturb(&mut model.store, std, seed).unwrap();
    }

    fn labeled(src: &str, gold: &str, hyps: &[&str]) -> LabeledGroup {
        let group = HypothesisGroup::new(
            toks(src),
            hyps.iter()
                .enumerate()
                .map(|(i, h)| Hypothesis {
                    tokens: toks(h),
                    model_score: Some(-(i as f64)),
                })
                .collect(),
        )
        .unwrap();
        label_group(group, &[toks(gold)]).unwrap()
    }

    fn toy_set() -> Vec<LabeledGroup> {
        let rows = [
            ("he go home", "he goes home .", ["he goes home .", "he go home ."]),
            ("she go to school", "she goes to school .", ["she goes to school .", "she go to school"]),
            ("the cat sit on mat", "the cat sits on the mat .", ["the cat sits on mat .", "the cat sit on the mat ."]),
            ("a cats sat", "the cats sat .", ["the cats sat .", "a cats sat ."]),
            ("he goes school", "he goes to school .", ["he goes to school .", "he goes school ."]),
            ("cat sits on the mat", "the cat sits on the mat .", ["the cat sits on the mat .", "cat sits on the mat ."]),
            ("she go home", "she goes home .", ["she goes home .", "she goes home"]),
            ("the cats sits", "the cats sat .", ["the cats sat .", "the cats sits ."]),
            ("he go to the school", "he goes to school .", ["he goes to school .", "he go to school ."]),
            ("a cat sat on a mat", "the cat sat on the mat .", ["the cat sat on the mat .", "a cat sat on the mat ."]),
        ];
        rows.iter().map(|(s, g, h)| labeled(s, g, h)).collect()
    }

    fn loss_value(model: &Model, lg: &LabeledGroup, policy: MaskPolicy, base: bool) -> f64 {
        let mut tape = Tape::new();
        let l = group_loss(model, &mut tape, lg, policy, base, None).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn labels_and_targets_follow_layout() {
        let lg = labeled("he go home", "he goes home .", &["he goes home .", "he go home"]);
        assert_eq!(lg.source_labels.0, vec![1, 0, 1, 0]);
        assert_eq!(lg.hypothesis_labels[0].0, vec![1, 1, 1, 1, 1]);
        assert_eq!(lg.gold_f05[0], 1.0);
        assert!(lg.exact[0] && !lg.exact[1]);
        let layout = crate::textpipe::encode_pair(&lg.group.source, &lg.group.hypotheses[1].tokens, &tiny(1).vocab, 24).unwrap();
        let (t, mask) = node_targets(&layout, &lg.source_labels, &lg.hypothesis_labels[1], MaskPolicy::Joint).unwrap();
        assert_eq!(t, vec![1, 1, 0, 1, 0, 1, 0, 1, 0]);
        assert!(!mask[0] && mask[1..].iter().all(|&m| m));
        let (_, hm) = node_targets(&layout, &lg.source_labels, &lg.hypothesis_labels[1], MaskPolicy::Hypothesis).unwrap();
        assert_eq!(hm, vec![false, false, false, false, false, true, true, true, true]);
    }

    #[test]
    fn missing_labels_are_rejected() {
        let mut lg = labeled("he go home", "he goes home", &["he goes home", "he go home"]);
        lg.hypothesis_labels.pop();
        let model = tiny(1);
        let mut tape = Tape::new();
        assert!(matches!(
            group_loss(&model, &mut tape, &lg, MaskPolicy::Joint, false, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zeroed_classifier_gives_ln_two() {
        let mut model = tiny(2);
        model.head.zero_classifier(&mut model.store);
        for lg in toy_set().iter().take(3) {
            let l = loss_value(&model, lg, MaskPolicy::Joint, false);
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12, "{l}");
        }
    }

    #[test]
    fn confident_correct_classifier_has_negligible_loss() {
        let mut model = tiny(2);
        model.head.zero_classifier(&mut model.store);
        let b = model.store.id("head.cls_b").unwrap();
        model.store.get_mut(b).value = Tensor::row(&[-20.0, 20.0]).unwrap();
        let lg = labeled("he goes home .", "he goes home .", &["he goes home .", "he goes home ."]);
        assert!(loss_value(&model, &lg, MaskPolicy::Joint, false) < 1e-6);
    }

    #[test]
    fn loss_matches_explicit_summation() {
        let model = tiny(4);
        let lg = labeled("he go to school", "he goes to school .", &["he goes to school", "she go to the school ."]);
        let mut tape = Tape::new();
        let (batch, out) = model.forward::<ChaCha8Rng>(&mut tape, &lg.group, false, None).unwrap();
        let mut expected = 0.0;
        for (k, node) in batch.nodes().iter().enumerate() {
            let lay = &node.layout;
            let probs = tape.value(out.probs[k]);
            let mut labels: Vec<u8> = lg.source_labels.0.clone();
            labels.extend(&lg.hypothesis_labels[k].0);
            assert_eq!(labels.len(), lay.m + lay.n + 2);
            let mut s = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                s -= probs.get(i + 1, y as usize).ln();
            }
            expected += s / labels.len() as f64;
        }
        expected /= 2.0;
        let got = loss_value(&model, &lg, MaskPolicy::Joint, false);
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn cls_position_gets_no_gradient() {
        let model = tiny(5);
        let lg = labeled("he go home", "he goes home .", &["he goes home", "he go home ."]);
        let mut tape = Tape::new();
        let (_, out) = model.forward::<ChaCha8Rng>(&mut tape, &lg.group, false, None).unwrap();
        let layout = crate::textpipe::encode_pair(&lg.group.source, &lg.group.hypotheses[0].tokens, &model.vocab, 24).unwrap();
        let (t, mask) = node_targets(&layout, &lg.source_labels, &lg.hypothesis_labels[0], MaskPolicy::Joint).unwrap();
        let loss = tape.cross_entropy(out.logits[0], &t, &mask).unwrap();
        let grads = tape.gradients(loss).unwrap();
        let g = grads.get(out.logits[0]).unwrap();
        assert_eq!(g.row_slice(0), &[0.0, 0.0]);
        assert!(g.row_slice(1).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn adam_solves_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Tensor::scalar(0.0)).unwrap();
        let mut adam = Adam::new(&store, 0.01, 0.9, 0.999, 1e-8);
        let target = 3.0;
        let mut reached = None;
        for step in 0..2000 {
            store.zero_grad();
            let mut tape = Tape::new();
            let v = tape.param(&store, x);
            let c = tape.constant(Tensor::scalar(-target));
            let d = tape.add(v, c).unwrap();
            let sq = tape.mul(d, d).unwrap();
            tape.backward(sq, &mut store).unwrap();
            adam.update(&mut store);
            if (store.value(x).item() - target).abs() < 1e-3 && reached.is_none() {
                reached = Some(step);
            }
        }
        assert!(reached.is_some());
        assert!((store.value(x).item() - target).abs() < 1e-3);
    }

    fn quick_config(batch: usize, accum: usize, epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: batch,
            accumulation: accum,
            epochs,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn accumulation_matches_a_larger_batch() {
        let data = toy_set();
        let mut a = TrainState::new(tiny(6), quick_config(2, 2, 1)).unwrap();
        let mut b = TrainState::new(tiny(6), quick_config(4, 1, 1)).unwrap();
        a.run_epoch(&data).unwrap();
        b.run_epoch(&data).unwrap();
        for ((_, pa), (_, pb)) in a.model.store.iter().zip(b.model.store.iter()) {
            for (x, y) in pa.value.data().iter().zip(pb.value.data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_set();
        let run = || {
            let mut s = TrainState::new(tiny(7), quick_config(2, 1, 2)).unwrap();
            let mut losses = Vec::new();
            s.train(&data, &data[..3], |r| losses.push(serde_json::to_string(r).unwrap())).unwrap();
            losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fifty_steps_reduce_the_loss() {
        let data = toy_set();
        let mean_loss = |m: &Model| data.iter().map(|g| loss_value(m, g, MaskPolicy::Joint, false)).sum::<f64>() / data.len() as f64;
        let mut state = TrainState::new(tiny(8), quick_config(1, 1, 5)).unwrap();
        let before = mean_loss(&state.model);
        let best = state.train(&data, &data, |_| {}).unwrap();
        assert_eq!(state.adam.step, 50);
        assert!(best.is_some());
        let after = mean_loss(&state.model);
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn baseline_losses_add_terms() {
        let model = tiny(10);
        let lg = &toy_set()[0];
        let plain = loss_value(&model, lg, MaskPolicy::Joint, false);
        let with = loss_value(&model, lg, MaskPolicy::Joint, true);
        assert!(with > plain);
    }

    #[test]
    fn gradients_agree_with_finite_differences() {
        let mut model = tiny(11);
        scramble(&mut model, 0.3, 1);
        let lg = labeled("he go to school", "he goes to school .", &["he goes to school .", "she go school", "he go to the school"]);
        let report = grad_check(&mut model, &lg, MaskPolicy::Joint, true, 1e-5).unwrap();
        assert!(report.passes(1e-4), "{:?}", report.per_param);
    }

    #[test]
    fn corrupted_gradient_fails_the_check() {
        let model = tiny(12);
        let lg = labeled("he go home", "he goes home .", &["he goes home .", "he go home"]);
        let mut store = model.store.clone();
        store.zero_grad();
        let mut tape = Tape::new();
        let loss = group_loss(&model, &mut tape, &lg, MaskPolicy::Joint, false, None).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let mut analytic: Vec<Tensor> = store.iter().map(|(_, p)| p.grad.clone()).collect();
        let idx = model.store.id("head.cls_w").unwrap().index();
        analytic[idx].data_mut()[0] += 0.05;
        let report = compare_gradients(&mut store, &analytic, 1e-5, |s| {
            let m = Model { store: s.clone(), ..model.clone() };
            Ok(loss_value(&m, &lg, MaskPolicy::Joint, false))
        })
        .unwrap();
        assert!(!report.passes(1e-4));
        assert_eq!(report.per_param.iter().filter(|p| p.1 > 1e-4).count(), 1);
    }

    #[test]
    fn fd_error_shrinks_with_the_step() {
        let mut model = tiny(13);
        scramble(&mut model, 0.3, 2);
        let lg = labeled("he go home", "he goes home .", &["he goes home .", "he go home"]);
        let reports: Vec<GradCheckReport> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&h| grad_check(&mut model, &lg, MaskPolicy::Joint, false, h).unwrap())
            .collect();
        for name in ["encoder.layer0.w1", "head.w_sel", "head.w_int", "head.cls_w"] {
            let err: Vec<f64> = reports
                .iter()
                .map(|r| r.per_param.iter().find(|p| p.0 == name).unwrap().1)
                .collect();
            assert!(err[0] > err[1] && err[1] > err[2], "{name}: {err:?}");
        }
    }
}
