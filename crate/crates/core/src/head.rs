//! Reasoning-graph head.
//!
//! Every ⟨source, hypothesis⟩ node of a group is connected to every node,
//! itself included. Node interaction attention lets each token of node `k`
//! read the tokens of node `l`, giving a fine-grained view `V(l→k)`. Node
//! selection attention scores each node's confidence `γ_l` by an
//! attention-over-attention pass between its source and hypothesis sides.
//! The γ-weighted sum of the `V(l→k)` is the verification representation
//! that, together with the node's own token states, classifies every token
//! as correct or incorrect.

use rand::Rng;

use crate::diffcore::{Axis, ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoder::{EncodedNode, INIT_STD};
use crate::error::{Error, Result};
use crate::textpipe::PairLayout;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    /// Dropout on the classifier features during training. Zero disables it.
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { dropout: 0.0 }
    }
}

/// Parameter ids of the head and of the single-node baseline heads.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w_int: ParamId,
    pub w_sel: ParamId,
    pub sel_w: ParamId,
    pub sel_b: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
    pub ged_w: ParamId,
    pub ged_b: ParamId,
    pub gqe_w: ParamId,
    pub gqe_b: ParamId,
    pub qe_w: ParamId,
    pub qe_b: ParamId,
}

const SHAPES: [(&str, usize, usize, bool); 12] = [
    // (name, rows as multiple of d or literal, cols, weight?)
    ("w_int", 1, 0, true),
    ("w_sel", 1, 0, true),
    ("sel_w", 3, 1, true),
    ("sel_b", 0, 1, false),
    ("cls_w", 3, 2, true),
    ("cls_b", 0, 2, false),
    ("ged_w", 1, 2, true),
    ("ged_b", 0, 2, false),
    ("gqe_w", 1, 2, true),
    ("gqe_b", 0, 2, false),
    ("qe_w", 1, 1, true),
    ("qe_b", 0, 1, false),
];

fn shape_of(d: usize, rows: usize, cols: usize) -> [usize; 2] {
    let r = if rows == 0 { 1 } else { rows * d };
    let c = if cols == 0 { d } else { cols };
    [r, c]
}

impl HeadParams {
    pub fn init<R: Rng>(d: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let mut ids = Vec::with_capacity(SHAPES.len());
        for (name, rows, cols, weight) in SHAPES {
            let [r, c] = shape_of(d, rows, cols);
            let id = if weight {
                store.normal(format!("head.{name}"), r, c, INIT_STD, rng)?
            } else {
                store.constant(format!("head.{name}"), r, c, 0.0)?
            };
            ids.push(id);
        }
        Ok(Self::from_ids(&ids))
    }

    pub fn bind(d: usize, store: &ParamStore) -> Result<Self> {
        let mut ids = Vec::with_capacity(SHAPES.len());
        for (name, rows, cols, _) in SHAPES {
            let full = format!("head.{name}");
            let id = store
                .id(&full)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{full}`")))?;
            let want = shape_of(d, rows, cols);
            if store.value(id).shape() != want {
                return Err(Error::Contract(format!("`{full}` has shape {:?}, expected {want:?}", store.value(id).shape())));
            }
            ids.push(id);
        }
        Ok(Self::from_ids(&ids))
    }

    fn from_ids(ids: &[ParamId]) -> Self {
        Self {
            w_int: ids[0],
            w_sel: ids[1],
            sel_w: ids[2],
            sel_b: ids[3],
            cls_w: ids[4],
            cls_b: ids[5],
            ged_w: ids[6],
            ged_b: ids[7],
            gqe_w: ids[8],
            gqe_b: ids[9],
            qe_w: ids[10],
            qe_b: ids[11],
        }
    }

    pub fn all(&self) -> [ParamId; 12] {
        [
            self.w_int, self.w_sel, self.sel_w, self.sel_b, self.cls_w, self.cls_b, self.ged_w, self.ged_b,
            self.gqe_w, self.gqe_b, self.qe_w, self.qe_b,
        ]
    }

    /// Sets every weight and bias of the token classifier to zero.
    pub fn zero_classifier(&self, store: &mut ParamStore) {
        for id in [self.cls_w, self.cls_b] {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
    }
}

/// The K encoded nodes of one group. All nodes share the source sentence.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    nodes: Vec<EncodedNode>,
}

impl GraphBatch {
    pub fn new(nodes: Vec<EncodedNode>) -> Result<Self> {
        let first = nodes.first().ok_or(Error::Empty("graph batch"))?;
        let (m, src) = (first.layout.m, &first.layout.ids[..first.layout.m + 2]);
        for node in &nodes[1..] {
            if node.layout.m != m || node.layout.ids[..m + 2] != *src {
                return Err(Error::Contract("nodes of one graph must share the source sentence".into()));
            }
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[EncodedNode] {
        &self.nodes
    }

    pub fn k(&self) -> usize {
        self.nodes.len()
    }
}

/// Handles into the tape for one node selection pass.
#[derive(Debug, Clone)]
pub struct SelectionTrace {
    /// `1 x K` node weights.
    pub gamma: Var,
    /// Per node, `(m+1) x 1` source-side attention.
    pub beta_source: Vec<Var>,
    /// Per node, `1 x (n+1)` hypothesis-side attention.
    pub beta_hypothesis: Vec<Var>,
}

/// Interaction mask: every row may attend to every position of node `l`
/// except its `[CLS]` row.
fn interaction_mask(rows: usize, node_l: &EncodedNode) -> Vec<bool> {
    let cols = node_l.layout.len();
    let mut mask = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        mask.extend(node_l.mask.iter().enumerate().map(|(q, &valid)| valid && q != 0));
    }
    mask
}

fn check_dims(tape: &Tape, a: &EncodedNode, b: &EncodedNode) -> Result<()> {
    let (da, db) = (tape.value(a.h).cols(), tape.value(b.h).cols());
    if da != db {
        return Err(Error::Contract(format!("node widths differ: {da} vs {db}")));
    }
    Ok(())
}

/// Attention weights of every position of node `k` over positions of node `l`
/// (`[CLS]` of `l` excluded), returned together with `V(l→k)`.
fn interaction_from_projection(tape: &mut Tape, proj_k: Var, rows_k: usize, node_l: &EncodedNode) -> Result<(Var, Var)> {
    let logits = tape.matmul_nt(proj_k, node_l.h)?;
    let mask = interaction_mask(rows_k, node_l);
    let alpha = tape.softmax(logits, Axis::Cols, Some(&mask))?;
    let v = tape.matmul(alpha, node_l.h)?;
    Ok((alpha, v))
}

/// `V(l→k)`: for every position `p` of node `k`, the attention-weighted sum of
/// node `l`'s token states with weights `softmax_q(H_k[p]ᵀ · W · H_l[q])`.
pub fn node_interaction(tape: &mut Tape, node_k: &EncodedNode, node_l: &EncodedNode, w_int: Var) -> Result<Var> {
    check_dims(tape, node_k, node_l)?;
    let proj = tape.matmul(node_k.h, w_int)?;
    let rows = node_k.layout.len();
    Ok(interaction_from_projection(tape, proj, rows, node_l)?.1)
}

/// Same as [`node_interaction`] but also returns the attention matrix.
pub fn node_interaction_weights(
    tape: &mut Tape,
    node_k: &EncodedNode,
    node_l: &EncodedNode,
    w_int: Var,
) -> Result<(Var, Var)> {
    check_dims(tape, node_k, node_l)?;
    let proj = tape.matmul(node_k.h, w_int)?;
    let rows = node_k.layout.len();
    interaction_from_projection(tape, proj, rows, node_l)
}

/// Node confidence `γ` (a `1 x K` distribution) via attention-over-attention
/// between each node's source side (tokens + `[SEP]`) and hypothesis side
/// (tokens + final `[SEP]`).
pub fn node_selection_scores(tape: &mut Tape, batch: &GraphBatch, w_sel: Var, sel_w: Var, sel_b: Var) -> Result<SelectionTrace> {
    let mut logits = Vec::with_capacity(batch.k());
    let mut beta_source = Vec::with_capacity(batch.k());
    let mut beta_hypothesis = Vec::with_capacity(batch.k());
    for node in batch.nodes() {
        let lay = &node.layout;
        let src = lay.source_range();
        let hyp = lay.hypothesis_range();
        let s = tape.slice_rows(node.h, src.start, src.end)?;
        let y = tape.slice_rows(node.h, hyp.start, hyp.end)?;
        let sw = tape.matmul(s, w_sel)?;
        let interaction = tape.matmul_nt(sw, y)?;

        // softmax over source positions, averaged over hypothesis positions
        let over_src = tape.softmax(interaction, Axis::Rows, None)?;
        let b_src = tape.mean(over_src, Axis::Cols, None)?;
        // softmax over hypothesis positions, averaged over source positions
        let over_hyp = tape.softmax(interaction, Axis::Cols, None)?;
        let b_hyp = tape.mean(over_hyp, Axis::Rows, None)?;

        let b_src_row = tape.transpose(b_src)?;
        let h_src = tape.matmul(b_src_row, s)?;
        let h_hyp = tape.matmul(b_hyp, y)?;
        let prod = tape.mul(h_src, h_hyp)?;
        let feats = tape.concat(&[prod, h_src, h_hyp], Axis::Cols)?;
        logits.push(tape.affine(feats, sel_w, sel_b)?);
        beta_source.push(b_src);
        beta_hypothesis.push(b_hyp);
    }
    let stacked = tape.concat(&logits, Axis::Rows)?;
    let row = tape.transpose(stacked)?;
    let gamma = tape.softmax(row, Axis::Cols, None)?;
    Ok(SelectionTrace {
        gamma,
        beta_source,
        beta_hypothesis,
    })
}

/// `V_k = Σ_l γ_l · V(l→k)`.
pub fn verification_reps(tape: &mut Tape, fine: &[Var], gamma: Var) -> Result<Var> {
    let k = tape.value(gamma).cols();
    if fine.len() != k || tape.value(gamma).rows() != 1 {
        return Err(Error::Contract(format!(
            "{} fine-grained views for γ of shape {:?}",
            fine.len(),
            tape.value(gamma).shape()
        )));
    }
    let shape = tape.value(fine[0]).shape();
    if fine.iter().any(|&v| tape.value(v).shape() != shape) {
        return Err(Error::Contract("fine-grained views disagree in shape".into()));
    }
    let mut acc: Option<Var> = None;
    for (l, &v) in fine.iter().enumerate() {
        let g = tape.slice_cols(gamma, l, l + 1)?;
        let term = tape.scale_by(v, g)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one node"))
}

/// Classifier logits and `P(y | token)` rows from `[H∘V ; H ; V]`.
pub fn token_quality(tape: &mut Tape, h: Var, v: Var, cls_w: Var, cls_b: Var) -> Result<(Var, Var)> {
    let prod = tape.mul(h, v)?;
    let feats = tape.concat(&[prod, h, v], Axis::Cols)?;
    let logits = tape.affine(feats, cls_w, cls_b)?;
    let probs = tape.softmax(logits, Axis::Cols, None)?;
    Ok((logits, probs))
}

/// Mean of `P(y=1)` over the hypothesis tokens and the final `[SEP]`.
pub fn sentence_score(tape: &mut Tape, probs: Var, layout: &PairLayout) -> Result<Var> {
    let rows = tape.value(probs).rows();
    if rows != layout.len() {
        return Err(Error::Contract(format!("{rows} probability rows for layout of {}", layout.len())));
    }
    let hyp = layout.hypothesis_range();
    let span = tape.slice_rows(probs, hyp.start, hyp.end)?;
    let correct = tape.slice_cols(span, 1, 2)?;
    tape.mean(correct, Axis::Rows, None)
}

/// Token-level detector without the graph: `softmax(H_i · W + b)`, scored as
/// the mean `P(y=1)` over the hypothesis side. Returns `(logits, probs, score)`.
pub fn ged_baseline(tape: &mut Tape, h: Var, layout: &PairLayout, ged_w: Var, ged_b: Var) -> Result<(Var, Var, Var)> {
    let logits = tape.affine(h, ged_w, ged_b)?;
    let probs = tape.softmax(logits, Axis::Cols, None)?;
    let score = sentence_score(tape, probs, layout)?;
    Ok((logits, probs, score))
}

/// Sentence-level correctness probability from the `[CLS]` row.
/// Returns `(logits, P(correct))`.
pub fn gqe_score(tape: &mut Tape, h: Var, gqe_w: Var, gqe_b: Var) -> Result<(Var, Var)> {
    let cls = tape.slice_rows(h, 0, 1)?;
    let logits = tape.affine(cls, gqe_w, gqe_b)?;
    let probs = tape.softmax(logits, Axis::Cols, None)?;
    let p = tape.slice_cols(probs, 1, 2)?;
    Ok((logits, p))
}

/// Predicted sentence F0.5 from the `[CLS]` row, in `(0, 1)`.
pub fn qe_score(tape: &mut Tape, h: Var, qe_w: Var, qe_b: Var) -> Result<Var> {
    let cls = tape.slice_rows(h, 0, 1)?;
    let z = tape.affine(cls, qe_w, qe_b)?;
    tape.sigmoid(z)
}

/// Everything the head computes for one group.
#[derive(Debug, Clone)]
pub struct GraphOutput {
    pub selection: SelectionTrace,
    /// Per node `(m+n+3) x 2` classifier logits.
    pub logits: Vec<Var>,
    /// Per node `(m+n+3) x 2` probabilities.
    pub probs: Vec<Var>,
    /// Per node `1 x 1` sentence score.
    pub scores: Vec<Var>,
    pub baselines: Option<Vec<BaselineOutput>>,
}

#[derive(Debug, Clone)]
pub struct BaselineOutput {
    pub ged_logits: Var,
    pub ged_probs: Var,
    pub ged_score: Var,
    pub gqe_logits: Var,
    pub gqe: Var,
    pub qe: Var,
}

/// Head forward pass over one graph.
pub struct Head<'a> {
    pub params: &'a HeadParams,
    pub config: &'a HeadConfig,
}

impl Head<'_> {
    /// `dropout_rng` enables dropout (training); pass `None` for inference.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &GraphBatch,
        with_baselines: bool,
        dropout_rng: Option<&mut R>,
    ) -> Result<GraphOutput> {
        let p = self.params;
        let w_int = tape.param(store, p.w_int);
        let w_sel = tape.param(store, p.w_sel);
        let sel_w = tape.param(store, p.sel_w);
        let sel_b = tape.param(store, p.sel_b);
        let cls_w = tape.param(store, p.cls_w);
        let cls_b = tape.param(store, p.cls_b);

        let selection = node_selection_scores(tape, batch, w_sel, sel_w, sel_b)?;
        let nodes = batch.nodes();
        let mut rng = dropout_rng;
        let mut logits = Vec::with_capacity(nodes.len());
        let mut probs = Vec::with_capacity(nodes.len());
        let mut scores = Vec::with_capacity(nodes.len());
        for node_k in nodes {
            let proj = tape.matmul(node_k.h, w_int)?;
            let rows = node_k.layout.len();
            let mut fine = Vec::with_capacity(nodes.len());
            for node_l in nodes {
                check_dims(tape, node_k, node_l)?;
                fine.push(interaction_from_projection(tape, proj, rows, node_l)?.1);
            }
            let v = verification_reps(tape, &fine, selection.gamma)?;
            let (h, v) = match rng.as_deref_mut() {
                Some(r) if self.config.dropout > 0.0 => {
                    (dropout(tape, node_k.h, self.config.dropout, r)?, dropout(tape, v, self.config.dropout, r)?)
                }
                _ => (node_k.h, v),
            };
            let (lg, pr) = token_quality(tape, h, v, cls_w, cls_b)?;
            scores.push(sentence_score(tape, pr, &node_k.layout)?);
            logits.push(lg);
            probs.push(pr);
        }

        let baselines = if with_baselines {
            let ged_w = tape.param(store, p.ged_w);
            let ged_b = tape.param(store, p.ged_b);
            let gqe_w = tape.param(store, p.gqe_w);
            let gqe_b = tape.param(store, p.gqe_b);
            let qe_w = tape.param(store, p.qe_w);
            let qe_b = tape.param(store, p.qe_b);
            let mut out = Vec::with_capacity(nodes.len());
            for node in nodes {
                let (ged_logits, ged_probs, ged_score) = ged_baseline(tape, node.h, &node.layout, ged_w, ged_b)?;
                let (gqe_logits, gqe) = gqe_score(tape, node.h, gqe_w, gqe_b)?;
                let qe = qe_score(tape, node.h, qe_w, qe_b)?;
                out.push(BaselineOutput {
                    ged_logits,
                    ged_probs,
                    ged_score,
                    gqe_logits,
                    gqe,
                    qe,
                });
            }
            Some(out)
        } else {
            None
        };

        Ok(GraphOutput {
            selection,
            logits,
            probs,
            scores,
            baselines,
        })
    }
}

fn dropout<R: Rng>(tape: &mut Tape, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
    let [r, c] = tape.value(x).shape();
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..r * c)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = tape.constant(Tensor::new(r, c, mask)?);
    tape.mul(x, m)
}
