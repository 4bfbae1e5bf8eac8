//! Contextual token representations for a ⟨source, hypothesis⟩ pair:
//! token + position + segment embeddings followed by a post-norm
//! transformer stack.

use rand::Rng;

use crate::diffcore::{Axis, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::group::HypothesisGroup;
use crate::textpipe::{encode_pair, PairLayout, Vocabulary};

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            ff_dim: 256,
            max_positions: crate::textpipe::DEFAULT_MAX_LEN,
            vocab_size: 0,
            seed: 13,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    seg_emb: ParamId,
    layers: Vec<LayerParams>,
}

/// Representation matrix of one node, one row per layout position.
#[derive(Debug, Clone)]
pub struct EncodedNode {
    pub h: Var,
    pub layout: PairLayout,
    /// Rows that hold real tokens. Nodes are never padded, so every entry is
    /// set; consumers still honour it.
    pub mask: Vec<bool>,
}

impl Encoder {
    /// Registers freshly initialised encoder parameters in `store`.
    pub fn init<R: Rng>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let tok_emb = store.normal("encoder.tok_emb", config.vocab_size, d, INIT_STD, rng)?;
        let pos_emb = store.normal("encoder.pos_emb", config.max_positions, d, INIT_STD, rng)?;
        let seg_emb = store.normal("encoder.seg_emb", 2, d, INIT_STD, rng)?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("encoder.layer{l}.{s}");
            let ff = config.ff_dim;
            layers.push(LayerParams {
                wq: store.normal(p("wq"), d, d, INIT_STD, rng)?,
                bq: store.constant(p("bq"), 1, d, 0.0)?,
                wk: store.normal(p("wk"), d, d, INIT_STD, rng)?,
                bk: store.constant(p("bk"), 1, d, 0.0)?,
                wv: store.normal(p("wv"), d, d, INIT_STD, rng)?,
                bv: store.constant(p("bv"), 1, d, 0.0)?,
                wo: store.normal(p("wo"), d, d, INIT_STD, rng)?,
                bo: store.constant(p("bo"), 1, d, 0.0)?,
                ln1_g: store.constant(p("ln1_g"), 1, d, 1.0)?,
                ln1_b: store.constant(p("ln1_b"), 1, d, 0.0)?,
                w1: store.normal(p("w1"), d, ff, INIT_STD, rng)?,
                b1: store.constant(p("b1"), 1, ff, 0.0)?,
                w2: store.normal(p("w2"), ff, d, INIT_STD, rng)?,
                b2: store.constant(p("b2"), 1, d, 0.0)?,
                ln2_g: store.constant(p("ln2_g"), 1, d, 1.0)?,
                ln2_b: store.constant(p("ln2_b"), 1, d, 0.0)?,
            });
        }
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            seg_emb,
            layers,
        })
    }

    /// Rebinds an encoder to parameters already present in `store`
    /// (e.g. loaded from a checkpoint), checking every shape.
    pub fn bind(config: EncoderConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ff = config.ff_dim;
        let get = |name: String, shape: [usize; 2]| -> Result<ParamId> {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
            let got = store.value(id).shape();
            if got != shape {
                return Err(Error::Contract(format!("`{name}` has shape {got:?}, expected {shape:?}")));
            }
            Ok(id)
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("encoder.layer{l}.{s}");
            layers.push(LayerParams {
                wq: get(p("wq"), [d, d])?,
                bq: get(p("bq"), [1, d])?,
                wk: get(p("wk"), [d, d])?,
                bk: get(p("bk"), [1, d])?,
                wv: get(p("wv"), [d, d])?,
                bv: get(p("bv"), [1, d])?,
                wo: get(p("wo"), [d, d])?,
                bo: get(p("bo"), [1, d])?,
                ln1_g: get(p("ln1_g"), [1, d])?,
                ln1_b: get(p("ln1_b"), [1, d])?,
                w1: get(p("w1"), [d, ff])?,
                b1: get(p("b1"), [1, ff])?,
                w2: get(p("w2"), [ff, d])?,
                b2: get(p("b2"), [1, d])?,
                ln2_g: get(p("ln2_g"), [1, d])?,
                ln2_b: get(p("ln2_b"), [1, d])?,
            });
        }
        Ok(Self {
            tok_emb: get("encoder.tok_emb".into(), [config.vocab_size, d])?,
            pos_emb: get("encoder.pos_emb".into(), [config.max_positions, d])?,
            seg_emb: get("encoder.seg_emb".into(), [2, d])?,
            layers,
            config,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    pub fn position_embedding(&self) -> ParamId {
        self.pos_emb
    }

    pub fn segment_embedding(&self) -> ParamId {
        self.seg_emb
    }

    pub fn encode_node(&self, tape: &mut Tape, store: &ParamStore, layout: &PairLayout) -> Result<EncodedNode> {
        let len = layout.len();
        if len > self.config.max_positions {
            return Err(Error::Contract(format!(
                "pair of {len} tokens exceeds {} positions",
                self.config.max_positions
            )));
        }
        if let Some(&bad) = layout.ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary")));
        }
        let tok = tape.param(store, self.tok_emb);
        let pos = tape.param(store, self.pos_emb);
        let seg = tape.param(store, self.seg_emb);
        let positions: Vec<usize> = (0..len).collect();
        let e_tok = tape.gather(tok, &layout.ids)?;
        let e_pos = tape.gather(pos, &positions)?;
        let e_seg = tape.gather(seg, &layout.segments())?;
        let sum = tape.add(e_tok, e_pos)?;
        let mut x = tape.add(sum, e_seg)?;
        for layer in &self.layers {
            x = self.layer_forward(tape, store, layer, x)?;
        }
        Ok(EncodedNode {
            h: x,
            layout: layout.clone(),
            mask: vec![true; len],
        })
    }

    fn layer_forward(&self, tape: &mut Tape, store: &ParamStore, p: &LayerParams, x: Var) -> Result<Var> {
        let d = self.config.d_model;
        let dh = d / self.config.heads;
        let mut param = |id| tape.param(store, id);
        let (wq, bq, wk, bk, wv, bv) = (param(p.wq), param(p.bq), param(p.wk), param(p.bk), param(p.wv), param(p.bv));
        let (wo, bo, g1, b1n) = (param(p.wo), param(p.bo), param(p.ln1_g), param(p.ln1_b));
        let (w1, b1, w2, b2, g2, b2n) = (param(p.w1), param(p.b1), param(p.w2), param(p.b2), param(p.ln2_g), param(p.ln2_b));

        let q = tape.affine(x, wq, bq)?;
        let k = tape.affine(x, wk, bk)?;
        let v = tape.affine(x, wv, bv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores, Axis::Cols, None)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat(&heads, Axis::Cols)?;
        let attn_out = tape.affine(merged, wo, bo)?;
        let res1 = tape.add(x, attn_out)?;
        let x1 = tape.layer_norm(res1, g1, b1n, LN_EPS)?;

        let hidden = tape.affine(x1, w1, b1)?;
        let hidden = tape.gelu(hidden)?;
        let ff_out = tape.affine(hidden, w2, b2)?;
        let res2 = tape.add(x1, ff_out)?;
        tape.layer_norm(res2, g2, b2n, LN_EPS)
    }

    /// Encodes every ⟨source, hypothesis⟩ pair of `group` independently, in order.
    pub fn encode_group(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        group: &HypothesisGroup,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Vec<EncodedNode>> {
        if group.hypotheses.is_empty() {
            return Err(Error::Empty("hypothesis group"));
        }
        group
            .hypotheses
            .iter()
            .map(|h| {
                let layout = encode_pair(&group.source, &h.tokens, vocab, max_len)?;
                self.encode_node(tape, store, &layout)
            })
            .collect()
    }
}
