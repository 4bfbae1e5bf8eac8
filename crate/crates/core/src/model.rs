//! Encoder, head and vocabulary bundled into one scoring model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Tape};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::group::HypothesisGroup;
use crate::head::{GraphBatch, GraphOutput, Head, HeadConfig, HeadParams};
use crate::textpipe::{Vocabulary, DEFAULT_MAX_LEN};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    /// Pair length limit, markers included.
    pub max_len: usize,
    pub lowercase: bool,
    pub min_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            max_len: DEFAULT_MAX_LEN,
            lowercase: false,
            min_count: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: HeadParams,
}

/// Plain-value scores for one hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisScores {
    /// Mean `P(y=1)` over hypothesis tokens and the final `[SEP]`.
    pub f: f64,
    /// `P(y=1)` for each hypothesis token that fit in the pair layout.
    pub token_probs: Vec<f64>,
    /// `P(y=1)` for each source token.
    pub source_probs: Vec<f64>,
    pub truncated: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ged: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gqe: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub qe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub gamma: Vec<f64>,
    pub hypotheses: Vec<HypothesisScores>,
}

impl Model {
    /// Fresh parameters drawn from `config.encoder.seed`.
    pub fn init(mut config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.encoder.vocab_size = vocab.len();
        config.encoder.max_positions = config.encoder.max_positions.max(config.max_len);
        let mut rng = ChaCha8Rng::seed_from_u64(config.encoder.seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::init(config.encoder.clone(), &mut store, &mut rng)?;
        let head = HeadParams::init(config.encoder.d_model, &mut store, &mut rng)?;
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            head,
        })
    }

    /// Wraps an existing parameter store, checking names and shapes.
    pub fn bind(config: ModelConfig, vocab: Vocabulary, store: ParamStore) -> Result<Self> {
        let encoder = Encoder::bind(config.encoder.clone(), &store)?;
        let head = HeadParams::bind(config.encoder.d_model, &store)?;
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            head,
        })
    }

    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        group: &HypothesisGroup,
        with_baselines: bool,
        dropout_rng: Option<&mut R>,
    ) -> Result<(GraphBatch, GraphOutput)> {
        let nodes = self
            .encoder
            .encode_group(tape, &self.store, group, &self.vocab, self.config.max_len)?;
        let batch = GraphBatch::new(nodes)?;
        let head = Head {
            params: &self.head,
            config: &self.config.head,
        };
        let out = head.forward(tape, &self.store, &batch, with_baselines, dropout_rng)?;
        Ok((batch, out))
    }

    /// Inference-mode scores for every hypothesis of `group`.
    pub fn score(&self, group: &HypothesisGroup, with_baselines: bool) -> Result<GroupScores> {
        let mut tape = Tape::new();
        let (batch, out) = self.forward::<ChaCha8Rng>(&mut tape, group, with_baselines, None)?;
        let gamma = tape.value(out.selection.gamma).data().to_vec();
        let mut hypotheses = Vec::with_capacity(group.k());
        for (k, (node, hyp)) in batch.nodes().iter().zip(&group.hypotheses).enumerate() {
            let probs = tape.value(out.probs[k]);
            let lay = &node.layout;
            let token_probs = (lay.m + 2..lay.m + 2 + lay.n).map(|p| probs.get(p, 1)).collect();
            let source_probs = (1..=lay.m).map(|p| probs.get(p, 1)).collect();
            let base = out.baselines.as_ref().map(|b| &b[k]);
            hypotheses.push(HypothesisScores {
                f: tape.value(out.scores[k]).item(),
                token_probs,
                source_probs,
                truncated: lay.n < hyp.tokens.len() || lay.m < group.source.len(),
                ged: base.map(|b| tape.value(b.ged_score).item()),
                gqe: base.map(|b| tape.value(b.gqe).item()),
                qe: base.map(|b| tape.value(b.qe).item()),
            });
        }
        Ok(GroupScores { gamma, hypotheses })
    }
}
