//! The unit of scoring and reranking: one source sentence with its K hypotheses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<String>,
    /// Decoder log-probability, when the producing system reports one.
    pub model_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisGroup {
    pub source: Vec<String>,
    pub hypotheses: Vec<Hypothesis>,
}

impl HypothesisGroup {
    pub fn new(source: Vec<String>, hypotheses: Vec<Hypothesis>) -> Result<Self> {
        if hypotheses.is_empty() {
            return Err(Error::Empty("hypothesis group"));
        }
        Ok(Self { source, hypotheses })
    }

    pub fn k(&self) -> usize {
        self.hypotheses.len()
    }
}
