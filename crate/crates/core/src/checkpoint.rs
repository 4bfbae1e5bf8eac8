//! Line-oriented checkpoint files.
//!
//! ```text
//! vernet-checkpoint 1
//! config <n>      n lines of `key = value`
//! vocab <n>       n lines of `token<TAB>id`
//! params <n>      n lines of `name rows cols trainable v...`
//! adam <step> <n> n pairs of lines `m name v...` and `v name v...`
//! epoch <e>
//! best <epoch> <metric> <n>   optional, followed by n parameter lines
//! end
//! ```
//!
//! Floats are written with round-trip formatting so a reload is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{ConfigMap, RunConfig};
use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::textpipe::Vocabulary;
use crate::trainer::{Adam, BestSnapshot, TrainConfig, TrainState};

pub const MAGIC: &str = "vernet-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: TrainState,
    pub best: Option<BestSnapshot>,
}

fn write_floats(out: &mut String, data: &[f64]) {
    for v in data {
        let _ = write!(out, " {v:?}");
    }
}

fn write_params(out: &mut String, store: &ParamStore) {
    for (_, p) in store.iter() {
        let _ = write!(
            out,
            "{} {} {} {}",
            p.name,
            p.value.rows(),
            p.value.cols(),
            u8::from(p.trainable)
        );
        write_floats(out, p.value.data());
        out.push('\n');
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let (i, line) = self.inner.next().ok_or(Error::Parse {
            line: self.last + 1,
            msg: "unexpected end of checkpoint".into(),
        })?;
        self.last = i + 1;
        Ok(line)
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.last,
            msg: msg.into(),
        }
    }

    /// Reads a `tag a b ...` header and returns its fields after the tag.
    fn header(&mut self, tag: &str) -> Result<Vec<&'a str>> {
        let line = self.next()?;
        let mut parts = line.split(' ');
        if parts.next() != Some(tag) {
            return Err(self.err(format!("expected `{tag}` section")));
        }
        Ok(parts.collect())
    }

    /// Reads a `tag n` header.
    fn count(&mut self, tag: &str) -> Result<usize> {
        let fields = self.header(tag)?;
        match fields.as_slice() {
            [n] => self.num(n),
            _ => Err(self.err(format!("`{tag}` header needs one count"))),
        }
    }

    fn num<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.err(format!("bad number `{s}`")))
    }

    fn floats(&self, parts: &[&str]) -> Result<Vec<f64>> {
        parts.iter().map(|s| self.num(s)).collect()
    }

    fn params(&mut self, n: usize) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for _ in 0..n {
            let line = self.next()?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() < 4 {
                return Err(self.err("short parameter line"));
            }
            let (r, c): (usize, usize) = (self.num(parts[1])?, self.num(parts[2])?);
            let data = self.floats(&parts[4..])?;
            let tensor = Tensor::new(r, c, data).map_err(|e| self.err(e.to_string()))?;
            let id = store.insert(parts[0], tensor)?;
            store.get_mut(id).trainable = parts[3] == "1";
        }
        Ok(store)
    }
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let s = &self.state;
        let mut out = format!("{MAGIC} {VERSION}\n");
        let config = RunConfig::model_map(&s.model.config, &s.config);
        let _ = writeln!(out, "config {}", config.0.len());
        out.push_str(&config.to_text());
        let _ = writeln!(out, "vocab {}", s.model.vocab.len());
        out.push_str(&s.model.vocab.to_tsv());
        let _ = writeln!(out, "params {}", s.model.store.len());
        write_params(&mut out, &s.model.store);
        let _ = writeln!(out, "adam {} {}", s.adam.step, s.adam.m.len());
        for ((_, p), (m, v)) in s.model.store.iter().zip(s.adam.m.iter().zip(&s.adam.v)) {
            let _ = write!(out, "m {}", p.name);
            write_floats(&mut out, m.data());
            let _ = write!(out, "\nv {}", p.name);
            write_floats(&mut out, v.data());
            out.push('\n');
        }
        let _ = writeln!(out, "epoch {}", s.epoch);
        if let Some(b) = &self.best {
            let _ = writeln!(out, "best {} {:?} {}", b.epoch, b.metric, b.store.len());
            write_params(&mut out, &b.store);
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = Lines {
            inner: text.lines().enumerate(),
            last: 0,
        };
        let head = lines.next()?;
        match head.split_once(' ') {
            Some((MAGIC, v)) if v == VERSION.to_string() => {}
            Some((MAGIC, v)) => return Err(Error::Version(format!("checkpoint version {v}, expected {VERSION}"))),
            _ => return Err(Error::Version("not a checkpoint file".into())),
        }

        let n: usize = lines.count("config")?;
        let mut cfg_text = String::new();
        for _ in 0..n {
            cfg_text.push_str(lines.next()?);
            cfg_text.push('\n');
        }
        let run = RunConfig::resolve(&[&ConfigMap::parse(&cfg_text)?]).map_err(|e| Error::Version(format!("checkpoint config: {e}")))?;

        let n: usize = lines.count("vocab")?;
        let mut vocab_text = String::new();
        for _ in 0..n {
            vocab_text.push_str(lines.next()?);
            vocab_text.push('\n');
        }
        let vocab = Vocabulary::from_tsv(&vocab_text)?;

        let n: usize = lines.count("params")?;
        let store = lines.params(n)?;

        let adam_head = lines.header("adam")?;
        if adam_head.len() != 2 {
            return Err(lines.err("adam header needs step and count"));
        }
        let step: u64 = lines.num(adam_head[0])?;
        let n: usize = lines.num(adam_head[1])?;
        if n != store.len() {
            return Err(lines.err("optimizer moments do not match parameters"));
        }
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for (_, p) in store.iter() {
            let [r, c] = p.value.shape();
            for (tag, dest) in [("m", &mut m), ("v", &mut v)] {
                let line = lines.next()?;
                let parts: Vec<&str> = line.split(' ').collect();
                if parts.len() < 2 || parts[0] != tag || parts[1] != p.name {
                    return Err(lines.err(format!("expected `{tag} {}`", p.name)));
                }
                let data = lines.floats(&parts[2..])?;
                dest.push(Tensor::new(r, c, data).map_err(|e| lines.err(e.to_string()))?);
            }
        }

        let epoch: usize = lines.count("epoch")?;
        let next = lines.next()?;
        let best = if let Some(rest) = next.strip_prefix("best ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            if parts.len() != 3 {
                return Err(lines.err("best header needs epoch, metric and count"));
            }
            let (be, metric, n): (usize, f64, usize) = (lines.num(parts[0])?, lines.num(parts[1])?, lines.num(parts[2])?);
            let store = lines.params(n)?;
            if lines.next()? != "end" {
                return Err(lines.err("expected `end`"));
            }
            Some(BestSnapshot {
                epoch: be,
                metric,
                store,
            })
        } else if next == "end" {
            None
        } else {
            return Err(lines.err("expected `best` or `end`"));
        };

        let train: TrainConfig = run.train;
        let mut model_config = run.model;
        model_config.encoder.vocab_size = vocab.len();
        let model = Model::bind(model_config, vocab, store).map_err(|e| Error::Version(format!("checkpoint parameters: {e}")))?;
        if let Some(b) = &best {
            Model::bind(model.config.clone(), model.vocab.clone(), b.store.clone())
                .map_err(|e| Error::Version(format!("checkpoint best parameters: {e}")))?;
        }
        let adam = Adam {
            lr: train.lr,
            beta1: train.beta1,
            beta2: train.beta2,
            eps: train.eps,
            step,
            m,
            v,
        };
        Ok(Self {
            state: TrainState {
                model,
                adam,
                config: train,
                epoch,
            },
            best,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// The model used for scoring: best-dev parameters when recorded.
    pub fn scoring_model(&self) -> Model {
        let mut model = self.state.model.clone();
        if let Some(b) = &self.best {
            model.store = b.store.clone();
        }
        model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::model::ModelConfig;
    use crate::synthdata::{generate, CorruptionConfig, SynthConfig};
    use crate::trainer::{label_group, LabeledGroup, LogRecord};

    fn data() -> (Vocabulary, Vec<LabeledGroup>) {
        let ex = generate(&SynthConfig {
            groups: 12,
            corruption: CorruptionConfig {
                k: 2,
                rate: 0.2,
                ..CorruptionConfig::default()
            },
        })
        .unwrap();
        let corpus: Vec<Vec<String>> = ex.iter().flat_map(|e| [e.gold.clone(), e.group.source.clone()]).collect();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let groups = ex
            .into_iter()
            .map(|e| label_group(e.group, &[e.gold]).unwrap())
            .collect();
        (vocab, groups)
    }

    fn state(vocab: Vocabulary) -> TrainState {
        let config = ModelConfig {
            encoder: EncoderConfig {
                d_model: 8,
                layers: 1,
                heads: 2,
                ff_dim: 16,
                max_positions: 40,
                vocab_size: 0,
                seed: 5,
            },
            max_len: 40,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            lr: 1e-3,
            batch_size: 2,
            accumulation: 2,
            epochs: 3,
            seed: 4,
            ..TrainConfig::default()
        };
        TrainState::new(Model::init(config, vocab).unwrap(), train).unwrap()
    }

    fn losses(records: &[LogRecord]) -> Vec<f64> {
        records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn resume_reproduces_the_loss_trajectory() {
        let (vocab, groups) = data();
        let mut straight = state(vocab.clone());
        let mut expected = Vec::new();
        for _ in 0..3 {
            expected.extend(losses(&straight.run_epoch(&groups).unwrap()));
        }

        let mut first = state(vocab);
        let mut got = losses(&first.run_epoch(&groups).unwrap());
        let text = Checkpoint {
            state: first,
            best: None,
        }
        .to_text();
        let mut resumed = Checkpoint::from_text(&text).unwrap().state;
        for _ in 0..2 {
            got.extend(losses(&resumed.run_epoch(&groups).unwrap()));
        }
        assert_eq!(got.len(), expected.len());
        for (a, b) in got.iter().zip(&expected) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let (vocab, groups) = data();
        let mut s = state(vocab);
        let best = s.train(&groups, &groups[..4], |_| {}).unwrap();
        let ck = Checkpoint { state: s, best };
        let text = ck.to_text();
        let back = Checkpoint::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.best.as_ref().map(|b| b.epoch), ck.best.as_ref().map(|b| b.epoch));
        let g = &groups[0].group;
        assert_eq!(back.scoring_model().score(g, false).unwrap(), ck.scoring_model().score(g, false).unwrap());
    }

    #[test]
    fn version_and_shape_mismatches_are_rejected() {
        let (vocab, _) = data();
        let text = Checkpoint {
            state: state(vocab),
            best: None,
        }
        .to_text();
        let bumped = text.replacen("vernet-checkpoint 1", "vernet-checkpoint 2", 1);
        assert!(matches!(Checkpoint::from_text(&bumped), Err(Error::Version(_))));
        assert!(matches!(Checkpoint::from_text("hello\n"), Err(Error::Version(_))));
        let resized = text.replacen("model.d_model = 8", "model.d_model = 16", 1);
        assert!(matches!(Checkpoint::from_text(&resized), Err(Error::Version(_))));
        let truncated = &text[..text.len() / 2];
        assert!(matches!(Checkpoint::from_text(truncated), Err(Error::Parse { .. })));
    }
}
