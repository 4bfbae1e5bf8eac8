//! Coordinate Ascent over linear hypothesis features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::group::HypothesisGroup;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Feature {
    /// Decoder log-probability.
    ModelScore,
    /// Sentence quality score from the verification model.
    VernetF,
    /// `|hypothesis| / |source|`.
    LengthRatio,
}

impl Feature {
    pub fn name(self) -> &'static str {
        match self {
            Self::ModelScore => "model_score",
            Self::VernetF => "vernet_f",
            Self::LengthRatio => "length_ratio",
        }
    }
}

impl std::str::FromStr for Feature {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model_score" => Ok(Self::ModelScore),
            "vernet_f" => Ok(Self::VernetF),
            "length_ratio" => Ok(Self::LengthRatio),
            _ => Err(Error::Config(format!("unknown feature `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSpec {
    pub model_score: bool,
    pub vernet_f: bool,
    pub length_ratio: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            model_score: true,
            vernet_f: true,
            length_ratio: false,
        }
    }
}

/// Per-group feature matrix, one row per hypothesis in beam order.
pub type GroupFeatures = Vec<Vec<f64>>;

/// Builds feature rows for every group. A decoder score missing from any
/// hypothesis drops that feature for the whole corpus.
pub fn build_features(
    groups: &[HypothesisGroup],
    vernet_f: Option<&[Vec<f64>]>,
    spec: FeatureSpec,
) -> Result<(Vec<Feature>, Vec<GroupFeatures>)> {
    let mut features = Vec::new();
    if spec.model_score {
        if groups.iter().all(|g| g.hypotheses.iter().all(|h| h.model_score.is_some())) {
            features.push(Feature::ModelScore);
        } else {
            log::warn!("decoder score missing for some hypotheses; dropping model_score corpus-wide");
        }
    }
    if spec.vernet_f {
        let f = vernet_f.ok_or_else(|| Error::Contract("vernet_f feature requested without scores".into()))?;
        if f.len() != groups.len() || f.iter().zip(groups).any(|(s, g)| s.len() != g.k()) {
            return Err(Error::Contract("vernet scores do not align with groups".into()));
        }
        features.push(Feature::VernetF);
    }
    if spec.length_ratio {
        features.push(Feature::LengthRatio);
    }
    if features.is_empty() {
        return Err(Error::Empty("feature set"));
    }
    let rows = groups
        .iter()
        .enumerate()
        .map(|(gi, g)| {
            g.hypotheses
                .iter()
                .enumerate()
                .map(|(k, h)| {
                    features
                        .iter()
                        .map(|f| match f {
                            Feature::ModelScore => h.model_score.expect("checked"),
                            Feature::VernetF => vernet_f.expect("checked")[gi][k],
                            Feature::LengthRatio => h.tokens.len() as f64 / g.source.len().max(1) as f64,
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok((features, rows))
}

/// A training group: features plus the gold sentence F0.5 of each hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct RankGroup {
    pub features: GroupFeatures,
    pub gold: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankerWeights {
    pub features: Vec<Feature>,
    /// On the raw feature scale, `Σ|w| = 1`.
    pub weights: Vec<f64>,
}

impl RankerWeights {
    pub fn uniform(features: Vec<Feature>) -> Self {
        let w = 1.0 / features.len() as f64;
        Self {
            weights: vec![w; features.len()],
            features,
        }
    }

    pub fn to_tsv(&self) -> String {
        self.features
            .iter()
            .zip(&self.weights)
            .map(|(f, w)| format!("{}\t{w:?}\n", f.name()))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut features = Vec::new();
        let mut weights = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse = |msg: String| Error::Parse { line: i + 1, msg };
            let (name, w) = line.split_once('\t').ok_or_else(|| parse("expected `feature<TAB>weight`".into()))?;
            features.push(name.parse().map_err(|e: Error| parse(e.to_string()))?);
            weights.push(w.trim().parse::<f64>().map_err(|e| parse(e.to_string()))?);
        }
        if features.is_empty() {
            return Err(Error::Empty("weights file"));
        }
        Ok(Self { features, weights })
    }
}

pub fn linear_score(row: &[f64], weights: &[f64]) -> f64 {
    row.iter().zip(weights).map(|(x, w)| x * w).sum()
}

/// Hypothesis indices, best first. Ties keep beam order.
pub fn rank(features: &[Vec<f64>], weights: &[f64]) -> Vec<usize> {
    let scores: Vec<f64> = features.iter().map(|r| linear_score(r, weights)).collect();
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

fn top1(features: &[Vec<f64>], weights: &[f64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (k, r) in features.iter().enumerate() {
        let s = linear_score(r, weights);
        if s > best_score {
            best = k;
            best_score = s;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankObjective {
    /// Mean gold F0.5 of the top-ranked hypothesis.
    TopF05,
    /// Fraction of groups whose top hypothesis has the group's best gold F0.5.
    PrecisionAt1,
}

impl std::str::FromStr for RankObjective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top_f05" => Ok(Self::TopF05),
            "p_at_1" => Ok(Self::PrecisionAt1),
            _ => Err(Error::Config(format!("unknown rank objective `{s}`"))),
        }
    }
}

impl std::fmt::Display for RankObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TopF05 => "top_f05",
            Self::PrecisionAt1 => "p_at_1",
        })
    }
}

pub fn objective(groups: &[RankGroup], weights: &[f64], kind: RankObjective) -> f64 {
    let total: f64 = groups
        .iter()
        .map(|g| {
            let top = g.gold[top1(&g.features, weights)];
            match kind {
                RankObjective::TopF05 => top,
                RankObjective::PrecisionAt1 => {
                    let best = g.gold.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    f64::from(u8::from(top == best))
                }
            }
        })
        .sum();
    total / groups.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaConfig {
    pub delta: f64,
    /// Line search tries `w ± delta·2^t` for `t = 0..=max_doublings`.
    pub max_doublings: u32,
    pub restarts: usize,
    pub max_passes: usize,
    pub objective: RankObjective,
    pub normalize: bool,
    pub seed: u64,
}

impl Default for CaConfig {
    fn default() -> Self {
        Self {
            delta: 0.05,
            max_doublings: 6,
            restarts: 5,
            max_passes: 100,
            objective: RankObjective::TopF05,
            normalize: true,
            seed: 29,
        }
    }
}

/// Per-feature z-score parameters fitted over every training hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(groups: &[RankGroup], arity: usize) -> Self {
        let rows: Vec<&Vec<f64>> = groups.iter().flat_map(|g| &g.features).collect();
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..arity).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..arity)
            .map(|j| {
                let v = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(arity: usize) -> Self {
        Self {
            mean: vec![0.0; arity],
            std: vec![1.0; arity],
        }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, x)| (x - self.mean[j]) / self.std[j])
            .collect()
    }

    /// Weights on the raw scale inducing the same ranking as `w` on the
    /// normalized scale. The mean shift is common to every hypothesis.
    pub fn fold(&self, w: &[f64]) -> Vec<f64> {
        l1_normalize(&w.iter().zip(&self.std).map(|(w, s)| w / s).collect::<Vec<_>>())
    }
}

fn l1_normalize(w: &[f64]) -> Vec<f64> {
    let norm: f64 = w.iter().map(|x| x.abs()).sum();
    if norm == 0.0 {
        w.to_vec()
    } else {
        w.iter().map(|x| x / norm).collect()
    }
}

#[derive(Debug, Clone)]
pub struct CaOutcome {
    pub weights: RankerWeights,
    /// Weights on the normalized scale.
    pub normalized_weights: Vec<f64>,
    pub normalizer: Normalizer,
    pub objective: f64,
    /// Objective after each accepted step of the winning restart, starting
    /// with its initial value.
    pub trace: Vec<f64>,
    pub restart_objectives: Vec<f64>,
}

fn ascend(groups: &[RankGroup], mut w: Vec<f64>, config: &CaConfig) -> (Vec<f64>, f64, Vec<f64>) {
    let mut current = objective(groups, &w, config.objective);
    let mut trace = vec![current];
    for _ in 0..config.max_passes {
        let mut improved = false;
        for i in 0..w.len() {
            let mut steps: Vec<f64> = (0..=config.max_doublings)
                .flat_map(|t| {
                    let s = config.delta * 2f64.powi(t as i32);
                    [w[i] + s, w[i] - s]
                })
                .collect();
            steps.push(-w[i]);
            let mut best: Option<(f64, Vec<f64>)> = None;
            for v in steps {
                let mut cand = w.clone();
                cand[i] = v;
                if cand.iter().all(|x| *x == 0.0) {
                    continue;
                }
                let obj = objective(groups, &cand, config.objective);
                if obj > best.as_ref().map_or(current, |b| b.0) {
                    best = Some((obj, cand));
                }
            }
            if let Some((obj, cand)) = best {
                w = l1_normalize(&cand);
                current = obj;
                trace.push(obj);
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    (w, current, trace)
}

/// Learns linear weights maximizing the ranking objective, keeping the best
/// of `config.restarts` runs. The first run starts from uniform weights, the
/// rest from seeded random ones.
pub fn coordinate_ascent(groups: &[RankGroup], features: Vec<Feature>, config: &CaConfig) -> Result<CaOutcome> {
    if groups.is_empty() {
        return Err(Error::Empty("ranking groups"));
    }
    let arity = features.len();
    for g in groups {
        if g.features.is_empty() || g.features.len() != g.gold.len() || g.features.iter().any(|r| r.len() != arity) {
            return Err(Error::Contract("each group needs one feature row and one gold score per hypothesis".into()));
        }
    }
    let normalizer = if config.normalize {
        Normalizer::fit(groups, arity)
    } else {
        Normalizer::identity(arity)
    };
    let normed: Vec<RankGroup> = groups
        .iter()
        .map(|g| RankGroup {
            features: g.features.iter().map(|r| normalizer.apply(r)).collect(),
            gold: g.gold.clone(),
        })
        .collect();
    let uniform = vec![1.0 / arity as f64; arity];

    let all_tied = normed.iter().all(|g| g.features.iter().all(|r| r == &g.features[0]));
    if all_tied {
        log::warn!("every group has identical hypothesis features; returning uniform weights");
        let obj = objective(&normed, &uniform, config.objective);
        return Ok(CaOutcome {
            weights: RankerWeights {
                weights: normalizer.fold(&uniform),
                features,
            },
            normalized_weights: uniform,
            normalizer,
            objective: obj,
            trace: vec![obj],
            restart_objectives: vec![obj],
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(Vec<f64>, f64, Vec<f64>)> = None;
    let mut restart_objectives = Vec::with_capacity(config.restarts.max(1));
    for r in 0..config.restarts.max(1) {
        let start = if r == 0 {
            uniform.clone()
        } else {
            let raw: Vec<f64> = (0..arity).map(|_| rng.random_range(-1.0..1.0)).collect();
            l1_normalize(&raw)
        };
        let run = ascend(&normed, start, config);
        log::debug!("restart {r}: objective {}", run.1);
        restart_objectives.push(run.1);
        if best.as_ref().is_none_or(|b| run.1 > b.1) {
            best = Some(run);
        }
    }
    let (w, obj, trace) = best.expect("at least one restart");
    Ok(CaOutcome {
        weights: RankerWeights {
            weights: normalizer.fold(&w),
            features,
        },
        normalized_weights: w,
        normalizer,
        objective: obj,
        trace,
        restart_objectives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::Hypothesis;

    fn synthetic(n: usize, seed: u64) -> Vec<RankGroup> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let k = rng.random_range(2..6);
                let gold: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
                let features = gold
                    .iter()
                    .map(|g| vec![g + rng.random_range(-0.3..0.3), rng.random_range(-5.0..5.0)])
                    .collect();
                RankGroup { features, gold }
            })
            .collect()
    }

    /// Exact maximum over all 2-D weight directions: the ranking only changes
    /// where two hypotheses tie, so probing every critical angle and every
    /// midpoint between consecutive ones covers all reachable rankings.
    fn exact_2d_max(groups: &[RankGroup]) -> f64 {
        let mut angles = vec![0.0, std::f64::consts::PI];
        for g in groups {
            for a in &g.features {
                for b in &g.features {
                    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
                    if dx == 0.0 && dy == 0.0 {
                        continue;
                    }
                    let t = (-dx).atan2(dy);
                    angles.push(t.rem_euclid(std::f64::consts::PI));
                }
            }
        }
        angles.sort_by(f64::total_cmp);
        let mut probes = Vec::new();
        for w in angles.windows(2) {
            probes.push((w[0] + w[1]) / 2.0);
        }
        probes.extend(angles.iter().cloned());
        let mut best = f64::NEG_INFINITY;
        for t in probes {
            for sign in [1.0, -1.0] {
                let w = [sign * t.cos(), sign * t.sin()];
                best = best.max(objective(groups, &w, RankObjective::TopF05));
            }
        }
        best
    }

    #[test]
    fn oracle_feature_reaches_the_ceiling() {
        let groups: Vec<RankGroup> = synthetic(50, 1)
            .into_iter()
            .map(|g| RankGroup {
                features: g.gold.iter().map(|x| vec![*x]).collect(),
                gold: g.gold,
            })
            .collect();
        let out = coordinate_ascent(&groups, vec![Feature::VernetF], &CaConfig::default()).unwrap();
        assert!(out.weights.weights[0] > 0.0);
        let ceiling = groups
            .iter()
            .map(|g| g.gold.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / groups.len() as f64;
        assert!((out.objective - ceiling).abs() < 1e-12);
    }

    #[test]
    fn matches_exhaustive_direction_search() {
        let groups = synthetic(80, 2);
        let out = coordinate_ascent(&groups, vec![Feature::VernetF, Feature::ModelScore], &CaConfig::default()).unwrap();
        let exact = exact_2d_max(&groups);
        assert!((out.objective - exact).abs() < 1e-9, "{} vs {exact}", out.objective);
        let raw = objective(&groups, &out.weights.weights, RankObjective::TopF05);
        assert!((raw - out.objective).abs() < 1e-12);
        assert!(out.weights.weights[0] > 0.0);
        assert!((out.weights.weights.iter().map(|w| w.abs()).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accepted_steps_strictly_improve() {
        for seed in 0..5 {
            let groups = synthetic(40, 10 + seed);
            let out = coordinate_ascent(&groups, vec![Feature::VernetF, Feature::ModelScore], &CaConfig::default()).unwrap();
            assert!(out.trace.windows(2).all(|w| w[1] > w[0]));
            assert!(out.objective >= out.trace[0]);
            assert!(out.objective >= out.restart_objectives.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
    }

    #[test]
    fn learning_is_seeded() {
        let groups = synthetic(40, 3);
        let cfg = CaConfig {
            objective: RankObjective::PrecisionAt1,
            ..CaConfig::default()
        };
        let a = coordinate_ascent(&groups, vec![Feature::VernetF, Feature::ModelScore], &cfg).unwrap();
        let b = coordinate_ascent(&groups, vec![Feature::VernetF, Feature::ModelScore], &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn all_ties_return_uniform() {
        let groups = vec![
            RankGroup {
                features: vec![vec![1.0, 2.0], vec![1.0, 2.0]],
                gold: vec![0.2, 0.9],
            };
            3
        ];
        let out = coordinate_ascent(&groups, vec![Feature::ModelScore, Feature::VernetF], &CaConfig::default()).unwrap();
        assert_eq!(out.normalized_weights, vec![0.5, 0.5]);
    }

    #[test]
    fn hand_ranking_cases() {
        let f = vec![vec![0.9, 0.2], vec![0.1, 0.8]];
        assert_eq!(rank(&f, &[1.0, 0.0])[0], 0);
        assert_eq!(rank(&f, &[0.0, 1.0])[0], 1);
        assert_eq!(rank(&[vec![0.3, 0.1]], &[0.4, 0.6]), vec![0]);
        let ties = vec![vec![1.0], vec![1.0], vec![2.0]];
        assert_eq!(rank(&ties, &[1.0]), vec![2, 0, 1]);
    }

    #[test]
    fn positive_scaling_keeps_the_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let f: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let w = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let c = rng.random_range(0.01..100.0);
            assert_eq!(rank(&f, &w), rank(&f, &[w[0] * c, w[1] * c]));
        }
    }

    #[test]
    fn zero_vernet_weight_keeps_beam_order() {
        let groups: Vec<HypothesisGroup> = (0..3)
            .map(|g| {
                HypothesisGroup::new(
                    vec!["a".into()],
                    (0..4)
                        .map(|k| Hypothesis {
                            tokens: vec!["a".into(); k + 1],
                            model_score: Some(-(k as f64) - g as f64),
                        })
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let f = vec![vec![0.1, 0.9, 0.3, 0.7]; 3];
        let (names, rows) = build_features(&groups, Some(&f), FeatureSpec::default()).unwrap();
        assert_eq!(names, vec![Feature::ModelScore, Feature::VernetF]);
        for r in rows {
            assert_eq!(rank(&r, &[1.0, 0.0]), vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn missing_decoder_scores_drop_the_feature() {
        let mut g = HypothesisGroup::new(
            vec!["a".into(), "b".into()],
            vec![
                Hypothesis {
                    tokens: vec!["a".into()],
                    model_score: Some(-1.0),
                },
                Hypothesis {
                    tokens: vec!["b".into(), "b".into(), "b".into()],
                    model_score: None,
                },
            ],
        )
        .unwrap();
        let spec = FeatureSpec {
            length_ratio: true,
            ..FeatureSpec::default()
        };
        let f = vec![vec![0.4, 0.6]];
        let (names, rows) = build_features(std::slice::from_ref(&g), Some(&f), spec).unwrap();
        assert_eq!(names, vec![Feature::VernetF, Feature::LengthRatio]);
        assert_eq!(rows[0], vec![vec![0.4, 0.5], vec![0.6, 1.5]]);
        g.hypotheses[1].model_score = Some(-2.0);
        let (names, _) = build_features(&[g], Some(&f), spec).unwrap();
        assert_eq!(names.len(), 3);
    }

    #[test]
    fn weights_round_trip_through_tsv() {
        let w = RankerWeights {
            features: vec![Feature::ModelScore, Feature::VernetF],
            weights: vec![0.1 + 0.2, -0.7],
        };
        assert_eq!(RankerWeights::from_tsv(&w.to_tsv()).unwrap(), w);
        assert!(matches!(
            RankerWeights::from_tsv("model_score 0.5\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
