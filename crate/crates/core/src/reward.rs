//! Bradley–Terry preference reward model over hand-built scene features, and
//! z-normalized ensemble scoring of named reward signals.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backend::sim::{attributes, Simulation};
use crate::backend::report::{aspect_keys, MAX_SCORE};
use crate::backend::{BackendKind, ErrorModel, Verifier, VerifierReport, VerifyRequest};
use crate::error::{Error, Result};
use crate::prompt::{PromptSampler, StructuredPrompt};
use crate::rule::verify_rule;
use crate::scene::{ContentHash, SceneGraph};
use crate::seed;
use crate::vocab::Vocabulary;

pub const FEATURE_SPEC: &str = "scene-rubric-v1";
pub const FEATURE_NAMES: [&str; 7] = [
    "presence",
    "color",
    "count",
    "relation",
    "exclusivity",
    "quality",
    "count_delta",
];
pub const FEATURE_DIM: usize = FEATURE_NAMES.len();
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Rule,
    Reward,
    Longshort,
    Edit,
    Cot,
}

impl PairSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PairSource::Rule => "rule",
            PairSource::Reward => "reward",
            PairSource::Longshort => "longshort",
            PairSource::Edit => "edit",
            PairSource::Cot => "cot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: StructuredPrompt,
    pub winner: SceneGraph,
    pub loser: SceneGraph,
    pub source: PairSource,
}

impl PreferencePair {
    pub fn new(prompt: StructuredPrompt, winner: SceneGraph, loser: SceneGraph, source: PairSource) -> Result<Self> {
        if winner.content_hash() == loser.content_hash() {
            return Err(Error::invalid("winner and loser are the same scene"));
        }
        Ok(PreferencePair {
            prompt,
            winner,
            loser,
            source,
        })
    }

    fn identity(&self) -> (String, ContentHash, ContentHash) {
        (self.prompt.id.clone(), self.winner.content_hash(), self.loser.content_hash())
    }
}

/// Rubric fractions per fact kind, the quality scalar, and the mean relative
/// count error (negated, so more is better).
pub fn featurize(prompt: &StructuredPrompt, scene: &SceneGraph, vocab: &Vocabulary) -> Result<Vec<f64>> {
    let b = verify_rule(prompt, scene, vocab)?.breakdown;
    let delta = prompt
        .objects
        .iter()
        .map(|spec| {
            let n = scene.count_of(&spec.class) as f64;
            let want = f64::from(spec.count);
            (n - want).abs() / want
        })
        .sum::<f64>()
        / prompt.objects.len() as f64;
    Ok(vec![
        b.presence.fraction(),
        b.color.fraction(),
        b.count.fraction(),
        b.relation.fraction(),
        b.exclusivity.fraction(),
        scene.quality,
        -delta,
    ])
}

/// Winner and loser features of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub winner: Vec<f64>,
    pub loser: Vec<f64>,
}

pub fn featurize_pairs(pairs: &[PreferencePair], vocab: &Vocabulary) -> Result<Vec<FeaturePair>> {
    pairs
        .iter()
        .map(|p| {
            Ok(FeaturePair {
                winner: featurize(&p.prompt, &p.winner, vocab)?,
                loser: featurize(&p.prompt, &p.loser, vocab)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub feature_spec: String,
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    #[serde(flatten)]
    model: RewardModel,
}

impl RewardModel {
    pub fn zeros() -> Self {
        RewardModel {
            feature_spec: FEATURE_SPEC.into(),
            weights: vec![0.0; FEATURE_DIM],
            bias: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_spec != FEATURE_SPEC {
            return Err(Error::invalid(format!(
                "reward model expects features {:?}, featurizer is {FEATURE_SPEC:?}",
                self.feature_spec
            )));
        }
        if self.weights.len() != FEATURE_DIM {
            return Err(Error::invalid(format!("expected {FEATURE_DIM} weights, got {}", self.weights.len())));
        }
        if !self.weights.iter().chain([&self.bias]).all(|w| w.is_finite()) {
            return Err(Error::invalid("reward model has non-finite entries"));
        }
        Ok(())
    }

    pub fn score_features(&self, features: &[f64]) -> f64 {
        dot(&self.weights, features) + self.bias
    }

    pub fn score(&self, prompt: &StructuredPrompt, scene: &SceneGraph, vocab: &Vocabulary) -> Result<f64> {
        Ok(self.score_features(&featurize(prompt, scene, vocab)?))
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        serde_json::to_string_pretty(&ck).expect("checkpoint serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::from(e).with_raw(text))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::schema("version", format!("unsupported checkpoint version {}", ck.version)));
        }
        ck.model.validate()?;
        Ok(ck.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn gap(model: &RewardModel, pair: &FeaturePair) -> f64 {
    model
        .weights
        .iter()
        .zip(pair.winner.iter().zip(&pair.loser))
        .map(|(w, (a, b))| w * (a - b))
        .sum()
}

/// Mean of -ln σ(r(winner) - r(loser)).
pub fn bt_loss_features(model: &RewardModel, pairs: &[FeaturePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("bt_loss needs at least one pair"));
    }
    Ok(pairs.iter().map(|p| softplus(-gap(model, p))).sum::<f64>() / pairs.len() as f64)
}

/// Gradient of the loss w.r.t. (weights..., bias). The bias entry is always 0.
pub fn bt_grad_features(model: &RewardModel, pairs: &[FeaturePair]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::invalid("bt_grad needs at least one pair"));
    }
    let mut g = vec![0.0; model.weights.len() + 1];
    for p in pairs {
        let coef = 1.0 - sigmoid(gap(model, p));
        for (gi, (a, b)) in g.iter_mut().zip(p.winner.iter().zip(&p.loser)) {
            *gi -= coef * (a - b);
        }
    }
    let n = pairs.len() as f64;
    for gi in g.iter_mut() {
        *gi /= n;
    }
    Ok(g)
}

pub fn bt_loss(model: &RewardModel, pairs: &[PreferencePair], vocab: &Vocabulary) -> Result<f64> {
    bt_loss_features(model, &featurize_pairs(pairs, vocab)?)
}

pub fn bt_grad(model: &RewardModel, pairs: &[PreferencePair], vocab: &Vocabulary) -> Result<Vec<f64>> {
    bt_grad_features(model, &featurize_pairs(pairs, vocab)?)
}

/// Fraction of pairs the model ranks strictly in the right order.
pub fn pairwise_accuracy(model: &RewardModel, pairs: &[FeaturePair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let right = pairs
        .iter()
        .filter(|p| model.score_features(&p.winner) > model.score_features(&p.loser))
        .count();
    right as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Minibatch size; 0 means full batch.
    pub batch: usize,
    pub seed: u64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.5,
            epochs: 200,
            batch: 0,
            seed: 0,
            l2: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub held_out_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: RewardModel,
    pub log: Vec<EpochLog>,
    pub train_loss: f64,
    pub held_out_accuracy: f64,
}

/// Gradient descent from the zero model. `log` holds one entry per epoch,
/// measured after the epoch's updates.
pub fn train_bt(
    train: &[PreferencePair],
    held_out: &[PreferencePair],
    cfg: &TrainConfig,
    vocab: &Vocabulary,
) -> Result<TrainOutcome> {
    let train_ids: HashSet<_> = train.iter().map(PreferencePair::identity).collect();
    if held_out.iter().any(|p| train_ids.contains(&p.identity())) {
        return Err(Error::invalid("train and held-out pairs overlap"));
    }
    train_bt_features(&featurize_pairs(train, vocab)?, &featurize_pairs(held_out, vocab)?, cfg)
}

pub fn train_bt_features(train: &[FeaturePair], held_out: &[FeaturePair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    if !(cfg.lr >= 0.0 && cfg.l2 >= 0.0) {
        return Err(Error::invalid("lr and l2 must be non-negative"));
    }
    let mut model = RewardModel::zeros();
    let mut rng = seed::sub_rng(cfg.seed, "train_bt");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch = if cfg.batch == 0 { train.len() } else { cfg.batch.min(train.len()) };
    let objective = |m: &RewardModel| -> Result<f64> {
        Ok(bt_loss_features(m, train)? + 0.5 * cfg.l2 * dot(&m.weights, &m.weights))
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        if batch < train.len() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let sub: Vec<FeaturePair> = if batch == train.len() {
                Vec::new()
            } else {
                chunk.iter().map(|&i| train[i].clone()).collect()
            };
            let pairs = if sub.is_empty() { train } else { &sub[..] };
            let g = bt_grad_features(&model, pairs)?;
            for (w, gi) in model.weights.iter_mut().zip(&g) {
                *w -= cfg.lr * (gi + cfg.l2 * *w);
            }
        }
        let loss = objective(&model)?;
        if !loss.is_finite() || !model.weights.iter().all(|w| w.is_finite()) {
            return Err(Error::NonFinite {
                epoch,
                diagnostics: format!("loss={loss} weights={:?}", model.weights),
            });
        }
        log.push(EpochLog {
            epoch,
            loss,
            held_out_accuracy: pairwise_accuracy(&model, held_out),
        });
    }
    let train_loss = objective(&model)?;
    Ok(TrainOutcome {
        held_out_accuracy: pairwise_accuracy(&model, held_out),
        model,
        log,
        train_loss,
    })
}

/// Separable pairs: the winner realizes the prompt exactly, the loser has one
/// or more corrupted attributes and no better quality.
pub fn synthetic_pairs(n: usize, seed_value: u64, vocab: &Vocabulary) -> Vec<PreferencePair> {
    let sim = Simulation::new(vocab.clone(), ErrorModel::default());
    let sampler = PromptSampler::new(vocab.clone());
    let mut rng = seed::sub_rng(seed_value, "synthetic_pairs");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let category = crate::prompt::Category::ALL[rng.random_range(0..6)];
        let prompt = sampler.sample(format!("syn-{}", out.len()), category, &mut rng);
        let mut winner = sim.realize(&prompt, &mut rng);
        winner.quality = rng.random_range(0.5..1.0);
        let mut loser = sim.realize(&prompt, &mut rng);
        let mut attrs = attributes(&prompt);
        attrs.shuffle(&mut rng);
        let k = rng.random_range(1..=attrs.len());
        for attr in &attrs[..k] {
            sim.corrupt(&mut loser, &prompt, *attr, &mut rng);
        }
        loser.quality = winner.quality * rng.random_range(0.3..1.0);
        if let Ok(pair) = PreferencePair::new(prompt, winner.canonical(), loser.canonical(), PairSource::Rule) {
            out.push(pair);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub mean: f64,
    pub std: f64,
}

impl WindowStats {
    /// Sample mean and (population) standard deviation of a window.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("empty statistics window"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(WindowStats { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub name: String,
    pub weight: f64,
    pub stats: WindowStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub signals: Vec<SignalSpec>,
    pub sigma_floor: f64,
}

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-6;

impl EnsembleConfig {
    /// Uniform weights, window statistics fitted from sample signal maps.
    pub fn fit(names: &[&str], window: &[BTreeMap<String, f64>]) -> Result<Self> {
        let w = 1.0 / names.len() as f64;
        let signals = names
            .iter()
            .map(|name| {
                let values: Vec<f64> = window
                    .iter()
                    .map(|m| m.get(*name).copied().ok_or_else(|| missing_signal(name)))
                    .collect::<Result<_>>()?;
                Ok(SignalSpec {
                    name: name.to_string(),
                    weight: w,
                    stats: WindowStats::from_values(&values)?,
                })
            })
            .collect::<Result<_>>()?;
        let cfg = EnsembleConfig {
            signals,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.signals.is_empty() {
            return Err(Error::invalid("ensemble has no signals"));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::invalid("sigma_floor must be > 0"));
        }
        if self.signals.iter().any(|s| !(s.weight >= 0.0)) {
            return Err(Error::invalid("ensemble weights must be non-negative"));
        }
        let total: f64 = self.signals.iter().map(|s| s.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("ensemble weights sum to {total}, not 1")));
        }
        Ok(())
    }
}

fn missing_signal(name: &str) -> Error {
    Error::invalid(format!("missing ensemble signal {name:?}"))
}

/// Weighted sum of z-scores, each against its window stats with std floored.
pub fn ensemble_score(signals: &BTreeMap<String, f64>, cfg: &EnsembleConfig) -> Result<f64> {
    cfg.signals.iter().try_fold(0.0, |acc, s| {
        let x = *signals.get(&s.name).ok_or_else(|| missing_signal(&s.name))?;
        Ok(acc + s.weight * (x - s.stats.mean) / s.stats.std.max(cfg.sigma_floor))
    })
}

pub const SIM_SIGNALS: [&str; 3] = ["hps", "clip", "pick"];

/// Three simulated reward signals: noisy mixes of rubric score and quality,
/// with noise seeded by the scene's content hash so they are reproducible.
pub fn simulated_signals(prompt: &StructuredPrompt, scene: &SceneGraph, vocab: &Vocabulary) -> Result<BTreeMap<String, f64>> {
    let score = verify_rule(prompt, scene, vocab)?.score;
    let q = scene.quality;
    let base = seed::fnv1a64(scene.content_hash().0.as_bytes()) ^ seed::fnv1a64(prompt.id.as_bytes());
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let mixes = [("hps", 0.5, 0.5), ("clip", 0.9, 0.1), ("pick", 0.3, 0.7)];
    Ok(mixes
        .into_iter()
        .map(|(name, ws, wq)| {
            let mut rng = seed::sub_rng(base, name);
            (name.to_string(), ws * score + wq * q + noise.sample(&mut rng))
        })
        .collect())
}

/// Verifier backed by a trained reward model: overall = 10·σ(r), and every
/// aspect of the category reports the same value.
#[derive(Debug, Clone)]
pub struct RewardVerifier {
    pub model: RewardModel,
    pub vocab: Vocabulary,
}

impl RewardVerifier {
    pub fn new(model: RewardModel, vocab: Vocabulary) -> Result<Self> {
        model.validate()?;
        Ok(RewardVerifier { model, vocab })
    }
}

impl Verifier for RewardVerifier {
    fn verify(&self, req: &VerifyRequest) -> Result<VerifierReport> {
        let r = self.model.score(&req.structured, &req.scene, &self.vocab)?;
        let overall = MAX_SCORE * sigmoid(r);
        Ok(VerifierReport {
            aspect_scores: aspect_keys(req.structured.category)
                .iter()
                .map(|k| (k.to_string(), overall))
                .collect(),
            overall_score: overall,
            rationale: None,
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Simulated
    }
}
