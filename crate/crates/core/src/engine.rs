//! The refinement search: `N` chains, each generated once and then reflected
//! on and corrected round after round, with the best image picked across all
//! chains at the end.
//!
//! Every backend call draws its seed from `(run seed, chain, iteration, role)`,
//! so chains can run on any number of threads and still produce identical
//! traces.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    BackendBundle, CorrectRequest, GenerateRequest, Reflection, RefineRequest, ReflectRequest, Role, VerifierReport,
    VerifyRequest,
};
use crate::error::{Error, Result};
use crate::prompt::{render_prompt_text, StructuredPrompt};
use crate::scene::{Provenance, SceneGraph};
use crate::seed;
use crate::vocab::Vocabulary;

pub const TRACE_SCHEMA_VERSION: u32 = 1;
const FINAL_VERIFIER: &str = "final_verifier";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// `N × M` images; the initial generation is round one.
    #[default]
    TotalImages,
    /// `N` initial images plus `N × M` refinements.
    Algorithm1Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub width: usize,
    pub depth: usize,
    pub enable_reflection: bool,
    pub enable_prompt_scaling: bool,
    pub seed: u64,
    #[serde(default)]
    pub budget_mode: BudgetMode,
}

impl RunConfig {
    pub fn new(width: usize, depth: usize, seed: u64) -> Self {
        RunConfig {
            width,
            depth,
            enable_reflection: true,
            enable_prompt_scaling: true,
            seed,
            budget_mode: BudgetMode::TotalImages,
        }
    }

    /// Best-of-`width` independent samples.
    pub fn noise_only(width: usize, seed: u64) -> Self {
        RunConfig {
            enable_reflection: false,
            enable_prompt_scaling: false,
            ..RunConfig::new(width, 1, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 {
            return Err(Error::invalid(format!(
                "width and depth must be >= 1 (got {}x{})",
                self.width, self.depth
            )));
        }
        Ok(())
    }

    /// Images generated per chain.
    pub fn rounds(&self) -> usize {
        match self.budget_mode {
            BudgetMode::TotalImages => self.depth,
            BudgetMode::Algorithm1Literal => self.depth + 1,
        }
    }

    pub fn budget(&self) -> usize {
        self.width * self.rounds()
    }
}

/// One image of a chain and what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub iteration: usize,
    /// Prompt text the image was produced from.
    pub prompt: String,
    pub scene: SceneGraph,
    pub report: VerifierReport,
    /// Report of the distinct final verifier, when one is configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_report: Option<VerifierReport>,
    /// Reflection on the previous image that this correction followed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection: Option<Reflection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_prompt: Option<String>,
    pub seed_used: u64,
    pub role: Role,
}

impl Step {
    pub fn selection_score(&self) -> f64 {
        self.final_report.as_ref().unwrap_or(&self.report).overall_score
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub chain_id: usize,
    pub prompt: String,
    pub specificity: f64,
    pub history: Vec<Step>,
    /// Why the chain stopped early, if it did.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dead: Option<String>,
    pub calls: BTreeMap<Role, u64>,
}

impl ChainState {
    fn new(chain_id: usize, prompt: String, specificity: f64) -> Self {
        ChainState {
            chain_id,
            prompt,
            specificity,
            history: Vec::new(),
            dead: None,
            calls: BTreeMap::new(),
        }
    }

    fn count(&mut self, role: Role) {
        *self.calls.entry(role).or_default() += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub chain: usize,
    pub iteration: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub schema_version: u32,
    pub prompt: StructuredPrompt,
    pub config: RunConfig,
    pub chains: Vec<ChainState>,
    pub images_generated: usize,
    pub backend_calls: BTreeMap<Role, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<Selection>,
    /// Wall-clock milliseconds per phase, summed over chains. Not part of
    /// the trace hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<BTreeMap<String, f64>>,
}

impl Trace {
    pub fn step(&self, chain: usize, iteration: usize) -> Option<&Step> {
        self.chains.get(chain)?.history.get(iteration)
    }

    pub fn best(&self) -> Option<&Step> {
        let s = self.selected?;
        self.step(s.chain, s.iteration)
    }

    pub fn candidates(&self) -> Vec<Candidate> {
        self.chains
            .iter()
            .flat_map(|c| {
                c.history.iter().map(move |s| Candidate {
                    score: s.selection_score(),
                    chain: c.chain_id,
                    iteration: s.iteration,
                })
            })
            .collect()
    }

    /// Selection restricted to the first `rounds` images of every chain.
    pub fn select_truncated(&self, rounds: usize) -> Result<Selection> {
        let cands: Vec<Candidate> = self.candidates().into_iter().filter(|c| c.iteration < rounds).collect();
        let c = cands[select_best(&cands)?];
        Ok(Selection {
            chain: c.chain,
            iteration: c.iteration,
            score: c.score,
        })
    }

    /// JSON without timings, as stored on disk.
    pub fn to_json(&self) -> String {
        let mut t = self.clone();
        t.timings_ms = None;
        serde_json::to_string_pretty(&t).expect("trace serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let trace: Trace = serde_json::from_str(text).map_err(|e| Error::from(e).with_raw(text))?;
        if trace.schema_version != TRACE_SCHEMA_VERSION {
            return Err(Error::schema(
                "schema_version",
                format!("unsupported trace schema {}", trace.schema_version),
            ));
        }
        Ok(trace)
    }

    /// SHA-256 of the timing-free canonical JSON.
    pub fn hash(&self) -> String {
        let mut t = self.clone();
        t.timings_ms = None;
        let bytes = serde_json::to_vec(&t).expect("trace serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub best: SceneGraph,
    pub trace: Trace,
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "prompt {} ({}), width {} depth {}, {} images",
            self.prompt.id, self.prompt.category, self.config.width, self.config.depth, self.images_generated
        )?;
        for chain in &self.chains {
            writeln!(f, "chain {}", chain.chain_id)?;
            for step in &chain.history {
                if let Some(r) = &step.reflection {
                    writeln!(f, "  reflection: {}", r.text)?;
                }
                if let Some(p) = &step.refined_prompt {
                    writeln!(f, "  refined prompt: {p}")?;
                }
                writeln!(
                    f,
                    "  [{}] {} score {:.2} hash {}",
                    step.iteration,
                    step.role,
                    step.selection_score(),
                    &step.scene.content_hash().0[..12]
                )?;
            }
            if let Some(reason) = &chain.dead {
                writeln!(f, "  dead: {reason}")?;
            }
        }
        match self.selected {
            Some(s) => writeln!(f, "selected chain {} iteration {} score {:.2}", s.chain, s.iteration, s.score),
            None => writeln!(f, "no selection"),
        }
    }
}

/// A scored image for selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub score: f64,
    pub chain: usize,
    pub iteration: usize,
}

/// `Less` means `a` is preferred: higher score, then lower iteration, then
/// lower chain.
fn preference(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.iteration.cmp(&b.iteration))
        .then(a.chain.cmp(&b.chain))
}

/// Best image per chain, then best of those. Returns an index into `candidates`.
pub fn select_best(candidates: &[Candidate]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::invalid("select_best on no candidates"));
    }
    let mut per_chain: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, c) in candidates.iter().enumerate() {
        per_chain
            .entry(c.chain)
            .and_modify(|best| {
                if preference(c, &candidates[*best]).is_lt() {
                    *best = i;
                }
            })
            .or_insert(i);
    }
    Ok(per_chain
        .into_values()
        .min_by(|&a, &b| preference(&candidates[a], &candidates[b]))
        .expect("non-empty"))
}

#[derive(Default)]
struct Timer(BTreeMap<&'static str, f64>);

impl Timer {
    fn time<T>(&mut self, phase: &'static str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.0.entry(phase).or_default() += start.elapsed().as_secs_f64() * 1e3;
        out
    }
}

struct Ctx<'a> {
    original: &'a StructuredPrompt,
    original_text: String,
    cfg: &'a RunConfig,
    backends: &'a BackendBundle,
}

impl Ctx<'_> {
    fn structured(&self, state: &ChainState) -> StructuredPrompt {
        self.original.clone().with_specificity(state.specificity)
    }

    fn seed(&self, chain: usize, iteration: usize, role: &str) -> u64 {
        seed::derive(self.cfg.seed, chain as u64, iteration as u64, role)
    }

    fn provenance(&self, chain: usize, iteration: usize, role: Role) -> Provenance {
        Provenance {
            run_seed: self.cfg.seed,
            chain: chain as u64,
            iteration: iteration as u64,
            role: role.as_str().into(),
        }
    }

    fn score(&self, state: &mut ChainState, scene: &SceneGraph, iteration: usize, timer: &mut Timer) -> Result<(VerifierReport, Option<VerifierReport>)> {
        let req = VerifyRequest {
            prompt: state.prompt.clone(),
            structured: self.structured(state),
            scene: scene.clone(),
            seed: self.seed(state.chain_id, iteration, Role::Verifier.as_str()),
        };
        state.count(Role::Verifier);
        let report = timer.time("verify", || self.backends.verifier.verify(&req))?;
        let final_report = match &self.backends.final_verifier {
            Some(v) => {
                let req = VerifyRequest {
                    seed: self.seed(state.chain_id, iteration, FINAL_VERIFIER),
                    ..req
                };
                state.count(Role::Verifier);
                Some(timer.time("verify", || v.verify(&req))?)
            }
            None => None,
        };
        Ok((report, final_report))
    }

    fn generate(&self, state: &mut ChainState, iteration: usize, timer: &mut Timer) -> Result<(SceneGraph, u64)> {
        let seed = self.seed(state.chain_id, iteration, Role::Generator.as_str());
        let req = GenerateRequest {
            prompt: state.prompt.clone(),
            structured: self.structured(state),
            seed,
            params: BTreeMap::new(),
        };
        state.count(Role::Generator);
        let scene = timer.time("generate", || self.backends.generator.generate(&req))?;
        Ok((scene, seed))
    }

    fn initial(&self, state: &mut ChainState, timer: &mut Timer) -> Result<()> {
        let (scene, seed) = self.generate(state, 0, timer)?;
        let scene = scene.with_provenance(self.provenance(state.chain_id, 0, Role::Generator));
        let (report, final_report) = self.score(state, &scene, 0, timer)?;
        state.history.push(Step {
            iteration: 0,
            prompt: state.prompt.clone(),
            scene,
            report,
            final_report,
            reflection: None,
            refined_prompt: None,
            seed_used: seed,
            role: Role::Generator,
        });
        Ok(())
    }

    fn step(&self, state: &mut ChainState, timer: &mut Timer) -> Result<()> {
        let prev = state
            .history
            .last()
            .cloned()
            .ok_or_else(|| Error::invalid("step_chain on a chain with no history"))?;
        let iteration = prev.iteration + 1;
        let chain = state.chain_id;
        let reflection = if self.cfg.enable_reflection {
            let req = ReflectRequest {
                original_prompt: self.original_text.clone(),
                current_prompt: state.prompt.clone(),
                structured: self.structured(state),
                scene: prev.scene.clone(),
                report: prev.report.clone(),
                seed: self.seed(chain, iteration, Role::Reflector.as_str()),
            };
            state.count(Role::Reflector);
            Some(timer.time("reflect", || self.backends.reflector.reflect(&req))?)
        } else {
            None
        };
        let refined_prompt = if self.cfg.enable_prompt_scaling {
            let req = RefineRequest {
                original: self.original_text.clone(),
                current: state.prompt.clone(),
                structured: self.structured(state),
                scenes: vec![prev.scene.clone()],
                reports: vec![prev.report.clone()],
                reflection: reflection.clone().unwrap_or_else(Reflection::no_changes),
            };
            state.count(Role::Refiner);
            let refined = timer.time("refine", || self.backends.refiner.refine_prompt(&req))?;
            state.prompt = refined.text.clone();
            if let Some(s) = refined.specificity {
                state.specificity = s;
            }
            Some(refined.text)
        } else {
            None
        };
        let (scene, seed, role) = match &reflection {
            Some(r) => {
                let seed = self.seed(chain, iteration, Role::Corrector.as_str());
                let req = CorrectRequest {
                    original_prompt: self.original_text.clone(),
                    refined_prompt: state.prompt.clone(),
                    structured: self.structured(state),
                    reflection: r.clone(),
                    flawed: prev.scene.clone(),
                    seed,
                    params: BTreeMap::new(),
                };
                state.count(Role::Corrector);
                let scene = timer.time("correct", || self.backends.corrector.correct(&req))?;
                (scene, seed, Role::Corrector)
            }
            None => {
                let (scene, seed) = self.generate(state, iteration, timer)?;
                (scene, seed, Role::Generator)
            }
        };
        let scene = scene.with_provenance(self.provenance(chain, iteration, role));
        let (report, final_report) = self.score(state, &scene, iteration, timer)?;
        state.history.push(Step {
            iteration,
            prompt: state.prompt.clone(),
            scene,
            report,
            final_report,
            reflection,
            refined_prompt,
            seed_used: seed,
            role,
        });
        Ok(())
    }

    fn chain(&self, chain_id: usize) -> (ChainState, Timer) {
        let mut state = ChainState::new(chain_id, self.original_text.clone(), self.original.specificity);
        let mut timer = Timer::default();
        let mut result = self.initial(&mut state, &mut timer);
        while result.is_ok() && state.history.len() < self.cfg.rounds() {
            result = self.step(&mut state, &mut timer);
        }
        if let Err(e) = result {
            log::warn!("chain {chain_id} died: {e}");
            state.dead = Some(e.to_string());
        }
        (state, timer)
    }
}

/// Advance a chain by one reflect/refine/correct round (or one fresh sample
/// when reflection is off).
pub fn step_chain(
    state: &ChainState,
    prompt: &StructuredPrompt,
    config: &RunConfig,
    backends: &BackendBundle,
    vocab: &Vocabulary,
) -> Result<ChainState> {
    if let Some(reason) = &state.dead {
        return Err(Error::invalid(format!("chain {} is dead: {reason}", state.chain_id)));
    }
    let ctx = Ctx {
        original: prompt,
        original_text: render_prompt_text(prompt, false, vocab),
        cfg: config,
        backends,
    };
    let mut next = state.clone();
    ctx.step(&mut next, &mut Timer::default())?;
    Ok(next)
}

/// Run the search for one prompt. Chains run on the current rayon pool.
pub fn run(prompt: &StructuredPrompt, config: &RunConfig, backends: &BackendBundle, vocab: &Vocabulary) -> Result<RunOutput> {
    config.validate()?;
    prompt.validate(vocab)?;
    let ctx = Ctx {
        original: prompt,
        original_text: render_prompt_text(prompt, false, vocab),
        cfg: config,
        backends,
    };
    let results: Vec<(ChainState, Timer)> = (0..config.width).into_par_iter().map(|c| ctx.chain(c)).collect();
    let mut timings: BTreeMap<String, f64> = BTreeMap::new();
    let mut backend_calls: BTreeMap<Role, u64> = BTreeMap::new();
    let mut chains = Vec::with_capacity(results.len());
    for (state, timer) in results {
        for (phase, ms) in timer.0 {
            *timings.entry(phase.to_string()).or_default() += ms;
        }
        for (role, n) in &state.calls {
            *backend_calls.entry(*role).or_default() += n;
        }
        chains.push(state);
    }
    let mut trace = Trace {
        schema_version: TRACE_SCHEMA_VERSION,
        prompt: prompt.clone(),
        config: config.clone(),
        images_generated: chains.iter().map(|c| c.history.len()).sum(),
        chains,
        backend_calls,
        selected: None,
        timings_ms: Some(timings),
    };
    if trace.chains.iter().all(|c| c.dead.is_some()) {
        let message = trace.chains[0].dead.clone().unwrap_or_default();
        return Err(Error::RunFailed {
            message,
            trace: Box::new(trace),
        });
    }
    let cands = trace.candidates();
    let c = cands[select_best(&cands)?];
    trace.selected = Some(Selection {
        chain: c.chain,
        iteration: c.iteration,
        score: c.score,
    });
    let best = trace.best().expect("selection indexes a step").scene.clone();
    Ok(RunOutput { best, trace })
}

/// Best of `budget` independent generations.
pub fn noise_only(prompt: &StructuredPrompt, budget: usize, seed: u64, backends: &BackendBundle, vocab: &Vocabulary) -> Result<RunOutput> {
    run(prompt, &RunConfig::noise_only(budget, seed), backends, vocab)
}

/// Fresh generations with the prompt refined between rounds: two chains of
/// `budget / 2` rounds, or one chain when the budget is odd.
pub fn noise_prompt_config(budget: usize, seed: u64) -> RunConfig {
    let (width, depth) = if budget % 2 == 0 { (2, budget / 2) } else { (1, budget) };
    RunConfig {
        enable_reflection: false,
        enable_prompt_scaling: true,
        ..RunConfig::new(width, depth.max(1), seed)
    }
}

pub fn noise_prompt(prompt: &StructuredPrompt, budget: usize, seed: u64, backends: &BackendBundle, vocab: &Vocabulary) -> Result<RunOutput> {
    run(prompt, &noise_prompt_config(budget, seed), backends, vocab)
}
