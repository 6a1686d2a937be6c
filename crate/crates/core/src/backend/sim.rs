//! Deterministic simulated backends over scene graphs.
//!
//! Each backend is a pure function of its request and seed. The generator
//! realizes the prompt exactly, then corrupts each rubric attribute (object
//! presence, exact color, count, relation) independently with probability
//! `ErrorModel::corruption(specificity)`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::reflection::{reflection_edits, Edit, Reflection};
use super::report::{aspect_keys, VerifierReport, MAX_SCORE};
use super::{
    BackendBundle, BackendKind, CorrectRequest, Corrector, ErrorModel, GenerateRequest, Generator,
    PromptRefiner, RefineRequest, RefinedPrompt, ReflectRequest, Reflector, Verifier, VerifyRequest,
};
use crate::error::Result;
use crate::prompt::{render_prompt_text, Category, RelationKind, StructuredPrompt};
use crate::rule::{verify_rule, Breakdown, ErrorFact, ErrorKind};
use crate::scene::{BBox, SceneGraph, SceneObject};
use crate::seed::{self, SimRng};
use crate::vocab::{Vocabulary, VARIED};

/// A corruptible rubric attribute of a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attribute {
    Presence(usize),
    Color(usize),
    Count(usize),
    Relation,
}

/// Corruptible attributes, in rubric order.
pub fn attributes(prompt: &StructuredPrompt) -> Vec<Attribute> {
    let mut out = Vec::new();
    for (i, spec) in prompt.objects.iter().enumerate() {
        out.push(Attribute::Presence(i));
        if spec.required_color().is_some() {
            out.push(Attribute::Color(i));
        }
        if spec.count > 1 {
            out.push(Attribute::Count(i));
        }
    }
    if prompt.relation().is_some() {
        out.push(Attribute::Relation);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifierMode {
    Oracle,
    Noisy,
}

/// Shared state of the simulated backends.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub vocab: Vocabulary,
    pub model: ErrorModel,
    /// Specificity added per prompt refinement.
    pub refine_step: f64,
}

impl Simulation {
    pub fn new(vocab: Vocabulary, model: ErrorModel) -> Self {
        Simulation {
            vocab,
            model,
            refine_step: 0.5,
        }
    }

    pub fn bundle(self, mode: VerifierMode) -> BackendBundle {
        let sim = Arc::new(self);
        BackendBundle {
            generator: Arc::new(SimGenerator(sim.clone())),
            corrector: Arc::new(SimCorrector(sim.clone())),
            reflector: Arc::new(SimReflector(sim.clone())),
            verifier: Arc::new(SimVerifier {
                sim: sim.clone(),
                mode,
            }),
            refiner: Arc::new(SimRefiner(sim)),
            final_verifier: None,
        }
    }

    fn random_color(&self, rng: &mut SimRng) -> String {
        self.vocab.colors[rng.random_range(0..self.vocab.colors.len())].clone()
    }

    fn other_color(&self, not: &str, rng: &mut SimRng) -> String {
        let choices: Vec<&String> = self.vocab.colors.iter().filter(|c| *c != not).collect();
        choices[rng.random_range(0..choices.len())].clone()
    }

    fn instance_color(&self, requested: Option<&str>, rng: &mut SimRng) -> String {
        match requested {
            Some(c) if c != VARIED => c.to_string(),
            _ => self.random_color(rng),
        }
    }

    fn random_box(rng: &mut SimRng) -> BBox {
        let half = rng.random_range(0.04..0.08);
        BBox::centered(rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), half)
    }

    /// An exact realization of the prompt.
    pub fn realize(&self, prompt: &StructuredPrompt, rng: &mut SimRng) -> SceneGraph {
        let mut objects = Vec::new();
        let mut z = 0;
        for spec in &prompt.objects {
            for _ in 0..spec.count {
                let color = self.instance_color(spec.color.as_deref(), rng);
                objects.push(SceneObject::new(&spec.class, color, Self::random_box(rng), z));
                z += 1;
            }
        }
        let mut scene = SceneGraph::new(objects, 1.0);
        if let Some((subject, target, kind)) = prompt.relation() {
            arrange_pair(
                &mut scene,
                &prompt.objects[subject].class,
                kind,
                &prompt.objects[target].class,
                rng,
            );
        }
        scene
    }

    /// Break one attribute so the rule verifier reports it.
    pub fn corrupt(&self, scene: &mut SceneGraph, prompt: &StructuredPrompt, attr: Attribute, rng: &mut SimRng) {
        match attr {
            Attribute::Presence(i) => {
                let class = &prompt.objects[i].class;
                scene.objects.retain(|o| &o.class != class);
            }
            Attribute::Color(i) => {
                let spec = &prompt.objects[i];
                let Some(required) = spec.required_color() else { return };
                let idx: Vec<usize> = (0..scene.objects.len())
                    .filter(|&k| scene.objects[k].class == spec.class)
                    .collect();
                if idx.is_empty() {
                    return;
                }
                let k = idx[rng.random_range(0..idx.len())];
                scene.objects[k].color = self.other_color(required, rng);
            }
            Attribute::Count(i) => {
                let spec = &prompt.objects[i];
                let options: Vec<u32> = [-2i64, -1, 1, 2]
                    .iter()
                    .map(|d| i64::from(spec.count) + d)
                    .filter(|&n| n >= 1)
                    .map(|n| n as u32)
                    .collect();
                let n = options[rng.random_range(0..options.len())];
                set_count(self, scene, &spec.class, n, spec.color.as_deref(), rng);
            }
            Attribute::Relation => {
                if let Some((subject, target, kind)) = prompt.relation() {
                    arrange_pair(
                        scene,
                        &prompt.objects[subject].class,
                        kind.inverse(),
                        &prompt.objects[target].class,
                        rng,
                    );
                }
            }
        }
        scene.canonicalize();
    }

    pub fn generate_scene(&self, prompt: &StructuredPrompt, seed: u64) -> Result<SceneGraph> {
        prompt.validate(&self.vocab)?;
        let mut rng = seed::rng(seed);
        let mut scene = self.realize(prompt, &mut rng);
        let p = self.model.corruption(prompt.specificity);
        let attrs = attributes(prompt);
        let hits: Vec<bool> = attrs.iter().map(|_| rng.random_bool(p)).collect();
        // counts first so a later recolor cannot be undone by removal
        let rank = |a: &Attribute| match a {
            Attribute::Count(_) => 0,
            Attribute::Color(_) => 1,
            Attribute::Relation => 2,
            Attribute::Presence(_) => 3,
        };
        let mut chosen: Vec<Attribute> = attrs
            .iter()
            .zip(&hits)
            .filter(|(_, hit)| **hit)
            .map(|(a, _)| *a)
            .collect();
        chosen.sort_by_key(rank);
        for attr in chosen {
            self.corrupt(&mut scene, prompt, attr, &mut rng);
        }
        scene.quality = (0.35 + 0.25 * prompt.specificity + rng.random_range(0.0..0.4)).clamp(0.0, 1.0);
        Ok(scene.canonical())
    }

    pub fn apply_edit(&self, scene: &mut SceneGraph, prompt: &StructuredPrompt, edit: &Edit, rng: &mut SimRng) {
        match edit {
            Edit::Add {
                class,
                color,
                count,
                relation,
            } => {
                let requested = color
                    .clone()
                    .or_else(|| prompt.spec_for(class).and_then(|s| s.color.clone()));
                let mut z = next_z(scene);
                for _ in 0..*count {
                    let c = self.instance_color(requested.as_deref(), rng);
                    scene.objects.push(SceneObject::new(class, c, Self::random_box(rng), z));
                    z += 1;
                }
                scene.canonicalize();
                if let Some((kind, target)) = relation {
                    if scene.count_of(target) > 0 {
                        arrange_pair(scene, class, *kind, target, rng);
                    }
                }
            }
            Edit::Remove { class } => scene.objects.retain(|o| &o.class != class),
            Edit::Recolor { class, to } => {
                for o in scene.objects.iter_mut().filter(|o| &o.class == class) {
                    o.color = to.clone();
                }
            }
            Edit::SetCount { class, count } => {
                let hint = prompt.spec_for(class).and_then(|s| s.color.clone());
                set_count(self, scene, class, *count, hint.as_deref(), rng);
            }
            Edit::ChangeCount { class, delta } => {
                let n = (scene.count_of(class) as i64 + delta).max(0) as u32;
                let hint = prompt.spec_for(class).and_then(|s| s.color.clone());
                set_count(self, scene, class, n, hint.as_deref(), rng);
            }
            Edit::Reposition {
                class,
                relation,
                target,
            } => {
                if scene.count_of(class) > 0 && scene.count_of(target) > 0 {
                    arrange_pair(scene, class, *relation, target, rng);
                }
            }
            Edit::Polish => scene.quality += 0.1 * (1.0 - scene.quality),
        }
        scene.canonicalize();
    }

    pub fn correct_scene(&self, req: &CorrectRequest) -> Result<SceneGraph> {
        req.structured.validate(&self.vocab)?;
        let mut rng = seed::rng(req.seed);
        let parsed = reflection_edits(&req.reflection, &self.vocab);
        if !parsed.unparsed.is_empty() {
            log::warn!(
                "corrector could not parse {} reflection sentence(s): {:?}",
                parsed.unparsed.len(),
                parsed.unparsed
            );
        }
        let mut scene = req.flawed.clone().canonical();
        for edit in &parsed.edits {
            if rng.random_bool(self.model.p_fix) {
                self.apply_edit(&mut scene, &req.structured, edit, &mut rng);
            }
        }
        if rng.random_bool(self.model.p_regress) {
            let attrs = attributes(&req.structured);
            let attr = attrs[rng.random_range(0..attrs.len())];
            self.corrupt(&mut scene, &req.structured, attr, &mut rng);
        }
        Ok(scene.canonical())
    }

    pub fn reflect_scene(&self, req: &ReflectRequest) -> Result<Reflection> {
        let verdict = verify_rule(&req.structured, &req.scene, &self.vocab)?;
        let mut rng = seed::sub_rng(req.seed, "reflect");
        let mut facts: Vec<ErrorFact> = verdict
            .errors
            .into_iter()
            .filter(|_| rng.random_bool(self.model.reflector_recall))
            .collect();
        if rng.random_bool(self.model.reflector_hallucination) {
            if let Some(f) = self.hallucinate(&req.structured, &req.scene, &mut rng) {
                facts.push(f);
            }
        }
        Ok(Reflection::from_facts(facts, &self.vocab))
    }

    /// A plausible but false error about a correctly rendered object.
    fn hallucinate(&self, prompt: &StructuredPrompt, scene: &SceneGraph, rng: &mut SimRng) -> Option<ErrorFact> {
        let mut candidates = Vec::new();
        for spec in &prompt.objects {
            if scene.count_of(&spec.class) == 0 {
                continue;
            }
            match spec.required_color() {
                Some(color) if scene.instances(&spec.class).all(|o| o.color == color) => {
                    candidates.push(ErrorFact::new(
                        ErrorKind::WrongColor,
                        &spec.class,
                        self.other_color(color, rng),
                        color,
                    ));
                }
                _ => candidates.push(ErrorFact::new(
                    ErrorKind::ExtraObject,
                    &spec.class,
                    "0",
                    scene.count_of(&spec.class).to_string(),
                )),
            }
        }
        if candidates.is_empty() {
            return None;
        }
        let k = rng.random_range(0..candidates.len());
        Some(candidates.swap_remove(k))
    }

    pub fn verify_scene(&self, req: &VerifyRequest, mode: VerifierMode) -> Result<VerifierReport> {
        let verdict = verify_rule(&req.structured, &req.scene, &self.vocab)?;
        let mut aspects = aspect_fractions(req.structured.category, &verdict.breakdown, req.scene.quality);
        let mut overall = MAX_SCORE * verdict.score;
        for (_, v) in aspects.iter_mut() {
            *v *= MAX_SCORE;
        }
        if mode == VerifierMode::Noisy && self.model.verifier_noise > 0.0 {
            let normal = Normal::new(0.0, self.model.verifier_noise).expect("finite sigma");
            let mut rng = seed::sub_rng(req.seed, "verify");
            overall = (overall + normal.sample(&mut rng)).clamp(0.0, MAX_SCORE);
            for (_, v) in aspects.iter_mut() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, MAX_SCORE);
            }
        }
        Ok(VerifierReport {
            aspect_scores: aspects.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            overall_score: overall,
            rationale: None,
        })
    }

    pub fn refine(&self, req: &RefineRequest) -> RefinedPrompt {
        let current = req.structured.specificity;
        if current >= 1.0 {
            return RefinedPrompt {
                text: req.current.clone(),
                specificity: Some(1.0),
            };
        }
        let specificity = (current + self.refine_step).min(1.0);
        let prompt = req.structured.clone().with_specificity(specificity);
        RefinedPrompt {
            text: render_prompt_text(&prompt, false, &self.vocab),
            specificity: Some(specificity),
        }
    }
}

/// Aspect fractions in [0, 1] per category:
///
/// | category | aspect 1 | aspect 2 | aspect 3 |
/// |---|---|---|---|
/// | single_object | presence | quality | exclusivity |
/// | two_objects | quality | presence | color |
/// | counting | count | color | quality |
/// | colors | color | quality | presence |
/// | position | relation | presence | quality |
/// | color_attribution | color | quality | presence |
pub fn aspect_fractions(category: Category, b: &Breakdown, quality: f64) -> Vec<(&'static str, f64)> {
    let values = match category {
        Category::SingleObject => [b.presence.fraction(), quality, b.exclusivity.fraction()],
        Category::TwoObjects => [quality, b.presence.fraction(), b.color.fraction()],
        Category::Counting => [b.count.fraction(), b.color.fraction(), quality],
        Category::Colors => [b.color.fraction(), quality, b.presence.fraction()],
        Category::Position => [b.relation.fraction(), b.presence.fraction(), quality],
        Category::ColorAttribution => [b.color.fraction(), quality, b.presence.fraction()],
    };
    aspect_keys(category).into_iter().zip(values).collect()
}

fn next_z(scene: &SceneGraph) -> i32 {
    scene.objects.iter().map(|o| o.z + 1).max().unwrap_or(0)
}

/// Bring the instance count of `class` to `n`: drop the last instances in
/// canonical order or add new ones.
fn set_count(sim: &Simulation, scene: &mut SceneGraph, class: &str, n: u32, color_hint: Option<&str>, rng: &mut SimRng) {
    scene.canonicalize();
    let have = scene.count_of(class);
    let n = n as usize;
    if have > n {
        let mut seen = 0;
        scene.objects.retain(|o| {
            if o.class != class {
                return true;
            }
            seen += 1;
            seen <= n
        });
    } else if have < n {
        let template = scene.instances(class).next().map(|o| o.color.clone());
        let mut z = next_z(scene);
        for _ in have..n {
            let color = match (color_hint, &template) {
                (Some(c), _) if c != VARIED => c.to_string(),
                (_, Some(t)) if color_hint.is_none() => t.clone(),
                _ => sim.random_color(rng),
            };
            scene.objects.push(SceneObject::new(class, color, Simulation::random_box(rng), z));
            z += 1;
        }
    }
    scene.canonicalize();
}

/// Move the first instances of `a` and `b` so that `a <kind> b` holds strictly.
fn arrange_pair(scene: &mut SceneGraph, a: &str, kind: RelationKind, b: &str, rng: &mut SimRng) {
    scene.canonicalize();
    let ia = scene.objects.iter().position(|o| o.class == a);
    let ib = scene.objects.iter().position(|o| o.class == b);
    let (Some(ia), Some(ib)) = (ia, ib) else { return };
    let low = rng.random_range(0.12..0.38);
    let high = rng.random_range(0.62..0.88);
    let (a_pos, b_pos) = match kind {
        RelationKind::LeftOf | RelationKind::Above => (low, high),
        RelationKind::RightOf | RelationKind::Below => (high, low),
    };
    for (idx, pos) in [(ia, a_pos), (ib, b_pos)] {
        let bbox = scene.objects[idx].bbox;
        let (cx, cy) = bbox.center();
        let half = ((bbox.x1 - bbox.x0).min(bbox.y1 - bbox.y0) / 2.0).clamp(0.01, 0.1);
        scene.objects[idx].bbox = if kind.is_horizontal() {
            BBox::centered(pos, cy.clamp(half, 1.0 - half), half)
        } else {
            BBox::centered(cx.clamp(half, 1.0 - half), pos, half)
        };
    }
    scene.canonicalize();
}

pub struct SimGenerator(pub Arc<Simulation>);
pub struct SimCorrector(pub Arc<Simulation>);
pub struct SimReflector(pub Arc<Simulation>);
pub struct SimRefiner(pub Arc<Simulation>);
pub struct SimVerifier {
    pub sim: Arc<Simulation>,
    pub mode: VerifierMode,
}

impl Generator for SimGenerator {
    fn generate(&self, req: &GenerateRequest) -> Result<SceneGraph> {
        self.0.generate_scene(&req.structured, req.seed)
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Simulated
    }
}

impl Corrector for SimCorrector {
    fn correct(&self, req: &CorrectRequest) -> Result<SceneGraph> {
        self.0.correct_scene(req)
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Simulated
    }
}

impl Reflector for SimReflector {
    fn reflect(&self, req: &ReflectRequest) -> Result<Reflection> {
        self.0.reflect_scene(req)
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Simulated
    }
}

impl Verifier for SimVerifier {
    fn verify(&self, req: &VerifyRequest) -> Result<VerifierReport> {
        self.sim.verify_scene(req, self.mode)
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Simulated
    }
}

impl PromptRefiner for SimRefiner {
    fn refine_prompt(&self, req: &RefineRequest) -> Result<RefinedPrompt> {
        Ok(self.0.refine(req))
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Simulated
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{ObjectSpec, PromptSampler};
    use crate::rule::verify_rule;

    fn sim(model: ErrorModel) -> Simulation {
        Simulation::new(Vocabulary::default(), model)
    }

    fn gen_req(prompt: &StructuredPrompt, seed: u64) -> GenerateRequest {
        GenerateRequest {
            prompt: render_prompt_text(prompt, false, &Vocabulary::default()),
            structured: prompt.clone(),
            seed,
            params: Default::default(),
        }
    }

    fn colors_prompt() -> StructuredPrompt {
        StructuredPrompt::new("c", Category::Colors, vec![ObjectSpec::new("cube").color("red")])
    }

    fn corpus() -> Vec<StructuredPrompt> {
        PromptSampler::new(Vocabulary::default()).balanced("t", 30, 5)
    }

    #[test]
    fn zero_corruption_realizes_exactly() {
        let s = sim(ErrorModel::oracle(0.0));
        for (i, p) in corpus().iter().enumerate() {
            let scene = SimGenerator(Arc::new(s.clone())).generate(&gen_req(p, i as u64)).unwrap();
            let v = verify_rule(p, &scene, &s.vocab).unwrap();
            assert!(v.pass, "{p:?} {v:?}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = sim(ErrorModel::default());
        for p in corpus() {
            let a = s.generate_scene(&p, 17).unwrap();
            let b = s.generate_scene(&p, 17).unwrap();
            assert_eq!(a.content_hash(), b.content_hash());
        }
    }

    #[test]
    fn every_corruption_is_detected() {
        let s = sim(ErrorModel::default());
        for (n, p) in corpus().iter().enumerate() {
            for attr in attributes(p) {
                let mut rng = seed::rng(n as u64);
                let mut scene = s.realize(p, &mut rng);
                s.corrupt(&mut scene, p, attr, &mut rng);
                assert!(!verify_rule(p, &scene, &s.vocab).unwrap().pass, "{attr:?} on {p:?}");
            }
        }
    }

    #[test]
    fn two_attribute_pass_rate() {
        // presence + color, each broken with probability 0.5
        let s = sim(ErrorModel {
            eps_attr: 0.5,
            specificity_gain: 0.0,
            ..ErrorModel::default()
        });
        let p = colors_prompt();
        assert_eq!(attributes(&p).len(), 2);
        let trials = 10_000;
        let passed = (0..trials)
            .filter(|&seed| verify_rule(&p, &s.generate_scene(&p, seed).unwrap(), &s.vocab).unwrap().pass)
            .count();
        let rate = passed as f64 / trials as f64;
        assert!((rate - 0.25).abs() <= 0.02, "pass rate {rate}");
    }

    fn correct_req(p: &StructuredPrompt, reflection: Reflection, flawed: SceneGraph, seed: u64) -> CorrectRequest {
        CorrectRequest {
            original_prompt: "x".into(),
            refined_prompt: "x".into(),
            structured: p.clone(),
            reflection,
            flawed,
            seed,
            params: Default::default(),
        }
    }

    #[test]
    fn oracle_closure() {
        let s = sim(ErrorModel::oracle(0.6));
        let vocab = &s.vocab;
        for (n, p) in corpus().iter().enumerate() {
            for seed in 0..5u64 {
                let flawed = s.generate_scene(p, seed * 1000 + n as u64).unwrap();
                let v = verify_rule(p, &flawed, vocab).unwrap();
                let reflection = Reflection::from_facts(v.errors.clone(), vocab);
                let fixed = s.correct_scene(&correct_req(p, reflection, flawed, seed)).unwrap();
                let after = verify_rule(p, &fixed, vocab).unwrap();
                assert!(after.pass, "{p:?}\nbefore {v:?}\nafter {after:?}");
            }
        }
    }

    #[test]
    fn oracle_closure_through_text_grammar() {
        let s = sim(ErrorModel::oracle(0.6));
        for (n, p) in corpus().iter().enumerate() {
            let flawed = s.generate_scene(p, 77 + n as u64).unwrap();
            let v = verify_rule(p, &flawed, &s.vocab).unwrap();
            let text = Reflection::from_facts(v.errors, &s.vocab).text;
            let fixed = s
                .correct_scene(&correct_req(p, Reflection::from_text(text.clone()), flawed, 3))
                .unwrap();
            assert!(verify_rule(p, &fixed, &s.vocab).unwrap().pass, "{text}");
        }
    }

    #[test]
    fn empty_reflection_is_a_no_op() {
        let s = sim(ErrorModel {
            p_regress: 0.0,
            ..ErrorModel::default()
        });
        let p = colors_prompt();
        let flawed = s.generate_scene(&p, 5).unwrap();
        let out = s
            .correct_scene(&correct_req(&p, Reflection::no_changes(), flawed.clone(), 9))
            .unwrap();
        assert_eq!(out, flawed);
        let garbage = s
            .correct_scene(&correct_req(&p, Reflection::from_text("Make it nicer."), flawed.clone(), 9))
            .unwrap();
        assert_eq!(garbage, flawed);
    }

    #[test]
    fn half_fix_rate() {
        let s = sim(ErrorModel {
            p_fix: 0.5,
            p_regress: 0.0,
            ..ErrorModel::default()
        });
        let p = colors_prompt();
        let mut rng = seed::rng(1);
        let mut flawed = s.realize(&p, &mut rng);
        s.corrupt(&mut flawed, &p, Attribute::Color(0), &mut rng);
        let errors = verify_rule(&p, &flawed, &s.vocab).unwrap().errors;
        assert_eq!(errors.len(), 1);
        let reflection = Reflection::from_facts(errors, &s.vocab);
        let trials = 10_000;
        let fixed = (0..trials)
            .filter(|&seed| {
                let out = s
                    .correct_scene(&correct_req(&p, reflection.clone(), flawed.clone(), seed))
                    .unwrap();
                verify_rule(&p, &out, &s.vocab).unwrap().pass
            })
            .count();
        let rate = fixed as f64 / trials as f64;
        assert!((rate - 0.5).abs() <= 0.02, "fix rate {rate}");
    }

    fn reflect_req(p: &StructuredPrompt, scene: SceneGraph, s: &Simulation, seed: u64) -> ReflectRequest {
        let report = s
            .verify_scene(
                &VerifyRequest {
                    prompt: String::new(),
                    structured: p.clone(),
                    scene: scene.clone(),
                    seed,
                },
                VerifierMode::Oracle,
            )
            .unwrap();
        ReflectRequest {
            original_prompt: String::new(),
            current_prompt: String::new(),
            structured: p.clone(),
            scene,
            report,
            seed,
        }
    }

    #[test]
    fn oracle_reflector_lists_rule_errors() {
        let s = sim(ErrorModel::oracle(0.5));
        for (n, p) in corpus().iter().enumerate() {
            let scene = s.generate_scene(p, n as u64).unwrap();
            let errors = verify_rule(p, &scene, &s.vocab).unwrap().errors;
            let r = s.reflect_scene(&reflect_req(p, scene, &s, 4)).unwrap();
            if errors.is_empty() {
                assert_eq!(r, Reflection::no_changes());
            }
            assert_eq!(r.structured.unwrap(), errors);
        }
    }

    #[test]
    fn reflection_names_replace_and_color() {
        let s = sim(ErrorModel::oracle(0.0));
        let p = StructuredPrompt::new(
            "p",
            Category::TwoObjects,
            vec![ObjectSpec::new("blanket").color("white"), ObjectSpec::new("spoon").color("red")],
        );
        let mut scene = s.realize(&p, &mut seed::rng(0));
        for o in scene.objects.iter_mut().filter(|o| o.class == "spoon") {
            o.color = "blue".into();
        }
        let r = s.reflect_scene(&reflect_req(&p, scene, &s, 0)).unwrap();
        assert_eq!(r.text, "Replace the blue spoon's color with red.");
    }

    #[test]
    fn noisy_verifier_bounds_and_spread() {
        let sigma = 0.5;
        let s = sim(ErrorModel {
            verifier_noise: sigma,
            ..ErrorModel::default()
        });
        let p = StructuredPrompt::new(
            "p",
            Category::TwoObjects,
            vec![ObjectSpec::new("blanket").color("white"), ObjectSpec::new("spoon").color("red")],
        );
        let mut scene = s.realize(&p, &mut seed::rng(0));
        for o in scene.objects.iter_mut().filter(|o| o.class == "spoon") {
            o.color = "blue".into();
        }
        let req = |seed| VerifyRequest {
            prompt: String::new(),
            structured: p.clone(),
            scene: scene.clone(),
            seed,
        };
        let oracle = s.verify_scene(&req(0), VerifierMode::Oracle).unwrap().overall_score;
        assert_eq!(oracle, 7.5);
        let draws: Vec<f64> = (0..10_000)
            .map(|seed| s.verify_scene(&req(seed), VerifierMode::Noisy).unwrap().overall_score)
            .collect();
        assert!(draws.iter().all(|x| (0.0..=10.0).contains(x)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64).sqrt();
        assert!((sd - sigma).abs() <= 0.1 * sigma, "sd {sd}");
        assert!((mean - oracle).abs() < 0.05);
    }

    #[test]
    fn oracle_verifier_passing_scene_scores_ten() {
        let s = sim(ErrorModel::oracle(0.0));
        for p in corpus() {
            let scene = s.realize(&p, &mut seed::rng(2));
            let r = s
                .verify_scene(
                    &VerifyRequest {
                        prompt: String::new(),
                        structured: p.clone(),
                        scene,
                        seed: 0,
                    },
                    VerifierMode::Oracle,
                )
                .unwrap();
            assert_eq!(r.overall_score, 10.0);
            r.validate(p.category).unwrap();
        }
    }

    fn refine_req(p: &StructuredPrompt, current: String) -> RefineRequest {
        RefineRequest {
            original: current.clone(),
            current,
            structured: p.clone(),
            scenes: vec![SceneGraph::empty()],
            reports: vec![],
            reflection: Reflection::no_changes(),
        }
    }

    #[test]
    fn refiner_steps_specificity() {
        let s = sim(ErrorModel::default());
        let vocab = &s.vocab;
        let p = StructuredPrompt::new(
            "p",
            Category::ColorAttribution,
            vec![ObjectSpec::new("cube").color("red"), ObjectSpec::new("ball").color("blue")],
        )
        .with_specificity(0.0);
        let short = render_prompt_text(&p, false, vocab);
        assert_eq!(short, "a photo of a cube and a ball");
        let once = s.refine(&refine_req(&p, short));
        assert_eq!(once.text, "a photo of a red cube and a blue ball");
        assert_eq!(once.specificity, Some(0.5));
        let p1 = p.clone().with_specificity(0.5);
        let twice = s.refine(&refine_req(&p1, once.text));
        assert_eq!(twice.specificity, Some(1.0));
        let top = p.clone().with_specificity(1.0);
        let same = s.refine(&refine_req(&top, "keep me".into()));
        assert_eq!(same.text, "keep me");
    }
}
