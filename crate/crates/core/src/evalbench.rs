//! Benchmark harness: runs search configs over a category-balanced suite,
//! scores the selected image with the rule verifier, and reports per-category
//! pass rates, difficulty strata, width/depth comparisons and budget sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendBundle, Generator};
use crate::curation::{parse_prompts, rollout, write_atomic};
use crate::engine::{self, noise_prompt_config, RunConfig};
use crate::error::{Error, Result};
use crate::prompt::{Category, StructuredPrompt};
use crate::rule::{verify_rule, DifficultyBin};
use crate::seed;
use crate::vocab::Vocabulary;

pub const SUITE: &str = include_str!("../assets/suite.jsonl");
pub const DEFAULT_IMAGES_PER_PROMPT: usize = 4;
/// Rollouts per prompt when measuring baseline difficulty.
pub const DIFFICULTY_ROLLOUTS: usize = 10;

/// Published overall scores for a large text-to-image model, listed for
/// orientation only. Simulated backends do not reproduce them.
pub const REFERENCE_LADDER: [(&str, f64); 4] = [
    ("base model", 0.67),
    ("+ noise scaling", 0.85),
    ("+ noise & prompt scaling", 0.87),
    ("+ reflection", 0.91),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSuite {
    pub prompts: Vec<StructuredPrompt>,
    pub images_per_prompt: usize,
}

impl BenchmarkSuite {
    pub fn new(prompts: Vec<StructuredPrompt>, images_per_prompt: usize) -> Result<Self> {
        let suite = BenchmarkSuite {
            prompts,
            images_per_prompt,
        };
        suite.validate()?;
        Ok(suite)
    }

    /// The shipped 60-prompt suite, ten per category.
    pub fn bundled(vocab: &Vocabulary) -> Result<Self> {
        Self::new(parse_prompts(SUITE, vocab)?, DEFAULT_IMAGES_PER_PROMPT)
    }

    /// A suite file holds one structured prompt per line.
    pub fn load(path: &Path, images_per_prompt: usize, vocab: &Vocabulary) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::new(parse_prompts(&text, vocab)?, images_per_prompt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images_per_prompt == 0 {
            return Err(Error::invalid("images_per_prompt must be >= 1"));
        }
        for c in Category::ALL {
            if !self.prompts.iter().any(|p| p.category == c) {
                return Err(Error::invalid(format!("suite has no {c} prompts")));
            }
        }
        Ok(())
    }
}

/// A named search configuration. Its `seed` is the base from which every
/// (prompt, image) seed is derived, so two configs with the same base seed
/// start from the same noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub label: String,
    pub run: RunConfig,
}

impl EvalConfig {
    pub fn new(label: impl Into<String>, run: RunConfig) -> Self {
        EvalConfig {
            label: label.into(),
            run,
        }
    }

    pub fn split(width: usize, depth: usize, seed: u64) -> Self {
        Self::new(format!("{width}x{depth}"), RunConfig::new(width, depth, seed))
    }
}

/// Base model, noise scaling, noise and prompt scaling, and full reflection
/// search at the given budget.
pub fn ladder_configs(width: usize, depth: usize, seed: u64) -> Vec<EvalConfig> {
    let budget = width * depth;
    vec![
        EvalConfig::new("base", RunConfig::noise_only(1, seed)),
        EvalConfig::new(format!("noise-{budget}"), RunConfig::noise_only(budget, seed)),
        EvalConfig::new(format!("noise-prompt-{budget}"), noise_prompt_config(budget, seed)),
        EvalConfig::new(format!("reflection-{width}x{depth}"), RunConfig::new(width, depth, seed)),
    ]
}

pub fn image_seed(base: u64, prompt_id: &str, image: usize) -> u64 {
    seed::combine(&[base, seed::fnv1a64(prompt_id.as_bytes()), image as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub config: String,
    pub prompt_id: String,
    pub category: Category,
    pub image: usize,
    pub seed: u64,
    pub pass: bool,
    pub score: f64,
    pub images_generated: usize,
    /// Set when the run failed; the image then counts as a fail with score 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRow {
    pub label: String,
    pub width: usize,
    pub depth: usize,
    pub budget: usize,
    /// Unweighted mean of the category pass rates.
    pub overall: f64,
    pub categories: BTreeMap<Category, f64>,
    pub mean_score: f64,
    pub images_generated: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ConfigRow>,
    pub results: Vec<ImageResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strata: Option<StrataTable>,
}

impl Report {
    pub fn row(&self, label: &str) -> Option<&ConfigRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Mean pass fraction per prompt for one config.
    pub fn per_prompt(&self, label: &str) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for r in self.results.iter().filter(|r| r.config == label) {
            let e = acc.entry(r.prompt_id.clone()).or_default();
            e.0 += usize::from(r.pass);
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (p, n))| (k, p as f64 / n as f64)).collect()
    }
}

/// Rows aggregated from per-image results, in `configs` order. Results are
/// grouped by prompt id before summing, so row values do not depend on the
/// order of `results`.
pub fn aggregate(configs: &[EvalConfig], results: &[ImageResult]) -> Vec<ConfigRow> {
    configs
        .iter()
        .map(|cfg| {
            let mut mine: Vec<&ImageResult> = results.iter().filter(|r| r.config == cfg.label).collect();
            mine.sort_by(|a, b| (&a.prompt_id, a.image).cmp(&(&b.prompt_id, b.image)));
            let mut per_cat: BTreeMap<Category, (usize, usize)> = BTreeMap::new();
            for r in &mine {
                let e = per_cat.entry(r.category).or_default();
                e.0 += usize::from(r.pass);
                e.1 += 1;
            }
            let categories: BTreeMap<Category, f64> =
                per_cat.iter().map(|(c, (p, n))| (*c, *p as f64 / *n as f64)).collect();
            let overall = if categories.is_empty() {
                0.0
            } else {
                categories.values().sum::<f64>() / categories.len() as f64
            };
            let mean_score = if mine.is_empty() {
                0.0
            } else {
                mine.iter().map(|r| r.score).sum::<f64>() / mine.len() as f64
            };
            ConfigRow {
                label: cfg.label.clone(),
                width: cfg.run.width,
                depth: cfg.run.depth,
                budget: cfg.run.budget(),
                overall,
                categories,
                mean_score,
                images_generated: mine.iter().map(|r| r.images_generated).sum(),
                failures: mine.iter().filter(|r| r.error.is_some()).count(),
            }
        })
        .collect()
}

/// Every config on every (prompt, image) pair, judged by `verify_rule`.
/// Failed runs are recorded, never fatal.
pub fn run_suite(suite: &BenchmarkSuite, configs: &[EvalConfig], backends: &BackendBundle, vocab: &Vocabulary) -> Result<Report> {
    suite.validate()?;
    for c in configs {
        c.run.validate()?;
    }
    let mut labels: Vec<&str> = configs.iter().map(|c| c.label.as_str()).collect();
    labels.sort_unstable();
    if labels.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("config labels must be unique"));
    }
    let jobs: Vec<(&EvalConfig, &StructuredPrompt, usize)> = configs
        .iter()
        .flat_map(|c| suite.prompts.iter().flat_map(move |p| (0..suite.images_per_prompt).map(move |i| (c, p, i))))
        .collect();
    let results: Vec<ImageResult> = jobs
        .par_iter()
        .map(|(cfg, prompt, image)| evaluate_one(cfg, prompt, *image, backends, vocab))
        .collect();
    Ok(Report {
        rows: aggregate(configs, &results),
        results,
        strata: None,
    })
}

fn evaluate_one(cfg: &EvalConfig, prompt: &StructuredPrompt, image: usize, backends: &BackendBundle, vocab: &Vocabulary) -> ImageResult {
    let seed = image_seed(cfg.run.seed, &prompt.id, image);
    let run = RunConfig { seed, ..cfg.run.clone() };
    let mut result = ImageResult {
        config: cfg.label.clone(),
        prompt_id: prompt.id.clone(),
        category: prompt.category,
        image,
        seed,
        pass: false,
        score: 0.0,
        images_generated: 0,
        error: None,
    };
    match engine::run(prompt, &run, backends, vocab).and_then(|out| {
        let v = verify_rule(prompt, &out.best, vocab)?;
        Ok((v, out.trace.images_generated))
    }) {
        Ok((v, n)) => {
            result.pass = v.pass;
            result.score = v.score;
            result.images_generated = n;
        }
        Err(e) => {
            if let Error::RunFailed { trace, .. } = &e {
                result.images_generated = trace.images_generated;
            }
            log::warn!("{} on {} image {image}: {e}", cfg.label, prompt.id);
            result.error = Some(e.to_string());
        }
    }
    result
}

/// Pass fraction of `rollouts` fresh generations per prompt.
pub fn baseline_difficulties(
    prompts: &[StructuredPrompt],
    generator: &dyn Generator,
    rollouts: usize,
    seed_value: u64,
    vocab: &Vocabulary,
) -> Result<BTreeMap<String, f64>> {
    let (rolled, skipped) = rollout(prompts, rollouts, generator, vocab, seed_value)?;
    if let Some((id, reason)) = skipped.first() {
        return Err(Error::invalid(format!("baseline rollout failed on {id}: {reason}")));
    }
    Ok(rolled.iter().map(|r| (r.prompt.id.clone(), r.difficulty())).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub bin: DifficultyBin,
    pub prompts: usize,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataTable {
    pub before: String,
    pub after: String,
    pub rows: Vec<StratumRow>,
    /// Prompts whose difficulty fell between bins and went to the nearest one.
    pub nearest_assigned: usize,
}

impl StrataTable {
    pub fn row(&self, bin: DifficultyBin) -> &StratumRow {
        self.rows.iter().find(|r| r.bin == bin).expect("every bin has a row")
    }
}

/// Per-bin pass rates of two configs of `report`, with prompts binned by
/// baseline difficulty. Empty bins report zeros.
pub fn stratify(difficulties: &BTreeMap<String, f64>, report: &Report, before: &str, after: &str) -> Result<StrataTable> {
    let b = report.per_prompt(before);
    let a = report.per_prompt(after);
    if b.is_empty() || a.is_empty() {
        return Err(Error::invalid(format!("report has no results for {before:?} or {after:?}")));
    }
    let mut acc: BTreeMap<DifficultyBin, (usize, f64, f64)> = DifficultyBin::ALL.iter().map(|b| (*b, (0, 0.0, 0.0))).collect();
    let mut nearest = 0;
    for (id, d) in difficulties {
        let (Some(sb), Some(sa)) = (b.get(id), a.get(id)) else {
            continue;
        };
        let (bin, moved) = DifficultyBin::classify(*d);
        if moved {
            log::warn!("difficulty {d} of {id} is between bins, assigned to {}", bin.as_str());
            nearest += 1;
        }
        let e = acc.get_mut(&bin).expect("all bins present");
        e.0 += 1;
        e.1 += sb;
        e.2 += sa;
    }
    let rows = acc
        .into_iter()
        .map(|(bin, (n, sb, sa))| {
            let (before, after) = if n == 0 { (0.0, 0.0) } else { (sb / n as f64, sa / n as f64) };
            StratumRow {
                bin,
                prompts: n,
                before,
                after,
                delta: after - before,
            }
        })
        .collect();
    Ok(StrataTable {
        before: before.into(),
        after: after.into(),
        rows,
        nearest_assigned: nearest,
    })
}

/// Parse `"16x1,8x2"` into splits.
pub fn parse_splits(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(|s| {
            let (n, m) = s
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| Error::invalid(format!("split {s:?} is not NxM")))?;
            let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::invalid(format!("split {s:?} is not NxM")));
            Ok((parse(n)?, parse(m)?))
        })
        .collect()
}

pub fn default_splits(budget: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut m = 1;
    while m <= budget {
        if budget % m == 0 {
            out.push((budget / m, m));
        }
        m *= 2;
    }
    out
}

/// One row per (N, M) split of `budget`, all from the same base seed.
pub fn compare_strategies(
    budget: usize,
    splits: &[(usize, usize)],
    suite: &BenchmarkSuite,
    seed_value: u64,
    backends: &BackendBundle,
    vocab: &Vocabulary,
) -> Result<Report> {
    if let Some((n, m)) = splits.iter().find(|(n, m)| n * m != budget) {
        return Err(Error::invalid(format!("split {n}x{m} does not use budget {budget}")));
    }
    let configs: Vec<EvalConfig> = splits.iter().map(|(n, m)| EvalConfig::split(*n, *m, seed_value)).collect();
    run_suite(suite, &configs, backends, vocab)
}

/// Width and depth used at each budget of a sweep: depth is the largest
/// divisor of the budget not above `max_depth`.
pub fn sweep_split(budget: usize, max_depth: usize) -> (usize, usize) {
    let depth = (1..=max_depth.min(budget).max(1)).rev().find(|d| budget % d == 0).unwrap_or(1);
    (budget / depth, depth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub x: Vec<usize>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// Overall pass rate against budget, one series per named verifier bundle.
pub fn budget_sweep(
    budgets: &[usize],
    max_depth: usize,
    verifiers: &[(String, BackendBundle)],
    suite: &BenchmarkSuite,
    seed_value: u64,
    vocab: &Vocabulary,
) -> Result<PlotData> {
    if budgets.is_empty() || budgets.contains(&0) {
        return Err(Error::invalid("budgets must be non-empty and positive"));
    }
    let configs: Vec<EvalConfig> = budgets
        .iter()
        .map(|b| {
            let (n, m) = sweep_split(*b, max_depth);
            EvalConfig::new(format!("budget-{b}"), RunConfig::new(n, m, seed_value))
        })
        .collect();
    let mut series = Vec::new();
    for (name, bundle) in verifiers {
        let report = run_suite(suite, &configs, bundle, vocab)?;
        series.push(Series {
            name: name.clone(),
            x: budgets.to_vec(),
            y: report.rows.iter().map(|r| r.overall).collect(),
        });
    }
    Ok(PlotData {
        x_label: "images generated".into(),
        y_label: "overall pass rate".into(),
        series,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Text,
}

pub const CSV_FILE: &str = "report.csv";
pub const JSON_FILE: &str = "report.json";
pub const TEXT_FILE: &str = "report.txt";
pub const PLOT_FILE: &str = "plot_data.json";
pub const CSV_HEADER: [&str; 9] = [
    "config",
    "width",
    "depth",
    "budget",
    "category",
    "pass_rate",
    "mean_score",
    "images_generated",
    "failures",
];

/// One CSV row per config and category, then a row with category `overall`.
/// Rates are printed with six decimals.
pub fn to_csv(report: &Report) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for row in &report.rows {
        let mut cells = |cat: &str, rate: f64| {
            w.write_record([
                row.label.clone(),
                row.width.to_string(),
                row.depth.to_string(),
                row.budget.to_string(),
                cat.to_string(),
                format!("{rate:.6}"),
                format!("{:.6}", row.mean_score),
                row.images_generated.to_string(),
                row.failures.to_string(),
            ])
        };
        for (c, rate) in &row.categories {
            cells(c.as_str(), *rate).map_err(csv_err)?;
        }
        cells("overall", row.overall).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn to_text(report: &Report) -> String {
    let mut s = String::new();
    let cats: Vec<Category> = Category::ALL.to_vec();
    let _ = write!(s, "{:<22} {:>6} {:>8}", "config", "budget", "overall");
    for c in &cats {
        let _ = write!(s, " {:>17}", c.as_str());
    }
    s.push('\n');
    for row in &report.rows {
        let _ = write!(s, "{:<22} {:>6} {:>8.4}", row.label, row.budget, row.overall);
        for c in &cats {
            match row.categories.get(c) {
                Some(v) => {
                    let _ = write!(s, " {:>17.4}", v);
                }
                None => {
                    let _ = write!(s, " {:>17}", "-");
                }
            }
        }
        if row.failures > 0 {
            let _ = write!(s, "  ({} failed runs)", row.failures);
        }
        s.push('\n');
    }
    if let Some(t) = &report.strata {
        let _ = writeln!(s, "\ndifficulty strata: {} -> {}", t.before, t.after);
        for r in &t.rows {
            let _ = writeln!(
                s,
                "  {:<7} prompts {:>5}  before {:.4}  after {:.4}  delta {:+.4}",
                r.bin.as_str(),
                r.prompts,
                r.before,
                r.after,
                r.delta
            );
        }
        if t.nearest_assigned > 0 {
            let _ = writeln!(s, "  {} prompt(s) fell between bins", t.nearest_assigned);
        }
    }
    s.push_str("\nreference only, published with a large text-to-image model (not reproducible here):\n");
    for (label, v) in REFERENCE_LADDER {
        let _ = writeln!(s, "  {label:<26} {v:.2}");
    }
    s
}

/// Write the requested formats (plus plot data when given) into `dir`.
/// On any failure the files written so far are removed.
pub fn emit_reports(report: &Report, plot: Option<&PlotData>, formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, |w| w.write_all(body.as_bytes()))?;
        written.push(path);
        Ok(())
    };
    let result = (|| -> Result<()> {
        for f in formats {
            match f {
                ReportFormat::Csv => emit(CSV_FILE, to_csv(report)?)?,
                ReportFormat::Json => emit(JSON_FILE, serde_json::to_string_pretty(report).expect("report serializes") + "\n")?,
                ReportFormat::Text => emit(TEXT_FILE, to_text(report))?,
            }
        }
        if let Some(p) = plot {
            emit(PLOT_FILE, serde_json::to_string_pretty(p).expect("plot serializes") + "\n")?;
        }
        Ok(())
    })();
    if let Err(e) = result {
        for p in &written {
            let _ = fs::remove_file(p);
        }
        return Err(e);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::sim::{Simulation, VerifierMode};
    use crate::backend::ErrorModel;
    use crate::prompt::PromptSampler;

    fn vocab() -> Vocabulary {
        Vocabulary::default()
    }

    fn bundle(model: ErrorModel, mode: VerifierMode) -> BackendBundle {
        Simulation::new(vocab(), model).bundle(mode)
    }

    fn small_suite(per_category: usize, seed: u64, images: usize) -> BenchmarkSuite {
        BenchmarkSuite::new(PromptSampler::new(vocab()).balanced("t", per_category, seed), images).unwrap()
    }

    #[test]
    fn bundled_suite_is_balanced() {
        let s = BenchmarkSuite::bundled(&vocab()).unwrap();
        assert_eq!(s.prompts.len(), 60);
        assert_eq!(s.images_per_prompt, 4);
        for c in Category::ALL {
            assert_eq!(s.prompts.iter().filter(|p| p.category == c).count(), 10);
        }
        let mut missing = s.clone();
        missing.prompts.retain(|p| p.category != Category::Counting);
        assert!(missing.validate().is_err());
    }

    #[test]
    fn perfect_backends_score_one() {
        let v = vocab();
        let suite = small_suite(2, 1, 2);
        let b = bundle(ErrorModel::oracle(0.0), VerifierMode::Oracle);
        let report = run_suite(&suite, &ladder_configs(2, 2, 3), &b, &v).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert!(report.rows.iter().all(|r| r.overall == 1.0 && r.failures == 0));
        assert_eq!(report.row("reflection-2x2").unwrap().images_generated, 12 * 2 * 4);
    }

    fn result(cat: Category, id: &str, pass: bool) -> ImageResult {
        ImageResult {
            config: "c".into(),
            prompt_id: id.into(),
            category: cat,
            image: 0,
            seed: 0,
            pass,
            score: if pass { 1.0 } else { 0.5 },
            images_generated: 1,
            error: None,
        }
    }

    #[test]
    fn overall_is_mean_of_categories() {
        let results = vec![
            result(Category::Colors, "a", true),
            result(Category::Counting, "b", true),
            result(Category::Counting, "c", false),
            result(Category::Counting, "d", true),
            result(Category::Counting, "e", false),
        ];
        let cfg = [EvalConfig::new("c", RunConfig::new(1, 1, 0))];
        let rows = aggregate(&cfg, &results);
        assert_eq!(rows[0].overall, 0.75);
        let mut reversed = results.clone();
        reversed.reverse();
        assert_eq!(aggregate(&cfg, &reversed), rows);
    }

    #[test]
    fn failed_runs_count_as_zero() {
        let v = vocab();
        let suite = small_suite(1, 2, 1);
        let b = bundle(ErrorModel::default(), VerifierMode::Oracle);
        let bad = EvalConfig::new("bad", RunConfig::new(0, 1, 0));
        assert!(run_suite(&suite, &[bad], &b, &v).is_err());

        struct Broken;
        impl crate::backend::Generator for Broken {
            fn generate(&self, _: &crate::backend::GenerateRequest) -> Result<crate::scene::SceneGraph> {
                Err(Error::invalid("down"))
            }
            fn kind(&self) -> crate::backend::BackendKind {
                crate::backend::BackendKind::Remote
            }
        }
        let mut broken = b.clone();
        broken.generator = std::sync::Arc::new(Broken);
        let report = run_suite(&suite, &[EvalConfig::split(2, 2, 0)], &broken, &v).unwrap();
        assert_eq!(report.rows[0].overall, 0.0);
        assert_eq!(report.rows[0].failures, 6);
        assert!(report.results.iter().all(|r| r.error.is_some() && r.score == 0.0));
    }

    #[test]
    fn width_only_split_equals_noise_only() {
        let v = vocab();
        let suite = small_suite(3, 5, 2);
        let b = bundle(ErrorModel::default(), VerifierMode::Noisy);
        let cmp = compare_strategies(16, &[(16, 1)], &suite, 9, &b, &v).unwrap();
        for r in &cmp.results {
            let prompt = suite.prompts.iter().find(|p| p.id == r.prompt_id).unwrap();
            let out = engine::noise_only(prompt, 16, r.seed, &b, &v).unwrap();
            assert_eq!(verify_rule(prompt, &out.best, &v).unwrap().score, r.score);
        }
        assert_eq!(compare_strategies(16, &default_splits(16), &suite, 9, &b, &v).unwrap().rows.len(), 5);
        assert!(compare_strategies(16, &[(4, 3)], &suite, 9, &b, &v).is_err());
    }

    #[test]
    fn splits_parse() {
        assert_eq!(parse_splits("16x1, 1x16").unwrap(), vec![(16, 1), (1, 16)]);
        assert!(parse_splits("16").is_err());
        assert!(parse_splits("ax2").is_err());
        assert_eq!(default_splits(16), vec![(16, 1), (8, 2), (4, 4), (2, 8), (1, 16)]);
        assert_eq!(sweep_split(1, 4), (1, 1));
        assert_eq!(sweep_split(2, 4), (1, 2));
        assert_eq!(sweep_split(32, 4), (8, 4));
        assert_eq!(sweep_split(6, 4), (2, 3));
    }

    #[test]
    fn strata_bins() {
        let diffs: BTreeMap<String, f64> = [("a", 0.2), ("b", 1.0), ("c", 0.35), ("d", 0.5)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let mut results = Vec::new();
        for (id, before, after) in [("a", false, true), ("b", true, true), ("c", false, false), ("d", true, true)] {
            results.push(ImageResult {
                config: "before".into(),
                ..result(Category::Colors, id, before)
            });
            results.push(ImageResult {
                config: "after".into(),
                ..result(Category::Colors, id, after)
            });
        }
        let report = Report {
            rows: vec![],
            results,
            strata: None,
        };
        let t = stratify(&diffs, &report, "before", "after").unwrap();
        assert_eq!(t.nearest_assigned, 1);
        let hard = t.row(DifficultyBin::Hard);
        assert_eq!((hard.prompts, hard.before, hard.after), (2, 0.0, 0.5));
        assert_eq!(t.row(DifficultyBin::Easy).prompts, 1);
        assert_eq!(t.row(DifficultyBin::Easy).delta, 0.0);
        assert!(stratify(&diffs, &report, "before", "nope").is_err());
    }

    #[test]
    fn csv_round_trip_and_sweep_axis() {
        let v = vocab();
        let suite = small_suite(1, 3, 1);
        let b = bundle(ErrorModel::default(), VerifierMode::Noisy);
        let report = run_suite(&suite, &ladder_configs(2, 2, 1), &b, &v).unwrap();
        let text = to_csv(&report).unwrap();
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER.to_vec());
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 4 * 7);
        for (i, row) in report.rows.iter().enumerate() {
            let overall = &rows[i * 7 + 6];
            assert_eq!(&overall[0], row.label);
            assert_eq!(&overall[4], "overall");
            assert_eq!(overall[5].parse::<f64>().unwrap(), (row.overall * 1e6).round() / 1e6);
        }
        let budgets = [1, 2, 4, 8, 16, 32];
        let plot = budget_sweep(&budgets, 4, &[("noisy".into(), b.clone())], &suite, 1, &v).unwrap();
        assert_eq!(plot.series[0].x, budgets.to_vec());
        assert_eq!(plot.series[0].y.len(), 6);
    }

    #[test]
    fn emit_writes_and_cleans_up() {
        let v = vocab();
        let suite = small_suite(1, 3, 1);
        let b = bundle(ErrorModel::default(), VerifierMode::Noisy);
        let report = run_suite(&suite, &[EvalConfig::split(1, 1, 0)], &b, &v).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_reports(&report, None, &[ReportFormat::Csv, ReportFormat::Json, ReportFormat::Text], dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let back: Report = serde_json::from_str(&fs::read_to_string(dir.path().join(JSON_FILE)).unwrap()).unwrap();
        assert_eq!(back, report);
        let text = fs::read_to_string(dir.path().join(TEXT_FILE)).unwrap();
        assert!(text.contains("not reproducible") && text.contains("0.91"));
        // a directory in the way of the JSON file makes the second write fail
        let dir2 = tempfile::tempdir().unwrap();
        fs::create_dir(dir2.path().join(JSON_FILE)).unwrap();
        assert!(emit_reports(&report, None, &[ReportFormat::Csv, ReportFormat::Json], dir2.path()).is_err());
        assert!(!dir2.path().join(CSV_FILE).exists());
    }
}
