mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use reflectionflow::backend::Role;
use reflectionflow::curation::{self, MODEL_FILE};
use reflectionflow::engine::{self, RunConfig, Trace};
use reflectionflow::evalbench::{self, BenchmarkSuite, EvalConfig, ReportFormat};
use reflectionflow::prompt::StructuredPrompt;
use reflectionflow::reward::{self, PreferencePair, TrainConfig};
use reflectionflow::rule::verify_rule;
use reflectionflow::Error;

use config::{parse_sources, AppConfig, VerifierChoice};

/// Generate, verify, reflect, correct: refinement search over simulated or
/// remote text-to-image backends.
#[derive(Debug, Parser)]
#[command(name = "reflectionflow", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (required with simulated backends)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Search width N
    #[arg(long, global = true)]
    width: Option<usize>,
    /// Reflection depth M
    #[arg(long, global = true)]
    depth: Option<usize>,
    /// Total image budget N×M
    #[arg(long, global = true)]
    budget: Option<usize>,
    /// Worker threads (0 = one per core)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Triplet sources for curate, comma separated: rule,reward,longshort,edit
    #[arg(long, global = true)]
    sources: Option<String>,
    /// Width×depth splits for eval, e.g. 16x1,8x2,1x16
    #[arg(long, global = true)]
    splits: Option<String>,
    /// Output directory (or file for run)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Verifier used inside the loop
    #[arg(long, global = true, value_enum)]
    verifier: Option<VerifierChoice>,
    /// Remote generator base URL
    #[arg(long, global = true)]
    generator_url: Option<String>,
    /// Remote corrector base URL
    #[arg(long, global = true)]
    corrector_url: Option<String>,
    /// Remote reflector base URL
    #[arg(long, global = true)]
    reflector_url: Option<String>,
    /// Remote verifier base URL
    #[arg(long, global = true)]
    verifier_url: Option<String>,
    /// Remote prompt refiner base URL
    #[arg(long, global = true)]
    refiner_url: Option<String>,
    /// Reward model checkpoint for --verifier bt
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a triplet dataset: rollout, filter, pair, annotate, post-filter, export
    Curate {
        /// Prompt corpus (one JSON prompt per line); bundled corpus by default
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Edit records to import; bundled fixture by default
        #[arg(long)]
        edits: Option<PathBuf>,
    },
    /// Train the Bradley–Terry reward model
    TrainVerifier {
        /// Triplet dataset; bundled synthetic pairs when omitted
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, default_value_t = 0.0)]
        l2: f64,
    },
    /// Run one refinement search and print the selected scene
    Run {
        /// Prompt as JSON, or @file holding one JSON prompt
        #[arg(long, conflicts_with = "prompt_id")]
        prompt: Option<String>,
        /// Id of a prompt in the bundled corpus
        #[arg(long)]
        prompt_id: Option<String>,
        /// Count the initial generation separately (N + N×M images)
        #[arg(long)]
        literal: bool,
    },
    /// Run the benchmark suite and write reports
    Eval {
        /// Suite file (one JSON prompt per line)
        #[arg(long)]
        suite: Option<PathBuf>,
        /// Images per prompt
        #[arg(long)]
        images: Option<usize>,
        /// Also emit difficulty strata against a 10-rollout baseline
        #[arg(long)]
        stratify: bool,
        /// Budgets for the plot-data sweep, e.g. 1,2,4,8,16,32
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Pretty-print a stored trace
    Trace {
        file: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 config, 2 backend, 3 I/O, 4 internal invariant.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_) | Error::InvalidInput(_) => 1,
                Error::Backend { .. } | Error::Schema { .. } | Error::RunFailed { .. } => 2,
                Error::Io(_) => 3,
                Error::NonFinite { .. } => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    4
}

fn settings(g: &Global) -> anyhow::Result<AppConfig> {
    let mut cfg = AppConfig::load(g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.seed = Some(s);
    }
    if let Some(j) = g.jobs {
        cfg.jobs = j;
    }
    if let Some(o) = &g.out {
        cfg.out = Some(o.clone());
    }
    if let Some(v) = g.verifier {
        cfg.backends.verifier = v;
    }
    if let Some(c) = &g.checkpoint {
        cfg.backends.checkpoint = Some(c.clone());
    }
    let urls = [
        (Role::Generator, &g.generator_url),
        (Role::Corrector, &g.corrector_url),
        (Role::Reflector, &g.reflector_url),
        (Role::Verifier, &g.verifier_url),
        (Role::Refiner, &g.refiner_url),
    ];
    for (role, url) in urls {
        if let Some(u) = url {
            cfg.backends.urls.insert(role.as_str().into(), u.clone());
        }
    }
    if cfg.backends.urls.contains_key(Role::Verifier.as_str()) && g.verifier.is_none() {
        cfg.backends.verifier = VerifierChoice::Remote;
    }
    if let Some(w) = g.width {
        cfg.run.width = w;
    }
    if let Some(d) = g.depth {
        cfg.run.depth = d;
    }
    if let Some(b) = g.budget {
        cfg.eval.budget = b;
        match (g.width, g.depth) {
            (Some(_), Some(_)) => {}
            (Some(w), None) => cfg.run.depth = split_budget(b, w)?,
            (None, _) => cfg.run.width = split_budget(b, cfg.run.depth)?,
        }
        if cfg.run.width * cfg.run.depth != b {
            bail!(Error::Config(format!("--budget {b} != width {} × depth {}", cfg.run.width, cfg.run.depth)));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn split_budget(budget: usize, part: usize) -> anyhow::Result<usize> {
    if part == 0 || budget % part != 0 {
        bail!(Error::Config(format!("budget {budget} is not divisible by {part}")));
    }
    Ok(budget / part)
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let cfg = settings(&cli.global)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .context("building worker pool")?;
    pool.install(|| match cli.command {
        Command::Curate { corpus, edits } => curate(&cfg, &cli.global, corpus.as_deref(), edits.as_deref()),
        Command::TrainVerifier { dataset, epochs, lr, l2 } => train_verifier(&cfg, dataset.as_deref(), epochs, lr, l2),
        Command::Run {
            prompt,
            prompt_id,
            literal,
        } => run(&cfg, prompt.as_deref(), prompt_id.as_deref(), literal),
        Command::Eval {
            suite,
            images,
            stratify,
            sweep,
        } => eval(&cfg, &cli.global, suite, images, stratify, sweep.as_deref()),
        Command::Trace { file } => trace(&file),
    })
}

fn out_dir(cfg: &AppConfig) -> anyhow::Result<&Path> {
    cfg.out
        .as_deref()
        .ok_or_else(|| Error::Config("--out is required".into()).into())
}

fn curate(cfg: &AppConfig, g: &Global, corpus: Option<&Path>, edits: Option<&Path>) -> anyhow::Result<()> {
    let vocab = cfg.vocabulary()?;
    let mut ccfg = cfg.curation.clone();
    ccfg.seed = cfg.seed()?;
    ccfg.error_model = cfg.backends.error_model;
    if let Some(s) = &g.sources {
        ccfg.sources = parse_sources(s)?;
    }
    let prompts = match corpus {
        Some(p) => curation::parse_prompts(&read(p)?, &vocab).context("stage load")?,
        None => curation::bundled_corpus(&vocab)?,
    };
    let edits = match edits {
        Some(p) => read(p)?,
        None => curation::EDIT_FIXTURE.to_string(),
    };
    let dir = out_dir(cfg)?;
    let out = curation::curate(&prompts, &edits, &ccfg, &vocab).context("stage curate")?;
    curation::export_dataset(&out.triplets, &out.manifest, dir).context("stage export")?;
    out.model.save(&dir.join(MODEL_FILE)).context("stage export")?;
    println!("{} triplets written to {}", out.manifest.total, dir.display());
    for (source, n) in &out.manifest.counts {
        println!("  {source:<10} {n}");
    }
    for (name, n) in &out.manifest.counters {
        println!("  {name:<20} {n}");
    }
    println!("reward model held-out accuracy {:.4}", out.held_out_accuracy);
    Ok(())
}

fn read(p: &Path) -> anyhow::Result<String> {
    fs::read_to_string(p)
        .map_err(Error::Io)
        .with_context(|| format!("reading {}", p.display()))
}

#[derive(serde::Serialize)]
struct Metrics<'a> {
    train_pairs: usize,
    held_out_pairs: usize,
    train_loss: f64,
    held_out_accuracy: f64,
    epochs: &'a [reward::EpochLog],
}

fn train_verifier(cfg: &AppConfig, dataset: Option<&Path>, epochs: usize, lr: f64, l2: f64) -> anyhow::Result<()> {
    let vocab = cfg.vocabulary()?;
    let seed = cfg.seed()?;
    let (train, held_out): (Vec<PreferencePair>, Vec<PreferencePair>) = match dataset {
        None => (
            reward::synthetic_pairs(2000, seed, &vocab),
            reward::synthetic_pairs(500, seed.wrapping_add(1), &vocab),
        ),
        Some(p) => {
            let triplets = curation::read_dataset(p)?;
            let mut seen = std::collections::BTreeSet::new();
            let pairs: Vec<PreferencePair> = triplets
                .into_iter()
                .filter(|t| seen.insert((t.structured_prompt.id.clone(), t.good.content_hash(), t.flawed.content_hash())))
                .map(|t| PreferencePair::new(t.structured_prompt, t.good, t.flawed, t.source))
                .collect::<Result<_, _>>()?;
            let every = cfg.curation.held_out_every.max(2);
            let (h, t): (Vec<_>, Vec<_>) = pairs.into_iter().enumerate().partition(|(i, _)| i % every == 0);
            (t.into_iter().map(|x| x.1).collect(), h.into_iter().map(|x| x.1).collect())
        }
    };
    let tcfg = TrainConfig {
        lr,
        epochs,
        l2,
        seed,
        ..cfg.curation.train.clone()
    };
    let out = reward::train_bt(&train, &held_out, &tcfg, &vocab)?;
    let dir = out_dir(cfg)?;
    fs::create_dir_all(dir).map_err(Error::Io)?;
    out.model.save(&dir.join(MODEL_FILE))?;
    let metrics = Metrics {
        train_pairs: train.len(),
        held_out_pairs: held_out.len(),
        train_loss: out.train_loss,
        held_out_accuracy: out.held_out_accuracy,
        epochs: &out.log,
    };
    let text = serde_json::to_string_pretty(&metrics)? + "\n";
    fs::write(dir.join("metrics.json"), text).map_err(Error::Io)?;
    println!("trained on {} pairs, {} held out", train.len(), held_out.len());
    println!("train loss {:.6}", out.train_loss);
    println!("held-out accuracy {:.4}", out.held_out_accuracy);
    Ok(())
}

fn load_prompt(cfg: &AppConfig, prompt: Option<&str>, prompt_id: Option<&str>) -> anyhow::Result<StructuredPrompt> {
    let vocab = cfg.vocabulary()?;
    let p: StructuredPrompt = match (prompt, prompt_id) {
        (Some(text), _) => {
            let json = match text.strip_prefix('@') {
                Some(path) => read(Path::new(path))?,
                None => text.to_string(),
            };
            serde_json::from_str(json.trim()).map_err(|e| Error::Config(format!("--prompt: {e}")))?
        }
        (None, Some(id)) => curation::bundled_corpus(&vocab)?
            .into_iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::Config(format!("no prompt {id:?} in the bundled corpus")))?,
        (None, None) => bail!(Error::Config("give --prompt or --prompt-id".into())),
    };
    p.validate(&vocab)?;
    Ok(p)
}

fn run(cfg: &AppConfig, prompt: Option<&str>, prompt_id: Option<&str>, literal: bool) -> anyhow::Result<()> {
    let vocab = cfg.vocabulary()?;
    let p = load_prompt(cfg, prompt, prompt_id)?;
    let bundle = cfg.bundle(&vocab)?;
    let rc = RunConfig {
        enable_reflection: cfg.run.reflection,
        enable_prompt_scaling: cfg.run.prompt_scaling,
        budget_mode: if literal {
            engine::BudgetMode::Algorithm1Literal
        } else {
            cfg.run.budget_mode
        },
        ..RunConfig::new(cfg.run.width, cfg.run.depth, cfg.seed()?)
    };
    let out = engine::run(&p, &rc, &bundle, &vocab)?;
    let sel = out.trace.selected.expect("successful runs select");
    let verdict = verify_rule(&p, &out.best, &vocab)?;
    println!("prompt {} ({})", p.id, p.category);
    println!("width {} depth {}: {} images generated", rc.width, rc.depth, out.trace.images_generated);
    println!("selected chain {} iteration {} verifier score {:.4}", sel.chain, sel.iteration, sel.score);
    println!("rule score {:.4} pass {}", verdict.score, verdict.pass);
    println!("{}", String::from_utf8_lossy(&out.best.canonical_serialize()));
    if let Some(path) = &cfg.out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(Error::Io)?;
        }
        fs::write(path, out.trace.to_json()).map_err(Error::Io)?;
        println!("trace written to {}", path.display());
    }
    Ok(())
}

fn eval(
    cfg: &AppConfig,
    g: &Global,
    suite: Option<PathBuf>,
    images: Option<usize>,
    stratify: bool,
    sweep: Option<&str>,
) -> anyhow::Result<()> {
    let vocab = cfg.vocabulary()?;
    let seed = cfg.seed()?;
    let bundle = cfg.bundle(&vocab)?;
    let images = images.unwrap_or(cfg.eval.images_per_prompt);
    let suite = match suite.or_else(|| cfg.eval.suite.clone()) {
        Some(p) => BenchmarkSuite::load(&p, images, &vocab)?,
        None => BenchmarkSuite::new(BenchmarkSuite::bundled(&vocab)?.prompts, images)?,
    };
    let mut report = match &g.splits {
        Some(s) => {
            let splits = evalbench::parse_splits(s).map_err(|e| Error::Config(e.to_string()))?;
            let budget = match g.budget {
                Some(b) => b,
                None => splits[0].0 * splits[0].1,
            };
            evalbench::compare_strategies(budget, &splits, &suite, seed, &bundle, &vocab)
                .map_err(|e| Error::Config(e.to_string()))?
        }
        None => {
            let configs = evalbench::ladder_configs(cfg.run.width, cfg.run.depth, seed);
            evalbench::run_suite(&suite, &configs, &bundle, &vocab)?
        }
    };
    if stratify {
        let diffs = evalbench::baseline_difficulties(
            &suite.prompts,
            bundle.generator.as_ref(),
            evalbench::DIFFICULTY_ROLLOUTS,
            seed,
            &vocab,
        )?;
        let first = report.rows.first().map(|r| r.label.clone()).unwrap_or_default();
        let last = report.rows.last().map(|r| r.label.clone()).unwrap_or_default();
        let before = if g.splits.is_some() {
            // compare the first split against a single image
            let base = EvalConfig::new("base", RunConfig::noise_only(1, seed));
            let extra = evalbench::run_suite(&suite, &[base], &bundle, &vocab)?;
            report.rows.insert(0, extra.rows[0].clone());
            report.results.extend(extra.results);
            "base".to_string()
        } else {
            first
        };
        report.strata = Some(evalbench::stratify(&diffs, &report, &before, &last)?);
    }
    let sweep_budgets: Vec<usize> = match sweep {
        Some(s) => s
            .split(',')
            .map(|x| x.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad budget {x:?} in --sweep"))))
            .collect::<Result<_, _>>()?,
        None => cfg.eval.sweep.clone(),
    };
    let plot = if sweep_budgets.is_empty() {
        None
    } else {
        let mut oracle_cfg = cfg.clone();
        oracle_cfg.backends.verifier = VerifierChoice::Oracle;
        let mut verifiers = vec![(format!("{:?}", cfg.backends.verifier).to_lowercase(), bundle.clone())];
        if cfg.backends.verifier != VerifierChoice::Oracle && !cfg.backends.urls.contains_key(Role::Verifier.as_str()) {
            verifiers.push(("oracle".into(), oracle_cfg.bundle(&vocab)?));
        }
        Some(evalbench::budget_sweep(&sweep_budgets, cfg.eval.max_depth, &verifiers, &suite, seed, &vocab)?)
    };
    let dir = out_dir(cfg)?;
    evalbench::emit_reports(&report, plot.as_ref(), &[ReportFormat::Csv, ReportFormat::Json, ReportFormat::Text], dir)?;
    print!("{}", evalbench::to_text(&report));
    println!("reports written to {}", dir.display());
    Ok(())
}

fn trace(file: &Path) -> anyhow::Result<()> {
    let t = Trace::from_json(&read(file)?)?;
    print!("{t}");
    Ok(())
}
