use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use viewbridge::checkpoint::{load_params, optimizer_to_file, save_params};
use viewbridge::eval::render_text_table;
use viewbridge::gradcheck::run_suite;
use viewbridge::oracle::run_oracle_suite;
use viewbridge::pipeline::{foreign_shift_seed, run_benchmark, sync_groups, write_report, Benchmark, Corpus};
use viewbridge::sync::{groups_to_jsonl, stratified_split, Manifest, DEFAULT_FRACTIONS};
use viewbridge::synth::{generate_corpus, generate_foreign_corpus, write_corpus, GeneratorSpec};
use viewbridge::trainer::{init_params, train_phase1, train_phase2, write_metrics, BaselineKind};
use viewbridge::TrainConfig;

#[derive(Parser)]
#[command(name = "viewbridge", version, about = "Cross-view, cross-modal adaptation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic multi-view corpus.
    GenData(GenArgs),
    /// Render a shifted corpus for cross-dataset evaluation.
    GenForeign(GenForeignArgs),
    /// Write synchronized groups of a corpus as JSON lines.
    Sync(SyncArgs),
    /// Write a stratified train/val/test assignment of the groups.
    Split(SplitArgs),
    /// Phase 1: cross-entropy plus contrastive training.
    TrainPhase1(TrainArgs),
    /// Phase 2: adaptation to the target modality from a phase-1 checkpoint.
    TrainPhase2(TrainArgs),
    /// Train one or all baselines and evaluate them.
    Baseline(BaselineArgs),
    /// Evaluate the checkpoints of a baseline run directory.
    Evaluate(EvaluateArgs),
    /// Finite-difference checks of every analytic gradient.
    Gradcheck(CheckArgs),
    /// Compare losses, metrics and encoder with loop implementations.
    OracleCheck(CheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenForeignArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = viewbridge::pipeline::FOREIGN_MAGNITUDE)]
    magnitude: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SyncArgs {
    /// Corpus directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Phase-1 checkpoint (phase 2 only).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum KindArg {
    FinetuneOnly,
    FinetuneContrastive,
    UdaOnly,
    FullMethod,
    All,
}

impl KindArg {
    fn kinds(self) -> Vec<BaselineKind> {
        match self {
            KindArg::FinetuneOnly => vec![BaselineKind::FinetuneOnly],
            KindArg::FinetuneContrastive => vec![BaselineKind::FinetuneContrastive],
            KindArg::UdaOnly => vec![BaselineKind::UdaOnly],
            KindArg::FullMethod => vec![BaselineKind::FullMethod],
            KindArg::All => BaselineKind::ALL.to_vec(),
        }
    }
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generator spec used when no corpus directory is given.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Existing corpus directory instead of rendering one.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Existing foreign corpus directory.
    #[arg(long)]
    foreign: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "all")]
    kind: KindArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    foreign: Option<PathBuf>,
    /// Baseline run directory holding `<kind>/model.ckpt`.
    #[arg(long)]
    run: Option<PathBuf>,
    /// A single checkpoint to evaluate instead of a run directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exclusive claim on an output directory, released on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("{} is in use by another run (remove {} if stale)", dir.display(), path.display()))?;
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg.validated()?)
}

fn load_spec(path: Option<&Path>, seed: u64) -> Result<GeneratorSpec> {
    let spec = match path {
        Some(p) => {
            let mut s = GeneratorSpec::load(p).with_context(|| format!("reading {}", p.display()))?;
            s.seed = seed;
            s
        }
        None => GeneratorSpec::benchmark(seed),
    };
    spec.validate()?;
    Ok(spec)
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = if path.is_dir() { path.join("manifest.jsonl") } else { path.to_path_buf() };
    Manifest::load(&file).with_context(|| format!("reading {}", file.display()))
}

fn gen_data(a: GenArgs) -> Result<()> {
    let spec = load_spec(a.spec.as_deref(), a.seed)?;
    let _lock = RunLock::acquire(&a.out)?;
    let corpus = generate_corpus(&spec)?;
    write_corpus(&a.out, &corpus.clips, &corpus.manifest)?;
    fs::write(a.out.join("spec.toml"), spec.to_toml_string()?)?;
    println!("wrote {} clips to {}", corpus.clips.len(), a.out.display());
    Ok(())
}

fn gen_foreign(a: GenForeignArgs) -> Result<()> {
    let spec = load_spec(a.spec.as_deref(), a.seed)?;
    if !(a.magnitude >= 0.0 && a.magnitude.is_finite()) {
        bail!("magnitude must be >= 0");
    }
    let _lock = RunLock::acquire(&a.out)?;
    let corpus = generate_foreign_corpus(&spec, foreign_shift_seed(a.seed), a.magnitude)?;
    write_corpus(&a.out, &corpus.clips, &corpus.manifest)?;
    println!("wrote {} foreign clips to {}", corpus.clips.len(), a.out.display());
    Ok(())
}

fn sync(a: SyncArgs) -> Result<()> {
    let manifest = load_manifest(&a.data)?;
    let groups = sync_groups(&manifest)?;
    fs::write(&a.out, groups_to_jsonl(&groups)?)?;
    let singles = groups.iter().filter(|g| g.is_singleton()).count();
    println!("{} groups ({} singletons)", groups.len(), singles);
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let manifest = load_manifest(&a.data)?;
    let groups = sync_groups(&manifest)?;
    let assignment = stratified_split(&groups, DEFAULT_FRACTIONS, a.seed)?;
    assignment.save(&a.out)?;
    println!("assigned {} groups", assignment.mapping.len());
    Ok(())
}

fn train(a: TrainArgs, phase: u8) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let start = match (phase, &a.checkpoint) {
        (2, None) => bail!("train-phase2 needs --checkpoint"),
        (_, Some(p)) => Some(viewbridge::trainer::load_checkpoint_for(&cfg, p)?),
        (_, None) => None,
    };
    let _lock = RunLock::acquire(&a.out)?;
    let bench = Benchmark::from_corpora(Corpus::load(&a.data)?, None, cfg.seed)?;
    let data = bench.training_data()?;
    let out = match (phase, start) {
        (1, start) => {
            let init = match start {
                Some(p) => p,
                None => init_params(&cfg)?,
            };
            train_phase1(&data, &cfg, init)?
        }
        (_, Some(start)) => train_phase2(&data, &cfg, start)?,
        _ => unreachable!(),
    };
    cfg.save(&a.out.join("config.toml"))?;
    save_params(&out.params, serde_json::json!({ "phase": phase }), &a.out.join("model.ckpt"))?;
    optimizer_to_file(&out.optimizer, &out.params)?.save(&a.out.join("optimizer.ckpt"))?;
    write_metrics(&out.metrics, &a.out.join("metrics.jsonl"))?;
    println!("phase {phase} done; checkpoint in {}", a.out.join("model.ckpt").display());
    Ok(())
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let seed = cfg.seed;
    let spec = match &a.data {
        None => Some(load_spec(a.spec.as_deref(), seed)?),
        Some(_) => None,
    };
    let _lock = RunLock::acquire(&a.out)?;
    let bench = match (&a.data, spec) {
        (Some(dir), _) => {
            let foreign = a.foreign.as_deref().map(Corpus::load).transpose()?;
            Benchmark::from_corpora(Corpus::load(dir)?, foreign, seed)?
        }
        (None, Some(spec)) => Benchmark::generate(&spec, seed)?,
        (None, None) => unreachable!(),
    };
    let summary = run_benchmark(&cfg, &bench, &a.kind.kinds(), &a.out)?;
    print!("{}", render_text_table(&summary.cells));
    println!("finished in {:.1} s; results in {}", summary.seconds, a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let mut models = Vec::new();
    if let Some(p) = &a.checkpoint {
        models.push(("checkpoint".to_string(), viewbridge::trainer::load_checkpoint_for(&cfg, p)?));
    }
    if let Some(run) = &a.run {
        for kind in BaselineKind::ALL {
            let p = run.join(kind.name()).join("model.ckpt");
            if p.exists() {
                let (params, _) = load_params(&p).with_context(|| format!("reading {}", p.display()))?;
                models.push((kind.name().to_string(), params));
            }
        }
    }
    if models.is_empty() {
        bail!("nothing to evaluate: pass --run or --checkpoint");
    }
    let _lock = RunLock::acquire(&a.out)?;
    let foreign = a.foreign.as_deref().map(Corpus::load).transpose()?;
    let bench = Benchmark::from_corpora(Corpus::load(&a.data)?, foreign, cfg.seed)?;
    let cells = bench.evaluate(&models)?;
    write_report(&cells, &a.out)?;
    print!("{}", render_text_table(&cells));
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(value)?)?;
    }
    Ok(())
}

fn gradcheck(a: CheckArgs) -> Result<bool> {
    let report = run_suite(a.seed, a.instances)?;
    for name in ["cross_entropy", "supcon", "ib", "composition"] {
        let tol = report.results.iter().find(|r| r.check == name).map_or(0.0, |r| r.tolerance);
        let ok = report.results.iter().filter(|r| r.check == name).all(|r| r.passed);
        println!(
            "{:<14} max rel error {:.3e} (tol {:.0e}) {}",
            name,
            report.worst(name),
            tol,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    write_json(&report, a.out.as_deref())?;
    Ok(report.passed)
}

fn oracle_check(a: CheckArgs) -> Result<bool> {
    let summaries = run_oracle_suite(a.seed, a.instances)?;
    for s in &summaries {
        println!(
            "{:<14} {:>4} instances  max error {:.3e} (tol {:.0e}) {}",
            s.check,
            s.instances,
            s.max_error,
            s.tolerance,
            if s.passed { "PASS" } else { "FAIL" }
        );
    }
    write_json(&summaries, a.out.as_deref())?;
    Ok(summaries.iter().all(|s| s.passed))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::GenForeign(a) => gen_foreign(a)?,
        Command::Sync(a) => sync(a)?,
        Command::Split(a) => split(a)?,
        Command::TrainPhase1(a) => train(a, 1)?,
        Command::TrainPhase2(a) => train(a, 2)?,
        Command::Baseline(a) => baseline(a)?,
        Command::Evaluate(a) => evaluate(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::OracleCheck(a) => return oracle_check(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
