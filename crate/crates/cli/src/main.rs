use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use famlp_core::analysis::{delta_amplitude, export_csv};
use famlp_core::config::RunConfig;
use famlp_core::data::{generate_synthetic, import_folder_tree, load_dataset, save_dataset, SyntheticConfig};
use famlp_core::experiment::{
    ablation_grid, eval_report_csv, evaluate_domains, run_dir_name, run_experiment, RunDir, Variant,
};
use famlp_core::model::load_checkpoint;
use famlp_core::Error;

const SEED_ENV: &str = "FAMLP_SEED";

#[derive(Parser, Debug)]
#[command(name = "famlp", version, about = "Frequency-aware MLP mixers for domain generalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate, inspect or import multi-domain datasets.
    #[command(subcommand)]
    Data(DataCommand),
    /// Leave-one-domain-out training of one model variant.
    Train(RunArgs),
    /// Accuracy of a saved checkpoint on each domain of a dataset.
    Eval(EvalArgs),
    /// Train every valid on/off combination of the model components.
    Ablate(RunArgs),
    /// Export per-domain Δ-amplitude curves around one filter layer.
    Analyze(AnalyzeArgs),
}

#[derive(Subcommand, Debug)]
enum DataCommand {
    /// Write the synthetic four-domain dataset.
    Generate(GenerateArgs),
    /// Print geometry and per-class counts of a dataset directory.
    Inspect { dir: PathBuf },
    /// Convert a `<domain>/<class>/*.famt` tree into a dataset directory.
    Import {
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    classes: usize,
    #[arg(long = "per-domain", default_value_t = 60)]
    per_domain: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Defaults to $FAMLP_SEED, then 1.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    blur_sigma: Option<f64>,
    #[arg(long)]
    sharpen_gain: Option<f64>,
    #[arg(long)]
    phase_jitter: Option<f64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// INI-style run configuration; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dataset directory (`data.dir`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// `all` or a comma-separated list of domains (`data.hold_out`).
    #[arg(long = "hold-out")]
    hold_out: Option<String>,
    /// Turn a component off: no-aff, no-lre or no-mus.
    #[arg(long)]
    ablate: Vec<String>,
    /// Single seed (`run.seeds`).
    #[arg(long)]
    seed: Option<u64>,
    /// `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Parent of run directories (`run.out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory suffix (`run.tag`).
    #[arg(long)]
    tag: Option<String>,
    /// Exact run directory instead of `<out>/<timestamp>-<tag>`.
    #[arg(long = "run-dir")]
    run_dir: Option<PathBuf>,
    /// Any `section.key=value` setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Domains to evaluate; all by default.
    #[arg(long = "hold-out")]
    hold_out: Option<String>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    out: PathBuf,
    /// Images averaged per domain.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Comma-separated domains; all by default.
    #[arg(long)]
    domains: Option<String>,
}

/// Bad invocations exit 1, failures while running exit 2.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config { .. }) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Data(DataCommand::Generate(a)) => generate(a)?,
        Command::Data(DataCommand::Inspect { dir }) => inspect(&dir)?,
        Command::Data(DataCommand::Import { src, out }) => {
            let ds = import_folder_tree(&src)?;
            save_dataset(&out, &ds)?;
            println!("imported {} samples into {}", ds.len(), out.display());
        }
        Command::Train(a) => experiment(a, false)?,
        Command::Ablate(a) => experiment(a, true)?,
        Command::Eval(a) => eval(a)?,
        Command::Analyze(a) => analyze(a)?,
    }
    Ok(())
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| Failure::Usage(anyhow::anyhow!("{SEED_ENV}={s:?}: {e}"))),
        Err(_) => Ok(None),
    }
}

fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let mut cfg = SyntheticConfig {
        num_classes: a.classes,
        per_domain_per_class: a.per_domain,
        image_size: a.size,
        channels: a.channels,
        seed: a.seed.or(env_seed()?).unwrap_or(1),
        ..SyntheticConfig::default()
    };
    if let Some(v) = a.blur_sigma {
        cfg.blur_sigma = v;
    }
    if let Some(v) = a.sharpen_gain {
        cfg.sharpen_gain = v;
    }
    if let Some(v) = a.phase_jitter {
        cfg.phase_jitter = v;
    }
    let ds = generate_synthetic(&cfg).map_err(|e| Failure::Usage(e.into()))?;
    save_dataset(&a.out, &ds)?;
    println!(
        "wrote {} samples ({} domains, {} classes, seed {}) to {}",
        ds.len(),
        ds.domain_names().len(),
        ds.num_classes(),
        cfg.seed,
        a.out.display()
    );
    Ok(())
}

fn inspect(dir: &Path) -> anyhow::Result<()> {
    let ds = load_dataset(dir)?;
    println!(
        "{}: {} samples, {} classes, {}x{}x{}",
        dir.display(),
        ds.len(),
        ds.num_classes(),
        ds.channels(),
        ds.image_size(),
        ds.image_size()
    );
    let counts = ds.class_counts();
    for (name, row) in ds.domain_names().iter().zip(&counts) {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        println!("  {name:<12} {:>5}  [{}]", row.iter().sum::<usize>(), cells.join(" "));
    }
    Ok(())
}

/// Builds the effective configuration: defaults, then `$FAMLP_SEED`, then
/// the config file, then flags.
fn run_config(a: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(s) = std::env::var(SEED_ENV) {
        cfg.set("train.seed", s.trim()).with_context(|| format!("from ${SEED_ENV}"))?;
    }
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_ini(&text).with_context(|| format!("in {}", path.display()))?;
    }
    if let Some(d) = &a.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(h) = &a.hold_out {
        cfg.set("data.hold_out", h)?;
    }
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    if let Some(e) = a.epochs {
        cfg.set("train.epochs", &e.to_string())?;
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    if let Some(t) = &a.tag {
        cfg.tag = t.clone();
    }
    for kv in &a.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::Config {
                key: kv.clone(),
                msg: "expected `--set section.key=value`".into(),
            }
            .into());
        };
        cfg.set(k.trim(), v.trim())?;
    }
    let mut variant = Variant::of(&cfg.model, &cfg.train);
    for switch in &a.ablate {
        variant = variant.ablate(switch).map_err(|e| Error::Config {
            key: "--ablate".into(),
            msg: e.to_string(),
        })?;
    }
    variant.apply(&mut cfg.model, &mut cfg.train);
    cfg.validate()?;
    Ok(cfg)
}

fn experiment(a: RunArgs, grid: bool) -> Result<(), Failure> {
    let cfg = run_config(&a)?;
    let Some(data_dir) = cfg.data_dir.clone() else {
        return Err(Failure::Usage(anyhow::anyhow!(
            "no dataset: pass --data or set `dir` under [data]"
        )));
    };
    let ds = load_dataset(&data_dir)?;
    let path = match &a.run_dir {
        Some(p) => p.clone(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
            run_dir_name(&cfg.out_dir, &stamp, &cfg.tag)
        }
    };
    let dir = RunDir::create(&path)?;
    log::info!("run directory {}", dir.path.display());
    let variants = if grid {
        ablation_grid()
    } else {
        vec![Variant::of(&cfg.model, &cfg.train)]
    };
    let result = run_experiment(&ds, &cfg, &variants, Some(&dir))?;
    print!("{}", result.report.to_csv());
    Ok(())
}

fn domain_list(spec: Option<&str>, all: Vec<&str>) -> Vec<String> {
    match spec {
        None | Some("all") => all.into_iter().map(str::to_string).collect(),
        Some(list) => list.split(',').map(|d| d.trim().to_string()).filter(|d| !d.is_empty()).collect(),
    }
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let domains = domain_list(a.hold_out.as_deref(), ds.domain_names());
    let report = eval_report_csv(&evaluate_domains(&model, &ds, &domains)?);
    print!("{report}");
    if let Some(out) = &a.out {
        std::fs::write(out, &report).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> anyhow::Result<()> {
    if a.samples == 0 {
        bail!("--samples must be positive");
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let mut sets = Vec::new();
    for name in domain_list(a.domains.as_deref(), ds.domain_names()) {
        let samples = ds.domain(&name).with_context(|| format!("unknown domain `{name}`"))?;
        let images: Vec<_> = samples.iter().take(a.samples).map(|s| &s.image).collect();
        sets.push((name, images));
    }
    let curves = delta_amplitude(&model, &sets, a.layer)?;
    export_csv(&curves, &a.out)?;
    println!("wrote {} curves to {}", curves.len(), a.out.display());
    Ok(())
}
