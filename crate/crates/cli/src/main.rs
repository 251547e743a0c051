use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use superpol_cli as cli;
use superpol_core::datamodel::PolicyClassKind;
use superpol_core::eval::{render_markdown, BackendChoice, OracleMode};

/// Super-policy learning experiments: data generation, fitting, evaluation
/// and one-command reproduction of the benchmark tables.
#[derive(Parser)]
#[command(name = "superpol", version, about, max_term_width = 100)]
struct CliArgs {
    /// Bound on parallel worker threads for replications.
    #[arg(long, global = true, default_value_t = 0, help = "Worker threads (0 = all cores)")]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset from a simulation spec and write it with a
    /// provenance sidecar.
    Gen(GenArgs),
    /// Fit a policy on a dataset file; write the bridge dump and an action
    /// preview.
    Fit(FitArgs),
    /// Evaluate policies: random-split protocol on a dataset, or regret of
    /// a freshly learned policy on a simulated spec.
    Eval(EvalArgs),
    /// Reproduce a benchmark table with its frozen configuration.
    Repro(ReproArgs),
    /// Run the fast invariant suite (< 60 s).
    Selfcheck,
}

#[derive(Args)]
struct GenArgs {
    /// Spec family: toy | discrete | continuous | sequential.
    #[arg(long, default_value = "discrete")]
    spec: String,
    /// Confounding strength (ε for bandits, δ for the sequential spec).
    #[arg(long, default_value_t = 0.9)]
    eps: f64,
    /// Sample size (units or episodes).
    #[arg(long, default_value_t = 5000)]
    n: usize,
    /// RNG seed (SUPERPOL_SEED overrides the default).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset file written by `gen` (bandit or sequential layout).
    #[arg(long)]
    data: PathBuf,
    /// Policy class: sonly | sz | super | common | superseq.
    #[arg(long, default_value = "super")]
    kind: String,
    /// Estimation backend: tabular | rkhs-linear.
    #[arg(long, default_value = "tabular")]
    backend: String,
    /// Optional experiment config file (estimator section is used).
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed (SUPERPOL_SEED overrides the default).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset file for the random-split protocol.
    #[arg(long, conflicts_with = "spec")]
    data: Option<PathBuf>,
    /// Spec family for regret evaluation: toy | discrete | continuous | sequential.
    #[arg(long)]
    spec: Option<String>,
    /// Confounding strength for `--spec`.
    #[arg(long, default_value_t = 0.9)]
    eps: f64,
    /// Sample size for `--spec` mode.
    #[arg(long, default_value_t = 5000)]
    n: usize,
    /// Policy classes (comma separated; `behavior-clone` allowed with --data).
    #[arg(long, value_delimiter = ',', default_value = "sonly,sz,super")]
    kinds: Vec<String>,
    /// Single policy class for `--spec` regret mode.
    #[arg(long, default_value = "super")]
    kind: String,
    /// Number of random splits.
    #[arg(long, default_value_t = 20)]
    splits: usize,
    /// Training fraction of each split.
    #[arg(long, default_value_t = 0.6)]
    train_fraction: f64,
    /// Oracle for regret mode: exact | mc.
    #[arg(long, default_value = "exact")]
    oracle: String,
    /// Monte-Carlo episodes when --oracle mc.
    #[arg(long, default_value_t = 100000)]
    mc_episodes: usize,
    /// Estimation backend: tabular | rkhs-linear.
    #[arg(long, default_value = "tabular")]
    backend: String,
    /// Optional experiment config file (estimator section is used).
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed (SUPERPOL_SEED overrides the default).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ReproArgs {
    /// One of table1 | table2 | table3 | table4.
    table: String,
    /// Override the number of replications.
    #[arg(long)]
    reps: Option<usize>,
    /// Override the frozen config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the base seed (SUPERPOL_SEED also honored).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn env_seed() -> Option<u64> {
    std::env::var("SUPERPOL_SEED").ok().and_then(|s| s.parse().ok())
}

fn effective_seed(flag: Option<u64>, default: u64) -> u64 {
    flag.or_else(env_seed).unwrap_or(default)
}

fn parse_backend(name: &str) -> Result<BackendChoice> {
    match name {
        "tabular" => Ok(BackendChoice::Tabular),
        "rkhs-linear" => Ok(BackendChoice::RkhsLinear),
        other => Err(anyhow!("unknown backend {other:?} (tabular|rkhs-linear)")),
    }
}

fn parse_kind(name: &str) -> Result<PolicyClassKind> {
    PolicyClassKind::parse(name)
        .ok_or_else(|| anyhow!("unknown policy kind {name:?} (sonly|sz|super|common|superseq)"))
}

fn estimator_from(config: &Option<PathBuf>, seed: u64) -> Result<superpol_core::datamodel::EstimatorConfig> {
    match config {
        None => Ok(superpol_core::datamodel::EstimatorConfig { seed, ..Default::default() }),
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let table = cli::parse_table_config(&text)?;
            Ok(table.estimator.unwrap_or_default().to_config(seed))
        }
    }
}

fn run(args: CliArgs) -> Result<()> {
    if args.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(args.jobs)
            .build_global()
            .map_err(|e| anyhow!("setting worker threads: {e}"))?;
    }
    match args.command {
        Command::Gen(g) => {
            let seed = effective_seed(g.seed, 20260811);
            let path = cli::generate(&g.spec, g.eps, g.n, seed, &g.out)?;
            println!("wrote {}", path.display());
        }
        Command::Fit(f) => {
            let seed = effective_seed(f.seed, 20260811);
            let estimator = estimator_from(&f.config, seed)?;
            cli::fit(&f.data, parse_kind(&f.kind)?, &estimator, parse_backend(&f.backend)?, &f.out)?;
            println!("wrote {}", f.out.join("bridge.txt").display());
            println!("wrote {}", f.out.join("actions_preview.csv").display());
        }
        Command::Eval(e) => {
            let seed = effective_seed(e.seed, 20260811);
            let estimator = estimator_from(&e.config, seed)?;
            let backend = parse_backend(&e.backend)?;
            match (&e.data, &e.spec) {
                (Some(data), None) => {
                    let report = cli::eval_splits(
                        data,
                        &e.kinds,
                        e.splits,
                        e.train_fraction,
                        seed,
                        &estimator,
                        backend,
                        &e.out,
                    )?;
                    print!("{}", render_markdown(&report));
                }
                (None, Some(spec)) => {
                    let oracle = match e.oracle.as_str() {
                        "exact" => OracleMode::Exact,
                        "mc" => OracleMode::Mc { episodes: e.mc_episodes },
                        other => return Err(anyhow!("unknown oracle {other:?} (exact|mc)")),
                    };
                    let regret = cli::eval_regret(
                        spec,
                        e.eps,
                        parse_kind(&e.kind)?,
                        e.n,
                        seed,
                        oracle,
                        &estimator,
                        backend,
                    )?;
                    println!("regret {regret}");
                }
                _ => return Err(anyhow!("eval needs exactly one of --data or --spec")),
            }
        }
        Command::Repro(r) => {
            let seed = r.seed.or_else(env_seed);
            let config_text = match &r.config {
                Some(path) => Some(std::fs::read_to_string(path)?),
                None => None,
            };
            let report = cli::repro(&r.table, config_text.as_deref(), r.reps, seed, &r.out)?;
            print!("{}", std::fs::read_to_string(r.out.join(format!("{}.md", r.table)))?);
            let _ = report;
        }
        Command::Selfcheck => {
            let t0 = std::time::Instant::now();
            let results = cli::selfcheck();
            let mut failed = 0;
            for (name, ok) in &results {
                println!("[{}] {}", if *ok { "PASS" } else { "FAIL" }, name);
                failed += usize::from(!ok);
            }
            println!("selfcheck finished in {:.1} s", t0.elapsed().as_secs_f64());
            if failed > 0 {
                return Err(anyhow!("{failed} selfcheck item(s) failed"));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = CliArgs::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
