use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bulkdiff::acceptance::{all_ids, run_suite, CRITERIA};
use bulkdiff::config::RunConfig;
use bulkdiff::corrector_cache::{disk_stats, CorrectorCache};
use bulkdiff::oracle::{default_fixtures, FixtureFile, OracleFixture};
use bulkdiff::report::{run_estimate, write_outputs};
use bulkdiff::Error;

const DEFAULT_CACHE_BYTES: usize = 2 << 30;
const DEFAULT_FIXTURES: &str = "fixtures/oracle.json";

#[derive(Parser)]
#[command(name = "bulkdiff", version, about = "Finite-volume bulk diffusion estimates for interacting particle systems")]
struct Cli {
    /// Run config (TOML); for `oracle`, a fixture list.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `mc.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Persistent corrector cache directory.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Output directory (estimate) or file (oracle).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the quantities of a config and write CSV/JSON/gnuplot reports.
    Estimate {
        /// Override a config leaf, e.g. `--set mc.h=0.0625`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compute oracle reference values into a fixtures file.
    Oracle,
    /// Run the acceptance suite against a fixtures file.
    Verify {
        #[arg(long, default_value = DEFAULT_FIXTURES)]
        fixtures: PathBuf,
        /// Comma-separated criterion numbers (default: all).
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
    /// Print entry count and size of a cache directory.
    CacheStats,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Estimate { overrides } => estimate(&cli, overrides),
        Command::Oracle => oracle(&cli),
        Command::Verify { fixtures, only } => verify(fixtures, only),
        Command::CacheStats => cache_stats(&cli),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_code(&e))
        }
    }
}

fn error_code(e: &Error) -> u8 {
    match e {
        Error::InvariantViolation(_) => 2,
        Error::Unconverged(_) | Error::SolverDidNotConverge { .. } | Error::TruncationTail { .. } => 3,
        _ => 1,
    }
}

fn open_cache(dir: Option<&Path>, bytes: Option<usize>) -> Result<CorrectorCache, Error> {
    let budget = bytes.unwrap_or(DEFAULT_CACHE_BYTES);
    match dir {
        Some(d) => CorrectorCache::with_dir(d, budget),
        None => Ok(CorrectorCache::in_memory(budget)),
    }
}

fn estimate(cli: &Cli, overrides: &[String]) -> Result<u8, Error> {
    let path = cli.config.as_deref().ok_or_else(|| Error::Config("estimate needs --config".into()))?;
    let mut overrides = overrides.to_vec();
    if let Some(seed) = cli.seed {
        overrides.push(format!("mc.seed={seed}"));
    }
    let cfg = RunConfig::load(path, &overrides)?;
    let cache_dir = cli.cache_dir.clone().or_else(|| cfg.outputs.cache_dir.clone());
    let cache = open_cache(cache_dir.as_deref(), cfg.outputs.cache_bytes)?;
    let out = run_estimate(&cfg, &cache)?;
    let stdout = std::io::stdout();
    write_outputs(&cfg, &out, cli.out.as_deref(), &mut stdout.lock())?;
    let stats = cache.stats();
    log::info!("{} rows; cache hits {} misses {}", out.rows.len(), stats.hits, stats.misses);
    for v in &out.findings.violations {
        log::error!("invariant violation: {v}");
    }
    for u in &out.findings.unconverged {
        log::warn!("unconverged: {u}");
    }
    Ok(out.exit_code() as u8)
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleConfig {
    fixtures: Vec<OracleFixture>,
}

fn oracle(cli: &Cli) -> Result<u8, Error> {
    let fixtures = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str::<OracleConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?.fixtures
        }
        None => default_fixtures(),
    };
    for f in &fixtures {
        f.check_caps()?;
    }
    let mut computed = Vec::with_capacity(fixtures.len());
    for f in fixtures {
        log::info!("oracle fixture {} ({})", f.name, f.kind.method());
        let file = FixtureFile::compute(vec![f])?;
        let f = file.fixtures.into_iter().next().expect("one fixture in, one out");
        let r = f.result.as_ref().expect("computed fixtures carry a value");
        log::info!(
            "  value {:.8} error {:.2e} observed order {:?} converged {}",
            r.value,
            r.error,
            r.observed_order,
            r.converged
        );
        computed.push(f);
    }
    let file = FixtureFile { generator: format!("bulkdiff {}", env!("CARGO_PKG_VERSION")), fixtures: computed };
    let unconverged: Vec<&str> = file
        .fixtures
        .iter()
        .filter(|f| f.result.as_ref().is_some_and(|r| !r.converged))
        .map(|f| f.name.as_str())
        .collect();
    let text = serde_json::to_string_pretty(&file)? + "\n";
    match &cli.out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    if unconverged.is_empty() {
        Ok(0)
    } else {
        log::warn!("unconverged ladders: {}", unconverged.join(", "));
        Ok(3)
    }
}

fn verify(fixtures: &Path, only: &[u8]) -> Result<u8, Error> {
    if !fixtures.exists() {
        return Err(Error::InvalidInput(format!(
            "fixtures file {} not found; run `bulkdiff oracle --out {}` first",
            fixtures.display(),
            fixtures.display()
        )));
    }
    let file = FixtureFile::load(fixtures)?;
    let ids = if only.is_empty() { all_ids() } else { only.to_vec() };
    if let Some(bad) = ids.iter().find(|i| !CRITERIA.iter().any(|c| c.0 == **i)) {
        return Err(Error::InvalidInput(format!("no criterion {bad}")));
    }
    let outcomes = run_suite(file, &ids, |o| println!("{o}"));
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| format!("{} ({})", o.id, o.name)).collect();
    println!("{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    if failed.is_empty() {
        Ok(0)
    } else {
        println!("failed: {}", failed.join(", "));
        Ok(1)
    }
}

fn cache_stats(cli: &Cli) -> Result<u8, Error> {
    let dir = cli.cache_dir.as_deref().ok_or_else(|| Error::Config("cache-stats needs --cache-dir".into()))?;
    let stats = disk_stats(dir)?;
    println!("{}", serde_json::to_string(&stats)?);
    Ok(0)
}
