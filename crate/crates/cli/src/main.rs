use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use iidtest_core::experiment::{run_experiment, ExperimentConfig};
use iidtest_core::generators::{sample, Corruption, GeneratorSpec, Source};
use iidtest_core::iid_tests::{
    bonferroni, bound_mean, default_suite, parse_suite, run_suite, BoundMode, PValueMethod,
    TestKind, TestOptions, TestResult, VarianceSource,
};
use iidtest_core::profile::{ingest_lines, CountProfile, IngestMode};
use iidtest_core::verify::{self, Suite};

/// Exit status when the iid hypothesis is rejected.
const EXIT_REJECTED: u8 = 2;

#[derive(Parser)]
#[command(
    name = "iidtest",
    version,
    about = "Test whether data is iid from the counts of its items alone"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn newline-delimited items into a count profile
    Count(CountArgs),
    /// Run invariant tests on a count profile
    Test(TestArgs),
    /// Sample a synthetic data set
    Simulate(SimulateArgs),
    /// Run a Monte Carlo experiment from a JSON config
    Power(PowerArgs),
    /// Print worst-case mean bounds
    Bounds(BoundsArgs),
    /// Run the numerical self-checks
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    /// Random seed (only used by commands that sample)
    #[arg(long)]
    seed: Option<u64>,
    /// Write the output here instead of standard output
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Table,
    Json,
}

#[derive(Args)]
struct TestFlags {
    #[arg(long, value_enum, default_value = "poisson")]
    mode: ModeArg,
    /// Multiply Poisson-mode p-values by c_n
    #[arg(long, value_enum, default_value = "off")]
    cn: Switch,
    #[arg(long, value_enum, default_value = "auto")]
    variance: VarianceArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Poisson,
    Multinomial,
}

impl From<ModeArg> for BoundMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Poisson => BoundMode::Poisson,
            ModeArg::Multinomial => BoundMode::Multinomial,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VarianceArg {
    Auto,
    Empirical,
    Theoretical,
}

impl From<VarianceArg> for VarianceSource {
    fn from(v: VarianceArg) -> Self {
        match v {
            VarianceArg::Auto => VarianceSource::Auto,
            VarianceArg::Empirical => VarianceSource::Empirical,
            VarianceArg::Theoretical => VarianceSource::Theoretical,
        }
    }
}

#[derive(Args)]
struct CountArgs {
    /// Input file, one item per line; standard input when absent or `-`
    input: Option<PathBuf>,
    /// Identify items by a 128-bit digest instead of their exact bytes
    #[arg(long)]
    hashed: bool,
    /// Also emit the per-item counts
    #[arg(long)]
    with_counts: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TestArgs {
    /// Profile document; standard input when absent or `-`
    profile: Option<PathBuf>,
    /// Comma separated tests, e.g. even,odd,count:2,slope:2,curv:2,logcurv:2
    #[arg(long)]
    tests: Option<String>,
    #[command(flatten)]
    flags: TestFlags,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Use Bernstein tail bounds instead of the Gaussian approximation
    #[arg(long)]
    bernstein: bool,
    /// Decide per test instead of applying the Bonferroni correction
    #[arg(long)]
    no_correction: bool,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Uniform,
    Linear,
    Cards,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorruptionArg {
    None,
    EvenN,
    EvenM,
    NoEmpty,
    NoUnique,
}

impl From<CorruptionArg> for Corruption {
    fn from(c: CorruptionArg) -> Self {
        match c {
            CorruptionArg::None => Corruption::None,
            CorruptionArg::EvenN => Corruption::EvenN,
            CorruptionArg::EvenM => Corruption::EvenM,
            CorruptionArg::NoEmpty => Corruption::NoEmpty,
            CorruptionArg::NoUnique => Corruption::NoUnique,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "uniform")]
    source: SourceArg,
    /// Support size for uniform and linear sources
    #[arg(long, default_value_t = 100)]
    d: u64,
    /// Number of 52-card decks for the cards source
    #[arg(long, default_value_t = 1)]
    decks: u64,
    #[arg(long)]
    n: u64,
    #[arg(long, value_enum, default_value = "none")]
    corruption: CorruptionArg,
    /// Emit one item label per line instead of a profile document
    #[arg(long)]
    items: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PowerArgs {
    /// Experiment config (JSON)
    config: PathBuf,
    /// Override the number of worker threads
    #[arg(long)]
    workers: Option<usize>,
    /// Override the number of repetitions
    #[arg(long)]
    reps: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BoundsArgs {
    /// Test name (even, odd, count, slope, slopelow, curv, logcurv); default suite when absent
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    k: Option<u64>,
    #[arg(long)]
    n: u64,
    #[arg(long, value_enum, default_value = "poisson")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct VerifyArgs {
    /// stirling, pmf, regime, brute_force or all
    #[arg(long, default_value = "all")]
    suite: String,
    #[command(flatten)]
    common: Common,
}

fn emit(output: &Option<PathBuf>, content: &str) -> Result<()> {
    match output {
        Some(path) => std::fs::write(path, content)
            .with_context(|| format!("cannot write {}", path.display())),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(content.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn read_input(path: &Option<PathBuf>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    match path.as_deref() {
        Some(p) if p != Path::new("-") => {
            File::open(p)
                .with_context(|| format!("cannot open {}", p.display()))?
                .read_to_end(&mut buf)?;
        }
        _ => {
            io::stdin().lock().read_to_end(&mut buf)?;
        }
    }
    Ok(buf)
}

fn cmd_count(args: CountArgs) -> Result<u8> {
    let mode = if args.hashed {
        IngestMode::Hashed128
    } else {
        IngestMode::Exact
    };
    let profile = match args.input.as_deref() {
        Some(p) if p != Path::new("-") => {
            let file = File::open(p).with_context(|| format!("cannot open {}", p.display()))?;
            ingest_lines(BufReader::new(file), mode)?
        }
        _ => ingest_lines(io::stdin().lock(), mode)?,
    };
    let mut doc = profile.to_document(args.with_counts).to_json();
    doc.push('\n');
    emit(&args.common.output, &doc)?;
    Ok(0)
}

fn test_options(flags: &TestFlags, bernstein: bool) -> TestOptions {
    TestOptions {
        mode: flags.mode.into(),
        cn_correction: matches!(flags.cn, Switch::On),
        variance_source: flags.variance.into(),
        pvalue_method: if bernstein {
            PValueMethod::Bernstein
        } else {
            PValueMethod::Gaussian
        },
    }
}

fn results_table(results: &[TestResult], alpha: f64, per_test: bool) -> String {
    let mut out = format!(
        "{:<11} {:>13} {:>13} {:>13} {:>10} {:>12}{}\n",
        "test",
        "statistic",
        "tau_ub",
        "v_ub",
        "z",
        "p",
        if per_test { "  reject" } else { "" }
    );
    for r in results {
        if !r.applicable {
            let _ = writeln!(out, "{:<11} n/a ({})", r.kind.to_string(), r.notes.join("; "));
            continue;
        }
        let _ = write!(
            out,
            "{:<11} {:>13.6} {:>13.6} {:>13.6} {:>10.3} {:>12.4e}",
            r.kind.to_string(),
            r.statistic,
            r.tau_ub,
            r.v_ub,
            r.z,
            r.p
        );
        if per_test {
            out.push_str(if r.rejects(alpha) { "  yes" } else { "  no" });
        }
        out.push('\n');
    }
    out
}

fn cmd_test(args: TestArgs) -> Result<u8> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        bail!("--alpha must lie in (0, 1)");
    }
    let text = String::from_utf8(read_input(&args.profile)?).context("profile is not UTF-8")?;
    let profile = CountProfile::from_json(&text)?;
    let kinds = match &args.tests {
        Some(list) => parse_suite(list)?,
        None => default_suite(),
    };
    if kinds.is_empty() {
        bail!("--tests selects no tests");
    }
    let opts = test_options(&args.flags, args.bernstein);
    let results = run_suite(&kinds, &profile, &opts)?;
    let ps: Vec<f64> = results.iter().map(|r| r.p).collect();
    let combined = bonferroni(&ps)?;
    let rejected = if args.no_correction {
        results.iter().any(|r| r.rejects(args.alpha))
    } else {
        combined.rejects(args.alpha)
    };

    let doc = match args.format {
        Format::Json => {
            let value = serde_json::json!({
                "n": profile.n(),
                "alpha": args.alpha,
                "correction": if args.no_correction { "none" } else { "bonferroni" },
                "results": results,
                "combined": combined,
                "rejected": rejected,
            });
            serde_json::to_string_pretty(&value)? + "\n"
        }
        Format::Table => {
            let mut out = results_table(&results, args.alpha, args.no_correction);
            if args.no_correction {
                let _ = writeln!(out, "\nrejected at alpha={}: {}", args.alpha, yes_no(rejected));
            } else {
                let culprit = combined
                    .fired(args.alpha)
                    .map(|i| format!(" ({})", results[i].kind))
                    .unwrap_or_default();
                let _ = writeln!(
                    out,
                    "\nbonferroni over {} tests: p = {:.4e}; rejected at alpha={}: {}{}",
                    combined.members,
                    combined.p,
                    args.alpha,
                    yes_no(rejected),
                    culprit
                );
            }
            out
        }
    };
    emit(&args.common.output, &doc)?;
    Ok(if rejected { EXIT_REJECTED } else { 0 })
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<u8> {
    let source = match args.source {
        SourceArg::Uniform => Source::Uniform { d: args.d },
        SourceArg::Linear => Source::Linear { d: args.d },
        SourceArg::Cards => Source::Cards { decks: args.decks },
    };
    let spec = GeneratorSpec {
        source,
        n: args.n,
        corruption: args.corruption.into(),
        seed: args.common.seed.unwrap_or(0),
    };
    let profile = sample(&spec)?;
    let out = if args.items {
        let mut out = String::new();
        for (label, &count) in profile.first_order().unwrap_or(&[]).iter().enumerate() {
            for _ in 0..count {
                let _ = writeln!(out, "{}", label + 1);
            }
        }
        out
    } else {
        profile.to_document(false).to_json() + "\n"
    };
    emit(&args.common.output, &out)?;
    Ok(0)
}

fn cmd_power(args: PowerArgs) -> Result<u8> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("cannot read {}", args.config.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    if args.workers.is_some() {
        cfg.workers = args.workers;
    }
    if let Some(reps) = args.reps {
        cfg.reps = reps;
    }
    let report = run_experiment(&cfg)?;
    let dir = args.common.output.unwrap_or_else(|| PathBuf::from("."));
    report.write_dir(&dir)?;

    let mut summary = format!("{:<12} {:>10} {:>10} {:>12}\n", "test", "rate", "stderr", "median_p");
    for s in &report.series {
        let _ = writeln!(
            summary,
            "{:<12} {:>10.4} {:>10.4} {:>12.4e}",
            s.label(),
            s.headline.fraction,
            s.headline.stderr,
            s.median_p
        );
    }
    let _ = writeln!(summary, "rates at alpha={}, {} reps; tables in {}", report.alpha_star, report.reps, dir.display());
    print!("{summary}");
    if let Some(validity) = &report.validity {
        if !validity.passed() {
            eprintln!(
                "validity check failed at alpha={} (limit {:.4}): {}",
                validity.alpha,
                validity.limit,
                validity.failures.join(", ")
            );
            return Ok(1);
        }
    }
    Ok(0)
}

fn cmd_bounds(args: BoundsArgs) -> Result<u8> {
    let mode: BoundMode = args.mode.into();
    let kinds = match &args.kind {
        None => default_suite(),
        Some(name) => {
            let label = match args.k {
                Some(k) => format!("{name}:{k}"),
                None => name.clone(),
            };
            vec![label.parse::<TestKind>()?]
        }
    };
    let mut rows = Vec::new();
    for kind in kinds {
        let tau = bound_mean(kind, args.n, mode)?;
        let per_item = match kind {
            TestKind::LogCurvature(_) => tau,
            _ => tau / args.n as f64,
        };
        rows.push((kind, tau, per_item));
    }
    let out = match args.format {
        Format::Json => {
            let value: Vec<_> = rows
                .iter()
                .map(|(kind, tau, bar)| {
                    serde_json::json!({
                        "test": kind.name(), "k": kind.k(), "n": args.n,
                        "mode": mode, "tau_ub": tau, "tau_bar": bar,
                    })
                })
                .collect();
            serde_json::to_string_pretty(&value)? + "\n"
        }
        Format::Table => {
            let mut out = format!("{:<11} {:>8} {:>18} {:>18}\n", "test", "n", "tau_ub", "tau_bar");
            for (kind, tau, bar) in rows {
                let _ = writeln!(out, "{:<11} {:>8} {:>18.10} {:>18.12}", kind.to_string(), args.n, tau, bar);
            }
            out
        }
    };
    emit(&args.common.output, &out)?;
    Ok(0)
}

fn cmd_verify(args: VerifyArgs) -> Result<u8> {
    let suites: Vec<Suite> = if args.suite == "all" {
        Suite::ALL.to_vec()
    } else {
        args.suite
            .split(',')
            .map(|s| s.trim().parse::<Suite>().map_err(anyhow::Error::msg))
            .collect::<Result<_>>()?
    };
    let mut out = String::new();
    let mut all_passed = true;
    for suite in suites {
        let report = verify::run_suite(suite);
        all_passed &= report.passed();
        let _ = writeln!(
            out,
            "{} {} ({} checks, {} failed)",
            if report.passed() { "PASS" } else { "FAIL" },
            suite,
            report.checks,
            report.failed
        );
        for failure in &report.failures {
            let _ = writeln!(out, "    {failure}");
        }
    }
    emit(&args.common.output, &out)?;
    Ok(if all_passed { 0 } else { 1 })
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Count(a) => cmd_count(a),
        Command::Test(a) => cmd_test(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Power(a) => cmd_power(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::Verify(a) => cmd_verify(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage errors must not collide with the "rejected" status
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
