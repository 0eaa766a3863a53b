use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use unitrig::artifact::{
    from_json, to_json, verify_lemma, verify_run, verify_series, verify_weight, LemmaArtifact, RunArtifact,
    SeriesArtifact, TargetSpec, VerifyReport, WeightArtifact,
};
use unitrig::error::Error;
use unitrig::lemma::{build_lemma, Cond4Options, LemmaParams, MSweep};
use unitrig::measure::Grid;
use unitrig::rearrange::rearrange_run;
use unitrig::step::StepFunction;
use unitrig::trig::{eval_partial_sum, Modulus};
use unitrig::universal::{build_weight, FunctionSource, UniversalSeries};

#[derive(Parser, Debug)]
#[command(name = "unitrig", version, about = "Universal trigonometric series: build, rearrange, verify")]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// JSON configuration of the command
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (created if missing)
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Grid size as log2 of the number of points; overrides the config
    #[arg(long, global = true)]
    grid: Option<u32>,

    /// Seed of the sampled subsets; overrides the config
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build P and E for one step function
    Lemma,
    /// Build the universal series to a given depth
    Series,
    /// Build the weight for a stored series
    Weight,
    /// Rearrange a stored series towards a target
    Rearrange,
    /// Re-check stored artifacts without rebuilding
    Verify,
}

/// Failure classes, mapped to exit codes 2, 3 and 4.
enum Failure {
    Config(anyhow::Error),
    Construction(anyhow::Error),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Construction(_) => 3,
            Failure::Verification(_) => 4,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Input(_) | Error::InsufficientDepth { .. } => Failure::Config(e.into()),
            other => Failure::Construction(other.into()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn io_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Construction(e.into())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LemmaConfig {
    step_function: StepFunction,
    epsilon: f64,
    #[serde(rename = "N0")]
    n0: u64,
    omega: Modulus,
    grid: Option<u32>,
    #[serde(default)]
    subsets: Option<usize>,
    #[serde(default)]
    exhaustive: bool,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeriesConfig {
    depth: usize,
    omega: Modulus,
    #[serde(default = "enumeration")]
    source: FunctionSource,
    grid: Option<u32>,
    #[serde(default)]
    subsets: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

fn enumeration() -> FunctionSource {
    FunctionSource::Enumeration
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightConfig {
    #[serde(alias = "series-file")]
    series_file: PathBuf,
    epsilon: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RearrangeConfig {
    target: TargetSpec,
    tol: f64,
    max_q: usize,
    #[serde(alias = "series-file")]
    series_file: PathBuf,
    #[serde(alias = "weight-file")]
    weight_file: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyConfig {
    lemma: Option<PathBuf>,
    series: Option<PathBuf>,
    weight: Option<PathBuf>,
    #[serde(alias = "rearrange")]
    rearrangement: Option<PathBuf>,
}

struct Ctx {
    out: PathBuf,
    base: PathBuf,
    grid: Option<u32>,
    seed: Option<u64>,
}

impl Ctx {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn grid(&self, from_config: Option<u32>) -> Result<Grid, Failure> {
        Ok(Grid::new(self.grid.or(from_config).unwrap_or(Grid::DEFAULT_LOG2))?)
    }

    fn write(&self, name: &str, text: &str) -> Outcome {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))
            .map_err(io_err)?;
        let path = self.out.join(name);
        fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(io_err)?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }

    fn write_csv(&self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Outcome {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(io_err)?;
        for r in rows {
            w.write_record(&r).map_err(io_err)?;
        }
        let bytes = w.into_inner().map_err(|e| io_err(anyhow!("{e}")))?;
        self.write(name, &String::from_utf8(bytes).map_err(io_err)?)
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(config_err)?;
    from_json(&text).map_err(|e| config_err(anyhow!("{}: {e}", path.display())))
}

fn read_config<T: DeserializeOwned>(path: Option<&PathBuf>) -> Result<T, Failure> {
    let path = path.ok_or_else(|| config_err(anyhow!("--config is required")))?;
    read_json(path)
}

fn cond4(subsets: Option<usize>, seed: Option<u64>, exhaustive: bool) -> Cond4Options {
    Cond4Options {
        subsets: subsets.unwrap_or(100),
        seed: seed.unwrap_or(0),
        sweep: if exhaustive { MSweep::Exhaustive } else { MSweep::BandPoints },
        ..Cond4Options::default()
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

fn cmd_lemma(ctx: &Ctx, cfg: LemmaConfig) -> Outcome {
    let grid = ctx.grid(cfg.grid)?;
    let params = LemmaParams::new(&cfg.step_function, cfg.epsilon, cfg.n0, cfg.omega)?;
    let opts = cond4(cfg.subsets, ctx.seed.or(cfg.seed), cfg.exhaustive);
    let output = build_lemma(&cfg.step_function, &params, &grid, &opts)?;
    let p = eval_partial_sum(&output.spectrum, u64::MAX, &grid)?;
    let f = output.refined.sample(&grid);
    let report = output.report.clone();
    let artifact = LemmaArtifact {
        grid_log2: grid.log2_points(),
        cond4: opts,
        output,
    };
    ctx.write("lemma.json", &to_json(&artifact)?)?;
    ctx.write("margins.json", &to_json(&report)?)?;
    ctx.write_csv(
        "abs_error.csv",
        &["x", "value"],
        p.iter()
            .zip(&f)
            .enumerate()
            .map(|(j, (a, b))| vec![fmt(grid.x(j)), fmt((a - b).abs())]),
    )?;
    println!(
        "margins: measure {:.6e}, approximation {:.6e}, budget {:.6e}, partial sums {:.6e}",
        report.margin_measure, report.margin_approximation, report.margin_budget, report.margin_partial_sums
    );
    match report.failed() {
        None => Ok(()),
        Some(c) => Err(Failure::Construction(anyhow!("condition {c} fails"))),
    }
}

fn cmd_series(ctx: &Ctx, cfg: SeriesConfig) -> Outcome {
    let grid = ctx.grid(cfg.grid)?;
    let opts = cond4(cfg.subsets, ctx.seed.or(cfg.seed), false);
    if cfg.depth == 0 {
        return Err(config_err(anyhow!("depth must be at least 1")));
    }
    let mut series = UniversalSeries::new(cfg.source, cfg.omega)?;
    series.extend_to(cfg.depth, &grid, &opts)?;
    ctx.write("series.json", &to_json(&SeriesArtifact::new(&series, &grid, &opts))?)?;
    println!("series of depth {} ends at frequency {}", series.depth(), series.end());
    Ok(())
}

fn cmd_weight(ctx: &Ctx, cfg: WeightConfig) -> Outcome {
    let stored: SeriesArtifact = read_json(&ctx.resolve(&cfg.series_file))?;
    let grid = ctx.grid(Some(stored.grid_log2))?;
    let series = stored.to_series()?;
    let weight = build_weight(&series, cfg.epsilon)?;
    let artifact = WeightArtifact::new(&series, weight, &grid)?;
    ctx.write("weight.json", &to_json(&artifact)?)?;
    ctx.write_csv(
        "chains.csv",
        &["s", "p", "kind", "lhs", "rhs", "tol"],
        artifact
            .chains
            .iter()
            .map(|c| vec![c.s.to_string(), c.p.to_string(), format!("{:?}", c.kind), fmt(c.lhs), fmt(c.rhs), fmt(c.tol)]),
    )?;
    let bad = artifact.chains.iter().filter(|c| !c.holds()).count();
    println!(
        "n0 = {}, |mu != 1| = {:.6e}, {} chain checks, {} failing",
        artifact.weight.n0,
        artifact.property_a.measure_not_one,
        artifact.chains.len(),
        bad
    );
    if bad > 0 || !artifact.property_a.holds() {
        return Err(Failure::Construction(anyhow!("weight properties fail")));
    }
    Ok(())
}

fn load_samples(path: &Path) -> unitrig::error::Result<Vec<f64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("reading {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "csv") {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut out = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
            let v = rec
                .get(rec.len().saturating_sub(1))
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Input(format!("{}: bad sample row", path.display())))?;
            out.push(v);
        }
        Ok(out)
    } else {
        from_json(&text)
    }
}

fn cmd_rearrange(ctx: &Ctx, cfg: RearrangeConfig) -> Outcome {
    let series_art: SeriesArtifact = read_json(&ctx.resolve(&cfg.series_file))?;
    let weight_art: WeightArtifact = read_json(&ctx.resolve(&cfg.weight_file))?;
    let grid = ctx.grid(Some(weight_art.grid_log2))?;
    let series = series_art.to_series()?;
    let w = &weight_art.weight;
    let target = cfg
        .target
        .resolve(w, &grid, |p| load_samples(&ctx.resolve(Path::new(p))))?;
    let out = rearrange_run(&target, &series, w, &grid, cfg.tol, cfg.max_q)?;
    let artifact = RunArtifact::new(&out, cfg.target, cfg.tol, cfg.max_q, &grid);
    ctx.write("emission.json", &to_json(&artifact)?)?;
    ctx.write_csv(
        "error_curve.csv",
        &["q", "error", "bound"],
        out.state
            .rounds
            .iter()
            .map(|r| vec![r.q.to_string(), fmt(r.error), fmt(r.bound)]),
    )?;
    let last = out.final_error().unwrap_or(f64::NAN);
    println!("{} rounds, final weighted error {last:.6e}", out.state.q);
    if !(last < cfg.tol) {
        return Err(Failure::Construction(anyhow!(
            "error {last:.6e} not below {} after {} rounds",
            cfg.tol,
            cfg.max_q
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct VerifySummary<'a> {
    passed: bool,
    report: &'a VerifyReport,
}

fn cmd_verify(ctx: &Ctx, cfg: VerifyConfig) -> Outcome {
    let mut rep = VerifyReport::default();
    if let Some(p) = &cfg.lemma {
        let a: LemmaArtifact = read_json(&ctx.resolve(p))?;
        rep.extend(verify_lemma(&a)?);
    }
    let mut series = None;
    if let Some(p) = &cfg.series {
        let a: SeriesArtifact = read_json(&ctx.resolve(p))?;
        rep.extend(verify_series(&a)?);
        series = Some(a.to_series()?);
    }
    let mut weight = None;
    if let Some(p) = &cfg.weight {
        let a: WeightArtifact = read_json(&ctx.resolve(p))?;
        rep.extend(verify_weight(&a, series.as_ref())?);
        weight = Some(a);
    }
    if let Some(p) = &cfg.rearrangement {
        let a: RunArtifact = read_json(&ctx.resolve(p))?;
        let (Some(s), Some(w)) = (&series, &weight) else {
            return Err(config_err(anyhow!("verifying a rearrangement needs its series and weight files")));
        };
        let grid = Grid::new(a.grid_log2)?;
        let target = a
            .target
            .resolve(&w.weight, &grid, |p| load_samples(&ctx.resolve(Path::new(p))))?;
        rep.extend(verify_run(&a, s, &w.weight, &target)?);
    }
    if rep.checks.is_empty() {
        return Err(config_err(anyhow!("nothing to verify")));
    }
    let passed = rep.passed();
    ctx.write("verify.json", &to_json(&VerifySummary { passed, report: &rep })?)?;
    for c in rep.failures() {
        eprintln!("FAIL {}: {}", c.name, c.detail);
    }
    println!("{} checks, {} failing", rep.checks.len(), rep.failures().count());
    if passed {
        Ok(())
    } else {
        Err(Failure::Verification(format!("{} checks fail", rep.failures().count())))
    }
}

fn run(args: Args) -> Outcome {
    let base = args
        .config
        .as_deref()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let ctx = Ctx {
        out: args.out,
        base,
        grid: args.grid,
        seed: args.seed,
    };
    let cfg = args.config.as_ref();
    match args.command {
        Command::Lemma => cmd_lemma(&ctx, read_config(cfg)?),
        Command::Series => cmd_series(&ctx, read_config(cfg)?),
        Command::Weight => cmd_weight(&ctx, read_config(cfg)?),
        Command::Rearrange => cmd_rearrange(&ctx, read_config(cfg)?),
        Command::Verify => cmd_verify(&ctx, read_config(cfg)?),
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("config error: {e:#}"),
                Failure::Construction(e) => eprintln!("construction failed: {e:#}"),
                Failure::Verification(msg) => eprintln!("verification failed: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}
