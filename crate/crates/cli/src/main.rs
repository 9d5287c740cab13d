use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sns_keyrate::channel::ChannelParams;
use sns_keyrate::experiment::{
    reproduce_tables, run_point, run_sweep, write_csv, write_json, OptimizeSection, OutputFormat, RunConfig,
    TableSettings,
};
use sns_keyrate::keyrate::RateMode;
use sns_keyrate::montecarlo::{rate_agreement, soundness_suite};
use sns_keyrate::protocol::ProtocolParams;
use sns_keyrate::Error;

#[derive(Parser)]
#[command(name = "sns-keyrate", version, about = "SNS twin-field QKD key rates under source intensity errors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Key rate and every intermediate bound at one operating point.
    Point(Common),
    /// Rate against distance, with the first crossing of the absolute PLOB bound.
    Sweep(Common),
    /// Like `point`, but always optimizes the source parameters.
    Optimize(Common),
    /// Reproduce the reference rate and crossing tables; exits 3 on any miss.
    Tables(TablesArgs),
    /// Monte-Carlo soundness suite and linear-model agreement check.
    McValidate(McArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    out: OutputArgs,
    /// Optimizer seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override every intensity fluctuation bound.
    #[arg(long)]
    delta: Option<f64>,
    /// original | aopp | aopp-scan
    #[arg(long)]
    mode: Option<String>,
    /// Tolerate at most this many pulses outside the intensity box.
    #[arg(long = "n-delta")]
    n_delta: Option<u64>,
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv | json
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct TablesArgs {
    #[command(flatten)]
    out: OutputArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluations per rate-table optimization.
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Args)]
struct McArgs {
    /// Optional configuration for the channel and protocol; the default source and detector settings at 100 km otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    out: OutputArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 200)]
    runs: usize,
    #[arg(long, default_value_t = 100_000_000)]
    windows: u64,
}

/// Exit status and message of a failed run.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::SolverFailure { .. }
            | Error::NonPositiveDenominator(_)
            | Error::Domain(_)
            | Error::UndefinedBound(_) => 2,
            _ => 1,
        };
        Failure(code, e.to_string())
    }
}

fn parse_mode(s: &str) -> Result<RateMode, Failure> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| Failure(1, format!("unknown mode `{s}`, expected original, aopp or aopp-scan")))
}

fn load(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(d) = c.delta {
        cfg.delta = Some(d);
    }
    if let Some(m) = &c.mode {
        cfg.mode.rate = parse_mode(m)?;
    }
    if c.n_delta.is_some() {
        cfg.mode.n_delta = c.n_delta;
    }
    if let (Some(seed), Some(o)) = (c.seed, cfg.optimize.as_mut()) {
        o.seed = seed;
    }
    Ok(cfg)
}

fn format_of(args: &OutputArgs, cfg_default: OutputFormat) -> Result<OutputFormat, Failure> {
    match &args.format {
        Some(f) => Ok(f.parse()?),
        None => Ok(cfg_default),
    }
}

fn sink(path: Option<&PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure(1, format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn point(c: &Common, force_optimize: bool) -> Result<(), Failure> {
    let mut cfg = load(c)?;
    if force_optimize && cfg.optimize.is_none() {
        cfg.optimize = Some(OptimizeSection {
            seed: c.seed.unwrap_or(OptimizeSection::default().seed),
            ..OptimizeSection::default()
        });
    }
    let res = run_point(&cfg)?;
    let out = sink(c.out.out.as_ref().or(cfg.output.path.as_ref()))?;
    match format_of(&c.out, cfg.output.format)? {
        OutputFormat::Json => write_json(&res, out)?,
        OutputFormat::Csv => write_csv(std::slice::from_ref(&res), out)?,
    }
    Ok(())
}

fn sweep(c: &Common) -> Result<(), Failure> {
    let cfg = load(c)?;
    let res = run_sweep(&cfg)?;
    let out = sink(c.out.out.as_ref().or(cfg.output.path.as_ref()))?;
    match format_of(&c.out, cfg.output.format)? {
        OutputFormat::Json => write_json(&res, out)?,
        OutputFormat::Csv => {
            write_csv(&res.points, out)?;
            match res.crossing {
                Some(x) => eprintln!("first PLOB crossing: {:.2} km at rate {:.4e}", x.distance_km, x.rate),
                None => eprintln!("no PLOB crossing on this grid"),
            }
        }
    }
    Ok(())
}

fn tables(a: &TablesArgs) -> Result<bool, Failure> {
    let mut settings = TableSettings::default();
    if let Some(s) = a.seed {
        settings.search.seed = s;
    }
    if let Some(b) = a.budget {
        settings.search.budget = b;
    }
    let report = reproduce_tables(&settings)?;
    print!("{}", report.render());
    if a.out.out.is_some() {
        if format_of(&a.out, OutputFormat::Json)? == OutputFormat::Csv {
            return Err(Failure(1, "tables are written as json only".into()));
        }
        write_json(&report, sink(a.out.out.as_ref())?)?;
    }
    Ok(report.pass())
}

#[derive(serde::Serialize)]
struct McReport {
    soundness: sns_keyrate::montecarlo::SoundnessSummary,
    rates: Vec<sns_keyrate::montecarlo::RateCheck>,
    pass: bool,
}

fn mc_validate(a: &McArgs) -> Result<bool, Failure> {
    let (ch, mut p) = match &a.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            (cfg.channel.params(), cfg.protocol())
        }
        None => (ChannelParams::symmetric(100.0), ProtocolParams::default()),
    };
    if let Some(d) = a.delta {
        p.set_delta(d);
    }
    p.validate()?;
    let soundness = soundness_suite(&p, &ch, a.windows, a.runs, a.seed)?;
    let rates = rate_agreement(&p, &ch, a.windows, a.seed)?;
    let pass = soundness.violations == 0 && rates.iter().all(|r| r.z.abs() < 5.0);
    let report = McReport { soundness, rates, pass };
    eprintln!(
        "{} soundness runs, {} violations; max |z| of counting rates {:.2}",
        report.soundness.runs,
        report.soundness.violations,
        report.rates.iter().map(|r| r.z.abs()).fold(0.0, f64::max)
    );
    if format_of(&a.out, OutputFormat::Json)? == OutputFormat::Csv {
        return Err(Failure(1, "mc-validate writes json only".into()));
    }
    write_json(&report, sink(a.out.out.as_ref())?)?;
    Ok(pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Point(c) => point(c, false).map(|_| true),
        Command::Optimize(c) => point(c, true).map(|_| true),
        Command::Sweep(c) => sweep(c).map(|_| true),
        Command::Tables(a) => tables(a),
        Command::McValidate(a) => mc_validate(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
