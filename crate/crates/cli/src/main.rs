//! `satinfer`: runs scenarios, trains the confidence network, and reproduces
//! the contact, offload-sweep and masking experiments from a TOML config.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use satinfer::constellation::{self, calibrate_mask, MaskCalibration};
use satinfer::orchestrator::experiments::{self, MaskStrategy};
use satinfer::orchestrator::{metrics, run_scenario, Pipeline, ScenarioConfig};
use satinfer::Error;
use thiserror::Error;

#[derive(Parser)]
#[command(name = "satinfer", version, about = "Satellite-ground collaborative inference simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file. Without one the bundled defaults are used.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Where reports are written.
    #[arg(short, long, global = true, env = "SATINFER_OUTPUT_DIR", default_value = "satinfer-out")]
    output_dir: PathBuf,

    /// Overrides `samples.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// More progress output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Only errors on stderr, nothing on stdout.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured policy; writes metrics.json, traces.csv and resolved_config.toml.
    Run,
    /// Train the confidence network on the training split and save it.
    TrainConfidence {
        /// Network file name inside the output directory.
        #[arg(long, default_value = "confidence.pcn")]
        net: String,
    },
    /// List contact windows and contact fractions.
    ContactReport,
    /// Mean similarity against the offloaded share, confidence-ranked and random.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        fractions: Vec<f64>,
    },
    /// Random, ideal and attention-ranked region masking on detection samples.
    MaskExperiment {
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8")]
        fractions: Vec<f64>,
        /// Overrides `samples.count`.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Solve the elevation mask that gives the target mean contact fraction.
    CalibrateMask {
        #[arg(long, default_value_t = 0.0433)]
        target: f64,
        #[arg(long, default_value_t = 0.0005)]
        tolerance: f64,
    },
}

#[derive(Debug, Error)]
enum Failure {
    #[error("{0}")]
    Config(String),
    #[error("no sample completed: all {0} offloads ran past the simulation horizon")]
    HorizonOnly(usize),
    #[error("target contact fraction {target} unreachable: achievable range is [{min}, {max}] for masks in [0, 89] deg")]
    Unreachable { target: f64, min: f64, max: f64 },
    #[error("{0}")]
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::HorizonOnly(_) => 3,
            Failure::Unreachable { .. } => 4,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

struct Ctx {
    out: PathBuf,
    verbose: u8,
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn info(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, Failure> {
        let path = self.out.join(name);
        fs::write(&path, bytes).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))?;
        self.info(format!("wrote {}", path.display()));
        Ok(path)
    }
}

fn load_config(common: &Common) -> Result<ScenarioConfig, Failure> {
    let cfg = match &common.config {
        Some(path) => ScenarioConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Failure::Config(format!("cannot read config: {e}")),
            other => Failure::from(other),
        })?,
        None => ScenarioConfig::default(),
    };
    let cfg = match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Failure::Other(e.to_string());
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    w.into_inner().map_err(|e| Failure::Other(e.to_string()))
}

fn run(ctx: &Ctx, cfg: &ScenarioConfig) -> Result<(), Failure> {
    ctx.info(format!("running {} samples under {}", cfg.samples.count, cfg.policy.name()));
    let report = run_scenario(cfg)?;
    let m = &report.metrics;
    ctx.write("metrics.json", m.to_json()? + "\n")?;
    let mut traces = Vec::new();
    metrics::write_traces_csv(&mut traces, &report.traces)?;
    ctx.write("traces.csv", traces)?;
    ctx.write("resolved_config.toml", cfg.to_toml_string()?)?;

    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    ctx.say(format!(
        "{}: {} samples, {} onboard, {} ground, {} incomplete",
        m.policy, m.samples, m.onboard_answered, m.ground_answered, m.incomplete
    ));
    ctx.say(format!(
        "mean simi {}  mean latency {} s  p90 latency {} s",
        show(m.mean_simi),
        show(m.mean_latency_s),
        show(m.p90_latency_s)
    ));
    if m.completed == 0 && m.incomplete > 0 {
        return Err(Failure::HorizonOnly(m.incomplete));
    }
    Ok(())
}

fn train_confidence(ctx: &Ctx, cfg: &ScenarioConfig, name: &str) -> Result<(), Failure> {
    ctx.info(format!(
        "training on {} samples for {} epochs",
        cfg.run.training_samples, cfg.training.epochs
    ));
    let pipeline = Pipeline::new(cfg.clone())?;
    let (net, history) = pipeline.train_net()?;
    let path = ctx.out.join(name);
    net.save(&path)?;
    ctx.info(format!("wrote {}", path.display()));
    let rows = history
        .iter()
        .enumerate()
        .map(|(i, l)| vec![(i + 1).to_string(), l.to_string()]);
    ctx.write("training_loss.csv", csv_text(&["epoch", "loss"], rows)?)?;

    let mut resolved = cfg.clone();
    resolved.run.net_path = Some(fs::canonicalize(&path).unwrap_or(path.clone()));
    ctx.write("resolved_config.toml", resolved.to_toml_string()?)?;
    ctx.say(format!(
        "saved {} ({} parameters), final training loss {:.5}",
        path.display(),
        net.params().len(),
        history.last().copied().unwrap_or(f64::NAN)
    ));
    Ok(())
}

fn contact_report(ctx: &Ctx, cfg: &ScenarioConfig) -> Result<(), Failure> {
    let c = &cfg.constellation;
    let pairs = c.all_windows()?;
    let mut rows = Vec::new();
    for p in &pairs {
        for w in &p.windows {
            rows.push(vec![
                p.sat_id.clone(),
                p.gs_id.clone(),
                w.start_s.to_string(),
                w.end_s.to_string(),
                w.duration().to_string(),
            ]);
        }
    }
    ctx.write("contacts.csv", csv_text(&["satellite", "ground_station", "start_s", "end_s", "duration_s"], rows)?)?;

    let mut summary = Vec::new();
    for p in &pairs {
        let fraction = constellation::contact_fraction(&p.windows, c.horizon_s);
        let longest = p.windows.iter().map(|w| w.duration()).fold(0.0, f64::max);
        ctx.say(format!(
            "{} -> {}: {} passes, contact {:.3}%, longest {:.1} s",
            p.sat_id,
            p.gs_id,
            p.windows.len(),
            100.0 * fraction,
            longest
        ));
        summary.push(serde_json::json!({
            "satellite": p.sat_id,
            "ground_station": p.gs_id,
            "passes": p.windows.len(),
            "contact_fraction": fraction,
            "longest_pass_s": longest,
        }));
    }
    let mean = c.mean_contact_fraction()?;
    ctx.say(format!("mean contact fraction {:.3}% over {} s", 100.0 * mean, c.horizon_s));
    let json = serde_json::json!({
        "horizon_s": c.horizon_s,
        "mean_contact_fraction": mean,
        "pairs": summary,
    });
    ctx.write("contact_report.json", to_pretty(&json)? + "\n")?;
    Ok(())
}

fn to_pretty(v: &impl serde::Serialize) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::Other(e.to_string()))
}

fn sweep(ctx: &Ctx, cfg: &ScenarioConfig, fractions: &[f64]) -> Result<(), Failure> {
    let rows = experiments::sweep_offload(cfg, fractions)?;
    ctx.say(format!("{:>8} {:>10} {:>10}", "fraction", "confidence", "random"));
    for r in &rows {
        ctx.say(format!("{:>8.2} {:>10.4} {:>10.4}", r.fraction, r.confidence_simi, r.random_simi));
    }
    let csv_rows = rows.iter().map(|r| {
        vec![
            r.fraction.to_string(),
            r.offloaded.to_string(),
            r.confidence_simi.to_string(),
            r.random_simi.to_string(),
        ]
    });
    ctx.write("sweep.csv", csv_text(&["fraction", "offloaded", "confidence_simi", "random_simi"], csv_rows)?)?;
    ctx.write("resolved_config.toml", cfg.to_toml_string()?)?;
    Ok(())
}

fn mask_experiment(ctx: &Ctx, cfg: &ScenarioConfig, fractions: &[f64]) -> Result<(), Failure> {
    let report = experiments::masking_experiment(cfg, fractions)?;
    ctx.say(format!("{} detection samples", report.samples));
    ctx.say(format!("{:>8} {:>18} {:>10} {:>10}", "masked", "strategy", "simi", "bytes"));
    for r in &report.rows {
        ctx.say(format!(
            "{:>8.2} {:>18} {:>10.4} {:>10.3}",
            r.mask_fraction,
            r.strategy.as_str(),
            r.mean_simi,
            r.mean_byte_fraction
        ));
    }
    let m = &report.matched;
    ctx.say(format!(
        "matched budget ({:.3} of bytes): attention filter {:.4}, random {:.4}",
        m.mean_byte_fraction, m.filter_mean_simi, m.random_mean_simi
    ));
    let rows = report.rows.iter().map(|r| {
        vec![
            r.mask_fraction.to_string(),
            r.strategy.as_str().to_string(),
            r.mean_simi.to_string(),
            r.mean_retained_mass.to_string(),
            r.mean_byte_fraction.to_string(),
        ]
    });
    let header = ["mask_fraction", "strategy", "mean_simi", "mean_retained_mass", "mean_byte_fraction"];
    ctx.write("masking.csv", csv_text(&header, rows)?)?;
    ctx.write("masking.json", to_pretty(&report)? + "\n")?;
    ctx.write("resolved_config.toml", cfg.to_toml_string()?)?;
    debug_assert_eq!(MaskStrategy::ALL.len() * fractions.len(), report.rows.len());
    Ok(())
}

fn calibrate(ctx: &Ctx, cfg: &ScenarioConfig, target: f64, tolerance: f64) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&target) || tolerance.is_nan() || tolerance <= 0.0 {
        return Err(Failure::Other(format!(
            "target must be in [0,1] and tolerance > 0 (got {target}, {tolerance})"
        )));
    }
    ctx.info(format!("bisecting the mask for a {target} contact fraction"));
    let (mask, fraction) = match calibrate_mask(&cfg.constellation, target, tolerance)? {
        MaskCalibration::Solved { mask_deg, fraction } => {
            ctx.say(format!("solved mask {mask_deg:.4} deg, contact fraction {fraction:.5}"));
            (mask_deg, fraction)
        }
        MaskCalibration::AtUpperBound { mask_deg, fraction } => {
            ctx.say(format!(
                "target at or below the steepest mask: using the {mask_deg} deg bound, contact fraction {fraction:.5}"
            ));
            (mask_deg, fraction)
        }
        MaskCalibration::Unreachable {
            min_fraction,
            max_fraction,
        } => {
            return Err(Failure::Unreachable {
                target,
                min: min_fraction,
                max: max_fraction,
            })
        }
    };
    let mut resolved = cfg.clone();
    resolved.constellation.set_mask(mask);
    ctx.write("resolved_config.toml", resolved.to_toml_string()?)?;
    let json = serde_json::json!({ "target": target, "mask_deg": mask, "contact_fraction": fraction });
    ctx.write("calibration.json", to_pretty(&json)? + "\n")?;
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.common)?;
    let ctx = Ctx {
        out: cli.common.output_dir.clone(),
        verbose: cli.common.verbose,
        quiet: cli.common.quiet,
    };
    create_dir(&ctx.out)?;
    match &cli.command {
        Command::Run => run(&ctx, &cfg),
        Command::TrainConfidence { net } => train_confidence(&ctx, &cfg, net),
        Command::ContactReport => contact_report(&ctx, &cfg),
        Command::Sweep { fractions } => sweep(&ctx, &cfg, fractions),
        Command::MaskExperiment { fractions, samples } => {
            let mut cfg = cfg;
            if let Some(n) = samples {
                cfg.samples.count = *n;
            }
            mask_experiment(&ctx, &cfg, fractions)
        }
        Command::CalibrateMask { target, tolerance } => calibrate(&ctx, &cfg, *target, *tolerance),
    }
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
