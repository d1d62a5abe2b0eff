//! `offgrid-ehr` operator command.

mod serve;
mod terminal;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};

use offgrid_ehr::audit::{verify_audit_chain, ChainStatus, AUDIT_FILE};
use offgrid_ehr::auth::{AuthPolicy, Identity};
use offgrid_ehr::config::Config;
use offgrid_ehr::model::{Millis, Role};
use offgrid_ehr::netsim::{run_scenario, ScenarioScript};
use offgrid_ehr::persist::cipher_from_env;
use offgrid_ehr::seed::SeedData;
use offgrid_ehr::service::{Caller, EhrService};
use offgrid_ehr::store::RecordReader;

#[derive(Debug, Parser)]
#[command(name = "offgrid-ehr", version, about = "Offline-first EHR: services, seeding, simulation and USSD sessions")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    verb: Verb,
}

/// Config file plus per-field overrides. Flags win over the file.
#[derive(Debug, Args)]
struct Overrides {
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    #[arg(long, global = true)]
    http_port: Option<u16>,
    #[arg(long, global = true)]
    gateway_port: Option<u16>,
    #[arg(long, global = true)]
    shortcode: Option<String>,
    /// USSD session idle timeout in seconds.
    #[arg(long, global = true)]
    session_timeout: Option<u64>,
    /// Default suppression threshold for aggregate exports.
    #[arg(long = "suppression-k", global = true)]
    suppression_k: Option<u32>,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Run the HTTP API and the USSD gateway against the store.
    Serve,
    /// Load fixture data into an empty store.
    Seed {
        #[arg(long)]
        fixture: PathBuf,
    },
    /// Run a scenario script in the network simulator and write its trace.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the seed in the script header.
        #[arg(long)]
        seed: Option<u64>,
        /// Trace file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interactive USSD session. Each input line is one keypad submission.
    Ussd {
        #[arg(long)]
        msisdn: String,
        /// Talk to a running gateway (host:port) instead of opening the store.
        #[arg(long)]
        connect: Option<String>,
    },
    /// Write the anonymized zone aggregates for one month.
    ExportAggregates {
        /// Month as YYYY-MM.
        #[arg(long)]
        period: String,
        #[arg(long)]
        k: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the audit hash chain of the store.
    VerifyAudit,
}

pub(crate) fn now_ms() -> Millis {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as Millis)
        .unwrap_or(0)
}

fn resolve(o: &Overrides) -> Result<Config> {
    let mut cfg = match &o.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(v) = &o.store {
        cfg.store_dir = v.clone();
    }
    if let Some(v) = o.http_port {
        cfg.http_port = v;
    }
    if let Some(v) = o.gateway_port {
        cfg.gateway_port = v;
    }
    if let Some(v) = &o.shortcode {
        cfg.shortcode = v.clone();
    }
    if let Some(v) = o.session_timeout {
        cfg.session_timeout_s = v;
    }
    if let Some(v) = o.suppression_k {
        cfg.suppression_k = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn open_service(cfg: &Config) -> Result<EhrService> {
    let cipher = cipher_from_env().context("at-rest key")?;
    std::fs::create_dir_all(&cfg.store_dir)
        .with_context(|| format!("creating {}", cfg.store_dir.display()))?;
    let mut service = EhrService::open(&cfg.store_dir, cipher, AuthPolicy::default())
        .with_context(|| format!("opening store {}", cfg.store_dir.display()))?;
    service.set_default_k(cfg.suppression_k);
    Ok(service)
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn seed(cfg: &Config, fixture: &Path) -> Result<()> {
    let text = std::fs::read_to_string(fixture).with_context(|| format!("reading {}", fixture.display()))?;
    let data: SeedData = serde_json::from_str(&text).with_context(|| format!("parsing {}", fixture.display()))?;
    let mut service = open_service(cfg)?;
    let view = service.store().view();
    if view.zones().next().is_some() || view.patients().next().is_some() {
        bail!("store {} already holds records", cfg.store_dir.display());
    }
    let summary = data.apply(&mut service, now_ms())?;
    println!("seeded {} records and {} enrollments", summary.records, summary.enrollments);
    Ok(())
}

fn simulate(scenario: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<bool> {
    let text = std::fs::read_to_string(scenario).with_context(|| format!("reading {}", scenario.display()))?;
    let script = ScenarioScript::parse(&text)?;
    let trace = run_scenario(&script, seed)?;
    write_output(out, trace.to_jsonl().as_bytes())?;
    let failures = trace.failures();
    eprintln!(
        "{}: {} assertions, {} failed",
        script.header.scenario,
        trace.assertions(),
        failures.len()
    );
    for f in &failures {
        eprintln!("  at {} ms: {}", f.at_ms, f.detail);
    }
    Ok(failures.is_empty())
}

fn export_aggregates(cfg: &Config, period: &str, k: Option<u32>, out: Option<&Path>) -> Result<()> {
    let mut service = open_service(cfg)?;
    let caller = Caller::Known(Identity::service("operator", Role::Admin));
    let doc = service.aggregates(&caller, period, k, now_ms())?;
    let mut bytes = serde_json::to_vec_pretty(&doc)?;
    bytes.push(b'\n');
    write_output(out, &bytes)
}

fn verify_audit(cfg: &Config) -> Result<bool> {
    let path = cfg.store_dir.join(AUDIT_FILE);
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    match verify_audit_chain(&bytes) {
        ChainStatus::Ok { entries } => {
            println!("OK {entries} entries");
            Ok(true)
        }
        ChainStatus::BrokenAt(line) => {
            println!("BROKEN_AT {line}");
            Ok(false)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = resolve(&cli.overrides)?;
    match cli.verb {
        Verb::Serve => {
            let service = open_service(&cfg)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve::run(cfg, service))?;
            Ok(true)
        }
        Verb::Seed { fixture } => seed(&cfg, &fixture).map(|_| true),
        Verb::Simulate { scenario, seed, out } => simulate(&scenario, seed, out.as_deref()),
        Verb::Ussd { msisdn, connect } => {
            let stdin = std::io::stdin().lock();
            let stdout = std::io::stdout().lock();
            match connect {
                Some(addr) => terminal::remote(&addr, &cfg.shortcode, &msisdn, stdin, stdout),
                None => {
                    let service = open_service(&cfg)?;
                    let gateway = offgrid_ehr::ussd::gateway::Gateway::new(
                        cfg.gateway(),
                        Arc::new(offgrid_ehr::ussd::menu::Menu::default_tree()),
                    );
                    terminal::local(&gateway, service.into_shared(), &msisdn, stdin, stdout)
                }
            }
            .map(|_| true)
        }
        Verb::ExportAggregates { period, k, out } => {
            export_aggregates(&cfg, &period, k, out.as_deref()).map(|_| true)
        }
        Verb::VerifyAudit => verify_audit(&cfg),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
