//! `medroute`: run synthetic experiments and ablations, serve the review API,
//! and replay audit logs.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use medroute_core::config::EngineConfig;
use medroute_core::harness::{
    generate_cases, run_experiment, ExperimentReport, ScenarioConfig, ThetaMode, Variant,
};
use medroute_core::memory::FileAuditLog;
use medroute_core::replay::{replay, ReplayReport};
use medroute_service::ServiceConfig;
use serde_json::json;

#[derive(Parser)]
#[command(name = "medroute", version, about = "Uncertainty-routed multi-agent decision pipeline")]
struct Cli {
    /// Engine config (JSON). Environment overrides still apply.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario against a fixed or adaptive threshold.
    Simulate(SimulateArgs),
    /// Run one scenario once per mode over the same case stream.
    Ablate(AblateArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Recompute the deterministic stages of an audit log and diff them.
    Replay(ReplayArgs),
    /// Print the summary table of a saved report.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "adaptive")]
    theta_mode: ThetaMode,
    /// Overrides the scenario's initial threshold.
    #[arg(long)]
    theta: Option<f64>,
    /// Receives report.json, trace.csv and audit.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Comma list of annotation modes and component subsets.
    #[arg(long)]
    modes: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "fixed")]
    theta_mode: ThetaMode,
    /// Receives one report per mode and ablation.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the JSON summary instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Persist cases and the audit log here; in memory when absent.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Static bearer token; falls back to MEDROUTE_API_TOKEN.
    #[arg(long)]
    api_token: Option<String>,
    /// Static files (the review UI) served under `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    audit_log: PathBuf,
    /// Initial threshold; defaults to the first logged value.
    #[arg(long)]
    theta_init: Option<f64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// A report.json written by `simulate` or `ablate`.
    #[arg(long)]
    report: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn usage(e: impl std::fmt::Display) -> Self {
        Self::Usage(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Self::Runtime(e.to_string())
    }
}

fn load_scenario(path: &Path, seed: Option<u64>, engine: Option<&EngineConfig>) -> Result<ScenarioConfig, Failure> {
    let mut cfg = ScenarioConfig::load(path).map_err(Failure::usage)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = engine {
        cfg.theta_init = e.theta_init;
        cfg.uncertainty = e.uncertainty.clone();
        cfg.annotation = e.annotation;
    }
    cfg.validate().map_err(Failure::usage)?;
    Ok(cfg)
}

fn engine_config(path: Option<&Path>) -> Result<EngineConfig, Failure> {
    EngineConfig::resolve(path).map_err(Failure::usage)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
}

fn summary_table(r: &ExperimentReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario   {} ({})", r.scenario, r.label);
    let _ = writeln!(s, "theta      {:?} {:.3} -> {:.3}", r.theta_mode, r.theta_initial, r.theta_final);
    let _ = writeln!(
        s,
        "cases      {} autonomous {} escalated {} ({:.1}%) errored {}",
        r.n_cases,
        r.n_autonomous,
        r.n_escalated,
        100.0 * r.escalation_rate,
        r.n_errored
    );
    let _ = writeln!(s, "mean AIR   {}   mean F1 {}", fmt_opt(r.mean_air), fmt_opt(r.mean_f1));
    let _ = writeln!(
        s,
        "{:<22} {:>7} {:>7} {:>8} {:>9} {:>7}",
        "task", "AUROC", "F1", "F1_auto", "F1_inter", "AIR"
    );
    for (task, m) in &r.metrics {
        let _ = writeln!(
            s,
            "{:<22} {:>7} {:>7} {:>8} {:>9} {:>7}",
            task.to_string(),
            fmt_opt(m.auroc),
            fmt_opt(m.f1),
            fmt_opt(m.f1_auto),
            fmt_opt(m.f1_inter),
            fmt_opt(m.air)
        );
    }
    s
}

fn write_report(r: &ExperimentReport, dir: &Path, stem: &str) -> Result<(), Failure> {
    std::fs::write(dir.join(format!("{stem}.json")), r.to_json()).map_err(Failure::runtime)?;
    let csv = File::create(dir.join(format!("{stem}.csv"))).map_err(Failure::runtime)?;
    r.write_trace_csv(BufWriter::new(csv)).map_err(Failure::runtime)
}

fn simulate(args: SimulateArgs, engine: Option<&EngineConfig>) -> Result<(), Failure> {
    let cfg = load_scenario(&args.scenario, args.seed, engine)?;
    let theta = args.theta.unwrap_or(cfg.theta_init);
    if !(0.0..=1.0).contains(&theta) {
        return Err(Failure::Usage(format!("--theta {theta} must lie in [0, 1]")));
    }
    std::fs::create_dir_all(&args.out).map_err(Failure::runtime)?;
    let audit = args.out.join("audit.jsonl");
    // The audit sink appends; a rerun must not extend an old log.
    if audit.exists() {
        std::fs::remove_file(&audit).map_err(Failure::runtime)?;
    }
    let cases = generate_cases(&cfg);
    let label = match args.theta_mode {
        ThetaMode::Fixed => "fixed",
        ThetaMode::Adaptive => "adaptive",
    };
    let report = run_experiment(&cfg, &cases, args.theta_mode, theta, label, Some(&audit))
        .map_err(Failure::runtime)?;
    std::fs::write(args.out.join("report.json"), report.to_json()).map_err(Failure::runtime)?;
    let csv = File::create(args.out.join("trace.csv")).map_err(Failure::runtime)?;
    report.write_trace_csv(BufWriter::new(csv)).map_err(Failure::runtime)?;
    print!("{}", summary_table(&report));
    Ok(())
}

fn parse_modes(raw: &str) -> Result<Vec<Variant>, Failure> {
    let modes: Vec<Variant> = raw
        .split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(|m| m.parse().map_err(Failure::Usage))
        .collect::<Result<_, _>>()?;
    if modes.is_empty() {
        return Err(Failure::Usage("--modes needs at least one mode".into()));
    }
    Ok(modes)
}

fn ablate(args: AblateArgs, engine: Option<&EngineConfig>) -> Result<(), Failure> {
    let modes = parse_modes(&args.modes)?;
    let cfg = load_scenario(&args.scenario, args.seed, engine)?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(Failure::runtime)?;
    }
    let cases = generate_cases(&cfg);
    let mut rows = Vec::new();
    let mut table = format!(
        "{:<18} {:>9} {:>7} {:>7} {:>8} {:>9} {:>7}\n",
        "mode", "escalated", "rate", "F1", "F1_auto", "F1_inter", "AIR"
    );
    for v in modes {
        let mut variant_cfg = cfg.clone();
        v.apply(&mut variant_cfg);
        let r = run_experiment(&variant_cfg, &cases, args.theta_mode, variant_cfg.theta_init, v.label(), None)
            .map_err(Failure::runtime)?;
        let mean = |f: &dyn Fn(&medroute_core::metrics::TaskMetrics) -> Option<f64>| {
            let xs: Vec<f64> = r.metrics.values().filter_map(f).collect();
            (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
        };
        let (f1_auto, f1_inter) = (mean(&|m| m.f1_auto), mean(&|m| m.f1_inter));
        let _ = writeln!(
            table,
            "{:<18} {:>9} {:>7.3} {:>7} {:>8} {:>9} {:>7}",
            v.label(),
            r.n_escalated,
            r.escalation_rate,
            fmt_opt(r.mean_f1),
            fmt_opt(f1_auto),
            fmt_opt(f1_inter),
            fmt_opt(r.mean_air)
        );
        rows.push(json!({
            "mode": v.label(),
            "n_escalated": r.n_escalated,
            "escalation_rate": r.escalation_rate,
            "mean_f1": r.mean_f1,
            "mean_f1_auto": f1_auto,
            "mean_f1_inter": f1_inter,
            "mean_air": r.mean_air,
            "theta_final": r.theta_final,
        }));
        if let Some(dir) = &args.out {
            write_report(&r, dir, &format!("report-{}", v.label()))?;
        }
    }
    let summary = json!({
        "scenario": cfg.name,
        "seed": cfg.seed,
        "theta_mode": args.theta_mode,
        "n_cases": cases.len(),
        "rows": rows,
    });
    let summary_text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    if let Some(dir) = &args.out {
        std::fs::write(dir.join("ablation.json"), &summary_text).map_err(Failure::runtime)?;
    }
    if args.json {
        println!("{summary_text}");
    } else {
        print!("{table}");
    }
    Ok(())
}

fn serve(args: ServeArgs, engine: EngineConfig) -> Result<(), Failure> {
    let cfg = ServiceConfig {
        engine,
        data_dir: args.data_dir,
        api_token: args.api_token.or_else(|| std::env::var("MEDROUTE_API_TOKEN").ok()),
        static_dir: args.static_dir,
    };
    let runtime = tokio::runtime::Runtime::new().map_err(Failure::runtime)?;
    runtime
        .block_on(medroute_service::serve(cfg, args.addr))
        .map_err(Failure::runtime)
}

fn print_replay(rep: &ReplayReport) {
    println!("records    {}", rep.records);
    println!("cases      {}", rep.cases);
    println!("outcomes   {}", rep.outcomes.len());
    println!("pending    {}", rep.pending.len());
    if let Some(t) = &rep.threshold {
        println!("theta      {:.3} after {} updates", t.theta(), t.history().len());
    }
    println!("diffs      {}", rep.divergences.len());
    for d in &rep.divergences {
        println!(
            "  seq {} case {} {}: logged {} recomputed {}",
            d.seq, d.case_id, d.field, d.logged, d.recomputed
        );
    }
}

fn replay_log(args: ReplayArgs) -> Result<(), Failure> {
    if let Some(t) = args.theta_init {
        if !(0.0..=1.0).contains(&t) {
            return Err(Failure::Usage(format!("--theta-init {t} must lie in [0, 1]")));
        }
    }
    let records = FileAuditLog::load(&args.audit_log).map_err(Failure::runtime)?;
    let rep = replay(&records, args.theta_init);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&rep).expect("replay report serializes"));
    } else {
        print_replay(&rep);
    }
    if rep.is_clean() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "{} divergences between the log and the recomputation",
            rep.divergences.len()
        )))
    }
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.report).map_err(Failure::usage)?;
    let r: ExperimentReport = serde_json::from_str(&text).map_err(Failure::usage)?;
    print!("{}", summary_table(&r));
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let explicit = match &cli.config {
        Some(p) => Some(engine_config(Some(p))?),
        None => None,
    };
    match cli.command {
        Command::Simulate(a) => simulate(a, explicit.as_ref()),
        Command::Ablate(a) => ablate(a, explicit.as_ref()),
        Command::Serve(a) => {
            let engine = match explicit {
                Some(e) => e,
                None => engine_config(None)?,
            };
            serve(a, engine)
        }
        Command::Replay(mut a) => {
            if a.theta_init.is_none() {
                a.theta_init = explicit.map(|e| e.theta_init);
            }
            replay_log(a)
        }
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("error")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
