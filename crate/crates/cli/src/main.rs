//! `antroute`: run scenarios, generate topologies, query the path oracle and
//! aggregate metrics files.

use antroute::channel::BroadcastPolicy;
use antroute::{Msat, NodeId};
use antroute_sim::adversary::AdversaryKind;
use antroute_sim::metrics::{Metrics, PaymentRecord};
use antroute_sim::oracle::{cheapest_fee, shortest_hops};
use antroute_sim::topology::{self, CapacityModel};
use antroute_sim::{RunOptions, Scenario, Topology, TopologyKind, TopologySpec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "antroute",
    version,
    about = "Ant-style route discovery simulator"
)]
#[command(
    after_help = "Set ANTROUTE_LOG (e.g. ANTROUTE_LOG=debug) to control log output.\n\
Exit codes: 0 done, 2 bad configuration or arguments, 3 invariant violation."
)]
struct Cli {
    /// Raise log verbosity (repeatable); ANTROUTE_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write metrics.json into the output directory.
    Run(RunArgs),
    /// Generate a topology file.
    Topo(TopoArgs),
    /// Print the shortest hop count and cheapest fee between two nodes.
    Oracle(OracleArgs),
    /// Concatenate per-payment rows from several metrics files into one CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario JSON file.
    scenario: Option<PathBuf>,
    /// Run configuration JSON; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Broadcast policy for every node, as JSON or a bare name
    /// (flood_all, '{"top_k":3}', '{"pareto_weighted":{"alpha":1.5,"k":3}}').
    #[arg(long)]
    policy: Option<String>,
    /// Turn a node into an adversary: NODE=KIND, with KIND as JSON or a bare
    /// name (3='{"dropper":{"p":1.0}}', 5=transparent_cheat). Repeatable.
    #[arg(long = "adversary", value_name = "NODE=KIND")]
    adversaries: Vec<String>,
    /// Also write the message log to events.jsonl.
    #[arg(long)]
    events: bool,
    /// Also write per-payment rows to payments.csv.
    #[arg(long)]
    csv: bool,
    /// Run this many repetitions with consecutive seeds, each in run-<i>/.
    #[arg(long, default_value_t = 1)]
    repeat: u32,
}

/// Run settings loaded from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    scenario: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    policy: Option<BroadcastPolicy>,
    #[serde(default)]
    adversaries: BTreeMap<NodeId, AdversaryKind>,
    verbosity: Option<String>,
    #[serde(default)]
    events: bool,
    #[serde(default)]
    csv: bool,
    repeat: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Line,
    Ring,
    Grid,
    ErdosRenyi,
    BarabasiAlbert,
}

#[derive(Args)]
struct TopoArgs {
    kind: Kind,
    /// Node count (line, ring, erdos-renyi, barabasi-albert).
    #[arg(long)]
    n: Option<u32>,
    #[arg(long)]
    rows: Option<u32>,
    #[arg(long)]
    cols: Option<u32>,
    /// Edge probability (erdos-renyi).
    #[arg(long)]
    p: Option<f64>,
    /// Edges per new node (barabasi-albert).
    #[arg(long)]
    m: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Capacity of every channel in msat.
    #[arg(long, conflicts_with = "capacity_range")]
    capacity: Option<Msat>,
    /// Draw capacities uniformly from LO..=HI msat.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    capacity_range: Option<Vec<Msat>>,
    /// Share of channels that only carry payments one way.
    #[arg(long, default_value_t = 0.0)]
    unidirectional_fraction: f64,
    /// Output file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    /// Topology JSON file.
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    payer: u32,
    #[arg(long)]
    payee: u32,
    #[arg(long)]
    amount: Msat,
    /// Fee every intermediary charges.
    #[arg(long, default_value_t = 0, conflicts_with = "fees")]
    fee: Msat,
    /// JSON object mapping node ids to fees; missing nodes charge nothing.
    #[arg(long)]
    fees: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics files written by `run`.
    #[arg(required = true)]
    metrics: Vec<PathBuf>,
    /// Output CSV [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with the exit code it maps to.
struct Failure(u8, String);

fn config_error(e: impl Display) -> Failure {
    Failure(EXIT_CONFIG, e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let config_level = match &cli.command {
        Command::Run(args) => args
            .config
            .as_deref()
            .and_then(|p| read_run_config(p).ok())
            .and_then(|c| c.verbosity),
        _ => None,
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(
        "ANTROUTE_LOG",
        config_level.as_deref().unwrap_or(default_level),
    ))
    .init();

    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Topo(args) => cmd_topo(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn read_run_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| config_error(format!("invalid run config {}: {e}", path.display())))
}

/// Parses JSON, falling back to a bare string for unit variants.
fn lenient_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, serde_json::Error> {
    serde_json::from_str(text).or_else(|_| serde_json::from_value(serde_json::Value::from(text)))
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut config = match &args.config {
        Some(path) => read_run_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &args.policy {
        config.policy = Some(lenient_json(p).map_err(|e| config_error(format!("--policy: {e}")))?);
    }
    for spec in &args.adversaries {
        let (node, kind) = spec
            .split_once('=')
            .ok_or_else(|| config_error(format!("--adversary {spec}: expected NODE=KIND")))?;
        let node: u32 = node
            .parse()
            .map_err(|e| config_error(format!("--adversary {spec}: {e}")))?;
        let kind =
            lenient_json(kind).map_err(|e| config_error(format!("--adversary {spec}: {e}")))?;
        config.adversaries.insert(NodeId(node), kind);
    }
    let scenario_path = args
        .scenario
        .or(config.scenario)
        .ok_or_else(|| config_error("no scenario given"))?;
    let out = args
        .out
        .or(config.out)
        .unwrap_or_else(|| PathBuf::from("out"));
    let events = args.events || config.events;
    let csv = args.csv || config.csv;
    let repeat = if args.repeat != 1 {
        args.repeat
    } else {
        config.repeat.unwrap_or(1)
    };
    if repeat == 0 {
        return Err(config_error("--repeat must be at least 1"));
    }

    let mut scenario = Scenario::load(&scenario_path).map_err(config_error)?;
    if let Some(seed) = args.seed.or(config.seed) {
        scenario.seed = seed;
    }
    if let Some(policy) = config.policy {
        scenario.node_defaults.broadcast_policy = policy;
    }
    scenario.adversaries.extend(config.adversaries);

    let runs: Vec<(PathBuf, Scenario)> = (0..repeat)
        .map(|i| {
            let mut s = scenario.clone();
            s.seed = scenario.seed.wrapping_add(i as u64);
            let dir = if repeat == 1 {
                out.clone()
            } else {
                out.join(format!("run-{i}"))
            };
            (dir, s)
        })
        .collect();
    let opts = RunOptions { event_log: events };
    // Repetitions are independent, so they may run side by side.
    let outputs: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = runs
            .iter()
            .map(|(_, s)| scope.spawn(move || antroute_sim::run(s, opts)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run thread panicked"))
            .collect()
    });

    let mut violations = 0;
    for ((dir, _), output) in runs.iter().zip(outputs) {
        let output = output.map_err(config_error)?;
        write_run(dir, &output.metrics, output.event_log.as_deref(), csv)?;
        let s = &output.metrics.summary;
        log::info!(
            "{}: {}/{} payments settled, {} messages",
            dir.display(),
            s.successes,
            s.payments,
            s.messages_total
        );
        for v in &s.invariant_violations {
            eprintln!("invariant violated: {v}");
        }
        violations += s.invariant_violations.len();
    }
    if violations > 0 {
        return Err(Failure(
            EXIT_INVARIANT,
            format!("{violations} invariant violations"),
        ));
    }
    Ok(())
}

fn io_error(path: &Path, e: impl Display) -> Failure {
    Failure(1, format!("{}: {e}", path.display()))
}

fn write_run(
    dir: &Path,
    metrics: &Metrics,
    events: Option<&str>,
    csv: bool,
) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let path = dir.join("metrics.json");
    let mut json = serde_json::to_string_pretty(metrics).expect("metrics serialize");
    json.push('\n');
    std::fs::write(&path, json).map_err(|e| io_error(&path, e))?;
    if let Some(log) = events {
        let path = dir.join("events.jsonl");
        std::fs::write(&path, log).map_err(|e| io_error(&path, e))?;
    }
    if csv {
        let path = dir.join("payments.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_error(&path, e))?;
        write_payment_rows(&mut w, None, &metrics.payments).map_err(|e| io_error(&path, e))?;
        w.flush().map_err(|e| io_error(&path, e))?;
    }
    Ok(())
}

const PAYMENT_COLUMNS: [&str; 23] = [
    "index",
    "phase",
    "start",
    "payer",
    "payee",
    "amount",
    "max_fee",
    "outcome",
    "success",
    "offers",
    "discovery_latency",
    "completed_at",
    "matching_node",
    "path_hops",
    "total_fee",
    "min_offer_fee",
    "ground_truth_fee",
    "oracle_hops",
    "oracle_min_fee",
    "stretch",
    "volume_ok",
    "audit",
    "messages",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Serde name of an enum variant, unit or struct-like.
fn variant<T: serde::Serialize>(v: &T) -> String {
    match serde_json::to_value(v).expect("enum serializes") {
        serde_json::Value::String(s) => s,
        serde_json::Value::Object(m) => m.keys().next().cloned().unwrap_or_default(),
        other => other.to_string(),
    }
}

fn payment_row(p: &PaymentRecord) -> Vec<String> {
    vec![
        p.index.to_string(),
        p.phase.clone(),
        p.start.to_string(),
        p.payer.to_string(),
        p.payee.to_string(),
        p.amount.to_string(),
        p.max_fee.to_string(),
        variant(&p.outcome),
        p.success.to_string(),
        p.offers.to_string(),
        opt(p.discovery_latency),
        opt(p.completed_at),
        opt(p.matching_node),
        opt(p.path_hops),
        opt(p.total_fee),
        opt(p.min_offer_fee),
        opt(p.ground_truth_fee),
        opt(p.oracle_hops),
        opt(p.oracle_min_fee),
        opt(p.stretch),
        opt(p.volume_ok),
        p.audit.as_ref().map(variant).unwrap_or_default(),
        p.messages.total().to_string(),
    ]
}

/// Writes a header and one row per payment, prefixed by run columns if given.
fn write_payment_rows<W: std::io::Write>(
    w: &mut csv::Writer<W>,
    run: Option<(&str, u64)>,
    payments: &[PaymentRecord],
) -> csv::Result<()> {
    if run.is_none() {
        w.write_record(PAYMENT_COLUMNS)?;
    }
    for p in payments {
        let mut row = Vec::with_capacity(PAYMENT_COLUMNS.len() + 2);
        if let Some((name, seed)) = run {
            row.push(name.to_string());
            row.push(seed.to_string());
        }
        row.extend(payment_row(p));
        w.write_record(row)?;
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let sink: Box<dyn std::io::Write> = match &args.out {
        Some(path) => Box::new(std::fs::File::create(path).map_err(|e| io_error(path, e))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let header = ["run", "seed"].into_iter().chain(PAYMENT_COLUMNS);
    w.write_record(header).map_err(config_error)?;
    let (mut rows, mut successes) = (0, 0);
    for path in &args.metrics {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let m: Metrics = serde_json::from_str(&text)
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let name = path.display().to_string();
        write_payment_rows(&mut w, Some((&name, m.seed)), &m.payments).map_err(config_error)?;
        rows += m.payments.len();
        successes += m.summary.successes;
    }
    w.flush().map_err(config_error)?;
    let rate = if rows == 0 {
        0.0
    } else {
        successes as f64 / rows as f64
    };
    eprintln!(
        "{rows} payments from {} runs, success rate {rate:.3}",
        args.metrics.len()
    );
    Ok(())
}

fn need(v: Option<u32>, flag: &str) -> Result<u32, Failure> {
    v.ok_or_else(|| config_error(format!("--{flag} is required for this topology")))
}

fn cmd_topo(args: TopoArgs) -> Result<(), Failure> {
    let kind = match args.kind {
        Kind::Line => TopologyKind::Line {
            n: need(args.n, "n")?,
        },
        Kind::Ring => TopologyKind::Ring {
            n: need(args.n, "n")?,
        },
        Kind::Grid => TopologyKind::Grid {
            rows: need(args.rows, "rows")?,
            cols: need(args.cols, "cols")?,
        },
        Kind::ErdosRenyi => TopologyKind::ErdosRenyi {
            n: need(args.n, "n")?,
            p: args
                .p
                .ok_or_else(|| config_error("--p is required for erdos-renyi"))?,
        },
        Kind::BarabasiAlbert => TopologyKind::BarabasiAlbert {
            n: need(args.n, "n")?,
            m: need(args.m, "m")?,
        },
    };
    let capacity = match (args.capacity, args.capacity_range.as_deref()) {
        (Some(capacity), _) => CapacityModel::Constant { capacity },
        (None, Some(&[lo, hi])) => CapacityModel::UniformRange { lo, hi },
        _ => CapacityModel::default(),
    };
    let spec = TopologySpec {
        kind,
        capacity,
        unidirectional_fraction: args.unidirectional_fraction,
    };
    let topo = topology::generate(&spec, args.seed).map_err(config_error)?;
    let mut json = serde_json::to_string_pretty(&topo).expect("topology serializes");
    json.push('\n');
    match &args.out {
        Some(path) => std::fs::write(path, json).map_err(|e| io_error(path, e))?,
        None => print!("{json}"),
    }
    log::info!(
        "{} nodes, {} channels",
        topo.nodes.len(),
        topo.channels.len()
    );
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.topology)
        .map_err(|e| config_error(format!("{}: {e}", args.topology.display())))?;
    let topo: Topology = serde_json::from_str(&text).map_err(config_error)?;
    let graph = topo.validate().map_err(config_error)?;
    let (payer, payee) = (NodeId(args.payer), NodeId(args.payee));
    for id in [payer, payee] {
        if !topo.nodes.contains(&id) {
            return Err(config_error(format!("node {id} is not in the topology")));
        }
    }
    let fees: BTreeMap<NodeId, Msat> = match &args.fees {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(config_error)?
        }
        None => BTreeMap::new(),
    };
    let fee_of = |n: NodeId| match &args.fees {
        Some(_) => fees.get(&n).copied().unwrap_or(0),
        None => args.fee,
    };
    match (
        shortest_hops(&graph, payer, payee, args.amount),
        cheapest_fee(&graph, payer, payee, args.amount, fee_of),
    ) {
        (Some(hops), Some(fee)) => println!("hops {hops}\nfee {fee}"),
        _ => println!("unreachable"),
    }
    Ok(())
}
