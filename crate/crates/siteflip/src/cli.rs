//! Command line driver: measure, trace and analyze as thin sequential
//! wrappers over the library modules.
//!
//! Every command is reproducible: all randomness flows from `--seed`, runs
//! land in `runs/<run_id>/` with a manifest recording the exact inputs, and
//! equal seeds yield byte-identical logs and reports. Exit codes are 0 for
//! success, 1 for usage errors, 2 for runtime failures and 3 when a run
//! completed but the rate limiter withheld probes, so the data is partial.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::analysis::{self, AnalysisError, FlipReport};
use crate::fmt_opt;
use crate::hitlist::{self, TargetSet};
use crate::model::{Family, Prefix, Protocol, SiteId, VariedField};
use crate::orchestrator::{
    derive_run_id, gen_variations, write_manifest, MeasurementDef, OrchError, Orchestrator,
    DEFAULT_RUN_INTERVAL_NS, MEASUREMENT_EPOCH_NS,
};
use crate::prober::{self, ReplyRecord, VirtualClock, Worker, DEFAULT_PPS};
use crate::sim::{Perturbation, Sim, Topology};
use crate::traceroute::{self, TraceEngine};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

/// TTL rows probed when the path-length ping goes unanswered.
const FALLBACK_EST: u8 = 10;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

fn orch_err(e: OrchError) -> CliError {
    match e {
        OrchError::IllegalVariation { .. }
        | OrchError::DuplicateSite(_)
        | OrchError::UnknownSender(_)
        | OrchError::NoSenders
        | OrchError::NoWorkers
        | OrchError::BadDef(_)
        | OrchError::Model(_) => usage(e.to_string()),
        other => runtime(other.to_string()),
    }
}

fn analysis_err(e: AnalysisError) -> CliError {
    match e {
        AnalysisError::TooFewRuns(_) | AnalysisError::NoPortVariedRuns => usage(e.to_string()),
        other => runtime(other.to_string()),
    }
}

#[derive(Parser)]
#[command(
    name = "siteflip",
    version,
    about = "Measure, trace and analyze load-balancer-induced anycast site flipping"
)]
struct Cli {
    /// Flat key=value file supplying defaults for flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run flip measurements against a simulated deployment.
    Measure(MeasureArgs),
    /// Trace flow-varied paths and report where they fork.
    Trace(TraceArgs),
    /// Turn run logs into report tables and plot data.
    Analyze(AnalyzeArgs),
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    Protocol::from_str(s).map_err(|e| e.to_string())
}

fn parse_varied(s: &str) -> Result<VariedField, String> {
    VariedField::from_str(s).map_err(|e| e.to_string())
}

fn parse_prefix(s: &str) -> Result<Prefix, String> {
    Prefix::from_str(s).map_err(|e| e.to_string())
}

#[derive(Args)]
struct MeasureArgs {
    /// Topology file for the simulated backend.
    #[arg(long, value_name = "FILE")]
    sim: Option<PathBuf>,
    /// Probe protocol: icmp, tcp or udp.
    #[arg(long, value_parser = parse_protocol)]
    proto: Option<Protocol>,
    /// Varied header field: src-addr, src-port, dst-port, src-and-dst-port
    /// or all.
    #[arg(long, value_parser = parse_varied)]
    vary: Option<VariedField>,
    /// Master seed; equal seeds replay byte for byte.
    #[arg(long)]
    seed: Option<u64>,
    /// Measurement repetitions.
    #[arg(long)]
    runs: Option<u32>,
    /// Seconds between run starts.
    #[arg(long = "interval", value_name = "SECONDS")]
    interval_s: Option<u64>,
    /// Flow variations per target.
    #[arg(long)]
    k: Option<u8>,
    /// Comma-separated transmitting sites; default: every site.
    #[arg(long)]
    senders: Option<String>,
    /// Prefix probe sources are drawn from; default: the topology's.
    #[arg(long, value_parser = parse_prefix)]
    anycast: Option<Prefix>,
    /// Aggregation prefix length; default 24 for v4, 48 for v6.
    #[arg(long)]
    granularity: Option<u8>,
    /// Per-run probability that a flip-enabled route rotates.
    #[arg(long)]
    flip_prob: Option<f64>,
    /// Offered load gating load-threshold balancers.
    #[arg(long)]
    load_level: Option<f64>,
    /// Target list, one address per line; default: the topology's origins.
    #[arg(long, value_name = "FILE")]
    hitlist: Option<PathBuf>,
    /// Run directories land here.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    opt_out_url: Option<String>,
    /// Capture tail after each run's last wave, seconds.
    #[arg(long = "quiescence", value_name = "SECONDS")]
    quiescence_s: Option<u64>,
    /// Probes per second per sender.
    #[arg(long)]
    pps: Option<u64>,
}

#[derive(Args)]
struct TraceArgs {
    /// Topology file for the simulated backend.
    #[arg(long, value_name = "FILE")]
    sim: Option<PathBuf>,
    /// Address to trace toward.
    #[arg(long)]
    target: IpAddr,
    #[arg(long, value_parser = parse_protocol)]
    proto: Option<Protocol>,
    #[arg(long, value_parser = parse_varied)]
    vary: Option<VariedField>,
    /// Flow variations traced.
    #[arg(long)]
    k: Option<u8>,
    /// Client-node vantage; default when the target sits in the anycast
    /// prefix.
    #[arg(long, conflicts_with = "site")]
    client: Option<String>,
    /// Site vantage; default when the target is an ordinary host.
    #[arg(long)]
    site: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    flip_prob: Option<f64>,
    #[arg(long)]
    load_level: Option<f64>,
    /// Run directories land here.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// AS map resolving the divergent hop, format `prefix,asn,name`.
    #[arg(long, value_name = "FILE")]
    as_map: Option<PathBuf>,
    /// The probing client's own AS, for balancer attribution.
    #[arg(long)]
    client_as: Option<u32>,
    #[arg(long)]
    opt_out_url: Option<String>,
    #[arg(long)]
    pps: Option<u64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Report files land here; default: `reports` beside the first log.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    op: AnalyzeOp,
}

#[derive(Subcommand)]
enum AnalyzeOp {
    /// Responsive and flipped prefix counts of one run.
    Flips { log: PathBuf },
    /// Three-way split of two runs' flipped sets.
    Intersect { a: PathBuf, b: PathBuf },
    /// Layer classification: an IP-varied run against port-varied runs.
    Layers {
        ip_log: PathBuf,
        #[arg(required = true)]
        port_logs: Vec<PathBuf>,
    },
    /// Per-AS aggregation and flip-ratio CDF.
    As {
        log: PathBuf,
        /// AS map, format `prefix,asn,name`.
        #[arg(long, value_name = "FILE")]
        as_map: PathBuf,
        /// CDF ignores ASes with at most this many responsive prefixes.
        #[arg(long, default_value_t = 0)]
        min_responsive: u64,
        /// Prefix categories, format `prefix,residential|other`.
        #[arg(long, value_name = "FILE")]
        categories: Option<PathBuf>,
    },
    /// Flip persistence buckets across three or more runs.
    Consistency {
        #[arg(required = true, num_args = 3..)]
        logs: Vec<PathBuf>,
    },
    /// Overlap of flipped sets between two measurement epochs.
    Longevity { t0: PathBuf, t1: PathBuf },
    /// Per-prefix site latency spread and RTT-difference CDF.
    Latency { log: PathBuf },
    /// Flipped prefixes minus known anycast announcers.
    Multiclient {
        log: PathBuf,
        /// Exclusion list, one prefix per line.
        #[arg(long, value_name = "FILE")]
        exclusions: PathBuf,
    },
}

/// Parses argv and runs the selected command, returning the process exit
/// code. Kept callable in-process so determinism tests can run commands
/// without spawning.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let settings = match Settings::load(cli.config.as_deref()) {
        Ok(s) => s,
        Err(e) => return report(e),
    };
    let result = match cli.command {
        Cmd::Measure(a) => cmd_measure(a, &settings),
        Cmd::Trace(a) => cmd_trace(a, &settings),
        Cmd::Analyze(a) => cmd_analyze(a, &settings),
    };
    match result {
        Ok(code) => code,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> i32 {
    match e {
        CliError::Usage(msg) => {
            eprintln!("usage error: {msg}");
            EXIT_USAGE
        }
        CliError::Runtime(msg) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "anycast",
    "as_map",
    "categories",
    "exclusions",
    "flip_prob",
    "granularity",
    "hitlist",
    "interval_s",
    "k",
    "load_level",
    "min_responsive",
    "opt_out_url",
    "out",
    "pps",
    "proto",
    "quiescence_s",
    "runs",
    "seed",
    "senders",
    "sim",
    "sites",
    "vary",
];

/// Key=value config file, one pair per line, `#` comments allowed. Flags
/// override config values; config values override built-in defaults.
struct Settings {
    map: BTreeMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Settings, CliError> {
        let mut map = BTreeMap::new();
        let Some(path) = path else { return Ok(Settings { map }) };
        let text = fs::read_to_string(path)
            .map_err(|e| runtime(format!("reading config {}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(usage(format!(
                    "config {} line {}: expected key=value",
                    path.display(),
                    i + 1
                )));
            };
            let key = key.trim();
            if !CONFIG_KEYS.contains(&key) {
                return Err(usage(format!("config {}: unknown key {key:?}", path.display())));
            }
            map.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Settings { map })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.map.get(key) {
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("config key {key}: bad value {v:?}"))),
            None => Ok(None),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.map.get(key).map(PathBuf::from)
    }
}

/// Flag value, else config value, else nothing.
fn pick<T>(flag: Option<T>, config: Result<Option<T>, CliError>) -> Result<Option<T>, CliError> {
    Ok(flag.or(config?))
}

fn parse_site_list(list: &str) -> Result<Vec<SiteId>, CliError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| usage(format!("site {s:?}: {e}"))))
        .collect()
}

fn load_topology(
    flag: Option<PathBuf>,
    cfg: &Settings,
) -> Result<(Topology, PathBuf), CliError> {
    let path = flag
        .or_else(|| cfg.path("sim"))
        .ok_or_else(|| usage("no backend: pass --sim <topology file>"))?;
    let topo = Topology::load_file(&path)
        .map_err(|e| runtime(format!("loading {}: {e}", path.display())))?;
    Ok((topo, path))
}

fn write_file(path: &Path, r: std::io::Result<()>) -> Result<(), CliError> {
    r.map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

fn default_granularity(family: Family) -> u8 {
    match family {
        Family::V4 => 24,
        Family::V6 => 48,
    }
}

fn cmd_measure(args: MeasureArgs, cfg: &Settings) -> Result<i32, CliError> {
    let (topo, sim_path) = load_topology(args.sim, cfg)?;
    let proto = pick(args.proto, cfg.get("proto"))?.unwrap_or(Protocol::Icmp);
    let vary = pick(args.vary, cfg.get("vary"))?.unwrap_or(VariedField::SrcAddr);
    let seed = pick(args.seed, cfg.get("seed"))?.unwrap_or(0);
    let runs = pick(args.runs, cfg.get("runs"))?.unwrap_or(1);
    let interval_s =
        pick(args.interval_s, cfg.get("interval_s"))?.unwrap_or(DEFAULT_RUN_INTERVAL_NS / 1_000_000_000);
    let k = pick(args.k, cfg.get("k"))?.unwrap_or(5);
    let pps = pick(args.pps, cfg.get("pps"))?.unwrap_or(DEFAULT_PPS);
    let quiescence_s = pick(args.quiescence_s, cfg.get("quiescence_s"))?.unwrap_or(10);
    let flip_prob = pick(args.flip_prob, cfg.get("flip_prob"))?.unwrap_or(0.0);
    let load_level = pick(args.load_level, cfg.get("load_level"))?.unwrap_or(1.0);
    let opt_out_url = pick(args.opt_out_url, cfg.get("opt_out_url"))?
        .unwrap_or_else(|| "probe.example.net".to_string());
    let out = args.out.or_else(|| cfg.path("out")).unwrap_or_else(|| PathBuf::from("runs"));

    let anycast = pick(args.anycast, cfg.get("anycast"))?
        .or(topo.anycast)
        .ok_or_else(|| usage("topology declares no anycast prefix; pass --anycast"))?;
    let granularity = pick(args.granularity, cfg.get("granularity"))?
        .unwrap_or_else(|| default_granularity(anycast.family()));

    let sim = Sim::new(topo, Perturbation { route_flip_prob: flip_prob, load_level, seed });
    let topo = sim.topo();

    let sites = match cfg.get::<String>("sites")? {
        Some(list) => parse_site_list(&list)?,
        None => topo.sites.iter().map(|s| s.id.clone()).collect(),
    };
    let senders = match pick(args.senders, cfg.get::<String>("senders"))? {
        Some(list) => parse_site_list(&list)?,
        None => sites.clone(),
    };

    let hitlist = args.hitlist.or_else(|| cfg.path("hitlist"));
    let (targets, _) = match &hitlist {
        Some(path) => hitlist::load_targets(path, anycast.family(), granularity)
            .map_err(|e| runtime(format!("loading {}: {e}", path.display())))?,
        None => TargetSet::from_addrs(
            topo.origin_hosts().into_iter().map(|(_, addr)| addr),
            anycast.family(),
            granularity,
        ),
    };
    if targets.is_empty() {
        return Err(usage("no targets: hitlist empty or topology hosts no origins"));
    }

    let mut def = MeasurementDef::new(proto, vary, anycast, senders.clone());
    def.k = k;
    def.seed = seed;
    def.pps = pps;
    def.quiescence_ns = quiescence_s * 1_000_000_000;
    def.opt_out_url = opt_out_url.clone();
    def.validate().map_err(orch_err)?;

    let mut orch = Orchestrator::new();
    for site in &sites {
        let tap = sim.site_tap(site).map_err(|e| usage(e.to_string()))?;
        orch.attach(Worker::new(site.clone(), tap), senders.contains(site))
            .map_err(orch_err)?;
    }

    let outcomes = orch
        .run_repeated(&def, &targets, runs, interval_s * 1_000_000_000, |i| {
            sim.reseed_run(u64::from(i))
        })
        .map_err(orch_err)?;

    let mut partial = false;
    for (index, outcome) in outcomes.iter().enumerate() {
        let run_dir = out.join(outcome.run_id.to_string());
        let reports_dir = run_dir.join("reports");
        fs::create_dir_all(&reports_dir)
            .map_err(|e| runtime(format!("creating {}: {e}", reports_dir.display())))?;

        let mut manifest = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            manifest.insert(k.to_string(), v);
        };
        put("anycast", anycast.to_string());
        put("flip_prob", flip_prob.to_string());
        put("granularity", granularity.to_string());
        if let Some(path) = &hitlist {
            put("hitlist", path.display().to_string());
        }
        put("interval_s", interval_s.to_string());
        put("k", k.to_string());
        put("load_level", load_level.to_string());
        put("opt_out_url", opt_out_url.clone());
        put("pps", pps.to_string());
        put("proto", proto.as_str().to_string());
        put("quiescence_s", quiescence_s.to_string());
        put("run_id", outcome.run_id.to_string());
        put("run_index", index.to_string());
        put("runs", runs.to_string());
        put("seed", seed.to_string());
        put("senders", join(senders.iter()));
        put("sim", sim_path.display().to_string());
        put("sites", join(sites.iter()));
        put("targets", targets.len().to_string());
        put("vary", vary.as_str().to_string());
        let manifest_path = run_dir.join("manifest");
        write_file(&manifest_path, write_manifest(&manifest_path, &manifest))?;

        let log_path = run_dir.join("log.csv");
        prober::write_log(&log_path, &outcome.records).map_err(|e| runtime(e.to_string()))?;

        let flips = analysis::detect_flips(outcome.records.iter().cloned())
            .map_err(analysis_err)?;
        let rate_limited: u64 = outcome.stats.values().map(|s| s.rate_limited).sum();
        partial |= rate_limited > 0;
        println!(
            "run {}: targets={} responsive={} flipped={} flipped_pct={:.1}",
            outcome.run_id,
            targets.len(),
            flips.responsive_count(),
            flips.flipped_count(),
            flips.flipped_pct(),
        );
        if rate_limited > 0 {
            eprintln!("warning: run {}: {} probes rate limited", outcome.run_id, rate_limited);
        }
    }
    if partial {
        eprintln!("warning: logs are partial");
        return Ok(EXIT_PARTIAL);
    }
    Ok(EXIT_OK)
}

fn join<T: std::fmt::Display>(items: impl Iterator<Item = T>) -> String {
    items.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn cmd_trace(args: TraceArgs, cfg: &Settings) -> Result<i32, CliError> {
    let (topo, sim_path) = load_topology(args.sim, cfg)?;
    let proto = pick(args.proto, cfg.get("proto"))?.unwrap_or(Protocol::Icmp);
    let vary = pick(args.vary, cfg.get("vary"))?.unwrap_or(VariedField::SrcAddr);
    let k = pick(args.k, cfg.get("k"))?.unwrap_or(5);
    let seed = pick(args.seed, cfg.get("seed"))?.unwrap_or(0);
    let flip_prob = pick(args.flip_prob, cfg.get("flip_prob"))?.unwrap_or(0.0);
    let load_level = pick(args.load_level, cfg.get("load_level"))?.unwrap_or(1.0);
    let pps = pick(args.pps, cfg.get("pps"))?.unwrap_or(DEFAULT_PPS);
    let opt_out_url = pick(args.opt_out_url, cfg.get("opt_out_url"))?
        .unwrap_or_else(|| "probe.example.net".to_string());
    let out = args.out.or_else(|| cfg.path("out")).unwrap_or_else(|| PathBuf::from("runs"));
    let target = args.target;

    let sim = Sim::new(topo, Perturbation { route_flip_prob: flip_prob, load_level, seed });
    let topo = sim.topo();
    let in_anycast = topo.anycast.is_some_and(|p| p.contains(target));

    // Vantage: explicit flags win; otherwise anycast targets are traced
    // from the client side and host targets from the first site.
    enum Vantage {
        Site(SiteId),
        Client(String),
    }
    let vantage = if let Some(site) = &args.site {
        Vantage::Site(site.parse().map_err(|e| usage(format!("site {site:?}: {e}")))?)
    } else if let Some(client) = args.client {
        Vantage::Client(client)
    } else if in_anycast {
        let origin = topo
            .origins
            .first()
            .ok_or_else(|| usage("topology has no client origins; pass --site"))?;
        Vantage::Client(topo.nodes[origin.node].name.clone())
    } else {
        let site = topo.sites.first().ok_or_else(|| usage("topology has no sites"))?;
        Vantage::Site(site.id.clone())
    };

    // Sources come from the vantage's own prefix so answers route back.
    let src_prefix = match &vantage {
        Vantage::Site(_) => topo
            .anycast
            .ok_or_else(|| usage("topology declares no anycast prefix to source from"))?,
        Vantage::Client(node) => {
            topo.origins
                .iter()
                .find(|o| topo.nodes[o.node].name == *node)
                .ok_or_else(|| usage(format!("node {node:?} hosts no origin prefix")))?
                .prefix
        }
    };

    let mut def = MeasurementDef::new(proto, vary, src_prefix, Vec::new());
    def.k = k;
    let flows = gen_variations(&def, target).map_err(orch_err)?;

    let run_id = derive_run_id(seed, 0);
    let clock = VirtualClock::new(MEASUREMENT_EPOCH_NS, pps);
    let mut eng = match &vantage {
        Vantage::Site(site) => {
            let tap = sim.site_tap(site).map_err(|e| usage(e.to_string()))?;
            let mut eng = TraceEngine::new(tap, Some(site.clone()), run_id, clock);
            for other in &topo.sites {
                if other.id != *site {
                    let tap = sim.site_tap(&other.id).map_err(|e| usage(e.to_string()))?;
                    eng.add_capture(other.id.clone(), tap);
                }
            }
            eng
        }
        Vantage::Client(node) => {
            let tap = sim.client_tap(node).map_err(|e| usage(e.to_string()))?;
            TraceEngine::new(tap, None, run_id, clock)
        }
    };
    eng.set_opt_out_url(opt_out_url.clone());

    let est = match eng.ping_estimate(flows[0]).map_err(|e| runtime(e.to_string()))? {
        Some(est) => est,
        None => {
            println!("no reply from {target}; probing {FALLBACK_EST} TTLs blind");
            FALLBACK_EST
        }
    };

    let mut traces = Vec::new();
    for &flow in &flows {
        let path = eng.trace(flow, est).map_err(|e| runtime(e.to_string()))?;
        println!(
            "flow src={} src_port={} dst_port={}: answered={}/{} dest_reached={}",
            flow.src,
            flow.src_port,
            flow.dst_port,
            path.hops.iter().filter(|h| h.addr.is_some()).count(),
            path.hops.len(),
            path.dest_reached,
        );
        traces.push(path);
    }

    let run_dir = out.join(run_id.to_string());
    fs::create_dir_all(&run_dir)
        .map_err(|e| runtime(format!("creating {}: {e}", run_dir.display())))?;
    let mut manifest = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        manifest.insert(k.to_string(), v);
    };
    put("est", est.to_string());
    put("flip_prob", flip_prob.to_string());
    put("k", k.to_string());
    put("load_level", load_level.to_string());
    put("opt_out_url", opt_out_url);
    put("pps", pps.to_string());
    put("proto", proto.as_str().to_string());
    put("run_id", run_id.to_string());
    put("seed", seed.to_string());
    put("sim", sim_path.display().to_string());
    put("target", target.to_string());
    put(
        "vantage",
        match &vantage {
            Vantage::Site(site) => format!("site:{site}"),
            Vantage::Client(node) => format!("client:{node}"),
        },
    );
    put("vary", vary.as_str().to_string());
    let manifest_path = run_dir.join("manifest");
    write_file(&manifest_path, write_manifest(&manifest_path, &manifest))?;
    let trace_path = run_dir.join("trace.csv");
    write_file(&trace_path, traceroute::write_trace_log(&trace_path, &traces))?;

    match traceroute::find_divergence(&traces) {
        Some(div) => println!(
            "divergence ttl={} hops={} sites={}",
            div.ttl,
            join(div.hop_addrs.iter()),
            join(div.rx_sites.iter()),
        ),
        None => println!("no divergence"),
    }
    if let (Some(map_path), Some(client_as)) = (&args.as_map, args.client_as) {
        let (as_map, _) = hitlist::load_as_map(map_path)
            .map_err(|e| runtime(format!("loading {}: {e}", map_path.display())))?;
        let loc = traceroute::locate_lb(&traces, &[], &as_map, client_as);
        println!(
            "lb class={} direction={} hop={} as={}",
            loc.class.as_str(),
            loc.direction.as_str(),
            fmt_opt(&loc.divergent_hop),
            loc.hop_as,
        );
    }
    Ok(EXIT_OK)
}

fn read_records(path: &Path) -> Result<Vec<ReplyRecord>, CliError> {
    prober::read_log(path)
        .and_then(|reader| reader.collect())
        .map_err(|e| runtime(e.to_string()))
}

fn load_flips(path: &Path) -> Result<FlipReport, CliError> {
    analysis::detect_flips(read_records(path)?).map_err(analysis_err)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

fn cmd_analyze(args: AnalyzeArgs, cfg: &Settings) -> Result<i32, CliError> {
    let first_input = match &args.op {
        AnalyzeOp::Flips { log }
        | AnalyzeOp::As { log, .. }
        | AnalyzeOp::Latency { log }
        | AnalyzeOp::Multiclient { log, .. } => log.clone(),
        AnalyzeOp::Intersect { a, .. } => a.clone(),
        AnalyzeOp::Layers { ip_log, .. } => ip_log.clone(),
        AnalyzeOp::Consistency { logs } => logs[0].clone(),
        AnalyzeOp::Longevity { t0, .. } => t0.clone(),
    };
    let out = args
        .out
        .or_else(|| cfg.path("out"))
        .unwrap_or_else(|| first_input.parent().unwrap_or(Path::new(".")).join("reports"));
    fs::create_dir_all(&out).map_err(|e| runtime(format!("creating {}: {e}", out.display())))?;

    match args.op {
        AnalyzeOp::Flips { log } => {
            let flips = load_flips(&log)?;
            let table = out.join("flips.csv");
            write_file(&table, analysis::write_flip_table(&table, &[(&stem(&log), &flips)]))?;
            println!(
                "responsive={} flipped={} flipped_pct={:.1}",
                flips.responsive_count(),
                flips.flipped_count(),
                flips.flipped_pct(),
            );
        }
        AnalyzeOp::Intersect { a, b } => {
            let (ra, rb) = (load_flips(&a)?, load_flips(&b)?);
            let split = analysis::intersect_runs(&ra, &rb).map_err(analysis_err)?;
            let (la, lb) = (stem(&a), stem(&b));
            let table = out.join("intersect.csv");
            write_file(&table, analysis::write_intersection(&table, &la, &lb, &split))?;
            println!(
                "only_{la}={} only_{lb}={} both={}",
                split.only_a.len(),
                split.only_b.len(),
                split.both.len(),
            );
        }
        AnalyzeOp::Layers { ip_log, port_logs } => {
            let ip = load_flips(&ip_log)?;
            let ports = port_logs.iter().map(|p| load_flips(p)).collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&FlipReport> = ports.iter().collect();
            let layers = analysis::classify_layers(&ip, &refs).map_err(analysis_err)?;
            let table = out.join("layers.csv");
            write_file(&table, analysis::write_layer_table(&table, &layers))?;
            let c = layers.counts();
            println!(
                "universe={} l3_only={} l4_only={} both={} none={}",
                layers.universe_count(),
                c.l3_only,
                c.l4_only,
                c.both,
                c.none,
            );
        }
        AnalyzeOp::As { log, as_map, min_responsive, categories } => {
            let flips = load_flips(&log)?;
            let (map, _) = hitlist::load_as_map(&as_map)
                .map_err(|e| runtime(format!("loading {}: {e}", as_map.display())))?;
            let agg = analysis::aggregate_as(&flips, &map);
            let table = out.join("as.csv");
            write_file(&table, analysis::write_as_table(&table, &agg))?;
            let cdf_path = out.join("as_ratio_cdf.csv");
            let cdf = analysis::ratio_cdf(&agg, min_responsive);
            write_file(&cdf_path, analysis::write_cdf(&cdf_path, &cdf))?;
            let mapped = agg.per_as.keys().filter(|&&asn| asn != 0).count();
            println!("ases={mapped}");
            if let Some(cat_path) = categories {
                let (table, _) = hitlist::load_categories(&cat_path)
                    .map_err(|e| runtime(format!("loading {}: {e}", cat_path.display())))?;
                println!(
                    "residential_share={:.1}",
                    analysis::residential_share(&flips, &table)
                );
            }
        }
        AnalyzeOp::Consistency { logs } => {
            let reports = logs.iter().map(|p| load_flips(p)).collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&FlipReport> = reports.iter().collect();
            let consistency = analysis::classify_consistency(&refs).map_err(analysis_err)?;
            let table = out.join("consistency.csv");
            write_file(&table, analysis::write_consistency_table(&table, &consistency))?;
            let shares = consistency.shares();
            println!(
                "persistent={:.1} load_dependent={:.1} transient={:.1}",
                shares[0].1, shares[1].1, shares[2].1,
            );
        }
        AnalyzeOp::Longevity { t0, t1 } => {
            let (r0, r1) = (load_flips(&t0)?, load_flips(&t1)?);
            let lg = analysis::longevity(&r0, &r1);
            let table = out.join("longevity.csv");
            let body = format!(
                "metric,value\nflipped_t0,{}\nflipped_t1,{}\npersisting,{}\nshare_of_t0_pct,{:.1}\n",
                lg.flipped_t0,
                lg.flipped_t1,
                lg.persisting,
                lg.share_of_t0_pct(),
            );
            write_file(&table, fs::write(&table, body))?;
            println!(
                "flipped_t0={} flipped_t1={} persisting={} share_of_t0={:.1}",
                lg.flipped_t0,
                lg.flipped_t1,
                lg.persisting,
                lg.share_of_t0_pct(),
            );
        }
        AnalyzeOp::Latency { log } => {
            let latency = analysis::latency_stats(read_records(&log)?).map_err(analysis_err)?;
            let table = out.join("latency.csv");
            write_file(&table, analysis::write_latency_table(&table, &latency))?;
            let cdf_path = out.join("latency_rtt_diff_cdf.csv");
            let cdf: Vec<(f64, f64)> =
                latency.rtt_diff_cdf().into_iter().map(|(x, y)| (x as f64, y)).collect();
            write_file(&cdf_path, analysis::write_cdf(&cdf_path, &cdf))?;
            println!(
                "mean_min={:.1} mean_max={:.1} rtt_diff={:.1}",
                latency.mean_min_ms(),
                latency.mean_max_ms(),
                latency.mean_rtt_diff_ms(),
            );
        }
        AnalyzeOp::Multiclient { log, exclusions } => {
            let flips = load_flips(&log)?;
            let (excl, _) = hitlist::load_exclusions(&exclusions)
                .map_err(|e| runtime(format!("loading {}: {e}", exclusions.display())))?;
            let remaining = analysis::multi_client_filter(&flips, &excl);
            let table = out.join("multiclient.csv");
            let mut body = String::from("prefix\n");
            for p in &remaining {
                body.push_str(&p.to_string());
                body.push('\n');
            }
            write_file(&table, fs::write(&table, body))?;
            println!(
                "flipped={} excluded={} remaining={}",
                flips.flipped_count(),
                flips.flipped_count() - remaining.len() as u64,
                remaining.len(),
            );
        }
    }
    Ok(EXIT_OK)
}
