//! Measurement workers: probe transmission, capture, and correlation at one
//! vantage point.
//!
//! A worker lives at one anycast site. Senders stamp each probe with a
//! paced clock and push it through the packet channel; every worker,
//! sender or not, captures whatever its site attracts and resolves it
//! against a correlation table that the orchestrator preloads before any
//! probe flies. Preloading is what makes cross-site correlation work: the
//! site that receives a reply is usually not the site that sent the probe,
//! and it cannot see the sender's state.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::net::IpAddr;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Prefix, Protocol, SiteId};
use crate::wire::{self, ProbeSpec, ReplyKind};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
    #[error("packet channel closed")]
    Closed,
}

/// Transport boundary between workers and the network. A production build
/// would back this with raw sockets and pcap; tests and simulations use an
/// in-process implementation. Timestamps are nanoseconds on whatever clock
/// drives the run, so a virtual clock works as well as a wall clock.
pub trait PacketChannel: Send {
    /// Injects one packet at the given transmit timestamp.
    fn send(&self, packet: &[u8], tx_time_ns: u64) -> Result<(), ChannelError>;

    /// Pops the next captured packet and its receive timestamp, if any is
    /// queued at this vantage.
    fn recv(&self) -> Option<(Vec<u8>, u64)>;
}

/// Deterministic measurement clock. Probes are paced, not timed: each tick
/// hands out the current instant and advances by the inter-probe gap, so a
/// whole run's timestamps are a pure function of start time and rate.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    now_ns: u64,
    step_ns: u64,
}

/// Probes per second across a sender. The cap exists to stay polite to
/// transit networks, independent of the per-target budget.
pub const DEFAULT_PPS: u64 = 1000;

impl VirtualClock {
    pub fn new(start_ns: u64, pps: u64) -> Self {
        assert!(pps > 0);
        VirtualClock { now_ns: start_ns, step_ns: 1_000_000_000 / pps }
    }

    pub fn now(&self) -> u64 {
        self.now_ns
    }

    /// Current instant, then advance one inter-probe gap.
    pub fn tick(&mut self) -> u64 {
        let t = self.now_ns;
        self.now_ns += self.step_ns;
        t
    }

    pub fn advance(&mut self, delta_ns: u64) {
        self.now_ns += delta_ns;
    }
}

/// Every target keeps a hard probe budget per sliding hour so that repeated
/// and overlapping runs can never concentrate on one host. The window is
/// half-open `(now - window, now]`: a probe sent exactly one window ago no
/// longer counts against the budget.
pub struct RateLimiter {
    window_ns: u64,
    max_per_window: usize,
    state: Mutex<RateState>,
}

struct RateState {
    sent: HashMap<IpAddr, VecDeque<u64>>,
    audit: Vec<AuditEntry>,
}

/// One admission decision, in decision order. The audit log exists so a
/// serial replay can re-derive every decision and catch races.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditEntry {
    pub target: IpAddr,
    pub time_ns: u64,
    pub admitted: bool,
}

pub const PROBE_BUDGET_PER_HOUR: usize = 15;
pub const BUDGET_WINDOW_NS: u64 = 3600 * 1_000_000_000;

impl RateLimiter {
    pub fn new(window_ns: u64, max_per_window: usize) -> Self {
        RateLimiter {
            window_ns,
            max_per_window,
            state: Mutex::new(RateState { sent: HashMap::new(), audit: Vec::new() }),
        }
    }

    pub fn hourly() -> Self {
        RateLimiter::new(BUDGET_WINDOW_NS, PROBE_BUDGET_PER_HOUR)
    }

    /// Admits and records in one step, so two concurrent senders cannot both
    /// sneak past a nearly-full budget.
    pub fn try_admit(&self, target: IpAddr, now_ns: u64) -> bool {
        let mut st = self.state.lock().unwrap();
        let q = st.sent.entry(target).or_default();
        // Half-open window: drop entries at or before now - window. Checked
        // subtraction keeps a t=0 entry alive while now is still inside the
        // first window.
        if let Some(cutoff) = now_ns.checked_sub(self.window_ns) {
            while q.front().is_some_and(|&t| t <= cutoff) {
                q.pop_front();
            }
        }
        let admitted = q.len() < self.max_per_window;
        if admitted {
            q.push_back(now_ns);
        }
        st.audit.push(AuditEntry { target, time_ns: now_ns, admitted });
        admitted
    }

    pub fn audit_log(&self) -> Vec<AuditEntry> {
        self.state.lock().unwrap().audit.clone()
    }
}

/// What the orchestrator preloads at every worker before a wave flies:
/// enough to resolve any reply shape back to its probe. Keyed by the probe
/// direction flow, which every reply kind reveals (replies by inversion,
/// hop errors by the quoted header).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedProbe {
    pub run_id: u32,
    pub variation_id: u8,
    pub protocol: Protocol,
    pub target: IpAddr,
    pub target_prefix: Prefix,
    pub src: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub tx_site: SiteId,
    pub tx_time_ns: u64,
}

type FlowKey = (IpAddr, IpAddr, u16, u16);

#[derive(Default)]
pub struct CorrelationTable {
    by_flow: HashMap<FlowKey, PlannedProbe>,
}

impl CorrelationTable {
    pub fn preload(&mut self, entries: &[PlannedProbe]) {
        for e in entries {
            let key = (e.target, e.src, e.src_port, e.dst_port);
            self.by_flow.insert(key, e.clone());
        }
    }

    pub fn len(&self) -> usize {
        self.by_flow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_flow.is_empty()
    }

    /// Resolves a parsed capture to its planned probe. The flow echo of a
    /// direct reply points backwards (src is the target); a quoted error
    /// points forwards (dst is the target).
    pub fn resolve(&self, parsed: &wire::ParsedReply) -> Option<&PlannedProbe> {
        let f = &parsed.flow_echo;
        let key = match parsed.kind {
            ReplyKind::EchoReply | ReplyKind::TcpRst | ReplyKind::DnsResponse => {
                (f.src, f.dst, f.dst_port, f.src_port)
            }
            ReplyKind::TimeExceeded | ReplyKind::Discarded => {
                (f.dst, f.src, f.src_port, f.dst_port)
            }
        };
        self.by_flow.get(&key)
    }
}

/// Reply log row classification. Hop errors of both flavors (TTL expiry and
/// destination unreachable) land in the non-reply class; responsiveness and
/// flip decisions count only proper replies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Reply,
    TimeExceeded,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Reply => "reply",
            RecordKind::TimeExceeded => "time_exceeded",
        }
    }
}

impl std::str::FromStr for RecordKind {
    type Err = RecordError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reply" => Ok(RecordKind::Reply),
            "time_exceeded" => Ok(RecordKind::TimeExceeded),
            _ => Err(RecordError::Field("kind", s.into())),
        }
    }
}

/// One resolved capture: the atom every analysis consumes. Serializes to
/// one CSV row with a fixed column order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplyRecord {
    pub run_id: u32,
    pub protocol: Protocol,
    pub target_addr: IpAddr,
    pub target_prefix: Prefix,
    pub variation_id: u8,
    pub src_addr: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub tx_site: SiteId,
    pub rx_site: SiteId,
    pub tx_time_ns: u64,
    pub rx_time_ns: u64,
    pub reply_ttl: u8,
    pub kind: RecordKind,
    pub hop_addr: Option<IpAddr>,
}

pub const LOG_HEADER: &str = "run_id,protocol,target_addr,target_prefix,variation_id,\
src_addr,src_port,dst_port,tx_site,rx_site,tx_time_ns,rx_time_ns,reply_ttl,kind,hop_addr";

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("log line has {0} fields, expected 15")]
    FieldCount(usize),
    #[error("bad {0} field: {1:?}")]
    Field(&'static str, String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: missing or wrong header")]
    Header { path: String },
    #[error("{path} line {line}: {source}")]
    Line {
        path: String,
        line: u64,
        #[source]
        source: Box<RecordError>,
    },
}

impl ReplyRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.protocol.as_str(),
            self.target_addr,
            self.target_prefix,
            self.variation_id,
            self.src_addr,
            self.src_port,
            self.dst_port,
            self.tx_site,
            self.rx_site,
            self.tx_time_ns,
            self.rx_time_ns,
            self.reply_ttl,
            self.kind.as_str(),
            self.hop_addr.map(|a| a.to_string()).unwrap_or_default(),
        )
    }

    pub fn from_csv_row(line: &str) -> Result<ReplyRecord, RecordError> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 15 {
            return Err(RecordError::FieldCount(f.len()));
        }
        fn parse<T: std::str::FromStr>(s: &str, name: &'static str) -> Result<T, RecordError> {
            s.parse().map_err(|_| RecordError::Field(name, s.into()))
        }
        Ok(ReplyRecord {
            run_id: parse(f[0], "run_id")?,
            protocol: parse(f[1], "protocol")?,
            target_addr: parse(f[2], "target_addr")?,
            target_prefix: parse(f[3], "target_prefix")?,
            variation_id: parse(f[4], "variation_id")?,
            src_addr: parse(f[5], "src_addr")?,
            src_port: parse(f[6], "src_port")?,
            dst_port: parse(f[7], "dst_port")?,
            tx_site: parse(f[8], "tx_site")?,
            rx_site: parse(f[9], "rx_site")?,
            tx_time_ns: parse(f[10], "tx_time_ns")?,
            rx_time_ns: parse(f[11], "rx_time_ns")?,
            reply_ttl: parse(f[12], "reply_ttl")?,
            kind: parse(f[13], "kind")?,
            hop_addr: if f[14].is_empty() { None } else { Some(parse(f[14], "hop_addr")?) },
        })
    }

    /// Total order every merged log is sorted by, so equal measurements
    /// serialize byte-identically regardless of capture interleaving.
    pub fn canonical_key(
        &self,
    ) -> (u32, Prefix, IpAddr, u8, SiteId, RecordKind, SiteId, u64) {
        (
            self.run_id,
            self.target_prefix,
            self.target_addr,
            self.variation_id,
            self.rx_site.clone(),
            self.kind,
            self.tx_site.clone(),
            self.rx_time_ns,
        )
    }
}

pub fn write_log(path: &Path, records: &[ReplyRecord]) -> Result<(), RecordError> {
    let io_err = |source| RecordError::Io { path: path.display().to_string(), source };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let io_err = |source| RecordError::Io { path: path.display().to_string(), source };
    writeln!(out, "{LOG_HEADER}").map_err(io_err)?;
    for r in records {
        writeln!(out, "{}", r.to_csv_row()).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Streaming reader; logs can hold millions of rows, so analyses iterate
/// instead of slurping.
pub fn read_log(path: &Path) -> Result<LogReader, RecordError> {
    let file = std::fs::File::open(path).map_err(|source| RecordError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h == LOG_HEADER => {}
        _ => return Err(RecordError::Header { path: path.display().to_string() }),
    }
    Ok(LogReader { lines, path: path.display().to_string(), line: 1 })
}

pub struct LogReader {
    lines: std::io::Lines<BufReader<std::fs::File>>,
    path: String,
    /// Physical line just consumed; the header was line 1.
    line: u64,
}

impl Iterator for LogReader {
    type Item = Result<ReplyRecord, RecordError>;
    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let next = self.lines.next()?;
            self.line += 1;
            match next {
                Ok(line) if line.is_empty() => continue,
                Ok(line) => {
                    return Some(ReplyRecord::from_csv_row(&line).map_err(|source| {
                        RecordError::Line {
                            path: self.path.clone(),
                            line: self.line,
                            source: Box::new(source),
                        }
                    }))
                }
                Err(source) => {
                    return Some(Err(RecordError::Io { path: self.path.clone(), source }))
                }
            }
        }
    }
}

/// Counters a worker reports at the end of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerStats {
    /// Probes handed to the channel.
    pub sent: u64,
    /// Probes withheld by the per-target budget.
    pub rate_limited: u64,
    /// Captures that parsed but matched no preloaded probe.
    pub unresolved: u64,
    /// Captures that did not parse as probe or reply at all.
    pub discarded: u64,
}

/// One measurement vantage. Senders also capture; capture-only workers
/// simply never get a wave.
pub struct Worker<C: PacketChannel> {
    site: SiteId,
    channel: C,
    correlation: CorrelationTable,
    limiter: RateLimiter,
    stats: WorkerStats,
}

impl<C: PacketChannel> Worker<C> {
    pub fn new(site: SiteId, channel: C) -> Self {
        Worker {
            site,
            channel,
            correlation: CorrelationTable::default(),
            limiter: RateLimiter::hourly(),
            stats: WorkerStats::default(),
        }
    }

    pub fn site(&self) -> &SiteId {
        &self.site
    }

    pub fn stats(&self) -> WorkerStats {
        self.stats
    }

    pub fn audit_log(&self) -> Vec<AuditEntry> {
        self.limiter.audit_log()
    }

    pub fn preload(&mut self, entries: &[PlannedProbe]) {
        self.correlation.preload(entries);
    }

    /// Builds and transmits one planned wave. Transmit times come stamped in
    /// the plan (assigned at planning so receivers hold them before anything
    /// flies); the per-target budget is still checked per probe, at its
    /// stamped time, and losers simply never fly.
    pub fn send_wave(
        &mut self,
        plan: &[PlannedProbe],
        opt_out_url: &str,
        ttl: u8,
    ) -> Result<(), wire::WireError> {
        for p in plan {
            if !self.limiter.try_admit(p.target, p.tx_time_ns) {
                self.stats.rate_limited += 1;
                continue;
            }
            let spec = ProbeSpec {
                flow: crate::model::FlowTuple {
                    src: p.src,
                    dst: p.target,
                    protocol: p.protocol,
                    src_port: p.src_port,
                    dst_port: p.dst_port,
                },
                run_id: p.run_id,
                variation_id: p.variation_id,
                tx_time: p.tx_time_ns,
                ttl,
                opt_out_url: opt_out_url.to_string(),
            };
            let packet = wire::build_probe(&spec)?;
            if self.channel.send(&packet, p.tx_time_ns).is_ok() {
                self.stats.sent += 1;
            }
        }
        Ok(())
    }

    /// Drains the capture queue and resolves everything it can.
    pub fn collect(&mut self) -> Vec<ReplyRecord> {
        let mut out = Vec::new();
        while let Some((bytes, rx_time)) = self.channel.recv() {
            let Some(family) = wire::sniff_family(&bytes) else {
                self.stats.discarded += 1;
                continue;
            };
            let Some(parsed) = wire::parse_reply(&bytes, family) else {
                self.stats.discarded += 1;
                continue;
            };
            let Some(planned) = self.correlation.resolve(&parsed) else {
                self.stats.unresolved += 1;
                continue;
            };
            let kind = match parsed.kind {
                ReplyKind::EchoReply | ReplyKind::TcpRst | ReplyKind::DnsResponse => {
                    RecordKind::Reply
                }
                ReplyKind::TimeExceeded | ReplyKind::Discarded => RecordKind::TimeExceeded,
            };
            out.push(ReplyRecord {
                run_id: planned.run_id,
                protocol: planned.protocol,
                target_addr: planned.target,
                target_prefix: planned.target_prefix,
                variation_id: planned.variation_id,
                src_addr: planned.src,
                src_port: planned.src_port,
                dst_port: planned.dst_port,
                tx_site: planned.tx_site.clone(),
                rx_site: self.site.clone(),
                tx_time_ns: planned.tx_time_ns,
                rx_time_ns: rx_time,
                reply_ttl: parsed.reply_ttl,
                kind,
                hop_addr: parsed.hop_addr,
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FlowTuple;
    use crate::sim::{topo::chain_topology, Perturbation, Sim};

    const HOUR: u64 = BUDGET_WINDOW_NS;

    fn tgt(n: u8) -> IpAddr {
        format!("10.50.0.{n}").parse().unwrap()
    }

    #[test]
    fn budget_caps_and_window_slides() {
        let rl = RateLimiter::hourly();
        let t0 = 1_000_000 * HOUR;
        // one probe every 4 minutes fills the 15-probe budget in an hour
        for i in 0..15u64 {
            assert!(rl.try_admit(tgt(1), t0 + i * 240_000_000_000), "probe {i}");
        }
        assert!(!rl.try_admit(tgt(1), t0 + 3_500_000_000_000), "16th within the hour");
        // other targets have their own budget
        assert!(rl.try_admit(tgt(2), t0 + 3_500_000_000_000));
        // exactly one window after the first probe, it falls out (half-open)
        assert!(rl.try_admit(tgt(1), t0 + HOUR));
        // now full again until the second probe expires
        assert!(!rl.try_admit(tgt(1), t0 + HOUR + 1));
        assert!(rl.try_admit(tgt(1), t0 + 240_000_000_000 + HOUR));

        let audit = rl.audit_log();
        assert_eq!(audit.len(), 20);
        assert_eq!(audit.iter().filter(|e| !e.admitted).count(), 2);
        // decision order is preserved for serial replay
        assert!(audit.windows(2).all(|w| w[0].time_ns <= w[1].time_ns
            || w[0].target != w[1].target
            || w[1].target == tgt(2)));
    }

    #[test]
    fn sixteen_admissions_span_at_least_one_window() {
        let rl = RateLimiter::hourly();
        let mut admitted = Vec::new();
        let mut t = 77_000_000_000u64;
        // hammer one target far faster than the budget allows
        for i in 0..20_000u64 {
            t += 7_000_000_000 + (i % 13) * 1_000_000_000;
            if rl.try_admit(tgt(9), t) {
                admitted.push(t);
            }
        }
        assert!(admitted.len() > 30, "several windows elapsed");
        for w in admitted.windows(16) {
            assert!(w[15] - w[0] >= HOUR, "16 admits inside one window");
        }
    }

    #[test]
    fn clock_paces_at_configured_rate() {
        let mut c = VirtualClock::new(5_000, 1000);
        assert_eq!(c.tick(), 5_000);
        assert_eq!(c.tick(), 1_005_000);
        c.advance(10);
        assert_eq!(c.now(), 2_005_010);
    }

    fn planned(proto: Protocol, src: &str, sport: u16, dport: u16, var: u8) -> PlannedProbe {
        PlannedProbe {
            run_id: 42,
            variation_id: var,
            protocol: proto,
            target: "10.50.0.1".parse().unwrap(),
            target_prefix: "10.50.0.0/24".parse().unwrap(),
            src: src.parse().unwrap(),
            src_port: sport,
            dst_port: dport,
            tx_site: "AMS".parse().unwrap(),
            tx_time_ns: 0,
        }
    }

    #[test]
    fn wave_through_simulator_round_trips_all_fields() {
        let sim = Sim::new(chain_topology(3), Perturbation::none());
        let site: SiteId = "AMS".parse().unwrap();
        let mut w = Worker::new(site.clone(), sim.site_tap(&site).unwrap());
        let mut clock = VirtualClock::new(1_000_000_000, DEFAULT_PPS);
        let plan: Vec<PlannedProbe> = (0..5)
            .map(|i| {
                let mut p = planned(Protocol::Tcp, "198.51.100.1", 62000 + i as u16, 80, i);
                p.tx_time_ns = clock.tick();
                p
            })
            .collect();
        w.preload(&plan);
        w.send_wave(&plan, "probe.example.net", 64).unwrap();
        let records = w.collect();
        assert_eq!(records.len(), 5);
        assert_eq!(w.stats().sent, 5);
        assert_eq!(w.stats().unresolved, 0);
        for (i, r) in records.iter().enumerate() {
            assert_eq!(r.kind, RecordKind::Reply);
            assert_eq!(r.variation_id, i as u8);
            assert_eq!(r.src_port, 62000 + i as u16);
            assert_eq!(r.tx_site, r.rx_site);
            assert_eq!(r.tx_time_ns, 1_000_000_000 + i as u64 * 1_000_000);
            assert_eq!(r.rx_time_ns - r.tx_time_ns, 60_000_000, "three 10 ms links each way");
            assert_eq!(r.reply_ttl, 61);
            assert_eq!(r.hop_addr, None);
        }
    }

    #[test]
    fn unplanned_captures_count_unresolved() {
        let sim = Sim::new(chain_topology(2), Perturbation::none());
        let site: SiteId = "AMS".parse().unwrap();
        let mut w = Worker::new(site.clone(), sim.site_tap(&site).unwrap());
        let plan = vec![planned(Protocol::Icmp, "198.51.100.1", 0, 0, 0)];
        w.send_wave(&plan, "probe.example.net", 64).unwrap();
        // no preload: the reply arrives but cannot be attributed
        assert!(w.collect().is_empty());
        assert_eq!(w.stats().unresolved, 1);
    }

    #[test]
    fn rate_limited_probes_never_fly() {
        let sim = Sim::new(chain_topology(2), Perturbation::none());
        let site: SiteId = "AMS".parse().unwrap();
        let mut w = Worker::new(site.clone(), sim.site_tap(&site).unwrap());
        let mut clock = VirtualClock::new(0, DEFAULT_PPS);
        let plan: Vec<PlannedProbe> = (0..20)
            .map(|i| {
                let mut p = planned(Protocol::Tcp, "198.51.100.1", 62000 + i as u16, 80, i);
                p.tx_time_ns = clock.tick();
                p
            })
            .collect();
        w.send_wave(&plan, "probe.example.net", 64).unwrap();
        w.preload(&plan);
        assert_eq!(w.stats().sent, 15);
        assert_eq!(w.stats().rate_limited, 5);
        assert_eq!(w.collect().len(), 15);
    }

    #[test]
    fn correlation_resolves_error_quotes_to_probe_direction() {
        let mut table = CorrelationTable::default();
        let p = planned(Protocol::Tcp, "198.51.100.2", 62003, 80, 3);
        table.preload(std::slice::from_ref(&p));

        // a quoted error carries the probe direction flow
        let parsed = wire::ParsedReply {
            kind: ReplyKind::TimeExceeded,
            flow_echo: FlowTuple {
                src: "198.51.100.2".parse().unwrap(),
                dst: "10.50.0.1".parse().unwrap(),
                protocol: Protocol::Tcp,
                src_port: 62003,
                dst_port: 80,
            },
            reply_ttl: 61,
            embedded: None,
            hop_addr: Some("10.30.0.1".parse().unwrap()),
            quote_selector: Some(0),
        };
        assert_eq!(table.resolve(&parsed), Some(&p));

        // the direct reply to the same probe resolves too
        let parsed = wire::ParsedReply {
            kind: ReplyKind::TcpRst,
            flow_echo: FlowTuple {
                src: "10.50.0.1".parse().unwrap(),
                dst: "198.51.100.2".parse().unwrap(),
                protocol: Protocol::Tcp,
                src_port: 80,
                dst_port: 62003,
            },
            reply_ttl: 60,
            embedded: None,
            hop_addr: None,
            quote_selector: None,
        };
        assert_eq!(table.resolve(&parsed), Some(&p));
    }

    #[test]
    fn log_round_trips_and_header_is_pinned() {
        assert_eq!(
            LOG_HEADER,
            "run_id,protocol,target_addr,target_prefix,variation_id,src_addr,src_port,\
             dst_port,tx_site,rx_site,tx_time_ns,rx_time_ns,reply_ttl,kind,hop_addr"
                .replace(" ", "")
                .as_str(),
        );
        let records = vec![
            ReplyRecord {
                run_id: 7,
                protocol: Protocol::Icmp,
                target_addr: "10.50.0.1".parse().unwrap(),
                target_prefix: "10.50.0.0/24".parse().unwrap(),
                variation_id: 2,
                src_addr: "198.51.100.3".parse().unwrap(),
                src_port: 0,
                dst_port: 0,
                tx_site: "AMS".parse().unwrap(),
                rx_site: "TYO".parse().unwrap(),
                tx_time_ns: 1_000,
                rx_time_ns: 81_000_000,
                reply_ttl: 60,
                kind: RecordKind::Reply,
                hop_addr: None,
            },
            ReplyRecord {
                run_id: 7,
                protocol: Protocol::Udp,
                target_addr: "2001:db8:50::9".parse().unwrap(),
                target_prefix: "2001:db8:50::/48".parse().unwrap(),
                variation_id: 0,
                src_addr: "2001:db8:1::1".parse().unwrap(),
                src_port: 62000,
                dst_port: 53,
                tx_site: "TYO".parse().unwrap(),
                rx_site: "TYO".parse().unwrap(),
                tx_time_ns: 5,
                rx_time_ns: 6,
                reply_ttl: 61,
                kind: RecordKind::TimeExceeded,
                hop_addr: Some("2001:db8:30::1".parse().unwrap()),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_log(&path, &records).unwrap();
        let back: Vec<ReplyRecord> = read_log(&path).unwrap().map(|r| r.unwrap()).collect();
        assert_eq!(back, records);

        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().nth(1).unwrap();
        assert_eq!(
            first,
            "7,icmp,10.50.0.1,10.50.0.0/24,2,198.51.100.3,0,0,AMS,TYO,1000,81000000,60,reply,"
        );
    }

    #[test]
    fn log_reader_rejects_wrong_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "nope\n1,2,3\n").unwrap();
        assert!(matches!(read_log(&path), Err(RecordError::Header { .. })));
    }

    #[test]
    fn log_reader_names_the_offending_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("torn.csv");
        let good = "7,icmp,10.50.0.1,10.50.0.0/24,2,198.51.100.3,0,0,AMS,TYO,1000,81000000,60,reply,";
        std::fs::write(&path, format!("{LOG_HEADER}\n{good}\n\n1,2,3\n")).unwrap();
        let rows: Vec<_> = read_log(&path).unwrap().collect();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].is_ok());
        // The blank line still advances the count, so the torn row is line 4.
        let err = rows[1].as_ref().unwrap_err().to_string();
        assert!(err.contains("line 4"), "got: {err}");
        assert!(err.contains("3 fields"), "got: {err}");
    }
}
