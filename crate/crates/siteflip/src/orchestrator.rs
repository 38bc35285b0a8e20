//! Run coordination: turns one measurement definition into stamped probe
//! waves, drives every registered worker through the preload barrier, and
//! merges what all sites captured into a single canonical record list.
//!
//! Coordination traffic is serialized JSON even though workers run in
//! process here. Exactly five message kinds cross the bus; a deployment that
//! moves workers onto real machines changes the transport, not the protocol.
//!
//! The barrier matters because replies to anycast-sourced probes land
//! wherever routing says, not where the probe left. Every worker therefore
//! holds the full stamped plan before anything flies, so a capture at a
//! remote site resolves to the original transmit time immediately.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, BufReader, Write as _};
use std::net::IpAddr;
use std::path::Path;
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hitlist::TargetSet;
use crate::model::{FlowTuple, ModelError, Prefix, Protocol, SiteId, VariedField};
use crate::prober::{
    PacketChannel, PlannedProbe, ReplyRecord, VirtualClock, Worker, WorkerStats, DEFAULT_PPS,
};
use crate::sim::hash::fnv1a;
use crate::wire;

/// Start instant of every virtual-clock schedule. Any fixed value works; a
/// realistic epoch keeps timestamps recognizable in logs.
pub const MEASUREMENT_EPOCH_NS: u64 = 1_700_000_000_000_000_000;

/// Default gap between repeated runs: 20 minutes, so three runs per hour.
/// With the default five variations per target that is 15 probes per target
/// per hour, exactly the per-target budget the rate limiter enforces.
pub const DEFAULT_RUN_INTERVAL_NS: u64 = 1_200 * 1_000_000_000;

/// How long workers keep capturing after the last wave before flushing.
pub const DEFAULT_QUIESCENCE_NS: u64 = 10 * 1_000_000_000;

/// First source port assigned to probes; variation i uses base + i.
pub const SRC_PORT_BASE: u16 = 62_000;

/// First destination port for destination-port variations (TCP only).
pub const DST_PORT_BASE: u16 = 63_000;

#[derive(Debug, Error)]
pub enum OrchError {
    #[error("{} variation is not defined for {} probes", .varied.as_str(), .protocol.as_str())]
    IllegalVariation {
        varied: VariedField,
        protocol: Protocol,
    },
    #[error("run {0:#010x} was already executed")]
    DuplicateRun(u32),
    #[error("a worker for site {0} is already registered")]
    DuplicateSite(SiteId),
    #[error("sender {0} is not a registered transmitting worker")]
    UnknownSender(SiteId),
    #[error("measurement names no sender sites")]
    NoSenders,
    #[error("no workers registered")]
    NoWorkers,
    #[error("bad measurement definition: {0}")]
    BadDef(&'static str),
    #[error("unexpected message on control bus: {0}")]
    Protocol(&'static str),
    #[error("control bus closed")]
    BusClosed,
    #[error(transparent)]
    Encode(#[from] serde_json::Error),
    #[error(transparent)]
    Wire(#[from] wire::WireError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One measurement: which header field to vary across how many probes per
/// target, transmitted from which sites, at what rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasurementDef {
    pub protocol: Protocol,
    pub varied: VariedField,
    /// Flow variations per target. Replies landing at two or more sites
    /// across one target's variations mark its prefix as flipping.
    pub k: u8,
    /// Prefix the platform announces; probe source addresses are drawn from
    /// it, starting at offset 1.
    pub anycast: Prefix,
    /// Sites that transmit waves. Every registered site captures regardless.
    pub senders: Vec<SiteId>,
    /// Where targets can learn why they were probed. Doubles as the query
    /// domain for DNS probes, so for UDP it must be a bare hostname.
    pub opt_out_url: String,
    pub ttl: u8,
    /// Probes per second per sender; sets the virtual clock's tick.
    pub pps: u64,
    /// Seed from which run ids derive; equal seeds replay identically.
    pub seed: u64,
    /// Capture tail after the last wave of a run.
    pub quiescence_ns: u64,
}

impl MeasurementDef {
    pub fn new(
        protocol: Protocol,
        varied: VariedField,
        anycast: Prefix,
        senders: Vec<SiteId>,
    ) -> Self {
        MeasurementDef {
            protocol,
            varied,
            k: 5,
            anycast,
            senders,
            opt_out_url: "probe.example.net".to_string(),
            ttl: 64,
            pps: DEFAULT_PPS,
            seed: 0,
            quiescence_ns: DEFAULT_QUIESCENCE_NS,
        }
    }

    pub fn validate(&self) -> Result<(), OrchError> {
        if self.k == 0 {
            return Err(OrchError::BadDef("k must be at least 1"));
        }
        if !self.varied.legal_for(self.protocol) {
            return Err(OrchError::IllegalVariation {
                varied: self.varied,
                protocol: self.protocol,
            });
        }
        if self.senders.is_empty() {
            return Err(OrchError::NoSenders);
        }
        let mut seen = BTreeSet::new();
        if !self.senders.iter().all(|s| seen.insert(s)) {
            return Err(OrchError::BadDef("duplicate sender site"));
        }
        if self.pps == 0 {
            return Err(OrchError::BadDef("pps must be positive"));
        }
        if !self.opt_out_url.is_ascii() {
            return Err(OrchError::BadDef("opt-out URL must be ASCII"));
        }
        // highest source offset used must stay inside the announced prefix
        let max_offset = match self.varied {
            VariedField::SrcAddr | VariedField::All => u128::from(self.k),
            _ => 1,
        };
        self.anycast.addr_at(max_offset)?;
        Ok(())
    }
}

/// Expands one target into the measurement's k probe flows.
///
/// Conventions: sources come from the anycast prefix, offset 1 + i when the
/// source address varies and fixed at offset 1 otherwise. Varied source
/// ports count up from [`SRC_PORT_BASE`], varied destination ports from
/// [`DST_PORT_BASE`]; otherwise the source port is the base and the
/// destination port is the protocol's service port (80 for TCP, 53 for DNS
/// over UDP). The all-fields variation moves address and both ports in
/// lockstep, giving k maximally distinct flows rather than a cross product.
pub fn gen_variations(def: &MeasurementDef, target: IpAddr) -> Result<Vec<FlowTuple>, OrchError> {
    if !def.varied.legal_for(def.protocol) {
        return Err(OrchError::IllegalVariation {
            varied: def.varied,
            protocol: def.protocol,
        });
    }
    let fixed_src = def.anycast.addr_at(1)?;
    let (fixed_sport, fixed_dport) = match def.protocol {
        Protocol::Icmp => (0, 0),
        Protocol::Tcp => (SRC_PORT_BASE, 80),
        Protocol::Udp => (SRC_PORT_BASE, 53),
    };
    let mut flows = Vec::with_capacity(usize::from(def.k));
    for i in 0..u16::from(def.k) {
        let varied_src = def.anycast.addr_at(1 + u128::from(i))?;
        let (src, src_port, dst_port) = match def.varied {
            VariedField::SrcAddr => (varied_src, fixed_sport, fixed_dport),
            VariedField::SrcPort => (fixed_src, SRC_PORT_BASE + i, fixed_dport),
            VariedField::DstPort => (fixed_src, fixed_sport, DST_PORT_BASE + i),
            VariedField::SrcAndDstPort => (fixed_src, SRC_PORT_BASE + i, DST_PORT_BASE + i),
            VariedField::All => (varied_src, SRC_PORT_BASE + i, DST_PORT_BASE + i),
        };
        let flow = FlowTuple {
            src,
            dst: target,
            protocol: def.protocol,
            src_port,
            dst_port,
        };
        flow.validate()?;
        flows.push(flow);
    }
    Ok(flows)
}

/// Everything workers and the coordinator say to each other. The bus
/// carries nothing but these five kinds, serialized as tagged JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlMsg {
    /// Worker announces the site it captures at and whether it may transmit.
    RegisterWorker { site: SiteId, sender: bool },
    /// One sender's full stamped plan, broadcast to every worker before
    /// anything flies.
    PreloadCorrelation {
        run_id: u32,
        entries: Vec<PlannedProbe>,
    },
    /// Releases the named sender's parked wave.
    StartWave {
        run_id: u32,
        sender: SiteId,
        opt_out_url: String,
        ttl: u8,
    },
    /// Captures a worker attributed to the run, flushed after quiescence.
    ReplyBatch {
        run_id: u32,
        site: SiteId,
        records: Vec<ReplyRecord>,
    },
    /// Worker is finished with the run; counters cover this run only.
    EndRun {
        run_id: u32,
        site: SiteId,
        stats: WorkerStats,
    },
}

fn post(tx: &mpsc::Sender<String>, msg: &ControlMsg) -> Result<(), OrchError> {
    let text = serde_json::to_string(msg)?;
    tx.send(text).map_err(|_| OrchError::BusClosed)
}

/// A worker plus its end of the bus. Pumping decodes queued coordinator
/// messages and acts on them; flushing pushes captures and counters back up.
struct WorkerNode<C: PacketChannel> {
    worker: Worker<C>,
    inbox: mpsc::Receiver<String>,
    to_orch: mpsc::Sender<String>,
    /// Wave planned from this site, parked until its StartWave arrives.
    pending: Option<(u32, Vec<PlannedProbe>)>,
    /// Counter snapshot at the previous flush; EndRun reports the delta.
    run_base: WorkerStats,
}

impl<C: PacketChannel> WorkerNode<C> {
    fn pump(&mut self) -> Result<(), OrchError> {
        while let Ok(text) = self.inbox.try_recv() {
            match serde_json::from_str::<ControlMsg>(&text)? {
                ControlMsg::PreloadCorrelation { run_id, entries } => {
                    self.worker.preload(&entries);
                    if entries.iter().any(|e| e.tx_site == *self.worker.site()) {
                        self.pending = Some((run_id, entries));
                    }
                }
                ControlMsg::StartWave {
                    run_id,
                    sender,
                    opt_out_url,
                    ttl,
                } => {
                    if sender != *self.worker.site() {
                        continue;
                    }
                    match self.pending.take() {
                        Some((id, plan)) if id == run_id => {
                            self.worker.send_wave(&plan, &opt_out_url, ttl)?;
                        }
                        _ => return Err(OrchError::Protocol("start for a wave never preloaded")),
                    }
                }
                _ => return Err(OrchError::Protocol("worker-bound kind expected")),
            }
        }
        Ok(())
    }

    fn flush(&mut self, run_id: u32) -> Result<(), OrchError> {
        let site = self.worker.site().clone();
        let records = self.worker.collect();
        if !records.is_empty() {
            post(
                &self.to_orch,
                &ControlMsg::ReplyBatch {
                    run_id,
                    site: site.clone(),
                    records,
                },
            )?;
        }
        let total = self.worker.stats();
        let stats = WorkerStats {
            sent: total.sent - self.run_base.sent,
            rate_limited: total.rate_limited - self.run_base.rate_limited,
            unresolved: total.unresolved - self.run_base.unresolved,
            discarded: total.discarded - self.run_base.discarded,
        };
        self.run_base = total;
        post(&self.to_orch, &ControlMsg::EndRun { run_id, site, stats })
    }
}

/// Outcome of one run: the merged canonical records from every site and the
/// per-site counters reported at end of run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: u32,
    pub records: Vec<ReplyRecord>,
    pub stats: BTreeMap<SiteId, WorkerStats>,
}

/// Drives registered workers through measurement runs, single-threaded and
/// in deterministic site order, so equal inputs replay byte for byte.
pub struct Orchestrator<C: PacketChannel> {
    nodes: Vec<WorkerNode<C>>,
    /// Site to node index and worker inbox, iterated in sorted order.
    links: BTreeMap<SiteId, (usize, mpsc::Sender<String>)>,
    senders: BTreeSet<SiteId>,
    inbox: mpsc::Receiver<String>,
    inbox_tx: mpsc::Sender<String>,
    done_runs: BTreeSet<u32>,
}

impl<C: PacketChannel> Default for Orchestrator<C> {
    fn default() -> Self {
        Self::new()
    }
}

impl<C: PacketChannel> Orchestrator<C> {
    pub fn new() -> Self {
        let (inbox_tx, inbox) = mpsc::channel();
        Orchestrator {
            nodes: Vec::new(),
            links: BTreeMap::new(),
            senders: BTreeSet::new(),
            inbox,
            inbox_tx,
            done_runs: BTreeSet::new(),
        }
    }

    /// Registers a worker. The registration crosses the bus like any other
    /// message; `sender` grants transmit permission, capture is implicit.
    pub fn attach(&mut self, worker: Worker<C>, sender: bool) -> Result<(), OrchError> {
        let to_orch = self.inbox_tx.clone();
        post(
            &to_orch,
            &ControlMsg::RegisterWorker {
                site: worker.site().clone(),
                sender,
            },
        )?;
        let text = self.inbox.try_recv().map_err(|_| OrchError::BusClosed)?;
        let ControlMsg::RegisterWorker { site, sender } = serde_json::from_str(&text)? else {
            return Err(OrchError::Protocol("registration expected"));
        };
        if self.links.contains_key(&site) {
            return Err(OrchError::DuplicateSite(site));
        }
        let (to_worker, inbox) = mpsc::channel();
        self.links.insert(site.clone(), (self.nodes.len(), to_worker));
        if sender {
            self.senders.insert(site);
        }
        self.nodes.push(WorkerNode {
            worker,
            inbox,
            to_orch,
            pending: None,
            run_base: WorkerStats::default(),
        });
        Ok(())
    }

    fn broadcast(&self, msg: &ControlMsg) -> Result<(), OrchError> {
        let text = serde_json::to_string(msg)?;
        for (_, tx) in self.links.values() {
            tx.send(text.clone()).map_err(|_| OrchError::BusClosed)?;
        }
        Ok(())
    }

    fn pump_all(&mut self) -> Result<(), OrchError> {
        let nodes = &mut self.nodes;
        for (idx, _) in self.links.values() {
            nodes[*idx].pump()?;
        }
        Ok(())
    }

    /// Executes one run: per sender in site order, plan, broadcast, release;
    /// then wait out the quiescence window and gather every site's report.
    pub fn run(
        &mut self,
        def: &MeasurementDef,
        targets: &TargetSet,
        run_id: u32,
        clock: &mut VirtualClock,
    ) -> Result<RunOutcome, OrchError> {
        def.validate()?;
        if self.nodes.is_empty() {
            return Err(OrchError::NoWorkers);
        }
        if targets.family() != def.anycast.family() {
            return Err(OrchError::BadDef("targets and anycast prefix differ in family"));
        }
        for s in &def.senders {
            if !self.senders.contains(s) {
                return Err(OrchError::UnknownSender(s.clone()));
            }
        }
        if !self.done_runs.insert(run_id) {
            return Err(OrchError::DuplicateRun(run_id));
        }

        let mut wave_order: Vec<&SiteId> = def.senders.iter().collect();
        wave_order.sort();
        for sender in wave_order {
            let entries = plan_wave(def, run_id, sender, targets, clock);
            self.broadcast(&ControlMsg::PreloadCorrelation { run_id, entries })?;
            self.pump_all()?;
            self.broadcast(&ControlMsg::StartWave {
                run_id,
                sender: sender.clone(),
                opt_out_url: def.opt_out_url.clone(),
                ttl: def.ttl,
            })?;
            self.pump_all()?;
        }
        clock.advance(def.quiescence_ns);

        let nodes = &mut self.nodes;
        for (idx, _) in self.links.values() {
            nodes[*idx].flush(run_id)?;
        }
        let mut batches = Vec::new();
        let mut stats = BTreeMap::new();
        while let Ok(text) = self.inbox.try_recv() {
            match serde_json::from_str::<ControlMsg>(&text)? {
                ControlMsg::ReplyBatch {
                    run_id: id,
                    records,
                    ..
                } if id == run_id => batches.push(records),
                ControlMsg::EndRun {
                    run_id: id,
                    site,
                    stats: s,
                } if id == run_id => {
                    stats.insert(site, s);
                }
                _ => return Err(OrchError::Protocol("coordinator-bound kind expected")),
            }
        }
        if stats.len() != self.nodes.len() {
            return Err(OrchError::Protocol("a site never reported end of run"));
        }
        Ok(RunOutcome {
            run_id,
            records: merge_records(batches),
            stats,
        })
    }

    /// Repeats the measurement on a fixed schedule from the epoch. Run ids
    /// derive from the definition's seed; `on_run_start` sees each run index
    /// before its clock starts, which is where a simulation reseeds.
    pub fn run_repeated(
        &mut self,
        def: &MeasurementDef,
        targets: &TargetSet,
        runs: u32,
        interval_ns: u64,
        mut on_run_start: impl FnMut(u32),
    ) -> Result<Vec<RunOutcome>, OrchError> {
        if runs == 0 {
            return Err(OrchError::BadDef("repeat count must be at least 1"));
        }
        let mut clock = VirtualClock::new(MEASUREMENT_EPOCH_NS, def.pps);
        let mut outcomes = Vec::with_capacity(runs as usize);
        for i in 0..runs {
            // never move the clock backwards if a run overran its slot
            let slot = MEASUREMENT_EPOCH_NS + u64::from(i) * interval_ns;
            if clock.now() < slot {
                clock.advance(slot - clock.now());
            }
            on_run_start(i);
            let run_id = derive_run_id(def.seed, i);
            outcomes.push(self.run(def, targets, run_id, &mut clock)?);
        }
        Ok(outcomes)
    }
}

/// Stamps one sender's wave: k flows per target in target order, transmit
/// times handed out by the shared clock at planning so the plan broadcast
/// already carries them.
pub fn plan_wave(
    def: &MeasurementDef,
    run_id: u32,
    sender: &SiteId,
    targets: &TargetSet,
    clock: &mut VirtualClock,
) -> Vec<PlannedProbe> {
    let mut plan = Vec::with_capacity(targets.len() * usize::from(def.k));
    for (prefix, addr) in targets.iter() {
        // def was validated before planning; expansion cannot fail here
        let flows = gen_variations(def, *addr).expect("validated definition");
        for (i, flow) in flows.into_iter().enumerate() {
            plan.push(PlannedProbe {
                run_id,
                variation_id: i as u8,
                protocol: def.protocol,
                target: *addr,
                target_prefix: *prefix,
                src: flow.src,
                src_port: flow.src_port,
                dst_port: flow.dst_port,
                tx_site: sender.clone(),
                tx_time_ns: clock.tick(),
            });
        }
    }
    plan
}

/// Flattens per-site batches into one canonically ordered list and drops
/// duplicate captures. Two records are duplicates when the same site saw
/// the same reply kind for the same probe variation; the canonical order
/// puts the earliest capture first, so that one survives.
pub fn merge_records(batches: Vec<Vec<ReplyRecord>>) -> Vec<ReplyRecord> {
    let mut all: Vec<ReplyRecord> = batches.into_iter().flatten().collect();
    all.sort_by_key(|r| r.canonical_key());
    all.dedup_by(|a, b| {
        a.run_id == b.run_id
            && a.target_addr == b.target_addr
            && a.variation_id == b.variation_id
            && a.rx_site == b.rx_site
            && a.kind == b.kind
    });
    all
}

/// Folds a seed and run index into a nonzero 32-bit run id. The index map
/// is bijective (odd multiplier), so one seed's runs never collide no
/// matter how many repeats a schedule makes.
pub fn derive_run_id(seed: u64, index: u32) -> u32 {
    let base = fnv1a(seed.to_be_bytes()) as u32;
    let id = base ^ index.wrapping_mul(0x9E37_79B1);
    if id == 0 {
        1
    } else {
        id
    }
}

/// Writes run metadata as sorted `key=value` lines, one per entry.
pub fn write_manifest(path: &Path, entries: &BTreeMap<String, String>) -> io::Result<()> {
    let mut out = io::BufWriter::new(std::fs::File::create(path)?);
    for (k, v) in entries {
        writeln!(out, "{k}={v}")?;
    }
    out.flush()
}

pub fn read_manifest(path: &Path) -> io::Result<BTreeMap<String, String>> {
    let file = std::fs::File::open(path)?;
    let mut entries = BTreeMap::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("manifest line without '=': {line:?}"),
            ));
        };
        entries.insert(k.to_string(), v.to_string());
    }
    Ok(entries)
}
