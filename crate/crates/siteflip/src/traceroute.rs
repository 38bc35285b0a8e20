//! Flow-stable path traces that localize the load balancer behind a flip.
//!
//! Flip detection says *that* replies for a prefix scatter across sites;
//! tracing says *where* the paths fork. Every probe of one trace keeps its
//! flow tuple byte-identical so per-flow balancers pin the whole trace to one
//! path, and varying the tuple between traces exposes the fork: the first TTL
//! at which hop addresses or capture sites differ. Resolving that hop's AS
//! then attributes the balancer to the client's own network or to a transit
//! network on the path.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::IpAddr;
use std::path::Path;

use thiserror::Error;

use crate::fmt_opt;
use crate::hitlist::AsMap;
use crate::model::{FlowTuple, SiteId};
use crate::prober::{ChannelError, PacketChannel, VirtualClock};
use crate::wire::{self, ParsedReply, ProbeSpec, ReplyKind, WireError};

/// Initial TTLs common across operating systems. A captured reply's
/// remaining TTL pins the band it started from, and the gap is the length of
/// the return path.
const TTL_BANDS: [u8; 3] = [64, 128, 255];

/// Extra TTLs probed past the estimated path length, absorbing asymmetric
/// return paths and hosts that start slightly off-band.
pub const TTL_MARGIN: u8 = 5;

const PING_TTL: u8 = 64;

/// Path length estimate from the remaining TTL of a reply.
pub fn estimate_path_length(reply_ttl: u8) -> u8 {
    for band in TTL_BANDS {
        if reply_ttl <= band {
            return band - reply_ttl;
        }
    }
    unreachable!("the 255 band covers every TTL")
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// One TTL row of a traced path. All fields stay `None` when every attempt
/// at this TTL went unanswered.
#[derive(Debug, Clone, PartialEq)]
pub struct Hop {
    pub ttl: u8,
    pub addr: Option<IpAddr>,
    /// Site whose capture saw the answer, when the answering channel is
    /// site-attached. Client vantages leave this unset.
    pub rx_site: Option<SiteId>,
    pub rtt_ms: Option<f64>,
}

/// A completed trace. `hops[i].ttl == i + 1`; when the destination answered,
/// the last row carries its reply and `dest_reached` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePath {
    pub target: IpAddr,
    pub flow: FlowTuple,
    pub hops: Vec<Hop>,
    pub dest_reached: bool,
}

/// Sends TTL-limited probes over one channel and correlates the answers,
/// including those surfacing on capture channels at other sites.
pub struct TraceEngine<C: PacketChannel> {
    channel: C,
    own_site: Option<SiteId>,
    captures: Vec<(SiteId, C)>,
    clock: VirtualClock,
    run_id: u32,
    opt_out_url: String,
    attempts_per_ttl: u8,
    probes_sent: u64,
}

impl<C: PacketChannel> TraceEngine<C> {
    /// `own_site` attributes replies read from `channel` itself; pass `None`
    /// for a client vantage.
    pub fn new(channel: C, own_site: Option<SiteId>, run_id: u32, clock: VirtualClock) -> Self {
        TraceEngine {
            channel,
            own_site,
            captures: Vec::new(),
            clock,
            run_id,
            opt_out_url: "probe.example.net".to_string(),
            attempts_per_ttl: 1,
            probes_sent: 0,
        }
    }

    /// Attaches a capture channel at another site. Do not re-attach the
    /// sending channel's own site; its queue is already drained.
    pub fn add_capture(&mut self, site: SiteId, channel: C) {
        self.captures.push((site, channel));
    }

    pub fn set_opt_out_url(&mut self, url: impl Into<String>) {
        self.opt_out_url = url.into();
    }

    pub fn set_attempts(&mut self, per_ttl: u8) {
        self.attempts_per_ttl = per_ttl.max(1);
    }

    pub fn probes_sent(&self) -> u64 {
        self.probes_sent
    }

    /// Full-TTL probe whose reply, if any, bounds the forward path length.
    pub fn ping_estimate(&mut self, flow: FlowTuple) -> Result<Option<u8>, TraceError> {
        let mut pending = HashMap::new();
        self.send_probe(flow, PING_TTL, &mut pending)?;
        for (_, reply, _) in self.drain() {
            if is_direct_reply(reply.kind) && reply.flow_echo.reversed() == flow {
                return Ok(Some(estimate_path_length(reply.reply_ttl)));
            }
        }
        Ok(None)
    }

    /// Probes TTL 1 upward until the destination answers or the budget of
    /// `est_len + TTL_MARGIN` rows is exhausted. The flow tuple is reused
    /// byte-identically at every TTL, so per-flow balancers keep the whole
    /// trace on a single path.
    pub fn trace(&mut self, flow: FlowTuple, est_len: u8) -> Result<TracePath, TraceError> {
        let max_ttl = est_len.saturating_add(TTL_MARGIN).max(1);
        let mut hops: Vec<Hop> = (1..=max_ttl)
            .map(|ttl| Hop { ttl, addr: None, rx_site: None, rtt_ms: None })
            .collect();
        let mut pending: HashMap<(FlowTuple, u32), (u8, u64)> = HashMap::new();
        let mut reached: Option<u8> = None;

        for ttl in 1..=max_ttl {
            let mut tx_for_ttl = 0;
            for _ in 0..self.attempts_per_ttl {
                tx_for_ttl = self.send_probe(flow, ttl, &mut pending)?;
            }
            for event in self.drain() {
                score(&flow, ttl, tx_for_ttl, event, &mut pending, &mut hops, &mut reached);
            }
            if reached.is_some() {
                break;
            }
        }

        if let Some(r) = reached {
            hops.truncate(usize::from(r));
        }
        Ok(TracePath { target: flow.dst, flow, hops, dest_reached: reached.is_some() })
    }

    fn send_probe(
        &mut self,
        flow: FlowTuple,
        ttl: u8,
        pending: &mut HashMap<(FlowTuple, u32), (u8, u64)>,
    ) -> Result<u64, TraceError> {
        let tx = self.clock.tick();
        let spec = ProbeSpec {
            flow,
            run_id: self.run_id,
            // Stashing the TTL in the variation id lets payload-echoing
            // replies name the exact probe that reached them.
            variation_id: ttl,
            tx_time: tx,
            ttl,
            opt_out_url: self.opt_out_url.clone(),
        };
        let packet = wire::build_probe(&spec)?;
        if let Some(key) = wire::probe_quote(&packet) {
            pending.insert(key, (ttl, tx));
        }
        self.channel.send(&packet, tx)?;
        self.probes_sent += 1;
        Ok(tx)
    }

    fn drain(&self) -> Vec<(Option<SiteId>, ParsedReply, u64)> {
        let mut events = Vec::new();
        while let Some((bytes, rx)) = self.channel.recv() {
            if let Some(reply) = parse_any(&bytes) {
                events.push((self.own_site.clone(), reply, rx));
            }
        }
        for (site, channel) in &self.captures {
            while let Some((bytes, rx)) = channel.recv() {
                if let Some(reply) = parse_any(&bytes) {
                    events.push((Some(site.clone()), reply, rx));
                }
            }
        }
        events
    }
}

fn parse_any(bytes: &[u8]) -> Option<ParsedReply> {
    wire::parse_reply(bytes, wire::sniff_family(bytes)?)
}

fn is_direct_reply(kind: ReplyKind) -> bool {
    matches!(kind, ReplyKind::EchoReply | ReplyKind::TcpRst | ReplyKind::DnsResponse)
}

/// Files one captured answer into the hop table. Hop errors correlate
/// exactly through the quoted flow and selector; direct replies match on the
/// reversed flow and fall back to the in-flight TTL when they echo no
/// metadata.
fn score(
    flow: &FlowTuple,
    current_ttl: u8,
    current_tx: u64,
    (site, reply, rx): (Option<SiteId>, ParsedReply, u64),
    pending: &mut HashMap<(FlowTuple, u32), (u8, u64)>,
    hops: &mut [Hop],
    reached: &mut Option<u8>,
) {
    let (ttl, tx, addr) = match reply.kind {
        ReplyKind::TimeExceeded | ReplyKind::Discarded => {
            let Some(selector) = reply.quote_selector else { return };
            let Some((ttl, tx)) = pending.remove(&(reply.flow_echo, selector)) else { return };
            if reply.kind == ReplyKind::Discarded {
                // Destination unreachable means the probe crossed the whole
                // path and the far network rejected it: the classic closed
                // port at the end of a UDP trace.
                mark_reached(reached, ttl);
            }
            (ttl, tx, reply.hop_addr)
        }
        kind if is_direct_reply(kind) => {
            if reply.flow_echo.reversed() != *flow {
                return;
            }
            let (ttl, tx) = match &reply.embedded {
                Some(meta) => (meta.variation_id, meta.tx_time),
                None => (current_ttl, current_tx),
            };
            mark_reached(reached, ttl);
            (ttl, tx, Some(flow.dst))
        }
        _ => return,
    };
    let Some(hop) = hops.get_mut(usize::from(ttl).wrapping_sub(1)) else { return };
    if hop.addr.is_none() {
        hop.addr = addr;
        hop.rx_site = site;
        hop.rtt_ms = Some(rx.saturating_sub(tx) as f64 / 1e6);
    }
}

fn mark_reached(reached: &mut Option<u8>, ttl: u8) {
    *reached = Some(reached.map_or(ttl, |r| r.min(ttl)));
}

/// The first TTL at which flow-varied traces disagree, with the disagreeing
/// evidence: distinct hop addresses, distinct capture sites, or both.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub ttl: u8,
    pub hop_addrs: BTreeSet<IpAddr>,
    pub rx_sites: BTreeSet<SiteId>,
}

/// Scans hop rows in TTL order and reports the smallest TTL where the traces
/// fork. Unanswered rows carry no evidence and never count as disagreement.
pub fn find_divergence(traces: &[TracePath]) -> Option<Divergence> {
    if traces.len() < 2 {
        return None;
    }
    let longest = traces.iter().map(|t| t.hops.len()).max()?;
    for idx in 0..longest {
        let mut hop_addrs = BTreeSet::new();
        let mut rx_sites = BTreeSet::new();
        for trace in traces {
            if let Some(hop) = trace.hops.get(idx) {
                debug_assert_eq!(usize::from(hop.ttl), idx + 1);
                if let Some(addr) = hop.addr {
                    hop_addrs.insert(addr);
                }
                if let Some(site) = &hop.rx_site {
                    rx_sites.insert(site.clone());
                }
            }
        }
        if hop_addrs.len() >= 2 || rx_sites.len() >= 2 {
            return Some(Divergence { ttl: (idx + 1) as u8, hop_addrs, rx_sites });
        }
    }
    None
}

/// Whose network operates the balancer at the divergence point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbClass {
    /// The divergent hop sits in the client's own AS.
    HomeAs,
    /// The divergent hop resolves to some other AS on the path.
    OnPathAs,
    /// No divergence found, or the hop address maps to no known AS.
    Unknown,
}

impl LbClass {
    pub fn as_str(self) -> &'static str {
        match self {
            LbClass::HomeAs => "home_as",
            LbClass::OnPathAs => "on_path_as",
            LbClass::Unknown => "unknown",
        }
    }
}

/// Which trace direction produced the localizing evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceDirection {
    Forward,
    Reverse,
    Combined,
}

impl TraceDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceDirection::Forward => "forward",
            TraceDirection::Reverse => "reverse",
            TraceDirection::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbLocation {
    pub class: LbClass,
    pub direction: TraceDirection,
    /// A divergent hop address backing the verdict, when one exists.
    pub divergent_hop: Option<IpAddr>,
    /// AS of that hop; zero when unresolved.
    pub hop_as: u32,
}

/// Localizes the balancer from forward traces (client toward the anycast
/// prefix) and reverse traces (site toward the client). The first direction
/// whose divergent hop resolves to an AS decides, forward preferred; a hop in
/// the client's own AS outranks other resolutions within a direction.
pub fn locate_lb(
    forward: &[TracePath],
    reverse: &[TracePath],
    as_map: &AsMap,
    client_as: u32,
) -> LbLocation {
    let fwd = locate_direction(forward, as_map, client_as);
    let rev = locate_direction(reverse, as_map, client_as);
    match (&fwd, &rev) {
        (Some(loc), _) if loc.0 != LbClass::Unknown => place(loc, TraceDirection::Forward),
        (_, Some(loc)) if loc.0 != LbClass::Unknown => place(loc, TraceDirection::Reverse),
        (Some(loc), _) => place(loc, TraceDirection::Forward),
        (_, Some(loc)) => place(loc, TraceDirection::Reverse),
        (None, None) => LbLocation {
            class: LbClass::Unknown,
            direction: TraceDirection::Combined,
            divergent_hop: None,
            hop_as: 0,
        },
    }
}

fn place(&(class, addr, asn): &(LbClass, Option<IpAddr>, u32), direction: TraceDirection) -> LbLocation {
    LbLocation { class, direction, divergent_hop: addr, hop_as: asn }
}

fn locate_direction(
    traces: &[TracePath],
    as_map: &AsMap,
    client_as: u32,
) -> Option<(LbClass, Option<IpAddr>, u32)> {
    let div = find_divergence(traces)?;
    let resolved: Vec<(IpAddr, u32)> = div
        .hop_addrs
        .iter()
        .map(|&a| (a, as_map.lookup_as(a)))
        .filter(|&(_, asn)| asn != 0)
        .collect();
    if let Some(&(addr, asn)) = resolved.iter().find(|&&(_, asn)| asn == client_as) {
        return Some((LbClass::HomeAs, Some(addr), asn));
    }
    if let Some(&(addr, asn)) = resolved.first() {
        return Some((LbClass::OnPathAs, Some(addr), asn));
    }
    Some((LbClass::Unknown, div.hop_addrs.first().copied(), 0))
}

pub const TRACE_HEADER: &str =
    "target,protocol,src,src_port,dst_port,ttl,hop_addr,rx_site,rtt_ms,dest_reached";

/// Writes traces as CSV, one row per hop. Unanswered fields stay empty;
/// `dest_reached` marks only the final row of a trace that got through.
pub fn write_trace_log(path: &Path, traces: &[TracePath]) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{TRACE_HEADER}")?;
    for trace in traces {
        for hop in &trace.hops {
            let reached = trace.dest_reached && usize::from(hop.ttl) == trace.hops.len();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                trace.target,
                trace.flow.protocol.as_str(),
                trace.flow.src,
                trace.flow.src_port,
                trace.flow.dst_port,
                hop.ttl,
                fmt_opt(&hop.addr),
                fmt_opt(&hop.rx_site),
                hop.rtt_ms.map_or(String::new(), |v| format!("{v:.3}")),
                reached,
            )?;
        }
    }
    out.flush()
}
