//! Deterministic network simulator.
//!
//! Packets injected at a vantage point walk the topology hop by hop: each
//! node either delivers (it originates the destination, or it is a site and
//! the destination is anycast), answers Time Exceeded when the TTL runs out,
//! or forwards along its longest-prefix route, hashing across equal-cost
//! group members per its policy. Targets answer probes with protocol-correct
//! replies, and replies route independently with their own flow, so a reply
//! to an anycast source lands at whichever site the return path selects.
//! That property is the whole point: it is what makes site flipping
//! observable end to end.
//!
//! Everything is deterministic given the topology, perturbation settings and
//! run seed. Delays are exact nanosecond sums, timestamps are computed not
//! measured, and the only randomness is a seeded generator behind route-flip
//! perturbation.

pub mod hash;
pub mod topo;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::net::IpAddr;
use std::sync::{Arc, Mutex};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{Family, FlowTuple, Prefix, Protocol, SiteId};
use crate::prober::{ChannelError, PacketChannel};
use crate::wire;

pub use hash::{hash_next_hop, vendor_default, HashPolicy};
pub use topo::{chain_topology, random_topology, Origin, RandomTopoParams, RouteEntry, Topology, TopoError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no site named {0}")]
    UnknownSite(String),
    #[error("no node named {0}")]
    UnknownNode(String),
    #[error("node {0} hosts no origin prefix, cannot source probes")]
    NoOriginAtNode(String),
    #[error("flip oracle requires route-flip perturbation disabled")]
    OracleUnderPerturbation,
    #[error("flip oracle cannot predict per-packet hashing at node {0}")]
    OraclePerPacket(String),
}

/// Run-scoped disturbances. `route_flip_prob` rotates the preferred group of
/// flip-eligible routes with this probability per traversing packet, so 1.0
/// alternates strictly. `load_level` is compared against per-node
/// `load_threshold`: at or below the threshold the node sends everything to
/// its preferred member instead of hashing. `seed` feeds the rotation RNG
/// together with the run seed.
#[derive(Debug, Clone, Copy)]
pub struct Perturbation {
    pub route_flip_prob: f64,
    pub load_level: f64,
    pub seed: u64,
}

impl Perturbation {
    pub fn none() -> Self {
        Perturbation { route_flip_prob: 0.0, load_level: 1.0, seed: 0 }
    }

    pub fn flips_routes(&self) -> bool {
        self.route_flip_prob > 0.0
    }
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation::none()
    }
}

/// Mutable routing state: rotation RNG and current preferred group per
/// flip-eligible route entry.
struct WalkCtx {
    rng: ChaCha8Rng,
    prefs: HashMap<(usize, Prefix), usize>,
    perturbation: Perturbation,
}

impl WalkCtx {
    fn new(perturbation: Perturbation, run_seed: u64) -> Self {
        let mixed = perturbation
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(run_seed);
        WalkCtx {
            rng: ChaCha8Rng::seed_from_u64(mixed),
            prefs: HashMap::new(),
            perturbation,
        }
    }
}

/// One hop a packet arrived at. `addr` is what a Time Exceeded from here
/// carries as its source; `node` is where that Time Exceeded routes from.
/// The fake terminal hop in front of an anycast site sets `is_fake`.
struct Arrival {
    addr: IpAddr,
    node: usize,
    is_fake: bool,
    cum_delay_ns: u64,
}

enum Delivery {
    Host { origin: usize },
    Site { site: usize },
}

struct Walk {
    arrivals: Vec<Arrival>,
    delivery: Delivery,
}

impl Walk {
    /// Smallest TTL that reaches the destination. Hosts deliver before the
    /// final decrement; the anycast service sits one decrement past the
    /// fake terminal hop.
    fn delivery_position(&self) -> usize {
        match self.delivery {
            Delivery::Host { .. } => self.arrivals.len(),
            Delivery::Site { .. } => self.arrivals.len() + 1,
        }
    }

    /// TTL decrements a delivered packet accumulated. The fake hop shares
    /// the site node and costs nothing.
    fn decrements(&self) -> usize {
        match self.delivery {
            Delivery::Host { .. } => self.arrivals.len(),
            Delivery::Site { .. } => self.arrivals.len().saturating_sub(1),
        }
    }

    fn path_delay(&self) -> u64 {
        self.arrivals.last().map(|a| a.cum_delay_ns).unwrap_or(0)
    }
}

/// Picks the forwarding next hop at `node`, applying route-flip rotation,
/// load gating and the node's hash policy.
fn select_next(
    topo: &Topology,
    ctx: &mut WalkCtx,
    node: usize,
    flow: &FlowTuple,
    packet_seq: u64,
) -> Result<usize, &'static str> {
    let (prefix, entry) = topo
        .route_lookup_with_prefix(node, flow.dst)
        .ok_or("no_route")?;
    let gi = if entry.flip && entry.groups.len() > 1 && ctx.perturbation.flips_routes() {
        let slot = ctx.prefs.entry((node, prefix)).or_insert(0);
        if ctx.rng.gen_bool(ctx.perturbation.route_flip_prob.min(1.0)) {
            *slot = (*slot + 1) % entry.groups.len();
        }
        *slot
    } else {
        0
    };
    let group = &entry.groups[gi];
    if group.len() == 1 {
        return Ok(group[0]);
    }
    let info = &topo.nodes[node];
    let policy = info.policy.expect("validated: groups imply a policy");
    if let Some(th) = info.load_threshold {
        if ctx.perturbation.load_level <= th {
            return Ok(group[0]);
        }
    }
    Ok(group[hash_next_hop(policy, flow, packet_seq, group.len(), topo.hash_seed)])
}

/// Walks `flow` from `from` until delivery, ignoring TTL. Routing does not
/// depend on TTL, so callers overlay expiry on the returned path.
fn walk(
    topo: &Topology,
    ctx: &mut WalkCtx,
    from: usize,
    flow: &FlowTuple,
    packet_seq: u64,
) -> Result<Walk, &'static str> {
    let mut arrivals = Vec::new();
    let mut cur = from;
    let mut delay = 0u64;
    for _ in 0..256 {
        if let Some((oi, origin)) = topo.origin_of(flow.dst) {
            if origin.node == cur {
                return Ok(Walk { arrivals, delivery: Delivery::Host { origin: oi } });
            }
        }
        if let Some(site) = topo.site_at(cur) {
            if topo.anycast.is_some_and(|p| p.contains(flow.dst)) {
                let site_idx = topo.site_named(&site.id).unwrap();
                arrivals.push(Arrival {
                    addr: site.fake_addr,
                    node: cur,
                    is_fake: true,
                    cum_delay_ns: delay,
                });
                return Ok(Walk { arrivals, delivery: Delivery::Site { site: site_idx } });
            }
        }
        let nh = select_next(topo, ctx, cur, flow, packet_seq)?;
        delay += topo.link_delay(cur, nh).expect("validated: routes follow links");
        arrivals.push(Arrival {
            addr: topo.nodes[nh].addr,
            node: nh,
            is_fake: false,
            cum_delay_ns: delay,
        });
        cur = nh;
    }
    Err("routing_loop")
}

/// ICMP error packets never trigger further ICMP errors.
fn is_icmp_error(bytes: &[u8]) -> bool {
    let Some(family) = wire::sniff_family(bytes) else {
        return false;
    };
    let Some((flow, _)) = wire::packet_flow(bytes) else {
        return false;
    };
    if flow.protocol != Protocol::Icmp {
        return false;
    }
    let hlen = match family {
        Family::V4 => usize::from(bytes[0] & 0x0f) * 4,
        Family::V6 => 40,
    };
    match bytes.get(hlen) {
        Some(&t) => match family {
            Family::V4 => matches!(t, 3 | 5 | 11 | 12),
            Family::V6 => t < 128,
        },
        None => false,
    }
}

/// What the anycast service answers when a request-shaped packet reaches a
/// site. Replies to replies (RSTs, responses, errors) stay unanswered.
fn service_reply(bytes: &[u8], family: Family) -> Option<Vec<u8>> {
    let (flow, _) = wire::packet_flow(bytes)?;
    let hlen = match family {
        Family::V4 => usize::from(bytes[0] & 0x0f) * 4,
        Family::V6 => 40,
    };
    let l4 = bytes.get(hlen..)?;
    match flow.protocol {
        Protocol::Icmp => {
            let echo_req = match family {
                Family::V4 => 8,
                Family::V6 => 128,
            };
            if l4.first() == Some(&echo_req) {
                wire::build_echo_reply(bytes, 64).ok()
            } else {
                None
            }
        }
        Protocol::Tcp => {
            let flags = *l4.get(13)?;
            if flags & 0x02 != 0 {
                wire::build_tcp_rst(bytes, 64).ok()
            } else {
                None
            }
        }
        Protocol::Udp => {
            let qr = l4.get(10)? & 0x80;
            if flow.dst_port == 53 && qr == 0 {
                wire::build_dns_response(bytes, 64).ok()
            } else {
                None
            }
        }
    }
}

struct SimState {
    ctx: WalkCtx,
    queues: BTreeMap<String, VecDeque<(Vec<u8>, u64)>>,
    seqs: BTreeMap<String, u64>,
    drops: BTreeMap<&'static str, u64>,
}

struct SimInner {
    topo: Topology,
    perturbation: Perturbation,
    state: Mutex<SimState>,
}

/// Handle to a simulated network. Cheap to clone; all taps share state.
#[derive(Clone)]
pub struct Sim {
    inner: Arc<SimInner>,
}

impl Sim {
    pub fn new(topo: Topology, perturbation: Perturbation) -> Sim {
        let mut queues = BTreeMap::new();
        for site in &topo.sites {
            queues.insert(site_key(&site.id), VecDeque::new());
        }
        Sim {
            inner: Arc::new(SimInner {
                topo,
                perturbation,
                state: Mutex::new(SimState {
                    ctx: WalkCtx::new(perturbation, 0),
                    queues,
                    seqs: BTreeMap::new(),
                    drops: BTreeMap::new(),
                }),
            }),
        }
    }

    pub fn topo(&self) -> &Topology {
        &self.inner.topo
    }

    /// Resets rotation state for a new run so repeated runs with the same
    /// seed replay identically.
    pub fn reseed_run(&self, run_seed: u64) {
        let mut st = self.inner.state.lock().unwrap();
        st.ctx = WalkCtx::new(self.inner.perturbation, run_seed);
    }

    /// Vantage at an anycast site: injects from the site node and captures
    /// everything the site's service address attracts.
    pub fn site_tap(&self, id: &SiteId) -> Result<SimTap, SimError> {
        let idx = self
            .inner
            .topo
            .site_named(id)
            .ok_or_else(|| SimError::UnknownSite(id.to_string()))?;
        Ok(SimTap {
            inner: Arc::clone(&self.inner),
            queue_key: site_key(id),
            inject: self.inner.topo.sites[idx].node,
        })
    }

    /// Vantage at a client edge node; used for forward traces from the
    /// client side. The node must host an origin so replies can return.
    pub fn client_tap(&self, node: &str) -> Result<SimTap, SimError> {
        let idx = self
            .inner
            .topo
            .node_idx(node)
            .ok_or_else(|| SimError::UnknownNode(node.to_string()))?;
        if !self.inner.topo.origins.iter().any(|o| o.node == idx) {
            return Err(SimError::NoOriginAtNode(node.to_string()));
        }
        let key = client_key(node);
        self.inner
            .state
            .lock()
            .unwrap()
            .queues
            .entry(key.clone())
            .or_default();
        Ok(SimTap { inner: Arc::clone(&self.inner), queue_key: key, inject: idx })
    }

    /// Source address a client tap should probe from: the host of the first
    /// origin at its node.
    pub fn client_source(&self, node: &str) -> Option<IpAddr> {
        let idx = self.inner.topo.node_idx(node)?;
        self.inner
            .topo
            .origins
            .iter()
            .find(|o| o.node == idx)
            .map(|o| o.host)
    }

    pub fn drop_counts(&self) -> BTreeMap<String, u64> {
        let st = self.inner.state.lock().unwrap();
        st.drops.iter().map(|(&k, &v)| (k.to_string(), v)).collect()
    }
}

fn site_key(id: &SiteId) -> String {
    format!("s/{id}")
}

fn client_key(node: &str) -> String {
    format!("c/{node}")
}

pub struct SimTap {
    inner: Arc<SimInner>,
    queue_key: String,
    inject: usize,
}

impl SimTap {
    fn drop_count(st: &mut SimState, reason: &'static str) {
        *st.drops.entry(reason).or_insert(0) += 1;
    }

    fn enqueue(st: &mut SimState, key: &str, bytes: Vec<u8>, rx_time: u64) {
        match st.queues.get_mut(key) {
            Some(q) => q.push_back((bytes, rx_time)),
            None => Self::drop_count(st, "no_tap"),
        }
    }

    /// Routes a generated packet (reply or Time Exceeded) from `from` and
    /// enqueues it at whichever vantage captures it. Generated packets that
    /// expire or fail to route are dropped; errors never beget errors.
    fn deliver_generated(
        &self,
        st: &mut SimState,
        mut bytes: Vec<u8>,
        from: usize,
        base_time: u64,
        packet_seq: u64,
    ) {
        let topo = &self.inner.topo;
        let Some((flow, initial_ttl)) = wire::packet_flow(&bytes) else {
            Self::drop_count(st, "generated_unroutable");
            return;
        };
        let w = match walk(topo, &mut st.ctx, from, &flow, packet_seq) {
            Ok(w) => w,
            Err(reason) => {
                Self::drop_count(st, reason);
                return;
            }
        };
        if usize::from(initial_ttl) < w.delivery_position() {
            Self::drop_count(st, "generated_expired");
            return;
        }
        let remaining = initial_ttl.saturating_sub(w.decrements() as u8);
        if wire::set_ttl(&mut bytes, remaining).is_err() {
            Self::drop_count(st, "generated_unroutable");
            return;
        }
        let rx = base_time + w.path_delay();
        match w.delivery {
            Delivery::Site { site } => {
                let key = site_key(&topo.sites[site].id);
                Self::enqueue(st, &key, bytes, rx);
            }
            Delivery::Host { origin } => {
                let node = topo.origins[origin].node;
                let key = client_key(&topo.nodes[node].name);
                Self::enqueue(st, &key, bytes, rx);
            }
        }
    }
}

const REPLY_SEQ_BIT: u64 = 1 << 63;

impl PacketChannel for SimTap {
    fn send(&self, packet: &[u8], tx_time_ns: u64) -> Result<(), ChannelError> {
        let (flow, ttl) = wire::packet_flow(packet).ok_or(ChannelError::Malformed("header"))?;
        let topo = &self.inner.topo;
        let mut st = self.inner.state.lock().unwrap();
        let st = &mut *st;

        // Per-vantage sequence numbers keep per-packet hashing deterministic
        // regardless of how sends from different vantages interleave.
        let counter = st.seqs.entry(self.queue_key.clone()).or_insert(0);
        *counter += 1;
        let seq = hash::fnv1a(self.queue_key.bytes()).wrapping_add(*counter);

        let w = match walk(topo, &mut st.ctx, self.inject, &flow, seq) {
            Ok(w) => w,
            Err(reason) => {
                Self::drop_count(st, reason);
                return Ok(());
            }
        };

        if ttl == 0 {
            Self::drop_count(st, "zero_ttl");
            return Ok(());
        }

        if usize::from(ttl) < w.delivery_position() {
            // Expired en route: the arrival at position `ttl` answers.
            let a = &w.arrivals[usize::from(ttl) - 1];
            if !a.is_fake && topo.nodes[a.node].no_te {
                Self::drop_count(st, "expired_no_te");
            } else if is_icmp_error(packet) {
                Self::drop_count(st, "error_expired");
            } else {
                match wire::build_time_exceeded(a.addr, packet, 64) {
                    Ok(te) => {
                        let base = tx_time_ns + a.cum_delay_ns;
                        self.deliver_generated(st, te, a.node, base, seq | REPLY_SEQ_BIT);
                    }
                    Err(_) => Self::drop_count(st, "te_unbuildable"),
                }
            }
            return Ok(());
        }

        let base = tx_time_ns + w.path_delay();
        match w.delivery {
            Delivery::Site { site } => {
                // The packet itself is visible to the site's capture, with
                // its TTL as received there.
                let mut seen = packet.to_vec();
                let remaining = ttl.saturating_sub(w.decrements() as u8);
                if wire::set_ttl(&mut seen, remaining).is_ok() {
                    let key = site_key(&topo.sites[site].id);
                    Self::enqueue(st, &key, seen, base);
                }
                if let Some(reply) = service_reply(packet, flow.family()) {
                    let from = topo.sites[site].node;
                    self.deliver_generated(st, reply, from, base, seq | REPLY_SEQ_BIT);
                }
            }
            Delivery::Host { origin } => {
                let o = &topo.origins[origin];
                if o.silent {
                    Self::drop_count(st, "silent_target");
                    return Ok(());
                }
                let built = match flow.protocol {
                    Protocol::Icmp => wire::build_echo_reply(packet, o.reply_ttl),
                    Protocol::Tcp => wire::build_tcp_rst(packet, o.reply_ttl),
                    Protocol::Udp if flow.dst_port == 53 => {
                        wire::build_dns_response(packet, o.reply_ttl)
                    }
                    // Closed UDP port: the host discards and reports it.
                    Protocol::Udp => {
                        wire::build_dest_unreachable(topo.nodes[o.node].addr, packet, o.reply_ttl)
                    }
                };
                let Ok(mut reply) = built else {
                    Self::drop_count(st, "reply_unbuildable");
                    return Ok(());
                };
                if o.mirror {
                    // Return path pinned to the ingress: retrace the probe's
                    // own path back to the sending vantage.
                    let links = w.decrements() as u8;
                    let remaining = o.reply_ttl.saturating_sub(links);
                    if wire::set_ttl(&mut reply, remaining).is_ok() {
                        let rx = tx_time_ns + 2 * w.path_delay();
                        Self::enqueue(st, &self.queue_key, reply, rx);
                    }
                } else {
                    self.deliver_generated(st, reply, o.node, base, seq | REPLY_SEQ_BIT);
                }
            }
        }
        Ok(())
    }

    fn recv(&self) -> Option<(Vec<u8>, u64)> {
        let mut st = self.inner.state.lock().unwrap();
        st.queues.get_mut(&self.queue_key)?.pop_front()
    }
}

/// Ground truth for end-to-end verification: which target prefixes flip,
/// by exhaustive enumeration of every (sender, flow) combination. Walks the
/// same routing code as the engine but refuses configurations whose outcome
/// is not a pure function of the flow, namely route-flip perturbation and
/// per-packet hashing on a multi-member group.
pub fn oracle_flip_set(
    topo: &Topology,
    perturbation: Perturbation,
    senders: &[SiteId],
    targets: &[(Prefix, Vec<FlowTuple>)],
) -> Result<BTreeSet<Prefix>, SimError> {
    if perturbation.flips_routes() {
        return Err(SimError::OracleUnderPerturbation);
    }
    for (node_idx, node) in topo.nodes.iter().enumerate() {
        if node.policy == Some(HashPolicy::PerPacket) {
            let has_group = topo
                .route_entries(node_idx)
                .any(|(_, e)| e.groups.iter().any(|g| g.len() > 1));
            if has_group {
                return Err(SimError::OraclePerPacket(node.name.clone()));
            }
        }
    }
    let sender_nodes: Vec<usize> = senders
        .iter()
        .map(|id| {
            topo.site_named(id)
                .map(|i| topo.sites[i].node)
                .ok_or_else(|| SimError::UnknownSite(id.to_string()))
        })
        .collect::<Result<_, _>>()?;

    let mut ctx = WalkCtx::new(perturbation, 0);
    let mut flipped = BTreeSet::new();
    for (prefix, flows) in targets {
        let mut sites_seen = BTreeSet::new();
        for &sender in &sender_nodes {
            for flow in flows {
                let Ok(w) = walk(topo, &mut ctx, sender, flow, 0) else {
                    continue;
                };
                let Delivery::Host { origin } = w.delivery else {
                    continue;
                };
                let o = &topo.origins[origin];
                if o.silent {
                    continue;
                }
                if o.mirror {
                    // Reply returns to the sender's own site.
                    sites_seen.insert(topo.site_at(sender).map(|s| s.id.clone()));
                    continue;
                }
                let reply = flow.reversed();
                let Ok(rw) = walk(topo, &mut ctx, o.node, &reply, 0) else {
                    continue;
                };
                if let Delivery::Site { site } = rw.delivery {
                    sites_seen.insert(Some(topo.sites[site].id.clone()));
                }
            }
            if sites_seen.len() >= 2 {
                break;
            }
        }
        if sites_seen.len() >= 2 {
            flipped.insert(*prefix);
        }
    }
    Ok(flipped)
}
