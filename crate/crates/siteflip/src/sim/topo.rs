//! Network topology: nodes, links with delays, per-node longest-prefix
//! routing with equal-cost groups, anycast sites, and client origins.
//!
//! Topologies load from a line-oriented text file. `#` starts a comment,
//! blank lines are skipped, and each line is a keyword followed by
//! positional and `key=value` fields:
//!
//! ```text
//! anycast 198.51.100.0/24
//! hashseed 7
//! node r1 addr=10.10.1.1 as=65010 policy=five_tuple
//! node edge addr=10.20.1.1 as=65020 load_threshold=0.5 no_te
//! site AMS node=ams fake=10.255.1.1
//! origin 10.50.0.0/24 node=c1 host=10.50.0.9 mirror
//! link r1 edge delay_ms=12.5
//! route r1 0.0.0.0/0 via=edge
//! route edge 198.51.100.0/24 via=a,b alt=c flip
//! ```
//!
//! A `route` names the owning node, the prefix, and one or more candidate
//! groups: `via=` is the preferred group, each `alt=` an alternative of
//! equal cost. Groups beyond the first are only ever used when route-flip
//! perturbation is enabled (`flip` marks the entry as eligible). Within the
//! active group a single member is used directly; larger groups go through
//! the owner's hash policy.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::net::IpAddr;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::hitlist::PrefixTable;
use crate::model::{Family, Prefix, SiteId};
use crate::sim::hash::HashPolicy;

#[derive(Debug, Error)]
pub enum TopoError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("topology: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub addr: IpAddr,
    pub asn: u32,
    /// Hash policy for equal-cost groups at this node. None means the node
    /// never load-balances; a multi-member group here is a topology error.
    pub policy: Option<HashPolicy>,
    /// When set, groups hash only while the run's load level exceeds this.
    /// Below it the preferred member carries everything.
    pub load_threshold: Option<f64>,
    /// Drop expiring packets silently instead of answering Time Exceeded.
    pub no_te: bool,
}

#[derive(Debug, Clone)]
pub struct Site {
    pub id: SiteId,
    pub node: usize,
    /// Terminal hop between the site router and the anycast service. Shows
    /// up in traceroutes toward the anycast prefix right before the
    /// destination answers, which is what lets a trace pin the site.
    pub fake_addr: IpAddr,
}

#[derive(Debug, Clone)]
pub struct Origin {
    pub prefix: Prefix,
    pub node: usize,
    pub host: IpAddr,
    /// Hosts in this prefix never answer probes.
    pub silent: bool,
    /// Replies retrace the probe's path backwards instead of following the
    /// reply's own routes. Models a client whose return path is pinned to
    /// the ingress, so different probing sites see their own replies.
    pub mirror: bool,
    /// Initial TTL on replies from this origin.
    pub reply_ttl: u8,
}

#[derive(Debug, Clone)]
pub struct RouteEntry {
    /// Candidate equal-cost groups, preferred first.
    pub groups: Vec<Vec<usize>>,
    /// Route-flip perturbation may rotate the preferred group.
    pub flip: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Topology {
    pub nodes: Vec<Node>,
    name_idx: HashMap<String, usize>,
    /// Symmetric propagation delays in nanoseconds, keyed both ways.
    links: HashMap<(usize, usize), u64>,
    routes: Vec<PrefixTable<RouteEntry>>,
    pub sites: Vec<Site>,
    site_by_node: HashMap<usize, usize>,
    pub origins: Vec<Origin>,
    origin_table: PrefixTable<usize>,
    pub anycast: Option<Prefix>,
    pub hash_seed: u64,
}

impl Topology {
    pub fn new() -> Self {
        Topology::default()
    }

    pub fn add_node(
        &mut self,
        name: &str,
        addr: IpAddr,
        asn: u32,
        policy: Option<HashPolicy>,
    ) -> Result<usize, TopoError> {
        if self.name_idx.contains_key(name) {
            return Err(TopoError::Invalid(format!("duplicate node {name}")));
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            name: name.to_string(),
            addr,
            asn,
            policy,
            load_threshold: None,
            no_te: false,
        });
        self.name_idx.insert(name.to_string(), idx);
        self.routes.push(PrefixTable::new());
        Ok(idx)
    }

    pub fn node_idx(&self, name: &str) -> Option<usize> {
        self.name_idx.get(name).copied()
    }

    pub fn add_link(&mut self, a: usize, b: usize, delay_ns: u64) {
        self.links.insert((a, b), delay_ns);
        self.links.insert((b, a), delay_ns);
    }

    pub fn link_delay(&self, a: usize, b: usize) -> Option<u64> {
        self.links.get(&(a, b)).copied()
    }

    pub fn add_route(&mut self, node: usize, prefix: Prefix, entry: RouteEntry) {
        self.routes[node].insert(prefix, entry);
    }

    pub fn add_site(&mut self, id: SiteId, node: usize, fake_addr: IpAddr) -> Result<(), TopoError> {
        if self.sites.iter().any(|s| s.id == id) {
            return Err(TopoError::Invalid(format!("duplicate site {id}")));
        }
        if self.site_by_node.contains_key(&node) {
            return Err(TopoError::Invalid(format!(
                "node {} already hosts a site",
                self.nodes[node].name
            )));
        }
        self.site_by_node.insert(node, self.sites.len());
        self.sites.push(Site { id, node, fake_addr });
        Ok(())
    }

    pub fn add_origin(&mut self, origin: Origin) -> Result<(), TopoError> {
        if !origin.prefix.contains(origin.host) {
            return Err(TopoError::Invalid(format!(
                "origin host {} outside {}",
                origin.host, origin.prefix
            )));
        }
        self.origin_table.insert(origin.prefix, self.origins.len());
        self.origins.push(origin);
        Ok(())
    }

    pub fn site_at(&self, node: usize) -> Option<&Site> {
        self.site_by_node.get(&node).map(|&i| &self.sites[i])
    }

    pub fn site_named(&self, id: &SiteId) -> Option<usize> {
        self.sites.iter().position(|s| &s.id == id)
    }

    pub fn origin_of(&self, addr: IpAddr) -> Option<(usize, &Origin)> {
        let idx = *self.origin_table.lookup(addr)?;
        Some((idx, &self.origins[idx]))
    }

    pub fn route_lookup(&self, node: usize, dst: IpAddr) -> Option<&RouteEntry> {
        self.routes[node].lookup(dst)
    }

    pub fn route_lookup_with_prefix(
        &self,
        node: usize,
        dst: IpAddr,
    ) -> Option<(Prefix, &RouteEntry)> {
        self.routes[node].lookup_with_prefix(dst)
    }

    pub fn route_entries(&self, node: usize) -> impl Iterator<Item = (Prefix, &RouteEntry)> {
        self.routes[node].entries()
    }

    /// Every target host across all non-silent origins, for default hitlists.
    pub fn origin_hosts(&self) -> Vec<(Prefix, IpAddr)> {
        self.origins
            .iter()
            .filter(|o| !o.silent)
            .map(|o| (o.prefix, o.host))
            .collect()
    }

    /// Structural checks routing relies on: route targets must be linked to
    /// the owning node, multi-member groups need a policy, sites and origins
    /// must reference known nodes (enforced at insert time via indices).
    pub fn validate(&self) -> Result<(), TopoError> {
        for (node, table) in self.routes.iter().enumerate() {
            for (prefix, entry) in table.entries() {
                if entry.groups.is_empty() || entry.groups.iter().any(|g| g.is_empty()) {
                    return Err(TopoError::Invalid(format!(
                        "{}: route {prefix} has an empty group",
                        self.nodes[node].name
                    )));
                }
                for group in &entry.groups {
                    for &nh in group {
                        if !self.links.contains_key(&(node, nh)) {
                            return Err(TopoError::Invalid(format!(
                                "{}: route {prefix} via unlinked node {}",
                                self.nodes[node].name, self.nodes[nh].name
                            )));
                        }
                    }
                    if group.len() > 1 && self.nodes[node].policy.is_none() {
                        return Err(TopoError::Invalid(format!(
                            "{}: equal-cost group for {prefix} but no hash policy",
                            self.nodes[node].name
                        )));
                    }
                }
            }
        }
        if self.sites.is_empty() {
            return Err(TopoError::Invalid("no sites defined".into()));
        }
        Ok(())
    }

    pub fn load_file(path: impl AsRef<Path>) -> Result<Topology, TopoError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TopoError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Topology::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, file: &str) -> Result<Topology, TopoError> {
        let mut topo = Topology::new();
        // Routes, sites and origins may reference nodes declared later, so
        // collect them and resolve after the node pass.
        let mut deferred: Vec<(usize, DeferredLine)> = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let keyword = fields.next().unwrap();
            let rest: Vec<&str> = fields.collect();
            let err = |msg: String| TopoError::Parse {
                file: file.to_string(),
                line: lineno,
                msg,
            };

            match keyword {
                "anycast" => {
                    let p = rest
                        .first()
                        .ok_or_else(|| err("anycast needs a prefix".into()))?;
                    topo.anycast =
                        Some(p.parse().map_err(|e| err(format!("bad prefix {p}: {e}")))?);
                }
                "hashseed" => {
                    let s = rest
                        .first()
                        .ok_or_else(|| err("hashseed needs a value".into()))?;
                    topo.hash_seed = s.parse().map_err(|_| err(format!("bad seed {s}")))?;
                }
                "node" => {
                    let name = rest
                        .first()
                        .ok_or_else(|| err("node needs a name".into()))?;
                    let kv = parse_kv(&rest[1..], &["no_te"]).map_err(err)?;
                    let addr: IpAddr = kv
                        .get("addr")
                        .ok_or_else(|| err(format!("node {name} missing addr=")))?
                        .parse()
                        .map_err(|_| err(format!("node {name}: bad addr")))?;
                    let asn: u32 = match kv.get("as") {
                        Some(v) => v.parse().map_err(|_| err(format!("node {name}: bad as=")))?,
                        None => 0,
                    };
                    let policy = match kv.get("policy") {
                        Some(v) => Some(
                            v.parse::<HashPolicy>()
                                .map_err(|_| err(format!("node {name}: unknown policy {v}")))?,
                        ),
                        None => None,
                    };
                    let idx = topo
                        .add_node(name, addr, asn, policy)
                        .map_err(|e| err(e.to_string()))?;
                    if let Some(v) = kv.get("load_threshold") {
                        let th: f64 =
                            v.parse().map_err(|_| err(format!("node {name}: bad threshold")))?;
                        topo.nodes[idx].load_threshold = Some(th);
                    }
                    if kv.contains_key("no_te") {
                        topo.nodes[idx].no_te = true;
                    }
                }
                "site" | "origin" | "link" | "route" => {
                    deferred.push((
                        lineno,
                        DeferredLine {
                            keyword: keyword.to_string(),
                            fields: rest.iter().map(|s| s.to_string()).collect(),
                        },
                    ));
                }
                other => return Err(err(format!("unknown keyword {other}"))),
            }
        }

        for (lineno, d) in deferred {
            topo.apply_deferred(&d, file, lineno)?;
        }
        topo.validate()?;
        Ok(topo)
    }

    fn apply_deferred(
        &mut self,
        d: &DeferredLine,
        file: &str,
        lineno: usize,
    ) -> Result<(), TopoError> {
        let err = |msg: String| TopoError::Parse {
            file: file.to_string(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = d.fields.iter().map(|s| s.as_str()).collect();
        let resolve = |name: &str| {
            self.name_idx
                .get(name)
                .copied()
                .ok_or_else(|| err(format!("unknown node {name}")))
        };
        match d.keyword.as_str() {
            "site" => {
                let id: SiteId = fields
                    .first()
                    .ok_or_else(|| err("site needs an id".into()))?
                    .parse()
                    .map_err(|e| err(format!("bad site id: {e}")))?;
                let kv = parse_kv(&fields[1..], &[]).map_err(err)?;
                let node = resolve(kv.get("node").ok_or_else(|| err("site missing node=".into()))?)?;
                let fake: IpAddr = kv
                    .get("fake")
                    .ok_or_else(|| err("site missing fake=".into()))?
                    .parse()
                    .map_err(|_| err("site: bad fake addr".into()))?;
                self.add_site(id, node, fake).map_err(|e| err(e.to_string()))
            }
            "origin" => {
                let prefix: Prefix = fields
                    .first()
                    .ok_or_else(|| err("origin needs a prefix".into()))?
                    .parse()
                    .map_err(|e| err(format!("bad prefix: {e}")))?;
                let kv = parse_kv(&fields[1..], &["silent", "mirror"]).map_err(err)?;
                let node =
                    resolve(kv.get("node").ok_or_else(|| err("origin missing node=".into()))?)?;
                let host: IpAddr = kv
                    .get("host")
                    .ok_or_else(|| err("origin missing host=".into()))?
                    .parse()
                    .map_err(|_| err("origin: bad host addr".into()))?;
                let reply_ttl = match kv.get("reply_ttl") {
                    Some(v) => v.parse().map_err(|_| err("origin: bad reply_ttl".into()))?,
                    None => 64,
                };
                self.add_origin(Origin {
                    prefix,
                    node,
                    host,
                    silent: kv.contains_key("silent"),
                    mirror: kv.contains_key("mirror"),
                    reply_ttl,
                })
                .map_err(|e| err(e.to_string()))
            }
            "link" => {
                if fields.len() < 2 {
                    return Err(err("link needs two nodes".into()));
                }
                let a = resolve(fields[0])?;
                let b = resolve(fields[1])?;
                let kv = parse_kv(&fields[2..], &[]).map_err(err)?;
                let ms: f64 = kv
                    .get("delay_ms")
                    .ok_or_else(|| err("link missing delay_ms=".into()))?
                    .parse()
                    .map_err(|_| err("link: bad delay".into()))?;
                if !(0.0..=60_000.0).contains(&ms) {
                    return Err(err(format!("link delay {ms} out of range")));
                }
                self.add_link(a, b, (ms * 1_000_000.0).round() as u64);
                Ok(())
            }
            "route" => {
                if fields.len() < 2 {
                    return Err(err("route needs a node and prefix".into()));
                }
                let node = resolve(fields[0])?;
                let prefix: Prefix = fields[1]
                    .parse()
                    .map_err(|e| err(format!("bad prefix: {e}")))?;
                let mut groups: Vec<Vec<usize>> = Vec::new();
                let mut flip = false;
                for f in &fields[2..] {
                    if *f == "flip" {
                        flip = true;
                    } else if let Some(list) = f.strip_prefix("via=").or(f.strip_prefix("alt=")) {
                        let is_via = f.starts_with("via=");
                        let mut group = Vec::new();
                        for name in list.split(',') {
                            group.push(resolve(name)?);
                        }
                        if is_via && !groups.is_empty() {
                            return Err(err("route has more than one via=".into()));
                        }
                        if !is_via && groups.is_empty() {
                            return Err(err("alt= before via=".into()));
                        }
                        groups.push(group);
                    } else {
                        return Err(err(format!("unexpected route field {f}")));
                    }
                }
                if groups.is_empty() {
                    return Err(err("route missing via=".into()));
                }
                self.add_route(node, prefix, RouteEntry { groups, flip });
                Ok(())
            }
            _ => unreachable!(),
        }
    }
}

struct DeferredLine {
    keyword: String,
    fields: Vec<String>,
}

fn parse_kv<'a>(
    fields: &[&'a str],
    bare_flags: &[&str],
) -> Result<HashMap<String, &'a str>, String> {
    let mut kv = HashMap::new();
    for f in fields {
        if let Some((k, v)) = f.split_once('=') {
            kv.insert(k.to_string(), v);
        } else if bare_flags.contains(f) {
            kv.insert(f.to_string(), "");
        } else {
            return Err(format!("unexpected field {f}"));
        }
    }
    Ok(kv)
}

/// Knobs for [`random_topology`]. Kept explicit so failing seeds reproduce
/// from the printed parameters alone.
#[derive(Debug, Clone, Copy)]
pub struct RandomTopoParams {
    pub sites: usize,
    pub transit_layers: usize,
    pub layer_width: usize,
    pub clients: usize,
    pub prefixes_per_client: usize,
}

impl Default for RandomTopoParams {
    fn default() -> Self {
        RandomTopoParams {
            sites: 3,
            transit_layers: 2,
            layer_width: 3,
            clients: 4,
            prefixes_per_client: 4,
        }
    }
}

/// Builds a layered random topology: anycast sites at the bottom, transit
/// layers above them, client edge nodes on top. Adjacent layers are fully
/// linked. Forward routes (toward client prefixes) pick one next hop per
/// node per prefix, so the probe direction is deterministic; return routes
/// (toward the anycast prefix) get equal-cost groups with per-node policies
/// drawn from `policies`, which is where flipping can arise. Every choice
/// derives from `seed`.
pub fn random_topology(
    seed: u64,
    params: RandomTopoParams,
    policies: &[HashPolicy],
) -> Topology {
    assert!(params.sites >= 1 && params.sites <= 200);
    assert!(params.clients >= 1 && params.clients <= 200);
    assert!(params.layer_width >= 1);
    assert!(!policies.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut topo = Topology::new();
    topo.anycast = Some("198.51.100.0/24".parse().unwrap());
    topo.hash_seed = rng.gen();

    let site_names = ["AMS", "TYO", "GRU", "IAD", "SYD", "LHR", "FRA", "JNB"];
    let mut site_nodes = Vec::new();
    for s in 0..params.sites {
        let name = format!("site{s}");
        let idx = topo
            .add_node(&name, addr4(10, 200, s as u8, 1), 64500, None)
            .unwrap();
        let id: SiteId = site_names
            .get(s)
            .map(|n| n.to_string())
            .unwrap_or_else(|| format!("S{s:02}"))
            .parse()
            .unwrap();
        topo.add_site(id, idx, addr4(10, 255, s as u8, 1)).unwrap();
        site_nodes.push(idx);
    }

    // layers[0] is the site row; each transit node gets a random policy so
    // equal-cost groups are legal everywhere.
    let mut layers: Vec<Vec<usize>> = vec![site_nodes.clone()];
    for l in 0..params.transit_layers {
        let mut row = Vec::new();
        for w in 0..params.layer_width {
            let name = format!("t{l}x{w}");
            let policy = *policies.choose(&mut rng).unwrap();
            let asn = 65000 + l as u32;
            let idx = topo
                .add_node(&name, addr4(10, 10 + l as u8, w as u8, 1), asn, Some(policy))
                .unwrap();
            row.push(idx);
        }
        layers.push(row);
    }

    let mut client_nodes = Vec::new();
    for c in 0..params.clients {
        let name = format!("client{c}");
        let policy = *policies.choose(&mut rng).unwrap();
        let idx = topo
            .add_node(&name, addr4(10, 100, c as u8, 1), 64600 + c as u32, Some(policy))
            .unwrap();
        client_nodes.push(idx);
    }
    layers.push(client_nodes.clone());

    // Full bipartite links between adjacent layers, random 1..=40 ms.
    for pair in layers.windows(2) {
        for &a in &pair[0] {
            for &b in &pair[1] {
                let ms = rng.gen_range(1..=40);
                topo.add_link(a, b, ms * 1_000_000);
            }
        }
    }

    // Return routes toward the anycast prefix: each node in layer l routes
    // via a random nonempty subset of layer l-1 (its equal-cost group).
    let anycast = topo.anycast.unwrap();
    for l in 1..layers.len() {
        let below = layers[l - 1].clone();
        for &node in &layers[l].clone() {
            let size = rng.gen_range(1..=below.len().min(3));
            let mut group = below.clone();
            group.shuffle(&mut rng);
            group.truncate(size);
            group.sort_unstable();
            topo.add_route(node, anycast, RouteEntry { groups: vec![group], flip: false });
        }
    }

    // Client prefixes and forward routes: one deterministic next hop per
    // (node, prefix), threading up through the layers to the owning client.
    for (c, &client) in client_nodes.iter().enumerate() {
        for p in 0..params.prefixes_per_client {
            let prefix: Prefix = format!("10.{}.{}.0/24", 50 + c, p).parse().unwrap();
            let host = addr4(10, 50 + c as u8, p as u8, 1);
            topo.add_origin(Origin {
                prefix,
                node: client,
                host,
                silent: false,
                mirror: false,
                reply_ttl: 64,
            })
            .unwrap();
            // Route from every non-client layer upward: pick the next hop in
            // the layer above, except the top transit layer which must pick
            // the owning client.
            for l in 0..layers.len() - 1 {
                let above = &layers[l + 1];
                for &node in &layers[l] {
                    let nh = if l + 1 == layers.len() - 1 {
                        client
                    } else {
                        *above.choose(&mut rng).unwrap()
                    };
                    topo.add_route(node, prefix, RouteEntry { groups: vec![vec![nh]], flip: false });
                }
            }
        }
    }

    topo.validate().expect("generated topology is structurally valid");
    topo
}

fn addr4(a: u8, b: u8, c: u8, d: u8) -> IpAddr {
    IpAddr::V4(std::net::Ipv4Addr::new(a, b, c, d))
}

/// Straight-line topology with `hops` links between the single site and the
/// target's origin node: site, hops-1 routers, then the client. A probe
/// from the site reaches the target with TTL exactly `hops`, and every
/// smaller TTL expires at router `ttl`. Links are 10 ms each.
pub fn chain_topology(hops: usize) -> Topology {
    assert!((1..=30).contains(&hops));
    let mut topo = Topology::new();
    topo.anycast = Some("198.51.100.0/24".parse().unwrap());
    let site = topo.add_node("site0", addr4(10, 200, 0, 1), 64500, None).unwrap();
    topo.add_site("AMS".parse().unwrap(), site, addr4(10, 255, 0, 1)).unwrap();
    let client = topo.add_node("client0", addr4(10, 100, 0, 1), 64600, None).unwrap();
    let prefix: Prefix = "10.50.0.0/24".parse().unwrap();
    topo.add_origin(Origin {
        prefix,
        node: client,
        host: addr4(10, 50, 0, 1),
        silent: false,
        mirror: false,
        reply_ttl: 64,
    })
    .unwrap();

    let mut path = vec![site];
    for i in 0..hops - 1 {
        let r = topo
            .add_node(&format!("r{}", i + 1), addr4(10, 30, i as u8, 1), 65000, None)
            .unwrap();
        path.push(r);
    }
    path.push(client);
    let anycast = topo.anycast.unwrap();
    for pair in path.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        topo.add_link(a, b, 10_000_000);
        topo.add_route(a, prefix, RouteEntry { groups: vec![vec![b]], flip: false });
        topo.add_route(b, anycast, RouteEntry { groups: vec![vec![a]], flip: false });
    }
    topo.validate().unwrap();
    topo
}

/// Renders a topology back to the text format, mainly so generated
/// topologies can be dumped for postmortems.
pub fn dump(topo: &Topology) -> String {
    let mut out = String::new();
    if let Some(p) = topo.anycast {
        let _ = writeln!(out, "anycast {p}");
    }
    let _ = writeln!(out, "hashseed {}", topo.hash_seed);
    for n in &topo.nodes {
        let _ = write!(out, "node {} addr={} as={}", n.name, n.addr, n.asn);
        if let Some(p) = n.policy {
            let _ = write!(out, " policy={}", p.as_str());
        }
        if let Some(t) = n.load_threshold {
            let _ = write!(out, " load_threshold={t}");
        }
        if n.no_te {
            let _ = write!(out, " no_te");
        }
        let _ = writeln!(out);
    }
    for s in &topo.sites {
        let _ = writeln!(out, "site {} node={} fake={}", s.id, topo.nodes[s.node].name, s.fake_addr);
    }
    for o in &topo.origins {
        let _ = write!(
            out,
            "origin {} node={} host={}",
            o.prefix, topo.nodes[o.node].name, o.host
        );
        if o.silent {
            let _ = write!(out, " silent");
        }
        if o.mirror {
            let _ = write!(out, " mirror");
        }
        if o.reply_ttl != 64 {
            let _ = write!(out, " reply_ttl={}", o.reply_ttl);
        }
        let _ = writeln!(out);
    }
    let mut seen = std::collections::HashSet::new();
    let mut links: Vec<(usize, usize, u64)> = Vec::new();
    for (&(a, b), &d) in &topo.links {
        let key = (a.min(b), a.max(b));
        if seen.insert(key) {
            links.push((key.0, key.1, d));
        }
    }
    links.sort_unstable();
    for (a, b, d) in links {
        let _ = writeln!(
            out,
            "link {} {} delay_ms={}",
            topo.nodes[a].name,
            topo.nodes[b].name,
            d as f64 / 1_000_000.0
        );
    }
    for (node, table) in topo.routes.iter().enumerate() {
        let mut rows: Vec<(Prefix, &RouteEntry)> = table.entries().collect();
        rows.sort_by_key(|(p, _)| *p);
        for (prefix, entry) in rows {
            let _ = write!(out, "route {} {prefix}", topo.nodes[node].name);
            for (i, group) in entry.groups.iter().enumerate() {
                let names: Vec<&str> =
                    group.iter().map(|&n| topo.nodes[n].name.as_str()).collect();
                let kw = if i == 0 { "via" } else { "alt" };
                let _ = write!(out, " {kw}={}", names.join(","));
            }
            if entry.flip {
                let _ = write!(out, " flip");
            }
            let _ = writeln!(out);
        }
    }
    out
}

/// Route lookup honoring default routes; used by tests that poke topologies
/// directly. Family mismatch simply fails the lookup.
pub fn lpm_for_tests(topo: &Topology, node: usize, dst: IpAddr) -> Option<Vec<Vec<usize>>> {
    topo.route_lookup(node, dst).map(|e| e.groups.clone())
}

impl Family {
    /// Loopback-free documentation address for this family, handy in tests.
    pub fn example_addr(self) -> IpAddr {
        match self {
            Family::V4 => "192.0.2.1".parse().unwrap(),
            Family::V6 => "2001:db8::1".parse().unwrap(),
        }
    }
}
