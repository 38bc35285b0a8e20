//! Shared builders for the integration suites: range-shaped record streams
//! whose marginal counts are fixed by interval arithmetic, scenario topology
//! text with a swappable balancer policy, trace fixtures, and an RFC 1071
//! reference accumulator kept separate from the implementation's checksum.
#![allow(dead_code)]

use std::net::{IpAddr, Ipv4Addr};
use std::path::PathBuf;

use siteflip::analysis::{detect_flips, FlipReport};
use siteflip::model::{FlowTuple, Prefix, Protocol, SiteId};
use siteflip::prober::{RecordKind, ReplyRecord};
use siteflip::traceroute::{Hop, TracePath};

pub const EPOCH_NS: u64 = 1_700_000_000_000_000_000;

/// Index ranges freezing the synthetic census used by the table checks.
/// Every range is half-open over one shared /24 universe, so each marginal
/// and pairwise count below is plain interval arithmetic:
///
///   ICMP responds on [0, 3_708_348) and flips on [0, 50_495) plus
///   [1_175_173, 1_276_323), 151_645 prefixes.
///   TCP responds on [0, 1_175_173) and [3_708_348, 3_820_285), 1_287_110
///   prefixes, and flips on [0, 45_069), [50_495, 55_475) and
///   [3_708_348, 3_716_006), 57_707.
///   UDP responds on [0, 210_573) and flips on [0, 6_933) and
///   [55_475, 58_765), 10_223.
///
/// The overlaps are deliberate: restricted to prefixes responsive under
/// both ICMP and TCP, [0, 45_069) flips under both, [45_069, 50_495) under
/// ICMP alone and [50_495, 55_475) under TCP alone.
pub const UNIVERSE: u32 = 3_820_285;
pub const ICMP_RESPONSIVE: &[(u32, u32)] = &[(0, 3_708_348)];
pub const ICMP_FLIPPED: &[(u32, u32)] = &[(0, 50_495), (1_175_173, 1_276_323)];
pub const TCP_RESPONSIVE: &[(u32, u32)] = &[(0, 1_175_173), (3_708_348, 3_820_285)];
pub const TCP_FLIPPED: &[(u32, u32)] = &[(0, 45_069), (50_495, 55_475), (3_708_348, 3_716_006)];
pub const UDP_RESPONSIVE: &[(u32, u32)] = &[(0, 210_573)];
pub const UDP_FLIPPED: &[(u32, u32)] = &[(0, 6_933), (55_475, 58_765)];

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn site(name: &str) -> SiteId {
    name.parse().unwrap()
}

pub fn v4(s: &str) -> IpAddr {
    s.parse().unwrap()
}

/// The i-th /24 of the synthetic universe. Offsetting by one /24 keeps
/// index zero off the unroutable 0.0.0.0/24.
pub fn prefix24(i: u32) -> Prefix {
    Prefix::new(IpAddr::V4(Ipv4Addr::from((i + 256) << 8)), 24).unwrap()
}

/// Interval arithmetic over disjoint half-open ranges; the independent
/// count the reports must land on.
pub fn span(ranges: &[(u32, u32)]) -> u64 {
    ranges.iter().map(|(a, b)| u64::from(b - a)).sum()
}

/// One reply record for `prefix` captured at `rx`. Site A is every
/// prefix's first catchment, so adding a site B record is what makes a
/// prefix flip.
pub fn reply_at(run_id: u32, protocol: Protocol, prefix: Prefix, rx: &SiteId) -> ReplyRecord {
    let (src_port, dst_port) = match protocol {
        Protocol::Icmp => (0, 0),
        Protocol::Tcp => (62_000, 80),
        Protocol::Udp => (62_000, 53),
    };
    ReplyRecord {
        run_id,
        protocol,
        target_addr: prefix.addr_at(1).unwrap(),
        target_prefix: prefix,
        variation_id: 0,
        src_addr: v4("198.51.100.1"),
        src_port,
        dst_port,
        tx_site: site("A"),
        rx_site: rx.clone(),
        tx_time_ns: EPOCH_NS,
        rx_time_ns: EPOCH_NS + 80_000_000,
        reply_ttl: 60,
        kind: RecordKind::Reply,
        hop_addr: None,
    }
}

/// Streams one site-A reply per index in `responsive` and one site-B reply
/// per index in `flipped`, lazily, so the multi-million-prefix tables never
/// materialize a record vector.
pub fn range_records<'a>(
    run_id: u32,
    protocol: Protocol,
    responsive: &'a [(u32, u32)],
    flipped: &'a [(u32, u32)],
) -> impl Iterator<Item = ReplyRecord> + 'a {
    let a = site("A");
    let b = site("B");
    let resp = responsive
        .iter()
        .flat_map(|&(lo, hi)| lo..hi)
        .map(move |i| reply_at(run_id, protocol, prefix24(i), &a));
    let flip = flipped
        .iter()
        .flat_map(|&(lo, hi)| lo..hi)
        .map(move |i| reply_at(run_id, protocol, prefix24(i), &b));
    resp.chain(flip)
}

pub fn range_report(
    run_id: u32,
    protocol: Protocol,
    responsive: &[(u32, u32)],
    flipped: &[(u32, u32)],
) -> FlipReport {
    detect_flips(range_records(run_id, protocol, responsive, flipped)).unwrap()
}

/// Per-run reports where prefix j responds every run and flips in exactly
/// the first `counts[j]` runs.
pub fn planted_runs(counts: &[u32], runs: u32) -> Vec<FlipReport> {
    let a = site("A");
    let b = site("B");
    (0..runs)
        .map(|r| {
            let mut records = Vec::new();
            for (j, &flips_in) in counts.iter().enumerate() {
                let prefix = prefix24(j as u32);
                records.push(reply_at(r + 1, Protocol::Icmp, prefix, &a));
                if r < flips_in {
                    records.push(reply_at(r + 1, Protocol::Icmp, prefix, &b));
                }
            }
            detect_flips(records).unwrap()
        })
        .collect()
}

/// Two-site latency spread for one prefix: 80 ms and 96.6 ms one-way at the
/// near site average to 88.3 ms, one 103.2 ms sample at the far site.
pub fn latency_records() -> Vec<ReplyRecord> {
    let samples = [("NEAR", 80_000_000), ("NEAR", 96_600_000), ("FAR", 103_200_000)];
    samples
        .iter()
        .map(|(name, oneway_ns)| {
            let mut r = reply_at(1, Protocol::Icmp, prefix24(0), &site(name));
            r.rx_time_ns = r.tx_time_ns + oneway_ns;
            r
        })
        .collect()
}

/// A forked pair of three-hop traces: both pass `shared` at TTL 1 and end
/// at `target`, but disagree at TTL 2, so the smallest divergence is TTL 2
/// with exactly the two fork addresses.
pub fn forked_traces(shared: IpAddr, fork_a: IpAddr, fork_b: IpAddr, target: IpAddr) -> Vec<TracePath> {
    let trace = |src: &str, fork: IpAddr| {
        let flow = FlowTuple {
            src: v4(src),
            dst: target,
            protocol: Protocol::Icmp,
            src_port: 0,
            dst_port: 0,
        };
        let hop = |ttl: u8, addr: IpAddr| Hop {
            ttl,
            addr: Some(addr),
            rx_site: Some(site("A")),
            rtt_ms: Some(10.0 * f64::from(ttl)),
        };
        TracePath {
            target,
            flow,
            hops: vec![hop(1, shared), hop(2, fork), hop(3, target)],
            dest_reached: true,
        }
    };
    vec![trace("198.51.100.1", fork_a), trace("198.51.100.2", fork_b)]
}

/// The flipping-catchment scenario with the balancer's hash policy swapped
/// in: one client AS behind a single balancer whose equal-cost group
/// reaches both anycast sites.
pub fn balancer_scenario(policy: &str, hash_seed: u64) -> String {
    format!(
        "anycast 198.51.100.0/24\n\
         hashseed {hash_seed}\n\
         \n\
         node ams addr=10.200.0.1 as=64500\n\
         node tyo addr=10.200.1.1 as=64500\n\
         node lb  addr=10.10.0.1  as=65010 policy={policy}\n\
         node c1  addr=10.100.0.1 as=64601\n\
         \n\
         site AMS node=ams fake=10.255.0.1\n\
         site TYO node=tyo fake=10.255.1.1\n\
         \n\
         origin 10.50.0.0/24 node=c1 host=10.50.0.1\n\
         \n\
         link ams lb delay_ms=10\n\
         link tyo lb delay_ms=40\n\
         link lb  c1 delay_ms=5\n\
         \n\
         route c1  198.51.100.0/24 via=lb\n\
         route lb  198.51.100.0/24 via=ams,tyo\n\
         route lb  10.50.0.0/24    via=c1\n\
         route ams 10.50.0.0/24    via=lb\n\
         route tyo 10.50.0.0/24    via=lb\n"
    )
}

/// The same scenario with `depth - 1` plain routers between the client and
/// the balancer, so the first hop where flow-varied paths can disagree sits
/// at TTL `depth + 1` as seen from the client.
pub fn deep_balancer_scenario(depth: usize) -> String {
    assert!(depth >= 1);
    let mut text = String::from(
        "anycast 198.51.100.0/24\n\
         hashseed 0\n\
         \n\
         node ams addr=10.200.0.1 as=64500\n\
         node tyo addr=10.200.1.1 as=64500\n\
         node lb  addr=10.10.0.1  as=65010 policy=five_tuple\n\
         node c1  addr=10.100.0.1 as=64601\n",
    );
    for j in 1..depth {
        text.push_str(&format!("node r{j} addr=10.60.{j}.1 as=65020\n"));
    }
    text.push_str(
        "\n\
         site AMS node=ams fake=10.255.0.1\n\
         site TYO node=tyo fake=10.255.1.1\n\
         \n\
         origin 10.50.0.0/24 node=c1 host=10.50.0.1\n\
         \n\
         link ams lb delay_ms=10\n\
         link tyo lb delay_ms=10\n",
    );
    // chain c1 - r1 - ... - r{depth-1} - lb
    let chain: Vec<String> = std::iter::once("c1".to_string())
        .chain((1..depth).map(|j| format!("r{j}")))
        .chain(std::iter::once("lb".to_string()))
        .collect();
    for pair in chain.windows(2) {
        text.push_str(&format!("link {} {} delay_ms=10\n", pair[0], pair[1]));
    }
    text.push('\n');
    // toward the anycast prefix: up the chain, then the balancer's group
    for pair in chain.windows(2) {
        text.push_str(&format!("route {} 198.51.100.0/24 via={}\n", pair[0], pair[1]));
    }
    text.push_str("route lb 198.51.100.0/24 via=ams,tyo\n");
    // toward the origin: down the chain from both sites
    text.push_str("route ams 10.50.0.0/24 via=lb\n");
    text.push_str("route tyo 10.50.0.0/24 via=lb\n");
    for pair in chain.windows(2).rev() {
        text.push_str(&format!("route {} 10.50.0.0/24 via={}\n", pair[1], pair[0]));
    }
    text
}

pub fn hex_fixture(name: &str) -> Vec<u8> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(format!("{name}.hex"));
    let hex = std::fs::read_to_string(path).unwrap();
    let hex = hex.trim();
    (0..hex.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&hex[i..i + 2], 16).unwrap())
        .collect()
}

/// Reference RFC 1071 accumulator: concatenate, pad, sum 16-bit words with
/// end-around carry, complement. A span whose stored checksum is intact
/// folds to zero.
pub fn rfc1071(parts: &[&[u8]]) -> u16 {
    let mut bytes: Vec<u8> = parts.concat();
    if bytes.len() % 2 == 1 {
        bytes.push(0);
    }
    let mut sum: u32 = 0;
    for pair in bytes.chunks(2) {
        sum += u32::from(u16::from_be_bytes([pair[0], pair[1]]));
    }
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// IPv4 pseudo header for the embedded transport checksum.
pub fn v4_pseudo(packet: &[u8]) -> Vec<u8> {
    let l4_len = (packet.len() - 20) as u16;
    let mut p = Vec::with_capacity(12);
    p.extend_from_slice(&packet[12..20]);
    p.push(0);
    p.push(packet[9]);
    p.extend_from_slice(&l4_len.to_be_bytes());
    p
}

/// IPv6 pseudo header for the embedded transport checksum.
pub fn v6_pseudo(packet: &[u8]) -> Vec<u8> {
    let l4_len = (packet.len() - 40) as u32;
    let mut p = Vec::with_capacity(40);
    p.extend_from_slice(&packet[8..40]);
    p.extend_from_slice(&l4_len.to_be_bytes());
    p.extend_from_slice(&[0, 0, 0]);
    p.push(packet[6]);
    p
}
