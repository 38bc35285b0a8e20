//! Probe packet construction and reply dissection.
//!
//! Probes are complete IP packets so the simulator and a raw-socket backend
//! see identical bytes. Three probe shapes exist:
//!
//! * ICMP echo request. run_id sits in the identifier (low 16 bits),
//!   variation_id in the sequence number, and the payload carries
//!   `[tx_time:8][target:4|16][run_id:4][variation_id:1][opt_out_url]` so a
//!   reflected reply identifies itself without any correlation state.
//! * TCP SYN|ACK to elicit an RST. RSTs echo nothing, so the only embedded
//!   hint is the sequence number (low 32 bits of tx_time); everything else
//!   resolves through correlation tables.
//! * UDP DNS A query. The QNAME first label is
//!   `<variation_id>-<run_id>-<tx_time>` because DNS responses echo the
//!   question but not arbitrary payload. The opt-out URL doubles as the
//!   query domain and must therefore be a plain DNS name for UDP.
//!
//! Every probe stays under 1200 bytes to survive tunnels without
//! fragmenting.

use std::net::IpAddr;

use thiserror::Error;

use crate::model::{Family, FlowTuple, ModelError, Protocol};

/// Probe size cap in bytes, IP header included.
pub const MAX_PROBE_BYTES: usize = 1200;

/// Fixed TTL for probes unless a caller (traceroute) overrides it.
pub const DEFAULT_TTL: u8 = 64;

/// Everything needed to lay out one probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSpec {
    pub flow: FlowTuple,
    pub run_id: u32,
    pub variation_id: u8,
    /// Transmit timestamp, nanoseconds. Low bits feed the TCP sequence
    /// number and the DNS transaction id.
    pub tx_time: u64,
    pub ttl: u8,
    /// ASCII string identifying the experiment and how to opt out. Embedded
    /// into ICMP/TCP payloads verbatim; used as the DNS query domain for UDP.
    pub opt_out_url: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error(transparent)]
    Flow(#[from] ModelError),
    #[error("probe would be {size} bytes, cap is {MAX_PROBE_BYTES}")]
    PayloadTooLarge { size: usize },
    #[error("opt_out_url must be ASCII")]
    UrlNotAscii,
    #[error("UDP probes use opt_out_url as DNS domain; {0:?} is not a valid name")]
    BadDomain(String),
    #[error("packet too short to transform")]
    Truncated,
}

/// RFC 1071 internet checksum: one's-complement sum of big-endian 16-bit
/// words, odd trailing byte padded with zero, folded and complemented.
pub fn internet_checksum(bytes: &[u8]) -> u16 {
    let mut sum: u32 = 0;
    let mut chunks = bytes.chunks_exact(2);
    for w in &mut chunks {
        sum += u32::from(u16::from_be_bytes([w[0], w[1]]));
    }
    if let [tail] = chunks.remainder() {
        sum += u32::from(u16::from_be_bytes([*tail, 0]));
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

fn addr_bytes(addr: IpAddr) -> Vec<u8> {
    match addr {
        IpAddr::V4(a) => a.octets().to_vec(),
        IpAddr::V6(a) => a.octets().to_vec(),
    }
}

/// Checksum of an L4 segment together with its pseudo-header.
fn pseudo_checksum(src: IpAddr, dst: IpAddr, proto: u8, seg: &[u8]) -> u16 {
    let mut buf = Vec::with_capacity(40 + seg.len());
    buf.extend_from_slice(&addr_bytes(src));
    buf.extend_from_slice(&addr_bytes(dst));
    match src {
        IpAddr::V4(_) => {
            buf.push(0);
            buf.push(proto);
            buf.extend_from_slice(&(seg.len() as u16).to_be_bytes());
        }
        IpAddr::V6(_) => {
            buf.extend_from_slice(&(seg.len() as u32).to_be_bytes());
            buf.extend_from_slice(&[0, 0, 0, proto]);
        }
    }
    buf.extend_from_slice(seg);
    internet_checksum(&buf)
}

fn ipv4_header(payload_len: usize, ttl: u8, proto: u8, src: IpAddr, dst: IpAddr) -> Vec<u8> {
    let total = 20 + payload_len;
    let mut h = Vec::with_capacity(20);
    h.extend_from_slice(&[0x45, 0x00]);
    h.extend_from_slice(&(total as u16).to_be_bytes());
    h.extend_from_slice(&[0, 0, 0, 0]); // identification, flags, fragment offset
    h.push(ttl);
    h.push(proto);
    h.extend_from_slice(&[0, 0]); // checksum placeholder
    h.extend_from_slice(&addr_bytes(src));
    h.extend_from_slice(&addr_bytes(dst));
    let ck = internet_checksum(&h);
    h[10..12].copy_from_slice(&ck.to_be_bytes());
    h
}

fn ipv6_header(payload_len: usize, next: u8, hop_limit: u8, src: IpAddr, dst: IpAddr) -> Vec<u8> {
    let mut h = Vec::with_capacity(40);
    h.extend_from_slice(&0x6000_0000u32.to_be_bytes());
    h.extend_from_slice(&(payload_len as u16).to_be_bytes());
    h.push(next);
    h.push(hop_limit);
    h.extend_from_slice(&addr_bytes(src));
    h.extend_from_slice(&addr_bytes(dst));
    h
}

fn ip_header(family: Family, payload_len: usize, ttl: u8, proto: u8, src: IpAddr, dst: IpAddr) -> Vec<u8> {
    match family {
        Family::V4 => ipv4_header(payload_len, ttl, proto, src, dst),
        Family::V6 => ipv6_header(payload_len, proto, ttl, src, dst),
    }
}

fn icmp_echo_type(family: Family, reply: bool) -> u8 {
    match (family, reply) {
        (Family::V4, false) => 8,
        (Family::V4, true) => 0,
        (Family::V6, false) => 128,
        (Family::V6, true) => 129,
    }
}

fn finish(family: Family, seg: Vec<u8>, spec_ttl: u8, proto: u8, src: IpAddr, dst: IpAddr) -> Result<Vec<u8>, WireError> {
    let mut pkt = ip_header(family, seg.len(), spec_ttl, proto, src, dst);
    pkt.extend_from_slice(&seg);
    if pkt.len() > MAX_PROBE_BYTES {
        return Err(WireError::PayloadTooLarge { size: pkt.len() });
    }
    Ok(pkt)
}

/// Encodes a DNS name: dotted labels, each at most 63 bytes. Rejects inputs
/// that cannot be a hostname (empty labels, slashes, non-ASCII).
fn encode_qname(first_label: &str, domain: &str) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    let labels = std::iter::once(first_label).chain(domain.split('.'));
    for label in labels {
        if label.is_empty()
            || label.len() > 63
            || !label.is_ascii()
            || label.contains(|c: char| c == '/' || c == ':' || c.is_whitespace())
        {
            return Err(WireError::BadDomain(domain.to_string()));
        }
        out.push(label.len() as u8);
        out.extend_from_slice(label.as_bytes());
    }
    out.push(0);
    if out.len() > 255 {
        return Err(WireError::BadDomain(domain.to_string()));
    }
    Ok(out)
}

/// Builds the complete probe packet for `spec`, IP header included.
pub fn build_probe(spec: &ProbeSpec) -> Result<Vec<u8>, WireError> {
    spec.flow.validate()?;
    if !spec.opt_out_url.is_ascii() {
        return Err(WireError::UrlNotAscii);
    }
    let family = spec.flow.family();
    let (src, dst) = (spec.flow.src, spec.flow.dst);
    match spec.flow.protocol {
        Protocol::Icmp => {
            let mut msg = Vec::new();
            msg.push(icmp_echo_type(family, false));
            msg.push(0); // code
            msg.extend_from_slice(&[0, 0]); // checksum placeholder
            msg.extend_from_slice(&((spec.run_id & 0xffff) as u16).to_be_bytes());
            msg.extend_from_slice(&(spec.variation_id as u16).to_be_bytes());
            msg.extend_from_slice(&spec.tx_time.to_be_bytes());
            msg.extend_from_slice(&addr_bytes(dst));
            msg.extend_from_slice(&spec.run_id.to_be_bytes());
            msg.push(spec.variation_id);
            msg.extend_from_slice(spec.opt_out_url.as_bytes());
            let ck = match family {
                Family::V4 => internet_checksum(&msg),
                Family::V6 => pseudo_checksum(src, dst, 58, &msg),
            };
            msg[2..4].copy_from_slice(&ck.to_be_bytes());
            finish(family, msg, spec.ttl, Protocol::Icmp.ip_proto(family), src, dst)
        }
        Protocol::Tcp => {
            let mut seg = Vec::new();
            seg.extend_from_slice(&spec.flow.src_port.to_be_bytes());
            seg.extend_from_slice(&spec.flow.dst_port.to_be_bytes());
            seg.extend_from_slice(&((spec.tx_time & 0xffff_ffff) as u32).to_be_bytes());
            seg.extend_from_slice(&0u32.to_be_bytes()); // acknowledgment
            seg.push(0x50); // data offset 5 words
            seg.push(0x12); // SYN|ACK
            seg.extend_from_slice(&[0, 0]); // window
            seg.extend_from_slice(&[0, 0]); // checksum placeholder
            seg.extend_from_slice(&[0, 0]); // urgent pointer
            seg.extend_from_slice(spec.opt_out_url.as_bytes());
            let ck = pseudo_checksum(src, dst, 6, &seg);
            seg[16..18].copy_from_slice(&ck.to_be_bytes());
            finish(family, seg, spec.ttl, 6, src, dst)
        }
        Protocol::Udp => {
            let first = format!("{}-{}-{}", spec.variation_id, spec.run_id, spec.tx_time);
            let qname = encode_qname(&first, &spec.opt_out_url)?;
            let mut dns = Vec::new();
            dns.extend_from_slice(&((spec.tx_time & 0xffff) as u16).to_be_bytes());
            dns.extend_from_slice(&0x0100u16.to_be_bytes()); // recursion desired
            dns.extend_from_slice(&[0, 1, 0, 0, 0, 0, 0, 0]); // one question
            dns.extend_from_slice(&qname);
            dns.extend_from_slice(&[0, 1, 0, 1]); // QTYPE A, QCLASS IN
            let mut seg = Vec::with_capacity(8 + dns.len());
            seg.extend_from_slice(&spec.flow.src_port.to_be_bytes());
            seg.extend_from_slice(&spec.flow.dst_port.to_be_bytes());
            seg.extend_from_slice(&((8 + dns.len()) as u16).to_be_bytes());
            seg.extend_from_slice(&[0, 0]); // checksum placeholder
            seg.extend_from_slice(&dns);
            let ck = match pseudo_checksum(src, dst, 17, &seg) {
                0 => 0xffff, // zero means "no checksum" on the wire
                c => c,
            };
            seg[6..8].copy_from_slice(&ck.to_be_bytes());
            finish(family, seg, spec.ttl, 17, src, dst)
        }
    }
}

/// What a captured packet turned out to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ReplyKind {
    EchoReply,
    TcpRst,
    DnsResponse,
    TimeExceeded,
    /// ICMP destination unreachable. Counted by the capture path, never
    /// recorded as a reply.
    Discarded,
}

impl ReplyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReplyKind::EchoReply => "echo_reply",
            ReplyKind::TcpRst => "tcp_rst",
            ReplyKind::DnsResponse => "dns_response",
            ReplyKind::TimeExceeded => "time_exceeded",
            ReplyKind::Discarded => "discarded",
        }
    }
}

/// Probe metadata recovered from a reply body (ICMP payload or DNS QNAME).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddedMeta {
    pub run_id: u32,
    pub variation_id: u8,
    pub tx_time: u64,
    /// Probed address, present only in ICMP payloads.
    pub target: Option<IpAddr>,
    pub opt_out_url: Option<String>,
}

/// A dissected captured packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedReply {
    pub kind: ReplyKind,
    /// The flow as it appears in this packet. For TimeExceeded and Discarded
    /// this is the quoted inner flow, i.e. the original probe's flow; for
    /// direct replies it is the reply's own (reversed) flow.
    pub flow_echo: FlowTuple,
    /// TTL / hop limit of the captured packet itself.
    pub reply_ttl: u8,
    pub embedded: Option<EmbeddedMeta>,
    /// Emitting router for TimeExceeded / Discarded.
    pub hop_addr: Option<IpAddr>,
    /// Correlation selector quoted inside ICMP errors: the ICMP sequence,
    /// the TCP sequence number, or the UDP checksum of the expired probe.
    pub quote_selector: Option<u32>,
}

struct IpInfo {
    src: IpAddr,
    dst: IpAddr,
    proto: u8,
    ttl: u8,
    header_len: usize,
}

fn parse_ip(bytes: &[u8], family: Family) -> Option<IpInfo> {
    match family {
        Family::V4 => {
            if bytes.len() < 20 || bytes[0] >> 4 != 4 {
                return None;
            }
            let ihl = usize::from(bytes[0] & 0x0f) * 4;
            if ihl < 20 || bytes.len() < ihl {
                return None;
            }
            let src: [u8; 4] = bytes[12..16].try_into().ok()?;
            let dst: [u8; 4] = bytes[16..20].try_into().ok()?;
            Some(IpInfo {
                src: IpAddr::from(src),
                dst: IpAddr::from(dst),
                proto: bytes[9],
                ttl: bytes[8],
                header_len: ihl,
            })
        }
        Family::V6 => {
            if bytes.len() < 40 || bytes[0] >> 4 != 6 {
                return None;
            }
            let src: [u8; 16] = bytes[8..24].try_into().ok()?;
            let dst: [u8; 16] = bytes[24..40].try_into().ok()?;
            Some(IpInfo {
                src: IpAddr::from(src),
                dst: IpAddr::from(dst),
                proto: bytes[6],
                ttl: bytes[7],
                header_len: 40,
            })
        }
    }
}

fn parse_icmp_payload(payload: &[u8], family: Family) -> Option<EmbeddedMeta> {
    let alen = match family {
        Family::V4 => 4,
        Family::V6 => 16,
    };
    if payload.len() < 8 + alen + 4 + 1 {
        return None;
    }
    let tx_time = u64::from_be_bytes(payload[..8].try_into().ok()?);
    let target = match family {
        Family::V4 => IpAddr::from(<[u8; 4]>::try_from(&payload[8..12]).ok()?),
        Family::V6 => IpAddr::from(<[u8; 16]>::try_from(&payload[8..24]).ok()?),
    };
    let run_id = u32::from_be_bytes(payload[8 + alen..12 + alen].try_into().ok()?);
    let variation_id = payload[12 + alen];
    let url = &payload[13 + alen..];
    let opt_out_url = if url.is_empty() || !url.is_ascii() {
        None
    } else {
        Some(String::from_utf8_lossy(url).into_owned())
    };
    Some(EmbeddedMeta { run_id, variation_id, tx_time, target: Some(target), opt_out_url })
}

/// Decodes the quoted original packet inside an ICMP error: the inner flow
/// in probe direction plus a per-protocol correlation selector.
fn parse_inner_quote(quote: &[u8], family: Family) -> Option<(FlowTuple, u32)> {
    let ip = parse_ip(quote, family)?;
    let l4 = quote.get(ip.header_len..)?;
    if l4.len() < 8 {
        return None;
    }
    match ip.proto {
        1 | 58 => {
            // type, code, checksum, identifier, sequence
            let seq = u16::from_be_bytes([l4[6], l4[7]]);
            let flow = FlowTuple {
                src: ip.src,
                dst: ip.dst,
                protocol: Protocol::Icmp,
                src_port: 0,
                dst_port: 0,
            };
            Some((flow, u32::from(seq)))
        }
        6 => {
            let flow = FlowTuple {
                src: ip.src,
                dst: ip.dst,
                protocol: Protocol::Tcp,
                src_port: u16::from_be_bytes([l4[0], l4[1]]),
                dst_port: u16::from_be_bytes([l4[2], l4[3]]),
            };
            let seq = u32::from_be_bytes([l4[4], l4[5], l4[6], l4[7]]);
            Some((flow, seq))
        }
        17 => {
            let flow = FlowTuple {
                src: ip.src,
                dst: ip.dst,
                protocol: Protocol::Udp,
                src_port: u16::from_be_bytes([l4[0], l4[1]]),
                dst_port: u16::from_be_bytes([l4[2], l4[3]]),
            };
            let cksum = u16::from_be_bytes([l4[6], l4[7]]);
            Some((flow, u32::from(cksum)))
        }
        _ => None,
    }
}

/// First QNAME in a DNS message, decoded as dotted text, plus its end offset.
fn parse_qname(dns: &[u8]) -> Option<(String, usize)> {
    let mut pos = 12;
    let mut name = String::new();
    loop {
        let len = *dns.get(pos)? as usize;
        if len == 0 {
            return Some((name, pos + 1));
        }
        if len > 63 {
            return None; // compression pointers never appear in questions
        }
        let label = dns.get(pos + 1..pos + 1 + len)?;
        if !name.is_empty() {
            name.push('.');
        }
        name.push_str(&String::from_utf8_lossy(label));
        pos += 1 + len;
    }
}

/// Decodes `<variation_id>-<run_id>-<tx_time>` from the first QNAME label.
fn decode_qname_meta(name: &str) -> Option<EmbeddedMeta> {
    let first = name.split('.').next()?;
    let mut parts = first.splitn(3, '-');
    let variation_id: u8 = parts.next()?.parse().ok()?;
    let run_id: u32 = parts.next()?.parse().ok()?;
    let tx_time: u64 = parts.next()?.parse().ok()?;
    Some(EmbeddedMeta { run_id, variation_id, tx_time, target: None, opt_out_url: None })
}

/// Dissects a captured packet. Returns None for anything that is not a
/// recognizable probe or reply, including every truncation; never panics.
pub fn parse_reply(bytes: &[u8], family: Family) -> Option<ParsedReply> {
    let ip = parse_ip(bytes, family)?;
    let l4 = bytes.get(ip.header_len..)?;
    let icmp_proto = match family {
        Family::V4 => 1,
        Family::V6 => 58,
    };
    if ip.proto == icmp_proto {
        if l4.len() < 8 {
            return None;
        }
        let (echo_req, echo_rep, time_exceeded, unreachable) = match family {
            Family::V4 => (8u8, 0u8, 11u8, 3u8),
            Family::V6 => (128, 129, 3, 1),
        };
        let typ = l4[0];
        if typ == echo_rep || typ == echo_req {
            let embedded = parse_icmp_payload(&l4[8..], family)?;
            return Some(ParsedReply {
                kind: ReplyKind::EchoReply,
                flow_echo: FlowTuple {
                    src: ip.src,
                    dst: ip.dst,
                    protocol: Protocol::Icmp,
                    src_port: 0,
                    dst_port: 0,
                },
                reply_ttl: ip.ttl,
                embedded: Some(embedded),
                hop_addr: None,
                quote_selector: Some(u32::from(u16::from_be_bytes([l4[6], l4[7]]))),
            });
        }
        if typ == time_exceeded || typ == unreachable {
            let (inner_flow, selector) = parse_inner_quote(l4.get(8..)?, family)?;
            let kind = if typ == time_exceeded {
                ReplyKind::TimeExceeded
            } else {
                ReplyKind::Discarded
            };
            return Some(ParsedReply {
                kind,
                flow_echo: inner_flow,
                reply_ttl: ip.ttl,
                embedded: None,
                hop_addr: Some(ip.src),
                quote_selector: Some(selector),
            });
        }
        return None;
    }
    match ip.proto {
        6 => {
            if l4.len() < 20 {
                return None;
            }
            if l4[13] & 0x04 == 0 {
                return None; // only RSTs answer SYN|ACK probes
            }
            Some(ParsedReply {
                kind: ReplyKind::TcpRst,
                flow_echo: FlowTuple {
                    src: ip.src,
                    dst: ip.dst,
                    protocol: Protocol::Tcp,
                    src_port: u16::from_be_bytes([l4[0], l4[1]]),
                    dst_port: u16::from_be_bytes([l4[2], l4[3]]),
                },
                reply_ttl: ip.ttl,
                embedded: None,
                hop_addr: None,
                quote_selector: None,
            })
        }
        17 => {
            if l4.len() < 8 + 12 {
                return None;
            }
            let src_port = u16::from_be_bytes([l4[0], l4[1]]);
            let dst_port = u16::from_be_bytes([l4[2], l4[3]]);
            if src_port != 53 && dst_port != 53 {
                return None;
            }
            let (qname, _) = parse_qname(&l4[8..])?;
            let embedded = decode_qname_meta(&qname);
            Some(ParsedReply {
                kind: ReplyKind::DnsResponse,
                flow_echo: FlowTuple {
                    src: ip.src,
                    dst: ip.dst,
                    protocol: Protocol::Udp,
                    src_port,
                    dst_port,
                },
                reply_ttl: ip.ttl,
                embedded,
                hop_addr: None,
                quote_selector: None,
            })
        }
        _ => None,
    }
}

/// Address family from the IP version nibble.
pub fn sniff_family(bytes: &[u8]) -> Option<Family> {
    match bytes.first().map(|b| b >> 4) {
        Some(4) => Some(Family::V4),
        Some(6) => Some(Family::V6),
        _ => None,
    }
}

/// Flow and correlation selector an ICMP error quoting this probe would
/// carry, computed from the probe itself before transmission. Lets a sender
/// match hop errors back to probes without replicating per-protocol quote
/// layouts.
pub fn probe_quote(packet: &[u8]) -> Option<(FlowTuple, u32)> {
    let family = sniff_family(packet)?;
    parse_inner_quote(packet, family)
}

/// Routing view of any packet: its flow tuple and remaining TTL. ICMP flows
/// carry zero ports. Used by forwarding logic, which must handle packets of
/// every kind, probe or reply, without understanding their payloads.
pub fn packet_flow(bytes: &[u8]) -> Option<(FlowTuple, u8)> {
    let family = sniff_family(bytes)?;
    let ip = parse_ip(bytes, family)?;
    let icmp_proto = match family {
        Family::V4 => 1,
        Family::V6 => 58,
    };
    let (protocol, src_port, dst_port) = if ip.proto == icmp_proto {
        (Protocol::Icmp, 0, 0)
    } else {
        let l4 = bytes.get(ip.header_len..ip.header_len + 4)?;
        let protocol = match ip.proto {
            6 => Protocol::Tcp,
            17 => Protocol::Udp,
            _ => return None,
        };
        (
            protocol,
            u16::from_be_bytes([l4[0], l4[1]]),
            u16::from_be_bytes([l4[2], l4[3]]),
        )
    };
    Some((
        FlowTuple { src: ip.src, dst: ip.dst, protocol, src_port, dst_port },
        ip.ttl,
    ))
}

/// True when the packet's checksums verify: the IPv4 header sums to zero and
/// the L4 checksum (with pseudo-header where the protocol has one) does too.
pub fn checksum_verifies(bytes: &[u8]) -> bool {
    let family = match bytes.first().map(|b| b >> 4) {
        Some(4) => Family::V4,
        Some(6) => Family::V6,
        _ => return false,
    };
    let Some(ip) = parse_ip(bytes, family) else {
        return false;
    };
    if family == Family::V4 && internet_checksum(&bytes[..ip.header_len]) != 0 {
        return false;
    }
    let seg = &bytes[ip.header_len..];
    match (family, ip.proto) {
        (Family::V4, 1) => internet_checksum(seg) == 0,
        (Family::V6, 58) | (_, 6) => pseudo_checksum(ip.src, ip.dst, ip.proto, seg) == 0,
        (_, 17) => {
            let stored = u16::from_be_bytes([seg[6], seg[7]]);
            if stored == 0 {
                return true; // checksum disabled, IPv4 allows that
            }
            pseudo_checksum(ip.src, ip.dst, 17, seg) == 0
        }
        _ => false,
    }
}

fn reseal_l4(family: Family, proto: u8, src: IpAddr, dst: IpAddr, seg: &mut [u8], at: usize) {
    seg[at] = 0;
    seg[at + 1] = 0;
    let ck = match (family, proto) {
        (Family::V4, 1) => internet_checksum(seg),
        _ => pseudo_checksum(src, dst, proto, seg),
    };
    let ck = if proto == 17 && ck == 0 { 0xffff } else { ck };
    seg[at..at + 2].copy_from_slice(&ck.to_be_bytes());
}

fn packet_family(bytes: &[u8]) -> Result<Family, WireError> {
    match bytes.first().map(|b| b >> 4) {
        Some(4) => Ok(Family::V4),
        Some(6) => Ok(Family::V6),
        _ => Err(WireError::Truncated),
    }
}

/// Builds the echo reply a responsive host sends for `probe`: endpoints
/// swapped, type flipped to reply, identifier/sequence/payload reflected.
pub fn build_echo_reply(probe: &[u8], initial_ttl: u8) -> Result<Vec<u8>, WireError> {
    let family = packet_family(probe)?;
    let ip = parse_ip(probe, family).ok_or(WireError::Truncated)?;
    let l4 = probe.get(ip.header_len..).ok_or(WireError::Truncated)?;
    if l4.len() < 8 {
        return Err(WireError::Truncated);
    }
    let mut msg = l4.to_vec();
    msg[0] = icmp_echo_type(family, true);
    reseal_l4(family, ip.proto, ip.dst, ip.src, &mut msg, 2);
    let mut pkt = ip_header(family, msg.len(), initial_ttl, ip.proto, ip.dst, ip.src);
    pkt.extend_from_slice(&msg);
    Ok(pkt)
}

/// Builds the RST a closed-or-suspicious port sends for a SYN|ACK probe.
pub fn build_tcp_rst(probe: &[u8], initial_ttl: u8) -> Result<Vec<u8>, WireError> {
    let family = packet_family(probe)?;
    let ip = parse_ip(probe, family).ok_or(WireError::Truncated)?;
    let l4 = probe.get(ip.header_len..).ok_or(WireError::Truncated)?;
    if l4.len() < 20 {
        return Err(WireError::Truncated);
    }
    let sport = u16::from_be_bytes([l4[0], l4[1]]);
    let dport = u16::from_be_bytes([l4[2], l4[3]]);
    let probe_seq = u32::from_be_bytes([l4[4], l4[5], l4[6], l4[7]]);
    let probe_ack = u32::from_be_bytes([l4[8], l4[9], l4[10], l4[11]]);
    let mut seg = Vec::with_capacity(20);
    seg.extend_from_slice(&dport.to_be_bytes());
    seg.extend_from_slice(&sport.to_be_bytes());
    seg.extend_from_slice(&probe_ack.to_be_bytes()); // RST seq answers our ack
    seg.extend_from_slice(&probe_seq.wrapping_add(1).to_be_bytes());
    seg.push(0x50);
    seg.push(0x14); // RST|ACK
    seg.extend_from_slice(&[0, 0, 0, 0, 0, 0]);
    reseal_l4(family, 6, ip.dst, ip.src, &mut seg, 16);
    let mut pkt = ip_header(family, seg.len(), initial_ttl, 6, ip.dst, ip.src);
    pkt.extend_from_slice(&seg);
    Ok(pkt)
}

/// Builds an NXDOMAIN response echoing the probe's question section.
pub fn build_dns_response(probe: &[u8], initial_ttl: u8) -> Result<Vec<u8>, WireError> {
    let family = packet_family(probe)?;
    let ip = parse_ip(probe, family).ok_or(WireError::Truncated)?;
    let l4 = probe.get(ip.header_len..).ok_or(WireError::Truncated)?;
    if l4.len() < 8 + 12 {
        return Err(WireError::Truncated);
    }
    let sport = u16::from_be_bytes([l4[0], l4[1]]);
    let dport = u16::from_be_bytes([l4[2], l4[3]]);
    let dns = &l4[8..];
    let (_, qend) = parse_qname(dns).ok_or(WireError::Truncated)?;
    let question = dns.get(..qend + 4).ok_or(WireError::Truncated)?;
    let mut body = Vec::with_capacity(question.len());
    body.extend_from_slice(&dns[..2]); // transaction id
    body.extend_from_slice(&0x8183u16.to_be_bytes()); // response, NXDOMAIN
    body.extend_from_slice(&[0, 1, 0, 0, 0, 0, 0, 0]);
    body.extend_from_slice(&question[12..]);
    let mut seg = Vec::with_capacity(8 + body.len());
    seg.extend_from_slice(&dport.to_be_bytes());
    seg.extend_from_slice(&sport.to_be_bytes());
    seg.extend_from_slice(&((8 + body.len()) as u16).to_be_bytes());
    seg.extend_from_slice(&[0, 0]);
    seg.extend_from_slice(&body);
    reseal_l4(family, 17, ip.dst, ip.src, &mut seg, 6);
    let mut pkt = ip_header(family, seg.len(), initial_ttl, 17, ip.dst, ip.src);
    pkt.extend_from_slice(&seg);
    Ok(pkt)
}

fn build_icmp_error(
    typ_v4: u8,
    typ_v6: u8,
    code: u8,
    hop: IpAddr,
    probe: &[u8],
    initial_ttl: u8,
) -> Result<Vec<u8>, WireError> {
    let family = packet_family(probe)?;
    if Family::of(hop) != family {
        return Err(WireError::Flow(ModelError::MixedFamily));
    }
    let ip = parse_ip(probe, family).ok_or(WireError::Truncated)?;
    // Quote the inner IP header plus the first 8 payload bytes.
    let quote_len = ip.header_len + 8;
    let quote = probe.get(..quote_len).ok_or(WireError::Truncated)?;
    let (typ, proto) = match family {
        Family::V4 => (typ_v4, 1),
        Family::V6 => (typ_v6, 58),
    };
    let mut msg = Vec::with_capacity(8 + quote.len());
    msg.push(typ);
    msg.push(code);
    msg.extend_from_slice(&[0, 0, 0, 0, 0, 0]); // checksum + unused
    msg.extend_from_slice(quote);
    reseal_l4(family, proto, hop, ip.src, &mut msg, 2);
    let mut pkt = ip_header(family, msg.len(), initial_ttl, proto, hop, ip.src);
    pkt.extend_from_slice(&msg);
    Ok(pkt)
}

/// Time Exceeded from `hop` for an expired probe, addressed to the probe's
/// source. Quotes the inner IP header plus 8 bytes, the minimum routers send.
pub fn build_time_exceeded(hop: IpAddr, probe: &[u8], initial_ttl: u8) -> Result<Vec<u8>, WireError> {
    build_icmp_error(11, 3, 0, hop, probe, initial_ttl)
}

/// Destination unreachable (port unreachable) from `hop` for `probe`.
pub fn build_dest_unreachable(hop: IpAddr, probe: &[u8], initial_ttl: u8) -> Result<Vec<u8>, WireError> {
    build_icmp_error(3, 1, 3, hop, probe, initial_ttl)
}

/// Rewrites the TTL / hop limit of a full packet in place, fixing the IPv4
/// header checksum. The simulator decrements TTLs as packets traverse nodes.
pub fn set_ttl(bytes: &mut [u8], ttl: u8) -> Result<(), WireError> {
    match bytes.first().map(|b| b >> 4) {
        Some(4) if bytes.len() >= 20 => {
            bytes[8] = ttl;
            bytes[10] = 0;
            bytes[11] = 0;
            let ihl = usize::from(bytes[0] & 0x0f) * 4;
            if bytes.len() < ihl {
                return Err(WireError::Truncated);
            }
            let ck = internet_checksum(&bytes[..ihl]);
            bytes[10..12].copy_from_slice(&ck.to_be_bytes());
            Ok(())
        }
        Some(6) if bytes.len() >= 40 => {
            bytes[7] = ttl;
            Ok(())
        }
        _ => Err(WireError::Truncated),
    }
}
