//! Shared measurement vocabulary: addresses, prefixes, flows, protocols and
//! site identities.
//!
//! Prefix aggregation granularity defaults to /24 for IPv4 and /48 for IPv6
//! everywhere downstream; both are run parameters, so nothing in this module
//! hard-codes them.

use std::cmp::Ordering;
use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("prefix length {len} exceeds address width {width}")]
    PrefixTooLong { len: u8, width: u8 },
    #[error("prefix base {base} has bits set below /{len}")]
    HostBitsSet { base: IpAddr, len: u8 },
    #[error("offset {offset} does not fit inside a /{len}")]
    OffsetOutsidePrefix { offset: u128, len: u8 },
    #[error("flow mixes IPv4 and IPv6 addresses")]
    MixedFamily,
    #[error("ICMP flows carry no ports; got src {src_port} dst {dst_port}")]
    PortsOnIcmp { src_port: u16, dst_port: u16 },
    #[error("site id must be a non-empty token without whitespace or commas")]
    BadSiteId,
    #[error("cannot parse {0:?} as {1}")]
    Parse(String, &'static str),
}

/// IP address family. Prefix comparisons order all of IPv4 before IPv6.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    V4,
    V6,
}

impl Family {
    pub fn of(addr: IpAddr) -> Family {
        match addr {
            IpAddr::V4(_) => Family::V4,
            IpAddr::V6(_) => Family::V6,
        }
    }

    /// Address width in bits: 32 or 128.
    pub fn width(self) -> u8 {
        match self {
            Family::V4 => 32,
            Family::V6 => 128,
        }
    }

    /// Default aggregation granularity: /24 for IPv4, /48 for IPv6.
    pub fn default_granularity(self) -> u8 {
        match self {
            Family::V4 => 24,
            Family::V6 => 48,
        }
    }

    pub fn unspecified(self) -> IpAddr {
        match self {
            Family::V4 => IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            Family::V6 => IpAddr::V6(Ipv6Addr::UNSPECIFIED),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::V4 => write!(f, "v4"),
            Family::V6 => write!(f, "v6"),
        }
    }
}

impl FromStr for Family {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "v4" | "4" | "ipv4" => Ok(Family::V4),
            "v6" | "6" | "ipv6" => Ok(Family::V6),
            _ => Err(ModelError::Parse(s.into(), "address family")),
        }
    }
}

pub(crate) fn addr_to_bits(addr: IpAddr) -> u128 {
    match addr {
        IpAddr::V4(a) => u32::from(a) as u128,
        IpAddr::V6(a) => u128::from(a),
    }
}

pub(crate) fn bits_to_addr(bits: u128, family: Family) -> IpAddr {
    match family {
        Family::V4 => IpAddr::V4(Ipv4Addr::from(bits as u32)),
        Family::V6 => IpAddr::V6(Ipv6Addr::from(bits)),
    }
}

/// A CIDR prefix in canonical form: every bit below the prefix length is
/// zero. Construction enforces this, so two prefixes covering the same block
/// always compare equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Prefix {
    base: IpAddr,
    len: u8,
}

impl Prefix {
    /// Builds a prefix from an already-canonical base. Rejects lengths beyond
    /// the family width and bases with host bits set; file loaders rely on
    /// the rejection to flag malformed data instead of silently remasking.
    pub fn new(base: IpAddr, len: u8) -> Result<Prefix, ModelError> {
        let width = Family::of(base).width();
        if len > width {
            return Err(ModelError::PrefixTooLong { len, width });
        }
        let bits = addr_to_bits(base);
        if bits & !mask_bits(len, width) != 0 {
            return Err(ModelError::HostBitsSet { base, len });
        }
        Ok(Prefix { base, len })
    }

    /// Masks `addr` down to its covering prefix at `granularity` bits.
    pub fn of(addr: IpAddr, granularity: u8) -> Result<Prefix, ModelError> {
        let family = Family::of(addr);
        let width = family.width();
        if granularity > width {
            return Err(ModelError::PrefixTooLong { len: granularity, width });
        }
        let bits = addr_to_bits(addr) & mask_bits(granularity, width);
        Ok(Prefix { base: bits_to_addr(bits, family), len: granularity })
    }

    pub fn base(&self) -> IpAddr {
        self.base
    }

    // a prefix length is a mask width, not a container size
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> u8 {
        self.len
    }

    pub fn family(&self) -> Family {
        Family::of(self.base)
    }

    pub fn contains(&self, addr: IpAddr) -> bool {
        if Family::of(addr) != self.family() {
            return false;
        }
        let width = self.family().width();
        addr_to_bits(addr) & mask_bits(self.len, width) == addr_to_bits(self.base)
    }

    /// Address at `offset` hosts above the base. Offset must stay inside the
    /// prefix; probe source variation uses base+1..base+k.
    pub fn addr_at(&self, offset: u128) -> Result<IpAddr, ModelError> {
        let width = self.family().width();
        let span = width - self.len;
        if span < 128 && offset >> span != 0 {
            return Err(ModelError::OffsetOutsidePrefix { offset, len: self.len });
        }
        Ok(bits_to_addr(addr_to_bits(self.base) + offset, self.family()))
    }
}

fn mask_bits(len: u8, width: u8) -> u128 {
    let full = if width == 32 { u32::MAX as u128 } else { u128::MAX };
    if len == 0 {
        0
    } else {
        full & (full << (width - len)) & if width == 32 { u32::MAX as u128 } else { u128::MAX }
    }
}

impl Ord for Prefix {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.family(), addr_to_bits(self.base), self.len).cmp(&(
            other.family(),
            addr_to_bits(other.base),
            other.len,
        ))
    }
}

impl PartialOrd for Prefix {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.base, self.len)
    }
}

impl FromStr for Prefix {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, len) = s
            .split_once('/')
            .ok_or_else(|| ModelError::Parse(s.into(), "CIDR prefix"))?;
        let addr: IpAddr = addr
            .parse()
            .map_err(|_| ModelError::Parse(s.into(), "CIDR prefix"))?;
        let len: u8 = len
            .parse()
            .map_err(|_| ModelError::Parse(s.into(), "CIDR prefix"))?;
        Prefix::new(addr, len)
    }
}

impl Serialize for Prefix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Prefix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Probe protocols. ICMP means echo; TCP means SYN|ACK probes answered by
/// RST; UDP means DNS queries to port 53.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Icmp,
    Tcp,
    Udp,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Icmp => "icmp",
            Protocol::Tcp => "tcp",
            Protocol::Udp => "udp",
        }
    }

    /// IP protocol number, family-dependent for ICMP (1 vs 58).
    pub fn ip_proto(self, family: Family) -> u8 {
        match (self, family) {
            (Protocol::Icmp, Family::V4) => 1,
            (Protocol::Icmp, Family::V6) => 58,
            (Protocol::Tcp, _) => 6,
            (Protocol::Udp, _) => 17,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "icmp" => Ok(Protocol::Icmp),
            "tcp" => Ok(Protocol::Tcp),
            "udp" => Ok(Protocol::Udp),
            _ => Err(ModelError::Parse(s.into(), "protocol")),
        }
    }
}

/// One flow as put on the wire: addresses, protocol, ports. ICMP flows carry
/// zero ports by definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowTuple {
    pub src: IpAddr,
    pub dst: IpAddr,
    pub protocol: Protocol,
    pub src_port: u16,
    pub dst_port: u16,
}

impl FlowTuple {
    pub fn validate(&self) -> Result<(), ModelError> {
        if Family::of(self.src) != Family::of(self.dst) {
            return Err(ModelError::MixedFamily);
        }
        if self.protocol == Protocol::Icmp && (self.src_port != 0 || self.dst_port != 0) {
            return Err(ModelError::PortsOnIcmp {
                src_port: self.src_port,
                dst_port: self.dst_port,
            });
        }
        Ok(())
    }

    pub fn family(&self) -> Family {
        Family::of(self.src)
    }

    /// The flow a reply to this flow travels on: endpoints and ports swapped.
    pub fn reversed(&self) -> FlowTuple {
        FlowTuple {
            src: self.dst,
            dst: self.src,
            protocol: self.protocol,
            src_port: self.dst_port,
            dst_port: self.src_port,
        }
    }
}

/// Anycast site identity, e.g. "ams" or "tyo". A short token: no whitespace
/// or commas, so site lists embed into CSV cells and manifests unquoted.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteId(String);

impl SiteId {
    pub fn new(s: impl Into<String>) -> Result<SiteId, ModelError> {
        let s = s.into();
        if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == ',' || c == ';') {
            return Err(ModelError::BadSiteId);
        }
        Ok(SiteId(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for SiteId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SiteId::new(s)
    }
}

impl Serialize for SiteId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for SiteId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        SiteId::new(s).map_err(D::Error::custom)
    }
}

/// Which header fields a measurement varies across its k probes per target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariedField {
    SrcAddr,
    SrcPort,
    DstPort,
    SrcAndDstPort,
    All,
}

impl VariedField {
    /// Port variation is meaningless for ICMP, and UDP probes must keep
    /// destination port 53 to stay DNS.
    pub fn legal_for(self, protocol: Protocol) -> bool {
        match protocol {
            Protocol::Icmp => self == VariedField::SrcAddr,
            Protocol::Udp => matches!(self, VariedField::SrcAddr | VariedField::SrcPort),
            Protocol::Tcp => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VariedField::SrcAddr => "src-addr",
            VariedField::SrcPort => "src-port",
            VariedField::DstPort => "dst-port",
            VariedField::SrcAndDstPort => "src-dst-port",
            VariedField::All => "all",
        }
    }
}

impl fmt::Display for VariedField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariedField {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "src-addr" => Ok(VariedField::SrcAddr),
            "src-port" => Ok(VariedField::SrcPort),
            "dst-port" => Ok(VariedField::DstPort),
            "src-dst-port" => Ok(VariedField::SrcAndDstPort),
            "all" => Ok(VariedField::All),
            _ => Err(ModelError::Parse(s.into(), "varied field")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v4(s: &str) -> IpAddr {
        s.parse().unwrap()
    }

    #[test]
    fn masks_v4_to_slash24() {
        let p = Prefix::of(v4("192.0.2.57"), 24).unwrap();
        assert_eq!(p.to_string(), "192.0.2.0/24");
    }

    #[test]
    fn masks_v6_to_slash48() {
        let p = Prefix::of("2001:db8:1:2::9".parse().unwrap(), 48).unwrap();
        assert_eq!(p.to_string(), "2001:db8:1::/48");
    }

    #[test]
    fn granularity_beyond_width_is_rejected() {
        assert!(matches!(
            Prefix::of(v4("10.0.0.1"), 33),
            Err(ModelError::PrefixTooLong { len: 33, width: 32 })
        ));
        assert!(Prefix::of("::1".parse().unwrap(), 129).is_err());
    }

    #[test]
    fn same_block_compares_equal() {
        let a = Prefix::of(v4("10.1.2.3"), 24).unwrap();
        let b = Prefix::of(v4("10.1.2.250"), 24).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn canonical_form_is_enforced() {
        assert!(Prefix::new(v4("10.0.0.1"), 24).is_err());
        assert!(Prefix::new(v4("10.0.0.0"), 24).is_ok());
        assert!("10.0.0.1/24".parse::<Prefix>().is_err());
        assert_eq!("10.0.0.0/24".parse::<Prefix>().unwrap().len(), 24);
    }

    #[test]
    fn zero_length_prefix_contains_family_only() {
        let p = Prefix::of(v4("203.0.113.9"), 0).unwrap();
        assert_eq!(p.to_string(), "0.0.0.0/0");
        assert!(p.contains(v4("8.8.8.8")));
        assert!(!p.contains("2001:db8::1".parse().unwrap()));
    }

    #[test]
    fn addr_at_stays_inside() {
        let p: Prefix = "198.51.100.0/24".parse().unwrap();
        assert_eq!(p.addr_at(1).unwrap(), v4("198.51.100.1"));
        assert_eq!(p.addr_at(255).unwrap(), v4("198.51.100.255"));
        assert!(p.addr_at(256).is_err());
    }

    #[test]
    fn v4_orders_before_v6() {
        let a: Prefix = "255.255.255.0/24".parse().unwrap();
        let b: Prefix = "::/0".parse().unwrap();
        assert!(a < b);
    }

    #[test]
    fn icmp_flows_reject_ports() {
        let f = FlowTuple {
            src: v4("198.51.100.1"),
            dst: v4("192.0.2.57"),
            protocol: Protocol::Icmp,
            src_port: 62000,
            dst_port: 0,
        };
        assert!(matches!(f.validate(), Err(ModelError::PortsOnIcmp { .. })));
        let ok = FlowTuple { src_port: 0, ..f };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn mixed_family_flow_rejected() {
        let f = FlowTuple {
            src: v4("198.51.100.1"),
            dst: "2001:db8::1".parse().unwrap(),
            protocol: Protocol::Tcp,
            src_port: 62000,
            dst_port: 80,
        };
        assert!(matches!(f.validate(), Err(ModelError::MixedFamily)));
    }

    #[test]
    fn varied_field_legality() {
        use Protocol::*;
        use VariedField::*;
        assert!(SrcAddr.legal_for(Icmp));
        assert!(!SrcPort.legal_for(Icmp));
        assert!(!All.legal_for(Icmp));
        assert!(SrcPort.legal_for(Udp));
        assert!(!DstPort.legal_for(Udp));
        assert!(!SrcAndDstPort.legal_for(Udp));
        assert!(!All.legal_for(Udp));
        assert!(All.legal_for(Tcp));
        assert!(DstPort.legal_for(Tcp));
    }

    #[test]
    fn site_id_rejects_separators() {
        assert!(SiteId::new("ams").is_ok());
        assert!(SiteId::new("").is_err());
        assert!(SiteId::new("a b").is_err());
        assert!(SiteId::new("a,b").is_err());
    }

    #[test]
    fn tokens_round_trip() {
        for p in [Protocol::Icmp, Protocol::Tcp, Protocol::Udp] {
            assert_eq!(p.as_str().parse::<Protocol>().unwrap(), p);
        }
        for v in [
            VariedField::SrcAddr,
            VariedField::SrcPort,
            VariedField::DstPort,
            VariedField::SrcAndDstPort,
            VariedField::All,
        ] {
            assert_eq!(v.as_str().parse::<VariedField>().unwrap(), v);
        }
    }
}
