//! ECMP next-hop selection.
//!
//! A router with an equal-cost group picks the member by hashing the packet
//! fields its policy selects. The hash is 64-bit FNV-1a over a canonical
//! byte string (seed, then the selected fields in a fixed order), reduced
//! modulo the group size. Deterministic across runs and platforms on
//! purpose: route stability between measurement runs is part of what the
//! pipeline measures.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{FlowTuple, ModelError};

/// Field set a load balancer hashes. The first three match vendor defaults;
/// PerPacket sprays round-robin-like per packet, PerDestination keys on the
/// destination address alone, and L4Ports is a synthetic ports-only policy
/// (no vendor ships it; it isolates transport-layer sensitivity in tests).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HashPolicy {
    L3SrcDst,
    FiveTuple,
    L3SrcDstProto,
    PerPacket,
    PerDestination,
    L4Ports,
}

impl HashPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            HashPolicy::L3SrcDst => "l3_src_dst",
            HashPolicy::FiveTuple => "five_tuple",
            HashPolicy::L3SrcDstProto => "l3_src_dst_proto",
            HashPolicy::PerPacket => "per_packet",
            HashPolicy::PerDestination => "per_destination",
            HashPolicy::L4Ports => "l4_ports",
        }
    }
}

impl FromStr for HashPolicy {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "l3_src_dst" => Ok(HashPolicy::L3SrcDst),
            "five_tuple" => Ok(HashPolicy::FiveTuple),
            "l3_src_dst_proto" => Ok(HashPolicy::L3SrcDstProto),
            "per_packet" => Ok(HashPolicy::PerPacket),
            "per_destination" => Ok(HashPolicy::PerDestination),
            "l4_ports" => Ok(HashPolicy::L4Ports),
            _ => Err(ModelError::Parse(s.into(), "hash policy")),
        }
    }
}

/// Factory-default hashing observed per vendor. Lowercase vendor tokens;
/// "juniper" is the SRC+DST+protocol default, "juniper-mx" the Trio-based
/// five-tuple line.
pub fn vendor_default(vendor: &str) -> Option<HashPolicy> {
    match vendor {
        "cisco" | "hpe" => Some(HashPolicy::L3SrcDst),
        "juniper" => Some(HashPolicy::L3SrcDstProto),
        "arista" | "huawei" | "nokia" | "juniper-mx" => Some(HashPolicy::FiveTuple),
        _ => None,
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h = FNV_OFFSET;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn addr_octets(addr: std::net::IpAddr) -> Vec<u8> {
    match addr {
        std::net::IpAddr::V4(a) => a.octets().to_vec(),
        std::net::IpAddr::V6(a) => a.octets().to_vec(),
    }
}

/// Picks the equal-cost group member for one packet.
///
/// `packet_seq` only matters for PerPacket; every other policy depends on
/// the flow alone, so two packets of one flow always agree.
pub fn hash_next_hop(
    policy: HashPolicy,
    flow: &FlowTuple,
    packet_seq: u64,
    group_size: usize,
    seed: u64,
) -> usize {
    assert!(group_size >= 1, "equal-cost groups cannot be empty");
    if group_size == 1 {
        return 0;
    }
    let mut bytes = seed.to_be_bytes().to_vec();
    match policy {
        HashPolicy::L3SrcDst => {
            bytes.extend(addr_octets(flow.src));
            bytes.extend(addr_octets(flow.dst));
        }
        HashPolicy::L3SrcDstProto => {
            bytes.extend(addr_octets(flow.src));
            bytes.extend(addr_octets(flow.dst));
            bytes.push(flow.protocol.ip_proto(flow.family()));
        }
        HashPolicy::FiveTuple => {
            bytes.extend(addr_octets(flow.src));
            bytes.extend(addr_octets(flow.dst));
            bytes.push(flow.protocol.ip_proto(flow.family()));
            bytes.extend(flow.src_port.to_be_bytes());
            bytes.extend(flow.dst_port.to_be_bytes());
        }
        HashPolicy::L4Ports => {
            bytes.extend(flow.src_port.to_be_bytes());
            bytes.extend(flow.dst_port.to_be_bytes());
        }
        HashPolicy::PerPacket => {
            bytes.extend(packet_seq.to_be_bytes());
        }
        HashPolicy::PerDestination => {
            bytes.extend(addr_octets(flow.dst));
        }
    }
    (fnv1a(bytes) % group_size as u64) as usize
}
