//! Measurement inputs read from disk: target hitlists, prefix-to-AS
//! mappings, anycast exclusion lists and prefix category labels.
//!
//! All loaders share the same forgiving line discipline: `#` starts a
//! comment, blank lines are ignored, malformed lines are skipped and
//! counted instead of aborting a run. An input that yields zero usable
//! entries is an error, a damaged one is a statistic.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::IpAddr;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{addr_to_bits, bits_to_addr, Family, Prefix};

#[derive(Debug, Error)]
pub enum HitlistError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} contains no usable entries ({skipped} lines skipped)")]
    Empty { path: String, skipped: u64 },
}

fn read_lines(path: &Path) -> Result<Vec<String>, HitlistError> {
    let text = std::fs::read_to_string(path).map_err(|source| HitlistError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Strips comments and surrounding whitespace; returns None for lines that
/// carry no content.
fn payload(line: &str) -> Option<&str> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        None
    } else {
        Some(line)
    }
}

/// Per-load bookkeeping, reported alongside the loaded set.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct LoadStats {
    pub lines: u64,
    pub malformed: u64,
    pub wrong_family: u64,
    /// Later addresses falling into an already-claimed prefix.
    pub duplicates: u64,
}

/// One probing target per prefix at the configured granularity. The first
/// address seen for a prefix claims it; later ones count as duplicates.
#[derive(Debug, Clone)]
pub struct TargetSet {
    family: Family,
    granularity: u8,
    entries: BTreeMap<Prefix, IpAddr>,
}

impl TargetSet {
    pub fn family(&self) -> Family {
        self.family
    }

    pub fn granularity(&self) -> u8 {
        self.granularity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Prefix, &IpAddr)> {
        self.entries.iter()
    }

    pub fn addrs(&self) -> impl Iterator<Item = IpAddr> + '_ {
        self.entries.values().copied()
    }

    pub fn contains(&self, prefix: &Prefix) -> bool {
        self.entries.contains_key(prefix)
    }

    /// Builds a set from in-memory addresses with the same first-wins
    /// semantics as the file loader. Simulator-backed runs use this to turn
    /// topology origins into targets.
    pub fn from_addrs(
        addrs: impl IntoIterator<Item = IpAddr>,
        family: Family,
        granularity: u8,
    ) -> (TargetSet, LoadStats) {
        let mut set = TargetSet {
            family,
            granularity,
            entries: BTreeMap::new(),
        };
        let mut stats = LoadStats::default();
        for addr in addrs {
            stats.lines += 1;
            set.admit(addr, &mut stats);
        }
        (set, stats)
    }

    fn admit(&mut self, addr: IpAddr, stats: &mut LoadStats) {
        if Family::of(addr) != self.family {
            stats.wrong_family += 1;
            return;
        }
        // granularity already validated against the family width
        let prefix = Prefix::of(addr, self.granularity).unwrap();
        match self.entries.entry(prefix) {
            std::collections::btree_map::Entry::Occupied(_) => stats.duplicates += 1,
            std::collections::btree_map::Entry::Vacant(slot) => {
                slot.insert(addr);
            }
        }
    }
}

/// Loads a hitlist: one address per line. Keeps the first address per
/// prefix, filters to `family`, and errors only when nothing usable remains.
pub fn load_targets(
    path: &Path,
    family: Family,
    granularity: u8,
) -> Result<(TargetSet, LoadStats), HitlistError> {
    let mut set = TargetSet {
        family,
        granularity,
        entries: BTreeMap::new(),
    };
    let mut stats = LoadStats::default();
    for line in read_lines(path)? {
        let Some(text) = payload(&line) else { continue };
        stats.lines += 1;
        match IpAddr::from_str(text) {
            Ok(addr) => set.admit(addr, &mut stats),
            Err(_) => stats.malformed += 1,
        }
    }
    if set.entries.is_empty() {
        return Err(HitlistError::Empty {
            path: path.display().to_string(),
            skipped: stats.malformed + stats.wrong_family,
        });
    }
    Ok((set, stats))
}

/// Longest-prefix-match table from prefixes to values. Lookup scans prefix
/// lengths from most to least specific, masking the address once per length,
/// so results cannot depend on insertion order.
#[derive(Debug, Clone)]
pub struct PrefixTable<V> {
    by_len: BTreeMap<(Family, u8), HashMap<u128, V>>,
}

impl<V> Default for PrefixTable<V> {
    fn default() -> Self {
        PrefixTable { by_len: BTreeMap::new() }
    }
}

impl<V: Clone> PrefixTable<V> {
    pub fn new() -> Self {
        PrefixTable::default()
    }

    pub fn insert(&mut self, prefix: Prefix, value: V) -> Option<V> {
        self.by_len
            .entry((prefix.family(), prefix.len()))
            .or_default()
            .insert(addr_to_bits(prefix.base()), value)
    }

    pub fn lookup(&self, addr: IpAddr) -> Option<&V> {
        self.lookup_with_prefix(addr).map(|(_, v)| v)
    }

    /// Like [`lookup`](Self::lookup) but also yields the matched prefix,
    /// for callers keyed on the route entry rather than the address.
    pub fn lookup_with_prefix(&self, addr: IpAddr) -> Option<(Prefix, &V)> {
        let family = Family::of(addr);
        let bits = addr_to_bits(addr);
        let width = family.width();
        self.by_len
            .range((family, 0)..=(family, width))
            .rev()
            .find_map(|((_, len), table)| {
                let shift = u32::from(width - len);
                let masked = if shift == 128 { 0 } else { (bits >> shift) << shift };
                table.get(&masked).map(|v| {
                    let prefix = Prefix::new(bits_to_addr(masked, family), *len)
                        .expect("masked base is canonical");
                    (prefix, v)
                })
            })
    }

    pub fn is_empty(&self) -> bool {
        self.by_len.values().all(HashMap::is_empty)
    }

    pub fn entries(&self) -> impl Iterator<Item = (Prefix, &V)> {
        self.by_len.iter().flat_map(|(&(family, len), table)| {
            table.iter().map(move |(&bits, v)| {
                let prefix = Prefix::new(bits_to_addr(bits, family), len)
                    .expect("stored bases are canonical");
                (prefix, v)
            })
        })
    }
}

/// Maps addresses to origin AS numbers. Unroutable space maps to AS 0.
#[derive(Debug, Clone, Default)]
pub struct AsMap {
    table: PrefixTable<u32>,
    names: HashMap<u32, String>,
}

impl AsMap {
    pub fn insert(&mut self, prefix: Prefix, asn: u32, name: impl Into<String>) {
        self.table.insert(prefix, asn);
        let name = name.into();
        if !name.is_empty() {
            self.names.insert(asn, name);
        }
    }

    /// Longest-prefix match; 0 means "no covering prefix".
    pub fn lookup_as(&self, addr: IpAddr) -> u32 {
        self.table.lookup(addr).copied().unwrap_or(0)
    }

    pub fn as_name(&self, asn: u32) -> Option<&str> {
        self.names.get(&asn).map(String::as_str)
    }
}

/// Loads `prefix,asn,name` rows. The name may contain commas; only the
/// first two fields split.
pub fn load_as_map(path: &Path) -> Result<(AsMap, LoadStats), HitlistError> {
    let mut map = AsMap::default();
    let mut stats = LoadStats::default();
    for line in read_lines(path)? {
        let Some(text) = payload(&line) else { continue };
        stats.lines += 1;
        let mut fields = text.splitn(3, ',');
        let parsed = (|| {
            let prefix: Prefix = fields.next()?.trim().parse().ok()?;
            let asn: u32 = fields.next()?.trim().parse().ok()?;
            Some((prefix, asn, fields.next().unwrap_or("").trim().to_owned()))
        })();
        match parsed {
            Some((prefix, asn, name)) => map.insert(prefix, asn, name),
            None => stats.malformed += 1,
        }
    }
    if map.table.is_empty() {
        return Err(HitlistError::Empty {
            path: path.display().to_string(),
            skipped: stats.malformed,
        });
    }
    Ok((map, stats))
}

/// Loads an anycast exclusion list: one prefix per line. Multi-client runs
/// subtract these before reporting, because probes from several vantage
/// points land at different sites of *other* anycast deployments by design.
pub fn load_exclusions(path: &Path) -> Result<(BTreeSet<Prefix>, LoadStats), HitlistError> {
    let mut set = BTreeSet::new();
    let mut stats = LoadStats::default();
    for line in read_lines(path)? {
        let Some(text) = payload(&line) else { continue };
        stats.lines += 1;
        match text.parse::<Prefix>() {
            Ok(p) => {
                if !set.insert(p) {
                    stats.duplicates += 1;
                }
            }
            Err(_) => stats.malformed += 1,
        }
    }
    Ok((set, stats))
}

/// Prefix population category, for the share-of-eyeball-networks statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Residential,
    Other,
}

impl FromStr for Category {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "residential" => Ok(Category::Residential),
            "other" => Ok(Category::Other),
            _ => Err(()),
        }
    }
}

/// Loads `prefix,category` rows with categories `residential` / `other`.
pub fn load_categories(path: &Path) -> Result<(PrefixTable<Category>, LoadStats), HitlistError> {
    let mut table = PrefixTable::default();
    let mut stats = LoadStats::default();
    for line in read_lines(path)? {
        let Some(text) = payload(&line) else { continue };
        stats.lines += 1;
        let parsed = (|| {
            let (prefix, cat) = text.split_once(',')?;
            let prefix: Prefix = prefix.trim().parse().ok()?;
            let cat: Category = cat.trim().parse().ok()?;
            Some((prefix, cat))
        })();
        match parsed {
            Some((prefix, cat)) => {
                table.insert(prefix, cat);
            }
            None => stats.malformed += 1,
        }
    }
    if table.is_empty() {
        return Err(HitlistError::Empty {
            path: path.display().to_string(),
            skipped: stats.malformed,
        });
    }
    Ok((table, stats))
}
