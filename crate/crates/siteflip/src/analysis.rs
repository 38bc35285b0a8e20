//! Turns merged reply logs into findings: which prefixes flip between
//! sites, how protocols and header layers compare, how flipping distributes
//! over origin networks, and how stable and costly it is.
//!
//! Reports hold per-prefix site sets as bit masks over an interned site
//! table, so multi-million-prefix logs fit in memory. Sixty-four sites is
//! far beyond any deployment this models; the cap is enforced, not assumed.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write as _};
use std::path::Path;

use thiserror::Error;

use crate::hitlist::{AsMap, Category, PrefixTable};
use crate::model::{Family, Prefix, SiteId};
use crate::prober::{RecordKind, ReplyRecord};

/// Site masks are single u64 words; reports cannot span more sites.
pub const MAX_SITES: usize = 64;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("more than {MAX_SITES} distinct sites in one log")]
    TooManySites,
    #[error("reports mix address families or prefix granularities")]
    MixedUniverse,
    #[error("consistency classes need at least 3 runs, got {0}")]
    TooFewRuns(usize),
    #[error("layer classification needs at least one port-varied run")]
    NoPortVariedRuns,
}

/// Interns site names to mask bit positions, first appearance first.
#[derive(Debug, Clone, Default)]
struct SiteTable {
    names: Vec<SiteId>,
}

impl SiteTable {
    fn intern(&mut self, site: &SiteId) -> Result<u8, AnalysisError> {
        if let Some(i) = self.names.iter().position(|n| n == site) {
            return Ok(i as u8);
        }
        if self.names.len() >= MAX_SITES {
            return Err(AnalysisError::TooManySites);
        }
        self.names.push(site.clone());
        Ok((self.names.len() - 1) as u8)
    }

    fn name(&self, idx: u8) -> &SiteId {
        &self.names[usize::from(idx)]
    }
}

fn union_mask(entries: &[(u8, u64)]) -> u64 {
    entries.iter().fold(0, |m, (_, sites)| m | sites)
}

/// Percentage of `part` in `whole`; 0 when the whole is empty.
pub fn pct(part: u64, whole: u64) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 * 100.0 / whole as f64
    }
}

/// Which sites answered each flow variation, per prefix, for one run.
///
/// A prefix is responsive when at least one reply record named it, and
/// flipping when the union of reply sites across all its variations spans
/// two or more sites. Hop errors never count toward either.
#[derive(Debug, Clone)]
pub struct FlipReport {
    run_id: u32,
    sites: SiteTable,
    prefixes: BTreeMap<Prefix, Vec<(u8, u64)>>,
}

impl FlipReport {
    pub fn run_id(&self) -> u32 {
        self.run_id
    }

    pub fn responsive_count(&self) -> u64 {
        self.prefixes.len() as u64
    }

    pub fn flipped_count(&self) -> u64 {
        self.prefixes
            .values()
            .filter(|e| union_mask(e).count_ones() >= 2)
            .count() as u64
    }

    pub fn flipped_pct(&self) -> f64 {
        pct(self.flipped_count(), self.responsive_count())
    }

    pub fn responsive(&self, prefix: Prefix) -> bool {
        self.prefixes.contains_key(&prefix)
    }

    pub fn flipped(&self, prefix: Prefix) -> bool {
        self.prefixes
            .get(&prefix)
            .is_some_and(|e| union_mask(e).count_ones() >= 2)
    }

    pub fn responsive_prefixes(&self) -> impl Iterator<Item = Prefix> + '_ {
        self.prefixes.keys().copied()
    }

    pub fn flipped_prefixes(&self) -> impl Iterator<Item = Prefix> + '_ {
        self.prefixes
            .iter()
            .filter(|(_, e)| union_mask(e).count_ones() >= 2)
            .map(|(p, _)| *p)
    }

    pub fn flipped_set(&self) -> BTreeSet<Prefix> {
        self.flipped_prefixes().collect()
    }

    /// Materializes the per-variation site sets for one prefix.
    pub fn sites_by_variation(&self, prefix: Prefix) -> Option<BTreeMap<u8, BTreeSet<SiteId>>> {
        let entries = self.prefixes.get(&prefix)?;
        let mut out = BTreeMap::new();
        for (variation, mask) in entries {
            let sites: BTreeSet<SiteId> = (0..64)
                .filter(|b| mask & (1 << b) != 0)
                .map(|b| self.sites.name(b).clone())
                .collect();
            out.insert(*variation, sites);
        }
        Some(out)
    }

    /// All sites that ever answered this prefix, across variations.
    pub fn site_union(&self, prefix: Prefix) -> Option<BTreeSet<SiteId>> {
        let mask = union_mask(self.prefixes.get(&prefix)?);
        Some(
            (0..64)
                .filter(|b| mask & (1 << b) != 0)
                .map(|b| self.sites.name(b).clone())
                .collect(),
        )
    }

    /// Family and granularity of this report's universe, from its first
    /// prefix; None when empty.
    fn universe(&self) -> Option<(Family, u8)> {
        self.prefixes.keys().next().map(|p| (p.family(), p.len()))
    }
}

/// Streaming builder for a [`FlipReport`], so logs never need to be held
/// in memory whole.
#[derive(Debug, Clone)]
pub struct FlipAccumulator {
    report: FlipReport,
    saw_record: bool,
}

impl Default for FlipAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl FlipAccumulator {
    pub fn new() -> Self {
        FlipAccumulator {
            report: FlipReport {
                run_id: 0,
                sites: SiteTable::default(),
                prefixes: BTreeMap::new(),
            },
            saw_record: false,
        }
    }

    pub fn push(&mut self, record: &ReplyRecord) -> Result<(), AnalysisError> {
        if !self.saw_record {
            self.report.run_id = record.run_id;
            self.saw_record = true;
        }
        if record.kind != RecordKind::Reply {
            return Ok(());
        }
        let bit = 1u64 << self.report.sites.intern(&record.rx_site)?;
        let entries = self.report.prefixes.entry(record.target_prefix).or_default();
        match entries.binary_search_by_key(&record.variation_id, |e| e.0) {
            Ok(i) => entries[i].1 |= bit,
            Err(i) => entries.insert(i, (record.variation_id, bit)),
        }
        Ok(())
    }

    pub fn finish(self) -> FlipReport {
        self.report
    }
}

/// Builds a flip report from any record stream in one pass. Record order
/// never changes the result.
pub fn detect_flips(
    records: impl IntoIterator<Item = ReplyRecord>,
) -> Result<FlipReport, AnalysisError> {
    let mut acc = FlipAccumulator::new();
    for r in records {
        acc.push(&r)?;
    }
    Ok(acc.finish())
}

/// Disjoint split of two runs' flipped prefixes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Intersection {
    pub only_a: BTreeSet<Prefix>,
    pub only_b: BTreeSet<Prefix>,
    pub both: BTreeSet<Prefix>,
}

/// Splits the flipped sets of two runs over an explicit eligibility
/// predicate. Protocol comparisons pass "responsive in both"; layer
/// comparisons pass their own universe. Prefixes failing the predicate
/// appear in no bucket.
pub fn intersect_flip_sets(
    a: &FlipReport,
    b: &FlipReport,
    eligible: impl Fn(Prefix) -> bool,
) -> Intersection {
    let mut out = Intersection::default();
    for p in a.flipped_prefixes().filter(|p| eligible(*p)) {
        if b.flipped(p) {
            out.both.insert(p);
        } else {
            out.only_a.insert(p);
        }
    }
    for p in b.flipped_prefixes().filter(|p| eligible(*p)) {
        if !a.flipped(p) {
            out.only_b.insert(p);
        }
    }
    out
}

/// Compares two runs restricted to prefixes responsive in both, the
/// restriction used for protocol-against-protocol comparisons.
pub fn intersect_runs(a: &FlipReport, b: &FlipReport) -> Result<Intersection, AnalysisError> {
    if let (Some(ua), Some(ub)) = (a.universe(), b.universe()) {
        if ua != ub {
            return Err(AnalysisError::MixedUniverse);
        }
    }
    Ok(intersect_flip_sets(a, b, |p| {
        a.responsive(p) && b.responsive(p)
    }))
}

/// Which header layer's variation makes a prefix flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LayerClass {
    /// Flips only when the source address varies.
    L3Only,
    /// Flips only when ports vary.
    L4Only,
    /// Flips either way.
    Both,
    /// Responsive everywhere, flips nowhere.
    None,
}

impl LayerClass {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerClass::L3Only => "l3_only",
            LayerClass::L4Only => "l4_only",
            LayerClass::Both => "both",
            LayerClass::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerCounts {
    pub l3_only: u64,
    pub l4_only: u64,
    pub both: u64,
    pub none: u64,
}

/// Per-prefix layer classes over the prefixes responsive in every
/// compared run. Only flipping prefixes are stored; the None class is the
/// rest of the universe.
#[derive(Debug, Clone)]
pub struct LayerReport {
    universe: u64,
    classes: BTreeMap<Prefix, LayerClass>,
}

impl LayerReport {
    /// Universe size: prefixes responsive in the IP-varied run and every
    /// port-varied run.
    pub fn universe_count(&self) -> u64 {
        self.universe
    }

    /// Class of a prefix that flips somewhere; None-class prefixes and
    /// prefixes outside the universe both yield None here.
    pub fn class_of(&self, prefix: Prefix) -> Option<LayerClass> {
        self.classes.get(&prefix).copied()
    }

    pub fn classes(&self) -> impl Iterator<Item = (Prefix, LayerClass)> + '_ {
        self.classes.iter().map(|(p, c)| (*p, *c))
    }

    pub fn counts(&self) -> LayerCounts {
        let mut c = LayerCounts::default();
        for class in self.classes.values() {
            match class {
                LayerClass::L3Only => c.l3_only += 1,
                LayerClass::L4Only => c.l4_only += 1,
                LayerClass::Both => c.both += 1,
                LayerClass::None => unreachable!("non-flipping prefixes are not stored"),
            }
        }
        c.none = self.universe - c.l3_only - c.l4_only - c.both;
        c
    }
}

/// Classifies each prefix by which variation layer reveals flipping. The
/// universe is restricted to prefixes responsive in all supplied runs, so
/// the four classes partition it exactly.
pub fn classify_layers(
    ip_run: &FlipReport,
    l4_runs: &[&FlipReport],
) -> Result<LayerReport, AnalysisError> {
    if l4_runs.is_empty() {
        return Err(AnalysisError::NoPortVariedRuns);
    }
    if let Some(u) = ip_run.universe() {
        for r in l4_runs {
            if r.universe().is_some_and(|ur| ur != u) {
                return Err(AnalysisError::MixedUniverse);
            }
        }
    }
    let mut universe = 0u64;
    let mut classes = BTreeMap::new();
    for p in ip_run.responsive_prefixes() {
        if !l4_runs.iter().all(|r| r.responsive(p)) {
            continue;
        }
        universe += 1;
        let l3 = ip_run.flipped(p);
        let l4 = l4_runs.iter().any(|r| r.flipped(p));
        let class = match (l3, l4) {
            (true, true) => LayerClass::Both,
            (true, false) => LayerClass::L3Only,
            (false, true) => LayerClass::L4Only,
            (false, false) => continue,
        };
        classes.insert(p, class);
    }
    Ok(LayerReport { universe, classes })
}

/// Responsive and flipped counts for one origin AS.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AsStats {
    pub responsive: u64,
    pub flipped: u64,
}

impl AsStats {
    pub fn ratio(&self) -> f64 {
        if self.responsive == 0 {
            0.0
        } else {
            self.flipped as f64 / self.responsive as f64
        }
    }
}

/// Flip counts grouped by origin AS. AS 0 buckets prefixes the map does
/// not cover.
#[derive(Debug, Clone, Default)]
pub struct AsAggregate {
    pub per_as: BTreeMap<u32, AsStats>,
}

pub fn aggregate_as(report: &FlipReport, as_map: &AsMap) -> AsAggregate {
    let mut agg = AsAggregate::default();
    for p in report.responsive_prefixes() {
        let asn = as_map.lookup_as(p.base());
        let stats = agg.per_as.entry(asn).or_default();
        stats.responsive += 1;
        if report.flipped(p) {
            stats.flipped += 1;
        }
    }
    agg
}

/// CDF of per-AS flip ratios over mapped ASes with more than
/// `min_responsive` responsive prefixes. Points are (ratio, share of ASes
/// at or below it), one per distinct ratio.
pub fn ratio_cdf(agg: &AsAggregate, min_responsive: u64) -> Vec<(f64, f64)> {
    let mut ratios: Vec<f64> = agg
        .per_as
        .iter()
        .filter(|(asn, s)| **asn != 0 && s.responsive > min_responsive)
        .map(|(_, s)| s.ratio())
        .collect();
    ratios.sort_by(|a, b| a.total_cmp(b));
    let n = ratios.len();
    let mut points = Vec::new();
    for (i, r) in ratios.iter().enumerate() {
        let share = (i + 1) as f64 / n as f64;
        match points.last_mut() {
            Some((x, y)) if *x == *r => *y = share,
            _ => points.push((*r, share)),
        }
    }
    points
}

/// Share of flipped prefixes whose covering category entry says
/// residential, as a percentage of categorized flipped prefixes.
pub fn residential_share(report: &FlipReport, categories: &PrefixTable<Category>) -> f64 {
    let mut categorized = 0u64;
    let mut residential = 0u64;
    for p in report.flipped_prefixes() {
        match categories.lookup(p.base()) {
            Some(Category::Residential) => {
                categorized += 1;
                residential += 1;
            }
            Some(Category::Other) => categorized += 1,
            None => {}
        }
    }
    pct(residential, categorized)
}

/// How regularly a prefix flips across a series of identical runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConsistencyClass {
    /// Flipped in every run.
    Persistent,
    /// Flipped in three or more runs, but not all.
    LoadDependent,
    /// Flipped once or twice.
    Transient,
}

impl ConsistencyClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ConsistencyClass::Persistent => "persistent",
            ConsistencyClass::LoadDependent => "load_dependent",
            ConsistencyClass::Transient => "transient",
        }
    }

    /// Bucket edges are literal counts, not fractions: all runs, 3 to
    /// n-1 runs, or 1 to 2 runs.
    pub fn classify(observed: u32, run_count: u32) -> ConsistencyClass {
        if observed == run_count {
            ConsistencyClass::Persistent
        } else if observed >= 3 {
            ConsistencyClass::LoadDependent
        } else {
            ConsistencyClass::Transient
        }
    }
}

/// Per-prefix flip occurrence counts over an n-run series.
#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    run_count: u32,
    observed: BTreeMap<Prefix, u32>,
}

impl ConsistencyReport {
    pub fn run_count(&self) -> u32 {
        self.run_count
    }

    /// Prefixes that flipped in at least one run.
    pub fn total(&self) -> u64 {
        self.observed.len() as u64
    }

    pub fn class_of(&self, prefix: Prefix) -> Option<(ConsistencyClass, u32)> {
        let observed = *self.observed.get(&prefix)?;
        Some((ConsistencyClass::classify(observed, self.run_count), observed))
    }

    pub fn counts(&self) -> [(ConsistencyClass, u64); 3] {
        let mut c = [
            (ConsistencyClass::Persistent, 0),
            (ConsistencyClass::LoadDependent, 0),
            (ConsistencyClass::Transient, 0),
        ];
        for observed in self.observed.values() {
            let class = ConsistencyClass::classify(*observed, self.run_count);
            c.iter_mut().find(|(k, _)| *k == class).unwrap().1 += 1;
        }
        c
    }

    /// Class shares as percentages of ever-flipped prefixes.
    pub fn shares(&self) -> [(ConsistencyClass, f64); 3] {
        let total = self.total();
        self.counts().map(|(class, n)| (class, pct(n, total)))
    }
}

/// Counts, per prefix, in how many of the supplied runs it flipped.
pub fn classify_consistency(reports: &[&FlipReport]) -> Result<ConsistencyReport, AnalysisError> {
    if reports.len() < 3 {
        return Err(AnalysisError::TooFewRuns(reports.len()));
    }
    let mut observed = BTreeMap::new();
    for report in reports {
        for p in report.flipped_prefixes() {
            *observed.entry(p).or_insert(0u32) += 1;
        }
    }
    Ok(ConsistencyReport {
        run_count: reports.len() as u32,
        observed,
    })
}

/// Overlap of two flip sets taken at different times.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Longevity {
    pub flipped_t0: u64,
    pub flipped_t1: u64,
    pub persisting: u64,
}

impl Longevity {
    /// Share of the earlier flip set still flipping later, in percent.
    pub fn share_of_t0_pct(&self) -> f64 {
        pct(self.persisting, self.flipped_t0)
    }
}

pub fn longevity(t0: &FlipReport, t1: &FlipReport) -> Longevity {
    Longevity {
        flipped_t0: t0.flipped_count(),
        flipped_t1: t1.flipped_count(),
        persisting: t0.flipped_prefixes().filter(|p| t1.flipped(*p)).count() as u64,
    }
}

/// Path latency spread for one flipping prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixLatency {
    /// Mean one-way latency per answering site, milliseconds.
    pub per_site_ms: BTreeMap<SiteId, f64>,
    pub min_path_ms: f64,
    pub max_path_ms: f64,
    pub oneway_diff_ms: f64,
    /// Twice the one-way difference, assuming the inflated path carries
    /// both directions.
    pub rtt_diff_ms: f64,
}

/// Latency spread across sites for every prefix whose replies took at
/// least two measurable paths.
#[derive(Debug, Clone, Default)]
pub struct LatencyReport {
    prefixes: BTreeMap<Prefix, PrefixLatency>,
    /// Reply records dropped because their one-way time was negative;
    /// surfaced rather than clamped, since they mean clock skew.
    pub clock_skew_excluded: u64,
}

impl LatencyReport {
    pub fn prefixes(&self) -> &BTreeMap<Prefix, PrefixLatency> {
        &self.prefixes
    }

    pub fn mean_min_ms(&self) -> f64 {
        self.mean_of(|p| p.min_path_ms)
    }

    pub fn mean_max_ms(&self) -> f64 {
        self.mean_of(|p| p.max_path_ms)
    }

    pub fn mean_oneway_diff_ms(&self) -> f64 {
        self.mean_of(|p| p.oneway_diff_ms)
    }

    pub fn mean_rtt_diff_ms(&self) -> f64 {
        self.mean_of(|p| p.rtt_diff_ms)
    }

    fn mean_of(&self, f: impl Fn(&PrefixLatency) -> f64) -> f64 {
        if self.prefixes.is_empty() {
            return 0.0;
        }
        self.prefixes.values().map(f).sum::<f64>() / self.prefixes.len() as f64
    }

    /// CDF of per-prefix RTT differences at 1 ms resolution: share of
    /// prefixes whose difference rounds down to at most x ms.
    pub fn rtt_diff_cdf(&self) -> Vec<(u64, f64)> {
        let mut bins: Vec<u64> = self
            .prefixes
            .values()
            .map(|p| p.rtt_diff_ms.floor() as u64)
            .collect();
        bins.sort_unstable();
        let n = bins.len();
        let mut points = Vec::new();
        for (i, b) in bins.iter().enumerate() {
            let share = (i + 1) as f64 / n as f64;
            match points.last_mut() {
                Some((x, y)) if *x == *b => *y = share,
                _ => points.push((*b, share)),
            }
        }
        points
    }
}

/// Streaming latency accumulator over reply records.
#[derive(Debug, Clone, Default)]
pub struct LatencyAccumulator {
    sites: SiteTable,
    /// Per prefix: (site index, one-way sum ns, sample count), ascending
    /// by site index.
    acc: BTreeMap<Prefix, Vec<(u8, u64, u64)>>,
    skew: u64,
}

impl LatencyAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: &ReplyRecord) -> Result<(), AnalysisError> {
        if record.kind != RecordKind::Reply {
            return Ok(());
        }
        let Some(oneway) = record.rx_time_ns.checked_sub(record.tx_time_ns) else {
            self.skew += 1;
            return Ok(());
        };
        let idx = self.sites.intern(&record.rx_site)?;
        let entries = self.acc.entry(record.target_prefix).or_default();
        match entries.binary_search_by_key(&idx, |e| e.0) {
            Ok(i) => {
                entries[i].1 += oneway;
                entries[i].2 += 1;
            }
            Err(i) => entries.insert(i, (idx, oneway, 1)),
        }
        Ok(())
    }

    pub fn finish(self) -> LatencyReport {
        let mut prefixes = BTreeMap::new();
        for (prefix, entries) in self.acc {
            // one measurable path is no spread; those prefixes are skipped
            if entries.len() < 2 {
                continue;
            }
            let per_site_ms: BTreeMap<SiteId, f64> = entries
                .iter()
                .map(|(idx, sum, count)| {
                    let mean_ms = *sum as f64 / *count as f64 / 1e6;
                    (self.sites.name(*idx).clone(), mean_ms)
                })
                .collect();
            let min_path_ms = per_site_ms.values().copied().fold(f64::INFINITY, f64::min);
            let max_path_ms = per_site_ms
                .values()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let oneway_diff_ms = max_path_ms - min_path_ms;
            prefixes.insert(
                prefix,
                PrefixLatency {
                    per_site_ms,
                    min_path_ms,
                    max_path_ms,
                    oneway_diff_ms,
                    rtt_diff_ms: 2.0 * oneway_diff_ms,
                },
            );
        }
        LatencyReport {
            prefixes,
            clock_skew_excluded: self.skew,
        }
    }
}

/// Computes per-prefix path latency spread from any record stream.
/// Negative one-way times are excluded and counted, never clamped.
pub fn latency_stats(
    records: impl IntoIterator<Item = ReplyRecord>,
) -> Result<LatencyReport, AnalysisError> {
    let mut acc = LatencyAccumulator::new();
    for r in records {
        acc.push(&r)?;
    }
    Ok(acc.finish())
}

/// Flipped prefixes of a multi-vantage run minus known anycast prefixes.
/// A prefix is excluded when the census lists it or any covering prefix;
/// flips inside other anycast deployments are their routing, not load
/// balancing.
pub fn multi_client_filter(
    report: &FlipReport,
    exclusions: &BTreeSet<Prefix>,
) -> BTreeSet<Prefix> {
    let mut table = PrefixTable::new();
    for p in exclusions {
        table.insert(*p, ());
    }
    report
        .flipped_prefixes()
        .filter(|p| table.lookup(p.base()).is_none())
        .collect()
}

/// Writes one summary row per labeled report:
/// `label,responsive,flipped,flipped_pct`.
pub fn write_flip_table(path: &Path, rows: &[(&str, &FlipReport)]) -> io::Result<()> {
    let mut out = io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "label,responsive,flipped,flipped_pct")?;
    for (label, report) in rows {
        writeln!(
            out,
            "{label},{},{},{:.1}",
            report.responsive_count(),
            report.flipped_count(),
            report.flipped_pct(),
        )?;
    }
    out.flush()
}

/// Writes the three-bucket split of two flip sets as `set,count` rows.
pub fn write_intersection(
    path: &Path,
    label_a: &str,
    label_b: &str,
    split: &Intersection,
) -> io::Result<()> {
    let mut out = io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "set,count")?;
    writeln!(out, "only_{label_a},{}", split.only_a.len())?;
    writeln!(out, "only_{label_b},{}", split.only_b.len())?;
    writeln!(out, "both,{}", split.both.len())?;
    out.flush()
}

/// Writes `class,count` rows for the four layer classes.
pub fn write_layer_table(path: &Path, report: &LayerReport) -> io::Result<()> {
    let mut out = io::BufWriter::new(std::fs::File::create(path)?);
    let c = report.counts();
    writeln!(out, "class,count")?;
    writeln!(out, "{},{}", LayerClass::L3Only.as_str(), c.l3_only)?;
    writeln!(out, "{},{}", LayerClass::L4Only.as_str(), c.l4_only)?;
    writeln!(out, "{},{}", LayerClass::Both.as_str(), c.both)?;
    writeln!(out, "{},{}", LayerClass::None.as_str(), c.none)?;
    out.flush()
}

/// Writes per-AS rows ordered by flipped count descending (ASN ascending
/// on ties): `asn,responsive,flipped,ratio`. Unmapped prefixes appear as
/// ASN 0.
pub fn write_as_table(path: &Path, agg: &AsAggregate) -> io::Result<()> {
    let mut rows: Vec<(&u32, &AsStats)> = agg.per_as.iter().collect();
    rows.sort_by(|(a_asn, a), (b_asn, b)| b.flipped.cmp(&a.flipped).then(a_asn.cmp(b_asn)));
    let mut out = io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "asn,responsive,flipped,ratio")?;
    for (asn, stats) in rows {
        writeln!(
            out,
            "{asn},{},{},{:.3}",
            stats.responsive,
            stats.flipped,
            stats.ratio(),
        )?;
    }
    out.flush()
}

/// Writes `class,count,share_pct` rows for the three consistency buckets.
pub fn write_consistency_table(path: &Path, report: &ConsistencyReport) -> io::Result<()> {
    let mut out = io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "class,count,share_pct")?;
    let counts = report.counts();
    for ((class, count), (_, share)) in counts.iter().zip(report.shares()) {
        writeln!(out, "{},{count},{share:.1}", class.as_str())?;
    }
    out.flush()
}

/// Writes one row per measured prefix:
/// `prefix,min_ms,max_ms,oneway_diff_ms,rtt_diff_ms`.
pub fn write_latency_table(path: &Path, report: &LatencyReport) -> io::Result<()> {
    let mut out = io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "prefix,min_ms,max_ms,oneway_diff_ms,rtt_diff_ms")?;
    for (prefix, lat) in report.prefixes() {
        writeln!(
            out,
            "{prefix},{:.3},{:.3},{:.3},{:.3}",
            lat.min_path_ms, lat.max_path_ms, lat.oneway_diff_ms, lat.rtt_diff_ms,
        )?;
    }
    out.flush()
}

/// Writes plot-ready CDF points, one `x,y` pair per line.
pub fn write_cdf(path: &Path, points: &[(f64, f64)]) -> io::Result<()> {
    let mut out = io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "x,y")?;
    for (x, y) in points {
        writeln!(out, "{x:.6},{y:.6}")?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Protocol;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::collections::HashMap;
    use std::net::IpAddr;

    fn prefix(n: u32) -> Prefix {
        let base = IpAddr::V4(std::net::Ipv4Addr::from((n + 256) << 8));
        Prefix::new(base, 24).unwrap()
    }

    fn reply(p: Prefix, variation: u8, rx: &str) -> ReplyRecord {
        ReplyRecord {
            run_id: 9,
            protocol: Protocol::Icmp,
            target_addr: p.base(),
            target_prefix: p,
            variation_id: variation,
            src_addr: "198.51.100.1".parse().unwrap(),
            src_port: 0,
            dst_port: 0,
            tx_site: "AMS".parse().unwrap(),
            rx_site: rx.parse().unwrap(),
            tx_time_ns: 1_000,
            rx_time_ns: 2_000,
            reply_ttl: 60,
            kind: RecordKind::Reply,
            hop_addr: None,
        }
    }

    fn hop_error(p: Prefix, variation: u8, rx: &str) -> ReplyRecord {
        let mut r = reply(p, variation, rx);
        r.kind = RecordKind::TimeExceeded;
        r.hop_addr = Some("10.30.0.1".parse().unwrap());
        r
    }

    #[test]
    fn flips_need_two_distinct_reply_sites() {
        let a = prefix(0);
        let b = prefix(1);
        let c = prefix(2);
        let report = detect_flips(vec![
            reply(a, 0, "AMS"),
            reply(a, 1, "AMS"),
            reply(a, 2, "AMS"),
            reply(b, 0, "AMS"),
            reply(b, 3, "TYO"),
            // hop errors prove nothing about the answering site
            hop_error(c, 0, "AMS"),
            hop_error(c, 1, "TYO"),
        ])
        .unwrap();

        assert_eq!(report.run_id(), 9);
        assert_eq!(report.responsive_count(), 2);
        assert_eq!(report.flipped_count(), 1);
        assert!(report.responsive(a) && !report.flipped(a));
        assert!(report.flipped(b));
        assert!(!report.responsive(c));

        let by_var = report.sites_by_variation(b).unwrap();
        assert_eq!(by_var.len(), 2);
        assert_eq!(by_var[&0].iter().next().unwrap().as_str(), "AMS");
        assert_eq!(by_var[&3].iter().next().unwrap().as_str(), "TYO");
        let union = report.site_union(b).unwrap();
        assert_eq!(union.len(), 2);
    }

    #[test]
    fn detection_is_permutation_invariant() {
        let records: Vec<ReplyRecord> = (0..40)
            .map(|i| {
                let sites = ["AMS", "TYO", "FRA"];
                reply(prefix(i % 7), (i % 5) as u8, sites[(i % 3) as usize])
            })
            .collect();
        let forward = detect_flips(records.clone()).unwrap();
        let mut shuffled = records;
        shuffled.reverse();
        shuffled.rotate_left(13);
        let backward = detect_flips(shuffled).unwrap();

        assert_eq!(forward.flipped_set(), backward.flipped_set());
        assert_eq!(
            forward.responsive_prefixes().collect::<Vec<_>>(),
            backward.responsive_prefixes().collect::<Vec<_>>()
        );
        for p in forward.responsive_prefixes() {
            assert_eq!(forward.sites_by_variation(p), backward.sites_by_variation(p));
        }
    }

    #[test]
    fn at_most_64_sites_fit_a_report() {
        let mut acc = FlipAccumulator::new();
        for i in 0..64 {
            acc.push(&reply(prefix(0), 0, &format!("S{i}"))).unwrap();
        }
        let err = acc.push(&reply(prefix(0), 0, "S64")).unwrap_err();
        assert!(matches!(err, AnalysisError::TooManySites));
    }

    #[test]
    fn intersection_matches_set_algebra_oracle() {
        let mut rng = StdRng::seed_from_u64(31);
        // random universes: prefix i responsive/flipped with coin flips
        let mut recs_a = Vec::new();
        let mut recs_b = Vec::new();
        let mut resp = [BTreeSet::new(), BTreeSet::new()];
        let mut flip = [BTreeSet::new(), BTreeSet::new()];
        for i in 0..300u32 {
            for (side, recs) in [(0usize, &mut recs_a), (1usize, &mut recs_b)] {
                if rng.gen_bool(0.7) {
                    resp[side].insert(prefix(i));
                    recs.push(reply(prefix(i), 0, "AMS"));
                    if rng.gen_bool(0.4) {
                        flip[side].insert(prefix(i));
                        recs.push(reply(prefix(i), 1, "TYO"));
                    }
                }
            }
        }
        let a = detect_flips(recs_a).unwrap();
        let b = detect_flips(recs_b).unwrap();
        let got = intersect_runs(&a, &b).unwrap();

        let eligible: BTreeSet<Prefix> = resp[0].intersection(&resp[1]).copied().collect();
        let fa: BTreeSet<Prefix> = flip[0].intersection(&eligible).copied().collect();
        let fb: BTreeSet<Prefix> = flip[1].intersection(&eligible).copied().collect();
        assert_eq!(got.both, fa.intersection(&fb).copied().collect());
        assert_eq!(got.only_a, fa.difference(&fb).copied().collect());
        assert_eq!(got.only_b, fb.difference(&fa).copied().collect());
        // the three buckets partition the eligible union
        let union: BTreeSet<Prefix> = fa.union(&fb).copied().collect();
        assert_eq!(
            got.only_a.len() + got.only_b.len() + got.both.len(),
            union.len()
        );
    }

    #[test]
    fn self_intersection_has_empty_exclusive_buckets() {
        let report = detect_flips(vec![
            reply(prefix(0), 0, "AMS"),
            reply(prefix(0), 1, "TYO"),
            reply(prefix(1), 0, "AMS"),
        ])
        .unwrap();
        let got = intersect_runs(&report, &report).unwrap();
        assert!(got.only_a.is_empty() && got.only_b.is_empty());
        assert_eq!(got.both.len(), 1);
    }

    #[test]
    fn layer_classes_partition_the_shared_universe() {
        // ip run: prefixes 0..6 responsive; 0,1 flip. l4 run: 0..5 and 9
        // responsive; 0,2 flip. universe is 0..6 ∩ (0..5 ∪ {9}) = 0..5.
        let ip = detect_flips(
            (0..6)
                .flat_map(|i| {
                    let mut v = vec![reply(prefix(i), 0, "AMS")];
                    if i < 2 {
                        v.push(reply(prefix(i), 1, "TYO"));
                    }
                    v
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let l4 = detect_flips(
            (0..5)
                .chain([9])
                .flat_map(|i| {
                    let mut v = vec![reply(prefix(i), 0, "AMS")];
                    if i == 0 || i == 2 {
                        v.push(reply(prefix(i), 1, "TYO"));
                    }
                    v
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();

        let layers = classify_layers(&ip, &[&l4]).unwrap();
        assert_eq!(layers.universe_count(), 5);
        assert_eq!(layers.class_of(prefix(0)), Some(LayerClass::Both));
        assert_eq!(layers.class_of(prefix(1)), Some(LayerClass::L3Only));
        assert_eq!(layers.class_of(prefix(2)), Some(LayerClass::L4Only));
        assert_eq!(layers.class_of(prefix(3)), None);
        let counts = layers.counts();
        assert_eq!(
            (counts.l3_only, counts.l4_only, counts.both, counts.none),
            (1, 1, 1, 2)
        );
        assert_eq!(
            counts.l3_only + counts.l4_only + counts.both + counts.none,
            layers.universe_count()
        );

        assert!(matches!(
            classify_layers(&ip, &[]),
            Err(AnalysisError::NoPortVariedRuns)
        ));
    }

    #[test]
    fn as_aggregation_matches_group_by_oracle() {
        let mut rng = StdRng::seed_from_u64(77);
        let mut as_map = AsMap::default();
        let mut records = Vec::new();
        let mut oracle: HashMap<u32, AsStats> = HashMap::new();
        for i in 0..500u32 {
            let p = prefix(i);
            // every third prefix is left unmapped on purpose
            let asn = if i % 3 == 2 { 0 } else { 64_500 + (i % 7) };
            if asn != 0 {
                as_map.insert(p, asn, "");
            }
            records.push(reply(p, 0, "AMS"));
            let flipped = rng.gen_bool(0.3);
            if flipped {
                records.push(reply(p, 1, "TYO"));
            }
            let s = oracle.entry(asn).or_default();
            s.responsive += 1;
            if flipped {
                s.flipped += 1;
            }
        }
        let report = detect_flips(records).unwrap();
        let agg = aggregate_as(&report, &as_map);
        assert_eq!(agg.per_as.len(), oracle.len());
        for (asn, stats) in &agg.per_as {
            assert_eq!(stats, &oracle[asn], "AS {asn}");
        }
    }

    #[test]
    fn ratio_cdf_is_monotone_and_filters_small_ases() {
        let mut agg = AsAggregate::default();
        agg.per_as.insert(
            0,
            AsStats {
                responsive: 100,
                flipped: 100,
            },
        );
        for (asn, responsive, flipped) in
            [(1, 20, 10), (2, 40, 40), (3, 5, 5), (4, 20, 10), (5, 30, 0)]
        {
            agg.per_as.insert(asn, AsStats { responsive, flipped });
        }
        let all = ratio_cdf(&agg, 0);
        // AS 0 is unmapped and never plotted; ratios collapse to 0, 0.5, 1
        assert_eq!(all, vec![(0.0, 0.2), (0.5, 0.6), (1.0, 1.0)]);
        assert!(all.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));

        let big = ratio_cdf(&agg, 10);
        // the filter keeps ASes with more than 10 responsive prefixes
        assert_eq!(big.len(), 3);
        assert_eq!(big[1], (0.5, 0.75));
    }

    #[test]
    fn consistency_buckets_follow_literal_edges() {
        // ten runs; planted occurrence counts 10, 5, 2 and 1
        let planted: [(u32, u32); 4] = [(0, 10), (1, 5), (2, 2), (3, 1)];
        let runs: Vec<FlipReport> = (0..10)
            .map(|run| {
                let mut records = Vec::new();
                for (i, count) in planted {
                    if run < count {
                        records.push(reply(prefix(i), 0, "AMS"));
                        records.push(reply(prefix(i), 1, "TYO"));
                    }
                }
                detect_flips(records).unwrap()
            })
            .collect();
        let refs: Vec<&FlipReport> = runs.iter().collect();
        let report = classify_consistency(&refs).unwrap();

        assert_eq!(report.run_count(), 10);
        assert_eq!(report.total(), 4);
        assert_eq!(
            report.class_of(prefix(0)),
            Some((ConsistencyClass::Persistent, 10))
        );
        assert_eq!(
            report.class_of(prefix(1)),
            Some((ConsistencyClass::LoadDependent, 5))
        );
        assert_eq!(
            report.class_of(prefix(2)),
            Some((ConsistencyClass::Transient, 2))
        );
        assert_eq!(
            report.class_of(prefix(3)),
            Some((ConsistencyClass::Transient, 1))
        );
        let share_sum: f64 = report.shares().iter().map(|(_, s)| s).sum();
        assert!((share_sum - 100.0).abs() < 0.1);

        assert!(matches!(
            classify_consistency(&refs[..2]),
            Err(AnalysisError::TooFewRuns(2))
        ));
    }

    #[test]
    fn three_run_series_has_no_load_dependent_bucket() {
        assert_eq!(
            ConsistencyClass::classify(3, 3),
            ConsistencyClass::Persistent
        );
        assert_eq!(
            ConsistencyClass::classify(2, 3),
            ConsistencyClass::Transient
        );
        assert_eq!(
            ConsistencyClass::classify(9, 10),
            ConsistencyClass::LoadDependent
        );
        assert_eq!(
            ConsistencyClass::classify(3, 10),
            ConsistencyClass::LoadDependent
        );
    }

    #[test]
    fn longevity_counts_surviving_flips() {
        let t0 = detect_flips(vec![
            reply(prefix(0), 0, "AMS"),
            reply(prefix(0), 1, "TYO"),
            reply(prefix(1), 0, "AMS"),
            reply(prefix(1), 1, "TYO"),
        ])
        .unwrap();
        let t1 = detect_flips(vec![
            reply(prefix(1), 0, "AMS"),
            reply(prefix(1), 1, "TYO"),
            reply(prefix(2), 0, "AMS"),
            reply(prefix(2), 1, "TYO"),
        ])
        .unwrap();
        let l = longevity(&t0, &t1);
        assert_eq!((l.flipped_t0, l.flipped_t1, l.persisting), (2, 2, 1));
        assert_eq!(l.share_of_t0_pct(), 50.0);

        let same = longevity(&t0, &t0);
        assert_eq!(same.share_of_t0_pct(), 100.0);
    }

    #[test]
    fn latency_means_come_from_valid_samples_only() {
        let p = prefix(0);
        let single = prefix(1);
        let mut records = Vec::new();
        // site AMS: samples 10 ms and 30 ms; site TYO: one 50 ms sample
        for (var, rx, tx, rx_t) in [
            (0u8, "AMS", 1_000_000_000u64, 1_010_000_000u64),
            (1, "AMS", 2_000_000_000, 2_030_000_000),
            (2, "TYO", 3_000_000_000, 3_050_000_000),
            // clock skew: arrives before it left
            (3, "TYO", 4_000_000_000, 3_999_999_999),
        ] {
            let mut r = reply(p, var, rx);
            r.tx_time_ns = tx;
            r.rx_time_ns = rx_t;
            records.push(r);
        }
        // a prefix with one answering site has no path spread
        records.push(reply(single, 0, "AMS"));

        let report = latency_stats(records).unwrap();
        assert_eq!(report.clock_skew_excluded, 1);
        assert_eq!(report.prefixes().len(), 1);
        let lat = &report.prefixes()[&p];
        assert_eq!(lat.per_site_ms.len(), 2);
        assert!((lat.per_site_ms[&"AMS".parse().unwrap()] - 20.0).abs() < 1e-9);
        assert!((lat.per_site_ms[&"TYO".parse().unwrap()] - 50.0).abs() < 1e-9);
        assert!((lat.min_path_ms - 20.0).abs() < 1e-9);
        assert!((lat.max_path_ms - 50.0).abs() < 1e-9);
        assert!((lat.oneway_diff_ms - 30.0).abs() < 1e-9);
        assert_eq!(lat.rtt_diff_ms, 2.0 * lat.oneway_diff_ms);

        let cdf = report.rtt_diff_cdf();
        assert_eq!(cdf, vec![(60, 1.0)]);
    }

    #[test]
    fn multi_client_filter_subtracts_census_prefixes() {
        // three flipping prefixes in three different /16s
        let (a, b, c) = (prefix(0), prefix(256), prefix(512));
        let report = detect_flips(vec![
            reply(a, 0, "AMS"),
            reply(a, 1, "TYO"),
            reply(b, 0, "AMS"),
            reply(b, 1, "TYO"),
            reply(c, 0, "AMS"),
            reply(c, 1, "TYO"),
        ])
        .unwrap();

        assert_eq!(
            multi_client_filter(&report, &BTreeSet::new()).len(),
            3,
            "empty census changes nothing"
        );

        let mut census = BTreeSet::new();
        census.insert(a);
        // a covering shorter prefix excludes everything under it
        census.insert(Prefix::of(b.base(), 16).unwrap());
        let remaining = multi_client_filter(&report, &census);
        assert_eq!(remaining, BTreeSet::from([c]));

        census.insert(c);
        assert!(multi_client_filter(&report, &census).is_empty());
    }

    #[test]
    fn report_files_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let report = detect_flips(vec![
            reply(prefix(0), 0, "AMS"),
            reply(prefix(0), 1, "TYO"),
            reply(prefix(1), 0, "AMS"),
        ])
        .unwrap();

        let flips = dir.path().join("flips.csv");
        write_flip_table(&flips, &[("icmp", &report)]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&flips).unwrap(),
            "label,responsive,flipped,flipped_pct\nicmp,2,1,50.0\n"
        );

        let inter = dir.path().join("intersect.csv");
        let split = intersect_runs(&report, &report).unwrap();
        write_intersection(&inter, "icmp", "tcp", &split).unwrap();
        assert_eq!(
            std::fs::read_to_string(&inter).unwrap(),
            "set,count\nonly_icmp,0\nonly_tcp,0\nboth,1\n"
        );

        let cdf = dir.path().join("cdf.csv");
        write_cdf(&cdf, &[(0.5, 0.25), (1.0, 1.0)]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&cdf).unwrap(),
            "x,y\n0.500000,0.250000\n1.000000,1.000000\n"
        );

        let mut agg = AsAggregate::default();
        agg.per_as.insert(
            64_500,
            AsStats {
                responsive: 19_037,
                flipped: 17_837,
            },
        );
        let as_path = dir.path().join("as.csv");
        write_as_table(&as_path, &agg).unwrap();
        assert_eq!(
            std::fs::read_to_string(&as_path).unwrap(),
            "asn,responsive,flipped,ratio\n64500,19037,17837,0.937\n"
        );
    }

    #[test]
    fn residential_share_ignores_uncategorized() {
        let report = detect_flips(vec![
            reply(prefix(0), 0, "AMS"),
            reply(prefix(0), 1, "TYO"),
            reply(prefix(1), 0, "AMS"),
            reply(prefix(1), 1, "TYO"),
            reply(prefix(2), 0, "AMS"),
            reply(prefix(2), 1, "TYO"),
        ])
        .unwrap();
        let mut categories = PrefixTable::new();
        categories.insert(prefix(0), Category::Residential);
        categories.insert(prefix(1), Category::Other);
        // prefix 2 stays uncategorized
        assert_eq!(residential_share(&report, &categories), 50.0);
    }
}
