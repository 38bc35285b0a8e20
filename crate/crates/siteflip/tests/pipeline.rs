//! Cross-module integration checks beyond the acceptance gate: layer and
//! longevity arithmetic at census scale, divergence localization at varying
//! balancer depths, hitlist loading at scale, and the installed binary's
//! stdout contracts.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::net::IpAddr;
use std::path::Path;
use std::process::Command;

use siteflip::analysis::{
    classify_consistency, classify_layers, detect_flips, longevity, multi_client_filter,
    ConsistencyClass, FlipReport,
};
use siteflip::hitlist::load_targets;
use siteflip::model::{Family, FlowTuple, Prefix, Protocol, SiteId, VariedField};
use siteflip::orchestrator::{MeasurementDef, Orchestrator, DEFAULT_RUN_INTERVAL_NS, MEASUREMENT_EPOCH_NS};
use siteflip::prober::{write_log, VirtualClock, Worker};
use siteflip::sim::{Perturbation, Sim, Topology};
use siteflip::traceroute::{find_divergence, TraceEngine, TracePath};

#[test]
fn layer_partition_holds_at_census_scale() {
    // the address-varied run flips [0, 57_697), the port-varied run flips
    // [0, 40_889) and [57_697, 64_948); ten prefixes per run respond only
    // there, so the shared universe stays [0, 200_000)
    let ip = common::range_report(1, Protocol::Icmp, &[(0, 200_010)], &[(0, 57_697)]);
    let port = common::range_report(
        2,
        Protocol::Udp,
        &[(0, 200_000), (200_010, 200_020)],
        &[(0, 40_889), (57_697, 64_948)],
    );
    let layers = classify_layers(&ip, &[&port]).unwrap();
    assert_eq!(layers.universe_count(), 200_000);
    let counts = layers.counts();
    assert_eq!(counts.both, 40_889);
    assert_eq!(counts.l3_only, 16_808);
    assert_eq!(counts.l4_only, 7_251);
    assert_eq!(counts.none, 135_052);
    // prefixes responsive in only one run sit outside the universe
    assert_eq!(layers.class_of(common::prefix24(200_005)), None);
    assert_eq!(layers.class_of(common::prefix24(200_015)), None);
}

#[test]
fn longevity_counts_persisting_flips_across_epochs() {
    let t0 = common::range_report(1, Protocol::Icmp, &[(0, 160_000)], &[(0, 153_734)]);
    let t1 = common::range_report(
        2,
        Protocol::Icmp,
        &[(0, 90_000), (200_000, 263_000)],
        &[(0, 89_447), (200_000, 262_198)],
    );
    let l = longevity(&t0, &t1);
    assert_eq!(l.flipped_t0, 153_734);
    assert_eq!(l.flipped_t1, 151_645);
    assert_eq!(l.persisting, 89_447);
    assert!((l.share_of_t0_pct() - 58.2).abs() <= 0.05, "{}", l.share_of_t0_pct());
}

#[test]
fn consistency_shares_scale_to_a_thousand_prefixes() {
    // 872 prefixes flip in all ten runs, 104 in five, 8 in two, 16 in one
    let mut counts = vec![10u32; 872];
    counts.extend(vec![5; 104]);
    counts.extend(vec![2; 8]);
    counts.extend(vec![1; 16]);
    let reports = common::planted_runs(&counts, 10);
    let refs: Vec<&FlipReport> = reports.iter().collect();
    let series = classify_consistency(&refs).unwrap();
    assert_eq!(series.total(), 1000);
    let by_class: Vec<u64> = series.counts().iter().map(|(_, n)| *n).collect();
    assert_eq!(by_class, [872, 104, 24]);
    let shares = series.shares();
    assert_eq!(shares[0].0, ConsistencyClass::Persistent);
    assert!((shares[0].1 - 87.2).abs() <= 0.05);
    assert!((shares[1].1 - 10.4).abs() <= 0.05);
    assert!((shares[2].1 - 2.4).abs() <= 0.05);
}

#[test]
fn anycast_census_exclusions_shrink_the_multi_client_set() {
    let report = common::range_report(1, Protocol::Icmp, &[(0, 21_000)], &[(0, 21_000)]);
    let exclusions: BTreeSet<Prefix> = (0..11_400).map(common::prefix24).collect();
    let remaining = multi_client_filter(&report, &exclusions);
    let expected: BTreeSet<Prefix> = (11_400..21_000).map(common::prefix24).collect();
    assert_eq!(remaining.len(), 9_600);
    assert_eq!(remaining, expected);
}

#[test]
fn divergence_sits_right_behind_the_balancer_at_any_depth() {
    for depth in 1..=6usize {
        let text = common::deep_balancer_scenario(depth);
        let topo = Topology::parse(&text, "deep").unwrap();
        let sim = Sim::new(topo, Perturbation::none());
        let mut eng = TraceEngine::new(
            sim.client_tap("c1").unwrap(),
            None,
            9,
            VirtualClock::new(MEASUREMENT_EPOCH_NS, 1000),
        );
        let traces: Vec<TracePath> = (1..=5u8)
            .map(|j| {
                let flow = FlowTuple {
                    src: common::v4(&format!("10.50.0.{j}")),
                    dst: common::v4("198.51.100.1"),
                    protocol: Protocol::Icmp,
                    src_port: 0,
                    dst_port: 0,
                };
                let est = eng.ping_estimate(flow).unwrap().unwrap();
                eng.trace(flow, est).unwrap()
            })
            .collect();
        let div = find_divergence(&traces).unwrap();
        assert_eq!(usize::from(div.ttl), depth + 1, "depth {depth}");
        let forks: BTreeSet<IpAddr> =
            [common::v4("10.200.0.1"), common::v4("10.200.1.1")].into_iter().collect();
        assert_eq!(div.hop_addrs, forks, "depth {depth}");
    }
}

#[test]
fn hitlist_loading_scales_and_accounts_for_every_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hitlist.txt");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&path).unwrap());
        writeln!(out, "# synthetic hitlist").unwrap();
        writeln!(out).unwrap();
        for i in 0..1_000_000u32 {
            writeln!(out, "{}", std::net::Ipv4Addr::from((i + 256) << 8 | 1)).unwrap();
        }
        // second address inside an already-claimed /24
        for i in 0..50_000u32 {
            writeln!(out, "{}", std::net::Ipv4Addr::from((i + 256) << 8 | 2)).unwrap();
        }
        for i in 0..40_000u32 {
            writeln!(out, "host-{i}.example.net").unwrap();
        }
        for i in 0..30_000u32 {
            writeln!(out, "2001:db8::{i:x}").unwrap();
        }
    }
    let (targets, stats) = load_targets(&path, Family::V4, 24).unwrap();
    assert_eq!(stats.lines, 1_120_000);
    assert_eq!(stats.malformed, 40_000);
    assert_eq!(stats.wrong_family, 30_000);
    assert_eq!(stats.duplicates, 50_000);
    assert_eq!(targets.len(), 1_000_000);
    let (first_prefix, first_addr) = targets.iter().next().unwrap();
    assert_eq!(*first_prefix, common::prefix24(0));
    assert_eq!(*first_addr, common::v4("0.1.0.1"));
}

#[test]
fn capture_at_non_sending_sites_keeps_the_flip_set_stable() {
    // replies route by their own flow, so which site transmitted cannot
    // change the flip verdict as long as every site still captures
    let flip_set_with = |senders: &[&str]| {
        let topo = Topology::load_file(common::fixture("scenario1.topo")).unwrap();
        let anycast = topo.anycast.unwrap();
        let senders: Vec<SiteId> = senders.iter().map(|s| common::site(s)).collect();
        let hosts: Vec<IpAddr> = topo.origin_hosts().into_iter().map(|(_, h)| h).collect();
        let (targets, _) = siteflip::hitlist::TargetSet::from_addrs(hosts, Family::V4, 24);
        let sim = Sim::new(topo, Perturbation::none());
        let mut orch = Orchestrator::new();
        for s in &sim.topo().sites {
            let sending = senders.contains(&s.id);
            orch.attach(Worker::new(s.id.clone(), sim.site_tap(&s.id).unwrap()), sending)
                .unwrap();
        }
        let def = MeasurementDef::new(Protocol::Icmp, VariedField::SrcAddr, anycast, senders);
        let outcomes = orch
            .run_repeated(&def, &targets, 1, DEFAULT_RUN_INTERVAL_NS, |_| {})
            .unwrap();
        detect_flips(outcomes.into_iter().next().unwrap().records).unwrap().flipped_set()
    };
    let both = flip_set_with(&["AMS", "TYO"]);
    let single = flip_set_with(&["AMS"]);
    assert!(!both.is_empty());
    assert_eq!(both, single);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_siteflip"))
}

fn stdout_of(output: &std::process::Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

#[test]
fn installed_binary_reports_measurements_on_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = common::fixture("scenario1.topo");
    let out = bin()
        .args(["measure", "--sim", scenario.to_str().unwrap(), "--seed", "7"])
        .args(["--out", dir.path().join("runs").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(
        stdout_of(&out).contains("targets=1 responsive=1 flipped=1 flipped_pct=100.0"),
        "stdout: {}",
        stdout_of(&out)
    );

    // a single sender sees the same verdict
    let out = bin()
        .args(["measure", "--sim", scenario.to_str().unwrap(), "--seed", "7"])
        .args(["--senders", "AMS"])
        .args(["--out", dir.path().join("runs2").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout_of(&out).contains("flipped=1"));

    // usage errors: an unknown sender and an illegal field for the protocol
    let out = bin()
        .args(["measure", "--sim", scenario.to_str().unwrap(), "--senders", "LAX"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin()
        .args(["measure", "--sim", scenario.to_str().unwrap()])
        .args(["--proto", "icmp", "--vary", "src-port"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn installed_binary_prints_the_latency_spread_line() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.csv");
    write_log(&log, &common::latency_records()).unwrap();
    let reports = dir.path().join("reports");
    let out = bin()
        .args(["analyze", "--out", reports.to_str().unwrap()])
        .args(["latency", log.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(
        stdout_of(&out).contains("mean_min=88.3 mean_max=103.2 rtt_diff=29.8"),
        "stdout: {}",
        stdout_of(&out)
    );
    assert!(reports.join("latency.csv").is_file());
    assert!(reports.join("latency_rtt_diff_cdf.csv").is_file());
}

#[test]
fn installed_binary_intersects_two_runs() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first.csv");
    let second = dir.path().join("second.csv");
    let records = |run, resp: &[(u32, u32)], flip: &[(u32, u32)]| {
        common::range_records(run, Protocol::Icmp, resp, flip).collect::<Vec<_>>()
    };
    // restricted to the shared responsive window [0, 80): 20 flip only in
    // the first run, 20 only in the second, 10 in both
    write_log(&first, &records(1, &[(0, 100)], &[(0, 30)])).unwrap();
    write_log(&second, &records(2, &[(0, 80)], &[(20, 50)])).unwrap();
    let out = bin()
        .args(["analyze", "--out", dir.path().join("reports").to_str().unwrap()])
        .args(["intersect", first.to_str().unwrap(), second.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(
        stdout_of(&out).contains("only_first=20 only_second=20 both=10"),
        "stdout: {}",
        stdout_of(&out)
    );
}

#[test]
fn installed_binary_traces_and_survives_silent_targets() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = common::fixture("scenario1.topo");
    // anycast target from the client behind the balancer: paths fork
    let out = bin()
        .args(["trace", "--sim", scenario.to_str().unwrap(), "--target", "198.51.100.1"])
        .args(["--out", dir.path().join("t1").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(stdout_of(&out).contains("divergence ttl=2"), "stdout: {}", stdout_of(&out));

    // a target nothing routes to: every row times out, exit stays clean
    let out = bin()
        .args(["trace", "--sim", scenario.to_str().unwrap(), "--target", "203.0.113.9"])
        .args(["--out", dir.path().join("t2").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(stdout_of(&out).contains("no divergence"), "stdout: {}", stdout_of(&out));

    // no target is a usage error from the installed binary too
    let out = bin()
        .args(["trace", "--sim", scenario.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

fn write_lb_location_inputs(dir: &Path) -> (String, String) {
    let map = dir.join("as.map");
    std::fs::write(&map, "10.100.0.0/16,64601,client-as\n10.200.0.0/15,64500,anycast-sites\n")
        .unwrap();
    (map.to_str().unwrap().to_string(), "64601".to_string())
}

#[test]
fn installed_binary_locates_the_balancer_when_given_a_map() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = common::fixture("scenario1.topo");
    let (map, client_as) = write_lb_location_inputs(dir.path());
    let out = bin()
        .args(["trace", "--sim", scenario.to_str().unwrap(), "--target", "198.51.100.1"])
        .args(["--as-map", &map, "--client-as", &client_as])
        .args(["--out", dir.path().join("t").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let text = stdout_of(&out);
    // the fork happens at the two site nodes, which the map places in the
    // anycast operator's AS, an on-path owner distinct from the client's
    assert!(text.contains("lb class=on_path_as direction=forward"), "stdout: {text}");
}
