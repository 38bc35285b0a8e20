//! Measurement framework for load-balancer-induced anycast site flipping.
//!
//! An anycast deployment announces one prefix from many sites. A client's
//! probe replies normally all land at one site, but flow-based load balancers
//! on the reverse path hash packet headers onto equal-cost routes, so replies
//! whose headers differ can terminate at different sites. This crate measures
//! that effect end to end:
//!
//! * craft probes whose headers vary in controlled fields (`wire`),
//! * send them at a bounded, ethical rate and capture replies at every site
//!   (`prober`, coordinated by `orchestrator`),
//! * decide per target prefix whether replies span several sites and
//!   aggregate the result by AS, by run consistency and by latency impact
//!   (`analysis`),
//! * localize the responsible load balancer with flow-stable traceroutes
//!   (`traceroute`),
//! * and verify the whole pipeline against a deterministic ECMP network
//!   simulator with an exhaustive flip oracle (`sim`).
//!
//! The `siteflip` binary exposes the pipeline as `measure`, `trace` and
//! `analyze` subcommands; see `cli`.

pub mod analysis;
pub mod cli;
pub mod hitlist;
pub mod model;
pub mod orchestrator;
pub mod prober;
pub mod sim;
pub mod traceroute;
pub mod wire;

pub(crate) fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => String::new(),
    }
}
