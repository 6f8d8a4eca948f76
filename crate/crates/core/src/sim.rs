//! Discrete-event simulator for the two-switch scenario.
//!
//! ```text
//!   C1 \            / C3
//!       S1 ------ S2
//!   C2 /  \      /  \ C4
//!          CTRL
//! ```
//!
//! Every directional link is a FIFO with a byte-limited drop-tail queue, a
//! serialization delay of `8 L / bandwidth` and a fixed propagation delay.
//! Ties in event time are broken by insertion order, so a run is a pure
//! function of the scenario.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::fs;
use std::io;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{load_bundle, make_handcrafted_bundle, validate_bundle, BundleError, ModelBundle};
use crate::controller::{Controller, ControllerConfig};
use crate::flow::Action;
use crate::packet::{canonical_flow_key, FlowKey, PacketRecord, TcpFlags, PROTO_UDP};
use crate::pcap::{read_trace_all, PcapError};
use crate::switch::{precompute_thresholds, Disposition, SwitchState};
use crate::wire::{self, FrameDecoder, Message};

pub const DEFAULT_BANDWIDTH_BPS: f64 = 1_500_000.0;
pub const DEFAULT_PROPAGATION_DELAY: f64 = 0.010;
pub const DEFAULT_QUEUE_CAPACITY: usize = 32_768;
/// Ethernet + IPv4 + TCP framing around a southbound message.
pub const CONTROL_OVERHEAD: usize = 54;
pub const HOSTS: [&str; 4] = ["C1", "C2", "C3", "C4"];

pub fn host_ip(host: usize) -> Ipv4Addr {
    Ipv4Addr::new(10, 0, 0, host as u8 + 1)
}

fn host_index(name: &str) -> Option<usize> {
    HOSTS.iter().position(|h| h.eq_ignore_ascii_case(name))
}

fn host_of_ip(ip: Ipv4Addr) -> Option<usize> {
    (0..HOSTS.len()).find(|&h| host_ip(h) == ip)
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error("invalid bundle: {0}")]
    BundleInvalid(#[from] BundleError),
    #[error("trace: {0}")]
    Trace(#[from] PcapError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, SimError> {
    Err(SimError::ScenarioInvalid(msg.into()))
}

// ---- scenario ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkParams {
    pub bandwidth_bps: f64,
    pub propagation_delay: f64,
    pub queue_capacity: usize,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams {
            bandwidth_bps: DEFAULT_BANDWIDTH_BPS,
            propagation_delay: DEFAULT_PROPAGATION_DELAY,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
        }
    }
}

impl LinkParams {
    pub fn tx_time(&self, bytes: usize) -> f64 {
        8.0 * bytes as f64 / self.bandwidth_bps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficClass {
    Benign,
    Attack,
}

fn default_ack_delay() -> f64 {
    0.035
}
fn default_jitter() -> f64 {
    0.1
}
fn default_udp_fraction() -> f64 {
    0.5
}

/// A traffic source. Times are absolute scenario seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    /// One bulk TCP-like upload with open-loop reverse ACKs.
    Benign {
        from: String,
        to: String,
        start: f64,
        stop: Option<f64>,
        rate_bps: f64,
        #[serde(default = "default_jitter")]
        jitter: f64,
        #[serde(default = "default_ack_delay")]
        ack_delay: f64,
        #[serde(default)]
        src_port: Option<u16>,
        #[serde(default)]
        dst_port: Option<u16>,
    },
    /// SYN-only packets, Poisson arrivals, source port cycling.
    SynFlood {
        from: String,
        to: String,
        start: f64,
        stop: Option<f64>,
        rate_pps: f64,
        source_count: u16,
        #[serde(default)]
        base_port: Option<u16>,
    },
    /// Staggered short-lived UDP and SYN bursts.
    MixedFlood {
        from: String,
        to: String,
        start: f64,
        stop: Option<f64>,
        flows: u32,
        #[serde(default = "default_udp_fraction")]
        udp_fraction: f64,
        flow_pps: f64,
        flow_duration: f64,
        udp_payload: u16,
        #[serde(default = "default_jitter")]
        jitter: f64,
    },
    /// Attack packets re-timed from a capture.
    PcapReplay {
        from: String,
        to: String,
        start: f64,
        path: PathBuf,
    },
}

impl SourceSpec {
    pub fn class(&self) -> TrafficClass {
        match self {
            SourceSpec::Benign { .. } => TrafficClass::Benign,
            _ => TrafficClass::Attack,
        }
    }

    fn endpoints(&self) -> (&str, &str) {
        match self {
            SourceSpec::Benign { from, to, .. }
            | SourceSpec::SynFlood { from, to, .. }
            | SourceSpec::MixedFlood { from, to, .. }
            | SourceSpec::PcapReplay { from, to, .. } => (from, to),
        }
    }

    fn start(&self) -> f64 {
        match self {
            SourceSpec::Benign { start, .. }
            | SourceSpec::SynFlood { start, .. }
            | SourceSpec::MixedFlood { start, .. }
            | SourceSpec::PcapReplay { start, .. } => *start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "Scenario::default_duration")]
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "Scenario::default_mitigation")]
    pub mitigation: bool,
    /// `"handcrafted"` or a bundle path (relative to the scenario file).
    #[serde(default = "Scenario::default_bundle")]
    pub bundle: String,
    /// Overrides the bundle thresholds on both planes (tau_attack = tau).
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub reverify_period_packets: Option<u32>,
    #[serde(default)]
    pub link: LinkParams,
    #[serde(default, rename = "source")]
    pub sources: Vec<SourceSpec>,
    /// Keep per-transmission link logs (for invariant checks).
    #[serde(default)]
    pub record_link_log: bool,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

pub const DEFAULT_SCENARIO: &str = include_str!("../../../scenarios/default.toml");

impl Scenario {
    fn default_duration() -> f64 {
        30.0
    }
    fn default_mitigation() -> bool {
        true
    }
    fn default_bundle() -> String {
        "handcrafted".to_string()
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: Scenario = toml::from_str(text).map_err(|e| SimError::ScenarioInvalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let mut s = Scenario::from_toml(&fs::read_to_string(path)?)?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        Ok(s)
    }

    /// The built-in reproduction scenario.
    pub fn default_scenario() -> Self {
        Scenario::from_toml(DEFAULT_SCENARIO).expect("built-in scenario parses")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return invalid(format!("duration {} must be finite and >= 0", self.duration));
        }
        let l = &self.link;
        if !(l.bandwidth_bps > 0.0 && l.bandwidth_bps.is_finite()) {
            return invalid("link bandwidth must be > 0");
        }
        if !(l.propagation_delay >= 0.0 && l.propagation_delay.is_finite()) {
            return invalid("link propagation delay must be >= 0");
        }
        if let Some(t) = self.tau {
            if !(0.5..1.0).contains(&t) {
                return invalid(format!("tau {t} outside [0.5, 1)"));
            }
        }
        let mut last_start = f64::NEG_INFINITY;
        for (i, s) in self.sources.iter().enumerate() {
            let (from, to) = s.endpoints();
            let (Some(f), Some(t)) = (host_index(from), host_index(to)) else {
                return invalid(format!("source {i}: unknown host {from} or {to}"));
            };
            if f == t {
                return invalid(format!("source {i}: from and to are the same host"));
            }
            if !(s.start() >= 0.0 && s.start().is_finite()) {
                return invalid(format!("source {i}: start must be >= 0"));
            }
            if s.start() < last_start {
                return invalid(format!("source {i}: sources must be sorted by start time"));
            }
            last_start = s.start();
            let ok = match s {
                SourceSpec::Benign { rate_bps, jitter, .. } => *rate_bps > 0.0 && (0.0..1.0).contains(jitter),
                SourceSpec::SynFlood {
                    rate_pps, source_count, ..
                } => *rate_pps > 0.0 && *source_count > 0,
                SourceSpec::MixedFlood {
                    flows,
                    udp_fraction,
                    flow_pps,
                    flow_duration,
                    jitter,
                    ..
                } => {
                    *flows > 0
                        && (0.0..=1.0).contains(udp_fraction)
                        && *flow_pps > 0.0
                        && *flow_duration > 0.0
                        && (0.0..1.0).contains(jitter)
                }
                SourceSpec::PcapReplay { .. } => true,
            };
            if !ok {
                return invalid(format!("source {i}: rate, count or jitter out of range"));
            }
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn load_model(&self) -> Result<ModelBundle, SimError> {
        if self.bundle == "handcrafted" {
            Ok(make_handcrafted_bundle())
        } else {
            Ok(load_bundle(self.resolve(Path::new(&self.bundle)))?)
        }
    }
}

// ---- generators ----

fn stop_or(stop: Option<f64>, duration: f64) -> f64 {
    stop.unwrap_or(duration).min(duration)
}

/// SYN-only flood: 54-byte frames, exponential gaps with mean `1/rate`,
/// source port cycling over `source_count` values.
#[allow(clippy::too_many_arguments)]
pub fn generate_syn_flood(
    src: Ipv4Addr,
    dst: Ipv4Addr,
    start: f64,
    stop: f64,
    rate: f64,
    source_count: u16,
    base_port: u16,
    seed: u64,
) -> Vec<PacketRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(rate).expect("rate > 0");
    let mut out = Vec::new();
    let mut t = start + exp.sample(&mut rng);
    let mut i: u32 = 0;
    while t < stop {
        let port = base_port.wrapping_add((i % source_count as u32) as u16);
        out.push(PacketRecord::tcp(t, (src, port), (dst, 80), 0, TcpFlags::SYN, 1024));
        i += 1;
        t += exp.sample(&mut rng);
    }
    out
}

/// One bulk upload: a SYN, then 1460-byte data packets paced at `rate_bps`
/// (frame bits) with uniform jitter, plus one reverse ACK per two data
/// packets `ack_delay` later. Output sorted by time.
#[allow(clippy::too_many_arguments)]
pub fn generate_benign(
    src: (Ipv4Addr, u16),
    dst: (Ipv4Addr, u16),
    start: f64,
    stop: f64,
    rate_bps: f64,
    jitter: f64,
    ack_delay: f64,
    seed: u64,
) -> Vec<PacketRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = PacketRecord::tcp(0.0, src, dst, 1460, TcpFlags::ACK.with_psh(), 64240);
    let gap = 8.0 * data.frame_len() as f64 / rate_bps;
    let mut out = Vec::new();
    if start >= stop {
        return out;
    }
    out.push(PacketRecord::tcp(start, src, dst, 0, TcpFlags::SYN, 64240));
    let mut t = start + gap;
    let mut n = 0u64;
    while t < stop {
        out.push(PacketRecord { timestamp: t, ..data });
        n += 1;
        if n.is_multiple_of(2) && t + ack_delay < stop {
            out.push(PacketRecord::tcp(t + ack_delay, dst, src, 0, TcpFlags::ACK, 64240));
        }
        let j = if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
        t += gap * (1.0 + j);
    }
    out.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    out
}

/// Staggered short bursts: `flows` flows, each `flow_duration` long at
/// `flow_pps`, a `udp_fraction` share of them UDP and the rest SYN-only.
#[allow(clippy::too_many_arguments)]
pub fn generate_mixed_flood(
    src: Ipv4Addr,
    dst: Ipv4Addr,
    start: f64,
    stop: f64,
    flows: u32,
    udp_fraction: f64,
    flow_pps: f64,
    flow_duration: f64,
    udp_payload: u16,
    jitter: f64,
    seed: u64,
) -> Vec<PacketRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = (stop - start - flow_duration).max(0.0);
    let udp_flows = (flows as f64 * udp_fraction).round() as u32;
    let mut out = Vec::new();
    for i in 0..flows {
        let f0 = start + span * i as f64 / flows.max(1) as f64;
        let f1 = (f0 + flow_duration).min(stop);
        // interleave the two kinds along the timeline
        let udp = (i as u64 * udp_flows as u64) / flows as u64 != ((i as u64 + 1) * udp_flows as u64) / flows as u64;
        let port = 20_000 + i as u16;
        let gap = 1.0 / flow_pps;
        let mut t = f0 + rng.random_range(0.0..gap);
        while t < f1 {
            out.push(if udp {
                PacketRecord::udp(t, (src, port), (dst, 53), udp_payload)
            } else {
                PacketRecord::tcp(t, (src, port), (dst, 80), 0, TcpFlags::SYN, 1024)
            });
            let j = if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
            t += gap * (1.0 + j);
        }
    }
    out.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    out
}

/// Re-times a capture to start at `time_offset` and rewrites it onto the
/// `src` -> `dst` host pair. Each original flow gets its own source port;
/// responder packets travel `dst` -> `src`.
pub fn replay_attack_trace(
    path: impl AsRef<Path>,
    time_offset: f64,
    src: Ipv4Addr,
    dst: Ipv4Addr,
) -> Result<Vec<PacketRecord>, PcapError> {
    let recs = read_trace_all(path)?;
    let Some(t0) = recs.first().map(|r| r.timestamp) else {
        return Ok(Vec::new());
    };
    let mut flows: HashMap<FlowKey, ((Ipv4Addr, u16), u16)> = HashMap::new();
    let mut out = Vec::with_capacity(recs.len());
    for r in recs {
        let key = canonical_flow_key(&r);
        let next = flows.len() as u16;
        let (initiator, port) = *flows.entry(key).or_insert((r.src_endpoint(), 1024u16.wrapping_add(next)));
        let forward = r.src_endpoint() == initiator;
        let service = if forward { r.dst_port } else { r.src_port };
        let mut n = r;
        n.timestamp = (r.timestamp - t0).max(0.0) + time_offset;
        if forward {
            (n.src_ip, n.src_port, n.dst_ip, n.dst_port) = (src, port, dst, service);
        } else {
            (n.src_ip, n.src_port, n.dst_ip, n.dst_port) = (dst, service, src, port);
        }
        out.push(n);
    }
    Ok(out)
}

fn expand_source(scn: &Scenario, idx: usize, s: &SourceSpec) -> Result<Vec<PacketRecord>, SimError> {
    let (from, to) = s.endpoints();
    let src = host_ip(host_index(from).expect("validated"));
    let dst = host_ip(host_index(to).expect("validated"));
    let seed = scn.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(idx as u64 + 1));
    let d = scn.duration;
    Ok(match s {
        SourceSpec::Benign {
            start,
            stop,
            rate_bps,
            jitter,
            ack_delay,
            src_port,
            dst_port,
            ..
        } => generate_benign(
            (src, src_port.unwrap_or(40_000)),
            (dst, dst_port.unwrap_or(5001)),
            *start,
            stop_or(*stop, d),
            *rate_bps,
            *jitter,
            *ack_delay,
            seed,
        ),
        SourceSpec::SynFlood {
            start,
            stop,
            rate_pps,
            source_count,
            base_port,
            ..
        } => generate_syn_flood(
            src,
            dst,
            *start,
            stop_or(*stop, d),
            *rate_pps,
            *source_count,
            base_port.unwrap_or(30_000),
            seed,
        ),
        SourceSpec::MixedFlood {
            start,
            stop,
            flows,
            udp_fraction,
            flow_pps,
            flow_duration,
            udp_payload,
            jitter,
            ..
        } => generate_mixed_flood(
            src,
            dst,
            *start,
            stop_or(*stop, d),
            *flows,
            *udp_fraction,
            *flow_pps,
            *flow_duration,
            *udp_payload,
            *jitter,
            seed,
        ),
        SourceSpec::PcapReplay { start, path, .. } => {
            let mut v = replay_attack_trace(scn.resolve(path), *start, src, dst)?;
            v.retain(|r| r.timestamp < d);
            v
        }
    })
}

/// Every source of `scn` expanded and merged into one time-ordered stream,
/// as a single switch would see it with no queueing.
pub fn scenario_packets(scn: &Scenario) -> Result<Vec<PacketRecord>, SimError> {
    scn.validate()?;
    let mut all = Vec::new();
    for (i, s) in scn.sources.iter().enumerate() {
        let mut recs = expand_source(scn, i, s)?;
        recs.retain(|r| r.timestamp < scn.duration);
        all.extend(recs);
    }
    all.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(all)
}

// ---- topology and event loop ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Node {
    Host(usize),
    Switch(usize),
    Controller,
}

fn switch_of_host(h: usize) -> usize {
    h / 2
}

#[derive(Debug, Clone)]
enum Payload {
    Data {
        rec: PacketRecord,
        class: TrafficClass,
        flow: usize,
    },
    Control(Vec<u8>),
}

#[derive(Debug, Clone)]
struct SimPacket {
    payload: Payload,
    size: usize,
    sent_at: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkStats {
    pub tx_packets: u64,
    pub tx_bytes: u64,
    pub queue_drops: u64,
}

/// One serialization interval on a link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transmission {
    pub start: f64,
    pub end: f64,
    pub bytes: usize,
}

struct LinkState {
    name: String,
    params: LinkParams,
    to: Node,
    queue: VecDeque<SimPacket>,
    queued_bytes: usize,
    in_flight: Option<SimPacket>,
    stats: LinkStats,
    log: Option<Vec<Transmission>>,
}

#[derive(Debug)]
enum EventKind {
    Emit { source: usize },
    TxDone { link: usize },
    Arrive { node: Node, pkt: SimPacket },
}

struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Event {
    // BinaryHeap is a max-heap: earliest (time, seq) must compare greatest
    fn cmp(&self, o: &Self) -> Ordering {
        o.time.total_cmp(&self.time).then_with(|| o.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondMetrics {
    pub second: u32,
    pub benign_goodput_bps: f64,
    pub benign_loss_pct: f64,
    pub attack_delivered_pkts: u64,
    pub switch_to_controller_msgs: u64,
    pub controller_to_switch_msgs: u64,
}

pub const METRICS_HEADER: [&str; 6] = [
    "second",
    "benign_goodput_bps",
    "benign_loss_pct",
    "attack_delivered_pkts",
    "switch_to_controller_msgs",
    "controller_to_switch_msgs",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEvent {
    pub time: f64,
    pub switch: String,
    pub flow: String,
    pub action: String,
    pub ttl_packets: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowTotals {
    pub flow: String,
    pub class: Option<TrafficClass>,
    pub sent: u64,
    pub delivered: u64,
    pub queue_dropped: u64,
    pub mitigation_dropped: u64,
}

impl FlowTotals {
    pub fn conserved(&self) -> bool {
        self.sent == self.delivered + self.queue_dropped + self.mitigation_dropped
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub name: String,
    pub bandwidth_bps: f64,
    pub stats: LinkStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<Vec<Transmission>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTimeline {
    pub rows: Vec<SecondMetrics>,
    pub actions: Vec<ActionEvent>,
    /// Last action installed per (switch, flow).
    pub final_actions: BTreeMap<String, BTreeMap<String, String>>,
    pub flows: Vec<FlowTotals>,
    pub links: Vec<LinkReport>,
    pub controller_messages: u64,
}

impl MetricsTimeline {
    /// Mean benign goodput over rows whose second lies in `[from, to)`.
    pub fn mean_goodput(&self, from: u32, to: u32) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.second >= from && r.second < to)
            .map(|r| r.benign_goodput_bps)
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

struct Sim<'a> {
    now: f64,
    seq: u64,
    heap: BinaryHeap<Event>,
    links: Vec<LinkState>,
    link_of: HashMap<(Node, Node), usize>,
    sources: Vec<(Vec<PacketRecord>, TrafficClass, usize)>,
    flow_ids: HashMap<(FlowKey, TrafficClass), usize>,
    flows: Vec<FlowTotals>,
    switches: Vec<SwitchState>,
    controller: Option<Controller>,
    ctrl_rx: Vec<FrameDecoder>,
    switch_rx: Vec<FrameDecoder>,
    mitigation: bool,
    rows: Vec<SecondMetrics>,
    sent_by_second: Vec<u64>,
    lost_by_second: Vec<u64>,
    actions: Vec<ActionEvent>,
    final_actions: BTreeMap<String, BTreeMap<String, String>>,
    controller_messages: u64,
    _scn: &'a Scenario,
}

fn switch_name(i: usize) -> String {
    format!("S{}", i + 1)
}

impl<'a> Sim<'a> {
    fn schedule(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn second(&self, t: f64) -> Option<usize> {
        let s = t.floor();
        (s >= 0.0 && (s as usize) < self.rows.len()).then_some(s as usize)
    }

    fn next_hop(&self, at: Node, dst: Ipv4Addr) -> Option<Node> {
        let h = host_of_ip(dst)?;
        Some(match at {
            Node::Host(me) => Node::Switch(switch_of_host(me)),
            Node::Switch(s) if switch_of_host(h) == s => Node::Host(h),
            Node::Switch(s) => Node::Switch(1 - s),
            Node::Controller => return None,
        })
    }

    fn send(&mut self, from: Node, to: Node, pkt: SimPacket) {
        let id = self.link_of[&(from, to)];
        let l = &mut self.links[id];
        if l.in_flight.is_none() {
            let done = self.now + l.params.tx_time(pkt.size);
            if let Some(log) = l.log.as_mut() {
                log.push(Transmission {
                    start: self.now,
                    end: done,
                    bytes: pkt.size,
                });
            }
            l.in_flight = Some(pkt);
            self.schedule(done, EventKind::TxDone { link: id });
        } else if l.queued_bytes + pkt.size > l.params.queue_capacity {
            l.stats.queue_drops += 1;
            self.drop_packet(&pkt, false);
        } else {
            l.queued_bytes += pkt.size;
            l.queue.push_back(pkt);
        }
    }

    fn tx_done(&mut self, id: usize) {
        let now = self.now;
        let l = &mut self.links[id];
        let pkt = l.in_flight.take().expect("a transmission was in progress");
        l.stats.tx_packets += 1;
        l.stats.tx_bytes += pkt.size as u64;
        let arrive = now + l.params.propagation_delay;
        let to = l.to;
        let next = l.queue.pop_front();
        if let Some(n) = next {
            l.queued_bytes -= n.size;
            let done = now + l.params.tx_time(n.size);
            if let Some(log) = l.log.as_mut() {
                log.push(Transmission {
                    start: now,
                    end: done,
                    bytes: n.size,
                });
            }
            l.in_flight = Some(n);
            self.schedule(done, EventKind::TxDone { link: id });
        }
        self.schedule(arrive, EventKind::Arrive { node: to, pkt });
    }

    fn drop_packet(&mut self, pkt: &SimPacket, mitigation: bool) {
        if let Payload::Data { class, flow, rec } = &pkt.payload {
            let f = &mut self.flows[*flow];
            if mitigation {
                f.mitigation_dropped += 1;
            } else {
                f.queue_dropped += 1;
            }
            if *class == TrafficClass::Benign && rec.payload_len > 0 {
                if let Some(s) = self.second(pkt.sent_at) {
                    self.lost_by_second[s] += 1;
                }
            }
        }
    }

    fn emit(&mut self, source: usize) {
        let (recs, class, cursor) = &mut self.sources[source];
        let class = *class;
        let rec = recs[*cursor];
        *cursor += 1;
        if let Some(next) = recs.get(*cursor) {
            let t = next.timestamp;
            self.schedule(t, EventKind::Emit { source });
        }
        let key = canonical_flow_key(&rec);
        let n = self.flows.len();
        let flow = *self.flow_ids.entry((key, class)).or_insert(n);
        if flow == n {
            self.flows.push(FlowTotals {
                flow: key.to_string(),
                class: Some(class),
                ..Default::default()
            });
        }
        self.flows[flow].sent += 1;
        if class == TrafficClass::Benign && rec.payload_len > 0 {
            if let Some(s) = self.second(self.now) {
                self.sent_by_second[s] += 1;
            }
        }
        let Some(h) = host_of_ip(rec.src_ip) else { return };
        let pkt = SimPacket {
            size: rec.frame_len(),
            sent_at: self.now,
            payload: Payload::Data { rec, class, flow },
        };
        let to = self.next_hop(Node::Host(h), rec.dst_ip).expect("known host");
        self.send(Node::Host(h), to, pkt);
    }

    fn arrive(&mut self, node: Node, pkt: SimPacket) {
        match node {
            Node::Host(h) => {
                if let Payload::Data { rec, class, flow } = &pkt.payload {
                    self.flows[*flow].delivered += 1;
                    if host_of_ip(rec.dst_ip) != Some(h) {
                        return;
                    }
                    if let Some(s) = self.second(self.now) {
                        match class {
                            TrafficClass::Benign if rec.payload_len > 0 => {
                                self.rows[s].benign_goodput_bps += 8.0 * rec.payload_len as f64;
                            }
                            TrafficClass::Attack => self.rows[s].attack_delivered_pkts += 1,
                            _ => {}
                        }
                    }
                }
            }
            Node::Switch(s) => match pkt.payload {
                Payload::Data { mut rec, class, flow } => {
                    if self.mitigation {
                        rec.timestamp = self.now;
                        let v = self.switches[s].process_packet(&rec, self.now);
                        if let Some(report) = v.report {
                            let bytes = wire::encode(&Message::FeatureReport(report), self.switches[s].id);
                            self.control_send(Node::Switch(s), Node::Controller, bytes);
                        }
                        if v.disposition == Disposition::Dropped {
                            let p = SimPacket {
                                payload: Payload::Data { rec, class, flow },
                                ..pkt
                            };
                            self.drop_packet(&p, true);
                            return;
                        }
                    }
                    let to = self.next_hop(node, rec.dst_ip).expect("known host");
                    self.send(
                        node,
                        to,
                        SimPacket {
                            payload: Payload::Data { rec, class, flow },
                            ..pkt
                        },
                    );
                }
                Payload::Control(bytes) => {
                    let (msgs, err) = self.switch_rx[s].feed(&bytes);
                    if let Some(e) = err {
                        log::warn!("{}: control channel poisoned: {e}", switch_name(s));
                    }
                    for (m, _) in msgs {
                        if let Message::ActionInstall(a) = m {
                            self.switches[s].install_action(a.flow_key, a.action, self.now);
                            self.actions.push(ActionEvent {
                                time: self.now,
                                switch: switch_name(s),
                                flow: a.flow_key.to_string(),
                                action: a.action.action.as_str().to_string(),
                                ttl_packets: a.action.ttl_packets,
                            });
                            self.final_actions
                                .entry(switch_name(s))
                                .or_default()
                                .insert(a.flow_key.to_string(), a.action.action.as_str().to_string());
                        }
                    }
                }
            },
            Node::Controller => {
                let Payload::Control(bytes) = pkt.payload else { return };
                let Some(sw) = self.ctrl_sender(&bytes) else { return };
                let (msgs, err) = self.ctrl_rx[sw].feed(&bytes);
                if let Some(e) = err {
                    log::warn!("controller: channel from {} poisoned: {e}", switch_name(sw));
                }
                for (m, id) in msgs {
                    let Message::FeatureReport(r) = m else { continue };
                    let ctl = self.controller.as_ref().expect("mitigation implies a controller");
                    match ctl.handle_report(&r) {
                        Ok(reply) => {
                            let bytes = wire::encode(&Message::ActionInstall(reply), id);
                            self.control_send(Node::Controller, Node::Switch(sw), bytes);
                        }
                        Err(e) => log::warn!("controller: {e}"),
                    }
                }
            }
        }
    }

    fn ctrl_sender(&self, bytes: &[u8]) -> Option<usize> {
        let h = wire::decode_header(bytes).ok()?;
        self.switches.iter().position(|s| s.id == h.switch_id)
    }

    fn control_send(&mut self, from: Node, to: Node, bytes: Vec<u8>) {
        self.controller_messages += 1;
        if let Some(s) = self.second(self.now) {
            if to == Node::Controller {
                self.rows[s].switch_to_controller_msgs += 1;
            } else {
                self.rows[s].controller_to_switch_msgs += 1;
            }
        }
        let pkt = SimPacket {
            size: bytes.len() + CONTROL_OVERHEAD,
            sent_at: self.now,
            payload: Payload::Control(bytes),
        };
        self.send(from, to, pkt);
    }
}

/// Runs the scenario to completion (sources stop at `duration`, in-flight
/// packets drain) and returns per-second metrics.
pub fn run_scenario(scn: &Scenario) -> Result<MetricsTimeline, SimError> {
    scn.validate()?;
    let (switches, controller) = if scn.mitigation {
        let mut bundle = scn.load_model()?;
        validate_bundle(&bundle)?;
        let mut cfg = ControllerConfig {
            tau_benign: bundle.thresholds.tau_benign,
            tau_attack: bundle.thresholds.tau_attack,
            ..Default::default()
        };
        if let Some(tau) = scn.tau {
            bundle.thresholds = precompute_thresholds(1.0 - tau, tau, &bundle.linear_exit.logit_q)
                .map_err(|e| SimError::ScenarioInvalid(e.to_string()))?;
            cfg = ControllerConfig {
                reverify_period_packets: cfg.reverify_period_packets,
                ..ControllerConfig::with_tau(tau)
            };
        }
        if let Some(p) = scn.reverify_period_packets {
            cfg.reverify_period_packets = p;
        }
        let bundle = Arc::new(bundle);
        let ctl = Controller::new(Arc::clone(&bundle), cfg)
            .map_err(|e| SimError::BundleInvalid(BundleError::ValidationFailed(e.to_string())))?;
        let sw = (0..2).map(|i| SwitchState::new(i as u16 + 1, Arc::clone(&bundle))).collect();
        (sw, Some(ctl))
    } else {
        (Vec::new(), None)
    };

    let mut links = Vec::new();
    let mut link_of = HashMap::new();
    let name = |n: Node| match n {
        Node::Host(h) => HOSTS[h].to_string(),
        Node::Switch(s) => switch_name(s),
        Node::Controller => "CTRL".to_string(),
    };
    let mut pairs = vec![];
    for h in 0..HOSTS.len() {
        pairs.push((Node::Host(h), Node::Switch(switch_of_host(h))));
    }
    pairs.push((Node::Switch(0), Node::Switch(1)));
    pairs.push((Node::Switch(0), Node::Controller));
    pairs.push((Node::Switch(1), Node::Controller));
    for (a, b) in pairs {
        for (from, to) in [(a, b), (b, a)] {
            link_of.insert((from, to), links.len());
            links.push(LinkState {
                name: format!("{}->{}", name(from), name(to)),
                params: scn.link,
                to,
                queue: VecDeque::new(),
                queued_bytes: 0,
                in_flight: None,
                stats: LinkStats::default(),
                log: scn.record_link_log.then(Vec::new),
            });
        }
    }

    let seconds = scn.duration.ceil() as usize;
    let mut sources = Vec::new();
    for (i, s) in scn.sources.iter().enumerate() {
        let mut recs = expand_source(scn, i, s)?;
        recs.retain(|r| r.timestamp < scn.duration && host_of_ip(r.src_ip).is_some());
        if !recs.is_empty() {
            sources.push((recs, s.class(), 0usize));
        }
    }
    let n_switches = switches.len();
    let mut sim = Sim {
        now: 0.0,
        seq: 0,
        heap: BinaryHeap::new(),
        links,
        link_of,
        sources,
        flow_ids: HashMap::new(),
        flows: Vec::new(),
        switches,
        controller,
        ctrl_rx: (0..n_switches).map(|_| FrameDecoder::new()).collect(),
        switch_rx: (0..n_switches).map(|_| FrameDecoder::new()).collect(),
        mitigation: scn.mitigation,
        rows: (0..seconds)
            .map(|s| SecondMetrics {
                second: s as u32,
                benign_goodput_bps: 0.0,
                benign_loss_pct: 0.0,
                attack_delivered_pkts: 0,
                switch_to_controller_msgs: 0,
                controller_to_switch_msgs: 0,
            })
            .collect(),
        sent_by_second: vec![0; seconds],
        lost_by_second: vec![0; seconds],
        actions: Vec::new(),
        final_actions: BTreeMap::new(),
        controller_messages: 0,
        _scn: scn,
    };
    for i in 0..sim.sources.len() {
        let t = sim.sources[i].0[0].timestamp;
        sim.schedule(t, EventKind::Emit { source: i });
    }
    while let Some(ev) = sim.heap.pop() {
        sim.now = ev.time;
        match ev.kind {
            EventKind::Emit { source } => sim.emit(source),
            EventKind::TxDone { link } => sim.tx_done(link),
            EventKind::Arrive { node, pkt } => sim.arrive(node, pkt),
        }
    }

    for (s, row) in sim.rows.iter_mut().enumerate() {
        // the last row may cover a fractional second
        let width = (scn.duration - s as f64).min(1.0);
        row.benign_goodput_bps /= width;
        if sim.sent_by_second[s] > 0 {
            row.benign_loss_pct = 100.0 * sim.lost_by_second[s] as f64 / sim.sent_by_second[s] as f64;
        }
    }
    Ok(MetricsTimeline {
        rows: sim.rows,
        actions: sim.actions,
        final_actions: sim.final_actions,
        flows: sim.flows,
        links: sim
            .links
            .into_iter()
            .map(|l| LinkReport {
                name: l.name,
                bandwidth_bps: l.params.bandwidth_bps,
                stats: l.stats,
                log: l.log,
            })
            .collect(),
        controller_messages: sim.controller_messages,
    })
}

/// Largest bits carried in any `window`-second bucket divided by the
/// bucket's capacity; must not exceed 1.
pub fn link_utilization_peak(log: &[Transmission], bandwidth_bps: f64, window: f64) -> f64 {
    let mut buckets: BTreeMap<i64, f64> = BTreeMap::new();
    for tx in log {
        let bits = 8.0 * tx.bytes as f64;
        let dur = tx.end - tx.start;
        let mut t = tx.start;
        while t < tx.end {
            let b = (t / window).floor() as i64;
            let edge = ((b + 1) as f64 * window).min(tx.end);
            let share = if dur > 0.0 { bits * (edge - t) / dur } else { bits };
            *buckets.entry(b).or_default() += share;
            if edge <= t {
                break;
            }
            t = edge;
        }
    }
    buckets.values().fold(0.0f64, |m, v| m.max(*v)) / (bandwidth_bps * window)
}

// ---- outputs ----

pub fn write_metrics(timeline: &MetricsTimeline, path: impl AsRef<Path>) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    if timeline.rows.is_empty() {
        w.write_record(METRICS_HEADER)?;
    }
    for r in &timeline.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<SecondMetrics>, SimError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return invalid(format!("unexpected metrics header {header:?}"));
    }
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Serialize)]
struct ActionSummary<'a> {
    controller_messages: u64,
    actions: &'a [ActionEvent],
    final_actions: &'a BTreeMap<String, BTreeMap<String, String>>,
    flows: &'a [FlowTotals],
}

/// Per-flow actions and totals as JSON.
pub fn write_action_summary(timeline: &MetricsTimeline, path: impl AsRef<Path>) -> Result<(), SimError> {
    let s = ActionSummary {
        controller_messages: timeline.controller_messages,
        actions: &timeline.actions,
        final_actions: &timeline.final_actions,
        flows: &timeline.flows,
    };
    fs::write(path, serde_json::to_string_pretty(&s).map_err(io::Error::other)?)?;
    Ok(())
}

/// Counts installs per action kind.
pub fn action_counts(timeline: &MetricsTimeline) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::new();
    for a in [Action::Allow, Action::Drop, Action::Notify] {
        m.insert(a.as_str(), timeline.actions.iter().filter(|e| e.action == a.as_str()).count());
    }
    m
}

/// UDP packets in a record set (for generator checks).
pub fn udp_share(recs: &[PacketRecord]) -> f64 {
    if recs.is_empty() {
        return 0.0;
    }
    recs.iter().filter(|r| r.protocol == PROTO_UDP).count() as f64 / recs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ip(n: u8) -> Ipv4Addr {
        Ipv4Addr::new(10, 0, 0, n)
    }

    #[test]
    fn syn_flood_statistics() {
        let a = generate_syn_flood(ip(3), ip(4), 0.0, 1.0, 1000.0, 50, 30_000, 1);
        assert!((900..1100).contains(&a.len()), "{}", a.len());
        assert!(a.iter().all(|r| r.tcp_flags.syn && r.frame_len() == 54));
        let keys: HashSet<_> = a.iter().map(canonical_flow_key).collect();
        assert_eq!(keys.len(), 50);
        assert_eq!(a, generate_syn_flood(ip(3), ip(4), 0.0, 1.0, 1000.0, 50, 30_000, 1));
    }

    #[test]
    fn benign_has_both_directions() {
        let b = generate_benign((ip(1), 40000), (ip(4), 5001), 0.0, 1.0, 2e6, 0.1, 0.035, 3);
        assert!(b.iter().any(|r| r.src_ip == ip(4)));
        assert!(b.iter().filter(|r| r.payload_len == 1460).all(|r| r.frame_len() == 1514));
        assert!(b.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        let keys: HashSet<_> = b.iter().map(canonical_flow_key).collect();
        assert_eq!(keys.len(), 1);
    }

    #[test]
    fn mixed_flood_mix() {
        let m = generate_mixed_flood(ip(2), ip(4), 10.0, 30.0, 40, 0.5, 50.0, 4.0, 64, 0.1, 9);
        assert!((udp_share(&m) - 0.5).abs() < 0.05);
        let keys: HashSet<_> = m.iter().map(canonical_flow_key).collect();
        assert_eq!(keys.len(), 40);
        assert!(m.first().unwrap().timestamp >= 10.0);
    }

    #[test]
    fn zero_duration_is_empty() {
        let mut s = Scenario::default_scenario();
        s.duration = 0.0;
        let t = run_scenario(&s).unwrap();
        assert!(t.rows.is_empty());
        assert_eq!(t.controller_messages, 0);
    }

    #[test]
    fn idle_path_goodput_is_link_limited() {
        let s = Scenario::from_toml(
            r#"
            duration = 6.0
            mitigation = false
            [[source]]
            kind = "benign"
            from = "C1"
            to = "C4"
            start = 0.0
            rate_bps = 2000000
            "#,
        )
        .unwrap();
        let t = run_scenario(&s).unwrap();
        let g = t.mean_goodput(2, 6);
        // payload share of a 1514-byte frame on a 1.5 Mbit/s bottleneck
        let bound = 1.5e6 * 1460.0 / 1514.0;
        assert!(g <= bound * 1.001 && g > 0.97 * bound, "{g} vs {bound}");
    }

    #[test]
    fn scenario_validation() {
        assert!(Scenario::from_toml("duration = -1.0").is_err());
        assert!(Scenario::from_toml(
            "[[source]]\nkind = \"syn_flood\"\nfrom = \"C3\"\nto = \"C9\"\nstart = 0.0\nrate_pps = 1.0\nsource_count = 1"
        )
        .is_err());
        assert!(Scenario::from_toml("bogus = 1").is_err());
    }
}
