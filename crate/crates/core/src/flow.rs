//! Per-flow state kept by the switch: the 28 stateful features, their uint8
//! quantization, and the ring of the last ten CNN feature maps.

use std::collections::{BTreeMap, HashMap};
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::packet::{FlowKey, PacketRecord};

pub const FEATURE_COUNT: usize = 28;
pub const MAP_CHANNELS: usize = 16;
pub const SEQ_LEN: usize = 10;
pub const QUANT_MAX: u8 = 127;

pub const DEFAULT_TABLE_CAPACITY: usize = 65_536;
pub const DEFAULT_IDLE_TIMEOUT: f64 = 120.0;

/// Feature positions. The order is shared with the model bundle and must
/// not change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Feature {
    FwdPktCount = 0,
    BwdPktCount,
    FwdByteCount,
    BwdByteCount,
    LastPktLen,
    MinPktLen,
    MaxPktLen,
    LastFwdHeaderLen,
    LastBwdHeaderLen,
    FlowDuration,
    FlowIatLast,
    FwdIatLast,
    BwdIatLast,
    MinFlowIat,
    MaxFlowIat,
    FinCount,
    SynCount,
    RstCount,
    PshCount,
    AckCount,
    UrgCount,
    EceCount,
    CwrCount,
    Protocol,
    DstPort,
    LastTcpWindow,
    LastPayloadLen,
    CurrentDirection,
}

impl Feature {
    pub const ALL: [Feature; FEATURE_COUNT] = [
        Feature::FwdPktCount,
        Feature::BwdPktCount,
        Feature::FwdByteCount,
        Feature::BwdByteCount,
        Feature::LastPktLen,
        Feature::MinPktLen,
        Feature::MaxPktLen,
        Feature::LastFwdHeaderLen,
        Feature::LastBwdHeaderLen,
        Feature::FlowDuration,
        Feature::FlowIatLast,
        Feature::FwdIatLast,
        Feature::BwdIatLast,
        Feature::MinFlowIat,
        Feature::MaxFlowIat,
        Feature::FinCount,
        Feature::SynCount,
        Feature::RstCount,
        Feature::PshCount,
        Feature::AckCount,
        Feature::UrgCount,
        Feature::EceCount,
        Feature::CwrCount,
        Feature::Protocol,
        Feature::DstPort,
        Feature::LastTcpWindow,
        Feature::LastPayloadLen,
        Feature::CurrentDirection,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        FEATURE_NAMES[self as usize]
    }
}

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "fwd_pkt_count",
    "bwd_pkt_count",
    "fwd_byte_count",
    "bwd_byte_count",
    "last_pkt_len",
    "min_pkt_len",
    "max_pkt_len",
    "last_fwd_header_len",
    "last_bwd_header_len",
    "flow_duration",
    "flow_iat_last",
    "fwd_iat_last",
    "bwd_iat_last",
    "min_flow_iat",
    "max_flow_iat",
    "fin_count",
    "syn_count",
    "rst_count",
    "psh_count",
    "ack_count",
    "urg_count",
    "ece_count",
    "cwr_count",
    "protocol",
    "dst_port",
    "last_tcp_window",
    "last_payload_len",
    "current_direction",
];

/// FNV-1a over the comma-joined feature names; stored in bundle metadata.
pub fn feature_list_hash() -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in FEATURE_NAMES.join(",").bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// The 28 features after a packet. Times are in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowFeatures(pub [f64; FEATURE_COUNT]);

impl FlowFeatures {
    pub fn get(&self, f: Feature) -> f64 {
        self.0[f as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    pub min: [f64; FEATURE_COUNT],
    pub max: [f64; FEATURE_COUNT],
}

impl FeatureScaler {
    pub fn new(min: [f64; FEATURE_COUNT], max: [f64; FEATURE_COUNT]) -> Self {
        FeatureScaler { min, max }
    }

    /// Index of the first feature whose range is inverted or non-finite.
    pub fn first_invalid(&self) -> Option<usize> {
        (0..FEATURE_COUNT)
            .find(|&i| !(self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] <= self.max[i]))
    }

    pub fn quantize(&self, f: &FlowFeatures) -> QuantizedFeatureVector {
        quantize_features(f, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantizedFeatureVector(pub [u8; FEATURE_COUNT]);

/// `clamp(floor(127 * (f - min) / (max - min)), 0, 127)`; constant features
/// map to zero.
pub fn quantize_value(value: f64, min: f64, max: f64) -> u8 {
    if max <= min {
        return 0;
    }
    let scaled = (127.0 * ((value - min) / (max - min))).floor();
    if scaled.is_nan() || scaled <= 0.0 {
        0
    } else if scaled >= QUANT_MAX as f64 {
        QUANT_MAX
    } else {
        scaled as u8
    }
}

pub fn quantize_features(f: &FlowFeatures, s: &FeatureScaler) -> QuantizedFeatureVector {
    let mut out = [0u8; FEATURE_COUNT];
    for (i, o) in out.iter_mut().enumerate() {
        *o = quantize_value(f.0[i], s.min[i], s.max[i]);
    }
    QuantizedFeatureVector(out)
}

/// One max-pooled CNN output (signed 8-bit, ring-buffer domain).
pub type FeatureMap = [i8; MAP_CHANNELS];

/// Ten feature maps, oldest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureMapSeq(pub [FeatureMap; SEQ_LEN]);

impl FeatureMapSeq {
    pub fn zeroed(value: i8) -> Self {
        FeatureMapSeq([[value; MAP_CHANNELS]; SEQ_LEN])
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FlowError {
    #[error("insufficient history: {fill} of {SEQ_LEN} feature maps")]
    InsufficientHistory { fill: usize },
}

/// Fixed-size register file for the last ten feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapRing {
    slots: [FeatureMap; SEQ_LEN],
    /// Next slot to write.
    head: usize,
    fill: usize,
}

impl Default for MapRing {
    fn default() -> Self {
        MapRing {
            slots: [[0; MAP_CHANNELS]; SEQ_LEN],
            head: 0,
            fill: 0,
        }
    }
}

impl MapRing {
    pub fn push(&mut self, map: FeatureMap) {
        self.slots[self.head] = map;
        self.head = (self.head + 1) % SEQ_LEN;
        if self.fill < SEQ_LEN {
            self.fill += 1;
        }
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn is_full(&self) -> bool {
        self.fill == SEQ_LEN
    }

    pub fn clear(&mut self) {
        self.fill = 0;
    }

    pub fn snapshot(&self) -> Result<FeatureMapSeq, FlowError> {
        if self.fill < SEQ_LEN {
            return Err(FlowError::InsufficientHistory { fill: self.fill });
        }
        // when full, head points at the oldest slot
        let mut seq = [[0i8; MAP_CHANNELS]; SEQ_LEN];
        for (i, s) in seq.iter_mut().enumerate() {
            *s = self.slots[(self.head + i) % SEQ_LEN];
        }
        Ok(FeatureMapSeq(seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Allow,
    Drop,
    Notify,
}

impl Action {
    pub fn code(self) -> u8 {
        match self {
            Action::Allow => 0,
            Action::Drop => 1,
            Action::Notify => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Action::Allow),
            1 => Some(Action::Drop),
            2 => Some(Action::Notify),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Allow => "allow",
            Action::Drop => "drop",
            Action::Notify => "notify",
        }
    }
}

/// A controller-issued rule. `ttl_packets == 0` never expires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowAction {
    pub action: Action,
    pub ttl_packets: u32,
}

impl FlowAction {
    pub fn new(action: Action, ttl_packets: u32) -> Self {
        FlowAction { action, ttl_packets }
    }

    pub fn permanent(action: Action) -> Self {
        FlowAction { action, ttl_packets: 0 }
    }
}

/// An action installed on a flow, with its remaining packet budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstalledAction {
    pub action: FlowAction,
    /// `None` for permanent rules.
    pub remaining: Option<u32>,
    /// Packets seen since install (drives Notify re-escalation).
    pub packets_seen: u32,
}

/// Everything the switch keeps for one flow. All fields are fixed size.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowEntry {
    pub key: FlowKey,
    pub initiator: Option<(Ipv4Addr, u16)>,
    pub first_ts_us: i64,
    pub last_ts_us: i64,
    pub last_fwd_ts_us: i64,
    pub last_bwd_ts_us: i64,
    pub packet_count: u64,
    fwd_pkts: u64,
    bwd_pkts: u64,
    fwd_bytes: u64,
    bwd_bytes: u64,
    last_pkt_len: u16,
    min_pkt_len: u16,
    max_pkt_len: u16,
    last_fwd_header_len: u16,
    last_bwd_header_len: u16,
    flow_iat_last: i64,
    fwd_iat_last: i64,
    bwd_iat_last: i64,
    min_flow_iat: i64,
    max_flow_iat: i64,
    flag_counts: [u64; 8],
    protocol: u8,
    dst_port: u16,
    last_tcp_window: u16,
    last_payload_len: u16,
    last_direction_backward: bool,
    pub map_ring: MapRing,
    pub installed_action: Option<InstalledAction>,
    /// Send time of the outstanding report, if any.
    pub report_sent_at: Option<f64>,
    pub packets_since_verify: u64,
    /// Set when a controller rule expires; cleared once the periodic report goes out.
    pub periodic_due: bool,
}

pub fn seconds_to_us(t: f64) -> i64 {
    (t * 1e6).round() as i64
}

impl FlowEntry {
    pub fn new(key: FlowKey) -> Self {
        FlowEntry {
            key,
            initiator: None,
            first_ts_us: 0,
            last_ts_us: 0,
            last_fwd_ts_us: 0,
            last_bwd_ts_us: 0,
            packet_count: 0,
            fwd_pkts: 0,
            bwd_pkts: 0,
            fwd_bytes: 0,
            bwd_bytes: 0,
            last_pkt_len: 0,
            min_pkt_len: 0,
            max_pkt_len: 0,
            last_fwd_header_len: 0,
            last_bwd_header_len: 0,
            flow_iat_last: 0,
            fwd_iat_last: 0,
            bwd_iat_last: 0,
            min_flow_iat: 0,
            max_flow_iat: 0,
            flag_counts: [0; 8],
            protocol: key.protocol,
            dst_port: 0,
            last_tcp_window: 0,
            last_payload_len: 0,
            last_direction_backward: false,
            map_ring: MapRing::default(),
            installed_action: None,
            report_sent_at: None,
            packets_since_verify: 0,
            periodic_due: false,
        }
    }

    pub fn report_outstanding(&self) -> bool {
        self.report_sent_at.is_some()
    }

    pub fn map_fill(&self) -> usize {
        self.map_ring.fill()
    }

    /// Folds `pkt` into the accumulators and returns the features valid
    /// right after it.
    pub fn update(&mut self, pkt: &PacketRecord) -> FlowFeatures {
        let ts = seconds_to_us(pkt.timestamp);
        let src = pkt.src_endpoint();
        let first = self.packet_count == 0;
        if first {
            self.initiator = Some(src);
            self.first_ts_us = ts;
            self.dst_port = pkt.dst_port;
            self.protocol = pkt.protocol;
            self.min_pkt_len = pkt.total_len;
            self.max_pkt_len = pkt.total_len;
        } else {
            let iat = (ts - self.last_ts_us).max(0);
            self.flow_iat_last = iat;
            if self.packet_count == 1 {
                self.min_flow_iat = iat;
                self.max_flow_iat = iat;
            } else {
                self.min_flow_iat = self.min_flow_iat.min(iat);
                self.max_flow_iat = self.max_flow_iat.max(iat);
            }
            self.min_pkt_len = self.min_pkt_len.min(pkt.total_len);
            self.max_pkt_len = self.max_pkt_len.max(pkt.total_len);
        }

        let forward = self.initiator == Some(src);
        if forward {
            if self.fwd_pkts > 0 {
                self.fwd_iat_last = (ts - self.last_fwd_ts_us).max(0);
            }
            self.fwd_pkts += 1;
            self.fwd_bytes += pkt.total_len as u64;
            self.last_fwd_header_len = pkt.header_len;
            self.last_fwd_ts_us = ts;
        } else {
            if self.bwd_pkts > 0 {
                self.bwd_iat_last = (ts - self.last_bwd_ts_us).max(0);
            }
            self.bwd_pkts += 1;
            self.bwd_bytes += pkt.total_len as u64;
            self.last_bwd_header_len = pkt.header_len;
            self.last_bwd_ts_us = ts;
        }

        for (count, set) in self.flag_counts.iter_mut().zip(pkt.tcp_flags.as_array()) {
            *count += set as u64;
        }
        self.last_pkt_len = pkt.total_len;
        self.last_tcp_window = pkt.tcp_window;
        self.last_payload_len = pkt.payload_len;
        self.last_direction_backward = !forward;
        self.last_ts_us = self.last_ts_us.max(ts);
        self.packet_count += 1;
        self.packets_since_verify += 1;
        self.features()
    }

    pub fn features(&self) -> FlowFeatures {
        let fc = &self.flag_counts;
        FlowFeatures([
            self.fwd_pkts as f64,
            self.bwd_pkts as f64,
            self.fwd_bytes as f64,
            self.bwd_bytes as f64,
            self.last_pkt_len as f64,
            self.min_pkt_len as f64,
            self.max_pkt_len as f64,
            self.last_fwd_header_len as f64,
            self.last_bwd_header_len as f64,
            (self.last_ts_us - self.first_ts_us) as f64,
            self.flow_iat_last as f64,
            self.fwd_iat_last as f64,
            self.bwd_iat_last as f64,
            self.min_flow_iat as f64,
            self.max_flow_iat as f64,
            fc[0] as f64,
            fc[1] as f64,
            fc[2] as f64,
            fc[3] as f64,
            fc[4] as f64,
            fc[5] as f64,
            fc[6] as f64,
            fc[7] as f64,
            self.protocol as f64,
            self.dst_port as f64,
            self.last_tcp_window as f64,
            self.last_payload_len as f64,
            self.last_direction_backward as u8 as f64,
        ])
    }

    pub fn push_feature_map(&mut self, map: FeatureMap) {
        self.map_ring.push(map);
    }

    pub fn snapshot_sequence(&self) -> Result<FeatureMapSeq, FlowError> {
        self.map_ring.snapshot()
    }
}

pub fn update_flow(entry: &mut FlowEntry, pkt: &PacketRecord) -> FlowFeatures {
    entry.update(pkt)
}

/// Bounded flow table with least-recently-updated eviction and an idle timeout.
#[derive(Debug, Clone)]
pub struct FlowTable {
    capacity: usize,
    idle_timeout: f64,
    entries: HashMap<FlowKey, Slot>,
    /// touch stamp -> key, oldest first
    order: BTreeMap<u64, FlowKey>,
    next_stamp: u64,
    evictions: u64,
}

#[derive(Debug, Clone)]
struct Slot {
    entry: FlowEntry,
    stamp: u64,
    touched_at: f64,
}

impl Default for FlowTable {
    fn default() -> Self {
        FlowTable::new(DEFAULT_TABLE_CAPACITY, DEFAULT_IDLE_TIMEOUT)
    }
}

impl FlowTable {
    pub fn new(capacity: usize, idle_timeout: f64) -> Self {
        assert!(capacity > 0, "flow table capacity must be positive");
        FlowTable {
            capacity,
            idle_timeout,
            entries: HashMap::new(),
            order: BTreeMap::new(),
            next_stamp: 0,
            evictions: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    pub fn get(&self, key: &FlowKey) -> Option<&FlowEntry> {
        self.entries.get(key).map(|s| &s.entry)
    }

    pub fn contains(&self, key: &FlowKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &FlowKey> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FlowEntry> {
        self.entries.values().map(|s| &s.entry)
    }

    fn remove_oldest(&mut self) {
        if let Some((_, key)) = self.order.pop_first() {
            self.entries.remove(&key);
            self.evictions += 1;
        }
    }

    fn reclaim_idle(&mut self, now: f64) {
        while let Some((_, key)) = self.order.first_key_value() {
            let slot = &self.entries[key];
            if now - slot.touched_at <= self.idle_timeout {
                break;
            }
            self.remove_oldest();
        }
    }

    /// Returns the entry for `key`, creating it (and evicting if full) when absent.
    pub fn get_or_create(&mut self, key: FlowKey, now: f64) -> &mut FlowEntry {
        self.reclaim_idle(now);
        let stamp = self.next_stamp;
        self.next_stamp += 1;
        if let Some(slot) = self.entries.get_mut(&key) {
            self.order.remove(&slot.stamp);
            slot.stamp = stamp;
            slot.touched_at = now;
            self.order.insert(stamp, key);
        } else {
            if self.entries.len() >= self.capacity {
                self.remove_oldest();
            }
            self.entries.insert(
                key,
                Slot {
                    entry: FlowEntry::new(key),
                    stamp,
                    touched_at: now,
                },
            );
            self.order.insert(stamp, key);
        }
        &mut self.entries.get_mut(&key).expect("just inserted").entry
    }
}
