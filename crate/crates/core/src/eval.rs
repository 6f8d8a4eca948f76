//! Offline exit-ratio and per-exit accuracy measurement over a labeled trace.
//!
//! Every packet of a labeled flow from its tenth packet on is one sample. The
//! switch exit answers when its logit clears a threshold; otherwise the
//! controller classifies the ten-map sequence and answers attack at p >= 0.5.
//! The sweep uses tau_attack = tau and tau_benign = 1 - tau.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::net::Ipv4Addr;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::ModelBundle;
use crate::controller::{Controller, ControllerConfig, ControllerError};
use crate::flow::{quantize_features, FlowTable, SEQ_LEN};
use crate::packet::{canonical_flow_key, FlowKey, PacketRecord, TcpFlags};
use crate::qnn::switch_forward;
use crate::sim::{generate_benign, generate_syn_flood, TrafficClass};
use crate::switch::{precompute_thresholds, SwitchError};

pub const DEFAULT_TAUS: [f64; 5] = [0.5, 0.7, 0.9, 0.95, 0.99];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels line {line}: {msg}")]
    BadLabel { line: usize, msg: String },
    #[error("{0}")]
    Threshold(#[from] SwitchError),
    #[error("{0}")]
    Controller(#[from] ControllerError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Labels = HashMap<FlowKey, TrafficClass>;

/// Parses `ip port ip port proto label` lines; `#` starts a comment.
pub fn parse_labels(text: &str) -> Result<Labels, EvalError> {
    let mut out = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| EvalError::BadLabel {
            line: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let ip = |s: &str| s.parse::<Ipv4Addr>().map_err(|_| bad("bad IPv4 address"));
        let port = |s: &str| s.parse::<u16>().map_err(|_| bad("bad port"));
        let proto = f[4].parse::<u8>().map_err(|_| bad("bad protocol"))?;
        let class = match f[5].to_ascii_lowercase().as_str() {
            "benign" | "0" => TrafficClass::Benign,
            "attack" | "1" => TrafficClass::Attack,
            _ => return Err(bad("label must be benign or attack")),
        };
        let key = FlowKey::new((ip(f[0])?, port(f[1])?), (ip(f[2])?, port(f[3])?), proto);
        out.insert(key, class);
    }
    Ok(out)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Labels, EvalError> {
    parse_labels(&fs::read_to_string(path)?)
}

pub fn format_labels(labels: &Labels) -> String {
    let mut keys: Vec<_> = labels.keys().collect();
    keys.sort();
    let mut s = String::from("# ip_a port_a ip_b port_b protocol label\n");
    for k in keys {
        let l = match labels[k] {
            TrafficClass::Benign => "benign",
            TrafficClass::Attack => "attack",
        };
        s.push_str(&format!("{} {} {} {} {} {}\n", k.ip_a, k.port_a, k.ip_b, k.port_b, k.protocol, l));
    }
    s
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Confusion {
    pub fn add(&mut self, predicted_attack: bool, attack: bool) {
        match (predicted_attack, attack) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub tau: f64,
    pub samples: u64,
    pub switch_exit_ratio: f64,
    pub controller_exit_ratio: f64,
    pub switch_precision: f64,
    pub switch_recall: f64,
    pub switch_f1: f64,
    pub controller_precision: f64,
    pub controller_recall: f64,
    pub controller_f1: f64,
    pub overall_f1: f64,
}

struct Sample {
    logit: i8,
    attack: bool,
    /// Controller probability, computed only for samples some tau escalates.
    p: Option<f64>,
}

/// Streams `records` through the split pipeline once and scores every tau.
pub fn evaluate(
    records: &[PacketRecord],
    labels: &Labels,
    bundle: Arc<ModelBundle>,
    taus: &[f64],
) -> Result<Vec<EvalRow>, EvalError> {
    let logit_q = bundle.linear_exit.logit_q;
    let thresholds = taus
        .iter()
        .map(|t| precompute_thresholds(1.0 - t, *t, &logit_q))
        .collect::<Result<Vec<_>, _>>()?;
    let lo = thresholds.iter().map(|t| t.t_benign_q).min().unwrap_or(0);
    let hi = thresholds.iter().map(|t| t.t_attack_q).max().unwrap_or(0);
    let controller = Controller::new(Arc::clone(&bundle), ControllerConfig::default())?;

    let mut table = FlowTable::new(usize::MAX, f64::INFINITY);
    let mut samples = Vec::new();
    for rec in records {
        let key = canonical_flow_key(rec);
        let Some(class) = labels.get(&key) else { continue };
        let entry = table.get_or_create(key, rec.timestamp);
        let f = entry.update(rec);
        let x = quantize_features(&f, &bundle.scaler);
        let (pooled, logit) = switch_forward(&x, &bundle.conv, &bundle.linear_exit);
        entry.push_feature_map(pooled);
        if entry.map_fill() < SEQ_LEN {
            continue;
        }
        let p = if (lo..=hi).contains(&logit.q) {
            Some(controller.classify_sequence(&entry.snapshot_sequence().expect("full"))?.probability)
        } else {
            None
        };
        samples.push(Sample {
            logit: logit.q,
            attack: *class == TrafficClass::Attack,
            p,
        });
    }

    let mut rows = Vec::new();
    for (tau, th) in taus.iter().zip(&thresholds) {
        let mut sw = Confusion::default();
        let mut ctl = Confusion::default();
        for s in &samples {
            if s.logit < th.t_benign_q {
                sw.add(false, s.attack);
            } else if s.logit > th.t_attack_q {
                sw.add(true, s.attack);
            } else {
                ctl.add(s.p.expect("escalated samples carry p") >= 0.5, s.attack);
            }
        }
        let n = samples.len() as u64;
        let all = Confusion {
            tp: sw.tp + ctl.tp,
            fp: sw.fp + ctl.fp,
            tn: sw.tn + ctl.tn,
            fn_: sw.fn_ + ctl.fn_,
        };
        rows.push(EvalRow {
            tau: *tau,
            samples: n,
            switch_exit_ratio: ratio(sw.total(), n),
            controller_exit_ratio: ratio(ctl.total(), n),
            switch_precision: sw.precision(),
            switch_recall: sw.recall(),
            switch_f1: sw.f1(),
            controller_precision: ctl.precision(),
            controller_recall: ctl.recall(),
            controller_f1: ctl.f1(),
            overall_f1: all.f1(),
        });
    }
    Ok(rows)
}

pub fn write_eval_csv(rows: &[EvalRow], out: impl io::Write) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

// ---- synthetic labeled trace ----

fn ip(n: u8) -> Ipv4Addr {
    Ipv4Addr::new(192, 168, 1, n)
}

fn server(n: u8) -> Ipv4Addr {
    Ipv4Addr::new(172, 16, 0, n)
}

/// A slow request/response TCP flow with optional repeated SYNs.
fn slow_tcp_flow(
    rng: &mut ChaCha8Rng,
    cli: (Ipv4Addr, u16),
    srv: (Ipv4Addr, u16),
    start: f64,
    packets: usize,
    gap: f64,
    syns: usize,
) -> Vec<PacketRecord> {
    let mut out = Vec::new();
    let mut t = start;
    for i in 0..packets {
        let rec = if i < syns {
            PacketRecord::tcp(t, cli, srv, 0, TcpFlags::SYN, 64240)
        } else if i % 2 == 1 {
            PacketRecord::tcp(t, srv, cli, rng.random_range(200..1400), TcpFlags::ACK.with_psh(), 65535)
        } else {
            PacketRecord::tcp(t, cli, srv, rng.random_range(0..300), TcpFlags::ACK, 64240)
        };
        out.push(rec);
        t += gap * rng.random_range(0.5..1.5);
    }
    out
}

/// Deterministic mixture of benign and attack flows with per-flow labels.
/// `scale` multiplies flow counts.
pub fn generate_labeled_trace(seed: u64, scale: usize) -> (Vec<PacketRecord>, Labels) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = scale.max(1);
    let mut recs: Vec<(PacketRecord, TrafficClass)> = Vec::new();
    let push = |v: Vec<PacketRecord>, c: TrafficClass, recs: &mut Vec<(PacketRecord, TrafficClass)>| {
        recs.extend(v.into_iter().map(|r| (r, c)));
    };

    for i in 0..3 * scale {
        let s = rng.random_range(0.0..8.0);
        let v = generate_benign(
            (ip(10 + i as u8), 40_000 + i as u16),
            (server(1), 443),
            s,
            s + 1.5,
            rng.random_range(0.5e6..2.0e6),
            0.2,
            0.03,
            rng.random(),
        );
        push(v, TrafficClass::Benign, &mut recs);
    }
    for i in 0..20 * scale {
        let syns = if i % 4 == 0 { 3 } else { 1 };
        let s = rng.random_range(0.0..8.0);
        let gap = rng.random_range(0.02..0.3);
        let v = slow_tcp_flow(&mut rng, (ip(50 + (i % 150) as u8), 50_000 + i as u16), (server(2), 80), s, 40, gap, syns);
        push(v, TrafficClass::Benign, &mut recs);
    }
    for i in 0..2 * scale {
        // low-rate benign UDP (DNS-like); looks like a UDP flood to the switch
        let s = rng.random_range(0.0..6.0);
        let cli = (ip(200 + i as u8), 53_000 + i as u16);
        let mut t = s;
        let mut v = Vec::new();
        for k in 0..30 {
            v.push(if k % 2 == 0 {
                PacketRecord::udp(t, cli, (server(53), 53), 40)
            } else {
                PacketRecord::udp(t, (server(53), 53), cli, 120)
            });
            t += rng.random_range(0.2..0.6);
        }
        push(v, TrafficClass::Benign, &mut recs);
    }

    let s = rng.random_range(0.0..4.0);
    let v = generate_syn_flood(ip(250), server(3), s, s + 3.0, 1500.0 * scale as f64, 30 * scale as u16, 10_000, rng.random());
    push(v, TrafficClass::Attack, &mut recs);
    for i in 0..5 * scale {
        let s = rng.random_range(0.0..8.0);
        let src = (ip(240), 20_000 + i as u16);
        let mut t = s;
        let mut v = Vec::new();
        for _ in 0..150 {
            v.push(PacketRecord::udp(t, src, (server(4), 53), 64));
            t += 0.01 * rng.random_range(0.8..1.2);
        }
        push(v, TrafficClass::Attack, &mut recs);
    }
    for i in 0..8 * scale {
        // low-and-slow SYN flows sit in the switch's uncertain band
        let s = rng.random_range(0.0..6.0);
        let src = (ip(230), 25_000 + i as u16);
        let mut t = s;
        let mut v = Vec::new();
        for _ in 0..40 {
            v.push(PacketRecord::tcp(t, src, (server(5), 22), 0, TcpFlags::SYN, 1024));
            t += rng.random_range(0.07..0.2);
        }
        push(v, TrafficClass::Attack, &mut recs);
    }

    recs.sort_by(|a, b| a.0.timestamp.total_cmp(&b.0.timestamp));
    let mut labels = HashMap::new();
    for (r, c) in &recs {
        labels.insert(canonical_flow_key(r), *c);
    }
    (recs.into_iter().map(|(r, _)| r).collect(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::make_handcrafted_bundle;

    #[test]
    fn labels_round_trip_and_errors() {
        let (_, labels) = generate_labeled_trace(1, 1);
        let text = format_labels(&labels);
        assert_eq!(parse_labels(&text).unwrap(), labels);
        assert!(parse_labels("10.0.0.1 1 10.0.0.2 2 6 maybe").is_err());
        assert!(matches!(
            parse_labels("# c\n10.0.0.1 1 10.0.0.2 x 6 attack"),
            Err(EvalError::BadLabel { line: 2, .. })
        ));
        // label endpoints in either order name the same flow
        let a = parse_labels("10.0.0.9 80 10.0.0.1 5 6 attack").unwrap();
        let b = parse_labels("10.0.0.1 5 10.0.0.9 80 6 attack").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn confusion_metrics() {
        let mut c = Confusion::default();
        assert_eq!(c.f1(), 0.0);
        c.add(true, true);
        c.add(true, false);
        c.add(false, true);
        assert_eq!(c.precision(), 0.5);
        assert_eq!(c.recall(), 0.5);
        assert_eq!(c.f1(), 0.5);
    }

    #[test]
    fn sweep_rows_sum_to_one() {
        let (recs, labels) = generate_labeled_trace(3, 1);
        let rows = evaluate(&recs, &labels, Arc::new(make_handcrafted_bundle()), &DEFAULT_TAUS).unwrap();
        assert_eq!(rows.len(), 5);
        for r in &rows {
            assert!((r.switch_exit_ratio + r.controller_exit_ratio - 1.0).abs() < 1e-12);
        }
        assert!(rows.windows(2).all(|w| w[1].switch_exit_ratio <= w[0].switch_exit_ratio));
    }
}
