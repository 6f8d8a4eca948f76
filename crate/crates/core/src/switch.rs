//! Data-plane pipeline: feature extraction, integer CNN, early-exit decision,
//! local mitigation and escalation of uncertain flows.

use std::sync::Arc;

use thiserror::Error;

use crate::bundle::ModelBundle;
use crate::flow::{quantize_features, Action, FlowAction, FlowEntry, FlowTable, InstalledAction};
use crate::packet::{canonical_flow_key, FlowKey, PacketRecord};
use crate::qnn::{switch_forward, QLogit, QuantParams};
use crate::wire::{FeatureReport, ReportReason};

#[derive(Debug, Error, PartialEq)]
pub enum SwitchError {
    #[error("invalid thresholds: tau_benign={tau_benign}, tau_attack={tau_attack}")]
    InvalidThreshold { tau_benign: f64, tau_attack: f64 },
}

/// Confidence thresholds in probability space plus their precomputed logit codes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitThresholds {
    pub tau_benign: f64,
    pub tau_attack: f64,
    pub t_benign_q: i8,
    pub t_attack_q: i8,
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Integer code of `ln(tau / (1 - tau))` in the logit domain.
pub fn threshold_code(tau: f64, logit_q: &QuantParams) -> i8 {
    let q = (logit(tau) / logit_q.scale).round() + logit_q.zero_point as f64;
    q.clamp(-128.0, 127.0) as i8
}

/// Offline step: maps both probability thresholds to signed-8 logit codes.
pub fn precompute_thresholds(
    tau_benign: f64,
    tau_attack: f64,
    logit_q: &QuantParams,
) -> Result<ExitThresholds, SwitchError> {
    let in_range = |t: f64| t > 0.0 && t < 1.0;
    if !(in_range(tau_benign) && in_range(tau_attack) && tau_benign <= tau_attack) {
        return Err(SwitchError::InvalidThreshold { tau_benign, tau_attack });
    }
    Ok(ExitThresholds {
        tau_benign,
        tau_attack,
        t_benign_q: threshold_code(tau_benign, logit_q),
        t_attack_q: threshold_code(tau_attack, logit_q),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SwitchDecision {
    Benign,
    Attack,
    Uncertain,
}

/// Strict comparisons on both sides: a logit equal to a threshold is uncertain.
pub fn classify_switch(logit: QLogit, th: &ExitThresholds) -> SwitchDecision {
    if logit.q < th.t_benign_q {
        SwitchDecision::Benign
    } else if logit.q > th.t_attack_q {
        SwitchDecision::Attack
    } else {
        SwitchDecision::Uncertain
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    Forward,
    Dropped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketVerdict {
    pub disposition: Disposition,
    pub report: Option<FeatureReport>,
    /// Local CNN decision; `None` when an installed rule handled the packet.
    pub decision: Option<SwitchDecision>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchConfig {
    pub table_capacity: usize,
    pub idle_timeout: f64,
    /// Seconds before an unanswered report may be re-sent.
    pub report_timeout: f64,
    /// Packet count that triggers the one-off re-verification report.
    pub reverify_at: u64,
    /// Under a Notify rule, re-escalate every this many packets.
    pub notify_every: u32,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        SwitchConfig {
            table_capacity: crate::flow::DEFAULT_TABLE_CAPACITY,
            idle_timeout: crate::flow::DEFAULT_IDLE_TIMEOUT,
            report_timeout: 5.0,
            reverify_at: 500,
            notify_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SwitchStats {
    pub packets: u64,
    pub inferences: u64,
    pub forwarded: u64,
    pub local_drops: u64,
    pub rule_drops: u64,
    pub benign: u64,
    pub attack: u64,
    pub uncertain: u64,
    pub reports_uncertain: u64,
    pub reports_reverify: u64,
    pub reports_periodic: u64,
    pub actions_installed: u64,
}

/// Result of running the CNN on one packet with flow state already updated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inference {
    pub logit: QLogit,
    pub decision: SwitchDecision,
}

/// Feature update, quantization, CNN, ring push and threshold test for one packet.
pub fn infer_packet(
    bundle: &ModelBundle,
    thresholds: &ExitThresholds,
    entry: &mut FlowEntry,
    pkt: &PacketRecord,
) -> Inference {
    let features = entry.update(pkt);
    let x = quantize_features(&features, &bundle.scaler);
    let (pooled, logit) = switch_forward(&x, &bundle.conv, &bundle.linear_exit);
    entry.push_feature_map(pooled);
    Inference {
        logit,
        decision: classify_switch(logit, thresholds),
    }
}

/// One emulated switch: flow table, model and thresholds.
#[derive(Debug, Clone)]
pub struct SwitchState {
    pub id: u16,
    bundle: Arc<ModelBundle>,
    thresholds: ExitThresholds,
    config: SwitchConfig,
    table: FlowTable,
    stats: SwitchStats,
}

impl SwitchState {
    pub fn new(id: u16, bundle: Arc<ModelBundle>) -> Self {
        SwitchState::with_config(id, bundle, SwitchConfig::default())
    }

    pub fn with_config(id: u16, bundle: Arc<ModelBundle>, config: SwitchConfig) -> Self {
        let thresholds = bundle.thresholds;
        SwitchState {
            id,
            table: FlowTable::new(config.table_capacity, config.idle_timeout),
            bundle,
            thresholds,
            config,
            stats: SwitchStats::default(),
        }
    }

    /// Replaces the bundle thresholds (e.g. from an operator override).
    pub fn set_thresholds(&mut self, thresholds: ExitThresholds) {
        self.thresholds = thresholds;
    }

    pub fn thresholds(&self) -> &ExitThresholds {
        &self.thresholds
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn stats(&self) -> SwitchStats {
        self.stats
    }

    pub fn table(&self) -> &FlowTable {
        &self.table
    }

    pub fn flow(&self, key: &FlowKey) -> Option<&FlowEntry> {
        self.table.get(key)
    }

    pub fn install_action(&mut self, key: FlowKey, action: FlowAction, now: f64) {
        let entry = self.table.get_or_create(key, now);
        entry.installed_action = Some(InstalledAction {
            action,
            remaining: (action.ttl_packets > 0).then_some(action.ttl_packets),
            packets_seen: 0,
        });
        entry.report_sent_at = None;
        entry.periodic_due = false;
        self.stats.actions_installed += 1;
    }

    pub fn process_packet(&mut self, pkt: &PacketRecord, now: f64) -> PacketVerdict {
        self.stats.packets += 1;
        let key = canonical_flow_key(pkt);
        let bundle = Arc::clone(&self.bundle);
        let config = &self.config;
        let entry = self.table.get_or_create(key, now);

        if let Some(sent) = entry.report_sent_at {
            if now - sent >= config.report_timeout {
                entry.report_sent_at = None;
            }
        }

        // installed rules take precedence over inference
        let mut notify = false;
        if let Some(inst) = entry.installed_action.as_mut() {
            inst.packets_seen = inst.packets_seen.saturating_add(1);
            let covered = match inst.remaining.as_mut() {
                None => true,
                Some(0) => false,
                Some(r) => {
                    *r -= 1;
                    true
                }
            };
            if !covered {
                // rule expired: fresh maps, then periodic re-verification
                entry.installed_action = None;
                entry.map_ring.clear();
                entry.periodic_due = true;
            } else {
                match inst.action.action {
                    Action::Drop | Action::Allow => {
                        let drop = inst.action.action == Action::Drop;
                        entry.update(pkt);
                        if drop {
                            self.stats.rule_drops += 1;
                        } else {
                            self.stats.forwarded += 1;
                        }
                        return PacketVerdict {
                            disposition: if drop { Disposition::Dropped } else { Disposition::Forward },
                            report: None,
                            decision: None,
                        };
                    }
                    Action::Notify => notify = true,
                }
            }
        }

        let inference = infer_packet(&bundle, &self.thresholds, entry, pkt);
        self.stats.inferences += 1;
        let disposition = match inference.decision {
            SwitchDecision::Benign => {
                self.stats.benign += 1;
                Disposition::Forward
            }
            SwitchDecision::Attack => {
                self.stats.attack += 1;
                if notify {
                    Disposition::Forward
                } else {
                    Disposition::Dropped
                }
            }
            SwitchDecision::Uncertain => {
                self.stats.uncertain += 1;
                Disposition::Forward
            }
        };

        let full = entry.map_ring.is_full();
        let reason = if !full {
            None
        } else if entry.packet_count == config.reverify_at {
            Some(ReportReason::Reverify500)
        } else if entry.periodic_due {
            Some(ReportReason::Periodic)
        } else if entry.report_sent_at.is_some() {
            None
        } else if notify {
            let seen = entry.installed_action.map(|i| i.packets_seen).unwrap_or(0);
            (config.notify_every > 0 && seen.is_multiple_of(config.notify_every)).then_some(ReportReason::Uncertain)
        } else if inference.decision == SwitchDecision::Uncertain {
            Some(ReportReason::Uncertain)
        } else {
            None
        };

        let report = reason.map(|reason| {
            entry.report_sent_at = Some(now);
            entry.packets_since_verify = 0;
            if reason == ReportReason::Periodic {
                entry.periodic_due = false;
            }
            FeatureReport {
                flow_key: key,
                packet_count: entry.packet_count.min(u32::MAX as u64) as u32,
                reason,
                sequence: entry.snapshot_sequence().expect("ring is full"),
                switch_logit: inference.logit.q,
            }
        });
        if let Some(r) = &report {
            match r.reason {
                ReportReason::Uncertain => self.stats.reports_uncertain += 1,
                ReportReason::Reverify500 => self.stats.reports_reverify += 1,
                ReportReason::Periodic => self.stats.reports_periodic += 1,
            }
        }
        match disposition {
            Disposition::Forward => self.stats.forwarded += 1,
            Disposition::Dropped => self.stats.local_drops += 1,
        }
        PacketVerdict {
            disposition,
            report,
            decision: Some(inference.decision),
        }
    }
}
