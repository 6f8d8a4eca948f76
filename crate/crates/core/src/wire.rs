//! Southbound switch/controller messages. Big-endian, fixed-size fields.
//!
//! ```text
//! header (8 bytes)
//!   0..2  magic 0x4545
//!   2     version (1)
//!   3     msg_type (1 feature report, 2 action install)
//!   4..6  payload_len
//!   6..8  switch_id
//! flow key (13 bytes): ip_a u32, ip_b u32, port_a u16, port_b u16, protocol u8
//! feature report (179): key, packet_count u32, reason u8, 160 x i8 sequence, switch_logit i8
//! action install (18): key, action u8, ttl_packets u32
//! ```

use std::net::Ipv4Addr;

use thiserror::Error;

use crate::flow::{Action, FeatureMapSeq, FlowAction, MAP_CHANNELS, SEQ_LEN};
use crate::packet::FlowKey;

pub const MAGIC: u16 = 0x4545;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 8;
pub const FLOW_KEY_LEN: usize = 13;
pub const FEATURE_REPORT_LEN: usize = FLOW_KEY_LEN + 4 + 1 + SEQ_LEN * MAP_CHANNELS + 1;
pub const ACTION_INSTALL_LEN: usize = FLOW_KEY_LEN + 1 + 4;

pub const TYPE_FEATURE_REPORT: u8 = 1;
pub const TYPE_ACTION_INSTALL: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("magic: expected 0x4545, got {0:#06x}")]
    BadMagic(u16),
    #[error("version: unsupported {0}")]
    UnsupportedVersion(u8),
    #[error("msg_type: unknown {0}")]
    UnknownType(u8),
    #[error("payload_len: {got} does not match {expected} for msg_type {msg_type}")]
    LengthMismatch { msg_type: u8, expected: usize, got: usize },
    #[error("truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("reason: invalid code {0}")]
    BadReason(u8),
    #[error("action: invalid code {0}")]
    BadAction(u8),
    #[error("connection poisoned by an earlier framing error")]
    Poisoned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReportReason {
    Uncertain,
    Reverify500,
    Periodic,
}

impl ReportReason {
    pub fn code(self) -> u8 {
        match self {
            ReportReason::Uncertain => 0,
            ReportReason::Reverify500 => 1,
            ReportReason::Periodic => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ReportReason::Uncertain),
            1 => Some(ReportReason::Reverify500),
            2 => Some(ReportReason::Periodic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureReport {
    pub flow_key: FlowKey,
    pub packet_count: u32,
    pub reason: ReportReason,
    pub sequence: FeatureMapSeq,
    pub switch_logit: i8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionInstall {
    pub flow_key: FlowKey,
    pub action: FlowAction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    FeatureReport(FeatureReport),
    ActionInstall(ActionInstall),
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::FeatureReport(_) => TYPE_FEATURE_REPORT,
            Message::ActionInstall(_) => TYPE_ACTION_INSTALL,
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + payload_len(self.msg_type()).unwrap_or(0)
    }
}

impl From<FeatureReport> for Message {
    fn from(r: FeatureReport) -> Self {
        Message::FeatureReport(r)
    }
}

impl From<ActionInstall> for Message {
    fn from(a: ActionInstall) -> Self {
        Message::ActionInstall(a)
    }
}

fn payload_len(msg_type: u8) -> Option<usize> {
    match msg_type {
        TYPE_FEATURE_REPORT => Some(FEATURE_REPORT_LEN),
        TYPE_ACTION_INSTALL => Some(ACTION_INSTALL_LEN),
        _ => None,
    }
}

fn put_key(out: &mut Vec<u8>, k: &FlowKey) {
    out.extend_from_slice(&k.ip_a.octets());
    out.extend_from_slice(&k.ip_b.octets());
    out.extend_from_slice(&k.port_a.to_be_bytes());
    out.extend_from_slice(&k.port_b.to_be_bytes());
    out.push(k.protocol);
}

fn get_key(b: &[u8]) -> FlowKey {
    FlowKey {
        ip_a: Ipv4Addr::new(b[0], b[1], b[2], b[3]),
        ip_b: Ipv4Addr::new(b[4], b[5], b[6], b[7]),
        port_a: u16::from_be_bytes([b[8], b[9]]),
        port_b: u16::from_be_bytes([b[10], b[11]]),
        protocol: b[12],
    }
}

pub fn encode(msg: &Message, switch_id: u16) -> Vec<u8> {
    let mut out = Vec::with_capacity(msg.encoded_len());
    let ty = msg.msg_type();
    out.extend_from_slice(&MAGIC.to_be_bytes());
    out.push(VERSION);
    out.push(ty);
    out.extend_from_slice(&(payload_len(ty).unwrap_or(0) as u16).to_be_bytes());
    out.extend_from_slice(&switch_id.to_be_bytes());
    match msg {
        Message::FeatureReport(r) => {
            put_key(&mut out, &r.flow_key);
            out.extend_from_slice(&r.packet_count.to_be_bytes());
            out.push(r.reason.code());
            for step in r.sequence.0.iter() {
                out.extend(step.iter().map(|v| *v as u8));
            }
            out.push(r.switch_logit as u8);
        }
        Message::ActionInstall(a) => {
            put_key(&mut out, &a.flow_key);
            out.push(a.action.action.code());
            out.extend_from_slice(&a.action.ttl_packets.to_be_bytes());
        }
    }
    debug_assert_eq!(out.len(), msg.encoded_len());
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageHeader {
    pub magic: u16,
    pub version: u8,
    pub msg_type: u8,
    pub payload_len: u16,
    pub switch_id: u16,
}

/// Parses and checks the 8-byte header.
pub fn decode_header(bytes: &[u8]) -> Result<MessageHeader, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            needed: HEADER_LEN,
            have: bytes.len(),
        });
    }
    let h = MessageHeader {
        magic: u16::from_be_bytes([bytes[0], bytes[1]]),
        version: bytes[2],
        msg_type: bytes[3],
        payload_len: u16::from_be_bytes([bytes[4], bytes[5]]),
        switch_id: u16::from_be_bytes([bytes[6], bytes[7]]),
    };
    if h.magic != MAGIC {
        return Err(WireError::BadMagic(h.magic));
    }
    if h.version != VERSION {
        return Err(WireError::UnsupportedVersion(h.version));
    }
    let expected = payload_len(h.msg_type).ok_or(WireError::UnknownType(h.msg_type))?;
    if h.payload_len as usize != expected {
        return Err(WireError::LengthMismatch {
            msg_type: h.msg_type,
            expected,
            got: h.payload_len as usize,
        });
    }
    Ok(h)
}

/// Decodes exactly one message. Trailing bytes are a length mismatch.
pub fn decode(bytes: &[u8]) -> Result<(Message, u16), WireError> {
    let (msg, id, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(WireError::LengthMismatch {
            msg_type: msg.msg_type(),
            expected: used - HEADER_LEN,
            got: bytes.len() - HEADER_LEN,
        });
    }
    Ok((msg, id))
}

/// Decodes the message at the front of `bytes`, returning the bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Message, u16, usize), WireError> {
    let h = decode_header(bytes)?;
    let total = HEADER_LEN + h.payload_len as usize;
    if bytes.len() < total {
        return Err(WireError::Truncated {
            needed: total,
            have: bytes.len(),
        });
    }
    let p = &bytes[HEADER_LEN..total];
    let key = get_key(p);
    let msg = match h.msg_type {
        TYPE_FEATURE_REPORT => {
            let packet_count = u32::from_be_bytes([p[13], p[14], p[15], p[16]]);
            let reason = ReportReason::from_code(p[17]).ok_or(WireError::BadReason(p[17]))?;
            let seq = &p[18..18 + SEQ_LEN * MAP_CHANNELS];
            let sequence = FeatureMapSeq(std::array::from_fn(|t| {
                std::array::from_fn(|c| seq[t * MAP_CHANNELS + c] as i8)
            }));
            Message::FeatureReport(FeatureReport {
                flow_key: key,
                packet_count,
                reason,
                sequence,
                switch_logit: p[FEATURE_REPORT_LEN - 1] as i8,
            })
        }
        _ => {
            let action = Action::from_code(p[13]).ok_or(WireError::BadAction(p[13]))?;
            let ttl = u32::from_be_bytes([p[14], p[15], p[16], p[17]]);
            Message::ActionInstall(ActionInstall {
                flow_key: key,
                action: FlowAction::new(action, ttl),
            })
        }
    };
    Ok((msg, h.switch_id, total))
}

/// Incremental framer for one connection. Any framing error poisons it.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    poisoned: bool,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn push(&mut self, chunk: &[u8]) {
        if !self.poisoned {
            self.buf.extend_from_slice(chunk);
        }
    }

    /// Next complete message, `Ok(None)` if more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<(Message, u16)>, WireError> {
        if self.poisoned {
            return Err(WireError::Poisoned);
        }
        // a partial header can still be rejected early on its fixed fields
        let check = match decode_header(&self.buf) {
            Err(WireError::Truncated { .. }) => self.check_partial_header(),
            other => other.map(|_| ()),
        };
        if let Err(e) = check {
            self.poisoned = true;
            self.buf.clear();
            return Err(e);
        }
        if self.buf.len() < HEADER_LEN {
            return Ok(None);
        }
        match decode_prefix(&self.buf) {
            Ok((msg, id, used)) => {
                self.buf.drain(..used);
                Ok(Some((msg, id)))
            }
            Err(WireError::Truncated { .. }) => Ok(None),
            Err(e) => {
                self.poisoned = true;
                self.buf.clear();
                Err(e)
            }
        }
    }

    fn check_partial_header(&self) -> Result<(), WireError> {
        let b = &self.buf;
        let magic = MAGIC.to_be_bytes();
        for (i, m) in magic.iter().enumerate() {
            if b.len() > i && b[i] != *m {
                let got = if b.len() >= 2 {
                    u16::from_be_bytes([b[0], b[1]])
                } else {
                    (b[0] as u16) << 8
                };
                return Err(WireError::BadMagic(got));
            }
        }
        if b.len() > 2 && b[2] != VERSION {
            return Err(WireError::UnsupportedVersion(b[2]));
        }
        if b.len() > 3 && payload_len(b[3]).is_none() {
            return Err(WireError::UnknownType(b[3]));
        }
        Ok(())
    }

    /// Feeds `chunk` and drains every complete message. Messages decoded
    /// before a framing error are still returned.
    pub fn feed(&mut self, chunk: &[u8]) -> (Vec<(Message, u16)>, Option<WireError>) {
        self.push(chunk);
        let mut out = Vec::new();
        loop {
            match self.next_message() {
                Ok(Some(m)) => out.push(m),
                Ok(None) => return (out, None),
                Err(e) => return (out, Some(e)),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::PROTO_TCP;

    fn key() -> FlowKey {
        FlowKey::new(
            (Ipv4Addr::new(10, 0, 0, 2), 80),
            (Ipv4Addr::new(10, 0, 0, 1), 1234),
            PROTO_TCP,
        )
    }

    fn report() -> FeatureReport {
        FeatureReport {
            flow_key: key(),
            packet_count: 500,
            reason: ReportReason::Reverify500,
            sequence: FeatureMapSeq(std::array::from_fn(|t| std::array::from_fn(|c| ((t * 16 + c) as i32 - 80) as i8))),
            switch_logit: -3,
        }
    }

    #[test]
    fn action_install_layout() {
        let m = Message::ActionInstall(ActionInstall {
            flow_key: key(),
            action: FlowAction::permanent(Action::Allow),
        });
        let b = encode(&m, 7);
        assert_eq!(b.len(), 26);
        assert_eq!(&b[..8], &[0x45, 0x45, 1, 2, 0, 18, 0, 7]);
        assert_eq!(&b[8..12], &[10, 0, 0, 1]);
        assert_eq!(&b[16..18], &1234u16.to_be_bytes());
        assert_eq!(decode(&b).unwrap(), (m, 7));
    }

    #[test]
    fn feature_report_layout() {
        let m = Message::FeatureReport(report());
        let b = encode(&m, 1);
        assert_eq!(b.len(), 187);
        assert_eq!(&b[21..25], &500u32.to_be_bytes());
        assert_eq!(b[25], 1);
        assert_eq!(b[26] as i8, -80);
        // channel-major within a step: step 1 channel 0 follows step 0 channel 15
        assert_eq!(b[26 + 16] as i8, 16 - 80);
        assert_eq!(b[186] as i8, -3);
        assert_eq!(decode(&b).unwrap(), (m, 1));
    }

    #[test]
    fn header_errors() {
        let mut b = encode(&Message::FeatureReport(report()), 1);
        assert_eq!(decode(&b[..100]), Err(WireError::Truncated { needed: 187, have: 100 }));
        b[0] = 0;
        b[1] = 0;
        assert_eq!(decode(&b), Err(WireError::BadMagic(0)));
        let mut b = encode(&Message::FeatureReport(report()), 1);
        b[2] = 9;
        assert_eq!(decode(&b), Err(WireError::UnsupportedVersion(9)));
        b[2] = 1;
        b[3] = 5;
        assert_eq!(decode(&b), Err(WireError::UnknownType(5)));
        b[3] = 1;
        b[5] = 100;
        assert!(matches!(decode(&b), Err(WireError::LengthMismatch { .. })));
    }

    #[test]
    fn framing_poisons_on_corruption() {
        let a = encode(&Message::FeatureReport(report()), 1);
        let mut d = FrameDecoder::new();
        let mut stream = a.clone();
        stream.extend_from_slice(&a);
        stream.extend_from_slice(&[0xde, 0xad]);
        let (msgs, err) = d.feed(&stream);
        assert_eq!(msgs.len(), 2);
        assert!(matches!(err, Some(WireError::BadMagic(_))));
        assert!(d.is_poisoned());
        assert_eq!(d.next_message(), Err(WireError::Poisoned));
    }

    #[test]
    fn framing_emits_in_order_before_error() {
        let a = encode(&Message::FeatureReport(report()), 1);
        let mut d = FrameDecoder::new();
        d.push(&a);
        d.push(&a[..50]);
        assert!(d.next_message().unwrap().is_some());
        assert!(d.next_message().unwrap().is_none());
        d.push(&a[50..]);
        assert!(d.next_message().unwrap().is_some());
        assert_eq!(d.buffered(), 0);
    }
}
