//! Packet records, frame parsing and canonical bidirectional flow keys.
//!
//! Only IPv4 TCP/UDP over Ethernet is understood. Anything else parses to
//! `None` and is skipped by the pipeline.

use std::fmt;
use std::net::Ipv4Addr;

pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

pub const ETHERNET_HEADER_LEN: usize = 14;
const ETHERTYPE_IPV4: u16 = 0x0800;
const UDP_HEADER_LEN: u16 = 8;
const TCP_MIN_HEADER_LEN: u16 = 20;
const IPV4_MIN_HEADER_LEN: u16 = 20;

/// Layer-2 encapsulation of a captured frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkType {
    Ethernet,
}

impl LinkType {
    /// Maps a pcap `network` header value to a supported link type.
    pub fn from_pcap(linktype: u32) -> Option<Self> {
        match linktype {
            1 => Some(LinkType::Ethernet),
            _ => None,
        }
    }

    pub fn pcap_code(self) -> u32 {
        match self {
            LinkType::Ethernet => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TcpFlags {
    pub fin: bool,
    pub syn: bool,
    pub rst: bool,
    pub psh: bool,
    pub ack: bool,
    pub urg: bool,
    pub ece: bool,
    pub cwr: bool,
}

impl TcpFlags {
    pub const SYN: TcpFlags = TcpFlags {
        fin: false,
        syn: true,
        rst: false,
        psh: false,
        ack: false,
        urg: false,
        ece: false,
        cwr: false,
    };
    pub const ACK: TcpFlags = TcpFlags {
        fin: false,
        syn: false,
        rst: false,
        psh: false,
        ack: true,
        urg: false,
        ece: false,
        cwr: false,
    };

    /// Decodes the TCP flags byte (offset 13 of the TCP header).
    pub fn from_bits(bits: u8) -> Self {
        TcpFlags {
            fin: bits & 0x01 != 0,
            syn: bits & 0x02 != 0,
            rst: bits & 0x04 != 0,
            psh: bits & 0x08 != 0,
            ack: bits & 0x10 != 0,
            urg: bits & 0x20 != 0,
            ece: bits & 0x40 != 0,
            cwr: bits & 0x80 != 0,
        }
    }

    pub fn bits(&self) -> u8 {
        (self.fin as u8)
            | (self.syn as u8) << 1
            | (self.rst as u8) << 2
            | (self.psh as u8) << 3
            | (self.ack as u8) << 4
            | (self.urg as u8) << 5
            | (self.ece as u8) << 6
            | (self.cwr as u8) << 7
    }

    /// Flags in feature order: FIN, SYN, RST, PSH, ACK, URG, ECE, CWR.
    pub fn as_array(&self) -> [bool; 8] {
        [
            self.fin, self.syn, self.rst, self.psh, self.ack, self.urg, self.ece, self.cwr,
        ]
    }

    pub fn with_psh(mut self) -> Self {
        self.psh = true;
        self
    }
}

/// One parsed IPv4 TCP or UDP packet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketRecord {
    /// Capture time in seconds.
    pub timestamp: f64,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
    /// IP total length.
    pub total_len: u16,
    /// IP header plus transport header.
    pub header_len: u16,
    pub payload_len: u16,
    pub tcp_flags: TcpFlags,
    pub tcp_window: u16,
}

impl PacketRecord {
    /// A TCP packet with a 20-byte IP header and 20-byte TCP header.
    pub fn tcp(
        timestamp: f64,
        src: (Ipv4Addr, u16),
        dst: (Ipv4Addr, u16),
        payload_len: u16,
        flags: TcpFlags,
        window: u16,
    ) -> Self {
        let header_len = IPV4_MIN_HEADER_LEN + TCP_MIN_HEADER_LEN;
        PacketRecord {
            timestamp,
            src_ip: src.0,
            dst_ip: dst.0,
            src_port: src.1,
            dst_port: dst.1,
            protocol: PROTO_TCP,
            total_len: header_len + payload_len,
            header_len,
            payload_len,
            tcp_flags: flags,
            tcp_window: window,
        }
    }

    pub fn udp(timestamp: f64, src: (Ipv4Addr, u16), dst: (Ipv4Addr, u16), payload_len: u16) -> Self {
        let header_len = IPV4_MIN_HEADER_LEN + UDP_HEADER_LEN;
        PacketRecord {
            timestamp,
            src_ip: src.0,
            dst_ip: dst.0,
            src_port: src.1,
            dst_port: dst.1,
            protocol: PROTO_UDP,
            total_len: header_len + payload_len,
            header_len,
            payload_len,
            tcp_flags: TcpFlags::default(),
            tcp_window: 0,
        }
    }

    /// Same packet travelling in the opposite direction.
    pub fn reversed(&self) -> Self {
        PacketRecord {
            src_ip: self.dst_ip,
            dst_ip: self.src_ip,
            src_port: self.dst_port,
            dst_port: self.src_port,
            ..*self
        }
    }

    /// Size of the Ethernet frame carrying this packet.
    pub fn frame_len(&self) -> usize {
        ETHERNET_HEADER_LEN + self.total_len as usize
    }

    pub fn src_endpoint(&self) -> (Ipv4Addr, u16) {
        (self.src_ip, self.src_port)
    }

    pub fn dst_endpoint(&self) -> (Ipv4Addr, u16) {
        (self.dst_ip, self.dst_port)
    }

    pub fn flow_key(&self) -> FlowKey {
        canonical_flow_key(self)
    }
}

/// Direction-independent flow identity. Endpoint A is the lexicographically
/// smaller `(ip, port)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub ip_a: Ipv4Addr,
    pub port_a: u16,
    pub ip_b: Ipv4Addr,
    pub port_b: u16,
    pub protocol: u8,
}

impl FlowKey {
    pub fn new(x: (Ipv4Addr, u16), y: (Ipv4Addr, u16), protocol: u8) -> Self {
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        FlowKey {
            ip_a: a.0,
            port_a: a.1,
            ip_b: b.0,
            port_b: b.1,
            protocol,
        }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}-{}:{}/{}",
            self.ip_a, self.port_a, self.ip_b, self.port_b, self.protocol
        )
    }
}

pub fn canonical_flow_key(record: &PacketRecord) -> FlowKey {
    FlowKey::new(record.src_endpoint(), record.dst_endpoint(), record.protocol)
}

fn be16(b: &[u8], off: usize) -> u16 {
    u16::from_be_bytes([b[off], b[off + 1]])
}

/// Parses one captured frame. Returns `None` for anything that is not a
/// complete IPv4 TCP/UDP header stack. The timestamp is left at zero; pcap
/// readers fill it in.
pub fn parse_packet(frame: &[u8], link_type: LinkType) -> Option<PacketRecord> {
    let ip = match link_type {
        LinkType::Ethernet => {
            if frame.len() < ETHERNET_HEADER_LEN || be16(frame, 12) != ETHERTYPE_IPV4 {
                return None;
            }
            &frame[ETHERNET_HEADER_LEN..]
        }
    };
    if ip.len() < IPV4_MIN_HEADER_LEN as usize || ip[0] >> 4 != 4 {
        return None;
    }
    let ihl = ((ip[0] & 0x0f) as u16) * 4;
    if ihl < IPV4_MIN_HEADER_LEN || ip.len() < ihl as usize {
        return None;
    }
    let total_len = be16(ip, 2);
    // non-first fragments carry no transport header
    let frag_offset = be16(ip, 6) & 0x1fff;
    if frag_offset != 0 {
        return None;
    }
    let protocol = ip[9];
    let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
    let l4 = &ip[ihl as usize..];

    let (src_port, dst_port, l4_len, flags, window) = match protocol {
        PROTO_TCP => {
            if l4.len() < TCP_MIN_HEADER_LEN as usize {
                return None;
            }
            let data_offset = ((l4[12] >> 4) as u16) * 4;
            if data_offset < TCP_MIN_HEADER_LEN || l4.len() < data_offset as usize {
                return None;
            }
            (
                be16(l4, 0),
                be16(l4, 2),
                data_offset,
                TcpFlags::from_bits(l4[13]),
                be16(l4, 14),
            )
        }
        PROTO_UDP => {
            if l4.len() < UDP_HEADER_LEN as usize {
                return None;
            }
            (be16(l4, 0), be16(l4, 2), UDP_HEADER_LEN, TcpFlags::default(), 0)
        }
        _ => return None,
    };

    let header_len = ihl + l4_len;
    if total_len < header_len {
        return None;
    }
    Some(PacketRecord {
        timestamp: 0.0,
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        protocol,
        total_len,
        header_len,
        payload_len: total_len - header_len,
        tcp_flags: flags,
        tcp_window: window,
    })
}

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], *c.get(1).unwrap_or(&0)]) as u32)
        .sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Builds an Ethernet frame for `record` with a zero-filled payload.
///
/// TCP headers longer than 20 bytes are padded with NOP options so that
/// `header_len` survives a round trip. The record must have
/// `payload_len == total_len - header_len`.
pub fn encode_frame(record: &PacketRecord) -> Vec<u8> {
    let l4_len = record.header_len.saturating_sub(IPV4_MIN_HEADER_LEN);
    let mut frame = Vec::with_capacity(record.frame_len());
    // dst mac, src mac
    frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01]);
    frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());

    let mut ip = [0u8; 20];
    ip[0] = 0x45;
    ip[2..4].copy_from_slice(&record.total_len.to_be_bytes());
    ip[6] = 0x40; // don't fragment
    ip[8] = 64;
    ip[9] = record.protocol;
    ip[12..16].copy_from_slice(&record.src_ip.octets());
    ip[16..20].copy_from_slice(&record.dst_ip.octets());
    let csum = ipv4_checksum(&ip);
    ip[10..12].copy_from_slice(&csum.to_be_bytes());
    frame.extend_from_slice(&ip);

    let start = frame.len();
    frame.extend_from_slice(&record.src_port.to_be_bytes());
    frame.extend_from_slice(&record.dst_port.to_be_bytes());
    if record.protocol == PROTO_TCP {
        frame.extend_from_slice(&[0u8; 8]); // seq, ack
        frame.push(((l4_len / 4) as u8) << 4);
        frame.push(record.tcp_flags.bits());
        frame.extend_from_slice(&record.tcp_window.to_be_bytes());
        frame.extend_from_slice(&[0u8; 4]); // checksum, urgent pointer
        frame.resize(start + l4_len as usize, 0x01);
    } else {
        frame.extend_from_slice(&(UDP_HEADER_LEN + record.payload_len).to_be_bytes());
        frame.extend_from_slice(&[0u8; 2]);
    }
    frame.resize(ETHERNET_HEADER_LEN + record.total_len as usize, 0);
    frame
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    // Ethernet + IPv4 + TCP SYN, 54 bytes, assembled field by field.
    const SYN_FRAME: [u8; 54] = [
        // ethernet: dst, src, ethertype
        0x00, 0x11, 0x22, 0x33, 0x44, 0x55, 0x66, 0x77, 0x88, 0x99, 0xaa, 0xbb, 0x08, 0x00,
        // ipv4: ver/ihl, tos, total len 40, id, flags/frag, ttl, proto 6, csum
        0x45, 0x00, 0x00, 0x28, 0x1c, 0x46, 0x40, 0x00, 0x40, 0x06, 0x00, 0x00,
        // src 10.0.0.1, dst 10.0.0.2
        0x0a, 0x00, 0x00, 0x01, 0x0a, 0x00, 0x00, 0x02,
        // tcp: sport 1234, dport 80, seq, ack
        0x04, 0xd2, 0x00, 0x50, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x00,
        // data offset 5, flags SYN, window 65535, csum, urg
        0x50, 0x02, 0xff, 0xff, 0x00, 0x00, 0x00, 0x00,
    ];

    #[test]
    fn parses_hand_built_syn() {
        let r = parse_packet(&SYN_FRAME, LinkType::Ethernet).unwrap();
        assert_eq!(r.protocol, PROTO_TCP);
        assert!(r.tcp_flags.syn);
        assert!(!r.tcp_flags.ack);
        assert_eq!(r.src_ip, ip("10.0.0.1"));
        assert_eq!(r.dst_ip, ip("10.0.0.2"));
        assert_eq!((r.src_port, r.dst_port), (1234, 80));
        assert_eq!((r.total_len, r.header_len, r.payload_len), (40, 40, 0));
        assert_eq!(r.tcp_window, 65535);
        assert_eq!(r.frame_len(), 54);
    }

    #[test]
    fn arp_is_skipped() {
        let mut f = SYN_FRAME;
        f[12] = 0x08;
        f[13] = 0x06;
        assert!(parse_packet(&f, LinkType::Ethernet).is_none());
    }

    #[test]
    fn icmp_and_truncated_are_skipped() {
        let mut f = SYN_FRAME;
        f[23] = 1;
        assert!(parse_packet(&f, LinkType::Ethernet).is_none());
        assert!(parse_packet(&SYN_FRAME[..40], LinkType::Ethernet).is_none());
        assert!(parse_packet(&[], LinkType::Ethernet).is_none());
    }

    #[test]
    fn udp_with_payload() {
        let mut f = vec![0u8; 14];
        f[12] = 0x08;
        // total length 20 + 8 + 100 = 128
        f.extend_from_slice(&[0x45, 0, 0x00, 0x80, 0, 0, 0, 0, 64, 17, 0, 0]);
        f.extend_from_slice(&[192, 168, 1, 5, 10, 0, 0, 9]);
        f.extend_from_slice(&[0x9c, 0x40, 0x00, 0x35, 0x00, 0x6c, 0, 0]);
        f.extend_from_slice(&[0xab; 100]);
        let r = parse_packet(&f, LinkType::Ethernet).unwrap();
        assert_eq!(r.protocol, PROTO_UDP);
        assert_eq!(r.tcp_window, 0);
        assert_eq!(r.tcp_flags, TcpFlags::default());
        assert_eq!(r.header_len, 28);
        assert_eq!(r.payload_len, 100);
        assert_eq!((r.src_port, r.dst_port), (40000, 53));
    }

    #[test]
    fn flow_key_examples() {
        let fwd = PacketRecord::tcp(0.0, (ip("10.0.0.1"), 1234), (ip("10.0.0.2"), 80), 0, TcpFlags::SYN, 0);
        assert_eq!(canonical_flow_key(&fwd), canonical_flow_key(&fwd.reversed()));

        let same_ip = PacketRecord::tcp(0.0, (ip("10.0.0.1"), 5000), (ip("10.0.0.1"), 80), 0, TcpFlags::SYN, 0);
        let k = canonical_flow_key(&same_ip);
        assert_eq!((k.port_a, k.port_b), (80, 5000));

        let dns = PacketRecord::udp(0.0, (ip("192.168.1.5"), 40000), (ip("10.0.0.9"), 53), 10);
        let k = canonical_flow_key(&dns);
        assert_eq!(k.ip_a, ip("10.0.0.9"));
        assert_eq!(k.port_a, 53);
        assert_eq!(k.ip_b, ip("192.168.1.5"));
    }

    #[test]
    fn encode_matches_hand_built_frame_fields() {
        let r = parse_packet(&SYN_FRAME, LinkType::Ethernet).unwrap();
        let f = encode_frame(&r);
        assert_eq!(f.len(), 54);
        assert_eq!(&f[12..14], &[0x08, 0x00]);
        assert_eq!(&f[26..34], &SYN_FRAME[26..34]);
        assert_eq!(&f[34..38], &SYN_FRAME[34..38]);
        assert_eq!(f[47], 0x02);
        assert_eq!(ipv4_checksum(&f[14..34]), 0);
    }
}
