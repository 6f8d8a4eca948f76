use std::net::Ipv4Addr;

use proptest::prelude::*;

use splitguard::packet::{encode_frame, LinkType};
use splitguard::pcap::{read_trace_all, write_trace};
use splitguard::{canonical_flow_key, parse_packet, PacketRecord, TcpFlags};

fn endpoint() -> impl Strategy<Value = (Ipv4Addr, u16)> {
    (any::<u32>(), any::<u16>()).prop_map(|(ip, port)| (Ipv4Addr::from(ip), port))
}

fn record() -> impl Strategy<Value = PacketRecord> {
    (
        0u32..1_000_000,
        endpoint(),
        endpoint(),
        any::<bool>(),
        0u16..1460,
        any::<u8>(),
        any::<u16>(),
    )
        .prop_map(|(us, s, d, tcp, len, flags, win)| {
            let t = us as f64 * 1e-6;
            if tcp {
                PacketRecord::tcp(t, s, d, len, TcpFlags::from_bits(flags), win)
            } else {
                PacketRecord::udp(t, s, d, len)
            }
        })
}

proptest! {
    #[test]
    fn frame_round_trip(r in record()) {
        let frame = encode_frame(&r);
        prop_assert_eq!(frame.len(), r.frame_len());
        let back = parse_packet(&frame, LinkType::Ethernet).expect("parses");
        // the timestamp comes from the capture record, not the frame
        prop_assert_eq!(back, PacketRecord { timestamp: 0.0, ..r });
    }

    #[test]
    fn parser_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let _ = parse_packet(&bytes, LinkType::Ethernet);
    }

    #[test]
    fn truncated_frames_are_rejected(r in record(), cut in 1usize..40) {
        let frame = encode_frame(&r);
        let keep = frame.len().saturating_sub(r.payload_len as usize + cut);
        prop_assert!(parse_packet(&frame[..keep], LinkType::Ethernet).is_none());
    }

    #[test]
    fn key_is_direction_free(r in record()) {
        prop_assert_eq!(canonical_flow_key(&r), canonical_flow_key(&r.reversed()));
    }

    #[test]
    fn flag_bits_round_trip(bits in any::<u8>()) {
        prop_assert_eq!(TcpFlags::from_bits(bits).bits(), bits);
    }
}

#[test]
fn pcap_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.pcap");
    let a = (Ipv4Addr::new(10, 0, 0, 1), 1234);
    let b = (Ipv4Addr::new(10, 0, 0, 4), 80);
    let recs = vec![
        PacketRecord::tcp(0.5, a, b, 0, TcpFlags::SYN, 1024),
        PacketRecord::tcp(0.500_125, b, a, 0, TcpFlags { syn: true, ack: true, ..Default::default() }, 65535),
        PacketRecord::udp(1.25, a, b, 512),
    ];
    write_trace(&path, &recs).unwrap();
    let back = read_trace_all(&path).unwrap();
    assert_eq!(back.len(), recs.len());
    for (a, b) in back.iter().zip(&recs) {
        // pcap stores whole microseconds
        assert!((a.timestamp - b.timestamp).abs() < 1e-6);
        assert_eq!(PacketRecord { timestamp: 0.0, ..*a }, PacketRecord { timestamp: 0.0, ..*b });
    }
}
