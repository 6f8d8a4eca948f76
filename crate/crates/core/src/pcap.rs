//! Classic libpcap capture files (microsecond resolution, Ethernet only).

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::packet::{encode_frame, parse_packet, LinkType, PacketRecord};

const MAGIC: u32 = 0xa1b2_c3d4;
const MAGIC_SWAPPED: u32 = 0xd4c3_b2a1;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
const DEFAULT_SNAPLEN: u32 = 65_535;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("bad pcap magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported link type {0}")]
    UnsupportedLinkType(u32),
    #[error("truncated record at packet {index}")]
    TruncatedRecord { index: u64 },
    #[error("pcap io: {0}")]
    Io(#[from] io::Error),
}

/// Streaming reader yielding parsed records in capture order. Frames that do
/// not parse are skipped. After the first error the iterator is exhausted.
pub struct PcapReader<R> {
    inner: R,
    swapped: bool,
    link_type: LinkType,
    index: u64,
    done: bool,
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut hdr = [0u8; GLOBAL_HEADER_LEN];
        match inner.read_exact(&mut hdr) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                let mut m = [0u8; 4];
                let n = hdr.len().min(4);
                m[..n].copy_from_slice(&hdr[..n]);
                return Err(PcapError::BadMagic(u32::from_le_bytes(m)));
            }
            Err(e) => return Err(e.into()),
        }
        let magic = u32::from_le_bytes([hdr[0], hdr[1], hdr[2], hdr[3]]);
        let swapped = match magic {
            MAGIC => false,
            MAGIC_SWAPPED => true,
            other => return Err(PcapError::BadMagic(other)),
        };
        let field = |off: usize| {
            let b = [hdr[off], hdr[off + 1], hdr[off + 2], hdr[off + 3]];
            if swapped {
                u32::from_be_bytes(b)
            } else {
                u32::from_le_bytes(b)
            }
        };
        let network = field(20);
        let link_type = LinkType::from_pcap(network).ok_or(PcapError::UnsupportedLinkType(network))?;
        Ok(PcapReader {
            inner,
            swapped,
            link_type,
            index: 0,
            done: false,
        })
    }

    fn u32_at(&self, b: &[u8], off: usize) -> u32 {
        let a = [b[off], b[off + 1], b[off + 2], b[off + 3]];
        if self.swapped {
            u32::from_be_bytes(a)
        } else {
            u32::from_le_bytes(a)
        }
    }

    /// Reads the next raw frame with its timestamp, or `None` at clean EOF.
    fn next_frame(&mut self) -> Result<Option<(f64, Vec<u8>)>, PcapError> {
        let mut rec = [0u8; RECORD_HEADER_LEN];
        let mut filled = 0;
        while filled < RECORD_HEADER_LEN {
            let n = self.inner.read(&mut rec[filled..])?;
            if n == 0 {
                if filled == 0 {
                    return Ok(None);
                }
                return Err(PcapError::TruncatedRecord { index: self.index });
            }
            filled += n;
        }
        let ts_sec = self.u32_at(&rec, 0);
        let ts_usec = self.u32_at(&rec, 4);
        let incl_len = self.u32_at(&rec, 8) as usize;
        if incl_len > 16 * DEFAULT_SNAPLEN as usize {
            return Err(PcapError::TruncatedRecord { index: self.index });
        }
        let mut data = vec![0u8; incl_len];
        self.inner.read_exact(&mut data).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => PcapError::TruncatedRecord { index: self.index },
            _ => PcapError::Io(e),
        })?;
        self.index += 1;
        Ok(Some((ts_sec as f64 + ts_usec as f64 * 1e-6, data)))
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<PacketRecord, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            match self.next_frame() {
                Ok(Some((ts, frame))) => {
                    if let Some(mut rec) = parse_packet(&frame, self.link_type) {
                        rec.timestamp = ts;
                        return Some(Ok(rec));
                    }
                }
                Ok(None) => self.done = true,
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
        None
    }
}

/// Opens a capture file for streaming.
pub fn read_trace(path: impl AsRef<Path>) -> Result<PcapReader<BufReader<File>>, PcapError> {
    PcapReader::new(BufReader::new(File::open(path)?))
}

/// Reads a whole capture, failing on the first corrupt record.
pub fn read_trace_all(path: impl AsRef<Path>) -> Result<Vec<PacketRecord>, PcapError> {
    read_trace(path)?.collect()
}

pub struct PcapWriter<W: Write> {
    out: W,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        out.write_all(&MAGIC.to_le_bytes())?;
        out.write_all(&2u16.to_le_bytes())?;
        out.write_all(&4u16.to_le_bytes())?;
        out.write_all(&0i32.to_le_bytes())?;
        out.write_all(&0u32.to_le_bytes())?;
        out.write_all(&DEFAULT_SNAPLEN.to_le_bytes())?;
        out.write_all(&LinkType::Ethernet.pcap_code().to_le_bytes())?;
        Ok(PcapWriter { out })
    }

    pub fn write_frame(&mut self, timestamp: f64, frame: &[u8]) -> io::Result<()> {
        let ts = timestamp.max(0.0);
        let mut sec = ts.floor() as u32;
        let mut usec = ((ts - ts.floor()) * 1e6).round() as u32;
        if usec >= 1_000_000 {
            sec += 1;
            usec -= 1_000_000;
        }
        self.out.write_all(&sec.to_le_bytes())?;
        self.out.write_all(&usec.to_le_bytes())?;
        self.out.write_all(&(frame.len() as u32).to_le_bytes())?;
        self.out.write_all(&(frame.len() as u32).to_le_bytes())?;
        self.out.write_all(frame)
    }

    pub fn write_record(&mut self, record: &PacketRecord) -> io::Result<()> {
        self.write_frame(record.timestamp, &encode_frame(record))
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_trace(path: impl AsRef<Path>, records: &[PacketRecord]) -> io::Result<()> {
    let mut w = PcapWriter::new(BufWriter::new(File::create(path)?))?;
    for r in records {
        w.write_record(r)?;
    }
    w.finish()?;
    Ok(())
}
