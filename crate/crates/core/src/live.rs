//! Socket deployment: a controller daemon serving many switches and a switch
//! loop that replays packets and escalates over TCP.
//!
//! The switch waits for the reply to each report before taking the next
//! packet, so decisions depend only on the input and not on socket timing.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use log::{info, warn};
use thiserror::Error;

use crate::controller::{Controller, ControllerError};
use crate::packet::PacketRecord;
use crate::switch::{Disposition, SwitchState};
use crate::wire::{encode, ActionInstall, FrameDecoder, Message, WireError};

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("controller: {0}")]
    Controller(#[from] ControllerError),
    #[error("could not reach {addr} after {attempts} attempts: {last}")]
    ConnectFailed { addr: String, attempts: u32, last: String },
}

#[derive(Debug, Clone, Copy)]
pub struct Backoff {
    pub attempts: u32,
    pub initial: Duration,
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            attempts: 5,
            initial: Duration::from_millis(100),
            max: Duration::from_secs(2),
        }
    }
}

impl Backoff {
    /// Delay before retry `n` (0-based): doubling, capped at `max`.
    pub fn delay(&self, n: u32) -> Duration {
        self.initial.saturating_mul(1u32 << n.min(16)).min(self.max)
    }
}

pub fn connect_with_backoff(addr: &str, policy: Backoff) -> Result<TcpStream, LiveError> {
    let mut last = String::from("no attempt made");
    for n in 0..policy.attempts {
        match addr.to_socket_addrs().and_then(|mut a| {
            a.next()
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))
        }) {
            Ok(sa) => match TcpStream::connect_timeout(&sa, Duration::from_secs(2)) {
                Ok(s) => {
                    s.set_nodelay(true)?;
                    return Ok(s);
                }
                Err(e) => last = e.to_string(),
            },
            Err(e) => last = e.to_string(),
        }
        warn!("connect {addr} attempt {} failed: {last}", n + 1);
        if n + 1 < policy.attempts {
            thread::sleep(policy.delay(n));
        }
    }
    Err(LiveError::ConnectFailed {
        addr: addr.to_string(),
        attempts: policy.attempts,
        last,
    })
}

pub struct ControllerServer {
    listener: TcpListener,
    controller: Arc<Controller>,
    stop: Arc<AtomicBool>,
    reports: Arc<AtomicU64>,
}

impl ControllerServer {
    pub fn bind(addr: impl ToSocketAddrs, controller: Arc<Controller>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(ControllerServer {
            listener,
            controller,
            stop: Arc::new(AtomicBool::new(false)),
            reports: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Setting the flag makes `serve` return within one poll interval.
    pub fn stop_handle(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.stop)
    }

    /// Total reports answered across all connections.
    pub fn report_counter(&self) -> Arc<AtomicU64> {
        Arc::clone(&self.reports)
    }

    /// Accept loop; one thread per switch connection.
    pub fn serve(self) -> io::Result<()> {
        let mut workers = Vec::new();
        while !self.stop.load(Ordering::Relaxed) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    info!("switch connected from {peer}");
                    stream.set_nonblocking(false)?;
                    stream.set_nodelay(true)?;
                    let ctl = Arc::clone(&self.controller);
                    let reports = Arc::clone(&self.reports);
                    let stop = Arc::clone(&self.stop);
                    workers.push(thread::spawn(move || {
                        match serve_connection(stream, &ctl, &reports, &stop) {
                            Ok(n) => info!("switch {peer} closed after {n} reports"),
                            Err(e) => warn!("switch {peer}: {e}"),
                        }
                    }));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(e),
            }
        }
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    }

    pub fn spawn(self) -> thread::JoinHandle<io::Result<()>> {
        thread::spawn(move || self.serve())
    }
}

fn serve_connection(
    mut stream: TcpStream,
    ctl: &Controller,
    reports: &AtomicU64,
    stop: &AtomicBool,
) -> Result<u64, LiveError> {
    stream.set_read_timeout(Some(Duration::from_millis(200)))?;
    let mut dec = FrameDecoder::new();
    let mut buf = [0u8; 4096];
    let mut n = 0;
    loop {
        let got = match stream.read(&mut buf) {
            Ok(0) => return Ok(n),
            Ok(k) => k,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                if stop.load(Ordering::Relaxed) {
                    return Ok(n);
                }
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let (msgs, err) = dec.feed(&buf[..got]);
        for (msg, switch_id) in msgs {
            match msg {
                Message::FeatureReport(r) => {
                    let reply = ctl.handle_report(&r)?;
                    stream.write_all(&encode(&Message::ActionInstall(reply), switch_id))?;
                    n += 1;
                    reports.fetch_add(1, Ordering::Relaxed);
                }
                other => return Err(ControllerError::UnexpectedMessage(other.msg_type()).into()),
            }
        }
        if let Some(e) = err {
            return Err(e.into());
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SwitchRunStats {
    pub packets: u64,
    pub forwarded: u64,
    pub dropped: u64,
    pub reports_sent: u64,
    pub actions_received: u64,
    pub reply_timeouts: u64,
    /// False when the run finished autonomously.
    pub connected: bool,
}

fn spawn_reader(mut stream: TcpStream) -> Receiver<Result<ActionInstall, String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut dec = FrameDecoder::new();
        let mut buf = [0u8; 4096];
        loop {
            let k = match stream.read(&mut buf) {
                Ok(0) => {
                    let _ = tx.send(Err("controller closed the connection".into()));
                    return;
                }
                Ok(k) => k,
                Err(e) => {
                    let _ = tx.send(Err(e.to_string()));
                    return;
                }
            };
            let (msgs, err) = dec.feed(&buf[..k]);
            for (m, _) in msgs {
                let item = match m {
                    Message::ActionInstall(a) => Ok(a),
                    other => Err(format!("unexpected message type {}", other.msg_type())),
                };
                if tx.send(item).is_err() {
                    return;
                }
            }
            if let Some(e) = err {
                let _ = tx.send(Err(e.to_string()));
                return;
            }
        }
    });
    rx
}

/// Replays `packets` through `switch`. With a controller link every report is
/// answered before the next packet; on any link failure the switch carries on
/// alone, still dropping what its own exit classifies as attack.
pub fn run_switch(
    switch: &mut SwitchState,
    packets: &[PacketRecord],
    link: Option<TcpStream>,
    reply_timeout: Duration,
) -> SwitchRunStats {
    let mut stats = SwitchRunStats {
        connected: link.is_some(),
        ..Default::default()
    };
    let mut conn = link.and_then(|s| match s.try_clone() {
        Ok(r) => Some((s, spawn_reader(r))),
        Err(e) => {
            warn!("cannot split controller socket: {e}");
            None
        }
    });
    if conn.is_none() {
        stats.connected = false;
    }

    for pkt in packets {
        let v = switch.process_packet(pkt, pkt.timestamp);
        stats.packets += 1;
        match v.disposition {
            Disposition::Forward => stats.forwarded += 1,
            Disposition::Dropped => stats.dropped += 1,
        }
        let (Some(report), Some((stream, rx))) = (v.report, conn.as_mut()) else { continue };
        let bytes = encode(&Message::FeatureReport(report), switch.id);
        let outcome = stream.write_all(&bytes).map_err(|e| e.to_string()).and_then(|_| {
            match rx.recv_timeout(reply_timeout) {
                Ok(r) => r.map(Some),
                Err(RecvTimeoutError::Timeout) => Ok(None),
                Err(RecvTimeoutError::Disconnected) => Err("reader stopped".into()),
            }
        });
        stats.reports_sent += 1;
        match outcome {
            Ok(Some(a)) => {
                stats.actions_received += 1;
                switch.install_action(a.flow_key, a.action, pkt.timestamp);
            }
            Ok(None) => stats.reply_timeouts += 1,
            Err(e) => {
                warn!("controller link lost ({e}); continuing autonomously");
                conn = None;
                stats.connected = false;
            }
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_then_caps() {
        let b = Backoff::default();
        assert_eq!(b.delay(0), Duration::from_millis(100));
        assert_eq!(b.delay(1), Duration::from_millis(200));
        assert_eq!(b.delay(4), Duration::from_secs(1).mul_f64(1.6));
        assert_eq!(b.delay(5), Duration::from_secs(2));
        assert_eq!(b.delay(40), Duration::from_secs(2));
    }

    #[test]
    fn refused_connection_gives_up() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap().to_string();
        drop(l);
        let policy = Backoff {
            attempts: 2,
            initial: Duration::from_millis(1),
            max: Duration::from_millis(1),
        };
        assert!(matches!(
            connect_with_backoff(&addr, policy),
            Err(LiveError::ConnectFailed { attempts: 2, .. })
        ));
    }
}
