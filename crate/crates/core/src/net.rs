//! UDP transport for the OSC stream: the engine's listener and the
//! simulator's paced sender.

use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::Sender;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crate::engine::Input;
use crate::event::{Source, Timestamp};
use crate::osc::{decode_packet, encode_message, packet_to_events, TimeTag, TimeTagBase};
use crate::scheduler::{Clock, RealClock};
use crate::sim::TimedMessage;

/// Seconds from the NTP epoch (1900) to the Unix epoch.
const NTP_UNIX_OFFSET_S: u64 = 2_208_988_800;
const MAX_DATAGRAM: usize = 65_536;
const POLL_INTERVAL: Duration = Duration::from_millis(50);

/// The current wall-clock time as an NTP timetag.
pub fn ntp_now() -> TimeTag {
    let d = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    TimeTag::from_micros((d.as_secs() + NTP_UNIX_OFFSET_S) * 1_000_000 + d.subsec_micros() as u64)
}

#[derive(Debug, Default)]
pub struct ListenerStats {
    pub packets: AtomicU64,
    pub events: AtomicU64,
    pub malformed: AtomicU64,
    pub rejected: AtomicU64,
}

/// Receives OSC datagrams, stamps them with the engine clock and forwards
/// the decoded events. Bad packets are counted and skipped.
pub struct Listener {
    handle: Option<JoinHandle<()>>,
    stop: Arc<AtomicBool>,
    pub stats: Arc<ListenerStats>,
    pub local_addr: SocketAddr,
}

impl Listener {
    /// `socket` is bound by the caller so bind errors surface before any
    /// thread starts.
    pub fn spawn(socket: UdpSocket, clock: RealClock, base: TimeTagBase, tx: Sender<Input>) -> io::Result<Self> {
        socket.set_read_timeout(Some(POLL_INTERVAL))?;
        let local_addr = socket.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stats = Arc::new(ListenerStats::default());
        let (flag, st) = (stop.clone(), stats.clone());
        let handle = std::thread::Builder::new()
            .name("osc-listener".into())
            .spawn(move || listen(socket, clock, base, tx, flag, st))?;
        Ok(Listener { handle: Some(handle), stop, stats, local_addr })
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        self.halt();
    }
}

fn listen(
    socket: UdpSocket,
    clock: RealClock,
    base: TimeTagBase,
    tx: Sender<Input>,
    stop: Arc<AtomicBool>,
    stats: Arc<ListenerStats>,
) {
    let mut buf = vec![0u8; MAX_DATAGRAM];
    while !stop.load(Ordering::Relaxed) {
        let n = match socket.recv_from(&mut buf) {
            Ok((n, _)) => n,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(e) => {
                tracing::warn!(error = %e, "udp receive failed");
                continue;
            }
        };
        let arrival = clock.now();
        stats.packets.fetch_add(1, Ordering::Relaxed);
        let packet = match decode_packet(&buf[..n]) {
            Ok(p) => p,
            Err(e) => {
                stats.malformed.fetch_add(1, Ordering::Relaxed);
                tracing::debug!(error = %e, "malformed osc packet");
                continue;
            }
        };
        for res in packet_to_events(&packet, arrival, &base, Source::Live) {
            match res {
                Ok(e) => {
                    stats.events.fetch_add(1, Ordering::Relaxed);
                    if tx.send(Input::Event(e)).is_err() {
                        return;
                    }
                }
                Err(e) => {
                    stats.rejected.fetch_add(1, Ordering::Relaxed);
                    tracing::debug!(error = %e, "osc message outside the schema");
                }
            }
        }
    }
}

/// Sends each message when `clock` reaches its time. Returns the number
/// sent; stops early when `stop` is raised.
pub fn send_paced(
    socket: &UdpSocket,
    target: SocketAddr,
    stream: &[TimedMessage],
    clock: &dyn Clock,
    stop: &AtomicBool,
) -> io::Result<usize> {
    let mut sent = 0;
    for m in stream {
        loop {
            if stop.load(Ordering::Relaxed) {
                return Ok(sent);
            }
            let now = clock.now();
            if now >= m.t {
                break;
            }
            let wait = (m.t.0 - now.0).min(POLL_INTERVAL.as_micros() as u64);
            std::thread::sleep(Duration::from_micros(wait));
        }
        let bytes = encode_message(&m.msg).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        socket.send_to(&bytes, target)?;
        sent += 1;
    }
    Ok(sent)
}

/// Engine time of the last message in `stream`.
pub fn stream_end(stream: &[TimedMessage]) -> Timestamp {
    stream.last().map(|m| m.t).unwrap_or_default()
}
