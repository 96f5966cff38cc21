//! TCP transport: one reader thread per inbound connection, one writer thread
//! per outbound endpoint.

use std::collections::HashMap;
use std::io::{BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread;
use std::time::Duration;

use airchain_core::crypto::KeyPair;
use airchain_core::network::frame::{encode_frame, read_frame, Envelope, FrameError};
use airchain_core::consensus::NodeId;
use airchain_core::network::Message;
use tracing::{debug, warn};

const CONNECT_TIMEOUT: Duration = Duration::from_millis(500);

/// Accepts connections on `listener` and passes every opened envelope to
/// `deliver`. Frames that fail to decode or verify close the connection.
pub fn serve<F>(listener: TcpListener, deliver: F)
where
    F: Fn(NodeId, Message) -> bool + Send + Clone + 'static,
{
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let deliver = deliver.clone();
            thread::spawn(move || read_loop(stream, deliver));
        }
    });
}

fn read_loop<F: Fn(NodeId, Message) -> bool>(stream: TcpStream, deliver: F) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    let mut reader = BufReader::new(stream);
    loop {
        let envelope = match read_frame(&mut reader) {
            Ok(e) => e,
            Err(FrameError::Io(_)) => return,
            Err(e) => {
                warn!(%peer, error = %e, "dropping connection");
                return;
            }
        };
        match envelope.open() {
            Ok(msg) => {
                if !deliver(envelope.sender, msg) {
                    return;
                }
            }
            Err(e) => {
                warn!(%peer, error = %e, "dropping connection");
                return;
            }
        }
    }
}

/// Outbound side. Messages to an endpoint that cannot be reached are dropped;
/// consensus and gossip tolerate loss.
pub struct Outbox {
    key: KeyPair,
    writers: HashMap<String, Sender<Vec<u8>>>,
}

impl Outbox {
    pub fn new(key: KeyPair) -> Self {
        Self { key, writers: HashMap::new() }
    }

    pub fn send(&mut self, endpoint: &str, msg: &Message) {
        let frame = match Envelope::seal(msg, &self.key).and_then(|e| encode_frame(&e)) {
            Ok(f) => f,
            Err(e) => {
                warn!(error = %e, kind = msg.kind(), "cannot frame message");
                return;
            }
        };
        let tx = self.writers.entry(endpoint.to_string()).or_insert_with(|| spawn_writer(endpoint.to_string()));
        if tx.send(frame).is_err() {
            self.writers.remove(endpoint);
        }
    }
}

fn spawn_writer(endpoint: String) -> Sender<Vec<u8>> {
    let (tx, rx): (Sender<Vec<u8>>, Receiver<Vec<u8>>) = mpsc::channel();
    thread::spawn(move || {
        let mut stream: Option<TcpStream> = None;
        for frame in rx {
            if stream.is_none() {
                stream = connect(&endpoint);
            }
            let Some(s) = stream.as_mut() else {
                debug!(%endpoint, "unreachable, message dropped");
                continue;
            };
            if s.write_all(&frame).is_err() {
                // one retry on a fresh connection; the old one may have gone stale
                stream = connect(&endpoint);
                if let Some(s) = stream.as_mut() {
                    if s.write_all(&frame).is_err() {
                        stream = None;
                    }
                }
            }
        }
    });
    tx
}

fn connect(endpoint: &str) -> Option<TcpStream> {
    let addr = endpoint.to_socket_addrs().ok()?.next()?;
    let s = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT).ok()?;
    s.set_nodelay(true).ok()?;
    Some(s)
}
