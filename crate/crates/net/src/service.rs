//! TCP services wrapping the enclave and the worker.
//!
//! Both services speak the framed protocol from [`crate::protocol`], one
//! request frame in, one reply frame out, connections handled on their own
//! threads. A frame that decodes to garbage but leaves the stream aligned
//! (its length prefix was honest) earns an error reply and the connection
//! lives on; a desynchronized or oversized frame closes the connection.
//!
//! A hello frame answers with the service's model fingerprint; a hello that
//! carries a nonzero fingerprint different from the service's own is
//! refused, which is how mismatched enclave/worker artifacts fail fast at
//! pairing time instead of serving garbage.

use crate::protocol::{read_envelope, write_envelope, DecodeError, Envelope, ErrorCode, Message};
use distillock_core::enclave::Enclave;
use distillock_core::worker::Worker;
use distillock_core::CoreError;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

pub fn error_code_for(e: &CoreError) -> ErrorCode {
    match e {
        CoreError::BadSessionState(_) => ErrorCode::BadState,
        CoreError::IdOutOfRange { .. } => ErrorCode::IdOutOfRange,
        CoreError::ShapeMismatch { .. } => ErrorCode::DimMismatch,
        CoreError::PadReuse(_) => ErrorCode::PadReuse,
        CoreError::FingerprintMismatch { .. } => ErrorCode::FingerprintMismatch,
        CoreError::PadExhausted => ErrorCode::PadExhausted,
        CoreError::InvalidSparseRow(_)
        | CoreError::InvalidConfig(_)
        | CoreError::InvalidPermutation(_) => ErrorCode::Malformed,
        _ => ErrorCode::Internal,
    }
}

fn core_error_reply(e: &CoreError) -> Message {
    Message::Error {
        code: error_code_for(e),
        message: e.to_string(),
    }
}

/// Reply to a hello: echo the service fingerprint, unless the peer already
/// expects a different artifact.
fn hello_reply(own: u64, peer_expects: u64) -> Message {
    if peer_expects != 0 && peer_expects != own {
        Message::Error {
            code: ErrorCode::FingerprintMismatch,
            message: format!(
                "paired artifacts disagree: peer expects {:#018x}, serving {:#018x}",
                peer_expects, own
            ),
        }
    } else {
        Message::Hello { fingerprint: own }
    }
}

fn unexpected(role: &str, msg: &Message) -> Message {
    Message::Error {
        code: ErrorCode::BadState,
        message: format!("{} cannot handle a {} frame", role, msg.type_name()),
    }
}

fn worker_reply(worker: &Worker, env: Envelope) -> Envelope {
    let message = match env.message {
        Message::Hello { fingerprint } => hello_reply(worker.fingerprint(), fingerprint),
        Message::TokenIds(ids) => match worker.forward_unauthorized(&ids) {
            Ok(logits) => Message::Logits(logits),
            Err(e) => core_error_reply(&e),
        },
        Message::EncryptedInput(rows) => match worker.embed_sparse(&rows) {
            Ok(m) => Message::EmbedReply(m),
            Err(e) => core_error_reply(&e),
        },
        Message::AuthorizedInput(x) => match worker.forward_authorized(&x) {
            Ok(logits) => Message::Logits(logits),
            Err(e) => core_error_reply(&e),
        },
        other => unexpected("worker", &other),
    };
    Envelope {
        session_id: env.session_id,
        message,
    }
}

fn enclave_reply(enclave: &Mutex<Enclave>, env: Envelope) -> Envelope {
    let message = match env.message {
        Message::Hello { fingerprint } => {
            hello_reply(enclave.lock().unwrap().fingerprint(), fingerprint)
        }
        Message::TokenIds(ids) => match enclave.lock().unwrap().authorize(env.session_id, &ids) {
            Ok(rows) => Message::EncryptedInput(rows),
            Err(e) => core_error_reply(&e),
        },
        Message::EmbedReply(reply) => {
            match enclave.lock().unwrap().finalize(env.session_id, &reply) {
                Ok(x) => Message::AuthorizedInput(x),
                Err(e) => core_error_reply(&e),
            }
        }
        other => unexpected("enclave", &other),
    };
    Envelope {
        session_id: env.session_id,
        message,
    }
}

/// Run one connection to completion: request, reply, repeat.
fn serve_connection<F>(mut stream: TcpStream, peer: SocketAddr, mut reply_to: F)
where
    F: FnMut(Envelope) -> Envelope,
{
    loop {
        match read_envelope(&mut stream) {
            Ok(None) => {
                log::debug!("{} closed cleanly", peer);
                return;
            }
            Ok(Some(env)) => {
                let reply = reply_to(env);
                if let Err(e) = write_envelope(&mut stream, &reply) {
                    log::warn!("{}: write failed: {}", peer, e);
                    return;
                }
            }
            Err(e) if e.recoverable() => {
                log::warn!("{}: rejected frame: {}", peer, e);
                let reply = Envelope {
                    session_id: 0,
                    message: Message::Error {
                        code: ErrorCode::Malformed,
                        message: e.to_string(),
                    },
                };
                if write_envelope(&mut stream, &reply).is_err() {
                    return;
                }
            }
            Err(DecodeError::Truncated) => {
                log::warn!("{}: connection dropped mid-frame", peer);
                return;
            }
            Err(e) => {
                log::warn!("{}: closing desynchronized stream: {}", peer, e);
                let reply = Envelope {
                    session_id: 0,
                    message: Message::Error {
                        code: ErrorCode::Malformed,
                        message: e.to_string(),
                    },
                };
                let _ = write_envelope(&mut stream, &reply);
                return;
            }
        }
    }
}

fn accept_loop<F>(listener: TcpListener, handler: F) -> io::Result<()>
where
    F: Fn(Envelope) -> Envelope + Send + Sync + 'static,
{
    let handler = Arc::new(handler);
    for stream in listener.incoming() {
        match stream {
            Ok(stream) => {
                let peer = stream
                    .peer_addr()
                    .unwrap_or_else(|_| "0.0.0.0:0".parse().unwrap());
                log::info!("connection from {}", peer);
                let handler = Arc::clone(&handler);
                thread::spawn(move || serve_connection(stream, peer, |env| handler(env)));
            }
            Err(e) => log::warn!("accept failed: {}", e),
        }
    }
    Ok(())
}

/// Serve a worker on `listener` until the process exits.
pub fn serve_worker(listener: TcpListener, worker: Worker) -> io::Result<()> {
    let worker = Arc::new(worker);
    accept_loop(listener, move |env| worker_reply(&worker, env))
}

/// Serve an enclave on `listener` until the process exits.
pub fn serve_enclave(listener: TcpListener, enclave: Enclave) -> io::Result<()> {
    let enclave = Arc::new(Mutex::new(enclave));
    accept_loop(listener, move |env| enclave_reply(&enclave, env))
}

/// Bind an ephemeral port and serve on a background thread. The returned
/// address accepts connections immediately; the thread runs for the rest of
/// the process. Used by tests and by in-process demos.
pub fn spawn_worker(worker: Worker) -> io::Result<SocketAddr> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    thread::spawn(move || serve_worker(listener, worker));
    Ok(addr)
}

/// See [`spawn_worker`].
pub fn spawn_enclave(enclave: Enclave) -> io::Result<SocketAddr> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    thread::spawn(move || serve_enclave(listener, enclave));
    Ok(addr)
}
