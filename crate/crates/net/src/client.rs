//! Client-side plumbing: the relay that shuttles frames between the enclave
//! and the worker, and teacher oracles that answer logits over the wire.
//!
//! The two services never talk to each other; the client carries every
//! envelope. An authorized inference is four legs: token ids to the enclave,
//! the encrypted rows to the worker, the embedding reply back to the
//! enclave, and the authorized activation to the worker, whose logits
//! arrive in plain vocabulary order.

use crate::protocol::{read_envelope, write_envelope, DecodeError, Envelope, ErrorCode, Message};
use distillock_core::kd::TeacherOracle;
use distillock_core::tensor::Matrix;
use distillock_core::CoreError;
use std::fmt;
use std::io;
use std::net::{TcpStream, ToSocketAddrs};

// ============================================================
// Errors
// ============================================================

#[derive(Debug)]
pub enum NetError {
    Io(io::Error),
    Decode(DecodeError),
    /// The peer answered with an error frame.
    Remote {
        code: ErrorCode,
        message: String,
    },
    /// The peer answered with a frame type that makes no sense here.
    UnexpectedReply {
        expected: &'static str,
        got: String,
    },
    /// Enclave and worker serve different artifacts.
    PairingMismatch {
        enclave: u64,
        worker: u64,
    },
    /// The peer closed the connection instead of replying.
    ConnectionClosed,
}

impl fmt::Display for NetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetError::Io(e) => write!(f, "io error: {}", e),
            NetError::Decode(e) => write!(f, "protocol error: {}", e),
            NetError::Remote { code, message } => {
                write!(f, "remote error ({:?}): {}", code, message)
            }
            NetError::UnexpectedReply { expected, got } => {
                write!(f, "expected a {} reply, got {}", expected, got)
            }
            NetError::PairingMismatch { enclave, worker } => write!(
                f,
                "enclave serves {:#018x} but worker serves {:#018x}",
                enclave, worker
            ),
            NetError::ConnectionClosed => write!(f, "peer closed the connection"),
        }
    }
}

impl std::error::Error for NetError {}

impl From<io::Error> for NetError {
    fn from(e: io::Error) -> Self {
        NetError::Io(e)
    }
}

impl From<DecodeError> for NetError {
    fn from(e: DecodeError) -> Self {
        NetError::Decode(e)
    }
}

impl From<NetError> for CoreError {
    fn from(e: NetError) -> Self {
        CoreError::Io(io::Error::other(e.to_string()))
    }
}

// ============================================================
// Single connection
// ============================================================

pub struct Connection {
    stream: TcpStream,
}

impl Connection {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, NetError> {
        Ok(Connection {
            stream: TcpStream::connect(addr)?,
        })
    }

    /// One request, one reply. An error frame from the peer becomes
    /// [`NetError::Remote`].
    pub fn call(&mut self, session_id: u64, message: Message) -> Result<Envelope, NetError> {
        write_envelope(
            &mut self.stream,
            &Envelope {
                session_id,
                message,
            },
        )?;
        match read_envelope(&mut self.stream)? {
            None => Err(NetError::ConnectionClosed),
            Some(Envelope {
                message: Message::Error { code, message },
                ..
            }) => Err(NetError::Remote { code, message }),
            Some(env) => Ok(env),
        }
    }

    /// Exchange hellos; returns the peer's fingerprint. Pass the fingerprint
    /// the peer must match, or 0 to accept whatever it serves.
    pub fn hello(&mut self, expect: u64) -> Result<u64, NetError> {
        let reply = self.call(
            0,
            Message::Hello {
                fingerprint: expect,
            },
        )?;
        match reply.message {
            Message::Hello { fingerprint } => Ok(fingerprint),
            other => Err(NetError::UnexpectedReply {
                expected: "hello",
                got: other.type_name().to_string(),
            }),
        }
    }
}

// ============================================================
// Worker-only client (unauthorized path)
// ============================================================

pub struct WorkerClient {
    conn: Connection,
    pub fingerprint: u64,
}

impl WorkerClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, NetError> {
        let mut conn = Connection::connect(addr)?;
        let fingerprint = conn.hello(0)?;
        Ok(WorkerClient { conn, fingerprint })
    }

    /// Drive the shuffled weights directly with plain token ids.
    pub fn infer(&mut self, ids: &[u32]) -> Result<Matrix, NetError> {
        let reply = self.conn.call(0, Message::TokenIds(ids.to_vec()))?;
        match reply.message {
            Message::Logits(l) => Ok(l),
            other => Err(NetError::UnexpectedReply {
                expected: "logits",
                got: other.type_name().to_string(),
            }),
        }
    }

    pub fn infer_last(&mut self, ids: &[u32]) -> Result<Vec<f64>, NetError> {
        let logits = self.infer(ids)?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }
}

// ============================================================
// Relay (authorized path)
// ============================================================

pub struct Relay {
    enclave: Connection,
    worker: Connection,
    next_session: u64,
    pub fingerprint: u64,
}

impl Relay {
    /// Connect to both services, verify they serve the same artifact, and
    /// start numbering sessions at `first_session`. Session ids are chosen
    /// by the client; concurrent relays against one enclave must carve out
    /// disjoint ranges.
    pub fn connect(
        enclave_addr: impl ToSocketAddrs,
        worker_addr: impl ToSocketAddrs,
        first_session: u64,
    ) -> Result<Self, NetError> {
        let mut enclave = Connection::connect(enclave_addr)?;
        let mut worker = Connection::connect(worker_addr)?;
        let efp = enclave.hello(0)?;
        let wfp = worker.hello(efp)?;
        if efp != wfp {
            return Err(NetError::PairingMismatch {
                enclave: efp,
                worker: wfp,
            });
        }
        Ok(Relay {
            enclave,
            worker,
            next_session: first_session,
            fingerprint: efp,
        })
    }

    pub fn next_session(&self) -> u64 {
        self.next_session
    }

    /// Full authorized round trip for one sequence; returns logits for every
    /// position.
    pub fn authorized_infer(&mut self, ids: &[u32]) -> Result<Matrix, NetError> {
        let sid = self.next_session;
        self.next_session += 1;

        let enc = self.enclave.call(sid, Message::TokenIds(ids.to_vec()))?;
        let rows = match enc.message {
            Message::EncryptedInput(rows) => rows,
            other => {
                return Err(NetError::UnexpectedReply {
                    expected: "encrypted-input",
                    got: other.type_name().to_string(),
                })
            }
        };

        let emb = self.worker.call(sid, Message::EncryptedInput(rows))?;
        let reply = match emb.message {
            Message::EmbedReply(m) => m,
            other => {
                return Err(NetError::UnexpectedReply {
                    expected: "embed-reply",
                    got: other.type_name().to_string(),
                })
            }
        };

        let auth = self.enclave.call(sid, Message::EmbedReply(reply))?;
        let x = match auth.message {
            Message::AuthorizedInput(x) => x,
            other => {
                return Err(NetError::UnexpectedReply {
                    expected: "authorized-input",
                    got: other.type_name().to_string(),
                })
            }
        };

        let fin = self.worker.call(sid, Message::AuthorizedInput(x))?;
        match fin.message {
            Message::Logits(l) => Ok(l),
            other => Err(NetError::UnexpectedReply {
                expected: "logits",
                got: other.type_name().to_string(),
            }),
        }
    }

    pub fn authorized_infer_last(&mut self, ids: &[u32]) -> Result<Vec<f64>, NetError> {
        let logits = self.authorized_infer(ids)?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }
}

// ============================================================
// Teacher oracles over the wire
// ============================================================

/// Teacher that answers through the full authorized pipeline.
pub struct PipelineTeacher<'a>(pub &'a mut Relay);

impl TeacherOracle for PipelineTeacher<'_> {
    fn last_logits(&mut self, ids: &[u32]) -> distillock_core::Result<Vec<f64>> {
        self.0.authorized_infer_last(ids).map_err(CoreError::from)
    }
}

/// Teacher that answers from the worker alone, with no authorization.
pub struct UnauthorizedRemoteTeacher<'a>(pub &'a mut WorkerClient);

impl TeacherOracle for UnauthorizedRemoteTeacher<'_> {
    fn last_logits(&mut self, ids: &[u32]) -> distillock_core::Result<Vec<f64>> {
        self.0.infer_last(ids).map_err(CoreError::from)
    }
}
