//! TCP plumbing for the split inference pipeline: the framed wire protocol,
//! the enclave and worker services, and the client that relays between them.

pub mod client;
pub mod protocol;
pub mod service;
