//! Session service and command-line front end for `serf-core`.
//!
//! [`session`] holds event-sourced editing sessions, [`service`] exposes
//! them over HTTP, [`backend`] provides the 2D segmenters and [`cli`] the
//! `serf` command.

pub mod backend;
pub mod cli;
pub mod service;
pub mod session;

pub use backend::{RemoteSegmenter, SegmenterSpec};
pub use service::{router, serve, AppState, ServiceConfig};
pub use session::{Session, SessionError};
