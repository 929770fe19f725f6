//! Controller service for pipeline modules: registration, status, wiring,
//! and an HTTP/JSON control API.

pub mod client;
pub mod registry;
pub mod server;

pub use client::ControlClient;
pub use registry::{Link, ModuleSummary, Registry, RegistryError, Topology};
pub use server::{router, Sentinel, SentinelHandle, Shared, WireRequest, WireResponse};
