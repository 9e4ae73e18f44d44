//! Edge function runtime that suspends blocked instances and wakes them on
//! timers or inbound packets.

pub mod config;
pub mod harness;
pub mod lifecycle;
pub mod migration;
pub mod node;
pub mod policy;
pub mod proxy;
pub mod registry;
pub mod sim;
pub mod store;
pub mod types;
pub mod util;

pub use types::{ArchiveId, Endpoint, FunctionId, InstanceId, NodeId, SimTime, SocketId};
