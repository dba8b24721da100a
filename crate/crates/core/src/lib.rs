//! Allocation-only building blocks for the notelab IoT-edge-cloud testbed.
//!
//! Everything in this crate is pure: wire codecs for MQTT 3.1.1, CoAP and
//! HTTP/1.1, the northbound frame and commit-log record formats, the
//! telemetry data model, latency statistics, and the deterministic decision
//! streams used to inject link faults. Sockets, files and tasks live in the
//! `notelab` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod actuator;
pub mod coap;
pub mod frame;
pub mod generator;
pub mod http;
pub mod link;
pub mod model;
pub mod mqtt;
pub mod record;
pub mod stats;
pub mod topic;

pub use model::{DeviceId, Envelope, LatencySample, ReadingKind, SensorReading, SizeClass};
pub use stats::{compute_stats, FiveNumber, LatencyStats};
pub use topic::{Topic, TopicFilter};
