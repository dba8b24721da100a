//! Single-host IoT-edge-cloud testbed.
//!
//! Virtual devices speak MQTT, CoAP or HTTP to edge proxies; proxies
//! forward normalized records to a durable commit-log connector, whose sync
//! engine replicates them into a mock real-time cloud database. A bench
//! harness measures device-to-edge and end-to-end latency over a transport
//! shim with injectable delay and loss.

pub mod clock;
pub mod service;
pub mod shim;
pub mod mqtt;
pub mod coap;
pub mod http;
pub mod cloud;
pub mod connector;
pub mod proxy;
pub mod devices;
pub mod bench;
pub mod topology;
pub mod session;
