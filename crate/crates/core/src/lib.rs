//! Policy-driven SDN programming over a simulated multi-region network.
//!
//! Administrators describe *what* traffic may flow between regions as
//! application-level policies; the controller turns those policies into
//! per-switch flow rules the first time a flow reaches it, and installs the
//! whole end-to-end path in one step. A plain per-switch reactive forwarder
//! is included as a baseline for comparison.
//!
//! Module map:
//!
//! * [`topo`] - devices, links, hosts, regions and the prefix-to-region map.
//! * [`selector`] - traffic profiles, packet classification and match fields.
//! * [`policy`] - the policy language and the runtime policy store.
//! * [`pathsel`] - pluggable path selection with device waypoints.
//! * [`dataplane`] - simulated switches, flow tables and a virtual clock.
//! * [`controller`] - packet processors, rule compilation and the baseline.
//! * [`harness`] - operator CLI and the response-time benchmark.

pub mod controller;
pub mod dataplane;
pub mod harness;
pub mod pathsel;
pub mod policy;
pub mod selector;
pub mod topo;

pub use controller::{Controller, ControllerMode, SetupOutcome};
pub use dataplane::{Action, CostConfig, FlowRule, SimNetwork, Trace};
pub use policy::{NetworkFunction, Policy, PolicyId, PolicyStore};
pub use selector::{MatchFields, Packet, ProfileRegistry, TrafficProfile};
pub use topo::{DeviceId, MacAddr, Topology};
