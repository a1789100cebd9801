//! Simulated switches: priority-ordered exact-match flow tables, table-miss
//! to PACKET_IN, packet forwarding over the topology, and a virtual clock
//! driven by a fixed cost model.
//!
//! Time only advances when the controller is consulted, charges policy
//! processing, or installs a rule. Forwarding itself is free, so the
//! clock measures control-plane work and nothing else.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::policy::PolicyId;
use crate::selector::{MatchFields, Packet, SelectorError};
use crate::topo::{Attachment, DeviceId, MacAddr, PortRef, Topology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowId(pub u64);

impl fmt::Display for FlowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Ties a rule to the policy (if any) and flow that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cookie {
    /// `None` is the NO_POLICY marker.
    pub policy: Option<PolicyId>,
    pub flow: FlowId,
}

impl fmt::Display for Cookie {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.policy {
            Some(p) => write!(f, "{p}/{}", self.flow),
            None => write!(f, "none/{}", self.flow),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Output(u16),
    SetDstMac(MacAddr),
    Drop,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Output(p) => write!(f, "output={p}"),
            Action::SetDstMac(m) => write!(f, "set_dst_mac={m}"),
            Action::Drop => f.write_str("drop"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowRule {
    pub device: DeviceId,
    pub priority: u16,
    pub match_fields: MatchFields,
    pub actions: Vec<Action>,
    pub cookie: Cookie,
}

impl FlowRule {
    /// Either `[Drop]` or zero or more rewrites followed by one `Output`.
    pub fn has_valid_actions(&self) -> bool {
        match self.actions.split_last() {
            Some((Action::Drop, [])) => true,
            Some((Action::Output(_), rest)) => rest.iter().all(|a| matches!(a, Action::SetDstMac(_))),
            _ => false,
        }
    }

    fn output_port(&self) -> Option<u16> {
        match self.actions.last() {
            Some(Action::Output(p)) => Some(*p),
            _ => None,
        }
    }
}

impl fmt::Display for FlowRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let actions: Vec<String> = self.actions.iter().map(Action::to_string).collect();
        write!(
            f,
            "{} prio={} cookie={} match={} actions=[{}]",
            self.device,
            self.priority,
            self.cookie,
            self.match_fields,
            actions.join(",")
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableEntry {
    pub seq: u64,
    pub rule: FlowRule,
}

/// Rules ordered by descending priority, then ascending install sequence.
#[derive(Clone, Debug, Default)]
pub struct FlowTable {
    entries: Vec<TableEntry>,
}

impl FlowTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// `seq` must exceed every sequence number already in the table.
    pub fn insert(&mut self, seq: u64, rule: FlowRule) {
        let at = self.entries.partition_point(|e| e.rule.priority >= rule.priority);
        self.entries.insert(at, TableEntry { seq, rule });
        debug_assert!(self.is_ordered());
    }

    /// First entry whose match fields all agree with `pkt`.
    pub fn lookup(&self, pkt: &Packet) -> Option<&TableEntry> {
        self.entries.iter().find(|e| e.rule.match_fields.matches(pkt))
    }

    pub fn remove_where(&mut self, mut pred: impl FnMut(&TableEntry) -> bool) -> usize {
        let before = self.entries.len();
        self.entries.retain(|e| !pred(e));
        before - self.entries.len()
    }

    pub fn entries(&self) -> &[TableEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_ordered(&self) -> bool {
        self.entries.windows(2).all(|w| {
            let (a, b) = (&w[0], &w[1]);
            a.rule.priority > b.rule.priority || (a.rule.priority == b.rule.priority && a.seq < b.seq)
        })
    }
}

/// Virtual-time costs in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostConfig {
    /// One PACKET_IN round trip to the controller.
    pub ctrl_rtt_us: u64,
    /// One rule installation.
    pub rule_install_us: u64,
    /// Reading and parsing the matching policy for one flow setup.
    pub policy_parse_us: u64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            ctrl_rtt_us: 500,
            rule_install_us: 50,
            policy_parse_us: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DropReason {
    NoPolicy,
    NoRegion,
    NoPath,
    UnknownHost,
    LoopingPath,
    Loop,
    DropRule,
    TableMiss,
    MacMismatch,
    DeadPort,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropReason::NoPolicy => "no-policy",
            DropReason::NoRegion => "no-region",
            DropReason::NoPath => "no-path",
            DropReason::UnknownHost => "unknown-host",
            DropReason::LoopingPath => "looping-path",
            DropReason::Loop => "loop",
            DropReason::DropRule => "drop-rule",
            DropReason::TableMiss => "table-miss",
            DropReason::MacMismatch => "mac-mismatch",
            DropReason::DeadPort => "dead-port",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    PacketIn { device: DeviceId },
    RuleInstalled(FlowRule),
    Delivered { host: String },
    Dropped { device: DeviceId, reason: DropReason },
}

impl Event {
    pub fn is_terminal(&self) -> bool {
        matches!(self, Event::Delivered { .. } | Event::Dropped { .. })
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::PacketIn { device } => write!(f, "PACKET_IN {device}"),
            Event::RuleInstalled(rule) => write!(f, "INSTALL {rule}"),
            Event::Delivered { host } => write!(f, "DELIVERED {host}"),
            Event::Dropped { device, reason } => write!(f, "DROPPED {device} {reason}"),
        }
    }
}

/// Timestamped events, one line each: `<t_us> <event>`.
pub fn export_events(events: &[(u64, Event)]) -> String {
    events.iter().map(|(t, e)| format!("{t} {e}\n")).collect()
}

/// Everything that happened to one injected packet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<(u64, Event)>,
    pub packet_in_count: usize,
    pub rules_installed: usize,
    /// From the first PACKET_IN to the packet's terminal event; zero when
    /// the controller was never consulted.
    pub response_time_us: u64,
}

impl Trace {
    fn new(events: Vec<(u64, Event)>) -> Self {
        let packet_in_count = events
            .iter()
            .filter(|(_, e)| matches!(e, Event::PacketIn { .. }))
            .count();
        let rules_installed = events
            .iter()
            .filter(|(_, e)| matches!(e, Event::RuleInstalled(_)))
            .count();
        let first_packet_in = events
            .iter()
            .find(|(_, e)| matches!(e, Event::PacketIn { .. }))
            .map(|(t, _)| *t);
        let end = events.last().map_or(0, |(t, _)| *t);
        Self {
            response_time_us: first_packet_in.map_or(0, |t| end - t),
            events,
            packet_in_count,
            rules_installed,
        }
    }

    pub fn outcome(&self) -> Option<&Event> {
        self.events.last().map(|(_, e)| e).filter(|e| e.is_terminal())
    }

    pub fn delivered_to(&self) -> Option<&str> {
        match self.outcome() {
            Some(Event::Delivered { host }) => Some(host),
            _ => None,
        }
    }

    pub fn dropped(&self) -> Option<(&DeviceId, DropReason)> {
        match self.outcome() {
            Some(Event::Dropped { device, reason }) => Some((device, *reason)),
            _ => None,
        }
    }

    pub fn installed_rules(&self) -> impl Iterator<Item = &FlowRule> {
        self.events.iter().filter_map(|(_, e)| match e {
            Event::RuleInstalled(r) => Some(r),
            _ => None,
        })
    }

    pub fn export(&self) -> String {
        export_events(&self.events)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DataplaneError {
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("port {port} is not valid on device {device}")]
    InvalidPort { device: DeviceId, port: u16 },
    #[error("invalid action list for rule on {0}")]
    BadActions(DeviceId),
    #[error("invalid match fields for rule on {0}")]
    BadMatch(DeviceId),
    #[error("rule priority must be at least 1")]
    ZeroPriority,
    #[error("unknown host {0}")]
    UnknownHost(String),
    #[error("packet source {ip} does not belong to host {host}")]
    SourceMismatch { host: String, ip: std::net::Ipv4Addr },
    #[error(transparent)]
    Packet(#[from] SelectorError),
}

/// Controller decision after a PACKET_IN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// Rules were installed; retry the lookup.
    Installed,
    /// Drop the packet at the reporting switch.
    Refused(DropReason),
}

/// The controller side of the PACKET_IN exchange. Called synchronously
/// while the packet waits at `device`.
pub trait PacketInHandler {
    fn packet_in(&mut self, net: &mut SimNetwork, device: &DeviceId, in_port: u16, pkt: &Packet) -> Verdict;
}

#[derive(Clone, Debug)]
pub struct SimNetwork {
    topology: Arc<Topology>,
    tables: BTreeMap<DeviceId, FlowTable>,
    costs: CostConfig,
    clock_us: u64,
    next_seq: u64,
    log: Vec<(u64, Event)>,
}

impl SimNetwork {
    pub fn new(topology: Arc<Topology>, costs: CostConfig) -> Self {
        let tables = topology
            .devices()
            .iter()
            .map(|d| (d.id.clone(), FlowTable::new()))
            .collect();
        Self {
            topology,
            tables,
            costs,
            clock_us: 0,
            next_seq: 0,
            log: Vec::new(),
        }
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn costs(&self) -> &CostConfig {
        &self.costs
    }

    pub fn clock_us(&self) -> u64 {
        self.clock_us
    }

    /// Advances the virtual clock.
    pub fn charge(&mut self, us: u64) {
        self.clock_us += us;
    }

    pub fn table(&self, device: &DeviceId) -> Option<&FlowTable> {
        self.tables.get(device)
    }

    pub fn tables(&self) -> impl Iterator<Item = (&DeviceId, &FlowTable)> {
        self.tables.iter()
    }

    pub fn rule_count(&self) -> usize {
        self.tables.values().map(FlowTable::len).sum()
    }

    /// Every event since the network was created.
    pub fn log(&self) -> &[(u64, Event)] {
        &self.log
    }

    fn record(&mut self, event: Event) {
        self.log.push((self.clock_us, event));
    }

    /// Installs `rule` and returns its install sequence number.
    pub fn install_rule(&mut self, rule: FlowRule) -> Result<u64, DataplaneError> {
        let device = self
            .topology
            .device(&rule.device)
            .ok_or_else(|| DataplaneError::UnknownDevice(rule.device.clone()))?;
        if rule.priority == 0 {
            return Err(DataplaneError::ZeroPriority);
        }
        if !rule.has_valid_actions() {
            return Err(DataplaneError::BadActions(rule.device));
        }
        if !rule.match_fields.is_valid() {
            return Err(DataplaneError::BadMatch(rule.device));
        }
        if let Some(port) = rule.output_port() {
            if port == 0 || port > device.port_count {
                return Err(DataplaneError::InvalidPort {
                    device: rule.device,
                    port,
                });
            }
        }
        self.next_seq += 1;
        let seq = self.next_seq;
        self.clock_us += self.costs.rule_install_us;
        self.tables
            .get_mut(&rule.device)
            .expect("every topology device has a table")
            .insert(seq, rule.clone());
        self.record(Event::RuleInstalled(rule));
        Ok(seq)
    }

    /// Removes every rule whose cookie carries `policy` (`None` removes
    /// the controller's NO_POLICY rules).
    pub fn remove_by_cookie(&mut self, policy: Option<PolicyId>) -> usize {
        self.tables
            .values_mut()
            .map(|t| t.remove_where(|e| e.rule.cookie.policy == policy))
            .sum()
    }

    /// Removes one specific rule by install sequence number.
    pub fn remove_rule(&mut self, device: &DeviceId, seq: u64) -> bool {
        self.tables
            .get_mut(device)
            .is_some_and(|t| t.remove_where(|e| e.seq == seq) == 1)
    }

    /// Sends `pkt` from `src_host` into the network and follows it until it
    /// is delivered or dropped.
    pub fn inject_packet(
        &mut self,
        handler: &mut dyn PacketInHandler,
        src_host: &str,
        pkt: &Packet,
    ) -> Result<Trace, DataplaneError> {
        let topology = Arc::clone(&self.topology);
        let host = topology
            .host(src_host)
            .ok_or_else(|| DataplaneError::UnknownHost(src_host.to_string()))?;
        if host.ip != pkt.src_ip {
            return Err(DataplaneError::SourceMismatch {
                host: host.name.clone(),
                ip: pkt.src_ip,
            });
        }
        pkt.validate()?;

        let start = self.log.len();
        let hop_limit = 4 * topology.devices().len();
        let mut pkt = pkt.clone();
        let mut at = host.attach.clone();
        let mut hops = 0;
        let mut consulted = false;

        let terminal = loop {
            if hops > hop_limit {
                break Event::Dropped {
                    device: at.device,
                    reason: DropReason::Loop,
                };
            }
            let hit = self.tables[&at.device].lookup(&pkt).map(|e| e.rule.clone());
            let Some(rule) = hit else {
                if consulted {
                    break Event::Dropped {
                        device: at.device,
                        reason: DropReason::TableMiss,
                    };
                }
                self.record(Event::PacketIn {
                    device: at.device.clone(),
                });
                self.clock_us += self.costs.ctrl_rtt_us;
                match handler.packet_in(self, &at.device, at.port, &pkt) {
                    Verdict::Installed => {
                        consulted = true;
                        continue;
                    }
                    Verdict::Refused(reason) => {
                        break Event::Dropped {
                            device: at.device,
                            reason,
                        }
                    }
                }
            };
            consulted = false;
            hops += 1;
            let mut next = None;
            for action in &rule.actions {
                match action {
                    Action::SetDstMac(mac) => pkt.dst_mac = *mac,
                    Action::Drop => {
                        let reason = match rule.cookie.policy {
                            None => DropReason::NoPolicy,
                            Some(_) => DropReason::DropRule,
                        };
                        next = Some(Err(reason));
                    }
                    Action::Output(port) => next = Some(Ok(*port)),
                }
            }
            let port = match next.expect("validated action list ends in Output or Drop") {
                Ok(port) => port,
                Err(reason) => {
                    break Event::Dropped {
                        device: at.device,
                        reason,
                    }
                }
            };
            let out = PortRef::new(at.device.clone(), port);
            match topology.attachment(&out) {
                Some(Attachment::Link(peer)) => at = peer.clone(),
                Some(Attachment::Host(i)) => {
                    let dst = &topology.hosts()[*i];
                    if dst.mac == pkt.dst_mac {
                        break Event::Delivered { host: dst.name.clone() };
                    }
                    break Event::Dropped {
                        device: at.device,
                        reason: DropReason::MacMismatch,
                    };
                }
                None => {
                    break Event::Dropped {
                        device: at.device,
                        reason: DropReason::DeadPort,
                    }
                }
            }
        };
        self.record(terminal);
        Ok(Trace::new(self.log[start..].to_vec()))
    }
}
