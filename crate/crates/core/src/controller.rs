//! The controller: per-function packet processors, rule compilation, the
//! region classifier, and the per-switch reactive baseline.
//!
//! In [`ControllerMode::Osdf`] the first PACKET_IN of a flow is enough to
//! install every rule along the path in both directions. In
//! [`ControllerMode::ReactiveBaseline`] each switch asks the controller
//! for itself and gets one rule back.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::dataplane::{
    Action, Cookie, DataplaneError, DropReason, FlowId, FlowRule, PacketInHandler, SimNetwork, Trace, Verdict,
};
use crate::pathsel::{shortest_path, AlgorithmRegistry, Path, PathError, SHORTEST};
use crate::policy::{parse_policy, NetworkFunction, Policy, PolicyError, PolicyId, PolicyStore, DEFAULT_PRIORITY};
use crate::selector::{
    build_selectors, MatchFields, Packet, ProfileRegistry, SelectorError, TrafficProfile, ETH_TYPE_IPV4,
};
use crate::topo::{DeviceId, MacAddr, Topology};

/// Priority of the drop rules installed for refused flows.
pub const DROP_PRIORITY: u16 = 1;

/// Destination MAC hosts use for traffic leaving their region. The egress
/// switch rewrites it to the real host address.
pub const GATEWAY_MAC: MacAddr = MacAddr([0x02, 0x00, 0x00, 0x00, 0x00, 0xfe]);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ControllerMode {
    Osdf,
    ReactiveBaseline,
}

impl fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControllerMode::Osdf => "osdf",
            ControllerMode::ReactiveBaseline => "reactive",
        })
    }
}

impl FromStr for ControllerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "osdf" => Ok(ControllerMode::Osdf),
            "reactive" => Ok(ControllerMode::ReactiveBaseline),
            _ => Err(format!("unknown mode {s:?} (expected osdf or reactive)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("flow {0} has no matched policy")]
    MissingPolicy(FlowId),
    #[error("flow {0} has no path")]
    MissingPath(FlowId),
    #[error("path {0} visits a device twice")]
    LoopingPath(String),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Dataplane(#[from] DataplaneError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Everything the controller learned about one flow while setting it up.
#[derive(Clone, Debug)]
pub struct FlowContext {
    pub flow: FlowId,
    pub packet: Packet,
    pub profile: String,
    pub src_region: String,
    pub dst_region: String,
    pub policy: Option<Policy>,
    pub path: Option<Path>,
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
}

impl FlowContext {
    pub fn is_inter_site(&self) -> bool {
        self.src_region != self.dst_region
    }
}

/// Regions of the packet's source and destination addresses.
pub fn regions_of_flow(t: &Topology, pkt: &Packet) -> Option<(String, String)> {
    let src = t.region_of_ip(pkt.src_ip)?;
    let dst = t.region_of_ip(pkt.dst_ip)?;
    Some((src.to_string(), dst.to_string()))
}

/// Flow rules for `ctx`, in install order: forward rules from the egress
/// switch back to the ingress switch, then (for bidirectional policies)
/// the reverse rules in the same destination-first order.
pub fn compile_rules(ctx: &FlowContext, profile: &TrafficProfile) -> Result<Vec<FlowRule>, ControllerError> {
    let policy = ctx.policy.as_ref().ok_or(ControllerError::MissingPolicy(ctx.flow))?;
    let path = ctx.path.as_ref().ok_or(ControllerError::MissingPath(ctx.flow))?;
    if path.revisits {
        return Err(ControllerError::LoopingPath(path.to_string()));
    }
    let (forward, reverse) = build_selectors(profile, &ctx.packet)?;
    let cookie = Cookie {
        policy: policy.id,
        flow: ctx.flow,
    };
    let rewrite = ctx.is_inter_site();
    let directional = |path: &Path, selector: &MatchFields, host_mac: MacAddr| -> Vec<FlowRule> {
        let last = path.hops.len() - 1;
        path.hops
            .iter()
            .enumerate()
            .rev()
            .map(|(i, hop)| {
                let mut actions = Vec::with_capacity(2);
                if rewrite && i == last {
                    actions.push(Action::SetDstMac(host_mac));
                }
                actions.push(Action::Output(hop.out_port));
                FlowRule {
                    device: hop.device.clone(),
                    priority: policy.priority,
                    match_fields: selector.clone(),
                    actions,
                    cookie,
                }
            })
            .collect()
    };
    let mut rules = directional(path, &forward, ctx.dst_mac);
    if policy.is_bidirectional() {
        rules.extend(directional(&path.reversed(), &reverse, ctx.src_mac));
    }
    Ok(rules)
}

/// Result of handling one PACKET_IN.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SetupOutcome {
    pub flow: FlowId,
    /// The matched policy, also set when a later step refused the flow.
    pub policy: Option<PolicyId>,
    pub path: Vec<DeviceId>,
    pub rules: usize,
    /// `None` when rules were installed.
    pub refused: Option<DropReason>,
}

impl SetupOutcome {
    fn refused(flow: FlowId, reason: DropReason, rules: usize) -> Self {
        Self {
            flow,
            policy: None,
            path: Vec::new(),
            rules,
            refused: Some(reason),
        }
    }

    /// Records the policy that matched before the flow was refused.
    fn charged_to(mut self, policy: Option<PolicyId>) -> Self {
        self.policy = policy;
        self
    }

    pub fn is_installed(&self) -> bool {
        self.refused.is_none()
    }

    /// `flow=<id> policy=<id|none> path=[devs] rules=<k> packet_ins=<m> t_us=<resp>`
    pub fn record(&self, trace: &Trace) -> String {
        let policy = self.policy.map_or("none".to_string(), |p| p.to_string());
        let path: Vec<&str> = self.path.iter().map(DeviceId::as_str).collect();
        format!(
            "flow={} policy={} path=[{}] rules={} packet_ins={} t_us={}",
            self.flow,
            policy,
            path.join(","),
            self.rules,
            trace.packet_in_count,
            trace.response_time_us
        )
    }
}

/// Which rules the controller installed, keyed by originating policy.
#[derive(Clone, Debug, Default)]
pub struct RuleLedger {
    entries: BTreeMap<Option<PolicyId>, BTreeSet<(DeviceId, u64)>>,
}

impl RuleLedger {
    pub fn record(&mut self, policy: Option<PolicyId>, device: DeviceId, seq: u64) {
        self.entries.entry(policy).or_default().insert((device, seq));
    }

    pub fn take(&mut self, policy: Option<PolicyId>) -> BTreeSet<(DeviceId, u64)> {
        self.entries.remove(&policy).unwrap_or_default()
    }

    pub fn rules_for(&self, policy: Option<PolicyId>) -> usize {
        self.entries.get(&policy).map_or(0, BTreeSet::len)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (Option<PolicyId>, &DeviceId, u64)> {
        self.entries
            .iter()
            .flat_map(|(p, set)| set.iter().map(move |(d, s)| (*p, d, *s)))
    }
}

pub struct Controller {
    mode: ControllerMode,
    store: PolicyStore,
    profiles: ProfileRegistry,
    algorithms: AlgorithmRegistry,
    algorithm: String,
    ledger: RuleLedger,
    next_flow: u64,
    reactive_flows: HashMap<MatchFields, FlowId>,
    setups: Vec<SetupOutcome>,
}

impl Controller {
    pub fn new(mode: ControllerMode) -> Self {
        Self::with_registries(mode, ProfileRegistry::with_builtins(), AlgorithmRegistry::new())
    }

    pub fn with_registries(mode: ControllerMode, profiles: ProfileRegistry, algorithms: AlgorithmRegistry) -> Self {
        Self {
            mode,
            store: PolicyStore::new(),
            profiles,
            algorithms,
            algorithm: SHORTEST.to_string(),
            ledger: RuleLedger::default(),
            next_flow: 0,
            reactive_flows: HashMap::new(),
            setups: Vec::new(),
        }
    }

    /// Switches mode for a fresh network: policies and profiles stay,
    /// installed-rule bookkeeping is cleared.
    pub fn reset(&mut self, mode: ControllerMode) {
        self.mode = mode;
        self.ledger = RuleLedger::default();
        self.reactive_flows.clear();
        self.setups.clear();
    }

    pub fn mode(&self) -> ControllerMode {
        self.mode
    }

    pub fn store(&self) -> &PolicyStore {
        &self.store
    }

    pub fn profiles(&self) -> &ProfileRegistry {
        &self.profiles
    }

    pub fn profiles_mut(&mut self) -> &mut ProfileRegistry {
        &mut self.profiles
    }

    pub fn algorithms_mut(&mut self) -> &mut AlgorithmRegistry {
        &mut self.algorithms
    }

    /// Selects the path algorithm used for policies without waypoints.
    pub fn set_algorithm(&mut self, name: &str) -> Result<(), PathError> {
        if !self.algorithms.contains(name) {
            return Err(PathError::UnknownAlgorithm(name.to_string()));
        }
        self.algorithm = name.to_string();
        Ok(())
    }

    pub fn ledger(&self) -> &RuleLedger {
        &self.ledger
    }

    /// Every PACKET_IN outcome so far, oldest first.
    pub fn setups(&self) -> &[SetupOutcome] {
        &self.setups
    }

    fn fresh_flow(&mut self) -> FlowId {
        self.next_flow += 1;
        FlowId(self.next_flow)
    }

    /// Stores `policy`. Drop rules left by earlier refusals are purged so
    /// that flows the new policy covers get a fresh PACKET_IN.
    pub fn add_policy(&mut self, net: &mut SimNetwork, policy: Policy) -> Result<PolicyId, PolicyError> {
        let id = self.store.add(policy, net.topology(), &self.profiles)?;
        if self.mode == ControllerMode::Osdf {
            for (device, seq) in self.ledger.take(None) {
                net.remove_rule(&device, seq);
            }
        }
        Ok(id)
    }

    pub fn add_policy_line(&mut self, net: &mut SimNetwork, line: &str) -> Result<PolicyId, PolicyError> {
        let policy = parse_policy(line)?;
        self.add_policy(net, policy)
    }

    /// Removes a policy from the store and purges its rules. Returns the
    /// policy and the number of rules removed.
    pub fn remove_policy(&mut self, net: &mut SimNetwork, id: PolicyId) -> Result<(Policy, usize), PolicyError> {
        let policy = self.store.remove(id)?;
        let purged = self.purge_policy_rules(net, id);
        Ok((policy, purged))
    }

    /// Removes every rule installed on behalf of `id`.
    pub fn purge_policy_rules(&mut self, net: &mut SimNetwork, id: PolicyId) -> usize {
        let ledgered = self.ledger.take(Some(id)).len();
        let removed = net.remove_by_cookie(Some(id));
        debug_assert_eq!(ledgered, removed);
        removed
    }

    fn install(&mut self, net: &mut SimNetwork, rule: FlowRule) -> Result<(), DataplaneError> {
        let (policy, device) = (rule.cookie.policy, rule.device.clone());
        let seq = net.install_rule(rule)?;
        self.ledger.record(policy, device, seq);
        Ok(())
    }

    fn install_drop(&mut self, net: &mut SimNetwork, device: &DeviceId, selector: MatchFields, flow: FlowId) -> usize {
        let rule = FlowRule {
            device: device.clone(),
            priority: DROP_PRIORITY,
            match_fields: selector,
            actions: vec![Action::Drop],
            cookie: Cookie { policy: None, flow },
        };
        match self.install(net, rule) {
            Ok(()) => 1,
            Err(_) => 0,
        }
    }

    /// End-to-end setup on the first PACKET_IN of a flow.
    pub fn handle_packet_in_osdf(&mut self, net: &mut SimNetwork, device: &DeviceId, pkt: &Packet) -> SetupOutcome {
        let flow = self.fresh_flow();
        let topology = Arc::clone(net.topology());
        let Some(profile) = self.profiles.classify(pkt).cloned() else {
            let dropped = self.install_drop(net, device, host_pair_selector(pkt), flow);
            return SetupOutcome::refused(flow, DropReason::NoPolicy, dropped);
        };
        let forward = match build_selectors(&profile, pkt) {
            Ok((forward, _)) => forward,
            Err(_) => host_pair_selector(pkt),
        };
        let Some((src_region, dst_region)) = regions_of_flow(&topology, pkt) else {
            let dropped = self.install_drop(net, device, forward, flow);
            return SetupOutcome::refused(flow, DropReason::NoRegion, dropped);
        };
        let function = if src_region == dst_region {
            NetworkFunction::IntraSiteRoute
        } else {
            NetworkFunction::InterSiteRoute
        };
        let Some(policy) = self
            .store
            .match_policies(function, &src_region, &dst_region, &profile.name)
            .first()
            .map(|p| (*p).clone())
        else {
            let dropped = self.install_drop(net, device, forward, flow);
            return SetupOutcome::refused(flow, DropReason::NoPolicy, dropped);
        };
        net.charge(net.costs().policy_parse_us);

        let (Some(src), Some(dst)) = (topology.host_by_ip(pkt.src_ip), topology.host_by_ip(pkt.dst_ip)) else {
            return SetupOutcome::refused(flow, DropReason::UnknownHost, 0).charged_to(policy.id);
        };
        let path = match self
            .algorithms
            .select_path(&topology, &policy, &self.algorithm, &src.attach, &dst.attach)
        {
            Ok(path) => path,
            Err(_) => return SetupOutcome::refused(flow, DropReason::NoPath, 0).charged_to(policy.id),
        };
        if path.revisits {
            return SetupOutcome::refused(flow, DropReason::LoopingPath, 0).charged_to(policy.id);
        }
        let devices = path.devices();
        let ctx = FlowContext {
            flow,
            packet: pkt.clone(),
            profile: profile.name.clone(),
            src_region,
            dst_region,
            policy: Some(policy.clone()),
            path: Some(path),
            src_mac: src.mac,
            dst_mac: dst.mac,
        };
        let rules = match compile_rules(&ctx, &profile) {
            Ok(rules) => rules,
            Err(_) => return SetupOutcome::refused(flow, DropReason::NoPath, 0).charged_to(policy.id),
        };
        let count = rules.len();
        for rule in rules {
            self.install(net, rule)
                .expect("compiled rules reference valid devices and ports");
        }
        SetupOutcome {
            flow,
            policy: policy.id,
            path: devices,
            rules: count,
            refused: None,
        }
    }

    /// One rule at the asking switch towards the destination host. Policies
    /// are not consulted.
    pub fn handle_packet_in_reactive(&mut self, net: &mut SimNetwork, device: &DeviceId, pkt: &Packet) -> SetupOutcome {
        let topology = Arc::clone(net.topology());
        let selector = match self.profiles.classify(pkt).map(|p| build_selectors(p, pkt)) {
            Some(Ok((forward, _))) => forward,
            _ => host_pair_selector(pkt),
        };
        let flow = match self.reactive_flows.get(&selector) {
            Some(flow) => *flow,
            None => {
                let flow = self.fresh_flow();
                self.reactive_flows.insert(selector.clone(), flow);
                flow
            }
        };
        let Some(dst) = topology.host_by_ip(pkt.dst_ip) else {
            return SetupOutcome::refused(flow, DropReason::UnknownHost, 0);
        };
        let route = match shortest_path(&topology, device, &dst.attach.device) {
            Ok(route) => route,
            Err(_) => return SetupOutcome::refused(flow, DropReason::NoPath, 0),
        };
        let mut actions = Vec::with_capacity(2);
        let out_port = match route.devices.get(1) {
            Some(next) => {
                topology
                    .link_ports(device, next)
                    .expect("consecutive route devices are linked")
                    .0
            }
            None => {
                if regions_of_flow(&topology, pkt).is_some_and(|(s, d)| s != d) {
                    actions.push(Action::SetDstMac(dst.mac));
                }
                dst.attach.port
            }
        };
        actions.push(Action::Output(out_port));
        let rule = FlowRule {
            device: device.clone(),
            priority: DEFAULT_PRIORITY,
            match_fields: selector,
            actions,
            cookie: Cookie { policy: None, flow },
        };
        if self.install(net, rule).is_err() {
            return SetupOutcome::refused(flow, DropReason::NoPath, 0);
        }
        SetupOutcome {
            flow,
            policy: None,
            path: route.devices,
            rules: 1,
            refused: None,
        }
    }
}

impl PacketInHandler for Controller {
    fn packet_in(&mut self, net: &mut SimNetwork, device: &DeviceId, _in_port: u16, pkt: &Packet) -> Verdict {
        let outcome = match self.mode {
            ControllerMode::Osdf => self.handle_packet_in_osdf(net, device, pkt),
            ControllerMode::ReactiveBaseline => self.handle_packet_in_reactive(net, device, pkt),
        };
        let verdict = outcome.refused.map_or(Verdict::Installed, Verdict::Refused);
        self.setups.push(outcome);
        verdict
    }
}

fn host_pair_selector(pkt: &Packet) -> MatchFields {
    MatchFields {
        eth_type: Some(ETH_TYPE_IPV4),
        src_ip: Some(pkt.src_ip),
        dst_ip: Some(pkt.dst_ip),
        ..Default::default()
    }
}

/// A packet from `src` to `dst` shaped for `profile`. Traffic leaving the
/// source region is addressed to [`GATEWAY_MAC`].
pub fn packet_for_profile(
    t: &Topology,
    profile: &TrafficProfile,
    src: Ipv4Addr,
    dst: Ipv4Addr,
    dport: Option<u16>,
) -> Option<Packet> {
    use crate::selector::IpProto;
    let src_host = t.host_by_ip(src)?;
    const SPORT: u16 = 49152;
    let dport = dport.or_else(|| profile.dst_ports.as_ref().and_then(|p| p.first()));
    let pkt = match profile.ip_proto {
        Some(IpProto::Icmp) => Packet::icmp(src, dst),
        Some(IpProto::Tcp) => Packet::tcp(src, dst, SPORT, dport.unwrap_or(9)),
        Some(IpProto::Udp) | None => Packet::udp(src, dst, SPORT, dport.unwrap_or(9)),
    };
    let same_region = t.region_of_ip(src).is_some() && t.region_of_ip(src) == t.region_of_ip(dst);
    let dst_mac = match t.host_by_ip(dst) {
        Some(h) if same_region => h.mac,
        _ => GATEWAY_MAC,
    };
    Some(pkt.with_macs(src_host.mac, dst_mac))
}
