mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use osdf::controller::{packet_for_profile, DROP_PRIORITY};
use osdf::dataplane::{DropReason, Event};
use osdf::policy::NetworkFunction;
use osdf::topo::{gen_linear, gen_three_region, DeviceId, Topology};
use osdf::{Controller, ControllerMode, CostConfig, SimNetwork, Trace};
use proptest::prelude::*;

struct Rig {
    net: SimNetwork,
    ctrl: Controller,
}

impl Rig {
    fn new(t: Topology, mode: ControllerMode) -> Self {
        Self {
            net: SimNetwork::new(Arc::new(t), CostConfig::default()),
            ctrl: Controller::new(mode),
        }
    }

    fn send(&mut self, src: &str, dst: &str, app: &str, dport: Option<u16>) -> Trace {
        let t = Arc::clone(self.net.topology());
        let (s, d) = (t.host(src).unwrap(), t.host(dst).unwrap());
        let profile = self.ctrl.profiles().get(app).unwrap().clone();
        let pkt = packet_for_profile(&t, &profile, s.ip, d.ip, dport).unwrap();
        self.net.inject_packet(&mut self.ctrl, src, &pkt).unwrap()
    }

    fn table_entries(&self) -> BTreeSet<(DeviceId, u64)> {
        self.net
            .tables()
            .flat_map(|(d, t)| t.entries().iter().map(move |e| (d.clone(), e.seq)))
            .collect()
    }

    fn ledger_entries(&self) -> BTreeSet<(DeviceId, u64)> {
        self.ctrl.ledger().iter().map(|(_, d, s)| (d.clone(), s)).collect()
    }
}

fn linear_setup(n: usize, mode: ControllerMode, policy: &str) -> Trace {
    let mut rig = Rig::new(gen_linear(n).unwrap(), mode);
    if mode == ControllerMode::Osdf {
        rig.ctrl.add_policy_line(&mut rig.net, policy).unwrap();
    }
    rig.send("h1", "h2", "any", Some(9))
}

#[test]
fn packet_in_economy_and_rule_count_law() {
    for n in 1..=10 {
        let osdf = linear_setup(n, ControllerMode::Osdf, "intra any region R");
        assert_eq!(osdf.delivered_to(), Some("h2"));
        assert_eq!(osdf.packet_in_count, 1);
        assert_eq!(osdf.rules_installed, 2 * n);

        let reactive = linear_setup(n, ControllerMode::ReactiveBaseline, "");
        assert_eq!(reactive.delivered_to(), Some("h2"));
        assert_eq!(reactive.packet_in_count, n);
        assert_eq!(reactive.rules_installed, n);
    }
}

#[test]
fn oneway_policies_install_one_direction() {
    let mut rig = Rig::new(gen_three_region(), ControllerMode::Osdf);
    rig.ctrl
        .add_policy_line(&mut rig.net, "inter web from A to C oneway")
        .unwrap();
    let trace = rig.send("hA1", "hC2", "web", None);
    // a1, a2, c1, c2
    assert_eq!(trace.rules_installed, 4);
    assert_eq!(
        rig.send("hC2", "hA1", "web", None).dropped().map(|d| d.1),
        Some(DropReason::NoPolicy)
    );
}

#[test]
fn response_time_closed_forms() {
    let c = CostConfig::default();
    for n in 2..=10u64 {
        let osdf = linear_setup(n as usize, ControllerMode::Osdf, "intra any region R");
        let reactive = linear_setup(n as usize, ControllerMode::ReactiveBaseline, "");
        // evaluated from the cost model, not the literal constants
        assert_eq!(
            osdf.response_time_us,
            c.ctrl_rtt_us + c.policy_parse_us + 2 * n * c.rule_install_us
        );
        assert_eq!(reactive.response_time_us, n * (c.ctrl_rtt_us + c.rule_install_us));
        assert_eq!(osdf.response_time_us, 600 + 100 * n);
        assert_eq!(reactive.response_time_us, 550 * n);
        assert!(osdf.response_time_us < reactive.response_time_us);
    }
}

#[test]
fn refused_flows_leave_one_drop_rule_at_ingress() {
    let t = gen_three_region();
    let hosts: Vec<(String, DeviceId)> = t
        .hosts()
        .iter()
        .map(|h| (h.name.clone(), h.attach.device.clone()))
        .collect();
    for (src, ingress) in &hosts {
        for (dst, _) in &hosts {
            if src == dst {
                continue;
            }
            let mut rig = Rig::new(t.clone(), ControllerMode::Osdf);
            let trace = rig.send(src, dst, "web", None);
            assert_eq!(trace.dropped(), Some((ingress, DropReason::NoPolicy)));
            let rules: Vec<_> = trace.installed_rules().collect();
            assert_eq!(rules.len(), 1);
            assert_eq!(&rules[0].device, ingress);
            assert_eq!(rules[0].priority, DROP_PRIORITY);
            assert_eq!(rig.net.rule_count(), 1);
        }
    }
}

const VIAS: [&str; 5] = ["", " via a2", " via b1", " via c1", " via c2"];

proptest! {
    #[test]
    fn installed_priority_follows_store_head(specs in prop::collection::vec((2u16..50, 0usize..5), 1..5)) {
        let mut rig = Rig::new(gen_three_region(), ControllerMode::Osdf);
        for (priority, via) in &specs {
            rig.ctrl.add_policy_line(&mut rig.net, &format!("inter web from A to B priority {priority}{}", VIAS[*via])).unwrap();
        }
        let head = rig.ctrl.store().match_policies(NetworkFunction::InterSiteRoute, "A", "B", "web")[0].clone();
        let trace = rig.send("hA1", "hB2", "web", None);
        let setup = rig.ctrl.setups().last().unwrap().clone();
        if head.via.iter().any(|d| d.as_str() == "c2") {
            // a1 -> c2 -> b2 doubles back through c1
            prop_assert_eq!(setup.refused, Some(DropReason::LoopingPath));
            prop_assert_eq!(trace.rules_installed, 0);
        } else {
            prop_assert_eq!(trace.delivered_to(), Some("hB2"));
            prop_assert_eq!(setup.policy, head.id);
            for rule in trace.installed_rules() {
                prop_assert_eq!(rule.priority, head.priority);
                prop_assert_eq!(rule.cookie.policy, head.id);
            }
            // the dataplane picks the same winner at the ingress switch
            let t = Arc::clone(rig.net.topology());
            let profile = rig.ctrl.profiles().get("web").unwrap().clone();
            let pkt = packet_for_profile(&t, &profile, t.host("hA1").unwrap().ip, t.host("hB2").unwrap().ip, None).unwrap();
            let winner = rig.net.table(&"a1".parse().unwrap()).unwrap().lookup(&pkt).unwrap();
            prop_assert_eq!(winner.rule.cookie.policy, head.id);
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Send(usize, usize, usize),
    Add(usize),
    Remove(usize),
}

const LINES: [&str; 6] = [
    "inter web from A to B priority 100",
    "inter ping from B to C",
    "intra video region A,C priority 300",
    "inter web from A to C via b1",
    "intra any region B priority 5",
    "inter any from C to A oneway",
];
const APPS: [&str; 4] = ["web", "ping", "video", "any"];

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0..6usize, 0..6usize, 0..4usize).prop_map(|(a, b, c)| Op::Send(a, b, c)),
        2 => (0..6usize).prop_map(Op::Add),
        1 => (0..8usize).prop_map(Op::Remove),
    ]
}

proptest! {
    #[test]
    fn tables_hold_exactly_the_ledger(ops in prop::collection::vec(op(), 1..30), reactive in any::<bool>()) {
        let mode = if reactive { ControllerMode::ReactiveBaseline } else { ControllerMode::Osdf };
        let mut rig = Rig::new(gen_three_region(), mode);
        let hosts: Vec<String> = rig.net.topology().hosts().iter().map(|h| h.name.clone()).collect();
        let mut live = Vec::new();
        for op in ops {
            match op {
                Op::Send(a, b, app) => {
                    if a != b {
                        let trace = rig.send(&hosts[a], &hosts[b], APPS[app], None);
                        prop_assert_eq!(trace.events.iter().filter(|(_, e)| e.is_terminal()).count(), 1);
                    }
                }
                Op::Add(k) => live.push(rig.ctrl.add_policy_line(&mut rig.net, LINES[k]).unwrap()),
                Op::Remove(k) => {
                    if !live.is_empty() {
                        let id = live.remove(k % live.len());
                        let expected = rig.ctrl.ledger().rules_for(Some(id));
                        let (_, purged) = rig.ctrl.remove_policy(&mut rig.net, id).unwrap();
                        prop_assert_eq!(purged, expected);
                    }
                }
            }
            prop_assert_eq!(rig.table_entries(), rig.ledger_entries());
        }
    }
}

#[test]
fn clock_matches_cost_model_over_a_session() {
    let mut rig = Rig::new(gen_three_region(), ControllerMode::Osdf);
    for line in LINES {
        rig.ctrl.add_policy_line(&mut rig.net, line).unwrap();
    }
    let hosts: Vec<String> = rig.net.topology().hosts().iter().map(|h| h.name.clone()).collect();
    for s in &hosts {
        for d in &hosts {
            for app in APPS {
                if s != d {
                    rig.send(s, d, app, None);
                }
            }
        }
    }
    let c = CostConfig::default();
    let log = rig.net.log();
    let packet_ins = log.iter().filter(|(_, e)| matches!(e, Event::PacketIn { .. })).count() as u64;
    let installs = log.iter().filter(|(_, e)| matches!(e, Event::RuleInstalled(_))).count() as u64;
    // parsing is charged once a policy matched, even if the path is then refused
    let setups = rig.ctrl.setups().iter().filter(|s| s.policy.is_some()).count() as u64;
    assert!(rig
        .ctrl
        .setups()
        .iter()
        .any(|s| s.policy.is_some() && !s.is_installed()));
    assert!(setups > 0);
    assert_eq!(
        rig.net.clock_us(),
        packet_ins * c.ctrl_rtt_us + installs * c.rule_install_us + setups * c.policy_parse_us
    );
}
