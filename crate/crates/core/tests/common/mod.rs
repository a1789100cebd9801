#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use osdf::dataplane::{Action, Cookie, FlowId, FlowRule, TableEntry};
use osdf::policy::{Policy, Scope};
use osdf::selector::{IpProto, MatchFields, Packet, ETH_TYPE_IPV4};
use osdf::topo::{Device, DeviceId, Host, Link, MacAddr, PortRef, Region, Topology};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn dev(name: &str) -> DeviceId {
    DeviceId::new(name).unwrap()
}

pub fn node(i: usize) -> DeviceId {
    dev(&format!("d{i}"))
}

/// Devices d0..d{n-1} joined by `edges`, ports numbered per device in edge
/// order. No hosts or regions.
pub fn graph_topology(n: usize, edges: &[(usize, usize)]) -> Topology {
    let mut next_port = vec![1u16; n];
    let mut links = Vec::new();
    for &(a, b) in edges {
        let pa = next_port[a];
        let pb = next_port[b];
        next_port[a] += 1;
        next_port[b] += 1;
        links.push(Link {
            a: PortRef::new(node(a), pa),
            b: PortRef::new(node(b), pb),
        });
    }
    let devices = (0..n)
        .map(|i| Device {
            id: node(i),
            region: None,
            port_count: (next_port[i] - 1).max(1),
        })
        .collect();
    Topology::new(devices, links, Vec::new(), Vec::new()).unwrap()
}

pub fn adjacency(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    adj
}

/// Minimum hop count (devices on the path) from `src` to every device, by
/// enumerating every simple path.
pub fn brute_force_min_devices(adj: &[Vec<usize>], src: usize) -> Vec<Option<usize>> {
    fn walk(adj: &[Vec<usize>], at: usize, depth: usize, seen: &mut Vec<bool>, best: &mut [Option<usize>]) {
        if best[at].is_none_or(|b| depth < b) {
            best[at] = Some(depth);
        }
        for &next in &adj[at] {
            if !seen[next] {
                seen[next] = true;
                walk(adj, next, depth + 1, seen, best);
                seen[next] = false;
            }
        }
    }
    let mut best = vec![None; adj.len()];
    let mut seen = vec![false; adj.len()];
    seen[src] = true;
    walk(adj, src, 1, &mut seen, &mut best);
    best
}

pub fn is_connected(adj: &[Vec<usize>]) -> bool {
    let mut seen = vec![false; adj.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen.iter().all(|&s| s)
}

/// Every connected simple graph on `n` labelled vertices.
pub fn connected_graphs(n: usize) -> Vec<Vec<(usize, usize)>> {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    let mut out = Vec::new();
    for mask in 0u64..(1 << pairs.len()) {
        let edges: Vec<(usize, usize)> = pairs
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, e)| *e)
            .collect();
        if is_connected(&adjacency(n, &edges)) {
            out.push(edges);
        }
    }
    out
}

/// A random connected graph: a random spanning tree plus extra edges.
pub fn random_connected_graph(rng: &mut StdRng, n: usize, extra: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut edges = BTreeSet::new();
    for i in 1..n {
        let parent = order[rng.gen_range(0..i)];
        let (a, b) = (parent.min(order[i]), parent.max(order[i]));
        edges.insert((a, b));
    }
    for _ in 0..extra {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    let mut edges: Vec<_> = edges.into_iter().collect();
    edges.shuffle(rng);
    edges
}

fn ident(rng: &mut StdRng, prefix: &str) -> String {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-";
    let len = rng.gen_range(1..6);
    let tail: String = (0..len).map(|_| CHARS[rng.gen_range(0..CHARS.len())] as char).collect();
    format!("{prefix}{tail}")
}

/// A random valid topology: connected devices, some grouped into regions
/// with disjoint prefixes, hosts on spare ports.
pub fn random_topology(rng: &mut StdRng) -> Topology {
    let n = rng.gen_range(1..8);
    let mut names = BTreeSet::new();
    while names.len() < n {
        names.insert(ident(rng, "sw"));
    }
    let names: Vec<String> = names.into_iter().collect();
    let extra = rng.gen_range(0..n);
    let edges = if n > 1 {
        random_connected_graph(rng, n, extra)
    } else {
        Vec::new()
    };

    let region_count = rng.gen_range(0..=n.min(3));
    let mut region_of = vec![None; n];
    for (i, slot) in region_of.iter_mut().enumerate() {
        if region_count > 0 && (i < region_count || rng.gen_bool(0.6)) {
            *slot = Some(if i < region_count {
                i
            } else {
                rng.gen_range(0..region_count)
            });
        }
    }

    let mut next_port = vec![1u16; n];
    let mut links = Vec::new();
    for &(a, b) in &edges {
        links.push(Link {
            a: PortRef::new(dev(&names[a]), next_port[a]),
            b: PortRef::new(dev(&names[b]), next_port[b]),
        });
        next_port[a] += 1;
        next_port[b] += 1;
    }

    let region_names: Vec<String> = {
        let mut set = BTreeSet::new();
        while set.len() < region_count {
            set.insert(ident(rng, "R"));
        }
        set.into_iter().collect()
    };
    let prefixes: Vec<Vec<Ipv4Net>> = (0..region_count)
        .map(|r| {
            let count = rng.gen_range(1..3);
            (0..count)
                .map(|k| {
                    let len = rng.gen_range(16..=24);
                    Ipv4Net::new(Ipv4Addr::new(10, (r * 2 + k) as u8, 0, 0), len)
                        .unwrap()
                        .trunc()
                })
                .collect()
        })
        .collect();

    let mut hosts = Vec::new();
    let mut host_count = vec![0u32; region_count];
    for i in 0..n {
        let Some(r) = region_of[i] else { continue };
        for _ in 0..rng.gen_range(0..3) {
            let seq = host_count[r] + 1;
            host_count[r] += 1;
            let base = u32::from(prefixes[r][0].network());
            hosts.push(Host {
                name: format!("h{}", hosts.len() + 1),
                mac: MacAddr::from_u64(hosts.len() as u64 + 1),
                ip: Ipv4Addr::from(base + seq),
                attach: PortRef::new(dev(&names[i]), next_port[i]),
            });
            next_port[i] += 1;
        }
    }

    let devices = (0..n)
        .map(|i| Device {
            id: dev(&names[i]),
            region: region_of[i].map(|r| region_names[r].clone()),
            port_count: (next_port[i] - 1).max(1) + rng.gen_range(0..2),
        })
        .collect();
    let regions = (0..region_count)
        .map(|r| Region {
            name: region_names[r].clone(),
            prefixes: prefixes[r].clone(),
            devices: (0..n)
                .filter(|&i| region_of[i] == Some(r))
                .map(|i| dev(&names[i]))
                .collect(),
        })
        .collect();
    Topology::new(devices, links, hosts, regions).expect("generator produces valid topologies")
}

/// A random syntactically valid policy (no id, enabled).
pub fn random_policy(rng: &mut StdRng) -> Policy {
    let profile = ident(rng, "p");
    let scope = if rng.gen_bool(0.5) {
        let regions: BTreeSet<String> = (0..rng.gen_range(1..4)).map(|_| ident(rng, "R")).collect();
        Scope::Intra { regions }
    } else {
        let src = ident(rng, "R");
        let mut dst = ident(rng, "R");
        while dst == src {
            dst = ident(rng, "R");
        }
        Scope::Inter {
            src,
            dst,
            bidirectional: rng.gen_bool(0.7),
        }
    };
    Policy {
        id: None,
        name: None,
        profile,
        scope,
        priority: rng.gen_range(2..=u16::MAX),
        via: (0..rng.gen_range(0..3)).map(|_| dev(&ident(rng, "sw"))).collect(),
        enabled: true,
    }
}

pub fn random_packet(rng: &mut StdRng, ips: &[Ipv4Addr], ports: &[u16]) -> Packet {
    let src = *ips.choose(rng).unwrap();
    let dst = *ips.choose(rng).unwrap();
    match rng.gen_range(0..3) {
        0 => Packet::icmp(src, dst),
        1 => Packet::tcp(src, dst, *ports.choose(rng).unwrap(), *ports.choose(rng).unwrap()),
        _ => Packet::udp(src, dst, *ports.choose(rng).unwrap(), *ports.choose(rng).unwrap()),
    }
}

/// A random valid match: eth_type always, other fields drawn from the pools.
pub fn random_match(rng: &mut StdRng, ips: &[Ipv4Addr], ports: &[u16]) -> MatchFields {
    let mut m = MatchFields {
        eth_type: Some(ETH_TYPE_IPV4),
        ..Default::default()
    };
    if rng.gen_bool(0.5) {
        m.src_ip = Some(*ips.choose(rng).unwrap());
    }
    if rng.gen_bool(0.5) {
        m.dst_ip = Some(*ips.choose(rng).unwrap());
    }
    if rng.gen_bool(0.6) {
        let proto = [IpProto::Icmp, IpProto::Tcp, IpProto::Udp][rng.gen_range(0..3)];
        m.ip_proto = Some(proto);
        if proto.has_ports() {
            if rng.gen_bool(0.5) {
                m.l4_src = Some(*ports.choose(rng).unwrap());
            }
            if rng.gen_bool(0.5) {
                m.l4_dst = Some(*ports.choose(rng).unwrap());
            }
        }
    }
    m
}

pub fn output_rule(device: &DeviceId, priority: u16, m: MatchFields, port: u16, flow: u64) -> FlowRule {
    FlowRule {
        device: device.clone(),
        priority,
        match_fields: m,
        actions: vec![Action::Output(port)],
        cookie: Cookie {
            policy: None,
            flow: FlowId(flow),
        },
    }
}

/// Highest priority wins; among equals the oldest (lowest seq).
pub fn naive_lookup<'a>(entries: &'a [(u64, FlowRule)], pkt: &Packet) -> Option<&'a (u64, FlowRule)> {
    let mut best: Option<&(u64, FlowRule)> = None;
    for e in entries {
        if !e.1.match_fields.matches(pkt) {
            continue;
        }
        best = match best {
            Some(b) if (b.1.priority, std::cmp::Reverse(b.0)) >= (e.1.priority, std::cmp::Reverse(e.0)) => Some(b),
            _ => Some(e),
        };
    }
    best
}

pub fn entry_key(e: &TableEntry) -> (u64, &FlowRule) {
    (e.seq, &e.rule)
}

/// Rule counts per device, as a comparable map.
pub fn rules_by_device<'a>(it: impl Iterator<Item = (&'a DeviceId, u64)>) -> BTreeMap<DeviceId, BTreeSet<u64>> {
    let mut out: BTreeMap<DeviceId, BTreeSet<u64>> = BTreeMap::new();
    for (d, s) in it {
        out.entry(d.clone()).or_default().insert(s);
    }
    out
}
