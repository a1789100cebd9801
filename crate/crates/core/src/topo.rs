//! Network model: devices, links, hosts, regions and the mapping of IP
//! prefixes to regions.
//!
//! A [`Topology`] is validated once on construction and immutable afterwards.
//! All lists are kept in canonical (sorted) order so that two topologies with
//! the same contents compare equal and format to the same JSON document.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Short alphanumeric device identifier, e.g. `s1` or `a2`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceId(String);

impl DeviceId {
    pub fn new(id: impl Into<String>) -> Result<Self, TopoError> {
        let id = id.into();
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(TopoError::BadDeviceId(id));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for DeviceId {
    type Err = TopoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl PartialEq<str> for DeviceId {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

impl PartialEq<&str> for DeviceId {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

/// 48-bit Ethernet address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    /// Builds an address from the low 48 bits of `v`.
    pub fn from_u64(v: u64) -> Self {
        let b = v.to_be_bytes();
        Self([b[2], b[3], b[4], b[5], b[6], b[7]])
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl FromStr for MacAddr {
    type Err = TopoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 6];
        let mut parts = s.split(':');
        for byte in out.iter_mut() {
            let part = parts.next().ok_or_else(|| TopoError::BadMac(s.to_string()))?;
            if part.len() != 2 {
                return Err(TopoError::BadMac(s.to_string()));
            }
            *byte = u8::from_str_radix(part, 16).map_err(|_| TopoError::BadMac(s.to_string()))?;
        }
        if parts.next().is_some() {
            return Err(TopoError::BadMac(s.to_string()));
        }
        Ok(Self(out))
    }
}

/// A port on a device, written `dev:port`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PortRef {
    pub device: DeviceId,
    pub port: u16,
}

impl PortRef {
    pub fn new(device: DeviceId, port: u16) -> Self {
        Self { device, port }
    }
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.device, self.port)
    }
}

impl FromStr for PortRef {
    type Err = TopoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (dev, port) = s.rsplit_once(':').ok_or_else(|| TopoError::BadPortRef(s.to_string()))?;
        let port = port.parse().map_err(|_| TopoError::BadPortRef(s.to_string()))?;
        Ok(Self {
            device: DeviceId::new(dev)?,
            port,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Device {
    pub id: DeviceId,
    /// Absent for backbone devices.
    pub region: Option<String>,
    pub port_count: u16,
}

/// Bidirectional link. Stored with `a < b`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Link {
    pub a: PortRef,
    pub b: PortRef,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Host {
    pub name: String,
    pub mac: MacAddr,
    pub ip: Ipv4Addr,
    pub attach: PortRef,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub name: String,
    pub prefixes: Vec<Ipv4Net>,
    pub devices: BTreeSet<DeviceId>,
}

impl Region {
    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        self.prefixes.iter().any(|p| p.contains(&ip))
    }
}

/// What sits at the far side of a device port.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Attachment {
    /// The peer port of a link.
    Link(PortRef),
    /// Index into [`Topology::hosts`].
    Host(usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopoError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid device id {0:?}")]
    BadDeviceId(String),
    #[error("invalid port reference {0:?} (expected dev:port)")]
    BadPortRef(String),
    #[error("invalid MAC address {0:?}")]
    BadMac(String),
    #[error("invalid IPv4 address {0:?}")]
    BadIp(String),
    #[error("invalid IPv4 prefix {0:?}")]
    BadPrefix(String),
    #[error("duplicate device {0}")]
    DuplicateDevice(DeviceId),
    #[error("duplicate host {0}")]
    DuplicateHost(String),
    #[error("duplicate region {0}")]
    DuplicateRegion(String),
    #[error("host {host} reuses MAC address {mac}")]
    DuplicateMac { host: String, mac: MacAddr },
    #[error("host {host} reuses IP address {ip}")]
    DuplicateIp { host: String, ip: Ipv4Addr },
    #[error("device {0} has no ports")]
    NoPorts(DeviceId),
    #[error("{context} references unknown device {device}")]
    UnknownDevice { context: String, device: DeviceId },
    #[error("device {device} references unknown region {region}")]
    UnknownRegion { device: DeviceId, region: String },
    #[error("port {port} out of range (device has {port_count} ports)")]
    PortOutOfRange { port: PortRef, port_count: u16 },
    #[error("port {0} is used more than once")]
    PortInUse(PortRef),
    #[error("link connects port {0} to itself")]
    SelfLink(PortRef),
    #[error("region {region} lists device {device} whose region is {actual:?}")]
    RegionMismatch {
        region: String,
        device: DeviceId,
        actual: Option<String>,
    },
    #[error("prefix {a_prefix} of region {a_region} overlaps prefix {b_prefix} of region {b_region}")]
    OverlappingPrefixes {
        a_region: String,
        a_prefix: Ipv4Net,
        b_region: String,
        b_prefix: Ipv4Net,
    },
    #[error("host {host} address {ip} is not inside any region prefix")]
    HostOutsideRegions { host: String, ip: Ipv4Addr },
    #[error("linear topology needs at least one switch")]
    EmptyLinear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    devices: Vec<Device>,
    links: Vec<Link>,
    hosts: Vec<Host>,
    regions: Vec<Region>,
    device_index: BTreeMap<DeviceId, usize>,
    ports: BTreeMap<PortRef, Attachment>,
}

impl Topology {
    /// Validates the parts and assembles them in canonical order.
    pub fn new(
        mut devices: Vec<Device>,
        links: Vec<Link>,
        mut hosts: Vec<Host>,
        mut regions: Vec<Region>,
    ) -> Result<Self, TopoError> {
        devices.sort_by(|x, y| x.id.cmp(&y.id));
        let mut device_index = BTreeMap::new();
        for (i, d) in devices.iter().enumerate() {
            if d.port_count == 0 {
                return Err(TopoError::NoPorts(d.id.clone()));
            }
            if device_index.insert(d.id.clone(), i).is_some() {
                return Err(TopoError::DuplicateDevice(d.id.clone()));
            }
        }

        let check_port = |p: &PortRef, context: &str| -> Result<(), TopoError> {
            let dev = device_index
                .get(&p.device)
                .map(|&i| &devices[i])
                .ok_or_else(|| TopoError::UnknownDevice {
                    context: context.to_string(),
                    device: p.device.clone(),
                })?;
            if p.port == 0 || p.port > dev.port_count {
                return Err(TopoError::PortOutOfRange {
                    port: p.clone(),
                    port_count: dev.port_count,
                });
            }
            Ok(())
        };

        let mut ports = BTreeMap::new();
        let mut links: Vec<Link> = links
            .into_iter()
            .map(|l| if l.a <= l.b { l } else { Link { a: l.b, b: l.a } })
            .collect();
        links.sort();
        for l in &links {
            let context = format!("link {} - {}", l.a, l.b);
            check_port(&l.a, &context)?;
            check_port(&l.b, &context)?;
            if l.a == l.b {
                return Err(TopoError::SelfLink(l.a.clone()));
            }
            for (here, there) in [(&l.a, &l.b), (&l.b, &l.a)] {
                if ports.insert(here.clone(), Attachment::Link(there.clone())).is_some() {
                    return Err(TopoError::PortInUse(here.clone()));
                }
            }
        }

        regions.sort_by(|x, y| x.name.cmp(&y.name));
        for w in regions.windows(2) {
            if w[0].name == w[1].name {
                return Err(TopoError::DuplicateRegion(w[0].name.clone()));
            }
        }
        for r in regions.iter_mut() {
            for p in r.prefixes.iter_mut() {
                *p = p.trunc();
            }
            r.prefixes.sort();
            r.prefixes.dedup();
        }
        check_disjoint(&regions)?;
        for r in &regions {
            for id in &r.devices {
                let dev = device_index
                    .get(id)
                    .map(|&i| &devices[i])
                    .ok_or_else(|| TopoError::UnknownDevice {
                        context: format!("region {}", r.name),
                        device: id.clone(),
                    })?;
                if dev.region.as_deref() != Some(r.name.as_str()) {
                    return Err(TopoError::RegionMismatch {
                        region: r.name.clone(),
                        device: id.clone(),
                        actual: dev.region.clone(),
                    });
                }
            }
        }
        for d in &devices {
            if let Some(name) = &d.region {
                match regions.iter().find(|r| &r.name == name) {
                    None => {
                        return Err(TopoError::UnknownRegion {
                            device: d.id.clone(),
                            region: name.clone(),
                        })
                    }
                    Some(r) if !r.devices.contains(&d.id) => {
                        return Err(TopoError::RegionMismatch {
                            region: name.clone(),
                            device: d.id.clone(),
                            actual: d.region.clone(),
                        })
                    }
                    Some(_) => {}
                }
            }
        }

        hosts.sort_by(|x, y| x.name.cmp(&y.name));
        let mut macs = BTreeSet::new();
        let mut ips = BTreeSet::new();
        for (i, h) in hosts.iter().enumerate() {
            if i > 0 && hosts[i - 1].name == h.name {
                return Err(TopoError::DuplicateHost(h.name.clone()));
            }
            if !macs.insert(h.mac) {
                return Err(TopoError::DuplicateMac {
                    host: h.name.clone(),
                    mac: h.mac,
                });
            }
            if !ips.insert(h.ip) {
                return Err(TopoError::DuplicateIp {
                    host: h.name.clone(),
                    ip: h.ip,
                });
            }
            check_port(&h.attach, &format!("host {}", h.name))?;
            if ports.insert(h.attach.clone(), Attachment::Host(i)).is_some() {
                return Err(TopoError::PortInUse(h.attach.clone()));
            }
            if !regions.iter().any(|r| r.contains(h.ip)) {
                return Err(TopoError::HostOutsideRegions {
                    host: h.name.clone(),
                    ip: h.ip,
                });
            }
        }

        Ok(Self {
            devices,
            links,
            hosts,
            regions,
            device_index,
            ports,
        })
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn hosts(&self) -> &[Host] {
        &self.hosts
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn device(&self, id: &DeviceId) -> Option<&Device> {
        self.device_index.get(id).map(|&i| &self.devices[i])
    }

    pub fn contains_device(&self, id: &DeviceId) -> bool {
        self.device_index.contains_key(id)
    }

    /// Looks a device up by its textual id.
    pub fn device_by_name(&self, id: &str) -> Option<&Device> {
        self.devices
            .binary_search_by(|d| d.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.devices[i])
    }

    pub fn host(&self, name: &str) -> Option<&Host> {
        self.hosts
            .binary_search_by(|h| h.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.hosts[i])
    }

    pub fn host_by_ip(&self, ip: Ipv4Addr) -> Option<&Host> {
        self.hosts.iter().find(|h| h.ip == ip)
    }

    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    /// The unique region whose prefixes contain `ip`.
    pub fn region_of_ip(&self, ip: Ipv4Addr) -> Option<&str> {
        self.regions.iter().find(|r| r.contains(ip)).map(|r| r.name.as_str())
    }

    /// What is attached to the far side of `port`, if anything.
    pub fn attachment(&self, port: &PortRef) -> Option<&Attachment> {
        self.ports.get(port)
    }

    /// Linked neighbours of `dev` as `(local port, peer port)`, ordered by
    /// local port.
    pub fn neighbors<'a>(&'a self, dev: &DeviceId) -> impl Iterator<Item = (u16, &'a PortRef)> + 'a {
        let start = PortRef::new(dev.clone(), 0);
        let dev = dev.clone();
        self.ports
            .range(start..)
            .take_while(move |(p, _)| p.device == dev)
            .filter_map(|(p, a)| match a {
                Attachment::Link(peer) => Some((p.port, peer)),
                Attachment::Host(_) => None,
            })
    }

    /// Lowest-numbered local port on `from` that links to `to`, with the
    /// matching peer port.
    pub fn link_ports(&self, from: &DeviceId, to: &DeviceId) -> Option<(u16, u16)> {
        self.neighbors(from)
            .find(|(_, peer)| &peer.device == to)
            .map(|(port, peer)| (port, peer.port))
    }

    /// Whether `a` and `b` are joined by at least one link.
    pub fn adjacent(&self, a: &DeviceId, b: &DeviceId) -> bool {
        self.link_ports(a, b).is_some()
    }

    /// Re-checks every structural invariant.
    pub fn validate(&self) -> Result<(), TopoError> {
        Topology::new(
            self.devices.clone(),
            self.links.clone(),
            self.hosts.clone(),
            self.regions.clone(),
        )
        .map(|_| ())
    }
}

fn check_disjoint(regions: &[Region]) -> Result<(), TopoError> {
    let span = |p: &Ipv4Net| (u32::from(p.network()), u32::from(p.broadcast()));
    for (i, ra) in regions.iter().enumerate() {
        for rb in &regions[i + 1..] {
            for pa in &ra.prefixes {
                for pb in &rb.prefixes {
                    let ((a_lo, a_hi), (b_lo, b_hi)) = (span(pa), span(pb));
                    if a_lo <= b_hi && b_lo <= a_hi {
                        return Err(TopoError::OverlappingPrefixes {
                            a_region: ra.name.clone(),
                            a_prefix: *pa,
                            b_region: rb.name.clone(),
                            b_prefix: *pb,
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

// On-disk representation.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFile {
    devices: Vec<DeviceEntry>,
    #[serde(default)]
    links: Vec<LinkEntry>,
    #[serde(default)]
    hosts: Vec<HostEntry>,
    #[serde(default)]
    regions: Vec<RegionEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceEntry {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    region: Option<String>,
    ports: u16,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkEntry {
    a: String,
    b: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HostEntry {
    name: String,
    mac: String,
    ip: String,
    attach: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionEntry {
    name: String,
    prefixes: Vec<String>,
    devices: Vec<String>,
}

/// Parses a JSON topology document and validates it.
pub fn parse_topology(text: &str) -> Result<Topology, TopoError> {
    let file: TopologyFile = serde_json::from_str(text).map_err(|e| TopoError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let devices = file
        .devices
        .into_iter()
        .map(|d| {
            Ok(Device {
                id: DeviceId::new(d.id)?,
                region: d.region,
                port_count: d.ports,
            })
        })
        .collect::<Result<Vec<_>, TopoError>>()?;
    let links = file
        .links
        .into_iter()
        .map(|l| {
            Ok(Link {
                a: l.a.parse()?,
                b: l.b.parse()?,
            })
        })
        .collect::<Result<Vec<_>, TopoError>>()?;
    let hosts = file
        .hosts
        .into_iter()
        .map(|h| {
            Ok(Host {
                mac: h.mac.parse()?,
                ip: h.ip.parse().map_err(|_| TopoError::BadIp(h.ip.clone()))?,
                attach: h.attach.parse()?,
                name: h.name,
            })
        })
        .collect::<Result<Vec<_>, TopoError>>()?;
    let regions = file
        .regions
        .into_iter()
        .map(|r| {
            Ok(Region {
                prefixes: r
                    .prefixes
                    .iter()
                    .map(|p| p.parse().map_err(|_| TopoError::BadPrefix(p.clone())))
                    .collect::<Result<_, _>>()?,
                devices: r.devices.into_iter().map(DeviceId::new).collect::<Result<_, _>>()?,
                name: r.name,
            })
        })
        .collect::<Result<Vec<_>, TopoError>>()?;
    Topology::new(devices, links, hosts, regions)
}

/// Formats a topology as canonical JSON: every list sorted.
pub fn format_topology(t: &Topology) -> String {
    let mut file = TopologyFile {
        devices: t
            .devices
            .iter()
            .map(|d| DeviceEntry {
                id: d.id.to_string(),
                region: d.region.clone(),
                ports: d.port_count,
            })
            .collect(),
        links: t
            .links
            .iter()
            .map(|l| LinkEntry {
                a: l.a.to_string(),
                b: l.b.to_string(),
            })
            .collect(),
        hosts: t
            .hosts
            .iter()
            .map(|h| HostEntry {
                name: h.name.clone(),
                mac: h.mac.to_string(),
                ip: h.ip.to_string(),
                attach: h.attach.to_string(),
            })
            .collect(),
        regions: t
            .regions
            .iter()
            .map(|r| RegionEntry {
                name: r.name.clone(),
                prefixes: r.prefixes.iter().map(|p| p.to_string()).collect(),
                devices: r.devices.iter().map(|d| d.to_string()).collect(),
            })
            .collect(),
    };
    file.devices.sort_by(|x, y| x.id.cmp(&y.id));
    file.links.sort_by(|x, y| (&x.a, &x.b).cmp(&(&y.a, &y.b)));
    file.hosts.sort_by(|x, y| x.name.cmp(&y.name));
    file.regions.sort_by(|x, y| x.name.cmp(&y.name));
    for r in file.regions.iter_mut() {
        r.prefixes.sort();
        r.devices.sort();
    }
    let mut out = serde_json::to_string_pretty(&file).expect("topology serializes");
    out.push('\n');
    out
}

fn dev(id: &str) -> DeviceId {
    DeviceId(id.to_string())
}

fn port(id: &str, port: u16) -> PortRef {
    PortRef::new(dev(id), port)
}

/// Switches `s1..sn` in a line. Port 1 of every switch faces `s1`, port 2
/// faces `sn`; `h1` sits on `s1:1` and `h2` on `sn:2`.
pub fn gen_linear(n: usize) -> Result<Topology, TopoError> {
    if n == 0 {
        return Err(TopoError::EmptyLinear);
    }
    let names: Vec<String> = (1..=n).map(|i| format!("s{i}")).collect();
    let devices = names
        .iter()
        .map(|s| Device {
            id: dev(s),
            region: Some("R".into()),
            port_count: 2,
        })
        .collect();
    let links = names
        .windows(2)
        .map(|w| Link {
            a: port(&w[0], 2),
            b: port(&w[1], 1),
        })
        .collect();
    let hosts = vec![
        Host {
            name: "h1".into(),
            mac: MacAddr::from_u64(1),
            ip: Ipv4Addr::new(10, 0, 0, 1),
            attach: port(&names[0], 1),
        },
        Host {
            name: "h2".into(),
            mac: MacAddr::from_u64(2),
            ip: Ipv4Addr::new(10, 0, 0, 2),
            attach: port(&names[n - 1], 2),
        },
    ];
    let regions = vec![Region {
        name: "R".into(),
        prefixes: vec!["10.0.0.0/24".parse().expect("literal prefix")],
        devices: names.iter().map(|s| dev(s)).collect(),
    }];
    Topology::new(devices, links, hosts, regions)
}

/// The fixed three-region fixture.
///
/// ```text
///   hA1    hA2        hB1    hB2
///    |      |          |      |
///   a1 --- a2 ------- b1 --- b2
///           \                 |
///            \--- c1 ---------/
///                 |  \
///                hC1  c2 -- hC2
/// ```
///
/// Port 1 of every switch carries its host.
pub fn gen_three_region() -> Topology {
    let sw = |id: &str, region: &str, ports: u16| Device {
        id: dev(id),
        region: Some(region.into()),
        port_count: ports,
    };
    let devices = vec![
        sw("a1", "A", 2),
        sw("a2", "A", 4),
        sw("b1", "B", 3),
        sw("b2", "B", 3),
        sw("c1", "C", 4),
        sw("c2", "C", 2),
    ];
    let link = |a: (&str, u16), b: (&str, u16)| Link {
        a: port(a.0, a.1),
        b: port(b.0, b.1),
    };
    let links = vec![
        link(("a1", 2), ("a2", 2)),
        link(("b1", 2), ("b2", 2)),
        link(("c1", 2), ("c2", 2)),
        link(("a2", 3), ("b1", 3)),
        link(("b2", 3), ("c1", 3)),
        link(("a2", 4), ("c1", 4)),
    ];
    let hosts = [
        ("hA1", [10, 0, 1, 1], "a1"),
        ("hA2", [10, 0, 1, 2], "a2"),
        ("hB1", [10, 0, 2, 1], "b1"),
        ("hB2", [10, 0, 2, 2], "b2"),
        ("hC1", [10, 0, 3, 1], "c1"),
        ("hC2", [10, 0, 3, 2], "c2"),
    ]
    .iter()
    .enumerate()
    .map(|(i, (name, ip, sw))| Host {
        name: name.to_string(),
        mac: MacAddr::from_u64(i as u64 + 1),
        ip: Ipv4Addr::from(*ip),
        attach: port(sw, 1),
    })
    .collect();
    let region = |name: &str, prefix: &str, devs: [&str; 2]| Region {
        name: name.into(),
        prefixes: vec![prefix.parse().expect("literal prefix")],
        devices: devs.iter().map(|d| dev(d)).collect(),
    };
    let regions = vec![
        region("A", "10.0.1.0/24", ["a1", "a2"]),
        region("B", "10.0.2.0/24", ["b1", "b2"]),
        region("C", "10.0.3.0/24", ["c1", "c2"]),
    ];
    Topology::new(devices, links, hosts, regions).expect("three-region fixture is valid")
}
