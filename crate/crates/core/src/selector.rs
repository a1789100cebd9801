//! Packet classification into traffic profiles and construction of the
//! exact-match field sets used by flow rules.

use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

use crate::topo::MacAddr;

pub const ETH_TYPE_IPV4: u16 = 0x0800;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IpProto {
    Icmp,
    Tcp,
    Udp,
}

impl IpProto {
    pub fn number(self) -> u8 {
        match self {
            IpProto::Icmp => 1,
            IpProto::Tcp => 6,
            IpProto::Udp => 17,
        }
    }

    pub fn has_ports(self) -> bool {
        matches!(self, IpProto::Tcp | IpProto::Udp)
    }
}

impl fmt::Display for IpProto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IpProto::Icmp => "icmp",
            IpProto::Tcp => "tcp",
            IpProto::Udp => "udp",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SelectorError {
    #[error("malformed packet: {0}")]
    MalformedPacket(&'static str),
    #[error("packet does not match profile {0}")]
    ProfileMismatch(String),
    #[error("profile {0} is already registered")]
    DuplicateProfile(String),
    #[error("profile syntax error at token {position}: {message}")]
    Syntax { position: usize, message: String },
}

/// An IPv4 packet as seen by the controller.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packet {
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
    pub eth_type: u16,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub ip_proto: IpProto,
    pub l4_src: Option<u16>,
    pub l4_dst: Option<u16>,
}

impl Packet {
    fn ip(src_ip: Ipv4Addr, dst_ip: Ipv4Addr, ip_proto: IpProto, ports: Option<(u16, u16)>) -> Self {
        Self {
            src_mac: MacAddr::default(),
            dst_mac: MacAddr::default(),
            eth_type: ETH_TYPE_IPV4,
            src_ip,
            dst_ip,
            ip_proto,
            l4_src: ports.map(|p| p.0),
            l4_dst: ports.map(|p| p.1),
        }
    }

    pub fn tcp(src_ip: Ipv4Addr, dst_ip: Ipv4Addr, sport: u16, dport: u16) -> Self {
        Self::ip(src_ip, dst_ip, IpProto::Tcp, Some((sport, dport)))
    }

    pub fn udp(src_ip: Ipv4Addr, dst_ip: Ipv4Addr, sport: u16, dport: u16) -> Self {
        Self::ip(src_ip, dst_ip, IpProto::Udp, Some((sport, dport)))
    }

    pub fn icmp(src_ip: Ipv4Addr, dst_ip: Ipv4Addr) -> Self {
        Self::ip(src_ip, dst_ip, IpProto::Icmp, None)
    }

    pub fn with_macs(mut self, src: MacAddr, dst: MacAddr) -> Self {
        self.src_mac = src;
        self.dst_mac = dst;
        self
    }

    /// The reply direction: addresses and ports swapped.
    pub fn reversed(&self) -> Self {
        Self {
            src_mac: self.dst_mac,
            dst_mac: self.src_mac,
            eth_type: self.eth_type,
            src_ip: self.dst_ip,
            dst_ip: self.src_ip,
            ip_proto: self.ip_proto,
            l4_src: self.l4_dst,
            l4_dst: self.l4_src,
        }
    }

    pub fn validate(&self) -> Result<(), SelectorError> {
        if self.eth_type != ETH_TYPE_IPV4 {
            return Err(SelectorError::MalformedPacket("only IPv4 is supported"));
        }
        let has_ports = self.l4_src.is_some() && self.l4_dst.is_some();
        let no_ports = self.l4_src.is_none() && self.l4_dst.is_none();
        if self.ip_proto.has_ports() && !has_ports {
            return Err(SelectorError::MalformedPacket("TCP/UDP packet without ports"));
        }
        if !self.ip_proto.has_ports() && !no_ports {
            return Err(SelectorError::MalformedPacket("ICMP packet with ports"));
        }
        Ok(())
    }
}

/// Exact-match header constraints. An absent field matches anything.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MatchFields {
    pub eth_type: Option<u16>,
    pub ip_proto: Option<IpProto>,
    pub src_ip: Option<Ipv4Addr>,
    pub dst_ip: Option<Ipv4Addr>,
    pub l4_src: Option<u16>,
    pub l4_dst: Option<u16>,
}

impl MatchFields {
    pub fn matches(&self, pkt: &Packet) -> bool {
        fn field<T: PartialEq>(want: Option<T>, have: T) -> bool {
            want.is_none_or(|w| w == have)
        }
        fn port(want: Option<u16>, have: Option<u16>) -> bool {
            want.is_none_or(|w| have == Some(w))
        }
        field(self.eth_type, pkt.eth_type)
            && field(self.ip_proto, pkt.ip_proto)
            && field(self.src_ip, pkt.src_ip)
            && field(self.dst_ip, pkt.dst_ip)
            && port(self.l4_src, pkt.l4_src)
            && port(self.l4_dst, pkt.l4_dst)
    }

    pub fn is_valid(&self) -> bool {
        let l4 = self.l4_src.is_some() || self.l4_dst.is_some();
        self.eth_type.is_some() && (!l4 || self.ip_proto.is_some_and(IpProto::has_ports))
    }
}

impl fmt::Display for MatchFields {
    /// `{key=value,...}` with keys in alphabetical order.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(v) = self.dst_ip {
            parts.push(format!("dst_ip={v}"));
        }
        if let Some(v) = self.eth_type {
            parts.push(format!("eth_type=0x{v:04x}"));
        }
        if let Some(v) = self.ip_proto {
            parts.push(format!("ip_proto={}", v.number()));
        }
        if let Some(v) = self.l4_dst {
            parts.push(format!("l4_dst={v}"));
        }
        if let Some(v) = self.l4_src {
            parts.push(format!("l4_src={v}"));
        }
        if let Some(v) = self.src_ip {
            parts.push(format!("src_ip={v}"));
        }
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// A set of port ranges, normalized to sorted, non-overlapping spans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PortSet(Vec<(u16, u16)>);

impl PortSet {
    pub fn new(mut spans: Vec<(u16, u16)>) -> Self {
        spans.sort();
        let mut out: Vec<(u16, u16)> = Vec::with_capacity(spans.len());
        for (lo, hi) in spans {
            match out.last_mut() {
                Some(last) if u32::from(lo) <= u32::from(last.1) + 1 => last.1 = last.1.max(hi),
                _ => out.push((lo, hi)),
            }
        }
        Self(out)
    }

    pub fn single(port: u16) -> Self {
        Self(vec![(port, port)])
    }

    pub fn contains(&self, port: u16) -> bool {
        self.0.iter().any(|&(lo, hi)| lo <= port && port <= hi)
    }

    pub fn spans(&self) -> &[(u16, u16)] {
        &self.0
    }

    /// Lowest port in the set.
    pub fn first(&self) -> Option<u16> {
        self.0.first().map(|s| s.0)
    }
}

impl fmt::Display for PortSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .flat_map(|&(lo, hi)| match hi - lo {
                0 => vec![lo.to_string()],
                1 => vec![lo.to_string(), hi.to_string()],
                _ => vec![format!("{lo}-{hi}")],
            })
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for PortSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut spans = Vec::new();
        for item in s.split(',') {
            let num = |t: &str| t.parse::<u16>().map_err(|_| format!("invalid port {t:?}"));
            let span = match item.split_once('-') {
                Some((lo, hi)) => (num(lo)?, num(hi)?),
                None => (num(item)?, num(item)?),
            };
            if span.0 > span.1 {
                return Err(format!("empty port range {item:?}"));
            }
            spans.push(span);
        }
        Ok(Self::new(spans))
    }
}

/// Carried as metadata; it does not change forwarding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TrafficType {
    Realtime,
    #[default]
    BestEffort,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrafficProfile {
    pub name: String,
    /// `None` accepts any IPv4 packet.
    pub ip_proto: Option<IpProto>,
    pub dst_ports: Option<PortSet>,
    pub traffic_type: TrafficType,
}

impl TrafficProfile {
    pub fn new(name: impl Into<String>, ip_proto: Option<IpProto>) -> Self {
        Self {
            name: name.into(),
            ip_proto,
            dst_ports: None,
            traffic_type: TrafficType::BestEffort,
        }
    }

    pub fn ports(mut self, ports: PortSet) -> Self {
        self.dst_ports = Some(ports);
        self
    }

    pub fn realtime(mut self) -> Self {
        self.traffic_type = TrafficType::Realtime;
        self
    }

    pub fn matches(&self, pkt: &Packet) -> bool {
        pkt.eth_type == ETH_TYPE_IPV4
            && self.ip_proto.is_none_or(|p| p == pkt.ip_proto)
            && self
                .dst_ports
                .as_ref()
                .is_none_or(|set| pkt.l4_dst.is_some_and(|p| set.contains(p)))
    }

    /// 2 for protocol and ports, 1 for protocol only, 0 for plain IP.
    pub fn specificity(&self) -> u8 {
        match (self.ip_proto, &self.dst_ports) {
            (Some(_), Some(_)) => 2,
            (Some(_), None) => 1,
            _ => 0,
        }
    }

    /// Parses `profile <name> proto <tcp|udp|icmp|ip> [ports <list|lo-hi>] [realtime]`.
    pub fn parse_line(line: &str) -> Result<Self, SelectorError> {
        let err = |position: usize, message: String| SelectorError::Syntax { position, message };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let expect_kw = |i: usize, kw: &str| -> Result<(), SelectorError> {
            match tokens.get(i) {
                Some(t) if t.eq_ignore_ascii_case(kw) => Ok(()),
                Some(t) => Err(err(i, format!("expected {kw:?}, found {t:?}"))),
                None => Err(err(i, format!("expected {kw:?}"))),
            }
        };
        expect_kw(0, "profile")?;
        let name = tokens
            .get(1)
            .filter(|n| is_ident(n))
            .ok_or_else(|| err(1, "expected profile name".into()))?;
        expect_kw(2, "proto")?;
        let proto = match tokens.get(3).map(|t| t.to_ascii_lowercase()).as_deref() {
            Some("tcp") => Some(IpProto::Tcp),
            Some("udp") => Some(IpProto::Udp),
            Some("icmp") => Some(IpProto::Icmp),
            Some("ip") => None,
            _ => return Err(err(3, "expected tcp, udp, icmp or ip".into())),
        };
        let mut profile = TrafficProfile::new(*name, proto);
        let mut i = 4;
        while let Some(tok) = tokens.get(i) {
            match tok.to_ascii_lowercase().as_str() {
                "ports" if profile.dst_ports.is_none() => {
                    if !proto.is_some_and(IpProto::has_ports) {
                        return Err(err(i, "ports need tcp or udp".into()));
                    }
                    let list = tokens
                        .get(i + 1)
                        .ok_or_else(|| err(i + 1, "expected port list".into()))?;
                    profile.dst_ports = Some(list.parse().map_err(|m| err(i + 1, m))?);
                    i += 2;
                }
                "realtime" if profile.traffic_type == TrafficType::BestEffort => {
                    profile.traffic_type = TrafficType::Realtime;
                    i += 1;
                }
                _ => return Err(err(i, format!("unexpected token {tok:?}"))),
            }
        }
        Ok(profile)
    }
}

impl fmt::Display for TrafficProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let proto = self.ip_proto.map_or("ip".to_string(), |p| p.to_string());
        write!(f, "profile {} proto {}", self.name, proto)?;
        if let Some(ports) = &self.dst_ports {
            write!(f, " ports {ports}")?;
        }
        if self.traffic_type == TrafficType::Realtime {
            f.write_str(" realtime")?;
        }
        Ok(())
    }
}

pub(crate) fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Named traffic profiles, pre-populated with the built-ins.
#[derive(Clone, Debug)]
pub struct ProfileRegistry {
    profiles: BTreeMap<String, TrafficProfile>,
}

impl Default for ProfileRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl ProfileRegistry {
    pub fn empty() -> Self {
        Self {
            profiles: BTreeMap::new(),
        }
    }

    /// `web`, `ping`, `voip`, `video` and the catch-all `any`.
    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        let builtins = [
            TrafficProfile::new("web", Some(IpProto::Tcp)).ports(PortSet::new(vec![(80, 80), (443, 443)])),
            TrafficProfile::new("ping", Some(IpProto::Icmp)),
            TrafficProfile::new("voip", Some(IpProto::Udp))
                .ports(PortSet::new(vec![(5060, 5060), (16384, 32767)]))
                .realtime(),
            TrafficProfile::new("video", Some(IpProto::Udp))
                .ports(PortSet::single(5004))
                .realtime(),
            TrafficProfile::new("any", None),
        ];
        for p in builtins {
            reg.profiles.insert(p.name.clone(), p);
        }
        reg
    }

    pub fn register(&mut self, profile: TrafficProfile) -> Result<(), SelectorError> {
        if self.profiles.contains_key(&profile.name) {
            return Err(SelectorError::DuplicateProfile(profile.name));
        }
        self.profiles.insert(profile.name.clone(), profile);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TrafficProfile> {
        self.profiles.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.profiles.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TrafficProfile> {
        self.profiles.values()
    }

    /// Most specific matching profile; equal specificity goes to the
    /// alphabetically first name.
    pub fn classify(&self, pkt: &Packet) -> Option<&TrafficProfile> {
        // values() is in name order, so keeping the first maximum breaks ties alphabetically
        self.profiles
            .values()
            .filter(|p| p.matches(pkt))
            .fold(None, |best: Option<&TrafficProfile>, p| match best {
                Some(b) if b.specificity() >= p.specificity() => Some(b),
                _ => Some(p),
            })
    }
}

/// Forward and reverse selectors for the host-pair flow of `pkt`.
pub fn build_selectors(profile: &TrafficProfile, pkt: &Packet) -> Result<(MatchFields, MatchFields), SelectorError> {
    if !profile.matches(pkt) {
        return Err(SelectorError::ProfileMismatch(profile.name.clone()));
    }
    let forward = MatchFields {
        eth_type: Some(ETH_TYPE_IPV4),
        ip_proto: profile.ip_proto,
        src_ip: Some(pkt.src_ip),
        dst_ip: Some(pkt.dst_ip),
        l4_src: None,
        l4_dst: profile.dst_ports.as_ref().and(pkt.l4_dst),
    };
    let reverse = MatchFields {
        src_ip: forward.dst_ip,
        dst_ip: forward.src_ip,
        l4_src: forward.l4_dst,
        l4_dst: None,
        ..forward.clone()
    };
    Ok((forward, reverse))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn classify(reg: &ProfileRegistry, pkt: &Packet) -> String {
        reg.classify(pkt).unwrap().name.clone()
    }

    #[test]
    fn builtin_classification() {
        let reg = ProfileRegistry::with_builtins();
        let (a, b) = (ip("10.0.1.1"), ip("10.0.2.1"));
        assert_eq!(classify(&reg, &Packet::tcp(a, b, 40000, 80)), "web");
        assert_eq!(classify(&reg, &Packet::tcp(a, b, 40000, 443)), "web");
        assert_eq!(classify(&reg, &Packet::icmp(a, b)), "ping");
        assert_eq!(classify(&reg, &Packet::udp(a, b, 40000, 53)), "any");
        assert_eq!(classify(&reg, &Packet::udp(a, b, 40000, 5060)), "voip");
        assert_eq!(classify(&reg, &Packet::udp(a, b, 40000, 20000)), "voip");
        assert_eq!(classify(&reg, &Packet::udp(a, b, 40000, 5004)), "video");
        assert_eq!(classify(&reg, &Packet::tcp(a, b, 40000, 22)), "any");
    }

    #[test]
    fn tie_breaks_alphabetically() {
        let mut reg = ProfileRegistry::with_builtins();
        reg.register(TrafficProfile::new("alt-web", Some(IpProto::Tcp)).ports(PortSet::single(80)))
            .unwrap();
        let pkt = Packet::tcp(ip("10.0.0.1"), ip("10.0.0.2"), 1, 80);
        assert_eq!(classify(&reg, &pkt), "alt-web");
        let pkt = Packet::tcp(ip("10.0.0.1"), ip("10.0.0.2"), 1, 443);
        assert_eq!(classify(&reg, &pkt), "web");
    }

    #[test]
    fn registering_twice_fails() {
        let mut reg = ProfileRegistry::with_builtins();
        assert_eq!(
            reg.register(TrafficProfile::new("web", None)),
            Err(SelectorError::DuplicateProfile("web".into()))
        );
    }

    #[test]
    fn web_selectors() {
        let reg = ProfileRegistry::with_builtins();
        let pkt = Packet::tcp(ip("10.0.1.1"), ip("10.0.2.1"), 40000, 80);
        let (fwd, rev) = build_selectors(reg.get("web").unwrap(), &pkt).unwrap();
        assert_eq!(
            fwd,
            MatchFields {
                eth_type: Some(ETH_TYPE_IPV4),
                ip_proto: Some(IpProto::Tcp),
                src_ip: Some(ip("10.0.1.1")),
                dst_ip: Some(ip("10.0.2.1")),
                l4_src: None,
                l4_dst: Some(80),
            }
        );
        assert_eq!(
            rev,
            MatchFields {
                eth_type: Some(ETH_TYPE_IPV4),
                ip_proto: Some(IpProto::Tcp),
                src_ip: Some(ip("10.0.2.1")),
                dst_ip: Some(ip("10.0.1.1")),
                l4_src: Some(80),
                l4_dst: None,
            }
        );
        assert_eq!(
            fwd.to_string(),
            "{dst_ip=10.0.2.1,eth_type=0x0800,ip_proto=6,l4_dst=80,src_ip=10.0.1.1}"
        );
    }

    #[test]
    fn any_and_ping_selectors() {
        let reg = ProfileRegistry::with_builtins();
        let pkt = Packet::udp(ip("10.0.1.1"), ip("10.0.1.2"), 1, 53);
        let (fwd, _) = build_selectors(reg.get("any").unwrap(), &pkt).unwrap();
        assert_eq!(
            fwd,
            MatchFields {
                eth_type: Some(ETH_TYPE_IPV4),
                src_ip: Some(ip("10.0.1.1")),
                dst_ip: Some(ip("10.0.1.2")),
                ..Default::default()
            }
        );
        let pkt = Packet::icmp(ip("10.0.2.1"), ip("10.0.3.1"));
        let (fwd, rev) = build_selectors(reg.get("ping").unwrap(), &pkt).unwrap();
        assert_eq!(fwd.ip_proto, Some(IpProto::Icmp));
        assert_eq!((fwd.l4_src, fwd.l4_dst), (None, None));
        assert_eq!((rev.src_ip, rev.dst_ip), (fwd.dst_ip, fwd.src_ip));
        assert_eq!((rev.l4_src, rev.l4_dst), (None, None));
    }

    #[test]
    fn mismatched_profile_rejected() {
        let reg = ProfileRegistry::with_builtins();
        let pkt = Packet::icmp(ip("10.0.1.1"), ip("10.0.1.2"));
        assert_eq!(
            build_selectors(reg.get("web").unwrap(), &pkt),
            Err(SelectorError::ProfileMismatch("web".into()))
        );
    }

    #[test]
    fn profile_lines() {
        let p = TrafficProfile::parse_line("profile game proto udp ports 9999").unwrap();
        assert_eq!(
            p,
            TrafficProfile::new("game", Some(IpProto::Udp)).ports(PortSet::single(9999))
        );
        let voip = ProfileRegistry::with_builtins().get("voip").unwrap().clone();
        assert_eq!(
            voip.to_string(),
            "profile voip proto udp ports 5060,16384-32767 realtime"
        );
        assert_eq!(TrafficProfile::parse_line(&voip.to_string()).unwrap(), voip);
        assert!(TrafficProfile::parse_line("profile x proto icmp ports 1").is_err());
        assert!(TrafficProfile::parse_line("profile x proto sctp").is_err());
        assert!(TrafficProfile::parse_line("profile x proto tcp ports 9-3").is_err());
        assert!(TrafficProfile::parse_line("PROFILE x PROTO ip").is_ok());
    }

    #[test]
    fn packet_validation() {
        let mut pkt = Packet::icmp(ip("10.0.0.1"), ip("10.0.0.2"));
        assert!(pkt.validate().is_ok());
        pkt.l4_dst = Some(1);
        assert!(pkt.validate().is_err());
        let mut pkt = Packet::tcp(ip("10.0.0.1"), ip("10.0.0.2"), 1, 2);
        pkt.l4_src = None;
        assert!(pkt.validate().is_err());
    }
}
