//! Path Selection Service: pluggable path algorithms over a [`Topology`],
//! honoring policy waypoints.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::policy::Policy;
use crate::topo::{DeviceId, PortRef, Topology};

/// Name of the always-present hop-count algorithm.
pub const SHORTEST: &str = "shortest";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PathError {
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("no path from {src} to {dst}")]
    NoPath { src: DeviceId, dst: DeviceId },
    #[error("unknown path algorithm {0:?}")]
    UnknownAlgorithm(String),
    #[error("devices {from} and {to} are not linked")]
    NotAdjacent { from: DeviceId, to: DeviceId },
    #[error("empty route")]
    EmptyRoute,
}

/// A device sequence produced by a path algorithm.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Route {
    pub devices: Vec<DeviceId>,
    /// Set when waypoint concatenation made the route visit a device twice.
    pub revisits: bool,
}

impl Route {
    fn simple(devices: Vec<DeviceId>) -> Self {
        Self {
            devices,
            revisits: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hop {
    pub device: DeviceId,
    pub in_port: u16,
    pub out_port: u16,
}

/// A route bound to concrete ports between two attachment points.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Path {
    pub hops: Vec<Hop>,
    pub src_attach: PortRef,
    pub dst_attach: PortRef,
    pub revisits: bool,
    /// Algorithm that produced the route.
    pub algorithm: String,
}

impl Path {
    /// Binds `route` to ports: the first hop enters on `ingress`, the last
    /// leaves on `egress`, and consecutive devices use their lowest linking
    /// port.
    pub fn bind(
        t: &Topology,
        route: Route,
        ingress: PortRef,
        egress: PortRef,
        algorithm: impl Into<String>,
    ) -> Result<Path, PathError> {
        let devs = &route.devices;
        if devs.is_empty() {
            return Err(PathError::EmptyRoute);
        }
        if devs[0] != ingress.device {
            return Err(PathError::NotAdjacent {
                from: ingress.device.clone(),
                to: devs[0].clone(),
            });
        }
        if devs[devs.len() - 1] != egress.device {
            return Err(PathError::NotAdjacent {
                from: devs[devs.len() - 1].clone(),
                to: egress.device.clone(),
            });
        }
        let mut hops = Vec::with_capacity(devs.len());
        let mut in_port = ingress.port;
        for (i, device) in devs.iter().enumerate() {
            let out_port = match devs.get(i + 1) {
                Some(next) => {
                    let (out, peer_in) = t.link_ports(device, next).ok_or_else(|| PathError::NotAdjacent {
                        from: device.clone(),
                        to: next.clone(),
                    })?;
                    hops.push(Hop {
                        device: device.clone(),
                        in_port,
                        out_port: out,
                    });
                    in_port = peer_in;
                    continue;
                }
                None => egress.port,
            };
            hops.push(Hop {
                device: device.clone(),
                in_port,
                out_port,
            });
        }
        Ok(Path {
            hops,
            src_attach: ingress,
            dst_attach: egress,
            revisits: route.revisits,
            algorithm: algorithm.into(),
        })
    }

    pub fn devices(&self) -> Vec<DeviceId> {
        self.hops.iter().map(|h| h.device.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    /// The same path traversed from `dst_attach` back to `src_attach`.
    pub fn reversed(&self) -> Path {
        Path {
            hops: self
                .hops
                .iter()
                .rev()
                .map(|h| Hop {
                    device: h.device.clone(),
                    in_port: h.out_port,
                    out_port: h.in_port,
                })
                .collect(),
            src_attach: self.dst_attach.clone(),
            dst_attach: self.src_attach.clone(),
            revisits: self.revisits,
            algorithm: self.algorithm.clone(),
        }
    }

    /// Checks the port-level adjacency invariant against `t`.
    pub fn check(&self, t: &Topology) -> Result<(), PathError> {
        let first = self.hops.first().ok_or(PathError::EmptyRoute)?;
        let last = self.hops.last().ok_or(PathError::EmptyRoute)?;
        if first.device != self.src_attach.device || first.in_port != self.src_attach.port {
            return Err(PathError::NotAdjacent {
                from: self.src_attach.device.clone(),
                to: first.device.clone(),
            });
        }
        if last.device != self.dst_attach.device || last.out_port != self.dst_attach.port {
            return Err(PathError::NotAdjacent {
                from: last.device.clone(),
                to: self.dst_attach.device.clone(),
            });
        }
        for w in self.hops.windows(2) {
            let out = PortRef::new(w[0].device.clone(), w[0].out_port);
            let expected = PortRef::new(w[1].device.clone(), w[1].in_port);
            match t.attachment(&out) {
                Some(crate::topo::Attachment::Link(peer)) if *peer == expected => {}
                _ => {
                    return Err(PathError::NotAdjacent {
                        from: w[0].device.clone(),
                        to: w[1].device.clone(),
                    })
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.hops.iter().map(|h| h.device.as_str()).collect();
        write!(f, "[{}]", names.join(","))
    }
}

/// Minimal hop count from `src` to `dst`; ties go to the lexicographically
/// smallest device sequence.
pub fn shortest_path(t: &Topology, src: &DeviceId, dst: &DeviceId) -> Result<Route, PathError> {
    for d in [src, dst] {
        if !t.contains_device(d) {
            return Err(PathError::UnknownDevice(d.clone()));
        }
    }
    // distances towards dst, then walk forward taking the smallest neighbour
    // one step closer at every hop
    let mut dist: BTreeMap<&DeviceId, usize> = BTreeMap::new();
    dist.insert(dst, 0);
    let mut queue = VecDeque::from([dst]);
    while let Some(cur) = queue.pop_front() {
        let d = dist[cur];
        for (_, peer) in t.neighbors(cur) {
            if !dist.contains_key(&peer.device) {
                dist.insert(&peer.device, d + 1);
                queue.push_back(&peer.device);
            }
        }
    }
    let Some(&total) = dist.get(src) else {
        return Err(PathError::NoPath {
            src: src.clone(),
            dst: dst.clone(),
        });
    };
    let mut route = Vec::with_capacity(total + 1);
    let mut cur = src;
    route.push(cur.clone());
    for remaining in (0..total).rev() {
        cur = t
            .neighbors(cur)
            .map(|(_, peer)| &peer.device)
            .filter(|n| dist.get(n) == Some(&remaining))
            .min()
            .expect("BFS distances guarantee a closer neighbour");
        route.push(cur.clone());
    }
    Ok(Route::simple(route))
}

/// Concatenation of shortest segments `src -> w1 -> ... -> wk -> dst`.
pub fn path_via(t: &Topology, src: &DeviceId, dst: &DeviceId, waypoints: &[DeviceId]) -> Result<Route, PathError> {
    let stops: Vec<&DeviceId> = std::iter::once(src)
        .chain(waypoints.iter())
        .chain(std::iter::once(dst))
        .collect();
    let mut devices: Vec<DeviceId> = vec![src.clone()];
    for w in stops.windows(2) {
        let seg = shortest_path(t, w[0], w[1])?;
        devices.extend(seg.devices.into_iter().skip(1));
    }
    let mut seen = std::collections::BTreeSet::new();
    let revisits = !devices.iter().all(|d| seen.insert(d));
    Ok(Route { devices, revisits })
}

/// A route-finding strategy registered under a name.
pub trait PathAlgorithm: Send + Sync {
    fn route(&self, t: &Topology, src: &DeviceId, dst: &DeviceId) -> Result<Route, PathError>;
}

impl<F> PathAlgorithm for F
where
    F: Fn(&Topology, &DeviceId, &DeviceId) -> Result<Route, PathError> + Send + Sync,
{
    fn route(&self, t: &Topology, src: &DeviceId, dst: &DeviceId) -> Result<Route, PathError> {
        self(t, src, dst)
    }
}

pub struct AlgorithmRegistry {
    algorithms: BTreeMap<String, Box<dyn PathAlgorithm>>,
}

impl Default for AlgorithmRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for AlgorithmRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.algorithms.keys()).finish()
    }
}

impl AlgorithmRegistry {
    pub fn new() -> Self {
        let mut algorithms: BTreeMap<String, Box<dyn PathAlgorithm>> = BTreeMap::new();
        algorithms.insert(SHORTEST.to_string(), Box::new(shortest_path));
        Self { algorithms }
    }

    /// Adds or replaces an algorithm. `shortest` cannot be replaced.
    pub fn register(&mut self, name: impl Into<String>, algorithm: impl PathAlgorithm + 'static) -> bool {
        let name = name.into();
        if name == SHORTEST {
            return false;
        }
        self.algorithms.insert(name, Box::new(algorithm));
        true
    }

    pub fn contains(&self, name: &str) -> bool {
        self.algorithms.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.algorithms.keys().map(String::as_str)
    }

    /// Path for `policy` between two host attachment points: waypoint
    /// concatenation when the policy names devices, otherwise `algorithm`.
    pub fn select_path(
        &self,
        t: &Topology,
        policy: &Policy,
        algorithm: &str,
        src_attach: &PortRef,
        dst_attach: &PortRef,
    ) -> Result<Path, PathError> {
        let (route, name) = if policy.via.is_empty() {
            let algo = self
                .algorithms
                .get(algorithm)
                .ok_or_else(|| PathError::UnknownAlgorithm(algorithm.to_string()))?;
            (
                algo.route(t, &src_attach.device, &dst_attach.device)?,
                algorithm.to_string(),
            )
        } else {
            (
                path_via(t, &src_attach.device, &dst_attach.device, &policy.via)?,
                "via".to_string(),
            )
        };
        let path = Path::bind(t, route, src_attach.clone(), dst_attach.clone(), name)?;
        debug_assert!(path.check(t).is_ok());
        Ok(path)
    }
}
