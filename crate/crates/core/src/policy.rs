//! Application-based network policies: the one-line policy language and the
//! runtime policy store.
//!
//! ```text
//! intra <profile> region <r1,r2,...> [priority <n>] [via <d1,d2,...>]
//! inter <profile> from <src> to <dst> [priority <n>] [via <d1,d2,...>] [oneway]
//! ```
//!
//! Keywords are case-insensitive. Policies are ordered by descending
//! priority; equal priorities go to the policy added first.

use std::cmp::Reverse;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::selector::{is_ident, ProfileRegistry};
use crate::topo::{DeviceId, Topology};

/// Priority given to policies that do not state one.
pub const DEFAULT_PRIORITY: u16 = 10;
/// Lowest priority a policy may use; priority 1 belongs to controller drop rules.
pub const MIN_POLICY_PRIORITY: u16 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PolicyId(pub u64);

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetworkFunction {
    IntraSiteRoute,
    InterSiteRoute,
}

impl fmt::Display for NetworkFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetworkFunction::IntraSiteRoute => "intra-site-route",
            NetworkFunction::InterSiteRoute => "inter-site-route",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Scope {
    /// Traffic that starts and ends inside one of these regions.
    Intra { regions: BTreeSet<String> },
    /// Traffic from `src` to `dst`, and back when `bidirectional`.
    Inter {
        src: String,
        dst: String,
        bidirectional: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Policy {
    /// Assigned by the store.
    pub id: Option<PolicyId>,
    pub name: Option<String>,
    pub profile: String,
    pub scope: Scope,
    pub priority: u16,
    /// Devices the path must traverse, in order.
    pub via: Vec<DeviceId>,
    pub enabled: bool,
}

impl Policy {
    pub fn function(&self) -> NetworkFunction {
        match self.scope {
            Scope::Intra { .. } => NetworkFunction::IntraSiteRoute,
            Scope::Inter { .. } => NetworkFunction::InterSiteRoute,
        }
    }

    pub fn is_bidirectional(&self) -> bool {
        match self.scope {
            Scope::Intra { .. } => true,
            Scope::Inter { bidirectional, .. } => bidirectional,
        }
    }

    /// Whether traffic from `src` region to `dst` region falls in scope.
    pub fn covers(&self, src: &str, dst: &str) -> bool {
        match &self.scope {
            Scope::Intra { regions } => src == dst && regions.contains(src),
            Scope::Inter {
                src: s,
                dst: d,
                bidirectional,
            } => (s == src && d == dst) || (*bidirectional && s == dst && d == src),
        }
    }

    fn sort_key(&self) -> (Reverse<u16>, Option<PolicyId>) {
        (Reverse(self.priority), self.id)
    }

    fn regions(&self) -> Vec<&str> {
        match &self.scope {
            Scope::Intra { regions } => regions.iter().map(String::as_str).collect(),
            Scope::Inter { src, dst, .. } => vec![src, dst],
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("syntax error at column {column}: {message}")]
    Syntax { column: usize, message: String },
    #[error("unknown network function {0:?} (expected intra or inter)")]
    UnknownFunction(String),
    #[error("priority {0} out of range [{MIN_POLICY_PRIORITY}, 65535]")]
    PriorityOutOfRange(i64),
    #[error("source and destination region are both {0}")]
    SameRegion(String),
    #[error("unknown region {0}")]
    UnresolvedRegion(String),
    #[error("unknown device {0}")]
    UnresolvedDevice(DeviceId),
    #[error("unknown traffic profile {0}")]
    UnresolvedProfile(String),
    #[error("no policy with id {0}")]
    UnknownId(PolicyId),
}

struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices().chain(std::iter::once((line.len(), ' '))) {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push(Token {
                    text: &line[s..i],
                    column: s + 1,
                });
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    out
}

struct Parser<'a> {
    tokens: Vec<Token<'a>>,
    pos: usize,
    end_column: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, message: impl Into<String>) -> PolicyError {
        let column = self.tokens.get(self.pos).map_or(self.end_column, |t| t.column);
        PolicyError::Syntax {
            column,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<&'a str> {
        self.tokens.get(self.pos).map(|t| t.text)
    }

    fn next(&mut self, what: &str) -> Result<&'a str, PolicyError> {
        let t = self.peek().ok_or_else(|| self.error(format!("expected {what}")))?;
        self.pos += 1;
        Ok(t)
    }

    fn keyword(&mut self, kw: &str) -> Result<(), PolicyError> {
        match self.peek() {
            Some(t) if t.eq_ignore_ascii_case(kw) => {
                self.pos += 1;
                Ok(())
            }
            Some(t) => Err(self.error(format!("expected {kw:?}, found {t:?}"))),
            None => Err(self.error(format!("expected {kw:?}"))),
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, PolicyError> {
        match self.peek() {
            Some(t) if is_ident(t) => {
                self.pos += 1;
                Ok(t.to_string())
            }
            _ => Err(self.error(format!("expected {what}"))),
        }
    }

    fn list(&mut self, what: &str) -> Result<Vec<String>, PolicyError> {
        match self.peek() {
            Some(t) if t.split(',').all(is_ident) => {
                self.pos += 1;
                Ok(t.split(',').map(str::to_string).collect())
            }
            _ => Err(self.error(format!("expected comma-separated {what}"))),
        }
    }
}

/// Parses one policy line. The result has no id yet.
pub fn parse_policy(line: &str) -> Result<Policy, PolicyError> {
    let mut p = Parser {
        tokens: tokenize(line),
        pos: 0,
        end_column: line.len() + 1,
    };
    let function = match p.next("intra or inter")?.to_ascii_lowercase().as_str() {
        "intra" => NetworkFunction::IntraSiteRoute,
        "inter" => NetworkFunction::InterSiteRoute,
        _ => return Err(PolicyError::UnknownFunction(p.tokens[0].text.to_string())),
    };
    let profile = p.ident("profile name")?;
    let mut scope = match function {
        NetworkFunction::IntraSiteRoute => {
            p.keyword("region")?;
            Scope::Intra {
                regions: p.list("region names")?.into_iter().collect(),
            }
        }
        NetworkFunction::InterSiteRoute => {
            p.keyword("from")?;
            let src = p.ident("source region")?;
            p.keyword("to")?;
            let dst = p.ident("destination region")?;
            if src == dst {
                return Err(PolicyError::SameRegion(src));
            }
            Scope::Inter {
                src,
                dst,
                bidirectional: true,
            }
        }
    };

    let mut priority = None;
    let mut via = None;
    let mut oneway = false;
    while let Some(tok) = p.peek() {
        match tok.to_ascii_lowercase().as_str() {
            "priority" if priority.is_none() => {
                p.pos += 1;
                let raw = p.next("priority value")?;
                let value: i64 = raw.parse().map_err(|_| {
                    p.pos -= 1;
                    p.error(format!("priority {raw:?} is not an integer"))
                })?;
                if !(i64::from(MIN_POLICY_PRIORITY)..=65535).contains(&value) {
                    return Err(PolicyError::PriorityOutOfRange(value));
                }
                priority = Some(value as u16);
            }
            "via" if via.is_none() => {
                p.pos += 1;
                let devices = p
                    .list("device ids")?
                    .into_iter()
                    .map(|d| DeviceId::new(d).expect("identifier checked by list()"))
                    .collect::<Vec<_>>();
                via = Some(devices);
            }
            "oneway" if !oneway && function == NetworkFunction::InterSiteRoute => {
                p.pos += 1;
                oneway = true;
            }
            _ => return Err(p.error(format!("unexpected {tok:?}"))),
        }
    }
    if let Scope::Inter { bidirectional, .. } = &mut scope {
        *bidirectional = !oneway;
    }
    Ok(Policy {
        id: None,
        name: None,
        profile,
        scope,
        priority: priority.unwrap_or(DEFAULT_PRIORITY),
        via: via.unwrap_or_default(),
        enabled: true,
    })
}

impl FromStr for Policy {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_policy(s)
    }
}

impl fmt::Display for Policy {
    /// Canonical policy line; always states the priority.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.scope {
            Scope::Intra { regions } => {
                let list: Vec<&str> = regions.iter().map(String::as_str).collect();
                write!(f, "intra {} region {}", self.profile, list.join(","))?;
            }
            Scope::Inter { src, dst, .. } => write!(f, "inter {} from {src} to {dst}", self.profile)?,
        }
        write!(f, " priority {}", self.priority)?;
        if !self.via.is_empty() {
            let list: Vec<&str> = self.via.iter().map(DeviceId::as_str).collect();
            write!(f, " via {}", list.join(","))?;
        }
        if !self.is_bidirectional() {
            f.write_str(" oneway")?;
        }
        Ok(())
    }
}

pub fn format_policy(p: &Policy) -> String {
    p.to_string()
}

/// Active policies, iterated by descending priority then ascending id.
#[derive(Clone, Debug, Default)]
pub struct PolicyStore {
    policies: Vec<Policy>,
    next_id: u64,
}

impl PolicyStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Resolves `policy` against the topology and profile registry and
    /// stores it under a fresh id. Ids are never reused.
    pub fn add(
        &mut self,
        mut policy: Policy,
        topology: &Topology,
        profiles: &ProfileRegistry,
    ) -> Result<PolicyId, PolicyError> {
        if !profiles.contains(&policy.profile) {
            return Err(PolicyError::UnresolvedProfile(policy.profile));
        }
        if let Some(r) = policy.regions().into_iter().find(|r| topology.region(r).is_none()) {
            return Err(PolicyError::UnresolvedRegion(r.to_string()));
        }
        if let Some(d) = policy.via.iter().find(|d| !topology.contains_device(d)) {
            return Err(PolicyError::UnresolvedDevice(d.clone()));
        }
        self.next_id += 1;
        let id = PolicyId(self.next_id);
        policy.id = Some(id);
        let key = policy.sort_key();
        let at = self.policies.partition_point(|p| p.sort_key() < key);
        self.policies.insert(at, policy);
        Ok(id)
    }

    pub fn remove(&mut self, id: PolicyId) -> Result<Policy, PolicyError> {
        let at = self
            .policies
            .iter()
            .position(|p| p.id == Some(id))
            .ok_or(PolicyError::UnknownId(id))?;
        Ok(self.policies.remove(at))
    }

    pub fn set_enabled(&mut self, id: PolicyId, enabled: bool) -> Result<(), PolicyError> {
        let p = self
            .policies
            .iter_mut()
            .find(|p| p.id == Some(id))
            .ok_or(PolicyError::UnknownId(id))?;
        p.enabled = enabled;
        Ok(())
    }

    pub fn get(&self, id: PolicyId) -> Option<&Policy> {
        self.policies.iter().find(|p| p.id == Some(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Policy> {
        self.policies.iter()
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    /// Enabled policies for `function` and `profile` whose scope covers the
    /// region pair, best first.
    pub fn match_policies(
        &self,
        function: NetworkFunction,
        src_region: &str,
        dst_region: &str,
        profile: &str,
    ) -> Vec<&Policy> {
        self.policies
            .iter()
            .filter(|p| {
                p.enabled && p.function() == function && p.profile == profile && p.covers(src_region, dst_region)
            })
            .collect()
    }
}
