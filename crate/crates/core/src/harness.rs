//! Operator CLI and the response-time benchmark.
//!
//! A [`Session`] holds one topology, network and controller and executes
//! commands such as `policy add "..."` or `inject --src hA1 --dst hB1 --app web`.
//! [`run_cli`] drives a session from the command line, a script file or an
//! interactive prompt.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::controller::{packet_for_profile, Controller, ControllerMode, SetupOutcome};
use crate::dataplane::{export_events, CostConfig, DataplaneError, Event, SimNetwork, Trace};
use crate::policy::{PolicyError, PolicyId};
use crate::selector::{SelectorError, TrafficProfile};
use crate::topo::{gen_linear, gen_three_region, parse_topology, TopoError, Topology};

pub const CSV_HEADER: &str = "n,mode,response_time_us,packet_in_count,trials";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid benchmark range: need 1 <= min ({min}) <= max ({max}) and trials >= 1")]
    BadRange { min: usize, max: usize },
    #[error("packet-in count varied across trials for n={n} ({mode})")]
    Nondeterministic { n: usize, mode: ControllerMode },
    #[error("no topology loaded (use `topo load`, `topo linear` or `topo three-region`)")]
    NoTopology,
    #[error("unknown host {0}")]
    UnknownHost(String),
    #[error("unknown traffic profile {0}")]
    UnknownProfile(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Topo(#[from] TopoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Dataplane(#[from] DataplaneError),
}

/// One benchmark data point.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    /// Switches on the path.
    pub n: usize,
    pub mode: ControllerMode,
    /// Mean virtual response time over all trials.
    pub response_time_us: u64,
    pub packet_in_count: usize,
    pub trials: usize,
    /// Mean host wall-clock time of the injection, in nanoseconds.
    pub wall_ns: u64,
}

fn run_trial(mode: ControllerMode, n: usize, costs: CostConfig) -> Result<(Trace, u64), HarnessError> {
    let topology = Arc::new(gen_linear(n)?);
    let mut net = SimNetwork::new(Arc::clone(&topology), costs);
    let mut ctrl = Controller::new(mode);
    if mode == ControllerMode::Osdf {
        ctrl.add_policy_line(&mut net, "intra any region R")?;
    }
    let any = ctrl
        .profiles()
        .get("any")
        .cloned()
        .ok_or_else(|| HarnessError::UnknownProfile("any".into()))?;
    let (h1, h2) = (topology.host("h1").expect("h1"), topology.host("h2").expect("h2"));
    // UDP to a port no built-in profile claims, so it classifies as `any`
    let pkt = packet_for_profile(&topology, &any, h1.ip, h2.ip, Some(9)).expect("h1 exists");
    let started = Instant::now();
    let trace = net.inject_packet(&mut ctrl, "h1", &pkt)?;
    let wall = started.elapsed().as_nanos() as u64;
    Ok((trace, wall))
}

/// First-packet setup cost on `gen_linear(n)` for every `n` in the range,
/// each trial on a fresh network.
pub fn bench_response_time(
    mode: ControllerMode,
    n_min: usize,
    n_max: usize,
    trials: usize,
    costs: CostConfig,
) -> Result<Vec<BenchRow>, HarnessError> {
    if n_min < 1 || n_min > n_max || trials < 1 {
        return Err(HarnessError::BadRange { min: n_min, max: n_max });
    }
    let results: Vec<Result<BenchRow, HarnessError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (n_min..=n_max)
            .map(|n| {
                scope.spawn(move || {
                    let mut total_us = 0;
                    let mut total_ns = 0;
                    let mut packet_ins = None;
                    for _ in 0..trials {
                        let (trace, wall) = run_trial(mode, n, costs)?;
                        total_us += trace.response_time_us;
                        total_ns += wall;
                        match packet_ins {
                            None => packet_ins = Some(trace.packet_in_count),
                            Some(c) if c != trace.packet_in_count => {
                                return Err(HarnessError::Nondeterministic { n, mode })
                            }
                            Some(_) => {}
                        }
                    }
                    Ok(BenchRow {
                        n,
                        mode,
                        response_time_us: total_us / trials as u64,
                        packet_in_count: packet_ins.unwrap_or(0),
                        trials,
                        wall_ns: total_ns / trials as u64,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("benchmark thread panicked"))
            .collect()
    });
    results.into_iter().collect()
}

/// CSV with [`CSV_HEADER`]; `wall_ns` is appended as an extra column when
/// `wall_clock` is set.
pub fn format_csv(rows: &[BenchRow], wall_clock: bool) -> String {
    let mut out = String::from(CSV_HEADER);
    if wall_clock {
        out.push_str(",wall_ns");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.n, r.mode, r.response_time_us, r.packet_in_count, r.trials
        );
        if wall_clock {
            let _ = write!(out, ",{}", r.wall_ns);
        }
        out.push('\n');
    }
    out
}

#[derive(Parser, Debug)]
#[command(
    name = "osdf",
    no_binary_name = true,
    disable_version_flag = true,
    about = "Policy-driven SDN controller over a simulated network"
)]
struct CommandLine {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load or generate the network topology
    Topo {
        #[command(subcommand)]
        action: TopoAction,
    },
    /// Manage policies
    Policy {
        #[command(subcommand)]
        action: PolicyAction,
    },
    /// Register traffic profiles
    Profile {
        #[command(subcommand)]
        action: ProfileAction,
    },
    /// Select the controller: osdf or reactive
    Mode { mode: ModeArg },
    /// Send one packet between two hosts
    Inject {
        #[arg(long)]
        src: String,
        #[arg(long)]
        dst: String,
        #[arg(long)]
        app: String,
        #[arg(long)]
        dport: Option<u16>,
    },
    /// Show counters for this session
    Stats,
    /// Export the event log
    Trace {
        #[command(subcommand)]
        action: TraceAction,
    },
    /// Response time versus path length on linear topologies
    Bench {
        #[arg(long, value_enum)]
        mode: BenchMode,
        #[arg(long, default_value_t = 2)]
        min_len: usize,
        #[arg(long)]
        max_len: usize,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Append a host wall-clock column (not reproducible)
        #[arg(long)]
        wall_clock: bool,
    },
}

#[derive(Subcommand, Debug)]
enum TopoAction {
    Load { file: PathBuf },
    Linear { n: usize },
    ThreeRegion,
}

#[derive(Subcommand, Debug)]
enum PolicyAction {
    Add { line: String },
    List,
    Remove { id: u64 },
}

#[derive(Subcommand, Debug)]
enum ProfileAction {
    Add { line: String },
}

#[derive(Subcommand, Debug)]
enum TraceAction {
    Dump { file: PathBuf },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Osdf,
    Reactive,
}

impl From<ModeArg> for ControllerMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Osdf => ControllerMode::Osdf,
            ModeArg::Reactive => ControllerMode::ReactiveBaseline,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchMode {
    Osdf,
    Reactive,
    Both,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub injected: usize,
    pub delivered: usize,
    pub dropped: usize,
    pub packet_ins: usize,
    pub rules_installed: usize,
}

/// Outcome of executing one command line.
#[derive(Debug)]
pub enum CommandError {
    /// The line did not parse; carries clap's rendered message.
    Usage(String),
    Failed(HarnessError),
}

impl From<HarnessError> for CommandError {
    fn from(e: HarnessError) -> Self {
        CommandError::Failed(e)
    }
}

/// One operator session: a topology, its simulated network and a controller.
pub struct Session {
    mode: ControllerMode,
    costs: CostConfig,
    ctrl: Controller,
    net: Option<SimNetwork>,
    stats: SessionStats,
    last: Option<Event>,
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

impl Session {
    pub fn new() -> Self {
        Self {
            mode: ControllerMode::Osdf,
            costs: CostConfig::default(),
            ctrl: Controller::new(ControllerMode::Osdf),
            net: None,
            stats: SessionStats::default(),
            last: None,
        }
    }

    pub fn controller(&self) -> &Controller {
        &self.ctrl
    }

    pub fn network(&self) -> Option<&SimNetwork> {
        self.net.as_ref()
    }

    pub fn stats(&self) -> &SessionStats {
        &self.stats
    }

    fn net(&mut self) -> Result<&mut SimNetwork, HarnessError> {
        self.net.as_mut().ok_or(HarnessError::NoTopology)
    }

    fn set_topology(&mut self, topology: Topology) -> String {
        let summary = format!(
            "topology loaded: {} devices, {} links, {} hosts, {} regions",
            topology.devices().len(),
            topology.links().len(),
            topology.hosts().len(),
            topology.regions().len()
        );
        self.net = Some(SimNetwork::new(Arc::new(topology), self.costs));
        let profiles = self.ctrl.profiles().clone();
        self.ctrl = Controller::with_registries(self.mode, profiles, Default::default());
        self.stats = SessionStats::default();
        self.last = None;
        summary
    }

    /// Parses and runs one command line, writing human-readable output.
    pub fn execute_line(&mut self, line: &str, out: &mut dyn Write) -> Result<(), CommandError> {
        let words = shlex::split(line).ok_or_else(|| CommandError::Usage(format!("unbalanced quotes in {line:?}")))?;
        self.execute(&words, out)
    }

    pub fn execute(&mut self, words: &[String], out: &mut dyn Write) -> Result<(), CommandError> {
        let cli = CommandLine::try_parse_from(words).map_err(|e| CommandError::Usage(e.render().to_string()))?;
        let text = self.run(cli.command)?;
        if !text.is_empty() {
            let _ = writeln!(out, "{text}");
        }
        Ok(())
    }

    fn run(&mut self, command: Command) -> Result<String, HarnessError> {
        match command {
            Command::Topo { action } => {
                let topology = match action {
                    TopoAction::Load { file } => parse_topology(&read(&file)?)?,
                    TopoAction::Linear { n } => gen_linear(n)?,
                    TopoAction::ThreeRegion => gen_three_region(),
                };
                Ok(self.set_topology(topology))
            }
            Command::Policy { action } => self.policy(action),
            Command::Profile {
                action: ProfileAction::Add { line },
            } => {
                let profile = TrafficProfile::parse_line(&line)?;
                let name = profile.name.clone();
                self.ctrl.profiles_mut().register(profile)?;
                Ok(format!("profile {name} added"))
            }
            Command::Mode { mode } => {
                self.mode = mode.into();
                if let Some(net) = self.net.as_mut() {
                    *net = SimNetwork::new(Arc::clone(net.topology()), self.costs);
                }
                self.ctrl.reset(self.mode);
                Ok(format!("mode {} (flow tables cleared)", self.mode))
            }
            Command::Inject { src, dst, app, dport } => self.inject(&src, &dst, &app, dport),
            Command::Stats => Ok(self.render_stats()),
            Command::Trace {
                action: TraceAction::Dump { file },
            } => {
                let net = self.net()?;
                let text = export_events(net.log());
                let count = net.log().len();
                write_file(&file, &text)?;
                Ok(format!("wrote {count} events to {}", file.display()))
            }
            Command::Bench {
                mode,
                min_len,
                max_len,
                trials,
                out,
                wall_clock,
            } => {
                let modes: &[ControllerMode] = match mode {
                    BenchMode::Osdf => &[ControllerMode::Osdf],
                    BenchMode::Reactive => &[ControllerMode::ReactiveBaseline],
                    BenchMode::Both => &[ControllerMode::Osdf, ControllerMode::ReactiveBaseline],
                };
                let mut rows = Vec::new();
                for &m in modes {
                    rows.extend(bench_response_time(m, min_len, max_len, trials, self.costs)?);
                }
                let csv = format_csv(&rows, wall_clock);
                match out {
                    Some(path) => {
                        write_file(&path, &csv)?;
                        Ok(format!("wrote {} rows to {}", rows.len(), path.display()))
                    }
                    None => Ok(csv.trim_end().to_string()),
                }
            }
        }
    }

    fn policy(&mut self, action: PolicyAction) -> Result<String, HarnessError> {
        match action {
            PolicyAction::Add { line } => {
                let net = self.net.as_mut().ok_or(HarnessError::NoTopology)?;
                let id = self.ctrl.add_policy_line(net, &line)?;
                Ok(format!("policy {id} added"))
            }
            PolicyAction::List => {
                let lines: Vec<String> = self
                    .ctrl
                    .store()
                    .iter()
                    .map(|p| {
                        let id = p.id.map_or("-".to_string(), |i| i.to_string());
                        let state = if p.enabled { "" } else { " (disabled)" };
                        format!("{id}: {p}{state}")
                    })
                    .collect();
                if lines.is_empty() {
                    Ok("no policies".to_string())
                } else {
                    Ok(lines.join("\n"))
                }
            }
            PolicyAction::Remove { id } => {
                let net = self.net.as_mut().ok_or(HarnessError::NoTopology)?;
                let (_, purged) = self.ctrl.remove_policy(net, PolicyId(id))?;
                Ok(format!("policy {id} removed, {purged} rules purged"))
            }
        }
    }

    fn inject(&mut self, src: &str, dst: &str, app: &str, dport: Option<u16>) -> Result<String, HarnessError> {
        let net = self.net.as_mut().ok_or(HarnessError::NoTopology)?;
        let topology = Arc::clone(net.topology());
        let s = topology
            .host(src)
            .ok_or_else(|| HarnessError::UnknownHost(src.into()))?;
        let d = topology
            .host(dst)
            .ok_or_else(|| HarnessError::UnknownHost(dst.into()))?;
        let profile = self
            .ctrl
            .profiles()
            .get(app)
            .ok_or_else(|| HarnessError::UnknownProfile(app.into()))?;
        let pkt = packet_for_profile(&topology, profile, s.ip, d.ip, dport).expect("source host exists");
        let before = self.ctrl.setups().len();
        let trace = net.inject_packet(&mut self.ctrl, src, &pkt)?;

        self.stats.injected += 1;
        self.stats.packet_ins += trace.packet_in_count;
        self.stats.rules_installed += trace.rules_installed;
        let terminal = trace.outcome().cloned().expect("every trace ends in a terminal event");
        match terminal {
            Event::Delivered { .. } => self.stats.delivered += 1,
            _ => self.stats.dropped += 1,
        }
        let mut lines = Vec::new();
        if let Some(summary) = summarize(&self.ctrl.setups()[before..]) {
            lines.push(summary.record(&trace));
        }
        lines.push(terminal.to_string());
        self.last = Some(terminal);
        Ok(lines.join("\n"))
    }

    fn render_stats(&self) -> String {
        let active = self.net.as_ref().map_or(0, SimNetwork::rule_count);
        let clock = self.net.as_ref().map_or(0, SimNetwork::clock_us);
        let last = self.last.as_ref().map_or("-".to_string(), Event::to_string);
        format!(
            "mode: {}\npackets: {} injected, {} delivered, {} dropped\nPACKET_INs: {}\nrules installed: {} ({} active)\npolicies: {}\nclock: {} us\nlast: {}",
            self.mode,
            self.stats.injected,
            self.stats.delivered,
            self.stats.dropped,
            self.stats.packet_ins,
            self.stats.rules_installed,
            active,
            self.ctrl.store().len(),
            clock,
            last
        )
    }
}

/// Folds the setups of one injection into a single record: the first
/// flow's policy, every device that installed rules, the total rule count.
fn summarize(setups: &[SetupOutcome]) -> Option<SetupOutcome> {
    let first = setups.first()?;
    if setups.len() == 1 {
        return Some(first.clone());
    }
    Some(SetupOutcome {
        flow: first.flow,
        policy: first.policy,
        path: setups.iter().filter_map(|s| s.path.first().cloned()).collect(),
        rules: setups.iter().map(|s| s.rules).sum(),
        refused: setups.last().and_then(|s| s.refused),
    })
}

fn read(path: &PathBuf) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &PathBuf, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

const USAGE: &str = "\
usage: osdf                      interactive session (commands on stdin)
       osdf --script <file>      run a command script
       osdf <command> [args...]  run one command

commands:
  topo load <file> | topo linear <n> | topo three-region
  policy add \"<line>\" | policy list | policy remove <id>
  profile add \"<line>\"
  mode <osdf|reactive>
  inject --src <host> --dst <host> --app <profile> [--dport <p>]
  stats
  trace dump <file>
  bench --mode <osdf|reactive|both> [--min-len 2] --max-len <n> --trials <t> [--out <csv>]";

fn report(e: CommandError, err: &mut dyn Write) -> i32 {
    match e {
        CommandError::Usage(msg) => {
            let _ = writeln!(err, "{}", msg.trim_end());
            let _ = writeln!(err, "{USAGE}");
            2
        }
        CommandError::Failed(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

/// Runs the CLI. `args` excludes the program name. Returns the exit status.
pub fn run_cli(
    args: &[String],
    input: &mut dyn BufRead,
    out: &mut dyn Write,
    err: &mut dyn Write,
    prompt: bool,
) -> i32 {
    let mut session = Session::new();
    match args.first().map(String::as_str) {
        Some("-h") | Some("--help") => {
            let _ = writeln!(out, "{USAGE}");
            0
        }
        Some("--script") => {
            let Some(path) = args.get(1) else {
                let _ = writeln!(err, "{USAGE}");
                return 2;
            };
            let text = match fs::read_to_string(path) {
                Ok(t) => t,
                Err(e) => {
                    let _ = writeln!(err, "error: {path}: {e}");
                    return 1;
                }
            };
            for (no, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                if let Err(e) = session.execute_line(line, out) {
                    let _ = writeln!(err, "{path}:{}: {line}", no + 1);
                    return report(e, err);
                }
            }
            0
        }
        Some(_) => match session.execute(args, out) {
            Ok(()) => 0,
            Err(e) => report(e, err),
        },
        None => {
            let mut line = String::new();
            loop {
                if prompt {
                    let _ = write!(out, "osdf> ");
                    let _ = out.flush();
                }
                line.clear();
                match input.read_line(&mut line) {
                    Ok(0) | Err(_) => return 0,
                    Ok(_) => {}
                }
                let cmd = line.trim();
                if cmd.is_empty() || cmd.starts_with('#') {
                    continue;
                }
                if matches!(cmd, "quit" | "exit") {
                    return 0;
                }
                if let Err(e) = session.execute_line(cmd, out) {
                    report(e, err);
                }
            }
        }
    }
}
