//! Scenario files: TOML parsing, validation, assumption checks, and the
//! `check` / `run` / `sweep` orchestration behind the command-line tool.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::ControlMode;
use crate::engine::{self, AgentInit, ControlSettings, RunConfig, RunOutput, Summary, System, Trace};
use crate::error::{Error, Result};
use crate::exo::{self, GraphSpectrum, LeaderSystem, StabilityReport};
use crate::expr::{check_assumption6, BoundCheck, BoundExpr, SampleBox};
use crate::graph::{check_assumption3, check_assumption4, Assumption3Report, DiGraph, Interval, JointWindow, SwitchingSchedule};
use crate::observer::{ObserverGains, ObserverMode};
use crate::plant::{ControllerModel, DisturbanceProfile, FollowerSpec};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "ADSYNC_OUT_DIR";

const BUNDLED: [(&str, &str); 3] = [
    ("theorem1_demo", include_str!("../scenarios/theorem1_demo.toml")),
    ("static_tree", include_str!("../scenarios/static_tree.toml")),
    ("disturbance_demo", include_str!("../scenarios/disturbance_demo.toml")),
];

/// Source text of a scenario shipped with the crate.
pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, src)| *src)
}

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderConfig {
    pub s: Vec<Vec<f64>>,
    pub f: Vec<f64>,
    pub v0: Vec<f64>,
    /// Scale of the designed gain `L0 = μ0 R Fᵀ`; needs a neutrally stable `S`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu0: Option<f64>,
    /// Explicit gain, used instead of `mu0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverConfig {
    #[serde(default)]
    pub mode: ObserverMode,
    pub mu1: f64,
    #[serde(default = "one")]
    pub mu2: f64,
    #[serde(default = "one")]
    pub mu_v: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub name: String,
    /// `"j -> i"` (i listens to j) or `"j <-> i"` (both directions).
    #[serde(default)]
    pub edges: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleEntry {
    pub graph: String,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalEntry {
    pub start: f64,
    pub graph: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub bound: f64,
    pub subsequence: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Periodic {
        dwell: f64,
        cycle: Vec<CycleEntry>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        window: Option<WindowConfig>,
    },
    Explicit {
        dwell: f64,
        intervals: Vec<IntervalEntry>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        window: Option<WindowConfig>,
    },
    /// One graph for all time.
    Fixed {
        graph: String,
        #[serde(default = "one")]
        dwell: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FollowerConfig {
    pub order: usize,
    #[serde(default)]
    pub regressor: Vec<String>,
    #[serde(default)]
    pub theta: Vec<f64>,
    #[serde(default)]
    pub beta: Vec<f64>,
    pub k: f64,
    /// Defaults to the identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<Vec<f64>>>,
    pub phi: String,
    pub x0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_hat0: Option<Vec<f64>>,
    #[serde(default)]
    pub d_hat0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_init: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_init: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_init: Option<Vec<f64>>,
    #[serde(default)]
    pub disturbance: DisturbanceProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AssumptionsConfig {
    /// Run even when a required check fails; recorded in the summary.
    #[serde(default, rename = "override")]
    pub override_checks: bool,
    #[serde(default)]
    pub sample: SampleBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

/// The on-disk scenario format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub leader: LeaderConfig,
    pub observer: ObserverConfig,
    pub graphs: Vec<GraphConfig>,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub control: ControlSettings,
    pub run: RunConfig,
    pub followers: Vec<FollowerConfig>,
    #[serde(default)]
    pub assumptions: AssumptionsConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ScenarioConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        toml::from_str(src).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Results of every assumption check run at load time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionsReport {
    pub leader: StabilityReport,
    /// `S` has no eigenvalue with positive real part.
    pub no_unstable_modes: bool,
    pub gain_designed: bool,
    pub l0: Vec<f64>,
    /// Per-graph spectra of the observer error matrix; informative only.
    pub graph_spectra: Vec<GraphSpectrum>,
    pub joint_connectivity: Assumption3Report,
    pub undirected_followers: bool,
    pub static_graph: bool,
    pub regressor_bounds: Vec<BoundCheck>,
    /// Names of required checks that failed.
    pub failures: Vec<String>,
    pub passed: bool,
    pub override_requested: bool,
}

/// A loaded, validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub system: System,
    pub run: RunConfig,
    pub assumptions: AssumptionsReport,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!("{what} must be a square matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn parse_node(s: &str, edge: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| Error::Config(format!("edge \"{edge}\": \"{}\" is not a node index", s.trim())))
}

/// Parses `"j -> i"` or `"j <-> i"`.
pub fn parse_edge(edge: &str) -> Result<Vec<(usize, usize)>> {
    if edge.contains(':') || edge.contains('*') || edge.contains('=') {
        return Err(Error::Config(format!("edge \"{edge}\": edge weights are not supported")));
    }
    if let Some((a, b)) = edge.split_once("<->") {
        let (a, b) = (parse_node(a, edge)?, parse_node(b, edge)?);
        return Ok(vec![(a, b), (b, a)]);
    }
    if let Some((a, b)) = edge.split_once("->") {
        return Ok(vec![(parse_node(a, edge)?, parse_node(b, edge)?)]);
    }
    Err(Error::Config(format!("edge \"{edge}\": expected \"j -> i\" or \"j <-> i\"")))
}

fn build_schedule(cfg: &ScenarioConfig) -> Result<(SwitchingSchedule, JointWindow)> {
    let nodes = cfg.followers.len() + 1;
    let mut names: BTreeMap<&str, usize> = BTreeMap::new();
    let mut graphs = Vec::with_capacity(cfg.graphs.len());
    for (idx, g) in cfg.graphs.iter().enumerate() {
        if names.insert(g.name.as_str(), idx).is_some() {
            return Err(Error::Config(format!("graph \"{}\" defined twice", g.name)));
        }
        let mut edges = Vec::new();
        for e in &g.edges {
            edges.extend(parse_edge(e)?);
        }
        graphs.push(DiGraph::new(nodes, edges).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("graph \"{}\": {msg}", g.name)),
            other => other,
        })?);
    }
    let lookup = |name: &str| {
        names.get(name).copied().ok_or_else(|| Error::Config(format!("schedule refers to unknown graph \"{name}\"")))
    };
    let (schedule, window) = match &cfg.schedule {
        ScheduleConfig::Periodic { dwell, cycle, window } => {
            let cycle = cycle.iter().map(|c| Ok((lookup(&c.graph)?, c.duration))).collect::<Result<Vec<_>>>()?;
            (SwitchingSchedule::periodic(graphs, &cycle, *dwell)?, window)
        }
        ScheduleConfig::Explicit { dwell, intervals, window } => {
            let intervals = intervals
                .iter()
                .map(|iv| Ok(Interval { start: iv.start, graph: lookup(&iv.graph)? }))
                .collect::<Result<Vec<_>>>()?;
            (SwitchingSchedule::explicit(graphs, intervals, *dwell)?, window)
        }
        ScheduleConfig::Fixed { graph, dwell } => {
            let idx = lookup(graph)?;
            let g = graphs.swap_remove(idx);
            (SwitchingSchedule::fixed(g, *dwell)?, &None)
        }
    };
    let window = match window {
        Some(w) => JointWindow { window_bound: w.bound, subsequence: w.subsequence.clone() },
        None => JointWindow::default_for(&schedule),
    };
    Ok((schedule, window))
}

fn build_follower(agent: usize, f: &FollowerConfig, n: usize) -> Result<(FollowerSpec, AgentInit)> {
    let tag = |e: Error| match e {
        Error::Config(msg) => Error::Config(format!("agent {agent}: {msg}")),
        Error::Expr(source) => Error::Agent { agent, source },
        other => other,
    };
    if f.order == 0 {
        return Err(Error::Config(format!("agent {agent}: order must be at least 1")));
    }
    let regressor = f
        .regressor
        .iter()
        .map(|src| BoundExpr::parse(src, f.order))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|source| Error::Agent { agent, source })?;
    let m = regressor.len();
    let lambda = match &f.lambda {
        Some(rows) => matrix(rows, "lambda").map_err(tag)?,
        None => DMatrix::identity(m, m),
    };
    let model = ControllerModel::new(f.order, regressor, f.beta.clone(), f.k, lambda).map_err(tag)?;
    let phi = BoundExpr::parse(&f.phi, f.order).map_err(|source| Error::Agent { agent, source })?;
    let spec = FollowerSpec::new(
        model,
        DVector::from_column_slice(&f.theta),
        f.disturbance.clone(),
        phi,
        DVector::from_column_slice(&f.x0),
    )
    .map_err(tag)?;
    let mut init = AgentInit::zeros(m, n);
    if let Some(th) = &f.theta_hat0 {
        init.theta_hat = DVector::from_column_slice(th);
    }
    init.d_hat = f.d_hat0;
    if let Some(v) = &f.v_init {
        init.v = DVector::from_column_slice(v);
    }
    if let Some(s) = &f.s_init {
        init.s = matrix(s, "s_init").map_err(tag)?;
    }
    if let Some(l) = &f.l_init {
        init.l = DVector::from_column_slice(l);
    }
    Ok((spec, init))
}

impl Scenario {
    /// Validates a parsed config, builds the system and runs every check.
    pub fn from_config(config: ScenarioConfig) -> Result<Self> {
        let leader = LeaderSystem::new(
            matrix(&config.leader.s, "leader.s")?,
            DVector::from_column_slice(&config.leader.f),
            DVector::from_column_slice(&config.leader.v0),
        )?;
        let n = leader.dim();
        let stability = exo::stability_report(&leader)?;
        let (l0, gain_designed) = match (&config.leader.l0, config.leader.mu0) {
            (Some(_), Some(_)) => return Err(Error::Config("leader: give either mu0 or l0, not both".into())),
            (Some(l0), None) => (DVector::from_column_slice(l0), false),
            (None, Some(mu0)) => {
                if !(mu0 > 0.0) {
                    return Err(Error::Config(format!("leader: mu0 must be positive, got {mu0}")));
                }
                (exo::design_gain(&leader, mu0)?, true)
            }
            (None, None) => return Err(Error::Config("leader: mu0 or l0 is required".into())),
        };
        let o = &config.observer;
        let gains = match o.mode {
            ObserverMode::OutputBased => ObserverGains::output_based(o.mu1, o.mu2),
            ObserverMode::StateBased => ObserverGains::state_based(o.mu1, o.mu_v),
        };
        let (schedule, window) = build_schedule(&config)?;
        let mut followers = Vec::with_capacity(config.followers.len());
        let mut inits = Vec::with_capacity(config.followers.len());
        for (i, f) in config.followers.iter().enumerate() {
            let (spec, init) = build_follower(i + 1, f, n)?;
            followers.push(spec);
            inits.push(init);
        }
        let system = System::new(leader, l0, gains, schedule, followers, inits, config.control)?;
        let run = config.run.clone();
        run.validate(&system)?;
        let assumptions = check_assumptions(&system, &window, gain_designed, stability, &config.assumptions)?;
        Ok(Self { config, system, run, assumptions })
    }

    pub fn from_toml(src: &str) -> Result<Self> {
        Self::from_config(ScenarioConfig::from_toml(src)?)
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }
}

/// Loads a scenario file, or a bundled scenario when `path` names one and no
/// such file exists.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    if !path.exists() {
        if let Some(src) = path.to_str().and_then(bundled) {
            return Scenario::from_toml(src);
        }
    }
    let src = fs::read_to_string(path)?;
    Scenario::from_toml(&src)
}

fn check_assumptions(
    system: &System,
    window: &JointWindow,
    gain_designed: bool,
    leader: StabilityReport,
    cfg: &AssumptionsConfig,
) -> Result<AssumptionsReport> {
    let state_based = system.gains.mode == ObserverMode::StateBased;
    let static_graph = system.schedule.is_static();
    let tol = 1e-9 * system.leader.s.norm().max(1.0);
    let no_unstable_modes = leader.eigenvalues.iter().all(|(re, _)| *re <= tol);
    let joint_connectivity = check_assumption3(&system.schedule, window);
    let undirected_followers = check_assumption4(&system.schedule);
    let graph_spectra = exo::per_graph_spectra(&system.leader, &system.l0, &system.schedule)?;
    let regressor_bounds: Vec<BoundCheck> =
        system.followers.iter().map(|f| check_assumption6(&f.model.regressor, &f.phi, &cfg.sample)).collect();

    let mut failures = Vec::new();
    let stability_ok = if state_based || static_graph { no_unstable_modes } else { leader.marginally_stable };
    if !stability_ok {
        failures.push("leader matrix stability".to_string());
    }
    if !state_based && !leader.detectable {
        failures.push("leader detectability".to_string());
    }
    if !joint_connectivity.holds {
        failures.push(format!("joint connectivity: {}", joint_connectivity.message));
    }
    if !(state_based || static_graph) && !undirected_followers {
        failures.push("undirected follower graphs".to_string());
    }
    for (i, b) in regressor_bounds.iter().enumerate() {
        if !b.passed {
            failures.push(format!("agent {}: regressor bound (margin {:.3e})", i + 1, b.worst_margin));
        }
    }
    Ok(AssumptionsReport {
        no_unstable_modes,
        gain_designed,
        l0: system.l0.as_slice().to_vec(),
        graph_spectra,
        joint_connectivity,
        undirected_followers,
        static_graph,
        regressor_bounds,
        passed: failures.is_empty(),
        failures,
        override_requested: cfg.override_checks,
        leader,
    })
}

/// Command-line overrides applied on top of a scenario file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<ControlMode>,
    pub epsilon: Option<f64>,
    pub step: Option<f64>,
    pub duration: Option<f64>,
    /// Base seed; agent `i`'s seeded noise uses `seed + i − 1`.
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ScenarioConfig) {
        if let Some(m) = self.mode {
            cfg.control.mode = m;
        }
        if let Some(e) = self.epsilon {
            cfg.control.epsilon = e;
        }
        if let Some(h) = self.step {
            cfg.run.step = h;
        }
        if let Some(t) = self.duration {
            cfg.run.duration = t;
        }
        if let Some(base) = self.seed {
            for (i, f) in cfg.followers.iter_mut().enumerate() {
                if let DisturbanceProfile::SeededBoundedNoise { seed, .. } = &mut f.disturbance {
                    *seed = base.wrapping_add(i as u64);
                }
            }
        }
    }
}

/// What `run` writes to `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub assumptions: AssumptionsReport,
    pub summary: Summary,
}

/// Runs a loaded scenario, refusing when a required check failed and no
/// override was requested.
pub fn execute(scenario: &Scenario) -> Result<(RunReport, Trace)> {
    let a = &scenario.assumptions;
    if !a.passed && !a.override_requested {
        return Err(Error::Assumptions(a.failures.join("; ")));
    }
    let RunOutput { trace, summary } = engine::run(&scenario.system, &scenario.run)?;
    let report = RunReport { scenario: scenario.name().to_string(), assumptions: a.clone(), summary };
    Ok((report, trace))
}

/// Output directory precedence: explicit flag, environment, scenario file,
/// then `adsync-out/<name>`.
pub fn resolve_out_dir(flag: Option<&Path>, scenario: &Scenario) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_DIR_ENV) {
        return PathBuf::from(p).join(scenario.name());
    }
    if let Some(p) = &scenario.config.output.dir {
        return p.clone();
    }
    PathBuf::from("adsync-out").join(scenario.name())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `t,value` pairs.
pub fn write_series(path: &Path, t: &[f64], values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "value"])?;
    for (a, b) in t.iter().zip(values) {
        w.write_record([engine::format_value(*a), engine::format_value(*b)])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-agent series written to `plots/`.
const PLOTTED: [&str; 6] = ["e0", "s", "v_err", "S_err", "L_err", "D_hat"];

/// Writes `trace.csv`, `summary.json` and `plots/*.csv` into `dir`.
pub fn write_outputs(dir: &Path, report: &RunReport, trace: &Trace) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir.join("plots"))?;
    let mut written = Vec::new();
    let trace_path = dir.join("trace.csv");
    trace.write_csv(fs::File::create(&trace_path)?)?;
    written.push(trace_path);
    let summary_path = dir.join("summary.json");
    write_json(&summary_path, report)?;
    written.push(summary_path);
    let t = trace.times();
    for a in 1..=trace.follower_count() {
        for name in PLOTTED {
            let path = dir.join("plots").join(format!("{name}_{a}.csv"));
            write_series(&path, &t, &trace.agent_column(name, a))?;
            written.push(path);
        }
    }
    for name in ["V", "W"] {
        let path = dir.join("plots").join(format!("{name}.csv"));
        write_series(&path, &t, &trace.column(name))?;
        written.push(path);
    }
    Ok(written)
}

/// Wall-clock time of a run; kept out of `summary.json` so it stays byte-stable.
pub fn write_timing(dir: &Path, seconds: f64) -> Result<()> {
    write_json(&dir.join("timing.json"), &serde_json::json!({ "wall_clock_seconds": seconds }))
}

/// One axis of a sweep grid, e.g. `epsilon=1e-2,1e-3`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<f64>,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, values) =
            s.split_once('=').ok_or_else(|| Error::Config(format!("grid axis \"{s}\": expected key=v1,v2,...")))?;
        let values = values
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("grid axis \"{s}\": bad number \"{v}\""))))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::Config(format!("grid axis \"{s}\" has no values")));
        }
        let axis = Self { key: key.trim().to_string(), values };
        axis.check_key()?;
        Ok(axis)
    }
}

impl SweepAxis {
    fn check_key(&self) -> Result<()> {
        let known = ["epsilon", "step", "duration", "mu0", "mu1", "mu2", "k"];
        let per_agent = self.key.strip_prefix("k_").is_some_and(|i| i.parse::<usize>().is_ok());
        if known.contains(&self.key.as_str()) || per_agent {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown sweep parameter \"{}\" (expected one of {}, or k_<agent>)",
                self.key,
                known.join(", ")
            )))
        }
    }

    /// Sets this parameter to `value` in `cfg`.
    pub fn apply(&self, cfg: &mut ScenarioConfig, value: f64) -> Result<()> {
        match self.key.as_str() {
            "epsilon" => cfg.control.epsilon = value,
            "step" => cfg.run.step = value,
            "duration" => cfg.run.duration = value,
            "mu0" => {
                cfg.leader.mu0 = Some(value);
                cfg.leader.l0 = None;
            }
            "mu1" => cfg.observer.mu1 = value,
            "mu2" => cfg.observer.mu2 = value,
            "k" => cfg.followers.iter_mut().for_each(|f| f.k = value),
            key => {
                let i: usize = key[2..].parse().map_err(|_| Error::Config(format!("bad sweep key {key}")))?;
                let f = cfg
                    .followers
                    .get_mut(i.wrapping_sub(1))
                    .ok_or_else(|| Error::Config(format!("sweep key {key}: no agent {i}")))?;
                f.k = value;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub params: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Cartesian product of the axes, first axis slowest.
pub fn grid_points(axes: &[SweepAxis]) -> Vec<Vec<f64>> {
    let mut points = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    points
}

/// Runs one simulation per grid point in parallel. Failures are recorded per
/// point; the order of the result follows [`grid_points`].
pub fn sweep(base: &ScenarioConfig, axes: &[SweepAxis]) -> Result<Vec<SweepPoint>> {
    if axes.is_empty() {
        return Err(Error::Config("no parameters".into()));
    }
    let points = grid_points(axes);
    Ok(points
        .par_iter()
        .map(|values| {
            let params: BTreeMap<String, f64> = axes.iter().zip(values).map(|(a, v)| (a.key.clone(), *v)).collect();
            let outcome = (|| {
                let mut cfg = base.clone();
                for (axis, v) in axes.iter().zip(values) {
                    axis.apply(&mut cfg, *v)?;
                }
                let scenario = Scenario::from_config(cfg)?;
                execute(&scenario).map(|(report, _)| report.summary)
            })();
            match outcome {
                Ok(summary) => SweepPoint { params, summary: Some(summary), error: None },
                Err(e) => SweepPoint { params, summary: None, error: Some(e.to_string()) },
            }
        })
        .collect())
}

pub fn write_sweep(dir: &Path, axes: &[SweepAxis], points: &[SweepPoint]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("sweep.json");
    write_json(&path, &serde_json::json!({ "axes": axes, "points": points }))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo() -> ScenarioConfig {
        ScenarioConfig::from_toml(bundled("theorem1_demo").unwrap()).unwrap()
    }

    #[test]
    fn bundled_scenarios_load_and_pass() {
        for name in bundled_names() {
            let s = Scenario::from_toml(bundled(name).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(s.assumptions.passed, "{name}: {:?}", s.assumptions.failures);
        }
    }

    #[test]
    fn round_trip_through_toml() {
        let cfg = demo();
        let text = cfg.to_toml().unwrap();
        let again = ScenarioConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, again);
        Scenario::from_config(again).unwrap();
    }

    #[test]
    fn non_hurwitz_beta_names_the_agent() {
        let mut cfg = demo();
        cfg.followers[1].beta = vec![-1.0];
        let err = Scenario::from_config(cfg).unwrap_err().to_string();
        assert!(err.contains("agent 2: beta polynomial not Hurwitz"), "{err}");
    }

    #[test]
    fn misaligned_switching_is_rejected() {
        let mut cfg = demo();
        cfg.run.step = 0.7;
        cfg.run.duration = 7.0;
        let err = Scenario::from_config(cfg).unwrap_err().to_string();
        assert!(err.contains("not a multiple of the step"), "{err}");
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let src = bundled("theorem1_demo").unwrap().replacen("mu1 = 1.0", "mu1 = \"fast\"", 1);
        let err = ScenarioConfig::from_toml(&src).unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn edges() {
        assert_eq!(parse_edge("0 -> 1").unwrap(), vec![(0, 1)]);
        assert_eq!(parse_edge("2<->3").unwrap(), vec![(2, 3), (3, 2)]);
        assert!(parse_edge("0 -> 1 : 2.5").unwrap_err().to_string().contains("weights"));
        assert!(parse_edge("a -> 1").is_err());
        assert!(parse_edge("0 1").is_err());
    }

    #[test]
    fn unknown_graph_reference() {
        let mut cfg = demo();
        if let ScheduleConfig::Periodic { cycle, .. } = &mut cfg.schedule {
            cycle[0].graph = "nope".into();
        }
        assert!(Scenario::from_config(cfg).unwrap_err().to_string().contains("unknown graph \"nope\""));
    }

    #[test]
    fn failed_assumptions_block_runs_unless_overridden() {
        let mut cfg = demo();
        // drop the leader edge: no follower can ever reach node 0
        cfg.graphs[0].edges.clear();
        cfg.run.duration = 1.3;
        let s = Scenario::from_config(cfg.clone()).unwrap();
        assert!(!s.assumptions.passed);
        assert!(matches!(execute(&s), Err(Error::Assumptions(_))));
        cfg.assumptions.override_checks = true;
        let s = Scenario::from_config(cfg).unwrap();
        let (report, _) = execute(&s).unwrap();
        assert!(report.assumptions.override_requested);
    }

    #[test]
    fn sweep_grid() {
        assert!(sweep(&demo(), &[]).unwrap_err().to_string().contains("no parameters"));
        let axes: Vec<SweepAxis> = vec!["k=1,2".parse().unwrap(), "epsilon=0.1,0.01,0.001".parse().unwrap()];
        let pts = grid_points(&axes);
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0], vec![1.0, 0.1]);
        assert_eq!(pts[1], vec![1.0, 0.01]);
        assert_eq!(pts[5], vec![2.0, 0.001]);
        assert!("bogus=1".parse::<SweepAxis>().is_err());
        assert!("k_2=1".parse::<SweepAxis>().is_ok());
    }

    #[test]
    fn sweep_records_failures_and_keeps_order() {
        let mut cfg = demo();
        cfg.run.duration = 2.6;
        let axes: Vec<SweepAxis> = vec!["step=0.001,0.7".parse().unwrap()];
        let pts = sweep(&cfg, &axes).unwrap();
        assert_eq!(pts.len(), 2);
        assert!(pts[0].summary.is_some());
        assert!(pts[1].error.as_deref().unwrap().contains("multiple of the step"));
    }

    #[test]
    fn seed_override_reaches_noise_profiles() {
        let mut cfg = demo();
        cfg.followers[2].disturbance = DisturbanceProfile::SeededBoundedNoise { amplitude: 1.0, hold_time: 0.1, seed: 1 };
        Overrides { seed: Some(40), ..Default::default() }.apply(&mut cfg);
        assert_eq!(
            cfg.followers[2].disturbance,
            DisturbanceProfile::SeededBoundedNoise { amplitude: 1.0, hold_time: 0.1, seed: 42 }
        );
    }
}
