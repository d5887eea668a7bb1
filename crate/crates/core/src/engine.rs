//! Closed-loop assembly and fixed-step simulation.
//!
//! The full state is one flat vector: the leader state `v0` first, then for
//! each follower `[x_i, θ̂_i, D̂_i, v_i, S_i (row-major), L_i]`. The switching
//! signal and the disturbances are sampled at the start of every step and held
//! across its stages; every switching instant and disturbance breakpoint must
//! fall on the grid.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::{self, ControlMode, LyapunovTerm, SlidingScratch};
use crate::error::{Error, Result};
use crate::exo::LeaderSystem;
use crate::graph::{time_eps, SwitchingSchedule};
use crate::observer::{coupling_into, dot, matvec, Coupling, EstimateRef, ObserverGains};
use crate::ode::{self, Integrator, Workspace};
use crate::plant::{disturbance_at, FollowerSpec};

/// Initial controller and observer estimates of one follower.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentInit {
    pub theta_hat: DVector<f64>,
    pub d_hat: f64,
    pub v: DVector<f64>,
    pub s: DMatrix<f64>,
    pub l: DVector<f64>,
}

impl AgentInit {
    /// All estimates zero.
    pub fn zeros(regressor_dim: usize, n: usize) -> Self {
        Self {
            theta_hat: DVector::zeros(regressor_dim),
            d_hat: 0.0,
            v: DVector::zeros(n),
            s: DMatrix::zeros(n, n),
            l: DVector::zeros(n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSettings {
    #[serde(default)]
    pub mode: ControlMode,
    /// Boundary-layer width of the smoothed sign; 0 selects the exact sign.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-3
}

impl Default for ControlSettings {
    fn default() -> Self {
        Self { mode: ControlMode::Baseline, epsilon: default_epsilon() }
    }
}

/// A validated closed-loop system: leader, observer, network and followers.
#[derive(Debug, Clone)]
pub struct System {
    pub leader: LeaderSystem,
    pub l0: DVector<f64>,
    pub gains: ObserverGains,
    pub schedule: SwitchingSchedule,
    pub followers: Vec<FollowerSpec>,
    pub inits: Vec<AgentInit>,
    pub control: ControlSettings,
}

impl System {
    pub fn new(
        leader: LeaderSystem,
        l0: DVector<f64>,
        gains: ObserverGains,
        schedule: SwitchingSchedule,
        followers: Vec<FollowerSpec>,
        inits: Vec<AgentInit>,
        control: ControlSettings,
    ) -> Result<Self> {
        let n = leader.dim();
        let count = followers.len();
        if l0.len() != n {
            return Err(Error::Config(format!("leader gain has {} entries, leader dimension is {n}", l0.len())));
        }
        gains.validate()?;
        if schedule.node_count() != count + 1 {
            return Err(Error::Config(format!(
                "graphs have {} nodes but there are {count} followers plus the leader",
                schedule.node_count()
            )));
        }
        if inits.len() != count {
            return Err(Error::Config(format!("{} initial estimates for {count} followers", inits.len())));
        }
        for (i, (spec, init)) in followers.iter().zip(&inits).enumerate() {
            let agent = i + 1;
            if init.theta_hat.len() != spec.model.regressor_dim() {
                return Err(Error::Config(format!("agent {agent}: theta_hat0 has the wrong length")));
            }
            if init.v.len() != n || init.s.shape() != (n, n) || init.l.len() != n {
                return Err(Error::Config(format!("agent {agent}: observer initial values must match leader dimension {n}")));
            }
        }
        if !(control.epsilon >= 0.0) || !control.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be finite and >= 0, got {}", control.epsilon)));
        }
        Ok(Self { leader, l0, gains, schedule, followers, inits, control })
    }

    pub fn follower_count(&self) -> usize {
        self.followers.len()
    }

    /// Largest derivative order checked by the observer output diagnostics.
    pub fn max_derivative(&self) -> usize {
        self.followers.iter().map(|f| f.order()).max().unwrap_or(1) - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_step")]
    pub step: f64,
    pub duration: f64,
    #[serde(default)]
    pub integrator: Integrator,
    /// Every `record_stride`-th step lands in the trace.
    #[serde(default = "default_stride")]
    pub record_stride: usize,
    /// Tracking error below which the run counts as synchronized.
    #[serde(default = "default_sync_threshold")]
    pub sync_threshold: f64,
}

fn default_step() -> f64 {
    1e-3
}

fn default_stride() -> usize {
    10
}

fn default_sync_threshold() -> f64 {
    1e-2
}

impl RunConfig {
    pub fn new(step: f64, duration: f64) -> Self {
        Self {
            step,
            duration,
            integrator: Integrator::Rk4,
            record_stride: default_stride(),
            sync_threshold: default_sync_threshold(),
        }
    }

    pub fn step_count(&self) -> u64 {
        (self.duration / self.step).round() as u64
    }

    /// Checks the step against the duration, switching instants and
    /// disturbance breakpoints.
    pub fn validate(&self, system: &System) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::Config(format!("step must be positive, got {}", self.step)));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::Config(format!("duration must be positive, got {}", self.duration)));
        }
        if self.record_stride == 0 {
            return Err(Error::Config("record_stride must be at least 1".into()));
        }
        if !(self.sync_threshold > 0.0) {
            return Err(Error::Config("sync_threshold must be positive".into()));
        }
        if !on_grid(self.duration, self.step) {
            return Err(Error::Config(format!("duration {} is not a multiple of the step {}", self.duration, self.step)));
        }
        if let Some(t) = system.schedule.instants_until(self.duration).into_iter().find(|&t| !on_grid(t, self.step)) {
            return Err(Error::Config(format!("switching instant {t} is not a multiple of the step {}", self.step)));
        }
        for (i, spec) in system.followers.iter().enumerate() {
            if let Some(t) = spec.disturbance.breakpoints(self.duration).into_iter().find(|&t| !on_grid(t, self.step)) {
                return Err(Error::Config(format!(
                    "agent {}: disturbance breakpoint {t} is not a multiple of the step {}",
                    i + 1,
                    self.step
                )));
            }
        }
        Ok(())
    }
}

fn on_grid(t: f64, h: f64) -> bool {
    let k = (t / h).round();
    (t - k * h).abs() <= time_eps(t)
}

/// Position of one follower's blocks in the flat state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentSlots {
    pub x: Range<usize>,
    pub theta_hat: Range<usize>,
    pub d_hat: usize,
    pub v: Range<usize>,
    pub s: Range<usize>,
    pub l: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub leader: Range<usize>,
    pub agents: Vec<AgentSlots>,
    pub dim: usize,
}

impl Layout {
    /// `blocks` yields `(order, regressor_dim)` per follower.
    pub fn new(n: usize, blocks: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let leader = take(n);
        let agents = blocks
            .into_iter()
            .map(|(r, m)| AgentSlots {
                x: take(r),
                theta_hat: take(m),
                d_hat: take(1).start,
                v: take(n),
                s: take(n * n),
                l: take(n),
            })
            .collect();
        Self { n, leader, agents, dim: at }
    }

    pub fn for_system(system: &System) -> Self {
        Self::new(system.leader.dim(), system.followers.iter().map(|f| (f.order(), f.model.regressor_dim())))
    }

    /// Initial state from the system's initial values.
    pub fn pack(&self, system: &System) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        x[self.leader.clone()].copy_from_slice(system.leader.v0_init.as_slice());
        for ((slots, spec), init) in self.agents.iter().zip(&system.followers).zip(&system.inits) {
            x[slots.x.clone()].copy_from_slice(spec.x_init.as_slice());
            x[slots.theta_hat.clone()].copy_from_slice(init.theta_hat.as_slice());
            x[slots.d_hat] = init.d_hat;
            x[slots.v.clone()].copy_from_slice(init.v.as_slice());
            x[slots.s.clone()].copy_from_slice(&row_major(&init.s));
            x[slots.l.clone()].copy_from_slice(init.l.as_slice());
        }
        x
    }

    /// Names the block holding flat index `k`.
    pub fn describe(&self, k: usize) -> String {
        if self.leader.contains(&k) {
            return "leader state".into();
        }
        for (i, a) in self.agents.iter().enumerate() {
            let block = if a.x.contains(&k) {
                "plant state"
            } else if a.theta_hat.contains(&k) {
                "parameter estimate"
            } else if a.d_hat == k {
                "disturbance bound estimate"
            } else if a.v.contains(&k) {
                "leader state estimate"
            } else if a.s.contains(&k) {
                "leader matrix estimate"
            } else if a.l.contains(&k) {
                "observer gain estimate"
            } else {
                continue;
            };
            return format!("agent {} {block}", i + 1);
        }
        format!("index {k}")
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Diagnostics of one follower at one instant.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AgentSnapshot {
    pub y: f64,
    /// `y^(k) − y0^(k)` for `k < r`.
    pub e: Vec<f64>,
    pub s: f64,
    pub p: f64,
    pub p_dot: f64,
    pub u_bar: f64,
    pub u: f64,
    pub d: f64,
    pub d_hat: f64,
    pub v_err: f64,
    pub s_err: f64,
    pub l_err: f64,
    /// `max_k |F S_i^k v_i − y0^(k)|` over `k` up to the largest order minus one.
    pub cor_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Snapshot {
    pub t: f64,
    pub sigma: usize,
    pub agents: Vec<AgentSnapshot>,
    pub v: f64,
}

struct AgentWork {
    scratch: SlidingScratch,
    coupling: Coupling,
    f_vals: Vec<f64>,
    lambda_inv: Vec<f64>,
}

/// Derivative evaluation with preallocated buffers.
struct Dynamics<'a> {
    system: &'a System,
    layout: Layout,
    s0: Vec<f64>,
    work: Vec<AgentWork>,
    tmp: Vec<f64>,
}

struct AgentTerms {
    p: f64,
    s: f64,
    p_dot: f64,
    u: f64,
}

impl<'a> Dynamics<'a> {
    fn new(system: &'a System) -> Self {
        let layout = Layout::for_system(system);
        let n = layout.n;
        let work = system
            .followers
            .iter()
            .map(|f| AgentWork {
                scratch: SlidingScratch::default(),
                coupling: Coupling::new(n),
                f_vals: vec![0.0; f.model.regressor_dim()],
                lambda_inv: row_major(&f.model.lambda_inv),
            })
            .collect();
        Self { system, layout, s0: row_major(&system.leader.s), work, tmp: vec![0.0; n] }
    }

    fn check_finite(&self, t: f64, x: &[f64]) -> Result<()> {
        match x.iter().position(|v| !v.is_finite()) {
            Some(k) => Err(Error::Divergence { time: t, location: self.layout.describe(k) }),
            None => Ok(()),
        }
    }

    /// Sliding quantities, coupling, regressor and control input of agent `i`
    /// (0-based), leaving the regressor values and coupling in the work buffers.
    fn agent_terms(&mut self, i: usize, t: f64, x: &[f64], sigma: usize) -> Result<AgentTerms> {
        let system = self.system;
        let spec = &system.followers[i];
        let layout = &self.layout;
        let slots = &layout.agents[i];
        let graph = &system.schedule.graphs()[sigma];
        let s0 = &self.s0;
        let l0 = system.l0.as_slice();
        let node = |j: usize| {
            if j == 0 {
                EstimateRef { v: &x[layout.leader.clone()], s: s0, l: l0 }
            } else {
                let a = &layout.agents[j - 1];
                EstimateRef { v: &x[a.v.clone()], s: &x[a.s.clone()], l: &x[a.l.clone()] }
            }
        };
        let w = &mut self.work[i];
        coupling_into(i + 1, node, graph, &system.gains, system.leader.f.as_slice(), &mut w.coupling);
        let xi = &x[slots.x.clone()];
        let q = control::sliding_quantities(
            &spec.model.beta,
            xi,
            &x[slots.v.clone()],
            &x[slots.s.clone()],
            system.leader.f.as_slice(),
            &w.coupling.e_v,
            &w.coupling.e_s,
            &mut w.scratch,
        );
        spec.model.regressor_into(xi, t, &mut w.f_vals).map_err(|source| Error::Agent { agent: i + 1, source })?;
        let theta_hat = &x[slots.theta_hat.clone()];
        let mut u = dot(&w.f_vals, theta_hat) - spec.model.k_gain * q.s + q.p_dot;
        if system.control.mode == ControlMode::DisturbanceRejection {
            u -= control::smoothed_sign(q.s, system.control.epsilon) * x[slots.d_hat];
        }
        Ok(AgentTerms { p: q.p, s: q.s, p_dot: q.p_dot, u })
    }

    fn rhs(&mut self, t: f64, x: &[f64], dx: &mut [f64], sigma: usize, d: &[f64]) -> Result<()> {
        self.check_finite(t, x)?;
        let n = self.layout.n;
        let leader = self.layout.leader.clone();
        matvec(&self.s0, &x[leader.clone()], &mut dx[leader]);
        for (i, &d_i) in d.iter().enumerate() {
            let terms = self.agent_terms(i, t, x, sigma)?;
            let spec = &self.system.followers[i];
            let slots = &self.layout.agents[i];
            let w = &self.work[i];
            let r = spec.order();
            let xi = &x[slots.x.clone()];
            let dxi = &mut dx[slots.x.clone()];
            dxi[..r - 1].copy_from_slice(&xi[1..]);
            // the plant shares the regressor rows with the controller's model
            dxi[r - 1] = terms.u + d_i - dot(&w.f_vals, spec.theta_true.as_slice());

            matvec(&w.lambda_inv, &w.f_vals, &mut dx[slots.theta_hat.clone()]);
            for v in &mut dx[slots.theta_hat.clone()] {
                *v *= -terms.s;
            }
            dx[slots.d_hat] = match self.system.control.mode {
                ControlMode::Baseline => 0.0,
                ControlMode::DisturbanceRejection => control::smoothed_sign(terms.s, self.system.control.epsilon) * terms.s,
            };

            matvec(&x[slots.s.clone()], &x[slots.v.clone()], &mut self.tmp);
            for k in 0..n {
                dx[slots.v.start + k] = self.tmp[k] + w.coupling.e_v[k];
            }
            dx[slots.s.clone()].copy_from_slice(&w.coupling.e_s);
            dx[slots.l.clone()].copy_from_slice(&w.coupling.l_dot);
        }
        Ok(())
    }

    fn snapshot(&mut self, t: f64, x: &[f64], sigma: usize) -> Result<Snapshot> {
        self.check_finite(t, x)?;
        let system = self.system;
        let n = self.layout.n;
        let kmax = system.max_derivative();
        let v0 = &x[self.layout.leader.clone()];
        let f = system.leader.f.as_slice();
        let mut y0 = Vec::with_capacity(kmax + 1);
        let mut w = v0.to_vec();
        let mut tmp = vec![0.0; n];
        for k in 0..=kmax {
            if k > 0 {
                matvec(&self.s0, &w, &mut tmp);
                std::mem::swap(&mut w, &mut tmp);
            }
            y0.push(dot(f, &w));
        }
        let mut agents = Vec::with_capacity(system.followers.len());
        let mut lyap = Vec::with_capacity(system.followers.len());
        for i in 0..system.followers.len() {
            let terms = self.agent_terms(i, t, x, sigma)?;
            let spec = &system.followers[i];
            let slots = &self.layout.agents[i];
            let xi = &x[slots.x.clone()];
            let vi = &x[slots.v.clone()];
            let si = &x[slots.s.clone()];
            let li = &x[slots.l.clone()];
            let e: Vec<f64> = (0..spec.order()).map(|k| xi[k] - y0[k]).collect();
            let mut cor_err: f64 = 0.0;
            let mut w = vi.to_vec();
            for (k, y0k) in y0.iter().enumerate() {
                if k > 0 {
                    matvec(si, &w, &mut tmp);
                    std::mem::swap(&mut w, &mut tmp);
                }
                cor_err = cor_err.max((dot(f, &w) - y0k).abs());
            }
            let norm_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            let d_hat = x[slots.d_hat];
            agents.push(AgentSnapshot {
                y: xi[0],
                e,
                s: terms.s,
                p: terms.p,
                p_dot: terms.p_dot,
                u_bar: control::u_bar(&spec.model, terms.s, vi, si, f, &y0),
                u: terms.u,
                d: disturbance_at(&spec.disturbance, t),
                d_hat,
                v_err: norm_diff(vi, v0),
                s_err: norm_diff(si, &self.s0),
                l_err: norm_diff(li, system.l0.as_slice()),
                cor_err,
            });
            let theta_hat = DVector::from_column_slice(&x[slots.theta_hat.clone()]);
            lyap.push(LyapunovTerm {
                s: terms.s,
                theta_tilde: theta_hat - &spec.theta_true,
                lambda: spec.model.lambda.clone(),
                d_tilde: d_hat - spec.disturbance_bound(),
            });
        }
        let v = control::lyapunov_v(&lyap, system.control.mode);
        Ok(Snapshot { t, sigma, agents, v })
    }
}

/// Per-step bookkeeping of the Lyapunov function `V` and the integral `W`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LyapunovSummary {
    pub v_initial: f64,
    pub v_final: f64,
    /// Per-step increase above which `V` counts as increasing: `1e-9 (1 + V(0))`.
    pub tolerance: f64,
    pub violations: u64,
    pub worst_increase: f64,
    pub w_total: f64,
}

/// Step-by-step driver of one run.
pub struct Simulation<'a> {
    dynamics: Dynamics<'a>,
    config: RunConfig,
    state: Vec<f64>,
    index: u64,
    ws: Workspace,
    current: Snapshot,
    lyapunov: LyapunovSummary,
    w_integrand: f64,
    d_held: Vec<f64>,
}

impl<'a> Simulation<'a> {
    pub fn new(system: &'a System, config: &RunConfig) -> Result<Self> {
        config.validate(system)?;
        let mut dynamics = Dynamics::new(system);
        let state = dynamics.layout.pack(system);
        let sigma = system.schedule.sigma_at(0.0)?;
        let current = dynamics.snapshot(0.0, &state, sigma)?;
        let w_integrand = weighted_s2(system, &current);
        let lyapunov = LyapunovSummary {
            v_initial: current.v,
            v_final: current.v,
            tolerance: 1e-9 * (1.0 + current.v),
            ..Default::default()
        };
        let ws = Workspace::new(state.len());
        Ok(Self {
            dynamics,
            config: config.clone(),
            state,
            index: 0,
            ws,
            current,
            lyapunov,
            w_integrand,
            d_held: vec![0.0; system.followers.len()],
        })
    }

    pub fn time(&self) -> f64 {
        self.index as f64 * self.config.step
    }

    pub fn step_index(&self) -> u64 {
        self.index
    }

    pub fn is_finished(&self) -> bool {
        self.index >= self.config.step_count()
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn layout(&self) -> &Layout {
        &self.dynamics.layout
    }

    /// Diagnostics at the current grid time.
    pub fn snapshot(&self) -> &Snapshot {
        &self.current
    }

    pub fn lyapunov(&self) -> LyapunovSummary {
        self.lyapunov
    }

    /// Advances one step of the configured integrator.
    pub fn advance(&mut self) -> Result<()> {
        let t = self.time();
        let h = self.config.step;
        let system = self.dynamics.system;
        let sigma = system.schedule.sigma_at(t)?;
        for (d, spec) in self.d_held.iter_mut().zip(&system.followers) {
            *d = disturbance_at(&spec.disturbance, t);
        }
        let d_held = std::mem::take(&mut self.d_held);
        let dynamics = &mut self.dynamics;
        let mut f = |tt: f64, x: &[f64], dx: &mut [f64]| dynamics.rhs(tt, x, dx, sigma, &d_held);
        let result = ode::step(self.config.integrator, &mut f, t, &mut self.state, h, &mut self.ws);
        self.d_held = d_held;
        result?;
        self.index += 1;
        let t_next = self.time();
        let sigma_next = system.schedule.sigma_at(t_next)?;
        let next = self.dynamics.snapshot(t_next, &self.state, sigma_next)?;
        let integrand = weighted_s2(system, &next);
        self.lyapunov.w_total += 0.5 * h * (integrand + self.w_integrand);
        self.w_integrand = integrand;
        let increase = next.v - self.current.v;
        if increase > self.lyapunov.tolerance {
            self.lyapunov.violations += 1;
        }
        self.lyapunov.worst_increase = self.lyapunov.worst_increase.max(increase);
        self.lyapunov.v_final = next.v;
        self.current = next;
        Ok(())
    }
}

fn weighted_s2(system: &System, snap: &Snapshot) -> f64 {
    system.followers.iter().zip(&snap.agents).map(|(f, a)| f.model.k_gain * a.s * a.s).sum()
}

/// Recorded time series; one row per recorded step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    orders: Vec<usize>,
}

/// Per-agent trace columns after `y` and the error derivatives.
const AGENT_TAIL: [&str; 11] = ["s", "p", "p_dot", "u_bar", "u", "d", "D_hat", "v_err", "S_err", "L_err", "cor_err"];

impl Trace {
    pub fn new(orders: &[usize]) -> Self {
        let mut columns = vec!["time".to_string()];
        for (i, &r) in orders.iter().enumerate() {
            let a = i + 1;
            columns.push(format!("y_{a}"));
            for k in 0..r {
                columns.push(format!("e{k}_{a}"));
            }
            for name in AGENT_TAIL {
                columns.push(format!("{name}_{a}"));
            }
        }
        columns.extend(["V", "W", "sigma"].map(String::from));
        Self { columns, rows: Vec::new(), orders: orders.to_vec() }
    }

    pub fn follower_count(&self) -> usize {
        self.orders.len()
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn push(&mut self, snap: &Snapshot, w: f64) {
        let mut row = Vec::with_capacity(self.columns.len());
        row.push(snap.t);
        for a in &snap.agents {
            row.push(a.y);
            row.extend_from_slice(&a.e);
            row.extend([a.s, a.p, a.p_dot, a.u_bar, a.u, a.d, a.d_hat, a.v_err, a.s_err, a.l_err, a.cor_err]);
        }
        row.extend([snap.v, w, snap.sigma as f64]);
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Values of a named column; empty when the name is unknown.
    pub fn column(&self, name: &str) -> Vec<f64> {
        match self.column_index(name) {
            Some(k) => self.rows.iter().map(|r| r[k]).collect(),
            None => Vec::new(),
        }
    }

    /// Column of agent `agent` (1-based), e.g. `agent_column("s", 2)`.
    pub fn agent_column(&self, name: &str, agent: usize) -> Vec<f64> {
        self.column(&format!("{name}_{agent}"))
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[0]).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| format_value(*v)))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest round-trip decimal form, so files are byte-stable.
pub fn format_value(v: f64) -> String {
    format!("{v:?}")
}

/// Least-squares line `y = a + b t`; returns `(slope, r²)`.
pub fn linear_fit(t: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = t.len();
    if n < 2 {
        return None;
    }
    let tm = t.iter().sum::<f64>() / n as f64;
    let ym = y.iter().sum::<f64>() / n as f64;
    let stt: f64 = t.iter().map(|a| (a - tm) * (a - tm)).sum();
    let sty: f64 = t.iter().zip(y).map(|(a, b)| (a - tm) * (b - ym)).sum();
    let syy: f64 = y.iter().map(|b| (b - ym) * (b - ym)).sum();
    if stt == 0.0 {
        return None;
    }
    let slope = sty / stt;
    let r2 = if syy == 0.0 { 1.0 } else { (sty * sty) / (stt * syy) };
    Some((slope, r2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub agent: usize,
    /// `max_k |e^(k)(T)|`.
    pub terminal_error: f64,
    pub terminal_v_err: f64,
    pub terminal_s_err: f64,
    pub terminal_l_err: f64,
    /// Slope of `ln(‖v_i − v0‖ + 1e-15)` over the final half of the run.
    pub decay_slope: Option<f64>,
    pub decay_r2: Option<f64>,
    pub d_hat_max: f64,
    /// `max |e|` over the last quarter of the run.
    pub residual_band: f64,
    /// `max |s|` over the last quarter of the run.
    pub chattering_band: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub agents: Vec<AgentMetrics>,
    pub max_terminal_error: f64,
    /// First recorded time after which the tracking error stays below the threshold.
    pub sync_time: Option<f64>,
    pub sync_threshold: f64,
    /// `W(T) − W(0.9 T)`.
    pub w_tail_increment: f64,
    pub converged: bool,
}

/// Terminal errors, decay fits, synchronization time and bands from a trace.
pub fn convergence_metrics(trace: &Trace, sync_threshold: f64) -> Metrics {
    let times = trace.times();
    let t_end = times.last().copied().unwrap_or(0.0);
    let t_start = times.first().copied().unwrap_or(0.0);
    let span = t_end - t_start;
    let after = |frac: f64| -> usize {
        let t0 = t_start + frac * span;
        times.iter().position(|&t| t >= t0 - time_eps(t0)).unwrap_or(times.len())
    };
    let half = after(0.5);
    let quarter = after(0.75);
    let tail10 = after(0.9);
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));

    let mut tracking = vec![0.0f64; times.len()];
    let mut agents = Vec::new();
    for (i, &r) in trace.orders().iter().enumerate() {
        let a = i + 1;
        let errors: Vec<Vec<f64>> = (0..r).map(|k| trace.agent_column(&format!("e{k}"), a)).collect();
        for e in &errors {
            for (m, v) in tracking.iter_mut().zip(e) {
                *m = m.max(v.abs());
            }
        }
        let last = |name: &str| trace.agent_column(name, a).last().copied().unwrap_or(0.0);
        let v_err = trace.agent_column("v_err", a);
        let logs: Vec<f64> = v_err[half..].iter().map(|v| (v + 1e-15).ln()).collect();
        let fit = linear_fit(&times[half..], &logs);
        agents.push(AgentMetrics {
            agent: a,
            terminal_error: errors.iter().map(|e| e.last().map_or(0.0, |v| v.abs())).fold(0.0, f64::max),
            terminal_v_err: last("v_err"),
            terminal_s_err: last("S_err"),
            terminal_l_err: last("L_err"),
            decay_slope: fit.map(|f| f.0),
            decay_r2: fit.map(|f| f.1),
            d_hat_max: max_abs(&trace.agent_column("D_hat", a)),
            residual_band: max_abs(&errors[0][quarter..]),
            chattering_band: max_abs(&trace.agent_column("s", a)[quarter..]),
        });
    }
    let max_terminal_error = agents.iter().map(|m| m.terminal_error).fold(0.0, f64::max);
    let sync_time = match tracking.iter().rposition(|&e| e >= sync_threshold) {
        None => times.first().copied(),
        Some(k) if k + 1 < times.len() => Some(times[k + 1]),
        Some(_) => None,
    };
    let w = trace.column("W");
    let w_tail_increment = match (w.last(), w.get(tail10)) {
        (Some(end), Some(start)) => end - start,
        _ => 0.0,
    };
    let observers_settled = agents.iter().all(|m| {
        let decaying = m.decay_slope.is_some_and(|s| s < 0.0) || m.terminal_v_err <= 1e-12;
        decaying && m.terminal_v_err < sync_threshold && m.terminal_s_err < sync_threshold && m.terminal_l_err < sync_threshold
    });
    Metrics {
        converged: sync_time.is_some() && observers_settled,
        agents,
        max_terminal_error,
        sync_time,
        sync_threshold,
        w_tail_increment,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub agent: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: ControlMode,
    pub epsilon: f64,
    pub step: f64,
    pub duration: f64,
    pub integrator: Integrator,
    pub steps: u64,
    pub trace_rows: usize,
    pub seeds: Vec<SeedEntry>,
    pub lyapunov: LyapunovSummary,
    pub metrics: Metrics,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    pub summary: Summary,
}

/// Integrates the closed loop over `[0, T]`, recording every
/// `record_stride`-th step and the final step.
pub fn run(system: &System, config: &RunConfig) -> Result<RunOutput> {
    let mut sim = Simulation::new(system, config)?;
    let orders: Vec<usize> = system.followers.iter().map(|f| f.order()).collect();
    let mut trace = Trace::new(&orders);
    trace.push(sim.snapshot(), 0.0);
    let stride = config.record_stride as u64;
    while !sim.is_finished() {
        sim.advance()?;
        if sim.step_index() % stride == 0 || sim.is_finished() {
            trace.push(sim.snapshot(), sim.lyapunov().w_total);
        }
    }
    let metrics = convergence_metrics(&trace, config.sync_threshold);
    let seeds = system
        .followers
        .iter()
        .enumerate()
        .filter_map(|(i, f)| f.disturbance.seed().map(|seed| SeedEntry { agent: i + 1, seed }))
        .collect();
    let summary = Summary {
        mode: system.control.mode,
        epsilon: system.control.epsilon,
        step: config.step,
        duration: config.duration,
        integrator: config.integrator,
        steps: sim.step_index(),
        trace_rows: trace.rows.len(),
        seeds,
        lyapunov: sim.lyapunov(),
        metrics,
    };
    Ok(RunOutput { trace, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::BoundExpr;
    use crate::graph::DiGraph;
    use crate::plant::{ControllerModel, DisturbanceProfile};

    fn rot() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0., 1., -1., 0.])
    }

    fn leader() -> LeaderSystem {
        LeaderSystem::new(rot(), DVector::from_vec(vec![1., 0.]), DVector::from_vec(vec![1., 0.])).unwrap()
    }

    fn follower(order: usize, beta: Vec<f64>, rows: &[&str], theta: Vec<f64>, x0: Vec<f64>) -> FollowerSpec {
        let regressor: Vec<BoundExpr> = rows.iter().map(|s| BoundExpr::parse(s, order).unwrap()).collect();
        let m = regressor.len();
        let model = ControllerModel::new(order, regressor, beta, 2.0, DMatrix::identity(m, m)).unwrap();
        FollowerSpec::new(
            model,
            DVector::from_vec(theta),
            DisturbanceProfile::Zero,
            BoundExpr::parse("1", order).unwrap(),
            DVector::from_vec(x0),
        )
        .unwrap()
    }

    fn system_with(followers: Vec<FollowerSpec>, edges: Vec<(usize, usize)>, synced: bool) -> System {
        let count = followers.len();
        let g = DiGraph::new(count + 1, edges).unwrap();
        let schedule = SwitchingSchedule::fixed(g, 1.0).unwrap();
        let l0 = DVector::from_vec(vec![1., 0.]);
        let inits = followers
            .iter()
            .map(|f| {
                let mut init = AgentInit::zeros(f.model.regressor_dim(), 2);
                if synced {
                    init.theta_hat = f.theta_true.clone();
                    init.v = DVector::from_vec(vec![1., 0.]);
                    init.s = rot();
                    init.l = l0.clone();
                }
                init
            })
            .collect();
        System::new(leader(), l0, ObserverGains::output_based(1.0, 1.0), schedule, followers, inits, ControlSettings::default())
            .unwrap()
    }

    #[test]
    #[allow(clippy::identity_op)]
    fn layout_is_a_partition() {
        let layout = Layout::new(2, [(1, 0), (3, 2)]);
        assert_eq!(layout.dim, 2 + (1 + 0 + 1 + 2 + 4 + 2) + (3 + 2 + 1 + 2 + 4 + 2));
        let mut owner = vec![0usize; layout.dim];
        let mut mark = |r: Range<usize>| r.for_each(|k| owner[k] += 1);
        mark(layout.leader.clone());
        for a in &layout.agents {
            mark(a.x.clone());
            mark(a.theta_hat.clone());
            mark(a.d_hat..a.d_hat + 1);
            mark(a.v.clone());
            mark(a.s.clone());
            mark(a.l.clone());
        }
        assert!(owner.iter().all(|&c| c == 1));
        assert_eq!(layout.describe(layout.agents[1].d_hat), "agent 2 disturbance bound estimate");
        assert_eq!(layout.describe(0), "leader state");
    }

    #[test]
    fn pack_places_initial_values() {
        let sys = system_with(vec![follower(2, vec![1.0], &["x1"], vec![0.5], vec![0.3, -0.2])], vec![(0, 1)], true);
        let layout = Layout::for_system(&sys);
        let x = layout.pack(&sys);
        let a = &layout.agents[0];
        assert_eq!(&x[a.x.clone()], &[0.3, -0.2]);
        assert_eq!(&x[a.theta_hat.clone()], &[0.5]);
        assert_eq!(&x[a.s.clone()], &[0., 1., -1., 0.]);
        assert_eq!(&x[layout.leader.clone()], &[1., 0.]);
    }

    #[test]
    fn synchronized_manifold_is_invariant() {
        // y0 = cos t; start every follower exactly on the leader's trajectory
        let followers = vec![
            follower(1, vec![], &["x1"], vec![1.5], vec![1.0]),
            follower(2, vec![1.0], &["sin(t)*x2", "x1"], vec![-1.0, 0.5], vec![1.0, 0.0]),
            follower(3, vec![2.0, 1.0], &["x1^2"], vec![0.7], vec![1.0, 0.0, -1.0]),
        ];
        let sys = system_with(followers, vec![(0, 1), (1, 2), (2, 1), (0, 3)], true);
        let cfg = RunConfig::new(1e-3, 1.0);
        let mut sim = Simulation::new(&sys, &cfg).unwrap();
        while !sim.is_finished() {
            let before: Vec<f64> = sim.snapshot().agents.iter().flat_map(|a| a.e.iter().chain([&a.s]).copied()).collect();
            sim.advance().unwrap();
            let after: Vec<f64> = sim.snapshot().agents.iter().flat_map(|a| a.e.iter().chain([&a.s]).copied()).collect();
            for (b, a) in before.iter().zip(&after) {
                assert!((a - b).abs() < 1e-12, "step {}: {b} -> {a}", sim.step_index());
            }
        }
    }

    #[test]
    fn leader_only_conserves_norm() {
        let g = DiGraph::empty(1);
        let schedule = SwitchingSchedule::fixed(g, 1.0).unwrap();
        let sys = System::new(
            leader(),
            DVector::from_vec(vec![1., 0.]),
            ObserverGains::output_based(1.0, 1.0),
            schedule,
            vec![],
            vec![],
            ControlSettings::default(),
        )
        .unwrap();
        let cfg = RunConfig::new(1e-3, 10.0);
        let mut sim = Simulation::new(&sys, &cfg).unwrap();
        let mut steps = 0;
        while !sim.is_finished() {
            sim.advance().unwrap();
            steps += 1;
        }
        assert_eq!(steps, 10_000);
        let v = sim.state();
        assert!(((v[0] * v[0] + v[1] * v[1]).sqrt() - 1.0).abs() < 1e-10);
    }

    fn terminal_state(sys: &System, h: f64, integrator: Integrator) -> Vec<f64> {
        let mut cfg = RunConfig::new(h, 1.0);
        cfg.integrator = integrator;
        let mut sim = Simulation::new(sys, &cfg).unwrap();
        while !sim.is_finished() {
            sim.advance().unwrap();
        }
        sim.state().to_vec()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn integrator_orders_on_the_closed_loop() {
        let followers = vec![
            follower(2, vec![1.0], &["sin(t)*x2", "x1"], vec![-1.0, 0.5], vec![0.2, 0.1]),
            follower(1, vec![], &["x1"], vec![1.0], vec![-0.3]),
        ];
        let sys = system_with(followers, vec![(0, 1), (1, 2), (2, 1)], false);
        let reference = terminal_state(&sys, 1.0 / 1024.0, Integrator::Rk4);
        let err = |h: f64, m: Integrator| dist(&terminal_state(&sys, h, m), &reference);
        let euler_ratio = err(1.0 / 64.0, Integrator::Euler) / err(1.0 / 128.0, Integrator::Euler);
        assert!((1.7..2.3).contains(&euler_ratio), "euler ratio {euler_ratio}");
        let rk4_ratio = err(1.0 / 16.0, Integrator::Rk4) / err(1.0 / 32.0, Integrator::Rk4);
        assert!((12.0..20.0).contains(&rk4_ratio), "rk4 ratio {rk4_ratio}");
    }

    #[test]
    fn runs_are_deterministic() {
        let followers = vec![follower(2, vec![1.0], &["x1^2"], vec![1.0], vec![0.2, 0.1])];
        let sys = system_with(followers, vec![(0, 1)], false);
        let cfg = RunConfig::new(1e-3, 2.0);
        let a = run(&sys, &cfg).unwrap();
        let b = run(&sys, &cfg).unwrap();
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        a.trace.write_csv(&mut ca).unwrap();
        b.trace.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.summary, b.summary);
    }

    #[test]
    fn trace_shape() {
        let followers = vec![follower(2, vec![1.0], &["x1"], vec![1.0], vec![0.2, 0.1])];
        let sys = system_with(followers, vec![(0, 1)], false);
        let mut cfg = RunConfig::new(1e-3, 1.0);
        cfg.record_stride = 10;
        let out = run(&sys, &cfg).unwrap();
        assert_eq!(out.trace.rows.len(), 101);
        assert_eq!(out.trace.columns[..4], ["time", "y_1", "e0_1", "e1_1"].map(String::from));
        assert_eq!(out.trace.columns.last().unwrap(), "sigma");
        assert_eq!(out.trace.rows[0].len(), out.trace.columns.len());
    }

    #[test]
    fn open_loop_does_not_converge() {
        // no edges: the observer never learns the leader and tracking fails
        let followers = vec![follower(1, vec![], &["x1"], vec![-0.5], vec![0.0])];
        let sys = system_with(followers, vec![], false);
        let out = run(&sys, &RunConfig::new(1e-2, 20.0)).unwrap();
        assert!(!out.summary.metrics.converged);
        assert!(out.summary.metrics.sync_time.is_none());
    }

    #[test]
    fn misaligned_grid_is_rejected() {
        let followers = vec![follower(1, vec![], &["x1"], vec![1.0], vec![0.0])];
        let mut sys = system_with(followers, vec![(0, 1)], false);
        let g = DiGraph::new(2, [(0, 1)]).unwrap();
        sys.schedule = SwitchingSchedule::periodic(vec![g.clone(), g], &[(0, 0.3), (1, 0.3)], 0.3).unwrap();
        assert!(RunConfig::new(0.25, 1.0).validate(&sys).is_err());
        assert!(RunConfig::new(0.1, 1.0).validate(&sys).is_ok());
        assert!(RunConfig::new(0.1, 1.05).validate(&sys).is_err());
        sys.followers[0].disturbance = DisturbanceProfile::SquareWave { amplitude: 1.0, period: 0.3 };
        assert!(RunConfig::new(0.1, 1.0).validate(&sys).is_err());
    }

    #[test]
    fn divergence_is_attributed() {
        // unstable plant drift with no way to learn it fast enough: θ large, k small
        let regressor = vec![BoundExpr::parse("x1^3", 1).unwrap()];
        let model = ControllerModel::new(1, regressor, vec![], 1e-3, DMatrix::identity(1, 1)).unwrap();
        let spec = FollowerSpec::new(
            model,
            DVector::from_vec(vec![-50.0]),
            DisturbanceProfile::Zero,
            BoundExpr::parse("abs(x1)^3", 1).unwrap(),
            DVector::from_vec(vec![3.0]),
        )
        .unwrap();
        let sys = system_with(vec![spec], vec![], false);
        match run(&sys, &RunConfig::new(1e-2, 5.0)) {
            Err(Error::Divergence { location, .. }) => assert!(location.starts_with("agent 1"), "{location}"),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected divergence"),
        }
    }

    fn synthetic(values: impl Fn(f64) -> f64, t_end: f64) -> Trace {
        let mut trace = Trace::new(&[1]);
        for k in 0..=200 {
            let t = t_end * k as f64 / 200.0;
            let e = values(t);
            let snap = Snapshot {
                t,
                sigma: 0,
                v: 0.0,
                agents: vec![AgentSnapshot { e: vec![e], v_err: e, s: e, ..Default::default() }],
            };
            trace.push(&snap, 0.0);
        }
        trace
    }

    #[test]
    fn metrics_on_synthetic_traces() {
        let m = convergence_metrics(&synthetic(|t| (-0.5 * t).exp(), 20.0), 1e-2);
        let slope = m.agents[0].decay_slope.unwrap();
        assert!((slope + 0.5).abs() < 1e-3, "{slope}");
        assert!(m.agents[0].decay_r2.unwrap() > 0.999);
        // e^{-0.5 t} < 1e-2 after t = 9.21; the grid step is 0.1
        let sync = m.sync_time.unwrap();
        assert!((9.2..9.4).contains(&sync), "{sync}");

        let m = convergence_metrics(&synthetic(|_| 0.3, 20.0), 1e-2);
        assert!(m.agents[0].decay_slope.unwrap().abs() < 1e-12);
        assert!(!m.converged);
        assert!(m.sync_time.is_none());

        let m = convergence_metrics(&synthetic(|_| 0.0, 20.0), 1e-2);
        assert_eq!(m.sync_time, Some(0.0));
    }

    #[test]
    fn linear_fit_recovers_line() {
        let t: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let y: Vec<f64> = t.iter().map(|x| 3.0 - 0.25 * x).collect();
        let (slope, r2) = linear_fit(&t, &y).unwrap();
        assert!((slope + 0.25).abs() < 1e-14);
        assert!((r2 - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0], &[1.0]).is_none());
    }
}
