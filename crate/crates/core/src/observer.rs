//! Adaptive distributed observer.
//!
//! Each follower keeps estimates `(v_i, S_i, L_i)` of the leader state, the
//! leader dynamics and the observer gain, and updates them from its current
//! neighbors only:
//!
//! ```text
//! v_i' = S_i v_i + L_i Σ F (v_j − v_i)
//! S_i' = μ1 Σ (S_j − S_i)
//! L_i' = μ2 Σ (L_j − L_i)
//! ```
//!
//! with node 0 contributing `(v0, S, L0)`. In state-based mode the leader
//! state itself is exchanged, `v_i' = S_i v_i + μv Σ (v_j − v_i)`, and `L_i`
//! is frozen.
//!
//! Matrices in flat slices are row-major.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DiGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObserverMode {
    #[default]
    OutputBased,
    StateBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObserverGains {
    pub mu1: f64,
    pub mu2: f64,
    pub mode: ObserverMode,
    /// Consensus gain on `v` in state-based mode.
    pub mu_v: f64,
}

impl ObserverGains {
    pub fn output_based(mu1: f64, mu2: f64) -> Self {
        Self { mu1, mu2, mode: ObserverMode::OutputBased, mu_v: 1.0 }
    }

    pub fn state_based(mu1: f64, mu_v: f64) -> Self {
        Self { mu1, mu2: 1.0, mode: ObserverMode::StateBased, mu_v }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu1 >= 0.0 && self.mu2 >= 0.0 && self.mu_v >= 0.0) {
            return Err(Error::Config("observer gains must be non-negative".into()));
        }
        Ok(())
    }
}

/// Borrowed `(v, S, L)` of one node; `s` is row-major.
#[derive(Debug, Clone, Copy)]
pub struct EstimateRef<'a> {
    pub v: &'a [f64],
    pub s: &'a [f64],
    pub l: &'a [f64],
}

/// `out = A x` for a row-major `n×n` matrix.
pub(crate) fn matvec(a: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate().take(n) {
        *o = a[i * n..(i + 1) * n].iter().zip(x).map(|(p, q)| p * q).sum();
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Innovation terms of one agent, written into caller buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Coupling {
    /// `e_v`, so that `v_i' = S_i v_i + e_v`.
    pub e_v: Vec<f64>,
    /// `e_S = μ1 Σ (S_j − S_i)`, row-major; equals `S_i'`.
    pub e_s: Vec<f64>,
    /// `L_i'`.
    pub l_dot: Vec<f64>,
}

impl Coupling {
    pub fn new(n: usize) -> Self {
        Self { e_v: vec![0.0; n], e_s: vec![0.0; n * n], l_dot: vec![0.0; n] }
    }
}

/// Computes the coupling terms of follower `i` under graph `g`. `node(j)`
/// returns the estimates of node `j`, with node 0 the leader boundary data.
pub fn coupling_into<'a>(
    i: usize,
    node: impl Fn(usize) -> EstimateRef<'a>,
    g: &DiGraph,
    gains: &ObserverGains,
    f: &[f64],
    out: &mut Coupling,
) {
    let me = node(i);
    let n = me.v.len();
    out.e_v.iter_mut().for_each(|x| *x = 0.0);
    out.e_s.iter_mut().for_each(|x| *x = 0.0);
    out.l_dot.iter_mut().for_each(|x| *x = 0.0);
    let mut innovation = 0.0;
    for j in g.in_neighbors(i) {
        let other = node(j);
        match gains.mode {
            ObserverMode::OutputBased => {
                innovation += (0..n).map(|k| f[k] * (other.v[k] - me.v[k])).sum::<f64>();
                for k in 0..n {
                    out.l_dot[k] += gains.mu2 * (other.l[k] - me.l[k]);
                }
            }
            ObserverMode::StateBased => {
                for k in 0..n {
                    out.e_v[k] += gains.mu_v * (other.v[k] - me.v[k]);
                }
            }
        }
        for k in 0..n * n {
            out.e_s[k] += gains.mu1 * (other.s[k] - me.s[k]);
        }
    }
    if gains.mode == ObserverMode::OutputBased {
        for k in 0..n {
            out.e_v[k] = me.l[k] * innovation;
        }
    }
}

/// Innovation parts of `d(S_i^k v_i)/dt = S_i^{k+1} v_i + e_k` for `k = 0..=kmax`,
/// given `v_i' = S_i v_i + e_v` and `S_i' = e_S`. The product rule gives
/// `e_0 = e_v` and `e_k = S_i e_{k−1} + e_S S_i^{k−1} v_i`, which reduces to
/// `k S_i^{k−1} e_S v_i + S_i^k e_v` only when `S_i` and `e_S` commute.
/// `out` must hold `kmax + 1` vectors of length `n`.
pub fn e_k_terms_into(s_i: &[f64], v_i: &[f64], e_v: &[f64], e_s: &[f64], kmax: usize, out: &mut [Vec<f64>]) {
    let n = v_i.len();
    out[0].copy_from_slice(e_v);
    // w = S_i^{k-1} v_i
    let mut w = v_i.to_vec();
    let mut tmp = vec![0.0; n];
    for k in 1..=kmax {
        let (done, rest) = out.split_at_mut(k);
        matvec(s_i, &done[k - 1], &mut rest[0]);
        matvec(e_s, &w, &mut tmp);
        for c in 0..n {
            rest[0][c] += tmp[c];
        }
        if k < kmax {
            matvec(s_i, &w, &mut tmp);
            std::mem::swap(&mut w, &mut tmp);
        }
    }
}

/// Owned per-agent estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentEstimate {
    pub v: DVector<f64>,
    pub s: DMatrix<f64>,
    pub l: DVector<f64>,
}

impl AgentEstimate {
    pub fn zeros(n: usize) -> Self {
        Self { v: DVector::zeros(n), s: DMatrix::zeros(n, n), l: DVector::zeros(n) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    pub agents: Vec<AgentEstimate>,
}

/// Leader-side boundary data entering neighbor sums as node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderBoundary {
    pub v0: DVector<f64>,
    pub s: DMatrix<f64>,
    pub l0: DVector<f64>,
    pub f: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentDerivative {
    pub v: DVector<f64>,
    pub s: DMatrix<f64>,
    pub l: DVector<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

struct Flat {
    v: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
    l: Vec<Vec<f64>>,
}

impl Flat {
    fn new(state: &ObserverState, b: &LeaderBoundary) -> Result<Self> {
        let n = b.v0.len();
        let mut flat = Flat {
            v: vec![b.v0.as_slice().to_vec()],
            s: vec![row_major(&b.s)],
            l: vec![b.l0.as_slice().to_vec()],
        };
        for (i, a) in state.agents.iter().enumerate() {
            if a.v.len() != n || a.s.nrows() != n || a.s.ncols() != n || a.l.len() != n {
                return Err(Error::Config(format!("agent {}: observer dimensions do not match n = {n}", i + 1)));
            }
            flat.v.push(a.v.as_slice().to_vec());
            flat.s.push(row_major(&a.s));
            flat.l.push(a.l.as_slice().to_vec());
        }
        Ok(flat)
    }

    fn node(&self, j: usize) -> EstimateRef<'_> {
        EstimateRef { v: &self.v[j], s: &self.s[j], l: &self.l[j] }
    }
}

/// Per-agent `(e_v, e_S)` for every follower.
pub fn coupling_errors(
    state: &ObserverState,
    g: &DiGraph,
    gains: &ObserverGains,
    boundary: &LeaderBoundary,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let flat = Flat::new(state, boundary)?;
    let n = boundary.v0.len();
    let mut c = Coupling::new(n);
    Ok((1..=state.agents.len())
        .map(|i| {
            coupling_into(i, |j| flat.node(j), g, gains, boundary.f.as_slice(), &mut c);
            (DVector::from_column_slice(&c.e_v), DMatrix::from_row_slice(n, n, &c.e_s))
        })
        .collect())
}

/// Time derivatives of every follower's `(v_i, S_i, L_i)`.
pub fn observer_rhs(
    state: &ObserverState,
    g: &DiGraph,
    gains: &ObserverGains,
    boundary: &LeaderBoundary,
) -> Result<Vec<AgentDerivative>> {
    let flat = Flat::new(state, boundary)?;
    let n = boundary.v0.len();
    let mut c = Coupling::new(n);
    Ok((1..=state.agents.len())
        .map(|i| {
            coupling_into(i, |j| flat.node(j), g, gains, boundary.f.as_slice(), &mut c);
            let a = &state.agents[i - 1];
            AgentDerivative {
                v: &a.s * &a.v + DVector::from_column_slice(&c.e_v),
                s: DMatrix::from_row_slice(n, n, &c.e_s),
                l: DVector::from_column_slice(&c.l_dot),
            }
        })
        .collect())
}

/// `e_k` for `k` on an owned estimate.
pub fn e_k_term(s_i: &DMatrix<f64>, v_i: &DVector<f64>, k: usize, e_v: &DVector<f64>, e_s: &DMatrix<f64>) -> DVector<f64> {
    let n = v_i.len();
    let mut out = vec![vec![0.0; n]; k + 1];
    e_k_terms_into(&row_major(s_i), v_i.as_slice(), e_v.as_slice(), &row_major(e_s), k, &mut out);
    DVector::from_vec(out.pop().unwrap())
}

/// `(‖v_i − v0‖, ‖S_i − S‖_F, ‖L_i − L0‖)` per agent.
pub fn observer_error_metrics(state: &ObserverState, boundary: &LeaderBoundary) -> Vec<(f64, f64, f64)> {
    state
        .agents
        .iter()
        .map(|a| ((&a.v - &boundary.v0).norm(), (&a.s - &boundary.s).norm(), (&a.l - &boundary.l0).norm()))
        .collect()
}
