//! Leader-augmented communication graphs and switching signals.
//!
//! Node 0 is always the leader; nodes `1..=N` are followers. An edge `(j, i)`
//! means follower `i` may use agent `j`'s information. Edge weights are 1.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

/// Slack used when comparing grid times against switching instants.
pub(crate) fn time_eps(t: f64) -> f64 {
    1e-9 * t.abs().max(1.0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiGraph {
    node_count: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl DiGraph {
    pub fn new(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::Config("graph needs at least the leader node".into()));
        }
        let mut set = BTreeSet::new();
        for (j, i) in edges {
            if j >= node_count || i >= node_count {
                return Err(Error::Config(format!(
                    "edge {j} -> {i} out of range for {node_count} nodes"
                )));
            }
            if j == i {
                return Err(Error::Config(format!("self-loop on node {i}")));
            }
            set.insert((j, i));
        }
        Ok(Self { node_count, edges: set })
    }

    pub fn empty(node_count: usize) -> Self {
        Self { node_count: node_count.max(1), edges: BTreeSet::new() }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn follower_count(&self) -> usize {
        self.node_count - 1
    }

    /// Edges that matter downstream; anything pointing into the leader is dropped.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied().filter(|&(_, i)| i != 0)
    }

    pub fn has_edge(&self, j: usize, i: usize) -> bool {
        i != 0 && self.edges.contains(&(j, i))
    }

    /// The neighbor set of node `i`: every `j` with `(j, i)` an edge.
    pub fn in_neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges().filter(move |&(_, dst)| dst == i).map(|(src, _)| src)
    }

    pub fn union(&self, other: &DiGraph) -> DiGraph {
        let node_count = self.node_count.max(other.node_count);
        let edges = self.edges.union(&other.edges).copied().collect();
        DiGraph { node_count, edges }
    }

    /// Applies a follower relabeling `perm[i-1] = new label of follower i`.
    /// The leader keeps label 0.
    pub fn relabel(&self, perm: &[usize]) -> Result<DiGraph> {
        let map = |k: usize| if k == 0 { 0 } else { perm[k - 1] };
        DiGraph::new(self.node_count, self.edges.iter().map(|&(j, i)| (map(j), map(i))))
    }

    /// Nodes reachable from the leader along directed edges (leader included).
    pub fn reachable_from_leader(&self) -> Vec<bool> {
        let mut seen = vec![false; self.node_count];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(k) = queue.pop_front() {
            for (j, i) in self.edges() {
                if j == k && !seen[i] {
                    seen[i] = true;
                    queue.push_back(i);
                }
            }
        }
        seen
    }

    /// True when every follower is reachable from node 0, i.e. the graph
    /// contains a spanning tree rooted at the leader.
    pub fn has_leader_spanning_tree(&self) -> bool {
        self.reachable_from_leader().into_iter().all(|r| r)
    }
}

/// Laplacian of the leader-augmented graph: in-degree on the diagonal, `-1`
/// at `(i, j)` for each edge `(j, i)`.
pub fn laplacian(g: &DiGraph) -> DMatrix<f64> {
    let n = g.node_count();
    let mut l = DMatrix::zeros(n, n);
    for (j, i) in g.edges() {
        l[(i, j)] -= 1.0;
        l[(i, i)] += 1.0;
    }
    l
}

/// The Laplacian with the leader's row and column removed.
pub fn h_matrix(g: &DiGraph) -> DMatrix<f64> {
    let l = laplacian(g);
    let n = g.follower_count();
    l.view((1, 1), (n, n)).into_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub start: f64,
    pub graph: usize,
}

/// A piecewise-constant switching signal over a fixed family of graphs.
///
/// Explicit schedules hold the last graph forever. Periodic schedules repeat
/// their interval list with the given period.
#[derive(Debug, Clone)]
pub struct SwitchingSchedule {
    graphs: Vec<DiGraph>,
    intervals: Vec<Interval>,
    dwell: f64,
    period: Option<f64>,
}

impl SwitchingSchedule {
    pub fn explicit(graphs: Vec<DiGraph>, intervals: Vec<Interval>, dwell: f64) -> Result<Self> {
        let s = Self { graphs, intervals, dwell, period: None };
        s.validate()?;
        Ok(s)
    }

    /// Builds a periodic schedule from a cycle of `(graph index, duration)`.
    pub fn periodic(graphs: Vec<DiGraph>, cycle: &[(usize, f64)], dwell: f64) -> Result<Self> {
        let mut intervals = Vec::with_capacity(cycle.len());
        let mut t = 0.0;
        for &(graph, duration) in cycle {
            if !(duration > 0.0) {
                return Err(Error::Config(format!("cycle entry has non-positive duration {duration}")));
            }
            intervals.push(Interval { start: t, graph });
            t += duration;
        }
        let s = Self { graphs, intervals, dwell, period: Some(t) };
        s.validate()?;
        Ok(s)
    }

    /// A single graph active for all time.
    pub fn fixed(graph: DiGraph, dwell: f64) -> Result<Self> {
        Self::explicit(vec![graph], vec![Interval { start: 0.0, graph: 0 }], dwell)
    }

    fn validate(&self) -> Result<()> {
        if !(self.dwell > 0.0) {
            return Err(Error::Config("dwell time must be positive".into()));
        }
        if self.graphs.is_empty() || self.intervals.is_empty() {
            return Err(Error::Config("schedule needs at least one graph and interval".into()));
        }
        let nodes = self.graphs[0].node_count();
        if self.graphs.iter().any(|g| g.node_count() != nodes) {
            return Err(Error::Config("all graphs in a schedule must have the same node count".into()));
        }
        if self.intervals[0].start != 0.0 {
            return Err(Error::Config("first switching instant must be 0".into()));
        }
        for iv in &self.intervals {
            if iv.graph >= self.graphs.len() {
                return Err(Error::Config(format!("interval references unknown graph {}", iv.graph)));
            }
        }
        let slack = |t: f64| time_eps(t);
        for w in self.intervals.windows(2) {
            if w[1].start - w[0].start < self.dwell - slack(w[1].start) {
                return Err(Error::Config(format!(
                    "switching instants {} and {} violate dwell time {}",
                    w[0].start, w[1].start, self.dwell
                )));
            }
        }
        if let Some(p) = self.period {
            let last = self.intervals.last().unwrap().start;
            if p - last < self.dwell - slack(p) {
                return Err(Error::Config(format!(
                    "last cycle entry ({}) is shorter than dwell time {}",
                    p - last,
                    self.dwell
                )));
            }
        }
        Ok(())
    }

    pub fn graphs(&self) -> &[DiGraph] {
        &self.graphs
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn dwell(&self) -> f64 {
        self.dwell
    }

    pub fn period(&self) -> Option<f64> {
        self.period
    }

    pub fn node_count(&self) -> usize {
        self.graphs[0].node_count()
    }

    pub fn is_static(&self) -> bool {
        self.intervals.iter().all(|iv| iv.graph == self.intervals[0].graph)
    }

    fn interval_index(&self, t: f64) -> usize {
        let tol = time_eps(t);
        self.intervals.iter().rposition(|iv| iv.start <= t + tol).unwrap_or(0)
    }

    /// Index of the graph active at `t`; right-continuous at switching instants.
    pub fn sigma_at(&self, t: f64) -> Result<usize> {
        if t < 0.0 || t.is_nan() {
            return Err(Error::Domain(format!("sigma evaluated at negative time {t}")));
        }
        let local = match self.period {
            Some(p) => {
                let k = ((t + time_eps(t)) / p).floor();
                (t - k * p).max(0.0)
            }
            None => t,
        };
        Ok(self.intervals[self.interval_index(local)].graph)
    }

    pub fn graph_at(&self, t: f64) -> Result<&DiGraph> {
        Ok(&self.graphs[self.sigma_at(t)?])
    }

    /// Switching instants (including 0) strictly below `t_end`.
    pub fn instants_until(&self, t_end: f64) -> Vec<f64> {
        let mut out = Vec::new();
        match self.period {
            None => out.extend(self.intervals.iter().map(|iv| iv.start).filter(|&s| s < t_end)),
            Some(p) => {
                let mut base = 0.0;
                let mut k = 0u64;
                'outer: loop {
                    for iv in &self.intervals {
                        let s = base + iv.start;
                        if s >= t_end - time_eps(t_end) {
                            break 'outer;
                        }
                        out.push(s);
                    }
                    k += 1;
                    base = k as f64 * p;
                }
            }
        }
        out
    }

    /// Union of all graphs active somewhere in `[t_start, t_end)`.
    pub fn union_graph(&self, t_start: f64, t_end: f64) -> Result<DiGraph> {
        if !(t_start >= 0.0 && t_end > t_start) {
            return Err(Error::Domain(format!("invalid window [{t_start}, {t_end})")));
        }
        let mut acc = DiGraph::empty(self.node_count());
        let n = self.intervals.len();
        let mut visit = |start: f64, end: f64, graph: usize| {
            if start < t_end - time_eps(t_end) && end > t_start + time_eps(t_start) {
                acc = acc.union(&self.graphs[graph]);
            }
        };
        match self.period {
            None => {
                for (k, iv) in self.intervals.iter().enumerate() {
                    let end = if k + 1 < n { self.intervals[k + 1].start } else { f64::INFINITY };
                    visit(iv.start, end, iv.graph);
                }
            }
            Some(p) => {
                let first = ((t_start + time_eps(t_start)) / p).floor() as u64;
                let mut cycle = first;
                loop {
                    let base = cycle as f64 * p;
                    if base >= t_end - time_eps(t_end) {
                        break;
                    }
                    for (k, iv) in self.intervals.iter().enumerate() {
                        let end = if k + 1 < n { self.intervals[k + 1].start } else { p };
                        visit(base + iv.start, base + end, iv.graph);
                    }
                    cycle += 1;
                    // one full pass has seen every graph in the cycle
                    if cycle - first > 2 {
                        break;
                    }
                }
            }
        }
        Ok(acc)
    }
}

/// A subsequence of switching instants delimiting the union windows of the
/// jointly-connected condition.
///
/// For periodic schedules the indices describe one period (instant indices
/// `0..=cycle_len`, where `cycle_len` is the start of the next period) and
/// repeat. For explicit schedules they index the finite instant list and
/// the last one must be the final instant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointWindow {
    pub window_bound: f64,
    pub subsequence: Vec<usize>,
}

impl JointWindow {
    /// Cycle boundaries for periodic schedules; for explicit schedules one
    /// window up to the final instant.
    pub fn default_for(s: &SwitchingSchedule) -> Self {
        match s.period() {
            Some(p) => Self { window_bound: p + s.dwell(), subsequence: vec![0, s.intervals().len()] },
            None => {
                let m = s.intervals().len();
                let last = s.intervals()[m - 1].start;
                let subsequence = if m > 1 { vec![0, m - 1] } else { vec![0] };
                Self { window_bound: last + s.dwell(), subsequence }
            }
        }
    }

    fn instant_time(s: &SwitchingSchedule, idx: usize) -> f64 {
        let m = s.intervals().len();
        match s.period() {
            Some(p) => (idx / m) as f64 * p + s.intervals()[idx % m].start,
            None => s.intervals()[idx.min(m - 1)].start,
        }
    }

    /// The concrete `[start, end)` windows this subsequence describes. For an
    /// explicit schedule the final graph, which persists forever, forms the
    /// last window.
    pub fn windows(&self, s: &SwitchingSchedule) -> Result<Vec<(f64, f64)>> {
        let seq = &self.subsequence;
        if seq.first() != Some(&0) {
            return Err(Error::Config("window subsequence must start at instant 0".into()));
        }
        if seq.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("window subsequence must be strictly increasing".into()));
        }
        let m = s.intervals().len();
        let mut out: Vec<(f64, f64)> = seq
            .windows(2)
            .map(|w| (Self::instant_time(s, w[0]), Self::instant_time(s, w[1])))
            .collect();
        match s.period() {
            Some(_) => {
                if *seq.last().unwrap() != m {
                    return Err(Error::Config(format!(
                        "periodic window subsequence must end at the cycle length {m}"
                    )));
                }
            }
            None => {
                if *seq.last().unwrap() != m - 1 {
                    return Err(Error::Config(format!(
                        "explicit window subsequence must end at the final instant {}",
                        m - 1
                    )));
                }
                let last = s.intervals()[m - 1].start;
                out.push((last, last + 0.5 * self.window_bound.min(s.dwell())));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assumption3Report {
    pub holds: bool,
    pub windows_checked: usize,
    /// First window whose union lacks a leader-rooted spanning tree.
    pub failing_window: Option<(f64, f64)>,
    pub unreachable: Vec<usize>,
    pub message: String,
}

/// Jointly-connected check: each union window must be shorter than the bound
/// and contain a spanning tree rooted at the leader.
pub fn check_assumption3(s: &SwitchingSchedule, w: &JointWindow) -> Assumption3Report {
    let windows = match w.windows(s) {
        Ok(ws) => ws,
        Err(e) => {
            return Assumption3Report {
                holds: false,
                windows_checked: 0,
                failing_window: None,
                unreachable: vec![],
                message: e.to_string(),
            }
        }
    };
    for (k, &(a, b)) in windows.iter().enumerate() {
        let span = b - a;
        if span >= w.window_bound {
            return Assumption3Report {
                holds: false,
                windows_checked: k,
                failing_window: Some((a, b)),
                unreachable: vec![],
                message: format!("window [{a}, {b}) is not shorter than bound {}", w.window_bound),
            };
        }
        // windows come from valid instants, so the union is well-defined
        let union = match s.union_graph(a, b) {
            Ok(u) => u,
            Err(e) => {
                return Assumption3Report {
                    holds: false,
                    windows_checked: k,
                    failing_window: Some((a, b)),
                    unreachable: vec![],
                    message: e.to_string(),
                }
            }
        };
        let reach = union.reachable_from_leader();
        let unreachable: Vec<usize> = (1..reach.len()).filter(|&i| !reach[i]).collect();
        if !unreachable.is_empty() {
            let names: Vec<String> = unreachable.iter().map(|i| i.to_string()).collect();
            return Assumption3Report {
                holds: false,
                windows_checked: k + 1,
                failing_window: Some((a, b)),
                message: format!(
                    "union over [{a}, {b}) leaves node(s) {} unreachable from the leader",
                    names.join(", ")
                ),
                unreachable,
            };
        }
    }
    Assumption3Report {
        holds: true,
        windows_checked: windows.len(),
        failing_window: None,
        unreachable: vec![],
        message: "every union window contains a spanning tree rooted at node 0".into(),
    }
}

/// Every follower-follower edge has its reverse; leader edges are exempt.
pub fn check_assumption4(s: &SwitchingSchedule) -> bool {
    s.graphs().iter().all(|g| {
        g.edges().filter(|&(j, _)| j != 0).all(|(j, i)| g.has_edge(i, j))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(n: usize, edges: &[(usize, usize)]) -> DiGraph {
        DiGraph::new(n, edges.iter().copied()).unwrap()
    }

    #[test]
    fn laplacian_of_empty_graph_is_zero() {
        assert_eq!(laplacian(&DiGraph::empty(3)), DMatrix::zeros(3, 3));
    }

    #[test]
    fn laplacian_hand_example() {
        let l = laplacian(&g(3, &[(0, 1), (2, 1), (1, 2)]));
        let expected = DMatrix::from_row_slice(3, 3, &[0., 0., 0., -1., 2., -1., 0., -1., 1.]);
        assert_eq!(l, expected);
        for r in 0..3 {
            assert_eq!(l.row(r).sum(), 0.0);
        }
    }

    #[test]
    fn h_matrix_drops_leader() {
        let h = h_matrix(&g(3, &[(0, 1), (2, 1), (1, 2)]));
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[2., -1., -1., 1.]));
        assert_eq!(h_matrix(&DiGraph::empty(3)), DMatrix::zeros(2, 2));
        let star = g(4, &[(0, 1), (0, 2), (0, 3)]);
        assert_eq!(h_matrix(&star), DMatrix::identity(3, 3));
    }

    #[test]
    fn edges_into_leader_are_ignored() {
        let gr = g(2, &[(1, 0), (0, 1)]);
        assert_eq!(laplacian(&gr), DMatrix::from_row_slice(2, 2, &[0., 0., -1., 1.]));
    }

    #[test]
    fn rejects_self_loops_and_out_of_range() {
        assert!(DiGraph::new(3, [(1, 1)]).is_err());
        assert!(DiGraph::new(3, [(0, 3)]).is_err());
    }

    fn two_interval() -> SwitchingSchedule {
        SwitchingSchedule::explicit(
            vec![g(3, &[(0, 1)]), g(3, &[(1, 2)])],
            vec![Interval { start: 0.0, graph: 0 }, Interval { start: 5.0, graph: 1 }],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn sigma_is_right_continuous() {
        let s = two_interval();
        assert_eq!(s.sigma_at(0.0).unwrap(), 0);
        assert_eq!(s.sigma_at(5.0).unwrap(), 1);
        assert_eq!(s.sigma_at(4.999).unwrap(), 0);
        assert!(matches!(s.sigma_at(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn periodic_sigma_wraps() {
        let s = SwitchingSchedule::periodic(
            vec![g(3, &[(0, 1)]), g(3, &[(1, 2)])],
            &[(0, 1.0), (1, 1.0)],
            1.0,
        )
        .unwrap();
        assert_eq!(s.sigma_at(0.5).unwrap(), 0);
        assert_eq!(s.sigma_at(1.0).unwrap(), 1);
        assert_eq!(s.sigma_at(2.0).unwrap(), 0);
        // accumulated grid time that lands a hair under an instant
        assert_eq!(s.sigma_at(3000.0 * 0.001).unwrap(), 1);
        assert_eq!(s.sigma_at(199.9995).unwrap(), 1);
    }

    #[test]
    fn dwell_violation_rejected() {
        let r = SwitchingSchedule::explicit(
            vec![g(2, &[])],
            vec![Interval { start: 0.0, graph: 0 }, Interval { start: 0.5, graph: 0 }],
            1.0,
        );
        assert!(r.is_err());
        let r = SwitchingSchedule::explicit(vec![g(2, &[])], vec![Interval { start: 1.0, graph: 0 }], 1.0);
        assert!(r.is_err());
    }

    #[test]
    fn union_of_alternating_schedule() {
        let s = SwitchingSchedule::periodic(
            vec![g(3, &[(0, 1)]), g(3, &[(1, 2)])],
            &[(0, 1.0), (1, 1.0)],
            1.0,
        )
        .unwrap();
        let u = s.union_graph(0.0, 10.0).unwrap();
        assert_eq!(u, g(3, &[(0, 1), (1, 2)]));
        assert_eq!(s.union_graph(2.2, 2.8).unwrap(), g(3, &[(0, 1)]));
        assert!(s.union_graph(3.0, 3.0).is_err());

        let empty = SwitchingSchedule::periodic(vec![g(3, &[]), g(3, &[])], &[(0, 1.0), (1, 1.0)], 1.0)
            .unwrap();
        assert_eq!(empty.union_graph(0.0, 7.0).unwrap(), DiGraph::empty(3));
    }

    #[test]
    fn union_window_inside_single_explicit_interval() {
        let s = two_interval();
        assert_eq!(s.union_graph(1.0, 4.0).unwrap(), g(3, &[(0, 1)]));
        assert_eq!(s.union_graph(4.0, 6.0).unwrap(), g(3, &[(0, 1), (1, 2)]));
        assert_eq!(s.union_graph(5.0, 100.0).unwrap(), g(3, &[(1, 2)]));
    }

    fn chain_cycle() -> SwitchingSchedule {
        SwitchingSchedule::periodic(
            vec![g(4, &[(0, 1)]), g(4, &[(1, 2)]), g(4, &[(2, 3)])],
            &[(0, 1.0), (1, 1.0), (2, 1.0)],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn assumption3_on_cycle() {
        let s = chain_cycle();
        let report = check_assumption3(&s, &JointWindow::default_for(&s));
        assert!(report.holds, "{}", report.message);
    }

    #[test]
    fn assumption3_names_unreachable_node() {
        let s = SwitchingSchedule::periodic(
            vec![g(4, &[(0, 1)]), g(4, &[(1, 2)])],
            &[(0, 1.0), (1, 1.0)],
            1.0,
        )
        .unwrap();
        let report = check_assumption3(&s, &JointWindow::default_for(&s));
        assert!(!report.holds);
        assert_eq!(report.unreachable, vec![3]);
        assert_eq!(report.failing_window, Some((0.0, 2.0)));
    }

    #[test]
    fn assumption3_static_tree() {
        let s = SwitchingSchedule::fixed(g(4, &[(0, 1), (1, 2), (1, 3)]), 1.0).unwrap();
        let w = JointWindow::default_for(&s);
        assert!(check_assumption3(&s, &w).holds);
    }

    #[test]
    fn assumption3_window_too_long() {
        let s = chain_cycle();
        let w = JointWindow { window_bound: 2.0, subsequence: vec![0, 3] };
        assert!(!check_assumption3(&s, &w).holds);
        // splitting the period leaves both halves disconnected
        let w = JointWindow { window_bound: 10.0, subsequence: vec![0, 1, 3] };
        assert!(!check_assumption3(&s, &w).holds);
    }

    #[test]
    fn assumption4_cases() {
        let sym = SwitchingSchedule::fixed(g(3, &[(1, 2), (2, 1), (0, 1)]), 1.0).unwrap();
        assert!(check_assumption4(&sym));
        let asym = SwitchingSchedule::fixed(g(3, &[(1, 2)]), 1.0).unwrap();
        assert!(!check_assumption4(&asym));
        let leader_only = SwitchingSchedule::fixed(g(3, &[(0, 1), (0, 2)]), 1.0).unwrap();
        assert!(check_assumption4(&leader_only));
    }

    #[test]
    fn instants_repeat_each_period() {
        let s = chain_cycle();
        assert_eq!(s.instants_until(6.0), vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(two_interval().instants_until(100.0), vec![0.0, 5.0]);
    }
}
