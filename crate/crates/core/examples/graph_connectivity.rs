//! Each graph in the cycle connects the leader to a single follower, so no
//! instantaneous graph has a spanning tree. The union over a cycle does.

use adsync::graph::{check_assumption3, check_assumption4, laplacian, DiGraph, JointWindow, SwitchingSchedule};

fn main() -> adsync::Result<()> {
    let graphs: Vec<DiGraph> = (1..=4).map(|i| DiGraph::new(5, [(0, i)])).collect::<Result<_, _>>()?;
    for (k, g) in graphs.iter().enumerate() {
        println!("graph {k}: spanning tree from leader: {}", g.has_leader_spanning_tree());
    }
    println!("laplacian of graph 0:{}", laplacian(&graphs[0]));

    let schedule = SwitchingSchedule::periodic(graphs.clone(), &[(0, 1.3), (1, 1.3), (2, 1.3), (3, 1.3)], 1.0)?;
    let report = check_assumption3(&schedule, &JointWindow::default_for(&schedule));
    println!("full cycle: {} ({})", report.holds, report.message);
    println!("follower edges undirected: {}", check_assumption4(&schedule));
    println!("switching instants before 6: {:?}", schedule.instants_until(6.0));

    let partial = SwitchingSchedule::periodic(graphs, &[(0, 1.3), (1, 1.3), (2, 1.3)], 1.0)?;
    let report = check_assumption3(&partial, &JointWindow::default_for(&partial));
    println!("cycle without graph 3: {} ({})", report.holds, report.message);

    let chain = SwitchingSchedule::fixed(DiGraph::new(3, [(0, 1), (1, 2)])?, 1.0)?;
    println!("one-way follower chain undirected: {}", check_assumption4(&chain));
    Ok(())
}
