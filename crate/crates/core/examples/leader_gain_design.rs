//! Checks a leader's spectrum and designs the observer gain for several
//! values of the gain scale.

use adsync::exo::{design_gain, per_graph_spectra, stability_report, LeaderSystem};
use adsync::graph::{DiGraph, SwitchingSchedule};
use nalgebra::{dmatrix, dvector};

fn main() -> adsync::Result<()> {
    let leader = LeaderSystem::new(dmatrix![0.0, 1.0; -1.0, 0.0], dvector![1.0, 0.0], dvector![1.0, 0.0])?;
    let report = stability_report(&leader)?;
    println!("eigenvalues {:?}", report.eigenvalues);
    println!("marginally stable {}, neutrally stable {}, detectable {}", report.marginally_stable, report.neutrally_stable, report.detectable);

    let star = SwitchingSchedule::fixed(DiGraph::new(3, [(0, 1), (0, 2)])?, 1.0)?;
    let single = SwitchingSchedule::fixed(DiGraph::new(3, [(0, 1)])?, 1.0)?;
    for mu0 in [0.5, 1.0, 10.0] {
        let l0 = design_gain(&leader, mu0)?;
        let error_modes = leader.s.clone() - &l0 * leader.f.transpose();
        let eig = adsync::exo::eigenvalues(&error_modes)?;
        let star_re = per_graph_spectra(&leader, &l0, &star)?[0].max_real_part;
        let single = &per_graph_spectra(&leader, &l0, &single)?[0];
        println!(
            "mu0 {mu0:>4}: L0 = [{:.3}, {:.3}], eig(S - L0 F) = {:?}, star max Re {star_re:.3}, single-edge graph hurwitz {}",
            l0[0],
            l0[1],
            eig.iter().map(|z| (z.re, z.im)).collect::<Vec<_>>(),
            single.hurwitz
        );
    }
    Ok(())
}
