//! Runs the switching-network tracking scenario and writes its outputs.
//!
//! `cargo run --release --example switching_tracking -- [out_dir]`

use std::path::PathBuf;

use adsync::scenario::{self, bundled, Scenario};

fn main() -> adsync::Result<()> {
    let out_dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "adsync-out/switching_tracking".into());
    let s = Scenario::from_toml(bundled("theorem1_demo").unwrap())?;
    let (report, trace) = scenario::execute(&s)?;
    let m = &report.summary.metrics;
    for a in &m.agents {
        println!("agent {}: terminal error {:.2e}", a.agent, a.terminal_error);
    }
    let l = &report.summary.lyapunov;
    println!("V: {:.4} -> {:.3e}, {} increases; W = {:.4}", l.v_initial, l.v_final, l.violations, l.w_total);
    println!("synchronized below {} from t = {:?}", m.sync_threshold, m.sync_time);
    let written = scenario::write_outputs(&out_dir, &report, &trace)?;
    println!("wrote {} files to {}", written.len(), out_dir.display());
    Ok(())
}
