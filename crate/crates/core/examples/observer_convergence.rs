//! Distributed observer errors on the bundled switching scenario, sampled
//! every 20 seconds.

use adsync::engine;
use adsync::scenario::{bundled, Scenario};

fn main() -> adsync::Result<()> {
    let s = Scenario::from_toml(bundled("theorem1_demo").unwrap())?;
    let out = engine::run(&s.system, &s.run)?;
    let times = out.trace.times();
    let agents = out.trace.follower_count();
    println!("{:>6} {}", "t", (1..=agents).map(|a| format!("{:>11}", format!("v_err_{a}"))).collect::<String>());
    let columns: Vec<Vec<f64>> = (1..=agents).map(|a| out.trace.agent_column("v_err", a)).collect();
    for (row, t) in times.iter().enumerate() {
        if (t / 20.0 - (t / 20.0).round()).abs() < 1e-9 {
            println!("{t:>6.0} {}", columns.iter().map(|c| format!("{:>11.2e}", c[row])).collect::<String>());
        }
    }
    for a in &out.summary.metrics.agents {
        println!(
            "agent {}: log-error slope {:.4} (R² {:.4})",
            a.agent,
            a.decay_slope.unwrap_or(f64::NAN),
            a.decay_r2.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
