//! Residual tracking band against the boundary-layer width of the smoothed
//! sign, at two integration steps. Takes about a minute in release mode.

use adsync::scenario::{self, bundled, ScenarioConfig, SweepAxis};

fn main() -> adsync::Result<()> {
    let base = ScenarioConfig::from_toml(bundled("disturbance_demo").unwrap())?;
    let axes: Vec<SweepAxis> = ["step=1e-3,1e-4", "epsilon=1e-2,1e-3,1e-4,0"]
        .iter()
        .map(|a| a.parse())
        .collect::<adsync::Result<_>>()?;
    for p in scenario::sweep(&base, &axes)? {
        let (h, eps) = (p.params["step"], p.params["epsilon"]);
        match (&p.summary, &p.error) {
            (Some(sm), _) => {
                let band = sm.metrics.agents.iter().map(|a| a.residual_band).fold(0.0, f64::max);
                println!("h {h:.0e}  epsilon {eps:<6}  band {band:.3e}");
            }
            (None, Some(e)) => println!("h {h:.0e}  epsilon {eps:<6}  failed: {e}"),
            (None, None) => {}
        }
    }
    Ok(())
}
