//! Parses regressor expressions, evaluates them and checks a claimed bound.

use adsync::expr::{check_assumption6, BoundExpr, SampleBox};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rows = vec![BoundExpr::parse("sin(t)*x2", 2)?, BoundExpr::parse("x1^2 - 0.5*x1", 2)?];
    for row in &rows {
        println!("{} at x = [1, 2], t = 0.5 -> {}", row.expr(), row.eval(&[1.0, 2.0], 0.5)?);
    }

    for phi in ["abs(x2) + x1^2 + 0.5*abs(x1)", "abs(x2) + abs(x1)"] {
        let check = check_assumption6(&rows, &BoundExpr::parse(phi, 2)?, &SampleBox::default());
        println!(
            "phi = {phi}: passed {} over {} samples, worst margin {:.3} at x = {:?}, t = {}",
            check.passed, check.samples, check.worst_margin, check.worst_state, check.worst_time
        );
    }

    for bad in ["x3", "x1 +", "foo(x1)"] {
        match BoundExpr::parse(bad, 2) {
            Ok(_) => println!("{bad}: accepted"),
            Err(e) => println!("{bad}: {e}"),
        }
    }
    Ok(())
}
