//! Finite differences against the analytic backward passes.

use bss::gradcheck::{check_op, numeric_grad, GradCheckReport, DEFAULT_TOL, OPS};
use bss::rng::{normal_tensor, seeded};
use bss::simam::{simam_backward, simam_forward, SimAMConfig};
use bss::{Dims, Tensor64};

fn main() -> bss::Result<()> {
    let mut rng = seeded(2);
    let x: Tensor64 = normal_tensor(&mut rng, Dims::new(1, 2, 3, 3));
    let u: Tensor64 = normal_tensor(&mut rng, x.dims());
    let cfg = SimAMConfig::new(1e-4)?;

    let analytic = simam_backward(&x, &cfg, &u)?;
    let numeric = numeric_grad(|x| u.dot(&simam_forward(x, &cfg)?), &x, 1e-5)?;
    println!(
        "simam on {}: max |analytic - numeric| = {:.2e}",
        x.dims(),
        analytic.max_abs_diff(&numeric)?
    );

    println!("\n{}", GradCheckReport::table_header());
    for op in OPS {
        let r = check_op(op, 20, DEFAULT_TOL, 7)?;
        println!("{r}");
        if let Some(w) = r.worst.as_ref().filter(|_| !r.passed) {
            println!(
                "  worst: trial {} {}[{}] {} vs {}",
                w.trial, w.tensor, w.index, w.analytic, w.numeric
            );
        }
    }
    Ok(())
}
