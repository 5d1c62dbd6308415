//! The per-neuron energy minimum: closed form vs. a direct solve of the
//! normal equations, and how closely the whole-plane statistics used by the
//! layer approximate the exact leave-one-out minimum as the plane grows.

use bss::rng::{normal_vec, seeded};
use bss::simam::oracle::{analytic_min_energy, leave_one_out_stats};
use bss::simam::{analytic_solution, median_approximation_gap, neuron_energy, simam_oracle_min};

fn main() -> bss::Result<()> {
    let mut rng = seeded(3);
    let channel = normal_vec(&mut rng, 12);
    let lambda = 1e-2;

    println!("  t   target     w (solve)      w (closed)     b (solve)      e_min");
    for t in 0..4 {
        let sol = simam_oracle_min(&channel, t, lambda)?;
        let (w, b) = analytic_solution(&channel, t, lambda)?;
        println!(
            "{t:>3} {:>8.4} {:>14.10} {:>14.10} {:>14.10} {:>10.6}",
            channel[t], sol.omega_t, w, sol.b_t, sol.e_min
        );
        assert!((w - sol.omega_t).abs() < 1e-8 && (b - sol.b_t).abs() < 1e-8);
        assert!((analytic_min_energy(&channel, t, lambda)? - sol.e_min).abs() < 1e-9);
    }

    // the trivial solution costs exactly 2
    let (mu, _) = leave_one_out_stats(&channel, 0);
    println!(
        "E(0, 0) = {}   leave-one-out mean of t=0: {mu:.4}",
        neuron_energy(&channel, 0, 0.0, 0.0, lambda)
    );

    println!("\n     M   median |approx - exact|");
    for m in [16, 64, 256, 1024, 4096] {
        let gap = median_approximation_gap(&normal_vec(&mut rng, m), 1e-4)?;
        println!("{m:>6}   {gap:.3e}");
    }
    Ok(())
}
