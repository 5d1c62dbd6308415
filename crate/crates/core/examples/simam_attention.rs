//! SimAM on a small feature map: per-neuron energy, gates and output.

use bss::rng::{normal_tensor, seeded};
use bss::simam::{simam_energy, simam_forward, simam_weights, SimAMConfig};
use bss::{Dims, Tensor};

fn main() -> bss::Result<()> {
    let cfg = SimAMConfig::default();

    // one 3x3 plane with a single bright neuron
    let x = Tensor::<f64>::new([1, 1, 3, 3], vec![0., 0., 0., 0., 4., 0., 0., 0., 0.])?;
    let e = simam_energy(&x, &cfg)?;
    let gates = simam_weights(&x, &cfg)?;
    println!("plane mean {:.4}, var {:.4}", e.mu_hat[0], e.sigma2_hat[0]);
    for (i, (es, g)) in e.e_star.data().iter().zip(gates.data()).enumerate() {
        println!("  x[{i}] = {}  e* = {es:.6}  gate = {g:.6}", x.data()[i]);
    }

    // constant planes carry no information: every gate is sigmoid(0.5)
    let flat = Tensor::<f64>::full([1, 2, 4, 4], 3.0)?;
    println!(
        "constant input gate: {:.6}",
        simam_weights(&flat, &cfg)?.data()[0]
    );

    let mut rng = seeded(1);
    let x: Tensor = normal_tensor(&mut rng, Dims::new(2, 16, 20, 20));
    let y = simam_forward(&x, &cfg)?;
    let (lo, hi) = simam_weights(&x, &cfg)?
        .data()
        .iter()
        .fold((f32::MAX, f32::MIN), |(lo, hi), &g| (lo.min(g), hi.max(g)));
    println!(
        "{}: gates span [{lo:.4}, {hi:.4}], output {}",
        x.dims(),
        y.dims()
    );

    // lambda must be finite and non-negative
    println!("lambda = -1 -> {}", SimAMConfig::new(-1.0).unwrap_err());
    Ok(())
}
