//! Fast normalized fusion and the bundled neck graphs: validate, simplify the
//! PAN-style neck into the default one, and run it on a random pyramid.

use std::collections::BTreeMap;

use bss::bifpn::{
    fuse_weighted, graph_execute, graph_simplify_detailed, graph_validate, normalized_coefficients,
    FusionGraph,
};
use bss::rng::{normal_tensor, seeded};
use bss::Tensor;

fn main() -> bss::Result<()> {
    let raw = [2.0, -1.0, 0.5];
    println!(
        "raw {raw:?} -> coefficients {:?}",
        normalized_coefficients(&raw, 1e-4)?
    );

    let a = Tensor::<f64>::full([1, 1, 2, 2], 1.0)?;
    let b = Tensor::<f64>::full([1, 1, 2, 2], 3.0)?;
    let o = fuse_weighted(&[&a, &b], &[1.0, 1.0], 1e-4)?;
    println!("fuse(1, 3) with w = [1, 1]: {:.6}", o.data()[0]);

    let pan = FusionGraph::pan_baseline();
    let s = graph_simplify_detailed(&pan)?;
    println!(
        "pan neck: removed {:?}, added skips {:?}",
        s.removed, s.skips_added
    );
    assert_eq!(s.graph, FusionGraph::bss_default());

    let g = FusionGraph::bss_default().with_pyramid(2, 32, 64);
    let report = graph_validate(&g);
    println!("execution order: {:?}", report.order);

    let mut rng = seeded(11);
    let inputs: BTreeMap<String, Tensor> = g
        .inputs
        .iter()
        .map(|(level, &d)| (level.clone(), normal_tensor(&mut rng, d)))
        .collect();
    for (id, t) in graph_execute(&g, &inputs)? {
        println!("  {id:<6} {}", t.dims());
    }
    Ok(())
}
