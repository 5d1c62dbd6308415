//! Building a fusion graph in code: a post-fusion 1x1 conv + SiLU, JSON
//! round trip, and what the validator reports for a broken graph.

use std::collections::BTreeMap;

use bss::bifpn::{
    graph_execute, graph_validate, Activation, ConvSpec, FusionGraph, FusionNode, NodeKind, PostOp,
};
use bss::tensor::Resample;
use bss::{Dims, Tensor};

fn main() -> bss::Result<()> {
    let mut mid = FusionNode::fuse(
        "mid",
        NodeKind::Fuse,
        &[("hi", Resample::Up2), ("lo", Resample::None)],
    )
    .at_level("lo");
    mid.weights = vec![0.7, 1.3];
    mid.post = Some(PostOp {
        conv: Some(ConvSpec {
            out_channels: 8,
            weight: None,
            bias: None,
        }),
        act: Activation::Silu,
    });
    let out = FusionNode::fuse("out", NodeKind::Output, &[("mid", Resample::Down2)]).at_level("hi");
    let g = FusionGraph {
        nodes: vec![FusionNode::input("lo"), FusionNode::input("hi"), mid, out],
        inputs: BTreeMap::from([
            ("lo".to_string(), Dims::new(1, 4, 8, 8)),
            ("hi".to_string(), Dims::new(1, 4, 4, 4)),
        ]),
        outputs: vec!["out".into()],
    };

    let text = g.to_json();
    println!("{text}");
    let g = FusionGraph::from_json(&text)?;
    let report = graph_validate(&g);
    println!("valid: {}, dims: {:?}", report.is_valid(), report.dims);

    let inputs = BTreeMap::from([
        ("lo".to_string(), Tensor::<f32>::full([1, 4, 8, 8], 1.0)?),
        ("hi".to_string(), Tensor::<f32>::full([1, 4, 4, 4], 2.0)?),
    ]);
    let y = &graph_execute(&g, &inputs)?["out"];
    println!("out {} first value {:.6}", y.dims(), y.data()[0]);

    let mut broken = g.clone();
    broken.node_mut("mid").unwrap().inputs[0].src = "nowhere".into();
    broken.node_mut("out").unwrap().weights.push(1.0);
    for issue in graph_validate(&broken).issues {
        println!("  {issue}");
    }
    Ok(())
}
