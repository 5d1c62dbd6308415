//! Shuffle Attention: split into K groups, gate half of each group by channel
//! statistics and half by spatial statistics, then mix groups with a shuffle.

use bss::rng::{normal_tensor, normal_vec, seeded};
use bss::shuffle_attention::{sa_forward, sa_pre_shuffle, sa_source_channels, SAConfig, SAWeights};
use bss::tensor::{channel_shuffle, channel_shuffle_backward, shuffle_permutation};
use bss::{Dims, Tensor};

fn main() -> bss::Result<()> {
    let mut rng = seeded(5);
    let x: Tensor<f64> = normal_tensor(&mut rng, Dims::new(1, 16, 6, 6));
    let cfg = SAConfig::new(4);
    let half = cfg.half_width(16)?;
    println!("C = 16, K = {}, C/2K = {half}", cfg.groups);

    let w = SAWeights {
        w1: normal_vec(&mut rng, half),
        b1: normal_vec(&mut rng, half),
        w2: normal_vec(&mut rng, half),
        b2: normal_vec(&mut rng, half),
    };
    let y = sa_forward(&x, &cfg, &w)?;
    println!("output {} (same as input)", y.dims());
    println!(
        "output channel j reads input channel {:?}",
        sa_source_channels(16, &cfg)?
    );

    // with zero parameters both gates are sigmoid(0) and the shuffle is a no-op for g = 1
    let zero = sa_forward(&x, &cfg.with_shuffle_groups(1), &SAWeights::zeros(half))?;
    assert!(zero.data().iter().zip(x.data()).all(|(a, b)| *a == 0.5 * b));
    println!("zero weights, g = 1: y == 0.5 x exactly");

    // shuffling is a permutation; its backward pass is the inverse
    println!("perm(C=6, g=2) = {:?}", shuffle_permutation(6, 2)?);
    let pre = sa_pre_shuffle(&x, &cfg, &w)?;
    let shuffled = channel_shuffle(&pre, cfg.shuffle_groups)?;
    assert_eq!(shuffled, y);
    assert_eq!(
        channel_shuffle_backward(&shuffled, cfg.shuffle_groups)?,
        pre
    );

    let dir = tempfile::tempdir().expect("temp dir");
    w.save_dir(dir.path())?;
    assert_eq!(SAWeights::load_dir(dir.path())?.len(), half);
    println!(
        "weights dir: {}",
        std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()
    );

    println!(
        "C = 12, K = 4 -> {}",
        SAConfig::new(4).half_width(12).unwrap_err()
    );
    Ok(())
}
