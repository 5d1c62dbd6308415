//! Build a tensor, store it as BST1 and as JSON, read both back.

use bss::tensor::{load_tensor, save_tensor, RawArray};
use bss::{Dims, Tensor};

fn main() -> bss::Result<()> {
    let t = Tensor::<f32>::from_fn(Dims::new(1, 2, 2, 3), |_, c, h, w| {
        (c * 100 + h * 10 + w) as f32
    })?;
    let dir = tempfile::tempdir().expect("temp dir");

    let bst = dir.path().join("x.bst");
    let json = dir.path().join("x.json");
    save_tensor(&bst, &t)?;
    save_tensor(&json, &t)?;

    let bytes = std::fs::read(&bst).expect("read back");
    println!("BST1 header: {:02x?}", &bytes[..8]);
    println!("dims:        {:02x?}", &bytes[8..24]);
    println!("{} bytes total", bytes.len());
    println!(
        "json: {}",
        std::fs::read_to_string(&json).expect("read back")
    );

    assert_eq!(load_tensor(&bst)?, t);
    assert_eq!(load_tensor(&json)?, t);

    // any rank is allowed in the file; feature maps need rank 4
    let vector = RawArray::new(vec![5], vec![0.5; 5])?;
    let again = RawArray::from_bytes(&vector.to_bytes())?;
    println!("rank-1 array: {:?}", again.dims);
    assert!(again.into_tensor().is_err());

    let mut broken = bytes.clone();
    broken[0] = b'X';
    println!(
        "bad magic -> {}",
        RawArray::from_bytes(&broken).unwrap_err()
    );
    println!(
        "truncated -> {}",
        RawArray::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err()
    );
    Ok(())
}
