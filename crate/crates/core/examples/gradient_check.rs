//! Backprop against central differences for every parameter of a small
//! network under the full joint loss.

use macnet::net::{gradient_check, MacNetwork, NetworkConfig};
use macnet::percept::{CategoryAttributeMatrix, Matrix};
use macnet::rng;
use macnet::tensor::Tensor;
use rand::Rng;

fn main() -> macnet::Result<()> {
    let cfg = NetworkConfig {
        patch_size: 8,
        channels: vec![2, 3],
        convs_per_block: 1,
        categories: 3,
        attributes: 2,
        hidden: 5,
        ..Default::default()
    };
    let a = CategoryAttributeMatrix::new(Matrix::new(3, 2, vec![0.1, 0.9, 0.5, 0.4, 0.8, 0.2])?)?;
    let net = MacNetwork::build(&cfg, 1)?;
    let mut r = rng::rng(2);
    let x = Tensor::new(&[4, 3, 8, 8], (0..4 * 192).map(|_| r.gen::<f64>()).collect())?;
    let rep = gradient_check(&net, &x, &[0, 1, 2, 0], Some(&a), 1e-6, 1e-4)?;
    println!(
        "{} gradients checked, worst relative error {:.2e} ({})",
        rep.checked, rep.worst_relative_error, rep.worst_parameter
    );
    Ok(())
}
