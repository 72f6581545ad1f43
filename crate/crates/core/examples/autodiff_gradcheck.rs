//! Build a small graph by hand and check its gradients numerically.

use moediv::diffengine::{grad_check, Graph, Tensor};

fn main() -> moediv::Result<()> {
    let w = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 - 6.0) * 0.1).collect())?;
    let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7])?;

    let mut g = Graph::new();
    let wv = g.param(&w);
    let xv = g.constant(x.clone());
    let h = g.matmul(xv, wv)?;
    let h = g.silu(h)?;
    let loss = g.cross_entropy_mean(h, &[1, 3])?;
    println!("loss {:.6}", g.value(loss).item()?);
    let grads = g.backward(loss)?;
    println!("dloss/dW = {:?}", grads.get(wv).unwrap().data());

    let report = grad_check(
        |g, vars| {
            let xv = g.constant(x.clone());
            let h = g.matmul(xv, vars[0])?;
            let h = g.silu(h)?;
            g.cross_entropy_mean(h, &[1, 3])
        },
        &[w],
        1e-5,
    )?;
    println!(
        "{} coordinates, max relative error {:.2e}",
        report.coordinates, report.max_rel_error
    );
    Ok(())
}
