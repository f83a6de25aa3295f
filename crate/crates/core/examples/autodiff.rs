//! Reverse-mode gradients on a tiny logistic model, verified against central
//! differences and then used for a few optimizer steps.

use ideal::kernel::{forward_backward, grad_check, Graph, Optimizer, OptimizerKind, ParamStore, Rng, Tensor};

fn main() -> ideal::Result<()> {
    let mut rng = Rng::new(7);
    let mut store = ParamStore::new();
    let w = store.add("w", rng.normal_tensor(&[3, 1], 0.5))?;
    let b = store.add("b", Tensor::zeros(&[1, 1]))?;

    let x = Tensor::matrix(4, 3, vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7, -0.2, 0.8, 0.1, 1.0, 1.0, -1.0])?;
    let labels = [1.0, 0.0, 1.0, 0.0];
    let loss = |g: &mut Graph<'_>| {
        let xi = g.input(x.clone())?;
        let wv = g.param(w);
        let bv = g.param(b);
        let z = g.matmul(xi, wv)?;
        let z = g.add_row(z, bv)?;
        let p = g.sigmoid(z)?;
        g.bce(p, &labels)
    };

    let err = grad_check(&loss, &mut store, 1e-5)?;
    println!("max relative gradient error: {err:.2e}");

    let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1);
    for step in 0..50 {
        store.zero_grads();
        let value = forward_backward(&loss, &mut store)?;
        opt.step(&mut store, None);
        if step % 10 == 0 {
            println!("step {step:>2}  loss {value:.4}");
        }
    }
    Ok(())
}
