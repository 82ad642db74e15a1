//! Reverse-mode differentiation of a tiny logistic model, checked against
//! central finite differences.

use coverdet::oracle::gradcheck;
use coverdet::tensor::{Graph, Tensor};

fn main() -> anyhow::Result<()> {
    let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5])?;
    let w = Tensor::new(vec![3, 1], vec![0.2, -0.4, 0.1])?;
    let b = Tensor::from_vec(vec![0.05]);

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let wv = g.param(w.clone());
    let bv = g.param(b.clone());
    let z = g.dense(xv, wv, bv)?;
    let z = g.reshape(z, vec![2])?;
    let p = g.sigmoid(z)?;
    let loss = g.bce(p, &[1.0, 0.0])?;
    g.backward(loss)?;
    println!("loss {:.6}", g.value(loss).data()[0]);
    println!("dL/dw {:?}", g.grad(wv).map(|t| t.into_data()));
    println!("dL/db {:?}", g.grad(bv).map(|t| t.into_data()));

    let check = gradcheck(&[x, w, b], &[1, 2], |g, v| {
        let z = g.dense(v[0], v[1], v[2])?;
        let z = g.reshape(z, vec![2])?;
        let p = g.sigmoid(z)?;
        g.bce(p, &[1.0, 0.0])
    })?;
    println!(
        "finite differences: {} coordinates, max relative error {:.2e}",
        check.checked, check.max_rel_err
    );
    Ok(())
}
