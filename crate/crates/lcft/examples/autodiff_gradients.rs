//! The numeric kernel on its own: record a small forward graph on the
//! gradient tape, run the backward pass, and confirm the analytic
//! gradients against central finite differences.
//!
//! Usage: cargo run --example autodiff_gradients

use lcft::kernel::{GradientTape, LossKind, ParamArrayKind, ParamSet, PoolKind, Tensor};

fn build_loss(ps: &ParamSet) -> (f64, lcft::kernel::Gradients) {
    // Two samples: embedding lookups, mean-pooled history, a relu layer,
    // and a sigmoid head.
    let ids = [0usize, 2];
    let hists = [vec![1usize, 3], vec![]];
    let labels = Tensor::column(&[1.0, 0.0]);

    let mut tape = GradientTape::new();
    let e = tape.lookup(ps, "embed", &ids).expect("lookup");
    let h = tape
        .pool(ps, "embed", &hists, PoolKind::Mean)
        .expect("pool");
    let x = tape.concat(&[e, h]).expect("concat");
    let z = tape.affine(ps, x, "w1", Some("b1")).expect("affine");
    let r = tape.relu(z).expect("relu");
    let logit = tape.affine(ps, r, "w2", Some("b2")).expect("affine");
    let p = tape.sigmoid(logit).expect("sigmoid");
    tape.backward(p, LossKind::CrossEntropy, &labels)
        .expect("backward")
}

fn main() {
    let dim = 3;
    let mut ps = ParamSet::new();
    ps.insert(
        "embed",
        Tensor::from_vec(
            &[4, dim],
            (0..4 * dim).map(|k| 0.3 - 0.07 * k as f64).collect(),
        )
        .unwrap(),
        ParamArrayKind::Embedding,
    );
    ps.insert(
        "w1",
        Tensor::from_vec(
            &[2 * dim, 4],
            (0..2 * dim * 4).map(|k| 0.25 - 0.03 * k as f64).collect(),
        )
        .unwrap(),
        ParamArrayKind::Dense,
    );
    ps.insert(
        "b1",
        Tensor::from_vec(&[4], vec![0.3, -0.2, 0.15, 0.4]).unwrap(),
        ParamArrayKind::Dense,
    );
    ps.insert(
        "w2",
        Tensor::from_vec(&[4, 1], vec![0.5, -0.4, 0.3, -0.2]).unwrap(),
        ParamArrayKind::Dense,
    );
    ps.insert(
        "b2",
        Tensor::from_vec(&[1], vec![0.1]).unwrap(),
        ParamArrayKind::Dense,
    );

    let (loss, grads) = build_loss(&ps);
    println!("loss: {loss:.6}\n");

    println!("analytic vs central finite differences (step 1e-5):");
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for name in ["embed", "w1", "b1", "w2", "b2"] {
        let shape = ps.get(name).unwrap().shape().to_vec();
        let analytic = grads.to_dense(name, &shape);
        let n = ps.get(name).unwrap().len();
        for k in [0, n / 2, n - 1] {
            let orig = ps.get(name).unwrap().data()[k];
            ps.get_mut(name).unwrap().data_mut()[k] = orig + h;
            let up = build_loss(&ps).0;
            ps.get_mut(name).unwrap().data_mut()[k] = orig - h;
            let down = build_loss(&ps).0;
            ps.get_mut(name).unwrap().data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            worst = worst.max(err);
            println!("  {name}[{k}]: {a:>12.8} vs {fd:>12.8} (rel err {err:.2e})");
        }
    }
    println!("\nworst relative error: {worst:.2e}");

    // Embedding rows never looked up stay out of the gradient map.
    let touched: Vec<usize> = grads.sparse["embed"].rows.keys().copied().collect();
    println!("touched embed rows: {touched:?} (row 1 and 3 via history, 0 and 2 via lookup)");
}
