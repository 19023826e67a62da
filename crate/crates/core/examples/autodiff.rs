//! Reverse-mode differentiation on a small MLP and a finite-difference check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use orsd::numkit::{grad_check, Graph, Mlp2, ParamStore, Tensor2D};
use orsd::Result;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let mlp = Mlp2::new(&mut store, "mlp", 4, 8, 2, &mut rng)?;
    let x = Tensor2D::uniform(3, 4, 1.0, &mut rng);
    let target = Tensor2D::uniform(3, 2, 1.0, &mut rng);

    // Squared error against a fixed target.
    let loss = |g: &mut Graph<'_>| {
        let xv = g.input(x.clone());
        let y = mlp.forward(g, xv)?;
        let t = g.input(target.clone());
        let neg = g.tape.scale(t, -1.0);
        let d = g.tape.add(y, neg)?;
        let sq = g.tape.mul(d, d)?;
        Ok(g.tape.sum(sq))
    };

    let mut g = Graph::new(&store);
    let out = loss(&mut g)?;
    let grads = g.tape.backward(out)?;
    println!("loss {:.6}", g.value(out).item());
    for (id, gr) in store.ids().zip(g.param_grads(&grads)) {
        println!(
            "  |d loss / d {}| = {:.4}",
            store.name(id),
            gr.data().iter().map(|v| v * v).sum::<f64>().sqrt()
        );
    }

    let report = grad_check(&store, 1e-5, loss)?;
    println!(
        "finite differences over {} entries: max relative error {:.2e}",
        report.checked, report.max_rel_error
    );
    Ok(())
}
