//! Fits a single 3x3 convolution to a fixed target filter with the tape
//! autodiff and Adam, then checkpoints the learned weights.

use bevkd::tensor::{
    save_checkpoint, Adam, AdamConfig, Checkpoint, Graph, ParamKind, ParamStore, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bevkd::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let target = Tensor::uniform(&[1, 1, 3, 3], -1.0, 1.0, &mut rng);
    let mut store = ParamStore::new();
    let w = store.add(
        "conv.weight",
        Tensor::zeros(&[1, 1, 3, 3]),
        ParamKind::Trainable,
    )?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        },
        &store,
    );

    for step in 0..=300 {
        let x = Tensor::uniform(&[4, 1, 8, 8], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let tw = g.constant(target.clone());
        let y_true = g.conv2d(xv, tw, None, 1, 1)?;
        let wv = g.param(&store, w);
        let y = g.conv2d(xv, wv, None, 1, 1)?;
        let d = g.sub(y, y_true)?;
        let sq = g.square(d);
        let loss = g.mean(sq);
        if step % 50 == 0 {
            println!("step {step:>3}  loss {:.3e}", g.value(loss).item());
        }
        let grads = g.backward(loss)?;
        store.zero_grad();
        store.accumulate(&g, &grads);
        adam.step(&mut store)?;
    }
    println!(
        "max |w - target| = {:.2e}",
        store.value(w).max_abs_diff(&target)
    );

    let path = std::env::temp_dir().join("bevkd_autodiff.ckpt.json");
    save_checkpoint(
        &path,
        &Checkpoint::from_store(&store, serde_json::json!({ "example": "autodiff" })),
    )?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}
