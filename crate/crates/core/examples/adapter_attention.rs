//! Cross-attention with bias adapters: a fresh adapter changes nothing, a
//! perturbed one does, and mixing weights blend expert outputs linearly.

use moesd::adapter::{
    attention_backward, attention_forward, trainable_ratio, AdaptedAttentionBlock, AttentionDims, BiasAdapter,
    CrossAttentionWeights, ExpertWeights, ORIGINAL,
};
use nalgebra::DMatrix;

fn main() -> moesd::Result<()> {
    let dims = AttentionDims { d_x: 8, d_c: 6, d_h: 4 };
    let mut block = AdaptedAttentionBlock::new(CrossAttentionWeights::random(dims, 1));
    let x = DMatrix::from_fn(3, dims.d_x, |i, j| ((i * 7 + j) as f64).sin());
    let c = DMatrix::from_fn(5, dims.d_c, |i, j| ((i * 3 + j * 5) as f64).cos());

    block.insert_adapter("male", BiasAdapter::new(dims, 2, 11)?)?;
    let base = attention_forward(&block, &ExpertWeights::original_only(), &x, &c)?;
    let fresh = attention_forward(&block, &ExpertWeights::from_pairs([("male", 1.0)]), &x, &c)?;
    println!("fresh adapter, max |diff| = {:.2e}", (&fresh - &base).amax());

    let mut tuned = BiasAdapter::new(dims, 2, 12)?;
    for b in tuned.blocks_mut() {
        b.iter_mut().for_each(|v| *v += 0.1);
    }
    block.insert_adapter("female", tuned)?;
    let female = attention_forward(&block, &ExpertWeights::from_pairs([("female", 1.0)]), &x, &c)?;
    println!("perturbed adapter, max |diff| = {:.2e}", (&female - &base).amax());

    let w = ExpertWeights::from_pairs([(ORIGINAL, 0.4), ("male", 0.1), ("female", 0.5)]);
    let mixed = attention_forward(&block, &w, &x, &c)?;
    let manual = &base * 0.4 + &fresh * 0.1 + &female * 0.5;
    println!(
        "mixture vs weighted sum, max |diff| = {:.2e}",
        (&mixed - &manual).amax()
    );

    let grads = attention_backward(&block, &w, &x, &c, &DMatrix::from_element(3, dims.d_x, 1.0))?;
    for (id, g) in &grads {
        let norm: f64 = g.blocks().iter().map(|b| b.norm_squared()).sum::<f64>().sqrt();
        println!("gradient norm for {id}: {norm:.4e}");
    }
    println!("trainable ratio {:.4}", trainable_ratio(&block)?);
    Ok(())
}
