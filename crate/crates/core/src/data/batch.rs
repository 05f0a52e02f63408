use rand::seq::SliceRandom;

use crate::rng;

/// Shuffled mini-batches of row positions `0..n` for one epoch. The order
/// depends only on `(seed, epoch)`; the final partial batch is kept.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &format!("shuffle/{epoch}")));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
