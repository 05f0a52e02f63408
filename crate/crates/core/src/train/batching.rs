//! Epoch batch plans, optionally balanced over race groups.

use log::warn;
use rand::seq::SliceRandom;

use crate::data::batches;
use crate::rng;

/// Batches of positions `0..groups.len()` for one epoch and whether the
/// plain-shuffle fallback was used.
///
/// Each group's shuffled members are spread proportionally over
/// `⌈N / batch⌉` batches, so every batch holds roughly its share of every
/// group. When some group cannot supply `⌈batch / (2G)⌉` members per batch
/// (or only one group exists) the plan falls back to plain shuffling.
pub fn group_balanced_batches(groups: &[usize], batch: usize, seed: u64, epoch: usize) -> (Vec<Vec<usize>>, bool) {
    let n = groups.len();
    let num_groups = groups.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_groups];
    for (i, &g) in groups.iter().enumerate() {
        members[g].push(i);
    }
    let present: Vec<&Vec<usize>> = members.iter().filter(|m| !m.is_empty()).collect();
    let nb = n.div_ceil(batch.max(1));
    let need = batch.div_ceil(2 * present.len().max(1));
    let feasible = present.len() >= 2 && present.iter().all(|m| m.len() / nb >= need);
    if !feasible {
        warn!("group-balanced batching infeasible ({} group(s), batch {batch}); using plain shuffling", present.len());
        return (batches(n, batch, seed, epoch), true);
    }
    let mut rng = rng::stream(seed, &format!("shuffle/{epoch}"));
    let mut plan: Vec<Vec<usize>> = vec![Vec::new(); nb];
    for m in present {
        let mut order = m.clone();
        order.shuffle(&mut rng);
        for (b, slot) in plan.iter_mut().enumerate() {
            let (lo, hi) = (b * order.len() / nb, (b + 1) * order.len() / nb);
            slot.extend_from_slice(&order[lo..hi]);
        }
    }
    for slot in &mut plan {
        slot.shuffle(&mut rng);
    }
    plan.shuffle(&mut rng);
    (plan, false)
}
