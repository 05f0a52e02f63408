//! Reference classifier: encoder, mean pooling over all patches, linear
//! head, cross-entropy, Adam. Shares the initial parameters and batch plan
//! of a run but none of its forward or loss code.

use crate::autodiff::Tape;
use crate::data::UNCERTAIN;
use crate::error::Result;

use super::adam::{adam_step, AdamState};
use super::config::TrainConfig;
use super::dataset::{Dataset, Example};
use super::model::{binary_labels, Model};
use super::{epoch_plan, make_batch};

/// Per-step cross-entropy of the reference classifier.
pub fn train_baseline(cfg: &TrainConfig, data: &Dataset) -> Result<Vec<f64>> {
    cfg.validate()?;
    let labels = binary_labels(cfg)?;
    let (model, mut store) = Model::init(cfg, data.groups, &labels)?;
    let adam_cfg = cfg.adam();
    let mut adam = AdamState::default();
    let (p, d) = (cfg.encoder().num_patches(), cfg.d);
    let mut losses = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for idx in epoch_plan(cfg, data, epoch).0 {
            step += 1;
            let examples: Vec<&Example> = idx.iter().map(|&i| &data.train[i]).collect();
            let flip_name = format!("flip/{step}");
            let batch = make_batch(cfg, &examples, cfg.hflip.then_some(flip_name.as_str()))?;
            let b = batch.len();
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let x = tape.constant(batch.patches);
            let ep = model.encoder.forward(&mut tape, &bound, x)?;
            let pooled = tape.mean_axis(ep, 1)?;
            let mut h = tape.reshape(pooled, &[b, d])?;
            if cfg.hidden {
                h = tape.matmul(h, bound.var("head.c.w1")?)?;
                h = tape.add(h, bound.var("head.c.b1")?)?;
                h = tape.relu(h)?;
            }
            let logits = tape.matmul(h, bound.var("head.c.w")?)?;
            let logits = tape.add(logits, bound.var("head.c.b")?)?;
            let targets: Vec<i64> = batch
                .y
                .iter()
                .map(|&y| if y == UNCERTAIN && cfg.uncertain_as_negative { 0 } else { y })
                .collect();
            let loss = tape.cross_entropy(logits, &targets, UNCERTAIN)?;
            losses.push(tape.value(loss).item());
            let grads = tape.backward(loss)?;
            let g = bound.collect_grads(&store, &grads);
            let g = g
                .into_iter()
                .filter(|(n, _)| n.starts_with("enc.") || n.starts_with("head.c."))
                .collect();
            adam_step(&mut store, &g, &mut adam, &adam_cfg)?;
        }
    }
    debug_assert!(p > 0);
    Ok(losses)
}
