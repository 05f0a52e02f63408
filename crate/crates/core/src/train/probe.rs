//! Post-hoc leakage probe: how well a linear model recovers a sensitive
//! attribute from frozen pooled representations.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::params::{uniform_linear, ParamStore};
use crate::rng;

use super::adam::{adam_step, AdamConfig, AdamState};

const PROBE_STEPS: usize = 300;
const PROBE_LR: f64 = 0.05;

/// Features with their sensitive group and task label.
#[derive(Debug, Clone, Copy)]
pub struct ProbeData<'a> {
    pub z: &'a [Vec<f64>],
    pub s: &'a [usize],
    pub y: &'a [i64],
}

/// Trains a softmax-regression probe for `s` on standardized `z` and
/// returns its cell-balanced accuracy on the held-out part: the mean over
/// `(y, s)` cells of the per-cell accuracy.
///
/// Training examples are weighted inversely to their `(y, s)` cell size and
/// the score averages over cells, so a representation that only encodes `y`
/// scores at chance even when `y` and `s` are correlated.
pub fn leakage_probe(train: ProbeData<'_>, test: ProbeData<'_>, groups: usize, seed: u64) -> Result<f64> {
    if train.z.is_empty() || test.z.is_empty() {
        return Err(Error::Data("leakage probe needs non-empty train and test sets".into()));
    }
    let d = train.z[0].len();
    let n = train.z.len();
    let mut mean = vec![0.0; d];
    for row in train.z {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut sd = vec![0.0; d];
    for row in train.z {
        for ((s, v), m) in sd.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| v.sqrt().max(1e-12)).collect();
    let standardize = |rows: &[Vec<f64>]| -> Result<Tensor> {
        let data = rows
            .iter()
            .flat_map(|r| r.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s))
            .collect();
        Tensor::new(vec![rows.len(), d], data)
    };
    let x_train = standardize(train.z)?;
    let x_test = standardize(test.z)?;

    let mut cell_count: BTreeMap<(i64, usize), usize> = BTreeMap::new();
    for (y, s) in train.y.iter().zip(train.s) {
        *cell_count.entry((*y, *s)).or_default() += 1;
    }
    let weights: Vec<f64> = train
        .y
        .iter()
        .zip(train.s)
        .map(|(y, s)| n as f64 / (cell_count.len() * cell_count[&(*y, *s)]) as f64)
        .collect();
    let targets: Vec<i64> = train.s.iter().map(|s| *s as i64).collect();

    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, "probe");
    store.insert("w", uniform_linear(d, groups, &mut r));
    store.insert("b", Tensor::zeros(&[groups]));
    let mut state = AdamState::default();
    let cfg = AdamConfig {
        lr: PROBE_LR,
        ..AdamConfig::default()
    };
    for _ in 0..PROBE_STEPS {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(x_train.clone());
        let h = tape.matmul(x, bound.var("w")?)?;
        let logits = tape.add(h, bound.var("b")?)?;
        let loss = tape.weighted_cross_entropy(logits, &targets, Some(&weights), i64::MIN)?;
        let grads = tape.backward(loss)?;
        let g = bound.collect_grads(&store, &grads);
        adam_step(&mut store, &g, &mut state, &cfg)?;
    }

    let w = store.get("w")?;
    let b = store.get("b")?;
    let mut cells: BTreeMap<(i64, usize), (usize, usize)> = BTreeMap::new();
    for i in 0..test.z.len() {
        let row = x_test.row(i);
        let scores: Vec<f64> = (0..groups)
            .map(|g| b.data()[g] + row.iter().enumerate().map(|(k, v)| v * w.data()[k * groups + g]).sum::<f64>())
            .collect();
        let pred = crate::autodiff::argmax(&scores);
        let cell = cells.entry((test.y[i], test.s[i])).or_default();
        cell.0 += 1;
        cell.1 += usize::from(pred == test.s[i]);
    }
    Ok(cells.values().map(|(n, c)| *c as f64 / *n as f64).sum::<f64>() / cells.len() as f64)
}
