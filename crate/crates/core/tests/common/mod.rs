//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stride_core::autodiff::Tensor;
use stride_core::data::SynthConfig;
use stride_core::metrics::PredictionRecord;
use stride_core::train::TrainConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Exact optimal transport value by enumerating the basic feasible
/// solutions of the `m × n` transportation polytope.
pub fn lp_value(cost: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let (m, n) = (a.len(), b.len());
    let cells = m * n;
    let basis = m + n - 1;
    let mut best = f64::INFINITY;
    for subset in subsets(cells, basis) {
        let Some(x) = solve_marginals(&subset, a, b) else { continue };
        if x.iter().any(|v| *v < -1e-12) {
            continue;
        }
        let value: f64 = subset.iter().zip(&x).map(|(c, v)| cost[*c] * v).sum();
        best = best.min(value);
    }
    best
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Solves row/column-sum constraints restricted to the chosen cells by
/// Gaussian elimination. `None` if the cells do not determine a unique
/// solution or the system is inconsistent.
fn solve_marginals(chosen: &[usize], a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let (m, n) = (a.len(), b.len());
    let k = chosen.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for i in 0..m {
        let mut r: Vec<f64> = chosen.iter().map(|c| if c / n == i { 1.0 } else { 0.0 }).collect();
        r.push(a[i]);
        rows.push(r);
    }
    for j in 0..n {
        let mut r: Vec<f64> = chosen.iter().map(|c| if c % n == j { 1.0 } else { 0.0 }).collect();
        r.push(b[j]);
        rows.push(r);
    }
    let mut pivot_row = 0;
    let mut pivots = Vec::new();
    for col in 0..k {
        let Some(p) = (pivot_row..rows.len()).max_by(|&x, &y| rows[x][col].abs().total_cmp(&rows[y][col].abs())) else {
            return None;
        };
        if rows[p][col].abs() < 1e-12 {
            return None;
        }
        rows.swap(pivot_row, p);
        let div = rows[pivot_row][col];
        for v in rows[pivot_row].iter_mut() {
            *v /= div;
        }
        for r in 0..rows.len() {
            if r != pivot_row {
                let f = rows[r][col];
                if f != 0.0 {
                    for c in 0..=k {
                        rows[r][c] -= f * rows[pivot_row][c];
                    }
                }
            }
        }
        pivots.push(pivot_row);
        pivot_row += 1;
    }
    if rows[pivot_row..].iter().any(|r| r[k].abs() > 1e-9) {
        return None;
    }
    Some(pivots.iter().map(|&r| rows[r][k]).collect())
}

/// Brute-force PQD over two groups: `None` when undefined.
pub fn pqd_oracle(y: &[i64], y_hat: &[i64], s: &[usize], groups: usize) -> Option<f64> {
    let mut acc = Vec::new();
    for g in 0..groups {
        let idx: Vec<usize> = (0..y.len()).filter(|&i| s[i] == g && y[i] >= 0).collect();
        if idx.is_empty() {
            continue;
        }
        let correct = idx.iter().filter(|&&i| y[i] == y_hat[i]).count();
        acc.push(correct as f64 / idx.len() as f64);
    }
    let max = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = acc.iter().copied().fold(f64::INFINITY, f64::min);
    (max > 0.0).then(|| min / max)
}

/// Brute-force EOM with the skip conventions: a class is dropped when a
/// group lacks support for it or when no group recalls it at all.
pub fn eom_oracle(y: &[i64], y_hat: &[i64], s: &[usize], groups: usize) -> Option<f64> {
    let present: Vec<usize> = (0..groups).filter(|g| s.iter().zip(y).any(|(sg, yy)| sg == g && *yy >= 0)).collect();
    let mut sum = 0.0;
    let mut m = 0;
    for class in [0i64, 1] {
        let mut tprs = Vec::new();
        let mut supported = true;
        for &g in &present {
            let support: Vec<usize> = (0..y.len()).filter(|&i| s[i] == g && y[i] == class).collect();
            if support.is_empty() {
                supported = false;
                break;
            }
            let hit = support.iter().filter(|&&i| y_hat[i] == class).count();
            tprs.push(hit as f64 / support.len() as f64);
        }
        if !supported {
            continue;
        }
        let max = tprs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = tprs.iter().copied().fold(f64::INFINITY, f64::min);
        if max > 0.0 {
            sum += min / max;
            m += 1;
        }
    }
    (m > 0).then(|| sum / m as f64)
}

pub fn record(id: usize, s_race: usize, s_gender: usize, y: i64, y_hat: i64) -> PredictionRecord {
    PredictionRecord {
        id: format!("r{id:02}"),
        y_hat,
        y,
        s_race,
        s_gender,
    }
}

/// Fixed `(y, s)` layout of the 8-record fixture: both classes appear in
/// both groups.
pub const FIXTURE8_Y: [i64; 8] = [0, 0, 1, 1, 0, 1, 1, 1];
pub const FIXTURE8_S: [usize; 8] = [0, 0, 0, 0, 1, 1, 1, 1];

/// Twelve records `(race, gender, y, y_hat)` with hand-computed metrics:
/// race accuracies 4/6 and 5/6, recall ratios 2/3 (class 0) and 1
/// (class 1); race×gender accuracies 2/3, 2/3, 1, 2/3 with both recall
/// ratios 1/2.
pub const FIXTURE12: [(usize, usize, i64, i64); 12] = [
    (0, 0, 1, 1),
    (0, 0, 1, 0),
    (0, 0, 0, 0),
    (0, 1, 0, 1),
    (0, 1, 0, 0),
    (0, 1, 1, 1),
    (1, 0, 1, 1),
    (1, 0, 0, 0),
    (1, 0, 0, 0),
    (1, 1, 1, 0),
    (1, 1, 1, 1),
    (1, 1, 0, 0),
];

pub fn fixture12() -> Vec<PredictionRecord> {
    FIXTURE12
        .iter()
        .enumerate()
        .map(|(i, &(r, g, y, yh))| record(i, r, g, y, yh))
        .collect()
}

/// Synthetic data for the biased comparison at a given seed.
pub fn biased_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        n: 2000,
        rho: 0.9,
        bias_strength: 0.5,
        signal_strength: 0.15,
        noise_std: 0.1,
        seed,
        ..SynthConfig::default()
    }
}

/// Training configuration for the biased comparison.
pub fn biased_train(mode: &str, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for kv in [
        format!("mode={mode}"),
        format!("seed={seed}"),
        "lr=0.0003".into(),
        "tau=0.1".into(),
        "lambda=0.5".into(),
        "gamma=0.5".into(),
        "adversary_balanced=true".into(),
        "class_conditional_got=true".into(),
    ] {
        cfg.apply_override(&kv).unwrap();
    }
    cfg
}

/// Mean stride weight over lesion patches and over the remaining patches
/// of the positive samples listed in a weights CSV.
pub fn locality(weights: &[(String, Vec<f64>)], lesions: &std::collections::BTreeMap<String, Vec<usize>>) -> (f64, f64) {
    let (mut sig, mut ns, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (id, w) in weights {
        let Some(les) = lesions.get(id) else { continue };
        if les.is_empty() {
            continue;
        }
        for (i, wi) in w.iter().enumerate() {
            if les.contains(&i) {
                sig += wi;
                ns += 1;
            } else {
                bg += wi;
                nb += 1;
            }
        }
    }
    (sig / ns.max(1) as f64, bg / nb.max(1) as f64)
}

/// Accuracy of "some 2×2-patch window is brighter than the image mean by
/// more than `margin`" as a predictor of `y`.
pub fn lesion_threshold_accuracy(samples: &[stride_core::data::SynthSample], patch: usize, margin: f64) -> f64 {
    let hits = samples
        .iter()
        .filter(|s| {
            let img = &s.image;
            let (gh, gw) = (img.height / patch, img.width / patch);
            let mean = img.pixels.iter().sum::<f64>() / img.pixels.len() as f64;
            let patch_mean = |pr: usize, pc: usize| {
                let mut acc = 0.0;
                for r in pr * patch..(pr + 1) * patch {
                    for c in pc * patch..(pc + 1) * patch {
                        acc += img.pixels[r * img.width + c];
                    }
                }
                acc / (patch * patch) as f64
            };
            let mut best = f64::NEG_INFINITY;
            for pr in 0..gh - 1 {
                for pc in 0..gw - 1 {
                    let w = (patch_mean(pr, pc) + patch_mean(pr + 1, pc) + patch_mean(pr, pc + 1) + patch_mean(pr + 1, pc + 1)) / 4.0;
                    best = best.max(w);
                }
            }
            let predicted = i64::from(best - mean > margin);
            predicted == s.y
        })
        .count();
    hits as f64 / samples.len() as f64
}

/// Accuracy of a fixed linear rule on two global statistics: the variance
/// of row means minus the variance of column means. Horizontal stripes
/// (group 0) give a positive value, vertical stripes (group 1) negative.
pub fn texture_rule_accuracy(samples: &[stride_core::data::SynthSample]) -> f64 {
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    let hits = samples
        .iter()
        .filter(|s| {
            let img = &s.image;
            let rows: Vec<f64> = (0..img.height)
                .map(|r| img.pixels[r * img.width..(r + 1) * img.width].iter().sum::<f64>() / img.width as f64)
                .collect();
            let cols: Vec<f64> = (0..img.width)
                .map(|c| (0..img.height).map(|r| img.pixels[r * img.width + c]).sum::<f64>() / img.height as f64)
                .collect();
            let predicted = usize::from(var(&rows) - var(&cols) < 0.0);
            predicted == s.s_race
        })
        .count();
    hits as f64 / samples.len() as f64
}
