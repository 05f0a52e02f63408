use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::manifest::{Manifest, Split};
use crate::error::{Error, Result};
use crate::rng;

/// Stratum key `(y, s_race, s_gender)`.
pub type Stratum = (i64, usize, usize);

/// Splits each `(y, s_race, s_gender)` stratum `train_frac` / rest.
///
/// Per stratum, the train count is `round(train_frac · n)` clamped to
/// `[1, n - 1]`. Returns `(train, test)` with split tags set.
pub fn stratified_split(manifest: &Manifest, train_frac: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Split(format!("train fraction {train_frac} outside (0, 1)")));
    }
    let assignment = split_assignment(manifest, train_frac, seed)?;
    let mut train = manifest.clone();
    let mut test = manifest.clone();
    train.samples.clear();
    test.samples.clear();
    for (sample, split) in manifest.samples.iter().zip(assignment) {
        let mut s = sample.clone();
        s.split = Some(split);
        match split {
            Split::Train => train.samples.push(s),
            Split::Test => test.samples.push(s),
        }
    }
    Ok((train, test))
}

/// Split tag for each row of `manifest`, in row order.
pub fn split_assignment(manifest: &Manifest, train_frac: f64, seed: u64) -> Result<Vec<Split>> {
    let mut strata: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        strata.entry((s.y, s.s_race, s.s_gender)).or_default().push(i);
    }
    let mut rng = rng::stream(seed, "split");
    let mut out = vec![Split::Test; manifest.len()];
    for (key, mut members) in strata {
        let n = members.len();
        if n < 2 {
            return Err(Error::Split(format!(
                "stratum (y={}, s_race={}, s_gender={}) has {n} member(s); need at least 2",
                key.0, key.1, key.2
            )));
        }
        members.shuffle(&mut rng);
        let n_train = ((train_frac * n as f64).round() as usize).clamp(1, n - 1);
        for &i in &members[..n_train] {
            out[i] = Split::Train;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::Sample;
    use std::collections::BTreeSet;

    fn manifest(strata: &[(Stratum, usize)]) -> Manifest {
        let mut samples = Vec::new();
        for &((y, r, g), n) in strata {
            for _ in 0..n {
                samples.push(Sample {
                    id: format!("s{}", samples.len()),
                    image_path: String::new(),
                    y,
                    s_race: r,
                    s_gender: g,
                    split: None,
                });
            }
        }
        Manifest::new(".", samples)
    }

    #[test]
    fn ten_in_one_stratum_gives_eight_two() {
        let m = manifest(&[((1, 0, 0), 10)]);
        let (train, test) = stratified_split(&m, 0.8, 3).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
    }

    #[test]
    fn disjoint_and_covering() {
        let m = manifest(&[((0, 0, 0), 7), ((1, 1, 0), 13), ((0, 1, 1), 5)]);
        let (train, test) = stratified_split(&m, 0.8, 9).unwrap();
        let a: BTreeSet<_> = train.samples.iter().map(|s| s.id.clone()).collect();
        let b: BTreeSet<_> = test.samples.iter().map(|s| s.id.clone()).collect();
        assert!(a.is_disjoint(&b));
        let all: BTreeSet<_> = m.samples.iter().map(|s| s.id.clone()).collect();
        assert_eq!(&a | &b, all);
    }

    #[test]
    fn proportions_hold_across_seeds() {
        let sizes = [((0, 0, 0), 7), ((1, 1, 0), 13), ((0, 1, 1), 5), ((1, 0, 1), 2), ((1, 1, 1), 31)];
        let m = manifest(&sizes);
        for seed in 0..20 {
            let (train, _) = stratified_split(&m, 0.8, seed).unwrap();
            for &(key, n) in &sizes {
                let got = train
                    .samples
                    .iter()
                    .filter(|s| (s.y, s.s_race, s.s_gender) == key)
                    .count() as f64;
                assert!((got - 0.8 * n as f64).abs() <= 1.0, "seed {seed} stratum {key:?}");
            }
        }
    }

    #[test]
    fn singleton_stratum_is_named() {
        let m = manifest(&[((0, 0, 0), 4), ((1, 1, 0), 1)]);
        let err = stratified_split(&m, 0.8, 0).unwrap_err().to_string();
        assert!(err.contains("y=1, s_race=1, s_gender=0"), "{err}");
    }

    #[test]
    fn deterministic_given_seed() {
        let m = manifest(&[((0, 0, 0), 20), ((1, 1, 1), 20)]);
        assert_eq!(split_assignment(&m, 0.8, 5).unwrap(), split_assignment(&m, 0.8, 5).unwrap());
    }
}
