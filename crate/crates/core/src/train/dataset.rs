//! In-memory train/test data for a run.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;

use crate::data::{generate_samples, load_manifest, split_assignment, stratified_split, Manifest, Sample, Split, SynthConfig};
use crate::embed::patchify;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Example {
    pub sample: Sample,
    pub pixels: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    /// Group counts per sensitive attribute (race, gender).
    pub groups: [usize; 2],
}

impl Dataset {
    /// Loads the manifest, splits it (manifest tags when every row has one,
    /// otherwise a stratified split seeded by `seed`) and reads the images.
    pub fn load(manifest: &Path, height: usize, width: usize, train_frac: f64, seed: u64) -> Result<Self> {
        let m = load_manifest(manifest)?;
        Self::from_manifest(&m, height, width, train_frac, seed)
    }

    pub fn from_manifest(m: &Manifest, height: usize, width: usize, train_frac: f64, seed: u64) -> Result<Self> {
        let groups = [m.race_groups(), m.gender_groups()];
        let (train, test) = if !m.is_empty() && m.samples.iter().all(|s| s.split.is_some()) {
            (m.with_split(Split::Train), m.with_split(Split::Test))
        } else {
            info!("manifest lacks split tags; using a stratified {train_frac} split");
            stratified_split(m, train_frac, seed)?
        };
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let load = |part: &Manifest| -> Result<Vec<Example>> {
            let images = part.load_images(height, width)?;
            Ok(part
                .samples
                .iter()
                .cloned()
                .zip(images)
                .map(|(sample, img)| Example { sample, pixels: img.pixels })
                .collect())
        };
        Ok(Self {
            train: load(&train)?,
            test: load(&test)?,
            groups,
        })
    }
}

/// In-memory synthetic data plus the lesion patches of every sample.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub data: Dataset,
    pub lesions: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    /// Generates `cfg` in memory with the same stratified split that
    /// `synth_generate` writes to disk. No images are quantized.
    pub fn synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
        let samples = generate_samples(cfg)?;
        let rows: Vec<Sample> = samples
            .iter()
            .map(|s| Sample {
                id: s.id.clone(),
                image_path: String::new(),
                y: s.y,
                s_race: s.s_race,
                s_gender: s.s_gender,
                split: None,
            })
            .collect();
        let m = Manifest::new("", rows);
        let splits = split_assignment(&m, cfg.train_frac, cfg.seed)?;
        let mut data = Dataset {
            train: Vec::new(),
            test: Vec::new(),
            groups: [m.race_groups(), m.gender_groups()],
        };
        let mut lesions = BTreeMap::new();
        for ((s, row), split) in samples.into_iter().zip(m.samples).zip(splits) {
            lesions.insert(s.id.clone(), s.lesion_patches);
            let ex = Example {
                sample: row,
                pixels: s.image.pixels,
            };
            match split {
                Split::Train => data.train.push(ex),
                Split::Test => data.test.push(ex),
            }
        }
        Ok(SyntheticData { data, lesions })
    }

    /// Per training example: `N / (C · n_cell)` for its `(y, s)` cell, where
    /// `s` is picked by `attr` and `C` counts the non-empty cells. Each cell
    /// then carries equal total weight.
    pub fn cell_weights(&self, attr: impl Fn(&Sample) -> usize) -> Vec<f64> {
        let mut counts: BTreeMap<(i64, usize), usize> = BTreeMap::new();
        for e in &self.train {
            *counts.entry((e.sample.y, attr(&e.sample))).or_default() += 1;
        }
        let n = self.train.len() as f64;
        self.train
            .iter()
            .map(|e| n / (counts.len() * counts[&(e.sample.y, attr(&e.sample))]) as f64)
            .collect()
    }
}

/// Stacks patchified images into a row-major `[B, P, patch²]` buffer,
/// mirroring the images flagged in `flip` left to right.
pub fn stack_patches(examples: &[&Example], height: usize, width: usize, patch: usize, flip: &[bool]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(examples.len() * height * width);
    for (i, ex) in examples.iter().enumerate() {
        if flip.get(i).copied().unwrap_or(false) {
            let mirrored: Vec<f64> = ex
                .pixels
                .chunks(width)
                .flat_map(|row| row.iter().rev().copied())
                .collect();
            out.extend(patchify(&mirrored, height, width, patch)?);
        } else {
            out.extend(patchify(&ex.pixels, height, width, patch)?);
        }
    }
    Ok(out)
}
