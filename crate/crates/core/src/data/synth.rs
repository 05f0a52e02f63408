//! Synthetic biased grid images.
//!
//! Disease evidence is a bright square block of patches at a random
//! patch-aligned position (only when `y = 1`). Race is written into every
//! pixel as a stripe texture whose orientation depends on the group, and
//! gender as a small global intensity offset. `rho` controls how strongly
//! race agrees with the label.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, Sample};
use super::pgm::{write_pgm, GrayImage};
use super::split::split_assignment;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Spurious-correlation strength in `[0, 1]`.
    pub rho: f64,
    pub signal_strength: f64,
    pub bias_strength: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub race_groups: usize,
    /// Side of the square lesion, in patches.
    pub lesion_side: usize,
    /// `P(y = 1)`.
    pub prevalence: f64,
    pub background: f64,
    pub train_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            height: 64,
            width: 64,
            patch: 8,
            rho: 0.0,
            signal_strength: 0.5,
            bias_strength: 0.5,
            noise_std: 0.1,
            seed: 0,
            race_groups: 2,
            lesion_side: 2,
            prevalence: 0.5,
            background: 0.35,
            train_frac: 0.8,
        }
    }
}

/// Amplitude of the race stripe texture per unit of `bias_strength`.
pub const TEXTURE_GAIN: f64 = 0.25;
/// Gender intensity offset per unit of `bias_strength`.
pub const GENDER_GAIN: f64 = 0.04;

impl SynthConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Race group that label `y` is pulled towards.
    pub fn preferred_race(&self, y: i64) -> usize {
        if y == 1 {
            self.race_groups - 1
        } else {
            0
        }
    }

    /// `(y, s_race)` cells with non-zero probability under this config.
    pub fn live_cells(&self) -> BTreeSet<(i64, usize)> {
        let mut cells = BTreeSet::new();
        for y in [0i64, 1] {
            let p_y = if y == 1 { self.prevalence } else { 1.0 - self.prevalence };
            if p_y <= 0.0 {
                continue;
            }
            for r in 0..self.race_groups {
                if self.rho < 1.0 || r == self.preferred_race(y) {
                    cells.insert((y, r));
                }
            }
        }
        cells
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!(
                "image {}x{} is not divisible by patch {}",
                self.height, self.width, self.patch
            ));
        }
        if !(self.signal_strength > 0.0 && self.signal_strength <= 1.0) {
            return bad(format!("signal_strength must lie in (0, 1], got {}", self.signal_strength));
        }
        if !(self.bias_strength > 0.0 && self.bias_strength <= 1.0) {
            return bad(format!("bias_strength must lie in (0, 1], got {}", self.bias_strength));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        if !(2..=3).contains(&self.race_groups) {
            return bad(format!("race_groups must be 2 or 3, got {}", self.race_groups));
        }
        let (gh, gw) = self.grid();
        if self.lesion_side == 0 || self.lesion_side > gh.min(gw) {
            return bad(format!("lesion_side {} does not fit a {gh}x{gw} grid", self.lesion_side));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return bad(format!("prevalence must lie in (0, 1), got {}", self.prevalence));
        }
        let cells = self.live_cells().len();
        if self.n < 4 * cells {
            return bad(format!("n = {} is below 4 x {cells} (y, s_race) cells", self.n));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: SynthConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        Ok(cfg)
    }
}

/// One generated sample before it is written to disk.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub id: String,
    pub image: GrayImage,
    pub y: i64,
    pub s_race: usize,
    pub s_gender: usize,
    /// Row-major patch indices covered by the lesion (empty when `y = 0`).
    pub lesion_patches: Vec<usize>,
}

/// Generates samples in memory. Deterministic in `cfg`.
pub fn generate_samples(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, "synth");
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let (gh, gw) = cfg.grid();
    let amp = TEXTURE_GAIN * cfg.bias_strength;
    let digits = cfg.n.to_string().len();
    let mut out = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let y = i64::from(rng.gen_bool(cfg.prevalence));
        let s_race = if rng.gen_bool(cfg.rho) {
            cfg.preferred_race(y)
        } else {
            rng.gen_range(0..cfg.race_groups)
        };
        let s_gender = usize::from(rng.gen_bool(0.5));
        let lesion = if y == 1 {
            let r0 = rng.gen_range(0..=gh - cfg.lesion_side);
            let c0 = rng.gen_range(0..=gw - cfg.lesion_side);
            Some((r0, c0))
        } else {
            None
        };
        let offset = if s_gender == 1 { 1.0 } else { -1.0 } * GENDER_GAIN * cfg.bias_strength;
        let mut pixels = Vec::with_capacity(cfg.height * cfg.width);
        for r in 0..cfg.height {
            for c in 0..cfg.width {
                let phase = match s_race {
                    0 => r,
                    1 => c,
                    _ => r + c,
                } as f64;
                let mut v = cfg.background + offset + amp * (2.0 * PI * phase / cfg.patch as f64).sin();
                if let Some((r0, c0)) = lesion {
                    let (pr, pc) = (r / cfg.patch, c / cfg.patch);
                    if (r0..r0 + cfg.lesion_side).contains(&pr) && (c0..c0 + cfg.lesion_side).contains(&pc) {
                        v += cfg.signal_strength;
                    }
                }
                if cfg.noise_std > 0.0 {
                    v += noise.sample(&mut rng);
                }
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
        let lesion_patches = lesion
            .map(|(r0, c0)| {
                (r0..r0 + cfg.lesion_side)
                    .flat_map(|r| (c0..c0 + cfg.lesion_side).map(move |c| r * gw + c))
                    .collect()
            })
            .unwrap_or_default();
        out.push(SynthSample {
            id: format!("s{i:0digits$}"),
            image: GrayImage {
                height: cfg.height,
                width: cfg.width,
                pixels,
            },
            y,
            s_race,
            s_gender,
            lesion_patches,
        });
    }
    let seen: BTreeSet<(i64, usize)> = out.iter().map(|s| (s.y, s.s_race)).collect();
    if let Some(missing) = cfg.live_cells().difference(&seen).next() {
        return Err(Error::Generation(format!(
            "cell (y={}, s_race={}) is empty; increase n or lower rho",
            missing.0, missing.1
        )));
    }
    Ok(out)
}

/// Writes `manifest.csv`, `lesions.csv`, `synth_config.json` and
/// `images/<id>.pgm` under `dir`. The split column comes from a stratified
/// split of the generated rows; it is left empty when some stratum is too
/// small to split.
pub fn synth_generate(cfg: &SynthConfig, dir: &Path) -> Result<Manifest> {
    let samples = generate_samples(cfg)?;
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut manifest = Manifest::new(
        dir,
        samples
            .iter()
            .map(|s| Sample {
                id: s.id.clone(),
                image_path: format!("images/{}.pgm", s.id),
                y: s.y,
                s_race: s.s_race,
                s_gender: s.s_gender,
                split: None,
            })
            .collect(),
    );
    match split_assignment(&manifest, cfg.train_frac, cfg.seed) {
        Ok(tags) => {
            for (s, t) in manifest.samples.iter_mut().zip(tags) {
                s.split = Some(t);
            }
        }
        Err(e) => warn!("split column left empty: {e}"),
    }
    for s in &samples {
        write_pgm(&img_dir.join(format!("{}.pgm", s.id)), &s.image)?;
    }
    manifest.write(&dir.join("manifest.csv"))?;
    write_lesions(&dir.join("lesions.csv"), &samples)?;
    let cfg_path = dir.join("synth_config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(manifest)
}

fn write_lesions(path: &Path, samples: &[SynthSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "patches"])?;
    for s in samples {
        let cells: Vec<String> = s.lesion_patches.iter().map(usize::to_string).collect();
        w.write_record([s.id.as_str(), &cells.join(";")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `lesions.csv` into `(id, patch indices)` pairs.
pub fn read_lesions(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let cells = rec
            .get(1)
            .unwrap_or_default()
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Data(format!("bad lesion cell {s:?}"))))
            .collect::<Result<Vec<usize>>>()?;
        out.push((id, cells));
    }
    Ok(out)
}
