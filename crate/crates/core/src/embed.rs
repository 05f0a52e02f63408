//! Patch embeddings from a small trainable encoder and label embeddings
//! from fixed vectors projected into the shared space.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, uniform_linear, Bound, ParamStore};
use crate::rng;

/// Label names for the binary finding task, index order = label index.
pub const BINARY_LABELS: [&str; 2] = ["No Finding", "Finding"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub d: usize,
    pub attention: bool,
}

impl EncoderConfig {
    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.d == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Cuts an `h × w` image into non-overlapping patches, row-major patch
/// order and row-major pixels inside each patch: `[P × patch²]`.
pub fn patchify(pixels: &[f64], height: usize, width: usize, patch: usize) -> Result<Vec<f64>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Config(format!("image {height}x{width} is not divisible by patch {patch}")));
    }
    if pixels.len() != height * width {
        return Err(Error::shape("patchify", &[pixels.len()], &[height, width]));
    }
    let (gh, gw) = (height / patch, width / patch);
    let mut out = Vec::with_capacity(pixels.len());
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch {
                let start = (pr * patch + r) * width + pc * patch;
                out.extend_from_slice(&pixels[start..start + patch]);
            }
        }
    }
    Ok(out)
}

/// Linear patch projection plus positional table, optionally followed by
/// one single-head self-attention block with a ReLU feed-forward.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    pub cfg: EncoderConfig,
}

impl PatchEncoder {
    /// Registers parameters under `enc.*`.
    pub fn init(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (pd, d, p) = (cfg.patch_dim(), cfg.d, cfg.num_patches());
        store.insert("enc.proj.w", uniform_linear(pd, d, rng));
        store.insert("enc.proj.b", Tensor::zeros(&[d]));
        store.insert("enc.pos", uniform(&[p, d], 0.02, rng));
        if cfg.attention {
            for name in ["enc.attn.q", "enc.attn.k", "enc.attn.v", "enc.attn.o"] {
                store.insert(name, uniform_linear(d, d, rng));
            }
            store.insert("enc.ffn.w1", uniform_linear(d, 2 * d, rng));
            store.insert("enc.ffn.b1", Tensor::zeros(&[2 * d]));
            store.insert("enc.ffn.w2", uniform_linear(2 * d, d, rng));
            store.insert("enc.ffn.b2", Tensor::zeros(&[d]));
        }
        Ok(Self { cfg })
    }

    /// `patches[B, P, patch²] -> [B, P, d]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, patches: Var) -> Result<Var> {
        let (p, pd, d) = (self.cfg.num_patches(), self.cfg.patch_dim(), self.cfg.d);
        let shape = tape.shape(patches).to_vec();
        if shape.len() != 3 || shape[1] != p || shape[2] != pd {
            return Err(Error::shape("encode_patches", &shape, &[p, pd]));
        }
        let batch = shape[0];
        let x = tape.matmul(patches, bound.var("enc.proj.w")?)?;
        let x = tape.add(x, bound.var("enc.proj.b")?)?;
        let e = tape.add(x, bound.var("enc.pos")?)?;
        if !self.cfg.attention {
            return Ok(e);
        }
        let q = tape.matmul(e, bound.var("enc.attn.q")?)?;
        let k = tape.matmul(e, bound.var("enc.attn.k")?)?;
        let v = tape.matmul(e, bound.var("enc.attn.v")?)?;
        let kt = tape.transpose(k)?;
        let scores = tape.batch_matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = tape.softmax(scores)?;
        let mixed = tape.batch_matmul(attn, v)?;
        let mixed = tape.matmul(mixed, bound.var("enc.attn.o")?)?;
        let h = tape.add(e, mixed)?;
        let f = tape.matmul(h, bound.var("enc.ffn.w1")?)?;
        let f = tape.add(f, bound.var("enc.ffn.b1")?)?;
        let f = tape.relu(f)?;
        let f = tape.matmul(f, bound.var("enc.ffn.w2")?)?;
        let f = tape.add(f, bound.var("enc.ffn.b2")?)?;
        let out = tape.add(h, f)?;
        debug_assert_eq!(tape.shape(out), &[batch, p, d]);
        Ok(out)
    }

    /// Convenience: embeddings of a single image as a `[P, d]` tensor.
    pub fn encode_patches(&self, store: &ParamStore, pixels: &[f64]) -> Result<Tensor> {
        let c = &self.cfg;
        let patches = patchify(pixels, c.height, c.width, c.patch)?;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, c.num_patches(), c.patch_dim()], patches)?);
        let out = self.forward(&mut tape, &bound, x)?;
        tape.value(out).reshaped(&[c.num_patches(), c.d])
    }
}

/// Fixed per-label vectors (`L × d_text`) plus the trainable projection
/// into the shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddings {
    pub names: Vec<String>,
    pub base: Tensor,
}

impl LabelEmbeddings {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn d_text(&self) -> usize {
        self.base.shape()[1]
    }

    /// Stores the base matrix as frozen `label.base` and the projection as
    /// trainable `label.q`.
    pub fn register(&self, d: usize, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert_frozen("label.base", self.base.clone());
        store.insert("label.q", projection_init(self.d_text(), d, rng));
    }

    /// Projected label rows `[L, d]` on the tape.
    pub fn forward(tape: &mut Tape, bound: &Bound) -> Result<Var> {
        tape.matmul(bound.var("label.base")?, bound.var("label.q")?)
    }

    /// Projected rows computed outside a training step.
    pub fn project(store: &ParamStore) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let el = Self::forward(&mut tape, &bound)?;
        Ok(tape.value(el).clone())
    }
}

/// Identity-like `d_text × d` map when `d_text ≥ d`; otherwise rows are
/// orthonormalized Gaussian draws.
pub fn projection_init(d_text: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    let mut q = Tensor::zeros(&[d_text, d]);
    if d_text >= d {
        for i in 0..d {
            q.data_mut()[i * d + i] = 1.0;
        }
        return q;
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d_text);
    while rows.len() < d_text {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Tensor::from_rows(&rows)
}

/// Loads `{label_name: [floats]}` and orders rows as `labels`.
pub fn load_label_embeddings(path: &Path, labels: &[&str]) -> Result<LabelEmbeddings> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)?;
    label_embeddings_from_map(map, labels)
}

pub fn label_embeddings_from_map(map: BTreeMap<String, Vec<f64>>, labels: &[&str]) -> Result<LabelEmbeddings> {
    if map.is_empty() {
        return Err(Error::Data("label embedding file is empty".into()));
    }
    if let Some(unknown) = map.keys().find(|k| !labels.contains(&k.as_str())) {
        return Err(Error::Data(format!("unknown label {unknown:?}; expected {labels:?}")));
    }
    let mut rows = Vec::with_capacity(labels.len());
    for name in labels {
        let v = map
            .get(*name)
            .ok_or_else(|| Error::Data(format!("label {name:?} missing from embedding file")))?;
        rows.push(v.clone());
    }
    let d_text = rows[0].len();
    if d_text == 0 || rows.iter().any(|r| r.len() != d_text) {
        return Err(Error::Data("label vectors are ragged or empty".into()));
    }
    Ok(LabelEmbeddings {
        names: labels.iter().map(|s| s.to_string()).collect(),
        base: Tensor::from_rows(&rows),
    })
}

/// Maximum retries per label when resampling for low pairwise cosine.
pub const PSEUDO_RETRIES: usize = 64;

/// Deterministic unit-norm stand-in vectors, one per label. For
/// `d_text ≥ 32`, every pair has `|cos| < 0.5`.
pub fn pseudo_label_embeddings(labels: &[&str], d_text: usize, seed: u64) -> Result<LabelEmbeddings> {
    if labels.is_empty() || d_text == 0 {
        return Err(Error::Data("pseudo label embeddings need labels and d_text > 0".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for name in labels {
        let mut attempt = 0;
        let row = loop {
            if attempt >= PSEUDO_RETRIES {
                return Err(Error::Generation(format!(
                    "no low-coherence vector for {name:?} after {PSEUDO_RETRIES} draws"
                )));
            }
            let mut r = rng::stream(seed, &format!("label/{name}/{attempt}"));
            let v: Vec<f64> = (0..d_text).map(|_| r.sample(StandardNormal)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let v: Vec<f64> = v.into_iter().map(|a| a / norm).collect();
            let coherent = rows
                .iter()
                .any(|u| u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().abs() >= 0.5);
            attempt += 1;
            if d_text < 32 || !coherent {
                break v;
            }
        };
        rows.push(row);
    }
    Ok(LabelEmbeddings {
        names: labels.iter().map(|s| s.to_string()).collect(),
        base: Tensor::from_rows(&rows),
    })
}
