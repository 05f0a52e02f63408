//! Dataset generation, manifests, image decoding, splitting and batching.

mod batch;
mod manifest;
mod pgm;
mod split;
mod synth;

pub use batch::batches;
pub use manifest::{load_manifest, Manifest, Sample, Split, MANIFEST_HEADER, UNCERTAIN};
pub use pgm::{decode_pgm, encode_pgm, quantize, read_image, write_pgm, GrayImage};
pub use split::{split_assignment, stratified_split, Stratum};
pub use synth::{
    generate_samples, read_lesions, synth_generate, SynthConfig, SynthSample, GENDER_GAIN, TEXTURE_GAIN,
};
