//! CSV manifests: `id,image_path,y,s_race,s_gender,split`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use super::pgm::{read_image, GrayImage};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 6] = ["id", "image_path", "y", "s_race", "s_gender", "split"];

/// Label value marking an uncertain finding.
pub const UNCERTAIN: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest row with both sensitive attributes present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    /// As written in the manifest; relative paths resolve against the
    /// manifest's directory.
    pub image_path: String,
    /// 0, 1, or [`UNCERTAIN`].
    pub y: i64,
    pub s_race: usize,
    pub s_gender: usize,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
    /// Rows dropped because a sensitive attribute was missing.
    pub dropped_missing_sensitive: usize,
    pub image_format: String,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, samples: Vec<Sample>) -> Self {
        Self {
            root: root.into(),
            samples,
            dropped_missing_sensitive: 0,
            image_format: "pgm".into(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_path(&self, sample: &Sample) -> PathBuf {
        let p = Path::new(&sample.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Subset of rows carrying the given split tag.
    pub fn with_split(&self, split: Split) -> Manifest {
        Manifest {
            root: self.root.clone(),
            samples: self.samples.iter().filter(|s| s.split == Some(split)).cloned().collect(),
            dropped_missing_sensitive: 0,
            image_format: self.image_format.clone(),
        }
    }

    pub fn race_groups(&self) -> usize {
        self.samples.iter().map(|s| s.s_race + 1).max().unwrap_or(0)
    }

    pub fn gender_groups(&self) -> usize {
        self.samples.iter().map(|s| s.s_gender + 1).max().unwrap_or(0)
    }

    /// Loads every referenced image, checking dimensions.
    pub fn load_images(&self, height: usize, width: usize) -> Result<Vec<GrayImage>> {
        self.samples
            .iter()
            .map(|s| read_image(&self.image_path(s), height, width))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(MANIFEST_HEADER)?;
        for s in &self.samples {
            w.write_record([
                s.id.clone(),
                s.image_path.clone(),
                s.y.to_string(),
                s.s_race.to_string(),
                s.s_gender.to_string(),
                s.split.map(|x| x.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Parses a manifest. Rows with a missing sensitive attribute are dropped
/// and counted; every referenced image must exist.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != MANIFEST_HEADER {
        return Err(Error::Data(format!(
            "{}: header must be {}, found {}",
            path.display(),
            MANIFEST_HEADER.join(","),
            header.join(",")
        )));
    }
    let mut samples = Vec::new();
    let mut dropped = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = line + 2;
        if record.len() != MANIFEST_HEADER.len() {
            return Err(Error::Data(format!("{}:{row}: expected 6 fields", path.display())));
        }
        let field = |i: usize| record.get(i).unwrap_or("");
        let (race, gender) = (field(3), field(4));
        if race.is_empty() || gender.is_empty() {
            dropped += 1;
            continue;
        }
        let y: i64 = parse_field(field(2), "y", row)?;
        if !(y == 0 || y == 1 || y == UNCERTAIN) {
            return Err(Error::Data(format!("{}:{row}: y must be 0, 1 or -1, got {y}", path.display())));
        }
        let split = match field(5) {
            "" => None,
            s => Some(s.parse()?),
        };
        samples.push(Sample {
            id: field(0).to_string(),
            image_path: field(1).to_string(),
            y,
            s_race: parse_field(race, "s_race", row)?,
            s_gender: parse_field(gender, "s_gender", row)?,
            split,
        });
    }
    if dropped > 0 {
        warn!("{}: dropped {dropped} row(s) with missing sensitive attributes", path.display());
    }
    let manifest = Manifest {
        root,
        samples,
        dropped_missing_sensitive: dropped,
        image_format: "pgm".into(),
    };
    check_dense("s_race", manifest.samples.iter().map(|s| s.s_race))?;
    check_dense("s_gender", manifest.samples.iter().map(|s| s.s_gender))?;
    for s in &manifest.samples {
        let p = manifest.image_path(s);
        if !p.is_file() {
            return Err(Error::Data(format!("missing image file {}", p.display())));
        }
    }
    Ok(manifest)
}

fn parse_field<T: FromStr>(s: &str, name: &str, row: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Data(format!("row {row}: malformed {name} value {s:?}")))
}

fn check_dense(name: &str, ids: impl Iterator<Item = usize>) -> Result<()> {
    let set: BTreeSet<usize> = ids.collect();
    if let Some(&max) = set.iter().next_back() {
        if set.len() != max + 1 {
            return Err(Error::Data(format!("{name} ids are not dense from 0: {set:?}")));
        }
    }
    Ok(())
}
