//! Dataset manifests.
//!
//! One sample per line: `id image_path sparse_path gt_path`, separated by
//! whitespace, paths relative to the manifest's directory. Blank lines and
//! lines starting with `#` are ignored.

use std::collections::HashSet;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::data::png::{encode_depth_png, encode_rgb_png, read_depth_png, read_rgb_png, write_file};
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub sparse: PathBuf,
    pub gt: PathBuf,
    /// 1-based line in the manifest file.
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parses manifest text; `base` resolves relative paths. Does not touch
    /// the filesystem.
    pub fn parse(text: &str, base: &Path) -> Result<Manifest> {
        let mut entries = Vec::new();
        let mut ids = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let [id, image, sparse, gt] = fields[..] else {
                return Err(Error::Format(format!("manifest line {line}: expected 4 fields, found {}", fields.len())));
            };
            if !ids.insert(id.to_string()) {
                return Err(Error::Data(format!("manifest line {line}: duplicate id {id}")));
            }
            entries.push(ManifestEntry {
                id: id.to_string(),
                image: base.join(image),
                sparse: base.join(sparse),
                gt: base.join(gt),
                line,
            });
        }
        Ok(Manifest { entries })
    }

    /// Reads and parses `path`, then checks every referenced file exists.
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&text, base)?;
        for e in &m.entries {
            for p in [&e.image, &e.sparse, &e.gt] {
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        io::Error::new(io::ErrorKind::NotFound, format!("{} line {}", path.display(), e.line)),
                    ));
                }
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry order for one pass: manifest order without a seed, otherwise a
    /// permutation fixed by `(seed, epoch)`.
    pub fn order(&self, seed: Option<u64>, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        if let Some(s) = seed {
            idx.shuffle(&mut stream(s, &[purpose::SHUFFLE, epoch]));
        }
        idx
    }

    /// Batches of entry indices; the final batch may be short.
    pub fn batches(&self, batch: usize, seed: Option<u64>, epoch: u64) -> Result<Vec<Vec<usize>>> {
        if batch == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(self.order(seed, epoch).chunks(batch).map(<[usize]>::to_vec).collect())
    }
}

pub fn load_sample(entry: &ManifestEntry) -> Result<SceneSample> {
    let s = SceneSample {
        id: entry.id.clone(),
        image: read_rgb_png(&entry.image)?,
        sparse: read_depth_png(&entry.sparse)?,
        dense_gt: read_depth_png(&entry.gt)?,
    };
    s.validate()?;
    Ok(s)
}

/// Loads every sample and checks they share one size.
pub fn load_all(manifest: &Manifest) -> Result<Vec<SceneSample>> {
    let samples: Vec<SceneSample> = manifest.entries.iter().map(load_sample).collect::<Result<_>>()?;
    if let Some(first) = samples.first() {
        if let Some(bad) = samples.iter().find(|s| s.dims() != first.dims()) {
            return Err(Error::Data(format!(
                "sample {} is {:?} but the dataset is {:?}",
                bad.id,
                bad.dims(),
                first.dims()
            )));
        }
    }
    Ok(samples)
}

/// Writes `images/`, `sparse/`, `gt/` and the manifest under `dir`.
/// Returns the number of pixels the depth encoder had to clamp.
pub fn write_dataset(dir: &Path, samples: &[SceneSample]) -> Result<usize> {
    let mut text = String::from("# id image sparse gt\n");
    let mut clamped = 0;
    for s in samples {
        let image = format!("images/{}.png", s.id);
        let sparse = format!("sparse/{}.png", s.id);
        let gt = format!("gt/{}.png", s.id);
        write_file(&dir.join(&image), &encode_rgb_png(&s.image)?)?;
        let (bytes, r1) = encode_depth_png(&s.sparse)?;
        write_file(&dir.join(&sparse), &bytes)?;
        let (bytes, r2) = encode_depth_png(&s.dense_gt)?;
        write_file(&dir.join(&gt), &bytes)?;
        clamped += r1.clamped_high + r1.clamped_low + r2.clamped_high + r2.clamped_low;
        text.push_str(&format!("{} {image} {sparse} {gt}\n", s.id));
    }
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(clamped)
}
