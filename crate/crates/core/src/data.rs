//! Paired low-light / reference image sets.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Error, Result};
use crate::image::{load_image, ImageBuffer, ImageFormat};

#[derive(Clone, Debug)]
pub struct Pair {
    pub name: String,
    pub low: ImageBuffer,
    pub high: ImageBuffer,
}

impl Pair {
    pub fn new(name: impl Into<String>, low: ImageBuffer, high: ImageBuffer) -> Result<Self> {
        let name = name.into();
        if (low.width(), low.height()) != (high.width(), high.height()) {
            return Err(Error::dim(
                "pair",
                format!(
                    "`{name}`: low {}x{} vs high {}x{}",
                    low.height(),
                    low.width(),
                    high.height(),
                    high.width()
                ),
            ));
        }
        Ok(Pair { name, low, high })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub pairs: Vec<Pair>,
}

impl Dataset {
    pub fn new(pairs: Vec<Pair>) -> Self {
        Dataset { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Indices of pairs at least `patch` pixels in both extents.
    pub fn usable(&self, patch: usize) -> Vec<usize> {
        (0..self.pairs.len())
            .filter(|&i| self.pairs[i].low.width() >= patch && self.pairs[i].low.height() >= patch)
            .collect()
    }

    /// Logs a warning for every pair too small for `patch`; returns how many were found.
    pub fn report_undersized(&self, patch: usize) -> usize {
        let mut count = 0;
        for p in &self.pairs {
            if p.low.width() < patch || p.low.height() < patch {
                warn!(
                    "skipping `{}`: {}x{} is smaller than the {patch}x{patch} patch",
                    p.name,
                    p.low.height(),
                    p.low.width()
                );
                count += 1;
            }
        }
        count
    }

    /// Loads `dir/low` and `dir/high`, matched strictly by file name.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, Pairing)> {
        let dir = dir.as_ref();
        let pairing = pair_directory(dir)?;
        let pairs = pairing
            .matched
            .iter()
            .map(|name| {
                Pair::new(
                    stem(name),
                    load_image(dir.join("low").join(name))?,
                    load_image(dir.join("high").join(name))?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((Dataset::new(pairs), pairing))
    }
}

fn stem(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string())
}

/// Outcome of matching the two halves of a paired directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pairing {
    pub matched: Vec<String>,
    pub low_only: Vec<String>,
    pub high_only: Vec<String>,
}

impl Pairing {
    pub fn is_complete(&self) -> bool {
        self.low_only.is_empty() && self.high_only.is_empty()
    }

    /// One line per unmatched file.
    pub fn report(&self) -> Vec<String> {
        let low = self.low_only.iter().map(|n| format!("unpaired low/{n}"));
        let high = self.high_only.iter().map(|n| format!("unpaired high/{n}"));
        low.chain(high).collect()
    }
}

/// Image files (`.ppm`, `.png`) of a directory, sorted by name.
pub fn image_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && ImageFormat::from_path(&path).is_ok() {
            names.push(path.file_name().expect("file path").to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

pub fn pair_directory(dir: &Path) -> Result<Pairing> {
    let low: BTreeSet<String> = image_files(&dir.join("low"))?.into_iter().collect();
    let high: BTreeSet<String> = image_files(&dir.join("high"))?.into_iter().collect();
    let pairing = Pairing {
        matched: low.intersection(&high).cloned().collect(),
        low_only: low.difference(&high).cloned().collect(),
        high_only: high.difference(&low).cloned().collect(),
    };
    for line in pairing.report() {
        warn!("{}: {line}", dir.display());
    }
    Ok(pairing)
}

/// Image files under `path`: the file itself, or every image in the directory.
pub fn collect_inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        Ok(image_files(path)?.into_iter().map(|n| path.join(n)).collect())
    } else if path.exists() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)))
    }
}
