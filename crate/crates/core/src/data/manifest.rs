//! Dataset manifests: a CSV with header `image_path,mask_path,id`. Relative
//! paths resolve against the manifest's own directory.

use super::format::{read_image, read_mask, HuImage, Mask};
use super::window::WindowSpec;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

pub const MANIFEST_HEADER: [&str; 3] = ["image_path", "mask_path", "id"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub id: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Seed of the split that produced this manifest, if any.
    pub split_seed: Option<u64>,
}

/// One image/mask pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceSample {
    pub image: HuImage,
    pub mask: Mask,
    pub id: String,
}

impl SliceSample {
    pub fn new(image: HuImage, mask: Mask, id: impl Into<String>) -> Result<Self> {
        if (image.h, image.w) != (mask.h, mask.w) {
            return Err(Error::shape(format!(
                "image {}x{} and mask {}x{} differ",
                image.h, image.w, mask.h, mask.w
            )));
        }
        Ok(SliceSample {
            image,
            mask,
            id: id.into(),
        })
    }

    /// Windowed image as a `(1, 1, h, w)` tensor.
    pub fn input<T: Real>(&self, window: WindowSpec) -> Result<Tensor<T>> {
        let data = super::hu_window(&self.image.data, window)?;
        Tensor::from_vec(
            [1, 1, self.image.h, self.image.w],
            data.into_iter().map(T::of).collect(),
        )
    }

    /// Mask as a `(1, 1, h, w)` tensor of zeros and ones.
    pub fn target<T: Real>(&self) -> Result<Tensor<T>> {
        let data = self.mask.data.iter().map(|&v| T::of(v as f64)).collect();
        Tensor::from_vec([1, 1, self.mask.h, self.mask.w], data)
    }
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Manifest {
        Manifest {
            entries: idx.iter().map(|&i| self.entries[i].clone()).collect(),
            split_seed: self.split_seed,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map(|p| p.byte()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(offset, format!("{}: {other:?}", path.display())),
    }
}

/// Reads a manifest, resolving relative paths against its directory and
/// checking that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::format(
            0,
            format!(
                "{}: header must be '{}', got '{}'",
                path.display(),
                MANIFEST_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let offset = rec.position().map(|p| p.byte()).unwrap_or(0);
        let image_path = base.join(&rec[0]);
        let mask_path = base.join(&rec[1]);
        for p in [&image_path, &mask_path] {
            if !seen.insert(p.clone()) {
                return Err(Error::format(
                    offset,
                    format!("duplicate path {}", p.display()),
                ));
            }
            if !p.is_file() {
                return Err(Error::io(
                    p.clone(),
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "file listed in manifest is missing",
                    ),
                ));
            }
        }
        entries.push(ManifestEntry {
            image_path,
            mask_path,
            id: rec[2].to_string(),
        });
    }
    Ok(Manifest {
        entries,
        split_seed: None,
    })
}

/// Writes a manifest. Entries under the manifest's directory are stored
/// relative to it.
pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    // paths outside the manifest's directory are stored absolute, so they
    // do not depend on the working directory
    let rel = |p: &Path| -> Result<String> {
        let p = match p.strip_prefix(base) {
            Ok(r) => r.to_path_buf(),
            Err(_) if p.is_relative() => std::path::absolute(p).map_err(|e| Error::io(p, e))?,
            Err(_) => p.to_path_buf(),
        };
        Ok(p.to_string_lossy().into_owned())
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)
        .map_err(|e| csv_err(path, e))?;
    for e in &m.entries {
        w.write_record([rel(&e.image_path)?, rel(&e.mask_path)?, e.id.clone()])
            .map_err(|e| csv_err(path, e))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    super::format::write_atomic(path, &bytes)
}

pub fn read_slice(entry: &ManifestEntry) -> Result<SliceSample> {
    let image = read_image(&entry.image_path)?;
    let mask = read_mask(&entry.mask_path)?;
    SliceSample::new(image, mask, entry.id.clone())
}

pub fn read_all(m: &Manifest) -> Result<Vec<SliceSample>> {
    m.entries.iter().map(read_slice).collect()
}

/// Seeded shuffle, then the first `floor(train_frac · N)` entries go to
/// the training side.
pub fn split_dataset(m: &Manifest, train_frac: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if m.is_empty() {
        return Err(Error::EmptyInput("cannot split an empty manifest".into()));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_frac} must be in (0, 1)"
        )));
    }
    let mut idx: Vec<usize> = (0..m.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (train_frac * m.len() as f64).floor() as usize;
    let mut train = m.subset(&idx[..cut]);
    let mut test = m.subset(&idx[cut..]);
    train.split_seed = Some(seed);
    test.split_seed = Some(seed);
    Ok((train, test))
}

/// 80/20 train/test, then 80/20 of the training part into train/validation.
pub fn split_train_val_test(m: &Manifest, seed: u64) -> Result<(Manifest, Manifest, Manifest)> {
    let (rest, test) = split_dataset(m, 0.8, seed)?;
    let (train, val) = split_dataset(&rest, 0.8, seed.wrapping_add(1))?;
    Ok((train, val, test))
}
