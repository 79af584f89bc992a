//! Samples, on-disk datasets, resizing, augmentation, splitting and
//! synthetic data.

mod augment;
pub mod netpbm;
mod split;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use augment::{augment, Augmentation, AugmentConfig};
pub use split::{split, Split, SplitSpec};
pub use synth::synth_dataset;

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::{Mask, Shape, Tensor};

/// One image with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// 1×3×H×W, values in [0, 1].
    pub image: Tensor<f32>,
    /// 1×1×H×W class indices.
    pub mask: Mask,
    pub id: String,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Mask) -> Result<Self> {
        let (s, m) = (image.shape(), mask.shape());
        if s.n != 1 || s.c != 3 || m.n != 1 || (s.h, s.w) != (m.h, m.w) {
            return Err(Error::Data(format!("image {s} and mask {m} do not pair up")));
        }
        Ok(Sample {
            image,
            mask,
            id: id.into(),
        })
    }

    pub fn extent(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s.h, s.w)
    }
}

/// Image resampled bilinearly, mask by nearest neighbour.
pub fn resize(sample: &Sample, h: usize, w: usize) -> Sample {
    if sample.extent() == (h, w) {
        return sample.clone();
    }
    let m = sample.mask.shape();
    let pick = |out: usize, len: usize| -> Vec<usize> {
        (0..out)
            .map(|o| ((((o as f64 + 0.5) * len as f64) / out as f64).floor() as usize).min(len - 1))
            .collect()
    };
    let (ys, xs) = (pick(h, m.h), pick(w, m.w));
    let mut mask = Mask::new(1, h, w);
    for (y, &sy) in ys.iter().enumerate() {
        for (x, &sx) in xs.iter().enumerate() {
            mask.data_mut()[y * w + x] = sample.mask.data()[sy * m.w + sx];
        }
    }
    Sample {
        image: kernels::resize_bilinear(&sample.image, h, w),
        mask,
        id: sample.id.clone(),
    }
}

/// Stacks samples of equal extent into an N×3×H×W batch and its labels.
pub fn batch<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, Mask)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = first.extent();
    let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.extent() != (h, w) {
            return Err(Error::Data(format!(
                "sample `{}` is {}x{}, batch is {h}x{w}",
                s.id,
                s.extent().0,
                s.extent().1
            )));
        }
        images.extend(s.image.data().iter().map(|&v| T::from_f64_lossy(f64::from(v))));
        labels.extend_from_slice(s.mask.data());
    }
    Ok((
        Tensor::from_vec(Shape::new(samples.len(), 3, h, w), images)?,
        Mask::from_vec(samples.len(), h, w, labels)?,
    ))
}

/// Maps stored gray levels to class indices. Binary masks saved as 0/255
/// are read as foreground wherever the level is at least 128.
pub fn normalize_labels(mask: &mut Mask, classes: usize, id: &str) -> Result<()> {
    let max = mask.data().iter().copied().max().unwrap_or(0) as usize;
    if max < classes {
        return Ok(());
    }
    if classes == 2 {
        for v in mask.data_mut() {
            *v = u8::from(*v >= 128);
        }
        return Ok(());
    }
    Err(Error::Data(format!("mask `{id}` has label {max}, expected fewer than {classes} classes")))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// JSON list of samples; relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?)
    }

    /// Keeps only entries whose id is listed, in list order.
    pub fn select(&self, ids: &[String]) -> Result<Manifest> {
        let samples = ids
            .iter()
            .map(|id| {
                self.samples
                    .iter()
                    .find(|e| &e.id == id)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("id `{id}` is not in the manifest")))
            })
            .collect::<Result<_>>()?;
        Ok(Manifest {
            samples,
            root: self.root.clone(),
        })
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|e| e.id.clone()).collect()
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_entry(&self, entry: &ManifestEntry, classes: usize) -> Result<Sample> {
        let image = netpbm::load_ppm(&self.resolve(&entry.image))?;
        let mut mask = netpbm::load_pgm(&self.resolve(&entry.mask))?;
        normalize_labels(&mut mask, classes, &entry.id)?;
        Sample::new(entry.id.clone(), image, mask)
    }

    /// Loads every sample, resized to `size` when given.
    pub fn load_samples(&self, classes: usize, size: Option<(usize, usize)>) -> Result<Vec<Sample>> {
        self.samples
            .iter()
            .map(|e| {
                let s = self.load_entry(e, classes)?;
                Ok(match size {
                    Some((h, w)) => resize(&s, h, w),
                    None => s,
                })
            })
            .collect()
    }
}

/// Writes `images/<id>.ppm`, `masks/<id>.pgm` and `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = Manifest {
        samples: Vec::new(),
        root: dir.to_path_buf(),
    };
    for s in samples {
        let image = PathBuf::from("images").join(format!("{}.ppm", s.id));
        let mask = PathBuf::from("masks").join(format!("{}.pgm", s.id));
        netpbm::save_ppm(&dir.join(&image), &s.image)?;
        netpbm::save_pgm(&dir.join(&mask), &s.mask)?;
        manifest.samples.push(ManifestEntry {
            id: s.id.clone(),
            image,
            mask,
        });
    }
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn write_ids(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = ids.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    Ok(std::fs::write(path, text)?)
}

pub fn read_ids(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}
