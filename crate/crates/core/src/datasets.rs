//! Dataset ingestion, binary label remapping, contamination and
//! subsampling controls, and a synthetic fine-grained dataset.
//!
//! Folder layout:
//!
//! ```text
//! root/train/normal/*         normal training images
//! root/test/normal/*          normal test images
//! root/test/anomalous/*       anomalous test images
//! ```
//!
//! NPZ archives follow the MedMNIST convention: `{split}_images` (uint8,
//! `N×H×W` or `N×H×W×C`) and `{split}_labels` (integer, `N` or `N×1`);
//! plain `images` / `labels` entries are accepted as a fallback.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use ndarray_npy::NpzReader;
use rand::seq::index;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{validation, Error, Result};
use crate::image::{Image, ImageBatch, ValueRange};
use crate::transforms::resize_bilinear;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

pub const NORMAL: u8 = 0;
pub const ANOMALOUS: u8 = 1;

/// Images of one shape with binary labels (0 normal, 1 anomalous).
#[derive(Clone, Debug)]
pub struct ImageDataset {
    images: Vec<Image>,
    labels: Vec<u8>,
    split: Split,
    fingerprint: String,
    contamination: Option<f64>,
}

impl ImageDataset {
    pub fn new(images: Vec<Image>, labels: Vec<u8>, split: Split) -> Result<Self> {
        Self::build(images, labels, split, None)
    }

    fn build(
        images: Vec<Image>,
        labels: Vec<u8>,
        split: Split,
        contamination: Option<f64>,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(validation(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|i| i.shape() != first.shape()) {
                return Err(Error::Shape(format!(
                    "dataset mixes shapes {:?} and {:?}",
                    first.shape(),
                    bad.shape()
                )));
            }
            if first.channels() != 1 && first.channels() != 3 {
                return Err(Error::Shape(format!(
                    "{} channels; expected 1 or 3",
                    first.channels()
                )));
            }
        }
        if let Some(l) = labels.iter().find(|l| **l > ANOMALOUS) {
            return Err(validation(format!("label {l} is not binary")));
        }
        if split == Split::Train && contamination.is_none() && labels.contains(&ANOMALOUS) {
            return Err(validation(
                "train split contains anomalous items without a contamination ratio",
            ));
        }
        let fingerprint = fingerprint(&images, &labels, split);
        Ok(Self {
            images,
            labels,
            split,
            fingerprint,
            contamination,
        })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(C, H, W)` of every image, or `None` for an empty dataset.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(Image::shape)
    }

    /// SHA-256 over split, shapes, labels and pixel bytes.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Configured contamination ratio, if anomalies were mixed into a train split.
    pub fn contamination(&self) -> Option<f64> {
        self.contamination
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        let imgs: Vec<Image> = indices.iter().map(|&i| self.images[i].clone()).collect();
        ImageBatch::from_images(&imgs, ValueRange::Unit)
    }

    /// Copy with every image bilinearly resampled to `side × side`.
    pub fn resized(&self, side: usize) -> Result<Self> {
        let images = self
            .images
            .iter()
            .map(|i| resize_bilinear(i, side, side))
            .collect();
        Self::build(images, self.labels.clone(), self.split, self.contamination)
    }

    /// Items with the given label, keeping order.
    pub fn filter_label(&self, label: u8) -> Result<Self> {
        let (images, labels) = self
            .images
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| **l == label)
            .map(|(i, l)| (i.clone(), *l))
            .unzip();
        let contamination = if label == ANOMALOUS {
            self.contamination
        } else {
            None
        };
        Self::build(images, labels, self.split, contamination)
    }
}

fn fingerprint(images: &[Image], labels: &[u8], split: Split) -> String {
    let mut h = Sha256::new();
    h.update(split.as_str().as_bytes());
    h.update((images.len() as u64).to_le_bytes());
    if let Some(first) = images.first() {
        let (c, hh, w) = first.shape();
        for d in [c, hh, w] {
            h.update((d as u64).to_le_bytes());
        }
    }
    h.update(labels);
    for img in images {
        for v in img.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| {
            !p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with('.'))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn decode(path: &Path, color: Option<bool>) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = color.unwrap_or_else(|| dynimg.color().has_color());
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    if rgb {
        let buf = dynimg.to_rgb8();
        let mut img = Image::zeros(3, h, w);
        for (x, y, p) in buf.enumerate_pixels() {
            for c in 0..3 {
                img.set(c, y as usize, x as usize, p[c] as f32 / 255.0);
            }
        }
        Ok(img)
    } else {
        let buf = dynimg.to_luma8();
        Image::new(1, h, w, buf.as_raw().iter().map(|v| *v as f32 / 255.0).collect())
    }
}

/// Loads `root/{split}/{normal,anomalous}/*` in lexicographic order.
///
/// The channel count follows the first decoded image; later images are
/// converted to match. A train split must not contain an `anomalous/`
/// directory with files (anomalies enter training only via [`contaminate`]).
pub fn load_folder_dataset(root: &Path, split: Split) -> Result<ImageDataset> {
    if !root.is_dir() {
        return Err(Error::MissingPath(root.to_path_buf()));
    }
    let base = root.join(split.as_str());
    let normal_dir = base.join("normal");
    let anomalous_dir = base.join("anomalous");
    let anomalous_files = if anomalous_dir.is_dir() {
        sorted_files(&anomalous_dir)?
    } else {
        Vec::new()
    };
    match split {
        Split::Train => {
            if !normal_dir.is_dir() {
                return Err(Error::MissingPath(normal_dir));
            }
            if !anomalous_files.is_empty() {
                return Err(validation(format!(
                    "{} holds anomalous images; training uses the normal class only",
                    anomalous_dir.display()
                )));
            }
        }
        Split::Test => {
            if !normal_dir.is_dir() && !anomalous_dir.is_dir() {
                return Err(Error::MissingPath(base));
            }
        }
    }
    let normal_files = if normal_dir.is_dir() {
        sorted_files(&normal_dir)?
    } else {
        Vec::new()
    };

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut color = None;
    for (files, label) in [(normal_files, NORMAL), (anomalous_files, ANOMALOUS)] {
        for f in files {
            let img = decode(&f, color)?;
            color.get_or_insert(img.channels() == 3);
            if let Some(first) = images.first().map(Image::shape) {
                if img.shape() != first {
                    return Err(Error::Decode {
                        path: f,
                        reason: format!("shape {:?} differs from {:?}", img.shape(), first),
                    });
                }
            }
            images.push(img);
            labels.push(label);
        }
    }
    if images.is_empty() {
        return Err(Error::Data(format!("no images under {}", base.display())));
    }
    ImageDataset::new(images, labels, split)
}

fn read_array<T: ndarray_npy::ReadableElement>(
    npz: &mut NpzReader<fs::File>,
    name: &str,
) -> Option<ArrayD<T>> {
    npz.by_name::<ndarray::OwnedRepr<T>, IxDyn>(name).ok()
}

fn read_labels(npz: &mut NpzReader<fs::File>, name: &str) -> Option<Vec<i64>> {
    if let Some(a) = read_array::<i64>(npz, name) {
        return Some(a.iter().copied().collect());
    }
    if let Some(a) = read_array::<u8>(npz, name) {
        return Some(a.iter().map(|v| *v as i64).collect());
    }
    if let Some(a) = read_array::<i32>(npz, name) {
        return Some(a.iter().map(|v| *v as i64).collect());
    }
    if let Some(a) = read_array::<u16>(npz, name) {
        return Some(a.iter().map(|v| *v as i64).collect());
    }
    if let Some(a) = read_array::<u32>(npz, name) {
        return Some(a.iter().map(|v| *v as i64).collect());
    }
    read_array::<u64>(npz, name).map(|a| a.iter().map(|v| *v as i64).collect())
}

/// Loads a MedMNIST-style archive and remaps labels to binary.
///
/// Labels in `normal_labels` become 0, every other class becomes 1. The
/// train split keeps only the normal items.
pub fn load_npz_dataset(path: &Path, split: Split, normal_labels: &[i64]) -> Result<ImageDataset> {
    if !path.is_file() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let file = fs::File::open(path)?;
    let mut npz = NpzReader::new(file).map_err(|e| decode_err(e.to_string()))?;
    let names = npz.names().map_err(|e| decode_err(e.to_string()))?;
    let prefixed = format!("{}_images", split.as_str());
    let (img_key, lbl_key) = if names.iter().any(|n| *n == prefixed) {
        (prefixed, format!("{}_labels", split.as_str()))
    } else {
        ("images".to_string(), "labels".to_string())
    };
    let raw = read_array::<u8>(&mut npz, &img_key)
        .ok_or_else(|| decode_err(format!("missing uint8 array {img_key}")))?;
    let labels = read_labels(&mut npz, &lbl_key)
        .ok_or_else(|| decode_err(format!("missing integer array {lbl_key}")))?;

    let shape = raw.shape().to_vec();
    let (n, h, w, c) = match shape.as_slice() {
        [n, h, w] => (*n, *h, *w, 1),
        [n, h, w, c] if *c == 1 || *c == 3 => (*n, *h, *w, *c),
        other => return Err(decode_err(format!("unsupported image array shape {other:?}"))),
    };
    if labels.len() != n {
        return Err(validation(format!(
            "{n} images but {} labels in {}",
            labels.len(),
            path.display()
        )));
    }
    let normal: BTreeSet<i64> = normal_labels.iter().copied().collect();
    if !labels.iter().any(|l| normal.contains(l)) {
        return Err(validation(format!(
            "normal label set {normal:?} matches no item in {}",
            path.display()
        )));
    }
    let flat: Vec<u8> = raw.iter().copied().collect();
    let per = h * w * c;
    let mut images = Vec::with_capacity(n);
    let mut binary = Vec::with_capacity(n);
    for (i, l) in labels.iter().enumerate() {
        let label = if normal.contains(l) { NORMAL } else { ANOMALOUS };
        if split == Split::Train && label == ANOMALOUS {
            continue;
        }
        let src = &flat[i * per..(i + 1) * per];
        // HWC → CHW
        let mut img = Image::zeros(c, h, w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    img.set(ch, y, x, src[(y * w + x) * c + ch] as f32 / 255.0);
                }
            }
        }
        images.push(img);
        binary.push(label);
    }
    ImageDataset::new(images, binary, split)
}

/// Parameters of the synthetic fine-grained dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Normal training images.
    pub n_normal: usize,
    /// Normal test images.
    pub n_test_normal: usize,
    /// Anomalous test images.
    pub n_anomalous: usize,
    pub side: usize,
    pub channels: usize,
    /// Per-pixel probability of a speckle.
    pub speckle_density: f64,
    /// Speckle magnitude in `[0, 1]` pixel units.
    pub speckle_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_normal: 200,
            n_test_normal: 100,
            n_anomalous: 100,
            side: 32,
            channels: 1,
            speckle_density: 0.02,
            speckle_amplitude: 0.8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_normal == 0 || self.n_test_normal == 0 || self.n_anomalous == 0 {
            return Err(validation("synthetic dataset counts must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.speckle_amplitude) {
            return Err(validation("speckle amplitude outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.speckle_density) {
            return Err(validation("speckle density outside [0, 1]"));
        }
        if self.side < 8 || (self.channels != 1 && self.channels != 3) {
            return Err(validation("synthetic images need side >= 8 and 1 or 3 channels"));
        }
        Ok(())
    }
}

/// Smooth background plus a few broad Gaussian blobs.
fn smooth_blobs(rng: &mut ChaCha8Rng, channels: usize, side: usize) -> Image {
    let s = side as f64;
    let background = rng.random_range(0.1..0.2);
    // Upright orientation: light falls off from the top edge and blobs sit
    // in the upper part of the frame, so the four rotations are distinct.
    let falloff = rng.random_range(0.2..0.3);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..=4))
        .map(|_| {
            (
                rng.random_range(0.15 * s..0.55 * s),
                rng.random_range(0.2 * s..0.8 * s),
                rng.random_range(0.12 * s..0.25 * s),
                rng.random_range(0.15..0.35),
            )
        })
        .collect();
    let tint: Vec<f64> = (0..channels)
        .map(|_| if channels == 1 { 1.0 } else { rng.random_range(0.8..1.0) })
        .collect();
    let mut img = Image::zeros(channels, side, side);
    for y in 0..side {
        for x in 0..side {
            let mut v = background + falloff * (1.0 - y as f64 / s);
            for &(cy, cx, sigma, amp) in &blobs {
                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                v += amp * (-r2 / (2.0 * sigma * sigma)).exp();
            }
            for (c, t) in tint.iter().enumerate() {
                img.set(c, y, x, (v * t).clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

fn speckle(rng: &mut ChaCha8Rng, img: &mut Image, density: f64, amplitude: f64) {
    let (c, h, w) = img.shape();
    for y in 0..h {
        for x in 0..w {
            if rng.random_bool(density) {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                for ch in 0..c {
                    let v = img.get(ch, y, x) as f64 + sign * amplitude;
                    img.set(ch, y, x, v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
}

/// Normal images are smooth random blobs over a vertical light gradient;
/// anomalies are the same kind of image with sparse high-amplitude speckle.
/// Fully determined by the seed.
pub fn synth_finegrained(config: &SynthConfig) -> Result<(ImageDataset, ImageDataset)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (c, side) = (config.channels, config.side);
    let train: Vec<Image> = (0..config.n_normal)
        .map(|_| smooth_blobs(&mut rng, c, side))
        .collect();
    let mut test: Vec<Image> = (0..config.n_test_normal)
        .map(|_| smooth_blobs(&mut rng, c, side))
        .collect();
    for _ in 0..config.n_anomalous {
        let mut img = smooth_blobs(&mut rng, c, side);
        speckle(
            &mut rng,
            &mut img,
            config.speckle_density,
            config.speckle_amplitude,
        );
        test.push(img);
    }
    let mut labels = vec![NORMAL; config.n_test_normal];
    labels.extend(std::iter::repeat_n(ANOMALOUS, config.n_anomalous));
    Ok((
        ImageDataset::new(train, vec![NORMAL; config.n_normal], Split::Train)?,
        ImageDataset::new(test, labels, Split::Test)?,
    ))
}

/// Number of anomalies to add to `n` normal items so they make up `ratio`.
pub fn contamination_count(n: usize, ratio: f64) -> usize {
    // The epsilon absorbs representation error, e.g. 0.1·90/0.9 = 9.999….
    (ratio * n as f64 / (1.0 - ratio) + 1e-9).floor() as usize
}

/// Appends anomalous items from `pool` to a normal-only train split so that
/// they make up `ratio` of the result.
pub fn contaminate(train: &ImageDataset, pool: &ImageDataset, ratio: f64) -> Result<ImageDataset> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(validation(format!("contamination ratio {ratio} outside [0, 1)")));
    }
    if ratio == 0.0 {
        return Ok(train.clone());
    }
    let needed = contamination_count(train.len(), ratio);
    let candidates: Vec<&Image> = pool
        .images()
        .iter()
        .zip(pool.labels())
        .filter(|(_, l)| **l == ANOMALOUS)
        .map(|(i, _)| i)
        .collect();
    if candidates.len() < needed {
        return Err(Error::Data(format!(
            "contamination needs {needed} anomalous items, pool has {}",
            candidates.len()
        )));
    }
    let mut images = train.images().to_vec();
    let mut labels = train.labels().to_vec();
    for img in candidates.into_iter().take(needed) {
        images.push(img.clone());
        labels.push(ANOMALOUS);
    }
    ImageDataset::build(images, labels, train.split(), Some(ratio))
}

/// Seeded uniform subsample of `round(gamma · N)` items without replacement,
/// returned in original order.
pub fn subsample_fraction(dataset: &ImageDataset, gamma: f64, seed: u64) -> Result<ImageDataset> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(validation(format!("fraction {gamma} outside (0, 1]")));
    }
    if gamma == 1.0 {
        return Ok(dataset.clone());
    }
    let keep = (gamma * dataset.len() as f64).round() as usize;
    if keep == 0 {
        return Err(Error::Data(format!(
            "fraction {gamma} of {} items leaves nothing",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, dataset.len(), keep).into_vec();
    idx.sort_unstable();
    let images = idx.iter().map(|&i| dataset.images()[i].clone()).collect();
    let labels = idx.iter().map(|&i| dataset.labels()[i]).collect();
    ImageDataset::build(images, labels, dataset.split(), dataset.contamination())
}
