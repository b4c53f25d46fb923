//! Image datasets: directory loaders, rotation augmentation, and a
//! deterministic synthetic stroke dataset.
//!
//! Pixels are stored channel-major as `f32` in `[0, 1]`. Rotated classes
//! share their source images and rotate on access.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const OMNIGLOT_CLASSES: usize = 1623;
pub const OMNIGLOT_TRAIN_CLASSES: usize = 1200;
pub const OMNIGLOT_SIZE: usize = 28;
pub const OMNIGLOT_MAX_IMAGES: usize = 20;
pub const MINI_IMAGENET_SPLITS: [(Split, usize); 3] =
    [(Split::Train, 64), (Split::Val, 16), (Split::Test, 20)];
pub const MINI_IMAGENET_SIZE: usize = 84;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One class: its source images and how many quarter turns to apply.
#[derive(Debug, Clone)]
pub struct ClassRecord {
    pub id: usize,
    pub name: String,
    pub images: Arc<Vec<Vec<f32>>>,
    /// Counter-clockwise quarter turns, `0..4`.
    pub rotation: u8,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<ClassRecord>,
    pub split: Split,
    pub image_size: usize,
    pub channels: usize,
}

impl Dataset {
    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn num_images(&self, class: usize) -> usize {
        self.classes[class].images.len()
    }

    /// Pixels of image `index` of `class`, with the class rotation applied.
    pub fn image(&self, class: usize, index: usize) -> Vec<f32> {
        let c = &self.classes[class];
        rotate_quarter(&c.images[index], self.channels, self.image_size, c.rotation)
    }

    /// Keep only the listed classes (renumbered from zero).
    pub fn subset(&self, classes: &[usize]) -> Result<Dataset> {
        let mut out = Vec::with_capacity(classes.len());
        for (i, &c) in classes.iter().enumerate() {
            let rec = self.classes.get(c).ok_or_else(|| {
                Error::Contract(format!(
                    "subset: class {c} out of range ({} classes)",
                    self.classes.len()
                ))
            })?;
            out.push(ClassRecord {
                id: i,
                ..rec.clone()
            });
        }
        Ok(Dataset {
            classes: out,
            ..self.clone_empty()
        })
    }

    fn clone_empty(&self) -> Dataset {
        Dataset {
            classes: Vec::new(),
            split: self.split,
            image_size: self.image_size,
            channels: self.channels,
        }
    }
}

/// Rotate a channel-major square image by `k` counter-clockwise quarter turns.
///
/// One turn maps `out[r][c] = in[c][S−1−r]`.
pub fn rotate_quarter(pixels: &[f32], channels: usize, size: usize, k: u8) -> Vec<f32> {
    let k = k % 4;
    if k == 0 {
        return pixels.to_vec();
    }
    let plane = size * size;
    let mut out = vec![0.0; pixels.len()];
    for ch in 0..channels {
        let src = &pixels[ch * plane..(ch + 1) * plane];
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        for r in 0..size {
            for c in 0..size {
                let (sr, sc) = match k {
                    1 => (c, size - 1 - r),
                    2 => (size - 1 - r, size - 1 - c),
                    _ => (size - 1 - c, r),
                };
                dst[r * size + c] = src[sr * size + sc];
            }
        }
    }
    out
}

/// Every rotation by 0°, 90°, 180° and 270° of every class becomes its own class.
pub fn augment_rotations(d: &Dataset) -> Dataset {
    let mut classes = Vec::with_capacity(d.classes.len() * 4);
    for rot in 0..4u8 {
        for c in &d.classes {
            let total = (c.rotation + rot) % 4;
            classes.push(ClassRecord {
                id: classes.len(),
                name: if rot == 0 {
                    c.name.clone()
                } else {
                    format!("{}@rot{}", c.name, 90 * rot as usize)
                },
                images: c.images.clone(),
                rotation: total,
            });
        }
    }
    Dataset {
        classes,
        ..d.clone_empty()
    }
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_dir = path.is_dir();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if hidden || is_dir != want_dirs {
            continue;
        }
        if !want_dirs && !is_image_file(&path) {
            continue;
        }
        out.push(path);
    }
    out.sort();
    Ok(out)
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Decode one image, resize to `size×size` (Lanczos), scale to `[0, 1]`.
pub fn load_image(path: &Path, size: usize, channels: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let s = size as u32;
    let plane = size * size;
    match channels {
        1 => {
            let g = image::imageops::resize(&img.to_luma8(), s, s, FilterType::Lanczos3);
            Ok(g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
        }
        3 => {
            let rgb = image::imageops::resize(&img.to_rgb8(), s, s, FilterType::Lanczos3);
            let raw = rgb.into_raw();
            let mut out = vec![0.0; 3 * plane];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for ch in 0..3 {
                    out[ch * plane + i] = px[ch] as f32 / 255.0;
                }
            }
            Ok(out)
        }
        n => Err(Error::Config(format!("unsupported channel count {n}"))),
    }
}

/// Load `root/<class>/<images>` directories in sorted order.
pub fn load_class_folders(
    root: &Path,
    size: usize,
    channels: usize,
) -> Result<Vec<(String, Vec<Vec<f32>>)>> {
    let mut out = Vec::new();
    for dir in sorted_entries(root, true)? {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let images = sorted_entries(&dir, false)?
            .iter()
            .map(|p| load_image(p, size, channels))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, images));
    }
    Ok(out)
}

fn to_dataset(
    classes: Vec<(String, Vec<Vec<f32>>)>,
    split: Split,
    size: usize,
    channels: usize,
) -> Dataset {
    Dataset {
        classes: classes
            .into_iter()
            .enumerate()
            .map(|(id, (name, images))| ClassRecord {
                id,
                name,
                images: Arc::new(images),
                rotation: 0,
            })
            .collect(),
        split,
        image_size: size,
        channels,
    }
}

/// Character directories of an Omniglot tree, sorted as `alphabet/character`.
///
/// Accepts `root/<alphabet>/<character>/` directly, or the two-part layout
/// `root/images_background/…` plus `root/images_evaluation/…`.
pub fn omniglot_character_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        ));
    }
    let parts = ["images_background", "images_evaluation"];
    let bases: Vec<PathBuf> = if parts.iter().any(|p| root.join(p).is_dir()) {
        parts
            .iter()
            .map(|p| root.join(p))
            .filter(|p| p.is_dir())
            .collect()
    } else {
        vec![root.to_path_buf()]
    };
    let mut out = Vec::new();
    for base in bases {
        for alphabet in sorted_entries(&base, true)? {
            for character in sorted_entries(&alphabet, true)? {
                let name = format!(
                    "{}/{}",
                    alphabet.file_name().unwrap_or_default().to_string_lossy(),
                    character.file_name().unwrap_or_default().to_string_lossy()
                );
                out.push((name, character));
            }
        }
    }
    Ok(out)
}

/// The 1200 / 423 class split of Omniglot at 28×28, unrotated.
pub fn load_omniglot(root: &Path) -> Result<(Dataset, Dataset)> {
    let dirs = omniglot_character_dirs(root)?;
    if dirs.len() != OMNIGLOT_CLASSES {
        return Err(Error::DatasetIntegrity(format!(
            "found {} character classes under {}, expected {} ({} train + {} test)",
            dirs.len(),
            root.display(),
            OMNIGLOT_CLASSES,
            OMNIGLOT_TRAIN_CLASSES,
            OMNIGLOT_CLASSES - OMNIGLOT_TRAIN_CLASSES
        )));
    }
    let mut classes = Vec::with_capacity(dirs.len());
    for (name, dir) in dirs {
        let files = sorted_entries(&dir, false)?;
        if files.is_empty() || files.len() > OMNIGLOT_MAX_IMAGES {
            return Err(Error::DatasetIntegrity(format!(
                "class {name} has {} images, expected 1..={OMNIGLOT_MAX_IMAGES}",
                files.len()
            )));
        }
        let images = files
            .iter()
            .map(|p| load_image(p, OMNIGLOT_SIZE, 1))
            .collect::<Result<Vec<_>>>()?;
        classes.push((name, images));
    }
    let test = classes.split_off(OMNIGLOT_TRAIN_CLASSES);
    Ok((
        to_dataset(classes, Split::Train, OMNIGLOT_SIZE, 1),
        to_dataset(test, Split::Test, OMNIGLOT_SIZE, 1),
    ))
}

/// Class names listed in a split CSV (`filename,label` rows, optional header).
pub fn read_split_csv(path: &Path) -> Result<Vec<String>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::DatasetIntegrity(format!("{}: {e}", path.display())))?;
    let mut labels: Vec<String> = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::DatasetIntegrity(format!("{}: {e}", path.display())))?;
        let label = row.get(1).unwrap_or("").trim();
        if i == 0 && label == "label" {
            continue;
        }
        if label.is_empty() {
            return Err(Error::DatasetIntegrity(format!(
                "{}: row {} has no label",
                path.display(),
                i + 1
            )));
        }
        if !labels.iter().any(|l| l == label) {
            labels.push(label.to_string());
        }
    }
    labels.sort();
    Ok(labels)
}

/// `root/<split>/<class>/<images>` with `root/<split>.csv` naming each split's classes.
pub fn load_mini_imagenet(root: &Path) -> Result<Vec<Dataset>> {
    let mut out = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    for (split, expected) in MINI_IMAGENET_SPLITS {
        let dir = root.join(split.name());
        let classes = load_class_folders(&dir, MINI_IMAGENET_SIZE, 3)?;
        if classes.len() != expected {
            return Err(Error::DatasetIntegrity(format!(
                "{split} split has {} classes, expected {expected}",
                classes.len()
            )));
        }
        let csv_path = root.join(format!("{}.csv", split.name()));
        if csv_path.is_file() {
            let listed = read_split_csv(&csv_path)?;
            let names: Vec<String> = classes.iter().map(|(n, _)| n.clone()).collect();
            if listed != names {
                return Err(Error::DatasetIntegrity(format!(
                    "{} lists {} classes that differ from the {} directories under {}",
                    csv_path.display(),
                    listed.len(),
                    names.len(),
                    dir.display()
                )));
            }
        }
        for (name, _) in &classes {
            if seen.contains(name) {
                return Err(Error::DatasetIntegrity(format!(
                    "class {name} appears in two splits"
                )));
            }
            seen.push(name.clone());
        }
        out.push(to_dataset(classes, split, MINI_IMAGENET_SIZE, 3));
    }
    Ok(out)
}

/// Parameters of the synthetic stroke dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub images_per_class: usize,
    pub size: usize,
    pub strokes: usize,
    /// Per-image endpoint jitter, in pixels.
    pub jitter: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 40,
            images_per_class: 20,
            size: OMNIGLOT_SIZE,
            strokes: 3,
            jitter: 1.0,
            noise: 0.05,
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Handwriting-like classes: each class is a fixed set of strokes, each
/// image a jittered, noisy rendering (dark ink on a white background).
pub fn synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.classes == 0 || spec.images_per_class == 0 || spec.size < 4 || spec.strokes == 0 {
        return Err(Error::Config(format!(
            "degenerate synthetic dataset spec {spec:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let jitter =
        Normal::new(0.0, spec.jitter).map_err(|e| Error::Config(format!("jitter: {e}")))?;
    let s = spec.size as f64;
    let margin = s * 0.15;
    let mut classes = Vec::with_capacity(spec.classes);
    for id in 0..spec.classes {
        let strokes: Vec<((f64, f64), (f64, f64))> = (0..spec.strokes)
            .map(|_| {
                let mut pt = || {
                    (
                        rng.random_range(margin..s - margin),
                        rng.random_range(margin..s - margin),
                    )
                };
                (pt(), pt())
            })
            .collect();
        let mut images = Vec::with_capacity(spec.images_per_class);
        for _ in 0..spec.images_per_class {
            let mut j =
                |p: (f64, f64)| (p.0 + jitter.sample(&mut rng), p.1 + jitter.sample(&mut rng));
            let jittered: Vec<_> = strokes.iter().map(|&(a, b)| (j(a), j(b))).collect();
            let mut px = Vec::with_capacity(spec.size * spec.size);
            for r in 0..spec.size {
                for c in 0..spec.size {
                    let p = (c as f64 + 0.5, r as f64 + 0.5);
                    let d = jittered
                        .iter()
                        .map(|&(a, b)| segment_distance(p, a, b))
                        .fold(f64::INFINITY, f64::min);
                    let ink = (1.5 - d).clamp(0.0, 1.0);
                    px.push((1.0 - ink + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
                }
            }
            images.push(px);
        }
        classes.push((format!("synthetic/{id:04}"), images));
    }
    Ok(to_dataset(classes, Split::Train, spec.size, 1))
}

/// Write a dataset as `root/<class>/<nn>.png` grayscale files.
pub fn write_class_folders(d: &Dataset, root: &Path) -> Result<()> {
    if d.channels != 1 {
        return Err(Error::Config(
            "write_class_folders: only grayscale datasets".into(),
        ));
    }
    for (ci, class) in d.classes.iter().enumerate() {
        let dir = root.join(class.name.replace('/', "_"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..class.images.len() {
            let px: Vec<u8> = d
                .image(ci, i)
                .iter()
                .map(|v| (v * 255.0).round() as u8)
                .collect();
            let s = d.image_size as u32;
            let img = image::GrayImage::from_raw(s, s, px).expect("buffer matches size");
            let path = dir.join(format!("{i:02}.png"));
            img.save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
        }
    }
    Ok(())
}

/// Load class folders as one grayscale split, without split-size checks.
pub fn load_grayscale_folders(root: &Path, size: usize, split: Split) -> Result<Dataset> {
    let classes = load_class_folders(root, size, 1)?;
    if classes.is_empty() {
        return Err(Error::DatasetIntegrity(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    Ok(to_dataset(classes, split, size, 1))
}
