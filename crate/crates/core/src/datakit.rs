//! Class-foldered image datasets: loading, stratified sampling, k-fold
//! splits, preprocessing, manifests and a procedural toy corpus.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::rng::{rng_for, tag};
use crate::scalar::Scalar;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Real,
    Synthetic,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Provenance::Real),
            "synthetic" => Ok(Provenance::Synthetic),
            other => Err(Error::Dataset(format!("unknown provenance `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitTag {
    DmTrain,
    HoldoutTest,
    None,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::DmTrain => "dm_train",
            SplitTag::HoldoutTest => "holdout_test",
            SplitTag::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dm_train" => Ok(SplitTag::DmTrain),
            "holdout_test" => Ok(SplitTag::HoldoutTest),
            "none" => Ok(SplitTag::None),
            other => Err(Error::Dataset(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Item {
    /// Path relative to the dataset root, `/`-separated.
    pub relative_path: String,
    pub label: usize,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    root: PathBuf,
    classes: Vec<String>,
    items: Vec<Item>,
    split: SplitTag,
}

impl LabeledDataset {
    pub fn new(root: impl Into<PathBuf>, classes: Vec<String>, items: Vec<Item>, split: SplitTag) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Dataset("class list is empty".into()));
        }
        if let Some(item) = items.iter().find(|i| i.label >= classes.len()) {
            return Err(Error::LabelOutOfRange {
                label: item.label,
                classes: classes.len(),
            });
        }
        Ok(Self {
            root: root.into(),
            classes,
            items,
            split,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for item in &self.items {
            counts[item.label] += 1;
        }
        counts
    }

    pub fn path_of(&self, item: &Item) -> PathBuf {
        self.root.join(&item.relative_path)
    }

    /// Items at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Self {
        Self {
            root: self.root.clone(),
            classes: self.classes.clone(),
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            split,
        }
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    /// Indices of the items of each class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes.len()];
        for (i, item) in self.items.iter().enumerate() {
            out[item.label].push(i);
        }
        out
    }

    /// Absolute paths of every item, for leakage checks.
    pub fn absolute_paths(&self) -> Vec<PathBuf> {
        self.items.iter().map(|i| self.path_of(i)).collect()
    }

    /// `relative_path,class_label,provenance,split`, one row per item.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["relative_path", "class_label", "provenance", "split"])?;
        for item in &self.items {
            w.write_record([
                item.relative_path.as_str(),
                self.classes[item.label].as_str(),
                item.provenance.as_str(),
                self.split.as_str(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a manifest written by [`LabeledDataset::write_manifest`]. Paths
    /// resolve against `root`. With `classes = None` the class list is the
    /// sorted set of labels that occur.
    pub fn read_manifest(path: &Path, root: impl Into<PathBuf>, classes: Option<&[String]>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header != ["relative_path", "class_label", "provenance", "split"] {
            return Err(Error::Dataset(format!("{}: unexpected manifest header {header:?}", path.display())));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            rows.push((rec[0].to_owned(), rec[1].to_owned(), Provenance::parse(&rec[2])?, SplitTag::parse(&rec[3])?));
        }
        let classes: Vec<String> = match classes {
            Some(c) => c.to_vec(),
            None => {
                let mut c: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
                c.sort();
                c.dedup();
                c
            }
        };
        let split = rows.first().map_or(SplitTag::None, |r| r.3);
        if rows.iter().any(|r| r.3 != split) {
            return Err(Error::Dataset(format!("{}: manifest mixes split tags", path.display())));
        }
        let items = rows
            .into_iter()
            .map(|(rel, class, provenance, _)| {
                let label = classes
                    .iter()
                    .position(|c| *c == class)
                    .ok_or_else(|| Error::Dataset(format!("{}: unknown class `{class}`", path.display())))?;
                Ok(Item {
                    relative_path: rel,
                    label,
                    provenance,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(root, classes, items, split)
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Enumerates `root/<class>/<image>` in lexicographic order. Every image
/// header is decoded so unreadable files fail here, naming the file.
pub fn load_dataset(root: &Path, provenance: Provenance) -> Result<LabeledDataset> {
    let mut classes = Vec::new();
    let mut items = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Dataset(format!("class folder {} is not valid UTF-8", dir.display())))?
            .to_owned();
        let label = classes.len();
        let mut found = 0;
        for file in sorted_entries(&dir)?.into_iter().filter(|p| p.is_file()) {
            if !is_image(&file) {
                log::warn!("skipping non-image file {}", file.display());
                continue;
            }
            image::ImageReader::open(&file)
                .map_err(|e| Error::io(&file, e))?
                .with_guessed_format()
                .map_err(|e| Error::io(&file, e))?
                .into_dimensions()
                .map_err(|source| Error::Decode {
                    path: file.clone(),
                    source,
                })?;
            let fname = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            items.push(Item {
                relative_path: format!("{name}/{fname}"),
                label,
                provenance,
            });
            found += 1;
        }
        if found == 0 {
            log::warn!("class folder {} contains no images", dir.display());
        }
        classes.push(name);
    }
    if classes.is_empty() {
        return Err(Error::Dataset(format!("{} contains no class folders", root.display())));
    }
    LabeledDataset::new(root, classes, items, SplitTag::None)
}

/// Per-class sample size: `fraction * n` rounded half away from zero, at
/// least one.
pub fn stratum_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).max(1)
}

/// Draws `stratum_size(n_c, fraction)` items of every class uniformly
/// without replacement. Both parts keep dataset order.
pub fn stratified_sample(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} must lie in (0, 1)")));
    }
    let mut chosen = vec![false; ds.len()];
    for (c, mut idx) in ds.indices_by_class().into_iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::Dataset(format!("class `{}` has no items", ds.classes[c])));
        }
        let k = stratum_size(idx.len(), fraction);
        idx.shuffle(&mut rng_for(seed, &[tag("stratified_sample"), c as u64]));
        for &i in &idx[..k] {
            chosen[i] = true;
        }
    }
    let (sampled, holdout): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| chosen[i]);
    Ok((ds.subset(&sampled, SplitTag::DmTrain), ds.subset(&holdout, SplitTag::HoldoutTest)))
}

/// Fold index (`0..k`) of every item in a stratified `k`-fold partition
/// of `labels`.
pub fn kfold_assign(labels: &[usize], num_classes: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k = {k}; need at least 2 folds")));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or(Error::LabelOutOfRange { label: l, classes: num_classes })?
            .push(i);
    }
    let mut fold_of = vec![0usize; labels.len()];
    let mut offset = 0;
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < k {
            return Err(Error::Dataset(format!("class {c} has {} items, fewer than {k} folds", idx.len())));
        }
        idx.shuffle(&mut rng_for(seed, &[tag("kfold"), c as u64]));
        for (j, &i) in idx.iter().enumerate() {
            fold_of[i] = (j + offset) % k;
        }
        // continue where this class left off so fold totals stay balanced
        offset = (offset + idx.len()) % k;
    }
    Ok(fold_of)
}

/// `(train, val)` index lists for every fold of [`kfold_assign`].
pub fn kfold_indices(labels: &[usize], num_classes: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let fold_of = kfold_assign(labels, num_classes, k, seed)?;
    Ok((0..k)
        .map(|f| {
            let (val, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| fold_of[i] == f);
            (train, val)
        })
        .collect())
}

/// Stratified `k`-fold partition. Pair `i` is (all other folds, fold `i`).
pub fn kfold_split(ds: &LabeledDataset, k: usize, seed: u64) -> Result<Vec<(LabeledDataset, LabeledDataset)>> {
    Ok(kfold_indices(&ds.labels(), ds.classes.len(), k, seed)?
        .into_iter()
        .map(|(train, val)| (ds.subset(&train, ds.split), ds.subset(&val, ds.split)))
        .collect())
}

/// Number of `P_w x P_h` patches at stride `S` in an `I_w x I_h` image.
pub fn patch_count(iw: usize, ih: usize, pw: usize, ph: usize, stride: usize) -> Result<usize> {
    if stride == 0 || pw == 0 || ph == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be positive".into()));
    }
    if pw > iw || ph > ih {
        return Err(Error::InvalidArgument(format!("patch {pw}x{ph} larger than image {iw}x{ih}")));
    }
    if !(iw - pw).is_multiple_of(stride) || !(ih - ph).is_multiple_of(stride) {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} does not tile {iw}x{ih} with {pw}x{ph} patches"
        )));
    }
    Ok(((iw - pw) / stride + 1) * ((ih - ph) / stride + 1))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Normalization {
    /// `2 * pixel / 255 - 1`, the diffusion model's range.
    Dm,
    /// `(pixel / 255 - mean[c]) / std[c]`.
    Standardize { mean: Vec<f64>, std: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessSpec {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    pub normalization: Normalization,
}

impl PreprocessSpec {
    pub fn dm(size: usize, channels: usize) -> Self {
        Self {
            width: size,
            height: size,
            channels,
            normalization: Normalization::Dm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("target size must be positive".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidConfig(format!("channels {} must be 1 or 3", self.channels)));
        }
        if let Normalization::Standardize { mean, std } = &self.normalization {
            if mean.len() != self.channels || std.len() != self.channels {
                return Err(Error::InvalidConfig("one mean and std per channel required".into()));
            }
            if mean.iter().chain(std).any(|v| !v.is_finite()) || std.iter().any(|&s| s <= 0.0) {
                return Err(Error::InvalidConfig("mean/std must be finite with std > 0".into()));
            }
        }
        Ok(())
    }
}

/// Resized, channel-adjusted pixel planes in `[0, 1]`, `channels x h x w`.
fn unit_planes(img: &DynamicImage, width: usize, height: usize, channels: usize) -> Result<Vec<f32>> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::InvalidArgument("zero-area image".into()));
    }
    let (w, h) = (width as u32, height as u32);
    let same = img.width() == w && img.height() == h;
    let interleaved: Vec<f32> = if channels == 1 {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(
            img.width(),
            img.height(),
            img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        )
        .expect("buffer matches dimensions");
        if same { buf } else { imageops::resize(&buf, w, h, FilterType::Triangle) }.into_raw()
    } else {
        let buf = img.to_rgb32f();
        if same { buf } else { imageops::resize(&buf, w, h, FilterType::Triangle) }.into_raw()
    };
    let plane = width * height;
    let mut out = vec![0.0; channels * plane];
    for (p, px) in interleaved.chunks(channels).enumerate() {
        for (c, v) in px.iter().enumerate() {
            out[c * plane + p] = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Image to a `channels x height x width` tensor per `spec`.
pub fn preprocess<S: Scalar>(img: &DynamicImage, spec: &PreprocessSpec) -> Result<Tensor<S>> {
    spec.validate()?;
    let planes = unit_planes(img, spec.width, spec.height, spec.channels)?;
    let plane = spec.width * spec.height;
    let data = planes
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = v as f64;
            S::from_f64_lossy(match &spec.normalization {
                Normalization::Dm => 2.0 * v - 1.0,
                Normalization::Standardize { mean, std } => (v - mean[i / plane]) / std[i / plane],
            })
        })
        .collect();
    Tensor::new(vec![spec.channels, spec.height, spec.width], data)
}

pub fn open_image(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Decode {
            path: path.to_owned(),
            source,
        })
}

/// Decodes and preprocesses every item, in dataset order.
pub fn load_tensors<S: Scalar>(ds: &LabeledDataset, spec: &PreprocessSpec) -> Result<Vec<Tensor<S>>> {
    ds.items
        .par_iter()
        .map(|item| preprocess(&open_image(&ds.path_of(item))?, spec))
        .collect()
}

/// Per-channel mean and population standard deviation of pixels in
/// `[0, 1]` after resizing, over every item of `ds`.
pub fn channel_stats(ds: &LabeledDataset, width: usize, height: usize, channels: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let planes: Vec<Vec<f32>> = ds
        .items
        .par_iter()
        .map(|item| unit_planes(&open_image(&ds.path_of(item))?, width, height, channels))
        .collect::<Result<_>>()?;
    if planes.is_empty() {
        return Err(Error::Dataset("cannot compute statistics of an empty dataset".into()));
    }
    let plane = width * height;
    let count = (planes.len() * plane) as f64;
    let mut mean = vec![0.0; channels];
    for p in &planes {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += p[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; channels];
    for p in &planes {
        for (c, v) in var.iter_mut().enumerate() {
            *v += p[c * plane..(c + 1) * plane].iter().map(|&x| (x as f64 - mean[c]).powi(2)).sum::<f64>();
        }
    }
    let std = var.into_iter().map(|v| (v / count).sqrt()).collect();
    Ok((mean, std))
}

/// Maps a `[-1, 1]` tensor of shape `(C, H, W)` to 8-bit pixels.
pub fn to_image<S: Scalar>(t: &Tensor<S>) -> Result<DynamicImage> {
    let [c, h, w] = match *t.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::shape("to_image", format!("expected (C, H, W), got {:?}", t.shape()))),
    };
    let px = |v: S| ((v.to_f64_lossy().clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    let plane = h * w;
    let d = t.data();
    match c {
        1 => Ok(DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, d.iter().map(|&v| px(v)).collect()).expect("sized buffer"),
        )),
        3 => {
            let raw = (0..plane).flat_map(|p| (0..3).map(move |ch| px(d[ch * plane + p]))).collect();
            Ok(DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, raw).expect("sized buffer")))
        }
        _ => Err(Error::shape("to_image", format!("{c} channels; expected 1 or 3"))),
    }
}

pub fn save_png(img: &DynamicImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

pub const TOY_SHAPES: [&str; 3] = ["disk", "square", "cross"];

fn toy_pixel(shape: &str, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        "disk" => dx * dx + dy * dy <= r * r,
        "square" => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        "cross" => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        _ => unreachable!("shape validated by caller"),
    }
}

fn render_toy<R: Rng>(shape: &str, size: usize, rng: &mut R) -> GrayImage {
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-s / 8.0..=s / 8.0);
    let cy = s / 2.0 + rng.random_range(-s / 8.0..=s / 8.0);
    let r = s * rng.random_range(0.2..=0.3);
    let fg = rng.random_range(0.65..=0.95);
    let bg = rng.random_range(0.05..=0.2);
    let mut img = GrayImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let inside = toy_pixel(shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.04;
            let v = (if inside { fg } else { bg }) + noise;
            img.put_pixel(x as u32, y as u32, Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]));
        }
    }
    img
}

/// Writes `n_per_class` grayscale shape images per class under
/// `out_dir/<class>/` and loads the result.
pub fn make_toy_corpus(
    classes: &[&str],
    n_per_class: usize,
    size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<LabeledDataset> {
    if size < 16 {
        return Err(Error::InvalidArgument(format!("toy image size {size} below 16")));
    }
    if n_per_class == 0 || classes.is_empty() {
        return Err(Error::InvalidArgument("toy corpus needs classes and a positive count".into()));
    }
    let mut seen = BTreeMap::new();
    for &c in classes {
        if !TOY_SHAPES.contains(&c) {
            return Err(Error::InvalidArgument(format!("unknown toy class `{c}` (known: {TOY_SHAPES:?})")));
        }
        if seen.insert(c, ()).is_some() {
            return Err(Error::InvalidArgument(format!("toy class `{c}` listed twice")));
        }
    }
    for &c in classes {
        (0..n_per_class).into_par_iter().try_for_each(|j| {
            let mut rng = rng_for(seed, &[tag("toy"), tag(c), j as u64]);
            let img = render_toy(c, size, &mut rng);
            save_png(&DynamicImage::ImageLuma8(img), &out_dir.join(c).join(format!("{c}_{j:04}.png")))
        })?;
    }
    load_dataset(out_dir, Provenance::Real)
}
