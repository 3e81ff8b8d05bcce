//! Paired-dataset ingestion, normalization, pyramids, padding, the
//! direction switch, and a seeded synthetic pair generator used as a
//! desk-scale oracle.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::DetectionRecord;
use crate::nn::{avg_pool_down, reflect_index, Tensor};
use crate::{Error, Result};

/// Dense C x H x W raster together with the interval its values live in.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub data: Array3<f64>,
    pub range: (f64, f64),
}

impl ImageBuf {
    pub fn new(data: Array3<f64>, range: (f64, f64)) -> Self {
        ImageBuf { data, range }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Lift into a batch-of-one tensor.
    pub fn to_batch(&self) -> Tensor {
        let (c, h, w) = self.data.dim();
        self.data
            .clone()
            .into_shape_with_order((1, c, h, w))
            .unwrap()
    }

    /// Extract sample `i` of a batch tensor.
    pub fn from_batch(t: &Tensor, i: usize, range: (f64, f64)) -> Self {
        ImageBuf::new(t.index_axis(Axis(0), i).to_owned(), range)
    }

    /// Single-channel luminance plane. BT.601 weights for 3-channel images,
    /// identity for single-channel ones.
    pub fn luminance(&self) -> Result<Array2<f64>> {
        match self.channels() {
            1 => Ok(self.data.index_axis(Axis(0), 0).to_owned()),
            3 => {
                let r = self.data.index_axis(Axis(0), 0);
                let g = self.data.index_axis(Axis(0), 1);
                let b = self.data.index_axis(Axis(0), 2);
                let mut y = Array2::zeros(r.dim());
                ndarray::Zip::from(&mut y)
                    .and(&r)
                    .and(&g)
                    .and(&b)
                    .for_each(|o, &r, &g, &b| *o = 0.299 * r + 0.587 * g + 0.114 * b);
                Ok(y)
            }
            c => Err(Error::Precondition(format!(
                "luminance undefined for {c}-channel image"
            ))),
        }
    }
}

/// Declared scale of a raw raster before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawScale {
    /// Values in [0, 255].
    U8,
    /// Values in [0, 1].
    Unit,
}

impl RawScale {
    fn bounds(self) -> (f64, f64) {
        match self {
            RawScale::U8 => (0.0, 255.0),
            RawScale::Unit => (0.0, 1.0),
        }
    }
}

/// Affine-map a raw raster onto `range`. Values outside the declared input
/// scale (beyond a tiny float slack) are rejected.
pub fn normalize(raw: &Array3<f64>, scale: RawScale, range: (f64, f64)) -> Result<ImageBuf> {
    let (lo, hi) = scale.bounds();
    let slack = (hi - lo) * 1e-9;
    for &v in raw.iter() {
        if v < lo - slack || v > hi + slack {
            return Err(Error::Precondition(format!(
                "raw value {v} outside declared input range [{lo}, {hi}]"
            )));
        }
    }
    let (out_lo, out_hi) = range;
    let scale_f = (out_hi - out_lo) / (hi - lo);
    let data = raw.mapv(|v| out_lo + (v - lo) * scale_f);
    Ok(ImageBuf::new(data, range))
}

/// Inverse of [`normalize`]: map back onto the raw scale, clamping the tiny
/// float overshoot at the interval ends.
pub fn denormalize(img: &ImageBuf, scale: RawScale) -> Array3<f64> {
    let (lo, hi) = scale.bounds();
    let (in_lo, in_hi) = img.range;
    let scale_f = (hi - lo) / (in_hi - in_lo);
    img.data
        .mapv(|v| (lo + (v - in_lo) * scale_f).clamp(lo, hi))
}

/// Crop bookkeeping for [`pad_to_multiple`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

/// Reflect-pad the bottom/right edges until both spatial dims are divisible
/// by `multiple`.
pub fn pad_to_multiple(img: &ImageBuf, multiple: usize) -> Result<(ImageBuf, CropRecord)> {
    if multiple == 0 {
        return Err(Error::Precondition("padding multiple must be >= 1".into()));
    }
    let (c, h, w) = img.data.dim();
    let th = h.div_ceil(multiple) * multiple;
    let tw = w.div_ceil(multiple) * multiple;
    let rec = CropRecord {
        height: h,
        width: w,
    };
    if th == h && tw == w {
        return Ok((img.clone(), rec));
    }
    let mut out = Array3::zeros((c, th, tw));
    for ch in 0..c {
        for y in 0..th {
            let sy = reflect_index(y as isize, h);
            for x in 0..tw {
                let sx = reflect_index(x as isize, w);
                out[[ch, y, x]] = img.data[[ch, sy, sx]];
            }
        }
    }
    Ok((ImageBuf::new(out, img.range), rec))
}

/// Inverse of [`pad_to_multiple`].
pub fn crop_back(img: &ImageBuf, rec: CropRecord) -> ImageBuf {
    let cropped = img
        .data
        .slice(ndarray::s![.., ..rec.height, ..rec.width])
        .to_owned();
    ImageBuf::new(cropped, img.range)
}

/// Image pyramid, finest level first.
#[derive(Debug, Clone)]
pub struct ImagePyramid {
    pub levels: Vec<ImageBuf>,
    pub factors: Vec<usize>,
}

/// Build an `n_scales`-level pyramid by repeated 3x3 stride-2 average
/// pooling with reflect padding. Level j has dims ceil(level0 / 2^j).
pub fn make_pyramid(img: &ImageBuf, n_scales: usize) -> Result<ImagePyramid> {
    if n_scales == 0 {
        return Err(Error::Precondition("pyramid needs n_scales >= 1".into()));
    }
    if img.height() == 0 || img.width() == 0 {
        return Err(Error::Precondition("pyramid of an empty image".into()));
    }
    let mut levels = vec![img.clone()];
    let mut factors = vec![1usize];
    let mut cur = img.to_batch();
    for j in 1..n_scales {
        cur = avg_pool_down(&cur);
        levels.push(ImageBuf::from_batch(&cur, 0, img.range));
        factors.push(1 << j);
    }
    Ok(ImagePyramid { levels, factors })
}

/// Batched pyramid for training: repeated average-pool downsampling.
pub fn pyramid_batch(x: &Tensor, n_scales: usize) -> Vec<Tensor> {
    let mut levels = vec![x.clone()];
    for _ in 1..n_scales {
        let next = avg_pool_down(levels.last().unwrap());
        levels.push(next);
    }
    levels
}

/// Push per-level gradients of a batched pyramid back to the finest level.
pub fn pyramid_batch_backward(level_grads: &[Tensor], level_dims: &[(usize, usize)]) -> Tensor {
    debug_assert_eq!(level_grads.len(), level_dims.len());
    let n = level_grads.len();
    let mut acc = level_grads[n - 1].clone();
    for j in (0..n - 1).rev() {
        let (h, w) = level_dims[j];
        let up = crate::nn::avg_pool_down_backward(&acc, h, w);
        acc = up + &level_grads[j];
    }
    acc
}

/// Which modality is the source of the learned mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    VisibleToInfrared,
    InfraredToVisible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// A co-registered visible/infrared pair plus optional detection labels.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub id: String,
    pub visible: ImageBuf,
    pub infrared: ImageBuf,
    pub labels: Option<Vec<DetectionRecord>>,
}

impl PairedSample {
    pub fn source(&self, direction: Direction) -> &ImageBuf {
        match direction {
            Direction::VisibleToInfrared => &self.visible,
            Direction::InfraredToVisible => &self.infrared,
        }
    }

    pub fn target(&self, direction: Direction) -> &ImageBuf {
        match direction {
            Direction::VisibleToInfrared => &self.infrared,
            Direction::InfraredToVisible => &self.visible,
        }
    }
}

/// Where a dataset lives and how to read it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub direction: Direction,
    pub split: Split,
}

/// On-disk manifest file: ids per split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    pub splits: BTreeMap<String, Vec<String>>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Lazily loading paired dataset. Construction verifies that every id
/// resolves to both modality files with matching dimensions; pixel data is
/// read on demand so iteration order never depends on caching.
#[derive(Debug, Clone)]
pub struct Dataset {
    manifest: DatasetManifest,
    ids: Vec<String>,
}

impl Dataset {
    pub fn direction(&self) -> Direction {
        self.manifest.direction
    }

    pub fn root(&self) -> &Path {
        &self.manifest.root
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    fn visible_path(&self, id: &str) -> PathBuf {
        self.manifest.root.join("visible").join(format!("{id}.png"))
    }

    fn infrared_path(&self, id: &str) -> PathBuf {
        self.manifest.root.join("infrared").join(format!("{id}.png"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.manifest.root.join("labels").join(format!("{id}.txt"))
    }

    /// Load one sample from disk. Images come back in [0, 1].
    pub fn sample(&self, index: usize) -> Result<PairedSample> {
        let id = &self.ids[index];
        let visible = load_image(&self.visible_path(id))?;
        let infrared = load_image(&self.infrared_path(id))?;
        if (visible.height(), visible.width()) != (infrared.height(), infrared.width()) {
            return Err(Error::Dataset(format!(
                "pair {id} is not co-registered: visible {}x{}, infrared {}x{}",
                visible.width(),
                visible.height(),
                infrared.width(),
                infrared.height()
            )));
        }
        let label_path = self.label_path(id);
        let labels = if label_path.is_file() {
            Some(crate::metrics::read_label_file(&label_path, id, false)?)
        } else {
            None
        };
        Ok(PairedSample {
            id: id.clone(),
            visible,
            infrared,
            labels,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<PairedSample>> + '_ {
        (0..self.len()).map(|i| self.sample(i))
    }
}

/// Open a dataset: read the manifest, resolve the requested split, and
/// verify every pair exists and is co-registered (header-only dimension
/// check). Ids are sorted so iteration order is a pure function of the
/// manifest.
pub fn load_paired_dataset(manifest: DatasetManifest) -> Result<Dataset> {
    let mpath = manifest.root.join(MANIFEST_NAME);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mfile: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("bad manifest {}: {e}", mpath.display())))?;
    let split_key = match manifest.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let mut ids = mfile
        .splits
        .get(split_key)
        .cloned()
        .ok_or_else(|| Error::Dataset(format!("manifest has no '{split_key}' split")))?;
    ids.sort();
    ids.dedup();

    let ds = Dataset { manifest, ids };
    for id in ds.ids.clone() {
        let vp = ds.visible_path(&id);
        let ip = ds.infrared_path(&id);
        for p in [&vp, &ip] {
            if !p.is_file() {
                return Err(Error::Dataset(format!(
                    "sample {id}: missing counterpart file {}",
                    p.display()
                )));
            }
        }
        let vd = image::image_dimensions(&vp).map_err(|e| Error::image(&vp, e))?;
        let idim = image::image_dimensions(&ip).map_err(|e| Error::image(&ip, e))?;
        if vd != idim {
            return Err(Error::Dataset(format!(
                "pair {id} is not co-registered: visible {}x{}, infrared {}x{}",
                vd.0, vd.1, idim.0, idim.1
            )));
        }
    }
    Ok(ds)
}

/// Read a PNG into a [0, 1] raster. Gray images load as 1 channel, color as
/// 3 (alpha dropped).
pub fn load_image(path: &Path) -> Result<ImageBuf> {
    let dyn_img = image::open(path).map_err(|e| Error::image(path, e))?;
    let raw = match dyn_img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
                g.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
            })
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
                rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
            })
        }
    };
    Ok(ImageBuf::new(raw, (0.0, 1.0)))
}

/// Write a [0, 1] raster as an 8-bit PNG (Luma for 1 channel, RGB for 3).
pub fn save_image(img: &ImageBuf, path: &Path) -> Result<()> {
    let (c, h, w) = img.data.dim();
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        1 => {
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([quant(img.data[[0, y as usize, x as usize]])])
            });
            buf.save(path).map_err(|e| Error::image(path, e))
        }
        3 => {
            let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                image::Rgb([
                    quant(img.data[[0, y as usize, x as usize]]),
                    quant(img.data[[1, y as usize, x as usize]]),
                    quant(img.data[[2, y as usize, x as usize]]),
                ])
            });
            buf.save(path).map_err(|e| Error::image(path, e))
        }
        c => Err(Error::Precondition(format!(
            "cannot save {c}-channel image as PNG"
        ))),
    }
}

/// Deterministic recipe for one synthetic visible/infrared pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecipe {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub hotspot_count: usize,
    pub blur_radius: f64,
}

/// Generate one co-registered pair with a known closed-form mapping:
/// the infrared plane is the blurred inverse luminance of the visible image
/// plus seeded Gaussian hotspots, clamped to [0, 1]. With no hotspots and no
/// blur the mapping degenerates to exact luminance inversion, which gives
/// trained generators an analytic ground truth.
pub fn synthesize_pair(recipe: &SynthesisRecipe) -> Result<PairedSample> {
    if recipe.height == 0 || recipe.width == 0 {
        return Err(Error::Precondition("synthesis size must be nonzero".into()));
    }
    let (h, w) = (recipe.height, recipe.width);
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);

    // Smooth visible field: a small mixture of low-frequency cosine waves
    // per channel, rescaled into [0.05, 0.95].
    let mut visible = Array3::<f64>::zeros((3, h, w));
    for c in 0..3 {
        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.random::<f64>() * 2.0 - 1.0,             // amplitude
                    rng.random::<f64>() * 3.0 / w.max(1) as f64, // fx (cycles/px)
                    rng.random::<f64>() * 3.0 / h.max(1) as f64, // fy
                    rng.random::<f64>() * std::f64::consts::TAU, // phase
                )
            })
            .collect();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut plane = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for &(a, fx, fy, ph) in &waves {
                    v += a * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + ph).cos();
                }
                lo = lo.min(v);
                hi = hi.max(v);
                plane[[y, x]] = v;
            }
        }
        let span = (hi - lo).max(1e-12);
        for y in 0..h {
            for x in 0..w {
                visible[[c, y, x]] = 0.05 + 0.9 * (plane[[y, x]] - lo) / span;
            }
        }
    }
    let visible = ImageBuf::new(visible, (0.0, 1.0));

    // Infrared: inverted luminance ...
    let lum = visible.luminance()?;
    let mut ir = lum.mapv(|v| 1.0 - v);
    // ... optionally blurred ...
    if recipe.blur_radius > 0.0 {
        ir = gaussian_blur(&ir, recipe.blur_radius);
    }
    // ... plus seeded Gaussian hotspots, which double as detection objects.
    let mut labels = Vec::new();
    for k in 0..recipe.hotspot_count {
        let cx = rng.random::<f64>() * w as f64;
        let cy = rng.random::<f64>() * h as f64;
        let sigma = 1.5 + rng.random::<f64>() * (w.min(h) as f64 / 8.0 - 1.5).max(0.5);
        let amp = 0.5 + 0.5 * rng.random::<f64>();
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                ir[[y, x]] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        // Bounding box over the 3-sigma disk, clipped to the image.
        let x0 = ((cx - 3.0 * sigma) / w as f64).max(0.0);
        let x1 = ((cx + 3.0 * sigma) / w as f64).min(1.0);
        let y0 = ((cy - 3.0 * sigma) / h as f64).max(0.0);
        let y1 = ((cy + 3.0 * sigma) / h as f64).min(1.0);
        if x1 > x0 && y1 > y0 {
            labels.push(DetectionRecord {
                image_id: String::new(),
                class_id: (k % 3) as u32,
                cx: 0.5 * (x0 + x1),
                cy: 0.5 * (y0 + y1),
                w: x1 - x0,
                h: y1 - y0,
                score: None,
            });
        }
    }
    let ir = ir.mapv(|v| v.clamp(0.0, 1.0));
    let (ih, iw) = ir.dim();
    let infrared = ImageBuf::new(ir.into_shape_with_order((1, ih, iw)).unwrap(), (0.0, 1.0));

    Ok(PairedSample {
        id: format!("synth_{:05}", recipe.seed),
        visible,
        infrared,
        labels: Some(labels),
    })
}

/// Separable Gaussian blur with reflect edges; sigma in pixels.
fn gaussian_blur(plane: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in kernel.iter_mut() {
        *v /= sum;
    }
    let (h, w) = plane.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = reflect_index(x as isize + ki as isize - radius, w);
                acc += kv * plane[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = reflect_index(y as isize + ki as isize - radius, h);
                acc += kv * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Write `count` synthetic pairs (plus labels and a manifest) in the dataset
/// layout. Recipes differ only in their seed: `base.seed + index`.
pub fn write_synthetic_dataset(
    base: &SynthesisRecipe,
    count: usize,
    split: Split,
    root: &Path,
) -> Result<Vec<String>> {
    for sub in ["visible", "infrared", "labels"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let recipe = SynthesisRecipe {
            seed: base.seed + i as u64,
            ..base.clone()
        };
        let mut pair = synthesize_pair(&recipe)?;
        let id = format!("synth_{i:05}");
        pair.id = id.clone();
        save_image(&pair.visible, &root.join("visible").join(format!("{id}.png")))?;
        save_image(&pair.infrared, &root.join("infrared").join(format!("{id}.png")))?;
        let labels = pair.labels.as_deref().unwrap_or(&[]);
        crate::metrics::write_label_file(&root.join("labels").join(format!("{id}.txt")), labels)?;
        ids.push(id);
    }
    let split_key = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let mut splits = BTreeMap::new();
    splits.insert(split_key.to_string(), ids.clone());
    let mfile = ManifestFile { splits };
    let mpath = root.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&mfile).expect("manifest serializes");
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(ids)
}

/// Result of a detection-dataset export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportManifest {
    pub exported: usize,
    pub skipped_missing_labels: Vec<String>,
}

/// Translate every labeled sample of `dataset` and write the detector
/// training layout: `out/{images,labels}/` plus a manifest with counts.
/// Label files are copied byte-for-byte (translation is pixel-aligned).
/// Samples without a label file are skipped with a note in the manifest.
pub fn export_detection_dataset(
    dataset: &Dataset,
    mut translate: impl FnMut(&ImageBuf) -> Result<ImageBuf>,
    out_root: &Path,
) -> Result<ExportManifest> {
    let images_dir = out_root.join("images");
    let labels_dir = out_root.join("labels");
    for d in [&images_dir, &labels_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut exported = 0usize;
    let mut skipped = Vec::new();
    for i in 0..dataset.len() {
        let id = dataset.ids()[i].clone();
        let label_src = dataset.label_path(&id);
        if !label_src.is_file() {
            skipped.push(id);
            continue;
        }
        let sample = dataset.sample(i)?;
        let source = sample.source(dataset.direction());
        let translated = translate(source)?;
        save_image(&translated, &images_dir.join(format!("{id}.png")))?;
        let label_dst = labels_dir.join(format!("{id}.txt"));
        fs::copy(&label_src, &label_dst).map_err(|e| Error::io(&label_dst, e))?;
        exported += 1;
    }
    let manifest = ExportManifest {
        exported,
        skipped_missing_labels: skipped,
    };
    let mpath = out_root.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}
