//! Synthetic segmentation data and its on-disk format.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! images/00000.ppm   P6, 8-bit RGB
//! labels/00000.pgm   P5, one class id per pixel, 255 = ignore
//! ```
//!
//! Every sample draws from its own RNG stream, so a sample's bytes depend only
//! on the generator seed, its index and the generator parameters.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pnm::Raster;
use crate::rng;
use crate::tensor::{Shape, Tensor};
use crate::IGNORE_LABEL;

pub const MANIFEST_VERSION: u32 = 1;

/// Class ids on an `h × w` grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<LabelMap> {
        if data.len() != h * w {
            return Err(invalid!("label map {h}x{w} with {} values", data.len()));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }
}

/// One image (1×3×H×W, values in [0, 1]) and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    pub label: LabelMap,
}

impl SegSample {
    pub fn new(image: Tensor, label: LabelMap) -> Result<SegSample> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 || s.h != label.h || s.w != label.w {
            return Err(invalid!(
                "image {s} does not match {}x{} label map",
                label.h,
                label.w
            ));
        }
        Ok(SegSample { image, label })
    }
}

/// Shape and appearance parameters of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub polygons: [usize; 2],
    /// Polygon radius as a fraction of the image size.
    pub polygon_radius: [f64; 2],
    pub discs: [usize; 2],
    /// Disc diameter in pixels.
    pub disc_diameter: [f64; 2],
    pub bars: [usize; 2],
    /// Bar width in pixels.
    pub bar_width: [f64; 2],
    /// Bar length as a fraction of the image size.
    pub bar_length: [f64; 2],
    pub noise_sigma: f64,
    /// Peak-to-peak amplitude of the linear illumination ramp.
    pub illumination: f64,
    /// Per-sample, per-class jitter of the base colour.
    pub color_jitter: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            polygons: [1, 3],
            polygon_radius: [0.2, 0.4],
            discs: [1, 4],
            disc_diameter: [3.0, 8.0],
            bars: [1, 3],
            bar_width: [1.0, 2.0],
            bar_length: [0.4, 0.9],
            noise_sigma: 0.05,
            illumination: 0.2,
            color_jitter: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub size: usize,
    pub num_classes: usize,
    /// Trailing fraction of samples assigned to the validation split.
    pub val_fraction: f64,
    pub spec: GenSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 42,
            n_samples: 250,
            size: 64,
            num_classes: 5,
            val_fraction: 0.2,
            spec: GenSpec::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.size == 0 || self.size % 32 != 0 {
            errs.push(format!("data.size must be a positive multiple of 32 (got {})", self.size));
        }
        if !(2..=IGNORE_LABEL as usize).contains(&self.num_classes) {
            errs.push(format!("data.num_classes must be in 2..=255 (got {})", self.num_classes));
        }
        if self.n_samples == 0 {
            errs.push("data.n_samples must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            errs.push(format!("data.val_fraction must be in [0, 1) (got {})", self.val_fraction));
        }
        let s = &self.spec;
        for (name, r) in [("polygons", s.polygons), ("discs", s.discs), ("bars", s.bars)] {
            if r[0] > r[1] {
                errs.push(format!("data.spec.{name} range is empty: {r:?}"));
            }
        }
        for (name, r) in [
            ("polygon_radius", s.polygon_radius),
            ("disc_diameter", s.disc_diameter),
            ("bar_width", s.bar_width),
            ("bar_length", s.bar_length),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                errs.push(format!("data.spec.{name} must satisfy 0 < min <= max: {r:?}"));
            }
        }
        if s.noise_sigma < 0.0 || s.illumination < 0.0 || s.color_jitter < 0.0 {
            errs.push("data.spec noise, illumination and jitter must be non-negative".into());
        }
        errs
    }

    pub fn n_val(&self) -> usize {
        (self.n_samples as f64 * self.val_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub sample_count: usize,
    pub height: usize,
    pub width: usize,
    pub splits: Splits,
    pub generator: GenConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Region,
    Disc,
    Bar,
}

/// Non-background classes cycle through region, disc and bar.
fn kind_of(class: usize) -> Kind {
    match (class - 1) % 3 {
        0 => Kind::Region,
        1 => Kind::Disc,
        _ => Kind::Bar,
    }
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|c| match c {
            0 => "background".to_string(),
            _ => match kind_of(c) {
                Kind::Region => format!("region{c}"),
                Kind::Disc => format!("disc{c}"),
                Kind::Bar => format!("bar{c}"),
            },
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Base colour of each class in [0, 1]; the background is a mid gray.
pub fn base_colors(num_classes: usize) -> Vec<[f64; 3]> {
    (0..num_classes)
        .map(|c| {
            if c == 0 {
                [0.45, 0.45, 0.45]
            } else {
                let hue = 360.0 * (c - 1) as f64 / (num_classes - 1) as f64;
                hsv_to_rgb(hue, 0.65, 0.8)
            }
        })
        .collect()
}

/// 8-bit display palette matching the generator's class colours.
pub fn palette(num_classes: usize) -> Vec<[u8; 3]> {
    base_colors(num_classes)
        .iter()
        .map(|c| c.map(|v| (v * 255.0).round() as u8))
        .collect()
}

fn range_usize(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
    rng.gen_range(r[0]..=r[1])
}

fn range_f64(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Even-odd point-in-polygon test.
fn inside_polygon(px: f64, py: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Paint every pixel whose centre satisfies `hit` with `class`.
fn paint(label: &mut [u8], size: usize, class: u8, hit: impl Fn(f64, f64) -> bool) {
    for y in 0..size {
        for x in 0..size {
            if hit(x as f64 + 0.5, y as f64 + 0.5) {
                label[y * size + x] = class;
            }
        }
    }
}

/// Draw shape counts for one kind so that each of its classes gets at least
/// one instance; classes are assigned round-robin from a random offset.
fn assign(rng: &mut ChaCha8Rng, classes: &[usize], count: [usize; 2]) -> Vec<u8> {
    if classes.is_empty() {
        return Vec::new();
    }
    let n = range_usize(rng, count).max(classes.len());
    let offset = rng.gen_range(0..classes.len());
    (0..n).map(|i| classes[(offset + i) % classes.len()] as u8).collect()
}

/// Render the label map of one sample.
fn render_label(rng: &mut ChaCha8Rng, size: usize, num_classes: usize, spec: &GenSpec) -> Vec<u8> {
    let s = size as f64;
    let mut label = vec![0u8; size * size];
    let of_kind = |k: Kind| (1..num_classes).filter(|&c| kind_of(c) == k).collect::<Vec<_>>();

    for class in assign(rng, &of_kind(Kind::Region), spec.polygons) {
        let r = range_f64(rng, spec.polygon_radius) * s;
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let n = rng.gen_range(3..=6);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        angles.sort_by(f64::total_cmp);
        let verts: Vec<(f64, f64)> = angles
            .iter()
            .map(|&a| {
                let rr = r * rng.gen_range(0.6..1.0);
                (cx + rr * a.cos(), cy + rr * a.sin())
            })
            .collect();
        paint(&mut label, size, class, |x, y| inside_polygon(x, y, &verts));
    }
    for class in assign(rng, &of_kind(Kind::Disc), spec.discs) {
        let rad = range_f64(rng, spec.disc_diameter) / 2.0;
        let (cx, cy) = (rng.gen_range(rad..s - rad), rng.gen_range(rad..s - rad));
        paint(&mut label, size, class, |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= rad * rad);
    }
    for class in assign(rng, &of_kind(Kind::Bar), spec.bars) {
        let half = range_f64(rng, spec.bar_width) / 2.0;
        let len = range_f64(rng, spec.bar_length) * s;
        let a = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let theta = rng.gen_range(0.0..PI);
        let b = (a.0 + len * theta.cos(), a.1 + len * theta.sin());
        paint(&mut label, size, class, |x, y| segment_distance(x, y, a, b) <= half);
    }
    label
}

/// Render one sample from its own RNG stream.
pub fn render_sample(cfg: &GenConfig, index: usize) -> Result<SegSample> {
    let size = cfg.size;
    let mut rng = rng::stream(cfg.seed, &format!("data.sample{index}"));
    let label = render_label(&mut rng, size, cfg.num_classes, &cfg.spec);

    let spec = &cfg.spec;
    let colors: Vec<[f64; 3]> = base_colors(cfg.num_classes)
        .into_iter()
        .map(|c| c.map(|v| v + rng.gen_range(-1.0..=1.0) * spec.color_jitter))
        .collect();
    let theta = rng.gen_range(0.0..2.0 * PI);
    let (gx, gy) = (theta.cos(), theta.sin());
    let normal = rand_distr::Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| invalid!("noise sigma: {e}"))?;
    let plane = size * size;
    let mut img = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let u = ((x as f64 + 0.5) / size as f64 - 0.5) * gx + ((y as f64 + 0.5) / size as f64 - 0.5) * gy;
            let light = spec.illumination * u;
            let base = colors[label[p] as usize];
            for c in 0..3 {
                let noise = if spec.noise_sigma > 0.0 {
                    rng.sample(normal)
                } else {
                    0.0
                };
                img[c * plane + p] = quantize(base[c] + light + noise);
            }
        }
    }
    SegSample::new(
        Tensor::new(Shape::new(1, 3, size, size), img)?,
        LabelMap::new(size, size, label)?,
    )
}

/// Snap to the 8-bit grid the image is stored on, so rendered and loaded
/// samples are identical.
fn quantize(v: f64) -> f64 {
    to_byte(v) as f64 / 255.0
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_to_raster(image: &Tensor) -> Result<Raster> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(invalid!("expected a 1x3xHxW image, got {s}"));
    }
    let plane = s.plane();
    let d = image.data();
    let bytes = (0..plane)
        .flat_map(|p| (0..3).map(move |c| to_byte(d[c * plane + p])))
        .collect();
    Raster::rgb(s.w, s.h, bytes)
}

pub fn raster_to_image(r: &Raster) -> Result<Tensor> {
    if r.channels != 3 {
        return Err(invalid!("expected an RGB raster"));
    }
    let plane = r.width * r.height;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = r.data[p * 3 + c] as f64 / 255.0;
        }
    }
    Tensor::new(Shape::new(1, 3, r.height, r.width), data)
}

fn image_path(root: &Path, i: usize) -> PathBuf {
    root.join("images").join(format!("{i:05}.ppm"))
}

fn label_path(root: &Path, i: usize) -> PathBuf {
    root.join("labels").join(format!("{i:05}.pgm"))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Render and write a dataset. Returns its manifest.
pub fn gen_synthetic(out: &Path, cfg: &GenConfig) -> Result<Manifest> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    create_dir(&out.join("images"))?;
    create_dir(&out.join("labels"))?;
    for i in 0..cfg.n_samples {
        let s = render_sample(cfg, i)?;
        image_to_raster(&s.image)?.write(&image_path(out, i))?;
        Raster::gray(cfg.size, cfg.size, s.label.data)?.write(&label_path(out, i))?;
    }
    let n_train = cfg.n_samples - cfg.n_val();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        num_classes: cfg.num_classes,
        class_names: class_names(cfg.num_classes),
        sample_count: cfg.n_samples,
        height: cfg.size,
        width: cfg.size,
        splits: Splits {
            train: (0..n_train).collect(),
            val: (n_train..cfg.n_samples).collect(),
        },
        generator: cfg.clone(),
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset on disk. Samples are read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.sample_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn get(&self, i: usize) -> Result<SegSample> {
        if i >= self.len() {
            return Err(invalid!("sample {i} out of range ({} samples)", self.len()));
        }
        let (h, w) = (self.manifest.height, self.manifest.width);
        let ip = image_path(&self.root, i);
        let img = Raster::read(&ip)?;
        if img.channels != 3 || (img.height, img.width) != (h, w) {
            return Err(Error::format(&ip, format!("expected a {w}x{h} RGB image")));
        }
        let lp = label_path(&self.root, i);
        let lab = Raster::read(&lp)?;
        if lab.channels != 1 || (lab.height, lab.width) != (h, w) {
            return Err(Error::format(&lp, format!("expected a {w}x{h} grayscale label map")));
        }
        let c = self.manifest.num_classes;
        if let Some(bad) = lab.data.iter().find(|&&v| v as usize >= c && v != IGNORE_LABEL) {
            return Err(Error::format(&lp, format!("label {bad} out of range for {c} classes")));
        }
        SegSample::new(raster_to_image(&img)?, LabelMap::new(h, w, lab.data)?)
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.manifest.splits.train),
            "val" => Ok(&self.manifest.splits.val),
            _ => Err(invalid!("unknown split {name:?}")),
        }
    }
}

/// Open a dataset and check that the manifest is consistent and every listed
/// file exists. Pixel data is read lazily by [`Dataset::get`].
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mpath = root.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let bad = |msg: String| Err(Error::format(&mpath, msg));
    if manifest.version != MANIFEST_VERSION {
        return bad(format!("unsupported manifest version {}", manifest.version));
    }
    if manifest.class_names.len() != manifest.num_classes {
        return bad("class_names length differs from num_classes".into());
    }
    let mut seen = vec![false; manifest.sample_count];
    for &i in manifest.splits.train.iter().chain(&manifest.splits.val) {
        match seen.get_mut(i) {
            Some(s) if !*s => *s = true,
            Some(_) => return bad(format!("sample {i} listed in more than one split")),
            None => return bad(format!("split index {i} out of range")),
        }
    }
    if seen.iter().any(|s| !s) {
        return bad("splits do not cover every sample".into());
    }
    for i in 0..manifest.sample_count {
        for p in [image_path(root, i), label_path(root, i)] {
            if !p.is_file() {
                return Err(Error::format(&p, "listed in manifest but missing"));
            }
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> GenConfig {
        GenConfig {
            n_samples: n,
            size: 32,
            ..GenConfig::default()
        }
    }

    #[test]
    fn ten_samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(10);
        gen_synthetic(dir.path(), &cfg).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.manifest.splits.val, vec![8, 9]);
        for i in 0..10 {
            let s = ds.get(i).unwrap();
            assert!(s.label.data.iter().all(|&v| v < 5));
            assert_eq!(s, render_sample(&cfg, i).unwrap());
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        gen_synthetic(a.path(), &small(3)).unwrap();
        gen_synthetic(b.path(), &small(3)).unwrap();
        for rel in ["manifest.json", "images/00002.ppm", "labels/00001.pgm"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
    }

    #[test]
    fn truncated_label_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        gen_synthetic(dir.path(), &small(2)).unwrap();
        let lp = label_path(dir.path(), 1);
        let mut bytes = fs::read(&lp).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&lp, bytes).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert!(ds.get(0).is_ok());
        let err = ds.get(1).unwrap_err().to_string();
        assert!(err.contains("00001.pgm"), "{err}");
    }

    #[test]
    fn out_of_range_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        gen_synthetic(dir.path(), &small(1)).unwrap();
        let lp = label_path(dir.path(), 0);
        let mut r = Raster::read(&lp).unwrap();
        r.data[3] = 7;
        r.write(&lp).unwrap();
        let err = load_dataset(dir.path()).unwrap().get(0).unwrap_err().to_string();
        assert!(err.contains("label 7"), "{err}");
    }

    #[test]
    fn missing_file_detected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        gen_synthetic(dir.path(), &small(2)).unwrap();
        fs::remove_file(image_path(dir.path(), 1)).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("00001.ppm"), "{err}");
    }

    #[test]
    fn invalid_config_lists_every_problem() {
        let cfg = GenConfig {
            size: 40,
            num_classes: 1,
            n_samples: 0,
            ..GenConfig::default()
        };
        assert_eq!(cfg.validate().len(), 3);
    }

    #[test]
    fn polygon_test_on_unit_square() {
        let sq = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        assert!(inside_polygon(0.5, 0.5, &sq));
        assert!(!inside_polygon(1.5, 0.5, &sq));
    }

    #[test]
    fn segment_distance_cases() {
        assert_eq!(segment_distance(1.0, 1.0, (0.0, 0.0), (2.0, 0.0)), 1.0);
        assert_eq!(segment_distance(3.0, 0.0, (0.0, 0.0), (2.0, 0.0)), 1.0);
    }
}
