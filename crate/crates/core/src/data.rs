//! Datasets: image I/O, directory manifests, class balancing, augmentation,
//! the synthetic quadrant corpus and confusion-matrix metrics.
//!
//! Class ids follow the confusion-matrix axis order
//! `0: correct, 1: nose, 2: nose_mouth, 3: chin`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 4] = ["correct", "nose", "nose_mouth", "chin"];
pub const IMAGE_SIZE: usize = 32;
const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "ppm", "pnm"];

pub fn class_from_name(name: &str) -> Option<usize> {
    let n = name.to_ascii_lowercase().replace(['-', '+', ' '], "_");
    match n.as_str() {
        "correct" | "cmfd" | "0" => Some(0),
        "nose" | "imfd_nose" | "1" => Some(1),
        "nose_mouth" | "n_m" | "imfd_nose_mouth" | "2" => Some(2),
        "chin" | "imfd_chin" | "3" => Some(3),
        _ => None,
    }
}

/// SplitMix64 over `seed` and `parts`; used to give every record its own
/// stream so results don't depend on worker scheduling.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// Maps an 8-bit pixel to the network's `[-1, 1)` input range.
#[inline]
pub fn pixel_to_input(p: u8) -> f64 {
    (p as f64 - 128.0) / 128.0
}

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::LengthMismatch {
                left: width * height * 3,
                right: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Decodes PNG/JPEG/PPM and resizes to 32x32 RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        let rgb = if rgb.width() as usize == IMAGE_SIZE && rgb.height() as usize == IMAGE_SIZE {
            rgb
        } else {
            image::imageops::resize(
                &rgb,
                IMAGE_SIZE as u32,
                IMAGE_SIZE as u32,
                image::imageops::FilterType::Triangle,
            )
        };
        Self {
            width: IMAGE_SIZE,
            height: IMAGE_SIZE,
            data: rgb.into_raw(),
        }
    }

    pub fn to_rgb(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer matches geometry")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Images with class labels, in memory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Loads the records of one split (or all records when `split` is
    /// `None`).
    pub fn from_manifest(m: &Manifest, split: Option<Split>) -> Result<Self> {
        let mut out = Dataset::default();
        for r in m.records.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
            out.images.push(Image::load(&r.path)?);
            out.labels.push(r.label);
        }
        Ok(out)
    }
}

/// Top-left corner of quadrant `k` (0 top-left, 1 top-right, 2 bottom-left,
/// 3 bottom-right) in a `size x size` image.
pub fn quadrant_origin(k: usize, size: usize) -> (usize, usize) {
    let half = size / 2;
    ((k % 2) * half, (k / 2) * half)
}

/// Synthetic 4-class corpus: class `k` carries a high-contrast checkerboard
/// patch somewhere inside quadrant `k` over a noisy gray background.
pub fn synth_quadrant_dataset(n_per_class: usize, seed: u64) -> Dataset {
    let mut out = Dataset::default();
    for class in 0..4 {
        for i in 0..n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[class as u64, i as u64]));
            out.images.push(quadrant_image(class, &mut rng));
            out.labels.push(class);
        }
    }
    out
}

fn quadrant_image(class: usize, rng: &mut ChaCha8Rng) -> Image {
    let s = IMAGE_SIZE;
    let base: f64 = rng.random_range(90.0..170.0);
    let tint: [f64; 3] = [
        rng.random_range(-20.0..20.0),
        rng.random_range(-20.0..20.0),
        rng.random_range(-20.0..20.0),
    ];
    let mut data = vec![0u8; s * s * 3];
    for (i, v) in data.iter_mut().enumerate() {
        let n: f64 = rng.random_range(-30.0..30.0);
        *v = (base + tint[i % 3] + n).round().clamp(0.0, 255.0) as u8;
    }
    let size: usize = rng.random_range(8..=11);
    let cell: usize = rng.random_range(1..=2);
    let (qx, qy) = quadrant_origin(class, s);
    let x0 = qx + rng.random_range(1..=(s / 2 - size - 1));
    let y0 = qy + rng.random_range(1..=(s / 2 - size - 1));
    let (lo, hi) = (rng.random_range(0.0..40.0), rng.random_range(215.0..255.0));
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            let on = ((x - x0) / cell + (y - y0) / cell).is_multiple_of(2);
            let v = if on { hi } else { lo };
            let i = (y * s + x) * 3;
            for c in 0..3 {
                data[i + c] = (v + 0.5 * tint[c]).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Image {
        width: s,
        height: s,
        data,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Seed of the last sampling step, if any.
    pub seed: Option<u64>,
}

/// Result of scanning a dataset directory.
#[derive(Clone, Debug, Default)]
pub struct ManifestScan {
    pub manifest: Manifest,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn class_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for r in &self.records {
            c[r.label] += 1;
        }
        c
    }

    /// Writes `path,label,split` CSV.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["path", "label", "split"])?;
        for r in &self.records {
            wr.write_record([
                r.path.to_string_lossy().as_ref(),
                &r.label.to_string(),
                r.split.as_str(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<manifest>", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut records = Vec::new();
        for row in rd.records() {
            let row = row?;
            let field = |i: usize| row.get(i).unwrap_or("").trim();
            let label: usize = field(1)
                .parse()
                .ok()
                .filter(|&l| l < 4)
                .ok_or_else(|| Error::Dataset(format!("bad label `{}`", field(1))))?;
            let split = Split::parse(field(2))
                .ok_or_else(|| Error::Dataset(format!("bad split `{}`", field(2))))?;
            records.push(ManifestRecord {
                path: PathBuf::from(field(0)),
                label,
                split,
            });
        }
        let m = Self { records, seed: None };
        m.check_duplicates()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f)
    }

    fn check_duplicates(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            let key = std::fs::canonicalize(&r.path).unwrap_or_else(|_| r.path.clone());
            if !seen.insert((r.split, key)) {
                return Err(Error::Dataset(format!(
                    "duplicate path {} in split {}",
                    r.path.display(),
                    r.split
                )));
            }
        }
        Ok(())
    }
}

/// Scans `root/<class>/*` (or `root/<split>/<class>/*`) into a manifest
/// sorted by split, then path. Non-image and unreadable files are skipped
/// with a warning.
pub fn build_manifest(root: &Path) -> Result<ManifestScan> {
    let mut scan = ManifestScan::default();
    let top = sorted_dirs(root)?;
    let split_layout = !top.is_empty()
        && top
            .iter()
            .all(|d| d.file_name().and_then(|n| n.to_str()).and_then(Split::parse).is_some());
    let groups: Vec<(Split, PathBuf)> = if split_layout {
        let mut g = Vec::new();
        for d in top {
            let split = Split::parse(d.file_name().unwrap().to_str().unwrap()).unwrap();
            g.extend(sorted_dirs(&d)?.into_iter().map(|c| (split, c)));
        }
        g
    } else {
        top.into_iter().map(|c| (Split::Train, c)).collect()
    };
    for (split, dir) in groups {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let label = class_from_name(name)
            .ok_or_else(|| Error::Dataset(format!("unknown class directory `{}`", dir.display())))?;
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = match entry {
                Ok(e) => e.path(),
                Err(e) => {
                    scan.warnings.push(format!("{}: {e}", dir.display()));
                    continue;
                }
            };
            if path.is_dir() {
                continue;
            }
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| e.to_ascii_lowercase())
                .unwrap_or_default();
            if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                scan.warnings.push(format!("skipping non-image {}", path.display()));
                continue;
            }
            if let Err(e) = std::fs::File::open(&path) {
                scan.warnings.push(format!("skipping unreadable {}: {e}", path.display()));
                continue;
            }
            scan.manifest.records.push(ManifestRecord { path, label, split });
        }
    }
    scan.manifest
        .records
        .sort_by(|a, b| (a.split, &a.path).cmp(&(b.split, &b.path)));
    scan.manifest.check_duplicates()?;
    if scan.manifest.records.is_empty() {
        scan.warnings.push(format!("no images found under {}", root.display()));
    }
    Ok(scan)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

/// Downsamples every class to the smallest class count (sampling without
/// replacement), then shuffles. Deterministic in `seed`.
pub fn balance(m: &Manifest, seed: u64) -> Result<Manifest> {
    let mut by_class: BTreeMap<usize, Vec<&ManifestRecord>> = BTreeMap::new();
    for r in &m.records {
        by_class.entry(r.label).or_default().push(r);
    }
    for class in 0..4 {
        if by_class.get(&class).is_none_or(|v| v.is_empty()) {
            return Err(Error::EmptyClass(class));
        }
    }
    let min = by_class.values().map(Vec::len).min().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records: Vec<ManifestRecord> = Vec::with_capacity(4 * min);
    for recs in by_class.values() {
        let mut picked: Vec<&ManifestRecord> = recs.choose_multiple(&mut rng, min).copied().collect();
        picked.sort_by(|a, b| a.path.cmp(&b.path));
        records.extend(picked.into_iter().cloned());
    }
    records.shuffle(&mut rng);
    Ok(Manifest {
        records,
        seed: Some(seed),
    })
}

/// Ranges of the random augmentation. Each photometric/geometric op is
/// applied with probability `op_probability`; flips with `flip_probability`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub contrast: (f64, f64),
    pub brightness: f64,
    pub noise_sigma: f64,
    pub flip_probability: f64,
    pub max_rotation_deg: f64,
    pub op_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            contrast: (0.8, 1.2),
            brightness: 0.2,
            noise_sigma: 0.02,
            flip_probability: 0.5,
            max_rotation_deg: 15.0,
            op_probability: 0.5,
        }
    }
}

/// One concrete draw of the augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub contrast: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub flip: bool,
    pub rotation_deg: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            contrast: 1.0,
            brightness: 0.0,
            noise_sigma: 0.0,
            noise_seed: 0,
            flip: false,
            rotation_deg: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.contrast == 1.0
            && self.brightness == 0.0
            && self.noise_sigma == 0.0
            && !self.flip
            && self.rotation_deg == 0.0
    }

    pub fn draw(seed: u64, cfg: &AugmentConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::identity();
        let on = |rng: &mut ChaCha8Rng| rng.random_bool(cfg.op_probability.clamp(0.0, 1.0));
        if on(&mut rng) {
            p.contrast = rng.random_range(cfg.contrast.0..=cfg.contrast.1);
        }
        if on(&mut rng) {
            p.brightness = rng.random_range(-cfg.brightness..=cfg.brightness);
        }
        if on(&mut rng) {
            p.noise_sigma = cfg.noise_sigma;
            p.noise_seed = rng.random();
        }
        p.flip = rng.random_bool(cfg.flip_probability.clamp(0.0, 1.0));
        if on(&mut rng) {
            p.rotation_deg = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        }
        p
    }
}

pub fn augment(image: &Image, seed: u64) -> Image {
    augment_with_config(image, seed, &AugmentConfig::default())
}

pub fn augment_with_config(image: &Image, seed: u64, cfg: &AugmentConfig) -> Image {
    apply_augment(image, &AugmentParams::draw(seed, cfg))
}

/// Applies rotate, flip, contrast, brightness and noise in that order, then
/// clamps and re-quantizes to 8 bits.
pub fn apply_augment(image: &Image, p: &AugmentParams) -> Image {
    if p.is_identity() {
        return image.clone();
    }
    let (w, h) = (image.width, image.height);
    let mut v: Vec<f64> = image.data.iter().map(|&x| x as f64 / 255.0).collect();
    if p.rotation_deg != 0.0 {
        v = rotate(&v, w, h, p.rotation_deg.to_radians());
    }
    if p.flip {
        for y in 0..h {
            for x in 0..w / 2 {
                for c in 0..3 {
                    v.swap((y * w + x) * 3 + c, (y * w + (w - 1 - x)) * 3 + c);
                }
            }
        }
    }
    if p.contrast != 1.0 {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x = (*x - mean) * p.contrast + mean);
    }
    if p.brightness != 0.0 {
        v.iter_mut().for_each(|x| *x += p.brightness);
    }
    if p.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(p.noise_seed);
        let normal = Normal::new(0.0, p.noise_sigma).expect("positive sigma");
        v.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
    }
    let data = v
        .iter()
        .map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Image {
        width: w,
        height: h,
        data,
    }
}

// Bilinear rotation about the image center with edge clamping.
fn rotate(v: &[f64], w: usize, h: usize, angle: f64) -> Vec<f64> {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    let mut out = vec![0.0; v.len()];
    let at = |x: isize, y: isize, ch: usize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        v[(y * w + x) * 3 + ch]
    };
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // Inverse mapping: source = R(-angle) * destination.
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..3 {
                let top = at(x0, y0, ch) * (1.0 - fx) + at(x0 + 1, y0, ch) * fx;
                let bot = at(x0, y0 + 1, ch) * (1.0 - fx) + at(x0 + 1, y0 + 1, ch) * fx;
                out[(y * w + x) * 3 + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self { counts: rows })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    pub fn recall(&self, class: usize) -> Result<f64> {
        match self.row_sum(class) {
            0 => Err(Error::EmptyClass(class)),
            n => Ok(self.counts[class][class] as f64 / n as f64),
        }
    }

    pub fn precision(&self, class: usize) -> Option<f64> {
        match self.col_sum(class) {
            0 => None,
            n => Some(self.counts[class][class] as f64 / n as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub total: u64,
    pub accuracy: f64,
    /// `None` where the class has no samples.
    pub recall: Vec<Option<f64>>,
    /// `None` where the class was never predicted.
    pub precision: Vec<Option<f64>>,
}

pub fn metrics_from_confusion(m: &ConfusionMatrix) -> Result<Metrics> {
    let total = m.total();
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(Metrics {
        total,
        accuracy: m.trace() as f64 / total as f64,
        recall: (0..m.classes()).map(|c| m.recall(c).ok()).collect(),
        precision: (0..m.classes()).map(|c| m.precision(c)).collect(),
    })
}

/// JSON document written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub classes: Vec<String>,
    pub matrix: ConfusionMatrix,
    pub metrics: Metrics,
}

impl ConfusionReport {
    pub fn new(matrix: ConfusionMatrix) -> Result<Self> {
        let metrics = metrics_from_confusion(&matrix)?;
        Ok(Self {
            classes: (0..matrix.classes())
                .map(|i| CLASS_NAMES.get(i).map_or_else(|| i.to_string(), |s| s.to_string()))
                .collect(),
            matrix,
            metrics,
        })
    }
}
