//! Triangles & circles non-linear mixture dataset.
//!
//! Each sample draws one triangle and one circle (binary images rendered at
//! twice the target size, then downsampled with an antialiasing bilinear
//! filter) and mixes them as
//!
//! ```text
//! mixed = Scaled( Scaled(sigmoid(alpha/2 * (tri + circ))) * kernel )
//! ```
//!
//! where `*` is a same-size correlation with a distortion kernel that is
//! vertically flipped at random per sample, and `Scaled` is min-max scaling.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Execution};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid shape spec: {0}")]
    Shape(String),
    #[error("invalid resampling: {0}")]
    Resample(String),
    #[error("image dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("invalid mixing config: {0}")]
    Mixing(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("i/o error on {path}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Triangle,
    Circle,
}

pub const MIN_SCALE: f64 = 0.40;
pub const MAX_SCALE: f64 = 0.60;

/// Placement of one shape in unit image coordinates (x right, y down).
///
/// `scale` is the shape's width as a fraction of the image width: the circle
/// diameter, or the side of the upright equilateral triangle. The center is
/// the center of the shape's bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub center_x: f64,
    pub center_y: f64,
    pub scale: f64,
}

impl ShapeSpec {
    /// Half width and half height of the bounding box.
    pub fn half_extents(&self) -> (f64, f64) {
        match self.kind {
            ShapeKind::Circle => (self.scale / 2.0, self.scale / 2.0),
            ShapeKind::Triangle => (self.scale / 2.0, self.scale * 3f64.sqrt() / 4.0),
        }
    }

    pub fn fits(&self) -> bool {
        let (hx, hy) = self.half_extents();
        self.center_x - hx >= 0.0 && self.center_x + hx <= 1.0 && self.center_y - hy >= 0.0 && self.center_y + hy <= 1.0
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(MIN_SCALE..=MAX_SCALE).contains(&self.scale) {
            return Err(DataError::Shape(format!("scale {} outside [{MIN_SCALE}, {MAX_SCALE}]", self.scale)));
        }
        if !self.fits() {
            return Err(DataError::Shape(format!(
                "{:?} at ({}, {}) with scale {} exceeds the image bounds",
                self.kind, self.center_x, self.center_y, self.scale
            )));
        }
        Ok(())
    }

    /// Draw a shape with uniform scale and uniform position, re-drawing the
    /// position until the shape lies inside the image.
    pub fn sample(kind: ShapeKind, rng: &mut impl Rng) -> Self {
        let scale = rng.gen_range(MIN_SCALE..=MAX_SCALE);
        loop {
            let spec = ShapeSpec { kind, center_x: rng.gen::<f64>(), center_y: rng.gen::<f64>(), scale };
            if spec.fits() {
                return spec;
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self.kind {
            ShapeKind::Circle => {
                let r = self.scale / 2.0;
                let (dx, dy) = (x - self.center_x, y - self.center_y);
                dx * dx + dy * dy <= r * r
            }
            ShapeKind::Triangle => {
                let (hx, hy) = self.half_extents();
                let apex = (self.center_x, self.center_y - hy);
                let left = (self.center_x - hx, self.center_y + hy);
                let right = (self.center_x + hx, self.center_y + hy);
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let e1 = edge(apex, right);
                let e2 = edge(right, left);
                let e3 = edge(left, apex);
                (e1 >= 0.0 && e2 >= 0.0 && e3 >= 0.0) || (e1 <= 0.0 && e2 <= 0.0 && e3 <= 0.0)
            }
        }
    }
}

/// Square single-channel luminance image with values in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceImage {
    pub size: usize,
    pub pixels: Vec<f32>,
    pub role: ShapeKind,
}

impl SourceImage {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.size + col]
    }
}

/// Binary rendering: a pixel is lit when its center lies inside the shape.
pub fn render_shape(spec: &ShapeSpec, resolution: usize) -> Result<SourceImage, DataError> {
    if resolution < 8 {
        return Err(DataError::Shape(format!("resolution {resolution} below minimum of 8")));
    }
    spec.validate()?;
    let inv = 1.0 / resolution as f64;
    let mut pixels = vec![0.0f32; resolution * resolution];
    for row in 0..resolution {
        for col in 0..resolution {
            if spec.contains((col as f64 + 0.5) * inv, (row as f64 + 0.5) * inv) {
                pixels[row * resolution + col] = 1.0;
            }
        }
    }
    Ok(SourceImage { size: resolution, pixels, role: spec.kind })
}

/// Per-output-index contributing input indices and normalized weights of a
/// 1-D bilinear (triangle) filter, widened by the reduction factor.
fn resample_weights(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    let support = scale.max(1.0);
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(src);
            let mut w: Vec<f64> =
                (lo..hi).map(|k| (1.0 - ((k as f64 + 0.5 - center) / support).abs()).max(0.0)).collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            (lo, w)
        })
        .collect()
}

/// Separable antialiased bilinear reduction of a square image.
pub fn downsample_bilinear(img: &SourceImage, target: usize) -> Result<SourceImage, DataError> {
    if target == 0 || target > img.size {
        return Err(DataError::Resample(format!("cannot resample {}px to {}px", img.size, target)));
    }
    let n = img.size;
    let weights = resample_weights(n, target);
    // Horizontal pass: n rows x target cols.
    let mut tmp = vec![0.0f64; n * target];
    for row in 0..n {
        let line = &img.pixels[row * n..(row + 1) * n];
        for (o, (lo, w)) in weights.iter().enumerate() {
            tmp[row * target + o] = w.iter().enumerate().map(|(k, &wk)| wk * line[lo + k] as f64).sum();
        }
    }
    let mut pixels = vec![0.0f32; target * target];
    for col in 0..target {
        for (o, (lo, w)) in weights.iter().enumerate() {
            let v: f64 = w.iter().enumerate().map(|(k, &wk)| wk * tmp[(lo + k) * target + col]).sum();
            pixels[o * target + col] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(SourceImage { size: target, pixels, role: img.role })
}

/// `(x - min) / (max - min)`; a constant input maps to all zeros.
pub fn minmax_scale<T: Float>(x: &[T]) -> Vec<T> {
    let (lo, hi) = x.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if x.is_empty() || !(range > T::zero()) {
        return vec![T::zero(); x.len()];
    }
    x.iter().map(|&v| (v - lo) / range).collect()
}

/// Square correlation kernel with odd side length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn identity(size: usize) -> Self {
        let mut weights = vec![0.0; size * size];
        weights[(size / 2) * size + size / 2] = 1.0;
        Kernel { size, weights }
    }

    /// 7x7 kernel: equal-mass mix of an identity tap and a unit-variance
    /// Gaussian blob displaced by (+2, +2) pixels, normalized to sum 1.
    /// Correlating with it leaves a blurred echo of every edge offset toward
    /// the lower right.
    pub fn distortion() -> Self {
        let size = 7;
        let c = (size / 2) as f64;
        let (by, bx) = (c + 2.0, c + 2.0);
        let mut blob: Vec<f64> = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f64, (i % size) as f64);
                (-((y - by).powi(2) + (x - bx).powi(2)) / 2.0).exp()
            })
            .collect();
        let total: f64 = blob.iter().sum();
        blob.iter_mut().for_each(|v| *v /= total);
        let mut weights: Vec<f64> = blob.iter().map(|v| 0.5 * v).collect();
        weights[(size / 2) * size + size / 2] += 0.5;
        Kernel { size, weights }
    }

    pub fn flipped_vertically(&self) -> Self {
        let n = self.size;
        let weights = (0..n * n).map(|i| self.weights[(n - 1 - i / n) * n + i % n]).collect();
        Kernel { size: n, weights }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.size % 2 == 0 || self.weights.len() != self.size * self.size {
            return Err(DataError::Mixing(format!("kernel must be odd-sized and square (size {})", self.size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingConfig {
    /// Sharpness of the sigmoid non-linearity.
    pub alpha: f64,
    pub kernel: Kernel,
    pub flip_probability: f64,
    pub seed: u64,
}

impl Default for MixingConfig {
    fn default() -> Self {
        MixingConfig { alpha: 6.0, kernel: Kernel::distortion(), flip_probability: 0.5, seed: 0 }
    }
}

impl MixingConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(DataError::Mixing(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(DataError::Mixing(format!("flip probability {} outside [0, 1]", self.flip_probability)));
        }
        self.kernel.validate()
    }
}

/// One mixture and its ground-truth sources (triangle first, then circle).
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    pub mixture: Vec<f32>,
    pub sources: Vec<SourceImage>,
    pub seed: u64,
}

/// `Scaled(sigmoid(alpha/2 * (tri + circ)))`, the field before distortion.
pub fn sigmoid_field(tri: &SourceImage, circ: &SourceImage, alpha: f64) -> Result<Vec<f64>, DataError> {
    if tri.size != circ.size {
        return Err(DataError::Dimension(tri.size, circ.size));
    }
    let raw: Vec<f64> = tri
        .pixels
        .iter()
        .zip(&circ.pixels)
        .map(|(&a, &b)| 1.0 / (1.0 + (-(alpha / 2.0) * (a as f64 + b as f64)).exp()))
        .collect();
    Ok(minmax_scale(&raw))
}

/// Same-size zero-padded correlation of a square image with a square kernel.
pub fn correlate(img: &[f64], size: usize, kernel: &Kernel) -> Vec<f64> {
    let r = (kernel.size / 2) as isize;
    let n = size as isize;
    let mut out = vec![0.0; size * size];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for ky in -r..=r {
                let iy = y + ky;
                if iy < 0 || iy >= n {
                    continue;
                }
                for kx in -r..=r {
                    let ix = x + kx;
                    if ix < 0 || ix >= n {
                        continue;
                    }
                    acc += img[(iy * n + ix) as usize] * kernel.weights[((ky + r) * (2 * r + 1) + kx + r) as usize];
                }
            }
            out[(y * n + x) as usize] = acc;
        }
    }
    out
}

/// Mix with an explicit kernel orientation.
pub fn mix_with_kernel(tri: &SourceImage, circ: &SourceImage, alpha: f64, kernel: &Kernel) -> Result<Vec<f32>, DataError> {
    let field = sigmoid_field(tri, circ, alpha)?;
    let distorted = correlate(&field, tri.size, kernel);
    Ok(minmax_scale(&distorted).into_iter().map(|v| v as f32).collect())
}

/// Apply the mixing system; the kernel flip is drawn from `cfg.seed`.
pub fn mix(tri: &SourceImage, circ: &SourceImage, cfg: &MixingConfig) -> Result<MixtureSample, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let flip = rng.gen_bool(cfg.flip_probability);
    let kernel = if flip { cfg.kernel.flipped_vertically() } else { cfg.kernel.clone() };
    let mixture = mix_with_kernel(tri, circ, cfg.alpha, &kernel)?;
    Ok(MixtureSample { mixture, sources: vec![tri.clone(), circ.clone()], seed: cfg.seed })
}

/// Seed of sample `index` derived from the dataset seed (SplitMix64 finalizer).
pub fn sample_seed(dataset_seed: u64, index: u64) -> u64 {
    let mut z = dataset_seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate sample `index` of a dataset; a pure function of its arguments.
pub fn generate_sample(index: u64, image_size: usize, cfg: &MixingConfig) -> Result<MixtureSample, DataError> {
    let seed = sample_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let render = 2 * image_size;
    let tri_spec = ShapeSpec::sample(ShapeKind::Triangle, &mut rng);
    let circ_spec = ShapeSpec::sample(ShapeKind::Circle, &mut rng);
    let tri = downsample_bilinear(&render_shape(&tri_spec, render)?, image_size)?;
    let circ = downsample_bilinear(&render_shape(&circ_spec, render)?, image_size)?;
    let flip = rng.gen_bool(cfg.flip_probability);
    let kernel = if flip { cfg.kernel.flipped_vertically() } else { cfg.kernel.clone() };
    let mixture = mix_with_kernel(&tri, &circ, cfg.alpha, &kernel)?;
    Ok(MixtureSample { mixture, sources: vec![tri, circ], seed })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub image_size: usize,
    pub mixing: MixingConfig,
    pub split_fraction: f64,
    pub train: Vec<MixtureSample>,
    pub test: Vec<MixtureSample>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn train_count(n_pairs: usize, split_fraction: f64) -> usize {
    ((n_pairs as f64 * split_fraction).round() as usize).min(n_pairs)
}

pub fn generate_dataset(
    n_pairs: usize,
    image_size: usize,
    cfg: &MixingConfig,
    split_fraction: f64,
) -> Result<DatasetSplit, DataError> {
    generate_dataset_with(n_pairs, image_size, cfg, split_fraction, Execution::default())
}

/// Samples are generated independently (possibly in parallel) and assembled
/// in index order; the first `round(n * split)` form the training split.
pub fn generate_dataset_with(
    n_pairs: usize,
    image_size: usize,
    cfg: &MixingConfig,
    split_fraction: f64,
    exec: Execution,
) -> Result<DatasetSplit, DataError> {
    if n_pairs == 0 {
        return Err(DataError::Dataset("n_pairs must be at least 1".into()));
    }
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(DataError::Dataset(format!("split fraction {split_fraction} outside (0, 1)")));
    }
    if image_size < 4 {
        return Err(DataError::Dataset(format!("image size {image_size} too small")));
    }
    cfg.validate()?;
    let samples = par::map_indexed(exec, n_pairs, |i| generate_sample(i as u64, image_size, cfg));
    let mut samples = samples.into_iter().collect::<Result<Vec<_>, _>>()?;
    let test = samples.split_off(train_count(n_pairs, split_fraction));
    Ok(DatasetSplit { image_size, mixing: cfg.clone(), split_fraction, train: samples, test })
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitFiles {
    count: usize,
    mixtures: String,
    triangles: String,
    circles: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    image_size: usize,
    n_pairs: usize,
    split_fraction: f64,
    mixing: MixingConfig,
    train: SplitFiles,
    test: SplitFiles,
}

pub const DATASET_MANIFEST: &str = "manifest.json";

/// Write raw little-endian f32 values.
pub fn write_f32(path: &Path, values: impl IntoIterator<Item = f32>) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(io_err(path))?;
    if bytes.len() % 4 != 0 {
        return Err(DataError::Dataset(format!("{} is not a whole number of f32 values", path.display())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Directory layout: `manifest.json` plus `{train,test}_{mixtures,triangles,circles}.f32`,
/// each a row-major `(count, size, size)` array.
pub fn save_dataset(data: &DatasetSplit, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write_split = |name: &str, samples: &[MixtureSample]| -> Result<SplitFiles, DataError> {
        let files = SplitFiles {
            count: samples.len(),
            mixtures: format!("{name}_mixtures.f32"),
            triangles: format!("{name}_triangles.f32"),
            circles: format!("{name}_circles.f32"),
        };
        write_f32(&dir.join(&files.mixtures), samples.iter().flat_map(|s| s.mixture.iter().copied()))?;
        write_f32(&dir.join(&files.triangles), samples.iter().flat_map(|s| s.sources[0].pixels.iter().copied()))?;
        write_f32(&dir.join(&files.circles), samples.iter().flat_map(|s| s.sources[1].pixels.iter().copied()))?;
        Ok(files)
    };
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        image_size: data.image_size,
        n_pairs: data.len(),
        split_fraction: data.split_fraction,
        mixing: data.mixing.clone(),
        train: write_split("train", &data.train)?,
        test: write_split("test", &data.test)?,
    };
    let path = dir.join(DATASET_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplit, DataError> {
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(DataError::Dataset(format!("unsupported dataset format version {}", manifest.format_version)));
    }
    let size = manifest.image_size;
    let plane = size * size;
    let read_split = |files: &SplitFiles, offset: usize| -> Result<Vec<MixtureSample>, DataError> {
        let mixtures = read_f32(&dir.join(&files.mixtures))?;
        let tris = read_f32(&dir.join(&files.triangles))?;
        let circs = read_f32(&dir.join(&files.circles))?;
        for (name, buf) in [(&files.mixtures, &mixtures), (&files.triangles, &tris), (&files.circles, &circs)] {
            if buf.len() != files.count * plane {
                return Err(DataError::Dataset(format!(
                    "{name}: expected {} values, found {}",
                    files.count * plane,
                    buf.len()
                )));
            }
        }
        Ok((0..files.count)
            .map(|i| MixtureSample {
                mixture: mixtures[i * plane..(i + 1) * plane].to_vec(),
                sources: vec![
                    SourceImage { size, pixels: tris[i * plane..(i + 1) * plane].to_vec(), role: ShapeKind::Triangle },
                    SourceImage { size, pixels: circs[i * plane..(i + 1) * plane].to_vec(), role: ShapeKind::Circle },
                ],
                seed: sample_seed(manifest.mixing.seed, (offset + i) as u64),
            })
            .collect())
    };
    let train = read_split(&manifest.train, 0)?;
    let test = read_split(&manifest.test, manifest.train.count)?;
    Ok(DatasetSplit { image_size: size, mixing: manifest.mixing, split_fraction: manifest.split_fraction, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(cx: f64, cy: f64, scale: f64) -> ShapeSpec {
        ShapeSpec { kind: ShapeKind::Circle, center_x: cx, center_y: cy, scale }
    }

    #[test]
    fn circle_center_lit_and_area_close_to_analytic() {
        let img = render_shape(&circle(0.5, 0.5, 0.5), 128).unwrap();
        assert_eq!(img.get(64, 64), 1.0);
        let lit = img.pixels.iter().filter(|&&v| v == 1.0).count() as f64;
        let area = std::f64::consts::PI * (0.25f64 * 128.0).powi(2);
        assert!((lit - area).abs() / area < 0.03, "lit {lit} vs {area}");
        assert!(img.pixels.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn triangle_corner_is_background() {
        let spec = ShapeSpec { kind: ShapeKind::Triangle, center_x: 0.5, center_y: 0.5, scale: 0.5 };
        let img = render_shape(&spec, 128).unwrap();
        assert_eq!(img.get(0, 0), 0.0);
        assert_eq!(img.get(64, 64), 1.0);
        // area of an equilateral triangle with side 64 px
        let lit = img.pixels.iter().filter(|&&v| v == 1.0).count() as f64;
        let area = 3f64.sqrt() / 4.0 * 64.0 * 64.0;
        assert!((lit - area).abs() / area < 0.03);
    }

    #[test]
    fn render_rejects_out_of_bounds_and_bad_scale() {
        assert!(render_shape(&circle(0.1, 0.5, 0.5), 64).is_err());
        assert!(render_shape(&circle(0.5, 0.5, 0.7), 64).is_err());
        assert!(render_shape(&circle(0.5, 0.5, 0.5), 4).is_err());
    }

    #[test]
    fn downsample_examples() {
        let ones = SourceImage { size: 128, pixels: vec![1.0; 128 * 128], role: ShapeKind::Circle };
        let out = downsample_bilinear(&ones, 64).unwrap();
        assert!(out.pixels.iter().all(|&v| (v - 1.0).abs() < 1e-6));

        let checker = SourceImage { size: 2, pixels: vec![1.0, 0.0, 0.0, 1.0], role: ShapeKind::Circle };
        let one = downsample_bilinear(&checker, 1).unwrap();
        assert!((one.pixels[0] - 0.5).abs() < 1e-7);

        let img = render_shape(&circle(0.5, 0.5, 0.5), 32).unwrap();
        assert_eq!(downsample_bilinear(&img, 32).unwrap(), img);
        assert!(downsample_bilinear(&img, 33).is_err());
    }

    #[test]
    fn downsampling_keeps_unit_range_and_antialiases() {
        let img = render_shape(&circle(0.5, 0.5, 0.45), 128).unwrap();
        let out = downsample_bilinear(&img, 64).unwrap();
        assert!(out.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(out.pixels.iter().any(|&v| v > 0.0 && v < 1.0));
        let mean_in: f32 = img.pixels.iter().sum::<f32>() / img.pixels.len() as f32;
        let mean_out: f32 = out.pixels.iter().sum::<f32>() / out.pixels.len() as f32;
        assert!((mean_in - mean_out).abs() < 1e-3);
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_scale(&[0.0, 0.5, 1.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_scale(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_scale(&[3.0, 3.0, 3.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn mix_of_empty_sources_is_zero() {
        let blank = SourceImage { size: 16, pixels: vec![0.0; 256], role: ShapeKind::Triangle };
        let circ = SourceImage { role: ShapeKind::Circle, ..blank.clone() };
        let m = mix(&blank, &circ, &MixingConfig::default()).unwrap();
        assert!(m.mixture.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mix_rejects_dimension_mismatch() {
        let a = SourceImage { size: 16, pixels: vec![0.0; 256], role: ShapeKind::Triangle };
        let b = SourceImage { size: 8, pixels: vec![0.0; 64], role: ShapeKind::Circle };
        assert!(matches!(mix(&a, &b, &MixingConfig::default()), Err(DataError::Dimension(16, 8))));
    }

    #[test]
    fn overlap_is_nearly_indistinguishable_from_single_coverage() {
        let s6 = 1.0 / (1.0 + (-6.0f64).exp());
        let s3 = 1.0 / (1.0 + (-3.0f64).exp());
        assert!((s6 - 0.9975).abs() < 1e-4 && (s3 - 0.9526).abs() < 1e-4);
        // through the mixing system: single tri pixel, single circ pixel, overlap, background
        let tri = SourceImage { size: 2, pixels: vec![1.0, 0.0, 1.0, 0.0], role: ShapeKind::Triangle };
        let circ = SourceImage { size: 2, pixels: vec![0.0, 1.0, 1.0, 0.0], role: ShapeKind::Circle };
        let field = sigmoid_field(&tri, &circ, 6.0).unwrap();
        let single = (s3 - 0.5) / (s6 - 0.5);
        assert!((field[0] - single).abs() < 1e-12 && (field[2] - 1.0).abs() < 1e-12 && field[3] == 0.0);
        assert!(s6 - s3 < 0.05);
    }

    #[test]
    fn identity_kernel_gives_scaled_sigmoid_of_triangle() {
        let spec = ShapeSpec { kind: ShapeKind::Triangle, center_x: 0.5, center_y: 0.5, scale: 0.5 };
        let tri = downsample_bilinear(&render_shape(&spec, 64).unwrap(), 32).unwrap();
        let circ = SourceImage { size: 32, pixels: vec![0.0; 1024], role: ShapeKind::Circle };
        let cfg = MixingConfig { kernel: Kernel::identity(7), ..Default::default() };
        let m = mix(&tri, &circ, &cfg).unwrap();
        let expected = minmax_scale(&tri.pixels.iter().map(|&v| 1.0 / (1.0 + (-3.0 * v as f64).exp())).collect::<Vec<_>>());
        for (a, b) in m.mixture.iter().zip(expected) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn large_alpha_approaches_binary_union() {
        let tri = render_shape(&ShapeSpec { kind: ShapeKind::Triangle, center_x: 0.35, center_y: 0.4, scale: 0.5 }, 64).unwrap();
        let circ = render_shape(&circle(0.6, 0.6, 0.45), 64).unwrap();
        let tri = downsample_bilinear(&tri, 32).unwrap();
        let circ = downsample_bilinear(&circ, 32).unwrap();
        let field = sigmoid_field(&tri, &circ, 100.0).unwrap();
        let mut checked = 0;
        for (i, f) in field.iter().enumerate() {
            let (a, b) = (tri.pixels[i], circ.pixels[i]);
            // away from edges: both sources binary at this pixel
            if (a == 0.0 || a == 1.0) && (b == 0.0 || b == 1.0) {
                let union = if a + b > 0.0 { 1.0 } else { 0.0 };
                assert!((f - union).abs() < 1e-3, "pixel {i}: {f} vs {union}");
                checked += 1;
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn distortion_kernel_is_normalized_and_flip_is_involution() {
        let k = Kernel::distortion();
        assert_eq!(k.size, 7);
        assert!((k.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(k.flipped_vertically(), k);
        assert_eq!(k.flipped_vertically().flipped_vertically(), k);
    }

    #[test]
    fn split_arithmetic_and_determinism() {
        let cfg = MixingConfig { seed: 7, ..Default::default() };
        let a = generate_dataset_with(10, 16, &cfg, 0.8, Execution::Sequential).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (8, 2));
        let b = generate_dataset_with(10, 16, &cfg, 0.8, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(10, 16, &MixingConfig { seed: 8, ..cfg }, 0.8).unwrap();
        assert_ne!(a.train[0].mixture, c.train[0].mixture);
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(5, 16, &MixingConfig::default(), 0.8).unwrap();
        save_dataset(&data, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        let raw = fs::read(dir.path().join("test_mixtures.f32")).unwrap();
        assert_eq!(raw.len(), 16 * 16 * 4);
        assert_eq!(&raw[..4], &data.test[0].mixture[0].to_le_bytes());
    }
}
