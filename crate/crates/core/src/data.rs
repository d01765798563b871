//! Scene, label and split files, patch extraction, standardization, and a
//! synthetic scene generator.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SCENE_MAGIC: &[u8; 4] = b"HSI1";
pub const LABEL_MAGIC: &[u8; 4] = b"LBL1";
pub const STD_FLOOR: f64 = 1e-8;

pub type Pixel = (usize, usize);

/// `H x W x B` reflectance cube stored row-major with the band innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneVolume {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub values: Vec<f32>,
    pub name: String,
}

impl SceneVolume {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>, name: impl Into<String>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::InvalidArgument(format!(
                "scene dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        if values.len() != height * width * bands {
            return Err(Error::InvalidShape {
                op: "scene",
                shape: vec![height, width, bands],
                reason: format!("{} values supplied", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scene"));
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
            name: name.into(),
        })
    }

    pub fn spectrum(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.bands;
        &self.values[start..start + self.bands]
    }
}

/// Class index per pixel; 0 is unlabeled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::InvalidShape {
                op: "label map",
                shape: vec![height, width],
                reason: format!("{} labels supplied", labels.len()),
            });
        }
        Ok(Self { height, width, labels })
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Largest label present.
    pub fn classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn labeled_pixels(&self) -> Vec<Pixel> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&(r, c)| self.get(r, c) != 0)
            .collect()
    }

    pub fn check_matches(&self, scene: &SceneVolume) -> Result<()> {
        if (self.height, self.width) != (scene.height, scene.width) {
            return Err(Error::DimensionMismatch {
                scene_h: scene.height,
                scene_w: scene.width,
                label_h: self.height,
                label_w: self.width,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitIndex {
    pub train: Vec<Pixel>,
    pub test: Vec<Pixel>,
}

impl SplitIndex {
    pub fn check_disjoint(&self) -> Result<()> {
        let train: HashSet<Pixel> = self.train.iter().copied().collect();
        if let Some(&(row, col)) = self.test.iter().find(|p| train.contains(p)) {
            return Err(Error::SplitOverlap { row, col });
        }
        Ok(())
    }

    /// Every listed pixel lies inside the map and is labeled; splits are disjoint.
    pub fn validate(&self, labels: &LabelMap) -> Result<()> {
        for &(row, col) in self.train.iter().chain(&self.test) {
            if row >= labels.height || col >= labels.width {
                return Err(Error::OutOfBounds {
                    row,
                    col,
                    height: labels.height,
                    width: labels.width,
                });
            }
            if labels.get(row, col) == 0 {
                return Err(Error::Unlabeled { row, col });
            }
        }
        self.check_disjoint()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_header(bytes: &[u8], path: &Path, magic: &'static [u8; 4], fields: usize) -> Result<Vec<usize>> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: std::str::from_utf8(magic).expect("ascii magic"),
        });
    }
    let header = 4 + 4 * fields;
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header,
            found: bytes.len(),
        });
    }
    Ok(bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect())
}

fn check_payload(bytes: &[u8], path: &Path, expected: usize) -> Result<()> {
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

fn u32_field(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u32")))
}

pub fn encode_scene(scene: &SceneVolume) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + scene.values.len() * 4);
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&u32_field(scene.height, "height")?);
    out.extend_from_slice(&u32_field(scene.width, "width")?);
    out.extend_from_slice(&u32_field(scene.bands, "bands")?);
    for v in &scene.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn save_scene(scene: &SceneVolume, path: &Path) -> Result<()> {
    std::fs::write(path, encode_scene(scene)?)?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<SceneVolume> {
    let bytes = read_file(path)?;
    let dims = read_header(&bytes, path, SCENE_MAGIC, 3)?;
    let (h, w, b) = (dims[0], dims[1], dims[2]);
    check_payload(&bytes, path, 16 + h * w * b * 4)?;
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    SceneVolume::new(h, w, b, values, name)
}

pub fn encode_labels(labels: &LabelMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + labels.labels.len() * 2);
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&u32_field(labels.height, "height")?);
    out.extend_from_slice(&u32_field(labels.width, "width")?);
    for v in &labels.labels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    std::fs::write(path, encode_labels(labels)?)?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let bytes = read_file(path)?;
    let dims = read_header(&bytes, path, LABEL_MAGIC, 2)?;
    let (h, w) = (dims[0], dims[1]);
    check_payload(&bytes, path, 12 + h * w * 2)?;
    let labels = bytes[12..].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    LabelMap::new(h, w, labels)
}

pub fn format_split(split: &SplitIndex) -> String {
    let mut out = String::from("[train]\n");
    for (r, c) in &split.train {
        writeln!(out, "{r},{c}").expect("write to string");
    }
    out.push_str("[test]\n");
    for (r, c) in &split.test {
        writeln!(out, "{r},{c}").expect("write to string");
    }
    out
}

pub fn save_split(split: &SplitIndex, path: &Path) -> Result<()> {
    std::fs::write(path, format_split(split))?;
    Ok(())
}

/// Parses `[train]` / `[test]` sections of `row,col` lines; blank lines are
/// ignored. Overlapping sections are an error.
pub fn parse_split(text: &str, path: &Path) -> Result<SplitIndex> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        reason,
    };
    let mut split = SplitIndex::default();
    let mut section: Option<bool> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = i + 1;
        match line {
            "" => continue,
            "[train]" => section = Some(true),
            "[test]" => section = Some(false),
            _ => {
                let is_train = section.ok_or_else(|| parse_err(lineno, "pixel before any section header".into()))?;
                let (r, c) = line
                    .split_once(',')
                    .ok_or_else(|| parse_err(lineno, format!("expected 'row,col', got '{line}'")))?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| parse_err(lineno, format!("bad coordinate '{}'", s.trim())))
                };
                let pixel = (parse(r)?, parse(c)?);
                if is_train {
                    split.train.push(pixel);
                } else {
                    split.test.push(pixel);
                }
            }
        }
    }
    split.check_disjoint()?;
    Ok(split)
}

pub fn load_split(path: &Path) -> Result<SplitIndex> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason: "not utf-8 text".into(),
    })?;
    parse_split(&text, path)
}

/// A scene, its labels and a split, cross-validated.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scene: SceneVolume,
    pub labels: LabelMap,
    pub split: SplitIndex,
}

impl Dataset {
    pub fn new(scene: SceneVolume, labels: LabelMap, split: SplitIndex) -> Result<Self> {
        labels.check_matches(&scene)?;
        split.validate(&labels)?;
        Ok(Self { scene, labels, split })
    }

    pub fn load(scene: &Path, labels: &Path, split: &Path) -> Result<Self> {
        Self::new(load_scene(scene)?, load_labels(labels)?, load_split(split)?)
    }

    pub fn classes(&self) -> usize {
        self.labels.classes()
    }

    /// Standardized copy using training-pixel band statistics.
    pub fn standardized(&self) -> Result<Self> {
        Ok(Self {
            scene: standardize(&self.scene, &self.split.train)?,
            labels: self.labels.clone(),
            split: self.split.clone(),
        })
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// `[B, size, size]` channels-first window around `center` and its label.
pub fn extract_patch(scene: &SceneVolume, labels: &LabelMap, center: Pixel, size: usize) -> Result<(Vec<f32>, usize)> {
    if size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("patch size must be odd, got {size}")));
    }
    let (row, col) = center;
    if row >= scene.height || col >= scene.width {
        return Err(Error::OutOfBounds {
            row,
            col,
            height: scene.height,
            width: scene.width,
        });
    }
    let label = labels.get(row, col);
    if label == 0 {
        return Err(Error::Unlabeled { row, col });
    }
    Ok((window(scene, center, size)?, label as usize))
}

/// `[B, size, size]` channels-first window around any pixel, labeled or not.
pub fn window(scene: &SceneVolume, center: Pixel, size: usize) -> Result<Vec<f32>> {
    if size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("patch size must be odd, got {size}")));
    }
    let (row, col) = center;
    if row >= scene.height || col >= scene.width {
        return Err(Error::OutOfBounds {
            row,
            col,
            height: scene.height,
            width: scene.width,
        });
    }
    let mut out = vec![0f32; scene.bands * size * size];
    write_patch(scene, center, size, &mut out);
    Ok(out)
}

fn write_patch(scene: &SceneVolume, (row, col): Pixel, size: usize, out: &mut [f32]) {
    let half = (size / 2) as isize;
    let plane = size * size;
    for dy in 0..size {
        let r = reflect_index(row as isize + dy as isize - half, scene.height);
        for dx in 0..size {
            let c = reflect_index(col as isize + dx as isize - half, scene.width);
            for (b, &v) in scene.spectrum(r, c).iter().enumerate() {
                out[b * plane + dy * size + dx] = v;
            }
        }
    }
}

/// Per-band z-score with mean and standard deviation from `train` pixels.
pub fn standardize(scene: &SceneVolume, train: &[Pixel]) -> Result<SceneVolume> {
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let b = scene.bands;
    let mut mean = vec![0f64; b];
    let mut sq = vec![0f64; b];
    for &(r, c) in train {
        for (i, &v) in scene.spectrum(r, c).iter().enumerate() {
            mean[i] += v as f64;
        }
    }
    let n = train.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    for &(r, c) in train {
        for (i, &v) in scene.spectrum(r, c).iter().enumerate() {
            sq[i] += (v as f64 - mean[i]).powi(2);
        }
    }
    let std: Vec<f64> = sq.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    let values = scene
        .values
        .chunks_exact(b)
        .flat_map(|px| px.iter().enumerate().map(|(i, &v)| ((v as f64 - mean[i]) / std[i]) as f32))
        .collect();
    SceneVolume::new(scene.height, scene.width, b, values, scene.name.clone())
}

/// Patches of a pixel list, flattened `[N, B, P, P]` with 1-based labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub bands: usize,
    pub patch: usize,
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
}

impl PatchSet {
    pub fn extract(scene: &SceneVolume, labels: &LabelMap, pixels: &[Pixel], patch: usize) -> Result<Self> {
        let per = scene.bands * patch * patch;
        let mut data = Vec::with_capacity(pixels.len() * per);
        let mut out = Vec::with_capacity(pixels.len());
        for &p in pixels {
            let (values, label) = extract_patch(scene, labels, p, patch)?;
            data.extend_from_slice(&values);
            out.push(label);
        }
        Ok(Self {
            bands: scene.bands,
            patch,
            data,
            labels: out,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.bands * self.patch * self.patch
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let per = self.sample_len();
        &self.data[i * per..(i + 1) * per]
    }

    /// Stacks the selected samples into a `[n, B, P, P]` tensor.
    pub fn gather<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&v| T::of(v as f64)));
        }
        let x = Tensor::new([indices.len(), self.bands, self.patch, self.patch], data).expect("consistent sizes");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn all<T: Scalar>(&self) -> (Tensor<T>, Vec<usize>) {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            bands: self.bands,
            patch: self.patch,
            data,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// How class identity is encoded in a synthetic scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneStyle {
    /// Elliptical blobs over a background; each class has its own spectrum.
    Blobs,
    /// Large uniform regions covering the canvas; classes differ only in
    /// their spectra and regions carry no texture.
    SpectralOnly,
    /// Large regions sharing one mean spectrum; classes differ only in the
    /// orientation and period of a zero-mean grating.
    TextureOnly,
}

impl SceneStyle {
    pub fn name(self) -> &'static str {
        match self {
            SceneStyle::Blobs => "blobs",
            SceneStyle::SpectralOnly => "spectral",
            SceneStyle::TextureOnly => "texture",
        }
    }
}

impl std::str::FromStr for SceneStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SceneStyle::Blobs),
            "spectral" => Ok(SceneStyle::SpectralOnly),
            "texture" => Ok(SceneStyle::TextureOnly),
            other => Err(Error::InvalidArgument(format!(
                "unknown scene style '{other}' (expected blobs, spectral or texture)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    pub blobs_per_class: usize,
    pub radius: (f64, f64),
    pub noise_std: f64,
    /// Scale of class signatures relative to their shared component.
    pub separation: f64,
    /// Amplitude of a smooth multiplicative brightness field; 0 disables it.
    pub illumination: f64,
    pub train_fraction: f64,
    pub style: SceneStyle,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            bands: 16,
            classes: 5,
            blobs_per_class: 4,
            radius: (4.0, 9.0),
            noise_std: 0.3,
            separation: 2.5,
            illumination: 0.8,
            train_fraction: 0.15,
            style: SceneStyle::Blobs,
            seed: 0,
            max_retries: 1000,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.classes > u16::MAX as usize {
            return fail(format!("too many classes: {}", self.classes));
        }
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return fail(format!(
                "scene dimensions must be positive, got {}x{}x{}",
                self.height, self.width, self.bands
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise standard deviation must be >= 0, got {}", self.noise_std));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return fail(format!("separation must be positive, got {}", self.separation));
        }
        if !(self.illumination >= 0.0 && self.illumination <= 1.0) {
            return fail(format!("illumination must lie in [0, 1], got {}", self.illumination));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("train fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        let (lo, hi) = self.radius;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return fail(format!("bad radius range ({lo}, {hi})"));
        }
        if self.style == SceneStyle::Blobs && self.blobs_per_class == 0 {
            return fail("blob count must be positive".into());
        }
        Ok(())
    }
}

/// Smooth spectrum: a sum of three Gaussian bumps over the band axis.
fn smooth_signature(rng: &mut ChaCha8Rng, bands: usize) -> Vec<f64> {
    let mut sig = vec![0.0; bands];
    for _ in 0..3 {
        let center = rng.random_range(0.0..bands as f64);
        let width = rng.random_range(0.1..0.35) * bands as f64 + 1.0;
        let height = rng.random_range(-1.0..1.0);
        for (i, s) in sig.iter_mut().enumerate() {
            let d = (i as f64 - center) / width;
            *s += height * (-0.5 * d * d).exp();
        }
    }
    sig
}

/// Brightness factor per pixel: one plus `amplitude` times a sum of four
/// plane waves with random direction, frequency and phase, each of height at
/// most 0.25, so the factor stays within `[1 - amplitude, 1 + amplitude]`.
fn illumination_field(spec: &SyntheticSpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.random_range(0.05..0.2),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..PI),
                rng.random_range(0.1..0.25),
            ]
        })
        .collect();
    let mut field = Vec::with_capacity(spec.height * spec.width);
    for row in 0..spec.height {
        for col in 0..spec.width {
            let (r, c) = (row as f64, col as f64);
            let wave: f64 = waves
                .iter()
                .map(|&[freq, phase, dir, height]| height * ((r * dir.sin() + c * dir.cos()) * freq + phase).sin())
                .sum();
            field.push(1.0 + spec.illumination * wave);
        }
    }
    field
}

fn stamp_blobs(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<u16>> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let mut labels = vec![0u16; spec.height * spec.width];
    let mut order: Vec<usize> = (0..spec.classes * spec.blobs_per_class).map(|i| i % spec.classes).collect();
    order.shuffle(rng);
    for class in order {
        let mut placed = false;
        for _ in 0..spec.max_retries {
            let a = rng.random_range(spec.radius.0..=spec.radius.1);
            let b = rng.random_range(spec.radius.0..=spec.radius.1);
            let theta = rng.random_range(0.0..PI);
            let cy = rng.random_range(0.0..h);
            let cx = rng.random_range(0.0..w);
            let (s, c) = theta.sin_cos();
            let ey = ((a * s).powi(2) + (b * c).powi(2)).sqrt();
            let ex = ((a * c).powi(2) + (b * s).powi(2)).sqrt();
            if cy - ey < 0.0 || cy + ey > h - 1.0 || cx - ex < 0.0 || cx + ex > w - 1.0 {
                continue;
            }
            for r in 0..spec.height {
                for col in 0..spec.width {
                    let (dy, dx) = (r as f64 - cy, col as f64 - cx);
                    let u = dx * c + dy * s;
                    let v = -dx * s + dy * c;
                    if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                        labels[r * spec.width + col] = class as u16 + 1;
                    }
                }
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::InvalidArgument(format!(
                "could not place a blob of radius up to {} inside a {}x{} canvas after {} attempts",
                spec.radius.1, spec.height, spec.width, spec.max_retries
            )));
        }
    }
    Ok(labels)
}

/// Nearest-seed partition of the canvas into regions of roughly
/// `radius` size, each assigned a random class with every class present.
fn region_labels(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Vec<u16>, Vec<usize>) {
    let area = (spec.height * spec.width) as f64;
    let r = 0.5 * (spec.radius.0 + spec.radius.1);
    let count = ((area / (PI * r * r)).round() as usize).max(spec.classes);
    let seeds: Vec<(f64, f64)> = (0..count)
        .map(|_| (rng.random_range(0.0..spec.height as f64), rng.random_range(0.0..spec.width as f64)))
        .collect();
    let mut classes: Vec<usize> = (0..count).map(|i| i % spec.classes).collect();
    classes.shuffle(rng);
    let mut region = vec![0usize; spec.height * spec.width];
    let mut labels = vec![0u16; spec.height * spec.width];
    for row in 0..spec.height {
        for col in 0..spec.width {
            let nearest = seeds
                .iter()
                .enumerate()
                .map(|(i, &(y, x))| (i, (y - row as f64).powi(2) + (x - col as f64).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .expect("at least one seed");
            region[row * spec.width + col] = nearest;
            labels[row * spec.width + col] = classes[nearest] as u16 + 1;
        }
    }
    (labels, region)
}

/// Per-class split of labeled pixels; at least one train and one test pixel
/// per class where the class has two or more pixels.
fn split_pixels(labels: &LabelMap, classes: usize, fraction: f64, rng: &mut ChaCha8Rng) -> SplitIndex {
    let mut by_class: Vec<Vec<Pixel>> = vec![Vec::new(); classes];
    for p in labels.labeled_pixels() {
        by_class[labels.get(p.0, p.1) as usize - 1].push(p);
    }
    let mut split = SplitIndex::default();
    for mut pixels in by_class {
        pixels.shuffle(rng);
        let n = pixels.len();
        let mut k = ((n as f64) * fraction).round() as usize;
        if n >= 2 {
            k = k.clamp(1, n - 1);
        }
        let (train, test) = pixels.split_at(k.min(n));
        split.train.extend_from_slice(train);
        split.test.extend_from_slice(test);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    split
}

pub fn synth_generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w, b) = (spec.height, spec.width, spec.bands);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let shade = illumination_field(spec);

    let base = smooth_signature(&mut rng, b);
    let class_sigs: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let own = smooth_signature(&mut rng, b);
            base.iter().zip(own).map(|(x, y)| x + spec.separation * y).collect()
        })
        .collect();

    let mut values = vec![0f32; h * w * b];
    let labels = match spec.style {
        SceneStyle::Blobs => {
            let labels = stamp_blobs(spec, &mut rng)?;
            let background = smooth_signature(&mut rng, b);
            for (i, &l) in labels.iter().enumerate() {
                let sig = if l == 0 { &background } else { &class_sigs[l as usize - 1] };
                for (j, &s) in sig.iter().enumerate() {
                    values[i * b + j] = (shade[i] * s + noise.sample(&mut rng)) as f32;
                }
            }
            labels
        }
        SceneStyle::SpectralOnly => {
            let (labels, _) = region_labels(spec, &mut rng);
            for (i, &l) in labels.iter().enumerate() {
                for (j, &s) in class_sigs[l as usize - 1].iter().enumerate() {
                    values[i * b + j] = (shade[i] * s + noise.sample(&mut rng)) as f32;
                }
            }
            labels
        }
        SceneStyle::TextureOnly => {
            let (labels, region) = region_labels(spec, &mut rng);
            let gratings: Vec<(f64, f64)> = (0..spec.classes)
                .map(|k| {
                    let angle = PI * k as f64 / spec.classes as f64;
                    let period = 3.0 + (k % 3) as f64;
                    (angle, period)
                })
                .collect();
            let regions = region.iter().max().map_or(0, |m| m + 1);
            let phases: Vec<f64> = (0..regions).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            let shape = smooth_signature(&mut rng, b);
            for row in 0..h {
                for col in 0..w {
                    let i = row * w + col;
                    let (angle, period) = gratings[labels[i] as usize - 1];
                    let t = (col as f64 * angle.cos() + row as f64 * angle.sin()) * 2.0 * PI / period;
                    let g = spec.separation * (t + phases[region[i]]).sin();
                    for j in 0..b {
                        values[i * b + j] = (shade[i] * (base[j] + g * shape[j]) + noise.sample(&mut rng)) as f32;
                    }
                }
            }
            labels
        }
    };
    let name = format!("synthetic-{}-seed{}", spec.style.name(), spec.seed);
    let scene = SceneVolume::new(h, w, b, values, name)?;
    let labels = LabelMap::new(h, w, labels)?;
    let split = split_pixels(&labels, spec.classes, spec.train_fraction, &mut rng);
    Dataset::new(scene, labels, split)
}

/// Class-mean spectra from training pixels, then nearest-mean prediction of
/// test pixels. Returns `(test labels, predictions)`.
pub fn nearest_class_mean(data: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    let k = data.classes();
    let b = data.scene.bands;
    let mut sums = vec![vec![0f64; b]; k];
    let mut counts = vec![0usize; k];
    for &(r, c) in &data.split.train {
        let l = data.labels.get(r, c) as usize - 1;
        counts[l] += 1;
        for (s, &v) in sums[l].iter_mut().zip(data.scene.spectrum(r, c)) {
            *s += v as f64;
        }
    }
    if counts.iter().all(|&n| n == 0) {
        return Err(Error::Empty("training split"));
    }
    let means: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let mut truth = Vec::with_capacity(data.split.test.len());
    let mut preds = Vec::with_capacity(data.split.test.len());
    for &(r, c) in &data.split.test {
        let px = data.scene.spectrum(r, c);
        let best = means
            .iter()
            .enumerate()
            .filter_map(|(i, m)| {
                m.as_ref()
                    .map(|m| (i, m.iter().zip(px).map(|(a, &v)| (a - v as f64).powi(2)).sum::<f64>()))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .expect("some class has training pixels");
        truth.push(data.labels.get(r, c) as usize);
        preds.push(best + 1);
    }
    Ok((truth, preds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_2x3x4() -> SceneVolume {
        SceneVolume::new(2, 3, 4, (0..24).map(|v| v as f32 * 0.5).collect(), "t").unwrap()
    }

    #[test]
    fn scene_file_size_and_shape() {
        let bytes = encode_scene(&scene_2x3x4()).unwrap();
        assert_eq!(bytes.len(), 4 + 12 + 96);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.hsi");
        save_scene(&scene_2x3x4(), &path).unwrap();
        let back = load_scene(&path).unwrap();
        assert_eq!((back.height, back.width, back.bands), (2, 3, 4));
        assert_eq!(back.values, scene_2x3x4().values);
    }

    #[test]
    fn scene_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.hsi");
        let mut bytes = encode_scene(&scene_2x3x4()).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_scene(&path), Err(Error::Truncated { expected: 112, found: 111, .. })));
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_scene(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn classes_is_max_label() {
        let labels = LabelMap::new(1, 3, vec![7, 0, 2]).unwrap();
        assert_eq!(labels.classes(), 7);
    }

    #[test]
    fn split_rejects_unlabeled_overlap_and_bounds() {
        let labels = LabelMap::new(2, 2, vec![1, 0, 2, 1]).unwrap();
        let unlabeled = SplitIndex {
            train: vec![(0, 1)],
            test: vec![],
        };
        assert!(matches!(unlabeled.validate(&labels), Err(Error::Unlabeled { row: 0, col: 1 })));
        let outside = SplitIndex {
            train: vec![(2, 0)],
            test: vec![],
        };
        assert!(matches!(outside.validate(&labels), Err(Error::OutOfBounds { .. })));
        let text = "[train]\n0,0\n[test]\n1,0\n0,0\n";
        assert!(matches!(parse_split(text, Path::new("x")), Err(Error::SplitOverlap { row: 0, col: 0 })));
    }

    #[test]
    fn split_parse_errors_name_the_line() {
        let err = parse_split("[train]\n0,0\nfoo\n", Path::new("s.txt")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        assert!(parse_split("1,2\n", Path::new("s.txt")).is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let labels = LabelMap::new(3, 3, vec![1; 9]).unwrap();
        let err = Dataset::new(scene_2x3x4(), labels, SplitIndex::default()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn reflect_examples() {
        assert_eq!(reflect_index(-1, 2), 1);
        assert_eq!(reflect_index(0, 2), 0);
        assert_eq!(reflect_index(2, 2), 0);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(-7, 3), 1);
        assert_eq!(reflect_index(4, 1), 0);
    }

    #[test]
    fn corner_patch_mirrors_second_row_and_column() {
        let scene = SceneVolume::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0], "t").unwrap();
        let labels = LabelMap::new(2, 2, vec![1; 4]).unwrap();
        let (p, l) = extract_patch(&scene, &labels, (0, 0), 3).unwrap();
        assert_eq!(l, 1);
        assert_eq!(p, vec![4.0, 3.0, 4.0, 2.0, 1.0, 2.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn patch_rejects_even_size_and_unlabeled_center() {
        let scene = scene_2x3x4();
        let labels = LabelMap::new(2, 3, vec![1, 0, 1, 1, 1, 1]).unwrap();
        assert!(extract_patch(&scene, &labels, (0, 0), 4).is_err());
        assert!(matches!(extract_patch(&scene, &labels, (0, 1), 3), Err(Error::Unlabeled { .. })));
    }

    #[test]
    fn constant_band_standardizes_to_zero() {
        let scene = SceneVolume::new(1, 3, 2, vec![5.0, 1.0, 5.0, 2.0, 5.0, 6.0], "t").unwrap();
        let z = standardize(&scene, &[(0, 0), (0, 1), (0, 2)]).unwrap();
        assert!(z.values.iter().step_by(2).all(|&v| v == 0.0));
        let mean: f32 = z.values.iter().skip(1).step_by(2).sum::<f32>() / 3.0;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn noiseless_classes_share_one_spectrum() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            illumination: 0.0,
            seed: 4,
            ..SyntheticSpec::default()
        };
        let d = synth_generate(&spec).unwrap();
        let mut first: Vec<Option<Vec<f32>>> = vec![None; spec.classes];
        for (r, c) in d.labels.labeled_pixels() {
            let l = d.labels.get(r, c) as usize - 1;
            let px = d.scene.spectrum(r, c).to_vec();
            match &first[l] {
                Some(s) => assert_eq!(s, &px),
                None => first[l] = Some(px),
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticSpec {
            seed: 21,
            ..SyntheticSpec::default()
        };
        let (a, b) = (synth_generate(&spec).unwrap(), synth_generate(&spec).unwrap());
        assert_eq!(encode_scene(&a.scene).unwrap(), encode_scene(&b.scene).unwrap());
        assert_eq!(a.split, b.split);
    }

    #[test]
    fn oversized_blobs_are_rejected() {
        let spec = SyntheticSpec {
            height: 8,
            width: 8,
            radius: (6.0, 7.0),
            max_retries: 20,
            ..SyntheticSpec::default()
        };
        assert!(synth_generate(&spec).is_err());
    }

    #[test]
    fn one_class_is_rejected() {
        let spec = SyntheticSpec {
            classes: 1,
            ..SyntheticSpec::default()
        };
        assert!(synth_generate(&spec).is_err());
    }
}
