//! Synthetic dual-task dataset, stratified splitting and on-disk format.
//!
//! Each sample is a noisy grayscale image containing one class-specific
//! shape (a disc, a large ellipse, or two small discs), a ground-truth
//! saliency map made of isotropic Gaussians on the shape(s), and the class
//! label.
//!
//! On disk a dataset is a directory:
//!
//! ```text
//! manifest.json          sample records: image file, saliency file, label, checksums
//! images/NNNNN.pgm       binary PGM (P5), 8-bit
//! saliency/NNNNN.sal     u32 LE height, u32 LE width, then height*width f32 LE
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const FORMAT: &str = "mtunet-dataset";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("class {class} has {count} samples; stratified split needs at least 3")]
    SmallClass { class: usize, count: usize },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, H, W]`, values `k/255`.
    pub image: Tensor<f32>,
    /// `[H, W]`, nonnegative, sums to one.
    pub saliency: Tensor<f32>,
    pub label: usize,
}

impl Sample {
    /// One-hot target over `classes`.
    pub fn one_hot(&self, classes: usize) -> Tensor<f32> {
        let mut t = Tensor::zeros(&[classes]);
        t.data_mut()[self.label] = 1.0;
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// New dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Two or three shape families.
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Background pixels are uniform in `[0, noise]`; shape pixels get
    /// `±noise/2` jitter.
    pub noise: f64,
    /// Standard deviation of the saliency Gaussians, pixels.
    pub blob_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 3,
            samples_per_class: 300,
            noise: 0.02,
            blob_spread: 6.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if !(2..=3).contains(&self.num_classes) {
            return bad(format!("num_classes must be 2 or 3, got {}", self.num_classes));
        }
        if self.height < 16 || self.width < 16 {
            return bad(format!(
                "images must be at least 16x16, got {}x{}",
                self.height, self.width
            ));
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return bad(format!("noise must lie in [0, 0.5], got {}", self.noise));
        }
        if !(self.blob_spread > 0.0) {
            return bad(format!("blob_spread must be positive, got {}", self.blob_spread));
        }
        Ok(())
    }
}

/// Shape geometry in units of the smaller image side.
struct Shapes {
    disc_radius: f64,
    ellipse_axes: (f64, f64),
    pair_radius: f64,
    pair_offset: f64,
}

impl Shapes {
    fn for_side(side: f64) -> Self {
        Self {
            disc_radius: 0.15 * side,
            ellipse_axes: (0.27 * side, 0.12 * side),
            pair_radius: 0.075 * side,
            pair_offset: 0.17 * side,
        }
    }
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

type Membership = dyn Fn(f64, f64) -> bool;

fn render(config: &SynthConfig, label: usize, rng: &mut SeededRng) -> Sample {
    let (h, w) = (config.height, config.width);
    let side = h.min(w) as f64;
    let shapes = Shapes::for_side(side);
    let margin = 0.3 * side;
    let cy = rng.uniform_range(margin, h as f64 - margin);
    let cx = rng.uniform_range(margin, w as f64 - margin);

    // (center_y, center_x) of each saliency Gaussian and a membership test.
    let (centers, inside): (Vec<(f64, f64)>, Box<Membership>) = match label {
        0 => {
            let r2 = shapes.disc_radius.powi(2);
            (
                vec![(cy, cx)],
                Box::new(move |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r2),
            )
        }
        1 => {
            let angle = rng.uniform_range(0.0, std::f64::consts::PI);
            let (a, b) = shapes.ellipse_axes;
            let (s, c) = angle.sin_cos();
            (
                vec![(cy, cx)],
                Box::new(move |y, x| {
                    let (dy, dx) = (y - cy, x - cx);
                    let u = dx * c + dy * s;
                    let v = -dx * s + dy * c;
                    (u / a).powi(2) + (v / b).powi(2) <= 1.0
                }),
            )
        }
        _ => {
            let angle = rng.uniform_range(0.0, std::f64::consts::PI);
            let (s, c) = angle.sin_cos();
            let d = shapes.pair_offset;
            let p1 = (cy + d * s, cx + d * c);
            let p2 = (cy - d * s, cx - d * c);
            let r2 = shapes.pair_radius.powi(2);
            (
                vec![p1, p2],
                Box::new(move |y, x| {
                    (y - p1.0).powi(2) + (x - p1.1).powi(2) <= r2
                        || (y - p2.0).powi(2) + (x - p2.1).powi(2) <= r2
                }),
            )
        }
    };

    let intensity = 0.8;
    let mut image = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let v = if inside(py, px) {
                intensity + config.noise * (rng.uniform() - 0.5)
            } else {
                config.noise * rng.uniform()
            };
            image.push(quantize(v));
        }
    }

    let two_var = 2.0 * config.blob_spread.powi(2);
    let mut sal: Vec<f64> = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            sal.push(
                centers
                    .iter()
                    .map(|&(gy, gx)| (-((py - gy).powi(2) + (px - gx).powi(2)) / two_var).exp())
                    .sum(),
            );
        }
    }
    let total: f64 = sal.iter().sum();
    let saliency = sal.iter().map(|v| (v / total) as f32).collect();

    Sample {
        image: Tensor::new(vec![1, h, w], image).expect("image extent"),
        saliency: Tensor::new(vec![h, w], saliency).expect("saliency extent"),
        label,
    }
}

/// Balanced synthetic dataset; classes are interleaved `0, 1, 2, 0, 1, ...`.
pub fn generate(config: &SynthConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let mut rng = SeededRng::new(config.seed);
    let mut samples = Vec::with_capacity(config.samples_per_class * config.num_classes);
    for _ in 0..config.samples_per_class {
        for label in 0..config.num_classes {
            samples.push(render(config, label, &mut rng));
        }
    }
    Ok(Dataset {
        height: config.height,
        width: config.width,
        num_classes: config.num_classes,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
            seed: 0,
        }
    }
}

/// Sample indices of the three partitions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per class: seeded shuffle, then a contiguous cut. Validation and test
/// sizes are floored; the remainder goes to training.
pub fn stratified_split(dataset: &Dataset, spec: &SplitSpec) -> Result<Split, DataError> {
    let fractions = [spec.train, spec.val, spec.test];
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DataError::InvalidConfig(format!(
            "split fractions must be in [0, 1] and sum to 1, got {fractions:?}"
        )));
    }
    let mut rng = SeededRng::new(spec.seed);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in 0..dataset.num_classes {
        let mut members: Vec<usize> = dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() < 3 {
            return Err(DataError::SmallClass {
                class,
                count: members.len(),
            });
        }
        rng.shuffle(&mut members);
        let n = members.len() as f64;
        let n_val = (n * spec.val + 1e-9).floor() as usize;
        let n_test = (n * spec.test + 1e-9).floor() as usize;
        let n_train = members.len() - n_val - n_test;
        split.train.extend_from_slice(&members[..n_train]);
        split.val.extend_from_slice(&members[n_train..n_train + n_val]);
        split.test.extend_from_slice(&members[n_train + n_val..]);
    }
    Ok(split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub saliency: String,
    pub label: usize,
    pub image_sha256: String,
    pub saliency_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub samples: Vec<SampleRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn encode_pgm(image: &Tensor<f32>) -> Vec<u8> {
    let s = image.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

/// Parses an 8-bit binary PGM into a `[1, H, W]` tensor of `k/255` values.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>, DataError> {
    let fail = |reason: &str| DataError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| fail("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(fail("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| fail("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(fail("only 8-bit PGM is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != w * h {
        return Err(fail(&format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            w * h
        )));
    }
    let data = raster.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![1, h, w], data).map_err(|e| fail(&e.to_string()))
}

pub fn encode_saliency(map: &Tensor<f32>) -> Vec<u8> {
    let s = map.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = Vec::with_capacity(8 + 4 * h * w);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_saliency(bytes: &[u8], path: &Path) -> Result<Tensor<f32>, DataError> {
    let fail = |reason: String| DataError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 8 {
        return Err(fail("missing extent header".into()));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * h * w {
        return Err(fail(format!(
            "saliency blob has {} bytes, expected {}",
            body.len(),
            4 * h * w
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(vec![h, w], data).map_err(|e| fail(e.to_string()))
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    for sub in ["images", "saliency"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let mut records = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let image = format!("images/{i:05}.pgm");
        let saliency = format!("saliency/{i:05}.sal");
        let img_bytes = encode_pgm(&s.image);
        let sal_bytes = encode_saliency(&s.saliency);
        for (rel, bytes) in [(&image, &img_bytes), (&saliency, &sal_bytes)] {
            let p = dir.join(rel);
            fs::write(&p, bytes).map_err(io_err(&p))?;
        }
        records.push(SampleRecord {
            image,
            saliency,
            label: s.label,
            image_sha256: sha(&img_bytes),
            saliency_sha256: sha(&sal_bytes),
        });
    }
    let manifest = DatasetManifest {
        format: FORMAT.to_string(),
        version: VERSION,
        height: dataset.height,
        width: dataset.width,
        num_classes: dataset.num_classes,
        samples: records,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(&path, json).map_err(io_err(&path))
}

pub fn load(dir: &Path) -> Result<Dataset, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(DataError::Manifest(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        if rec.label >= manifest.num_classes {
            return Err(DataError::Manifest(format!(
                "label {} out of range for {} classes",
                rec.label, manifest.num_classes
            )));
        }
        let read = |rel: &str, digest: &str| -> Result<(PathBuf, Vec<u8>), DataError> {
            let p = dir.join(rel);
            let bytes = fs::read(&p).map_err(io_err(&p))?;
            if sha(&bytes) != digest {
                return Err(DataError::Checksum(p));
            }
            Ok((p, bytes))
        };
        let (ip, ib) = read(&rec.image, &rec.image_sha256)?;
        let (sp, sb) = read(&rec.saliency, &rec.saliency_sha256)?;
        let image = decode_pgm(&ib, &ip)?;
        let saliency = decode_saliency(&sb, &sp)?;
        if image.shape() != [1, manifest.height, manifest.width]
            || saliency.shape() != [manifest.height, manifest.width]
        {
            return Err(DataError::Format {
                path: ip,
                reason: "extent differs from manifest".into(),
            });
        }
        samples.push(Sample {
            image,
            saliency,
            label: rec.label,
        });
    }
    Ok(Dataset {
        height: manifest.height,
        width: manifest.width,
        num_classes: manifest.num_classes,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            height: 32,
            width: 32,
            samples_per_class: 10,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn saliency_maps_are_distributions() {
        let ds = generate(&small(1)).unwrap();
        for s in &ds.samples {
            let total: f64 = s.saliency.to_f64_vec().iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert!(s.saliency.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = generate(&small(4)).unwrap();
        assert_eq!(a, generate(&small(4)).unwrap());
        assert_ne!(a, generate(&small(5)).unwrap());
        assert_eq!(a.class_counts(), vec![10, 10, 10]);
    }

    #[test]
    fn class_mean_images_differ_beyond_noise() {
        let cfg = SynthConfig::default();
        let ds = generate(&cfg).unwrap();
        let px = cfg.height * cfg.width;
        let mut means = vec![vec![0.0f64; px]; cfg.num_classes];
        for s in &ds.samples {
            for (m, v) in means[s.label].iter_mut().zip(s.image.data()) {
                *m += f64::from(*v) / cfg.samples_per_class as f64;
            }
        }
        for a in 0..cfg.num_classes {
            for b in a + 1..cfg.num_classes {
                let diff: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>()
                    / px as f64;
                assert!(diff > cfg.noise, "classes {a},{b}: {diff}");
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SynthConfig {
                num_classes: 4,
                ..small(0)
            },
            SynthConfig {
                samples_per_class: 0,
                ..small(0)
            },
            SynthConfig {
                noise: 0.9,
                ..small(0)
            },
            SynthConfig {
                height: 8,
                ..small(0)
            },
        ] {
            assert!(matches!(generate(&cfg), Err(DataError::InvalidConfig(_))));
        }
    }

    #[test]
    fn split_of_thirty() {
        let ds = generate(&small(2)).unwrap();
        let split = stratified_split(&ds, &SplitSpec::default()).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (21, 3, 6));
        for (part, per_class) in [(&split.train, 7), (&split.val, 1), (&split.test, 2)] {
            assert_eq!(ds.subset(part).class_counts(), vec![per_class; 3]);
        }
        let mut all: Vec<usize> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .copied()
            .collect();
        all.sort();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        assert_eq!(split, stratified_split(&ds, &SplitSpec::default()).unwrap());
    }

    #[test]
    fn split_rejects_tiny_class() {
        let ds = generate(&SynthConfig {
            samples_per_class: 2,
            ..small(0)
        })
        .unwrap();
        assert!(matches!(
            stratified_split(&ds, &SplitSpec::default()),
            Err(DataError::SmallClass { count: 2, .. })
        ));
    }

    #[test]
    fn pgm_header_with_comment() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let t = decode_pgm(bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0]);
        assert!(decode_pgm(b"P2\n1 1\n255\n0", Path::new("x")).is_err());
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let ds = generate(&small(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back, ds);

        let manifest: DatasetManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(
            manifest.samples.len(),
            fs::read_dir(dir.path().join("images")).unwrap().count()
        );

        let sal = dir.path().join(&manifest.samples[0].saliency);
        let mut bytes = fs::read(&sal).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            decode_saliency(&bytes, &sal),
            Err(DataError::Format { .. })
        ));
        fs::write(&sal, &bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(DataError::Checksum(_))));
    }
}
