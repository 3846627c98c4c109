//! Dataset ingestion: IDX and CSV files, a synthetic glyph set, normalization.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{DataSource, ExperimentConfig};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Grayscale images with pixel values 0-255, as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSet {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Normalized images `(N, 1, H, W)` and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: DenseTensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the examples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Dataset {
        let per: usize = self.images.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            images: DenseTensor::new(shape, data).expect("gathered shape matches"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Global pixel mean and standard deviation of a training split.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub fn fit(raw: &RawSet) -> Result<Self> {
        if raw.pixels.is_empty() {
            return Err(Error::Contract("cannot normalize an empty training split".into()));
        }
        let n = raw.pixels.len() as f64;
        let mean = raw.pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / n;
        let var = raw.pixels.iter().map(|&p| (f64::from(p) - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Self { mean, std })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("plain struct serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::FormatLine {
            context: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn apply(&self, raw: &RawSet) -> Dataset {
        let data = raw.pixels.iter().map(|&p| (f64::from(p) - self.mean) / self.std).collect();
        Dataset {
            images: DenseTensor::new(vec![raw.len(), 1, raw.rows, raw.cols], data).expect("raw set is consistent"),
            labels: raw.labels.iter().map(|&l| usize::from(l)).collect(),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_at(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::FormatAt {
        context: path.display().to_string(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| format_at(path, at, "truncated header"))
}

fn idx_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(format_at(path, 0, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    (0..dims).map(|d| be_u32(bytes, 4 + 4 * d, path).map(|v| v as usize)).collect()
}

/// Reads an IDX image file: `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let dims = idx_header(&bytes, path, IDX_IMAGES_MAGIC, 3)?;
    let (n, r, c) = (dims[0], dims[1], dims[2]);
    let want = n.checked_mul(r).and_then(|v| v.checked_mul(c));
    let body = &bytes[16..];
    if want != Some(body.len()) {
        return Err(format_at(
            path,
            16 + body.len().min(want.unwrap_or(usize::MAX)),
            format!("header declares {n}x{r}x{c} pixels but {} bytes follow the header", body.len()),
        ));
    }
    Ok((n, r, c, body.to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let n = idx_header(&bytes, path, IDX_LABELS_MAGIC, 1)?[0];
    let body = &bytes[8..];
    if body.len() != n {
        return Err(format_at(
            path,
            8 + body.len().min(n),
            format!("header declares {n} labels but {} bytes follow the header", body.len()),
        ));
    }
    Ok(body.to_vec())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    write_file(path, &out)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write_file(path, &out)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<RawSet> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let labels_v = read_idx_labels(labels)?;
    if labels_v.len() != n {
        return Err(format_at(labels, 4, format!("{} labels for {n} images", labels_v.len())));
    }
    Ok(RawSet {
        rows,
        cols,
        pixels,
        labels: labels_v,
    })
}

/// CSV rows `label, p0, p1, ...` with pixels 0-255 forming a square image.
pub fn load_csv(path: &Path) -> Result<RawSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let bad = |line: u64, message: String| Error::FormatLine {
        context: path.display().to_string(),
        line: line as usize,
        message,
    };
    let mut width = None;
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            bad(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(bad(line, format!("{} fields, expected {w}", record.len())));
        }
        let mut fields = record.iter();
        let label = fields.next().unwrap_or("");
        labels.push(label.parse::<u8>().map_err(|_| bad(line, format!("invalid label {label:?}")))?);
        for f in fields {
            pixels.push(f.parse::<u8>().map_err(|_| bad(line, format!("invalid pixel value {f:?}")))?);
        }
    }
    let count = width.unwrap_or(1) - 1;
    let side = (count as f64).sqrt().round() as usize;
    if labels.is_empty() || side * side != count || side == 0 {
        return Err(bad(1, format!("{count} pixels per row do not form a square image")));
    }
    Ok(RawSet {
        rows: side,
        cols: side,
        pixels,
        labels,
    })
}

pub fn write_csv(path: &Path, raw: &RawSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let per = raw.rows * raw.cols;
    for (i, &label) in raw.labels.iter().enumerate() {
        let row = std::iter::once(label.to_string()).chain(raw.pixels[i * per..(i + 1) * per].iter().map(u8::to_string));
        w.write_record(row).map_err(|e| Error::Config(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Segments of a seven-segment display in a unit box (x right, y down).
const SEGMENTS: [[(f64, f64); 2]; 7] = [
    [(0.0, 0.0), (1.0, 0.0)], // a: top
    [(1.0, 0.0), (1.0, 0.5)], // b: upper right
    [(1.0, 0.5), (1.0, 1.0)], // c: lower right
    [(0.0, 1.0), (1.0, 1.0)], // d: bottom
    [(0.0, 0.5), (0.0, 1.0)], // e: lower left
    [(0.0, 0.0), (0.0, 0.5)], // f: upper left
    [(0.0, 0.5), (1.0, 0.5)], // g: middle
];

const DIGITS: [&str; 10] = [
    "abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg",
];

/// Number of classes in the synthetic set.
pub const SYNTHETIC_CLASSES: usize = 10;
pub const SYNTHETIC_SIDE: usize = 28;

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

fn render_glyph(class: usize, rng: &mut ChaCha8Rng, noise: &Normal<f64>, out: &mut Vec<u8>) {
    let side = SYNTHETIC_SIDE as f64;
    let theta: f64 = rng.random_range(-0.3..0.3);
    let shear: f64 = rng.random_range(-0.3..0.3);
    let (sx, sy) = (rng.random_range(0.3..0.5), rng.random_range(0.5..0.7));
    let (tx, ty) = (0.5 + rng.random_range(-0.1..0.1), 0.5 + rng.random_range(-0.1..0.1));
    let thickness = rng.random_range(0.03..0.07);
    let (c, s) = (theta.cos(), theta.sin());
    let place = |(x, y): (f64, f64), rng: &mut ChaCha8Rng| {
        let (x, y) = ((x - 0.5) * sx + rng.random_range(-0.05..0.05), (y - 0.5) * sy + rng.random_range(-0.05..0.05));
        let x = x + shear * y;
        (tx + c * x - s * y, ty + s * x + c * y)
    };
    let mut strokes: Vec<((f64, f64), (f64, f64))> = Vec::new();
    for seg in DIGITS[class].bytes() {
        if rng.random::<f64>() < 0.05 {
            continue;
        }
        let [a, b] = SEGMENTS[usize::from(seg - b'a')];
        strokes.push((place(a, rng), place(b, rng)));
    }
    if rng.random::<f64>() < 0.5 {
        let a = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let b = (a.0 + rng.random_range(-0.3..0.3), a.1 + rng.random_range(-0.3..0.3));
        strokes.push((a, b));
    }
    let soft = 0.6 / side;
    for py in 0..SYNTHETIC_SIDE {
        for px in 0..SYNTHETIC_SIDE {
            let p = ((px as f64 + 0.5) / side, (py as f64 + 0.5) / side);
            let d = strokes
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min);
            let ink = ((thickness - d) / soft + 0.5).clamp(0.0, 1.0);
            let v = (ink + noise.sample(rng)).clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
}

/// `n` seven-segment style glyphs with random affine jitter, dropped strokes,
/// a distractor stroke and pixel noise. Labels cycle `0..10`, so any multiple of
/// ten gives a perfectly balanced set.
pub fn synthesize(n: usize, seed: u64) -> RawSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.2).expect("valid deviation");
    let mut pixels = Vec::with_capacity(n * SYNTHETIC_SIDE * SYNTHETIC_SIDE);
    let labels: Vec<u8> = (0..n).map(|i| (i % SYNTHETIC_CLASSES) as u8).collect();
    for &l in &labels {
        render_glyph(usize::from(l), &mut rng, &noise, &mut pixels);
    }
    RawSet {
        rows: SYNTHETIC_SIDE,
        cols: SYNTHETIC_SIDE,
        pixels,
        labels,
    }
}

/// Normalized train and test splits; statistics come from the training split.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
}

pub fn check_labels(raw: &RawSet, classes: usize, what: &str) -> Result<()> {
    if let Some(l) = raw.labels.iter().find(|&&l| usize::from(l) >= classes) {
        return Err(Error::Config(format!("{what}: label {l} outside 0..{classes}")));
    }
    Ok(())
}

pub fn load_raw(source: &DataSource) -> Result<(RawSet, RawSet)> {
    Ok(match source {
        DataSource::Synthetic { train, test, seed } => {
            (synthesize(*train, *seed), synthesize(*test, seed.wrapping_add(1)))
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?),
        DataSource::Csv { train, test } => (load_csv(train)?, load_csv(test)?),
    })
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let (train, test) = load_raw(&cfg.data)?;
    for (raw, what) in [(&train, "training split"), (&test, "test split")] {
        if (raw.rows, raw.cols) != (28, 28) {
            return Err(Error::Config(format!("{what}: images are {}x{}, expected 28x28", raw.rows, raw.cols)));
        }
        if raw.is_empty() {
            return Err(Error::Config(format!("{what} is empty")));
        }
        check_labels(raw, cfg.classes, what)?;
    }
    let normalization = Normalization::fit(&train)?;
    Ok(Splits {
        train: normalization.apply(&train),
        test: normalization.apply(&test),
        normalization,
    })
}
