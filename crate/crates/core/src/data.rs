//! Dataset ingestion: the MNIST IDX format, a digit-line generator that
//! composes MNIST glyphs into 32-row text lines, seeded splits, and a
//! simple on-disk format for generated lines.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::LabelSequence;
use crate::error::{Error, IdxError, Result};
use crate::rng::stream_rng;
use crate::tensor::{Shape, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Sequence(LabelSequence),
}

/// One `(1,h,w,1)` image with pixels in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor,
    pub label: Label,
}

impl LabeledImage {
    pub fn class(&self) -> Option<usize> {
        match self.label {
            Label::Class(k) => Some(k),
            Label::Sequence(_) => None,
        }
    }

    pub fn sequence(&self) -> Option<&LabelSequence> {
        match &self.label {
            Label::Sequence(s) => Some(s),
            Label::Class(_) => None,
        }
    }
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

/// Raw contents of an IDX3 image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// `count · rows · cols` bytes, image-major.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }

    /// Image `i` scaled to `[0,1]`.
    pub fn image(&self, i: usize) -> Tensor {
        let n = self.rows * self.cols;
        let data = self.pixels[i * n..(i + 1) * n]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        Tensor::from_vec([1, self.rows, self.cols, 1], data)
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found });
    }
    Ok(())
}

fn payload(bytes: &[u8], header: usize, len: usize) -> Result<&[u8], IdxError> {
    bytes.get(header..header + len).ok_or(IdxError::Truncated {
        expected: header + len,
        found: bytes.len(),
    })
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let pixels = payload(bytes, 16, count * rows * cols)?.to_vec();
    Ok(IdxImages { rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, count)?.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        images.count() as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an image file and its label file into class-labelled images.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<LabeledImage>> {
    let images = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    if images.count() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.count(),
            labels: labels.len(),
        }
        .into());
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if usize::from(l) >= MNIST_CLASSES {
                return Err(IdxError::LabelRange(l).into());
            }
            Ok(LabeledImage {
                image: images.image(i),
                label: Label::Class(usize::from(l)),
            })
        })
        .collect()
}

/// Standard MNIST file names inside `dir`.
pub fn mnist_paths(dir: &Path, train: bool) -> (PathBuf, PathBuf) {
    let stem = if train { "train" } else { "t10k" };
    (
        dir.join(format!("{stem}-images-idx3-ubyte")),
        dir.join(format!("{stem}-labels-idx1-ubyte")),
    )
}

// ---------------------------------------------------------------------------
// Digit lines
// ---------------------------------------------------------------------------

fn default_min_chars() -> usize {
    3
}
fn default_max_chars() -> usize {
    6
}
fn default_height() -> usize {
    32
}
fn default_width() -> usize {
    200
}
fn default_jitter() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    #[serde(default = "default_min_chars")]
    pub min_chars: usize,
    #[serde(default = "default_max_chars")]
    pub max_chars: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    /// Upper bound on the lead offset and on each inter-glyph gap.
    #[serde(default = "default_jitter")]
    pub jitter: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for LineSpec {
    fn default() -> Self {
        LineSpec {
            min_chars: default_min_chars(),
            max_chars: default_max_chars(),
            height: default_height(),
            width: default_width(),
            jitter: default_jitter(),
            seed: 0,
        }
    }
}

impl LineSpec {
    /// Checks the counts and that `max_chars` glyphs of `glyph_width`
    /// columns fit with worst-case spacing.
    pub fn validate(&self, glyph_width: usize) -> Result<()> {
        if self.min_chars == 0 || self.min_chars > self.max_chars {
            return Err(Error::Generation(format!(
                "character range [{}, {}] is empty or starts at 0",
                self.min_chars, self.max_chars
            )));
        }
        if self.height == 0 {
            return Err(Error::Generation("line height must be positive".into()));
        }
        let needed = self.max_chars * (glyph_width + self.jitter);
        if needed > self.width {
            return Err(Error::Generation(format!(
                "{} glyphs of width {glyph_width} with jitter {} need {needed} columns, canvas has {}",
                self.max_chars, self.jitter, self.width
            )));
        }
        Ok(())
    }

    /// Worst-case CTC frame requirement over the label lengths this spec
    /// can produce (every neighbour repeated).
    pub fn max_required_frames(&self) -> usize {
        2 * self.max_chars - 1
    }
}

/// Nearest-neighbour row resampling of a `(1,h,w,1)` image to `height` rows.
pub fn resize_rows(image: &Tensor, height: usize) -> Tensor {
    let s = image.shape();
    let mut out = Vec::with_capacity(height * s.w);
    for r in 0..height {
        let src = r * s.h / height;
        out.extend_from_slice(&image.data()[src * s.w..(src + 1) * s.w]);
    }
    Tensor::from_vec([1, height, s.w, 1], out)
}

/// Composes glyphs into lines. Line `i` draws from its own RNG stream, so
/// the result does not depend on generation order.
pub fn generate_lines(
    spec: &LineSpec,
    glyphs: &[LabeledImage],
    count: usize,
) -> Result<Vec<LabeledImage>> {
    let mut by_class: Vec<Vec<Tensor>> = vec![Vec::new(); MNIST_CLASSES];
    let mut glyph_width = None;
    for g in glyphs {
        let Some(k) = g.class().filter(|&k| k < MNIST_CLASSES) else {
            return Err(Error::Generation(
                "glyph source must be digit-classified images".into(),
            ));
        };
        let s = g.image.shape();
        if *glyph_width.get_or_insert(s.w) != s.w || s.n != 1 || s.c != 1 {
            return Err(Error::Generation(
                "glyphs must share one (1,h,w,1) shape".into(),
            ));
        }
        by_class[k].push(resize_rows(&g.image, spec.height));
    }
    if let Some(k) = by_class.iter().position(|c| c.is_empty()) {
        return Err(Error::Generation(format!("no glyphs for digit {k}")));
    }
    let glyph_width = glyph_width.expect("non-empty classes imply glyphs");
    spec.validate(glyph_width)?;

    (0..count)
        .map(|i| {
            let mut rng = stream_rng(spec.seed, "line", i as u64);
            let k = rng.random_range(spec.min_chars..=spec.max_chars);
            let mut canvas = vec![0.0; spec.height * spec.width];
            let mut x = rng.random_range(0..=spec.jitter);
            let mut labels = Vec::with_capacity(k);
            for j in 0..k {
                if j > 0 {
                    x += rng.random_range(0..=spec.jitter);
                }
                let digit = rng.random_range(0..MNIST_CLASSES);
                let pool = &by_class[digit];
                let glyph = &pool[rng.random_range(0..pool.len())];
                for r in 0..spec.height {
                    let src = &glyph.data()[r * glyph_width..(r + 1) * glyph_width];
                    canvas[r * spec.width + x..][..glyph_width].copy_from_slice(src);
                }
                x += glyph_width;
                labels.push(digit + 1);
            }
            Ok(LabeledImage {
                image: Tensor::new(Shape::new(1, spec.height, spec.width, 1)?, canvas)?,
                label: Label::Sequence(LabelSequence::new(labels)?),
            })
        })
        .collect()
}

/// Seeded shuffle, then the first `⌊ratio·n⌋` items train and the rest test.
pub fn split<T>(mut data: Vec<T>, ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    data.shuffle(&mut stream_rng(seed, "split", 0));
    let n_train = (ratio * data.len() as f64 + 1e-9).floor() as usize;
    let test = data.split_off(n_train);
    Ok((data, test))
}

/// Seeded subset of `n` items (all of them if fewer).
pub fn subset<T>(mut data: Vec<T>, n: usize, seed: u64) -> Vec<T> {
    data.shuffle(&mut stream_rng(seed, "subset", 0));
    data.truncate(n);
    data
}

// ---------------------------------------------------------------------------
// Persisted lines
// ---------------------------------------------------------------------------

/// JSON index written next to a raw little-endian f32 pixel blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineIndex {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub labels: Vec<Vec<usize>>,
    /// Blob file name, relative to the index.
    pub blob: String,
}

/// Writes `lines` as `<stem>.json` + `<stem>.f32` inside `dir`.
pub fn save_lines(dir: &Path, stem: &str, lines: &[LabeledImage]) -> Result<PathBuf> {
    let first = lines
        .first()
        .ok_or_else(|| Error::Contract("no lines to save".into()))?;
    let s = first.image.shape();
    let mut blob = Vec::with_capacity(lines.len() * s.len() * 4);
    let mut labels = Vec::with_capacity(lines.len());
    for line in lines {
        if line.image.shape() != s {
            return Err(Error::Dimension(
                "all saved lines must share one shape".into(),
            ));
        }
        let seq = line
            .sequence()
            .ok_or_else(|| Error::Contract("saved lines need sequence labels".into()))?;
        labels.push(seq.labels().to_vec());
        for &v in line.image.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let index = LineIndex {
        width: s.w,
        height: s.h,
        count: lines.len(),
        labels,
        blob: format!("{stem}.f32"),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(&index.blob), &blob)?;
    let path = dir.join(format!("{stem}.json"));
    write_file(&path, &serde_json::to_vec(&index)?)?;
    Ok(path)
}

pub fn load_lines(index_path: &Path) -> Result<Vec<LabeledImage>> {
    let index: LineIndex = serde_json::from_slice(&read_file(index_path)?)?;
    if index.labels.len() != index.count {
        return Err(Error::Contract(format!(
            "line index lists {} labels for {} lines",
            index.labels.len(),
            index.count
        )));
    }
    let blob_path = index_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&index.blob);
    let blob = read_file(&blob_path)?;
    let per_line = index.width * index.height;
    let expected = index.count * per_line * 4;
    if blob.len() != expected {
        return Err(IdxError::Truncated {
            expected,
            found: blob.len(),
        }
        .into());
    }
    let shape = Shape::new(1, index.height, index.width, 1)?;
    index
        .labels
        .into_iter()
        .enumerate()
        .map(|(i, labels)| {
            let bytes = &blob[i * per_line * 4..(i + 1) * per_line * 4];
            let data = bytes
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect();
            Ok(LabeledImage {
                image: Tensor::new(shape, data)?,
                label: Label::Sequence(LabelSequence::new(labels)?),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(rows: usize, cols: usize, pixels: Vec<u8>) -> IdxImages {
        IdxImages { rows, cols, pixels }
    }

    /// One glyph per digit: a solid column block whose width encodes the digit.
    fn glyphs() -> Vec<LabeledImage> {
        (0..10)
            .map(|d| LabeledImage {
                image: Tensor::from_fn(Shape::new(1, 28, 28, 1).unwrap(), |i| {
                    if i % 28 <= d {
                        1.0
                    } else {
                        0.5
                    }
                }),
                label: Label::Class(d),
            })
            .collect()
    }

    #[test]
    fn single_bright_pixel_fixture() {
        let mut px = vec![0u8; 4];
        px[2] = 255;
        let parsed = parse_idx_images(&encode_idx_images(&fixture(2, 2, px))).unwrap();
        assert_eq!(parsed.count(), 1);
        assert_eq!(parsed.image(0).data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let images = encode_idx_images(&fixture(2, 2, vec![1; 8]));
        assert_eq!(
            parse_idx_labels(&images),
            Err(IdxError::BadMagic {
                expected: IDX_LABELS_MAGIC,
                found: IDX_IMAGES_MAGIC
            })
        );
        assert!(matches!(
            parse_idx_images(&images[..images.len() - 1]),
            Err(IdxError::Truncated { .. })
        ));
        assert!(matches!(
            parse_idx_images(&images[..6]),
            Err(IdxError::Truncated { .. })
        ));
    }

    #[test]
    fn load_checks_counts_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_file(&img, &encode_idx_images(&fixture(2, 2, vec![7; 8]))).unwrap();
        write_file(&lab, &encode_idx_labels(&[3])).unwrap();
        assert!(matches!(
            load_mnist_idx(&img, &lab),
            Err(Error::Idx(IdxError::CountMismatch {
                images: 2,
                labels: 1
            }))
        ));
        write_file(&lab, &encode_idx_labels(&[3, 12])).unwrap();
        assert!(matches!(
            load_mnist_idx(&img, &lab),
            Err(Error::Idx(IdxError::LabelRange(12)))
        ));
        write_file(&lab, &encode_idx_labels(&[3, 9])).unwrap();
        let data = load_mnist_idx(&img, &lab).unwrap();
        assert_eq!(data[1].class(), Some(9));
        assert!(matches!(
            load_mnist_idx(&dir.path().join("missing"), &lab),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn resize_is_nearest_row() {
        let img = Tensor::from_fn(Shape::new(1, 28, 2, 1).unwrap(), |i| (i / 2) as f64);
        let big = resize_rows(&img, 32);
        let rows: Vec<f64> = big.data().chunks(2).map(|r| r[0]).collect();
        let expected: Vec<f64> = (0..32).map(|r| (r * 28 / 32) as f64).collect();
        assert_eq!(rows, expected);
    }

    #[test]
    fn single_glyph_line_is_left_aligned() {
        let spec = LineSpec {
            min_chars: 1,
            max_chars: 1,
            jitter: 0,
            width: 40,
            ..LineSpec::default()
        };
        let lines = generate_lines(&spec, &glyphs(), 5).unwrap();
        for line in &lines {
            let seq = line.sequence().unwrap();
            assert_eq!(seq.len(), 1);
            let d = seq.labels()[0] - 1;
            let row = &line.image.data()[..40];
            assert!(row[..=d].iter().all(|&v| v == 1.0));
            assert!(row[d + 1..28].iter().all(|&v| v == 0.5));
            assert!(row[28..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn lines_are_deterministic_and_bounded() {
        let spec = LineSpec::default();
        let a = generate_lines(&spec, &glyphs(), 20).unwrap();
        assert_eq!(a, generate_lines(&spec, &glyphs(), 20).unwrap());
        let other = generate_lines(&LineSpec { seed: 1, ..spec }, &glyphs(), 20).unwrap();
        assert_ne!(a, other);
        for line in &a {
            assert_eq!(line.image.shape().to_array(), [1, 32, 200, 1]);
            assert!(line.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let k = line.sequence().unwrap().len();
            assert!((3..=6).contains(&k));
            // glyph pixels are never 0 here, so the lit area is exactly k glyphs
            let lit = line.image.data().iter().filter(|&&v| v != 0.0).count();
            assert_eq!(lit, k * 28 * 32);
        }
    }

    #[test]
    fn overflow_is_rejected() {
        let spec = LineSpec {
            max_chars: 8,
            width: 200,
            jitter: 4,
            ..LineSpec::default()
        };
        assert!(matches!(
            generate_lines(&spec, &glyphs(), 1),
            Err(Error::Generation(_))
        ));
        assert!(matches!(
            generate_lines(&LineSpec::default(), &glyphs()[..9], 1),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn split_sizes() {
        let (tr, te) = split((0..10).collect(), 0.9, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (9, 1));
        let (tr, te) = split(vec![1, 2], 0.5, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 1));
        let again = split((0..10).collect::<Vec<_>>(), 0.9, 3).unwrap();
        let mut all = again.0.clone();
        all.extend(&again.1);
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split((0..10).collect::<Vec<_>>(), 0.9, 3).unwrap(), again);
        assert!(split(vec![1], 1.0, 0).is_err());
    }

    #[test]
    fn persisted_lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lines = generate_lines(&LineSpec::default(), &glyphs(), 3).unwrap();
        let path = save_lines(dir.path(), "lines", &lines).unwrap();
        let back = load_lines(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in lines.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert!(a.image.max_abs_diff(&b.image) < 1e-7);
        }
    }
}
