//! MNIST IDX parsing and deterministic mini-batch streams.
//!
//! The IDX layout is the classic big-endian one:
//!
//! ```text
//! images (IDX3): magic 0x00000803, count, rows, cols (u32 BE), then
//!                count*rows*cols uint8 pixels, row-major
//! labels (IDX1): magic 0x00000801, count (u32 BE), then count uint8 labels
//! ```
//!
//! Pixels are scaled to `[0, 1]` by division by 255. Shuffling is
//! reproducible forever: a ChaCha8 stream keyed by `(seed, epoch)` drives a
//! Fisher-Yates pass (see [`shuffled_indices`] for the exact scheme).

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{Array2, NdFloat};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const IDX3_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX1_LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Which half of the benchmark a dataset holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Normalized images plus labels for one split.
#[derive(Debug, Clone)]
pub struct Dataset<F> {
    /// `samples x features`, every entry in `[0, 1]`.
    pub images: Array2<F>,
    /// Class indices in `0..=9`, one per image row.
    pub labels: Vec<u8>,
    pub split: Split,
}

impl<F: NdFloat> Dataset<F> {
    /// Validates the invariants (pixel range, label range, matching counts).
    pub fn new(images: Array2<F>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::DatasetInvariant(format!(
                "{} image rows but {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::LabelDomain(format!("label {bad} not in 0..=9")));
        }
        let lo = F::zero();
        let hi = F::one();
        if images.iter().any(|&v| !(v >= lo && v <= hi)) {
            return Err(Error::DatasetInvariant(
                "pixel value outside [0, 1]".to_string(),
            ));
        }
        Ok(Self {
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.images.ncols()
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::IdxTruncated(format!(
            "stream too short to read {what} at byte {offset}"
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses an IDX3 image stream into a `count x (rows*cols)` matrix with
/// pixels scaled from `0..=255` to `[0, 1]` by division by 255.
pub fn parse_idx_images<F: NdFloat>(bytes: &[u8]) -> Result<Array2<F>> {
    let magic = read_be_u32(bytes, 0, "image magic")?;
    if magic != IDX3_IMAGE_MAGIC {
        return Err(Error::IdxFormat(format!(
            "image magic {magic:#010x}, expected {IDX3_IMAGE_MAGIC:#010x}"
        )));
    }
    let count = read_be_u32(bytes, 4, "image count")? as usize;
    let rows = read_be_u32(bytes, 8, "image rows")? as usize;
    let cols = read_be_u32(bytes, 12, "image cols")? as usize;
    let pixels = rows
        .checked_mul(cols)
        .and_then(|p| p.checked_mul(count))
        .ok_or_else(|| Error::IdxFormat("image header dimensions overflow".to_string()))?;
    let data = &bytes[16.min(bytes.len())..];
    if data.len() < pixels {
        return Err(Error::IdxTruncated(format!(
            "header declares {pixels} pixel bytes, stream has {}",
            data.len()
        )));
    }
    let denom = F::from(255.0).unwrap();
    let values: Vec<F> = data[..pixels]
        .iter()
        .map(|&b| F::from(b).unwrap() / denom)
        .collect();
    Ok(Array2::from_shape_vec((count, rows * cols), values).expect("shape matches length"))
}

/// Parses an IDX1 label stream into a vector of class indices.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0, "label magic")?;
    if magic != IDX1_LABEL_MAGIC {
        return Err(Error::IdxFormat(format!(
            "label magic {magic:#010x}, expected {IDX1_LABEL_MAGIC:#010x}"
        )));
    }
    let count = read_be_u32(bytes, 4, "label count")? as usize;
    let data = &bytes[8.min(bytes.len())..];
    if data.len() < count {
        return Err(Error::IdxTruncated(format!(
            "header declares {count} labels, stream has {}",
            data.len()
        )));
    }
    for (i, &b) in data[..count].iter().enumerate() {
        if b as usize >= NUM_CLASSES {
            return Err(Error::LabelDomain(format!("label byte {b} at index {i}")));
        }
    }
    Ok(data[..count].to_vec())
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingData(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    // gzip streams start with 0x1f 0x8b regardless of file extension
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Loads one split from a `(images, labels)` IDX file pair, transparently
/// decompressing gzip.
pub fn load_split<F: NdFloat>(
    images_path: &Path,
    labels_path: &Path,
    split: Split,
) -> Result<Dataset<F>> {
    let images = parse_idx_images(&read_maybe_gzip(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gzip(labels_path)?)?;
    Dataset::new(images, labels, split)
}

/// Resolves the standard MNIST file pair for a split inside `dir`, trying
/// the plain name first and then the `.gz` variant.
pub fn standard_pair(dir: &Path, split: Split) -> Result<(PathBuf, PathBuf)> {
    let (img, lbl) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    let resolve = |name: &str| -> Result<PathBuf> {
        let plain = dir.join(name);
        if plain.exists() {
            return Ok(plain);
        }
        let gz = dir.join(format!("{name}.gz"));
        if gz.exists() {
            return Ok(gz);
        }
        Err(Error::MissingData(plain))
    };
    Ok((resolve(img)?, resolve(lbl)?))
}

/// Loads a split from a directory holding the standard MNIST file names.
pub fn load_standard_split<F: NdFloat>(dir: &Path, split: Split) -> Result<Dataset<F>> {
    let (img, lbl) = standard_pair(dir, split)?;
    load_split(&img, &lbl, split)
}

// Stream tags for deriving independent ChaCha8 generators from one seed.
pub(crate) const STREAM_INIT: u64 = 0;
pub(crate) const STREAM_SHUFFLE: u64 = 1;
pub(crate) const STREAM_GRADCHECK: u64 = 2;

/// ChaCha8 generator keyed by `(seed, stream, index)` packed little-endian
/// into the 32-byte key (bytes 0-7, 8-15, 16-23; rest zero). ChaCha8's
/// output stream is portable, so this mapping is stable across platforms
/// and releases.
pub(crate) fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Deterministic permutation of `0..n` for one epoch.
///
/// Scheme (fixed forever for reproducibility): ChaCha8 keyed by
/// `(seed, epoch)`, then an in-place Fisher-Yates pass where the swap
/// partner for position `i` is `next_u64() % (i + 1)`.
pub fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<u32> {
    let mut rng = stream_rng(seed, STREAM_SHUFFLE, epoch);
    let mut idx: Vec<u32> = (0..n as u32).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

/// One mini-batch: gathered input rows, their targets, and the source
/// sample indices.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub inputs: Array2<F>,
    pub targets: Vec<u8>,
    pub indices: Vec<u32>,
}

impl<F: NdFloat> Batch<F> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Lazy iterator over one epoch's batches in shuffled order.
pub struct EpochBatches<'a, F> {
    dataset: &'a Dataset<F>,
    permutation: Vec<u32>,
    batch_size: usize,
    cursor: usize,
}

impl<'a, F: NdFloat> EpochBatches<'a, F> {
    pub fn num_batches(&self) -> usize {
        self.permutation.len().div_ceil(self.batch_size)
    }
}

impl<'a, F: NdFloat> Iterator for EpochBatches<'a, F> {
    type Item = Batch<F>;

    fn next(&mut self) -> Option<Batch<F>> {
        if self.cursor >= self.permutation.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.permutation.len());
        let indices = self.permutation[self.cursor..end].to_vec();
        self.cursor = end;
        let dim = self.dataset.feature_dim();
        let mut inputs = Array2::zeros((indices.len(), dim));
        let mut targets = Vec::with_capacity(indices.len());
        for (row, &src) in indices.iter().enumerate() {
            inputs
                .row_mut(row)
                .assign(&self.dataset.images.row(src as usize));
            targets.push(self.dataset.labels[src as usize]);
        }
        Some(Batch {
            inputs,
            targets,
            indices,
        })
    }
}

/// Shuffled batch stream for `(seed, epoch)`. Identical arguments yield a
/// bit-identical sequence; every sample index appears exactly once per
/// epoch and the last batch may be short.
pub fn make_epoch_batches<F: NdFloat>(
    dataset: &Dataset<F>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> EpochBatches<'_, F> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    EpochBatches {
        dataset,
        permutation: shuffled_indices(dataset.len(), seed, epoch),
        batch_size,
        cursor: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-built IDX3 stream: header plus raw pixel bytes.
    pub(crate) fn idx3_fixture(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX3_IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&count.to_be_bytes());
        bytes.extend_from_slice(&rows.to_be_bytes());
        bytes.extend_from_slice(&cols.to_be_bytes());
        bytes.extend_from_slice(pixels);
        bytes
    }

    pub(crate) fn idx1_fixture(count: u32, labels: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX1_LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&count.to_be_bytes());
        bytes.extend_from_slice(labels);
        bytes
    }

    #[test]
    fn parses_two_by_two_images() {
        let bytes = idx3_fixture(2, 2, 2, &[0, 51, 102, 153, 204, 255, 0, 255]);
        let images = parse_idx_images::<f64>(&bytes).unwrap();
        assert_eq!(images.shape(), &[2, 4]);
        assert_eq!(images[[0, 0]], 0.0);
        assert_eq!(images[[0, 1]], 51.0 / 255.0);
        assert_eq!(images[[1, 1]], 1.0);
    }

    #[test]
    fn pixel_255_maps_to_exactly_one() {
        let bytes = idx3_fixture(1, 1, 1, &[255]);
        let images = parse_idx_images::<f32>(&bytes).unwrap();
        assert_eq!(images[[0, 0]], 1.0f32);
    }

    #[test]
    fn all_zero_pixels_give_zero_matrix() {
        let bytes = idx3_fixture(2, 1, 3, &[0; 6]);
        let images = parse_idx_images::<f64>(&bytes).unwrap();
        assert!(images.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_image_magic_is_format_error() {
        let mut bytes = idx3_fixture(1, 1, 1, &[7]);
        bytes[3] = 0x01; // label magic in an image stream
        assert!(matches!(
            parse_idx_images::<f64>(&bytes),
            Err(Error::IdxFormat(_))
        ));
    }

    #[test]
    fn short_image_payload_is_truncation_error() {
        let bytes = idx3_fixture(2, 2, 2, &[1, 2, 3]); // needs 8 bytes
        assert!(matches!(
            parse_idx_images::<f64>(&bytes),
            Err(Error::IdxTruncated(_))
        ));
    }

    #[test]
    fn parses_labels() {
        let bytes = idx1_fixture(3, &[0, 5, 9]);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![0, 5, 9]);
    }

    #[test]
    fn empty_label_stream_is_ok() {
        let bytes = idx1_fixture(0, &[]);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn label_ten_is_domain_error() {
        let bytes = idx1_fixture(2, &[3, 10]);
        assert!(matches!(
            parse_idx_labels(&bytes),
            Err(Error::LabelDomain(_))
        ));
    }

    #[test]
    fn wrong_label_magic_is_format_error() {
        let mut bytes = idx1_fixture(1, &[1]);
        bytes[3] = 0x03;
        assert!(matches!(
            parse_idx_labels(&bytes),
            Err(Error::IdxFormat(_))
        ));
    }

    fn tiny_dataset(n: usize) -> Dataset<f64> {
        let images = Array2::from_shape_fn((n, 3), |(i, j)| ((i + j) % 7) as f64 / 10.0);
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::new(images, labels, Split::Train).unwrap()
    }

    #[test]
    fn batch_sizes_partition_the_epoch() {
        let ds = tiny_dataset(5);
        let sizes: Vec<usize> = make_epoch_batches(&ds, 2, 0, 0).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn same_seed_same_epoch_is_bit_identical() {
        let ds = tiny_dataset(23);
        let a: Vec<Vec<u32>> = make_epoch_batches(&ds, 4, 9, 3).map(|b| b.indices).collect();
        let b: Vec<Vec<u32>> = make_epoch_batches(&ds, 4, 9, 3).map(|b| b.indices).collect();
        assert_eq!(a, b);
        let c: Vec<Vec<u32>> = make_epoch_batches(&ds, 4, 9, 4).map(|b| b.indices).collect();
        assert_ne!(a, c, "different epoch should reshuffle");
    }

    #[test]
    fn epoch_covers_every_index_once() {
        let ds = tiny_dataset(37);
        let mut seen: Vec<u32> = make_epoch_batches(&ds, 5, 1, 2)
            .flat_map(|b| b.indices)
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..37).collect::<Vec<u32>>());
    }

    #[test]
    fn mnist_sized_epoch_has_469_batches() {
        // 60000 = 468 * 128 + 96
        let perm = shuffled_indices(60000, 0, 0);
        assert_eq!(perm.len(), 60000);
        let full = 60000 / 128;
        let rem = 60000 % 128;
        assert_eq!(full, 468);
        assert_eq!(rem, 96);
        let ds = Dataset::<f32>::new(
            Array2::zeros((60000, 1)),
            vec![0u8; 60000],
            Split::Train,
        )
        .unwrap();
        let batches = make_epoch_batches(&ds, 128, 0, 0);
        assert_eq!(batches.num_batches(), 469);
    }

    #[test]
    fn idx_round_trip_recovers_bytes() {
        let pixels: Vec<u8> = (0..=255).collect();
        let bytes = idx3_fixture(16, 4, 4, &pixels);
        let images = parse_idx_images::<f64>(&bytes).unwrap();
        for (i, &px) in pixels.iter().enumerate() {
            let (r, c) = (i / 16, i % 16);
            assert_eq!(images[[r, c]], px as f64 / 255.0);
        }
    }

    #[test]
    fn gzip_files_load_transparently() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let img = idx3_fixture(2, 1, 2, &[10, 20, 30, 40]);
        let lbl = idx1_fixture(2, &[1, 2]);
        let img_path = dir.path().join("imgs.gz");
        let lbl_path = dir.path().join("lbls");
        let mut enc =
            flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&img).unwrap();
        std::fs::write(&img_path, enc.finish().unwrap()).unwrap();
        std::fs::write(&lbl_path, &lbl).unwrap();
        let ds = load_split::<f32>(&img_path, &lbl_path, Split::Test).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![1, 2]);
    }
}
