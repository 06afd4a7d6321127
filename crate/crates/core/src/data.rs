//! IDX parsing, binarization, inversion and balanced evaluation sets.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{streams, substream, Rng};

pub const IMAGE_SIDE: usize = 28;
pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Contents of one IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IdxFile {
    Images(Array3<u8>),
    Labels(Array1<u8>),
}

impl IdxFile {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::TruncatedPayload {
                expected: 4,
                found: bytes.len(),
            });
        }
        let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
        // byte 2 is the element type (0x08 = unsigned byte), byte 3 the rank
        if magic >> 8 != 0x08 {
            return Err(Error::MagicMismatch { found: magic });
        }
        let rank = (magic & 0xff) as u8;
        if rank != 1 && rank != 3 {
            return Err(Error::UnsupportedRank(rank));
        }
        let header = 4 + 4 * rank as usize;
        if bytes.len() < header {
            return Err(Error::TruncatedPayload {
                expected: header,
                found: bytes.len(),
            });
        }
        let dims: Vec<usize> = bytes[4..header]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let expected: usize = dims.iter().product();
        let payload = &bytes[header..];
        if payload.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        let payload = payload[..expected].to_vec();
        Ok(match rank {
            1 => IdxFile::Labels(Array1::from(payload)),
            _ => IdxFile::Images(
                Array3::from_shape_vec((dims[0], dims[1], dims[2]), payload).expect("length checked"),
            ),
        })
    }

    /// Serializes back to uncompressed IDX bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (magic, dims, data): (u32, Vec<usize>, Vec<u8>) = match self {
            IdxFile::Images(a) => (IMAGE_MAGIC, a.shape().to_vec(), a.iter().copied().collect()),
            IdxFile::Labels(a) => (LABEL_MAGIC, vec![a.len()], a.to_vec()),
        };
        let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
        out.extend_from_slice(&magic.to_be_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&data);
        out
    }
}

/// Reads an IDX file, transparently inflating gzip (magic `1f 8b`).
pub fn load_idx(path: &Path) -> Result<IdxFile> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut inflated = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut inflated)
            .map_err(|e| Error::io(path, e))?;
        IdxFile::parse(&inflated)
    } else {
        IdxFile::parse(&raw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// File prefix used by the standard distribution.
    pub fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdxDataset {
    pub images: Array3<u8>,
    pub labels: Option<Array1<u8>>,
    pub name: String,
    pub split: Split,
}

impl IdxDataset {
    pub fn new(images: Array3<u8>, labels: Option<Array1<u8>>, name: impl Into<String>, split: Split) -> Result<Self> {
        let (n, h, w) = images.dim();
        if n == 0 {
            return Err(Error::EmptyInput("dataset has no images"));
        }
        if h != IMAGE_SIDE || w != IMAGE_SIDE {
            return Err(Error::UnsupportedShape { height: h, width: w });
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::LengthMismatch { left: n, right: l.len() });
            }
        }
        Ok(Self {
            images: images.as_standard_layout().into_owned(),
            labels,
            name: name.into(),
            split,
        })
    }

    /// Loads `<dir>/{train,t10k}-images-idx3-ubyte[.gz]` and the matching
    /// label file when present.
    pub fn load(dir: &Path, name: &str, split: Split) -> Result<Self> {
        let images = match load_idx(&find(dir, split.prefix(), "images-idx3-ubyte"))? {
            IdxFile::Images(a) => a,
            IdxFile::Labels(_) => return Err(Error::UnsupportedRank(1)),
        };
        let label_path = find(dir, split.prefix(), "labels-idx1-ubyte");
        let labels = if label_path.exists() {
            match load_idx(&label_path)? {
                IdxFile::Labels(l) => Some(l),
                IdxFile::Images(_) => return Err(Error::UnsupportedRank(3)),
            }
        } else {
            None
        };
        Self::new(images, labels, name, split)
    }

    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened pixels of image `i`.
    pub fn pixels(&self, i: usize) -> &[u8] {
        let start = i * PIXELS;
        &self.images.as_slice().expect("standard layout")[start..start + PIXELS]
    }

    pub fn inverted(&self) -> Self {
        Self {
            images: invert(&self.images),
            labels: self.labels.clone(),
            name: format!("{}-inverted", self.name),
            split: self.split,
        }
    }

    /// Keeps the first `n` images.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len()).max(1);
        Self {
            images: self.images.slice(ndarray::s![..n, .., ..]).to_owned(),
            labels: self.labels.as_ref().map(|l| l.slice(ndarray::s![..n]).to_owned()),
            name: self.name.clone(),
            split: self.split,
        }
    }
}

fn find(dir: &Path, prefix: &str, stem: &str) -> PathBuf {
    let plain = dir.join(format!("{prefix}-{stem}"));
    let gz = dir.join(format!("{prefix}-{stem}.gz"));
    if !plain.exists() && gz.exists() {
        gz
    } else {
        plain
    }
}

/// Binary pixels with the dataset rows they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct BinarizedBatch {
    pub data: Matrix,
    pub source_indices: Vec<usize>,
    pub seed_state: String,
}

fn binarize_into(pixels: &[u8], row: &mut [f64], rng: &mut Rng) {
    for (dst, &p) in row.iter_mut().zip(pixels) {
        let u: f64 = rng.random();
        *dst = if u < p as f64 / 255.0 { 1.0 } else { 0.0 };
    }
}

/// Fresh Bernoulli(pixel/255) draws for the given rows.
pub fn binarize_dynamic(
    dataset: &IdxDataset,
    indices: &[usize],
    rng: &mut Rng,
    seed_state: impl Into<String>,
) -> BinarizedBatch {
    let mut data = Array2::zeros((indices.len(), PIXELS));
    for (row, &i) in data.rows_mut().into_iter().zip(indices) {
        binarize_into(dataset.pixels(i), row.into_slice().expect("row-major"), rng);
    }
    BinarizedBatch {
        data,
        source_indices: indices.to_vec(),
        seed_state: seed_state.into(),
    }
}

/// Evaluation binarization: each example draws from its own substream, so a
/// row's bits depend only on `(seed, index)` and not on batch composition.
pub fn binarize_eval(dataset: &IdxDataset, indices: &[usize], seed: u64) -> BinarizedBatch {
    let mut data = Array2::zeros((indices.len(), PIXELS));
    for (row, &i) in data.rows_mut().into_iter().zip(indices) {
        let mut rng = substream(seed, streams::BINARIZE_EVAL, i as u64);
        binarize_into(dataset.pixels(i), row.into_slice().expect("row-major"), &mut rng);
    }
    BinarizedBatch {
        data,
        source_indices: indices.to_vec(),
        seed_state: format!("{}:{seed}", streams::BINARIZE_EVAL),
    }
}

pub fn invert(images: &Array3<u8>) -> Array3<u8> {
    images.mapv(|p| 255 - p)
}

/// Indices realizing a balanced pair: the smaller side whole, the larger
/// subsampled without replacement (sorted).
pub fn balanced_indices(n_in: usize, n_out: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_in == 0 || n_out == 0 {
        return Err(Error::EmptyInput("balanced_pair needs nonempty score vectors"));
    }
    let m = n_in.min(n_out);
    let pick = |n: usize, rng: &mut Rng| {
        if n == m {
            (0..n).collect()
        } else {
            let mut v = rand::seq::index::sample(rng, n, m).into_vec();
            v.sort_unstable();
            v
        }
    };
    let a = pick(n_in, rng);
    let b = pick(n_out, rng);
    Ok((a, b))
}

pub fn balanced_pair(in_scores: ArrayView1<f64>, ood_scores: ArrayView1<f64>, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let (a, b) = balanced_indices(in_scores.len(), ood_scores.len(), rng)?;
    Ok((
        a.into_iter().map(|i| in_scores[i]).collect(),
        b.into_iter().map(|i| ood_scores[i]).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use proptest::prelude::*;
    use std::io::Write;

    fn image_bytes(n: u32, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3];
        for d in [n, 28, 28] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend((0..n as usize * PIXELS).map(fill));
        b
    }

    #[test]
    fn parses_smallest_image_file() {
        let file = IdxFile::parse(&image_bytes(2, |i| (i % 256) as u8)).unwrap();
        match file {
            IdxFile::Images(a) => {
                assert_eq!(a.shape(), &[2, 28, 28]);
                assert_eq!(a[[1, 0, 0]], (PIXELS % 256) as u8);
            }
            _ => panic!("expected images"),
        }
    }

    #[test]
    fn parses_labels() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 5, 9, 8, 7, 6, 5];
        assert_eq!(IdxFile::parse(&bytes).unwrap(), IdxFile::Labels(Array1::from(vec![9, 8, 7, 6, 5])));
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(matches!(
            IdxFile::parse(&[0, 0, 7, 3, 0, 0, 0, 1]),
            Err(Error::MagicMismatch { found: 0x0703 })
        ));
        assert!(matches!(IdxFile::parse(&[0, 0, 8, 2, 0, 0, 0, 1]), Err(Error::UnsupportedRank(2))));
        let mut short = image_bytes(2, |_| 0);
        short.pop();
        assert!(matches!(
            IdxFile::parse(&short),
            Err(Error::TruncatedPayload { expected: 1568, found: 1567 })
        ));
    }

    #[test]
    fn gzip_is_transparent() {
        let bytes = image_bytes(3, |i| (i * 7 % 256) as u8);
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("a.idx");
        let gz = dir.path().join("a.idx.gz");
        fs::write(&plain, &bytes).unwrap();
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&bytes).unwrap();
        fs::write(&gz, enc.finish().unwrap()).unwrap();
        assert_eq!(load_idx(&plain).unwrap(), load_idx(&gz).unwrap());
    }

    #[test]
    fn dataset_rejects_other_shapes() {
        let a = Array3::<u8>::zeros((1, 32, 32));
        assert!(matches!(
            IdxDataset::new(a, None, "x", Split::Test),
            Err(Error::UnsupportedShape { height: 32, width: 32 })
        ));
    }

    fn dataset(n: usize, fill: impl Fn(usize) -> u8) -> IdxDataset {
        let v: Vec<u8> = (0..n * PIXELS).map(fill).collect();
        IdxDataset::new(Array3::from_shape_vec((n, 28, 28), v).unwrap(), None, "t", Split::Test).unwrap()
    }

    #[test]
    fn extreme_pixels_are_deterministic() {
        let ds = dataset(2, |i| if i < PIXELS { 0 } else { 255 });
        let mut rng = substream(1, "t", 0);
        let b = binarize_dynamic(&ds, &[0, 1], &mut rng, "t");
        assert!(b.data.row(0).iter().all(|&x| x == 0.0));
        assert!(b.data.row(1).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn binarized_mean_matches_pixel_intensity() {
        // 128 draws per image row times enough rows to reach 1e5 draws
        let rows = 128;
        let ds = dataset(1, |_| 128);
        let mut rng = substream(5, "t", 0);
        let b = binarize_dynamic(&ds, &vec![0; rows], &mut rng, "t");
        let n = (rows * PIXELS) as f64;
        assert!(n >= 1e5);
        let p = 128.0 / 255.0;
        let mean = b.data.sum() / n;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!((mean - p).abs() < 3.0 * se, "{mean} vs {p}");
    }

    #[test]
    fn different_seeds_give_different_bits() {
        let ds = dataset(1, |_| 128);
        let a = binarize_eval(&ds, &[0], 1);
        let b = binarize_eval(&ds, &[0], 2);
        assert_ne!(a.data, b.data);
        let mut r1 = substream(1, "x", 0);
        let mut r2 = substream(2, "x", 0);
        assert_ne!(
            binarize_dynamic(&ds, &[0], &mut r1, "").data,
            binarize_dynamic(&ds, &[0], &mut r2, "").data
        );
    }

    #[test]
    fn eval_binarization_ignores_batch_composition() {
        let ds = dataset(3, |i| (i % 200) as u8 + 20);
        let all = binarize_eval(&ds, &[0, 1, 2], 9);
        let one = binarize_eval(&ds, &[2], 9);
        assert_eq!(all.data.row(2), one.data.row(0));
    }

    #[test]
    fn invert_examples() {
        let a = Array3::from_shape_vec((1, 1, 2), vec![0u8, 255]).unwrap();
        assert_eq!(invert(&a).into_raw_vec_and_offset().0, vec![255, 0]);
    }

    #[test]
    fn balanced_pair_sizes() {
        let mut rng = substream(3, streams::BALANCE, 0);
        let (a, b) = balanced_indices(10_000, 10_000, &mut rng).unwrap();
        assert_eq!(a, (0..10_000).collect::<Vec<_>>());
        assert_eq!(b.len(), 10_000);
        let (a, b) = balanced_indices(70_000, 32_460, &mut rng).unwrap();
        assert_eq!((a.len(), b.len()), (32_460, 32_460));
        assert_eq!(b, (0..32_460).collect::<Vec<_>>());

        let ins = Array1::from(vec![1.0, 2.0, 3.0]);
        let outs = Array1::from(vec![10.0, 20.0, 30.0, 40.0, 50.0]);
        let run = || balanced_pair(ins.view(), outs.view(), &mut substream(4, streams::BALANCE, 0)).unwrap();
        let (x, y) = run();
        assert_eq!(x, vec![1.0, 2.0, 3.0]);
        assert_eq!(y.len(), 3);
        assert!(y.iter().all(|v| outs.iter().any(|o| o == v)));
        assert!(y.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(run(), (x, y));
        assert!(matches!(
            balanced_pair(Array1::zeros(0).view(), outs.view(), &mut rng),
            Err(Error::EmptyInput(_))
        ));
    }

    proptest! {
        #[test]
        fn idx_roundtrip_is_bit_exact(n in 1u32..4, seed in any::<u64>()) {
            let bytes = image_bytes(n, |i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8);
            prop_assert_eq!(IdxFile::parse(&bytes).unwrap().to_bytes(), bytes);
        }

        #[test]
        fn label_roundtrip_is_bit_exact(labels in proptest::collection::vec(any::<u8>(), 1..50)) {
            let mut bytes = vec![0, 0, 8, 1];
            bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            bytes.extend_from_slice(&labels);
            prop_assert_eq!(IdxFile::parse(&bytes).unwrap().to_bytes(), bytes);
        }

        #[test]
        fn invert_is_an_involution(v in proptest::collection::vec(any::<u8>(), 1..100)) {
            let a = Array3::from_shape_vec((1, 1, v.len()), v).unwrap();
            prop_assert_eq!(invert(&invert(&a)), a);
        }
    }
}
