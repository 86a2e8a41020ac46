//! Datasets: MNIST in raw IDX form plus small synthetic fixtures.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled inputs stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, dim: usize, class_count: usize) -> Result<Self> {
        if dim == 0 || class_count == 0 {
            return Err(Error::Config(
                "dataset dimension and class count must be positive".into(),
            ));
        }
        if labels.is_empty() {
            return Err(Error::Domain("empty dataset".into()));
        }
        if inputs.len() != labels.len() * dim {
            return Err(Error::shape("dataset inputs", labels.len() * dim, inputs.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dataset inputs".into()));
        }
        Ok(Dataset {
            inputs,
            labels,
            dim,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// The rows at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<Dataset> {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Domain(format!("row {i} out of range for {} rows", self.len())));
            }
            inputs.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(inputs, labels, self.dim, self.class_count)
    }

    /// Class-stratified random subset of `n` rows in shuffled order.
    ///
    /// Each class receives `floor(n * count / len)` rows; the leftover rows
    /// go to the classes with the largest fractional shares (lower class
    /// index first on ties).
    pub fn subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::Domain(format!("subset size {n} must lie in 1..={}", self.len())));
        }
        let counts = self.class_counts();
        let total = self.len();
        let mut quota: Vec<usize> = counts.iter().map(|&c| n * c / total).collect();
        let mut leftover = n - quota.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..self.class_count).collect();
        // Remainders are (n * c) mod total; compare them exactly as integers.
        order.sort_by_key(|&c| std::cmp::Reverse((n * counts[c]) % total));
        for c in order {
            if leftover == 0 {
                break;
            }
            if quota[c] < counts[c] {
                quota[c] += 1;
                leftover -= 1;
            }
        }

        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.class_count];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        let mut chosen = Vec::with_capacity(n);
        for (c, rows) in by_class.iter_mut().enumerate() {
            rows.shuffle(&mut rng::stream(seed, Domain::Subset, c as u64, 0));
            chosen.extend_from_slice(&rows[..quota[c]]);
        }
        chosen.shuffle(&mut rng::stream(seed, Domain::Subset, u64::MAX, 0));
        self.gather(&chosen)
    }
}

/// Raw IDX image tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// `count x (rows * cols)` bytes.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }
}

/// Reads the whole file, inflating it if it starts with the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Length(format!("{what}: header truncated")))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "expected image magic {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "idx images")? as usize;
    let rows = be_u32(bytes, 8, "idx images")? as usize;
    let cols = be_u32(bytes, 12, "idx images")? as usize;
    let expected = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < expected {
        return Err(Error::Length(format!(
            "idx images: header declares {expected} bytes, file holds {}",
            body.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..expected].to_vec(),
    })
}

/// Parses IDX labels and checks each against `class_count`.
pub fn parse_idx_labels(bytes: &[u8], class_count: usize) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "expected label magic {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "idx labels")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Length(format!(
            "idx labels: header declares {count} labels, file holds {}",
            body.len()
        )));
    }
    let labels = body[..count].to_vec();
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= class_count) {
        return Err(Error::Domain(format!(
            "label {bad} out of range for {class_count} classes"
        )));
    }
    Ok(labels)
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    parse_idx_images(&read_maybe_gz(path.as_ref())?)
}

pub fn load_idx_labels(path: impl AsRef<Path>, class_count: usize) -> Result<Vec<u8>> {
    parse_idx_labels(&read_maybe_gz(path.as_ref())?, class_count)
}

/// IDX encoding of `images`; the inverse of [`parse_idx_images`].
pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

/// IDX encoding of `labels`; the inverse of [`parse_idx_labels`].
pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Scales bytes to `[0, 1]` by exact division by 255.
pub fn normalize_and_pack(images: &IdxImages, labels: &[u8], class_count: usize) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(Error::shape("label count", images.count, labels.len()));
    }
    let inputs = images.pixels.iter().map(|&v| f64::from(v) / 255.0).collect();
    let labels = labels.iter().map(|&y| y as usize).collect();
    Dataset::new(inputs, labels, images.dim(), class_count)
}

/// Loads `{prefix}-images-idx3-ubyte` / `{prefix}-labels-idx1-ubyte` from
/// `dir`, also accepting a `.gz` suffix.
pub fn load_mnist(dir: impl AsRef<Path>, prefix: &str) -> Result<Dataset> {
    let dir = dir.as_ref();
    let find = |stem: String| {
        let plain = dir.join(&stem);
        let gz = dir.join(format!("{stem}.gz"));
        if plain.exists() || !gz.exists() {
            plain
        } else {
            gz
        }
    };
    let images = load_idx_images(find(format!("{prefix}-images-idx3-ubyte")))?;
    let labels = load_idx_labels(find(format!("{prefix}-labels-idx1-ubyte")), 10)?;
    normalize_and_pack(&images, &labels, 10)
}

/// Gaussian blobs with unit spread. Class `c` is centred at
/// `±separation` on axis `c / 2` (positive for even `c`).
pub fn synth_blobs(n_per_class: usize, dim: usize, class_count: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Domain("empty dataset: n_per_class is 0".into()));
    }
    if dim == 0 || class_count < 2 || class_count > 2 * dim {
        return Err(Error::Config(format!(
            "blobs need 2 <= classes <= 2 * dim, got {class_count} classes in {dim} dims"
        )));
    }
    let mut inputs = Vec::with_capacity(n_per_class * class_count * dim);
    let mut labels = Vec::with_capacity(n_per_class * class_count);
    for c in 0..class_count {
        let center = blob_center(c, dim, separation);
        let mut rng = rng::stream(seed, Domain::Synth, c as u64, 0);
        for _ in 0..n_per_class {
            for &m in &center {
                let z: f64 = StandardNormal.sample(&mut rng);
                inputs.push(m + z);
            }
            labels.push(c);
        }
    }
    // Interleave classes so minibatches are mixed.
    let n = labels.len();
    let order: Vec<usize> = (0..n)
        .map(|i| (i % class_count) * n_per_class + i / class_count)
        .collect();
    Dataset::new(inputs, labels, dim, class_count)?.gather(&order)
}

pub fn blob_center(class: usize, dim: usize, separation: f64) -> Vec<f64> {
    let mut center = vec![0.0; dim];
    center[(class / 2) % dim] = if class.is_multiple_of(2) {
        separation
    } else {
        -separation
    };
    center
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn encoders_invert_parsers() {
        let images = IdxImages {
            count: 3,
            rows: 2,
            cols: 1,
            pixels: vec![0, 1, 2, 253, 254, 255],
        };
        assert_eq!(parse_idx_images(&encode_idx_images(&images)).unwrap(), images);
        let labels = vec![0, 9, 4];
        assert_eq!(parse_idx_labels(&encode_idx_labels(&labels), 10).unwrap(), labels);
    }

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn hand_built_fixture_round_trips() {
        let pixels = [0u8, 51, 255, 7, 128, 1, 2, 254];
        let images = parse_idx_images(&idx_images(2, 2, 2, &pixels)).unwrap();
        assert_eq!((images.count, images.rows, images.cols), (2, 2, 2));
        assert_eq!(images.pixels, pixels);
        let labels = parse_idx_labels(&idx_labels(&[3, 9]), 10).unwrap();
        assert_eq!(labels, vec![3, 9]);

        let ds = normalize_and_pack(&images, &labels, 10).unwrap();
        assert_eq!(ds.input(0), &[0.0, 0.2, 1.0, 7.0 / 255.0]);
        assert_eq!(ds.labels(), &[3, 9]);
        for (v, p) in ds.inputs().iter().zip(pixels) {
            assert_eq!((v * 255.0).round() as u8, p);
        }
    }

    #[test]
    fn wrong_magic_and_truncation() {
        let labels = idx_labels(&[1, 2]);
        assert!(matches!(parse_idx_images(&labels), Err(Error::Format(_))));
        let images = idx_images(2, 2, 2, &[0; 8]);
        assert!(matches!(parse_idx_labels(&images, 10), Err(Error::Format(_))));
        assert!(matches!(parse_idx_images(&images[..20]), Err(Error::Length(_))));
        assert!(matches!(parse_idx_labels(&[], 10), Err(Error::Length(_))));
        assert!(matches!(
            parse_idx_labels(&idx_labels(&[1, 2])[..9], 10),
            Err(Error::Length(_))
        ));
        assert!(matches!(
            parse_idx_labels(&idx_labels(&[1, 12]), 10),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn loads_plain_and_gzipped_files() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = idx_images(1, 1, 3, &[10, 20, 30]);
        fs::write(dir.path().join("plain"), &bytes).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&bytes).unwrap();
        fs::write(dir.path().join("packed.gz"), gz.finish().unwrap()).unwrap();
        let a = load_idx_images(dir.path().join("plain")).unwrap();
        let b = load_idx_images(dir.path().join("packed.gz")).unwrap();
        assert_eq!(a, b);
        fs::write(dir.path().join("empty"), []).unwrap();
        assert!(matches!(
            load_idx_labels(dir.path().join("empty"), 10),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn pixel_scaling_is_exact() {
        let images = IdxImages {
            count: 1,
            rows: 1,
            cols: 3,
            pixels: vec![0, 255, 51],
        };
        let ds = normalize_and_pack(&images, &[0], 10).unwrap();
        assert_eq!(ds.inputs(), &[0.0, 1.0, 0.2]);
        let all = IdxImages {
            count: 1,
            rows: 16,
            cols: 16,
            pixels: (0..=255).collect(),
        };
        let ds = normalize_and_pack(&all, &[0], 10).unwrap();
        for (i, v) in ds.inputs().iter().enumerate() {
            assert_eq!((v * 255.0).round() as usize, i);
        }
    }

    #[test]
    fn constructor_enforces_invariants() {
        assert!(matches!(Dataset::new(vec![], vec![], 2, 2), Err(Error::Domain(_))));
        assert!(matches!(
            Dataset::new(vec![0.0; 3], vec![0], 2, 2),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            Dataset::new(vec![0.0; 2], vec![2], 2, 2),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            Dataset::new(vec![f64::NAN, 0.0], vec![0], 2, 2),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            Dataset::new(vec![0.0; 2], vec![0], 0, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn blobs_are_deterministic_and_separable() {
        let a = synth_blobs(50, 2, 2, 20.0, 1).unwrap();
        assert_eq!(a, synth_blobs(50, 2, 2, 20.0, 1).unwrap());
        assert_ne!(a, synth_blobs(50, 2, 2, 20.0, 2).unwrap());
        assert_eq!(a.class_counts(), vec![50, 50]);
        // Nearest-centre rule (a linear classifier) is perfect at this separation.
        for i in 0..a.len() {
            let x = a.input(i);
            let pred = if x[0] > 0.0 { 0 } else { 1 };
            assert_eq!(pred, a.label(i));
        }
        assert!(matches!(synth_blobs(0, 2, 2, 20.0, 1), Err(Error::Domain(_))));
        assert!(synth_blobs(5, 1, 3, 20.0, 1).is_err());
    }

    fn balanced(per_class: usize, classes: usize) -> Dataset {
        let n = per_class * classes;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let inputs = (0..n).map(|i| i as f64).collect();
        Dataset::new(inputs, labels, 1, classes).unwrap()
    }

    #[test]
    fn subset_examples() {
        let ds = balanced(7, 10);
        let one_each = ds.subset(10, 3).unwrap();
        assert_eq!(one_each.class_counts(), vec![1; 10]);

        let full = ds.subset(ds.len(), 3).unwrap();
        let mut seen: Vec<u64> = full.inputs().iter().map(|v| *v as u64).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..70).collect::<Vec<_>>());
        assert_ne!(full.inputs(), ds.inputs());

        assert_eq!(ds.subset(25, 4).unwrap(), ds.subset(25, 4).unwrap());
        assert!(ds.subset(0, 1).is_err());
        assert!(ds.subset(71, 1).is_err());
    }

    #[test]
    fn subset_stratification_matches_counting_oracle() {
        // Unbalanced: class c has 3 + 4c rows.
        let mut labels = Vec::new();
        for c in 0..6 {
            labels.extend(std::iter::repeat_n(c, 3 + 4 * c));
        }
        let n_total = labels.len();
        let ds = Dataset::new((0..n_total).map(|i| i as f64).collect(), labels, 1, 6).unwrap();
        for n in [1, 7, 13, 40, n_total] {
            let sub = ds.subset(n, 9).unwrap();
            let counts = sub.class_counts();
            assert_eq!(counts.iter().sum::<usize>(), n);
            for (c, &k) in counts.iter().enumerate() {
                let share = n as f64 * ds.class_counts()[c] as f64 / n_total as f64;
                assert!((k as f64 - share).abs() < 1.0, "n={n} class {c}: {k} vs {share}");
            }
            // Rows are distinct and keep their labels.
            let mut rows: Vec<usize> = sub.inputs().iter().map(|v| *v as usize).collect();
            for (j, &r) in rows.iter().enumerate() {
                assert_eq!(ds.label(r), sub.label(j));
            }
            rows.sort_unstable();
            rows.dedup();
            assert_eq!(rows.len(), n);
        }
    }

    proptest::proptest! {
        #[test]
        fn constructors_reject_malformed(
            n in 0usize..6,
            dim in 0usize..4,
            classes in 0usize..4,
            extra in 0usize..3,
            label_shift in 0usize..3,
        ) {
            let inputs = vec![0.5; n * dim + extra];
            let labels: Vec<usize> = (0..n).map(|i| (i + label_shift) % (classes + 1)).collect();
            let valid = n > 0 && dim > 0 && classes > 0 && extra == 0
                && labels.iter().all(|&y| y < classes);
            let built = Dataset::new(inputs, labels, dim, classes);
            proptest::prop_assert_eq!(built.is_ok(), valid);
        }
    }
}
