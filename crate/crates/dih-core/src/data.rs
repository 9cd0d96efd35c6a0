//! Deterministic synthetic classification datasets with binary persistence.
//!
//! Two generators: Gaussian blobs around a deterministic ring of class
//! centers (linearly separable once the ring is wide), and interleaved
//! spiral arms (needs depth). Both are balanced, split 80/20, and
//! standardized per dimension using the train split's moments only.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as RandDistribution, StandardNormal};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::container::{read_exact_file, ByteReader, ByteWriter};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A labelled batch of inputs: `n x d` features with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::Contract("dataset inputs must be an n x d matrix".into()));
        }
        let n = inputs.rows();
        if n == 0 {
            return Err(Error::Contract("dataset must be non-empty".into()));
        }
        if labels.len() != n {
            return Err(Error::Contract(format!("{} labels for {n} rows", labels.len())));
        }
        if num_classes < 2 {
            return Err(Error::Contract("at least 2 classes required".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset { inputs, labels, num_classes, split })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Gathers the given rows into a contiguous batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut values = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::from_vec(vec![indices.len(), d], values)
            .expect("gathered rows keep their shape");
        (t, labels)
    }
}

fn split_fraction(per_class: usize) -> (usize, usize) {
    let train = (per_class * 4) / 5;
    (train, per_class - train)
}

/// Splits raw per-class samples 80/20 (shuffled within each class), then
/// standardizes both splits with the train split's per-dimension mean and
/// population standard deviation.
fn assemble(
    class_samples: Vec<Vec<Vec<f64>>>,
    d: usize,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset, Dataset)> {
    let per_class = class_samples[0].len();
    let (train_per_class, _) = split_fraction(per_class);
    if train_per_class == 0 || train_per_class == per_class {
        return Err(Error::Contract(format!(
            "per_class {per_class} too small for an 80/20 split"
        )));
    }

    let mut train_rows: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut test_rows: Vec<(Vec<f64>, usize)> = Vec::new();
    for (class, mut samples) in class_samples.into_iter().enumerate() {
        samples.shuffle(rng);
        for (i, s) in samples.into_iter().enumerate() {
            if i < train_per_class {
                train_rows.push((s, class));
            } else {
                test_rows.push((s, class));
            }
        }
    }

    // Train-split moments only; the test split must not leak into them.
    let n_train = train_rows.len() as f64;
    let mut mean = vec![0.0; d];
    for (row, _) in &train_rows {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n_train;
    }
    let mut var = vec![0.0; d];
    for (row, _) in &train_rows {
        for (j, &v) in row.iter().enumerate() {
            var[j] += (v - mean[j]) * (v - mean[j]);
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|&v| {
            let s = (v / n_train).sqrt();
            if s < 1e-12 {
                1.0
            } else {
                s
            }
        })
        .collect();

    let standardize = |rows: Vec<(Vec<f64>, usize)>, split: Split| -> Result<Dataset> {
        let n = rows.len();
        let mut values = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for (row, label) in rows {
            for (j, v) in row.into_iter().enumerate() {
                values.push((v - mean[j]) / std[j]);
            }
            labels.push(label);
        }
        Dataset::new(Tensor::from_vec(vec![n, d], values)?, labels, num_classes, split)
    };

    Ok((standardize(train_rows, Split::Train)?, standardize(test_rows, Split::Test)?))
}

/// Gaussian blobs around `num_classes` centers placed on a ring of radius
/// `spread` in the first two dimensions. Unit-variance noise in every
/// dimension; larger `spread` makes the classes linearly separable.
pub fn make_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if num_classes < 2 {
        return Err(Error::Contract("make_blobs needs at least 2 classes".into()));
    }
    if dim < 2 {
        return Err(Error::Contract("make_blobs needs dimension >= 2".into()));
    }
    if !(spread.is_finite() && spread > 0.0) {
        return Err(Error::Contract(format!("spread must be positive, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_samples = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
        let mut center = vec![0.0; dim];
        center[0] = spread * angle.cos();
        center[1] = spread * angle.sin();
        let mut samples = Vec::with_capacity(per_class);
        for _ in 0..per_class {
            let row: Vec<f64> = center
                .iter()
                .map(|&cv| {
                    let jitter: f64 = StandardNormal.sample(&mut rng);
                    cv + jitter
                })
                .collect();
            samples.push(row);
        }
        class_samples.push(samples);
    }
    assemble(class_samples, dim, num_classes, &mut rng)
}

/// Interleaved 2-d spiral arms, one per class, with Gaussian jitter of the
/// given amplitude. Arms are disjoint curves at zero noise.
pub fn make_spirals(
    num_classes: usize,
    per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if num_classes < 2 {
        return Err(Error::Contract("make_spirals needs at least 2 classes".into()));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::Contract(format!("noise must be non-negative, got {noise}")));
    }
    const TURNS: f64 = 1.75;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_samples = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let arm_offset = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
        let mut samples = Vec::with_capacity(per_class);
        for i in 0..per_class {
            let frac = (i as f64 + 0.5) / per_class as f64;
            let radius = 0.1 + 0.9 * frac;
            let angle = 2.0 * std::f64::consts::PI * TURNS * frac + arm_offset;
            let jx: f64 = StandardNormal.sample(&mut rng);
            let jy: f64 = StandardNormal.sample(&mut rng);
            samples.push(vec![
                radius * angle.cos() + noise * jx,
                radius * angle.sin() + noise * jy,
            ]);
        }
        class_samples.push(samples);
    }
    assemble(class_samples, 2, num_classes, &mut rng)
}

const DATASET_MAGIC: &[u8; 8] = b"DIHDAT\0\0";
const DATASET_VERSION: u32 = 1;

pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u32(ds.num_classes as u32);
    w.u64(ds.len() as u64);
    w.u64(ds.dim() as u64);
    w.u8(match ds.split {
        Split::Train => 0,
        Split::Test => 1,
    });
    for &y in &ds.labels {
        w.u32(y as u32);
    }
    for &v in ds.inputs.values() {
        w.f64(v);
    }
    w.finish_with_checksum()
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new_checked(bytes)?;
    r.expect_magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let num_classes = r.u32()? as usize;
    let n = r.u64()? as usize;
    let d = r.u64()? as usize;
    let split = match r.u8()? {
        0 => Split::Train,
        1 => Split::Test,
        tag => return Err(Error::MalformedHeader(format!("unknown split tag {tag}"))),
    };
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(r.u32()? as usize);
    }
    let mut values = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        values.push(r.f64()?);
    }
    r.verify_checksum()?;
    Dataset::new(Tensor::from_vec(vec![n, d], values)?, labels, num_classes, split)
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    fs::write(path, dataset_to_bytes(ds))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    dataset_from_bytes(&read_exact_file(path)?)
}

/// Writes `x_0,..,x_{d-1},label` rows for inspection.
pub fn export_csv(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut out = fs::File::create(path)?;
    let header: Vec<String> = (0..ds.dim()).map(|j| format!("x_{j}")).collect();
    writeln!(out, "{},label", header.join(","))?;
    for i in 0..ds.len() {
        let row: Vec<String> = ds.inputs.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{},{}", row.join(","), ds.labels[i])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_deterministic_and_balanced() {
        let (tr1, te1) = make_blobs(3, 20, 4, 5.0, 99).unwrap();
        let (tr2, te2) = make_blobs(3, 20, 4, 5.0, 99).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);

        let mut counts = vec![0usize; 3];
        for &y in tr1.labels() {
            counts[y] += 1;
        }
        assert_eq!(counts, vec![16, 16, 16]);
        let mut counts = vec![0usize; 3];
        for &y in te1.labels() {
            counts[y] += 1;
        }
        assert_eq!(counts, vec![4, 4, 4]);
    }

    #[test]
    fn train_split_is_standardized() {
        let (train, _) = make_blobs(4, 50, 3, 8.0, 7).unwrap();
        let n = train.len() as f64;
        let d = train.dim();
        for j in 0..d {
            let mean: f64 = (0..train.len()).map(|i| train.inputs().row(i)[j]).sum::<f64>() / n;
            let var: f64 = (0..train.len())
                .map(|i| {
                    let v = train.inputs().row(i)[j] - mean;
                    v * v
                })
                .sum::<f64>()
                / n;
            assert!(mean.abs() < 1e-9, "dim {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "dim {j} var {var}");
        }
    }

    #[test]
    fn test_split_uses_train_moments() {
        // With few test points, their own moments cannot be exactly 0/1; if
        // standardization leaked, they would be.
        let (_, test) = make_blobs(2, 30, 2, 6.0, 13).unwrap();
        let n = test.len() as f64;
        let mean0: f64 = (0..test.len()).map(|i| test.inputs().row(i)[0]).sum::<f64>() / n;
        assert!(mean0.abs() > 1e-9);
    }

    #[test]
    fn spirals_deterministic_balanced() {
        let (tr1, te1) = make_spirals(4, 25, 0.05, 3).unwrap();
        let (tr2, te2) = make_spirals(4, 25, 0.05, 3).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);
        let mut counts = [0usize; 4];
        for &y in tr1.labels() {
            counts[y] += 1;
        }
        assert!(counts.iter().all(|&c| c == counts[0]));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (train, test) = make_spirals(3, 15, 0.1, 21).unwrap();
        for ds in [train, test] {
            let bytes = dataset_to_bytes(&ds);
            let back = dataset_from_bytes(&bytes).unwrap();
            assert_eq!(ds, back);
            for (a, b) in ds.inputs().values().iter().zip(back.inputs().values()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn truncated_file_is_malformed() {
        let (train, _) = make_blobs(2, 10, 2, 4.0, 1).unwrap();
        let bytes = dataset_to_bytes(&train);
        let err = dataset_from_bytes(&bytes[..10]).unwrap_err();
        assert!(matches!(err, Error::MalformedHeader(_)), "{err}");
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let (train, _) = make_blobs(2, 10, 2, 4.0, 1).unwrap();
        let mut bytes = dataset_to_bytes(&train);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        let err = dataset_from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::ChecksumMismatch { .. }), "{err}");
    }

    #[test]
    fn bad_magic_is_malformed() {
        let (train, _) = make_blobs(2, 10, 2, 4.0, 1).unwrap();
        let mut bytes = dataset_to_bytes(&train);
        bytes[0] = b'X';
        let err = dataset_from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::MalformedHeader(_)), "{err}");
    }

    #[test]
    fn batch_gathers_rows() {
        let (train, _) = make_blobs(2, 10, 2, 4.0, 5).unwrap();
        let (x, y) = train.batch(&[3, 0, 7]);
        assert_eq!(x.shape(), &[3, 2]);
        assert_eq!(x.row(0), train.inputs().row(3));
        assert_eq!(x.row(1), train.inputs().row(0));
        assert_eq!(y[2], train.labels()[7]);
    }
}
