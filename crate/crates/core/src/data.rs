//! Synthetic datasets and the binary dataset file format.
//!
//! Blob datasets place class means at least `4 * spread` apart on a seeded
//! random frame and draw isotropic Gaussian samples around them; train and
//! test splits share the means but consume split-specific sample streams, so
//! they are disjoint by construction. Noise OOD generators cover the ID
//! feature range; shifted-blob OOD displaces the ID means by `shift * spread`
//! as a controllable near-to-far dial.
//!
//! Features are stored as 32-bit floats, matching the file format exactly, so
//! file round trips are lossless.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::NdArray;

/// What a dataset is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataRole {
    IdTrain,
    IdTest,
    Ood,
}

impl DataRole {
    fn to_byte(self) -> u8 {
        match self {
            DataRole::IdTrain => 0,
            DataRole::IdTest => 1,
            DataRole::Ood => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => DataRole::IdTrain,
            1 => DataRole::IdTest,
            2 => DataRole::Ood,
            _ => None?,
        })
    }
}

/// Which in-distribution split to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Immutable sample collection: `[N, ...]` features plus labels for
/// in-distribution roles.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    role: DataRole,
    features: NdArray<f32>,
    labels: Option<Vec<u32>>,
    classes: usize,
}

impl Dataset {
    pub fn new(
        name: String,
        role: DataRole,
        features: NdArray<f32>,
        labels: Option<Vec<u32>>,
        classes: usize,
    ) -> Result<Self> {
        if features.shape().len() < 2 || features.shape()[0] == 0 {
            return Err(Error::InvalidParams(format!(
                "features must be [N >= 1, ...], got {:?}",
                features.shape()
            )));
        }
        if !features.all_finite() {
            return Err(Error::InvalidParams("features must be finite".into()));
        }
        let n = features.shape()[0];
        match (role, &labels) {
            (DataRole::Ood, None) => {}
            (DataRole::Ood, Some(_)) => {
                return Err(Error::InvalidParams(
                    "OOD datasets must not carry labels".into(),
                ))
            }
            (_, None) => {
                return Err(Error::InvalidParams(
                    "in-distribution datasets must carry labels".into(),
                ))
            }
            (_, Some(l)) => {
                if l.len() != n {
                    return Err(Error::ShapeMismatch {
                        op: "Dataset::new",
                        detail: format!("{} labels for {} samples", l.len(), n),
                    });
                }
                if classes == 0 || l.iter().any(|&c| c as usize >= classes) {
                    return Err(Error::ShapeMismatch {
                        op: "Dataset::new",
                        detail: format!("label out of range for {classes} classes"),
                    });
                }
            }
        }
        Ok(Self {
            name,
            role,
            features,
            labels,
            classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> DataRole {
        self.role
    }

    pub fn features(&self) -> &NdArray<f32> {
        &self.features
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample feature shape.
    pub fn feature_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.feature_shape().iter().product()
    }

    /// Assemble a 64-bit batch (and targets, when labeled) from sample indices.
    pub fn batch(&self, indices: &[usize]) -> (NdArray, Option<Vec<usize>>) {
        let d = self.sample_len();
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.feature_shape());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend(
                self.features.data()[i * d..(i + 1) * d]
                    .iter()
                    .map(|&v| f64::from(v)),
            );
        }
        let x = NdArray::new(shape, data).expect("batch shape is consistent");
        let y = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i] as usize).collect());
        (x, y)
    }

    /// Per-dimension bounding box of the (flattened) features.
    pub fn feature_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.sample_len();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for sample in self.features.data().chunks(d) {
            for (j, &v) in sample.iter().enumerate() {
                let v = f64::from(v);
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        (lo, hi)
    }

    /// Samples per class (empty for OOD data).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        if let Some(labels) = &self.labels {
            for &l in labels {
                counts[l as usize] += 1;
            }
        }
        counts
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub spread: f64,
    pub seed: u64,
}

impl BlobSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 2 {
            return Err(Error::InvalidParams(format!(
                "blobs need classes >= 2 and dim >= 2, got {} and {}",
                self.classes, self.dim
            )));
        }
        if self.n_per_class == 0 {
            return Err(Error::InvalidParams("n_per_class must be >= 1".into()));
        }
        if !self.spread.is_finite() || self.spread < 0.0 {
            return Err(Error::InvalidParams(format!(
                "spread must be finite and >= 0, got {}",
                self.spread
            )));
        }
        Ok(())
    }
}

/// Class means on a seeded random frame, pairwise at least `4 * spread`
/// apart. Candidates are rejected inside an expanding box, so placement
/// always terminates.
fn blob_means(spec: &BlobSpec) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(spec.seed, "blob-means");
    let min_dist = 4.0 * spec.spread;
    let mut half = f64::max(min_dist, 1.0) * (spec.classes as f64).powf(1.0 / spec.dim as f64);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    let mut rejections = 0;
    while means.len() < spec.classes {
        let candidate: Vec<f64> = (0..spec.dim).map(|_| rng.gen_range(-half..half)).collect();
        let ok = means.iter().all(|m| {
            let d2: f64 = m
                .iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2.sqrt() >= min_dist
        });
        if ok {
            means.push(candidate);
            rejections = 0;
        } else {
            rejections += 1;
            if rejections >= 200 {
                half *= 1.5;
                rejections = 0;
            }
        }
    }
    means
}

fn sample_blobs(
    means: &[Vec<f64>],
    n_per_class: usize,
    spread: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (NdArray<f32>, Vec<u32>) {
    let dim = means[0].len();
    let n = means.len() * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            for &m in mean {
                let z: f64 = rng.sample(StandardNormal);
                data.push((m + spread * z) as f32);
            }
            labels.push(c as u32);
        }
    }
    (
        NdArray::new(vec![n, dim], data).expect("generated data matches shape"),
        labels,
    )
}

/// Gaussian class blobs; the train and test splits share class means but use
/// independent sample streams.
pub fn gen_blobs(spec: &BlobSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let means = blob_means(spec);
    let (tag, role, split_name) = match split {
        Split::Train => ("blob-samples-train", DataRole::IdTrain, "train"),
        Split::Test => ("blob-samples-test", DataRole::IdTest, "test"),
    };
    let mut rng = rng::stream(spec.seed, tag);
    let (features, labels) = sample_blobs(&means, spec.n_per_class, spec.spread, &mut rng);
    Dataset::new(
        format!("blobs-c{}-d{}-{}", spec.classes, spec.dim, split_name),
        role,
        features,
        Some(labels),
        spec.classes,
    )
}

/// Noise family for OOD generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Gaussian,
    Uniform,
}

/// Noise OOD covering the feature range of `reference`: uniform over its
/// bounding box, or Gaussian centered on the box with the half-extent as
/// standard deviation.
pub fn gen_noise_ood(kind: NoiseKind, n: usize, seed: u64, reference: &Dataset) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidParams("noise OOD needs n >= 1".into()));
    }
    let (lo, hi) = reference.feature_bounds();
    let d = lo.len();
    let mut rng = rng::stream(seed, "noise-ood");
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for j in 0..d {
            let v = match kind {
                NoiseKind::Uniform => {
                    let u: f64 = rng.gen();
                    lo[j] + u * (hi[j] - lo[j])
                }
                NoiseKind::Gaussian => {
                    let z: f64 = rng.sample(StandardNormal);
                    (lo[j] + hi[j]) / 2.0 + z * (hi[j] - lo[j]) / 2.0
                }
            };
            data.push(v as f32);
        }
    }
    let mut shape = vec![n];
    shape.extend_from_slice(reference.feature_shape());
    let name = match kind {
        NoiseKind::Gaussian => "gaussian-noise",
        NoiseKind::Uniform => "uniform-noise",
    };
    Dataset::new(
        name.to_string(),
        DataRole::Ood,
        NdArray::new(shape, data)?,
        None,
        0,
    )
}

/// Near-OOD: the base blob distribution with every class mean displaced by
/// `shift * spread` in a seeded random direction.
pub fn gen_shifted_ood(base: &BlobSpec, shift: f64, seed: u64) -> Result<Dataset> {
    base.validate()?;
    if !shift.is_finite() || shift <= 0.0 {
        return Err(Error::InvalidParams(format!(
            "shift must be > 0 (shift = 0 would alias the ID distribution), got {shift}"
        )));
    }
    let mut means = blob_means(base);
    let mut dir_rng = rng::stream(seed, "shift-dirs");
    for mean in &mut means {
        // random unit direction
        let mut dir: Vec<f64>;
        loop {
            dir = (0..base.dim).map(|_| dir_rng.sample(StandardNormal)).collect();
            let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 {
                dir.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
        for (m, u) in mean.iter_mut().zip(&dir) {
            *m += shift * base.spread * u;
        }
    }
    let mut sample_rng = rng::stream(seed, "shift-samples");
    let (features, _) = sample_blobs(&means, base.n_per_class, base.spread, &mut sample_rng);
    Dataset::new(
        format!("shifted-{shift}"),
        DataRole::Ood,
        features,
        None,
        0,
    )
}

const MAGIC: &[u8; 10] = b"COSOOD-DS\0";
const FORMAT_VERSION: u8 = 1;

/// Write the binary dataset format: magic, version byte, role byte, name,
/// dims header (rank, extents, classes-or-0), little-endian f32 features,
/// then little-endian i32 labels for in-distribution roles.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(FORMAT_VERSION);
    buf.push(ds.role.to_byte());
    let name = ds.name.as_bytes();
    if name.len() > u16::MAX as usize {
        return Err(Error::InvalidParams("dataset name too long".into()));
    }
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name);
    let shape = ds.features.shape();
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(ds.classes as u32).to_le_bytes());
    for &v in ds.features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &ds.labels {
        for &l in labels {
            buf.extend_from_slice(&(l as i32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::ShapeMismatch {
                op: "read_dataset",
                detail: "file truncated".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Read a dataset written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(MAGIC.len()).map_or(true, |m| m != MAGIC) {
        return Err(Error::BadMagic);
    }
    let version = cur.u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::InvalidParams(format!(
            "unsupported dataset file version {version}"
        )));
    }
    let role = DataRole::from_byte(cur.u8()?).ok_or_else(|| Error::ShapeMismatch {
        op: "read_dataset",
        detail: "unknown role byte".into(),
    })?;
    let name_len = cur.u16()? as usize;
    let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| {
        Error::ShapeMismatch {
            op: "read_dataset",
            detail: "dataset name is not UTF-8".into(),
        }
    })?;
    let rank = cur.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u32()? as usize);
    }
    let classes = cur.u32()? as usize;
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(f32::from_le_bytes(cur.take(4)?.try_into().unwrap()));
    }
    let labels = if role == DataRole::Ood {
        None
    } else {
        let n = *shape.first().unwrap_or(&0);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let l = i32::from_le_bytes(cur.take(4)?.try_into().unwrap());
            if l < 0 || l as usize >= classes {
                return Err(Error::ShapeMismatch {
                    op: "read_dataset",
                    detail: format!("label {l} out of range for {classes} classes"),
                });
            }
            labels.push(l as u32);
        }
        Some(labels)
    };
    if cur.pos != bytes.len() {
        return Err(Error::ShapeMismatch {
            op: "read_dataset",
            detail: "trailing bytes after payload".into(),
        });
    }
    Dataset::new(name, role, NdArray::new(shape, data)?, labels, classes)
}
