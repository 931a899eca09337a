//! Labelled datasets: a Gaussian-cluster generator and an IDX reader.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} >= num_classes {num_classes}"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }

    /// Stratified split: `per_class` samples of every class (chosen at
    /// random) go to the second dataset, the rest to the first.
    pub fn split_holdout<R: Rng + ?Sized>(
        &self,
        per_class: usize,
        rng: &mut R,
    ) -> Result<(Dataset, Dataset)> {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (c, mut idx) in by_class.into_iter().enumerate() {
            if idx.len() < per_class {
                return Err(Error::InvalidArgument(format!(
                    "class {c} has {} samples, cannot hold out {per_class}",
                    idx.len()
                )));
            }
            idx.shuffle(rng);
            test.extend_from_slice(&idx[..per_class]);
            train.extend_from_slice(&idx[per_class..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// Random fraction of the data held out (not stratified).
    pub fn split_fraction<R: Rng + ?Sized>(
        &self,
        fraction: f64,
        rng: &mut R,
    ) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("holdout fraction {fraction}")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let n_test = (self.len() as f64 * fraction).round() as usize;
        let (test, train) = idx.split_at(n_test);
        let mut test = test.to_vec();
        let mut train = train.to_vec();
        test.sort_unstable();
        train.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }
}

/// Gaussian class clusters with unit per-coordinate variance.
///
/// When `num_classes <= feature_dim` the class means are scaled one-hot
/// vectors placed so that every pair of means is exactly `class_separation`
/// apart. Otherwise the means are random directions of norm
/// `class_separation / sqrt(2)`. Samples are stored class by class.
pub fn generate_synthetic<R: Rng + ?Sized>(
    num_classes: usize,
    samples_per_class: usize,
    feature_dim: usize,
    class_separation: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if num_classes == 0 || samples_per_class == 0 || feature_dim == 0 {
        return Err(Error::InvalidArgument(
            "class count, samples per class and feature dim must be positive".into(),
        ));
    }
    if !(class_separation > 0.0 && class_separation.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "class_separation {class_separation} must be positive"
        )));
    }
    let radius = class_separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            if num_classes <= feature_dim {
                let mut m = vec![0.0; feature_dim];
                m[c] = radius;
                m
            } else {
                let v: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x * radius / norm).collect()
            }
        })
        .collect();

    let n = num_classes * samples_per_class;
    let mut data = Vec::with_capacity(n * feature_dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            for &mu in mean {
                let z: f64 = rng.sample(StandardNormal);
                data.push(mu + z);
            }
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(n, feature_dim, data)?, labels, num_classes)
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::IdxTruncated {
            path: path.to_path_buf(),
            detail: format!("header ends before byte {}", offset + 4),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_u32_be(bytes, 0, path)?;
    if found != expected {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

/// Reads an IDX image file (magic `0x00000803`) and label file (magic
/// `0x00000801`). Pixels are scaled to `[0, 1]`; each image is flattened to
/// one feature row. The class count is `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    check_magic(&img, IDX_IMAGES_MAGIC, images_path)?;
    check_magic(&lab, IDX_LABELS_MAGIC, labels_path)?;

    let n_images = read_u32_be(&img, 4, images_path)? as usize;
    let rows = read_u32_be(&img, 8, images_path)? as usize;
    let cols = read_u32_be(&img, 12, images_path)? as usize;
    let n_labels = read_u32_be(&lab, 4, labels_path)? as usize;

    let dim = rows * cols;
    let pixels = &img[16..];
    if pixels.len() < n_images * dim {
        return Err(Error::IdxTruncated {
            path: images_path.to_path_buf(),
            detail: format!("expected {} pixel bytes, found {}", n_images * dim, pixels.len()),
        });
    }
    let label_bytes = &lab[8..];
    if label_bytes.len() < n_labels {
        return Err(Error::IdxTruncated {
            path: labels_path.to_path_buf(),
            detail: format!("expected {n_labels} label bytes, found {}", label_bytes.len()),
        });
    }
    if n_images != n_labels {
        return Err(Error::IdxCountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let features: Vec<f64> = pixels[..n_images * dim]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = label_bytes[..n_labels].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(Matrix::from_vec(n_images, dim, features)?, labels, num_classes)
}

/// Serializes a dataset to the IDX pair format (features are scaled back to
/// bytes; intended for `[0, 1]` data). `rows * cols` must equal the feature
/// dimension.
pub fn write_idx(
    dataset: &Dataset,
    rows: u32,
    cols: u32,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    if (rows * cols) as usize != dataset.feature_dim() {
        return Err(Error::InvalidArgument("rows*cols must equal feature dim".into()));
    }
    let n = dataset.len() as u32;
    let mut img = Vec::with_capacity(16 + dataset.features.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&rows.to_be_bytes());
    img.extend_from_slice(&cols.to_be_bytes());
    img.extend(
        dataset
            .features
            .as_slice()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(dataset.labels.iter().map(|&y| y as u8));
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}
