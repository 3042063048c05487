//! Linear evaluation of a pretrained encoder: extract one global
//! feature per cloud from frozen weights, then fit a multinomial
//! logistic-regression head on those features.

use super::PipelineError;
use crate::geometry::{fps, knn_group_centralize, FpsStart, PointCloud};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use crate::transformer::{ModelConfig, ModelWeights};

/// Cloud-level descriptor from frozen weights: deterministic patch
/// seeds (farthest point sampling started at index 0), no occlusion,
/// every patch encoded, encoder tokens (pre-projection width) averaged.
pub fn extract_global_feature<T: Scalar>(
    cloud: &PointCloud,
    weights: &ModelWeights<T>,
    mcfg: &ModelConfig,
) -> Result<Vec<f64>, PipelineError> {
    let cloud = cloud.normalized()?;
    if cloud.len() < mcfg.groups.max(mcfg.patch_size) {
        return Err(PipelineError::CloudTooSmall {
            points: cloud.len(),
            required: mcfg.groups.max(mcfg.patch_size),
            what: "feature extraction",
        });
    }
    let seed_indices = fps(cloud.points(), mcfg.groups, FpsStart::Index(0))?;
    let patches = knn_group_centralize(&cloud, &seed_indices, mcfg.patch_size)?;

    let k = patches.patch_points();
    let mut offsets = Vec::with_capacity(patches.groups() * k * 3);
    let mut seeds = Vec::with_capacity(patches.groups() * 3);
    for g in 0..patches.groups() {
        for p in &patches.patches[g] {
            offsets.extend(p.iter().map(|&c| T::from_f64(c)));
        }
        seeds.extend(patches.seeds[g].iter().map(|&c| T::from_f64(c)));
    }
    let patches_t = Tensor::from_vec(vec![patches.groups(), k, 3], offsets)?;
    let seeds_t = Tensor::from_vec(vec![patches.groups(), 3], seeds)?;

    let model = weights.frozen();
    let mut tape = Tape::new();
    let tokens = model.encode_tokens(&mut tape, &patches_t, &seeds_t)?;
    let pooled = tape.mean_reduce(&tokens, 0)?;
    Ok(pooled.data().iter().map(|&x| x.to_f64()).collect())
}

/// Features for a labelled dataset, in order.
pub fn dataset_features<T: Scalar>(
    data: &[(PointCloud, usize)],
    weights: &ModelWeights<T>,
    mcfg: &ModelConfig,
) -> Result<(Vec<Vec<f64>>, Vec<usize>), PipelineError> {
    let mut features = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for (cloud, label) in data {
        features.push(extract_global_feature(cloud, weights, mcfg)?);
        labels.push(*label);
    }
    Ok((features, labels))
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.5,
            l2: 1e-3,
        }
    }
}

/// Outcome of one linear evaluation. `confusion[true][predicted]`
/// counts test items.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub num_classes: usize,
}

struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    const STD_FLOOR: f64 = 1e-8;

    fn fit(features: &[Vec<f64>]) -> Self {
        let d = features[0].len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, &x) in mean.iter_mut().zip(f) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; d];
        for f in features {
            for ((v, &x), &m) in var.iter_mut().zip(f).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| v.sqrt().max(Self::STD_FLOOR))
            .collect();
        Self { mean, std }
    }

    /// Standardized feature with a trailing 1 for the bias.
    fn apply(&self, f: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = f
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&x, &m), &s)| (x - m) / s)
            .collect();
        out.push(1.0);
        out
    }
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

/// Row-major class scores `W x` for weights `(classes, d+1)`.
fn logits(w: &[f64], x: &[f64], classes: usize) -> Vec<f64> {
    let d1 = x.len();
    (0..classes)
        .map(|c| w[c * d1..(c + 1) * d1].iter().zip(x).map(|(&a, &b)| a * b).sum())
        .collect()
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn validate_features(
    features: &[Vec<f64>],
    labels: &[usize],
    expected_dim: usize,
) -> Result<(), PipelineError> {
    if features.len() != labels.len() {
        return Err(PipelineError::FeatureLabelMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    for (i, f) in features.iter().enumerate() {
        if f.len() != expected_dim {
            return Err(PipelineError::FeatureLengthMismatch {
                index: i,
                expected: expected_dim,
                got: f.len(),
            });
        }
    }
    Ok(())
}

/// Fits a softmax linear classifier on the training features
/// (standardized by the training mean and deviation; weights start at
/// zero) with full-batch gradient descent on the cross-entropy plus an
/// L2 penalty on everything except the bias column, then scores both
/// splits. Deterministic; argmax ties resolve to the lowest class.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport, PipelineError> {
    if train_x.is_empty() || test_x.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let d = train_x[0].len();
    validate_features(train_x, train_y, d)?;
    validate_features(test_x, test_y, d)?;

    let classes = train_y
        .iter()
        .chain(test_y)
        .copied()
        .max()
        .expect("non-empty")
        + 1;
    let distinct_train = {
        let mut seen = vec![false; classes];
        for &y in train_y {
            seen[y] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct_train < 2 {
        return Err(PipelineError::TooFewClasses {
            found: distinct_train,
        });
    }

    let standardizer = Standardizer::fit(train_x);
    let xs: Vec<Vec<f64>> = train_x.iter().map(|f| standardizer.apply(f)).collect();
    let ts: Vec<Vec<f64>> = test_x.iter().map(|f| standardizer.apply(f)).collect();
    let d1 = d + 1;

    let mut w = vec![0.0f64; classes * d1];
    let n = xs.len() as f64;
    let mut grad = vec![0.0f64; classes * d1];
    for _ in 0..cfg.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, &y) in xs.iter().zip(train_y) {
            let mut p = logits(&w, x, classes);
            softmax_in_place(&mut p);
            p[y] -= 1.0;
            for (c, &err) in p.iter().enumerate() {
                let row = &mut grad[c * d1..(c + 1) * d1];
                for (g, &xi) in row.iter_mut().zip(x) {
                    *g += err * xi / n;
                }
            }
        }
        // L2 on everything but the bias column (the last weight of
        // every class row).
        for c in 0..classes {
            for j in 0..d {
                grad[c * d1 + j] += cfg.l2 * w[c * d1 + j];
            }
        }
        for (wi, &g) in w.iter_mut().zip(grad.iter()) {
            *wi -= cfg.learning_rate * g;
        }
    }

    let accuracy = |feats: &[Vec<f64>], ys: &[usize]| -> f64 {
        let hits = feats
            .iter()
            .zip(ys)
            .filter(|(x, &y)| argmax(&logits(&w, x, classes)) == y)
            .count();
        hits as f64 / ys.len() as f64
    };
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (x, &y) in ts.iter().zip(test_y) {
        confusion[y][argmax(&logits(&w, x, classes))] += 1;
    }

    Ok(ProbeReport {
        train_accuracy: accuracy(&xs, train_y),
        test_accuracy: accuracy(&ts, test_y),
        confusion,
        num_classes: classes,
    })
}
