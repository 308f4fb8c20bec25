//! L2-regularised multinomial logistic regression on exported features.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierOptions {
    pub l2: f64,
    pub epochs: usize,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        ClassifierOptions {
            l2: 1e-3,
            epochs: 500,
        }
    }
}

/// Softmax regression over standardised features. `weights` is
/// `classes × (dim + 1)` with the bias in the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub classes: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

impl LinearClassifier {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .chain(std::iter::once(1.0))
            .collect()
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let z = self.standardize(x);
        self.weights
            .iter()
            .map(|w| w.iter().zip(&z).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Highest-scoring class; ties go to the lowest index.
    pub fn classify(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        let mut best = 0;
        for (c, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        if features.is_empty() {
            return 0.0;
        }
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.classify(x) == y)
            .count();
        hits as f64 / features.len() as f64
    }
}

/// Full-batch proximal gradient descent on mean cross-entropy plus
/// `l2/2 · ‖W‖²`. The step size is `1/L` with `L` bounded through a power
/// iteration on the design matrix, so no learning rate needs tuning and the
/// result is fully deterministic.
pub fn train_linear_classifier(
    features: &[Vec<f64>],
    labels: &[usize],
    opts: ClassifierOptions,
) -> Result<LinearClassifier> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Classifier(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|x| x.len() != dim) {
        return Err(Error::Classifier("feature rows differ in length".into()));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut seen = vec![false; classes];
    for &y in labels {
        seen[y] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::Classifier("training labels contain a single class".into()));
    }
    if opts.l2.is_nan() || opts.l2 < 0.0 {
        return Err(Error::Classifier(format!("l2 must be ≥ 0, got {}", opts.l2)));
    }

    let n = features.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| features.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..dim)
        .map(|j| {
            let var = features.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut model = LinearClassifier {
        classes,
        mean,
        scale,
        weights: vec![vec![0.0; dim + 1]; classes],
    };
    let z: Vec<Vec<f64>> = features.iter().map(|x| model.standardize(x)).collect();

    // Softmax cross-entropy has curvature ≤ ½·λmax(ZᵀZ/n) per class block.
    let lipschitz = 0.5 * largest_eigenvalue(&z) + 1e-12;
    let step = 1.0 / lipschitz;

    let mut grad = vec![vec![0.0; dim + 1]; classes];
    for _ in 0..opts.epochs {
        grad.iter_mut().for_each(|g| g.fill(0.0));
        for (x, &y) in z.iter().zip(labels) {
            let s: Vec<f64> = model
                .weights
                .iter()
                .map(|w| w.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect();
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = e.iter().sum();
            for c in 0..classes {
                let coef = (e[c] / total - if c == y { 1.0 } else { 0.0 }) / n;
                for (g, v) in grad[c].iter_mut().zip(x) {
                    *g += coef * v;
                }
            }
        }
        let shrink = 1.0 / (1.0 + step * opts.l2);
        for (w, g) in model.weights.iter_mut().zip(&grad) {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi = (*wi - step * gi) * shrink;
            }
        }
    }
    Ok(model)
}

/// Largest eigenvalue of `ZᵀZ / n` by power iteration.
fn largest_eigenvalue(z: &[Vec<f64>]) -> f64 {
    let dim = z[0].len();
    let n = z.len() as f64;
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut next = vec![0.0; dim];
        for row in z {
            let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (o, r) in next.iter_mut().zip(row) {
                *o += dot * r / n;
            }
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = next.into_iter().map(|x| x / norm).collect();
    }
    // Power iteration approaches λmax from below; pad slightly.
    lambda * 1.05
}
