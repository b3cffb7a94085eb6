//! Evaluation metrics for attribution methods.
//!
//! * `validity_soft`: mean drop of the originally predicted class probability
//!   under the counterfactuals.
//! * `c_soft`: per instance, summed probability drop over summed sentence
//!   distance, averaged over instances.
//! * `infidelity`: Monte Carlo estimate of
//!   `E[(<I, phi> - (f(x) - f(x - I)))^2]` with Gaussian `I` on the input
//!   embeddings.
//! * `average_precision` / `mean_average_precision`: agreement between
//!   attribution rankings and human rationale masks.
//! * `spearman`: rank correlation with average ranks for ties.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::domain::Matrix;
use crate::rng::{draw_seed, seeded_rng};

/// Instances whose summed counterfactual distance is below this are left out
/// of C_soft.
pub const DISTANCE_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no instances")]
    Empty,
    #[error("instance {0} has no counterfactual probabilities")]
    NoCounterfactuals(usize),
    #[error("instance {index}: {probs} probabilities but {dists} distances")]
    DistanceCount {
        index: usize,
        probs: usize,
        dists: usize,
    },
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("distance {0} is negative or non-finite")]
    Distance(f64),
    #[error("every instance has a near-zero distance sum")]
    AllExcluded,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("need at least two observations, got {0}")]
    TooShort(usize),
    #[error("constant input has no rank correlation")]
    Constant,
    #[error("no positive rationale token")]
    NoPositives,
    #[error("attribution shape {attribution:?} does not match embedding shape {embeddings:?}")]
    Shape {
        attribution: (usize, usize),
        embeddings: (usize, usize),
    },
    #[error("non-finite value in input")]
    NonFinite,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn check_prob(p: f64) -> Result<(), MetricError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(MetricError::Probability(p))
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    xs.sum::<f64>() / n as f64
}

/// `orig[n]` is the original predicted-class probability of instance `n`;
/// `cf[n]` holds that same class's probability under each counterfactual.
pub fn validity_soft(orig: &[f64], cf: &[Vec<f64>]) -> Result<f64, MetricError> {
    if orig.is_empty() {
        return Err(MetricError::Empty);
    }
    if orig.len() != cf.len() {
        return Err(MetricError::Length(orig.len(), cf.len()));
    }
    let mut per_instance = Vec::with_capacity(orig.len());
    for (n, (&p, cfs)) in orig.iter().zip(cf).enumerate() {
        check_prob(p)?;
        if cfs.is_empty() {
            return Err(MetricError::NoCounterfactuals(n));
        }
        for &q in cfs {
            check_prob(q)?;
        }
        per_instance.push(mean(cfs.iter().map(|&q| p - q)));
    }
    Ok(mean(per_instance.into_iter()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CSoft {
    pub value: f64,
    pub used: usize,
    /// Instances left out for a distance sum below [`DISTANCE_EPSILON`].
    pub excluded: usize,
}

pub fn c_soft(orig: &[f64], cf: &[Vec<f64>], dists: &[Vec<f64>]) -> Result<CSoft, MetricError> {
    if orig.is_empty() {
        return Err(MetricError::Empty);
    }
    if orig.len() != cf.len() {
        return Err(MetricError::Length(orig.len(), cf.len()));
    }
    if orig.len() != dists.len() {
        return Err(MetricError::Length(orig.len(), dists.len()));
    }
    let mut ratios = Vec::with_capacity(orig.len());
    let mut excluded = 0;
    for (n, ((&p, cfs), ds)) in orig.iter().zip(cf).zip(dists).enumerate() {
        check_prob(p)?;
        if cfs.is_empty() {
            return Err(MetricError::NoCounterfactuals(n));
        }
        if cfs.len() != ds.len() {
            return Err(MetricError::DistanceCount {
                index: n,
                probs: cfs.len(),
                dists: ds.len(),
            });
        }
        let mut drop = 0.0;
        for &q in cfs {
            check_prob(q)?;
            drop += p - q;
        }
        let mut dist = 0.0;
        for &d in ds {
            if !d.is_finite() || d < 0.0 {
                return Err(MetricError::Distance(d));
            }
            dist += d;
        }
        if dist < DISTANCE_EPSILON {
            excluded += 1;
        } else {
            ratios.push(drop / dist);
        }
    }
    if ratios.is_empty() {
        return Err(MetricError::AllExcluded);
    }
    Ok(CSoft {
        used: ratios.len(),
        value: mean(ratios.into_iter()),
        excluded,
    })
}

/// `1 - cos(a, b)`, clamped to `[0, 2]`.
///
/// A zero vector has no direction: two zero vectors are at distance 0, a zero
/// and a non-zero vector at distance 1.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Length(a.len(), b.len()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = match (na == 0.0, nb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        (false, false) => 1.0 - dot / (na * nb),
    };
    Ok(d.clamp(0.0, 2.0))
}

/// Cosine distance between the backend's sentence embeddings of `a` and `b`.
pub fn sentence_distance<B: crate::backend::Backend + ?Sized>(
    backend: &B,
    a: &str,
    b: &str,
) -> Result<f64, MetricError> {
    if a == b {
        return Ok(0.0);
    }
    let v = backend.sentence_embed(&[a.to_string(), b.to_string()])?;
    cosine_distance(&v[0], &v[1])
}

/// Gaussian perturbation settings for infidelity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub samples: usize,
    pub seed: u64,
}

pub const DEFAULT_SIGMA: f64 = 0.01;
pub const DEFAULT_SAMPLES: usize = 50;

impl NoiseConfig {
    pub fn new(sigma: f64, samples: usize, seed: u64) -> Result<Self, String> {
        let c = NoiseConfig { sigma, samples, seed };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(format!("noise sigma must be positive, got {}", self.sigma));
        }
        if self.samples == 0 {
            return Err("noise samples must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfidelityEstimate {
    pub value: f64,
    /// Standard error of the Monte Carlo mean (0 for a single sample).
    pub std_error: f64,
    pub samples: usize,
}

fn shape(m: &Matrix) -> Result<(usize, usize), MetricError> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    if m.iter().any(|r| r.len() != cols) {
        return Err(MetricError::Shape {
            attribution: (rows, cols),
            embeddings: (rows, cols),
        });
    }
    Ok((rows, cols))
}

/// Monte Carlo infidelity of `attribution` for the model output `predict`
/// (a scalar, typically the original predicted-class probability) around
/// `embeddings`.
///
/// Draw `s` uses its own generator seeded from `(noise.seed, s)`, so the
/// first `S` draws are shared by every estimate with `samples >= S`.
pub fn infidelity<F>(
    attribution: &Matrix,
    embeddings: &Matrix,
    predict: F,
    noise: &NoiseConfig,
) -> Result<InfidelityEstimate, MetricError>
where
    F: FnMut(&Matrix) -> Result<f64, BackendError>,
{
    noise.validate().map_err(|_| MetricError::NonFinite)?;
    let normal = Normal::new(0.0, noise.sigma).map_err(|_| MetricError::NonFinite)?;
    let (rows, cols) = shape(embeddings)?;
    let draws = (0..noise.samples).map(|s| {
        let mut rng = seeded_rng(draw_seed(noise.seed, s as u64));
        (0..rows)
            .map(|_| (0..cols).map(|_| normal.sample(&mut rng)).collect())
            .collect::<Matrix>()
    });
    infidelity_with_draws(attribution, embeddings, predict, draws)
}

/// Infidelity averaged over explicit perturbations `I`; the model is
/// evaluated at `embeddings - I`.
pub fn infidelity_with_draws<F, D>(
    attribution: &Matrix,
    embeddings: &Matrix,
    mut predict: F,
    draws: D,
) -> Result<InfidelityEstimate, MetricError>
where
    F: FnMut(&Matrix) -> Result<f64, BackendError>,
    D: IntoIterator<Item = Matrix>,
{
    let a_shape = shape(attribution)?;
    let e_shape = shape(embeddings)?;
    if a_shape != e_shape {
        return Err(MetricError::Shape {
            attribution: a_shape,
            embeddings: e_shape,
        });
    }
    let base = predict(embeddings)?;
    let mut values = Vec::new();
    let mut perturbed = embeddings.clone();
    for draw in draws {
        if shape(&draw)? != e_shape {
            return Err(MetricError::Shape {
                attribution: a_shape,
                embeddings: shape(&draw)?,
            });
        }
        let mut projected = 0.0;
        for (((row, e_row), a_row), i_row) in
            perturbed.iter_mut().zip(embeddings).zip(attribution).zip(&draw)
        {
            for (((x, &e), &a), &i) in row.iter_mut().zip(e_row).zip(a_row).zip(i_row) {
                *x = e - i;
                projected += i * a;
            }
        }
        let diff = base - predict(&perturbed)?;
        values.push((projected - diff).powi(2));
    }
    if values.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = values.len() as f64;
    let value = values.iter().sum::<f64>() / n;
    let std_error = if values.len() > 1 {
        let var = values.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(InfidelityEstimate {
        value,
        std_error,
        samples: values.len(),
    })
}

/// Average precision of the ranking induced by `scores` against `rationale`.
///
/// Tokens are ranked by score descending, ties by position.
pub fn average_precision(scores: &[f64], rationale: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != rationale.len() {
        return Err(MetricError::Length(scores.len(), rationale.len()));
    }
    let positives = rationale.iter().filter(|&&r| r).count();
    if positives == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if rationale[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub value: f64,
    pub used: usize,
    /// Instances without any positive rationale token.
    pub excluded: usize,
}

/// Mean of per-instance average precision; instances with no positive
/// rationale token are skipped and counted.
pub fn mean_average_precision<'a, I>(instances: I) -> Result<MapSummary, MetricError>
where
    I: IntoIterator<Item = (&'a [f64], &'a [bool])>,
{
    let mut sum = 0.0;
    let mut used = 0;
    let mut excluded = 0;
    for (scores, rationale) in instances {
        match average_precision(scores, rationale) {
            Ok(ap) => {
                sum += ap;
                used += 1;
            }
            Err(MetricError::NoPositives) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(MetricError::Empty);
    }
    Ok(MapSummary {
        value: sum / used as f64,
        used,
        excluded,
    })
}

/// 1-based ranks, tied values sharing the mean of their rank range.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    let mx = x.iter().sum::<f64>() / x.len() as f64;
    let my = y.iter().sum::<f64>() / y.len() as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Constant);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::Length(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::TooShort(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    pearson(&average_ranks(x), &average_ranks(y))
}
