//! Aggregate statistics: beta-binomial proportions, a prompt-stratified
//! bootstrap, unique-label and consistency ratios, and cross-validated
//! linear separability of embeddings.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};
use crate::lexicon::{ShapeClass, WordType};
use crate::prob_probe::ProbTrial;
use crate::saliency_probe::ConsistencyPair;

pub const CREDIBLE_MASS: f64 = 0.95;
pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

/// Cell an estimate describes; empty fields are pooled over.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub model: String,
    pub word_type: Option<WordType>,
    pub prompt: Option<String>,
    pub category: Option<ShapeClass>,
}

impl GroupKey {
    pub fn new(model: &str, word_type: Option<WordType>) -> Self {
        GroupKey { model: model.to_owned(), word_type, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionEstimate {
    pub group_key: GroupKey,
    pub successes: u64,
    pub trials: u64,
    pub posterior_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub chance: f64,
    pub significant: bool,
}

/// Posterior of a rate under a uniform prior: `Beta(1 + s, 1 + n - s)`,
/// with a 95% equal-tailed interval. Significant when the interval lies
/// entirely above `chance`.
pub fn proportion_estimate(successes: u64, trials: u64, chance: f64) -> Result<ProportionEstimate> {
    if successes > trials {
        return Err(Error::Invalid(format!("{successes} successes out of {trials} trials")));
    }
    let (a, b) = (1.0 + successes as f64, 1.0 + (trials - successes) as f64);
    let beta = Beta::new(a, b).map_err(|e| Error::Invalid(e.to_string()))?;
    let tail = (1.0 - CREDIBLE_MASS) / 2.0;
    let ci_low = beta.inverse_cdf(tail);
    let ci_high = beta.inverse_cdf(1.0 - tail);
    Ok(ProportionEstimate {
        group_key: GroupKey::default(),
        successes,
        trials,
        posterior_mean: a / (a + b),
        ci_low,
        ci_high,
        chance,
        significant: ci_low > chance,
    })
}

pub fn estimate_for(group_key: GroupKey, outcomes: impl IntoIterator<Item = bool>, chance: f64) -> Result<ProportionEstimate> {
    let (mut s, mut n) = (0u64, 0u64);
    for o in outcomes {
        n += 1;
        s += o as u64;
    }
    Ok(ProportionEstimate { group_key, ..proportion_estimate(s, n, chance)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapEstimate {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub resamples: usize,
}

/// Pooled proportion with a percentile interval from resampling outcomes
/// with replacement within each stratum (prompt).
pub fn stratified_bootstrap(outcomes: &[(String, bool)], resamples: usize, seed: u64) -> Result<BootstrapEstimate> {
    if outcomes.is_empty() || resamples == 0 {
        return Err(Error::Invalid("bootstrap needs outcomes and at least one resample".into()));
    }
    let mut strata: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for (k, o) in outcomes {
        strata.entry(k).or_default().push(*o);
    }
    let total = outcomes.len() as f64;
    let mean = outcomes.iter().filter(|(_, o)| *o).count() as f64 / total;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            let hits: usize = strata.values().map(|v| (0..v.len()).filter(|_| v[rng.random_range(0..v.len())]).count()).sum();
            hits as f64 / total
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - CREDIBLE_MASS) / 2.0;
    let at = |q: f64| stats[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Ok(BootstrapEstimate { mean, ci_low: at(tail), ci_high: at(1.0 - tail), resamples })
}

/// Distinct winning labels over every image and prompt, divided by the
/// label-set size. `expected_trials` guards against incomplete sweeps.
pub fn uniqueness_ratio(trials: &[&ProbTrial], label_set_size: usize, expected_trials: usize) -> Result<f64> {
    if label_set_size == 0 {
        return Err(Error::Invalid("empty label set".into()));
    }
    if trials.len() != expected_trials {
        return Err(Error::Invalid(format!("incomplete sweep: {} of {expected_trials} trials", trials.len())));
    }
    let unique: BTreeSet<&str> = trials.iter().map(|t| t.winner_label.as_str()).collect();
    Ok(unique.len() as f64 / label_set_size as f64)
}

/// Mean over images of the distinct winners across prompts, each divided
/// by the label-set size.
pub fn per_image_uniqueness(trials: &[&ProbTrial], label_set_size: usize) -> Result<f64> {
    let mut by_image: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for t in trials {
        by_image.entry(&t.image_id).or_default().insert(&t.winner_label);
    }
    if by_image.is_empty() || label_set_size == 0 {
        return Err(Error::Invalid("no trials".into()));
    }
    let sum: f64 = by_image.values().map(|w| w.len() as f64 / label_set_size as f64).sum();
    Ok(sum / by_image.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub count: u64,
    pub total: u64,
    pub ratio: Option<f64>,
}

/// Share of label/pair combinations choosing the same shape in both
/// arrangements; ties are left out of numerator and denominator.
pub fn consistency_ratio<'a>(pairs: impl IntoIterator<Item = &'a ConsistencyPair>) -> Ratio {
    let (mut count, mut total) = (0u64, 0u64);
    for p in pairs.into_iter().filter(|p| !p.tie) {
        total += 1;
        count += p.consistent as u64;
    }
    Ratio { count, total, ratio: (total > 0).then(|| count as f64 / total as f64) }
}

/// Ridge penalty of the separability classifier.
const RIDGE: f64 = 0.1;
const MAX_FOLDS: usize = 5;

/// Cross-validated accuracy of a linear classifier (kernel ridge with a
/// linear kernel and a bias, one-vs-rest) on unit-normalised rows,
/// standardised per fold. Folds are stratified and deterministic.
pub fn separability_score(embeddings: ArrayView2<f32>, classes: &[usize]) -> Result<f64> {
    let n = embeddings.nrows();
    if classes.len() != n {
        return Err(Error::Invalid(format!("{n} embeddings but {} class labels", classes.len())));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in classes.iter().enumerate() {
        members.entry(*c).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::Invalid("separability needs at least two classes".into()));
    }
    let smallest = members.values().map(Vec::len).min().unwrap_or(0);
    if smallest < 2 {
        return Err(Error::Invalid("every class needs at least two points".into()));
    }
    let class_ids: Vec<usize> = members.keys().copied().collect();
    let folds = smallest.min(MAX_FOLDS);
    let mut fold_of = vec![0; n];
    for idx in members.values() {
        for (rank, &i) in idx.iter().enumerate() {
            fold_of[i] = rank % folds;
        }
    }
    let rows: Vec<DVector<f64>> = embeddings
        .outer_iter()
        .map(|r| {
            let v = DVector::from_iterator(r.len(), r.iter().map(|x| *x as f64));
            let norm = v.norm();
            if norm > 0.0 {
                v / norm
            } else {
                v
            }
        })
        .collect();
    let mut correct = 0usize;
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        let m = train.len();
        // centre on the training rows and scale them to unit RMS norm, so
        // the penalty does not depend on how tight the cloud is
        let mean = train.iter().fold(DVector::zeros(rows[0].len()), |acc, &i| acc + &rows[i]) / m as f64;
        let rms = (train.iter().map(|&i| (&rows[i] - &mean).norm_squared()).sum::<f64>() / m as f64).sqrt();
        let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
        let fold_rows: Vec<DVector<f64>> = rows.iter().map(|r| (r - &mean) * scale).collect();
        let kernel = |a: usize, b: usize| fold_rows[a].dot(&fold_rows[b]) + 1.0;
        let k = DMatrix::from_fn(m, m, |a, b| kernel(train[a], train[b]) + if a == b { RIDGE } else { 0.0 });
        let targets = DMatrix::from_fn(m, class_ids.len(), |a, c| if classes[train[a]] == class_ids[c] { 1.0 } else { -1.0 });
        let chol = k.cholesky().ok_or_else(|| Error::Degenerate("ridge system is not positive definite".into()))?;
        let alpha = chol.solve(&targets);
        for &t in &test {
            let kt = DVector::from_fn(m, |a, _| kernel(t, train[a]));
            let scores = alpha.tr_mul(&kt);
            let mut best = 0;
            for c in 1..class_ids.len() {
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            correct += (class_ids[best] == classes[t]) as usize;
        }
    }
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand_distr::StandardNormal;

    /// Quantile by bisection on a Simpson-rule CDF of the beta density.
    fn beta_quantile(a: f64, b: f64, q: f64) -> f64 {
        let ln_norm = statrs::function::gamma::ln_gamma(a + b)
            - statrs::function::gamma::ln_gamma(a)
            - statrs::function::gamma::ln_gamma(b);
        let pdf =
            |x: f64| if x <= 0.0 || x >= 1.0 { 0.0 } else { (ln_norm + (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln()).exp() };
        let cdf = |x: f64| {
            let steps = 4000;
            let h = x / steps as f64;
            let mut acc = pdf(0.0) + pdf(x);
            for i in 1..steps {
                acc += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn empty_cell_is_the_prior() {
        let e = proportion_estimate(0, 0, 0.25).unwrap();
        assert_eq!(e.posterior_mean, 0.5);
        assert!(!e.significant);
        assert!((e.ci_low - 0.025).abs() < 1e-9 && (e.ci_high - 0.975).abs() < 1e-9);
    }

    #[test]
    fn intervals_match_numerical_quantiles() {
        for (s, n, sig) in [(80, 100, true), (25, 100, false), (3, 17, false)] {
            let e = proportion_estimate(s, n, 0.25).unwrap();
            let (a, b) = (1.0 + s as f64, 1.0 + (n - s) as f64);
            assert!((e.ci_low - beta_quantile(a, b, 0.025)).abs() < 1e-5, "{s}/{n}");
            assert!((e.ci_high - beta_quantile(a, b, 0.975)).abs() < 1e-5, "{s}/{n}");
            assert_eq!(e.significant, sig);
        }
        assert!(proportion_estimate(5, 4, 0.25).is_err());
    }

    #[test]
    fn bootstrap_brackets_the_mean_and_is_seeded() {
        let outcomes: Vec<(String, bool)> = (0..200).map(|i| (format!("p{}", i % 10), i % 3 == 0)).collect();
        let a = stratified_bootstrap(&outcomes, 2000, 7).unwrap();
        let b = stratified_bootstrap(&outcomes, 2000, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.ci_low < a.mean && a.mean < a.ci_high);
        assert!((a.mean - 67.0 / 200.0).abs() < 1e-12);
    }

    #[test]
    fn separated_and_identical_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let mut x = Array2::<f32>::zeros((n, 8));
        let classes: Vec<usize> = (0..n).map(|i| i % 2).collect();
        for i in 0..n {
            for j in 0..8 {
                x[[i, j]] = rng.sample::<f32, _>(StandardNormal) * 0.1;
            }
            x[[i, 0]] += if classes[i] == 0 { 1.0 } else { -1.0 };
        }
        assert_eq!(separability_score(x.view(), &classes).unwrap(), 1.0);
        let same = Array2::from_shape_fn((n, 8), |(i, j)| ((i / 2 * 8 + j) as f32).sin());
        assert!((separability_score(same.view(), &classes).unwrap() - 0.5).abs() < 1e-12);
        assert!(separability_score(same.view(), &[0; 40]).is_err());
    }

    #[test]
    fn consistency_ignores_ties() {
        let p = |consistent, tie| ConsistencyPair {
            model_id: "m".into(),
            prompt_id: "p".into(),
            word_type: WordType::Original,
            pair_id: "a".into(),
            label_id: "l".into(),
            consistent,
            tie,
        };
        let r = consistency_ratio(&[p(true, false), p(false, false), p(false, true)]);
        assert_eq!((r.count, r.total, r.ratio), (1, 2, Some(0.5)));
        assert_eq!(consistency_ratio(&[]).ratio, None);
    }
}
