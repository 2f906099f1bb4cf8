use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::SslError;

pub const ALIGN_EPS: f64 = 1e-8;

/// `π·y + (1 − π)·mean(preds)` for a clean sample with one-hot label `label`.
pub fn co_refine(label: usize, prob: f64, preds: &[&[f64]]) -> Result<Vec<f64>, SslError> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(SslError::Probability(prob));
    }
    let mean = mean_of(preds)?;
    if label >= mean.len() {
        return Err(SslError::Shape(format!(
            "label {label} for {} classes",
            mean.len()
        )));
    }
    let mut out: Vec<f64> = mean.iter().map(|m| (1.0 - prob) * m).collect();
    out[label] += prob;
    Ok(out)
}

/// Mean of both branches' predictions over the same augmentations.
pub fn co_guess(own: &[&[f64]], other: &[&[f64]]) -> Result<Vec<f64>, SslError> {
    if own.len() != other.len() || own.is_empty() {
        return Err(SslError::Shape(format!(
            "{} own and {} other augmentations",
            own.len(),
            other.len()
        )));
    }
    let all: Vec<&[f64]> = own.iter().chain(other).copied().collect();
    mean_of(&all)
}

fn mean_of(preds: &[&[f64]]) -> Result<Vec<f64>, SslError> {
    let first = preds
        .first()
        .ok_or_else(|| SslError::Shape("no predictions".into()))?;
    let c = first.len();
    let mut acc = vec![0.0; c];
    for p in preds {
        if p.len() != c {
            return Err(SslError::Shape(format!(
                "prediction lengths {} and {c}",
                p.len()
            )));
        }
        acc.iter_mut().zip(*p).for_each(|(a, v)| *a += v);
    }
    let n = preds.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// `p^(1/T)` renormalized.
pub fn sharpen(p: &[f64], temperature: f64) -> Result<Vec<f64>, SslError> {
    if !(temperature > 0.0) {
        return Err(SslError::Temperature(temperature));
    }
    let max = p.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(SslError::ZeroDistribution);
    }
    // Scaling by the max first keeps p^(1/T) away from underflow.
    let powered: Vec<f64> = p
        .iter()
        .map(|&v| (v / max).powf(1.0 / temperature))
        .collect();
    let s: f64 = powered.iter().sum();
    Ok(powered.into_iter().map(|v| v / s).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    /// Weights `max(p_y − p̃_y, ε) / max(p̃_q, ε)`.
    Joint,
    /// Weights `p_y / max(p̃_q, ε)`.
    Ratio,
    /// Guesses pass through unchanged.
    None,
}

/// Marginals used to reweight guessed labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentState {
    pub mode: AlignMode,
    /// Target class marginal.
    pub target: Vec<f64>,
    /// Per-class count of clean samples divided by the training-set size.
    pub clean_marginal: Vec<f64>,
    /// Moving average of aligned guesses.
    pub guess_marginal: Vec<f64>,
    pub momentum: f64,
}

impl AlignmentState {
    pub fn uniform(classes: usize, mode: AlignMode) -> Self {
        let u = vec![1.0 / classes as f64; classes];
        Self {
            mode,
            target: u.clone(),
            clean_marginal: vec![0.0; classes],
            guess_marginal: u,
            momentum: 0.99,
        }
    }

    /// Sets `p̃_y` from the clean labels of a division over `total` samples.
    pub fn set_clean_labels(&mut self, labels: impl IntoIterator<Item = usize>, total: usize) {
        self.clean_marginal.iter_mut().for_each(|v| *v = 0.0);
        for y in labels {
            self.clean_marginal[y] += 1.0 / total as f64;
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        let c = self.target.len();
        (0..c)
            .map(|k| match self.mode {
                AlignMode::Joint => {
                    (self.target[k] - self.clean_marginal[k]).max(ALIGN_EPS)
                        / self.guess_marginal[k].max(ALIGN_EPS)
                }
                AlignMode::Ratio => self.target[k] / self.guess_marginal[k].max(ALIGN_EPS),
                AlignMode::None => 1.0,
            })
            .collect()
    }

    /// `p̃_q ← m·p̃_q + (1 − m)·observed`.
    pub fn observe(&mut self, observed: &[f64]) {
        let m = self.momentum;
        for (g, &o) in self.guess_marginal.iter_mut().zip(observed) {
            *g = m * *g + (1.0 - m) * o;
        }
    }
}

/// Aligns one guess and folds the result into the guess marginal.
pub fn align(q: &[f64], state: &mut AlignmentState) -> Result<Vec<f64>, SslError> {
    let out = state.apply(q)?;
    state.observe(&out);
    Ok(out)
}

impl AlignmentState {
    /// `Norm(q ⊙ w)` with the current weights; the state is left untouched.
    pub fn apply(&self, q: &[f64]) -> Result<Vec<f64>, SslError> {
        if q.len() != self.target.len() {
            return Err(SslError::Shape(format!(
                "{} classes vs {}",
                q.len(),
                self.target.len()
            )));
        }
        normalized_product(q, &self.weights())
    }
}

fn normalized_product(q: &[f64], w: &[f64]) -> Result<Vec<f64>, SslError> {
    let raw: Vec<f64> = q.iter().zip(w).map(|(a, b)| a * b).collect();
    let s: f64 = raw.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(SslError::ZeroDistribution);
    }
    Ok(raw.into_iter().map(|v| v / s).collect())
}

/// Aligns a batch of guesses with the current weights, then folds their mean
/// into the guess marginal.
pub fn align_batch(qs: &[Vec<f64>], state: &mut AlignmentState) -> Result<Vec<Vec<f64>>, SslError> {
    let out = qs
        .iter()
        .map(|q| state.apply(q))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(first) = out.first() {
        let mut mean = vec![0.0; first.len()];
        for q in &out {
            mean.iter_mut()
                .zip(q)
                .for_each(|(m, v)| *m += v / out.len() as f64);
        }
        state.observe(&mean);
    }
    Ok(out)
}

/// Draws `λ' = max(λ, 1 − λ)` with `λ ~ Beta(α, α)`.
pub fn draw_mix_weight<R: Rng>(alpha: f64, rng: &mut R) -> Result<f64, SslError> {
    let beta = Beta::new(alpha, alpha).map_err(|_| SslError::Alpha(alpha))?;
    let l: f64 = beta.sample(rng);
    Ok(l.max(1.0 - l))
}

/// `λ'·a + (1 − λ')·b` elementwise.
pub fn interpolate<T: Copy + Into<f64>>(a: &[T], b: &[T], weight: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y): (f64, f64) = (x.into(), y.into());
            y + weight * (x - y)
        })
        .collect()
}

/// Mixed input, mixed label and the weight used.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedPair {
    pub input: Vec<f64>,
    pub label: Vec<f64>,
    pub weight: f64,
}

/// Mixes two (input, label) pairs with a folded Beta weight.
pub fn mix_pair<R: Rng>(
    first: (&[f64], &[f64]),
    second: (&[f64], &[f64]),
    alpha: f64,
    rng: &mut R,
) -> Result<MixedPair, SslError> {
    if first.0.len() != second.0.len() || first.1.len() != second.1.len() {
        return Err(SslError::Shape("mixed pairs differ in shape".into()));
    }
    let weight = draw_mix_weight(alpha, rng)?;
    Ok(MixedPair {
        input: interpolate(first.0, second.0, weight),
        label: interpolate(first.1, second.1, weight),
        weight,
    })
}

/// Weight on the unlabeled loss: linear from 0 to `target` over `ramp_epochs`.
/// `progress` counts epochs since warm-up ended (fractional within an epoch).
pub fn lambda_u(target: f64, ramp_epochs: f64, progress: f64) -> f64 {
    if ramp_epochs <= 0.0 {
        return target;
    }
    target * (progress / ramp_epochs).clamp(0.0, 1.0)
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}
