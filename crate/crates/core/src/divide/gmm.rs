use serde::{Deserialize, Serialize};

use super::DivideError;

pub const VARIANCE_FLOOR: f64 = 1e-4;
pub const MAX_ITERATIONS: usize = 100;
/// Stop once the mean per-point log-likelihood improves by less than this.
pub const TOLERANCE: f64 = 1e-6;

/// Two-component univariate Gaussian mixture, components ordered by mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture1D {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
    /// Set when every input value was equal; every point is then assigned to
    /// the low-mean component.
    pub degenerate: bool,
    pub iterations: usize,
    /// Mean per-point log-likelihood after each EM iteration.
    pub log_likelihood: Vec<f64>,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl GaussianMixture1D {
    fn degenerate_at(v: f64) -> Self {
        Self {
            weights: [1.0, 0.0],
            means: [v, v],
            variances: [VARIANCE_FLOOR, VARIANCE_FLOOR],
            degenerate: true,
            iterations: 0,
            log_likelihood: Vec::new(),
        }
    }

    fn component_logs(&self, x: f64) -> [f64; 2] {
        [0, 1].map(|k| {
            if self.weights[k] > 0.0 {
                self.weights[k].ln() + log_normal(x, self.means[k], self.variances[k])
            } else {
                f64::NEG_INFINITY
            }
        })
    }

    /// Responsibility of the low-mean component for `x`.
    pub fn low_posterior(&self, x: f64) -> f64 {
        if self.degenerate {
            return 1.0;
        }
        let [a, b] = self.component_logs(x);
        (a - log_sum_exp(a, b)).exp()
    }

    /// Mean per-point log-likelihood of `xs`.
    pub fn mean_log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter()
            .map(|&x| {
                let [a, b] = self.component_logs(x);
                log_sum_exp(a, b)
            })
            .sum::<f64>()
            / xs.len() as f64
    }
}

/// EM fit of two components.
///
/// Initialized at the 10th and 90th percentiles with equal weights and the
/// pooled variance; at most [`MAX_ITERATIONS`] iterations. Fewer than four
/// points or all-equal input yield the degenerate mixture.
pub fn fit_gmm(xs: &[f64]) -> Result<GaussianMixture1D, DivideError> {
    if let Some(bad) = xs.iter().find(|v| !v.is_finite()) {
        return Err(DivideError::NonFinite(*bad));
    }
    let Some(&first) = xs.first() else {
        return Err(DivideError::Empty);
    };
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    if xs.len() < 4 || sorted[0] == sorted[sorted.len() - 1] {
        return Ok(GaussianMixture1D::degenerate_at(first));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let pooled = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR);
    let mut gmm = GaussianMixture1D {
        weights: [0.5, 0.5],
        means: [percentile(&sorted, 0.1), percentile(&sorted, 0.9)],
        variances: [pooled, pooled],
        degenerate: false,
        iterations: 0,
        log_likelihood: Vec::new(),
    };
    let mut prev = gmm.mean_log_likelihood(xs);
    let mut resp = vec![0.0f64; xs.len()];
    for it in 1..=MAX_ITERATIONS {
        for (r, &x) in resp.iter_mut().zip(xs) {
            let [a, b] = gmm.component_logs(x);
            *r = (a - log_sum_exp(a, b)).exp();
        }
        let n0: f64 = resp.iter().sum();
        let n1 = n - n0;
        let mut next = gmm.clone();
        for (k, nk) in [(0usize, n0), (1, n1)] {
            if nk <= f64::MIN_POSITIVE {
                next.weights[k] = 0.0;
                continue;
            }
            let w = |r: f64| if k == 0 { r } else { 1.0 - r };
            let mu = resp.iter().zip(xs).map(|(&r, &x)| w(r) * x).sum::<f64>() / nk;
            let var = resp
                .iter()
                .zip(xs)
                .map(|(&r, &x)| w(r) * (x - mu).powi(2))
                .sum::<f64>()
                / nk;
            next.weights[k] = nk / n;
            next.means[k] = mu;
            next.variances[k] = var.max(VARIANCE_FLOOR);
        }
        let ll = next.mean_log_likelihood(xs);
        if ll < prev - 1e-12 * prev.abs().max(1.0) {
            return Err(DivideError::LikelihoodDecreased {
                iteration: it,
                before: prev,
                after: ll,
            });
        }
        gmm = next;
        gmm.iterations = it;
        gmm.log_likelihood.push(ll);
        if ll - prev < TOLERANCE {
            break;
        }
        prev = ll;
    }
    if gmm.means[0] > gmm.means[1] {
        gmm.weights.swap(0, 1);
        gmm.means.swap(0, 1);
        gmm.variances.swap(0, 1);
    }
    Ok(gmm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn separated_clusters() {
        let xs: Vec<f64> = (0..100).map(|i| if i < 50 { 0.0 } else { 1.0 }).collect();
        let g = fit_gmm(&xs).unwrap();
        assert!(g.means[0].abs() < 1e-6 && (g.means[1] - 1.0).abs() < 1e-6);
        assert!((g.weights[0] - 0.5).abs() < 1e-6);
        assert!(g.low_posterior(0.0) >= 0.999);
        assert!(g.low_posterior(1.0) <= 0.001);
    }

    #[test]
    fn equal_values_are_degenerate() {
        let g = fit_gmm(&[0.3; 20]).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.low_posterior(0.3), 1.0);
        assert!(fit_gmm(&[0.1, 0.9, 0.5]).unwrap().degenerate);
        assert!(matches!(fit_gmm(&[]), Err(DivideError::Empty)));
    }

    #[test]
    fn posterior_is_the_closed_form_bayes_responsibility() {
        let xs: Vec<f64> = (0..60)
            .map(|i| ((i * 37) % 60) as f64 / 59.0)
            .map(|v| v * v)
            .collect();
        let g = fit_gmm(&xs).unwrap();
        for &x in &xs {
            let d = |k: usize| {
                g.weights[k] * (-(x - g.means[k]).powi(2) / (2.0 * g.variances[k])).exp()
                    / (2.0 * std::f64::consts::PI * g.variances[k]).sqrt()
            };
            let want = d(0) / (d(0) + d(1));
            assert!((g.low_posterior(x) - want).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn likelihood_never_decreases(xs in proptest::collection::vec(0.0f64..1.0, 4..200)) {
            let g = fit_gmm(&xs).unwrap();
            for w in g.log_likelihood.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-12);
            }
            prop_assert!(g.means[0] <= g.means[1]);
            prop_assert!((g.weights[0] + g.weights[1] - 1.0).abs() < 1e-9);
            prop_assert!(g.variances.iter().all(|&v| v >= VARIANCE_FLOOR));
            for &x in &xs {
                let p = g.low_posterior(x);
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }
    }
}
