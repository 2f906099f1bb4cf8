use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, SarSample};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[serde(alias = "sym")]
    Symmetric,
    #[serde(alias = "asym")]
    Asymmetric,
}

impl std::str::FromStr for NoiseKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sym" | "symmetric" => Ok(Self::Symmetric),
            "asym" | "asymmetric" => Ok(Self::Asymmetric),
            other => Err(format!(
                "unknown noise kind '{other}' (expected sym or asym)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    /// Class `c` is relabeled as `pair_map[c]`; only used for asymmetric noise.
    #[serde(default)]
    pub pair_map: Vec<usize>,
}

/// Swaps neighbouring classes: 0↔1, 2↔3, ...; an odd last class maps to itself.
pub fn default_pair_map(classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| {
            let partner = c ^ 1;
            if partner < classes {
                partner
            } else {
                c
            }
        })
        .collect()
}

impl NoiseSpec {
    pub fn symmetric(rate: f64) -> Self {
        Self {
            kind: NoiseKind::Symmetric,
            rate,
            pair_map: Vec::new(),
        }
    }

    pub fn asymmetric(rate: f64, classes: usize) -> Self {
        Self {
            kind: NoiseKind::Asymmetric,
            rate,
            pair_map: default_pair_map(classes),
        }
    }

    pub fn validate(&self, classes: usize) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidNoise(m));
        if !(0.0..1.0).contains(&self.rate) {
            return bad(format!("rate {} outside [0, 1)", self.rate));
        }
        if self.kind == NoiseKind::Asymmetric {
            if self.rate >= 0.5 {
                return bad(format!("asymmetric rate {} must be below 0.5", self.rate));
            }
            if self.pair_map.len() != classes {
                return bad(format!(
                    "pair map has {} entries for {classes} classes",
                    self.pair_map.len()
                ));
            }
            if self.pair_map.iter().any(|&t| t >= classes) {
                return bad("pair map target out of range".into());
            }
            if self.pair_map.iter().enumerate().all(|(c, &t)| c == t) {
                return bad("pair map is the identity".into());
            }
        }
        if self.kind == NoiseKind::Symmetric && classes < 2 && self.rate > 0.0 {
            return bad("symmetric noise needs at least two classes".into());
        }
        Ok(())
    }
}

/// Relabels exactly `round(rate·N)` uniformly chosen samples.
///
/// Symmetric noise draws a different class uniformly; asymmetric noise applies
/// the pair map and only selects among samples whose class maps elsewhere.
pub fn inject_noise(
    samples: &[SarSample],
    spec: &NoiseSpec,
    classes: usize,
    seed: u64,
) -> Result<Vec<SarSample>, DataError> {
    spec.validate(classes)?;
    if let Some(s) = samples.iter().find(|s| s.is_mislabeled()) {
        return Err(DataError::AlreadyNoisy(s.id));
    }
    let mut out = samples.to_vec();
    let target = (spec.rate * samples.len() as f64).round() as usize;
    if target == 0 {
        return Ok(out);
    }
    let mut rng = seeded(seed);
    let eligible: Vec<usize> = match spec.kind {
        NoiseKind::Symmetric => (0..samples.len()).collect(),
        NoiseKind::Asymmetric => (0..samples.len())
            .filter(|&i| spec.pair_map[samples[i].true_label] != samples[i].true_label)
            .collect(),
    };
    if eligible.len() < target {
        return Err(DataError::InvalidNoise(format!(
            "{target} corruptions requested but only {} samples are eligible",
            eligible.len()
        )));
    }
    let mut chosen: Vec<usize> = sample_indices(&mut rng, eligible.len(), target)
        .into_iter()
        .map(|k| eligible[k])
        .collect();
    chosen.sort_unstable();
    for i in chosen {
        let y = out[i].true_label;
        out[i].train_label = match spec.kind {
            NoiseKind::Symmetric => {
                let k = rng.gen_range(0..classes - 1);
                if k >= y {
                    k + 1
                } else {
                    k
                }
            }
            NoiseKind::Asymmetric => spec.pair_map[y],
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::fake_samples;
    use proptest::prelude::*;

    #[test]
    fn zero_rate_is_identity() {
        let s = fake_samples(10, 20);
        assert_eq!(
            inject_noise(&s, &NoiseSpec::symmetric(0.0), 10, 1).unwrap(),
            s
        );
    }

    #[test]
    fn symmetric_rate_corrupts_exact_count() {
        let s = fake_samples(10, 100);
        let noisy = inject_noise(&s, &NoiseSpec::symmetric(0.4), 10, 3).unwrap();
        assert_eq!(noisy.iter().filter(|s| s.is_mislabeled()).count(), 400);
        assert_eq!(
            noisy,
            inject_noise(&s, &NoiseSpec::symmetric(0.4), 10, 3).unwrap()
        );
    }

    #[test]
    fn asymmetric_follows_pair_map() {
        let s = fake_samples(10, 100);
        let noisy = inject_noise(&s, &NoiseSpec::asymmetric(0.3, 10), 10, 5).unwrap();
        assert_eq!(noisy.iter().filter(|s| s.is_mislabeled()).count(), 300);
        let from3: Vec<_> = noisy
            .iter()
            .filter(|s| s.true_label == 3 && s.is_mislabeled())
            .collect();
        assert!(!from3.is_empty());
        assert!(from3.iter().all(|s| s.train_label == 2));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let s = fake_samples(4, 5);
        assert!(inject_noise(&s, &NoiseSpec::symmetric(1.0), 4, 0).is_err());
        assert!(inject_noise(&s, &NoiseSpec::asymmetric(0.5, 4), 4, 0).is_err());
        let identity = NoiseSpec {
            kind: NoiseKind::Asymmetric,
            rate: 0.2,
            pair_map: vec![0, 1, 2, 3],
        };
        assert!(inject_noise(&s, &identity, 4, 0).is_err());
        let noisy = inject_noise(&s, &NoiseSpec::symmetric(0.5), 4, 0).unwrap();
        assert!(matches!(
            inject_noise(&noisy, &NoiseSpec::symmetric(0.5), 4, 0),
            Err(DataError::AlreadyNoisy(_))
        ));
    }

    #[test]
    fn default_pairs_swap_neighbours() {
        assert_eq!(default_pair_map(5), vec![1, 0, 3, 2, 4]);
    }

    proptest! {
        #[test]
        fn injection_is_exact_and_preserves_payload(
            n_per in 1usize..40,
            classes in 2usize..8,
            rate in 0.0f64..0.99,
            asym in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let s = fake_samples(classes, n_per);
            let spec = if asym && rate < 0.5 {
                NoiseSpec::asymmetric(rate, classes)
            } else {
                NoiseSpec::symmetric(rate)
            };
            let target = (rate * s.len() as f64).round() as usize;
            match inject_noise(&s, &spec, classes, seed) {
                Ok(noisy) => {
                    prop_assert_eq!(noisy.iter().filter(|x| x.is_mislabeled()).count(), target);
                    for (a, b) in s.iter().zip(&noisy) {
                        prop_assert_eq!(a.true_label, b.true_label);
                        prop_assert_eq!(&a.asc, &b.asc);
                        prop_assert_eq!(&a.image, &b.image);
                        prop_assert!(b.train_label < classes);
                    }
                }
                Err(DataError::InvalidNoise(_)) => prop_assert!(spec.kind == NoiseKind::Asymmetric),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
