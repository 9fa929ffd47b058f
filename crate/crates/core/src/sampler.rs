//! Exponential language balancing and two-stage sampling.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::corpus::CorpusManifest;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("no languages to sample from")]
    Empty,
    #[error("language {0} has a nonpositive sample count")]
    NonpositiveCount(String),
    #[error("alpha must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("target override {0}: {1}")]
    BadOverride(String, String),
    #[error("language {0} has no samples in the manifest")]
    MissingLanguage(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingDistribution {
    pub alpha: f64,
    pub languages: Vec<String>,
    /// Data shares `N_i / Σ N_j` over all listed languages.
    pub c: Vec<f64>,
    pub p: Vec<f64>,
    pub target_override: Option<(String, f64)>,
}

/// `p_i = c_i^α / Σ c_j^α`. With an override, the target gets exactly `p_t`
/// and the remaining languages share `1 - p_t` in the same proportions.
pub fn compute_distribution(
    counts: &[(String, usize)],
    alpha: f64,
    target_override: Option<(&str, f64)>,
) -> Result<SamplingDistribution, SamplerError> {
    if counts.is_empty() {
        return Err(SamplerError::Empty);
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(SamplerError::BadAlpha(alpha));
    }
    if let Some((id, _)) = counts.iter().find(|(_, n)| *n == 0) {
        return Err(SamplerError::NonpositiveCount(id.clone()));
    }
    let total: f64 = counts.iter().map(|(_, n)| *n as f64).sum();
    let c: Vec<f64> = counts.iter().map(|(_, n)| *n as f64 / total).collect();
    let target = match target_override {
        Some((id, pt)) => {
            let idx = counts
                .iter()
                .position(|(l, _)| l == id)
                .ok_or_else(|| SamplerError::BadOverride(id.into(), "not among the languages".into()))?;
            if !(pt > 0.0 && pt < 1.0) {
                return Err(SamplerError::BadOverride(id.into(), format!("probability {pt} outside (0, 1)")));
            }
            if counts.len() == 1 {
                return Err(SamplerError::BadOverride(id.into(), "needs at least one other language".into()));
            }
            Some((idx, pt))
        }
        None => None,
    };
    let weights: Vec<f64> = c
        .iter()
        .enumerate()
        .map(|(i, ci)| if target.is_some_and(|(t, _)| t == i) { 0.0 } else { ci.powf(alpha) })
        .collect();
    let z: f64 = weights.iter().sum();
    let mass = target.map_or(1.0, |(_, pt)| 1.0 - pt);
    let mut p: Vec<f64> = weights.iter().map(|w| mass * w / z).collect();
    if let Some((t, pt)) = target {
        p[t] = pt;
    }
    Ok(SamplingDistribution {
        alpha,
        languages: counts.iter().map(|(l, _)| l.clone()).collect(),
        c,
        p,
        target_override: target_override.map(|(l, pt)| (l.to_string(), pt)),
    })
}

impl SamplingDistribution {
    pub fn probability(&self, language: &str) -> Option<f64> {
        self.languages.iter().position(|l| l == language).map(|i| self.p[i])
    }

    pub fn draw_language(&self, rng: &mut impl Rng) -> usize {
        WeightedIndex::new(&self.p).expect("valid weights").sample(rng)
    }

    /// One p-vector as `language,probability` CSV lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("language,p\n");
        for (l, p) in self.languages.iter().zip(&self.p) {
            s.push_str(&format!("{l},{p:.15}\n"));
        }
        s
    }
}

/// Two-stage sampler: language by `p`, then a record of that language.
/// Within a language, records are drawn without replacement from a shuffled
/// window that is reshuffled once exhausted.
#[derive(Clone, Debug)]
pub struct LanguageSampler {
    dist: SamplingDistribution,
    index: WeightedIndex<f64>,
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
}

impl LanguageSampler {
    pub fn new(dist: SamplingDistribution, manifest: &CorpusManifest) -> Result<Self, SamplerError> {
        let pools = dist
            .languages
            .iter()
            .map(|l| {
                let s = manifest.samples_of(l);
                if s.is_empty() {
                    Err(SamplerError::MissingLanguage(l.clone()))
                } else {
                    Ok(s.to_vec())
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let index = WeightedIndex::new(&dist.p).map_err(|_| SamplerError::Empty)?;
        let cursors = pools.iter().map(Vec::len).collect();
        Ok(Self { dist, index, pools, cursors })
    }

    pub fn distribution(&self) -> &SamplingDistribution {
        &self.dist
    }

    /// Returns `(language index, record index into the corpus)`.
    pub fn next(&mut self, rng: &mut impl Rng) -> (usize, usize) {
        let lang = self.index.sample(rng);
        let pool = &mut self.pools[lang];
        if self.cursors[lang] == pool.len() {
            pool.shuffle(rng);
            self.cursors[lang] = 0;
        }
        let rec = pool[self.cursors[lang]];
        self.cursors[lang] += 1;
        (lang, rec)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;

    fn counts(ns: &[usize]) -> Vec<(String, usize)> {
        ns.iter().enumerate().map(|(i, &n)| (format!("l{i}"), n)).collect()
    }

    #[test]
    fn alpha_one_gives_raw_shares() {
        let d = compute_distribution(&counts(&[90, 10]), 1.0, None).unwrap();
        assert!((d.p[0] - 0.9).abs() < 1e-15 && (d.p[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn tiny_alpha_is_nearly_uniform() {
        let d = compute_distribution(&counts(&[100_000, 10, 1]), 1e-12, None).unwrap();
        for p in d.p {
            assert!((p - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn frozen_alpha_point_two_values() {
        let d = compute_distribution(&counts(&[8000, 1000, 100]), 0.2, None).unwrap();
        let want = [0.481_688_477_861_133_6, 0.317_795_878_532_959_95, 0.200_515_643_605_906_46];
        for (p, w) in d.p.iter().zip(want) {
            assert!((p - w).abs() < 1e-12, "{p} vs {w}");
        }
    }

    #[test]
    fn override_is_exact() {
        let d = compute_distribution(&counts(&[500, 100, 10]), 0.2, Some(("l2", 0.25))).unwrap();
        assert_eq!(d.p[2], 0.25);
        assert!((d.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let plain = compute_distribution(&counts(&[500, 100]), 0.2, None).unwrap();
        assert!((d.p[0] / d.p[1] - plain.p[0] / plain.p[1]).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert_eq!(compute_distribution(&[], 0.2, None), Err(SamplerError::Empty));
        assert!(matches!(compute_distribution(&counts(&[1, 0]), 0.2, None), Err(SamplerError::NonpositiveCount(_))));
        assert!(matches!(compute_distribution(&counts(&[1]), 0.0, None), Err(SamplerError::BadAlpha(_))));
        assert!(compute_distribution(&counts(&[1, 2]), 0.2, Some(("zz", 0.25))).is_err());
        assert!(compute_distribution(&counts(&[1, 2]), 0.2, Some(("l0", 1.0))).is_err());
        assert!(compute_distribution(&counts(&[1]), 0.2, Some(("l0", 0.5))).is_err());
    }

    fn manifest(ns: &[usize]) -> CorpusManifest {
        let mut index = BTreeMap::new();
        let mut next = 0;
        for (i, &n) in ns.iter().enumerate() {
            index.insert(format!("l{i}"), (next..next + n).collect());
            next += n;
        }
        CorpusManifest { languages: Vec::new(), index }
    }

    #[test]
    fn single_language_always_drawn() {
        let d = compute_distribution(&counts(&[5]), 0.2, None).unwrap();
        let mut s = LanguageSampler::new(d, &manifest(&[5])).unwrap();
        let mut rng = crate::rng_for(0, &["t"]);
        for _ in 0..50 {
            assert_eq!(s.next(&mut rng).0, 0);
        }
    }

    #[test]
    fn within_language_draws_cover_each_window() {
        let d = compute_distribution(&counts(&[7]), 0.2, None).unwrap();
        let mut s = LanguageSampler::new(d, &manifest(&[7])).unwrap();
        let mut rng = crate::rng_for(1, &["t"]);
        for _ in 0..3 {
            let mut window: Vec<usize> = (0..7).map(|_| s.next(&mut rng).1).collect();
            window.sort();
            assert_eq!(window, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn fixed_seed_reproduces_sequence() {
        let d = compute_distribution(&counts(&[30, 20, 10]), 0.2, None).unwrap();
        let m = manifest(&[30, 20, 10]);
        let run = || {
            let mut s = LanguageSampler::new(d.clone(), &m).unwrap();
            let mut rng = crate::rng_for(9, &["t"]);
            (0..100).map(|_| s.next(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_manifest_language_rejected() {
        let d = compute_distribution(&counts(&[3, 3]), 0.2, None).unwrap();
        assert!(matches!(LanguageSampler::new(d, &manifest(&[3])), Err(SamplerError::MissingLanguage(_))));
    }

    proptest! {
        #[test]
        fn normalized_and_flattening(ns in prop::collection::vec(1usize..100_000, 1..12), alpha in 0.01f64..1.0) {
            let d = compute_distribution(&counts(&ns), alpha, None).unwrap();
            prop_assert!((d.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(d.p.iter().all(|&p| p > 0.0));
            for i in 0..ns.len() {
                for j in 0..ns.len() {
                    if d.c[i] > d.c[j] {
                        let ratio = d.p[i] / d.p[j];
                        prop_assert!(ratio > 1.0 && ratio < d.c[i] / d.c[j]);
                        prop_assert!((ratio / (d.c[i] / d.c[j]).powf(alpha) - 1.0).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn override_sums_to_one(ns in prop::collection::vec(1usize..10_000, 2..10), pt in 0.01f64..0.99) {
            let d = compute_distribution(&counts(&ns), 0.2, Some(("l0", pt))).unwrap();
            prop_assert_eq!(d.p[0], pt);
            prop_assert!((d.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
