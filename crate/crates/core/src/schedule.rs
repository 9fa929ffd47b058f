//! Tier-wise progressive training, adaptation timing and the learning rate
//! schedule.
//!
//! Steps in a [`ScheduleConfig`] are written at full scale (30k, 350k, ...)
//! and multiplied by `scale` when a [`TrainingSchedule`] is built.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusManifest, Tier};

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("cannot downsample {tier} to {wanted} samples: {detail}")]
    Downsample { tier: Tier, wanted: usize, detail: String },
}

/// `lr(t) = lr0 · (lr_end / lr0)^(t / horizon)`, clamped at `lr_end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrPolicy {
    pub lr0: f64,
    pub lr_end: f64,
    pub horizon: u64,
}

impl LrPolicy {
    pub fn new(lr0: f64, lr_end: f64, horizon: u64) -> Result<Self, ScheduleError> {
        if !(lr0 > 0.0 && lr_end > 0.0 && lr_end < lr0 && lr0.is_finite()) || horizon == 0 {
            return Err(ScheduleError::Invalid(format!("lr policy {lr0} -> {lr_end} over {horizon}")));
        }
        Ok(Self { lr0, lr_end, horizon })
    }

    pub fn rate(&self, steps_since_reset: u64) -> f64 {
        if steps_since_reset == 0 {
            return self.lr0;
        }
        if steps_since_reset >= self.horizon {
            return self.lr_end;
        }
        let frac = steps_since_reset as f64 / self.horizon as f64;
        self.lr0 * (self.lr_end / self.lr0).powf(frac)
    }
}

/// Tiers added at a step, on top of those already active.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub step: u64,
    pub tier: Tier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "none")]
    None,
    /// T1 and T2 languages downsampled to the size of T1.
    #[serde(rename = "T2-")]
    T2Minus,
    /// T1 to T3 languages downsampled to the size of T1 plus T2.
    #[serde(rename = "T3-")]
    T3Minus,
    /// Every tier active from the first step.
    #[serde(rename = "T3D")]
    T3Direct,
}

/// Which source model an adaptation run co-trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceStage {
    #[serde(rename = "initial")]
    Initial,
    T1,
    T2,
    T3,
}

impl SourceStage {
    /// Full-scale step at which adaptation starts from this stage.
    pub fn adaptation_step(self) -> u64 {
        match self {
            Self::Initial => 30_000,
            Self::T1 => 350_000,
            Self::T2 => 500_000,
            Self::T3 => 700_000,
        }
    }

    fn tiers(self) -> &'static [Tier] {
        match self {
            Self::Initial => &[],
            Self::T1 => &[Tier::T1],
            Self::T2 => &[Tier::T1, Tier::T2],
            Self::T3 => &[Tier::T1, Tier::T2, Tier::T3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub scale: f64,
    /// The only language trained before the first transition.
    pub initial_language: String,
    pub transitions: Vec<Transition>,
    pub adaptation_step: Option<u64>,
    pub lr0: f64,
    pub lr_end: f64,
    pub horizon: u64,
    pub ablation: Ablation,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            scale: 0.001,
            initial_language: "en".into(),
            transitions: default_transitions(),
            adaptation_step: None,
            lr0: 1e-3,
            lr_end: 1e-5,
            horizon: 850_000,
            ablation: Ablation::None,
        }
    }
}

fn default_transitions() -> Vec<Transition> {
    vec![
        Transition { step: 30_000, tier: Tier::T1 },
        Transition { step: 350_000, tier: Tier::T2 },
        Transition { step: 650_000, tier: Tier::T3 },
    ]
}

impl ScheduleConfig {
    /// Source training up to `stage`, then co-training with the target from
    /// that stage's adaptation point.
    pub fn adaptation(stage: SourceStage) -> Self {
        let transitions = default_transitions().into_iter().filter(|t| stage.tiers().contains(&t.tier)).collect();
        Self { transitions, adaptation_step: Some(stage.adaptation_step()), ..Self::default() }
    }

    pub fn build(&self) -> Result<TrainingSchedule, ScheduleError> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(ScheduleError::Invalid(format!("scale {}", self.scale)));
        }
        let s = |step: u64| (step as f64 * self.scale).round() as u64;
        let mut transitions: Vec<Transition> =
            self.transitions.iter().map(|t| Transition { step: s(t.step), tier: t.tier }).collect();
        if self.ablation == Ablation::T3Direct {
            for t in &mut transitions {
                t.step = 0;
            }
        }
        for w in transitions.windows(2) {
            if w[1].step < w[0].step || (w[1].step == w[0].step && self.ablation != Ablation::T3Direct) {
                return Err(ScheduleError::Invalid("transitions must be strictly increasing".into()));
            }
        }
        if transitions.iter().any(|t| t.tier == Tier::Target) {
            return Err(ScheduleError::Invalid("the target joins through adaptation_step".into()));
        }
        let lr = LrPolicy::new(self.lr0, self.lr_end, s(self.horizon).max(1))?;
        Ok(TrainingSchedule {
            initial_language: self.initial_language.clone(),
            transitions,
            adaptation_step: self.adaptation_step.map(s),
            lr,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSchedule {
    pub initial_language: String,
    pub transitions: Vec<Transition>,
    pub adaptation_step: Option<u64>,
    pub lr: LrPolicy,
}

impl TrainingSchedule {
    /// Tiers switched on at `step`; empty means the initial language alone.
    pub fn active_tiers(&self, step: u64) -> BTreeSet<Tier> {
        let mut tiers: BTreeSet<Tier> = self.transitions.iter().filter(|t| t.step <= step).map(|t| t.tier).collect();
        if self.adaptation_step.is_some_and(|a| step >= a) {
            tiers.insert(Tier::Target);
        }
        tiers
    }

    /// Languages to sample from at `step`, in manifest order.
    pub fn active_languages(&self, manifest: &CorpusManifest, step: u64) -> Vec<String> {
        let tiers = self.active_tiers(step);
        let sources = tiers.iter().any(|t| *t != Tier::Target);
        manifest
            .languages
            .iter()
            .filter(|l| tiers.contains(&l.tier) || (!sources && l.id == self.initial_language))
            .map(|l| l.id.clone())
            .collect()
    }

    /// Steps where the learning-rate counter restarts; `{0}` without any.
    pub fn reset_points(&self) -> BTreeSet<u64> {
        let mut r: BTreeSet<u64> = self.transitions.iter().map(|t| t.step).collect();
        r.extend(self.adaptation_step);
        if r.is_empty() {
            r.insert(0);
        }
        r
    }

    pub fn last_reset(&self, step: u64) -> u64 {
        self.reset_points().range(..=step).next_back().copied().unwrap_or(0)
    }

    pub fn learning_rate(&self, step: u64) -> f64 {
        self.lr.rate(step - self.last_reset(step))
    }

    /// Moves transition `index` to `step`, for loss-matched triggering.
    pub fn trigger_transition(&mut self, index: usize, step: u64) -> Result<(), ScheduleError> {
        if index >= self.transitions.len() {
            return Err(ScheduleError::Invalid(format!("no transition {index}")));
        }
        let prev = if index == 0 { 0 } else { self.transitions[index - 1].step };
        if step < prev {
            return Err(ScheduleError::Invalid(format!("cannot move transition {index} to {step}")));
        }
        let delta = step as i64 - self.transitions[index].step as i64;
        for t in &mut self.transitions[index..] {
            t.step = (t.step as i64 + delta).max(step as i64) as u64;
        }
        if let Some(a) = &mut self.adaptation_step {
            if *a >= step {
                *a = (*a as i64 + delta).max(step as i64) as u64;
            }
        }
        Ok(())
    }
}

/// Per-language sample counts that realize a downsampling ablation: every
/// language of the affected tiers keeps the same fraction of its data, with
/// largest-remainder rounding so the total is exact.
pub fn ablation_truncation(
    manifest: &CorpusManifest,
    ablation: Ablation,
) -> Result<Vec<(String, usize)>, ScheduleError> {
    let (kept, budget_tiers): (&[Tier], &[Tier]) = match ablation {
        Ablation::T2Minus => (&[Tier::T1, Tier::T2], &[Tier::T1]),
        Ablation::T3Minus => (&[Tier::T1, Tier::T2, Tier::T3], &[Tier::T1, Tier::T2]),
        Ablation::None | Ablation::T3Direct => return Ok(Vec::new()),
    };
    let langs: Vec<_> = manifest.languages.iter().filter(|l| kept.contains(&l.tier)).collect();
    let wanted: usize =
        manifest.languages.iter().filter(|l| budget_tiers.contains(&l.tier)).map(|l| l.n_samples).sum();
    let have: usize = langs.iter().map(|l| l.n_samples).sum();
    let top = *kept.last().expect("nonempty");
    if wanted < langs.len() {
        return Err(ScheduleError::Downsample { tier: top, wanted, detail: "fewer samples than languages".into() });
    }
    if wanted > have {
        return Err(ScheduleError::Downsample { tier: top, wanted, detail: format!("only {have} available") });
    }
    let frac = wanted as f64 / have as f64;
    let mut alloc: Vec<(usize, f64)> = langs
        .iter()
        .map(|l| {
            let exact = l.n_samples as f64 * frac;
            let base = (exact.floor() as usize).max(1);
            (base, exact - exact.floor())
        })
        .collect();
    let mut total: usize = alloc.iter().map(|a| a.0).sum();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| alloc[b].1.total_cmp(&alloc[a].1).then(a.cmp(&b)));
    let mut k = 0;
    while total < wanted {
        let i = order[k % order.len()];
        if alloc[i].0 < langs[i].n_samples {
            alloc[i].0 += 1;
            total += 1;
        }
        k += 1;
    }
    while total > wanted {
        let i = order[order.len() - 1 - (k % order.len())];
        if alloc[i].0 > 1 {
            alloc[i].0 -= 1;
            total -= 1;
        }
        k += 1;
    }
    Ok(langs.iter().zip(alloc).map(|(l, (n, _))| (l.id.clone(), n)).collect())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;
    use crate::corpus::LanguageEntry;

    fn manifest() -> CorpusManifest {
        let spec = [
            ("en", Tier::T1, 2000),
            ("ja", Tier::T1, 2000),
            ("it", Tier::T2, 500),
            ("ru", Tier::T2, 500),
            ("de", Tier::T2, 500),
            ("bg", Tier::T3, 100),
            ("hi", Tier::T3, 100),
            ("el", Tier::Target, 10),
        ];
        let mut index = BTreeMap::new();
        let mut next = 0;
        let languages = spec
            .iter()
            .map(|&(id, tier, n)| {
                index.insert(id.to_string(), (next..next + n).collect());
                next += n;
                LanguageEntry { id: id.into(), tier, n_samples: n, speakers: vec![format!("{id}-s0")] }
            })
            .collect();
        CorpusManifest { languages, index }
    }

    fn unscaled() -> TrainingSchedule {
        ScheduleConfig { scale: 1.0, ..ScheduleConfig::default() }.build().unwrap()
    }

    #[test]
    fn lr_endpoints_and_midpoint() {
        let lr = LrPolicy::new(1e-3, 1e-5, 850_000).unwrap();
        assert_eq!(lr.rate(0), 1e-3);
        assert_eq!(lr.rate(850_000), 1e-5);
        assert_eq!(lr.rate(2_000_000), 1e-5);
        assert!((lr.rate(425_000) - 1e-4).abs() < 1e-18);
        assert!(LrPolicy::new(1e-3, 1e-3, 10).is_err());
        assert!(LrPolicy::new(1e-3, 1e-5, 0).is_err());
    }

    #[test]
    fn default_phases() {
        let s = unscaled();
        let m = manifest();
        assert_eq!(s.active_languages(&m, 0), vec!["en"]);
        assert_eq!(s.active_languages(&m, 29_999), vec!["en"]);
        assert_eq!(s.active_languages(&m, 30_000), vec!["en", "ja"]);
        assert_eq!(s.active_languages(&m, 400_000), vec!["en", "ja", "it", "ru", "de"]);
        assert_eq!(s.active_languages(&m, 650_000).len(), 7);
        assert_eq!(s.reset_points(), BTreeSet::from([30_000, 350_000, 650_000]));
    }

    #[test]
    fn scaled_boundaries() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.active_tiers(651), BTreeSet::from([Tier::T1, Tier::T2, Tier::T3]));
        assert_eq!(s.active_tiers(649), BTreeSet::from([Tier::T1, Tier::T2]));
        assert_eq!(s.lr.horizon, 850);
        assert_eq!(s.learning_rate(350), 1e-3);
        assert!(s.learning_rate(349) < s.learning_rate(31));
    }

    #[test]
    fn adaptation_presets() {
        let m = manifest();
        let s = ScheduleConfig { scale: 1.0, ..ScheduleConfig::adaptation(SourceStage::T2) }.build().unwrap();
        assert!(s.reset_points().contains(&500_000));
        assert!(!s.active_languages(&m, 499_999).contains(&"el".to_string()));
        assert!(s.active_languages(&m, 500_000).contains(&"el".to_string()));
        assert!(!s.active_tiers(900_000).contains(&Tier::T3));
        let e = ScheduleConfig { scale: 1.0, ..ScheduleConfig::adaptation(SourceStage::Initial) }.build().unwrap();
        assert_eq!(e.active_languages(&m, 40_000), vec!["en", "el"]);
        assert_eq!(e.reset_points(), BTreeSet::from([30_000]));
    }

    #[test]
    fn no_transitions_resets_at_zero() {
        let s = ScheduleConfig { transitions: vec![], ..ScheduleConfig::default() }.build().unwrap();
        assert_eq!(s.reset_points(), BTreeSet::from([0]));
        assert_eq!(s.learning_rate(0), 1e-3);
    }

    #[test]
    fn direct_ablation_starts_with_everything() {
        let s = ScheduleConfig { ablation: Ablation::T3Direct, ..ScheduleConfig::default() }.build().unwrap();
        assert!(s.active_tiers(0).contains(&Tier::T3));
    }

    #[test]
    fn downsampling_ablations() {
        let m = manifest();
        let t2 = ablation_truncation(&m, Ablation::T2Minus).unwrap();
        assert_eq!(t2.len(), 5);
        assert_eq!(t2.iter().map(|x| x.1).sum::<usize>(), 4000);
        assert!(t2.iter().all(|x| x.1 >= 1));
        let t3 = ablation_truncation(&m, Ablation::T3Minus).unwrap();
        assert_eq!(t3.iter().map(|x| x.1).sum::<usize>(), 5500);
        assert!(ablation_truncation(&m, Ablation::None).unwrap().is_empty());
    }

    #[test]
    fn rejects_unordered_transitions() {
        let c = ScheduleConfig {
            transitions: vec![Transition { step: 10, tier: Tier::T2 }, Transition { step: 5, tier: Tier::T3 }],
            ..ScheduleConfig::default()
        };
        assert!(c.build().is_err());
    }

    #[test]
    fn loss_triggered_transition_shifts_later_ones() {
        let mut s = unscaled();
        s.trigger_transition(1, 300_000).unwrap();
        assert_eq!(s.transitions[1].step, 300_000);
        assert_eq!(s.transitions[2].step, 600_000);
        assert!(s.trigger_transition(1, 10).is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let c = ScheduleConfig { ablation: Ablation::T2Minus, adaptation_step: Some(700_000), ..Default::default() };
        let text = toml::to_string(&c).unwrap();
        assert!(text.contains("T2-"));
        assert_eq!(toml::from_str::<ScheduleConfig>(&text).unwrap(), c);
    }

    proptest! {
        #[test]
        fn lr_strictly_decreasing(a in 0u64..850_000, b in 0u64..850_000) {
            prop_assume!(a < b);
            let lr = LrPolicy::new(1e-3, 1e-5, 850_000).unwrap();
            prop_assert!(lr.rate(a) > lr.rate(b));
        }

        #[test]
        fn resets_restart_at_lr0(step in 0u64..1_000_000) {
            let s = unscaled();
            let r = s.last_reset(step);
            prop_assert!(r <= step);
            if s.reset_points().contains(&step) {
                prop_assert_eq!(s.learning_rate(step), 1e-3);
            }
        }

        #[test]
        fn scaling_commutes(k in 0u64..1000, which in 0usize..3) {
            let scale = [1.0, 0.01, 0.001][which];
            let full = unscaled();
            let small = ScheduleConfig { scale, ..ScheduleConfig::default() }.build().unwrap();
            let step = k * 1000;
            let scaled_step = (step as f64 * scale).round() as u64;
            prop_assert_eq!(full.active_tiers(step), small.active_tiers(scaled_step));
        }

        #[test]
        fn active_set_is_monotone(a in 0u64..1_000_000, b in 0u64..1_000_000) {
            prop_assume!(a <= b);
            let s = unscaled();
            prop_assert!(s.active_tiers(a).is_subset(&s.active_tiers(b)));
        }
    }
}
