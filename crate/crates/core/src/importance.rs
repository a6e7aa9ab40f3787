//! Matrix-level importance metrics over an adapter's singular values.
//!
//! The spectral entropy of the squared-singular-value energy distribution is
//! the score that drives allocation. Nuclear, Frobenius, element/matrix
//! energy-weighted entropy and a smoothed |w·∇w| sensitivity score are
//! provided as comparators.
//!
//! Singular values are taken as plain slices: trained λ entries may be
//! negative, and every metric here depends only on λ² or |λ|.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterGrads, SvdAdapter};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-12;
pub const DEFAULT_SENSITIVITY_BETA: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricKind {
    SpectralEntropy {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    Nuclear,
    Frobenius,
    Sensitivity {
        #[serde(default = "default_beta")]
        beta1: f64,
        #[serde(default = "default_beta")]
        beta2: f64,
    },
    ElemEnergyEntropy {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    MatEnergyEntropy {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_beta() -> f64 {
    DEFAULT_SENSITIVITY_BETA
}

impl Default for MetricKind {
    fn default() -> Self {
        MetricKind::SpectralEntropy {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::SpectralEntropy { .. } => "spectral_entropy",
            MetricKind::Nuclear => "nuclear",
            MetricKind::Frobenius => "frobenius",
            MetricKind::Sensitivity { .. } => "sensitivity",
            MetricKind::ElemEnergyEntropy { .. } => "elem_energy_entropy",
            MetricKind::MatEnergyEntropy { .. } => "mat_energy_entropy",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MetricKind::SpectralEntropy { epsilon }
            | MetricKind::ElemEnergyEntropy { epsilon }
            | MetricKind::MatEnergyEntropy { epsilon } => {
                if !epsilon.is_finite() || epsilon <= 0.0 {
                    return Err(Error::config("metric.epsilon", format!("must be > 0, got {epsilon}")));
                }
            }
            MetricKind::Sensitivity { beta1, beta2 } => {
                for (name, b) in [("metric.beta1", beta1), ("metric.beta2", beta2)] {
                    if !(b > 0.0 && b < 1.0) {
                        return Err(Error::config(name, format!("must lie in (0, 1), got {b}")));
                    }
                }
            }
            MetricKind::Nuclear | MetricKind::Frobenius => {}
        }
        Ok(())
    }

    pub fn needs_gradients(&self) -> bool {
        matches!(self, MetricKind::Sensitivity { .. })
    }
}

/// Conventions applied while scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFlag {
    /// All singular values were zero; the energy distribution was taken as uniform.
    DegenerateSpectrum,
    /// Rank one: the log-r normalizer vanishes and entropy scores are defined as 0.
    RankOne,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: f64,
    pub flag: Option<ScoreFlag>,
}

impl Score {
    fn plain(value: f64) -> Self {
        Self { value, flag: None }
    }
}

/// Returned by [`energy_distribution`] when every λ is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegenerateSpectrum;

/// `s_i = λ_i² / Σ_j λ_j²`
pub fn energy_distribution(lambda: &[f64]) -> std::result::Result<Vec<f64>, DegenerateSpectrum> {
    let total: f64 = lambda.iter().map(|v| v * v).sum();
    if total == 0.0 || lambda.is_empty() {
        return Err(DegenerateSpectrum);
    }
    Ok(lambda.iter().map(|v| v * v / total).collect())
}

/// Energy distribution with the all-zero case mapped to uniform.
fn energy_or_uniform(lambda: &[f64]) -> (Vec<f64>, Option<ScoreFlag>) {
    match energy_distribution(lambda) {
        Ok(s) => (s, None),
        Err(DegenerateSpectrum) => {
            let r = lambda.len().max(1);
            (vec![1.0 / r as f64; r], Some(ScoreFlag::DegenerateSpectrum))
        }
    }
}

/// `Σ s_i log(s_i + ε)`, with `s_i == 0` terms contributing exactly zero.
fn entropy_sum(s: &[f64], epsilon: f64, weights: Option<&[f64]>) -> f64 {
    s.iter()
        .enumerate()
        .filter(|(_, &si)| si > 0.0)
        .map(|(i, &si)| {
            let w = weights.map_or(1.0, |w| w[i]);
            w * si * (si + epsilon).ln()
        })
        .sum()
}

/// Normalized spectral entropy `-(1 / log r) Σ s_i log(s_i + ε)`.
///
/// 1 at a uniform spectrum, near 0 when energy sits in one direction. Rank one
/// scores 0; an all-zero spectrum is scored as uniform.
pub fn spectral_entropy(lambda: &[f64], epsilon: f64) -> Score {
    let r = lambda.len();
    if r < 2 {
        return Score {
            value: 0.0,
            flag: Some(ScoreFlag::RankOne),
        };
    }
    let (s, flag) = energy_or_uniform(lambda);
    Score {
        value: -entropy_sum(&s, epsilon, None) / (r as f64).ln(),
        flag,
    }
}

/// Mean absolute singular value.
pub fn nuclear_importance(lambda: &[f64]) -> f64 {
    if lambda.is_empty() {
        return 0.0;
    }
    lambda.iter().map(|v| v.abs()).sum::<f64>() / lambda.len() as f64
}

/// `sqrt(Σ λ_i²) / n`
pub fn frobenius_importance(lambda: &[f64]) -> f64 {
    if lambda.is_empty() {
        return 0.0;
    }
    lambda.iter().map(|v| v * v).sum::<f64>().sqrt() / lambda.len() as f64
}

/// `-(1 / (r log r)) Σ |λ_i| s_i log(s_i + ε)`
pub fn elem_energy_entropy(lambda: &[f64], epsilon: f64) -> Score {
    let r = lambda.len();
    if r < 2 {
        return Score {
            value: 0.0,
            flag: Some(ScoreFlag::RankOne),
        };
    }
    let (s, flag) = energy_or_uniform(lambda);
    let mags: Vec<f64> = lambda.iter().map(|v| v.abs()).collect();
    let rf = r as f64;
    Score {
        value: -entropy_sum(&s, epsilon, Some(&mags)) / (rf * rf.ln()),
        flag,
    }
}

/// `-(1 / (r log r)) (Σ |λ_i|) (Σ s_i log(s_i + ε))`
pub fn mat_energy_entropy(lambda: &[f64], epsilon: f64) -> Score {
    let r = lambda.len();
    if r < 2 {
        return Score {
            value: 0.0,
            flag: Some(ScoreFlag::RankOne),
        };
    }
    let (s, flag) = energy_or_uniform(lambda);
    let mass: f64 = lambda.iter().map(|v| v.abs()).sum();
    let rf = r as f64;
    Score {
        value: -mass * entropy_sum(&s, epsilon, None) / (rf * rf.ln()),
        flag,
    }
}

/// Exponentially smoothed sensitivity and uncertainty for one adapter.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SensitivityState {
    pub smoothed: f64,
    pub uncertainty: f64,
    pub steps: u64,
}

impl SensitivityState {
    /// `Ī · Ū`
    pub fn score(&self) -> f64 {
        self.smoothed * self.uncertainty
    }

    /// Folds one step's raw sensitivity (mean of |w·g| over P, λ and Q) into the EMAs.
    pub fn update(&mut self, adapter: &SvdAdapter, grads: &AdapterGrads, beta1: f64, beta2: f64) -> Result<()> {
        let raw = raw_sensitivity(adapter, grads)?;
        self.update_raw(raw, beta1, beta2);
        Ok(())
    }

    pub fn update_raw(&mut self, raw: f64, beta1: f64, beta2: f64) {
        self.smoothed = beta1 * self.smoothed + (1.0 - beta1) * raw;
        self.uncertainty = beta2 * self.uncertainty + (1.0 - beta2) * (raw - self.smoothed).abs();
        self.steps += 1;
    }
}

/// Mean over all trainable adapter entries of `|w · ∂L/∂w|`.
pub fn raw_sensitivity(adapter: &SvdAdapter, grads: &AdapterGrads) -> Result<f64> {
    if grads.p.shape() != adapter.p().shape()
        || grads.q.shape() != adapter.q().shape()
        || grads.lambda.len() != adapter.rank()
    {
        return Err(Error::shape(
            "sensitivity_update",
            format!("grads for rank {}", adapter.rank()),
            format!("P {:?}, λ {}, Q {:?}", grads.p.shape(), grads.lambda.len(), grads.q.shape()),
        ));
    }
    let pairs = adapter
        .p()
        .data()
        .iter()
        .zip(grads.p.data())
        .chain(adapter.lambda().iter().zip(&grads.lambda))
        .chain(adapter.q().data().iter().zip(grads.q.data()));
    let (sum, n) = pairs.fold((0.0, 0usize), |(s, n), (w, g)| (s + (w * g).abs(), n + 1));
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Scores one singular-value list with a stateless metric.
pub fn score_spectrum(lambda: &[f64], metric: MetricKind) -> Option<Score> {
    Some(match metric {
        MetricKind::SpectralEntropy { epsilon } => spectral_entropy(lambda, epsilon),
        MetricKind::Nuclear => Score::plain(nuclear_importance(lambda)),
        MetricKind::Frobenius => Score::plain(frobenius_importance(lambda)),
        MetricKind::ElemEnergyEntropy { epsilon } => elem_energy_entropy(lambda, epsilon),
        MetricKind::MatEnergyEntropy { epsilon } => mat_energy_entropy(lambda, epsilon),
        MetricKind::Sensitivity { .. } => return None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub step: usize,
    pub metric: MetricKind,
    pub scores: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, ScoreFlag>,
}

impl ImportanceReport {
    pub fn score(&self, id: &str) -> Option<f64> {
        self.scores.get(id).copied()
    }
}

/// One score per adapter. Sensitivity scores come from `sensitivity`; an
/// adapter without a state scores 0.
pub fn score_all<'a>(
    step: usize,
    adapters: impl IntoIterator<Item = &'a SvdAdapter>,
    metric: MetricKind,
    sensitivity: &BTreeMap<String, SensitivityState>,
) -> Result<ImportanceReport> {
    let mut scores = BTreeMap::new();
    let mut flags = BTreeMap::new();
    for adapter in adapters {
        let score = match score_spectrum(adapter.lambda(), metric) {
            Some(s) => s,
            None => Score::plain(sensitivity.get(adapter.id()).map_or(0.0, SensitivityState::score)),
        };
        if !score.value.is_finite() {
            return Err(Error::Parameter(format!(
                "non-finite {} score for adapter {}",
                metric.name(),
                adapter.id()
            )));
        }
        if scores.insert(adapter.id().to_string(), score.value).is_some() {
            return Err(Error::config("adapters", format!("duplicate adapter id {}", adapter.id())));
        }
        if let Some(f) = score.flag {
            flags.insert(adapter.id().to_string(), f);
        }
    }
    if scores.is_empty() {
        return Err(Error::config("adapters", "no adapters registered"));
    }
    Ok(ImportanceReport {
        step,
        metric,
        scores,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    const EPS: f64 = 1e-12;

    fn adapter_with(id: &str, lambda: &[f64]) -> SvdAdapter {
        let r = lambda.len();
        SvdAdapter::from_parts(
            id,
            Matrix::zeros(4, 4),
            Matrix::zeros(4, r),
            lambda.to_vec(),
            Matrix::zeros(r, 4),
            r,
            8,
            1.0,
            0.02,
        )
        .unwrap()
    }

    #[test]
    fn energy_distribution_cases() {
        assert_eq!(energy_distribution(&[1.0; 4]).unwrap(), vec![0.25; 4]);
        let s = energy_distribution(&[2.0, 1.0]).unwrap();
        assert!((s[0] - 0.8).abs() < 1e-15 && (s[1] - 0.2).abs() < 1e-15);
        assert_eq!(energy_distribution(&[-2.0, 1.0]).unwrap(), s);
        assert_eq!(energy_distribution(&[0.0, 0.0]), Err(DegenerateSpectrum));
    }

    #[test]
    fn spectral_entropy_cases() {
        assert!((spectral_entropy(&[1.0; 4], EPS).value - 1.0).abs() <= 1e-9);
        assert!(spectral_entropy(&[1.0, 0.0, 0.0, 0.0], EPS).value <= 1e-6);
        // -(0.8 ln 0.8 + 0.2 ln 0.2) / ln 2, evaluated independently to 0.7219280948873623
        assert!((spectral_entropy(&[2.0, 1.0], EPS).value - 0.721_928_094_887_362_3).abs() <= 1e-4);
        let one = spectral_entropy(&[3.0], EPS);
        assert_eq!((one.value, one.flag), (0.0, Some(ScoreFlag::RankOne)));
        let zero = spectral_entropy(&[0.0, 0.0], EPS);
        assert!((zero.value - 1.0).abs() <= 1e-9);
        assert_eq!(zero.flag, Some(ScoreFlag::DegenerateSpectrum));
    }

    #[test]
    fn norm_metrics() {
        assert_eq!(nuclear_importance(&[2.0, 2.0]), 2.0);
        assert_eq!(nuclear_importance(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(nuclear_importance(&[-3.0, 1.0]), 2.0);
        assert_eq!(frobenius_importance(&[3.0, 4.0]), 2.5);
        assert_eq!(frobenius_importance(&[0.0]), 0.0);
        let mut rng = SeededRng::new(8);
        let l: Vec<f64> = (0..9).map(|_| rng.normal(2.0)).collect();
        let mut sq = 0.0;
        for v in &l {
            sq += v * v;
        }
        assert!((frobenius_importance(&l) - sq.sqrt() / 9.0).abs() <= 1e-12);
    }

    #[test]
    fn energy_weighted_entropies() {
        assert!((elem_energy_entropy(&[1.0, 1.0], EPS).value - 0.5).abs() <= 1e-9);
        let z = elem_energy_entropy(&[0.0, 0.0], EPS);
        assert_eq!(z.value, 0.0);
        assert_eq!(z.flag, Some(ScoreFlag::DegenerateSpectrum));
        assert!(elem_energy_entropy(&[1.0, 0.0], EPS).value.abs() <= 1e-6);

        assert!((mat_energy_entropy(&[1.0, 1.0], EPS).value - 1.0).abs() <= 1e-9);
        assert_eq!(mat_energy_entropy(&[0.0, 0.0], EPS).value, 0.0);
        assert!((mat_energy_entropy(&[2.0, 1.0], EPS).value - 1.082_89).abs() <= 1e-4);
        assert_eq!(mat_energy_entropy(&[2.0], EPS).flag, Some(ScoreFlag::RankOne));
    }

    #[test]
    fn sensitivity_updates() {
        let a = SvdAdapter::from_parts(
            "s",
            Matrix::zeros(1, 1),
            Matrix::zeros(1, 1),
            vec![2.0],
            Matrix::zeros(1, 1),
            1,
            1,
            1.0,
            0.02,
        )
        .unwrap();
        let g = AdapterGrads {
            p: Matrix::zeros(1, 1),
            lambda: vec![-0.5],
            q: Matrix::zeros(1, 1),
        };
        // three entries, only λ contributes |2 · -0.5| = 1
        assert!((raw_sensitivity(&a, &g).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let single = SvdAdapter::from_parts(
            "t",
            Matrix::zeros(0, 0),
            Matrix::zeros(0, 1),
            vec![2.0],
            Matrix::zeros(1, 0),
            1,
            1,
            1.0,
            0.02,
        )
        .unwrap();
        let g1 = AdapterGrads {
            p: Matrix::zeros(0, 1),
            lambda: vec![-0.5],
            q: Matrix::zeros(1, 0),
        };
        assert_eq!(raw_sensitivity(&single, &g1).unwrap(), 1.0);

        let bad = AdapterGrads {
            p: Matrix::zeros(2, 1),
            lambda: vec![0.0],
            q: Matrix::zeros(1, 1),
        };
        assert!(matches!(raw_sensitivity(&a, &bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn sensitivity_ema_closed_form() {
        let c = 0.7;
        let mut st = SensitivityState::default();
        for t in 1..=40 {
            st.update_raw(c, 0.85, 0.85);
            let closed = c * (1.0 - 0.85f64.powi(t));
            assert!((st.smoothed - closed).abs() <= 1e-12);
        }
    }

    #[test]
    fn sensitivity_decays_with_zero_gradients() {
        let mut st = SensitivityState::default();
        for _ in 0..5 {
            st.update_raw(1.0, 0.85, 0.85);
        }
        let start = st.score();
        assert!(start > 0.0);
        let mut prev = start;
        for _ in 0..200 {
            st.update_raw(0.0, 0.85, 0.85);
            assert!(st.score() <= prev + 1e-15);
            prev = st.score();
        }
        assert!(st.score() < 1e-10);
    }

    #[test]
    fn score_all_cases() {
        let none = BTreeMap::new();
        let u = adapter_with("u", &[1.0; 4]);
        let report = score_all(3, [&u], MetricKind::default(), &none).unwrap();
        assert!((report.score("u").unwrap() - 1.0).abs() <= 1e-9);
        assert_eq!(report.step, 3);

        let spike = adapter_with("spike", &[1.0, 0.0, 0.0, 0.0]);
        let r2 = score_all(0, [&u, &spike], MetricKind::default(), &none).unwrap();
        assert!(r2.score("u").unwrap() > r2.score("spike").unwrap());

        let empty: [&SvdAdapter; 0] = [];
        assert!(matches!(
            score_all(0, empty, MetricKind::default(), &none),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn score_all_matches_pointwise_calls() {
        let mut rng = SeededRng::new(31);
        let adapters: Vec<SvdAdapter> = (0..6)
            .map(|i| {
                let r = 1 + rng.below(6);
                let l: Vec<f64> = (0..r).map(|_| rng.normal(1.0)).collect();
                adapter_with(&format!("a{i}"), &l)
            })
            .collect();
        let metrics = [
            MetricKind::default(),
            MetricKind::Nuclear,
            MetricKind::Frobenius,
            MetricKind::ElemEnergyEntropy { epsilon: EPS },
            MetricKind::MatEnergyEntropy { epsilon: EPS },
        ];
        for m in metrics {
            let report = score_all(0, &adapters, m, &BTreeMap::new()).unwrap();
            for a in &adapters {
                let direct = score_spectrum(a.lambda(), m).unwrap().value;
                assert_eq!(report.score(a.id()).unwrap(), direct);
            }
        }
        let mut states = BTreeMap::new();
        let mut st = SensitivityState::default();
        st.update_raw(2.0, 0.85, 0.85);
        states.insert("a2".to_string(), st);
        let report = score_all(0, &adapters, MetricKind::Sensitivity { beta1: 0.85, beta2: 0.85 }, &states).unwrap();
        assert_eq!(report.score("a2").unwrap(), st.score());
        assert_eq!(report.score("a0").unwrap(), 0.0);
    }

    #[test]
    fn uniform_is_maximal() {
        let mut rng = SeededRng::new(2);
        for r in [2usize, 4, 8, 16] {
            let top = spectral_entropy(&vec![1.0; r], EPS).value;
            for _ in 0..1000 {
                let l: Vec<f64> = (0..r).map(|_| rng.uniform() * 3.0).collect();
                assert!(spectral_entropy(&l, EPS).value <= top + 1e-9);
            }
        }
    }

    #[test]
    fn metric_validation() {
        assert!(MetricKind::SpectralEntropy { epsilon: 0.0 }.validate().is_err());
        assert!(MetricKind::Sensitivity { beta1: 1.0, beta2: 0.5 }.validate().is_err());
        assert!(MetricKind::Sensitivity { beta1: 0.85, beta2: 0.85 }.validate().is_ok());
        let parsed: MetricKind = serde_json::from_str(r#"{"kind":"spectral_entropy"}"#).unwrap();
        assert_eq!(parsed, MetricKind::default());
    }

    fn spectrum(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..10.0, 2..max_len)
    }

    proptest! {
        #[test]
        fn entropy_is_scale_invariant(l in spectrum(12), c in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0]) {
            let scaled: Vec<f64> = l.iter().map(|v| v * c).collect();
            let a = spectral_entropy(&l, EPS).value;
            let b = spectral_entropy(&scaled, EPS).value;
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn entropy_is_permutation_invariant(l in spectrum(12), seed in any::<u64>()) {
            let mut shuffled = l.clone();
            let mut rng = SeededRng::new(seed);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.below(i + 1));
            }
            let a = spectral_entropy(&l, EPS).value;
            let b = spectral_entropy(&shuffled, EPS).value;
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn energy_order_follows_squared_values(l in prop::collection::vec(-10.0f64..10.0, 2..12)) {
            if let Ok(s) = energy_distribution(&l) {
                prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                for i in 0..l.len() {
                    for j in 0..l.len() {
                        if l[i] * l[i] < l[j] * l[j] {
                            prop_assert!(s[i] <= s[j]);
                        }
                    }
                }
            }
        }
    }
}
