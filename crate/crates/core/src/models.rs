//! Unit-variance Gaussian observation models and the divergence matrix `D`
//! (hypotheses by sending sub-networks) they induce.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative gap below which two average divergences count as tied.
pub const TIE_REL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("H >= 2 required, got {0}")]
    TooFewHypotheses(usize),
    #[error("at least one sending sub-network is required")]
    NoSenders,
    #[error("structured model needs S <= H (S = {senders}, H = {hypotheses})")]
    MoreSendersThanHypotheses { senders: usize, hypotheses: usize },
    #[error("means must be pairwise distinct (entries {0} and {1} coincide)")]
    DuplicateMeans(usize, usize),
    #[error("need {needed} means, got {got}")]
    NotEnoughMeans { needed: usize, got: usize },
    #[error("perturbation range must be a finite nonnegative number, got {0}")]
    BadPerturbation(f64),
    #[error("non-finite mean")]
    NonFiniteMean,
    #[error("divergence matrix entry ({0}, {1}) is negative or not finite")]
    BadDivergence(usize, usize),
    #[error("weight vector has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("weights are not a probability vector (sum {sum}, min {min})")]
    NotProbability { sum: f64, min: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisSet {
    count: usize,
}

impl HypothesisSet {
    pub fn new(count: usize) -> Result<Self, ModelError> {
        if count < 2 {
            return Err(ModelError::TooFewHypotheses(count));
        }
        Ok(Self { count })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// True distribution `N(true_mean, 1)` and likelihoods `N(likelihood_means[θ], 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentModel {
    pub true_mean: f64,
    pub likelihood_means: Vec<f64>,
}

impl AgentModel {
    /// `log L(ξ | θ)` for every θ, dropping the `-½ log 2π` constant that
    /// cancels under normalisation.
    pub fn log_likelihoods_into(&self, xi: f64, out: &mut [f64]) {
        for (o, m) in out.iter_mut().zip(&self.likelihood_means) {
            let d = xi - m;
            *o = -0.5 * d * d;
        }
    }

    pub fn divergences(&self) -> Vec<f64> {
        self.likelihood_means
            .iter()
            .map(|&m| gaussian_kl(self.true_mean, m))
            .collect()
    }
}

/// Models for every agent. Sending agents share their sub-network's model;
/// receiving agents fall back to `receiving_default` unless overridden by
/// global agent index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSuite {
    pub hypotheses: HypothesisSet,
    pub sending_models: Vec<AgentModel>,
    pub receiving_default: AgentModel,
    #[serde(default)]
    pub receiving_overrides: BTreeMap<usize, AgentModel>,
}

impl ModelSuite {
    pub fn num_senders(&self) -> usize {
        self.sending_models.len()
    }

    pub fn receiving_model(&self, agent: usize) -> &AgentModel {
        self.receiving_overrides.get(&agent).unwrap_or(&self.receiving_default)
    }

    pub fn divergence_matrix(&self) -> Result<DivergenceMatrix, ModelError> {
        let h = self.hypotheses.len();
        let s = self.sending_models.len();
        let mut d = DMatrix::zeros(h, s);
        for (j, model) in self.sending_models.iter().enumerate() {
            if model.likelihood_means.len() != h {
                return Err(ModelError::LengthMismatch {
                    expected: h,
                    got: model.likelihood_means.len(),
                });
            }
            for (i, v) in model.divergences().into_iter().enumerate() {
                d[(i, j)] = v;
            }
        }
        DivergenceMatrix::new(d)
    }
}

/// `d[(θ, s)] = KL(f_s || L_s(θ))` in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceMatrix(DMatrix<f64>);

impl DivergenceMatrix {
    pub fn new(d: DMatrix<f64>) -> Result<Self, ModelError> {
        for j in 0..d.ncols() {
            for i in 0..d.nrows() {
                let v = d[(i, j)];
                if !(v.is_finite() && v >= 0.0) {
                    return Err(ModelError::BadDivergence(i, j));
                }
            }
        }
        Ok(Self(d))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn num_hypotheses(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_senders(&self) -> usize {
        self.0.ncols()
    }

    /// Writes `H` rows of `S` comma-separated values, preceded by a
    /// `hypothesis,s1,...` header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), ModelError> {
        let header: Vec<String> = (1..=self.num_senders()).map(|s| format!("s{s}")).collect();
        writeln!(out, "hypothesis,{}", header.join(","))?;
        for (i, row) in self.0.row_iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{}", i + 1, vals.join(","))?;
        }
        Ok(())
    }
}

/// KL divergence between `N(mean_f, 1)` and `N(mean_l, 1)`.
pub fn gaussian_kl(mean_f: f64, mean_l: f64) -> f64 {
    let d = mean_f - mean_l;
    0.5 * d * d
}

/// Squared pairwise distances between scalar points.
pub fn build_edm(points: &[f64]) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |i, j| {
        let d = points[i] - points[j];
        d * d
    })
}

fn check_distinct(means: &[f64]) -> Result<(), ModelError> {
    if means.iter().any(|m| !m.is_finite()) {
        return Err(ModelError::NonFiniteMean);
    }
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            if means[i] == means[j] {
                return Err(ModelError::DuplicateMeans(i, j));
            }
        }
    }
    Ok(())
}

/// Every agent uses the likelihood family `{N(means[θ], 1)}`; sending
/// sub-network `s` draws its data from `N(means[s], 1)`.
pub fn structured_gaussian_model(means: &[f64], senders: usize) -> Result<(ModelSuite, DivergenceMatrix), ModelError> {
    let hypotheses = HypothesisSet::new(means.len())?;
    if senders == 0 {
        return Err(ModelError::NoSenders);
    }
    if senders > means.len() {
        return Err(ModelError::MoreSendersThanHypotheses {
            senders,
            hypotheses: means.len(),
        });
    }
    check_distinct(means)?;
    let sending_models = (0..senders)
        .map(|s| AgentModel {
            true_mean: means[s],
            likelihood_means: means.to_vec(),
        })
        .collect();
    let suite = ModelSuite {
        hypotheses,
        sending_models,
        receiving_default: AgentModel {
            true_mean: means[0],
            likelihood_means: means.to_vec(),
        },
        receiving_overrides: BTreeMap::new(),
    };
    let d = suite.divergence_matrix()?;
    Ok((suite, d))
}

/// Structured model with every sending sub-network's likelihood means
/// independently jittered by `U[-perturb_range, perturb_range]`.
///
/// `base_means` needs at least `max(H, S)` entries: hypothesis `θ` sits at
/// `base_means[θ]` and sending sub-network `s` draws from
/// `N(base_means[s], 1)`. Receiving agents keep the unperturbed family.
pub fn diversity_model(
    hypotheses: usize,
    senders: usize,
    base_means: &[f64],
    perturb_range: f64,
    seed: u64,
) -> Result<(ModelSuite, DivergenceMatrix), ModelError> {
    let hyp = HypothesisSet::new(hypotheses)?;
    if senders == 0 {
        return Err(ModelError::NoSenders);
    }
    let needed = hypotheses.max(senders);
    if base_means.len() < needed {
        return Err(ModelError::NotEnoughMeans {
            needed,
            got: base_means.len(),
        });
    }
    if base_means.iter().any(|m| !m.is_finite()) {
        return Err(ModelError::NonFiniteMean);
    }
    if !(perturb_range.is_finite() && perturb_range >= 0.0) {
        return Err(ModelError::BadPerturbation(perturb_range));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let family = &base_means[..hypotheses];
    let sending_models = (0..senders)
        .map(|s| AgentModel {
            true_mean: base_means[s],
            likelihood_means: family
                .iter()
                .map(|&m| {
                    if perturb_range > 0.0 {
                        m + rng.random_range(-perturb_range..=perturb_range)
                    } else {
                        m
                    }
                })
                .collect(),
        })
        .collect();
    let suite = ModelSuite {
        hypotheses: hyp,
        sending_models,
        receiving_default: AgentModel {
            true_mean: base_means[0],
            likelihood_means: family.to_vec(),
        },
        receiving_overrides: BTreeMap::new(),
    };
    let d = suite.divergence_matrix()?;
    Ok((suite, d))
}

/// Average divergence seen by a receiving agent, with its minimiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceProfile {
    pub values: Vec<f64>,
    /// 0-based index of the smallest average divergence (lowest index on ties).
    pub theta_star: usize,
    /// Another hypothesis comes within [`TIE_REL_TOL`] of the minimum, so the
    /// unique-minimiser assumption fails.
    pub tie: bool,
}

pub(crate) fn check_probability(x: &[f64], expected: usize) -> Result<(), ModelError> {
    if x.len() != expected {
        return Err(ModelError::LengthMismatch { expected, got: x.len() });
    }
    let sum: f64 = x.iter().sum();
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min >= -1e-12 && (sum - 1.0).abs() <= 1e-9) {
        return Err(ModelError::NotProbability { sum, min });
    }
    Ok(())
}

pub fn divergence_profile(d: &DivergenceMatrix, x: &[f64]) -> Result<DivergenceProfile, ModelError> {
    check_probability(x, d.num_senders())?;
    let values: Vec<f64> = (d.matrix() * DVector::from_column_slice(x)).iter().copied().collect();
    let mut theta_star = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[theta_star] {
            theta_star = i;
        }
    }
    let best = values[theta_star];
    let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tie = values
        .iter()
        .enumerate()
        .any(|(i, &v)| i != theta_star && v - best <= TIE_REL_TOL * scale);
    Ok(DivergenceProfile {
        values,
        theta_star,
        tie,
    })
}

/// One draw from the agent's true distribution.
pub fn sample_observation<R: Rng + ?Sized>(model: &AgentModel, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    model.true_mean + z
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn kl_values() {
        assert_eq!(gaussian_kl(0.0, 0.0), 0.0);
        assert_eq!(gaussian_kl(1.0, 2.0), 0.5);
        assert_eq!(gaussian_kl(1.0, 3.0), 2.0);
    }

    #[test]
    fn edm_examples() {
        let e = build_edm(&[1.0, 2.0, 3.0]);
        assert_eq!(
            e,
            DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 4.0, 1.0, 0.0, 1.0, 4.0, 1.0, 0.0])
        );
        assert_eq!(build_edm(&[0.0, 0.0]), DMatrix::zeros(2, 2));
    }

    #[test]
    fn structured_examples() {
        let (_, d) = structured_gaussian_model(&[1.0, 2.0], 2).unwrap();
        assert_eq!(d.matrix(), &DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]));

        let (_, d) = structured_gaussian_model(&[1.0, 2.0, 3.0], 3).unwrap();
        #[rustfmt::skip]
        let want = DMatrix::from_row_slice(3, 3, &[
            0.0, 0.5, 2.0,
            0.5, 0.0, 0.5,
            2.0, 0.5, 0.0,
        ]);
        assert_eq!(d.matrix(), &want);

        let (suite, d) = structured_gaussian_model(&[1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(
            d.matrix(),
            &DMatrix::from_row_slice(3, 2, &[0.0, 0.5, 0.5, 0.0, 2.0, 0.5])
        );
        assert_eq!(suite.sending_models[1].true_mean, 2.0);
        assert_eq!(suite.receiving_model(7).true_mean, 1.0);
    }

    #[test]
    fn structured_rejects_bad_input() {
        assert!(matches!(
            structured_gaussian_model(&[1.0, 2.0, 1.0], 2).unwrap_err(),
            ModelError::DuplicateMeans(0, 2)
        ));
        assert!(matches!(
            structured_gaussian_model(&[1.0], 1).unwrap_err(),
            ModelError::TooFewHypotheses(1)
        ));
        assert!(matches!(
            structured_gaussian_model(&[1.0, 2.0], 3).unwrap_err(),
            ModelError::MoreSendersThanHypotheses { .. }
        ));
    }

    #[test]
    fn diversity_reduces_to_structured() {
        let means = [1.0, 2.0, 3.0, 4.5];
        let (_, d0) = structured_gaussian_model(&means, 3).unwrap();
        let (_, d1) = diversity_model(4, 3, &means, 0.0, 77).unwrap();
        assert_eq!(d0, d1);
    }

    #[test]
    fn diversity_within_interval_bounds() {
        let means = [1.0, 2.0, 3.0];
        let (_, d0) = structured_gaussian_model(&means, 3).unwrap();
        for seed in 0..50 {
            let (_, d) = diversity_model(3, 3, &means, 0.1, seed).unwrap();
            for t in 0..3 {
                for s in 0..3 {
                    // ((a + u)^2 - a^2) / 2 = a u + u^2 / 2, |u| <= 0.1.
                    let bound = (means[t] - means[s]).abs() * 0.1 + 0.005;
                    let gap = (d.matrix()[(t, s)] - d0.matrix()[(t, s)]).abs();
                    assert!(gap <= bound + 1e-15, "seed {seed} ({t},{s}): {gap} > {bound}");
                }
            }
        }
        let (_, a) = diversity_model(3, 3, &means, 0.1, 5).unwrap();
        let (_, b) = diversity_model(3, 3, &means, 0.1, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diversity_needs_enough_means() {
        assert!(matches!(
            diversity_model(2, 3, &[1.0, 2.0], 0.1, 0).unwrap_err(),
            ModelError::NotEnoughMeans { needed: 3, got: 2 }
        ));
        assert!(diversity_model(2, 3, &[1.0, 2.0, 3.0], 0.1, 0).is_ok());
        assert!(diversity_model(2, 1, &[1.0, 2.0], -0.1, 0).is_err());
    }

    #[test]
    fn profile_examples() {
        let d = DivergenceMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0])).unwrap();
        let p = divergence_profile(&d, &[0.7, 0.3]).unwrap();
        assert_abs_diff_eq!(p.values[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(p.values[1], 1.4, epsilon = 1e-15);
        assert_eq!(p.theta_star, 0);
        assert!(!p.tie);

        let p = divergence_profile(&d, &[1.0, 0.0]).unwrap();
        assert_eq!(p.values, vec![0.0, 2.0]);

        let p = divergence_profile(&d, &[0.5, 0.5]).unwrap();
        assert_eq!(p.values, vec![1.0, 1.0]);
        assert!(p.tie);

        assert!(divergence_profile(&d, &[0.5, 0.6]).is_err());
        assert!(divergence_profile(&d, &[1.0]).is_err());
    }

    #[test]
    fn observation_moments() {
        let model = AgentModel {
            true_mean: 2.0,
            likelihood_means: vec![1.0, 2.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_observation(&model, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((mean - 2.0).abs() <= 0.02, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.03, "var {var}");

        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(sample_observation(&model, &mut a), sample_observation(&model, &mut b));
        }
    }

    #[test]
    fn csv_export() {
        let (_, d) = structured_gaussian_model(&[1.0, 2.0], 2).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "hypothesis,s1,s2\n1,0,0.5\n2,0.5,0\n");
    }

    proptest! {
        #[test]
        fn kl_symmetric_nonnegative(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let k = gaussian_kl(a, b);
            prop_assert_eq!(k, gaussian_kl(b, a));
            prop_assert!(k >= 0.0);
            prop_assert_eq!(k == 0.0, a == b);
        }

        #[test]
        fn structured_is_half_edm(means in proptest::collection::hash_set(-1000i32..1000, 2..7), s_frac in 0.0f64..1.0) {
            let means: Vec<f64> = means.into_iter().map(|m| m as f64 / 10.0).collect();
            let h = means.len();
            let s = 1 + ((h - 1) as f64 * s_frac) as usize;
            let (_, d) = structured_gaussian_model(&means, s).unwrap();
            let edm = build_edm(&means);
            for t in 0..h {
                for j in 0..s {
                    prop_assert_eq!(d.matrix()[(t, j)], 0.5 * edm[(t, j)]);
                }
            }
            for i in 0..s {
                prop_assert_eq!(d.matrix()[(i, i)], 0.0);
                for j in 0..s {
                    prop_assert_eq!(d.matrix()[(i, j)], d.matrix()[(j, i)]);
                }
            }
        }

        #[test]
        fn profile_is_linear(alpha in 0.0f64..1.0, seed in 0u64..1000) {
            let (_, d) = diversity_model(4, 3, &[0.0, 1.0, 2.5, 4.0], 0.3, seed).unwrap();
            let x = [0.2, 0.5, 0.3];
            let y = [0.6, 0.1, 0.3];
            let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let px = divergence_profile(&d, &x).unwrap().values;
            let py = divergence_profile(&d, &y).unwrap().values;
            let pm = divergence_profile(&d, &mix).unwrap().values;
            for t in 0..4 {
                prop_assert!((pm[t] - (alpha * px[t] + (1.0 - alpha) * py[t])).abs() <= 1e-12);
            }
        }
    }
}
