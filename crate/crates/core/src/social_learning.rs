//! The diffusion social-learning recursion: every agent folds a fresh private
//! observation into its belief with Bayes' rule, then takes a weighted
//! geometric average of its in-neighbours' intermediate beliefs.
//!
//! Beliefs live in the log domain. Wrong hypotheses decay exponentially, so
//! linear-domain probabilities underflow within a few hundred steps.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::models::{divergence_profile, sample_observation, DivergenceMatrix, ModelError, ModelSuite};
use crate::weakgraph::{limiting_profile, GraphError, WeakGraph};

/// Tolerance on the in-weights of a single combination step.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LearningError {
    #[error("combination weights sum to {0}, expected 1")]
    InvalidColumn(f64),
    #[error("combination needs at least one neighbour")]
    NoNeighbors,
    #[error("belief vectors have mismatched lengths")]
    LengthMismatch,
    #[error("time {0} was not recorded in the trajectory")]
    UnrecordedTime(usize),
    #[error("agent {0} is out of range")]
    UnknownAgent(usize),
    #[error("sample times must be strictly increasing within 1..={steps}")]
    BadSampleTimes { steps: usize },
    #[error("model suite has {models} sending models but the graph has {subnets} sending sub-networks")]
    SenderCountMismatch { models: usize, subnets: usize },
    #[error("average divergence has no unique minimiser (hypotheses {0} and {1} tie)")]
    NoUniqueMinimizer(usize, usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Log-probabilities over the hypotheses, normalised so that their
/// log-sum-exp is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    log_belief: Vec<f64>,
}

impl BeliefState {
    pub fn uniform(hypotheses: usize) -> Self {
        Self {
            log_belief: vec![-(hypotheses as f64).ln(); hypotheses],
        }
    }

    /// Normalises arbitrary finite log-weights.
    pub fn from_log_weights(mut log_weights: Vec<f64>) -> Self {
        log_normalize(&mut log_weights);
        Self {
            log_belief: log_weights,
        }
    }

    pub fn from_probabilities(p: &[f64]) -> Self {
        Self::from_log_weights(p.iter().map(|v| v.ln()).collect())
    }

    pub fn log_belief(&self) -> &[f64] {
        &self.log_belief
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.log_belief.iter().map(|v| v.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.log_belief.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_belief.is_empty()
    }
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn log_normalize(v: &mut [f64]) {
    let lse = logsumexp(v);
    v.iter_mut().for_each(|x| *x -= lse);
}

/// Intermediate belief after folding one observation's log-likelihoods into
/// `prior`.
pub fn bayesian_update(prior: &BeliefState, log_likelihoods: &[f64]) -> BeliefState {
    assert_eq!(prior.len(), log_likelihoods.len());
    BeliefState::from_log_weights(
        prior
            .log_belief
            .iter()
            .zip(log_likelihoods)
            .map(|(m, l)| m + l)
            .collect(),
    )
}

/// Weighted geometric pooling of neighbours' intermediate beliefs.
pub fn combine_step(neighbors: &[(f64, &BeliefState)]) -> Result<BeliefState, LearningError> {
    let first = neighbors.first().ok_or(LearningError::NoNeighbors)?;
    let h = first.1.len();
    let total: f64 = neighbors.iter().map(|(w, _)| w).sum();
    if total.is_nan() || (total - 1.0).abs() > WEIGHT_SUM_TOL || neighbors.iter().any(|(w, _)| *w < 0.0) {
        return Err(LearningError::InvalidColumn(total));
    }
    let mut acc = vec![0.0; h];
    for (w, psi) in neighbors {
        if psi.len() != h {
            return Err(LearningError::LengthMismatch);
        }
        for (a, v) in acc.iter_mut().zip(&psi.log_belief) {
            *a += w * v;
        }
    }
    Ok(BeliefState::from_log_weights(acc))
}

/// Beliefs of every agent at one recorded time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: usize,
    /// Intermediate (post-update, pre-combination) beliefs.
    pub psi: Vec<BeliefState>,
    /// Combined beliefs.
    pub mu: Vec<BeliefState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: usize,
    pub seed: u64,
    pub snapshots: Vec<Snapshot>,
    /// Per receiving agent (in receiving order): the hypothesis the average
    /// divergence singles out, or `None` when it has no unique minimiser.
    pub certified_theta_star: Vec<Option<usize>>,
}

impl Trajectory {
    pub fn snapshot_at(&self, time: usize) -> Result<&Snapshot, LearningError> {
        self.snapshots
            .binary_search_by_key(&time, |s| s.time)
            .map(|i| &self.snapshots[i])
            .map_err(|_| LearningError::UnrecordedTime(time))
    }

    pub fn sample_times(&self) -> Vec<usize> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    pub fn final_snapshot(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }

    /// `time,agent,hypothesis,log_psi` rows; agents and hypotheses 1-based.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), LearningError> {
        let mut out = std::io::BufWriter::new(out);
        writeln!(out, "time,agent,hypothesis,log_psi")?;
        for snap in &self.snapshots {
            for (k, psi) in snap.psi.iter().enumerate() {
                for (t, v) in psi.log_belief.iter().enumerate() {
                    writeln!(out, "{},{},{},{}", snap.time, k + 1, t + 1, v)?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// `10, 20, 40, ...` below `steps`, then `steps` itself.
pub fn geometric_sample_times(steps: usize) -> Vec<usize> {
    let mut times = Vec::new();
    let mut t = 10;
    while t < steps {
        times.push(t);
        t *= 2;
    }
    if steps > 0 {
        times.push(steps);
    }
    times
}

/// Runs the recursion for `steps` synchronous rounds from uniform beliefs.
///
/// Each round every agent draws its observation (in agent order, from one
/// seeded stream), forms its intermediate belief, and then all agents combine
/// at once.
pub fn simulate(
    g: &WeakGraph,
    suite: &ModelSuite,
    steps: usize,
    sample_times: &[usize],
    seed: u64,
) -> Result<Trajectory, LearningError> {
    let part = g.partition();
    if suite.num_senders() != part.num_sending_subnets() {
        return Err(LearningError::SenderCountMismatch {
            models: suite.num_senders(),
            subnets: part.num_sending_subnets(),
        });
    }
    if sample_times.windows(2).any(|w| w[0] >= w[1]) || sample_times.iter().any(|&t| t == 0 || t > steps) {
        return Err(LearningError::BadSampleTimes { steps });
    }

    let h = suite.hypotheses.len();
    let d = suite.divergence_matrix()?;
    let profile = limiting_profile(g)?;
    let certified_theta_star = (0..part.num_receiving_agents())
        .map(|j| {
            let p = divergence_profile(&d, &profile.aggregate_column(j))?;
            Ok((!p.tie).then_some(p.theta_star))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;

    let n = g.num_agents();
    let models: Vec<_> = (0..n)
        .map(|k| match part.sending_subnet_of(k) {
            Some(s) => &suite.sending_models[s],
            None => suite.receiving_model(k),
        })
        .collect();
    for m in &models {
        if m.likelihood_means.len() != h {
            return Err(LearningError::LengthMismatch);
        }
    }
    let neighbors: Vec<Vec<(usize, f64)>> = (0..n).map(|k| g.in_neighbors(k)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mu = vec![-(h as f64).ln(); n * h];
    let mut psi = vec![0.0; n * h];
    let mut loglik = vec![0.0; h];
    let mut snapshots = Vec::with_capacity(sample_times.len());
    let mut next_sample = sample_times.iter().peekable();

    for time in 1..=steps {
        for (k, model) in models.iter().enumerate() {
            let xi = sample_observation(model, &mut rng);
            model.log_likelihoods_into(xi, &mut loglik);
            let row = &mut psi[k * h..(k + 1) * h];
            for ((p, m), l) in row.iter_mut().zip(&mu[k * h..(k + 1) * h]).zip(&loglik) {
                *p = m + l;
            }
            log_normalize(row);
        }
        for (k, nbrs) in neighbors.iter().enumerate() {
            let row = &mut mu[k * h..(k + 1) * h];
            row.fill(0.0);
            for &(l, w) in nbrs {
                for (m, p) in row.iter_mut().zip(&psi[l * h..(l + 1) * h]) {
                    *m += w * p;
                }
            }
            log_normalize(row);
        }
        if next_sample.peek() == Some(&&time) {
            next_sample.next();
            let states = |buf: &[f64]| buf.chunks(h).map(|c| BeliefState { log_belief: c.to_vec() }).collect();
            snapshots.push(Snapshot {
                time,
                psi: states(&psi),
                mu: states(&mu),
            });
        }
    }

    Ok(Trajectory {
        steps,
        seed,
        snapshots,
        certified_theta_star,
    })
}

/// `log ψ_{k,i}(θ) / i` for every hypothesis.
pub fn empirical_rates(traj: &Trajectory, agent: usize, time: usize) -> Result<Vec<f64>, LearningError> {
    let snap = traj.snapshot_at(time)?;
    let psi = snap.psi.get(agent).ok_or(LearningError::UnknownAgent(agent))?;
    Ok(psi.log_belief.iter().map(|v| v / time as f64).collect())
}

/// Same as [`empirical_rates`] but from the combined belief `μ`.
pub fn empirical_rates_from_mu(traj: &Trajectory, agent: usize, time: usize) -> Result<Vec<f64>, LearningError> {
    let snap = traj.snapshot_at(time)?;
    let mu = snap.mu.get(agent).ok_or(LearningError::UnknownAgent(agent))?;
    Ok(mu.log_belief.iter().map(|v| v / time as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThetaEstimate {
    /// 0-based hypothesis index.
    pub theta: usize,
    /// Another hypothesis scored within tolerance of the maximum.
    pub ambiguous: bool,
}

/// Argmax of the empirical rates; near-ties go to the smallest index and
/// are flagged.
pub fn estimate_theta_star(y_hat: &[f64]) -> ThetaEstimate {
    let max = y_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-9 * max.abs().max(1.0);
    let mut close = y_hat.iter().enumerate().filter(|(_, &v)| max - v <= tol);
    let theta = close.next().map(|(i, _)| i).unwrap_or(0);
    ThetaEstimate {
        theta,
        ambiguous: close.next().is_some(),
    }
}

/// Limiting decay rates `y(θ) = 𝒟(θ*) - 𝒟(θ)` implied by the aggregate
/// weights `x`.
pub fn theoretical_rates(d: &DivergenceMatrix, x: &[f64]) -> Result<Vec<f64>, LearningError> {
    let p = divergence_profile(d, x)?;
    if p.tie {
        let scale = p.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let other = (0..p.values.len())
            .find(|&i| i != p.theta_star && p.values[i] - p.values[p.theta_star] <= 1e-9 * scale)
            .unwrap_or(p.theta_star);
        return Err(LearningError::NoUniqueMinimizer(p.theta_star, other));
    }
    let best = p.values[p.theta_star];
    Ok(p.values
        .iter()
        .enumerate()
        .map(|(i, &v)| if i == p.theta_star { 0.0 } else { best - v })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{structured_gaussian_model, AgentModel};
    use crate::weakgraph::{random_weak_graph, validate_weak_graph, Partition};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    #[test]
    fn bayes_examples() {
        let prior = BeliefState::uniform(3);
        let post = bayesian_update(&prior, &[2f64.ln(), 0.0, 0.0]);
        let p = post.probabilities();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p[2], 0.25, epsilon = 1e-15);

        let flat = [-1.3; 3];
        let once = bayesian_update(&post, &flat);
        let twice = bayesian_update(&once, &flat);
        for (a, b) in post.log_belief().iter().zip(twice.log_belief()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn combine_examples() {
        let psi = BeliefState::from_probabilities(&[0.3, 0.7]);
        let out = combine_step(&[(1.0, &psi)]).unwrap();
        assert_abs_diff_eq!(out.probabilities()[0], 0.3, epsilon = 1e-15);

        let a = BeliefState::from_probabilities(&[0.8, 0.2]);
        let b = BeliefState::from_probabilities(&[0.2, 0.8]);
        let out = combine_step(&[(0.5, &a), (0.5, &b)]).unwrap().probabilities();
        assert_abs_diff_eq!(out[0], 0.5, epsilon = 1e-15);

        let out = combine_step(&[(0.5, &a), (0.5, &a)]).unwrap().probabilities();
        assert_abs_diff_eq!(out[0], 0.8, epsilon = 1e-15);

        assert!(matches!(
            combine_step(&[(0.5, &a), (0.6, &b)]),
            Err(LearningError::InvalidColumn(_))
        ));
        assert!(matches!(combine_step(&[]), Err(LearningError::NoNeighbors)));
    }

    #[test]
    fn theta_star_examples() {
        assert_eq!(
            estimate_theta_star(&[0.0, -0.8]),
            ThetaEstimate {
                theta: 0,
                ambiguous: false
            }
        );
        assert_eq!(estimate_theta_star(&[-0.3, 0.0, -0.3]).theta, 1);
        assert_eq!(
            estimate_theta_star(&[0.0, 1e-12]),
            ThetaEstimate {
                theta: 0,
                ambiguous: true
            }
        );
    }

    #[test]
    fn theoretical_rate_examples() {
        let d = DivergenceMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0])).unwrap();
        let y = theoretical_rates(&d, &[0.7, 0.3]).unwrap();
        assert_eq!(y[0], 0.0);
        assert_abs_diff_eq!(y[1], -0.8, epsilon = 1e-15);
        assert!(matches!(
            theoretical_rates(&d, &[0.5, 0.5]),
            Err(LearningError::NoUniqueMinimizer(0, 1))
        ));

        let d = DivergenceMatrix::new(DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 2.0, 1.0, 5.0, 1.0])).unwrap();
        assert_eq!(theoretical_rates(&d, &[1.0, 0.0]).unwrap(), vec![0.0, -2.0, -5.0]);
    }

    #[test]
    fn sample_grid() {
        assert_eq!(geometric_sample_times(100), vec![10, 20, 40, 80, 100]);
        assert_eq!(geometric_sample_times(80), vec![10, 20, 40, 80]);
        assert_eq!(geometric_sample_times(5), vec![5]);
    }

    fn two_node() -> WeakGraph {
        let p = Partition::new(vec![1], vec![1]).unwrap();
        validate_weak_graph(DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.0, 0.4]), &p).unwrap()
    }

    #[test]
    fn single_sender_wins() {
        let g = two_node();
        let (suite, _) = structured_gaussian_model(&[1.0, 2.0, 3.0], 1).unwrap();
        let traj = simulate(&g, &suite, 5000, &[100, 5000], 3).unwrap();
        assert_eq!(traj.certified_theta_star, vec![Some(0)]);
        let mu = traj.snapshot_at(5000).unwrap().mu[1].probabilities();
        assert!(mu[0] >= 0.99, "{mu:?}");
        let rates = empirical_rates(&traj, 1, 100).unwrap();
        let snap = traj.snapshot_at(100).unwrap();
        assert_abs_diff_eq!(rates[2], snap.psi[1].log_belief()[2] / 100.0, epsilon = 0.0);
        assert!(matches!(
            empirical_rates(&traj, 1, 99),
            Err(LearningError::UnrecordedTime(99))
        ));
    }

    #[test]
    fn flat_evidence_keeps_uniform_beliefs() {
        let g = two_node();
        let model = AgentModel {
            true_mean: 0.3,
            likelihood_means: vec![1.0; 3],
        };
        let suite = ModelSuite {
            hypotheses: crate::models::HypothesisSet::new(3).unwrap(),
            sending_models: vec![model.clone()],
            receiving_default: model,
            receiving_overrides: Default::default(),
        };
        let traj = simulate(&g, &suite, 200, &geometric_sample_times(200), 1).unwrap();
        assert_eq!(traj.certified_theta_star, vec![None]);
        for snap in &traj.snapshots {
            for b in snap.mu.iter().chain(&snap.psi) {
                for p in b.probabilities() {
                    assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn simulate_checks_inputs() {
        let g = two_node();
        let (suite, _) = structured_gaussian_model(&[1.0, 2.0], 2).unwrap();
        assert!(matches!(
            simulate(&g, &suite, 10, &[10], 0),
            Err(LearningError::SenderCountMismatch { .. })
        ));
        let (suite, _) = structured_gaussian_model(&[1.0, 2.0], 1).unwrap();
        for bad in [&[5usize, 5][..], &[0], &[11], &[6, 3]] {
            assert!(matches!(
                simulate(&g, &suite, 10, bad, 0),
                Err(LearningError::BadSampleTimes { .. })
            ));
        }
    }

    #[test]
    fn trajectory_csv_layout() {
        let g = two_node();
        let (suite, _) = structured_gaussian_model(&[1.0, 2.0], 1).unwrap();
        let traj = simulate(&g, &suite, 20, &[10, 20], 4).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "time,agent,hypothesis,log_psi");
        assert_eq!(lines.len(), 1 + 2 * 2 * 2);
        assert!(lines[1].starts_with("10,1,1,"));
        assert!(lines[8].starts_with("20,2,2,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn beliefs_stay_normalized_and_runs_repeat(seed in 0u64..10_000, density in 0.1f64..1.0) {
            let p = Partition::new(vec![2, 1], vec![2]).unwrap();
            let g = random_weak_graph(&p, density, seed).unwrap();
            let (suite, _) = crate::models::diversity_model(3, 2, &[1.0, 2.0, 3.0], 0.1, seed).unwrap();
            let times = geometric_sample_times(300);
            let a = simulate(&g, &suite, 300, &times, seed).unwrap();
            let b = simulate(&g, &suite, 300, &times, seed).unwrap();
            prop_assert_eq!(&a, &b);
            for snap in &a.snapshots {
                for st in snap.mu.iter().chain(&snap.psi) {
                    prop_assert!(logsumexp(st.log_belief()).abs() <= 1e-10);
                    prop_assert!(st.log_belief().iter().all(|v| v.is_finite()));
                }
            }
        }
    }
}
