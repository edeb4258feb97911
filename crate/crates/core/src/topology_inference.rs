//! Recovering aggregate influence weights from limiting belief decay rates.
//!
//! For a receiving agent with dominant hypothesis `θ*`, the rates satisfy
//! `y(θ) = Σ_s (d[θ*, s] - d[θ, s]) x_s`. Stacking those `H` equations on
//! top of the convexity row `Σ_s x_s = 1` gives an `(H + 1) x S` system
//! `C x = ỹ`, whose solution is unique exactly when `rank(C) = S`.

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::DivergenceMatrix;
use crate::social_learning::{estimate_theta_star, ThetaEstimate};

pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("weights are not identifiable: rank(C) = {rank} < S = {senders}")]
    NonIdentifiable { rank: usize, senders: usize },
    #[error("solver could not produce a point on the simplex")]
    ConstraintInfeasible,
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("hypothesis index {theta} out of range for H = {hypotheses}")]
    ThetaOutOfRange { theta: usize, hypotheses: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceOptions {
    /// Singular values at or below `rank_tol * σ_max` count as zero.
    pub rank_tol: f64,
    /// Scale of the convexity row of `C` and the last entry of `ỹ`.
    pub constraint_weight: f64,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            rank_tol: DEFAULT_RANK_TOL,
            constraint_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseSystem {
    /// `(1 e_{θ*}^T - I) D`: row `θ` is `d[θ*, ·] - d[θ, ·]`.
    pub b: DMatrix<f64>,
    /// `b` with the convexity row appended.
    pub c: DMatrix<f64>,
    pub y_tilde: DVector<f64>,
    /// 0-based.
    pub theta_star: usize,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub feasible: bool,
}

impl InverseSystem {
    pub fn num_hypotheses(&self) -> usize {
        self.b.nrows()
    }

    pub fn num_senders(&self) -> usize {
        self.b.ncols()
    }
}

pub fn build_system(d: &DivergenceMatrix, theta_star: usize, y: &[f64]) -> Result<InverseSystem, InferenceError> {
    build_system_with(d, theta_star, y, &InferenceOptions::default())
}

pub fn build_system_with(
    d: &DivergenceMatrix,
    theta_star: usize,
    y: &[f64],
    opts: &InferenceOptions,
) -> Result<InverseSystem, InferenceError> {
    let dm = d.matrix();
    let (h, s) = dm.shape();
    if theta_star >= h {
        return Err(InferenceError::ThetaOutOfRange {
            theta: theta_star,
            hypotheses: h,
        });
    }
    if y.len() != h {
        return Err(InferenceError::LengthMismatch {
            expected: h,
            got: y.len(),
        });
    }
    let b = DMatrix::from_fn(h, s, |t, j| dm[(theta_star, j)] - dm[(t, j)]);
    let c = b.clone().insert_row(h, opts.constraint_weight);
    let mut y_tilde = DVector::zeros(h + 1);
    y_tilde.rows_mut(0, h).copy_from_slice(y);
    y_tilde[h] = opts.constraint_weight;

    let singular_values = singular_values(&c);
    let rank = numerical_rank(&singular_values, opts.rank_tol);
    Ok(InverseSystem {
        b,
        c,
        y_tilde,
        theta_star,
        singular_values,
        rank,
        feasible: rank == s,
    })
}

fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = SVD::new(m.clone(), false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

fn numerical_rank(sv: &[f64], tol: f64) -> usize {
    let max = sv.first().copied().unwrap_or(0.0);
    if max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&v| v > tol * max).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankVerdict {
    pub rank: usize,
    /// `rank == S`: the weights are uniquely determined.
    pub feasible: bool,
    /// `H >= S`, necessary for feasibility.
    pub enough_hypotheses: bool,
    pub singular_values: Vec<f64>,
}

/// Re-evaluates the rank of `sys` under a different threshold.
pub fn rank_feasibility(sys: &InverseSystem, tol: f64) -> RankVerdict {
    let rank = numerical_rank(&sys.singular_values, tol);
    RankVerdict {
        rank,
        feasible: rank == sys.num_senders(),
        enough_hypotheses: sys.num_hypotheses() >= sys.num_senders(),
        singular_values: sys.singular_values.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyEstimate {
    pub x_hat: Vec<f64>,
    /// `‖C x̂ - ỹ‖₂`.
    pub residual: f64,
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// Indices where the estimate sits on the boundary of the simplex.
    pub zero_entries: Vec<usize>,
}

impl TopologyEstimate {
    pub fn condition_number(&self) -> f64 {
        self.sigma_max / self.sigma_min
    }
}

/// Simplex-constrained least squares: nonnegative least squares on the
/// augmented system, then Euclidean projection onto the probability simplex.
pub fn solve_topology(sys: &InverseSystem) -> Result<TopologyEstimate, InferenceError> {
    let s = sys.num_senders();
    if !sys.feasible {
        return Err(InferenceError::NonIdentifiable {
            rank: sys.rank,
            senders: s,
        });
    }
    let raw = nnls(&sys.c, &sys.y_tilde);
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(InferenceError::ConstraintInfeasible);
    }
    let x_hat = project_to_simplex(raw.as_slice());
    let xv = DVector::from_column_slice(&x_hat);
    let residual = (&sys.c * &xv - &sys.y_tilde).norm();
    Ok(TopologyEstimate {
        zero_entries: x_hat
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 0.0)
            .map(|(i, _)| i)
            .collect(),
        x_hat,
        residual,
        sigma_max: sys.singular_values.first().copied().unwrap_or(0.0),
        sigma_min: sys.singular_values.get(s - 1).copied().unwrap_or(0.0),
    })
}

/// Lawson-Hanson active-set NNLS: `argmin ‖A x - b‖₂` subject to `x >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let (m, n) = a.shape();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 10.0 * f64::EPSILON * a.norm().max(1.0) * m.max(n) as f64;

    for _ in 0..3 * n + 10 {
        let grad = a.tr_mul(&(b - a * &x));
        let entering = (0..n)
            .filter(|&j| !passive[j] && grad[j] > tol)
            .max_by(|&i, &j| grad[i].total_cmp(&grad[j]));
        let Some(j) = entering else { break };
        passive[j] = true;

        loop {
            let z = passive_least_squares(a, b, &passive);
            if (0..n).all(|i| !passive[i] || z[i] > 0.0) {
                x = z;
                break;
            }
            let mut alpha = f64::INFINITY;
            for i in 0..n {
                if passive[i] && z[i] <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - z[i]));
                }
            }
            x += (z - &x) * alpha;
            for i in 0..n {
                if passive[i] && x[i] <= tol {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
        }
    }
    x
}

/// Unconstrained least squares over the passive columns; zeros elsewhere.
fn passive_least_squares(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..a.ncols()).filter(|&j| passive[j]).collect();
    let mut out = DVector::zeros(a.ncols());
    if cols.is_empty() {
        return out;
    }
    let sub = a.select_columns(&cols);
    let sol = householder_solve(&sub, b).or_else(|| {
        let svd = SVD::new(sub, true, true);
        let eps = 1e-13 * svd.singular_values.max();
        svd.solve(b, eps).ok()
    });
    if let Some(sol) = sol {
        for (k, &j) in cols.iter().enumerate() {
            out[j] = sol[k];
        }
    }
    out
}

/// Least squares through Householder QR; `None` when `R` is numerically
/// singular.
fn householder_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if a.nrows() < a.ncols() {
        return None;
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let diag = r.diagonal();
    let max = diag.amax();
    if !(diag.iter().all(|v| v.abs() > 1e-14 * max)) {
        return None;
    }
    let qtb = qr.q().tr_mul(b);
    r.solve_upper_triangular(&qtb)
}

/// Euclidean projection onto `{x : x >= 0, Σ x = 1}`.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorNorms {
    pub l_inf: f64,
    pub l2: f64,
}

pub fn estimation_error(x_hat: &[f64], x_true: &[f64]) -> Result<ErrorNorms, InferenceError> {
    if x_hat.len() != x_true.len() {
        return Err(InferenceError::LengthMismatch {
            expected: x_true.len(),
            got: x_hat.len(),
        });
    }
    let diffs = x_hat.iter().zip(x_true).map(|(a, b)| (a - b).abs());
    let (l_inf, sq) = diffs.fold((0.0_f64, 0.0), |(m, s), d| (m.max(d), s + d * d));
    Ok(ErrorNorms { l_inf, l2: sq.sqrt() })
}

/// Everything derived from one vector of observed rates.
#[derive(Debug, Clone)]
pub struct Inference {
    pub theta: ThetaEstimate,
    pub system: InverseSystem,
    pub estimate: Result<TopologyEstimate, InferenceError>,
}

/// Picks `θ*` as the argmax of the rates, builds the system and solves it.
pub fn infer_from_rates(
    d: &DivergenceMatrix,
    y_hat: &[f64],
    opts: &InferenceOptions,
) -> Result<Inference, InferenceError> {
    let theta = estimate_theta_star(y_hat);
    let system = build_system_with(d, theta.theta, y_hat, opts)?;
    let estimate = solve_topology(&system);
    Ok(Inference {
        theta,
        system,
        estimate,
    })
}

/// One line of `estimates.json`. Agent and hypothesis labels are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateRecord {
    pub agent: usize,
    pub theta_star: usize,
    pub rank: usize,
    pub feasible: bool,
    pub x_hat: Vec<f64>,
    pub x_true: Vec<f64>,
    pub l_inf: Option<f64>,
    pub l2: Option<f64>,
    pub residual: Option<f64>,
    pub observation_time: usize,
}

impl EstimateRecord {
    pub fn new(agent: usize, observation_time: usize, inference: &Inference, x_true: &[f64]) -> Self {
        let (x_hat, l_inf, l2, residual) = match &inference.estimate {
            Ok(est) => {
                let err = estimation_error(&est.x_hat, x_true).ok();
                (
                    est.x_hat.clone(),
                    err.map(|e| e.l_inf),
                    err.map(|e| e.l2),
                    Some(est.residual),
                )
            }
            Err(_) => (Vec::new(), None, None, None),
        };
        Self {
            agent: agent + 1,
            theta_star: inference.theta.theta + 1,
            rank: inference.system.rank,
            feasible: inference.system.feasible,
            x_hat,
            x_true: x_true.to_vec(),
            l_inf,
            l2,
            residual,
            observation_time,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{diversity_model, structured_gaussian_model};
    use crate::social_learning::theoretical_rates;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn d2() -> DivergenceMatrix {
        DivergenceMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0])).unwrap()
    }

    #[test]
    fn hand_checkable_system() {
        let sys = build_system(&d2(), 0, &[0.0, -0.8]).unwrap();
        assert_eq!(sys.c, DMatrix::from_row_slice(3, 2, &[0.0, 0.0, -2.0, 2.0, 1.0, 1.0]));
        assert_eq!(sys.y_tilde.as_slice(), &[0.0, -0.8, 1.0]);
        assert_eq!(sys.rank, 2);
        assert!(sys.feasible);

        let est = solve_topology(&sys).unwrap();
        assert_abs_diff_eq!(est.x_hat[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(est.x_hat[1], 0.3, epsilon = 1e-12);
        assert!(est.residual <= 1e-10);
    }

    #[test]
    fn identical_columns_have_rank_one() {
        let d = DivergenceMatrix::new(DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 1.0, 4.0, 4.0])).unwrap();
        let sys = build_system(&d, 0, &[0.0, -1.0, -4.0]).unwrap();
        // Indistinguishable senders: every row of B is a constant vector.
        for t in 0..3 {
            assert_eq!(sys.b[(t, 0)], sys.b[(t, 1)]);
        }
        assert!(sys.b.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(sys.rank, 1);
        assert_eq!(
            solve_topology(&sys).unwrap_err(),
            InferenceError::NonIdentifiable { rank: 1, senders: 2 }
        );
    }

    #[test]
    fn structured_three_senders_are_rank_two() {
        let (_, d) = structured_gaussian_model(&[1.0, 2.0, 3.0], 3).unwrap();
        let sys = build_system(&d, 1, &[0.0; 3]).unwrap();
        #[rustfmt::skip]
        let want = DMatrix::from_row_slice(4, 3, &[
            0.5, -0.5, -1.5,
            0.0,  0.0,  0.0,
           -1.5, -0.5,  0.5,
            1.0,  1.0,  1.0,
        ]);
        assert_eq!(sys.c, want);
        let v = rank_feasibility(&sys, 1e-10);
        assert_eq!(v.rank, 2);
        assert!(!v.feasible);
        assert!(v.enough_hypotheses);
        assert!(matches!(
            solve_topology(&sys),
            Err(InferenceError::NonIdentifiable { rank: 2, .. })
        ));
    }

    #[test]
    fn fewer_hypotheses_than_senders() {
        let (_, d) = diversity_model(2, 3, &[1.0, 2.0, 3.0], 0.1, 4).unwrap();
        let sys = build_system(&d, 0, &[0.0, -0.1]).unwrap();
        let v = rank_feasibility(&sys, DEFAULT_RANK_TOL);
        assert!(!v.enough_hypotheses);
        assert!(!v.feasible);
        assert!(solve_topology(&sys).is_err());
    }

    #[test]
    fn bad_arguments() {
        assert!(matches!(
            build_system(&d2(), 2, &[0.0, 0.0]),
            Err(InferenceError::ThetaOutOfRange { .. })
        ));
        assert!(matches!(
            build_system(&d2(), 0, &[0.0]),
            Err(InferenceError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn error_norms() {
        assert_eq!(
            estimation_error(&[0.2, 0.8], &[0.2, 0.8]).unwrap(),
            ErrorNorms { l_inf: 0.0, l2: 0.0 }
        );
        let e = estimation_error(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(e.l_inf, 1.0);
        assert_abs_diff_eq!(e.l2, 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(
            estimation_error(&[0.7, 0.3], &[0.6, 0.4]).unwrap().l_inf,
            0.1,
            epsilon = 1e-15
        );
        assert!(estimation_error(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn nnls_known_solutions() {
        // Unconstrained optimum already nonnegative.
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let x = nnls(&a, &b);
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 2.0, epsilon = 1e-12);
        // Optimum clipped at zero.
        let a = DMatrix::identity(2, 2);
        let x = nnls(&a, &DVector::from_column_slice(&[-1.0, 0.5]));
        assert_eq!(x[0], 0.0);
        assert_abs_diff_eq!(x[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn simplex_projection_cases() {
        assert_eq!(project_to_simplex(&[0.2, 0.8]), vec![0.2, 0.8]);
        assert_eq!(project_to_simplex(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(project_to_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
        let p = project_to_simplex(&[0.5, 0.5, 0.5]);
        for v in p {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn record_schema() {
        let inf = infer_from_rates(&d2(), &[0.0, -0.8], &InferenceOptions::default()).unwrap();
        let rec = EstimateRecord::new(4, 100, &inf, &[0.7, 0.3]);
        let json = serde_json::to_value(&rec).unwrap();
        let keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        let mut want = vec![
            "agent",
            "theta_star",
            "rank",
            "feasible",
            "x_hat",
            "x_true",
            "l_inf",
            "l2",
            "residual",
            "observation_time",
        ];
        want.sort();
        let mut keys_sorted = keys.clone();
        keys_sorted.sort();
        assert_eq!(keys_sorted, want);
        assert_eq!(rec.agent, 5);
        assert_eq!(rec.theta_star, 1);
        assert!(rec.l_inf.unwrap() < 1e-12);
    }

    proptest! {
        #[test]
        fn projection_lands_on_simplex(v in proptest::collection::vec(-5.0f64..5.0, 1..8)) {
            let p = project_to_simplex(&v);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn solver_stays_on_simplex_under_noise(seed in 0u64..5000, noise in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, d) = diversity_model(4, 3, &[1.0, 2.0, 3.0, 4.0], 0.3, seed).unwrap();
            let y: Vec<f64> = (0..4).map(|_| rng.random_range(-noise..=0.0)).collect();
            let sys = build_system(&d, rng.random_range(0..4), &y).unwrap();
            if let Ok(est) = solve_topology(&sys) {
                prop_assert!(est.x_hat.iter().all(|&x| x >= 0.0));
                prop_assert!((est.x_hat.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn noiseless_round_trip(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = rng.random_range(2..=4);
            let h = rng.random_range(s..=6);
            let means: Vec<f64> = (0..h).map(|i| i as f64 + 1.0).collect();
            let (_, d) = diversity_model(h, s, &means, 0.1, seed).unwrap();
            let raw: Vec<f64> = (0..s).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let x: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let Ok(y) = theoretical_rates(&d, &x) else { return Ok(()) };
            let inf = infer_from_rates(&d, &y, &InferenceOptions::default()).unwrap();
            let est = inf.estimate.unwrap();
            prop_assert!(estimation_error(&est.x_hat, &x).unwrap().l_inf <= 1e-9);
        }
    }
}
