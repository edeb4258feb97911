use nalgebra::{DMatrix, DVector};

use super::{GraphError, Partition, WeakGraph};

#[derive(Debug, Clone, Copy)]
pub struct PerronOptions {
    /// Stop once successive iterates differ by at most this, relative to the
    /// largest entry.
    pub rel_tol: f64,
    pub max_iterations: usize,
}

impl Default for PerronOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            max_iterations: 1_000_000,
        }
    }
}

/// Limit of `A^i`, in the block form `[[E, E W], [0, 0]]`.
#[derive(Debug, Clone)]
pub struct LimitingProfile {
    /// `blockdiag{p_s 1^T}` over the sending agents.
    pub e: DMatrix<f64>,
    pub perron_vectors: Vec<DVector<f64>>,
    /// `A_SR (I - A_R)^{-1}`, sending agents by receiving agents.
    pub w: DMatrix<f64>,
    /// `E W`; column `k` holds the limiting influence of each sending agent
    /// on receiving agent `k`.
    pub omega: DMatrix<f64>,
    /// Aggregate weights, sending sub-networks by receiving agents.
    pub x: DMatrix<f64>,
}

impl LimitingProfile {
    /// The full `N x N` limit matrix.
    pub fn limit_matrix(&self) -> DMatrix<f64> {
        let ns = self.e.nrows();
        let nr = self.omega.ncols();
        let mut m = DMatrix::zeros(ns + nr, ns + nr);
        m.view_mut((0, 0), (ns, ns)).copy_from(&self.e);
        m.view_mut((0, ns), (ns, nr)).copy_from(&self.omega);
        m
    }

    /// Aggregate weight vector of the `j`-th receiving agent (0-based among
    /// receivers).
    pub fn aggregate_column(&self, j: usize) -> Vec<f64> {
        self.x.column(j).iter().copied().collect()
    }
}

pub fn perron_vector(block: &DMatrix<f64>) -> Result<DVector<f64>, GraphError> {
    perron_vector_with(block, PerronOptions::default())
}

/// Power iteration for the positive, sum-one fixed point `block * p = p` of an
/// irreducible, primitive, left-stochastic block.
pub fn perron_vector_with(block: &DMatrix<f64>, opts: PerronOptions) -> Result<DVector<f64>, GraphError> {
    let n = block.nrows();
    assert_eq!(n, block.ncols(), "Perron block must be square");
    let mut p = DVector::from_element(n, 1.0 / n as f64);
    let mut next = DVector::zeros(n);
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iterations {
        block.mul_to(&p, &mut next);
        let total = next.sum();
        next /= total;
        residual = (&next - &p).amax();
        std::mem::swap(&mut p, &mut next);
        if residual <= opts.rel_tol * p.amax() {
            return Ok(p);
        }
    }
    Err(GraphError::PerronNotConverged {
        iterations: opts.max_iterations,
        residual,
    })
}

/// Closed-form limit of the combination matrix powers.
pub fn limiting_profile(g: &WeakGraph) -> Result<LimitingProfile, GraphError> {
    let part = g.partition();
    let a = g.combination_matrix();
    let ns = part.num_sending_agents();
    let nr = part.num_receiving_agents();

    let mut e = DMatrix::zeros(ns, ns);
    let mut perron_vectors = Vec::with_capacity(part.num_sending_subnets());
    for s in 0..part.num_sending_subnets() {
        let range = part.sending_range(s);
        let len = range.len();
        let block = a.view((range.start, range.start), (len, len)).into_owned();
        let p = perron_vector(&block)?;
        for (i, &pi) in p.iter().enumerate() {
            for j in 0..len {
                e[(range.start + i, range.start + j)] = pi;
            }
        }
        perron_vectors.push(p);
    }

    let a_sr = a.view((0, ns), (ns, nr));
    let a_r = a.view((ns, ns), (nr, nr));
    // W (I - A_R) = A_SR, solved as (I - A_R)^T W^T = A_SR^T one column at a time.
    let system = (DMatrix::identity(nr, nr) - a_r).transpose();
    let lu = system.lu();
    let diag = lu.u().diagonal();
    let max_pivot = diag.amax();
    let min_pivot = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let pivot_ratio = if max_pivot > 0.0 { min_pivot / max_pivot } else { 0.0 };
    if pivot_ratio.is_nan() || pivot_ratio <= 1e-13 {
        return Err(GraphError::SingularReceivingBlock { pivot_ratio });
    }
    let mut w = DMatrix::zeros(ns, nr);
    for l in 0..ns {
        let rhs: DVector<f64> = a_sr.row(l).transpose();
        let sol = lu
            .solve(&rhs)
            .ok_or(GraphError::SingularReceivingBlock { pivot_ratio })?;
        w.row_mut(l).copy_from(&sol.transpose());
    }

    let omega = &e * &w;
    let x = sum_by_sending_subnet(&omega, part);
    Ok(LimitingProfile {
        e,
        perron_vectors,
        w,
        omega,
        x,
    })
}

/// Sums the rows of a (sending agents x receiving agents) matrix within each
/// sending sub-network.
pub fn sum_by_sending_subnet(m: &DMatrix<f64>, partition: &Partition) -> DMatrix<f64> {
    assert_eq!(m.nrows(), partition.num_sending_agents());
    let mut x = DMatrix::zeros(partition.num_sending_subnets(), m.ncols());
    for s in 0..partition.num_sending_subnets() {
        for l in partition.sending_range(s) {
            for k in 0..m.ncols() {
                x[(s, k)] += m[(l, k)];
            }
        }
    }
    x
}

/// `x_sk`: total limiting weight of sending sub-network `s` on receiving
/// agent `k`.
pub fn aggregate_weights(profile: &LimitingProfile, partition: &Partition) -> DMatrix<f64> {
    sum_by_sending_subnet(&profile.omega, partition)
}

/// `A^i` by repeated multiplication (`i = 0` gives the identity).
pub fn matrix_power_limit(g: &WeakGraph, i: usize) -> DMatrix<f64> {
    let a = g.combination_matrix();
    let n = a.nrows();
    let mut acc = DMatrix::identity(n, n);
    let mut tmp = DMatrix::zeros(n, n);
    for _ in 0..i {
        acc.mul_to(a, &mut tmp);
        std::mem::swap(&mut acc, &mut tmp);
    }
    acc
}
