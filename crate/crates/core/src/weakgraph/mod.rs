//! Weak graphs: networks split into sending sub-networks, which never listen
//! to anyone outside themselves, and receiving sub-networks.
//!
//! Agents are numbered with every sending agent first (sub-network by
//! sub-network), followed by the receiving agents. The combination matrix is
//! left-stochastic: entry `(l, k)` is the weight agent `k` puts on agent `l`,
//! so each column sums to one.

mod generate;
mod io;
mod limit;

use std::collections::VecDeque;
use std::fmt;
use std::ops::Range;

use nalgebra::DMatrix;
use thiserror::Error;

pub use generate::random_weak_graph;
pub use io::{read_weak_graph_csv, write_weak_graph_csv};
pub use limit::{
    aggregate_weights, limiting_profile, matrix_power_limit, perron_vector, perron_vector_with, sum_by_sending_subnet,
    LimitingProfile, PerronOptions,
};

/// Absolute tolerance on column sums when validating a combination matrix.
pub const COLUMN_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("combination matrix is {rows}x{cols} but the partition has {agents} agents")]
    DimensionMismatch { rows: usize, cols: usize, agents: usize },
    #[error("not a weak graph: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    PerronNotConverged { iterations: usize, residual: f64 },
    #[error("I - A_R is numerically singular (pivot ratio {pivot_ratio:e}); some receiving agent is not influenced by any sending agent")]
    SingularReceivingBlock { pivot_ratio: f64 },
    #[error("density must lie in (0, 1], got {0}")]
    InvalidDensity(f64),
    #[error("malformed graph CSV: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// One broken weak-graph invariant. Indices are stored 0-based and printed
/// 1-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonFinite { row: usize, col: usize },
    NegativeWeight { row: usize, col: usize, value: f64 },
    NonStochasticColumn { col: usize, sum: f64 },
    ReceivingToSending { row: usize, col: usize },
    CrossSendingLink { row: usize, col: usize },
    SendingNotStronglyConnected { subnet: usize },
    SendingWithoutSelfLoop { subnet: usize },
    ReceivingWithoutSendingLink { subnet: usize },
    UnreachableReceivingAgent { agent: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::NonFinite { row, col } => {
                write!(f, "entry ({}, {}) is not finite", row + 1, col + 1)
            }
            Violation::NegativeWeight { row, col, value } => {
                write!(f, "entry ({}, {}) is negative ({value})", row + 1, col + 1)
            }
            Violation::NonStochasticColumn { col, sum } => {
                write!(f, "non-stochastic column {} (sum {sum})", col + 1)
            }
            Violation::ReceivingToSending { row, col } => {
                write!(f, "forbidden receiving-to-sending weight at ({}, {})", row + 1, col + 1)
            }
            Violation::CrossSendingLink { row, col } => write!(
                f,
                "weight between distinct sending sub-networks at ({}, {})",
                row + 1,
                col + 1
            ),
            Violation::SendingNotStronglyConnected { subnet } => {
                write!(f, "sending sub-network {} is not strongly connected", subnet + 1)
            }
            Violation::SendingWithoutSelfLoop { subnet } => {
                write!(f, "sending sub-network {} has no self-loop", subnet + 1)
            }
            Violation::ReceivingWithoutSendingLink { subnet } => {
                write!(f, "receiving sub-network {} has no inbound sending link", subnet + 1)
            }
            Violation::UnreachableReceivingAgent { agent } => write!(
                f,
                "receiving agent {} is not reachable from any sending agent",
                agent + 1
            ),
        }
    }
}

/// Sizes of the sending and receiving sub-networks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    sending_sizes: Vec<usize>,
    receiving_sizes: Vec<usize>,
}

impl Partition {
    pub fn new(sending_sizes: Vec<usize>, receiving_sizes: Vec<usize>) -> Result<Self, GraphError> {
        if sending_sizes.is_empty() {
            return Err(GraphError::InvalidPartition(
                "at least one sending sub-network is required".into(),
            ));
        }
        if receiving_sizes.is_empty() {
            return Err(GraphError::InvalidPartition(
                "at least one receiving sub-network is required".into(),
            ));
        }
        if sending_sizes.iter().chain(&receiving_sizes).any(|&n| n == 0) {
            return Err(GraphError::InvalidPartition(
                "sub-network sizes must be positive".into(),
            ));
        }
        Ok(Self {
            sending_sizes,
            receiving_sizes,
        })
    }

    pub fn sending_sizes(&self) -> &[usize] {
        &self.sending_sizes
    }

    pub fn receiving_sizes(&self) -> &[usize] {
        &self.receiving_sizes
    }

    /// `S`
    pub fn num_sending_subnets(&self) -> usize {
        self.sending_sizes.len()
    }

    /// `R`
    pub fn num_receiving_subnets(&self) -> usize {
        self.receiving_sizes.len()
    }

    pub fn num_sending_agents(&self) -> usize {
        self.sending_sizes.iter().sum()
    }

    pub fn num_receiving_agents(&self) -> usize {
        self.receiving_sizes.iter().sum()
    }

    pub fn num_agents(&self) -> usize {
        self.num_sending_agents() + self.num_receiving_agents()
    }

    /// Global agent indices of sending sub-network `s`.
    pub fn sending_range(&self, s: usize) -> Range<usize> {
        let start: usize = self.sending_sizes[..s].iter().sum();
        start..start + self.sending_sizes[s]
    }

    /// Global agent indices of receiving sub-network `r`.
    pub fn receiving_range(&self, r: usize) -> Range<usize> {
        let start = self.num_sending_agents() + self.receiving_sizes[..r].iter().sum::<usize>();
        start..start + self.receiving_sizes[r]
    }

    pub fn receiving_agents(&self) -> Range<usize> {
        self.num_sending_agents()..self.num_agents()
    }

    pub fn is_sending(&self, agent: usize) -> bool {
        agent < self.num_sending_agents()
    }

    /// Sending sub-network that `agent` belongs to, if any.
    pub fn sending_subnet_of(&self, agent: usize) -> Option<usize> {
        let mut end = 0;
        for (s, &n) in self.sending_sizes.iter().enumerate() {
            end += n;
            if agent < end {
                return Some(s);
            }
        }
        None
    }
}

/// A combination matrix that has passed [`validate_weak_graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeakGraph {
    partition: Partition,
    a: DMatrix<f64>,
}

impl WeakGraph {
    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn combination_matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn num_agents(&self) -> usize {
        self.a.nrows()
    }

    /// In-neighbours of agent `k` with their (nonzero) weights.
    pub fn in_neighbors(&self, k: usize) -> Vec<(usize, f64)> {
        self.a
            .column(k)
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(l, &w)| (l, w))
            .collect()
    }

    #[cfg(test)]
    pub(crate) fn from_parts_unchecked(partition: Partition, a: DMatrix<f64>) -> Self {
        Self { partition, a }
    }
}

/// Checks every weak-graph invariant and reports all violations at once.
pub fn validate_weak_graph(a: DMatrix<f64>, partition: &Partition) -> Result<WeakGraph, GraphError> {
    let n = partition.num_agents();
    if a.nrows() != n || a.ncols() != n {
        return Err(GraphError::DimensionMismatch {
            rows: a.nrows(),
            cols: a.ncols(),
            agents: n,
        });
    }
    let violations = find_violations(&a, partition);
    if violations.is_empty() {
        Ok(WeakGraph {
            partition: partition.clone(),
            a,
        })
    } else {
        Err(GraphError::Invalid(violations))
    }
}

fn find_violations(a: &DMatrix<f64>, partition: &Partition) -> Vec<Violation> {
    let n = partition.num_agents();
    let n_send = partition.num_sending_agents();
    let mut out = Vec::new();

    for col in 0..n {
        for row in 0..n {
            let v = a[(row, col)];
            if !v.is_finite() {
                out.push(Violation::NonFinite { row, col });
            } else if v < 0.0 {
                out.push(Violation::NegativeWeight { row, col, value: v });
            }
        }
    }
    for col in 0..n {
        let sum: f64 = a.column(col).sum();
        if sum.is_nan() || (sum - 1.0).abs() > COLUMN_SUM_TOL {
            out.push(Violation::NonStochasticColumn { col, sum });
        }
    }

    // Bottom-left block: receiving agents feeding sending agents.
    for col in 0..n_send {
        for row in n_send..n {
            if a[(row, col)] != 0.0 {
                out.push(Violation::ReceivingToSending { row, col });
            }
        }
    }
    for col in 0..n_send {
        let sc = partition.sending_subnet_of(col);
        for row in 0..n_send {
            if a[(row, col)] != 0.0 && partition.sending_subnet_of(row) != sc {
                out.push(Violation::CrossSendingLink { row, col });
            }
        }
    }

    for s in 0..partition.num_sending_subnets() {
        let range = partition.sending_range(s);
        if !range.clone().any(|l| a[(l, l)] > 0.0) {
            out.push(Violation::SendingWithoutSelfLoop { subnet: s });
        }
        if !strongly_connected(a, range) {
            out.push(Violation::SendingNotStronglyConnected { subnet: s });
        }
    }

    for r in 0..partition.num_receiving_subnets() {
        let fed = partition
            .receiving_range(r)
            .any(|k| (0..n_send).any(|l| a[(l, k)] > 0.0));
        if !fed {
            out.push(Violation::ReceivingWithoutSendingLink { subnet: r });
        }
    }

    // Every receiving agent must be downstream of some sender, otherwise
    // I - A_R is singular and the limit of A^i keeps mass on receivers.
    let mut reached = vec![false; n];
    let mut queue: VecDeque<usize> = (0..n_send).collect();
    for &l in &queue {
        reached[l] = true;
    }
    while let Some(l) = queue.pop_front() {
        for k in n_send..n {
            if !reached[k] && a[(l, k)] > 0.0 {
                reached[k] = true;
                queue.push_back(k);
            }
        }
    }
    for (agent, ok) in reached.iter().enumerate().skip(n_send) {
        if !ok {
            out.push(Violation::UnreachableReceivingAgent { agent });
        }
    }
    out
}

/// Strong connectivity of the sub-graph induced by `range`, following edges
/// `l -> k` wherever `a[(l, k)] > 0`.
fn strongly_connected(a: &DMatrix<f64>, range: Range<usize>) -> bool {
    let nodes: Vec<usize> = range.collect();
    if nodes.len() <= 1 {
        return true;
    }
    let reach = |forward: bool| {
        let mut seen = vec![false; nodes.len()];
        seen[0] = true;
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            for (j, &other) in nodes.iter().enumerate() {
                let w = if forward {
                    a[(nodes[i], other)]
                } else {
                    a[(other, nodes[i])]
                };
                if !seen[j] && w > 0.0 {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|b| b)
    };
    reach(true) && reach(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p11() -> Partition {
        Partition::new(vec![1], vec![1]).unwrap()
    }

    fn violations(a: DMatrix<f64>, p: &Partition) -> Vec<Violation> {
        match validate_weak_graph(a, p) {
            Err(GraphError::Invalid(v)) => v,
            other => panic!("expected invalid graph, got {other:?}"),
        }
    }

    #[test]
    fn smallest_legal_weak_graph() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.0, 0.4]);
        let g = validate_weak_graph(a, &p11()).unwrap();
        assert_eq!(g.num_agents(), 2);
        assert_eq!(g.in_neighbors(1), vec![(0, 0.6), (1, 0.4)]);
    }

    #[test]
    fn receiver_without_sending_link() {
        let v = violations(DMatrix::identity(2, 2), &p11());
        assert!(v.contains(&Violation::ReceivingWithoutSendingLink { subnet: 0 }));
        assert_eq!(
            v.iter()
                .find(|x| matches!(x, Violation::ReceivingWithoutSendingLink { .. }))
                .unwrap()
                .to_string(),
            "receiving sub-network 1 has no inbound sending link"
        );
    }

    #[test]
    fn reports_every_violation() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.1, 0.4]);
        let v = violations(a, &p11());
        assert!(v
            .iter()
            .any(|x| matches!(x, Violation::NonStochasticColumn { col: 0, .. })));
        assert!(v.contains(&Violation::ReceivingToSending { row: 1, col: 0 }));
        let msg = GraphError::Invalid(v).to_string();
        assert!(msg.contains("non-stochastic column 1"), "{msg}");
        assert!(msg.contains("receiving-to-sending"), "{msg}");
    }

    #[test]
    fn sending_block_needs_self_loop_and_strong_connectivity() {
        let p = Partition::new(vec![2], vec![1]).unwrap();
        // 2-cycle without self-loops: strongly connected, periodic.
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.5, 1.0, 0.0, 0.0, 0.0, 0.0, 0.5]);
        let v = violations(a, &p);
        assert_eq!(v, vec![Violation::SendingWithoutSelfLoop { subnet: 0 }]);

        // Agent 2 never reaches agent 1.
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.5, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5]);
        let v = violations(a, &p);
        assert_eq!(v, vec![Violation::SendingNotStronglyConnected { subnet: 0 }]);
    }

    #[test]
    fn cross_sending_links_and_unreachable_receivers() {
        let p = Partition::new(vec![1, 1], vec![1, 1]).unwrap();
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(4, 4, &[
            1.0, 0.2, 0.5, 0.0,
            0.0, 0.8, 0.5, 0.0,
            0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        ]);
        let v = violations(a, &p);
        assert!(v.contains(&Violation::CrossSendingLink { row: 0, col: 1 }));
        assert!(v.contains(&Violation::ReceivingWithoutSendingLink { subnet: 1 }));
        assert!(v.contains(&Violation::UnreachableReceivingAgent { agent: 3 }));
    }

    #[test]
    fn dimension_mismatch() {
        let err = validate_weak_graph(DMatrix::identity(3, 3), &p11()).unwrap_err();
        assert!(matches!(err, GraphError::DimensionMismatch { agents: 2, .. }));
    }

    #[test]
    fn partition_ranges() {
        let p = Partition::new(vec![2, 3], vec![1, 2]).unwrap();
        assert_eq!(p.num_agents(), 8);
        assert_eq!(p.sending_range(1), 2..5);
        assert_eq!(p.receiving_range(0), 5..6);
        assert_eq!(p.receiving_range(1), 6..8);
        assert_eq!(p.sending_subnet_of(4), Some(1));
        assert_eq!(p.sending_subnet_of(5), None);
        assert!(Partition::new(vec![], vec![1]).is_err());
        assert!(Partition::new(vec![1], vec![0]).is_err());
    }
}
