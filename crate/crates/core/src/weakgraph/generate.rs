use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{validate_weak_graph, GraphError, Partition, WeakGraph};

const MIN_WEIGHT: f64 = 0.1;

/// Random weak graph for tests and experiments.
///
/// Each sending block gets a directed ring plus a self-loop on every agent;
/// each receiving sub-network gets a ring and one guaranteed link from a
/// random sending agent. Every other admissible entry is switched on with
/// probability `density`. Raw weights are uniform in `[0.1, 1)` before the
/// columns are normalised.
pub fn random_weak_graph(partition: &Partition, density: f64, seed: u64) -> Result<WeakGraph, GraphError> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(GraphError::InvalidDensity(density));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = partition.num_agents();
    let n_send = partition.num_sending_agents();
    let mut mask = DMatrix::from_element(n, n, false);

    for s in 0..partition.num_sending_subnets() {
        let range = partition.sending_range(s);
        let len = range.len();
        for (i, l) in range.clone().enumerate() {
            mask[(l, l)] = true;
            mask[(l, range.start + (i + 1) % len)] = true;
        }
    }
    for r in 0..partition.num_receiving_subnets() {
        let range = partition.receiving_range(r);
        let len = range.len();
        if len > 1 {
            for (i, k) in range.clone().enumerate() {
                mask[(k, range.start + (i + 1) % len)] = true;
            }
        }
        let target = rng.random_range(range);
        let source = rng.random_range(0..n_send);
        mask[(source, target)] = true;
    }

    let admissible = |l: usize, k: usize| {
        if k < n_send {
            partition.sending_subnet_of(l) == partition.sending_subnet_of(k)
        } else {
            true
        }
    };
    for k in 0..n {
        for l in 0..n {
            if !mask[(l, k)] && admissible(l, k) && (density >= 1.0 || rng.random_bool(density)) {
                mask[(l, k)] = true;
            }
        }
    }

    let mut a = DMatrix::zeros(n, n);
    for k in 0..n {
        for l in 0..n {
            if mask[(l, k)] {
                a[(l, k)] = rng.random_range(MIN_WEIGHT..1.0);
            }
        }
        let total: f64 = a.column(k).sum();
        a.column_mut(k).iter_mut().for_each(|v| *v /= total);
    }
    validate_weak_graph(a, partition)
}
