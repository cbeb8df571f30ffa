use serde::{Deserialize, Serialize};

use super::TspInstance;
use crate::error::{Error, Result};

/// A cyclic tour: a permutation of node indices with its Euclidean length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tour {
    pub order: Vec<usize>,
    pub length: f64,
}

impl Tour {
    pub fn new(instance: &TspInstance, order: Vec<usize>) -> Result<Self> {
        let length = tour_length(instance, &order)?;
        Ok(Tour { order, length })
    }

    /// Rotation starting at node 0, oriented so the second node has the
    /// smaller index of 0's two neighbours.
    pub fn canonical_order(order: &[usize]) -> Vec<usize> {
        let n = order.len();
        let start = order.iter().position(|&v| v == 0).unwrap_or(0);
        let next = order[(start + 1) % n];
        let prev = order[(start + n - 1) % n];
        if next <= prev {
            (0..n).map(|k| order[(start + k) % n]).collect()
        } else {
            (0..n).map(|k| order[(start + n - k) % n]).collect()
        }
    }
}

fn check_permutation(n: usize, order: &[usize]) -> Result<()> {
    if order.len() != n {
        return Err(Error::Contract(format!("tour visits {} nodes, instance has {n}", order.len())));
    }
    let mut seen = vec![false; n];
    for &v in order {
        if v >= n || seen[v] {
            return Err(Error::Contract(format!("tour is not a permutation (node {v})")));
        }
        seen[v] = true;
    }
    Ok(())
}

/// Cyclic Euclidean length of `order`, including the closing edge.
///
/// Edges are summed in canonical order, so the result is bit-identical for
/// every rotation and reflection of the same cycle.
pub fn tour_length(instance: &TspInstance, order: &[usize]) -> Result<f64> {
    check_permutation(instance.n, order)?;
    let canon = Tour::canonical_order(order);
    let n = canon.len();
    Ok((0..n).map(|k| instance.dist(canon[k], canon[(k + 1) % n])).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tsp::{generate, Distribution};

    fn square() -> TspInstance {
        TspInstance::from_coords(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            Distribution::Uniform,
            0,
        )
        .unwrap()
    }

    #[test]
    fn square_perimeter() {
        assert_eq!(tour_length(&square(), &[0, 1, 2, 3]).unwrap(), 4.0);
    }

    #[test]
    fn collinear_points() {
        let inst = TspInstance::from_coords(vec![[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]], Distribution::Uniform, 0)
            .unwrap();
        for order in [[0, 1, 2], [1, 0, 2], [2, 1, 0], [0, 2, 1]] {
            assert!((tour_length(&inst, &order).unwrap() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_permutations_rejected() {
        let sq = square();
        assert!(matches!(tour_length(&sq, &[0, 1, 2]), Err(Error::Contract(_))));
        assert!(matches!(tour_length(&sq, &[0, 1, 1, 3]), Err(Error::Contract(_))));
        assert!(matches!(tour_length(&sq, &[0, 1, 2, 4]), Err(Error::Contract(_))));
    }

    proptest::proptest! {
        #[test]
        fn invariant_under_rotation_and_reversal(seed in 0u64..10_000, rot in 0usize..20, n in 3usize..20) {
            let inst = generate(Distribution::Uniform, n, seed).unwrap();
            let mut order: Vec<usize> = (0..n).collect();
            // cheap deterministic shuffle
            for i in 0..n {
                let j = (seed as usize).wrapping_mul(31).wrapping_add(i * 17) % n;
                order.swap(i, j);
            }
            let base = tour_length(&inst, &order).unwrap();
            let mut rotated = order.clone();
            rotated.rotate_left(rot % n);
            proptest::prop_assert_eq!(tour_length(&inst, &rotated).unwrap(), base);
            rotated.reverse();
            proptest::prop_assert_eq!(tour_length(&inst, &rotated).unwrap(), base);
        }
    }
}
