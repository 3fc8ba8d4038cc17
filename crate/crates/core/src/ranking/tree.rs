use rand::Rng;

use crate::error::{invalid, IapError, Result};
use crate::features::{FeatureMap, Role};
use crate::numerics::{dot, Matrix};
use crate::scalar::Real;

/// Complete binary tree over the keys, padded with zero vectors to a power
/// of two. Node `v` stores `f(v)`, the sum of the key features below it;
/// the root is node 1 and node `v` has children `2v` and `2v + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTree<T> {
    len: usize,
    leaves: usize,
    depth: usize,
    nodes: Matrix<T>,
}

/// One traversal: the sampled patch and the number of branch decisions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TreeSample {
    pub index: usize,
    pub visits: usize,
}

/// Requires non-negative features (positive or learned maps).
pub fn build_sample_tree<T: Real>(keys: &Matrix<T>) -> Result<SampleTree<T>> {
    let len = keys.rows();
    if len == 0 {
        return invalid("sample tree needs at least one key");
    }
    if let Some(x) = keys.as_slice().iter().find(|x| !(**x >= T::zero())) {
        return invalid(format!(
            "sample tree needs non-negative features, found {x}"
        ));
    }
    let leaves = len.next_power_of_two();
    let depth = leaves.trailing_zeros() as usize;
    let width = keys.cols();
    let mut nodes = Matrix::zeros(2 * leaves, width);
    for i in 0..len {
        nodes.row_mut(leaves + i).copy_from_slice(keys.row(i));
    }
    for v in (1..leaves).rev() {
        for j in 0..width {
            let s = nodes.get(2 * v, j) + nodes.get(2 * v + 1, j);
            nodes.set(v, j, s);
        }
    }
    Ok(SampleTree {
        len,
        leaves,
        depth,
        nodes,
    })
}

impl<T: Real> SampleTree<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Padded leaf count.
    pub fn leaves(&self) -> usize {
        self.leaves
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.nodes.cols()
    }

    /// `f(v)` for node `v` (root is 1).
    pub fn node(&self, v: usize) -> &[T] {
        self.nodes.row(v)
    }

    pub fn root(&self) -> &[T] {
        self.nodes.row(1)
    }

    fn check_query(&self, z: &[T]) -> Result<()> {
        if z.len() != self.width() {
            return invalid(format!(
                "query width {} does not match tree width {}",
                z.len(),
                self.width()
            ));
        }
        Ok(())
    }

    fn left_probability(&self, v: usize, z: &[T]) -> Result<T> {
        let a = dot(self.node(2 * v), z);
        let b = dot(self.node(2 * v + 1), z);
        let total = a + b;
        if !(total > T::zero()) || !total.is_finite() {
            return Err(IapError::Degenerate(format!("node {v} has mass {total}")));
        }
        Ok(a / total)
    }

    /// Exact leaf distribution induced by the traversal rule, as the
    /// product of branch probabilities along each root-to-leaf path.
    pub fn leaf_distribution(&self, z: &[T]) -> Result<Vec<T>> {
        self.check_query(z)?;
        let mut mass = vec![T::zero(); 2 * self.leaves];
        mass[1] = T::one();
        for v in 1..self.leaves {
            if mass[v] == T::zero() {
                continue;
            }
            let p = self.left_probability(v, z)?;
            mass[2 * v] = mass[v] * p;
            mass[2 * v + 1] = mass[v] * (T::one() - p);
        }
        Ok(mass[self.leaves..self.leaves + self.len].to_vec())
    }
}

/// One root-to-leaf walk, going left with probability
/// `f(left)ᵀz / (f(left)ᵀz + f(right)ᵀz)`.
pub fn tree_softmax_sample<T: Real, R: Rng + ?Sized>(
    tree: &SampleTree<T>,
    z: &[T],
    rng: &mut R,
) -> Result<TreeSample> {
    tree.check_query(z)?;
    let mut v = 1;
    let mut visits = 0;
    while v < tree.leaves {
        let p = tree.left_probability(v, z)?;
        visits += 1;
        v = if rng.random::<f64>() < p.to_f64_lossy() {
            2 * v
        } else {
            2 * v + 1
        };
    }
    Ok(TreeSample {
        index: v - tree.leaves,
        visits,
    })
}

/// How the queries are folded into the traversal vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TreeAggregation {
    /// `phi(sum_i q_i)`: leaf `j` is reached with probability
    /// proportional to an estimate of `exp((sum_i q_i)ᵀ k_j)`.
    FeatureOfSum,
    /// `sum_i phi(q_i)`: probabilities proportional to the estimated
    /// column sums of the attention matrix.
    SumOfFeatures,
}

/// Traversal vector for the queries `q` (rows, before feature mapping).
pub fn tree_query<T: Real>(
    map: &FeatureMap<T>,
    q: &Matrix<T>,
    aggregation: TreeAggregation,
) -> Result<Vec<T>> {
    match aggregation {
        TreeAggregation::FeatureOfSum => map.features(&q.column_sums(), Role::Query),
        TreeAggregation::SumOfFeatures => Ok(map.apply(q, Role::Query)?.column_sums()),
    }
}
