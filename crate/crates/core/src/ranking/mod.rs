//! Sub-linear ranking on top of feature-mapped keys: sign-hash sketches
//! scored by popcount, a binary sum tree for approximate softmax
//! sampling, and the sample-size bounds that go with them.

mod bounds;
mod sketch;
mod tree;

pub use bounds::{
    azuma_tail, epsilon_approximate_witness, is_epsilon_approximate, min_projections_trig,
    min_sketch_width, unimportant_patch_bound,
};
pub use sketch::{hashed_rank, sign_hash, PackedSigns, SignHashSketch};
pub use tree::{
    build_sample_tree, tree_query, tree_softmax_sample, SampleTree, TreeAggregation, TreeSample,
};

use crate::error::{IapError, Result};
use crate::numerics::{Matrix, RngStream};
use crate::scalar::Real;

/// Feature-mapped keys together with the indexes derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyDatabase<T> {
    keys: Matrix<T>,
    sketch: Option<SignHashSketch<T>>,
    tree: Option<SampleTree<T>>,
    version: u64,
}

impl<T: Real> KeyDatabase<T> {
    /// Snapshot of `keys` (rows `phi(k_i)`) tagged with `version`.
    pub fn new(keys: Matrix<T>, version: u64) -> Self {
        Self {
            keys,
            sketch: None,
            tree: None,
            version,
        }
    }

    /// Hashes every key with `m_prime` Gaussian sign projections.
    pub fn with_sketch(mut self, m_prime: usize, stream: &RngStream) -> Result<Self> {
        self.sketch = Some(SignHashSketch::build(&self.keys, m_prime, stream)?);
        Ok(self)
    }

    pub fn with_tree(mut self) -> Result<Self> {
        self.tree = Some(build_sample_tree(&self.keys)?);
        Ok(self)
    }

    /// Replaces the keys and rebuilds whichever indexes were present,
    /// reusing the sketch projections.
    pub fn rebuild(&mut self, keys: Matrix<T>, version: u64) -> Result<()> {
        if let Some(s) = &self.sketch {
            self.sketch = Some(s.rehash(&keys)?);
        }
        if self.tree.is_some() {
            self.tree = Some(build_sample_tree(&keys)?);
        }
        self.keys = keys;
        self.version = version;
        Ok(())
    }

    pub fn keys(&self) -> &Matrix<T> {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.rows() == 0
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn sketch(&self) -> Result<&SignHashSketch<T>> {
        self.sketch
            .as_ref()
            .ok_or_else(|| IapError::State("key database has no sketches".into()))
    }

    pub fn tree(&self) -> Result<&SampleTree<T>> {
        self.tree
            .as_ref()
            .ok_or_else(|| IapError::State("key database has no sample tree".into()))
    }
}
