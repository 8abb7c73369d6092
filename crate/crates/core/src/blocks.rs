//! Conserved-quantity sectors of a basis.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::Space;
use crate::operator::OperatorMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// Joint eigenvalues of the conserved operators.
    pub key: Vec<f64>,
    pub indices: Vec<usize>,
    /// Some state in the block sits at a Fock truncation level.
    pub touches_truncation: bool,
}

impl Block {
    pub fn id(&self) -> String {
        self.key.iter().map(|k| format!("{k}")).collect::<Vec<_>>().join("/")
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Group basis states by the diagonal values of `conserved`. The operators
/// must be diagonal in the product basis. Values are matched on a
/// half-integer lattice, which covers every integral of motion built here
/// (`μ_i S_3` combinations included).
pub fn conserved_blocks(space: &Space, conserved: &[&OperatorMatrix]) -> Result<Vec<Block>> {
    for c in conserved {
        let off = c.offdiagonal_part().max_abs();
        if off > 1e-10 {
            return Err(Error::NotDiagonal { residual: off });
        }
    }
    let diags: Vec<Vec<f64>> = conserved.iter().map(|c| c.diagonal_values()).collect();
    let mut groups: BTreeMap<Vec<i64>, Vec<usize>> = BTreeMap::new();
    for i in 0..space.dimension() {
        let key: Vec<i64> = diags.iter().map(|d| (d[i] * 2.0).round() as i64).collect();
        groups.entry(key).or_default().push(i);
    }
    Ok(groups
        .into_iter()
        .map(|(k, indices)| Block {
            key: k.iter().map(|&v| v as f64 / 2.0).collect(),
            touches_truncation: indices.iter().any(|&i| space.at_truncation_edge(i)),
            indices,
        })
        .collect())
}

/// Largest magnitude of an entry of `op` connecting two different blocks.
pub fn block_leakage(op: &OperatorMatrix, blocks: &[Block]) -> f64 {
    let mut owner = vec![usize::MAX; op.dimension()];
    for (b, block) in blocks.iter().enumerate() {
        for &i in &block.indices {
            owner[i] = b;
        }
    }
    let m = op.matrix();
    let mut worst: f64 = 0.0;
    for j in 0..op.dimension() {
        for i in 0..op.dimension() {
            if owner[i] != owner[j] {
                worst = worst.max(m[(i, j)].norm());
            }
        }
    }
    worst
}
