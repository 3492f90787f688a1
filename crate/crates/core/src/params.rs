//! Named parameter blocks shared by every trainable model.

use crate::numerics::Matrix;

/// A collection of trainable matrices with stable names and a stable order.
///
/// Gradients use the same type as the parameters they belong to, so
/// `blocks()` of a model and of its gradient line up index by index.
pub trait Parameters: Clone {
    fn blocks(&self) -> Vec<(String, &Matrix)>;

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    /// A copy with every entry set to zero.
    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, m) in out.blocks_mut() {
            m.fill(0.0);
        }
        out
    }

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.len()).sum()
    }

    fn global_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .map(|(_, m)| m.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    fn scale_all(&mut self, factor: f64) {
        for (_, m) in self.blocks_mut() {
            m.scale(factor);
        }
    }

    /// `self += other`, block by block.
    fn accumulate(&mut self, other: &Self) {
        for ((_, dst), (_, src)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += s;
            }
        }
    }
}

/// A lone matrix is a single block named `value`.
impl Parameters for Matrix {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        vec![("value".into(), self)]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![("value".into(), self)]
    }
}

/// Prefixes block names, e.g. `w_i` to `fwd.w_i`.
pub(crate) fn prefixed<'a>(
    prefix: &str,
    blocks: Vec<(String, &'a Matrix)>,
) -> impl Iterator<Item = (String, &'a Matrix)> + 'a {
    let prefix = prefix.to_owned();
    blocks
        .into_iter()
        .map(move |(n, m)| (format!("{prefix}.{n}"), m))
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    blocks: Vec<(String, &'a mut Matrix)>,
) -> impl Iterator<Item = (String, &'a mut Matrix)> + 'a {
    let prefix = prefix.to_owned();
    blocks
        .into_iter()
        .map(move |(n, m)| (format!("{prefix}.{n}"), m))
}
