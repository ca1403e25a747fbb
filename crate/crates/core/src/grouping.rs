//! Filter-matrix views and inter-/intra-group partitions of filter columns.
//!
//! A layer's filters are the columns of its `C_in × C_out` weight view. The
//! partition decides which filters are orthonormalized together:
//!
//! * inter: `N` consecutive blocks of `G_size = C_out / N` filters, so a
//!   regularization group lines up with a normalization group of the layer's
//!   output channels;
//! * intra: `G_size` strided groups `{i, G_size + i, 2·G_size + i, ...}`, one
//!   filter from each consecutive block.
//!
//! Column indices here are 0-based.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    #[default]
    Inter,
    Intra,
}

impl fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionMode::Inter => "inter",
            PartitionMode::Intra => "intra",
        })
    }
}

impl FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inter" => Ok(PartitionMode::Inter),
            "intra" => Ok(PartitionMode::Intra),
            other => Err(Error::config(format!(
                "unknown partition mode {other:?} (expected inter or intra)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub mode: PartitionMode,
    pub n_groups: usize,
    pub group_size: usize,
    pub groups: Vec<Vec<usize>>,
}

impl GroupPartition {
    /// Builds the partition of `c_out` filters into `n_groups` blocks.
    pub fn new(mode: PartitionMode, n_groups: usize, c_out: usize) -> Result<Self> {
        if n_groups == 0 || c_out == 0 || !c_out.is_multiple_of(n_groups) {
            return Err(Error::config(format!(
                "group count {n_groups} does not divide {c_out} filters"
            )));
        }
        let size = c_out / n_groups;
        let groups = match mode {
            PartitionMode::Inter => (0..n_groups)
                .map(|i| (i * size..(i + 1) * size).collect())
                .collect(),
            PartitionMode::Intra => (0..size)
                .map(|i| (0..n_groups).map(|k| k * size + i).collect())
                .collect(),
        };
        Ok(Self {
            mode,
            n_groups,
            group_size: size,
            groups,
        })
    }

    /// Single group holding every filter: the whole-layer penalty.
    pub fn whole(c_out: usize) -> Result<Self> {
        Self::new(PartitionMode::Inter, 1, c_out)
    }

    /// Number of filters covered.
    pub fn width(&self) -> usize {
        self.n_groups * self.group_size
    }
}

/// Regularization group count for a layer with `c_out` filters.
///
/// Groups keep at least four filters: the cap is `min(requested, c_out / 4)`,
/// rounded down to the nearest divisor of `c_out`, and never below one.
pub fn effective_groups(requested: usize, c_out: usize) -> usize {
    let cap = requested.min(c_out / 4).max(1);
    (1..=cap).rev().find(|d| c_out.is_multiple_of(*d)).unwrap_or(1)
}

/// `C_out×c×h×w` kernel → `C_in×C_out` filter matrix (`C_in = c·h·w`) on the
/// tape. Column `j` is filter `j` flattened; gradients reach the 4-D kernel.
pub fn flatten_kernel(tape: &mut Tape, kernel: Var) -> Result<Var> {
    let shape = tape.shape(kernel).to_vec();
    let [c_out, c, h, w] = shape[..] else {
        return Err(Error::shape(
            "flatten_kernel",
            format!("expected a rank-4 kernel, got shape {shape:?}"),
        ));
    };
    let rows = tape.reshape(kernel, &[c_out, c * h * w])?;
    tape.transpose(rows)
}

/// Inverse of [`flatten_kernel`] on plain tensors.
pub fn unflatten_kernel(matrix: &Tensor, c: usize, h: usize, w: usize) -> Result<Tensor> {
    let (c_in, c_out) = matrix.dims2("unflatten_kernel")?;
    if c_in != c * h * w {
        return Err(Error::shape(
            "unflatten_kernel",
            format!("{c_in} rows cannot hold {c}x{h}x{w} filters"),
        ));
    }
    matrix.transposed()?.reshape(&[c_out, c, h, w])
}

/// Flattens a kernel tensor without a tape.
pub fn flatten_kernel_tensor(kernel: &Tensor) -> Result<Tensor> {
    let [c_out, c, h, w] = kernel.shape()[..] else {
        return Err(Error::shape(
            "flatten_kernel",
            format!("expected a rank-4 kernel, got shape {:?}", kernel.shape()),
        ));
    };
    kernel.reshape(&[c_out, c * h * w])?.transposed()
}

/// Column-gathered submatrix `W[:, indices]` on the tape.
pub fn gather_group(tape: &mut Tape, w: Var, indices: &[usize]) -> Result<Var> {
    tape.gather_cols(w, indices)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_based(p: &GroupPartition) -> Vec<Vec<usize>> {
        p.groups
            .iter()
            .map(|g| g.iter().map(|i| i + 1).collect())
            .collect()
    }

    /// Largest divisor of `c_out` not above the cap, by scanning every candidate.
    fn divisor_scan(requested: usize, c_out: usize) -> usize {
        let cap = requested.min(c_out / 4);
        let mut best = 1;
        for d in 1..=c_out {
            if c_out.is_multiple_of(d) && d <= cap {
                best = d;
            }
        }
        best
    }

    #[test]
    fn partition_examples() {
        let inter = GroupPartition::new(PartitionMode::Inter, 3, 6).unwrap();
        assert_eq!(one_based(&inter), vec![vec![1, 2], vec![3, 4], vec![5, 6]]);
        let intra = GroupPartition::new(PartitionMode::Intra, 3, 6).unwrap();
        assert_eq!(one_based(&intra), vec![vec![1, 3, 5], vec![2, 4, 6]]);
        let whole = GroupPartition::new(PartitionMode::Inter, 1, 5).unwrap();
        assert_eq!(one_based(&whole), vec![vec![1, 2, 3, 4, 5]]);
    }

    #[test]
    fn non_divisor_is_config_error() {
        assert!(matches!(
            GroupPartition::new(PartitionMode::Inter, 4, 6),
            Err(Error::Config(_))
        ));
        assert!(GroupPartition::new(PartitionMode::Intra, 0, 6).is_err());
    }

    #[test]
    fn effective_groups_examples() {
        assert_eq!(effective_groups(32, 256), 32);
        assert_eq!(effective_groups(32, 16), 4);
        assert_eq!(divisor_scan(32, 16), 4);
        for c_out in 1..40 {
            assert_eq!(effective_groups(1, c_out), 1);
        }
        // 24/4 = 6 caps N=16 at 6, which divides 24
        assert_eq!(effective_groups(16, 24), 6);
        // N=3 does not divide 20: round down to 2
        assert_eq!(effective_groups(3, 20), 2);
    }

    #[test]
    fn effective_groups_matches_divisor_scan() {
        for c_out in 1..=300 {
            for req in 1..=40 {
                let n = effective_groups(req, c_out);
                assert_eq!(n, divisor_scan(req, c_out).max(1), "({req}, {c_out})");
                assert_eq!(c_out % n, 0);
                if c_out >= 4 {
                    assert!(n <= c_out / 4);
                } else {
                    assert_eq!(n, 1);
                }
            }
        }
    }

    #[test]
    fn unflatten_round_trip() {
        let data: Vec<f64> = (0..4 * 2 * 3 * 3).map(|i| i as f64 * 0.5 - 3.0).collect();
        let k = Tensor::new(&[4, 2, 3, 3], data).unwrap();
        let w = flatten_kernel_tensor(&k).unwrap();
        assert_eq!(w.shape(), &[18, 4]);
        assert_eq!(unflatten_kernel(&w, 2, 3, 3).unwrap(), k);
    }

    #[test]
    fn flatten_rejects_wrong_rank() {
        assert!(flatten_kernel_tensor(&Tensor::zeros(&[2, 3])).is_err());
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[2, 3, 4]));
        assert!(flatten_kernel(&mut tape, v).is_err());
    }

    #[test]
    fn flatten_columns_are_filters() {
        let k = Tensor::new(&[2, 1, 1, 1], vec![5.0, 7.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(k);
        let w = flatten_kernel(&mut tape, v).unwrap();
        assert_eq!(tape.value(w).shape(), &[1, 2]);
        assert_eq!(tape.value(w).data(), &[5.0, 7.0]);
    }
}
