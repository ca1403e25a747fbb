//! Group Gram penalties `‖W_iᵀW_i − I‖_F²`.
//!
//! Two routes compute the same quantity:
//!
//! * [`group_penalty`] / [`layer_penalty`] compose tape primitives
//!   (gather, transpose, matmul, sub_identity, frobenius_sq), so their
//!   gradient comes from reverse-mode replay;
//! * [`layer_penalty_fused`] evaluates every group directly with the
//!   closed-form gradient `4·W_i·(W_iᵀW_i − I)` and is what training and the
//!   benchmark use. Groups are independent and may run in parallel; the
//!   scalar is reduced in partition order so the result does not depend on
//!   the execution policy.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grouping::GroupPartition;
use crate::tensor::Tensor;

/// Sink for multiply counts from the penalty kernel. `()` discards them and
/// compiles to nothing.
pub trait MacCounter {
    fn add(&mut self, n: u64);
}

impl MacCounter for () {
    #[inline(always)]
    fn add(&mut self, _: u64) {}
}

impl MacCounter for u64 {
    #[inline(always)]
    fn add(&mut self, n: u64) {
        *self += n;
    }
}

/// Multiplies performed by one kernel invocation, split by phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacTally {
    /// Gram products `W_iᵀW_i`.
    pub gram: u64,
    /// Adjoint products `W_i·(W_iᵀW_i − I)`.
    pub adjoint: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerEval {
    pub per_group: Vec<f64>,
    pub total: f64,
    /// `∂/∂W` of `total`, row-major `C_in×C_out`, when requested.
    pub grad: Option<Vec<f64>>,
}

/// Penalty of one group and optionally its gradient, filter-major
/// (`g` rows of length `c_in`).
fn group_kernel<C: MacCounter>(
    w: &[f64],
    c_in: usize,
    c_out: usize,
    idx: &[usize],
    want_grad: bool,
    gram_macs: &mut C,
    adjoint_macs: &mut C,
) -> (f64, Option<Vec<f64>>) {
    let g = idx.len();
    let mut filters = vec![0.0; g * c_in];
    for (a, &j) in idx.iter().enumerate() {
        let f = &mut filters[a * c_in..(a + 1) * c_in];
        for (p, v) in f.iter_mut().enumerate() {
            *v = w[p * c_out + j];
        }
    }

    // deviation D = WᵀW − I, full g×g schoolbook product
    let mut dev = vec![0.0; g * g];
    for a in 0..g {
        let fa = &filters[a * c_in..(a + 1) * c_in];
        for b in 0..g {
            let fb = &filters[b * c_in..(b + 1) * c_in];
            let mut dot = 0.0;
            for (x, y) in fa.iter().zip(fb) {
                dot += x * y;
                gram_macs.add(1);
            }
            dev[a * g + b] = dot;
        }
        dev[a * g + a] -= 1.0;
    }
    let penalty = dev.iter().map(|d| d * d).sum();
    if !want_grad {
        return (penalty, None);
    }

    // ∂/∂f_a = 4 Σ_b D[a,b] f_b
    let mut grad = vec![0.0; g * c_in];
    for a in 0..g {
        let ga = &mut grad[a * c_in..(a + 1) * c_in];
        for b in 0..g {
            let coef = 4.0 * dev[a * g + b];
            let fb = &filters[b * c_in..(b + 1) * c_in];
            for (o, x) in ga.iter_mut().zip(fb) {
                *o += coef * x;
                adjoint_macs.add(1);
            }
        }
    }
    (penalty, Some(grad))
}

fn check_width(w: &Tensor, partition: &GroupPartition) -> Result<(usize, usize)> {
    let (c_in, c_out) = w.dims2("layer_penalty")?;
    if partition.width() != c_out {
        return Err(Error::shape(
            "layer_penalty",
            format!(
                "partition covers {} filters but the weight has {c_out} columns",
                partition.width()
            ),
        ));
    }
    Ok((c_in, c_out))
}

fn assemble(
    c_in: usize,
    c_out: usize,
    partition: &GroupPartition,
    results: Vec<(f64, Option<Vec<f64>>)>,
    want_grad: bool,
) -> LayerEval {
    let mut grad = want_grad.then(|| vec![0.0; c_in * c_out]);
    let mut per_group = Vec::with_capacity(results.len());
    for (idx, (value, g)) in partition.groups.iter().zip(results) {
        per_group.push(value);
        if let (Some(out), Some(g)) = (grad.as_mut(), g) {
            for (a, &j) in idx.iter().enumerate() {
                for p in 0..c_in {
                    out[p * c_out + j] = g[a * c_in + p];
                }
            }
        }
    }
    let total = per_group.iter().sum();
    LayerEval {
        per_group,
        total,
        grad,
    }
}

/// All groups of `partition` on the `C_in×C_out` matrix `w`.
pub fn layer_penalty_fused(
    w: &Tensor,
    partition: &GroupPartition,
    exec: Exec,
    want_grad: bool,
) -> Result<LayerEval> {
    let (c_in, c_out) = check_width(w, partition)?;
    let data = w.data();
    let results = exec.map(partition.groups.len(), |i| {
        group_kernel(data, c_in, c_out, &partition.groups[i], want_grad, &mut (), &mut ())
    });
    Ok(assemble(c_in, c_out, partition, results, want_grad))
}

/// Sequential [`layer_penalty_fused`] that also counts every multiply.
pub fn layer_penalty_counted(
    w: &Tensor,
    partition: &GroupPartition,
    want_grad: bool,
) -> Result<(LayerEval, MacTally)> {
    let (c_in, c_out) = check_width(w, partition)?;
    let mut tally = MacTally::default();
    let results = partition
        .groups
        .iter()
        .map(|idx| {
            group_kernel(
                w.data(),
                c_in,
                c_out,
                idx,
                want_grad,
                &mut tally.gram,
                &mut tally.adjoint,
            )
        })
        .collect();
    Ok((assemble(c_in, c_out, partition, results, want_grad), tally))
}

/// Transient buffer bytes one group evaluation holds: gathered filters, the
/// `g×g` deviation matrix and, with a backward pass, the filter adjoints.
pub fn transient_bytes(c_in: usize, group_size: usize, with_grad: bool) -> u64 {
    let floats = group_size * c_in + group_size * group_size + usize::from(with_grad) * group_size * c_in;
    (floats * std::mem::size_of::<f64>()) as u64
}

/// `‖WᵀW − I‖_F²` for a `C_in×g` group, composed from tape primitives.
pub fn group_penalty(tape: &mut Tape, w_group: Var) -> Result<Var> {
    let wt = tape.transpose(w_group)?;
    let gram = tape.matmul(wt, w_group)?;
    let dev = tape.sub_identity(gram)?;
    tape.frobenius_sq(dev)
}

/// Sum of [`group_penalty`] over the groups of `partition`, plus the
/// per-group values from the same forward pass.
pub fn layer_penalty(
    tape: &mut Tape,
    w: Var,
    partition: &GroupPartition,
) -> Result<(Var, Vec<f64>)> {
    check_width(tape.value(w), partition)?;
    let mut total: Option<Var> = None;
    let mut per_group = Vec::with_capacity(partition.groups.len());
    for idx in &partition.groups {
        let wg = tape.gather_cols(w, idx)?;
        let p = group_penalty(tape, wg)?;
        per_group.push(tape.value(p).item());
        total = Some(match total {
            Some(t) => tape.add(t, p)?,
            None => p,
        });
    }
    Ok((total.expect("partition has at least one group"), per_group))
}

/// Whole-layer penalty: [`layer_penalty`] with a single group.
pub fn so_penalty(tape: &mut Tape, w: Var) -> Result<Var> {
    let (_, c_out) = tape.value(w).dims2("so_penalty")?;
    let (v, _) = layer_penalty(tape, w, &GroupPartition::whole(c_out)?)?;
    Ok(v)
}
