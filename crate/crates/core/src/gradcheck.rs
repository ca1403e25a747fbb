//! Central finite-difference checks of every differentiable operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::exec::Exec;
use crate::grouping::{GroupPartition, PartitionMode};
use crate::nn::{adapter_forward, build_reference_model, AdapterLayer};
use crate::penalty::{group_penalty, layer_penalty};
use crate::regularizer::{total_loss, RegConfig, RegPlan};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
    /// Perturbs the analytic gradient of every check whose name starts with
    /// this prefix (negative control).
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-6,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckSummary {
    pub results: Vec<CheckResult>,
    pub tol: f64,
    pub eps: f64,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn worst(&self) -> &CheckResult {
        self.results
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            .expect("non-empty suite")
    }
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_grads(
    inputs: &[Tensor],
    eps: f64,
    f: &dyn Fn(&[Tensor]) -> f64,
) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + eps;
            let up = f(&work);
            work[i].data_mut()[k] = orig - eps;
            let down = f(&work);
            work[i].data_mut()[k] = orig;
            *gk = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Compares tape gradients with central differences for every input whose
/// tensor has `requires_grad` set. Inputs without it must receive no gradient.
pub fn check(
    name: &str,
    inputs: &[Tensor],
    build: &Build<'_>,
    opts: &GradcheckOptions,
) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;

    let eval = |ts: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = ts
            .iter()
            .map(|x| t.leaf(x.clone().with_grad(false)))
            .collect();
        let o = build(&mut t, &vs).expect("forward succeeded once");
        t.value(o).item()
    };
    let numeric = numeric_grads(inputs, opts.eps, &eval);
    let corrupt = opts.corrupt.as_deref().is_some_and(|c| name.starts_with(c));

    let mut worst: f64 = 0.0;
    for ((input, var), num) in inputs.iter().zip(&vars).zip(&numeric) {
        if !input.requires_grad {
            if tape.grad(*var).is_some() {
                worst = f64::INFINITY;
            }
            continue;
        }
        let mut analytic = tape
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        if corrupt {
            analytic[0] += 1e-3 * (1.0 + analytic[0].abs());
        }
        worst = worst.max(relative_error(&analytic, num));
    }
    Ok(CheckResult {
        name: name.to_string(),
        rel_err: worst,
        passed: worst < opts.tol,
    })
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng).with_grad(true)
}

/// Random values bounded away from zero, so relu kinks stay out of reach.
fn rand_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap().with_grad(true)
}

fn projection(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Runs the full suite: tensor ops, grouped penalties (N ∈ {1,2,4}, both
/// the composed and the fused route), conv2d, groupnorm, adapter layers and
/// a whole regularized model objective.
pub fn run_suite(opts: &GradcheckOptions) -> Result<GradcheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut results = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, build: &Build<'_>| -> Result<()> {
        results.push(check(name, &inputs, build, opts)?);
        Ok(())
    };

    let r = projection(3 * 2, &mut rng);
    run(
        "matmul",
        vec![rand_t(&[3, 4], &mut rng), rand_t(&[4, 2], &mut rng)],
        &|t, v| {
            let p = t.matmul(v[0], v[1])?;
            t.weighted_sum(p, r.clone())
        },
    )?;
    let r = projection(12, &mut rng);
    run("transpose", vec![rand_t(&[3, 4], &mut rng)], &|t, v| {
        let p = t.transpose(v[0])?;
        t.weighted_sum(p, r.clone())
    })?;
    let r = projection(6, &mut rng);
    run(
        "add_sub_scale",
        vec![rand_t(&[2, 3], &mut rng), rand_t(&[2, 3], &mut rng)],
        &|t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[1])?;
            let d = t.sub(d, v[1])?;
            let d = t.scalar_mul(d, -1.7);
            t.weighted_sum(d, r.clone())
        },
    )?;
    let r = projection(10, &mut rng);
    run("relu", vec![rand_away_from_zero(&[2, 5], &mut rng)], &|t, v| {
        let y = t.relu(v[0]);
        t.weighted_sum(y, r.clone())
    })?;
    run("sub_identity", vec![rand_t(&[4, 4], &mut rng)], &|t, v| {
        let y = t.sub_identity(v[0])?;
        t.frobenius_sq(y)
    })?;
    run("frobenius_sq", vec![rand_t(&[3, 5], &mut rng)], &|t, v| {
        t.frobenius_sq(v[0])
    })?;
    run("gather_group", vec![rand_t(&[4, 6], &mut rng)], &|t, v| {
        let g = t.gather_cols(v[0], &[4, 1, 3])?;
        t.frobenius_sq(g)
    })?;

    for n in [1, 2, 4] {
        let w = rand_t(&[6, 8], &mut rng);
        for mode in [PartitionMode::Inter, PartitionMode::Intra] {
            let part = GroupPartition::new(mode, n, 8)?;
            run(&format!("group_penalty[N={n},{mode}]"), vec![w.clone()], &|t, v| {
                Ok(layer_penalty(t, v[0], &part)?.0)
            })?;
            run(
                &format!("group_penalty[N={n},{mode},fused]"),
                vec![w.clone()],
                &|t, v| Ok(t.group_penalties(v[0], &part)?.0),
            )?;
        }
    }
    run("group_penalty[single]", vec![rand_t(&[5, 3], &mut rng)], &|t, v| {
        group_penalty(t, v[0])
    })?;

    for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
        let x = rand_t(&[1, 2, 4, 4], &mut rng);
        let k = rand_t(&[3, 2, 3, 3], &mut rng);
        let mut probe = Tape::new();
        let (xv, kv) = (probe.leaf(x.clone()), probe.leaf(k.clone()));
        let out = probe.conv2d(xv, kv, stride, padding)?;
        let r = projection(probe.value(out).numel(), &mut rng);
        run(
            &format!("conv2d[stride={stride},pad={padding}]"),
            vec![x, k],
            &|t, v| {
                let y = t.conv2d(v[0], v[1], stride, padding)?;
                t.weighted_sum(y, r.clone())
            },
        )?;
    }

    let r = projection(2 * 4 * 3 * 3, &mut rng);
    let gamma = Tensor::uniform(&[4], 0.5, 1.5, &mut rng).with_grad(true);
    run(
        "groupnorm",
        vec![rand_t(&[2, 4, 3, 3], &mut rng), gamma, rand_t(&[4], &mut rng)],
        &|t, v| {
            let y = t.group_norm(v[0], v[1], v[2], 2, 1e-5)?;
            t.weighted_sum(y, r.clone())
        },
    )?;
    let r = projection(2 * 3, &mut rng);
    run(
        "bias_pool",
        vec![rand_t(&[2, 3, 2, 2], &mut rng), rand_t(&[3], &mut rng), rand_t(&[3], &mut rng)],
        &|t, v| {
            let y = t.add_channel_bias(v[0], v[1])?;
            let p = t.global_avg_pool(y)?;
            let p = t.add_row_bias(p, v[2])?;
            t.weighted_sum(p, r.clone())
        },
    )?;
    run("softmax_cross_entropy", vec![rand_t(&[3, 4], &mut rng)], &|t, v| {
        t.softmax_cross_entropy(v[0], &[2, 0, 3])
    })?;

    let base = Tensor::uniform(&[5, 6], -1.0, 1.0, &mut rng);
    let mut adapter = AdapterLayer::init(base, 2, &mut rng)?;
    adapter.up = Tensor::uniform(&[5, 2], -1.0, 1.0, &mut rng);
    let x = Tensor::uniform(&[3, 6], -1.0, 1.0, &mut rng);
    let r = projection(3 * 5, &mut rng);
    run(
        "adapter",
        vec![
            x,
            adapter.base.clone(),
            adapter.down.clone().with_grad(true),
            adapter.up.clone().with_grad(true),
        ],
        &|t, v| {
            let y = adapter_forward(t, v[0], v[1], v[2], v[3], 0.7)?;
            t.weighted_sum(y, r.clone())
        },
    )?;

    // whole objective: conv-gn-small cross-entropy plus grouped penalty
    let model = build_reference_model("conv-gn-small", 3, &mut rng)?;
    let plan = RegPlan::for_model(
        &model,
        &RegConfig {
            lambda: 0.1,
            requested_n: 16,
            ..Default::default()
        },
    )?;
    let names: Vec<String> = model.params.keys().cloned().collect();
    let mut inputs: Vec<Tensor> = names
        .iter()
        .map(|k| model.params[k].clone().with_grad(true))
        .collect();
    inputs.push(Tensor::uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng));
    run("model_objective", inputs, &|t, v| {
        let bindings = names.iter().cloned().zip(v.iter().copied()).collect();
        let logits = model.forward(t, &bindings, v[names.len()])?;
        let ce = t.softmax_cross_entropy(logits, &[0, 2])?;
        Ok(total_loss(t, ce, &bindings, &plan)?.0)
    })?;

    Ok(GradcheckSummary {
        results,
        tol: opts.tol,
        eps: opts.eps,
    })
}

/// Fused-penalty gradient under both execution policies, for callers that
/// want to confirm parallel/sequential agreement.
pub fn fused_grad(w: &Tensor, partition: &GroupPartition, exec: Exec) -> Result<Vec<f64>> {
    Ok(crate::penalty::layer_penalty_fused(w, partition, exec, true)?
        .grad
        .expect("requested"))
}
