//! MAC cost model for whole-layer vs. grouped Gram penalties, and the
//! wall-clock benchmark that checks it against the real kernel.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{worker_threads, Exec};
use crate::grouping::{GroupPartition, PartitionMode};
use crate::penalty::{layer_penalty_counted, layer_penalty_fused, transient_bytes};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    Full,
    Grouped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostQuery {
    pub c_in: usize,
    pub c_out: usize,
    pub n: usize,
    pub mode: CostMode,
}

/// Operation counts of one penalty evaluation. `gram_macs` is the headline
/// schoolbook figure; the elementwise terms are lower order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub gram_macs: u64,
    /// Diagonal subtractions of `I`.
    pub sub_identity_ops: u64,
    /// Squares summed for the Frobenius norm.
    pub square_sum_ops: u64,
}

pub fn cost_model(q: &CostQuery) -> Result<CostBreakdown> {
    let (c_in, c_out) = (q.c_in as u64, q.c_out as u64);
    let n = match q.mode {
        CostMode::Full => 1,
        CostMode::Grouped => {
            if q.n == 0 || !q.c_out.is_multiple_of(q.n) {
                return Err(Error::config(format!(
                    "group count {} does not divide C_out = {}",
                    q.n, q.c_out
                )));
            }
            q.n as u64
        }
    };
    let g = c_out / n;
    Ok(CostBreakdown {
        gram_macs: n * g * g * c_in,
        sub_identity_ops: n * g,
        square_sum_ops: n * g * g,
    })
}

/// Conv kernel shape `C_out×c×h×w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelShape {
    pub c_out: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl KernelShape {
    /// The 256×256×3×3 layer used for the runtime comparison.
    pub const DEFAULT: KernelShape = KernelShape {
        c_out: 256,
        c: 256,
        h: 3,
        w: 3,
    };

    pub fn c_in(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl fmt::Display for KernelShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.c_out, self.c, self.h, self.w)
    }
}

impl FromStr for KernelShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dims: Vec<usize> = s
            .split('x')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config(format!("bad kernel shape {s:?}")))?;
        match dims[..] {
            [c_out, c, h, w] if dims.iter().all(|&d| d > 0) => Ok(Self { c_out, c, h, w }),
            _ => Err(Error::config(format!(
                "kernel shape must be C_outxcxhxw with positive dims, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub shape: KernelShape,
    pub ns: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Also time the parallel-over-groups kernel when more than one worker
    /// thread is available.
    pub parallel_series: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            shape: KernelShape::DEFAULT,
            ns: vec![1, 2, 4, 8, 16, 32],
            reps: 30,
            warmup: 3,
            seed: 0,
            parallel_series: true,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() {
            return Err(Error::config("empty group-count list"));
        }
        for &n in &self.ns {
            if n == 0 || !self.shape.c_out.is_multiple_of(n) {
                return Err(Error::config(format!(
                    "group count {n} does not divide C_out = {}",
                    self.shape.c_out
                )));
            }
        }
        if self.reps == 0 {
            return Err(Error::config("reps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Series {
    Sequential,
    Parallel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub series: Series,
    pub n: usize,
    pub macs: u64,
    pub ns_median: u64,
    pub ns_p10: u64,
    pub ns_p90: u64,
    pub bytes: u64,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[u64], q: f64) -> u64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times forward+backward of the grouped penalty for each N on one random
/// kernel. Every N is first run through the counting kernel and must match
/// [`cost_model`] exactly.
pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchResult>> {
    config.validate()?;
    let shape = config.shape;
    let (c_in, c_out) = (shape.c_in(), shape.c_out);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bound = (6.0 / c_in as f64).sqrt();
    let w = Tensor::uniform(&[c_in, c_out], -bound, bound, &mut rng);

    let mut series = vec![Series::Sequential];
    if config.parallel_series && Exec::Parallel.is_parallel() && worker_threads() > 1 {
        series.push(Series::Parallel);
    }

    let mut out = Vec::new();
    for &s in &series {
        let exec = match s {
            Series::Sequential => Exec::Sequential,
            Series::Parallel => Exec::Parallel,
        };
        for &n in &config.ns {
            let partition = GroupPartition::new(PartitionMode::Inter, n, c_out)?;
            let expected = cost_model(&CostQuery {
                c_in,
                c_out,
                n,
                mode: CostMode::Grouped,
            })?;
            let (_, tally) = layer_penalty_counted(&w, &partition, true)?;
            if tally.gram != expected.gram_macs {
                return Err(Error::config(format!(
                    "MAC counter disagrees with cost model at N={n}: {} vs {}",
                    tally.gram, expected.gram_macs
                )));
            }
            for _ in 0..config.warmup {
                black_box(layer_penalty_fused(black_box(&w), &partition, exec, true)?);
            }
            let mut samples: Vec<u64> = (0..config.reps)
                .map(|_| {
                    let t = Instant::now();
                    let r = layer_penalty_fused(black_box(&w), &partition, exec, true);
                    let ns = t.elapsed().as_nanos() as u64;
                    black_box(r).map(|_| ns)
                })
                .collect::<Result<_>>()?;
            samples.sort_unstable();
            let live_groups = match s {
                Series::Sequential => 1,
                Series::Parallel => worker_threads().min(n),
            } as u64;
            out.push(BenchResult {
                series: s,
                n,
                macs: tally.gram,
                ns_median: percentile(&samples, 0.5),
                ns_p10: percentile(&samples, 0.1),
                ns_p90: percentile(&samples, 0.9),
                bytes: live_groups * transient_bytes(c_in, c_out / n, true),
            });
        }
    }
    Ok(out)
}

/// Adjacent pairs where the later value is larger.
pub fn count_inversions(values: &[u64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}

/// `N,macs,ns_median,ns_p10,ns_p90,bytes` rows for one series.
pub fn bench_csv(results: &[BenchResult], series: Series) -> String {
    let mut s = String::from("N,macs,ns_median,ns_p10,ns_p90,bytes\n");
    for r in results.iter().filter(|r| r.series == series) {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.n, r.macs, r.ns_median, r.ns_p10, r.ns_p90, r.bytes
        ));
    }
    s
}
