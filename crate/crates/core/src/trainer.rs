//! Deterministic desk-scale training on synthetic class-template data.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{build_reference_model, Model};
use crate::regularizer::{penalty_report, total_loss, PenaltyReport, RegConfig, RegPlan};
use crate::tensor::Tensor;

// independent RNG streams derived from one seed
const STREAM_INIT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

/// Rejects NaN and infinities along with negatives.
fn finite_non_negative(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub sigma: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 3,
            samples_per_class: 200,
            sigma: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    /// Stacks the given samples into a `B×sample_shape` tensor.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![idx.len()];
        shape.extend(&self.sample_shape);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(&shape, data).expect("batch shape"), labels)
    }
}

/// One fixed uniform `[0,1]` template per class; samples are the template plus
/// Gaussian noise. Each class is split 80/20 into train and test.
pub fn make_synthetic_dataset(
    spec: &DatasetSpec,
    sample_shape: &[usize],
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if spec.n_classes == 0 || spec.samples_per_class == 0 || !finite_non_negative(spec.sigma) {
        return Err(Error::config(format!("invalid dataset spec {spec:?}")));
    }
    let mut rng = stream(seed, STREAM_DATA);
    let n: usize = sample_shape.iter().product();
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::config(e.to_string()))?;
    let n_train = spec.samples_per_class * 4 / 5;
    let empty = || Dataset {
        sample_shape: sample_shape.to_vec(),
        inputs: Vec::new(),
        labels: Vec::new(),
    };
    let (mut train, mut test) = (empty(), empty());
    for class in 0..spec.n_classes {
        let template = Tensor::uniform(&[n], 0.0, 1.0, &mut rng);
        for s in 0..spec.samples_per_class {
            let dst = if s < n_train { &mut train } else { &mut test };
            dst.inputs.extend(
                template
                    .data()
                    .iter()
                    .map(|t| t + if spec.sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 }),
            );
            dst.labels.push(class);
        }
    }
    Ok((train, test))
}

/// Momentum SGD: `v ← momentum·v + g`, `p ← p − lr·v`.
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "param {}, grad {}, velocity {}",
                param.len(),
                grad.len(),
                velocity.len()
            ),
        ));
    }
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Multiplier on the task loss; 0 optimizes the penalty alone.
    pub task_weight: f64,
    pub reg: RegConfig,
    pub data: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: "conv-gn-small".into(),
            epochs: 30,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            seed: 0,
            task_weight: 1.0,
            reg: RegConfig::default(),
            data: DatasetSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if ![self.lr, self.momentum, self.task_weight].into_iter().all(finite_non_negative) {
            return Err(Error::config("lr, momentum and task_weight must be >= 0"));
        }
        self.reg.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean differentiated objective over the epoch's steps.
    pub loss: f64,
    /// Mean unweighted cross-entropy over the epoch's steps.
    pub task_loss: f64,
    /// Mean penalty double sum over the epoch's steps.
    pub penalty: f64,
    pub acc: f64,
    /// Mean group deviation over all in-scope groups at the end of the epoch.
    pub mean_dev: f64,
    pub layer_mean_dev: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub initial_acc: f64,
    pub epochs: Vec<EpochMetrics>,
    pub final_penalty: PenaltyReport,
    /// Excluded from determinism comparisons.
    pub timing: Timing,
}

impl RunReport {
    pub fn final_epoch(&self) -> &EpochMetrics {
        self.epochs.last().expect("at least one epoch")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,task_loss,penalty,acc,mean_dev\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.loss, e.task_loss, e.penalty, e.acc, e.mean_dev
            ));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// The scalar that was differentiated.
    pub objective: f64,
    pub task_loss: f64,
    pub penalty: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub plan: RegPlan,
    pub train: Dataset,
    pub test: Dataset,
    velocity: BTreeMap<String, Vec<f64>>,
    shuffle: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, STREAM_INIT);
        let model = build_reference_model(&config.model, config.data.n_classes, &mut rng)?;
        Self::with_model(config, model)
    }

    /// Trains a caller-supplied model; `config.model` is informational.
    pub fn with_model(config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        let plan = RegPlan::for_model(&model, &config.reg)?;
        let (train, test) = make_synthetic_dataset(&config.data, &model.input_shape, config.seed)?;
        let velocity = model
            .params
            .iter()
            .filter(|(k, _)| model.is_trainable(k))
            .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
            .collect();
        Ok(Self {
            shuffle: stream(config.seed, STREAM_SHUFFLE),
            config,
            model,
            plan,
            train,
            test,
            velocity,
        })
    }

    pub fn reset_velocity(&mut self) {
        self.velocity.values_mut().for_each(|v| v.fill(0.0));
    }

    /// One SGD step on the given training samples.
    pub fn step(&mut self, batch: &[usize]) -> Result<StepStats> {
        let mut tape = Tape::new();
        let params = self.model.bind(&mut tape, true);
        let (task_var, task_loss) = if self.config.task_weight == 0.0 {
            (tape.leaf(Tensor::scalar(0.0)), 0.0)
        } else {
            let (x, labels) = self.train.batch(batch);
            let x = tape.leaf(x);
            let logits = self.model.forward(&mut tape, &params, x)?;
            let ce = tape.softmax_cross_entropy(logits, &labels)?;
            let ce_value = tape.value(ce).item();
            let weighted = if self.config.task_weight == 1.0 {
                ce
            } else {
                tape.scalar_mul(ce, self.config.task_weight)
            };
            (weighted, ce_value)
        };
        let (objective, report) = total_loss(&mut tape, task_var, &params, &self.plan)?;
        let stats = StepStats {
            objective: tape.value(objective).item(),
            task_loss,
            penalty: report.total,
        };
        if !stats.objective.is_finite() {
            return Ok(stats);
        }
        tape.backward(objective)?;
        let (lr, momentum) = (self.config.lr, self.config.momentum);
        for (name, var) in &params {
            let Some(vel) = self.velocity.get_mut(name) else {
                continue;
            };
            let Some(grad) = tape.grad(*var) else {
                continue;
            };
            let param = self.model.params.get_mut(name).expect("bound parameter");
            sgd_step(param.data_mut(), grad, vel, lr, momentum)?;
        }
        Ok(stats)
    }

    /// Top-1 accuracy on the held-out split.
    pub fn evaluate(&self) -> Result<f64> {
        if self.test.is_empty() {
            return Ok(0.0);
        }
        let bs = 64;
        let batches = self.test.len().div_ceil(bs);
        let correct: Vec<Result<usize>> = Exec::Parallel.map(batches, |b| {
            let idx: Vec<usize> = (b * bs..((b + 1) * bs).min(self.test.len())).collect();
            let (x, labels) = self.test.batch(&idx);
            let mut tape = Tape::with_exec(Exec::Sequential);
            let params = self.model.bind(&mut tape, false);
            let x = tape.leaf(x);
            let logits = self.model.forward(&mut tape, &params, x)?;
            let k = tape.shape(logits)[1];
            let hits = tape
                .value(logits)
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            Ok(hits)
        });
        let mut total = 0;
        for c in correct {
            total += c?;
        }
        Ok(total as f64 / self.test.len() as f64)
    }

    pub fn penalty_report(&self) -> Result<PenaltyReport> {
        penalty_report(&self.model.params, &self.plan, Exec::Parallel)
    }

    fn epoch_order(&mut self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.shuffle);
        order
    }

    /// Runs every epoch and returns the report.
    pub fn run(&mut self) -> Result<RunReport> {
        let start = Instant::now();
        let initial_acc = self.evaluate()?;
        let mut epochs = Vec::with_capacity(self.config.epochs);
        for epoch in 1..=self.config.epochs {
            let order = self.epoch_order();
            let (mut loss, mut task, mut pen, mut steps) = (0.0, 0.0, 0.0, 0usize);
            for (step, batch) in order.chunks(self.config.batch_size).enumerate() {
                let s = self.step(batch)?;
                if !s.objective.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        loss: s.objective,
                    });
                }
                loss += s.objective;
                task += s.task_loss;
                pen += s.penalty;
                steps += 1;
            }
            let report = self.penalty_report()?;
            let steps = steps.max(1) as f64;
            epochs.push(EpochMetrics {
                epoch,
                loss: loss / steps,
                task_loss: task / steps,
                penalty: pen / steps,
                acc: self.evaluate()?,
                mean_dev: report.mean_group_deviation(),
                layer_mean_dev: report.layer_means(),
            });
        }
        Ok(RunReport {
            config: self.config.clone(),
            initial_acc,
            epochs,
            final_penalty: self.penalty_report()?,
            timing: Timing {
                wall_clock_seconds: start.elapsed().as_secs_f64(),
            },
        })
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Builds the catalog model for `config` and trains it.
pub fn train(config: &TrainConfig) -> Result<(RunReport, Model)> {
    let mut t = Trainer::new(config.clone())?;
    let report = t.run()?;
    Ok((report, t.model))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub size: usize,
    pub deviation: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthoReport {
    pub penalty: PenaltyReport,
    pub groups: BTreeMap<String, Vec<GroupSummary>>,
}

impl OrthoReport {
    pub fn mean_group_deviation(&self) -> f64 {
        self.penalty.mean_group_deviation()
    }
}

/// Deviation and Gram spectrum of every in-scope group.
pub fn ortho_report(params: &BTreeMap<String, Tensor>, plan: &RegPlan) -> Result<OrthoReport> {
    let penalty = penalty_report(params, plan, Exec::Parallel)?;
    let mut groups = BTreeMap::new();
    for layer in &plan.layers {
        let w = layer.target.role.view(&params[&layer.target.param])?;
        let (c_in, c_out) = w.dims2("ortho_report")?;
        let full = DMatrix::from_row_slice(c_in, c_out, w.data());
        let devs = &penalty.layers[&layer.target.layer].groups;
        let summaries = layer
            .partition
            .groups
            .iter()
            .zip(devs)
            .map(|(idx, &deviation)| {
                let wg = full.select_columns(idx);
                let eig = SymmetricEigen::new(wg.transpose() * &wg).eigenvalues;
                GroupSummary {
                    size: idx.len(),
                    deviation,
                    min_eigenvalue: eig.min(),
                    max_eigenvalue: eig.max(),
                }
            })
            .collect();
        groups.insert(layer.target.layer.clone(), summaries);
    }
    Ok(OrthoReport { penalty, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{adapter_probe, LayerKind, LayerSpec};
    use crate::regularizer::Scope;

    #[test]
    fn sgd_examples() {
        let mut p = [1.0, -2.0];
        let mut v = [0.0; 2];
        sgd_step(&mut p, &[0.5, 1.0], &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p, [1.0 - 0.05, -2.0 - 0.1]);

        let mut p = [3.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[0.0], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p, [3.0]);

        // f(w) = w², w0 = 1
        let mut w = [1.0];
        let mut v = [0.0];
        let g = [2.0 * w[0]];
        sgd_step(&mut w, &g, &mut v, 0.1, 0.9).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15);
        let g = [2.0 * w[0]];
        sgd_step(&mut w, &g, &mut v, 0.1, 0.9).unwrap();
        assert!((w[0] - 0.46).abs() < 1e-15);

        assert!(sgd_step(&mut [0.0; 2], &[0.0], &mut [0.0; 2], 0.1, 0.0).is_err());
    }

    #[test]
    fn dataset_split_and_determinism() {
        let spec = DatasetSpec::default();
        let (tr, te) = make_synthetic_dataset(&spec, &[3, 8, 8], 5).unwrap();
        assert_eq!((tr.len(), te.len()), (480, 120));
        let (tr2, te2) = make_synthetic_dataset(&spec, &[3, 8, 8], 5).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
        let (tr3, _) = make_synthetic_dataset(&spec, &[3, 8, 8], 6).unwrap();
        assert_ne!(tr, tr3);
    }

    #[test]
    fn noiseless_samples_equal_templates() {
        let spec = DatasetSpec {
            sigma: 0.0,
            samples_per_class: 10,
            ..Default::default()
        };
        let (tr, te) = make_synthetic_dataset(&spec, &[4], 1).unwrap();
        for c in 0..3 {
            let first = tr.sample(c * 8);
            assert!(first.iter().all(|v| (0.0..1.0).contains(v)));
            for i in 0..8 {
                assert_eq!(tr.sample(c * 8 + i), first);
            }
            for i in 0..2 {
                assert_eq!(te.sample(c * 2 + i), first);
            }
        }
    }

    #[test]
    fn noiseless_data_is_learned() {
        let config = TrainConfig {
            model: "mlp-small".into(),
            epochs: 5,
            lr: 0.05,
            reg: RegConfig {
                lambda: 0.0,
                ..Default::default()
            },
            data: DatasetSpec {
                sigma: 0.0,
                samples_per_class: 50,
                ..Default::default()
            },
            ..Default::default()
        };
        let (report, _) = train(&config).unwrap();
        assert_eq!(report.final_epoch().acc, 1.0);
    }

    #[test]
    fn frozen_run_keeps_parameters() {
        let config = TrainConfig {
            epochs: 1,
            lr: 0.0,
            data: DatasetSpec {
                samples_per_class: 20,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut t = Trainer::new(config).unwrap();
        let before = t.model.params.clone();
        let report = t.run().unwrap();
        assert_eq!(t.model.params, before);
        assert_eq!(report.final_epoch().acc, report.initial_acc);
    }

    #[test]
    fn divergence_is_reported() {
        let config = TrainConfig {
            model: "mlp-small".into(),
            epochs: 3,
            lr: 1e6,
            momentum: 0.0,
            reg: RegConfig {
                lambda: 1.0,
                scope: Scope::All,
                ..Default::default()
            },
            data: DatasetSpec {
                samples_per_class: 20,
                ..Default::default()
            },
            ..Default::default()
        };
        match train(&config) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.0.epochs.len())),
        }
    }

    #[test]
    fn zero_init_adapter_up_deviation_is_group_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = adapter_probe(64, 4, 3, &mut rng).unwrap();
        let cfg = RegConfig {
            requested_n: 4,
            scope: Scope::AdapterUpOnly,
            ..Default::default()
        };
        let plan = RegPlan::for_model(&m, &cfg).unwrap();
        let r = ortho_report(&m.params, &plan).unwrap();
        let groups = &r.groups["adapter"];
        assert_eq!(groups.len(), 4);
        for g in groups {
            assert_eq!(g.size, 16);
            assert_eq!(g.deviation, 16.0);
            assert_eq!(g.max_eigenvalue, 0.0);
        }
    }

    #[test]
    fn orthonormal_layer_has_zero_deviation() {
        // columns of a 6x6 permutation scaled by ±1 are orthonormal
        let mut w = Tensor::zeros(&[6, 6]);
        for (j, i) in [3, 0, 5, 1, 4, 2].into_iter().enumerate() {
            w.data_mut()[i * 6 + j] = if j % 2 == 0 { 1.0 } else { -1.0 };
        }
        let mut m = Model::build(
            "one",
            &[6],
            vec![LayerSpec::new("fc", LayerKind::Linear { d_in: 6, d_out: 6 })],
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        m.params.insert("fc.weight".into(), w);
        let cfg = RegConfig {
            requested_n: 1,
            scope: Scope::All,
            ..Default::default()
        };
        let plan = RegPlan::for_model(&m, &cfg).unwrap();
        let r = ortho_report(&m.params, &plan).unwrap();
        assert!(r.penalty.total < 1e-12);
        let g = &r.groups["fc"][0];
        assert!((g.min_eigenvalue - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_header() {
        let config = TrainConfig {
            model: "mlp-small".into(),
            epochs: 2,
            data: DatasetSpec {
                samples_per_class: 10,
                ..Default::default()
            },
            ..Default::default()
        };
        let (report, _) = train(&config).unwrap();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,loss,task_loss,penalty,acc,mean_dev"));
        assert_eq!(lines.count(), 2);
    }
}
