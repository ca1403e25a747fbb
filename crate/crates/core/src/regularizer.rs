//! Model-level GOR: config, per-layer group plans, the combined objective
//! and the penalty report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grouping::{effective_groups, GroupPartition, PartitionMode};
use crate::nn::{Bindings, LayerKind, Model, RegTarget, WeightRole};
use crate::penalty::layer_penalty_fused;
use crate::tensor::Tensor;

/// Which layers the penalty applies to.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// Every convolution kernel.
    #[default]
    AllConv,
    /// Only adapter up-projections.
    AdapterUpOnly,
    /// Every regularizable layer: conv, linear and adapter up-projections.
    All,
    /// Exactly these layer names.
    Names(Vec<String>),
}

impl Scope {
    pub fn includes(&self, target: &RegTarget) -> bool {
        match self {
            Scope::AllConv => target.role == WeightRole::Conv,
            Scope::AdapterUpOnly => target.role == WeightRole::AdapterUp,
            Scope::All => true,
            Scope::Names(names) => names.contains(&target.layer),
        }
    }

    /// `all-conv`, `adapter-up-only`, `all`, or a comma-separated name list.
    pub fn parse(s: &str) -> Self {
        match s {
            "all-conv" => Scope::AllConv,
            "adapter-up-only" => Scope::AdapterUpOnly,
            "all" => Scope::All,
            names => Scope::Names(names.split(',').map(|n| n.trim().to_string()).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    pub lambda: f64,
    pub requested_n: usize,
    pub mode: PartitionMode,
    pub scope: Scope,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            requested_n: 32,
            mode: PartitionMode::Inter,
            scope: Scope::AllConv,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.requested_n == 0 {
            return Err(Error::config("requested group count must be >= 1"));
        }
        Ok(())
    }
}

/// One in-scope layer with its frozen partition.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedLayer {
    pub target: RegTarget,
    pub partition: GroupPartition,
}

/// Per-layer partitions resolved once, before training starts.
#[derive(Clone, Debug, PartialEq)]
pub struct RegPlan {
    pub lambda: f64,
    pub layers: Vec<PlannedLayer>,
    pub warnings: Vec<String>,
}

impl RegPlan {
    pub fn for_model(model: &Model, config: &RegConfig) -> Result<Self> {
        Self::from_targets(model.reg_targets(), config)
    }

    pub fn from_targets(targets: Vec<RegTarget>, config: &RegConfig) -> Result<Self> {
        config.validate()?;
        let mut warnings = Vec::new();
        let mut layers = Vec::new();
        for target in targets.into_iter().filter(|t| config.scope.includes(t)) {
            let n = effective_groups(config.requested_n, target.c_out);
            let partition = GroupPartition::new(config.mode, n, target.c_out)?;
            let sizes = partition.groups.iter().map(Vec::len);
            if sizes.clone().any(|g| g == 1) {
                warnings.push(format!(
                    "layer {}: singleton groups only normalize, they cannot orthogonalize",
                    target.layer
                ));
            }
            layers.push(PlannedLayer { target, partition });
        }
        if layers.is_empty() {
            warnings.push(format!("scope {:?} matched no regularizable layer", config.scope));
        }
        Ok(Self {
            lambda: config.lambda,
            layers,
            warnings,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub groups: Vec<f64>,
    pub sum: f64,
}

/// Per-layer, per-group deviations `‖W_iᵀW_i − I‖_F²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyReport {
    pub layers: BTreeMap<String, LayerReport>,
    pub total: f64,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl PenaltyReport {
    fn new(plan: &RegPlan) -> Self {
        Self {
            layers: BTreeMap::new(),
            total: 0.0,
            lambda: plan.lambda,
            warnings: plan.warnings.clone(),
        }
    }

    fn push(&mut self, layer: &str, groups: Vec<f64>, sum: f64) {
        self.layers
            .insert(layer.to_string(), LayerReport { groups, sum });
    }

    fn finish(mut self, plan: &RegPlan) -> Self {
        // sum in plan order, matching the objective
        self.total = plan
            .layers
            .iter()
            .map(|l| self.layers[&l.target.layer].sum)
            .sum();
        self
    }

    /// Mean group deviation of each layer.
    pub fn layer_means(&self) -> BTreeMap<String, f64> {
        self.layers
            .iter()
            .map(|(k, l)| (k.clone(), l.groups.iter().sum::<f64>() / l.groups.len() as f64))
            .collect()
    }

    /// Mean deviation over every group of every layer.
    pub fn mean_group_deviation(&self) -> f64 {
        let (sum, n) = self
            .layers
            .values()
            .flat_map(|l| &l.groups)
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// `task_loss + λ·Σ_layers Σ_groups ‖W_iᵀW_i − I‖_F²` on the tape. The
/// report is built from the same forward evaluation that feeds the scalar.
pub fn total_loss(
    tape: &mut Tape,
    task_loss: Var,
    params: &Bindings,
    plan: &RegPlan,
) -> Result<(Var, PenaltyReport)> {
    let mut report = PenaltyReport::new(plan);
    let mut penalty: Option<Var> = None;
    for layer in &plan.layers {
        let w = layer.target.role.view_on_tape(tape, params[&layer.target.param])?;
        let (p, values) = tape.group_penalties(w, &layer.partition)?;
        report.push(&layer.target.layer, values.per_group, values.total);
        penalty = Some(match penalty {
            Some(acc) => tape.add(acc, p)?,
            None => p,
        });
    }
    let report = report.finish(plan);
    let total = match penalty {
        Some(p) if plan.lambda != 0.0 => {
            let scaled = tape.scalar_mul(p, plan.lambda);
            tape.add(task_loss, scaled)?
        }
        _ => task_loss,
    };
    Ok((total, report))
}

/// Penalty report for plain parameter tensors, no tape involved.
pub fn penalty_report(
    params: &BTreeMap<String, Tensor>,
    plan: &RegPlan,
    exec: Exec,
) -> Result<PenaltyReport> {
    let mut report = PenaltyReport::new(plan);
    for layer in &plan.layers {
        let param = params.get(&layer.target.param).ok_or_else(|| {
            Error::config(format!("missing parameter {}", layer.target.param))
        })?;
        let w = layer.target.role.view(param)?;
        let eval = layer_penalty_fused(&w, &layer.partition, exec, false)?;
        report.push(&layer.target.layer, eval.per_group, eval.total);
    }
    Ok(report.finish(plan))
}

/// Whether a conv layer's regularization groups each feed exactly one
/// normalization group of the groupnorm layer consuming its output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GnAlignment {
    pub conv: String,
    pub groupnorm: String,
    pub aligned: bool,
}

pub fn gn_alignment(model: &Model, plan: &RegPlan) -> Vec<GnAlignment> {
    let mut out = Vec::new();
    for pair in model.layers.windows(2) {
        let (LayerKind::Conv2d { .. }, LayerKind::Groupnorm { channels, groups }) =
            (&pair[0].kind, &pair[1].kind)
        else {
            continue;
        };
        let Some(planned) = plan.layers.iter().find(|l| l.target.layer == pair[0].name) else {
            continue;
        };
        let block = channels / groups;
        let aligned = planned.partition.groups.iter().all(|g| {
            let first = g[0] / block;
            g.iter().all(|&c| c / block == first)
        });
        out.push(GnAlignment {
            conv: pair[0].name.clone(),
            groupnorm: pair[1].name.clone(),
            aligned,
        });
    }
    out
}
