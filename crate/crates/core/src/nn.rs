//! Small composable layers and the reference model catalog.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grouping::{flatten_kernel, flatten_kernel_tensor};
use crate::tensor::Tensor;

pub const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Linear {
        d_in: usize,
        d_out: usize,
    },
    Conv2d {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Groupnorm {
        channels: usize,
        groups: usize,
    },
    Relu,
    GlobalAvgPool,
    /// Frozen `d_out×d_in` base plus a trainable rank-`rank` residual
    /// `scale · up · down`.
    Adapter {
        d_in: usize,
        d_out: usize,
        rank: usize,
        scale: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub trainable: bool,
}

impl LayerSpec {
    pub fn new(name: &str, kind: LayerKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            trainable: true,
        }
    }
}

/// Which parameter of a layer carries the regularized filters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRole {
    /// `C_out×c×h×w` kernel, flattened to `(c·h·w)×C_out`.
    Conv,
    /// `d_in×d_out` weight, already in filter-column form.
    Linear,
    /// `d_out×r` up-projection, viewed as `r×d_out`.
    AdapterUp,
}

impl WeightRole {
    pub fn param_suffix(self) -> &'static str {
        match self {
            WeightRole::Conv | WeightRole::Linear => "weight",
            WeightRole::AdapterUp => "up",
        }
    }

    /// `C_in×C_out` filter matrix of `param`.
    pub fn view(self, param: &Tensor) -> Result<Tensor> {
        match self {
            WeightRole::Conv => flatten_kernel_tensor(param),
            WeightRole::Linear => {
                param.dims2("linear view")?;
                Ok(param.clone().with_grad(false))
            }
            WeightRole::AdapterUp => param.transposed(),
        }
    }

    /// Same as [`WeightRole::view`] on the tape, so gradients reach `param`.
    pub fn view_on_tape(self, tape: &mut Tape, param: Var) -> Result<Var> {
        match self {
            WeightRole::Conv => flatten_kernel(tape, param),
            WeightRole::Linear => Ok(param),
            WeightRole::AdapterUp => tape.transpose(param),
        }
    }
}

/// A layer whose weight can be regularized.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegTarget {
    pub layer: String,
    pub role: WeightRole,
    pub param: String,
    pub c_in: usize,
    pub c_out: usize,
}

impl RegTarget {
    fn from_param(layer: &str, role: WeightRole, tensor: &Tensor) -> Result<Self> {
        let (c_in, c_out) = role.view(tensor)?.dims2("regularized view")?;
        Ok(Self {
            layer: layer.to_string(),
            role,
            param: format!("{layer}.{}", role.param_suffix()),
            c_in,
            c_out,
        })
    }
}

/// Regularizable targets recovered from parameter names alone:
/// `<layer>.weight` of rank 4 is a conv kernel, of rank 2 a linear weight,
/// and `<layer>.up` an adapter up-projection.
pub fn targets_from_params(params: &BTreeMap<String, Tensor>) -> Result<Vec<RegTarget>> {
    let mut out = Vec::new();
    for (name, t) in params {
        let Some((layer, suffix)) = name.rsplit_once('.') else {
            continue;
        };
        let role = match (suffix, t.rank()) {
            ("weight", 4) => WeightRole::Conv,
            ("weight", 2) => WeightRole::Linear,
            ("up", 2) => WeightRole::AdapterUp,
            _ => continue,
        };
        out.push(RegTarget::from_param(layer, role, t)?);
    }
    Ok(out)
}

/// Layer adapter as a standalone value: `W₀x + scale·up·(down·x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer {
    pub base: Tensor,
    pub down: Tensor,
    pub up: Tensor,
    pub scale: f64,
}

impl AdapterLayer {
    /// Frozen base as given; `down ~ U(±1/√d_in)`, `up = 0`, `scale = 1`.
    pub fn init<R: Rng + ?Sized>(base: Tensor, rank: usize, rng: &mut R) -> Result<Self> {
        let (d_out, d_in) = base.dims2("adapter")?;
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::config(format!(
                "adapter rank {rank} must be in 1..={}",
                d_in.min(d_out)
            )));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            base,
            down: Tensor::uniform(&[rank, d_in], -bound, bound, rng),
            up: Tensor::zeros(&[d_out, rank]),
            scale: 1.0,
        })
    }

    /// Binds the layer on `tape`: base frozen, up/down trainable.
    pub fn bind(&self, tape: &mut Tape) -> (Var, Var, Var) {
        let base = tape.leaf(self.base.clone().with_grad(false));
        let down = tape.leaf(self.down.clone().with_grad(true));
        let up = tape.leaf(self.up.clone().with_grad(true));
        (base, down, up)
    }
}

/// `x[B×d_in]` through an adapter whose parameters are already on the tape.
pub fn adapter_forward(
    tape: &mut Tape,
    x: Var,
    base: Var,
    down: Var,
    up: Var,
    scale: f64,
) -> Result<Var> {
    let base_t = tape.transpose(base)?;
    let frozen = tape.matmul(x, base_t)?;
    let down_t = tape.transpose(down)?;
    let h = tape.matmul(x, down_t)?;
    let up_t = tape.transpose(up)?;
    let r = tape.matmul(h, up_t)?;
    let r = tape.scalar_mul(r, scale);
    tape.add(frozen, r)
}

/// Parameter handles of a model bound onto one tape.
pub type Bindings = BTreeMap<String, Var>;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub name: String,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub params: BTreeMap<String, Tensor>,
    pub frozen: BTreeSet<String>,
}

fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

impl Model {
    /// Shape-checks the layer chain and initializes parameters.
    pub fn build<R: Rng + ?Sized>(
        name: &str,
        input_shape: &[usize],
        layers: Vec<LayerSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for l in &layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::config(format!("duplicate layer name {:?}", l.name)));
            }
        }
        let mut params = BTreeMap::new();
        let mut frozen = BTreeSet::new();
        let mut shape = input_shape.to_vec();
        for l in &layers {
            let n = &l.name;
            let numel: usize = shape.iter().product();
            let bad = |what: String| Error::shape("model", format!("layer {n:?}: {what}"));
            shape = match l.kind {
                LayerKind::Linear { d_in, d_out } => {
                    if numel != d_in {
                        return Err(bad(format!("expects {d_in} inputs, got {shape:?}")));
                    }
                    params.insert(format!("{n}.weight"), kaiming(&[d_in, d_out], d_in, rng));
                    params.insert(format!("{n}.bias"), Tensor::zeros(&[d_out]));
                    vec![d_out]
                }
                LayerKind::Conv2d {
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    padding,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(bad(format!("expects c×H×W input, got {shape:?}")));
                    };
                    if c != c_in || stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(bad(format!("cannot convolve {shape:?}")));
                    }
                    let fan_in = c_in * kernel * kernel;
                    params.insert(
                        format!("{n}.weight"),
                        kaiming(&[c_out, c_in, kernel, kernel], fan_in, rng),
                    );
                    params.insert(format!("{n}.bias"), Tensor::zeros(&[c_out]));
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w + 2 * padding - kernel) / stride + 1;
                    vec![c_out, oh, ow]
                }
                LayerKind::Groupnorm { channels, groups } => {
                    if shape.first() != Some(&channels) {
                        return Err(bad(format!("expects {channels} channels, got {shape:?}")));
                    }
                    if groups == 0 || channels % groups != 0 {
                        return Err(bad(format!("{groups} groups do not divide {channels} channels")));
                    }
                    params.insert(format!("{n}.gamma"), Tensor::filled(&[channels], 1.0));
                    params.insert(format!("{n}.beta"), Tensor::zeros(&[channels]));
                    shape
                }
                LayerKind::Relu => shape,
                LayerKind::GlobalAvgPool => {
                    if shape.len() < 2 {
                        return Err(bad(format!("needs spatial input, got {shape:?}")));
                    }
                    vec![shape[0]]
                }
                LayerKind::Adapter {
                    d_in, d_out, rank, ..
                } => {
                    if numel != d_in {
                        return Err(bad(format!("expects {d_in} inputs, got {shape:?}")));
                    }
                    let base = kaiming(&[d_out, d_in], d_in, rng);
                    let a = AdapterLayer::init(base, rank, rng)?;
                    params.insert(format!("{n}.base"), a.base);
                    params.insert(format!("{n}.down"), a.down);
                    params.insert(format!("{n}.up"), a.up);
                    frozen.insert(format!("{n}.base"));
                    vec![d_out]
                }
            };
        }
        for l in layers.iter().filter(|l| !l.trainable) {
            let prefix = format!("{}.", l.name);
            frozen.extend(params.keys().filter(|k| k.starts_with(&prefix)).cloned());
        }
        Ok(Self {
            name: name.to_string(),
            input_shape: input_shape.to_vec(),
            layers,
            params,
            frozen,
        })
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn is_trainable(&self, param: &str) -> bool {
        !self.frozen.contains(param)
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| self.is_trainable(k))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Puts every parameter on the tape; trainable ones require grad when
    /// `with_grad` is set.
    pub fn bind(&self, tape: &mut Tape, with_grad: bool) -> Bindings {
        self.params
            .iter()
            .map(|(k, t)| {
                let grad = with_grad && self.is_trainable(k);
                (k.clone(), tape.leaf(t.clone().with_grad(grad)))
            })
            .collect()
    }

    /// Replaces parameter values, checking names and shapes.
    pub fn load_params(&mut self, params: BTreeMap<String, Tensor>) -> Result<()> {
        for (k, t) in &self.params {
            match params.get(k) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Format(format!(
                        "parameter {k}: expected shape {:?}, found {:?}",
                        t.shape(),
                        p.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing parameter {k}"))),
            }
        }
        if let Some(extra) = params.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::Format(format!("unexpected parameter {extra}")));
        }
        self.params = params;
        Ok(())
    }

    /// Forward pass of a `B×input_shape` batch; returns the logits.
    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            let n = &l.name;
            let param = |s: &str| p[&format!("{n}.{s}")];
            h = match l.kind {
                LayerKind::Linear { .. } => {
                    let h2 = flatten_batch(tape, h)?;
                    let y = tape.matmul(h2, param("weight"))?;
                    tape.add_row_bias(y, param("bias"))?
                }
                LayerKind::Conv2d {
                    stride, padding, ..
                } => {
                    let y = tape.conv2d(h, param("weight"), stride, padding)?;
                    tape.add_channel_bias(y, param("bias"))?
                }
                LayerKind::Groupnorm { groups, .. } => {
                    tape.group_norm(h, param("gamma"), param("beta"), groups, GN_EPS)?
                }
                LayerKind::Relu => tape.relu(h),
                LayerKind::GlobalAvgPool => tape.global_avg_pool(h)?,
                LayerKind::Adapter { scale, .. } => {
                    let h2 = flatten_batch(tape, h)?;
                    adapter_forward(tape, h2, param("base"), param("down"), param("up"), scale)?
                }
            };
        }
        Ok(h)
    }

    /// Regularizable targets in layer order.
    pub fn reg_targets(&self) -> Vec<RegTarget> {
        self.layers
            .iter()
            .filter_map(|l| {
                let role = regularized_role(l)?;
                let param = &self.params[&format!("{}.{}", l.name, role.param_suffix())];
                RegTarget::from_param(&l.name, role, param).ok()
            })
            .collect()
    }

    /// `C_in×C_out` filter matrix of a layer, or `None` for layers without one.
    pub fn regularized_weight_view(&self, layer: &LayerSpec) -> Option<Tensor> {
        let role = regularized_role(layer)?;
        let param = self.params.get(&format!("{}.{}", layer.name, role.param_suffix()))?;
        role.view(param).ok()
    }
}

/// Role of a layer's regularized weight, if it has one.
pub fn regularized_role(layer: &LayerSpec) -> Option<WeightRole> {
    match layer.kind {
        LayerKind::Conv2d { .. } => Some(WeightRole::Conv),
        LayerKind::Linear { .. } => Some(WeightRole::Linear),
        LayerKind::Adapter { .. } => Some(WeightRole::AdapterUp),
        LayerKind::Groupnorm { .. } | LayerKind::Relu | LayerKind::GlobalAvgPool => None,
    }
}

fn flatten_batch(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() == 2 {
        return Ok(x);
    }
    let b = shape[0];
    tape.reshape(x, &[b, shape[1..].iter().product()])
}

pub const CATALOG: [&str; 3] = ["conv-gn-small", "mlp-small", "adapter-probe"];

/// Builds a catalog model for `n_classes` outputs.
pub fn build_reference_model<R: Rng + ?Sized>(name: &str, n_classes: usize, rng: &mut R) -> Result<Model> {
    use LayerKind::*;
    let conv = |c_in, c_out| Conv2d {
        c_in,
        c_out,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let (input, layers) = match name {
        "conv-gn-small" => (
            vec![3, 8, 8],
            vec![
                LayerSpec::new("conv1", conv(3, 16)),
                LayerSpec::new("gn1", Groupnorm { channels: 16, groups: 4 }),
                LayerSpec::new("relu1", Relu),
                LayerSpec::new("conv2", conv(16, 32)),
                LayerSpec::new("gn2", Groupnorm { channels: 32, groups: 8 }),
                LayerSpec::new("relu2", Relu),
                LayerSpec::new("pool", GlobalAvgPool),
                LayerSpec::new("head", Linear { d_in: 32, d_out: n_classes }),
            ],
        ),
        "mlp-small" => (
            vec![3, 4, 4],
            vec![
                LayerSpec::new("fc1", Linear { d_in: 48, d_out: 64 }),
                LayerSpec::new("relu1", Relu),
                LayerSpec::new("fc2", Linear { d_in: 64, d_out: n_classes }),
            ],
        ),
        "adapter-probe" => return adapter_probe(32, 4, n_classes, rng),
        other => {
            return Err(Error::config(format!(
                "unknown model {other:?} (expected one of {})",
                CATALOG.join(", ")
            )))
        }
    };
    Model::build(name, &input, layers, rng)
}

/// Frozen random `d×d` base with a rank-`rank` adapter, then a linear head.
pub fn adapter_probe<R: Rng + ?Sized>(d: usize, rank: usize, n_classes: usize, rng: &mut R) -> Result<Model> {
    use LayerKind::*;
    Model::build(
        "adapter-probe",
        &[d],
        vec![
            LayerSpec::new(
                "adapter",
                Adapter {
                    d_in: d,
                    d_out: d,
                    rank,
                    scale: 1.0,
                },
            ),
            LayerSpec::new("relu", Relu),
            LayerSpec::new("head", Linear { d_in: d, d_out: n_classes }),
        ],
        rng,
    )
}
