//! Affine+activation model zoo: frozen-backbone large model, small client
//! models, hidden-feature taps and bridging matrices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{KoalaError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn params(&self) -> u64 {
        (self.in_dim * self.out_dim + self.out_dim) as u64
    }

    /// Multiply-adds count as two FLOPs; each ReLU output counts as one.
    pub fn flops(&self) -> u64 {
        let affine = 2 * (self.in_dim * self.out_dim) as u64;
        match self.activation {
            Activation::Relu => affine + self.out_dim as u64,
            Activation::None => affine,
        }
    }
}

/// Layer stack with an adapter boundary and a hidden-feature tap.
///
/// Layers at or after `adapter_start` form the adapter (classifier head).
/// `hidden_tap` names the layer whose activation output is the hidden feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub adapter_start: usize,
    pub hidden_tap: usize,
}

impl ModelSpec {
    /// ReLU hidden layers followed by a single linear classifier, which is the adapter.
    /// The hidden tap is the last hidden layer.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        if hidden.is_empty() {
            return Err(KoalaError::InvalidSpec(
                "at least one hidden layer is required".into(),
            ));
        }
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &w in hidden {
            layers.push(LayerSpec::new(prev, w, Activation::Relu));
            prev = w;
        }
        layers.push(LayerSpec::new(prev, classes, Activation::None));
        let spec = Self {
            adapter_start: hidden.len(),
            hidden_tap: hidden.len() - 1,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KoalaError::InvalidSpec(m));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return bad(format!("layer {k} has a zero dimension"));
            }
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return bad(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    k + 1,
                    pair[1].in_dim
                ));
            }
        }
        if !(self.hidden_tap < self.adapter_start && self.adapter_start <= self.layers.len()) {
            return bad(format!(
                "need hidden_tap < adapter_start <= {}, got {} and {}",
                self.layers.len(),
                self.hidden_tap,
                self.adapter_start
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[self.hidden_tap].out_dim
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(LayerSpec::params).sum()
    }

    pub fn adapter_params(&self) -> u64 {
        self.layers[self.adapter_start..]
            .iter()
            .map(LayerSpec::params)
            .sum()
    }

    /// Per-sample FLOPs of one forward pass.
    pub fn flops(&self) -> u64 {
        self.layers.iter().map(LayerSpec::flops).sum()
    }
}

/// Weight `(in_dim, out_dim)` and bias `(out_dim)` of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    spec: ModelSpec,
    layers: Vec<Layer<S>>,
    frozen: Vec<bool>,
}

fn uniform_weight<S: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::of(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("dims are positive")
}

/// Weights drawn from `uniform(-1/sqrt(in), 1/sqrt(in))`, zero biases, nothing frozen.
pub fn init_model<S: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<S>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layers
        .iter()
        .map(|l| Layer {
            weight: uniform_weight(l.in_dim, l.out_dim, &mut rng),
            bias: Tensor::zeros(&[l.out_dim]),
        })
        .collect();
    Ok(Model {
        spec: spec.clone(),
        frozen: vec![false; spec.layers.len()],
        layers,
    })
}

/// Parameter counts of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: u64,
    pub trainable: u64,
}

pub fn count_params<S: Scalar>(model: &Model<S>) -> ParamCount {
    let trainable = model
        .spec
        .layers
        .iter()
        .zip(&model.frozen)
        .filter(|(_, &f)| !f)
        .map(|(l, _)| l.params())
        .sum();
    ParamCount {
        total: model.spec.total_params(),
        trainable,
    }
}

/// Per-sample FLOPs of one forward pass for inputs of width `input_dim`.
pub fn count_flops<S: Scalar>(model: &Model<S>, input_dim: usize) -> Result<u64> {
    if input_dim != model.spec.input_dim() {
        return Err(KoalaError::InvalidArgument(format!(
            "input dim {input_dim} does not match model input {}",
            model.spec.input_dim()
        )));
    }
    Ok(model.spec.flops())
}

fn apply_activation<S: Scalar>(t: Tensor<S>, act: Activation) -> Tensor<S> {
    match act {
        Activation::Relu => t.relu(),
        Activation::None => t,
    }
}

impl<S: Scalar> Model<S> {
    /// Assembles a model from explicit parameters.
    pub fn from_parts(spec: ModelSpec, layers: Vec<Layer<S>>, frozen: Vec<bool>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layers.len() || frozen.len() != spec.layers.len() {
            return Err(KoalaError::InvalidSpec(
                "layer count does not match spec".into(),
            ));
        }
        for (k, (l, s)) in layers.iter().zip(&spec.layers).enumerate() {
            if l.weight.shape() != [s.in_dim, s.out_dim] || l.bias.shape() != [s.out_dim] {
                return Err(KoalaError::InvalidSpec(format!(
                    "layer {k} parameter shapes {:?}/{:?} do not match spec",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
        }
        Ok(Self {
            spec,
            layers,
            frozen,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn frozen_mask(&self) -> &[bool] {
        &self.frozen
    }

    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    /// Freezes every layer before the adapter and unfreezes the adapter.
    pub fn freeze_backbone(&mut self) {
        let start = self.spec.adapter_start;
        for (k, f) in self.frozen.iter_mut().enumerate() {
            *f = k < start;
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = false);
    }

    /// Re-draws the adapter layers from `seed`, leaving the backbone as is.
    pub fn reinit_adapter(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in self.spec.adapter_start..self.layers.len() {
            let l = self.spec.layers[k];
            self.layers[k] = Layer {
                weight: uniform_weight(l.in_dim, l.out_dim, &mut rng),
                bias: Tensor::zeros(&[l.out_dim]),
            };
        }
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            spec: self.spec.clone(),
            frozen: self.frozen.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        if x.ndim() != 2 || x.cols() != self.spec.input_dim() {
            return Err(KoalaError::ShapeMismatch {
                op: "forward",
                left: x.shape().to_vec(),
                right: vec![self.spec.input_dim()],
            });
        }
        Ok(())
    }

    /// Applies layers `from..` to `h`.
    pub fn forward_from(&self, from: usize, h: &Tensor<S>) -> Result<Tensor<S>> {
        let mut h = h.clone();
        for k in from..self.layers.len() {
            let l = &self.layers[k];
            h = apply_activation(h.matmul(&l.weight)?.add_bias(&l.bias)?, self.spec.layers[k].activation);
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x)?;
        self.forward_from(0, x)
    }

    /// Activation output of the hidden-tap layer.
    pub fn forward_hidden(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.forward_with_hidden(x)?.0)
    }

    /// `(hidden, logits)` in one pass.
    pub fn forward_with_hidden(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        self.check_input(x)?;
        let hidden = self.forward_prefix(x, self.spec.hidden_tap + 1)?;
        let logits = self.forward_from(self.spec.hidden_tap + 1, &hidden)?;
        Ok((hidden, logits))
    }

    /// Output of the first `n` layers.
    pub fn forward_prefix(&self, x: &Tensor<S>, n: usize) -> Result<Tensor<S>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for k in 0..n.min(self.layers.len()) {
            let l = &self.layers[k];
            h = apply_activation(h.matmul(&l.weight)?.add_bias(&l.bias)?, self.spec.layers[k].activation);
        }
        Ok(h)
    }

    /// Registers the parameters on `graph`. Frozen layers, and every layer when
    /// `trainable` is false, become constants.
    pub fn bind(&self, graph: &mut Graph<S>, trainable: bool) -> BoundModel {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut trainable_layers = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            let learn = trainable && !self.frozen[k];
            let (w, b) = if learn {
                trainable_layers.push(k);
                (graph.param(l.weight.clone()), graph.param(l.bias.clone()))
            } else {
                (graph.constant(l.weight.clone()), graph.constant(l.bias.clone()))
            };
            layers.push((w, b));
        }
        BoundModel {
            layers,
            activations: self.spec.layers.iter().map(|l| l.activation).collect(),
            trainable_layers,
            hidden_tap: self.spec.hidden_tap,
            classes: self.spec.classes(),
        }
    }

    /// Mutable references to trainable tensors, in [`BoundModel::param_vars`] order.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let frozen = &self.frozen;
        self.layers
            .iter_mut()
            .zip(frozen)
            .filter(|(_, &f)| !f)
            .flat_map(|(l, _)| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Flat copy of every parameter in layer order (weights then bias).
    pub fn flat_params(&self) -> Vec<S> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
            .collect()
    }

    /// Flat copy of the backbone parameters (layers before the adapter).
    pub fn backbone_params(&self) -> Vec<S> {
        self.layers[..self.spec.adapter_start]
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
            .collect()
    }
}

/// Graph handles for a model's parameters.
#[derive(Debug, Clone)]
pub struct BoundModel {
    layers: Vec<(Var, Var)>,
    activations: Vec<Activation>,
    trainable_layers: Vec<usize>,
    hidden_tap: usize,
    classes: usize,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub hidden: Var,
    pub logits: Var,
}

impl BoundModel {
    pub fn forward<S: Scalar>(&self, graph: &mut Graph<S>, x: Var) -> Result<ForwardVars> {
        let mut h = x;
        let mut hidden = None;
        for (k, (&(w, b), act)) in self.layers.iter().zip(&self.activations).enumerate() {
            let z = graph.matmul(h, w)?;
            let z = graph.add_bias(z, b)?;
            h = match act {
                Activation::Relu => graph.relu(z),
                Activation::None => z,
            };
            if k == self.hidden_tap {
                hidden = Some(h);
            }
        }
        Ok(ForwardVars {
            hidden: hidden.expect("hidden_tap < layer count"),
            logits: h,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Trainable parameter nodes, weight then bias per trainable layer.
    pub fn param_vars(&self) -> Vec<Var> {
        self.trainable_layers
            .iter()
            .flat_map(|&k| [self.layers[k].0, self.layers[k].1])
            .collect()
    }

    /// Every parameter node, trainable or not.
    pub fn all_vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Gradients of `vars`, zero-filled where backward never reached a node.
pub fn collect_grads<S: Scalar>(graph: &Graph<S>, vars: &[Var]) -> Vec<Tensor<S>> {
    vars.iter()
        .map(|&v| {
            graph
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
        })
        .collect()
}

/// Linear map from a small model's hidden features to the large model's.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgingMatrix<S> {
    pub matrix: Tensor<S>,
    pub owner: usize,
}

impl<S: Scalar> BridgingMatrix<S> {
    /// Initialized like a layer weight with fan-in `small_dim`.
    pub fn new(owner: usize, small_dim: usize, large_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            matrix: uniform_weight(small_dim, large_dim, &mut rng),
            owner,
        }
    }

    /// Checks that this matrix maps `small`'s tap width to `large`'s.
    pub fn check_dims(&self, small: &ModelSpec, large: &ModelSpec) -> Result<()> {
        if self.matrix.shape() != [small.hidden_dim(), large.hidden_dim()] {
            return Err(KoalaError::ShapeMismatch {
                op: "bridging_matrix",
                left: self.matrix.shape().to_vec(),
                right: vec![small.hidden_dim(), large.hidden_dim()],
            });
        }
        Ok(())
    }
}

/// Default toy zoo: a 4-layer large model and small models with one hidden layer.
pub mod zoo {
    use super::*;

    pub const LARGE_HIDDEN: [usize; 3] = [256, 256, 128];
    pub const HOMO_HIDDEN: [usize; 1] = [32];
    pub const HETE_HIDDEN: [usize; 5] = [48, 40, 32, 24, 16];

    pub fn large(input_dim: usize, classes: usize) -> ModelSpec {
        ModelSpec::mlp(input_dim, &LARGE_HIDDEN, classes).expect("valid zoo spec")
    }

    pub fn homo(input_dim: usize, classes: usize) -> ModelSpec {
        ModelSpec::mlp(input_dim, &HOMO_HIDDEN, classes).expect("valid zoo spec")
    }

    pub fn hete(input_dim: usize, classes: usize) -> Vec<ModelSpec> {
        HETE_HIDDEN
            .iter()
            .map(|&w| ModelSpec::mlp(input_dim, &[w], classes).expect("valid zoo spec"))
            .collect()
    }
}
