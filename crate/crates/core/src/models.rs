//! MLP components and checkpoint persistence.
//!
//! A model is a set of named components: the feature extractor `g`, the
//! label classifier `f`, the domain discriminator `d` and, once pseudo
//! labelling starts, the pseudo-label predictor `h_p`. The feature extractor
//! applies ReLU to its output as well, so the composition `f(g(x))` is itself
//! a plain MLP and `h_p` can hold an exact copy of it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const FEATURES: &str = "g";
pub const CLASSIFIER: &str = "f";
pub const DISCRIMINATOR: &str = "d";
pub const PSEUDO_PREDICTOR: &str = "h_p";

pub const CHECKPOINT_FORMAT: &str = "dartlab-ckpt-v1";

/// Layer widths of one MLP, input first, output last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        let spec = MlpSpec { widths };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least two widths, got {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("zero width in {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// Widths of the three trainable components.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub g: MlpSpec,
    pub f: MlpSpec,
    pub d: MlpSpec,
}

impl Architecture {
    /// `g = [input, 32, 16]`, `f = [16, classes]`, `d = [16, 16, 1]`.
    pub fn desk_default(input: usize, classes: usize) -> Self {
        Architecture {
            g: MlpSpec {
                widths: vec![input, 32, 16],
            },
            f: MlpSpec {
                widths: vec![16, classes],
            },
            d: MlpSpec {
                widths: vec![16, 16, 1],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.g.validate()?;
        self.f.validate()?;
        self.d.validate()?;
        let feat = self.g.output_width();
        if self.f.input_width() != feat {
            return Err(Error::Config(format!(
                "classifier input {} does not match feature width {feat}",
                self.f.input_width()
            )));
        }
        if self.d.input_width() != feat {
            return Err(Error::Config(format!(
                "discriminator input {} does not match feature width {feat}",
                self.d.input_width()
            )));
        }
        if self.d.output_width() != 1 {
            return Err(Error::Config(format!(
                "discriminator must emit one logit, got {}",
                self.d.output_width()
            )));
        }
        Ok(())
    }
}

/// One affine layer: `y = x W + b` with `W` shaped `[in x out]` and `b` `[1 x out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Whether a component passes its final layer through ReLU.
fn relu_on_output(component: &str) -> bool {
    component == FEATURES
}

/// Named parameter collection. Also used to hold gradients of the same shape.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    components: BTreeMap<String, Vec<Layer>>,
}

/// Graph handles of a component's weights and biases.
#[derive(Debug, Clone)]
pub struct BoundComponent {
    name: String,
    layers: Vec<(NodeId, NodeId)>,
}

/// Graph handles for several components, in the order they were bound.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    components: Vec<BoundComponent>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Option<&BoundComponent> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn component(&self, name: &str) -> Result<&BoundComponent> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("component {name} is not bound")))
    }

    /// Gradients of `loss` for every bound parameter, as a `ModelParams` of the same shapes.
    pub fn gradients(&self, graph: &Graph, loss: NodeId) -> Result<ModelParams> {
        let ids: Vec<NodeId> = self
            .components
            .iter()
            .flat_map(|c| c.layers.iter().flat_map(|&(w, b)| [w, b]))
            .collect();
        let mut grads = graph.backward(loss, &ids)?.into_iter();
        let mut out = ModelParams::default();
        for c in &self.components {
            let layers = c
                .layers
                .iter()
                .map(|_| {
                    let weight = grads.next().expect("one gradient per id");
                    let bias = grads.next().expect("one gradient per id");
                    Layer { weight, bias }
                })
                .collect();
            out.components.insert(c.name.clone(), layers);
        }
        Ok(out)
    }
}

impl BoundComponent {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Applies the component to `x`, recording every step on `graph`.
    pub fn forward(&self, graph: &mut Graph, x: NodeId) -> Result<NodeId> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let in_width = graph.value(w).shape()[0];
            let x_width = graph.value(h).cols();
            if graph.value(h).shape().len() != 2 || x_width != in_width {
                return Err(Error::shape(
                    "forward",
                    format!(
                        "{} layer {i} expects width {in_width}, got {:?}",
                        self.name,
                        graph.value(h).shape()
                    ),
                ));
            }
            h = graph.affine(h, w, b)?;
            if i < last || relu_on_output(&self.name) {
                h = graph.relu(h)?;
            }
        }
        Ok(h)
    }
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, layers: Vec<Layer>) {
        self.components.insert(name.into(), layers);
    }

    pub fn get(&self, name: &str) -> Option<&[Layer]> {
        self.components.get(name).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<Layer>> {
        self.components.get_mut(name)
    }

    pub fn layers(&self, name: &str) -> Result<&[Layer]> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("model has no component {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.components.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Vec<Layer>> {
        self.components.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.components.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Layer])> {
        self.components
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Vec<Layer>)> {
        self.components.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self
            .layers(CLASSIFIER)?
            .last()
            .map(Layer::fan_out)
            .unwrap_or(0))
    }

    pub fn input_width(&self) -> Result<usize> {
        Ok(self
            .layers(FEATURES)?
            .first()
            .map(Layer::fan_in)
            .unwrap_or(0))
    }

    /// Registers the named components' tensors as parameters of `graph`.
    pub fn bind(&self, graph: &mut Graph, names: &[&str]) -> Result<BoundParams> {
        self.bind_as(graph, names, true)
    }

    /// Registers the named components as constants (no gradient wanted).
    pub fn bind_frozen(&self, graph: &mut Graph, names: &[&str]) -> Result<BoundParams> {
        self.bind_as(graph, names, false)
    }

    fn bind_as(&self, graph: &mut Graph, names: &[&str], trainable: bool) -> Result<BoundParams> {
        let mut out = BoundParams::default();
        for &name in names {
            let layers = self.layers(name)?;
            let bound = layers
                .iter()
                .map(|l| {
                    if trainable {
                        (graph.param(l.weight.clone()), graph.param(l.bias.clone()))
                    } else {
                        (
                            graph.constant(l.weight.clone()),
                            graph.constant(l.bias.clone()),
                        )
                    }
                })
                .collect();
            out.components.push(BoundComponent {
                name: name.to_string(),
                layers: bound,
            });
        }
        Ok(out)
    }

    /// Evaluates one component on `x` outside of any training graph.
    pub fn forward(&self, component: &str, x: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let bound = self.bind_frozen(&mut graph, &[component])?;
        let xi = graph.constant(x.clone());
        let out = bound.component(component)?.forward(&mut graph, xi)?;
        Ok(graph.value(out).clone())
    }

    /// Logits of the composed classifier `f(g(x))`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let bound = self.bind_frozen(&mut graph, &[FEATURES, CLASSIFIER])?;
        let xi = graph.constant(x.clone());
        let feats = bound.component(FEATURES)?.forward(&mut graph, xi)?;
        let out = bound.component(CLASSIFIER)?.forward(&mut graph, feats)?;
        Ok(graph.value(out).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    /// Sets `h_p` to the concatenation of the `g` and `f` layers.
    pub fn copy_classifier_to_pseudo_predictor(&mut self) -> Result<()> {
        let mut layers = self.layers(FEATURES)?.to_vec();
        layers.extend_from_slice(self.layers(CLASSIFIER)?);
        self.components.insert(PSEUDO_PREDICTOR.to_string(), layers);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.components
            .values()
            .flatten()
            .all(|l| l.weight.all_finite() && l.bias.all_finite())
    }

    /// Checks the shape invariants between components.
    pub fn validate(&self) -> Result<()> {
        for (name, layers) in &self.components {
            if layers.is_empty() {
                return Err(Error::Checkpoint(format!("component {name} has no layers")));
            }
            for (i, l) in layers.iter().enumerate() {
                if l.weight.shape().len() != 2 || l.bias.shape() != [1, l.fan_out()] {
                    return Err(Error::Checkpoint(format!(
                        "{name} layer {i}: weight {:?} / bias {:?}",
                        l.weight.shape(),
                        l.bias.shape()
                    )));
                }
                if i > 0 && layers[i - 1].fan_out() != l.fan_in() {
                    return Err(Error::Checkpoint(format!(
                        "{name} layer {i} expects width {}, previous layer emits {}",
                        l.fan_in(),
                        layers[i - 1].fan_out()
                    )));
                }
            }
        }
        if let (Some(g), Some(f)) = (self.get(FEATURES), self.get(CLASSIFIER)) {
            let feat = g.last().map(Layer::fan_out);
            if f.first().map(Layer::fan_in) != feat {
                return Err(Error::Checkpoint("f does not consume g's output".into()));
            }
            if let Some(d) = self.get(DISCRIMINATOR) {
                if d.first().map(Layer::fan_in) != feat || d.last().map(Layer::fan_out) != Some(1) {
                    return Err(Error::Checkpoint(
                        "d must consume g's output and emit one logit".into(),
                    ));
                }
            }
            if let Some(hp) = self.get(PSEUDO_PREDICTOR) {
                let shapes = |ls: &[Layer]| -> Vec<Vec<usize>> {
                    ls.iter().map(|l| l.weight.shape().to_vec()).collect()
                };
                let mut expected = shapes(g);
                expected.extend(shapes(f));
                if shapes(hp) != expected {
                    return Err(Error::Checkpoint("h_p shapes differ from g then f".into()));
                }
            }
        }
        Ok(())
    }

    /// `self += scale * other` over the components present in `other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (name, layers) in &other.components {
            if let Some(mine) = self.components.get_mut(name) {
                for (m, o) in mine.iter_mut().zip(layers) {
                    for (a, b) in m.weight.data_mut().iter_mut().zip(o.weight.data()) {
                        *a += scale * b;
                    }
                    for (a, b) in m.bias.data_mut().iter_mut().zip(o.bias.data()) {
                        *a += scale * b;
                    }
                }
            }
        }
    }

    /// Largest absolute difference over shared components.
    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        let mut worst: f64 = 0.0;
        for (name, layers) in &self.components {
            if let Some(o) = other.components.get(name) {
                for (a, b) in layers.iter().zip(o) {
                    worst = worst
                        .max(a.weight.max_abs_diff(&b.weight))
                        .max(a.bias.max_abs_diff(&b.bias));
                }
            }
        }
        worst
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let doc = CheckpointDoc::from_params(self);
        let bytes = serde_json::to_vec(&doc)?;
        write_atomic(path, &bytes)
    }

    pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint_str(&text)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<ModelParams> {
        let doc: CheckpointDoc =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        doc.into_params()
    }
}

/// Uniform Glorot initialization of `g`, `f`, `d`; biases start at zero.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    for (name, spec) in [
        (FEATURES, &arch.g),
        (CLASSIFIER, &arch.f),
        (DISCRIMINATOR, &arch.d),
    ] {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                Layer {
                    weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized"),
                    bias: Tensor::zeros(&[1, fan_out]),
                }
            })
            .collect();
        params.insert(name, layers);
    }
    Ok(params)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    components: BTreeMap<String, Vec<CheckpointTensor>>,
}

impl CheckpointDoc {
    fn from_params(params: &ModelParams) -> Self {
        let components = params
            .components
            .iter()
            .map(|(name, layers)| {
                let tensors = layers
                    .iter()
                    .flat_map(|l| [&l.weight, &l.bias])
                    .map(|t| CheckpointTensor {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    })
                    .collect();
                (name.clone(), tensors)
            })
            .collect();
        CheckpointDoc {
            format: CHECKPOINT_FORMAT.to_string(),
            components,
        }
    }

    fn into_params(self) -> Result<ModelParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown format {:?}",
                self.format
            )));
        }
        let mut params = ModelParams::new();
        for (name, tensors) in self.components {
            if tensors.len() % 2 != 0 {
                return Err(Error::Checkpoint(format!(
                    "component {name} has an odd number of tensors"
                )));
            }
            let mut it = tensors.into_iter().map(|t| {
                let expected: usize = t.shape.iter().product();
                if expected != t.data.len() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?} needs {expected} values, found {}",
                        t.shape,
                        t.data.len()
                    )));
                }
                if t.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Checkpoint(format!("{name}: non-finite value")));
                }
                Tensor::new(t.shape, t.data)
            });
            let mut layers = Vec::new();
            while let Some(weight) = it.next() {
                let bias = it.next().expect("even count")?;
                layers.push(Layer {
                    weight: weight?,
                    bias,
                });
            }
            params.insert(name, layers);
        }
        params.validate()?;
        Ok(params)
    }
}
