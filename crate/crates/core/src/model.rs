//! Trainable architectures and the neuron ↔ parameter-slice map.
//!
//! A neuron is a dense output unit or a conv output filter. Each neuron owns
//! one axis-0 row of its layer's weight tensor plus one bias element, so the
//! neuron slices partition the parameter vector.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradSkip, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::neq::FreezeMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    /// Index among the trainable layers.
    pub layer: usize,
    /// Output unit or filter within that layer.
    pub unit: usize,
}

impl NeuronId {
    pub fn new(layer: usize, unit: usize) -> Self {
        Self { layer, unit }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.unit)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv { in_channels: usize, out_channels: usize },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn is_trainable(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv { .. })
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub spec: LayerSpec,
    /// Per-sample input shape.
    pub in_shape: Vec<usize>,
    /// Per-sample output shape.
    pub out_shape: Vec<usize>,
    /// Indices of (weight, bias) in the model's parameter list.
    params: Option<(usize, usize)>,
}

impl Layer {
    pub fn param_indices(&self) -> Option<(usize, usize)> {
        self.params
    }

    /// Neurons in this layer (0 for relu/flatten).
    pub fn width(&self) -> usize {
        match self.spec {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv { out_channels, .. } => out_channels,
            _ => 0,
        }
    }

    /// Output elements per sample belonging to one neuron.
    pub fn positions(&self) -> usize {
        match self.spec {
            LayerSpec::Conv { .. } => self.out_shape[1] * self.out_shape[2],
            _ => 1,
        }
    }
}

/// Declarative architecture, as written in a run config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelSpec {
    Mlp(Vec<usize>),
    Cnn {
        input: [usize; 3],
        conv: Vec<usize>,
        tail: Vec<usize>,
    },
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<Model> {
        match self {
            ModelSpec::Mlp(sizes) => Model::mlp(sizes, seed),
            ModelSpec::Cnn { input, conv, tail } => Model::cnn(*input, conv, tail, seed),
        }
    }

    /// Flat feature count the model expects per sample.
    pub fn input_len(&self) -> usize {
        match self {
            ModelSpec::Mlp(sizes) => sizes.first().copied().unwrap_or(0),
            ModelSpec::Cnn { input, .. } => input.iter().product(),
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::Mlp(sizes) => write!(f, "mlp{{{}}}", join(sizes)),
            ModelSpec::Cnn { input, conv, tail } => write!(
                f,
                "cnn{{{}x{}x{};{};{}}}",
                input[0],
                input[1],
                input[2],
                join(conv),
                join(tail)
            ),
        }
    }
}

fn parse_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

impl FromStr for ModelSpec {
    type Err = String;

    /// `mlp{64,32,10}` or `cnn{CxHxW;filters,...;tail,...}`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        let (kind, body) = s
            .split_once('{')
            .and_then(|(k, rest)| rest.strip_suffix('}').map(|b| (k.trim(), b)))
            .ok_or_else(|| format!("expected `mlp{{...}}` or `cnn{{...}}`, got `{s}`"))?;
        match kind {
            "mlp" => Ok(ModelSpec::Mlp(parse_list(body)?)),
            "cnn" => {
                let parts: Vec<&str> = body.split(';').collect();
                let [input, conv, tail] = parts.as_slice() else {
                    return Err(format!("cnn needs `CxHxW;conv;tail`, got `{body}`"));
                };
                let dims: Vec<usize> = input
                    .split('x')
                    .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
                    .collect::<std::result::Result<_, _>>()?;
                let [c, h, w] = dims.as_slice() else {
                    return Err(format!("cnn input must be CxHxW, got `{input}`"));
                };
                Ok(ModelSpec::Cnn {
                    input: [*c, *h, *w],
                    conv: parse_list(conv)?,
                    tail: parse_list(tail)?,
                })
            }
            other => Err(format!("unknown model kind `{other}`")),
        }
    }
}

/// Contiguous range inside one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRange {
    pub param: usize,
    pub start: usize,
    pub end: usize,
}

impl ParamRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// The parameters owned by one neuron: its weight row and its bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamSlice {
    pub weight: ParamRange,
    pub bias: ParamRange,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positions in the flattened parameter vector.
    pub fn global_indices<'a>(&self, offsets: &'a [usize]) -> impl Iterator<Item = usize> + 'a {
        let w = self.weight;
        let b = self.bias;
        (w.start..w.end)
            .map(move |i| offsets[w.param] + i)
            .chain((b.start..b.end).map(move |i| offsets[b.param] + i))
    }
}

/// Nodes of one forward pass that later stages need.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: NodeId,
    /// Leaf node of every parameter tensor, in model order.
    pub params: Vec<NodeId>,
    /// Post-activation output node of each trainable layer.
    pub neuron_outputs: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: Vec<Tensor>,
    trainable: Vec<usize>,
}

impl Model {
    /// Builds and initializes a model from an explicit layer list.
    pub fn from_specs(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Model> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Model(format!("invalid input shape {input_shape:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        let mut params = Vec::new();
        let mut trainable = Vec::new();
        for (pos, spec) in specs.iter().enumerate() {
            let in_shape = shape.clone();
            let (out_shape, new_params) = match *spec {
                LayerSpec::Dense { inputs, outputs } => {
                    if inputs == 0 || outputs == 0 {
                        return Err(Error::Model(format!("layer {pos}: dense sizes must be positive")));
                    }
                    if in_shape != [inputs] {
                        return Err(Error::Model(format!(
                            "layer {pos}: dense expects input [{inputs}], got {in_shape:?}"
                        )));
                    }
                    let w = uniform_init(&mut rng, &[outputs, inputs], inputs, outputs)?;
                    (vec![outputs], Some((w, Tensor::zeros(&[outputs])?)))
                }
                LayerSpec::Conv { in_channels, out_channels } => {
                    if in_channels == 0 || out_channels == 0 {
                        return Err(Error::Model(format!("layer {pos}: conv channels must be positive")));
                    }
                    let [c, h, w] = in_shape.as_slice() else {
                        return Err(Error::Model(format!(
                            "layer {pos}: conv expects [C,H,W] input, got {in_shape:?}"
                        )));
                    };
                    if *c != in_channels {
                        return Err(Error::Model(format!(
                            "layer {pos}: conv expects {in_channels} channels, got {c}"
                        )));
                    }
                    if *h < 3 || *w < 3 {
                        return Err(Error::Model(format!(
                            "layer {pos}: spatial underflow, {h}x{w} input is smaller than a 3x3 kernel"
                        )));
                    }
                    let k = uniform_init(
                        &mut rng,
                        &[out_channels, in_channels, 3, 3],
                        in_channels * 9,
                        out_channels * 9,
                    )?;
                    (
                        vec![out_channels, h - 2, w - 2],
                        Some((k, Tensor::zeros(&[out_channels])?)),
                    )
                }
                LayerSpec::Relu => (in_shape.clone(), None),
                LayerSpec::Flatten => (vec![in_shape.iter().product()], None),
            };
            let param_idx = new_params.map(|(w, b)| {
                params.push(w.with_grad());
                params.push(b.with_grad());
                trainable.push(pos);
                (params.len() - 2, params.len() - 1)
            });
            shape = out_shape.clone();
            layers.push(Layer {
                spec: *spec,
                in_shape,
                out_shape,
                params: param_idx,
            });
        }
        Ok(Model {
            input_shape: input_shape.to_vec(),
            layers,
            params,
            trainable,
        })
    }

    /// dense→relu chain over `sizes`, final dense without relu.
    pub fn mlp(sizes: &[usize], seed: u64) -> Result<Model> {
        if sizes.len() < 2 {
            return Err(Error::Model(format!("an MLP needs at least 2 sizes, got {sizes:?}")));
        }
        if sizes.contains(&0) {
            return Err(Error::Model(format!("MLP sizes must be positive, got {sizes:?}")));
        }
        Model::from_specs(&[sizes[0]], &dense_chain(sizes), seed)
    }

    /// conv→relu blocks, flatten, then a dense tail ending in the class
    /// logits. With no conv blocks this is an MLP on the flattened input.
    pub fn cnn(input: [usize; 3], conv: &[usize], tail: &[usize], seed: u64) -> Result<Model> {
        if tail.is_empty() {
            return Err(Error::Model("cnn needs at least one dense tail size".into()));
        }
        let mut specs = Vec::new();
        let (mut ch, mut h, mut w) = (input[0], input[1], input[2]);
        for (i, &filters) in conv.iter().enumerate() {
            if h < 3 || w < 3 {
                return Err(Error::Model(format!(
                    "conv block {i}: spatial underflow, {h}x{w} input is smaller than a 3x3 kernel"
                )));
            }
            specs.push(LayerSpec::Conv {
                in_channels: ch,
                out_channels: filters,
            });
            specs.push(LayerSpec::Relu);
            ch = filters;
            h -= 2;
            w -= 2;
        }
        specs.push(LayerSpec::Flatten);
        let mut sizes = vec![ch * h * w];
        sizes.extend_from_slice(tail);
        if sizes.contains(&0) {
            return Err(Error::Model(format!("cnn sizes must be positive, got {sizes:?}")));
        }
        specs.extend(dense_chain(&sizes));
        Model::from_specs(&input, &specs, seed)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.layers
            .last()
            .map_or(self.input_len(), |l| l.out_shape.iter().product())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Start of each parameter tensor in the flattened parameter vector.
    pub fn param_offsets(&self) -> Vec<usize> {
        self.params
            .iter()
            .scan(0, |acc, p| {
                let start = *acc;
                *acc += p.len();
                Some(start)
            })
            .collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    /// Layer positions of the trainable layers, in order.
    pub fn trainable_positions(&self) -> &[usize] {
        &self.trainable
    }

    pub fn trainable_layer(&self, index: usize) -> Option<&Layer> {
        self.trainable.get(index).map(|&p| &self.layers[p])
    }

    /// Every neuron, layer-major then unit order.
    pub fn neurons(&self) -> Vec<NeuronId> {
        self.trainable
            .iter()
            .enumerate()
            .flat_map(|(li, &pos)| (0..self.layers[pos].width()).map(move |u| NeuronId::new(li, u)))
            .collect()
    }

    pub fn neuron_count(&self) -> usize {
        self.trainable.iter().map(|&p| self.layers[p].width()).sum()
    }

    pub fn neuron_params(&self, id: NeuronId) -> Result<ParamSlice> {
        let layer = self
            .trainable_layer(id.layer)
            .ok_or_else(|| Error::Index(format!("no trainable layer {}", id.layer)))?;
        if id.unit >= layer.width() {
            return Err(Error::Index(format!(
                "neuron {id} out of range, layer has {} units",
                layer.width()
            )));
        }
        let (wi, bi) = layer.params.expect("trainable layer has params");
        let row = self.params[wi].row_len();
        Ok(ParamSlice {
            weight: ParamRange {
                param: wi,
                start: id.unit * row,
                end: (id.unit + 1) * row,
            },
            bias: ParamRange {
                param: bi,
                start: id.unit,
                end: id.unit + 1,
            },
        })
    }

    /// Per-parameter gate: `true` where the owning neuron is not frozen.
    pub fn active_params(&self, mask: &FreezeMask) -> Vec<bool> {
        let mut active = vec![true; self.param_count()];
        let offsets = self.param_offsets();
        for id in mask.frozen() {
            if let Ok(slice) = self.neuron_params(*id) {
                for i in slice.global_indices(&offsets) {
                    active[i] = false;
                }
            }
        }
        active
    }

    /// Records a forward pass over `batch` samples of flat features.
    /// With `track_grad` false the parameter leaves carry no gradient.
    pub fn forward(&self, g: &mut Graph, inputs: &[f64], batch: usize, track_grad: bool) -> Result<ForwardPass> {
        if batch == 0 || inputs.len() != batch * self.input_len() {
            return Err(Error::Dimension(format!(
                "model expects {batch} x {} input features, got {} values",
                self.input_len(),
                inputs.len()
            )));
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.input_shape);
        let mut x = g.leaf(Tensor::new(&shape, inputs.to_vec())?);

        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.clone();
                t.set_requires_grad(track_grad);
                t.clear_grad();
                g.leaf(t)
            })
            .collect();

        let mut outputs = Vec::with_capacity(self.trainable.len());
        for (pos, layer) in self.layers.iter().enumerate() {
            x = match layer.spec {
                LayerSpec::Dense { .. } => {
                    let (wi, bi) = layer.params.expect("dense has params");
                    g.linear(x, params[wi], params[bi])?
                }
                LayerSpec::Conv { .. } => {
                    let (wi, bi) = layer.params.expect("conv has params");
                    let y = g.conv2d(x, params[wi])?;
                    g.channel_bias(y, params[bi])?
                }
                LayerSpec::Relu => g.relu(x)?,
                LayerSpec::Flatten => {
                    let n = layer.out_shape[0];
                    g.reshape(x, &[batch, n])?
                }
            };
            if layer.spec.is_trainable() {
                outputs.push(x);
            } else if pos > 0 && matches!(layer.spec, LayerSpec::Relu) && self.layers[pos - 1].spec.is_trainable() {
                *outputs.last_mut().expect("relu follows a trainable layer") = x;
            }
        }
        Ok(ForwardPass {
            logits: x,
            params,
            neuron_outputs: outputs,
        })
    }

    /// Row-level gradient skip for every frozen neuron.
    pub fn grad_skip(&self, mask: &FreezeMask, pass: &ForwardPass) -> GradSkip {
        let mut skip = GradSkip::none();
        for id in mask.frozen() {
            if let Some(layer) = self.trainable_layer(id.layer) {
                let (wi, bi) = layer.params.expect("trainable layer has params");
                let rows = layer.width();
                if id.unit < rows {
                    skip.skip_row(pass.params[wi], id.unit, rows);
                    skip.skip_row(pass.params[bi], id.unit, rows);
                }
            }
        }
        skip
    }

    /// Parameter gradients of the last backward, flattened in model order.
    pub fn flat_grads(&self, g: &Graph, pass: &ForwardPass) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (node, p) in pass.params.iter().zip(&self.params) {
            match g.grad(*node) {
                Some(gr) => out.extend_from_slice(gr),
                None => out.extend(std::iter::repeat_n(0.0, p.len())),
            }
        }
        out
    }

    /// Class scores for `batch` samples, without recording gradients.
    pub fn logits(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, inputs, batch, false)?;
        Ok(g.value(pass.logits).data().to_vec())
    }

    /// Fraction of samples whose arg-max logit equals the label.
    pub fn accuracy(&self, inputs: &[f64], labels: &[usize]) -> Result<f64> {
        const CHUNK: usize = 256;
        if labels.is_empty() {
            return Ok(0.0);
        }
        let d = self.input_len();
        let k = self.output_len();
        let mut correct = 0usize;
        for (xs, ys) in inputs.chunks(CHUNK * d).zip(labels.chunks(CHUNK)) {
            let logits = self.logits(xs, ys.len())?;
            correct += logits
                .chunks(k)
                .zip(ys)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
        }
        Ok(correct as f64 / labels.len() as f64)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn dense_chain(sizes: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for (i, pair) in sizes.windows(2).enumerate() {
        specs.push(LayerSpec::Dense {
            inputs: pair[0],
            outputs: pair[1],
        });
        if i + 2 < sizes.len() {
            specs.push(LayerSpec::Relu);
        }
    }
    specs
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}
