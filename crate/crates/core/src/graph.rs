//! Layer graph of a trained image classifier and the labeled datasets fed
//! through it.

use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{pool_output_shape, ConvParams, PoolMode, Tensor};

/// Where a layer reads its input from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerInput {
    Model,
    Layer(usize),
}

impl fmt::Display for LayerInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerInput::Model => f.write_str("input"),
            LayerInput::Layer(i) => write!(f, "{i}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv2D(ConvParams),
    /// Weights are `[n_in, n_out]`.
    Dense {
        weights: Tensor,
        bias: Tensor,
    },
    Flatten,
    Pool {
        size: usize,
        mode: PoolMode,
    },
    Add,
    ReLU,
    Softmax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2D(_) => "conv2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Flatten => "flatten",
            LayerKind::Pool { mode: PoolMode::Max, .. } => "maxpool",
            LayerKind::Pool { mode: PoolMode::Avg, .. } => "avgpool",
            LayerKind::Add => "add",
            LayerKind::ReLU => "relu",
            LayerKind::Softmax => "softmax",
        }
    }

    fn arity(&self) -> usize {
        if matches!(self, LayerKind::Add) {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub inputs: Vec<LayerInput>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, inputs: Vec<LayerInput>) -> Self {
        LayerSpec { kind, inputs }
    }

    /// A single-input layer reading from `input`.
    pub fn after(kind: LayerKind, input: LayerInput) -> Self {
        LayerSpec { kind, inputs: vec![input] }
    }
}

/// Dense tail of the classifier: `Flatten → (Dense → ReLU)* → Dense → Softmax`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseChain {
    pub flatten: usize,
    pub hidden: Vec<usize>,
    pub head: usize,
}

/// A validated, immutable trained network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    name: String,
    input_shape: [usize; 3],
    class_count: usize,
    layers: Vec<LayerSpec>,
    output_shapes: Vec<Vec<usize>>,
    chain: DenseChain,
    hash: String,
}

impl ModelGraph {
    /// Validates the layer list and rounds all parameters to `f32`.
    pub fn new(name: impl Into<String>, input_shape: [usize; 3], mut layers: Vec<LayerSpec>) -> Result<Self> {
        let name = name.into();
        if layers.is_empty() {
            return Err(Error::Invariant("model has no layers".into()));
        }
        for layer in &mut layers {
            match &mut layer.kind {
                LayerKind::Conv2D(p) => {
                    p.kernel.round_to_f32();
                    p.bias.round_to_f32();
                }
                LayerKind::Dense { weights, bias } => {
                    weights.round_to_f32();
                    bias.round_to_f32();
                }
                _ => {}
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.inputs.len() != layer.kind.arity() {
                return Err(Error::Invariant(format!(
                    "layer {i} ({}) takes {} inputs, got {}",
                    layer.kind.name(),
                    layer.kind.arity(),
                    layer.inputs.len()
                )));
            }
            for input in &layer.inputs {
                if let LayerInput::Layer(r) = *input {
                    if r >= i {
                        return Err(Error::TopologicalOrder { layer: i, reference: r });
                    }
                }
            }
        }
        let output_shapes = infer_shapes(&input_shape, &layers)?;
        let chain = dense_chain(&layers)?;
        let class_count = match &layers[chain.head].kind {
            LayerKind::Dense { weights, .. } => weights.shape()[1],
            _ => unreachable!(),
        };
        let mut model =
            ModelGraph { name, input_shape, class_count, layers, output_shapes, chain, hash: String::new() };
        model.check_activations()?;
        model.hash = hex::encode(Sha256::digest(crate::container::encode_model(&model)));
        Ok(model)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> &LayerSpec {
        &self.layers[index]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn output_shape(&self, index: usize) -> &[usize] {
        &self.output_shapes[index]
    }

    pub fn output_len(&self, index: usize) -> usize {
        self.output_shapes[index].iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn shape_of(&self, input: LayerInput) -> &[usize] {
        match input {
            LayerInput::Model => &self.input_shape,
            LayerInput::Layer(i) => &self.output_shapes[i],
        }
    }

    /// SHA-256 over the canonical serialized form.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn dense_chain(&self) -> &DenseChain {
        &self.chain
    }

    pub fn head_index(&self) -> usize {
        self.chain.head
    }

    pub fn head_params(&self) -> (&Tensor, &Tensor) {
        match &self.layers[self.chain.head].kind {
            LayerKind::Dense { weights, bias } => (weights, bias),
            _ => unreachable!("head is validated to be dense"),
        }
    }

    pub fn conv_indices(&self) -> Vec<usize> {
        self.indices_where(|k| matches!(k, LayerKind::Conv2D(_)))
    }

    /// Layers whose output positions can be masked: convolutions, pooling
    /// and flatten.
    pub fn positional_indices(&self) -> Vec<usize> {
        self.indices_where(|k| matches!(k, LayerKind::Conv2D(_) | LayerKind::Pool { .. } | LayerKind::Flatten))
    }

    fn indices_where(&self, pred: impl Fn(&LayerKind) -> bool) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| pred(&l.kind)).map(|(i, _)| i).collect()
    }

    pub fn consumers(&self, index: usize) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.inputs.contains(&LayerInput::Layer(index)))
            .map(|(i, _)| i)
            .collect()
    }

    /// Every hidden Conv2D/Dense must feed exactly one ReLU, either directly
    /// or through a residual Add whose sole consumer is a ReLU.
    fn check_activations(&self) -> Result<()> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            if i != last && self.consumers(i).is_empty() {
                return Err(Error::Invariant(format!("layer {i} ({}) has no consumer", layer.kind.name())));
            }
            let hidden = match layer.kind {
                LayerKind::Conv2D(_) => true,
                LayerKind::Dense { .. } => i != self.chain.head,
                _ => false,
            };
            if !hidden {
                continue;
            }
            let is_relu = |j: usize| matches!(self.layers[j].kind, LayerKind::ReLU);
            let ok = match self.consumers(i)[..] {
                [j] if is_relu(j) => true,
                [j] if matches!(self.layers[j].kind, LayerKind::Add) => {
                    matches!(self.consumers(j)[..], [k] if is_relu(k))
                }
                _ => false,
            };
            if !ok {
                return Err(Error::Invariant(format!(
                    "hidden layer {i} ({}) must be followed by exactly one ReLU",
                    layer.kind.name()
                )));
            }
        }
        Ok(())
    }
}

fn infer_shapes(input_shape: &[usize; 3], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let src = |n: usize| -> &[usize] {
            match layer.inputs[n] {
                LayerInput::Model => input_shape,
                LayerInput::Layer(r) => &shapes[r],
            }
        };
        let at = |e: Error| Error::Invariant(format!("layer {i} ({}): {e}", layer.kind.name()));
        let shape = match &layer.kind {
            LayerKind::Conv2D(p) => p.geometry(src(0)).map_err(at)?.output_shape().to_vec(),
            LayerKind::Dense { weights, bias } => {
                let ws = weights.shape();
                if ws.len() != 2 || bias.shape() != [ws[1]] || src(0) != [ws[0]] {
                    return Err(at(Error::Shape(format!(
                        "weights {ws:?}, bias {:?}, input {:?}",
                        bias.shape(),
                        src(0)
                    ))));
                }
                vec![ws[1]]
            }
            LayerKind::Flatten => vec![src(0).iter().product()],
            LayerKind::Pool { size, .. } => pool_output_shape(src(0), *size).map_err(at)?.to_vec(),
            LayerKind::Add => {
                if src(0) != src(1) {
                    return Err(at(Error::Shape(format!("{:?} vs {:?}", src(0), src(1)))));
                }
                src(0).to_vec()
            }
            LayerKind::ReLU | LayerKind::Softmax => src(0).to_vec(),
        };
        shapes.push(shape);
    }
    Ok(shapes)
}

fn dense_chain(layers: &[LayerSpec]) -> Result<DenseChain> {
    let bad = |msg: &str| Error::Invariant(format!("classifier tail: {msg}"));
    let last = layers.len() - 1;
    if !matches!(layers[last].kind, LayerKind::Softmax) {
        return Err(bad("final layer must be Softmax"));
    }
    let LayerInput::Layer(head) = layers[last].inputs[0] else {
        return Err(bad("Softmax must follow a Dense layer"));
    };
    if !matches!(layers[head].kind, LayerKind::Dense { .. }) {
        return Err(bad("Softmax must follow a Dense layer"));
    }
    let mut hidden = Vec::new();
    let mut cursor = layers[head].inputs[0];
    loop {
        let LayerInput::Layer(i) = cursor else {
            return Err(bad("dense layers must be preceded by Flatten"));
        };
        match layers[i].kind {
            LayerKind::Flatten => {
                hidden.reverse();
                return Ok(DenseChain { flatten: i, hidden, head });
            }
            LayerKind::ReLU => {
                let LayerInput::Layer(d) = layers[i].inputs[0] else {
                    return Err(bad("ReLU in the dense tail must follow Dense"));
                };
                if !matches!(layers[d].kind, LayerKind::Dense { .. }) {
                    return Err(bad("ReLU in the dense tail must follow Dense"));
                }
                hidden.push(d);
                cursor = layers[d].inputs[0];
            }
            _ => return Err(bad("dense layers must be chained through ReLU back to Flatten")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    name: String,
    split: Split,
    class_count: usize,
    image_shape: [usize; 3],
    images: Vec<Tensor>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        class_count: usize,
        image_shape: [usize; 3],
        images: Vec<Tensor>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dataset(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::Dataset(format!("label {l} at {i} is not below class count {class_count}")));
        }
        if let Some(i) = images.iter().position(|t| t.shape() != image_shape) {
            return Err(Error::Dataset(format!("image {i} has shape {:?}", images[i].shape())));
        }
        let mut images = images;
        images.iter_mut().for_each(Tensor::round_to_f32);
        Ok(LabeledDataset { name: name.into(), split, class_count, image_shape, images, labels })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, index: usize) -> &Tensor {
        &self.images[index]
    }

    /// Indices of examples with `class`, in dataset order.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Padding;

    fn dense(n_in: usize, n_out: usize) -> LayerKind {
        LayerKind::Dense {
            weights: Tensor::from_fn(&[n_in, n_out], |i| (i as f64 * 0.37).sin()).unwrap(),
            bias: Tensor::zeros(&[n_out]).unwrap(),
        }
    }

    fn conv(cin: usize, cout: usize) -> LayerKind {
        LayerKind::Conv2D(
            ConvParams::new(
                Tensor::from_fn(&[3, 3, cin, cout], |i| (i as f64 * 0.11).cos()).unwrap(),
                Tensor::zeros(&[cout]).unwrap(),
                1,
                Padding::With,
            )
            .unwrap(),
        )
    }

    fn residual_layers() -> Vec<LayerSpec> {
        use LayerInput::{Layer, Model};
        vec![
            LayerSpec::after(conv(1, 2), Model),
            LayerSpec::after(LayerKind::ReLU, Layer(0)),
            LayerSpec::after(conv(2, 2), Layer(1)),
            LayerSpec::new(LayerKind::Add, vec![Layer(2), Layer(1)]),
            LayerSpec::after(LayerKind::ReLU, Layer(3)),
            LayerSpec::after(LayerKind::Pool { size: 2, mode: PoolMode::Max }, Layer(4)),
            LayerSpec::after(LayerKind::Flatten, Layer(5)),
            LayerSpec::after(dense(8, 4), Layer(6)),
            LayerSpec::after(LayerKind::ReLU, Layer(7)),
            LayerSpec::after(dense(4, 3), Layer(8)),
            LayerSpec::after(LayerKind::Softmax, Layer(9)),
        ]
    }

    #[test]
    fn residual_graph_validates() {
        let m = ModelGraph::new("r", [4, 4, 1], residual_layers()).unwrap();
        assert_eq!(m.class_count(), 3);
        assert_eq!(m.output_shape(5), &[2, 2, 2]);
        assert_eq!(m.dense_chain(), &DenseChain { flatten: 6, hidden: vec![7], head: 9 });
        assert_eq!(m.conv_indices(), vec![0, 2]);
        assert_eq!(m.positional_indices(), vec![0, 2, 5, 6]);
        assert_eq!(m.hash().len(), 64);
    }

    #[test]
    fn forward_reference_is_rejected() {
        let mut layers = residual_layers();
        layers[3].inputs[1] = LayerInput::Layer(4);
        assert!(matches!(
            ModelGraph::new("r", [4, 4, 1], layers),
            Err(Error::TopologicalOrder { layer: 3, reference: 4 })
        ));
    }

    #[test]
    fn missing_relu_is_rejected() {
        use LayerInput::{Layer, Model};
        let layers = vec![
            LayerSpec::after(conv(1, 2), Model),
            LayerSpec::after(LayerKind::Flatten, Layer(0)),
            LayerSpec::after(dense(32, 3), Layer(1)),
            LayerSpec::after(LayerKind::Softmax, Layer(2)),
        ];
        assert!(matches!(ModelGraph::new("m", [4, 4, 1], layers), Err(Error::Invariant(_))));
    }

    #[test]
    fn missing_softmax_and_bad_shapes() {
        let mut layers = residual_layers();
        layers.pop();
        assert!(ModelGraph::new("m", [4, 4, 1], layers).is_err());
        assert!(ModelGraph::new("m", [4, 4, 2], residual_layers()).is_err());
        assert!(ModelGraph::new("m", [5, 5, 1], residual_layers()).is_err());
    }

    #[test]
    fn dataset_validation() {
        let img = Tensor::zeros(&[2, 2, 1]).unwrap();
        assert!(LabeledDataset::new("d", Split::Train, 2, [2, 2, 1], vec![img.clone()], vec![2]).is_err());
        assert!(LabeledDataset::new("d", Split::Train, 2, [2, 2, 1], vec![img.clone()], vec![]).is_err());
        let ds = LabeledDataset::new("d", Split::Train, 2, [2, 2, 1], vec![img.clone(), img], vec![1, 0]).unwrap();
        assert_eq!(ds.indices_of(1), vec![0]);
        assert_eq!(ds.class_counts(), vec![1, 1]);
    }
}
