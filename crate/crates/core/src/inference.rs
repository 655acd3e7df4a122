//! Forward execution, optionally under a concern map and a channeled head.

use crate::concern::ConcernMap;
use crate::error::{Error, Result};
use crate::graph::{LayerInput, LayerKind, ModelGraph};
use crate::modularizer::ChanneledHead;
use crate::tensor::{self, Tensor};

/// Output of every layer for one input, indexed by layer position.
///
/// Convolution and dense entries hold pre-activation values; the ReLU layer
/// that follows them holds the post-activation values.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    outputs: Vec<Tensor>,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn layer(&self, index: usize) -> &Tensor {
        &self.outputs[index]
    }

    pub fn outputs(&self) -> &[Tensor] {
        &self.outputs
    }

    pub fn pre_activation(&self, index: usize) -> &Tensor {
        &self.outputs[index]
    }

    /// Output of the ReLU directly consuming `index`, if there is one.
    pub fn post_activation(&self, model: &ModelGraph, index: usize) -> Option<&Tensor> {
        model
            .consumers(index)
            .into_iter()
            .find(|&c| matches!(model.layer(c).kind, LayerKind::ReLU))
            .map(|c| &self.outputs[c])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Inputs to the final softmax.
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub trace: ActivationTrace,
}

/// A concern map resolved into per-layer boolean masks for fast execution.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    positional: Vec<Option<Vec<bool>>>,
    dense_out: Vec<Option<Vec<bool>>>,
    dense_in: Vec<Option<Vec<bool>>>,
}

impl MaskPlan {
    pub fn compile(model: &ModelGraph, map: &ConcernMap) -> Result<Self> {
        map.validate(model)?;
        let n = model.len();
        let mut positional = vec![None; n];
        let mut dense_out = vec![None; n];
        let mut dense_in = vec![None; n];
        for (layer, set) in map.positional_entries() {
            if set.is_empty() {
                continue;
            }
            let mut mask = vec![false; model.output_len(layer)];
            set.iter().for_each(|&p| mask[p] = true);
            positional[layer] = Some(mask);
        }
        for (layer, set) in map.dense_entries() {
            if set.is_empty() {
                continue;
            }
            let mut mask = vec![false; model.output_len(layer)];
            set.iter().for_each(|&p| mask[p] = true);
            dense_out[layer] = Some(mask);
        }
        let chain = model.dense_chain();
        let mut consumers_in_order = chain.hidden.clone();
        consumers_in_order.push(chain.head);
        for pair in consumers_in_order.windows(2) {
            dense_in[pair[1]] = dense_out[pair[0]].clone();
        }
        Ok(MaskPlan { positional, dense_out, dense_in })
    }

    pub fn empty(model: &ModelGraph) -> Self {
        let n = model.len();
        MaskPlan { positional: vec![None; n], dense_out: vec![None; n], dense_in: vec![None; n] }
    }
}

pub fn forward(model: &ModelGraph, input: &Tensor) -> Result<Prediction> {
    execute(model, input, None, None)
}

/// Runs `model` with every position listed in `map` forced to zero, and
/// `head` (when given) in place of the final dense layer.
pub fn masked_forward(
    model: &ModelGraph,
    map: &ConcernMap,
    head: Option<&ChanneledHead>,
    input: &Tensor,
) -> Result<Prediction> {
    let plan = MaskPlan::compile(model, map)?;
    execute(model, input, Some(&plan), head)
}

pub fn execute(
    model: &ModelGraph,
    input: &Tensor,
    plan: Option<&MaskPlan>,
    head: Option<&ChanneledHead>,
) -> Result<Prediction> {
    if input.shape() != model.input_shape() {
        return Err(Error::InputShapeMismatch(format!(
            "model expects {:?}, got {:?}",
            model.input_shape(),
            input.shape()
        )));
    }
    let head_index = model.head_index();
    let mut outputs: Vec<Tensor> = Vec::with_capacity(model.len());
    for (i, layer) in model.layers().iter().enumerate() {
        let arg = |n: usize| match layer.inputs[n] {
            LayerInput::Model => input,
            LayerInput::Layer(r) => &outputs[r],
        };
        let mut out = match &layer.kind {
            LayerKind::Conv2D(p) => tensor::conv2d(arg(0), p)?,
            LayerKind::Dense { weights, bias } => {
                let in_mask = plan.and_then(|p| p.dense_in[i].as_deref());
                let out_mask = plan.and_then(|p| p.dense_out[i].as_deref());
                match head {
                    Some(h) if i == head_index => tensor::dense_masked(arg(0), &h.weights, &h.bias, in_mask, None)?,
                    _ => tensor::dense_masked(arg(0), weights, bias, in_mask, out_mask)?,
                }
            }
            LayerKind::Flatten => tensor::flatten(arg(0)),
            LayerKind::Pool { size, mode } => tensor::pool2d(arg(0), *size, *mode)?,
            LayerKind::Add => tensor::add(arg(0), arg(1))?,
            LayerKind::ReLU => tensor::relu(arg(0)),
            LayerKind::Softmax => tensor::softmax(arg(0)),
        };
        if let Some(mask) = plan.and_then(|p| p.positional[i].as_deref()) {
            for (v, &off) in out.data_mut().iter_mut().zip(mask) {
                if off {
                    *v = 0.0;
                }
            }
        }
        outputs.push(out);
    }
    let probabilities = outputs.last().expect("validated non-empty").clone();
    let logits = outputs[head_index].clone();
    Ok(Prediction { logits, probabilities, trace: ActivationTrace { outputs } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LayerSpec;

    #[test]
    fn dense_softmax_model_returns_softmax_of_input() {
        use LayerInput::{Layer, Model};
        let layers = vec![
            LayerSpec::after(LayerKind::Flatten, Model),
            LayerSpec::after(
                LayerKind::Dense {
                    weights: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                    bias: Tensor::zeros(&[2]).unwrap(),
                },
                Layer(0),
            ),
            LayerSpec::after(LayerKind::Softmax, Layer(1)),
        ];
        let model = ModelGraph::new("id", [1, 1, 2], layers).unwrap();
        let x = Tensor::new(vec![1, 1, 2], vec![0.25, -1.5]).unwrap();
        let p = forward(&model, &x).unwrap();
        let expected = tensor::softmax(&Tensor::vector(vec![0.25, -1.5]).unwrap());
        assert_eq!(p.probabilities, expected);
        assert_eq!(p.logits.data(), &[0.25, -1.5]);
        assert_eq!(p.trace.len(), 3);
        assert!(forward(&model, &Tensor::zeros(&[2, 1, 1]).unwrap()).is_err());
    }
}
