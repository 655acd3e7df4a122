//! Concern identification and tangling identification.
//!
//! A [`ConcernMap`] records, per layer, the output positions a module does
//! not use. Observation keeps a position inactive only while its
//! pre-activation value has been `<= 0` for every input seen so far, so a
//! map built from any sequence of inputs is the intersection of the
//! per-input inactive sets. That makes the fold order-insensitive and lets
//! [`observe_all`] reduce partitions in parallel.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{LabeledDataset, LayerKind, ModelGraph};
use crate::inference::{forward, ActivationTrace};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConcernMap {
    /// Conv, pooling and flatten layers: inactive flat output positions.
    pub(crate) conv_inactive: BTreeMap<usize, BTreeSet<usize>>,
    /// Hidden dense layers: inactive node indices.
    pub(crate) dense_inactive: BTreeMap<usize, BTreeSet<usize>>,
    /// Model-input positions reached by backtracking. Recorded, never applied.
    pub(crate) input_inactive: BTreeSet<usize>,
    pub(crate) observed_count: usize,
}

/// Which weight entries of one dense layer a map removes (`true` = removed).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseMask {
    pub layer: usize,
    /// Row-major `[n_in, n_out]`.
    pub weights: Vec<bool>,
    pub bias: Vec<bool>,
}

impl ConcernMap {
    /// The map of a module that keeps everything.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observed_count(&self) -> usize {
        self.observed_count
    }

    pub fn is_initialized(&self) -> bool {
        self.observed_count > 0
    }

    pub fn conv_inactive(&self, layer: usize) -> Option<&BTreeSet<usize>> {
        self.conv_inactive.get(&layer)
    }

    pub fn dense_inactive(&self, layer: usize) -> Option<&BTreeSet<usize>> {
        self.dense_inactive.get(&layer)
    }

    pub fn input_inactive(&self) -> &BTreeSet<usize> {
        &self.input_inactive
    }

    pub fn positional_entries(&self) -> impl Iterator<Item = (usize, &BTreeSet<usize>)> {
        self.conv_inactive.iter().map(|(&k, v)| (k, v))
    }

    pub fn dense_entries(&self) -> impl Iterator<Item = (usize, &BTreeSet<usize>)> {
        self.dense_inactive.iter().map(|(&k, v)| (k, v))
    }

    /// Masked positions and nodes across all layers (model input excluded).
    pub fn inactive_count(&self) -> usize {
        self.conv_inactive.values().chain(self.dense_inactive.values()).map(BTreeSet::len).sum()
    }

    pub fn insert_position(&mut self, layer: usize, position: usize) -> bool {
        self.conv_inactive.entry(layer).or_default().insert(position)
    }

    pub fn insert_node(&mut self, layer: usize, node: usize) -> bool {
        self.dense_inactive.entry(layer).or_default().insert(node)
    }

    pub fn insert_input(&mut self, position: usize) -> bool {
        self.input_inactive.insert(position)
    }

    /// Layer-wise `self ⊆ other`.
    pub fn is_subset_of(&self, other: &ConcernMap) -> bool {
        fn sub(a: &BTreeMap<usize, BTreeSet<usize>>, b: &BTreeMap<usize, BTreeSet<usize>>) -> bool {
            a.iter().all(|(k, s)| s.is_empty() || b.get(k).is_some_and(|t| s.is_subset(t)))
        }
        sub(&self.conv_inactive, &other.conv_inactive)
            && sub(&self.dense_inactive, &other.dense_inactive)
            && self.input_inactive.is_subset(&other.input_inactive)
    }

    pub fn validate(&self, model: &ModelGraph) -> Result<()> {
        let positional = model.positional_indices();
        for (&layer, set) in &self.conv_inactive {
            if !positional.contains(&layer) {
                return Err(Error::MapMismatch(format!("layer {layer} holds no maskable positions")));
            }
            if let Some(&p) = set.iter().next_back().filter(|&&p| p >= model.output_len(layer)) {
                return Err(Error::MapMismatch(format!("position {p} out of range for layer {layer}")));
            }
        }
        let hidden = &model.dense_chain().hidden;
        for (&layer, set) in &self.dense_inactive {
            if !hidden.contains(&layer) {
                return Err(Error::MapMismatch(format!("layer {layer} is not a hidden dense layer")));
            }
            if let Some(&p) = set.iter().next_back().filter(|&&p| p >= model.output_len(layer)) {
                return Err(Error::MapMismatch(format!("node {p} out of range for layer {layer}")));
            }
        }
        if let Some(&p) = self.input_inactive.iter().next_back().filter(|&&p| p >= model.input_len()) {
            return Err(Error::MapMismatch(format!("input position {p} out of range")));
        }
        Ok(())
    }

    /// Removed weight and bias entries for every hidden dense layer and the
    /// head: an inactive node loses its incoming column, its bias and its
    /// outgoing row.
    pub fn dense_masks(&self, model: &ModelGraph) -> Vec<DenseMask> {
        let chain = model.dense_chain();
        let mut layers = chain.hidden.clone();
        layers.push(chain.head);
        let empty = BTreeSet::new();
        let mut masks = Vec::with_capacity(layers.len());
        for (t, &layer) in layers.iter().enumerate() {
            let LayerKind::Dense { weights, .. } = &model.layer(layer).kind else { unreachable!() };
            let (n_in, n_out) = (weights.shape()[0], weights.shape()[1]);
            let own = self.dense_inactive.get(&layer).unwrap_or(&empty);
            let upstream = t.checked_sub(1).and_then(|p| self.dense_inactive.get(&layers[p])).unwrap_or(&empty);
            let mut w = vec![false; n_in * n_out];
            for j in 0..n_in {
                for i in 0..n_out {
                    w[j * n_out + i] = upstream.contains(&j) || own.contains(&i);
                }
            }
            masks.push(DenseMask { layer, weights: w, bias: (0..n_out).map(|i| own.contains(&i)).collect() });
        }
        masks
    }

    /// Intersection of two observation maps. An uninitialized side is the
    /// identity.
    pub fn intersect(self, other: ConcernMap) -> ConcernMap {
        if !other.is_initialized() {
            return self;
        }
        if !self.is_initialized() {
            return other;
        }
        fn meet(
            a: BTreeMap<usize, BTreeSet<usize>>,
            b: &BTreeMap<usize, BTreeSet<usize>>,
        ) -> BTreeMap<usize, BTreeSet<usize>> {
            a.into_iter()
                .map(|(k, s)| {
                    let kept = match b.get(&k) {
                        Some(t) => s.intersection(t).copied().collect(),
                        None => BTreeSet::new(),
                    };
                    (k, kept)
                })
                .collect()
        }
        ConcernMap {
            conv_inactive: meet(self.conv_inactive, &other.conv_inactive),
            dense_inactive: meet(self.dense_inactive, &other.dense_inactive),
            input_inactive: self.input_inactive.intersection(&other.input_inactive).copied().collect(),
            observed_count: self.observed_count + other.observed_count,
        }
    }

    fn observe_trace(&mut self, model: &ModelGraph, trace: &ActivationTrace) {
        let first = !self.is_initialized();
        let hidden = &model.dense_chain().hidden;
        for (layer, spec) in model.layers().iter().enumerate() {
            let target = match spec.kind {
                LayerKind::Conv2D(_) => &mut self.conv_inactive,
                LayerKind::Dense { .. } if hidden.contains(&layer) => &mut self.dense_inactive,
                _ => continue,
            };
            let values = trace.pre_activation(layer).data();
            if first {
                let set = values.iter().enumerate().filter(|(_, &v)| v <= 0.0).map(|(j, _)| j).collect();
                target.insert(layer, set);
            } else if let Some(set) = target.get_mut(&layer) {
                set.retain(|&j| values[j] <= 0.0);
            }
        }
        self.observed_count += 1;
    }
}

/// Folds one input into the map: the first input seeds every layer with its
/// `<= 0` positions, later inputs drop any position that turned positive.
pub fn ci_observe(mut map: ConcernMap, model: &ModelGraph, input: &Tensor) -> Result<ConcernMap> {
    let trace = forward(model, input)?.trace;
    map.observe_trace(model, &trace);
    Ok(map)
}

/// Folds many inputs, splitting them into `partitions` chunks that are
/// observed in parallel and intersected. The result does not depend on
/// `partitions`.
pub fn observe_all(map: ConcernMap, model: &ModelGraph, inputs: &[&Tensor], partitions: usize) -> Result<ConcernMap> {
    if inputs.is_empty() {
        return Ok(map);
    }
    let chunk = inputs.len().div_ceil(partitions.max(1));
    let partial = inputs
        .par_chunks(chunk)
        .map(|part| part.iter().try_fold(ConcernMap::new(), |m, x| ci_observe(m, model, x)))
        .collect::<Result<Vec<_>>>()?;
    let fresh = partial.into_iter().fold(ConcernMap::new(), ConcernMap::intersect);
    if !map.is_initialized() {
        return Ok(fresh);
    }
    // Positions added by backtracking have no observation history, so the
    // existing map is narrowed rather than intersected symmetrically.
    let mut map = map;
    for (target, source) in
        [(&mut map.conv_inactive, &fresh.conv_inactive), (&mut map.dense_inactive, &fresh.dense_inactive)]
    {
        for (layer, set) in target.iter_mut() {
            if let Some(seen) = source.get(layer) {
                set.retain(|p| seen.contains(p));
            }
        }
    }
    map.observed_count += fresh.observed_count;
    Ok(map)
}

/// Conv and hidden dense positions whose pre-activation is positive on every
/// input: the complement view of [`observe_all`].
pub fn active_on_all(model: &ModelGraph, inputs: &[&Tensor]) -> Result<ConcernMap> {
    let mut map = ConcernMap::new();
    let hidden = &model.dense_chain().hidden;
    for (i, x) in inputs.iter().enumerate() {
        let trace = forward(model, x)?.trace;
        for (layer, spec) in model.layers().iter().enumerate() {
            let target = match spec.kind {
                LayerKind::Conv2D(_) => &mut map.conv_inactive,
                LayerKind::Dense { .. } if hidden.contains(&layer) => &mut map.dense_inactive,
                _ => continue,
            };
            let values = trace.pre_activation(layer).data();
            if i == 0 {
                target.insert(layer, values.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(j, _)| j).collect());
            } else if let Some(set) = target.get_mut(&layer) {
                set.retain(|&j| values[j] > 0.0);
            }
        }
        map.observed_count += 1;
    }
    Ok(map)
}

pub const DEFAULT_PARTITIONS: usize = 8;

/// Builds a map from the first `n_inputs` training examples of
/// `concerned_class`, in dataset order.
pub fn ci_run(
    model: &ModelGraph,
    dataset: &LabeledDataset,
    concerned_class: usize,
    n_inputs: usize,
) -> Result<ConcernMap> {
    ci_run_partitioned(model, dataset, concerned_class, n_inputs, DEFAULT_PARTITIONS)
}

pub fn ci_run_partitioned(
    model: &ModelGraph,
    dataset: &LabeledDataset,
    concerned_class: usize,
    n_inputs: usize,
    partitions: usize,
) -> Result<ConcernMap> {
    check_class(dataset, concerned_class)?;
    if n_inputs == 0 {
        return Err(Error::InvalidArgument("concern identification needs at least one input".into()));
    }
    let indices = dataset.indices_of(concerned_class);
    if indices.len() < n_inputs {
        return Err(Error::InsufficientExamples { class: concerned_class, needed: n_inputs, found: indices.len() });
    }
    let inputs: Vec<&Tensor> = indices[..n_inputs].iter().map(|&i| dataset.image(i)).collect();
    observe_all(ConcernMap::new(), model, &inputs, partitions)
}

fn check_class(dataset: &LabeledDataset, class: usize) -> Result<()> {
    if class >= dataset.class_count() {
        return Err(Error::ClassOutOfRange { class, class_count: dataset.class_count() });
    }
    Ok(())
}

/// How unconcerned examples are picked from each class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Sampling {
    /// The first examples of each class, in dataset order.
    #[default]
    DatasetOrder,
    /// A seeded shuffle of each class before taking the prefix.
    Seeded(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TanglingPlan {
    pub concerned_class: usize,
    pub n_concerned: usize,
    pub per_unconcerned_count: usize,
    /// Dataset indices sampled from each unconcerned class.
    pub samples: BTreeMap<usize, Vec<usize>>,
}

impl TanglingPlan {
    pub fn total(&self) -> usize {
        self.samples.values().map(Vec::len).sum()
    }

    /// All sampled indices, class by class.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.samples.values().flatten().copied()
    }
}

/// Unconcerned examples at a 1:1 ratio with the concerned ones:
/// `max(1, n_concerned / (classes - 1))` from every other class. A class
/// with fewer examples contributes all it has.
pub fn ti_plan(dataset: &LabeledDataset, concerned_class: usize, n_concerned: usize) -> Result<TanglingPlan> {
    ti_plan_with(dataset, concerned_class, n_concerned, Sampling::DatasetOrder)
}

pub fn ti_plan_with(
    dataset: &LabeledDataset,
    concerned_class: usize,
    n_concerned: usize,
    sampling: Sampling,
) -> Result<TanglingPlan> {
    check_class(dataset, concerned_class)?;
    let classes = dataset.class_count();
    if classes < 2 {
        return Err(Error::InvalidArgument("tangling identification needs at least two classes".into()));
    }
    let per_unconcerned_count = (n_concerned / (classes - 1)).max(1);
    let mut samples = BTreeMap::new();
    for class in (0..classes).filter(|&c| c != concerned_class) {
        let mut indices = dataset.indices_of(class);
        if indices.is_empty() {
            return Err(Error::InsufficientExamples { class, needed: 1, found: 0 });
        }
        if let Sampling::Seeded(seed) = sampling {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            indices.shuffle(&mut rng);
        }
        indices.truncate(per_unconcerned_count);
        samples.insert(class, indices);
    }
    Ok(TanglingPlan { concerned_class, n_concerned, per_unconcerned_count, samples })
}

/// Continues observation with the sampled unconcerned inputs, bringing back
/// every position they activate.
pub fn ti_run(
    map: ConcernMap,
    model: &ModelGraph,
    dataset: &LabeledDataset,
    plan: &TanglingPlan,
) -> Result<ConcernMap> {
    if !map.is_initialized() {
        return Err(Error::InvalidArgument("tangling identification needs a map from concern identification".into()));
    }
    let mut inputs = Vec::with_capacity(plan.total());
    for (&class, indices) in &plan.samples {
        if class == plan.concerned_class {
            return Err(Error::InvalidArgument(format!("plan samples the concerned class {class}")));
        }
        for &i in indices {
            if i >= dataset.len() || dataset.labels()[i] != class {
                return Err(Error::InvalidArgument(format!("plan index {i} is not an example of class {class}")));
            }
            inputs.push(dataset.image(i));
        }
    }
    observe_all(map, model, &inputs, DEFAULT_PARTITIONS)
}
