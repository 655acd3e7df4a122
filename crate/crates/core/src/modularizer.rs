//! Turning a concern map into a binary-classifier module.
//!
//! Channeling collapses the n-way head into a concerned and an unconcerned
//! output. Two optional backtracking passes then grow the map: through the
//! dense tail down to the last convolution ([`mc_bln`]), and through every
//! convolution down to the model input ([`mc_bi`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use crate::concern::{ci_run_partitioned, ti_plan_with, ti_run, ConcernMap, Sampling, DEFAULT_PARTITIONS};
use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::graph::{LabeledDataset, LayerInput, LayerKind, ModelGraph};
use crate::inference::{execute, MaskPlan, Prediction};
use crate::tensor::{pool_block, sliding_windows, ConvGeometry, ConvParams, Tensor};

pub const MODULE_MAGIC: &str = "CNNMODULE";
pub const DEFAULT_DELTA: f64 = 0.5;

/// Two-output replacement for the classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct ChanneledHead {
    /// `[n_hidden, 2]`: column 0 concerned, column 1 unconcerned.
    pub weights: Tensor,
    pub bias: Tensor,
    pub concerned_class: usize,
}

/// Keeps the concerned column verbatim and averages every other column
/// (and bias) into the unconcerned output.
pub fn channel_output(model: &ModelGraph, concerned_class: usize) -> Result<ChanneledHead> {
    let n = model.class_count();
    if concerned_class >= n {
        return Err(Error::ClassOutOfRange { class: concerned_class, class_count: n });
    }
    if n < 2 {
        return Err(Error::InvalidArgument("channeling needs at least two classes".into()));
    }
    let (w, b) = model.head_params();
    let n_hidden = w.shape()[0];
    let mean_except = |row: &[f64]| {
        let sum: f64 = row.iter().enumerate().filter(|&(j, _)| j != concerned_class).map(|(_, v)| v).sum();
        sum / (n - 1) as f64
    };
    let mut weights = Vec::with_capacity(n_hidden * 2);
    for row in w.data().chunks_exact(n) {
        weights.push(row[concerned_class]);
        weights.push(mean_except(row));
    }
    let bias = vec![b.data()[concerned_class], mean_except(b.data())];
    Ok(ChanneledHead {
        weights: Tensor::new(vec![n_hidden, 2], weights)?,
        bias: Tensor::vector(bias)?,
        concerned_class,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pipeline {
    /// Channeling only, with an empty concern map.
    Mc,
    CiTiMc,
    CiTiMcBln,
    CiTiMcBlnBi,
}

impl Pipeline {
    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::Mc => "mc",
            Pipeline::CiTiMc => "ci-ti-mc",
            Pipeline::CiTiMcBln => "ci-ti-mc-bln",
            Pipeline::CiTiMcBlnBi => "ci-ti-mc-bln-bi",
        }
    }

    pub fn backtracks_dense(self) -> bool {
        matches!(self, Pipeline::CiTiMcBln | Pipeline::CiTiMcBlnBi)
    }

    pub fn backtracks_input(self) -> bool {
        matches!(self, Pipeline::CiTiMcBlnBi)
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" => Ok(Pipeline::Mc),
            "ci-ti-mc" => Ok(Pipeline::CiTiMc),
            "ci-ti-mc-bln" => Ok(Pipeline::CiTiMcBln),
            "ci-ti-mc-bln-bi" => Ok(Pipeline::CiTiMcBlnBi),
            other => Err(Error::Parse(format!("unknown pipeline {other:?}"))),
        }
    }
}

/// Node-selection condition for the first dense backtracking step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlnRule {
    /// Unconcerned weight `<= -δ` and concerned weight `>= +δ`.
    #[default]
    AsWritten,
    /// Unconcerned weight `>= +δ` and concerned weight `<= -δ`.
    Swapped,
}

impl BlnRule {
    pub fn as_str(self) -> &'static str {
        match self {
            BlnRule::AsWritten => "as-written",
            BlnRule::Swapped => "swapped",
        }
    }

    fn selects(self, concerned: f64, unconcerned: f64, delta: f64) -> bool {
        match self {
            BlnRule::AsWritten => unconcerned <= -delta && concerned >= delta,
            BlnRule::Swapped => unconcerned >= delta && concerned <= -delta,
        }
    }
}

impl FromStr for BlnRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-written" => Ok(BlnRule::AsWritten),
            "swapped" => Ok(BlnRule::Swapped),
            other => Err(Error::Parse(format!("unknown backtracking rule {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BacktrackConfig {
    pub delta: f64,
    pub rule: BlnRule,
}

impl Default for BacktrackConfig {
    fn default() -> Self {
        BacktrackConfig { delta: DEFAULT_DELTA, rule: BlnRule::AsWritten }
    }
}

/// A binary classifier for one class: the shared model, a concern map and
/// a channeled head.
#[derive(Clone, Debug)]
pub struct Module {
    model: Arc<ModelGraph>,
    map: ConcernMap,
    head: ChanneledHead,
    provenance: String,
    pipeline: Pipeline,
    continual: bool,
    config: BacktrackConfig,
    plan: MaskPlan,
}

impl PartialEq for Module {
    fn eq(&self, other: &Self) -> bool {
        self.model.hash() == other.model.hash()
            && self.map == other.map
            && self.head == other.head
            && self.provenance == other.provenance
            && self.pipeline == other.pipeline
            && self.continual == other.continual
            && self.config == other.config
    }
}

impl Module {
    pub fn new(
        model: Arc<ModelGraph>,
        map: ConcernMap,
        head: ChanneledHead,
        provenance: impl Into<String>,
        pipeline: Pipeline,
        config: BacktrackConfig,
    ) -> Result<Self> {
        if head.concerned_class >= model.class_count() {
            return Err(Error::ClassOutOfRange { class: head.concerned_class, class_count: model.class_count() });
        }
        let n_hidden = model.head_params().0.shape()[0];
        if head.weights.shape() != [n_hidden, 2] || head.bias.shape() != [2] {
            return Err(Error::Shape(format!("channeled head must be [{n_hidden}, 2] with bias [2]")));
        }
        let plan = MaskPlan::compile(&model, &map)?;
        Ok(Module { model, map, head, provenance: provenance.into(), pipeline, continual: false, config, plan })
    }

    /// A channel-only module: nothing masked.
    pub fn channel_only(model: Arc<ModelGraph>, concerned_class: usize, provenance: impl Into<String>) -> Result<Self> {
        let head = channel_output(&model, concerned_class)?;
        Module::new(model, ConcernMap::new(), head, provenance, Pipeline::Mc, BacktrackConfig::default())
    }

    pub fn model(&self) -> &Arc<ModelGraph> {
        &self.model
    }

    pub fn model_hash(&self) -> &str {
        self.model.hash()
    }

    pub fn map(&self) -> &ConcernMap {
        &self.map
    }

    pub fn head(&self) -> &ChanneledHead {
        &self.head
    }

    pub fn concerned_class(&self) -> usize {
        self.head.concerned_class
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn pipeline(&self) -> Pipeline {
        self.pipeline
    }

    pub fn continual(&self) -> bool {
        self.continual
    }

    pub fn config(&self) -> BacktrackConfig {
        self.config
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.model.input_shape()
    }

    /// `ci-ti-mc-bln`, with `+cl` once continually updated.
    pub fn pipeline_tag(&self) -> String {
        if self.continual {
            format!("{}+cl", self.pipeline)
        } else {
            self.pipeline.to_string()
        }
    }

    /// Masked execution with the channeled head; logits are
    /// `[concerned, unconcerned]`.
    pub fn predict(&self, input: &Tensor) -> Result<Prediction> {
        execute(&self.model, input, Some(&self.plan), Some(&self.head))
    }

    pub fn with_map(&self, map: ConcernMap) -> Result<Module> {
        let plan = MaskPlan::compile(&self.model, &map)?;
        Ok(Module { map, plan, ..self.clone() })
    }

    pub(crate) fn with_pipeline(mut self, pipeline: Pipeline) -> Module {
        self.pipeline = pipeline;
        self
    }

    pub(crate) fn mark_continual(mut self) -> Module {
        self.continual = true;
        self
    }
}

/// Marks `position` of the tensor produced at `at` inactive and pushes the
/// removal down to the nearest convolution(s): one-to-one through flatten
/// and ReLU, a `size²` block through pooling, and into both operands of an
/// Add. Positions of the model input are recorded only.
pub fn deactivate_at(model: &ModelGraph, map: &mut ConcernMap, at: LayerInput, position: usize) -> Result<()> {
    let LayerInput::Layer(i) = at else {
        map.insert_input(position);
        return Ok(());
    };
    let layer = model.layer(i);
    match &layer.kind {
        LayerKind::Conv2D(_) => {
            map.insert_position(i, position);
        }
        LayerKind::ReLU => deactivate_at(model, map, layer.inputs[0], position)?,
        LayerKind::Flatten => {
            map.insert_position(i, position);
            deactivate_at(model, map, layer.inputs[0], position)?;
        }
        LayerKind::Pool { size, .. } => {
            map.insert_position(i, position);
            for q in pool_block(model.shape_of(layer.inputs[0]), *size, position)? {
                deactivate_at(model, map, layer.inputs[0], q)?;
            }
        }
        LayerKind::Add => {
            deactivate_at(model, map, layer.inputs[0], position)?;
            deactivate_at(model, map, layer.inputs[1], position)?;
        }
        LayerKind::Dense { .. } | LayerKind::Softmax => {
            return Err(Error::MapMismatch(format!("cannot backtrack into layer {i} ({})", layer.kind.name())));
        }
    }
    Ok(())
}

/// Backtracks from the channeled head through the dense layers to the last
/// convolution(s).
///
/// Head inputs are selected by the configured [`BlnRule`]. In each earlier
/// dense layer a node is selected when every one of its weights into the
/// selected nodes is `<= -δ`. Selected nodes are masked and the final
/// flatten-level selection is pushed through [`deactivate_at`].
pub fn mc_bln(module: &Module, config: BacktrackConfig) -> Result<Module> {
    let model = module.model();
    let chain = model.dense_chain();
    let delta = config.delta;
    let head = module.head().weights.data();
    let mut selected: BTreeSet<usize> = head
        .chunks_exact(2)
        .enumerate()
        .filter(|(_, w)| config.rule.selects(w[0], w[1], delta))
        .map(|(i, _)| i)
        .collect();
    let mut map = module.map().clone();
    for &layer in chain.hidden.iter().rev() {
        let LayerKind::Dense { weights, .. } = &model.layer(layer).kind else { unreachable!() };
        for &node in &selected {
            map.insert_node(layer, node);
        }
        let (n_in, n_out) = (weights.shape()[0], weights.shape()[1]);
        let w = weights.data();
        selected = if selected.is_empty() {
            BTreeSet::new()
        } else {
            (0..n_in).filter(|&j| selected.iter().all(|&m| w[j * n_out + m] <= -delta)).collect()
        };
    }
    for position in selected {
        deactivate_at(model, &mut map, LayerInput::Layer(chain.flatten), position)?;
    }
    let mut out = module.with_map(map)?;
    out.config = config;
    Ok(out)
}

/// Source/sink pairs of one convolution. Sources are 1-based flat input
/// positions (0 marks padding); sinks are spatial output cells in row-major
/// order, shared by every output channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlidingWindowMapping {
    pub geometry: ConvGeometry,
    pub pairs: Vec<(usize, usize)>,
    sinks_by_source: Vec<Vec<usize>>,
}

pub const PADDING_SOURCE: usize = 0;

impl SlidingWindowMapping {
    pub fn sink_count(&self) -> usize {
        self.geometry.out_h * self.geometry.out_w
    }

    pub fn sources_of(&self, sink: usize) -> Vec<usize> {
        self.pairs.iter().filter(|(_, k)| *k == sink).map(|(s, _)| *s).collect()
    }

    /// Spatial sinks fed by 1-based `source`.
    pub fn sinks_of(&self, source: usize) -> &[usize] {
        &self.sinks_by_source[source]
    }

    /// 0-based input positions whose every sink (over all output channels)
    /// is in `deactivated`, a set of flat `[out_h, out_w, out_c]` positions.
    /// Padding and sources that feed nothing are never returned.
    pub fn propagate(&self, deactivated: &BTreeSet<usize>) -> BTreeSet<usize> {
        let out_c = self.geometry.out_c;
        let dead: Vec<bool> =
            (0..self.sink_count()).map(|s| (0..out_c).all(|k| deactivated.contains(&(s * out_c + k)))).collect();
        let window = self.geometry.window_len();
        let mut result = BTreeSet::new();
        for (sink, _) in dead.iter().enumerate().filter(|(_, &d)| d) {
            for &(source, _) in &self.pairs[sink * window..(sink + 1) * window] {
                if source == PADDING_SOURCE || result.contains(&(source - 1)) {
                    continue;
                }
                if self.sinks_by_source[source].iter().all(|&k| dead[k]) {
                    result.insert(source - 1);
                }
            }
        }
        result
    }
}

/// Labels the input 1..=N, pads with 0 and records which labels each sliding
/// window reads.
pub fn sliding_window_mapping(input_shape: &[usize], params: &ConvParams) -> Result<SlidingWindowMapping> {
    let geometry = params.geometry(input_shape)?;
    let labels = Tensor::from_fn(input_shape, |i| (i + 1) as f64)?;
    let windows = sliding_windows(&labels, params)?;
    let mut pairs = Vec::with_capacity(windows.len() * geometry.window_len());
    let mut sinks_by_source = vec![Vec::new(); geometry.input_len() + 1];
    for (sink, window) in windows.iter().enumerate() {
        for &v in window.values.data() {
            let source = v as usize;
            pairs.push((source, sink));
            if source != PADDING_SOURCE && sinks_by_source[source].last() != Some(&sink) {
                sinks_by_source[source].push(sink);
            }
        }
    }
    Ok(SlidingWindowMapping { geometry, pairs, sinks_by_source })
}

/// Backtracks through every convolution, last to first, pushing inputs whose
/// sinks are all inactive into the producer of that input.
pub fn mc_bi(module: &Module) -> Result<Module> {
    let model = module.model();
    let mut map = module.map().clone();
    map.validate(model)?;
    for conv in model.conv_indices().into_iter().rev() {
        let layer = model.layer(conv);
        let LayerKind::Conv2D(params) = &layer.kind else { unreachable!() };
        let Some(dead) = map.conv_inactive(conv).filter(|s| !s.is_empty()).cloned() else { continue };
        let mapping = sliding_window_mapping(model.shape_of(layer.inputs[0]), params)?;
        for source in mapping.propagate(&dead) {
            deactivate_at(model, &mut map, layer.inputs[0], source)?;
        }
    }
    module.with_map(map)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BuildOptions {
    pub backtrack: BacktrackConfig,
    pub sampling: Sampling,
    pub partitions: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            backtrack: BacktrackConfig::default(),
            sampling: Sampling::DatasetOrder,
            partitions: DEFAULT_PARTITIONS,
        }
    }
}

/// Concern identification over `n_inputs` examples, tangling identification
/// at a 1:1 ratio, channeling, then the backtracking passes `pipeline` asks
/// for.
pub fn build_module(
    model: Arc<ModelGraph>,
    dataset: &LabeledDataset,
    class: usize,
    n_inputs: usize,
    pipeline: Pipeline,
    options: &BuildOptions,
) -> Result<Module> {
    if dataset.image_shape() != model.input_shape() {
        return Err(Error::InputShapeMismatch(format!(
            "dataset images {:?} vs model input {:?}",
            dataset.image_shape(),
            model.input_shape()
        )));
    }
    if dataset.class_count() != model.class_count() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model has {}",
            dataset.class_count(),
            model.class_count()
        )));
    }
    let head = channel_output(&model, class)?;
    let map = if pipeline == Pipeline::Mc {
        ConcernMap::new()
    } else {
        let map = ci_run_partitioned(&model, dataset, class, n_inputs, options.partitions)?;
        let plan = ti_plan_with(dataset, class, n_inputs, options.sampling)?;
        ti_run(map, &model, dataset, &plan)?
    };
    let module = Module::new(model, map, head, dataset.name(), pipeline, options.backtrack)?;
    let module = rederive(module, pipeline)?;
    log::debug!("class {class}: {} inactive after {pipeline}", module.map().inactive_count());
    Ok(module)
}

/// Re-applies the backtracking passes `pipeline` includes.
pub(crate) fn rederive(module: Module, pipeline: Pipeline) -> Result<Module> {
    let config = module.config();
    let mut module = module.with_pipeline(pipeline);
    if pipeline.backtracks_dense() {
        module = mc_bln(&module, config)?;
    }
    if pipeline.backtracks_input() {
        module = mc_bi(&module)?;
    }
    Ok(module)
}

fn encode_positions(set: &BTreeSet<usize>) -> String {
    let mut prev = 0;
    let deltas: Vec<String> = set
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let d = if i == 0 { p } else { p - prev };
            prev = p;
            d.to_string()
        })
        .collect();
    format!("{}: {}", set.len(), deltas.join(" ")).trim_end().to_string()
}

fn decode_positions(s: &str) -> Result<BTreeSet<usize>> {
    let (count, rest) = s.split_once(':').ok_or_else(|| Error::Parse(format!("bad position list {s:?}")))?;
    let count: usize = count.trim().parse().map_err(|_| Error::Parse(format!("bad count in {s:?}")))?;
    let mut acc = 0usize;
    let mut set = BTreeSet::new();
    for (i, d) in container::parse_usizes(rest)?.into_iter().enumerate() {
        if i > 0 && d == 0 {
            return Err(Error::Parse("position lists must be strictly increasing".into()));
        }
        acc += d;
        set.insert(acc);
    }
    if set.len() != count {
        return Err(Error::Parse(format!("position list declares {count} entries, found {}", set.len())));
    }
    Ok(set)
}

pub fn encode_module(module: &Module) -> Vec<u8> {
    let mut c = Container::new(MODULE_MAGIC);
    c.set("model_hash", module.model_hash());
    c.set("model_name", module.model().name());
    c.set("concerned_class", module.concerned_class());
    c.set("pipeline", module.pipeline());
    c.set("continual", module.continual());
    c.set("provenance", module.provenance());
    c.set("delta", module.config().delta);
    c.set("bln_rule", module.config().rule.as_str());
    let map = module.map();
    c.set("observed", map.observed_count());
    for (layer, set) in map.positional_entries() {
        c.set(&format!("positions.{layer}"), encode_positions(set));
    }
    for (layer, set) in map.dense_entries() {
        c.set(&format!("nodes.{layer}"), encode_positions(set));
    }
    c.set("input", encode_positions(map.input_inactive()));
    c.set("head.hidden", module.head().weights.shape()[0]);
    c.put_f64s("head.weights", module.head().weights.data());
    c.put_f64s("head.bias", module.head().bias.data());
    c.encode()
}

/// Model hash recorded in a module file, for locating the matching model.
pub fn module_model_hash(bytes: &[u8]) -> Result<String> {
    Ok(Container::decode(bytes, MODULE_MAGIC)?.get("model_hash")?.to_string())
}

pub fn decode_module(bytes: &[u8], model: Arc<ModelGraph>) -> Result<Module> {
    let c = Container::decode(bytes, MODULE_MAGIC)?;
    let hash = c.get("model_hash")?;
    if hash != model.hash() {
        return Err(Error::ModelHashMismatch { expected: hash.to_string(), found: model.hash().to_string() });
    }
    let mut map = ConcernMap::new();
    map.observed_count = c.parse("observed")?;
    let mut positional = BTreeMap::new();
    let mut dense = BTreeMap::new();
    for (key, value) in c.entries() {
        let parse_layer = |k: &str| k.parse::<usize>().map_err(|_| Error::Parse(format!("bad layer key {key:?}")));
        if let Some(l) = key.strip_prefix("positions.") {
            positional.insert(parse_layer(l)?, decode_positions(value)?);
        } else if let Some(l) = key.strip_prefix("nodes.") {
            dense.insert(parse_layer(l)?, decode_positions(value)?);
        }
    }
    map.conv_inactive = positional;
    map.dense_inactive = dense;
    map.input_inactive = decode_positions(c.get("input")?)?;
    let hidden: usize = c.parse("head.hidden")?;
    let head = ChanneledHead {
        weights: Tensor::new(vec![hidden, 2], c.f64s("head.weights")?)?,
        bias: Tensor::new(vec![2], c.f64s("head.bias")?)?,
        concerned_class: c.parse("concerned_class")?,
    };
    let config = BacktrackConfig { delta: c.parse("delta")?, rule: c.get("bln_rule")?.parse()? };
    let module = Module::new(model, map, head, c.get("provenance")?, c.get("pipeline")?.parse()?, config)?;
    Ok(if c.parse::<bool>("continual")? { module.mark_continual() } else { module })
}

pub fn save_module(module: &Module, path: &Path) -> Result<()> {
    container::write_atomic(path, &encode_module(module))
}

pub fn load_module(path: &Path, model: Arc<ModelGraph>) -> Result<Module> {
    decode_module(&container::read_file(path)?, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LayerSpec;
    use crate::tensor::{Padding, PoolMode};

    fn head_model(w: Vec<f64>, n_hidden: usize, n: usize) -> ModelGraph {
        use LayerInput::{Layer, Model};
        let layers = vec![
            LayerSpec::after(LayerKind::Flatten, Model),
            LayerSpec::after(
                LayerKind::Dense {
                    weights: Tensor::new(vec![n_hidden, n], w).unwrap(),
                    bias: Tensor::from_fn(&[n], |i| i as f64).unwrap(),
                },
                Layer(0),
            ),
            LayerSpec::after(LayerKind::Softmax, Layer(1)),
        ];
        ModelGraph::new("h", [1, 1, n_hidden], layers).unwrap()
    }

    #[test]
    fn channel_mean_of_unconcerned_columns() {
        let m = head_model(vec![1., 2., 3., 4., 5., 6.], 2, 3);
        let h = channel_output(&m, 0).unwrap();
        assert_eq!(h.weights.data(), &[1.0, 2.5, 4.0, 5.5]);
        assert_eq!(h.bias.data(), &[0.0, 1.5]);
        assert!(matches!(channel_output(&m, 3), Err(Error::ClassOutOfRange { .. })));
    }

    #[test]
    fn two_class_channel_keeps_other_column() {
        let m = head_model(vec![1., -2., 3., 0.5], 2, 2);
        let h = channel_output(&m, 1).unwrap();
        assert_eq!(h.weights.data(), &[-2.0, 1.0, 0.5, 3.0]);
    }

    /// flatten → dense(4→4) → relu → dense(4→n) → softmax with a
    /// hand-written channeled head.
    fn bln_module(col_c: [f64; 4], col_uc: [f64; 4], hidden_w: Vec<f64>) -> Module {
        use LayerInput::{Layer, Model};
        let layers = vec![
            LayerSpec::after(LayerKind::Flatten, Model),
            LayerSpec::after(
                LayerKind::Dense {
                    weights: Tensor::new(vec![4, 4], hidden_w).unwrap(),
                    bias: Tensor::zeros(&[4]).unwrap(),
                },
                Layer(0),
            ),
            LayerSpec::after(LayerKind::ReLU, Layer(1)),
            LayerSpec::after(
                LayerKind::Dense { weights: Tensor::zeros(&[4, 3]).unwrap(), bias: Tensor::zeros(&[3]).unwrap() },
                Layer(2),
            ),
            LayerSpec::after(LayerKind::Softmax, Layer(3)),
        ];
        let model = Arc::new(ModelGraph::new("b", [1, 1, 4], layers).unwrap());
        let w: Vec<f64> = (0..4).flat_map(|i| [col_c[i], col_uc[i]]).collect();
        let head = ChanneledHead {
            weights: Tensor::new(vec![4, 2], w).unwrap(),
            bias: Tensor::zeros(&[2]).unwrap(),
            concerned_class: 0,
        };
        Module::new(model, ConcernMap::new(), head, "d", Pipeline::CiTiMc, BacktrackConfig::default()).unwrap()
    }

    #[test]
    fn bln_first_pass_conjunction() {
        let m = bln_module([1.0, 1.0, -1.0, 0.2], [-1.0, 0.2, -1.0, -1.0], vec![0.0; 16]);
        let out = mc_bln(&m, BacktrackConfig::default()).unwrap();
        assert_eq!(out.map().dense_inactive(1).unwrap(), &BTreeSet::from([0]));
        // weights of zero never reach -δ, so nothing reaches flatten
        assert!(out.map().conv_inactive(0).is_none());

        let swapped = mc_bln(&m, BacktrackConfig { rule: BlnRule::Swapped, ..Default::default() }).unwrap();
        assert!(swapped.map().dense_inactive(1).is_none());
    }

    #[test]
    fn bln_below_threshold_is_noop() {
        let m = bln_module([0.4, -0.4, 0.1, 0.0], [-0.49, 0.3, 0.2, -0.1], vec![-1.0; 16]);
        let out = mc_bln(&m, BacktrackConfig::default()).unwrap();
        assert_eq!(out.map(), m.map());
    }

    #[test]
    fn bln_earlier_layer_needs_all_weights_negative() {
        // hidden node 0 and 1 selected; flatten j selected iff W[j,0] and W[j,1] <= -0.5
        let mut hw = vec![0.0; 16];
        let set = |hw: &mut Vec<f64>, j: usize, m: usize, v: f64| hw[j * 4 + m] = v;
        set(&mut hw, 0, 0, -0.6);
        set(&mut hw, 0, 1, -0.9);
        set(&mut hw, 1, 0, -0.6);
        set(&mut hw, 1, 1, 0.1);
        set(&mut hw, 2, 0, -0.5);
        set(&mut hw, 2, 1, -0.5);
        let m = bln_module([1.0, 0.8, 0.0, 0.0], [-1.0, -0.7, 0.0, 0.0], hw);
        let out = mc_bln(&m, BacktrackConfig::default()).unwrap();
        assert_eq!(out.map().dense_inactive(1).unwrap(), &BTreeSet::from([0, 1]));
        assert_eq!(out.map().conv_inactive(0).unwrap(), &BTreeSet::from([0, 2]));
        assert_eq!(out.map().input_inactive(), &BTreeSet::from([0, 2]));
    }

    #[test]
    fn mapping_small_cases() {
        let p = |k: usize, pad: Padding| {
            ConvParams::new(Tensor::zeros(&[k, k, 1, 1]).unwrap(), Tensor::zeros(&[1]).unwrap(), 1, pad).unwrap()
        };
        let m = sliding_window_mapping(&[2, 2, 1], &p(2, Padding::Zero)).unwrap();
        assert_eq!(m.sink_count(), 1);
        assert_eq!(m.sources_of(0), vec![1, 2, 3, 4]);

        let m = sliding_window_mapping(&[3, 3, 1], &p(2, Padding::Zero)).unwrap();
        assert_eq!(m.sinks_of(5), &[0, 1, 2, 3]);
        assert_eq!(m.sinks_of(1), &[0]);

        let m = sliding_window_mapping(&[3, 3, 1], &p(3, Padding::With)).unwrap();
        assert!(m.sources_of(0).contains(&PADDING_SOURCE));
        assert!(m.pairs.iter().all(|&(s, _)| s <= 9));
    }

    #[test]
    fn propagation_all_or_nothing() {
        let p = ConvParams::new(Tensor::zeros(&[2, 2, 1, 1]).unwrap(), Tensor::zeros(&[1]).unwrap(), 1, Padding::Zero)
            .unwrap();
        let m = sliding_window_mapping(&[3, 3, 1], &p).unwrap();
        assert!(m.propagate(&BTreeSet::new()).is_empty());
        let all = m.propagate(&BTreeSet::from([0, 1, 2, 3]));
        assert!(all.contains(&4));
        assert_eq!(all.len(), 9);
        let three = m.propagate(&BTreeSet::from([0, 1, 2]));
        assert!(!three.contains(&4));
        assert_eq!(three, BTreeSet::from([0, 1, 2, 3, 6]));
    }

    #[test]
    fn pool_propagation_block() {
        use LayerInput::{Layer, Model};
        let conv =
            ConvParams::new(Tensor::zeros(&[1, 1, 1, 2]).unwrap(), Tensor::zeros(&[2]).unwrap(), 1, Padding::Zero)
                .unwrap();
        let layers = vec![
            LayerSpec::after(LayerKind::Conv2D(conv), Model),
            LayerSpec::after(LayerKind::ReLU, Layer(0)),
            LayerSpec::after(LayerKind::Pool { size: 2, mode: PoolMode::Max }, Layer(1)),
            LayerSpec::after(LayerKind::Flatten, Layer(2)),
            LayerSpec::after(
                LayerKind::Dense { weights: Tensor::zeros(&[8, 2]).unwrap(), bias: Tensor::zeros(&[2]).unwrap() },
                Layer(3),
            ),
            LayerSpec::after(LayerKind::Softmax, Layer(4)),
        ];
        let model = ModelGraph::new("p", [4, 4, 1], layers).unwrap();
        let mut map = ConcernMap::new();
        deactivate_at(&model, &mut map, LayerInput::Layer(3), 3).unwrap();
        assert_eq!(map.conv_inactive(3).unwrap(), &BTreeSet::from([3]));
        assert_eq!(map.conv_inactive(2).unwrap(), &BTreeSet::from([3]));
        assert_eq!(map.conv_inactive(0).unwrap(), &BTreeSet::from([5, 7, 13, 15]));
    }

    #[test]
    fn position_lists_are_delta_encoded() {
        let set = BTreeSet::from([3, 4, 10, 200]);
        let text = encode_positions(&set);
        assert_eq!(text, "4: 3 1 6 190");
        assert_eq!(decode_positions(&text).unwrap(), set);
        assert_eq!(encode_positions(&BTreeSet::new()), "0:");
        assert!(decode_positions("0:").unwrap().is_empty());
        assert!(decode_positions("2: 3 0").is_err());
        assert!(decode_positions("3: 1 2").is_err());
    }
}
