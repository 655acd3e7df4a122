//! Running module sets as n-way classifiers, and the set-level scenarios:
//! reuse, replace, remove, continual update and verification.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

use crate::concern::{active_on_all, observe_all, DEFAULT_PARTITIONS};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::inference::forward;
use crate::modularizer::{rederive, Module};
use crate::tensor::Tensor;

/// A class of a named dataset, written `dataset:class`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ClassLabel {
    pub dataset: String,
    pub class: usize,
}

impl ClassLabel {
    pub fn new(dataset: impl Into<String>, class: usize) -> Self {
        ClassLabel { dataset: dataset.into(), class }
    }
}

/// Lower class index first, then dataset name.
impl Ord for ClassLabel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.class.cmp(&other.class).then_with(|| self.dataset.cmp(&other.dataset))
    }
}

impl PartialOrd for ClassLabel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.dataset, self.class)
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (dataset, class) =
            s.rsplit_once(':').ok_or_else(|| Error::Parse(format!("label {s:?} is not dataset:class")))?;
        let class = class.parse().map_err(|_| Error::Parse(format!("bad class index in label {s:?}")))?;
        if dataset.is_empty() {
            return Err(Error::Parse(format!("label {s:?} has an empty dataset name")));
        }
        Ok(ClassLabel::new(dataset, class))
    }
}

/// Labelled modules sharing one input shape. Updates return new sets;
/// modules are shared, never copied or modified.
#[derive(Clone, Debug)]
pub struct ModuleSet {
    entries: Vec<(ClassLabel, Arc<Module>)>,
    input_shape: [usize; 3],
}

impl ModuleSet {
    /// Labels each module with its provenance and concerned class.
    pub fn new(modules: Vec<Module>) -> Result<Self> {
        let entries =
            modules.into_iter().map(|m| (ClassLabel::new(m.provenance(), m.concerned_class()), Arc::new(m))).collect();
        ModuleSet::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<(ClassLabel, Arc<Module>)>) -> Result<Self> {
        let Some((_, first)) = entries.first() else { return Err(Error::EmptySet) };
        let input_shape = first.input_shape();
        for (i, (label, module)) in entries.iter().enumerate() {
            if module.input_shape() != input_shape {
                return Err(Error::InputShapeMismatch(format!(
                    "module {label} takes {:?}, set takes {input_shape:?}",
                    module.input_shape()
                )));
            }
            if entries[..i].iter().any(|(l, _)| l == label) {
                return Err(Error::DuplicateLabel(label.to_string()));
            }
        }
        Ok(ModuleSet { entries, input_shape })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        self.entries.iter().map(|(l, _)| l.clone()).collect()
    }

    pub fn entries(&self) -> &[(ClassLabel, Arc<Module>)] {
        &self.entries
    }

    pub fn contains(&self, label: &ClassLabel) -> bool {
        self.entries.iter().any(|(l, _)| l == label)
    }

    pub fn get(&self, label: &ClassLabel) -> Option<&Arc<Module>> {
        self.entries.iter().find(|(l, _)| l == label).map(|(_, m)| m)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VoteMode {
    /// Concerned softmax probability over the two channeled outputs.
    #[default]
    Probability,
    /// Raw concerned logit.
    Logit,
}

impl VoteMode {
    pub fn as_str(self) -> &'static str {
        match self {
            VoteMode::Probability => "probability",
            VoteMode::Logit => "logit",
        }
    }
}

impl FromStr for VoteMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probability" | "prob" => Ok(VoteMode::Probability),
            "logit" => Ok(VoteMode::Logit),
            other => Err(Error::Parse(format!("unknown vote mode {other:?}"))),
        }
    }
}

/// Score of one module for one input.
pub fn module_score(module: &Module, input: &Tensor, mode: VoteMode) -> Result<f64> {
    let logits = module.predict(input)?.logits;
    let (c, uc) = (logits.data()[0], logits.data()[1]);
    Ok(match mode {
        VoteMode::Logit => c,
        VoteMode::Probability => 1.0 / (1.0 + (uc - c).exp()),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vote {
    pub label: ClassLabel,
    pub score: f64,
}

/// Scores every module and ranks labels by descending score.
pub fn compose_predict(set: &ModuleSet, input: &Tensor, mode: VoteMode) -> Result<Vec<Vote>> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    if input.shape() != set.input_shape() {
        return Err(Error::InputShapeMismatch(format!("set takes {:?}, got {:?}", set.input_shape(), input.shape())));
    }
    let mut votes = set
        .entries()
        .par_iter()
        .map(|(label, module)| Ok(Vote { label: label.clone(), score: module_score(module, input, mode)? }))
        .collect::<Result<Vec<_>>>()?;
    votes.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.label.cmp(&b.label)));
    Ok(votes)
}

/// Collects the selected modules from `sets`, first match wins.
pub fn reuse(sets: &[&ModuleSet], selection: &[ClassLabel]) -> Result<ModuleSet> {
    let mut entries = Vec::with_capacity(selection.len());
    for label in selection {
        let module = sets.iter().find_map(|s| s.get(label)).ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        entries.push((label.clone(), Arc::clone(module)));
    }
    ModuleSet::from_entries(entries)
}

/// Puts `module` in the slot of `label`; the slot keeps its label.
pub fn replace(set: &ModuleSet, label: &ClassLabel, module: Module) -> Result<ModuleSet> {
    if !set.contains(label) {
        return Err(Error::UnknownLabel(label.to_string()));
    }
    let module = Arc::new(module);
    let entries = set
        .entries()
        .iter()
        .map(|(l, m)| (l.clone(), if l == label { Arc::clone(&module) } else { Arc::clone(m) }))
        .collect();
    ModuleSet::from_entries(entries)
}

pub fn remove(set: &ModuleSet, label: &ClassLabel) -> Result<ModuleSet> {
    if !set.contains(label) {
        return Err(Error::UnknownLabel(label.to_string()));
    }
    let entries = set.entries().iter().filter(|(l, _)| l != label).cloned().collect();
    ModuleSet::from_entries(entries)
}

/// What continual learning does to positions the foreign examples use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClDirection {
    /// Unmask positions active on any foreign example.
    #[default]
    Reinstate,
    /// Mask positions active on every foreign example.
    Remove,
}

impl FromStr for ClDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reinstate" => Ok(ClDirection::Reinstate),
            "remove" => Ok(ClDirection::Remove),
            other => Err(Error::Parse(format!("unknown continual-learning direction {other:?}"))),
        }
    }
}

/// Refreshes a module with examples of a foreign dataset's class, treated
/// as unconcerned, then re-applies the module's backtracking passes.
pub fn continual_update(module: &Module, foreign: &[Tensor], direction: ClDirection) -> Result<Module> {
    let shape = module.input_shape();
    if let Some(x) = foreign.iter().find(|x| x.shape() != shape) {
        return Err(Error::InputShapeMismatch(format!("module takes {shape:?}, foreign example is {:?}", x.shape())));
    }
    if foreign.is_empty() {
        return Ok(module.clone());
    }
    let model = module.model();
    let inputs: Vec<&Tensor> = foreign.iter().collect();
    let map = module.map().clone();
    let map = match direction {
        ClDirection::Reinstate if map.is_initialized() => observe_all(map, model, &inputs, DEFAULT_PARTITIONS)?,
        ClDirection::Reinstate => map,
        ClDirection::Remove => {
            let mut map = map;
            let active = active_on_all(model, &inputs)?;
            for (layer, set) in active.positional_entries() {
                set.iter().for_each(|&p| {
                    map.insert_position(layer, p);
                });
            }
            for (layer, set) in active.dense_entries() {
                set.iter().for_each(|&p| {
                    map.insert_node(layer, p);
                });
            }
            map
        }
    };
    let updated = module.with_map(map)?;
    Ok(rederive(updated, module.pipeline())?.mark_continual())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// The model's prediction is not watched.
    NotReVerified {
        model: ClassLabel,
    },
    Confirmed {
        label: ClassLabel,
    },
    Flagged {
        model: ClassLabel,
        modules: ClassLabel,
    },
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::NotReVerified { model } => write!(f, "not re-verified (model: {model})"),
            Verdict::Confirmed { label } => write!(f, "confirmed ({label})"),
            Verdict::Flagged { model, modules } => write!(f, "flagged (model: {model}, modules: {modules})"),
        }
    }
}

/// Re-scores watched predictions of `model` with the module set. The model's
/// classes are labelled with `dataset`.
pub fn verify_with_modules(
    model: &ModelGraph,
    dataset: &str,
    set: &ModuleSet,
    input: &Tensor,
    watched: &[ClassLabel],
    mode: VoteMode,
) -> Result<Verdict> {
    if let Some(l) = watched.iter().find(|l| !set.contains(l)) {
        return Err(Error::UnknownLabel(l.to_string()));
    }
    let predicted = ClassLabel::new(dataset, forward(model, input)?.logits.argmax());
    if !watched.contains(&predicted) {
        return Ok(Verdict::NotReVerified { model: predicted });
    }
    let top = compose_predict(set, input, mode)?.swap_remove(0).label;
    Ok(if top == predicted {
        Verdict::Confirmed { label: top }
    } else {
        Verdict::Flagged { model: predicted, modules: top }
    })
}
