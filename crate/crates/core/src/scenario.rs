//! Scenario files: plain `key = value` lines naming models, modules and
//! the set operations to apply. Module-set manifests use the same format.
//!
//! ```text
//! model = fixture/model.cnnmod
//! module = out/class-0.cnnmodule
//! entry = fixture-a:3 out/other.cnnmodule
//! select = fixture-a:0
//! replace = fixture-a:3 better/class-3.cnnmodule
//! remove = fixture-a:4
//! watch = fixture-a:2
//! continual = fixture-a:0 other/train.cnnds 5
//! test = fixture/test.cnnds
//! vote = logit
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::composer::{ClassLabel, ModuleSet, VoteMode};
use crate::container::{load_model, read_file};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::modularizer::{decode_module, module_model_hash, Module};

#[derive(Clone, Debug, PartialEq)]
pub struct ContinualSource {
    pub label: ClassLabel,
    pub dataset: PathBuf,
    pub class: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scenario {
    pub models: Vec<PathBuf>,
    /// Module files, optionally under an explicit label.
    pub modules: Vec<(Option<ClassLabel>, PathBuf)>,
    pub select: Vec<ClassLabel>,
    pub replace: Vec<(ClassLabel, PathBuf)>,
    pub remove: Vec<ClassLabel>,
    pub watch: Vec<ClassLabel>,
    pub continual: Vec<ContinualSource>,
    pub tests: Vec<PathBuf>,
    pub vote: Option<VoteMode>,
}

fn two(value: &str, line: usize) -> Result<(&str, &str)> {
    value
        .split_once(char::is_whitespace)
        .map(|(a, b)| (a, b.trim()))
        .filter(|(_, b)| !b.is_empty())
        .ok_or_else(|| Error::Parse(format!("line {line}: expected two values, got {value:?}")))
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Scenario::default();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let (key, value) = raw
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Parse(format!("line {line}: expected key = value")))?;
            let label = |v: &str| v.parse::<ClassLabel>().map_err(|e| Error::Parse(format!("line {line}: {e}")));
            match key {
                "model" => s.models.push(value.into()),
                "module" => s.modules.push((None, value.into())),
                "entry" => {
                    let (l, p) = two(value, line)?;
                    s.modules.push((Some(label(l)?), p.into()));
                }
                "select" => s.select.push(label(value)?),
                "replace" => {
                    let (l, p) = two(value, line)?;
                    s.replace.push((label(l)?, p.into()));
                }
                "remove" => s.remove.push(label(value)?),
                "watch" => s.watch.push(label(value)?),
                "continual" => {
                    let (l, rest) = two(value, line)?;
                    let (p, class) = two(rest, line)?;
                    let class = class.parse().map_err(|_| Error::Parse(format!("line {line}: bad class {class:?}")))?;
                    s.continual.push(ContinualSource { label: label(l)?, dataset: p.into(), class });
                }
                "test" => s.tests.push(value.into()),
                "vote" => s.vote = Some(value.parse()?),
                other => return Err(Error::Parse(format!("line {line}: unknown key {other:?}"))),
            }
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Parse(format!("{} is not UTF-8", path.display())))?;
        Scenario::parse(&text)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let p = |p: &PathBuf| p.display().to_string();
        for m in &self.models {
            let _ = writeln!(out, "model = {}", p(m));
        }
        for (label, path) in &self.modules {
            let _ = match label {
                Some(l) => writeln!(out, "entry = {l} {}", p(path)),
                None => writeln!(out, "module = {}", p(path)),
            };
        }
        for l in &self.select {
            let _ = writeln!(out, "select = {l}");
        }
        for (l, path) in &self.replace {
            let _ = writeln!(out, "replace = {l} {}", p(path));
        }
        for l in &self.remove {
            let _ = writeln!(out, "remove = {l}");
        }
        for l in &self.watch {
            let _ = writeln!(out, "watch = {l}");
        }
        for c in &self.continual {
            let _ = writeln!(out, "continual = {} {} {}", c.label, p(&c.dataset), c.class);
        }
        for t in &self.tests {
            let _ = writeln!(out, "test = {}", p(t));
        }
        if let Some(v) = self.vote {
            let _ = writeln!(out, "vote = {}", v.as_str());
        }
        out
    }
}

/// Models indexed by content hash.
#[derive(Clone, Debug, Default)]
pub struct ModelStore {
    models: Vec<(PathBuf, Arc<ModelGraph>)>,
}

impl ModelStore {
    pub fn load(paths: &[PathBuf]) -> Result<Self> {
        let models = paths.iter().map(|p| Ok((p.clone(), Arc::new(load_model(p)?)))).collect::<Result<_>>()?;
        Ok(ModelStore { models })
    }

    pub fn insert(&mut self, path: PathBuf, model: Arc<ModelGraph>) {
        self.models.push((path, model));
    }

    pub fn by_hash(&self, hash: &str) -> Option<&Arc<ModelGraph>> {
        self.models.iter().find(|(_, m)| m.hash() == hash).map(|(_, m)| m)
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.models.iter().map(|(p, _)| p.clone()).collect()
    }

    /// Loads a module against whichever stored model it was built from.
    pub fn load_module(&self, path: &Path) -> Result<Module> {
        let bytes = read_file(path)?;
        let hash = module_model_hash(&bytes)?;
        let model = self.by_hash(&hash).ok_or_else(|| Error::ModelHashMismatch {
            expected: hash.clone(),
            found: format!("none of {} loaded model(s)", self.models.len()),
        })?;
        decode_module(&bytes, Arc::clone(model))
    }
}

/// A module set together with the file each entry came from.
#[derive(Clone, Debug)]
pub struct LoadedSet {
    pub set: ModuleSet,
    pub files: Vec<(ClassLabel, PathBuf)>,
}

impl LoadedSet {
    pub fn load(store: &ModelStore, modules: &[(Option<ClassLabel>, PathBuf)]) -> Result<Self> {
        let mut entries = Vec::with_capacity(modules.len());
        let mut files = Vec::with_capacity(modules.len());
        for (label, path) in modules {
            let module = store.load_module(path)?;
            let label = label.clone().unwrap_or_else(|| ClassLabel::new(module.provenance(), module.concerned_class()));
            files.push((label.clone(), path.clone()));
            entries.push((label, Arc::new(module)));
        }
        Ok(LoadedSet { set: ModuleSet::from_entries(entries)?, files })
    }

    /// Manifest listing the models and labelled module files of the set.
    pub fn manifest(&self, models: Vec<PathBuf>) -> Scenario {
        let labels = self.set.labels();
        Scenario {
            models,
            modules: labels
                .into_iter()
                .map(|l| {
                    let path = self.files.iter().find(|(f, _)| *f == l).map(|(_, p)| p.clone()).unwrap_or_default();
                    (Some(l), path)
                })
                .collect(),
            ..Scenario::default()
        }
    }
}
