//! Fixture manifests: which files make up a fixture, their hashes, and
//! probe logits that any loader of the model must reproduce.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::graph::{LabeledDataset, ModelGraph};
use crate::inference::forward;
use crate::metrics::model_accuracy;
use crate::synth::{make_datasets, train_model, DataSpec, TrainSpec};

pub const MANIFEST_MAGIC: &str = "CNNFIXTURE";
pub const MANIFEST_FILE: &str = "manifest.txt";
/// Largest probe logit difference accepted on reload.
pub const PROBE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub test_index: usize,
    pub class: usize,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureManifest {
    pub arch: String,
    pub seed: u64,
    pub model_file: String,
    pub train_file: String,
    pub test_file: String,
    /// SHA-256 of each listed file, by file name.
    pub file_hashes: BTreeMap<String, String>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub class_counts: Vec<usize>,
    pub hyperparameters: Vec<(String, String)>,
    pub probes: Vec<Probe>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl FixtureManifest {
    fn body(&self) -> Container {
        let mut c = Container::new(MANIFEST_MAGIC);
        c.set("arch", &self.arch);
        c.set("seed", self.seed);
        c.set("model", &self.model_file);
        c.set("dataset.train", &self.train_file);
        c.set("dataset.test", &self.test_file);
        for (file, hash) in &self.file_hashes {
            c.set(&format!("sha256.{file}"), hash);
        }
        c.set("train_accuracy", format!("{:.6}", self.train_accuracy));
        c.set("test_accuracy", format!("{:.6}", self.test_accuracy));
        c.set("class_counts", container::join(&self.class_counts));
        for (k, v) in &self.hyperparameters {
            c.set(&format!("hyper.{k}"), v);
        }
        c.set("probe_count", self.probes.len());
        for (i, p) in self.probes.iter().enumerate() {
            c.set(&format!("probe.{i}.test_index"), p.test_index);
            c.set(&format!("probe.{i}.class"), p.class);
            let logits: Vec<String> = p.logits.iter().map(|v| format!("{v:.6}")).collect();
            c.set(&format!("probe.{i}.logits"), logits.join(" "));
        }
        c
    }

    /// Hash over every field, file hashes included.
    pub fn hash(&self) -> String {
        sha256_hex(&self.body().encode())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut c = self.body();
        c.set("manifest_sha256", self.hash());
        c.encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let c = Container::decode(bytes, MANIFEST_MAGIC)?;
        let float_list = |s: &str| -> Result<Vec<f64>> {
            s.split_whitespace().map(|v| v.parse().map_err(|_| Error::Parse(format!("bad number {v:?}")))).collect()
        };
        let mut file_hashes = BTreeMap::new();
        let mut hyperparameters = Vec::new();
        for (k, v) in c.entries() {
            if let Some(file) = k.strip_prefix("sha256.") {
                file_hashes.insert(file.to_string(), v.to_string());
            } else if let Some(name) = k.strip_prefix("hyper.") {
                hyperparameters.push((name.to_string(), v.to_string()));
            }
        }
        let probes = (0..c.parse::<usize>("probe_count")?)
            .map(|i| {
                Ok(Probe {
                    test_index: c.parse(&format!("probe.{i}.test_index"))?,
                    class: c.parse(&format!("probe.{i}.class"))?,
                    logits: float_list(c.get(&format!("probe.{i}.logits"))?)?,
                })
            })
            .collect::<Result<_>>()?;
        let manifest = FixtureManifest {
            arch: c.get("arch")?.to_string(),
            seed: c.parse("seed")?,
            model_file: c.get("model")?.to_string(),
            train_file: c.get("dataset.train")?.to_string(),
            test_file: c.get("dataset.test")?.to_string(),
            file_hashes,
            train_accuracy: c.parse("train_accuracy")?,
            test_accuracy: c.parse("test_accuracy")?,
            class_counts: c.parse_list("class_counts")?,
            hyperparameters,
            probes,
        };
        let recorded = c.get("manifest_sha256")?;
        if recorded != manifest.hash() {
            return Err(Error::Invariant(format!("manifest hash {recorded} does not match its contents")));
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        FixtureManifest::decode(&container::read_file(path)?)
    }

    /// Checks every listed file in `dir` against its recorded hash.
    pub fn verify_files(&self, dir: &Path) -> Result<()> {
        for (file, expected) in &self.file_hashes {
            let found = sha256_hex(&container::read_file(&dir.join(file))?);
            if &found != expected {
                return Err(Error::Invariant(format!("{file}: hash {found} does not match manifest {expected}")));
            }
        }
        Ok(())
    }
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Logits of the first test example of every class, rounded to 1e-6.
pub fn record_probes(model: &ModelGraph, test: &LabeledDataset) -> Result<Vec<Probe>> {
    (0..test.class_count())
        .filter_map(|class| test.indices_of(class).first().map(|&i| (class, i)))
        .map(|(class, test_index)| {
            let logits = forward(model, test.image(test_index))?.logits;
            let logits = logits.data().iter().copied().map(round6).collect();
            Ok(Probe { test_index, class, logits })
        })
        .collect()
}

/// Largest absolute difference between recorded and recomputed probe
/// logits; an error when it exceeds [`PROBE_TOLERANCE`].
pub fn check_probes(manifest: &FixtureManifest, model: &ModelGraph, test: &LabeledDataset) -> Result<f64> {
    if manifest.probes.is_empty() {
        return Err(Error::Empty("manifest records no probes".into()));
    }
    let mut worst: f64 = 0.0;
    for p in &manifest.probes {
        if p.test_index >= test.len() {
            return Err(Error::Invariant(format!("probe index {} outside the test split", p.test_index)));
        }
        let logits = forward(model, test.image(p.test_index))?.logits;
        if logits.len() != p.logits.len() {
            return Err(Error::Invariant(format!(
                "probe {} records {} logits, model has {}",
                p.test_index,
                p.logits.len(),
                logits.len()
            )));
        }
        for (a, b) in logits.data().iter().zip(&p.logits) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst > PROBE_TOLERANCE {
        return Err(Error::Invariant(format!("probe logits differ by {worst:e}")));
    }
    Ok(worst)
}

/// Generates data, trains a model and writes `model.cnnmod`, `train.cnnds`,
/// `test.cnnds` and the manifest into `dir`.
pub fn export_fixture(dir: &Path, data: &DataSpec, train_spec: &TrainSpec) -> Result<FixtureManifest> {
    let (train, test) = make_datasets(data)?;
    let model = train_model(&format!("{}-{}", data.name, train_spec.arch.as_str()), &train, train_spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("model.cnnmod", container::encode_model(&model)),
        ("train.cnnds", container::encode_dataset(&train)),
        ("test.cnnds", container::encode_dataset(&test)),
    ];
    let mut file_hashes = BTreeMap::new();
    for (name, bytes) in &files {
        container::write_atomic(&dir.join(name), bytes)?;
        file_hashes.insert(name.to_string(), sha256_hex(bytes));
    }
    let mut hyperparameters: Vec<(String, String)> =
        train_spec.hyperparameters().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    hyperparameters.push(("data_seed".into(), data.seed.to_string()));
    hyperparameters.push(("noise".into(), data.noise.to_string()));
    let manifest = FixtureManifest {
        arch: train_spec.arch.as_str().to_string(),
        seed: train_spec.seed,
        model_file: files[0].0.into(),
        train_file: files[1].0.into(),
        test_file: files[2].0.into(),
        file_hashes,
        train_accuracy: round6(model_accuracy(&model, &train)?.0),
        test_accuracy: round6(model_accuracy(&model, &test)?.0),
        class_counts: train.class_counts(),
        hyperparameters,
        probes: record_probes(&model, &test)?,
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Loads a fixture directory, checking file hashes and probes.
pub fn load_fixture(dir: &Path) -> Result<(FixtureManifest, ModelGraph, LabeledDataset, LabeledDataset)> {
    let manifest = FixtureManifest::load(&dir.join(MANIFEST_FILE))?;
    manifest.verify_files(dir)?;
    let model = container::load_model(&dir.join(&manifest.model_file))?;
    let train = container::load_dataset(&dir.join(&manifest.train_file))?;
    let test = container::load_dataset(&dir.join(&manifest.test_file))?;
    check_probes(&manifest, &model, &test)?;
    Ok((manifest, model, train, test))
}
