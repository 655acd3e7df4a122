use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use concern::composer::{self, continual_update, verify_with_modules, ClassLabel, ModuleSet, Verdict, VoteMode};
use concern::concern::Sampling;
use concern::container::{load_dataset, load_model, write_atomic};
use concern::graph::LabeledDataset;
use concern::manifest::{check_probes, export_fixture, load_fixture};
use concern::metrics::{self, co2e_from_averages, evaluate_examples, jaccard, labelled_examples, EvalReport, PowerLog};
use concern::modularizer::{build_module, load_module, save_module, BacktrackConfig, BuildOptions, Module};
use concern::scenario::{LoadedSet, ModelStore, Scenario};
use concern::synth::{DataSpec, TrainSpec};
use concern::tensor::Tensor;
use rayon::prelude::*;

use crate::report::Report;
use crate::*;

fn parse_classes(spec: &str, class_count: usize) -> Result<Vec<usize>> {
    if spec == "all" {
        return Ok((0..class_count).collect());
    }
    let mut classes = Vec::new();
    for part in spec.split(',') {
        let c: usize = part.trim().parse().with_context(|| format!("bad class {part:?} in --classes"))?;
        if c >= class_count {
            bail!("class {c} out of range, the model has {class_count} classes");
        }
        if !classes.contains(&c) {
            classes.push(c);
        }
    }
    if classes.is_empty() {
        bail!("--classes selects nothing");
    }
    Ok(classes)
}

fn module_file_name(label: &ClassLabel, suffix: &str) -> String {
    format!("{}-{}{suffix}.cnnmodule", label.dataset, label.class)
}

fn write_manifest(path: &Path, scenario: &Scenario) -> Result<()> {
    write_atomic(path, scenario.render().as_bytes())?;
    Ok(())
}

pub fn decompose(a: DecomposeArgs) -> Result<Report> {
    if !a.delta.is_finite() || a.delta < 0.0 {
        bail!("--delta must be a non-negative number, got {}", a.delta);
    }
    if a.n_inputs == 0 {
        bail!("--n-inputs must be at least 1");
    }
    let model = Arc::new(load_model(&a.model)?);
    let data = load_dataset(&a.data)?;
    let classes = parse_classes(&a.classes, model.class_count())?;
    let options = BuildOptions {
        backtrack: BacktrackConfig { delta: a.delta, rule: a.rule.into() },
        sampling: a.seed.map_or(Sampling::DatasetOrder, Sampling::Seeded),
        ..BuildOptions::default()
    };
    let pipeline = a.pipeline.into();
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;

    let start = Instant::now();
    let built: Vec<(usize, Module, f64)> = classes
        .par_iter()
        .map(|&c| {
            let t = Instant::now();
            let m = build_module(Arc::clone(&model), &data, c, a.n_inputs, pipeline, &options)?;
            log::info!("class {c} built in {:.2}s", t.elapsed().as_secs_f64());
            Ok((c, m, t.elapsed().as_secs_f64()))
        })
        .collect::<Result<_>>()?;

    let mut report = Report::new();
    report.line(format!("model {} ({}), pipeline {}", model.name(), a.model.display(), pipeline));
    report.line(format!("{:<8} {:>10} {:>8} {:>8}  file", "class", "inactive", "JI", "secs"));
    let mut scenario = Scenario { models: vec![a.model.clone()], ..Scenario::default() };
    for (c, m, secs) in &built {
        let path = a.out_dir.join(format!("class-{c}.cnnmodule"));
        save_module(m, &path)?;
        let ji = jaccard(m);
        report.line(format!("{c:<8} {:>10} {ji:>8.4} {secs:>8.2}  {}", m.map().inactive_count(), path.display()));
        report.kv(format!("class.{c}.inactive"), m.map().inactive_count()).kv(format!("class.{c}.jaccard"), ji);
        scenario.modules.push((None, path));
    }
    let manifest = a.out_dir.join("set.txt");
    write_manifest(&manifest, &scenario)?;
    report.line(format!(
        "{} modules in {:.2}s, set manifest {}",
        built.len(),
        start.elapsed().as_secs_f64(),
        manifest.display()
    ));
    report.kv("modules", built.len()).kv("pipeline", pipeline).kv("manifest", manifest.display());
    Ok(report)
}

struct SetContext {
    scenario: Scenario,
    store: ModelStore,
    loaded: LoadedSet,
    vote: VoteMode,
    tests: Vec<LabeledDataset>,
}

fn load_context(a: &SetArgs) -> Result<SetContext> {
    let scenario = Scenario::load(&a.scenario)?;
    let store = ModelStore::load(&scenario.models)?;
    let loaded = LoadedSet::load(&store, &scenario.modules)?;
    let vote = a.vote.map(VoteMode::from).or(scenario.vote).unwrap_or_default();
    let tests =
        scenario.tests.iter().chain(&a.test).map(|p| load_dataset(p).map_err(Into::into)).collect::<Result<_>>()?;
    Ok(SetContext { scenario, store, loaded, vote, tests })
}

fn evaluate_on(set: &ModuleSet, tests: &[LabeledDataset], vote: VoteMode) -> Result<EvalReport> {
    if tests.is_empty() {
        bail!("no test dataset given");
    }
    let examples: Vec<(&Tensor, ClassLabel)> = tests.iter().flat_map(|ds| labelled_examples(set, ds)).collect();
    if examples.is_empty() {
        bail!("no test example carries a label of the module set");
    }
    Ok(evaluate_examples(set, &examples, vote)?)
}

fn add_eval(report: &mut Report, title: &str, prefix: &str, eval: &EvalReport) {
    report.line(format!("== {title}")).block(&eval.to_table());
    report.kv_block(prefix, &eval.to_key_values());
}

fn set_manifest(
    report: &mut Report,
    set_out: Option<&PathBuf>,
    loaded: &LoadedSet,
    models: Vec<PathBuf>,
) -> Result<()> {
    if let Some(path) = set_out {
        write_manifest(path, &loaded.manifest(models))?;
        report.line(format!("set manifest written to {}", path.display()));
    }
    Ok(())
}

pub fn compose(a: SetArgs) -> Result<Report> {
    let cx = load_context(&a)?;
    let eval = evaluate_on(&cx.loaded.set, &cx.tests, cx.vote)?;
    let mut report = Report::new();
    add_eval(&mut report, &format!("composed set of {} modules", cx.loaded.set.len()), "", &eval);
    Ok(report)
}

/// Foreign examples per label from the scenario's `continual` lines.
fn continual_sources(scenario: &Scenario, limit: usize) -> Result<BTreeMap<ClassLabel, Vec<Tensor>>> {
    let mut cache: BTreeMap<PathBuf, LabeledDataset> = BTreeMap::new();
    let mut foreign: BTreeMap<ClassLabel, Vec<Tensor>> = BTreeMap::new();
    for src in &scenario.continual {
        if !cache.contains_key(&src.dataset) {
            cache.insert(src.dataset.clone(), load_dataset(&src.dataset)?);
        }
        let ds = &cache[&src.dataset];
        if src.class >= ds.class_count() {
            bail!("continual source {}: class {} out of range", src.dataset.display(), src.class);
        }
        let examples = ds.indices_of(src.class).into_iter().take(limit).map(|i| ds.image(i).clone());
        foreign.entry(src.label.clone()).or_default().extend(examples);
    }
    Ok(foreign)
}

/// Applies continual learning to every label with foreign examples. Returns
/// the updated set and the updated labels.
fn apply_continual(
    set: &ModuleSet,
    foreign: &BTreeMap<ClassLabel, Vec<Tensor>>,
    cl: &ClArgs,
) -> Result<(ModuleSet, Vec<(ClassLabel, Module)>)> {
    let updated: Vec<(ClassLabel, Module)> = foreign
        .par_iter()
        .map(|(label, examples)| {
            let module =
                set.get(label).with_context(|| format!("continual source for {label}, which is not in the set"))?;
            let m = continual_update(module, examples, cl.direction.into())?;
            log::info!(
                "{label}: {} -> {} inactive after continual learning",
                module.map().inactive_count(),
                m.map().inactive_count()
            );
            Ok((label.clone(), m))
        })
        .collect::<Result<_>>()?;
    let mut out = set.clone();
    for (label, m) in &updated {
        out = composer::replace(&out, label, m.clone())?;
    }
    Ok((out, updated))
}

fn save_updated(dir: &Path, updated: &[(ClassLabel, Module)], files: &mut [(ClassLabel, PathBuf)]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (label, m) in updated {
        let path = dir.join(module_file_name(label, "-cl"));
        save_module(m, &path)?;
        if let Some(slot) = files.iter_mut().find(|(l, _)| l == label) {
            slot.1 = path;
        }
    }
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn reuse(a: ReuseArgs) -> Result<Report> {
    let cx = load_context(&a.set)?;
    let mut selection = cx.scenario.select.clone();
    selection.extend(a.select.iter().cloned());
    if selection.is_empty() {
        bail!("nothing selected: give --select or `select` lines");
    }
    let set = composer::reuse(&[&cx.loaded.set], &selection)?;
    let models: std::collections::BTreeSet<&str> = set.entries().iter().map(|(_, m)| m.model_hash()).collect();
    if models.len() > 1 {
        log::warn!("selected modules come from {} different models", models.len());
    }
    let mut report = Report::new();
    let baseline = evaluate_on(&set, &cx.tests, cx.vote)?;
    add_eval(&mut report, &format!("reused {} modules", set.len()), "baseline", &baseline);

    let mut files: Vec<(ClassLabel, PathBuf)> =
        cx.loaded.files.iter().filter(|(l, _)| set.contains(l)).cloned().collect();
    let mut result = set;
    if a.continual {
        let foreign = continual_sources(&cx.scenario, a.cl.cl_examples)?;
        if foreign.is_empty() {
            bail!("--continual needs `continual` lines in the scenario");
        }
        let (updated_set, updated) = apply_continual(&result, &foreign, &a.cl)?;
        let after = evaluate_on(&updated_set, &cx.tests, cx.vote)?;
        add_eval(&mut report, "after continual learning", "continual", &after);
        report.line(format!("top-1 {:.4} -> {:.4}", baseline.top1, after.top1));
        if let Some(out) = &a.set_out {
            save_updated(&parent_dir(out), &updated, &mut files)?;
        }
        result = updated_set;
    }
    let loaded = LoadedSet { set: result, files };
    set_manifest(&mut report, a.set_out.as_ref(), &loaded, cx.store.paths())?;
    Ok(report)
}

pub fn replace(a: ReplaceArgs) -> Result<Report> {
    let cx = load_context(&a.set)?;
    let mut replacements = cx.scenario.replace.clone();
    replacements.extend(a.with.iter().cloned());
    if replacements.is_empty() {
        bail!("nothing to replace: give --with or `replace` lines");
    }
    let before = evaluate_on(&cx.loaded.set, &cx.tests, cx.vote)?;
    let mut set = cx.loaded.set.clone();
    let mut files = cx.loaded.files.clone();
    for (label, path) in &replacements {
        let module = cx.store.load_module(path).with_context(|| format!("loading replacement {}", path.display()))?;
        set = composer::replace(&set, label, module)?;
        if let Some(slot) = files.iter_mut().find(|(l, _)| l == label) {
            slot.1 = path.clone();
        }
    }
    let after = evaluate_on(&set, &cx.tests, cx.vote)?;
    let mut report = Report::new();
    add_eval(&mut report, "before", "before", &before);
    add_eval(&mut report, &format!("after replacing {}", replacements.len()), "after", &after);
    report.line(format!("top-1 {:.4} -> {:.4}", before.top1, after.top1));
    set_manifest(&mut report, a.set_out.as_ref(), &LoadedSet { set, files }, cx.store.paths())?;
    Ok(report)
}

pub fn remove(a: RemoveArgs) -> Result<Report> {
    let cx = load_context(&a.set)?;
    let mut labels = cx.scenario.remove.clone();
    labels.extend(a.label.iter().cloned());
    if labels.is_empty() {
        bail!("nothing to remove: give --label or `remove` lines");
    }
    let before = evaluate_on(&cx.loaded.set, &cx.tests, cx.vote)?;
    let mut set = cx.loaded.set.clone();
    for label in &labels {
        set = composer::remove(&set, label)?;
    }
    let after = evaluate_on(&set, &cx.tests, cx.vote)?;
    let mut report = Report::new();
    add_eval(&mut report, "before", "before", &before);
    add_eval(&mut report, &format!("after removing {}", labels.len()), "after", &after);
    let files = cx.loaded.files.iter().filter(|(l, _)| set.contains(l)).cloned().collect();
    set_manifest(&mut report, a.set_out.as_ref(), &LoadedSet { set, files }, cx.store.paths())?;
    Ok(report)
}

pub fn verify(a: VerifyArgs) -> Result<Report> {
    let cx = load_context(&a.set)?;
    let model = load_model(&a.model)?;
    let mut watched = cx.scenario.watch.clone();
    watched.extend(a.watch.iter().cloned());
    if watched.is_empty() {
        bail!("nothing watched: give --watch or `watch` lines");
    }
    if cx.tests.is_empty() {
        bail!("no test dataset given");
    }
    let examples: Vec<(&Tensor, ClassLabel)> = cx
        .tests
        .iter()
        .flat_map(|ds| ds.images().iter().zip(ds.labels()).map(|(x, &c)| (x, ClassLabel::new(ds.name(), c))))
        .collect();
    let verdicts: Vec<Verdict> = examples
        .par_iter()
        .map(|(x, _)| verify_with_modules(&model, &a.dataset_name, &cx.loaded.set, x, &watched, cx.vote))
        .collect::<concern::Result<_>>()?;
    let (mut skipped, mut confirmed, mut flagged, mut confirmed_wrong, mut flagged_model_wrong) = (0, 0, 0, 0, 0);
    for (v, (_, truth)) in verdicts.iter().zip(&examples) {
        match v {
            Verdict::NotReVerified { .. } => skipped += 1,
            Verdict::Confirmed { label } => {
                confirmed += 1;
                confirmed_wrong += usize::from(label != truth);
            }
            Verdict::Flagged { model, .. } => {
                flagged += 1;
                flagged_model_wrong += usize::from(model != truth);
            }
        }
    }
    let mut report = Report::new();
    let watched_text: Vec<String> = watched.iter().map(ToString::to_string).collect();
    report.line(format!("watched {}", watched_text.join(" ")));
    report.line(format!("examples            {}", examples.len()));
    report.line(format!("not re-verified     {skipped}"));
    report.line(format!("confirmed           {confirmed} ({confirmed_wrong} of them wrong)"));
    report.line(format!("flagged             {flagged} ({flagged_model_wrong} where the model was wrong)"));
    report
        .kv("examples", examples.len())
        .kv("not_reverified", skipped)
        .kv("confirmed", confirmed)
        .kv("confirmed_wrong", confirmed_wrong)
        .kv("flagged", flagged)
        .kv("flagged_model_wrong", flagged_model_wrong);
    Ok(report)
}

pub fn continual(a: ContinualArgs) -> Result<Report> {
    let cx = load_context(&SetArgs { scenario: a.scenario.clone(), test: Vec::new(), vote: None })?;
    let foreign = continual_sources(&cx.scenario, a.cl.cl_examples)?;
    if foreign.is_empty() {
        bail!("the scenario has no `continual` lines");
    }
    let (set, updated) = apply_continual(&cx.loaded.set, &foreign, &a.cl)?;
    let mut files = cx.loaded.files.clone();
    save_updated(&a.out_dir, &updated, &mut files)?;
    let mut report = Report::new();
    report.line(format!(
        "{:<24} {:>8} {:>10} {:>10} {:>8} {:>8}",
        "label", "foreign", "inactive", "after", "JI", "after"
    ));
    for (label, m) in &updated {
        let old = cx.loaded.set.get(label).expect("updated labels come from the set");
        report.line(format!(
            "{:<24} {:>8} {:>10} {:>10} {:>8.4} {:>8.4}",
            label.to_string(),
            foreign[label].len(),
            old.map().inactive_count(),
            m.map().inactive_count(),
            jaccard(old),
            jaccard(m)
        ));
        report.kv(format!("{label}.inactive_before"), old.map().inactive_count());
        report.kv(format!("{label}.inactive_after"), m.map().inactive_count());
        report.kv(format!("{label}.jaccard"), jaccard(m));
    }
    let manifest = a.out_dir.join("set.txt");
    write_manifest(&manifest, &LoadedSet { set, files }.manifest(cx.store.paths()))?;
    report.line(format!("set manifest written to {}", manifest.display()));
    Ok(report)
}

pub fn jaccard_index(a: JaccardArgs) -> Result<Report> {
    let model = Arc::new(load_model(&a.model)?);
    let module = load_module(&a.module, model)?;
    let ji = jaccard(&module);
    let mut report = Report::new();
    report.line(format!("{ji:.6}"));
    report
        .kv("jaccard", ji)
        .kv("label", ClassLabel::new(module.provenance(), module.concerned_class()))
        .kv("pipeline", module.pipeline_tag())
        .kv("inactive", module.map().inactive_count());
    Ok(report)
}

pub fn co2e(a: Co2eArgs) -> Result<Report> {
    let file = std::fs::File::open(&a.log).with_context(|| format!("opening {}", a.log.display()))?;
    let mut log = PowerLog::from_csv(file)?;
    log.gpu_count = a.gpus;
    log.baseline_cpu_w = a.baseline_cpu;
    log.baseline_dram_w = a.baseline_dram;
    let avg = log.averages();
    let e = co2e_from_averages(a.hours, avg, a.gpus)?;
    let mut report = Report::new();
    report.line("units: t in hours, power in watts, energy in kWh, CO2e in lbs");
    report.line(format!("samples    {}", log.samples().len()));
    report.line(format!("avg cpu    {:.3} W", avg.cpu_w));
    report.line(format!("avg dram   {:.3} W", avg.dram_w));
    report.line(format!("avg gpu    {:.3} W x {}", avg.gpu_w, a.gpus));
    report.line(format!("p_t        {:.6} kWh (PUE {})", e.kwh, metrics::PUE));
    report.line(format!("co2e       {:.6} lbs", e.lbs));
    report
        .kv("hours", a.hours)
        .kv("cpu_w", avg.cpu_w)
        .kv("dram_w", avg.dram_w)
        .kv("gpu_w", avg.gpu_w)
        .kv("gpus", a.gpus)
        .kv("kwh", e.kwh)
        .kv("co2e_lbs", e.lbs);
    Ok(report)
}

pub fn eval(a: EvalArgs) -> Result<Report> {
    let mut report = Report::new();
    if let Some(path) = &a.model {
        if a.test.is_empty() {
            bail!("--model needs at least one --test dataset");
        }
        let model = load_model(path)?;
        for (i, t) in a.test.iter().enumerate() {
            let ds = load_dataset(t)?;
            let (top1, top5) = metrics::model_accuracy(&model, &ds)?;
            report.line(format!("{}: top-1 {top1:.4} top-5 {top5:.4} over {} examples", t.display(), ds.len()));
            report.kv(format!("test.{i}.top1"), top1).kv(format!("test.{i}.top5"), top5);
        }
        return Ok(report);
    }
    let scenario = a.scenario.expect("clap requires --scenario without --model");
    let cx = load_context(&SetArgs { scenario, test: a.test, vote: a.vote })?;
    let eval = evaluate_on(&cx.loaded.set, &cx.tests, cx.vote)?;
    add_eval(&mut report, &format!("set of {} modules", cx.loaded.set.len()), "", &eval);
    Ok(report)
}

pub fn synth(a: SynthArgs) -> Result<Report> {
    let data = DataSpec {
        classes: a.classes,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        ..DataSpec::new(a.name.clone(), a.data_seed)
    };
    let spec = TrainSpec { epochs: a.epochs, ..TrainSpec::new(a.arch.into(), a.seed) };
    let manifest = export_fixture(&a.out_dir, &data, &spec)?;
    let mut report = Report::new();
    report.line(format!("fixture {} ({}) in {}", a.name, manifest.arch, a.out_dir.display()));
    report.line(format!("train accuracy {:.4}, test accuracy {:.4}", manifest.train_accuracy, manifest.test_accuracy));
    report
        .kv("arch", &manifest.arch)
        .kv("train_accuracy", manifest.train_accuracy)
        .kv("test_accuracy", manifest.test_accuracy)
        .kv("manifest_sha256", manifest.hash());
    Ok(report)
}

pub fn check_fixture(a: CheckFixtureArgs) -> Result<Report> {
    let (manifest, model, _, test) = load_fixture(&a.dir)?;
    let worst = check_probes(&manifest, &model, &test)?;
    let mut report = Report::new();
    report.line(format!("{}: files match, {} probes within {worst:e}", a.dir.display(), manifest.probes.len()));
    report.kv("probes", manifest.probes.len()).kv("max_probe_diff", worst).kv("manifest_sha256", manifest.hash());
    Ok(report)
}
