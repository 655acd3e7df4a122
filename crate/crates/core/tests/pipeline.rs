mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use common::*;
use concern::composer::*;
use concern::error::Error;
use concern::graph::LayerKind;
use concern::inference::{forward, masked_forward};
use concern::metrics::*;
use concern::modularizer::*;
use concern::tensor::Tensor;

fn module(class: usize, pipeline: Pipeline) -> Module {
    let f = fixture_a();
    build_module(Arc::clone(&f.model), &f.train, class, 200, pipeline, &BuildOptions::default()).unwrap()
}

#[test]
fn one_module_per_class() {
    let modules: Vec<Module> = (0..10).map(|c| module(c, Pipeline::CiTiMc)).collect();
    let classes: BTreeSet<usize> = modules.iter().map(Module::concerned_class).collect();
    assert_eq!(classes.len(), 10);
    assert!(modules.iter().all(|m| m.provenance() == "fixture-a" && m.pipeline_tag() == "ci-ti-mc"));
}

#[test]
fn module_logits_are_masked_model_logits() {
    let f = fixture_a();
    let m = module(4, Pipeline::CiTiMcBlnBi);
    for x in f.test.images().iter().take(20) {
        let direct = masked_forward(&f.model, m.map(), Some(m.head()), x).unwrap();
        assert_eq!(direct.logits, m.predict(x).unwrap().logits);
    }
}

#[test]
fn empty_map_module_keeps_concerned_logit() {
    let f = fixture_a();
    let m = Module::channel_only(Arc::clone(&f.model), 6, "fixture-a").unwrap();
    for x in f.test.images().iter().take(50) {
        let original = forward(&f.model, x).unwrap().logits;
        assert_eq!(m.predict(x).unwrap().logits.data()[0], original.data()[6]);
    }
}

#[test]
fn save_load_compose_matches_in_memory() {
    let f = fixture_a();
    let dir = tempfile::tempdir().unwrap();
    let modules: Vec<Module> = (0..10).map(|c| module(c, Pipeline::CiTiMcBln)).collect();
    let loaded: Vec<Module> = modules
        .iter()
        .enumerate()
        .map(|(c, m)| {
            let path = dir.path().join(format!("{c}.cnnmodule"));
            save_module(m, &path).unwrap();
            load_module(&path, Arc::clone(&f.model)).unwrap()
        })
        .collect();
    let (a, b) = (ModuleSet::new(modules).unwrap(), ModuleSet::new(loaded).unwrap());
    for x in f.test.images().iter().take(100) {
        assert_eq!(
            compose_predict(&a, x, VoteMode::Probability).unwrap(),
            compose_predict(&b, x, VoteMode::Probability).unwrap()
        );
    }
}

/// Deactivated positions and nodes, without the observation counter.
fn positions(m: &Module) -> Vec<(usize, BTreeSet<usize>)> {
    m.map().positional_entries().chain(m.map().dense_entries()).map(|(l, s)| (l, s.clone())).collect()
}

#[test]
fn continual_update_is_idempotent() {
    let fb = fixture_b();
    let foreign: Vec<Tensor> = images_of(&fb.train, 2, 100).into_iter().cloned().collect();
    for direction in [ClDirection::Reinstate, ClDirection::Remove] {
        let m = module(1, Pipeline::CiTiMcBln);
        let once = continual_update(&m, &foreign, direction).unwrap();
        let twice = continual_update(&once, &foreign, direction).unwrap();
        assert_eq!(positions(&once), positions(&twice), "{direction:?}");
        assert_eq!(once.pipeline_tag(), "ci-ti-mc-bln+cl");
        match direction {
            ClDirection::Reinstate => assert!(once.map().is_subset_of(m.map())),
            ClDirection::Remove => assert!(m.map().is_subset_of(once.map())),
        }
    }
    let m = module(1, Pipeline::CiTiMc);
    assert_eq!(continual_update(&m, &[], ClDirection::Reinstate).unwrap(), m);
}

#[test]
fn jaccard_matches_an_independent_count() {
    let f = fixture_a();
    let model = &f.model;
    let universe: usize = (0..model.len())
        .filter(|&l| match model.layer(l).kind {
            LayerKind::Conv2D(_) | LayerKind::Pool { .. } | LayerKind::Flatten => true,
            LayerKind::Dense { .. } => l != model.head_index(),
            _ => false,
        })
        .map(|l| model.output_shape(l).iter().product::<usize>())
        .sum();
    let m = module(0, Pipeline::CiTiMcBlnBi);
    let inactive: usize = m.map().positional_entries().chain(m.map().dense_entries()).map(|(_, s)| s.len()).sum();
    assert_eq!(jaccard(&m), (universe - inactive) as f64 / universe as f64);
    assert!(jaccard(&m) < 1.0);
    assert_eq!(jaccard(&Module::channel_only(Arc::clone(model), 0, "x").unwrap()), 1.0);
}

#[test]
fn reuse_across_datasets() {
    let (fa, fb) = (fixture_a(), fixture_b());
    let a = ModuleSet::new(vec![module(0, Pipeline::CiTiMc)]).unwrap();
    let b_module =
        build_module(Arc::clone(&fb.model), &fb.train, 3, 200, Pipeline::CiTiMc, &BuildOptions::default()).unwrap();
    let b = ModuleSet::new(vec![b_module]).unwrap();
    let pair = reuse(&[&a, &b], &[ClassLabel::new("fixture-a", 0), ClassLabel::new("fixture-b", 3)]).unwrap();
    let mut examples = labelled_examples(&pair, &fa.test);
    examples.extend(labelled_examples(&pair, &fb.test));
    assert_eq!(examples.len(), 200);
    let report = evaluate_examples(&pair, &examples, VoteMode::Probability).unwrap();
    assert!(report.top1 > 0.5 && report.top5 == 1.0);

    let other = Arc::new(random_model(1, false));
    let ds = random_dataset(1, 12);
    let small = build_module(other, &ds, 0, 2, Pipeline::CiTiMc, &BuildOptions::default()).unwrap();
    let c = ModuleSet::new(vec![small]).unwrap();
    let err = reuse(&[&a, &c], &[ClassLabel::new("fixture-a", 0), ClassLabel::new("rand", 0)]).unwrap_err();
    assert!(matches!(err, Error::InputShapeMismatch(_)));
}

#[test]
fn channel_only_evaluation_reproduces_model_accuracy() {
    let f = fixture_a();
    let set =
        ModuleSet::new((0..10).map(|c| Module::channel_only(Arc::clone(&f.model), c, "fixture-a").unwrap()).collect())
            .unwrap();
    let report = evaluate(&set, &f.test, VoteMode::Logit).unwrap();
    assert_eq!(report.top1, model_accuracy(&f.model, &f.test).unwrap().0);
    assert!(report.top1 <= report.top5);
}

#[test]
fn report_schema_is_pipeline_independent() {
    let f = fixture_a();
    let keys = |p: Pipeline| -> Vec<String> {
        let set = ModuleSet::new((0..10).map(|c| module(c, p)).collect()).unwrap();
        let examples: Vec<_> = labelled_examples(&set, &f.test).into_iter().take(100).collect();
        let report = evaluate_examples(&set, &examples, VoteMode::Probability).unwrap();
        report.to_key_values().lines().map(|l| l.split(" = ").next().unwrap().to_string()).collect()
    };
    assert_eq!(keys(Pipeline::CiTiMc), keys(Pipeline::CiTiMcBln));
}

#[test]
fn top_k_matches_a_hand_tally() {
    let f = fixture_a();
    let set = ModuleSet::new((0..10).map(|c| module(c, Pipeline::CiTiMcBln)).collect()).unwrap();
    let examples: Vec<_> = labelled_examples(&set, &f.test).into_iter().take(200).collect();
    let report = evaluate_examples(&set, &examples, VoteMode::Probability).unwrap();
    let (mut top1, mut top5) = (0, 0);
    let mut confusion = vec![vec![0usize; 10]; 10];
    for (x, label) in &examples {
        let votes = compose_predict(&set, x, VoteMode::Probability).unwrap();
        confusion[label.class][votes[0].label.class] += 1;
        top1 += usize::from(votes[0].label == *label);
        top5 += usize::from(votes.iter().take(5).any(|v| v.label == *label));
    }
    let diagonal: usize = (0..10).map(|c| confusion[c][c]).sum();
    assert_eq!(diagonal, top1);
    assert_eq!(report.top1, top1 as f64 / 200.0);
    assert_eq!(report.top5, top5 as f64 / 200.0);
    for t in &report.per_class {
        assert_eq!(t.correct, confusion[t.label.class][t.label.class]);
    }
}

#[test]
fn verification_on_fixture() {
    let f = fixture_a();
    let set = ModuleSet::new((0..10).map(|c| module(c, Pipeline::CiTiMcBln)).collect()).unwrap();
    let watched = [ClassLabel::new("fixture-a", 3)];
    let (mut skipped, mut confirmed, mut flagged) = (0, 0, 0);
    for x in f.test.images().iter().take(200) {
        match verify_with_modules(&f.model, "fixture-a", &set, x, &watched, VoteMode::Probability).unwrap() {
            Verdict::NotReVerified { model } => {
                assert_ne!(model, watched[0]);
                skipped += 1;
            }
            Verdict::Confirmed { label } => {
                assert_eq!(label, watched[0]);
                confirmed += 1;
            }
            Verdict::Flagged { model, modules } => {
                assert_eq!(model, watched[0]);
                assert_ne!(modules, watched[0]);
                flagged += 1;
            }
        }
    }
    assert!(skipped > 0 && confirmed > 0);
    assert_eq!(skipped + confirmed + flagged, 200);
}

#[test]
fn empty_test_split_is_an_error() {
    let set = ModuleSet::new(vec![module(0, Pipeline::CiTiMc)]).unwrap();
    assert!(evaluate_examples(&set, &[], VoteMode::Probability).is_err());
}
