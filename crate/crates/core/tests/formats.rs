mod common;

use std::sync::Arc;

use common::*;
use concern::container::*;
use concern::error::Error;
use concern::manifest::*;
use concern::modularizer::*;
use concern::synth::{Arch, DataSpec, TrainSpec};

fn patch(bytes: &[u8], from: &str, to: &str) -> Vec<u8> {
    let split = bytes.windows(4).position(|w| w == b"end\n").unwrap() + 4;
    let header = String::from_utf8(bytes[..split].to_vec()).unwrap().replacen(from, to, 1);
    let mut out = header.into_bytes();
    out.extend_from_slice(&bytes[split..]);
    out
}

#[test]
fn model_files_round_trip_for_both_architectures() {
    let dir = tempfile::tempdir().unwrap();
    for f in [fixture_a(), fixture_a_resnet()] {
        let path = dir.path().join("m.cnnmod");
        save_model(&f.model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, *f.model);
        assert_eq!(back.hash(), f.model.hash());
        assert_eq!(std::fs::read(&path).unwrap(), encode_model(&back));
    }
}

#[test]
fn model_file_errors() {
    let bytes = encode_model(&fixture_a().model);
    assert!(matches!(decode_model(&patch(&bytes, "version = 1", "version = 2")), Err(Error::VersionMismatch { .. })));
    assert!(decode_model(&bytes[..bytes.len() - 3]).is_err());
    assert!(decode_model(&patch(&bytes, "CNNMOD", "CNNXXX")).is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_model(&dir.path().join("missing.cnnmod")), Err(Error::Io { .. })));
}

#[test]
fn datasets_reread_pixel_exact() {
    let f = fixture_a();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.cnnds");
    save_dataset(&f.test, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, f.test);
    for (a, b) in back.images().iter().zip(f.test.images()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back.class_counts(), vec![100; 10]);
}

#[test]
fn module_needs_its_own_model() {
    let (fa, fb) = (fixture_a(), fixture_b());
    let m =
        build_module(Arc::clone(&fa.model), &fa.train, 0, 50, Pipeline::CiTiMcBln, &BuildOptions::default()).unwrap();
    let bytes = encode_module(&m);
    assert_eq!(module_model_hash(&bytes).unwrap(), fa.model.hash());
    assert!(matches!(decode_module(&bytes, Arc::clone(&fb.model)), Err(Error::ModelHashMismatch { .. })));
    assert!(matches!(
        decode_module(&patch(&bytes, "version = 1", "version = 9"), Arc::clone(&fa.model)),
        Err(Error::VersionMismatch { .. })
    ));
}

#[test]
fn fixture_probe_check_catches_altered_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = DataSpec { train_per_class: 30, test_per_class: 5, ..DataSpec::new("probe", 8) };
    let spec = TrainSpec { epochs: 3, ..TrainSpec::new(Arch::TinyResNet, 2) };
    let manifest = export_fixture(dir.path(), &data, &spec).unwrap();
    assert_eq!(manifest.probes.len(), 10);
    assert!(manifest.probes.iter().enumerate().all(|(c, p)| p.class == c && p.test_index == c));
    let (_, model, _, test) = load_fixture(dir.path()).unwrap();
    assert!(check_probes(&manifest, &model, &test).unwrap() <= PROBE_TOLERANCE);

    let other = export_fixture(&dir.path().join("other"), &data, &TrainSpec { seed: 3, ..spec }).unwrap();
    let other_model = load_model(&dir.path().join("other").join(&other.model_file)).unwrap();
    assert!(check_probes(&manifest, &other_model, &test).is_err());
}
