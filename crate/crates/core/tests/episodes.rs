use std::fs;

use mskl_core::episodes::*;
use mskl_core::Error;

#[test]
fn metaset_survives_a_disk_round_trip() {
    let mut ms = synth_metaset(&SynthConfig {
        tasks: 3,
        trials_per_class: 3,
        ..Default::default()
    })
    .unwrap();
    ms.tasks[2].role = Role::Test;
    let dir = tempfile::tempdir().unwrap();
    let path = write_metaset(&ms, dir.path()).unwrap();
    let back = load_metaset(&path).unwrap();
    assert_eq!(back, ms);
}

#[test]
fn manifest_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let err = load_metaset(&missing).unwrap_err();
    assert!(err.is_validation());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\n  \"tasks\": [\n    oops\n]}").unwrap();
    match load_metaset(&bad) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }

    let unknown_label = dir.path().join("label.json");
    fs::write(dir.path().join("a.csv"), "0,1\n1,0\n").unwrap();
    fs::write(
        &unknown_label,
        r#"{"tasks": [{"name": "t", "classes": ["x", "y"], "fps": 1,
            "trials": [{"id": "a", "label": "z", "file": "a.csv"}]}]}"#,
    )
    .unwrap();
    assert!(load_metaset(&unknown_label).unwrap_err().is_validation());
}

#[test]
fn episodes_are_balanced_and_disjoint() {
    let ms = synth_metaset(&SynthConfig::default()).unwrap();
    let task = &ms.tasks[0];
    for seed in 0..10 {
        let ep = sample_episode(task, 5, 0.5, seed).unwrap();
        let mut counts = [0usize; 3];
        for s in ep.support.iter().chain(&ep.query) {
            counts[s.label] += 1;
        }
        assert_eq!(counts, [5, 5, 5]);
        assert_eq!(ep.support.len(), 3 * support_count(5, 0.5));
        assert_eq!(ep, sample_episode(task, 5, 0.5, seed).unwrap());
    }
    assert!(sample_episode(task, 13, 0.5, 0).is_err());
}

#[test]
fn pipeline_order_is_subsample_pool_normalize() {
    let ms = synth_metaset(&SynthConfig {
        tasks: 1,
        dims: 8,
        trials_per_class: 2,
        ..Default::default()
    })
    .unwrap();
    let t = &ms.tasks[0].trials[0];
    let fast = Trial {
        fps: 2.0,
        ..t.clone()
    };
    let s = subsample_fps(&fast, 1.0).unwrap();
    assert_eq!(s.len(), t.len().div_ceil(2));
    let p = pool_to_ssf(&s, 2).unwrap();
    assert_eq!(p.width(), 2);
    let n = minmax_normalize(std::slice::from_ref(&p)).unwrap();
    let (lo, hi) = n[0]
        .sequence
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    assert_eq!((lo, hi), (0.0, 1.0));
}

#[test]
fn padded_batches_carry_masks() {
    let a = mskl_core::Array::full(&[3, 2], 1.0);
    let b = mskl_core::Array::full(&[5, 2], 2.0);
    let batch = pad_batch([&a, &b]).unwrap();
    assert_eq!(batch.max_len(), 5);
    assert_eq!(batch.masks[0], [true, true, true, false, false]);
    assert_eq!(batch.masks[1], [true; 5]);
    let first = batch.sample(0);
    assert_eq!(&first.data()[..6], a.data());
    assert!(first.data()[6..].iter().all(|&v| v == 0.0));
    assert_eq!(batch.sample(1), b);
}
