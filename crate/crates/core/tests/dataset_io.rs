use std::fs;

use sdtr_core::dataset::{
    generate_samples, read_dataset, read_meta, write_dataset, DatasetError, DatasetMeta, SampleDims, FORMAT_VERSION,
};
use sdtr_core::labels::{LabelConfig, Task};
use sdtr_core::scene::SceneConfig;

fn meta(scene: SceneConfig, labels: LabelConfig, seeds: Vec<u64>) -> DatasetMeta {
    DatasetMeta {
        version: FORMAT_VERSION,
        dims: SampleDims::new(&scene, &labels),
        scene,
        labels,
        seeds,
    }
}

#[test]
fn round_trip_is_bit_identical() {
    let scene = SceneConfig::default();
    let labels = LabelConfig {
        task: Task::Joint,
        ..LabelConfig::default()
    };
    let seeds = vec![3, 14, 15];
    let samples = generate_samples(&scene, &labels, &seeds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = meta(scene, labels, seeds);
    write_dataset(dir.path(), &m, &samples).unwrap();
    let (m2, back) = read_dataset(dir.path()).unwrap();
    assert_eq!(m2, m);
    assert_eq!(read_meta(dir.path()).unwrap(), m);
    assert_eq!(back.len(), 3);
    for (a, b) in samples.iter().zip(&back) {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.images), bits(&b.images));
        assert_eq!(a, b);
    }
}

#[test]
fn truncation_names_the_broken_record() {
    let scene = SceneConfig::default();
    let labels = LabelConfig::default();
    let seeds = vec![1, 2, 3];
    let samples = generate_samples(&scene, &labels, &seeds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &meta(scene, labels, seeds), &samples).unwrap();
    let file = dir.path().join("samples.bin");
    let bytes = fs::read(&file).unwrap();
    fs::write(&file, &bytes[..bytes.len() - 100]).unwrap();
    match read_dataset(dir.path()) {
        Err(DatasetError::Corrupt { index, .. }) => assert_eq!(index, 2),
        other => panic!("expected corrupt record error, got {other:?}"),
    }
}

#[test]
fn fifty_desk_scenes_fit_in_budget() {
    let scene = SceneConfig::default();
    let labels = LabelConfig {
        task: Task::Joint,
        ..LabelConfig::default()
    };
    let seeds: Vec<u64> = (0..50).collect();
    let samples = generate_samples(&scene, &labels, &seeds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &meta(scene, labels, seeds), &samples).unwrap();
    let total: u64 = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().metadata().unwrap().len())
        .sum();
    assert!(total < 200 * 1024 * 1024, "{total} bytes");
}
