use std::fs;

use bnnkit::compile::{compile_model, CompiledModel};
use bnnkit::data::{balance, build_manifest, synth_quadrant_dataset, Dataset, Image, Split};
use bnnkit::engine::{classify, classify_batch, classify_batch_sequential, classify_folded, trace};
use bnnkit::netspec::{Arch, NetworkSpec};
use bnnkit::par::Execution;
use bnnkit::perfmodel::FoldingConfig;
use bnnkit::train::{forward_train, ForwardOptions, TrainConfig, TrainedModel, Trainer};

fn briefly_trained(arch: Arch) -> (TrainedModel, Dataset) {
    let spec = NetworkSpec::builtin(arch);
    let data = synth_quadrant_dataset(16, 1);
    let config = TrainConfig {
        batch_size: 16,
        seed: 2,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(TrainedModel::init(&spec, 2).unwrap(), config).unwrap();
    t.train_epoch(&data).unwrap();
    (t.model, data)
}

#[test]
fn every_engine_layer_matches_latent_forward() {
    let (model, data) = briefly_trained(Arch::NCnv);
    let compiled = compile_model(&model, &model.spec).unwrap();
    for image in data.images.iter().take(8) {
        let fwd = forward_train(&model, &[image], ForwardOptions::inference()).unwrap();
        let t = trace(&compiled, image).unwrap();
        for (i, stream) in t.layers.iter().enumerate() {
            let Some(stream) = stream else { continue };
            let latent = fwd.output(i);
            assert_eq!((stream.height, stream.width, stream.channels), (latent.h, latent.w, latent.c));
            let bits: Vec<f64> = stream
                .vectors
                .iter()
                .flat_map(|v| (0..v.bit_len()).map(move |k| if v.get(k) { 1.0 } else { -1.0 }))
                .collect();
            assert_eq!(bits, latent.data, "layer {}", model.spec.layers[i].name);
        }
        let scale = model.logit_scale();
        let want: Vec<f64> = t.logits.iter().map(|&l| l as f64 * scale).collect();
        for (a, b) in want.iter().zip(fwd.logits_of(0)) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn folded_and_batched_execution_agree() {
    let (model, data) = briefly_trained(Arch::MuCnv);
    let compiled = compile_model(&model, &model.spec).unwrap();
    let cfg = FoldingConfig::builtin(Arch::MuCnv).to_mvtu(&model.spec).unwrap();
    let batch = classify_batch(&compiled, &data.images, Execution::Auto).unwrap();
    assert_eq!(batch, classify_batch_sequential(&compiled, &data.images).unwrap());
    for (image, want) in data.images.iter().zip(&batch) {
        assert_eq!(&classify_folded(&compiled, image, &cfg).unwrap(), want);
        assert_eq!(&classify(&compiled, image).unwrap(), want);
    }
}

#[test]
fn compiled_file_roundtrip() {
    let (model, data) = briefly_trained(Arch::MuCnv);
    let compiled = compile_model(&model, &model.spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bcop");
    compiled.save(&path).unwrap();
    let loaded = CompiledModel::load(&path).unwrap();
    assert_eq!(loaded, compiled);
    assert_eq!(
        classify(&loaded, &data.images[0]).unwrap(),
        classify(&compiled, &data.images[0]).unwrap()
    );
}

#[test]
fn manifest_from_split_directories() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let img = Image::filled(40, 20, [10, 200, 30]);
    let layout = [("train", "correct", 3), ("train", "chin", 2), ("test", "nose", 1), ("test", "nose_mouth", 1)];
    for (split, class, n) in layout {
        let d = root.join(split).join(class);
        fs::create_dir_all(&d).unwrap();
        for i in 0..n {
            img.save_png(&d.join(format!("{i}.png"))).unwrap();
        }
        fs::write(d.join("notes.txt"), "skip me").unwrap();
    }
    let scan = build_manifest(root).unwrap();
    let m = &scan.manifest;
    assert_eq!(m.records.len(), 7);
    assert_eq!(m.class_counts(), [3, 1, 1, 2]);
    assert!(m.records.windows(2).all(|w| (w[0].split, &w[0].path) <= (w[1].split, &w[1].path)));
    assert_eq!(scan.warnings.iter().filter(|w| w.contains("notes.txt")).count(), 4);
    assert_eq!(m.records.iter().filter(|r| r.split == Split::Test).count(), 2);

    let train = Dataset::from_manifest(m, Some(Split::Train)).unwrap();
    assert_eq!(train.len(), 5);
    assert!(train.images.iter().all(|im| (im.width, im.height) == (32, 32)));

    let b = balance(m, 4).unwrap();
    assert_eq!(b.class_counts(), [1, 1, 1, 1]);
    assert_eq!(balance(m, 4).unwrap(), b);

    let csv = root.join("manifest.csv");
    m.save(&csv).unwrap();
    assert_eq!(&bnnkit::data::Manifest::load(&csv).unwrap(), m);
}
