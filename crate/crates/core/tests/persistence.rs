use std::fs;

use stec_core::datasets::{gen_synthetic, load, save};
use stec_core::harness::{dataset_for, train_ssl, ExperimentCfg, Method, TrainOptions};
use stec_core::models::Checkpoint;
use stec_core::Error;

fn tiny(method: Method) -> ExperimentCfg {
    ExperimentCfg {
        method,
        synthetic_n: 48,
        synthetic_classes: 4,
        resolution: 8,
        epochs: 2,
        batch_size: 8,
        log_every: 1,
        encoder_widths: vec![16],
        feature_dim: 8,
        proj_hidden: 16,
        proj_dim: 8,
        manip_hidden: 16,
        predictor_hidden: 16,
        warmup_epochs: 0,
        ..Default::default()
    }
}

#[test]
fn dataset_files_follow_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_synthetic(6, 3, 4, 9).unwrap();
    save(&ds, dir.path()).unwrap();
    let images = fs::read(dir.path().join("images.bin")).unwrap();
    let labels = fs::read(dir.path().join("labels.bin")).unwrap();
    assert_eq!(images.len(), 6 * 4 * 4 * 3 * 8);
    assert_eq!(labels.len(), 6 * 4);
    let first = f64::from_le_bytes(images[..8].try_into().unwrap());
    assert_eq!(first, ds.pixels(0)[0]);
    let label5 = u32::from_le_bytes(labels[20..24].try_into().unwrap());
    assert_eq!(label5, 2);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["format"], "stec-dataset");
    assert_eq!(manifest["count"], 6);
    assert_eq!(manifest["endianness"], "little");
    assert_eq!(load(dir.path()).unwrap(), ds);
}

#[test]
fn big_endian_payloads_load() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_synthetic(4, 2, 4, 1).unwrap();
    save(&ds, dir.path()).unwrap();
    let swap = |name: &str, width: usize| {
        let p = dir.path().join(name);
        let mut b = fs::read(&p).unwrap();
        b.chunks_exact_mut(width).for_each(|c| c.reverse());
        fs::write(&p, &b).unwrap();
        b
    };
    let images = swap("images.bin", 8);
    let labels = swap("labels.bin", 4);
    let mpath = dir.path().join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&mpath).unwrap()).unwrap();
    m["endianness"] = "big".into();
    m["images_sha256"] = stec_core::models::checkpoint::sha256_hex(&images).into();
    m["labels_sha256"] = stec_core::models::checkpoint::sha256_hex(&labels).into();
    fs::write(&mpath, serde_json::to_vec(&m).unwrap()).unwrap();
    assert_eq!(load(dir.path()).unwrap(), ds);
}

#[test]
fn corrupted_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save(&gen_synthetic(4, 2, 4, 1).unwrap(), dir.path()).unwrap();
    let p = dir.path().join("images.bin");
    let mut b = fs::read(&p).unwrap();
    b[3] ^= 1;
    fs::write(&p, b).unwrap();
    assert!(matches!(load(dir.path()), Err(Error::Checksum { .. })));
}

#[test]
fn checkpoint_round_trips_and_detects_damage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::ByolStec);
    let out = train_ssl(
        &cfg,
        &dataset_for(&cfg).unwrap(),
        &TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();
    let cdir = dir.path().join("checkpoint");
    let c = Checkpoint::load(&cdir).unwrap();
    assert_eq!(c.step, out.total_steps);
    assert_eq!(c.store, out.store);
    assert_eq!(c.momentum, out.momentum);
    assert!(c.store.shadow().is_some());
    assert_eq!(c.config_hash, cfg.hash());

    let mpath = cdir.join("manifest.json");
    let original = fs::read(&mpath).unwrap();
    let mut m: serde_json::Value = serde_json::from_slice(&original).unwrap();
    m["version"] = 99.into();
    fs::write(&mpath, serde_json::to_vec(&m).unwrap()).unwrap();
    assert!(matches!(Checkpoint::load(&cdir), Err(Error::Version { found: 99, .. })));
    fs::write(&mpath, &original).unwrap();

    let bpath = cdir.join("tensors.bin");
    let mut blob = fs::read(&bpath).unwrap();
    blob[0] ^= 0x40;
    fs::write(&bpath, blob).unwrap();
    assert!(matches!(Checkpoint::load(&cdir), Err(Error::Checksum { .. })));
}

#[test]
fn resume_refuses_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Stec);
    let ds = dataset_for(&cfg).unwrap();
    let opts = |resume| TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        resume,
        stop_after: Some(3),
    };
    train_ssl(&cfg, &ds, &opts(false)).unwrap();
    let other = ExperimentCfg { tau: 0.2, ..cfg };
    assert!(matches!(train_ssl(&other, &ds, &opts(true)), Err(Error::Config(_))));
}

#[test]
fn every_method_resumes_exactly() {
    for method in [Method::Simclr, Method::Stec, Method::Byol, Method::ByolStec, Method::Relic, Method::StecStar] {
        let cfg = tiny(method);
        let ds = dataset_for(&cfg).unwrap();
        let whole = train_ssl(&cfg, &ds, &TrainOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = |stop_after, resume| TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume,
            stop_after,
        };
        train_ssl(&cfg, &ds, &opts(Some(5), false)).unwrap();
        let resumed = train_ssl(&cfg, &ds, &opts(None, true)).unwrap();
        assert_eq!(resumed.store, whole.store, "{method:?}");
        assert_eq!(resumed.records.len(), whole.records.len());
        for (a, b) in resumed.records.iter().zip(&whole.records) {
            assert!(a.same_values(b), "{method:?} step {}", a.step);
        }
    }
}
