//! Training loop behaviour on small generated datasets.

use std::path::{Path, PathBuf};

use segpool::model::ModelParams;
use segpool::scenegen::{gen_dataset, DatasetManifest, DomainParams};
use segpool::segmask::{simulate_dataset, OracleParams};
use segpool::trainer::{read_metrics, train, Mode, TrainConfig, CHECKPOINT_FILE, METRICS_FILE};
use tempfile::TempDir;

struct Data {
    _tmp: TempDir,
    syn: PathBuf,
    real: PathBuf,
    masks: PathBuf,
    test: PathBuf,
    root: PathBuf,
}

fn data() -> Data {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().to_path_buf();
    let (syn, real, masks, test) = (root.join("syn"), root.join("real"), root.join("masks"), root.join("test"));
    gen_dataset(4, "syn", &DomainParams::synthetic(), &syn, 1, 5, 32, 32).unwrap();
    gen_dataset(4, "real", &DomainParams::real(), &real, 2, 5, 32, 32).unwrap();
    gen_dataset(2, "real", &DomainParams::real(), &test, 3, 5, 32, 32).unwrap();
    simulate_dataset(&real, &masks, &OracleParams::default(), 4).unwrap();
    Data {
        _tmp: tmp,
        syn,
        real,
        masks,
        test,
        root,
    }
}

fn config(d: &Data, mode: Mode, out: &str) -> TrainConfig {
    let mut c = TrainConfig::new(mode, d.root.join(out));
    c.epochs = 1;
    c.frames_per_epoch = 3;
    c.syn_dir = Some(d.syn.clone());
    c.real_dir = Some(d.real.clone());
    c.masks_dir = Some(d.masks.clone());
    c
}

fn bytes(dir: &Path, file: &str) -> Vec<u8> {
    std::fs::read(dir.join(file)).unwrap()
}

#[test]
fn full_mode_takes_two_steps_per_iteration() {
    let d = data();
    let out = train(&config(&d, Mode::Full, "full")).unwrap();
    assert_eq!(out.checkpoint.adam.step, 6);
    let m = &out.metrics[0];
    assert!(m.mean_sup_loss.is_some() && m.mean_inv_loss.is_some() && m.mean_var_loss.is_some());
    assert_eq!(m.ema_miou, None);
}

#[test]
fn syn_only_logs_null_real_losses() {
    let d = data();
    let mut c = config(&d, Mode::SynOnly, "syn");
    c.epochs = 2;
    c.test_dir = Some(d.test.clone());
    c.eval_last_k = 2;
    let out = train(&c).unwrap();
    assert_eq!(out.checkpoint.adam.step, 6);
    let text = String::from_utf8(bytes(&c.out_dir, METRICS_FILE)).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().all(|l| l.contains("\"mean_inv_loss\":null") && l.contains("\"mean_var_loss\":null")));
    assert_eq!(read_metrics(&c.out_dir.join(METRICS_FILE)).unwrap(), out.metrics);
    let mious: Vec<f64> = out.metrics.iter().map(|m| m.ema_miou.unwrap()).collect();
    assert_eq!(out.last_k_miou, Some(mious[0] + (mious[1] - mious[0]) / 2.0));
}

#[test]
fn identical_configs_give_identical_files() {
    let d = data();
    let a = config(&d, Mode::Full, "a");
    let b = config(&d, Mode::Full, "b");
    train(&a).unwrap();
    train(&b).unwrap();
    assert_eq!(bytes(&a.out_dir, CHECKPOINT_FILE), bytes(&b.out_dir, CHECKPOINT_FILE));
    assert_eq!(bytes(&a.out_dir, METRICS_FILE), bytes(&b.out_dir, METRICS_FILE));
}

#[test]
fn full_mode_never_reads_real_labels() {
    let d = data();
    let clean = config(&d, Mode::Full, "clean");
    train(&clean).unwrap();

    let manifest = DatasetManifest::load(&d.real).unwrap();
    for (k, f) in manifest.frames.iter().enumerate() {
        let path = d.real.join(&f.labels);
        if k % 2 == 0 {
            std::fs::write(&path, b"not a label map").unwrap();
        } else {
            std::fs::remove_file(&path).unwrap();
        }
    }
    let poisoned = config(&d, Mode::Full, "poisoned");
    train(&poisoned).unwrap();
    assert_eq!(bytes(&clean.out_dir, CHECKPOINT_FILE), bytes(&poisoned.out_dir, CHECKPOINT_FILE));

    // The same poisoned files do break a mode that is allowed to read them.
    assert!(train(&config(&d, Mode::RealLabels, "real")).is_err());
}

#[test]
fn missing_mask_file_names_the_frame() {
    let d = data();
    let manifest = DatasetManifest::load(&d.real).unwrap();
    for f in &manifest.frames {
        std::fs::remove_file(d.masks.join(&f.masks)).unwrap();
    }
    let err = train(&config(&d, Mode::Full, "x")).unwrap_err().to_string();
    assert!(err.contains("real frame") && err.contains(".masks.json"), "{err}");
}

#[test]
fn missing_sources_are_reported_by_name() {
    let d = data();
    let mut c = config(&d, Mode::Full, "x");
    c.masks_dir = None;
    assert_eq!(c.missing_paths(), vec!["masks"]);
    assert!(train(&c).unwrap_err().to_string().contains("masks"));
}

#[test]
fn first_step_ema_blends_init_and_updated_weights() {
    let d = data();
    let mut c = config(&d, Mode::SynOnly, "ema");
    c.frames_per_epoch = 1;
    c.ema_decay = 0.75;
    let out = train(&c).unwrap();
    let init = ModelParams::init(c.model, c.seed).unwrap();
    let ck = &out.checkpoint;
    for ((e, p), i) in ck.ema.tensors().iter().zip(ck.params.tensors()).zip(init.tensors()) {
        for ((&e, &p), &i) in e.data().iter().zip(p.data()).zip(i.data()) {
            assert!((e - (0.75 * i + 0.25 * p)).abs() < 1e-15);
        }
    }
}

#[test]
fn supervised_loss_falls_over_epochs() {
    let d = data();
    let mut c = config(&d, Mode::RealLabels, "rl");
    c.epochs = 6;
    c.frames_per_epoch = 8;
    c.adam.lr = 3e-3;
    let out = train(&c).unwrap();
    let first = out.metrics[0].mean_sup_loss.unwrap();
    let last = out.metrics.last().unwrap().mean_sup_loss.unwrap();
    assert!(last < 0.8 * first, "{first} -> {last}");
}
