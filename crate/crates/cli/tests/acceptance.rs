//! Acceptance suite: one test per shipping criterion, each printing a
//! single pass/fail line with the measured numbers (visible with
//! `--nocapture`, or on failure). The timed criteria assume the whole
//! machine, so every test takes the same mutex and they run one at a time
//! regardless of the harness thread count.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use specktile::dataset::{
    gen_dataset, load_split, Dataset, ForceTask, GenConfig, PositionTask, SampleRecord, Split,
    TaskSpec, TextureTask,
};
use specktile::geom::Point2;
use specktile::mechanics::{deform_scatterers, ContactStimulus, MaterialModel};
use specktile::model::{
    build_model, grad_check_decoder, load_checkpoint, save_checkpoint, Head, ModelConfig,
};
use specktile::optics::{
    ks_exponential_distance, render_speckle, speckle_contrast, zncc, OpticsParams,
};
use specktile::rng::rng_for;
use specktile::scene::SceneConfig;
use specktile::tensor::Tensor;
use specktile::training::{
    ablation_crop_regions, bench_inference, evaluate_classification, evaluate_regression,
    evaluate_regression_by_site, nested_subset_indices, train, Hyperparams,
};
use rand::Rng;

static GATE: Mutex<()> = Mutex::new(());

fn gate() -> std::sync::MutexGuard<'static, ()> {
    // A poisoned lock means an earlier criterion failed, not that the
    // machine is unusable for the next one.
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(num: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {num:02} ({name}): {tag} {detail}");
    assert!(pass, "criterion {num:02} ({name}): {detail}");
}

/// Scoped one-thread pool for the single-core latency and physics budgets.
fn one_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("local pool")
        .install(f)
}

#[test]
fn criterion_01_speckle_statistics() {
    let _g = gate();
    let scene = SceneConfig::flat_default();
    let params = OpticsParams::from_scene(&scene).noiseless();
    let (contrast, ks, secs) = one_thread(|| {
        let t0 = Instant::now();
        let img = render_speckle(&scene, &scene.scatterers, &params, 0, None).unwrap();
        let c = speckle_contrast(&img).unwrap();
        let k = ks_exponential_distance(&img).unwrap();
        (c, k, t0.elapsed().as_secs_f64())
    });
    let pass = (0.9..=1.1).contains(&contrast) && ks <= 0.05 && secs <= 10.0;
    verdict(
        1,
        "speckle statistics",
        pass,
        &format!("contrast={contrast:.4} (want 0.9..1.1), ks={ks:.4} (<=0.05), {secs:.1}s (<=10s single-threaded)"),
    );
}

#[test]
fn criterion_02_decorrelation_monotonic() {
    let _g = gate();
    let scene = SceneConfig::flat_default();
    let params = OpticsParams::from_scene(&scene).noiseless();
    let mat = MaterialModel::for_slab(&scene.geometry);
    let centre = Point2::new(scene.geometry.width_mm / 2.0, scene.geometry.depth_mm / 2.0);

    let reference = render_speckle(&scene, &scene.scatterers, &params, 0, None).unwrap();
    let mut curve = vec![1.0f64];
    for i in 1..=10 {
        let force = i as f64 * 0.1;
        let stim = ContactStimulus::point_contact(centre, force);
        let moved = deform_scatterers(&scene.scatterers, &stim, &mat, &scene.geometry).unwrap();
        let img = render_speckle(&scene, &moved, &params, 0, None).unwrap();
        curve.push(zncc(&reference, &img).unwrap());
    }

    let mut inversions = 0usize;
    let mut worst = 0.0f64;
    for w in curve.windows(2) {
        if w[1] > w[0] + 1e-12 {
            inversions += 1;
            worst = worst.max(w[1] - w[0]);
        }
    }
    let pass = inversions <= 1 && worst <= 0.01;
    let pretty: Vec<f64> = curve.iter().map(|z| (z * 1000.0).round() / 1000.0).collect();
    verdict(
        2,
        "decorrelation monotonic",
        pass,
        &format!("zncc curve {pretty:?}, inversions={inversions} (<=1), worst={worst:.4} (<=0.01)"),
    );
}

#[test]
fn criterion_03_gradient_integrity() {
    let _g = gate();
    let t0 = Instant::now();
    let mut max_rel = 0.0f64;
    let mut all_passed = true;
    let mut checks = 0usize;
    let mut worst_site = String::new();
    for seed in 0..20u64 {
        for (name, rep) in specktile::autodiff::grad_check_primitives(seed) {
            checks += rep.checked;
            if rep.max_rel_err > max_rel {
                max_rel = rep.max_rel_err;
                worst_site = format!("{name} seed {seed} ({})", rep.worst);
            }
            all_passed &= rep.passed;
        }
        for head in [Head::Classifier { classes: 4 }, Head::Regressor] {
            let rep = grad_check_decoder(head, seed).unwrap();
            checks += rep.checked;
            if rep.max_rel_err > max_rel {
                max_rel = rep.max_rel_err;
                worst_site = format!("model {head:?} seed {seed} ({})", rep.worst);
            }
            all_passed &= rep.passed;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = all_passed && max_rel < 1e-4 && secs <= 60.0;
    verdict(
        3,
        "gradient integrity",
        pass,
        &format!("{checks} elements over 20 seeds, max rel err {max_rel:.2e} (<1e-4) at {worst_site}, {secs:.1}s (<=60s)"),
    );
}

#[test]
fn criterion_04_position_classification() {
    let _g = gate();
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let cfg = GenConfig::new(TaskSpec::Position4(PositionTask::default()), 7);
    let manifest = gen_dataset(&cfg, dir.path()).unwrap();
    let train_ds = load_split(dir.path(), &manifest, Split::Train).unwrap();
    let test_ds = load_split(dir.path(), &manifest, Split::Test).unwrap();
    let names = manifest.task.class_names().unwrap();
    let hp = Hyperparams::default();
    let outcome = train(
        &train_ds,
        Head::Classifier { classes: names.len() },
        &hp,
        None,
    )
    .unwrap();
    let rep = evaluate_classification(&outcome.model, &test_ds, &names).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = rep.accuracy >= 0.95 && secs <= 1200.0;
    verdict(
        4,
        "position classification",
        pass,
        &format!(
            "accuracy {:.4} (>=0.95) on {} test frames, {:.0}s incl. generation (<=1200s)",
            rep.accuracy,
            test_ds.len(),
            secs
        ),
    );
}

#[test]
fn criterion_05_force_regression() {
    let _g = gate();
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig::new(TaskSpec::Force(ForceTask::default()), 7);
    let manifest = gen_dataset(&cfg, dir.path()).unwrap();
    let train_ds = load_split(dir.path(), &manifest, Split::Train).unwrap();
    let test_ds = load_split(dir.path(), &manifest, Split::Test).unwrap();
    let hp = Hyperparams::default();
    let outcome = train(&train_ds, Head::Regressor, &hp, None).unwrap();

    let overall = evaluate_regression(&outcome.model, &test_ds).unwrap();
    let by_site = evaluate_regression_by_site(&outcome.model, &test_ds).unwrap();
    let mut pass = by_site.len() == 3;
    let mut lines = Vec::new();
    for (site, rep) in &by_site {
        let r2 = rep.r2.unwrap_or(f64::MIN);
        let site_ok =
            rep.rmse <= 0.05 && rep.mae <= 0.04 && r2 >= 0.95 && rep.rmse >= rep.mae;
        pass &= site_ok;
        lines.push(format!(
            "site {site}: rmse {:.4} mae {:.4} r2 {:.4} n={}",
            rep.rmse, rep.mae, r2, rep.samples
        ));
    }
    let overall_r2 = overall.r2.unwrap_or(f64::MIN);
    pass &= overall_r2 >= 0.95 && overall.rmse >= overall.mae;
    verdict(
        5,
        "force regression",
        pass,
        &format!(
            "{}; overall rmse {:.4} mae {:.4} r2 {:.4} (rmse<=0.05, mae<=0.04, r2>=0.95, rmse>=mae per site)",
            lines.join("; "),
            overall.rmse,
            overall.mae,
            overall_r2
        ),
    );
}

#[test]
fn criterion_06_texture_classification() {
    let _g = gate();
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let cfg = GenConfig::new(TaskSpec::Texture9(TextureTask::default()), 7);
    let manifest = gen_dataset(&cfg, dir.path()).unwrap();
    let train_ds = load_split(dir.path(), &manifest, Split::Train).unwrap();
    let test_ds = load_split(dir.path(), &manifest, Split::Test).unwrap();
    let names = manifest.task.class_names().unwrap();
    let head = Head::Classifier { classes: names.len() };
    let hp = Hyperparams::default();

    let full = train(&train_ds, head, &hp, None).unwrap();
    let full_rep = evaluate_classification(&full.model, &test_ds, &names).unwrap();

    let labels = train_ds.labels().unwrap();
    let subset = train_ds.subset(&nested_subset_indices(&labels, 50));
    let small = train(&subset, head, &hp, None).unwrap();
    let small_rep = evaluate_classification(&small.model, &test_ds, &names).unwrap();

    let secs = t0.elapsed().as_secs_f64();
    let degradation = full_rep.accuracy - small_rep.accuracy;
    let pass = full_rep.accuracy >= 0.85 && degradation <= 0.08 && secs <= 3600.0;
    verdict(
        6,
        "texture classification",
        pass,
        &format!(
            "accuracy {:.4} at 200/class (>=0.85), {:.4} at 50/class, degradation {:.1} points (<=8), {:.0}s incl. generation (<=3600s)",
            full_rep.accuracy,
            small_rep.accuracy,
            degradation * 100.0,
            secs
        ),
    );
}

#[test]
fn criterion_07_crop_ablation() {
    let _g = gate();
    let dir = tempfile::tempdir().unwrap();
    let task = TaskSpec::Texture9(TextureTask {
        train_per_class: 60,
        test_per_class: 15,
        ..TextureTask::default()
    });
    let mut cfg = GenConfig::new(task, 7);
    cfg.keep_raw = true;
    let manifest = gen_dataset(&cfg, dir.path()).unwrap();
    let names = manifest.task.class_names().unwrap();
    let hp = Hyperparams {
        epochs: 10,
        ..Hyperparams::default()
    };
    let report = ablation_crop_regions(dir.path(), &manifest, &names, &hp, None).unwrap();
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{} {:.4}", r.region, r.accuracy))
        .collect();
    let pass = report.rows.len() == 4 && report.spread <= 0.15 && report.rerun_identical;
    verdict(
        7,
        "crop ablation",
        pass,
        &format!(
            "region accuracies [{}], spread {:.1} points (<=15), rerun of {} identical: {}",
            rows.join(", "),
            report.spread * 100.0,
            report.rerun_region,
            report.rerun_identical
        ),
    );
}

fn run_in(root: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_specktile"))
        .current_dir(root)
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "specktile {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn criterion_08_cli_determinism() {
    let _g = gate();
    // Same relative layout under two roots so every artifact is
    // byte-comparable; wall-clock times live only in invocation.json.
    let task_json = r#"{"task": "position4", "train_per_class": 6, "test_per_class": 2}"#;
    let tmp = tempfile::tempdir().unwrap();
    let mut artifacts: Vec<Vec<Vec<u8>>> = Vec::new();
    for run in ["a", "b"] {
        let root = tmp.path().join(run);
        fs::create_dir_all(&root).unwrap();
        fs::write(root.join("task.json"), task_json).unwrap();
        run_in(
            &root,
            &[
                "--deterministic",
                "gen-dataset",
                "--task-config",
                "task.json",
                "--seed",
                "5",
                "--out",
                "ds",
            ],
        );
        run_in(
            &root,
            &[
                "--deterministic",
                "train",
                "--dataset",
                "ds",
                "--epochs",
                "4",
                "--out",
                "run",
            ],
        );
        run_in(
            &root,
            &[
                "--deterministic",
                "eval",
                "--dataset",
                "ds",
                "--checkpoint",
                "run/model.ckpt",
                "--out",
                "ev",
            ],
        );
        artifacts.push(
            [
                "ds/manifest.json",
                "run/model.ckpt",
                "run/run_report.json",
                "ev/report.json",
                "ev/confusion.csv",
            ]
            .iter()
            .map(|rel| fs::read(root.join(rel)).unwrap())
            .collect(),
        );
    }
    let identical = artifacts[0] == artifacts[1];
    let manifest_sha = specktile::dataset::sha256_hex(&artifacts[0][0]);
    verdict(
        8,
        "cli determinism",
        identical,
        &format!(
            "manifest sha256 {}..., checkpoint {} bytes, metrics and confusion identical across reruns: {identical}",
            &manifest_sha[..12],
            artifacts[0][1].len()
        ),
    );
}

#[test]
fn criterion_09_checkpoint_round_trip() {
    let _g = gate();
    // Train a couple of epochs first so running statistics and Adam-moved
    // weights are nontrivial before the save.
    let mut rng = rng_for(31, "round-trip", 0);
    let hw = (32usize, 32usize);
    let frames: Vec<Vec<f32>> = (0..18)
        .map(|_| (0..hw.0 * hw.1).map(|_| rng.gen_range(0.0f32..1.0)).collect())
        .collect();
    let records: Vec<SampleRecord> = (0..frames.len())
        .map(|i| SampleRecord {
            index: i,
            split: Split::Train,
            file: format!("{i:04}.spkl"),
            raw_file: None,
            class_id: Some(i % 3),
            class_name: None,
            site: None,
            force_n: None,
            contact_xy_mm: None,
            sha256: String::new(),
            stim_seed: 0,
            noise_seed: 0,
        })
        .collect();
    let ds = Dataset::from_frames(hw, &frames, records).unwrap();
    let hp = Hyperparams {
        epochs: 2,
        batch_size: 6,
        ..Hyperparams::default()
    };
    let outcome = train(&ds, Head::Classifier { classes: 3 }, &hp, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&outcome.model, &path).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();

    let mut identical = true;
    for trial in 0..100u64 {
        let mut rng = rng_for(31, "round-trip-input", trial);
        let x = Tensor::from_vec(
            &[1, 1, hw.0, hw.1],
            (0..hw.0 * hw.1)
                .map(|_| rng.gen_range(-2.0f32..2.0))
                .collect(),
        )
        .unwrap();
        let a = outcome.model.forward_eval(&x).unwrap();
        let b = loaded.forward_eval(&x).unwrap();
        let bits = |t: &Tensor<f32>| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        identical &= bits(&a) == bits(&b);
    }
    verdict(
        9,
        "checkpoint round trip",
        identical,
        &format!("100 random inputs bit-identical after save/load: {identical}"),
    );
}

#[test]
fn criterion_10_inference_latency() {
    let _g = gate();
    let config = ModelConfig::classifier(9, 3);
    let model = build_model::<f32>(&config).unwrap();
    let mut rng = rng_for(17, "bench-input", 0);
    let x = Tensor::from_vec(
        &[1usize, 1, 128, 128],
        (0..128 * 128).map(|_| rng.gen_range(-2.0f32..2.0)).collect(),
    )
    .unwrap();
    let report = one_thread(|| bench_inference(&model, &x, 5, 50).unwrap());
    let pass = report.mean_ms <= 50.0;
    verdict(
        10,
        "inference latency",
        pass,
        &format!(
            "mean {:.2} ms, p50 {:.2} ms, p95 {:.2} ms over {} single-threaded 128x128 passes (<=50ms mean)",
            report.mean_ms, report.p50_ms, report.p95_ms, report.trials
        ),
    );
}
