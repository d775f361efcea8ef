//! One binary for the whole pipeline: render a frame, sweep forces,
//! generate datasets, train, evaluate, run ablations, benchmark, infer.
//!
//! Every failure maps onto one of three exit codes (2 usage, 3 data,
//! 4 numeric) with a one-line `error[<category>]: <message>` on stderr.
//! Subcommands that write files also drop an `invocation.json` beside the
//! outputs; it is the only artifact that contains wall-clock times, so
//! everything else is byte-reproducible given the same seeds.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use specktile::dataset::{
    self, gen_dataset, load_split, read_manifest, read_spkl, write_atomic, DatasetManifest,
    ForceTask, GenConfig, PositionTask, Split, TaskSpec, TextureTask,
};
use specktile::error::Category;
use specktile::geom::Point2;
use specktile::mechanics::{
    canonical_class_name, deform_scatterers, texture_mask_procedural, ContactStimulus,
    MaterialModel, DEFAULT_KERNEL_SIGMA_MM, DEFAULT_PATCH_MM, TEXTURE_CLASSES,
};
use specktile::model::{load_checkpoint, save_checkpoint, Head};
use specktile::optics::{
    crop_region, render_speckle, zncc, CropSpec, NamedRegion, OpticsParams, SpeckleImage,
};
use specktile::rng::derive_seed;
use specktile::scene::SceneConfig;
use specktile::tensor::Tensor;
use specktile::training::{
    ablation_crop_regions, ablation_train_size, bench_inference, crop_ablation_csv,
    evaluate_classification, evaluate_regression, evaluate_regression_by_site, train,
    train_size_csv, Hyperparams,
};
use specktile::{Error, Result};

#[derive(Parser)]
#[command(
    name = "specktile",
    version,
    about = "Speckle tactile sensing: simulate frames, train decoders, reproduce experiments"
)]
struct Cli {
    /// Worker threads for rendering and generation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Bit-reproducible mode; forces a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render one frame to an 8-bit PGM plus a region-A crop preview.
    Simulate(SimulateArgs),
    /// Sweep contact force and write the decorrelation curve as CSV.
    Sweep(SweepArgs),
    /// Generate a dataset (frames + manifest) for one task.
    GenDataset(GenDatasetArgs),
    /// Train a decoder on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Produce a crop-region or training-set-size ablation table.
    Ablate(AblateArgs),
    /// Time single-image inference (always on one thread).
    Bench(BenchArgs),
    /// Run one image through a checkpoint and print the prediction.
    Infer(InferArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene config JSON; omitted = built-in flat default.
    #[arg(long)]
    scene: Option<PathBuf>,

    /// Contact force in newtons; 0 means no contact.
    #[arg(long, default_value_t = 0.0)]
    force: f64,

    /// Contact centre "x,y" in mm on the top face (default: face centre).
    #[arg(long)]
    pos: Option<String>,

    /// Texture class pressed into the surface; see the class list in
    /// `gen-dataset --help`.
    #[arg(long)]
    texture: Option<String>,

    /// Seed for texture roughening and read noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Output PGM path; the crop preview lands next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Scene config JSON; omitted = built-in flat default.
    #[arg(long)]
    scene: Option<PathBuf>,

    /// Force sweep "start:end:step" in newtons, end inclusive.
    #[arg(long, default_value = "0:1:0.1")]
    forces: String,

    /// Contact centre "x,y" in mm (default: face centre).
    #[arg(long)]
    pos: Option<String>,

    /// Output CSV path (force_n, zncc per row).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDatasetArgs {
    /// Task preset: position4, force, or texture9.
    #[arg(long, conflicts_with = "task_config")]
    task: Option<String>,

    /// Task config JSON for non-default sample counts or sites.
    #[arg(long)]
    task_config: Option<PathBuf>,

    /// Scene config JSON; omitted = the task's default scene.
    #[arg(long)]
    scene: Option<PathBuf>,

    /// Master seed; every per-sample seed derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Crop region name (A, B, C, D, center) or "row,col" origin.
    #[arg(long, default_value = "A")]
    crop: String,

    /// Also store raw full-resolution float frames for later re-crops.
    #[arg(long)]
    keep_raw: bool,

    /// Override the amplitude clamp distance in mm.
    #[arg(long)]
    min_distance: Option<f64>,

    /// Dataset output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by gen-dataset.
    #[arg(long)]
    dataset: PathBuf,

    /// "auto" reads the task from the manifest; an explicit name
    /// (position4, force, texture9) must match it.
    #[arg(long, default_value = "auto")]
    task: String,

    /// Hyperparameter JSON; built-in defaults otherwise.
    #[arg(long)]
    hp: Option<PathBuf>,

    /// Epoch count override (wins over --hp).
    #[arg(long)]
    epochs: Option<usize>,

    /// Weight init seed override.
    #[arg(long)]
    model_seed: Option<u64>,

    /// Batch shuffle seed override.
    #[arg(long)]
    shuffle_seed: Option<u64>,

    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory produced by gen-dataset.
    #[arg(long)]
    dataset: PathBuf,

    /// Checkpoint file written by train.
    #[arg(long)]
    checkpoint: PathBuf,

    /// Split to evaluate: train or test.
    #[arg(long, default_value = "test")]
    split: String,

    /// Report output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Ablation axis: "crops" re-crops raw frames per named region,
    /// "train-size" trains on nested per-class subsets.
    #[arg(long)]
    mode: String,

    /// Dataset directory; crops mode needs one generated with --keep-raw.
    #[arg(long)]
    dataset: PathBuf,

    /// Hyperparameter JSON applied to every ablation training run.
    #[arg(long)]
    hp: Option<PathBuf>,

    /// Epoch count override (wins over --hp).
    #[arg(long)]
    epochs: Option<usize>,

    /// Per-class training sizes for train-size mode, comma separated.
    #[arg(long, default_value = "50,100,200")]
    sizes: String,

    /// Table output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint file written by train.
    #[arg(long)]
    checkpoint: PathBuf,

    /// Optional .spkl input image; default is a seeded random frame.
    #[arg(long)]
    image: Option<PathBuf>,

    /// Timed forward passes.
    #[arg(long, default_value_t = 100)]
    trials: usize,

    /// Untimed warmup passes.
    #[arg(long, default_value_t = 5)]
    warmup: usize,

    /// Report output path (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint file written by train.
    #[arg(long)]
    checkpoint: PathBuf,

    /// Input image (.spkl float frame, crop-sized).
    #[arg(long)]
    image: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = if cli.deterministic { 1 } else { cli.threads };
    if threads > 0 {
        // Ignore the error from a second init; only reachable in-process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (tag, code) = match e.category() {
                Category::Usage => ("usage", 2),
                Category::Data => ("data", 3),
                Category::Numeric => ("numeric", 4),
            };
            eprintln!("error[{tag}]: {e}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let started = Invocation::begin();
    match cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a, started),
        Cmd::Sweep(a) => cmd_sweep(a, started),
        Cmd::GenDataset(a) => cmd_gen_dataset(a, started),
        Cmd::Train(a) => cmd_train(a, started, cli.deterministic),
        Cmd::Eval(a) => cmd_eval(a, started),
        Cmd::Ablate(a) => cmd_ablate(a, started),
        Cmd::Bench(a) => cmd_bench(a, started),
        Cmd::Infer(a) => cmd_infer(a),
    }
}

// ── Invocation record ───────────────────────────────────────────────────

/// Argv plus resolved config, written beside every file-producing run.
/// Wall-clock time lives here and nowhere else.
struct Invocation {
    started_unix_s: u64,
    timer: Instant,
}

impl Invocation {
    fn begin() -> Self {
        let started_unix_s = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Invocation {
            started_unix_s,
            timer: Instant::now(),
        }
    }

    /// Write invocation.json into `dir` with the command's resolved config.
    fn write(&self, dir: &Path, resolved: serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let doc = json!({
            "argv": std::env::args().collect::<Vec<_>>(),
            "resolved": resolved,
            "started_unix_s": self.started_unix_s,
            "wall_s": self.timer.elapsed().as_secs_f64(),
        });
        let path = dir.join("invocation.json");
        let mut bytes = serde_json::to_vec_pretty(&doc).expect("json document");
        bytes.push(b'\n');
        write_atomic(&path, &bytes)
    }
}

// ── Shared helpers ──────────────────────────────────────────────────────

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_scene(path: Option<&Path>, fallback: SceneConfig) -> Result<SceneConfig> {
    let scene = match path {
        Some(p) => SceneConfig::from_json(&read_file(p)?)?,
        None => fallback,
    };
    scene.validate()?;
    Ok(scene)
}

fn load_hyperparams(path: Option<&Path>) -> Result<Hyperparams> {
    match path {
        Some(p) => serde_json::from_str(&read_file(p)?)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display()))),
        None => Ok(Hyperparams::default()),
    }
}

fn parse_pos(text: &str) -> Result<Point2> {
    let parts: Vec<&str> = text.split(',').collect();
    let bad = || Error::InvalidArgument(format!("expected --pos as \"x,y\" in mm, got {text:?}"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let x: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let y: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    if !x.is_finite() || !y.is_finite() {
        return Err(bad());
    }
    Ok(Point2 { x, y })
}

/// Parse "start:end:step" into an inclusive force ladder.
fn parse_force_range(text: &str) -> Result<Vec<f64>> {
    let bad = |why: &str| {
        Error::InvalidArgument(format!(
            "bad --forces {text:?}: {why} (expected \"start:end:step\", e.g. 0:1:0.1)"
        ))
    };
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(bad("need three fields"));
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad("fields must be numbers"))?;
    let (start, end, step) = (nums[0], nums[1], nums[2]);
    if !start.is_finite() || !end.is_finite() || !step.is_finite() {
        return Err(bad("fields must be finite"));
    }
    if step <= 0.0 {
        return Err(bad("step must be positive"));
    }
    if end < start {
        return Err(bad("end must not be below start"));
    }
    if start < 0.0 {
        return Err(bad("forces must be nonnegative"));
    }
    // Half-step slack so 0:1:0.1 lands exactly on 1.0 despite rounding.
    let count = ((end - start) / step + 0.5).floor() as usize + 1;
    if count > 10_000 {
        return Err(bad("more than 10000 steps"));
    }
    Ok((0..count)
        .map(|i| (start + i as f64 * step).min(end))
        .collect())
}

fn face_centre(scene: &SceneConfig) -> Point2 {
    Point2 {
        x: scene.geometry.width_mm * 0.5,
        y: scene.geometry.depth_mm * 0.5,
    }
}

fn resolve_texture_class(name: &str) -> Result<String> {
    let canon = canonical_class_name(name);
    if TEXTURE_CLASSES.contains(&canon.as_str()) {
        return Ok(canon);
    }
    Err(Error::InvalidArgument(format!(
        "unknown texture class {name:?}; choose one of: {}",
        TEXTURE_CLASSES.join(", ")
    )))
}

/// Contact stimulus for one-off renders; mirrors the dataset pipeline's
/// texture handling (wide flat-press kernel when a tile is attached).
fn build_stimulus(
    scene: &SceneConfig,
    force: f64,
    pos: Option<&str>,
    texture: Option<&str>,
    seed: u64,
) -> Result<Option<ContactStimulus>> {
    if force < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "force must be nonnegative, got {force}"
        )));
    }
    if force == 0.0 {
        if texture.is_some() {
            return Err(Error::InvalidArgument(
                "--texture needs a positive --force to press the tile".into(),
            ));
        }
        return Ok(None);
    }
    let contact_xy = match pos {
        Some(p) => parse_pos(p)?,
        None => face_centre(scene),
    };
    let (kernel_sigma_mm, mask) = match texture {
        Some(t) => {
            let class = resolve_texture_class(t)?;
            let mask = texture_mask_procedural(&class, 64, 64, derive_seed(seed, "texture-mask", 0))?;
            (10.0, Some(mask))
        }
        None => (DEFAULT_KERNEL_SIGMA_MM, None),
    };
    Ok(Some(ContactStimulus {
        contact_xy,
        force_n: force,
        kernel_sigma_mm,
        texture: mask,
        patch_mm: DEFAULT_PATCH_MM,
    }))
}

fn render_with_stimulus(
    scene: &SceneConfig,
    stim: Option<&ContactStimulus>,
    params: &OpticsParams,
    noise_seed: u64,
) -> Result<SpeckleImage> {
    let hash = stim.map(|s| s.hash_hex());
    match stim {
        Some(s) => {
            let mat = MaterialModel::for_slab(&scene.geometry);
            let field = deform_scatterers(&scene.scatterers, s, &mat, &scene.geometry)?;
            render_speckle(scene, &field, params, noise_seed, hash.as_deref())
        }
        None => render_speckle(scene, &scene.scatterers, params, noise_seed, None),
    }
}

fn parse_split(text: &str) -> Result<Split> {
    match text {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::InvalidArgument(format!(
            "unknown split {other:?}; use train or test"
        ))),
    }
}

/// Class names for reporting: prefer the checkpoint's embedded list, fall
/// back to the manifest, then to positional names.
fn class_names_for(
    embedded: Option<&Vec<String>>,
    manifest: &DatasetManifest,
    classes: usize,
) -> Vec<String> {
    if let Some(names) = embedded {
        if names.len() == classes {
            return names.clone();
        }
    }
    if let Some(names) = manifest.task.class_names() {
        if names.len() == classes {
            return names;
        }
    }
    (0..classes).map(|i| format!("class-{i}")).collect()
}

fn confusion_csv(names: &[String], confusion: &[Vec<usize>]) -> String {
    let mut out = String::from("truth");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (name, row) in names.iter().zip(confusion) {
        out.push_str(name);
        for &c in row {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_json_pretty(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("json document");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn out_parent(out: &Path) -> PathBuf {
    match out.parent() {
        Some(p) if p.as_os_str().is_empty() => PathBuf::from("."),
        Some(p) => p.to_path_buf(),
        None => PathBuf::from("."),
    }
}

// ── simulate ────────────────────────────────────────────────────────────

fn cmd_simulate(a: SimulateArgs, inv: Invocation) -> Result<()> {
    let scene = load_scene(a.scene.as_deref(), SceneConfig::flat_default())?;
    let stim = build_stimulus(
        &scene,
        a.force,
        a.pos.as_deref(),
        a.texture.as_deref(),
        a.seed,
    )?;
    let params = OpticsParams::from_scene(&scene);
    let img = render_with_stimulus(&scene, stim.as_ref(), &params, a.seed)?;

    let preview = crop_region(&img, CropSpec::Named(NamedRegion::A))?;
    let preview_path = a.out.with_extension("cropA.pgm");
    img.write_pgm(&a.out)?;
    preview.write_pgm(&preview_path)?;

    println!("wrote {} ({}x{})", a.out.display(), img.w, img.h);
    println!(
        "wrote {} ({}x{})",
        preview_path.display(),
        preview.w,
        preview.h
    );
    inv.write(
        &out_parent(&a.out),
        json!({
            "command": "simulate",
            "scene_hash": scene.hash_hex(),
            "force_n": a.force,
            "pos_mm": stim.as_ref().map(|s| [s.contact_xy.x, s.contact_xy.y]),
            "texture": a.texture,
            "seed": a.seed,
            "out": a.out,
        }),
    )
}

// ── sweep ───────────────────────────────────────────────────────────────

fn cmd_sweep(a: SweepArgs, inv: Invocation) -> Result<()> {
    let scene = load_scene(a.scene.as_deref(), SceneConfig::flat_default())?;
    let forces = parse_force_range(&a.forces)?;
    let contact = match a.pos.as_deref() {
        Some(p) => parse_pos(p)?,
        None => face_centre(&scene),
    };
    // Noise off: the curve should show decorrelation, not sensor noise.
    let params = OpticsParams::from_scene(&scene).noiseless();
    let reference = render_speckle(&scene, &scene.scatterers, &params, 0, None)?;

    let mut csv = String::from("force_n,zncc\n");
    for &f in &forces {
        let r = if f == 0.0 {
            1.0
        } else {
            let stim = ContactStimulus::point_contact(contact, f);
            let img = render_with_stimulus(&scene, Some(&stim), &params, 0)?;
            zncc(&reference, &img)?
        };
        csv.push_str(&format!("{f:.4},{r:.9}\n"));
        println!("F = {f:.2} N  zncc {r:.4}");
    }
    write_text(&a.out, &csv)?;
    println!("wrote {}", a.out.display());
    inv.write(
        &out_parent(&a.out),
        json!({
            "command": "sweep",
            "scene_hash": scene.hash_hex(),
            "forces": forces,
            "pos_mm": [contact.x, contact.y],
            "out": a.out,
        }),
    )
}

// ── gen-dataset ─────────────────────────────────────────────────────────

fn parse_task_preset(name: &str) -> Result<TaskSpec> {
    match name {
        "position4" => Ok(TaskSpec::Position4(PositionTask::default())),
        "force" => Ok(TaskSpec::Force(ForceTask::default())),
        "texture9" => Ok(TaskSpec::Texture9(TextureTask::default())),
        other => Err(Error::InvalidArgument(format!(
            "unknown task {other:?}; use position4, force, or texture9"
        ))),
    }
}

fn cmd_gen_dataset(a: GenDatasetArgs, inv: Invocation) -> Result<()> {
    let task = match (&a.task, &a.task_config) {
        (Some(name), None) => parse_task_preset(name)?,
        (None, Some(path)) => serde_json::from_str(&read_file(path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
        (None, None) => {
            return Err(Error::InvalidArgument(
                "pick a task with --task or --task-config".into(),
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    let scene = match a.scene.as_deref() {
        Some(p) => Some(load_scene(Some(p), SceneConfig::flat_default())?),
        None => None,
    };
    let mut cfg = GenConfig::new(task, a.seed);
    cfg.scene = scene;
    cfg.crop = CropSpec::parse(&a.crop)?;
    cfg.keep_raw = a.keep_raw;
    cfg.min_distance_mm = a.min_distance;

    let manifest = gen_dataset(&cfg, &a.out)?;
    let train_n = manifest.records_for(Split::Train).count();
    let test_n = manifest.records_for(Split::Test).count();
    println!(
        "wrote {} samples ({} train, {} test) to {}",
        manifest.records.len(),
        train_n,
        test_n,
        a.out.display()
    );
    inv.write(
        &a.out,
        json!({
            "command": "gen-dataset",
            "task": manifest.task.name(),
            "seed": a.seed,
            "crop": manifest.crop,
            "keep_raw": a.keep_raw,
            "scene_hash": manifest.scene_hash,
            "out": a.out,
        }),
    )
}

// ── train ───────────────────────────────────────────────────────────────

fn head_for_manifest(manifest: &DatasetManifest) -> Head {
    match manifest.task.class_names() {
        Some(names) => Head::Classifier {
            classes: names.len(),
        },
        None => Head::Regressor,
    }
}

fn cmd_train(a: TrainArgs, inv: Invocation, deterministic: bool) -> Result<()> {
    let manifest = read_manifest(&a.dataset)?;
    if a.task != "auto" && a.task != manifest.task.name() {
        return Err(Error::InvalidArgument(format!(
            "--task {} does not match the dataset's task {}",
            a.task,
            manifest.task.name()
        )));
    }
    let mut hp = load_hyperparams(a.hp.as_deref())?;
    if let Some(e) = a.epochs {
        hp.epochs = e;
    }
    if let Some(s) = a.model_seed {
        hp.model_seed = s;
    }
    if let Some(s) = a.shuffle_seed {
        hp.shuffle_seed = s;
    }
    hp.validate()?;

    let head = head_for_manifest(&manifest);
    let ds = load_split(&a.dataset, &manifest, Split::Train)?;
    let mut progress = |epoch: usize, loss: f64| eprintln!("epoch {epoch}: loss {loss:.6}");
    let mut outcome = train(&ds, head, &hp, Some(&mut progress))?;
    outcome.model.config.class_names = manifest.task.class_names();

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let ckpt_path = a.out.join("model.ckpt");
    save_checkpoint(&outcome.model, &ckpt_path)?;
    let report = json!({
        "task": manifest.task.name(),
        "dataset": a.dataset,
        "trained_samples": ds.len(),
        "hyperparams": hp,
        "model_config": outcome.model.config,
        "epoch_mean_loss": outcome.stats.epoch_mean_loss,
        "final_train_loss": outcome.stats.final_train_loss,
        "deterministic": deterministic,
    });
    write_json_pretty(&a.out.join("run_report.json"), &report)?;
    println!(
        "trained {} epochs on {} samples, final loss {:.6}",
        outcome.stats.epochs,
        ds.len(),
        outcome.stats.final_train_loss
    );
    println!("wrote {}", ckpt_path.display());
    inv.write(
        &a.out,
        json!({
            "command": "train",
            "dataset": a.dataset,
            "task": manifest.task.name(),
            "hyperparams": hp,
            "deterministic": deterministic,
            "out": a.out,
        }),
    )
}

// ── eval ────────────────────────────────────────────────────────────────

fn cmd_eval(a: EvalArgs, inv: Invocation) -> Result<()> {
    let manifest = read_manifest(&a.dataset)?;
    let split = parse_split(&a.split)?;
    let ds = load_split(&a.dataset, &manifest, split)?;
    let model = load_checkpoint::<f32>(&a.checkpoint)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    match model.config.head {
        Head::Classifier { classes } => {
            let names = class_names_for(model.config.class_names.as_ref(), &manifest, classes);
            let report = evaluate_classification(&model, &ds, &names)?;
            write_text(
                &a.out.join("confusion.csv"),
                &confusion_csv(&names, &report.confusion),
            )?;
            let doc = serde_json::to_value(&report).expect("report serializes");
            write_json_pretty(&a.out.join("report.json"), &doc)?;
            println!(
                "accuracy {:.4} ({}/{} correct)",
                report.accuracy,
                report
                    .per_class
                    .iter()
                    .map(|c| c.correct)
                    .sum::<usize>(),
                ds.len()
            );
        }
        Head::Regressor => {
            let report = evaluate_regression(&model, &ds)?;
            let by_site = evaluate_regression_by_site(&model, &ds)?;
            let mut hist = String::from("bin_start_n,count\n");
            for (i, &c) in report.error_hist.iter().enumerate() {
                hist.push_str(&format!("{:.2},{c}\n", i as f64 * 0.01));
            }
            write_text(&a.out.join("error_hist.csv"), &hist)?;
            let doc = json!({
                "overall": report,
                "per_site": by_site,
            });
            write_json_pretty(&a.out.join("report.json"), &doc)?;
            match report.r2 {
                Some(r2) => println!(
                    "rmse {:.4} N  mae {:.4} N  r2 {:.4}  (n={})",
                    report.rmse, report.mae, r2, report.samples
                ),
                None => println!(
                    "rmse {:.4} N  mae {:.4} N  r2 undefined  (n={})",
                    report.rmse, report.mae, report.samples
                ),
            }
        }
    }
    inv.write(
        &a.out,
        json!({
            "command": "eval",
            "dataset": a.dataset,
            "checkpoint": a.checkpoint,
            "split": a.split,
            "out": a.out,
        }),
    )
}

// ── ablate ──────────────────────────────────────────────────────────────

fn parse_sizes(text: &str) -> Result<Vec<usize>> {
    let sizes: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            Error::InvalidArgument(format!(
                "bad --sizes {text:?}; expected comma-separated counts like 50,100,200"
            ))
        })?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::InvalidArgument(
            "--sizes needs at least one positive count".into(),
        ));
    }
    Ok(sizes)
}

fn cmd_ablate(a: AblateArgs, inv: Invocation) -> Result<()> {
    let manifest = read_manifest(&a.dataset)?;
    let names = manifest.task.class_names().ok_or_else(|| {
        Error::InvalidArgument("ablations need a classification dataset".into())
    })?;
    let mut hp = load_hyperparams(a.hp.as_deref())?;
    if let Some(e) = a.epochs {
        hp.epochs = e;
    }
    hp.validate()?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    match a.mode.as_str() {
        "crops" => {
            if !manifest.keep_raw {
                return Err(Error::InvalidArgument(
                    "crop ablation re-crops raw frames; generate the dataset with --keep-raw"
                        .into(),
                ));
            }
            let mut progress = |region: &str, epoch: usize, loss: f64| {
                eprintln!("region {region} epoch {epoch}: loss {loss:.6}")
            };
            let report =
                ablation_crop_regions(&a.dataset, &manifest, &names, &hp, Some(&mut progress))?;
            write_text(&a.out.join("crops.csv"), &crop_ablation_csv(&report))?;
            let doc = serde_json::to_value(&report).expect("report serializes");
            write_json_pretty(&a.out.join("report.json"), &doc)?;
            for row in &report.rows {
                println!("region {}  accuracy {:.4}", row.region, row.accuracy);
            }
            println!(
                "spread {:.4}  rerun identical: {}",
                report.spread, report.rerun_identical
            );
        }
        "train-size" => {
            let sizes = parse_sizes(&a.sizes)?;
            let train_ds = load_split(&a.dataset, &manifest, Split::Train)?;
            let test_ds = load_split(&a.dataset, &manifest, Split::Test)?;
            let mut progress = |size: usize, epoch: usize, loss: f64| {
                eprintln!("size {size} epoch {epoch}: loss {loss:.6}")
            };
            let rows = ablation_train_size(
                &train_ds,
                &test_ds,
                &names,
                &sizes,
                &hp,
                Some(&mut progress),
            )?;
            write_text(&a.out.join("train_size.csv"), &train_size_csv(&rows))?;
            let doc = serde_json::to_value(&rows).expect("rows serialize");
            write_json_pretty(&a.out.join("report.json"), &doc)?;
            for row in &rows {
                println!(
                    "{} per class ({} samples)  accuracy {:.4}",
                    row.per_class, row.train_samples, row.accuracy
                );
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown ablation mode {other:?}; use crops or train-size"
            )))
        }
    }
    inv.write(
        &a.out,
        json!({
            "command": "ablate",
            "mode": a.mode,
            "dataset": a.dataset,
            "hyperparams": hp,
            "sizes": a.sizes,
            "out": a.out,
        }),
    )
}

// ── bench ───────────────────────────────────────────────────────────────

fn standardized_input(pixels: &[f32], h: usize, w: usize) -> Result<Tensor<f32>> {
    Tensor::from_vec(&[1, 1, h, w], dataset::standardize(pixels))
}

fn cmd_bench(a: BenchArgs, inv: Invocation) -> Result<()> {
    if a.trials == 0 {
        return Err(Error::InvalidArgument("--trials must be positive".into()));
    }
    let model = load_checkpoint::<f32>(&a.checkpoint)?;
    let (h, w) = model.config.input_hw;
    let input = match a.image.as_deref() {
        Some(path) => {
            let (ih, iw, pixels) = read_spkl(path)?;
            if (ih, iw) != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "image is {ih}x{iw} but the model expects {h}x{w}"
                )));
            }
            standardized_input(&pixels, h, w)?
        }
        None => {
            use rand::Rng;
            let mut rng = specktile::rng::rng_for(0, "bench-input", 0);
            let pixels: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
            standardized_input(&pixels, h, w)?
        }
    };
    // The latency figure is defined single-threaded; a local pool pins it
    // there no matter what --threads says.
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("local pool");
    let report = pool.install(|| bench_inference(&model, &input, a.warmup, a.trials))?;
    println!(
        "inference over {} trials: mean {:.3} ms  p50 {:.3} ms  p95 {:.3} ms",
        report.trials, report.mean_ms, report.p50_ms, report.p95_ms
    );
    let doc = serde_json::to_value(&report).expect("report serializes");
    write_json_pretty(&a.out, &doc)?;
    println!("wrote {}", a.out.display());
    inv.write(
        &out_parent(&a.out),
        json!({
            "command": "bench",
            "checkpoint": a.checkpoint,
            "image": a.image,
            "trials": a.trials,
            "warmup": a.warmup,
            "out": a.out,
        }),
    )
}

// ── infer ───────────────────────────────────────────────────────────────

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let model = load_checkpoint::<f32>(&a.checkpoint)?;
    let (h, w) = model.config.input_hw;
    let (ih, iw, pixels) = read_spkl(&a.image)?;
    if (ih, iw) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "image is {ih}x{iw} but the model expects {h}x{w}"
        )));
    }
    let input = standardized_input(&pixels, h, w)?;
    let out = model.forward_eval(&input)?;
    match model.config.head {
        Head::Classifier { classes } => {
            let probs = softmax(&out.data[..classes]);
            let (best, &p) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                .expect("at least one class");
            let name = match &model.config.class_names {
                Some(names) if names.len() == classes => names[best].clone(),
                _ => format!("class-{best}"),
            };
            println!("class {name} confidence {p:.4}");
        }
        Head::Regressor => {
            println!("force {:.4} N", out.data[0]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn force_range_is_inclusive_and_exact() {
        let forces = parse_force_range("0:1:0.1").unwrap();
        assert_eq!(forces.len(), 11);
        assert_eq!(forces[0], 0.0);
        assert_eq!(*forces.last().unwrap(), 1.0);
        // Monotone strictly increasing despite accumulated float steps.
        for pair in forces.windows(2) {
            assert!(pair[1] > pair[0]);
        }
    }

    #[test]
    fn force_range_rejects_malformed_input() {
        for bad in ["", "1", "0:1", "0:1:0", "0:1:-0.1", "1:0:0.1", "a:b:c", "-1:1:0.5"] {
            assert!(parse_force_range(bad).is_err(), "accepted {bad:?}");
        }
        assert_eq!(parse_force_range("0.5:0.5:0.1").unwrap(), vec![0.5]);
    }

    #[test]
    fn pos_parses_and_rejects() {
        let p = parse_pos("27.5, 30.5").unwrap();
        assert_eq!((p.x, p.y), (27.5, 30.5));
        for bad in ["", "1", "1,2,3", "x,y", "1,inf"] {
            assert!(parse_pos(bad).is_err(), "accepted {bad:?}");
        }
    }

    #[test]
    fn texture_names_canonicalize() {
        assert_eq!(
            resolve_texture_class("White Dragon").unwrap(),
            "white-dragon"
        );
        assert!(resolve_texture_class("nine-of-swords").is_err());
    }

    #[test]
    fn confusion_csv_rows_are_truth_major() {
        let names = vec!["a".to_string(), "b".to_string()];
        let csv = confusion_csv(&names, &[vec![3, 1], vec![0, 4]]);
        assert_eq!(csv, "truth,a,b\na,3,1\nb,0,4\n");
    }

    #[test]
    fn softmax_sums_to_one_and_ranks() {
        let p = softmax(&[1.0, 3.0, 2.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[1] > p[2] && p[2] > p[0]);
    }
}
