//! `aquaseg` command-line front end.
//!
//! Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, RunConfig};
use crate::dataio::{
    load_bundles, load_dataset, load_unit_png, make_splits, read_point_file, read_splits, save_depth_png,
    save_sequence, save_unit_png, synthesize_frame, synthesize_scene, write_splits, DatasetManifest, FrameBundle,
    FrameEntry, Modality, ModalitySet, SplitKind, SplitSpec,
};
use crate::eval::{ablation_sweep, emit_report, evaluate, metrics_markdown, radar_csv, AblationReport, MetricsReport};
use crate::geometry::{densify_depth, lidar_input_image, project_points, remap_image, DenseDepth, SparseDepth};
use crate::model::{init_params, load_checkpoint, save_checkpoint, Params};
use crate::raster::Image;
use crate::sync::{bundle, StreamIndex};
use crate::training::{grad_check, jitter_biases, train, write_epoch_log, TrainOutcome, Variant};
use crate::{Error, Result};

/// Gradient check pass threshold.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Bias spread of the point the gradient check is run at.
pub const GRADCHECK_BIAS_STD: f64 = 0.1;

#[derive(Parser, Debug)]
#[command(
    name = "aquaseg",
    version,
    about = "Multimodal maritime segmentation toolkit",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic frames into a sequence directory (--out)
    Synth(Opts),
    /// Write train/val/test manifests for a dataset (--data)
    Splits(Opts),
    /// Train one variant and keep the best-validation checkpoint
    Train(Opts),
    /// Evaluate a checkpoint on the validation and test sets
    Eval(Opts),
    /// Evaluate a checkpoint with every subset of input modalities
    Ablate(Opts),
    /// Project a frame's LIDAR points onto the RGB image plane
    Project(Opts),
    /// Remap a frame's thermal image onto the RGB image plane
    Remap(Opts),
    /// Densify a frame's projected LIDAR depth
    Densify(Opts),
    /// Pair sensor timestamps with the RGB stream
    Bundle(Opts),
    /// Compare analytic gradients with central differences
    Gradcheck(Opts),
    /// Full experiment: synth, splits, train all variants, eval, ablate
    Repro(Opts),
}

#[derive(Args, Debug, Clone)]
struct Opts {
    /// Configuration file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["baseline", "h", "d", "dh"])]
    variant: Option<String>,
    #[arg(long, value_parser = ["day-night", "geography", "saltwater", "difficult"])]
    split: Option<String>,
    /// Comma-separated subset of rgb,thermal,lidar
    #[arg(long)]
    modalities: Option<String>,
    /// Sequence directory, or a directory of sequences
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Frame id, `<sequence>/<NNNNNN>`
    #[arg(long)]
    frame: Option<String>,
    /// Render night frames
    #[arg(long)]
    night: bool,
    /// Any configuration key, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Opts {
    fn overrides(&self) -> std::result::Result<Vec<(String, String)>, String> {
        let mut o: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        push("variant", self.variant.clone());
        push("split", self.split.clone());
        push("modalities", self.modalities.clone());
        push("data", self.data.as_ref().map(|p| p.display().to_string()));
        push("frames", self.frames.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()));
        push("frame", self.frame.clone());
        if self.night {
            push("night", Some("true".into()));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
            o.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(o)
    }
}

/// Parse `argv` (program name first), run the subcommand and return the
/// process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (name, opts) = match &cli.command {
        Command::Synth(o) => ("synth", o),
        Command::Splits(o) => ("splits", o),
        Command::Train(o) => ("train", o),
        Command::Eval(o) => ("eval", o),
        Command::Ablate(o) => ("ablate", o),
        Command::Project(o) => ("project", o),
        Command::Remap(o) => ("remap", o),
        Command::Densify(o) => ("densify", o),
        Command::Bundle(o) => ("bundle", o),
        Command::Gradcheck(o) => ("gradcheck", o),
        Command::Repro(o) => ("repro", o),
    };
    let overrides = match opts.overrides() {
        Ok(o) => o,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };
    let cfg = match load_config(opts.config.as_deref(), &overrides) {
        Ok((cfg, warnings)) => {
            for w in warnings {
                log::warn!("{w}");
                eprintln!("warning: {w}");
            }
            cfg
        }
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match run(name, &cfg) {
        Ok((summary, code)) => {
            println!("{summary}");
            code
        }
        Err(e) => {
            eprintln!("error: {name}: {e}");
            1
        }
    }
}

fn run(name: &str, cfg: &RunConfig) -> Result<(String, i32)> {
    cfg.validate()?;
    let ok = |s: String| Ok((s, 0));
    match name {
        "synth" => ok(cmd_synth(cfg)?),
        "splits" => ok(cmd_splits(cfg)?),
        "train" => ok(cmd_train(cfg)?),
        "eval" => ok(cmd_eval(cfg)?),
        "ablate" => ok(cmd_ablate(cfg)?),
        "project" => ok(cmd_project(cfg)?),
        "remap" => ok(cmd_remap(cfg)?),
        "densify" => ok(cmd_densify(cfg)?),
        "bundle" => ok(cmd_bundle(cfg)?),
        "gradcheck" => cmd_gradcheck(cfg),
        "repro" => ok(cmd_repro(cfg)?),
        other => Err(Error::Invalid(format!("unknown command {other}"))),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

/// Create the output directory and record the effective configuration.
fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("effective.cfg"), &cfg.to_text())?;
    Ok(&cfg.out)
}

fn require<'a, T>(v: &'a Option<T>, key: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Invalid(format!("'{key}' must be set (flag --{key} or config key)")))
}

fn data_root(cfg: &RunConfig) -> Result<&Path> {
    let d = require(&cfg.data, "data")?;
    if !d.is_dir() {
        return Err(Error::Invalid(format!("data directory {} does not exist", d.display())));
    }
    Ok(d)
}

/// Render `count` frames starting at `start` into `dir`.
pub fn synth_sequence(cfg: &RunConfig, dir: &Path, start: u64, count: usize, night: bool) -> Result<()> {
    let params = cfg.scene_params(night);
    let scenes = (start..start + count as u64)
        .map(|i| synthesize_scene(&params, i))
        .collect::<Result<Vec<_>>>()?;
    save_sequence(&scenes, dir, &params.camera())
}

fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let out = prepare_out(cfg)?;
    synth_sequence(cfg, out, cfg.start_index, cfg.frames, cfg.scene.night)?;
    Ok(format!(
        "synth: wrote {} {} frames to {}",
        cfg.frames,
        if cfg.scene.night { "night" } else { "day" },
        out.display()
    ))
}

/// Splits stored under the data root, or freshly computed ones.
pub fn dataset_splits(cfg: &RunConfig, root: &Path, manifest: &DatasetManifest) -> Result<SplitSpec> {
    if root.join("splits").join(cfg.split.name()).join("train.txt").is_file() {
        read_splits(root, cfg.split)
    } else {
        make_splits(manifest, cfg.split, cfg.val_ratio, cfg.seed)
    }
}

fn cmd_splits(cfg: &RunConfig) -> Result<String> {
    let root = data_root(cfg)?;
    let manifest = load_dataset(root)?;
    let spec = make_splits(&manifest, cfg.split, cfg.val_ratio, cfg.seed)?;
    write_splits(&spec, root)?;
    Ok(format!(
        "splits: {} train {} / val {} / test {} written to {}",
        spec.kind,
        spec.train.len(),
        spec.val.len(),
        spec.test.len(),
        root.join("splits").join(spec.kind.name()).display()
    ))
}

struct LoadedSplit {
    train: Vec<FrameBundle>,
    val: Vec<FrameBundle>,
    test: Vec<FrameBundle>,
}

fn load_split(cfg: &RunConfig) -> Result<LoadedSplit> {
    let root = data_root(cfg)?;
    let manifest = load_dataset(root)?;
    let spec = dataset_splits(cfg, root, &manifest)?;
    Ok(LoadedSplit {
        train: load_bundles(&manifest, &spec.train)?,
        val: load_bundles(&manifest, &spec.val)?,
        test: load_bundles(&manifest, &spec.test)?,
    })
}

fn fmt_miou(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "n/a".into())
}

/// Train `cfg.variant`, writing `best.ckpt` and `epochs.csv` into `out`.
pub fn train_to_dir(cfg: &RunConfig, train_set: &[FrameBundle], val_set: &[FrameBundle], out: &Path) -> Result<TrainOutcome> {
    create_dir(out)?;
    let outcome = train(&cfg.train_config(), &cfg.model_config(), train_set, val_set)?;
    save_checkpoint(&outcome.best, &out.join("best.ckpt"))?;
    write_epoch_log(&out.join("epochs.csv"), &outcome.log)?;
    Ok(outcome)
}

fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let out = prepare_out(cfg)?.to_path_buf();
    let split = load_split(cfg)?;
    let outcome = train_to_dir(cfg, &split.train, &split.val, &out)?;
    Ok(format!(
        "train: variant {} best epoch {}/{} val mIoU {} checkpoint {}",
        cfg.variant,
        outcome.best_epoch,
        cfg.epochs,
        fmt_miou(outcome.best_val_miou),
        out.join("best.ckpt").display()
    ))
}

fn checkpoint(cfg: &RunConfig) -> Result<Params> {
    let p = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("best.ckpt"));
    if !p.is_file() {
        return Err(Error::Invalid(format!("checkpoint {} not found", p.display())));
    }
    load_checkpoint(&p)
}

fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    let params = checkpoint(cfg)?;
    let split = load_split(cfg)?;
    let out = prepare_out(cfg)?;
    let mask = cfg.modalities.complement();
    let val = evaluate(&params, &split.val, mask)?;
    let test = evaluate(&params, &split.test, mask)?;
    let reports = vec![("val".to_string(), val.clone()), ("test".to_string(), test.clone())];
    let title = format!("{} with {}", cfg.split, cfg.modalities);
    emit_report(&reports, &out.join("metrics.csv"), &out.join("report.md"), &title)?;
    write_file(&out.join("radar.csv"), &radar_csv(&val, &test))?;
    Ok(format!(
        "eval: val mIoU {} test mIoU {} ({})",
        fmt_miou(val.miou),
        fmt_miou(test.miou),
        cfg.modalities
    ))
}

fn cmd_ablate(cfg: &RunConfig) -> Result<String> {
    let params = checkpoint(cfg)?;
    let split = load_split(cfg)?;
    let out = prepare_out(cfg)?;
    let modalities: Vec<Modality> = cfg.modalities.iter().collect();
    let report = ablation_sweep(&params, &split.test, &modalities)?;
    emit_report(&report.named(), &out.join("ablation.csv"), &out.join("ablation.md"), "modality ablation (test)")?;
    Ok(format!(
        "ablate: {} subsets on {} test frames, monotone: {}",
        report.rows.len(),
        split.test.len(),
        report.monotone
    ))
}

struct FrameGeometry<'a> {
    entry: &'a FrameEntry,
    sparse: SparseDepth,
    manifest: &'a DatasetManifest,
}

fn frame_geometry<'a>(cfg: &RunConfig, manifest: &'a DatasetManifest) -> Result<FrameGeometry<'a>> {
    let id = require(&cfg.frame, "frame")?;
    let entry = manifest
        .frame(id)
        .ok_or_else(|| Error::Invalid(format!("frame '{id}' not in dataset")))?;
    let cal = manifest
        .camera(&entry.sequence, "rgb")
        .ok_or_else(|| Error::Invalid("dataset has no RGB calibration".into()))?;
    let lidar = entry
        .lidar
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("frame '{id}' has no LIDAR data")))?;
    let sparse = project_points(&read_point_file(lidar)?, &cal.lidar_to_camera, &cal.camera);
    Ok(FrameGeometry {
        entry,
        sparse,
        manifest,
    })
}

fn cmd_project(cfg: &RunConfig) -> Result<String> {
    let manifest = load_dataset(data_root(cfg)?)?;
    let g = frame_geometry(cfg, &manifest)?;
    let out = prepare_out(cfg)?;
    let cam = manifest.camera(&g.entry.sequence, "rgb").expect("checked").camera;
    let mut csv = String::from("u,v,d\n");
    for s in &g.sparse.samples {
        writeln!(csv, "{},{},{}", s.u, s.v, s.d).unwrap();
    }
    write_file(&out.join("projected.csv"), &csv)?;
    save_unit_png(&out.join("lidar.png"), &lidar_input_image(&g.sparse, &cam, cfg.scene.lidar_normalizer)?)?;
    Ok(format!("project: {} points on the image plane of {}", g.sparse.samples.len(), g.entry.id))
}

fn dense_depth(cfg: &RunConfig, g: &FrameGeometry) -> Result<DenseDepth> {
    let cam = g.manifest.camera(&g.entry.sequence, "rgb").expect("checked").camera;
    densify_depth(&g.sparse, &cam, cfg.max_controls)
}

fn cmd_densify(cfg: &RunConfig) -> Result<String> {
    let manifest = load_dataset(data_root(cfg)?)?;
    let g = frame_geometry(cfg, &manifest)?;
    let depth = dense_depth(cfg, &g)?;
    let out = prepare_out(cfg)?;
    save_depth_png(&out.join("depth.png"), &depth)?;
    let (lo, hi) = depth
        .depth
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &d| (a.min(d), b.max(d)));
    Ok(format!(
        "densify: {} controls, depth {lo:.3}..{hi:.3} m written to {}",
        g.sparse.samples.len().min(cfg.max_controls),
        out.join("depth.png").display()
    ))
}

fn cmd_remap(cfg: &RunConfig) -> Result<String> {
    let manifest = load_dataset(data_root(cfg)?)?;
    let g = frame_geometry(cfg, &manifest)?;
    let seq = &g.entry.sequence;
    let rgb = manifest.camera(seq, "rgb").expect("checked");
    let th = manifest
        .camera(seq, "thermal")
        .ok_or_else(|| Error::Invalid(format!("sequence {seq} has no thermal calibration")))?;
    let path = g
        .entry
        .thermal
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("frame {} has no thermal image", g.entry.id)))?;
    let depth = dense_depth(cfg, &g)?;
    let rgb_to_thermal = rgb.lidar_to_camera.inverse().then(&th.lidar_to_camera);
    let (img, valid) = remap_image(&load_unit_png(path)?, &th.camera, &rgb_to_thermal, &rgb.camera, &depth, cfg.sampling)?;
    let out = prepare_out(cfg)?;
    save_unit_png(&out.join("thermal_remapped.png"), &img)?;
    let mut mask = Image::zeros(1, img.height, img.width);
    for (m, &v) in mask.data.iter_mut().zip(&valid) {
        *m = if v { 1.0 } else { 0.0 };
    }
    save_unit_png(&out.join("valid.png"), &mask)?;
    let n_valid = valid.iter().filter(|&&v| v).count();
    Ok(format!("remap: {n_valid}/{} pixels valid for {}", valid.len(), g.entry.id))
}

/// Median spacing of a timestamp sequence, at least 1.
fn estimated_period(ts: &[i64]) -> i64 {
    let mut d: Vec<i64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    if d.is_empty() {
        return 1;
    }
    d.sort_unstable();
    d[d.len() / 2].max(1)
}

fn cmd_bundle(cfg: &RunConfig) -> Result<String> {
    let manifest = load_dataset(data_root(cfg)?)?;
    let out = prepare_out(cfg)?;
    let mut csv = String::from("sequence,reference_t,sensor,index,delta_t,valid\n");
    let (mut records, mut invalid) = (0usize, 0usize);
    for (seq, sensors) in &manifest.timestamps {
        let stream = |id: &str, v: &Vec<(usize, i64)>| {
            let ts: Vec<i64> = v.iter().map(|&(_, t)| t).collect();
            let period = estimated_period(&ts);
            StreamIndex::new(id, ts, period)
        };
        let Some(reference) = sensors.get("rgb") else { continue };
        let reference = stream("rgb", reference)?;
        let others = sensors
            .iter()
            .filter(|(id, v)| id.as_str() != "rgb" && !v.is_empty())
            .map(|(id, v)| stream(id, v))
            .collect::<Result<Vec<_>>>()?;
        if reference.is_empty() {
            continue;
        }
        for rec in bundle(&reference, &others)? {
            records += 1;
            for (s, m) in others.iter().zip(&rec.matches) {
                invalid += usize::from(!m.valid);
                writeln!(csv, "{seq},{},{},{},{},{}", rec.reference_t, s.sensor_id, m.index, m.delta_t, u8::from(m.valid)).unwrap();
            }
        }
    }
    write_file(&out.join("bundles.csv"), &csv)?;
    Ok(format!("bundle: {records} reference frames, {invalid} invalid sensor matches"))
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<(String, i32)> {
    let model = cfg.model_config();
    let params = jitter_biases(&init_params(&model, cfg.seed)?, GRADCHECK_BIAS_STD, cfg.seed);
    let frame = synthesize_frame(&cfg.scene_params(cfg.scene.night), cfg.start_index)?;
    let report = grad_check(&params, &frame, &frame.labels, &cfg.train_config(), cfg.eps, cfg.samples)?;
    let pass = report.max_rel_error < GRADCHECK_TOLERANCE;
    Ok((
        format!(
            "gradcheck: variant {} max relative error {:.3e} over {} samples ({} redrawn at kinks): {}",
            cfg.variant,
            report.max_rel_error,
            report.samples.len(),
            report.redrawn,
            if pass { "PASS" } else { "FAIL" }
        ),
        if pass { 0 } else { 1 },
    ))
}

/// Outcome of training and evaluating one variant.
#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub outcome: TrainOutcome,
    pub val: MetricsReport,
    pub test: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub split: SplitSpec,
    pub results: Vec<VariantResult>,
    /// Test-set ablation of the first double-pass variant, if any.
    pub ablation: Option<(Variant, AblationReport)>,
}

/// Synthesize a day and a night sequence under `root/data`, split them
/// day/night, then train and evaluate each variant under `root/<variant>`.
pub fn day_night_experiment(cfg: &RunConfig, variants: &[Variant], root: &Path) -> Result<Experiment> {
    let data = root.join("data");
    synth_sequence(cfg, &data.join("day"), 0, cfg.day_frames, false)?;
    synth_sequence(cfg, &data.join("night"), cfg.day_frames as u64, cfg.night_frames, true)?;
    let manifest = load_dataset(&data)?;
    let split = make_splits(&manifest, SplitKind::DayNight, cfg.val_ratio, cfg.seed)?;
    write_splits(&split, &data)?;
    let train_set = load_bundles(&manifest, &split.train)?;
    let val_set = load_bundles(&manifest, &split.val)?;
    let test_set = load_bundles(&manifest, &split.test)?;

    let mut results = Vec::new();
    let mut ablation = None;
    for &variant in variants {
        let vcfg = RunConfig {
            variant,
            ..cfg.clone()
        };
        let outcome = train_to_dir(&vcfg, &train_set, &val_set, &root.join(variant.name()))?;
        let val = evaluate(&outcome.best, &val_set, ModalitySet::EMPTY)?;
        let test = evaluate(&outcome.best, &test_set, ModalitySet::EMPTY)?;
        if ablation.is_none() && variant.double_pass() {
            ablation = Some((variant, ablation_sweep(&outcome.best, &test_set, &Modality::ALL)?));
        }
        log::info!("{variant}: val {:?} test {:?}", val.miou, test.miou);
        results.push(VariantResult {
            variant,
            outcome,
            val,
            test,
        });
    }
    Ok(Experiment {
        split,
        results,
        ablation,
    })
}

fn cmd_repro(cfg: &RunConfig) -> Result<String> {
    let out = prepare_out(cfg)?.to_path_buf();
    let exp = day_night_experiment(cfg, &Variant::ALL, &out)?;
    let mut reports = Vec::new();
    for r in &exp.results {
        reports.push((format!("{}/val", r.variant), r.val.clone()));
        reports.push((format!("{}/test", r.variant), r.test.clone()));
        write_file(&out.join(format!("radar_{}.csv", r.variant)), &radar_csv(&r.val, &r.test))?;
    }
    emit_report(&reports, &out.join("metrics.csv"), &out.join("report.md"), "day-night (val: day, test: night)")?;
    if let Some((v, abl)) = &exp.ablation {
        let named = abl.named();
        let md = metrics_markdown(&format!("{v} modality ablation (night test)"), &named);
        let csv_path = out.join("ablation.csv");
        emit_report(&named, &csv_path, &out.join("ablation.md"), "ablation")?;
        let mut report = fs::read_to_string(out.join("report.md")).map_err(|e| Error::io(out.join("report.md"), e))?;
        write!(report, "\n{md}\nmonotone in subset size: {}\n", abl.monotone).unwrap();
        write_file(&out.join("report.md"), &report)?;
    }
    let parts: Vec<String> = exp
        .results
        .iter()
        .map(|r| format!("{} val {} test {}", r.variant, fmt_miou(r.val.miou), fmt_miou(r.test.miou)))
        .collect();
    Ok(format!("repro: {} ({})", parts.join("; "), out.join("report.md").display()))
}
