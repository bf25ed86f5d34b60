//! The `ccam` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use ccam_core::augment::{affinemix, sample_affinemix_params, MovableClassSet};
use ccam_core::diagnostics::{inter_channel_correlation, ConfusionMatrix, DepthAccumulator};
use ccam_core::gradcheck::{ccam_check, suite};
use ccam_core::harness::{
    evaluate, init_model, train_with, training_scene, validation_scenes, EvalReport, MetricsRecord, RunConfig,
};
use ccam_core::regularize::OrthoRegularizer;
use ccam_core::rng::{derive_seed, STREAM_AUGMENT};
use ccam_core::{ParamStore, IGNORE_INDEX};

use crate::checkpoint::{self, TEACHER_PREFIX};
use crate::error::{CliError, CliResult};
use crate::nbt;
use crate::pnm::Pnm;
use crate::scene_io::{self, DEFAULT_DEPTH_SCALE, PARAMS};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const AFFINITY_FILE: &str = "affinity.nbt";

#[derive(Parser, Debug)]
#[command(name = "ccam", version, about = "Cross-channel affinity multi-task toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Depth-aware object re-pasting on scene triplets.
    Augment(AugmentArgs),
    /// Joint segmentation/depth training on synthetic scenes.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on its validation scenes.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Inter-channel correlation and affinity matrix of a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Segmentation and depth metrics of prediction/ground-truth pairs.
    Metrics(MetricsArgs),
    /// Write synthetic scene triplets.
    GenScenes(GenScenesArgs),
}

#[derive(Args, Debug)]
struct AugmentArgs {
    /// A triplet directory, or a directory of triplet subdirectories.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use this depth scale instead of a random one.
    #[arg(long)]
    scale: Option<f64>,
    /// Replay the params.txt files found under this directory.
    #[arg(long, conflicts_with_all = ["scale"])]
    replay: Option<PathBuf>,
    /// Comma-separated movable class ids.
    #[arg(long, default_value = "3,4")]
    movable: String,
    #[arg(long, default_value_t = 5)]
    classes: usize,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// none, gated or ccam.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Fraction like 0.125 or 1/8.
    #[arg(long)]
    labeled_fraction: Option<String>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Any config key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (or `out` in the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// No per-evaluation progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// A `train` output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate the mean-teacher weights.
    #[arg(long)]
    teacher: bool,
    /// Number of validation scenes (defaults to the run's).
    #[arg(long)]
    scenes: Option<usize>,
    /// Also write the metrics row as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check seeds seed..seed+count.
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// NBT1 N×C×H×W task-A features for an extra affinity-block check.
    #[arg(long, requires = "b_features")]
    a_features: Option<PathBuf>,
    /// NBT1 task-B features, same shape.
    #[arg(long, requires = "a_features")]
    b_features: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    /// A `train` output directory.
    #[arg(long, required_unless_present = "features")]
    checkpoint: Option<PathBuf>,
    /// Report the correlation of this NBT1 N×C×H×W tensor instead.
    #[arg(long, conflicts_with = "checkpoint")]
    features: Option<PathBuf>,
    #[arg(long)]
    teacher: bool,
    /// Where to write affinity.nbt (defaults to the checkpoint directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Predictions: label.pgm and depth.pgm per scene.
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth, same layout.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    classes: usize,
}

#[derive(Args, Debug)]
struct GenScenesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Which split to reproduce: train or val.
    #[arg(long, default_value = "train")]
    split: String,
}

/// Runs the command line; returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::Augment(a) => augment(a, stdout),
        Command::Train(a) => train_cmd(a, stdout, stderr),
        Command::Eval(a) => eval_cmd(a, stdout),
        Command::Gradcheck(a) => gradcheck_cmd(a, stdout),
        Command::Diagnose(a) => diagnose(a, stdout),
        Command::Metrics(a) => metrics(a, stdout),
        Command::GenScenes(a) => gen_scenes(a, stdout),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> CliResult<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| CliError::Internal(format!("stdout: {e}")))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::write(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::write(path, e))
}

fn parse_movable(list: &str, classes: usize) -> CliResult<MovableClassSet> {
    let ids = list
        .split(',')
        .map(|s| s.trim().parse::<u8>().map_err(|_| CliError::input(format!("bad movable class '{s}'"))))
        .collect::<CliResult<Vec<u8>>>()?;
    Ok(MovableClassSet::new(ids, classes)?)
}

/// Output location of triplet `src` found under `input`.
fn mirror(input: &Path, src: &Path, out: &Path) -> PathBuf {
    match src.strip_prefix(input) {
        Ok(rel) if !rel.as_os_str().is_empty() => out.join(rel),
        _ => out.to_path_buf(),
    }
}

fn augment(a: AugmentArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let movable = parse_movable(&a.movable, a.classes)?;
    if let Some(s) = a.scale {
        if !(s > 0.0 && s.is_finite()) {
            return Err(CliError::input(format!("--scale {s} must be positive")));
        }
    }
    for (i, dir) in scene_io::find_triplets(&a.input)?.iter().enumerate() {
        let t = scene_io::read_triplet(dir)?;
        t.sample.validate(a.classes).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
        let dest = mirror(&a.input, dir, &a.out);
        let params = match &a.replay {
            Some(root) => {
                let p = mirror(&a.input, dir, root).join(PARAMS);
                let text = fs::read_to_string(&p).map_err(|e| CliError::read(&p, e))?;
                if text.lines().any(|l| l.trim() == "status=no_movable_object") {
                    None
                } else {
                    Some(scene_io::parse_params(&text)?)
                }
            }
            None => {
                let seed = derive_seed(a.seed, STREAM_AUGMENT, i as u64);
                match sample_affinemix_params(&t.sample, &movable, seed) {
                    Ok(mut p) => {
                        if let Some(s) = a.scale {
                            p.scale = s;
                        }
                        Some(p)
                    }
                    Err(ccam_core::Error::NoMovableObject) => {
                        scene_io::write_triplet(&dest, &t.sample, &t.depth_scale)?;
                        write_text(&dest.join(PARAMS), &format!("status=no_movable_object\nseed={seed}\n"))?;
                        say(stdout, format!("{}: no movable object, copied", dir.display()))?;
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };
        let Some(params) = params else {
            scene_io::write_triplet(&dest, &t.sample, &t.depth_scale)?;
            continue;
        };
        let mixed = affinemix(&t.sample, &movable, &params)?;
        scene_io::write_triplet(&dest, &mixed.sample, &t.depth_scale)?;
        write_text(&dest.join(PARAMS), &scene_io::params_text(&params))?;
        let pasted = mixed.mask.iter().filter(|&&m| m).count();
        say(
            stdout,
            format!("{}: class {} scale {:.4} pasted {pasted} px", dir.display(), params.class, params.scale),
        )?;
    }
    Ok(())
}

fn build_config(a: &TrainArgs) -> CliResult<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).map_err(|e| CliError::read(p, e))?;
        c.apply_text(&text).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
    }
    let o = &a.overrides;
    let mut set = |k: &str, v: Option<String>| -> CliResult<()> {
        if let Some(v) = v {
            c.set(k, &v)?;
        }
        Ok(())
    };
    set("steps", o.steps.map(|v| v.to_string()))?;
    set("seed", o.seed.map(|v| v.to_string()))?;
    set("mode", o.mode.clone())?;
    set("lr", o.lr.map(|v| v.to_string()))?;
    set("batch_size", o.batch_size.map(|v| v.to_string()))?;
    set("labeled_fraction", o.labeled_fraction.clone())?;
    set("eval_every", o.eval_every.map(|v| v.to_string()))?;
    set("out", a.out.as_ref().map(|p| p.display().to_string()))?;
    for kv in &o.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::input(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        c.set(k, v)?;
    }
    c.validate()?;
    Ok(c)
}

fn metrics_csv(records: &[MetricsRecord], classes: usize) -> String {
    let mut s = MetricsRecord::csv_header(classes);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn train_cmd(a: TrainArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult<()> {
    let config = build_config(&a)?;
    let out = PathBuf::from(config.out.clone().ok_or_else(|| CliError::input("train needs --out (or out= in the config)"))?);
    fs::create_dir_all(&out).map_err(|e| CliError::write(&out, e))?;
    write_text(&out.join(CONFIG_FILE), &config.to_text())?;
    let quiet = a.quiet;
    let result = train_with(&config, &mut |r| {
        if !quiet {
            let _ = writeln!(stderr, "step {:>6}  miou {:.4}  absrel {:.4}  loss {:.4}", r.step, r.eval.miou, r.eval.depth.absrel, r.loss);
        }
    })?;
    let classes = config.scene.classes();
    write_text(&out.join(METRICS_FILE), &metrics_csv(&result.records, classes))?;
    let mut recs = checkpoint::records(&result.student, "");
    if let Some(t) = &result.teacher {
        recs.extend(checkpoint::records(&t.params, TEACHER_PREFIX));
    }
    checkpoint::save(&out, &recs)?;
    let last = result.records.last().expect("at least the step-0 row");
    say(stdout, format!("final step {} miou {:.4} absrel {:.4} -> {}", last.step, last.eval.miou, last.eval.depth.absrel, out.display()))
}

struct Loaded {
    config: RunConfig,
    model: ccam_core::harness::ToyModel,
    store: ParamStore<f32>,
}

fn load_run(dir: &Path, teacher: bool) -> CliResult<Loaded> {
    let cp = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cp).map_err(|e| CliError::read(&cp, e))?;
    let config = RunConfig::parse(&text).map_err(|e| CliError::input(format!("{}: {e}", cp.display())))?;
    let (model, mut store) = init_model(&config)?;
    let records = checkpoint::load(dir)?;
    checkpoint::restore(&mut store, &records, if teacher { TEACHER_PREFIX } else { "" })?;
    Ok(Loaded { config, model, store })
}

fn report_lines(r: &EvalReport) -> Vec<String> {
    let mut v = vec![format!("miou={:.6}", r.miou)];
    for (c, iou) in r.per_class.iter().enumerate() {
        v.push(match iou {
            Some(x) => format!("iou_{c}={x:.6}"),
            None => format!("iou_{c}=nan"),
        });
    }
    let d = &r.depth;
    v.push(format!(
        "absrel={:.6} sqrel={:.6} rmse={:.6} a1={:.6} a2={:.6} a3={:.6}",
        d.absrel, d.sqrel, d.rmse, d.a1, d.a2, d.a3
    ));
    v.push(format!("icc_seg={:.6} icc_depth={:.6}", r.icc_seg, r.icc_depth));
    v
}

fn eval_cmd(a: EvalArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let mut run = load_run(&a.checkpoint, a.teacher)?;
    if let Some(n) = a.scenes {
        if n == 0 {
            return Err(CliError::input("--scenes must be positive"));
        }
        run.config.val_scenes = n;
    }
    let val = validation_scenes(&run.config)?;
    let report = evaluate(&run.model, &run.store, &val)?;
    for l in report_lines(&report) {
        say(stdout, l)?;
    }
    if let Some(p) = &a.out {
        let penalty = OrthoRegularizer::new(run.config.ortho_config())?.penalty(&run.store)?;
        let rec = MetricsRecord { step: run.config.steps, eval: report, ortho_penalty: penalty, loss: f64::NAN };
        write_text(p, &metrics_csv(&[rec], run.config.scene.classes()))?;
    }
    Ok(())
}

fn read_nbt(path: &Path) -> CliResult<ccam_core::Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| CliError::read(path, e))?;
    nbt::from_bytes(&bytes).map_err(|e| CliError::read(path, e))
}

fn gradcheck_cmd(a: GradcheckArgs, stdout: &mut dyn Write) -> CliResult<()> {
    if a.count == 0 {
        return Err(CliError::input("--count must be positive"));
    }
    let mut worst = 0.0f64;
    for seed in a.seed..a.seed + a.count {
        for e in suite(seed)? {
            let err = e.report.max_rel_err();
            worst = worst.max(err);
            say(stdout, format!("seed {seed:<4} {:<40} {err:.3e}", e.name))?;
        }
    }
    if let (Some(pa), Some(pb)) = (&a.a_features, &a.b_features) {
        let (fa, fb) = (read_nbt(pa)?.cast::<f64>(), read_nbt(pb)?.cast::<f64>());
        let err = ccam_check(&fa, &fb, a.seed)?.max_rel_err();
        worst = worst.max(err);
        say(stdout, format!("fixture  {:<40} {err:.3e}", "ccam_forward"))?;
    }
    let pass = worst < a.tolerance;
    say(stdout, format!("max rel. err {worst:.3e} (tolerance {:.0e}): {}", a.tolerance, if pass { "PASS" } else { "FAIL" }))?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Internal("gradient check failed".into()))
    }
}

fn diagnose(a: DiagnoseArgs, stdout: &mut dyn Write) -> CliResult<()> {
    if let Some(p) = &a.features {
        let t = read_nbt(p)?;
        return say(stdout, format!("icc={:.6}", inter_channel_correlation(&t)?));
    }
    let dir = a.checkpoint.expect("clap enforces checkpoint or features");
    let run = load_run(&dir, a.teacher)?;
    let val = validation_scenes(&run.config)?;
    let report = evaluate(&run.model, &run.store, &val)?;
    let penalty = OrthoRegularizer::new(run.config.ortho_config())?.penalty(&run.store)?;
    say(stdout, format!("mode={}", run.config.mode))?;
    say(stdout, format!("icc_seg={:.6} icc_depth={:.6}", report.icc_seg, report.icc_depth))?;
    say(stdout, format!("ortho_penalty={penalty:.6}"))?;
    if let Some(m) = &report.affinity {
        let out = a.out.unwrap_or(dir);
        fs::create_dir_all(&out).map_err(|e| CliError::write(&out, e))?;
        let path = out.join(AFFINITY_FILE);
        fs::write(&path, nbt::to_bytes(m)).map_err(|e| CliError::write(&path, e))?;
        let c = m.dims()[0];
        say(stdout, format!("affinity {c}x{c} -> {}", path.display()))?;
        for row in m.data().chunks(c) {
            say(stdout, row.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "))?;
        }
    }
    Ok(())
}

fn read_map(dir: &Path, name: &str) -> CliResult<Pnm> {
    let p = dir.join(name);
    let bytes = fs::read(&p).map_err(|e| CliError::read(&p, e))?;
    let img = Pnm::decode(&bytes).map_err(|e| CliError::read(&p, e))?;
    if img.channels != 1 {
        return Err(CliError::input(format!("{}: expected a P5 map", p.display())));
    }
    Ok(img)
}

fn read_depth(dir: &Path) -> CliResult<(Vec<f32>, (usize, usize))> {
    let img = read_map(dir, scene_io::DEPTH)?;
    let scale: f64 = img
        .comment_value("depth_scale")
        .and_then(|s| s.parse().ok())
        .filter(|v: &f64| *v > 0.0)
        .ok_or_else(|| CliError::input(format!("{}: missing or bad depth_scale", dir.display())))?;
    Ok((img.samples.iter().map(|&v| (v as f64 * scale) as f32).collect(), (img.width, img.height)))
}

fn metrics(a: MetricsArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let mut cm = ConfusionMatrix::new(a.classes)?;
    let mut depth = DepthAccumulator::default();
    let mut any_depth = false;
    for gt_dir in scene_io::find_triplets(&a.gt)? {
        let pred_dir = mirror(&a.gt, &gt_dir, &a.pred);
        let (gl, pl) = (read_map(&gt_dir, scene_io::LABEL)?, read_map(&pred_dir, scene_io::LABEL)?);
        if (gl.width, gl.height) != (pl.width, pl.height) {
            return Err(CliError::input(format!("{}: prediction size differs from ground truth", pred_dir.display())));
        }
        let to_u8 = |m: &Pnm| m.samples.iter().map(|&v| v.min(255) as u8).collect::<Vec<u8>>();
        cm.accumulate(&to_u8(&pl), &to_u8(&gl), IGNORE_INDEX)?;
        if pred_dir.join(scene_io::DEPTH).is_file() {
            let (gd, gs) = read_depth(&gt_dir)?;
            let (pd, ps) = read_depth(&pred_dir)?;
            if gs != ps {
                return Err(CliError::input(format!("{}: depth size differs from ground truth", pred_dir.display())));
            }
            let valid: Vec<bool> = gd.iter().map(|&d| d > 0.0).collect();
            depth.add(&pd, &gd, Some(&valid))?;
            any_depth = true;
        }
    }
    let mut seg = String::from("class,iou\n");
    for (c, iou) in cm.iou().iter().enumerate() {
        seg.push_str(&match iou {
            Some(x) => format!("{c},{x:.6}\n"),
            None => format!("{c},nan\n"),
        });
    }
    let miou = cm.miou()?;
    seg.push_str(&format!("miou,{miou:.6}\n"));
    write_text(&a.out.join("segmentation.csv"), &seg)?;
    say(stdout, format!("miou={miou:.6}"))?;
    if any_depth {
        let d = depth.finish()?;
        let row = format!("{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}", d.absrel, d.sqrel, d.rmse, d.a1, d.a2, d.a3);
        write_text(&a.out.join("depth.csv"), &format!("absrel,sqrel,rmse,a1,a2,a3\n{row}\n"))?;
        say(stdout, format!("absrel={:.6} sqrel={:.6} rmse={:.6} a1={:.6} a2={:.6} a3={:.6}", d.absrel, d.sqrel, d.rmse, d.a1, d.a2, d.a3))?;
    }
    Ok(())
}

fn gen_scenes(a: GenScenesArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let mut c = RunConfig { seed: a.seed, ..RunConfig::default() };
    c.scene.height = a.height;
    c.scene.width = a.width;
    c.scene.validate()?;
    let samples = match a.split.as_str() {
        "train" => (0..a.count).map(|i| training_scene(&c, i)).collect::<Result<Vec<_>, _>>()?,
        "val" => {
            c.val_scenes = a.count;
            validation_scenes(&c)?
        }
        s => return Err(CliError::input(format!("unknown split '{s}' (train|val)"))),
    };
    for (i, s) in samples.iter().enumerate() {
        scene_io::write_triplet(&a.out.join(format!("scene_{i:04}")), s, DEFAULT_DEPTH_SCALE)?;
    }
    say(stdout, format!("wrote {} scenes to {}", samples.len(), a.out.display()))
}
