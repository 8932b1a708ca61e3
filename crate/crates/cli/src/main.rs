use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ril_cli::{
    ablate, effective_config, load_data, load_virtual, repaint_to_disk, run_student, run_teacher, synth_to_disk,
};
use ril_core::config::{load_config, parse_config, parse_presets, Preset};
use ril_core::eval::{evaluate_split, EvalMode};
use ril_core::model::load_lanenet;
use ril_core::trainer::RunConfig;
use ril_core::{Error, LaneNet32};

#[derive(Parser)]
#[command(name = "ril", version, about = "Lane detection by imitation of a teacher trained on repainted images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the effective configuration to stdout and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// CULane-style root with train.txt and test.txt. Without one, the
    /// configured synthetic benchmark is generated in memory.
    #[arg(long, env = "RIL_DATA_ROOT")]
    data_root: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Reuse a finished run directory; an unfinished one is run again.
    #[arg(long)]
    resume: bool,
}

/// Overrides of the training-split generator.
#[derive(Args, Clone)]
struct SynthArgs {
    /// Generator seed; the run seed is left alone.
    #[arg(long)]
    synth_seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    /// `HxW`, e.g. `64x128`.
    #[arg(long, value_parser = parse_dims)]
    image_dims: Option<(usize, usize)>,
    #[arg(long)]
    occlusion_density: Option<f64>,
    #[arg(long)]
    shadow_strength: Option<f64>,
    #[arg(long)]
    dash_probability: Option<f64>,
    #[arg(long)]
    mark_contrast: Option<f64>,
    #[arg(long)]
    mask_width: Option<f64>,
    #[arg(long)]
    id_prefix: Option<String>,
}

impl SynthArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.data.synth;
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    s.$field = v;
                }
            )*};
        }
        set!(count, image_dims, occlusion_density, shadow_strength, dash_probability, mark_contrast, mask_width, id_prefix);
        if let Some(v) = self.synth_seed {
            s.seed = v;
        }
        if let Some(v) = self.test_count {
            cfg.data.test_count = v;
        }
    }
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HxW")?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((n(h)?, n(w)?))
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark as a CULane-style root.
    Synth {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long, visible_alias = "output")]
        out: PathBuf,
    },
    /// Repaint one split of a root into a virtual root.
    Repaint {
        #[command(flatten)]
        common: Common,
        /// CULane-style root to read.
        #[arg(long, visible_alias = "data-root", env = "RIL_DATA_ROOT")]
        input: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, visible_alias = "out")]
        output: PathBuf,
        #[arg(long)]
        gain: Option<f64>,
        #[arg(long)]
        lift: Option<f64>,
        #[arg(long)]
        region_width: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Train the teacher on repainted images.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Pre-repainted training root; repainted in memory otherwise.
        #[arg(long)]
        virtual_root: Option<PathBuf>,
    },
    /// Train a student against a frozen teacher.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        virtual_root: Option<PathBuf>,
        /// Ablation row applied on top of the configuration.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Score a checkpoint on a test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        iou_threshold: Option<f64>,
        #[arg(long)]
        width: Option<f64>,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the ablation table over presets and seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "baseline,same,fusing,fusing+single,fusing+coupled")]
        presets: String,
        /// Comma-separated seeds; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Culane,
    Tusimple,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => parse_config("")?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json"));
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = match &cli.command {
        Command::Synth { common, .. }
        | Command::Repaint { common, .. }
        | Command::TrainTeacher { common, .. }
        | Command::TrainStudent { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Ablate { common, .. } => common.clone(),
    };
    let mut cfg = config(&common)?;
    match &cli.command {
        Command::TrainStudent { ablation: Some(a), .. } => cfg = a.parse::<Preset>()?.apply(&cfg),
        Command::Synth { synth, .. } => synth.apply(&mut cfg),
        Command::Repaint { gain, lift, region_width, tol, .. } => {
            let r = &mut cfg.repaint;
            r.gain = gain.unwrap_or(r.gain);
            r.lift = lift.unwrap_or(r.lift);
            r.region_width = region_width.unwrap_or(r.region_width);
            r.solver_tol = tol.unwrap_or(r.solver_tol);
        }
        _ => {}
    }
    cfg.validate()?;
    if common.print_config {
        println!("{}", effective_config(&cfg));
        return Ok(());
    }
    match cli.command {
        Command::Synth { out, .. } => {
            let d = synth_to_disk(&cfg, &out)?;
            emit(json!({ "root": out, "train": d.train.len(), "test": d.test.len() }));
        }
        Command::Repaint { input, split, output, .. } => {
            let root = input.ok_or_else(|| Failure::Usage("repaint needs --input or RIL_DATA_ROOT".into()))?;
            let n = repaint_to_disk(&cfg, &root, &split, &output)?;
            emit(json!({ "root": output, "split": split, "scenes": n, "stats": output.join("repaint_stats.jsonl") }));
        }
        Command::TrainTeacher { data, run, virtual_root, .. } => {
            let d = load_data(data.data_root.as_deref(), &cfg)?;
            let v = virtual_root.map(|r| load_virtual(&r, "train", &cfg)).transpose()?;
            let o = run_teacher(&cfg, &d, v.as_deref(), &run.out_dir, run.resume)?;
            emit(json!({
                "run_dir": o.dir,
                "checkpoint": o.checkpoint,
                "reused": o.reused,
                "f1_virtual": o.report_virtual.f1,
                "f1_real": o.report_real.f1,
            }));
        }
        Command::TrainStudent { data, run, teacher, virtual_root, .. } => {
            let (t, _) = load_lanenet::<f32>(&teacher, Some(&cfg.backbone))?;
            let d = load_data(data.data_root.as_deref(), &cfg)?;
            let v = virtual_root.map(|r| load_virtual(&r, "train", &cfg)).transpose()?;
            let o = run_student(&cfg, &d, v.as_deref(), &t, &run.out_dir, run.resume)?;
            emit(json!({
                "run_dir": o.dir,
                "checkpoint": o.checkpoint,
                "reused": o.reused,
                "f1": o.report.f1,
                "precision": o.report.precision,
                "recall": o.report.recall,
                "teacher_unchanged": o.teacher_checksum_before == o.teacher_checksum_after,
            }));
        }
        Command::Evaluate { data, checkpoint, mode, iou_threshold, width, report, .. } => {
            if let Some(m) = mode {
                cfg.eval.mode = match m {
                    Mode::Culane => EvalMode::Culane,
                    Mode::Tusimple => EvalMode::Tusimple,
                };
            }
            if let Some(t) = iou_threshold {
                cfg.eval.iou_threshold = t;
            }
            if let Some(w) = width {
                cfg.eval.width = w;
            }
            cfg.validate()?;
            let (net, _): (LaneNet32, _) = load_lanenet(&checkpoint, None)?;
            let d = load_data(data.data_root.as_deref(), &cfg)?;
            let r = evaluate_split(&net, &d.test, &cfg.eval)?;
            if let Some(p) = report {
                write_report(&p, &r)?;
            }
            print!("{}", r.table());
        }
        Command::Ablate { data, run, presets, mut seeds, .. } => {
            let presets = parse_presets(&presets)?;
            if seeds.is_empty() {
                seeds.push(cfg.seed);
            }
            let d = load_data(data.data_root.as_deref(), &cfg)?;
            let t = ablate(&cfg, &presets, &seeds, &d, &run.out_dir, run.resume)?;
            print!("{}", t.render());
        }
    }
    Ok(())
}

fn write_report(path: &Path, r: &ril_core::eval::EvalReport) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(r)?;
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim() }));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("{}", json!({ "error": "usage", "message": msg }));
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            let (kind, code) = classify(&e);
            let mut v = json!({ "error": kind, "message": e.to_string() });
            if let Error::Config { key, .. } = &e {
                v["key"] = json!(key);
            }
            eprintln!("{v}");
            ExitCode::from(code)
        }
    }
}

fn classify(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config { .. } => ("config", 1),
        Error::Invalid(_) => ("invalid", 1),
        Error::SpecMismatch { .. } => ("spec_mismatch", 1),
        Error::Divergence { .. } => ("divergence", 2),
        Error::NonConvergence { .. } | Error::Batch { .. } => ("repaint", 2),
        Error::Io { .. } | Error::Image { .. } => ("io", 2),
        Error::Checkpoint(_) => ("checkpoint", 2),
        Error::Parse { .. } | Error::Json(_) => ("parse", 2),
        _ => ("runtime", 2),
    }
}
