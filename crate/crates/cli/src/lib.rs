//! Subcommand implementations behind the `ril` binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use ril_core::config::{config_checksum, config_json, Preset};
use ril_core::dataset::{generate_synthetic, load_culane, write_culane, CulaneOptions, LaneScene, VIRTUAL_SUFFIX};
use ril_core::eval::{evaluate_split, EvalReport};
use ril_core::model::{load_lanenet, save_discriminator, save_lanenet};
use ril_core::repaint::{repaint_dataset, repaint_dataset_with_stats};
use ril_core::trainer::{init_network, train_student, train_teacher, Hooks, RunConfig, Stream, TrainReport};
use ril_core::{Error, LaneNet32, Result};

pub const MANIFEST: &str = "manifest.json";

/// Train and test scenes of one dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<LaneScene>,
    pub test: Vec<LaneScene>,
}

/// Scenes from a CULane-style root (`train.txt` and `test.txt`), or the
/// configured synthetic benchmark when no root is given.
pub fn load_data(root: Option<&Path>, cfg: &RunConfig) -> Result<Dataset> {
    match root {
        Some(root) => {
            let train = CulaneOptions {
                mask_width: cfg.data.synth.mask_width,
                resize: Some(cfg.backbone.input_dims),
                ..CulaneOptions::default()
            };
            // Test scenes stay at native resolution; prediction rescales.
            let test = CulaneOptions {
                resize: None,
                ..train.clone()
            };
            Ok(Dataset {
                train: load_culane(root, "train", &train)?,
                test: load_culane(root, "test", &test)?,
            })
        }
        None => Ok(Dataset {
            train: generate_synthetic(&cfg.data.synth)?,
            test: generate_synthetic(&cfg.data.test_params())?,
        }),
    }
}

/// Read one split of a repainted root and tag its scenes as virtual.
pub fn load_virtual(root: &Path, split: &str, cfg: &RunConfig) -> Result<Vec<LaneScene>> {
    let opts = CulaneOptions {
        mask_width: cfg.data.synth.mask_width,
        resize: Some(cfg.backbone.input_dims),
        ..CulaneOptions::default()
    };
    let mut scenes = load_culane(root, split, &opts)?;
    for s in &mut scenes {
        if !s.is_virtual() {
            s.id.push_str(VIRTUAL_SUFFIX);
        }
    }
    Ok(scenes)
}

/// Provenance record of one run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub config_checksum: String,
    pub revision: String,
    pub seed: u64,
    pub started: String,
    #[serde(default)]
    pub finished: Option<String>,
    /// Artifact name to path relative to the run directory.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl RunManifest {
    fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.into(),
            config: cfg.clone(),
            config_checksum: config_checksum(cfg),
            revision: revision(),
            seed: cfg.seed,
            started: now(),
            finished: None,
            artifacts: BTreeMap::new(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.finished.is_some()
    }

    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let p = dir.join(MANIFEST);
        match fs::read_to_string(&p) {
            Ok(s) => Ok(Some(serde_json::from_str(&s)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&p, e)),
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST), self)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn revision() -> String {
    let git = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    match git {
        Some(rev) if !rev.is_empty() => format!("{} ({rev})", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text + "\n").map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// `<out>/<kind>-<config checksum prefix>-s<seed>`.
pub fn run_dir(out: &Path, kind: &str, cfg: &RunConfig) -> PathBuf {
    let sum = config_checksum(cfg);
    out.join(format!("{kind}-{}-s{}", &sum[..12], cfg.seed))
}

/// What to do with a run directory: `Some(manifest)` when a finished run can
/// be reused, `None` when the run should start (afresh).
fn prepare(dir: &Path, resume: bool) -> Result<Option<RunManifest>> {
    match RunManifest::read(dir)? {
        Some(m) if resume && m.is_complete() => Ok(Some(m)),
        Some(_) if !resume => Err(Error::Invalid(format!(
            "run directory {} already exists; pass --resume to reuse it",
            dir.display()
        ))),
        _ => {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            Ok(None)
        }
    }
}

fn metrics_file(dir: &Path) -> Result<fs::File> {
    let p = dir.join("metrics.jsonl");
    fs::File::create(&p).map_err(|e| io_err(&p, e))
}

/// Outcome of a teacher run.
pub struct TeacherOutcome {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub net: LaneNet32,
    pub report_virtual: EvalReport,
    pub report_real: EvalReport,
    pub reused: bool,
}

/// Train the teacher on the repainted training split and score it on both
/// test splits.
pub fn run_teacher(
    cfg: &RunConfig,
    data: &Dataset,
    virtual_train: Option<&[LaneScene]>,
    out: &Path,
    resume: bool,
) -> Result<TeacherOutcome> {
    cfg.validate()?;
    let dir = run_dir(out, "teacher", cfg);
    let checkpoint = dir.join("teacher.ckpt");
    if let Some(m) = prepare(&dir, resume)? {
        let (net, _) = load_lanenet::<f32>(&checkpoint, Some(&cfg.backbone))?;
        log::info!("reusing finished teacher run {}", dir.display());
        let reports: serde_json::Value = m.extra;
        return Ok(TeacherOutcome {
            dir,
            checkpoint,
            net,
            report_virtual: serde_json::from_value(reports["virtual"].clone())?,
            report_real: serde_json::from_value(reports["real"].clone())?,
            reused: true,
        });
    }
    let mut manifest = RunManifest::new("train-teacher", cfg);
    manifest.write(&dir)?;
    let owned;
    let vtrain = match virtual_train {
        Some(v) => v,
        None => {
            owned = repaint_dataset(&data.train, &cfg.repaint)?;
            &owned
        }
    };
    let vtest = repaint_dataset(&data.test, &cfg.repaint)?;
    let mut net = init_network::<f32>(cfg, Stream::TeacherInit)?;
    let mut log = metrics_file(&dir)?;
    let report = train_teacher(
        &mut net,
        vtrain,
        cfg,
        &mut Hooks {
            metrics: Some(&mut log),
            eval_scenes: None,
        },
    )?;
    save_lanenet(&checkpoint, &net, json!({ "role": "teacher", "config_checksum": manifest.config_checksum }))?;
    let report_virtual = evaluate_split(&net, &vtest, &cfg.eval)?;
    let report_real = evaluate_split(&net, &data.test, &cfg.eval)?;
    write_json(&dir.join("report_virtual.json"), &report_virtual)?;
    write_json(&dir.join("report_real.json"), &report_real)?;
    manifest.artifacts = artifacts(&[
        ("checkpoint", "teacher.ckpt"),
        ("metrics", "metrics.jsonl"),
        ("report_virtual", "report_virtual.json"),
        ("report_real", "report_real.json"),
    ]);
    manifest.extra = json!({
        "virtual": report_virtual,
        "real": report_real,
        "checksum": report.checksum,
    });
    manifest.finished = Some(now());
    manifest.write(&dir)?;
    Ok(TeacherOutcome {
        dir,
        checkpoint,
        net,
        report_virtual,
        report_real,
        reused: false,
    })
}

fn artifacts(items: &[(&str, &str)]) -> BTreeMap<String, String> {
    items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Outcome of a student run.
pub struct StudentOutcome {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub report: EvalReport,
    pub checksum: String,
    pub teacher_checksum_before: String,
    pub teacher_checksum_after: String,
    pub train: Option<TrainReport>,
    pub reused: bool,
}

/// Imitation run of one configuration against a frozen teacher.
pub fn run_student(
    cfg: &RunConfig,
    data: &Dataset,
    virtual_train: Option<&[LaneScene]>,
    teacher: &LaneNet32,
    out: &Path,
    resume: bool,
) -> Result<StudentOutcome> {
    cfg.validate()?;
    let dir = run_dir(out, "student", cfg);
    let checkpoint = dir.join("student.ckpt");
    let before = teacher.checksum();
    if let Some(m) = prepare(&dir, resume)? {
        if m.extra["teacher_checksum"] != json!(before) {
            return Err(Error::Invalid(format!(
                "finished run {} used a different teacher; remove it or change --out-dir",
                dir.display()
            )));
        }
        log::info!("reusing finished student run {}", dir.display());
        return Ok(StudentOutcome {
            report: read_json(&dir.join("report.json"))?,
            checksum: m.extra["checksum"].as_str().unwrap_or_default().to_string(),
            teacher_checksum_before: before.clone(),
            teacher_checksum_after: before,
            dir,
            checkpoint,
            train: None,
            reused: true,
        });
    }
    let mut manifest = RunManifest::new("train-student", cfg);
    manifest.write(&dir)?;
    let owned;
    let vtrain = match virtual_train {
        Some(v) => v,
        None if cfg.uses_virtual() => {
            owned = repaint_dataset(&data.train, &cfg.repaint)?;
            &owned
        }
        None => &[][..],
    };
    let mut student = init_network::<f32>(cfg, Stream::StudentInit)?;
    let mut log = metrics_file(&dir)?;
    let run = train_student(
        &mut student,
        teacher,
        &data.train,
        vtrain,
        cfg,
        &mut Hooks {
            metrics: Some(&mut log),
            eval_scenes: Some(&data.test),
        },
    )?;
    let after = teacher.checksum();
    let report = match &run.report.final_eval {
        Some(r) => r.clone(),
        None => evaluate_split(&student, &data.test, &cfg.eval)?,
    };
    save_lanenet(&checkpoint, &student, json!({ "role": "student", "config_checksum": manifest.config_checksum }))?;
    let mut arts = vec![
        ("checkpoint", "student.ckpt"),
        ("metrics", "metrics.jsonl"),
        ("report", "report.json"),
        ("trace", "trace.json"),
    ];
    if let Some(adv) = &run.discriminators {
        if let Some(d) = adv.first() {
            save_discriminator(&dir.join("d_first.ckpt"), d, &cfg.backbone, json!({ "mode": cfg.adv.mode }))?;
            arts.push(("discriminator_first", "d_first.ckpt"));
        }
        if let Some(d) = adv.second() {
            save_discriminator(&dir.join("d_data.ckpt"), d, &cfg.backbone, json!({ "mode": cfg.adv.mode }))?;
            arts.push(("discriminator_data", "d_data.ckpt"));
        }
    }
    write_json(&dir.join("report.json"), &report)?;
    write_json(&dir.join("trace.json"), &run.report.trace)?;
    manifest.artifacts = artifacts(&arts);
    manifest.extra = json!({
        "checksum": run.report.checksum,
        "teacher_checksum": before,
        "teacher_checksum_after": after,
        "f1": report.f1,
    });
    manifest.finished = Some(now());
    manifest.write(&dir)?;
    Ok(StudentOutcome {
        dir,
        checkpoint,
        checksum: run.report.checksum.clone(),
        report,
        teacher_checksum_before: before,
        teacher_checksum_after: after,
        train: Some(run.report),
        reused: false,
    })
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub preset: String,
    pub seed: u64,
    pub f1: f64,
    pub checksum: String,
    pub teacher_checksum_before: String,
    pub teacher_checksum_after: String,
    pub dir: String,
    /// Mean cross-scale distillation term over the last epoch.
    pub distill_cross: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub preset: String,
    pub mean_f1: f64,
    pub f1: Vec<f64>,
    /// Against the previous row; absent on the first.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
    pub teacher: BTreeMap<String, serde_json::Value>,
    pub complete: bool,
}

impl AblationTable {
    fn rebuild(&mut self, presets: &[Preset]) {
        self.rows.clear();
        let mut prev: Option<f64> = None;
        for p in presets {
            let f1: Vec<f64> = self.runs.iter().filter(|r| r.preset == p.name()).map(|r| r.f1).collect();
            if f1.is_empty() {
                continue;
            }
            let mean = f1.iter().sum::<f64>() / f1.len() as f64;
            self.rows.push(AblationRow {
                preset: p.name().to_string(),
                mean_f1: mean,
                f1,
                delta: prev.map(|q| mean - q),
            });
            prev = Some(mean);
        }
    }

    pub fn row(&self, p: Preset) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.preset == p.name())
    }

    /// Plain-text table: one row per preset with F1 and the change from the
    /// row above.
    pub fn render(&self) -> String {
        let mut s = format!("{:<16} {:>8} {:>8}  per-seed\n", "method", "F1", "delta");
        for r in &self.rows {
            let delta = r.delta.map_or("-".to_string(), |d| format!("{:+.4}", d));
            let seeds: Vec<String> = r.f1.iter().map(|f| format!("{f:.4}")).collect();
            s += &format!("{:<16} {:>8.4} {:>8}  {}\n", r.preset, r.mean_f1, delta, seeds.join(" "));
        }
        if !self.complete {
            s += "(incomplete)\n";
        }
        s
    }
}

/// Run every preset for every seed on shared data; one teacher per seed.
/// The table is rewritten after each run so a failure keeps what finished.
pub fn ablate(
    cfg: &RunConfig,
    presets: &[Preset],
    seeds: &[u64],
    data: &Dataset,
    out: &Path,
    resume: bool,
) -> Result<AblationTable> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let table_path = out.join("ablation.json");
    let mut table = AblationTable {
        seeds: seeds.to_vec(),
        ..AblationTable::default()
    };
    let result = (|| -> Result<()> {
        let vtrain = repaint_dataset(&data.train, &cfg.repaint)?;
        for &seed in seeds {
            let base = RunConfig { seed, ..cfg.clone() };
            let teacher = run_teacher(&base, data, Some(&vtrain), out, resume)?;
            table.teacher.insert(
                seed.to_string(),
                json!({
                    "virtual_f1": teacher.report_virtual.f1,
                    "real_f1": teacher.report_real.f1,
                    "checksum": teacher.net.checksum(),
                }),
            );
            for &p in presets {
                let c = p.apply(&base);
                let o = run_student(&c, data, Some(&vtrain), &teacher.net, out, resume)?;
                let distill_cross = match &o.train {
                    Some(t) => t.epochs.last().map_or(0.0, |e| e.losses.distill_cross),
                    None => {
                        let trace: Vec<ril_core::trainer::RilLosses> = read_json(&o.dir.join("trace.json"))?;
                        trace.last().map_or(0.0, |l| l.distill_cross)
                    }
                };
                log::info!("seed {seed} {}: f1 {:.4}", p.name(), o.report.f1);
                table.runs.push(AblationRun {
                    preset: p.name().to_string(),
                    seed,
                    f1: o.report.f1,
                    checksum: o.checksum,
                    teacher_checksum_before: o.teacher_checksum_before,
                    teacher_checksum_after: o.teacher_checksum_after,
                    dir: o.dir.display().to_string(),
                    distill_cross,
                });
                table.rebuild(presets);
                write_json(&table_path, &table)?;
            }
        }
        Ok(())
    })();
    table.rebuild(presets);
    table.complete = result.is_ok();
    write_json(&table_path, &table)?;
    result.map(|_| table)
}

/// Write the synthetic benchmark as CULane-style train and test splits.
pub fn synth_to_disk(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let data = load_data(None, cfg)?;
    write_culane(out, "train", &data.train)?;
    write_culane(out, "test", &data.test)?;
    Ok(data)
}

/// Repaint one split of `root` into `out` under the same split name, with
/// per-scene solver statistics in `repaint_stats.jsonl`.
pub fn repaint_to_disk(cfg: &RunConfig, root: &Path, split: &str, out: &Path) -> Result<usize> {
    let opts = CulaneOptions {
        mask_width: cfg.data.synth.mask_width,
        ..CulaneOptions::default()
    };
    let scenes = load_culane(root, split, &opts)?;
    let (virt, stats) = repaint_dataset_with_stats(&scenes, &cfg.repaint)?;
    write_culane(out, split, &virt)?;
    let p = out.join("repaint_stats.jsonl");
    let mut f = fs::File::create(&p).map_err(|e| io_err(&p, e))?;
    for s in &stats {
        writeln!(f, "{}", serde_json::to_string(s)?).map_err(|e| io_err(&p, e))?;
    }
    Ok(virt.len())
}

/// Snapshot of the effective configuration, for `--print-config`.
pub fn effective_config(cfg: &RunConfig) -> String {
    config_json(cfg)
}
