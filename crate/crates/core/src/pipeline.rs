//! Run configuration and the on-disk stages of an experiment: teacher
//! pretraining, distillation, reinforcement, evaluation and curve export.
//!
//! Every stage reads its inputs from and writes its outputs under
//! `out_dir`, so stages can run in separate processes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::numerics::mlp::MlpSpec;
use crate::numerics::rng::StreamKey;
use crate::schedule::{NoiseSchedule, StepGrid};
use crate::student::Student;
use crate::teacher::{pretrain, Pretrained, TaskConfig, TeacherConfig, ToyTask};
use crate::trainer::{
    distill, distill_from_rl_teacher, evaluate, read_csv, write_csv, Baseline, DistillConfig,
    Distilled, EvalReport, EvalRow, MetricsRow, R1Trainer, TrainerConfig,
};

/// Top-level keys every run config must name.
pub const RUN_CONFIG_KEYS: [&str; 7] = [
    "out_dir", "seed", "t_max", "task", "teacher", "distill", "trainer",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// The single seed every stage derives its noise streams from.
    pub seed: u64,
    /// Diffusion horizon `T`.
    pub t_max: usize,
    pub task: TaskConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub trainer: TrainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            t_max: 1000,
            task: TaskConfig::default(),
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            trainer: TrainerConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a JSON document. Missing top-level keys are all reported at
    /// once; syntax errors carry their line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("malformed JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("run config must be a JSON object".into()))?;
        let missing: Vec<&str> = RUN_CONFIG_KEYS
            .iter()
            .copied()
            .filter(|k| !obj.contains_key(*k))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "missing config fields: {}",
                missing.join(", ")
            )));
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput {
                what: "run config".into(),
                path: path.to_path_buf(),
            });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_max < 2 {
            return Err(Error::Config(format!(
                "t_max must be >= 2, got {}",
                self.t_max
            )));
        }
        if self.distill.steps > self.t_max {
            return Err(Error::Config("distill.steps exceeds t_max".into()));
        }
        self.distill.validate()?;
        self.trainer.validate()
    }

    pub fn key(&self) -> StreamKey {
        StreamKey::new(self.seed)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_max)
    }

    pub fn toy_task(&self) -> Result<ToyTask> {
        ToyTask::from_config(&self.task)
    }

    pub fn net_spec(&self, task: &ToyTask) -> MlpSpec {
        self.teacher.net.spec(task, self.t_max)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.out_dir)
    }
}

/// File locations under a run's output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout {
            root: root.to_path_buf(),
        }
    }

    pub fn teacher_dir(&self) -> PathBuf {
        self.root.join("teacher")
    }

    pub fn teacher_model(&self) -> PathBuf {
        self.teacher_dir().join("model")
    }

    pub fn distill_dir(&self) -> PathBuf {
        self.root.join("distill")
    }

    pub fn distill_student(&self) -> PathBuf {
        self.distill_dir().join("student")
    }

    pub fn distill_fake(&self) -> PathBuf {
        self.distill_dir().join("fake")
    }

    pub fn r1_dir(&self) -> PathBuf {
        self.root.join("r1")
    }

    pub fn r1_metrics(&self) -> PathBuf {
        self.r1_dir().join("metrics.csv")
    }

    pub fn r1_evals(&self) -> PathBuf {
        self.r1_dir().join("evals.csv")
    }

    /// Full trainer state, rewritten every `save_every` iterations.
    pub fn r1_checkpoint(&self) -> PathBuf {
        self.r1_dir().join("checkpoint")
    }

    pub fn r1_student(&self) -> PathBuf {
        self.r1_dir().join("student")
    }
}

/// `sha256:<hex>` of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

/// Record of what produced a stage's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub seed: u64,
    pub baseline: Baseline,
    pub code_hash: String,
    pub config: RunConfig,
}

pub fn write_manifest(
    dir: &Path,
    stage: &str,
    cfg: &RunConfig,
    code_hash: &str,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = RunManifest {
        stage: stage.into(),
        seed: cfg.seed,
        baseline: cfg.trainer.baseline,
        code_hash: code_hash.into(),
        config: cfg.clone(),
    };
    let p = dir.join("manifest.json");
    std::fs::write(&p, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(&p, e))?;
    Ok(p)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let p = dir.join("manifest.json");
    if !p.exists() {
        return Err(Error::MissingInput {
            what: "run manifest".into(),
            path: p,
        });
    }
    Ok(serde_json::from_slice(
        &std::fs::read(&p).map_err(|e| Error::io(&p, e))?,
    )?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct TeacherSummary {
    held_out_loss: f64,
    final_sliced_w2: f64,
}

/// Pretrain the teacher; writes `teacher/{model,metrics.csv,summary.json}`.
pub fn run_pretrain(cfg: &RunConfig) -> Result<Pretrained> {
    let task = cfg.toy_task()?;
    let sched = cfg.schedule()?;
    let p = pretrain(&task, &sched, &cfg.teacher, cfg.key())?;
    let layout = cfg.layout();
    p.model.save(&layout.teacher_model())?;
    write_csv(&p.metrics, &layout.teacher_dir().join("metrics.csv"))?;
    write_json(
        &layout.teacher_dir().join("summary.json"),
        &TeacherSummary {
            held_out_loss: p.held_out_loss,
            final_sliced_w2: p.metrics.last().map_or(f64::NAN, |r| r.sliced_w2),
        },
    )?;
    Ok(p)
}

pub fn load_teacher(cfg: &RunConfig) -> Result<Denoiser> {
    let task = cfg.toy_task()?;
    Denoiser::load(
        &cfg.layout().teacher_model(),
        cfg.net_spec(&task),
        task.sigma_data(),
    )
}

/// Distill the saved teacher; writes `distill/{student,fake,metrics.csv}`.
pub fn run_distill(cfg: &RunConfig) -> Result<Distilled> {
    let teacher = load_teacher(cfg)?;
    let d = distill(
        &teacher,
        &cfg.toy_task()?,
        &cfg.schedule()?,
        &cfg.distill,
        cfg.key(),
    )?;
    let layout = cfg.layout();
    d.student.model.save(&layout.distill_student())?;
    d.fake.save(&layout.distill_fake())?;
    write_csv(&d.metrics, &layout.distill_dir().join("metrics.csv"))?;
    Ok(d)
}

/// The distilled student and its fake score.
pub fn load_distilled(cfg: &RunConfig) -> Result<(Student, Denoiser)> {
    let task = cfg.toy_task()?;
    let spec = cfg.net_spec(&task);
    let layout = cfg.layout();
    let grid = StepGrid::uniform(cfg.t_max, cfg.distill.steps)?;
    let student = Student::new(
        Denoiser::load(&layout.distill_student(), spec.clone(), task.sigma_data())?,
        grid,
    );
    let fake = Denoiser::load(&layout.distill_fake(), spec, task.sigma_data())?;
    Ok((student, fake))
}

/// Outcome of [`run_train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub evals: Vec<EvalRow>,
    pub student: Student,
}

impl TrainOutcome {
    pub fn initial(&self) -> Option<&EvalRow> {
        self.evals.first()
    }

    pub fn last(&self) -> Option<&EvalRow> {
        self.evals.last()
    }
}

/// Train from the distilled checkpoints, or from `r1/checkpoint` when
/// `resume` is set and one exists. Writes `r1/{metrics.csv,evals.csv,student,
/// checkpoint}`.
pub fn run_train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let task = cfg.toy_task()?;
    let sched = cfg.schedule()?;
    let teacher = load_teacher(cfg)?;
    let layout = cfg.layout();
    let key = cfg.key().derive_str("train");
    if cfg.trainer.baseline == Baseline::DistillFromRlTeacher {
        return run_rl_teacher_baseline(cfg, &teacher, &task, &sched, key);
    }
    let ckpt = layout.r1_checkpoint();
    let (mut trainer, mut rows) = if resume && ckpt.join("state.json").exists() {
        let trainer = R1Trainer::resume(cfg.trainer.clone(), task, sched, teacher, key, &ckpt)?;
        let mut rows: Vec<MetricsRow> = read_csv(&layout.r1_metrics())?;
        rows.truncate(trainer.iteration());
        if rows.len() != trainer.iteration() {
            return Err(Error::Format(format!(
                "metrics.csv has {} rows but the checkpoint is at iteration {}",
                rows.len(),
                trainer.iteration()
            )));
        }
        (trainer, rows)
    } else {
        let (student, fake) = load_distilled(cfg)?;
        let trainer = R1Trainer::new(
            cfg.trainer.clone(),
            task,
            sched,
            teacher,
            student,
            fake,
            key,
        )?;
        (trainer, Vec::new())
    };
    let save_every = cfg.trainer.save_every;
    trainer.run(|t, row| {
        rows.push(row.clone());
        if save_every.is_some_and(|s| t.iteration() % s == 0) {
            t.save_checkpoint(&ckpt)?;
            write_csv(&rows, &layout.r1_metrics())?;
        }
        Ok(())
    })?;
    trainer.save_checkpoint(&ckpt)?;
    write_csv(&rows, &layout.r1_metrics())?;
    write_csv(trainer.evals(), &layout.r1_evals())?;
    trainer.student.model.save(&layout.r1_student())?;
    Ok(TrainOutcome {
        metrics: rows,
        evals: trainer.evals().to_vec(),
        student: trainer.student.clone(),
    })
}

fn run_rl_teacher_baseline(
    cfg: &RunConfig,
    teacher: &Denoiser,
    task: &ToyTask,
    sched: &NoiseSchedule,
    key: StreamKey,
) -> Result<TrainOutcome> {
    let layout = cfg.layout();
    let run = distill_from_rl_teacher(teacher, task, sched, &cfg.trainer, &cfg.distill, key)?;
    let eval_key = key.derive_str("eval");
    let report = |s: &Student| {
        evaluate(
            s,
            teacher,
            task,
            cfg.trainer.reward,
            sched,
            cfg.trainer.eval_samples,
            eval_key,
        )
    };
    let (pre, _) = load_distilled(cfg)?;
    let evals = vec![
        eval_row(0, report(&pre)?),
        eval_row(
            cfg.trainer.rl_teacher.iterations + cfg.distill.iterations,
            report(&run.distilled.student)?,
        ),
    ];
    write_csv(&run.rl_metrics, &layout.r1_metrics())?;
    write_csv(&evals, &layout.r1_evals())?;
    write_csv(
        &run.distilled.metrics,
        &layout.r1_dir().join("distill_metrics.csv"),
    )?;
    run.distilled.student.model.save(&layout.r1_student())?;
    Ok(TrainOutcome {
        metrics: run.rl_metrics,
        evals,
        student: run.distilled.student,
    })
}

fn eval_row(iteration: usize, e: EvalReport) -> EvalRow {
    EvalRow {
        iteration,
        mean_reward: e.mean_reward,
        sliced_w2: e.sliced_w2,
        coarse_region_rate: e.coarse_region_rate,
    }
}

/// Which student [`run_evaluate`] scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    Distilled,
    Trained,
}

/// Score a saved student with fresh rollouts; writes `eval_<target>.json`.
pub fn run_evaluate(cfg: &RunConfig, target: EvalTarget, n: usize) -> Result<EvalReport> {
    let task = cfg.toy_task()?;
    let sched = cfg.schedule()?;
    let teacher = load_teacher(cfg)?;
    let layout = cfg.layout();
    let dir = match target {
        EvalTarget::Distilled => layout.distill_student(),
        EvalTarget::Trained => layout.r1_student(),
    };
    let model = Denoiser::load(&dir, cfg.net_spec(&task), task.sigma_data())?;
    let student = Student::new(model, StepGrid::uniform(cfg.t_max, cfg.distill.steps)?);
    let report = evaluate(
        &student,
        &teacher,
        &task,
        cfg.trainer.reward,
        &sched,
        n,
        cfg.key().derive_str("evaluate"),
    )?;
    let name = match target {
        EvalTarget::Distilled => "eval_distilled.json",
        EvalTarget::Trained => "eval_trained.json",
    };
    write_json(&layout.root.join(name), &report)?;
    Ok(report)
}

/// Columns of every exported curve file.
pub const CURVE_COLUMNS: [&str; 5] = ["run_id", "variant", "iteration", "metric", "value"];

/// File written by [`export_plots`] from each run's `metrics.csv`.
pub const TRAIN_CURVES_FILE: &str = "train_curves.csv";

/// File written by [`export_plots`] from each run's `evals.csv`.
pub const EVAL_CURVES_FILE: &str = "eval_curves.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub run_id: String,
    /// `rollout_mode/surrogate_mode/baseline` of the run.
    pub variant: String,
    pub iteration: usize,
    pub metric: String,
    pub value: f64,
}

/// Label of a training configuration used to key ablation overlays.
pub fn variant_label(t: &TrainerConfig) -> String {
    let tag = |v: serde_json::Value| match v {
        serde_json::Value::String(s) => s,
        serde_json::Value::Object(o) => o
            .get("mode")
            .and_then(|m| m.as_str())
            .map(str::to_string)
            .unwrap_or_else(|| serde_json::Value::Object(o).to_string()),
        other => other.to_string(),
    };
    let j = |x: serde_json::Result<serde_json::Value>| tag(x.expect("serializable enum"));
    format!(
        "{}/{}/{}",
        j(serde_json::to_value(t.rollout_mode)),
        j(serde_json::to_value(t.surrogate_mode)),
        j(serde_json::to_value(t.baseline))
    )
}

/// Turn the training and evaluation logs of each run directory into two
/// long-format CSVs under `out`, one row per (run, iteration, metric).
/// Run ids are directory names, suffixed on collision.
pub fn export_plots(run_dirs: &[PathBuf], out: &Path) -> Result<(PathBuf, PathBuf)> {
    if run_dirs.is_empty() {
        return Err(Error::invalid("export needs at least one run directory"));
    }
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut train = Vec::new();
    let mut evals = Vec::new();
    for dir in run_dirs {
        let layout = Layout::new(dir);
        let base = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        let n = seen.entry(base.clone()).or_insert(0);
        let run_id = if *n == 0 {
            base.clone()
        } else {
            format!("{base}-{n}")
        };
        *n += 1;
        let variant = match read_manifest(&layout.r1_dir()) {
            Ok(m) => variant_label(&m.config.trainer),
            Err(_) => "unknown".into(),
        };
        let rows: Vec<MetricsRow> = read_csv(&layout.r1_metrics())?;
        for r in &rows {
            let vals = [
                ("mean_reward", r.mean_reward),
                ("std_reward", r.std_reward),
                ("surrogate_loss", r.surrogate_loss),
                ("fake_loss", r.fake_loss),
                ("reward_term_grad_norm", r.reward_term_grad_norm),
                ("kl_term_grad_norm", r.kl_term_grad_norm),
                ("beta_g_effective", r.beta_g_effective),
                ("sliced_w2_to_teacher", r.sliced_w2_to_teacher),
            ];
            for (metric, value) in vals {
                train.push(CurvePoint {
                    run_id: run_id.clone(),
                    variant: variant.clone(),
                    iteration: r.iteration,
                    metric: metric.into(),
                    value,
                });
            }
        }
        let eval_rows: Vec<EvalRow> = read_csv(&layout.r1_evals())?;
        for e in &eval_rows {
            for (metric, value) in [
                ("mean_reward", e.mean_reward),
                ("sliced_w2", e.sliced_w2),
                ("coarse_region_rate", e.coarse_region_rate),
            ] {
                evals.push(CurvePoint {
                    run_id: run_id.clone(),
                    variant: variant.clone(),
                    iteration: e.iteration,
                    metric: metric.into(),
                    value,
                });
            }
        }
    }
    let tp = out.join(TRAIN_CURVES_FILE);
    let ep = out.join(EVAL_CURVES_FILE);
    write_csv(&train, &tp)?;
    write_csv(&evals, &ep)?;
    Ok((tp, ep))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json_pretty()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_keys_are_all_listed() {
        let err = RunConfig::from_json(r#"{"seed": 1, "t_max": 1000}"#)
            .unwrap_err()
            .to_string();
        for k in ["out_dir", "task", "teacher", "distill", "trainer"] {
            assert!(err.contains(k), "{err}");
        }
        assert!(!err.contains("seed"));
    }

    #[test]
    fn syntax_errors_carry_location() {
        let err = RunConfig::from_json("{\n  \"seed\": ,\n}")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        v["trainer"]["grop_size"] = 3.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        v["extra"] = 1.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn content_hash_is_sha256() {
        assert_eq!(
            content_hash(b"abc"),
            "sha256:ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn variant_labels() {
        let t = TrainerConfig::default();
        assert_eq!(variant_label(&t), "deterministic/dynamic/none");
    }
}
