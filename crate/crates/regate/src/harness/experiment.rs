//! Experiment drivers and their on-disk layout.
//!
//! `run_experiment` produces a self-contained directory: the frozen
//! teacher checkpoint and report, per-arm metrics CSVs, summaries,
//! student checkpoints, the difficulty-buffer snapshot for the gated
//! arm, and a top-level `experiment.json` tying them together. A step
//! failure leaves `diagnostic.json` behind instead. All writers are
//! deterministic at fixed seed and precision (timing fields are zeroed
//! unless timing capture is on), so rerunning into a fresh directory
//! reproduces every file byte for byte.

use super::metrics::write_metrics_csv;
use super::train::{
    build_datasets, pretrain_teacher, train_one_arm, Arm, ArmSummary, Datasets, TeacherReport,
};
use super::{ExperimentConfig, HarnessError, Precision, RunMode};
use crate::data::Role;
use crate::model::loss::{eval_label_stats, reference_losses};
use crate::model::ModelParams;
use crate::scoring::{score_token, DifficultyBuffer, RefLossCache, ScoreMode};
use crate::tensor::Element;
use crate::VERSION;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn meta_line(cfg: &ExperimentConfig, arm_label: &str) -> String {
    format!(
        "arm={arm_label} seed={} precision={} schedule=C{}/F{}/p{}/W{}",
        cfg.train.seed,
        cfg.train.precision.name(),
        cfg.schedule.cycle_len,
        cfg.schedule.dense_prefix,
        cfg.schedule.p_sparse,
        cfg.schedule.warmup
    )
}

/// Best-effort crash report; never masks the original error.
fn write_diagnostic(out: &Path, arm: &str, e: &HarnessError) {
    let doc = serde_json::json!({
        "kind": "diagnostic",
        "version": VERSION,
        "arm": arm,
        "error": e.to_string(),
        "numerical": e.is_numerical(),
    });
    let _ = write_json(&out.join("diagnostic.json"), &doc);
}

/// Loads a frozen teacher checkpoint, or pretrains one when no path is
/// given. A loaded checkpoint must match the configured architecture.
fn acquire_teacher<T: Element>(
    cfg: &ExperimentConfig,
    data: &Datasets,
    teacher_path: Option<&Path>,
) -> Result<(ModelParams<T>, TeacherReport), HarnessError> {
    match teacher_path {
        None => pretrain_teacher(cfg, data),
        Some(path) => {
            let teacher = ModelParams::<T>::load(path)?;
            if teacher.cfg != cfg.model_config() {
                return Err(HarnessError::Config(format!(
                    "teacher checkpoint {} does not match the configured model",
                    path.display()
                )));
            }
            let stats = eval_label_stats(&teacher, &data.eval_text)?;
            let report = TeacherReport {
                version: VERSION.to_string(),
                source: path.display().to_string(),
                steps: 0,
                reached_target: stats.mean_copy < cfg.train.teacher_target_loss,
                target_copy_loss: cfg.train.teacher_target_loss,
                final_copy_loss: stats.mean_copy,
                final_visual_dep_loss: stats.mean_visual_dep,
                final_all_loss: stats.mean_all,
                param_hash: teacher.param_hash(),
            };
            Ok((teacher, report))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub teacher: TeacherReport,
    pub arms: Vec<ArmSummary>,
}

/// Runs the configured arms into `out`. With `mode = both` the baseline
/// and gated arms share the teacher, the data, and the batch order, so
/// their metrics differ only through gating.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    teacher_path: Option<&Path>,
) -> Result<ExperimentResult, HarnessError> {
    match cfg.train.precision {
        Precision::F32 => run_experiment_typed::<f32>(cfg, out, teacher_path),
        Precision::F64 => run_experiment_typed::<f64>(cfg, out, teacher_path),
    }
}

fn run_experiment_typed<T: Element>(
    cfg: &ExperimentConfig,
    out: &Path,
    teacher_path: Option<&Path>,
) -> Result<ExperimentResult, HarnessError> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let data = build_datasets(cfg);
    let (teacher, teacher_report) = match acquire_teacher::<T>(cfg, &data, teacher_path) {
        Ok(t) => t,
        Err(e) => {
            write_diagnostic(out, "teacher", &e);
            return Err(e);
        }
    };
    teacher.save(&out.join("teacher.json"))?;
    write_json(&out.join("teacher_report.json"), &teacher_report)?;

    let arms: &[Arm] = match cfg.mode {
        RunMode::Baseline => &[Arm::Baseline],
        RunMode::Regate => &[Arm::Regate],
        RunMode::Both => &[Arm::Baseline, Arm::Regate],
    };
    let mut summaries = Vec::new();
    for &arm in arms {
        let result = train_one_arm(cfg, arm, cfg.score.mode, cfg.score.lambda, &teacher, &data);
        let o = match result {
            Ok(o) => o,
            Err(e) => {
                write_diagnostic(out, arm.name(), &e);
                return Err(e);
            }
        };
        let name = arm.name();
        write_metrics_csv(
            &out.join(format!("{name}_metrics.csv")),
            &meta_line(cfg, name),
            &o.rows,
        )?;
        write_json(&out.join(format!("{name}_summary.json")), &o.summary)?;
        o.student.save(&out.join(format!("{name}_student.json")))?;
        if arm == Arm::Regate {
            write_json(&out.join(format!("{name}_buffer.json")), &o.buffer.snapshot())?;
        }
        summaries.push(o.summary);
    }
    let doc = serde_json::json!({
        "kind": "experiment",
        "version": VERSION,
        "config": cfg,
        "teacher": teacher_report,
        "arms": summaries,
    });
    write_json(&out.join("experiment.json"), &doc)?;
    Ok(ExperimentResult {
        teacher: teacher_report,
        arms: summaries,
    })
}

/// Pretrains and checkpoints a teacher without running any arm, so
/// later invocations can start from `--teacher <out>/teacher.json`.
pub fn pretrain_only(cfg: &ExperimentConfig, out: &Path) -> Result<TeacherReport, HarnessError> {
    match cfg.train.precision {
        Precision::F32 => pretrain_only_typed::<f32>(cfg, out),
        Precision::F64 => pretrain_only_typed::<f64>(cfg, out),
    }
}

fn pretrain_only_typed<T: Element>(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<TeacherReport, HarnessError> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let data = build_datasets(cfg);
    let (teacher, report) = pretrain_teacher::<T>(cfg, &data)?;
    teacher.save(&out.join("teacher.json"))?;
    write_json(&out.join("teacher_report.json"), &report)?;
    Ok(report)
}

fn mode_for_lambda(lambda: f64) -> (ScoreMode, &'static str) {
    if lambda == 0.0 {
        (ScoreMode::EmaOnly, "student difficulty only")
    } else if lambda == 1.0 {
        (ScoreMode::RefOnly, "reference loss only")
    } else {
        (ScoreMode::Combined, "combined difficulty and reference loss")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambda: f64,
    pub description: String,
    pub heldout_loss: f64,
    pub label_tokens: u64,
    pub tokens_forwarded: u64,
    pub ref_cache_reads: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: String,
    pub kind: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>6} {:<42} {:>13} {:>13} {:>17} {:>12}\n",
            "lambda", "description", "heldout_loss", "label_tokens", "tokens_forwarded", "cache_reads"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:>6} {:<42} {:>13.4} {:>13} {:>17} {:>12}\n",
                r.lambda, r.description, r.heldout_loss, r.label_tokens, r.tokens_forwarded, r.ref_cache_reads
            ));
        }
        out
    }
}

/// One gated run per configured lambda, all sharing the teacher, data,
/// and batch order. Lambda 0 scores from the student EMA alone, lambda
/// 1 from the reference loss alone, anything else blends the two.
pub fn ablate_lambda(
    cfg: &ExperimentConfig,
    out: &Path,
    teacher_path: Option<&Path>,
) -> Result<AblationReport, HarnessError> {
    match cfg.train.precision {
        Precision::F32 => ablate_lambda_typed::<f32>(cfg, out, teacher_path),
        Precision::F64 => ablate_lambda_typed::<f64>(cfg, out, teacher_path),
    }
}

fn ablate_lambda_typed<T: Element>(
    cfg: &ExperimentConfig,
    out: &Path,
    teacher_path: Option<&Path>,
) -> Result<AblationReport, HarnessError> {
    cfg.validate()?;
    if cfg.lambdas.is_empty() {
        return Err(HarnessError::Config("lambdas list is empty".into()));
    }
    std::fs::create_dir_all(out)?;
    let data = build_datasets(cfg);
    let (teacher, teacher_report) = acquire_teacher::<T>(cfg, &data, teacher_path)?;
    teacher.save(&out.join("teacher.json"))?;
    write_json(&out.join("teacher_report.json"), &teacher_report)?;

    let mut rows = Vec::new();
    for &lambda in &cfg.lambdas {
        let (mode, description) = mode_for_lambda(lambda);
        let label = format!("lambda{lambda}");
        let o = match train_one_arm(cfg, Arm::Regate, mode, lambda, &teacher, &data) {
            Ok(o) => o,
            Err(e) => {
                write_diagnostic(out, &label, &e);
                return Err(e);
            }
        };
        write_metrics_csv(
            &out.join(format!("lambda_{lambda}_metrics.csv")),
            &meta_line(cfg, &label),
            &o.rows,
        )?;
        write_json(&out.join(format!("lambda_{lambda}_summary.json")), &o.summary)?;
        rows.push(AblationRow {
            lambda,
            description: description.to_string(),
            heldout_loss: o.summary.final_heldout_loss,
            label_tokens: o.summary.label_tokens_kept,
            tokens_forwarded: o.summary.total_tokens,
            ref_cache_reads: o.summary.ref_cache_reads,
        });
    }
    let report = AblationReport {
        version: VERSION.to_string(),
        kind: "lambda-ablation".into(),
        seed: cfg.train.seed,
        rows,
    };
    write_json(&out.join("ablation.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DumpSplit {
    Train,
    Eval,
}

impl DumpSplit {
    pub fn name(self) -> &'static str {
        match self {
            DumpSplit::Train => "train",
            DumpSplit::Eval => "eval",
        }
    }
}

/// One line of the per-token score dump. `ema` and `kept_last_step` are
/// absent for positions the fine-tuning loop never touched; `combined`
/// is the gating score recomputed under the configured mode. Within each
/// sample the top half of label positions by reference loss is flagged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreDumpRecord {
    pub sample_id: u64,
    pub position: usize,
    pub token: u32,
    pub role: Role,
    pub ref_loss: f64,
    pub ema: Option<f64>,
    pub combined: f64,
    pub kept_last_step: Option<bool>,
    pub flagged: bool,
}

/// Writes JSON lines describing every scored position of the requested
/// samples (all samples of the split when `ids` is empty). The train
/// split first runs the gated arm so EMA values and last keep decisions
/// reflect an actual run; the eval split reports scores as a run would
/// compute them on first encounter.
pub fn score_dump(
    cfg: &ExperimentConfig,
    out_file: &Path,
    ids: &[u64],
    split: DumpSplit,
    teacher_path: Option<&Path>,
) -> Result<Vec<ScoreDumpRecord>, HarnessError> {
    match cfg.train.precision {
        Precision::F32 => score_dump_typed::<f32>(cfg, out_file, ids, split, teacher_path),
        Precision::F64 => score_dump_typed::<f64>(cfg, out_file, ids, split, teacher_path),
    }
}

fn score_dump_typed<T: Element>(
    cfg: &ExperimentConfig,
    out_file: &Path,
    ids: &[u64],
    split: DumpSplit,
    teacher_path: Option<&Path>,
) -> Result<Vec<ScoreDumpRecord>, HarnessError> {
    cfg.validate()?;
    let data = build_datasets(cfg);
    let (teacher, _) = acquire_teacher::<T>(cfg, &data, teacher_path)?;
    let (buffer, last_keep) = match split {
        DumpSplit::Train => {
            let o = train_one_arm(cfg, Arm::Regate, cfg.score.mode, cfg.score.lambda, &teacher, &data)?;
            (o.buffer, o.last_keep)
        }
        DumpSplit::Eval => (DifficultyBuffer::new(cfg.score.beta)?, BTreeMap::new()),
    };
    let set = match split {
        DumpSplit::Train => &data.train,
        DumpSplit::Eval => &data.eval,
    };
    let ids: Vec<u64> = if ids.is_empty() {
        set.iter().map(|s| s.seq.sample_id).collect()
    } else {
        ids.to_vec()
    };

    let mut records = Vec::new();
    for &id in &ids {
        let sample = set
            .iter()
            .find(|s| s.seq.sample_id == id)
            .ok_or(HarnessError::UnknownSample(id))?;
        let refs = reference_losses(&teacher, &sample.seq)?;
        let mut cache = RefLossCache::new();
        let entries: Vec<(u32, f64)> = refs.iter().map(|&(p, l)| (p as u32, l)).collect();
        cache.insert_sample(id, &entries)?;

        // flag the hardest half of this sample's labels by reference loss
        let mut labels: Vec<(usize, f64)> = refs
            .iter()
            .filter(|&&(p, _)| sample.seq.roles[p] == Role::Label)
            .copied()
            .collect();
        labels.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let n_flag = labels.len().div_ceil(2);
        let flagged: std::collections::BTreeSet<usize> =
            labels.iter().take(n_flag).map(|&(p, _)| p).collect();

        for &(pos, ref_loss) in &refs {
            let score = score_token(
                cfg.score.mode,
                cfg.score.lambda,
                &buffer,
                &cache,
                id,
                pos as u32,
            )?;
            records.push(ScoreDumpRecord {
                sample_id: id,
                position: pos,
                token: sample.seq.tokens[pos],
                role: sample.seq.roles[pos],
                ref_loss,
                ema: buffer.get(id, pos as u32),
                combined: score.value,
                kept_last_step: last_keep.get(&id).and_then(|f| f.get(pos).copied()),
                flagged: flagged.contains(&pos),
            });
        }
    }

    if let Some(parent) = out_file.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut text = serde_json::to_string(&serde_json::json!({
        "kind": "score-dump",
        "version": VERSION,
        "split": split.name(),
        "mode": cfg.score.mode,
        "lambda": cfg.score.lambda,
        "n_samples": ids.len(),
        "n_records": records.len(),
    }))?;
    text.push('\n');
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(out_file, text)?;
    Ok(records)
}

/// Writes the three sample sets as JSON lines, one file per split, each
/// headed by a metadata line. Teacher pretraining data is text-only.
pub fn write_datasets(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let data = build_datasets(cfg);
    for (name, set, text_only) in [
        ("pretrain", &data.pretrain, true),
        ("train", &data.train, false),
        ("eval", &data.eval, false),
    ] {
        let mut text = serde_json::to_string(&serde_json::json!({
            "kind": "dataset",
            "version": VERSION,
            "split": name,
            "n": set.len(),
            "seed": cfg.train.seed,
            "text_only": text_only,
        }))?;
        text.push('\n');
        for s in set.iter() {
            text.push_str(&serde_json::to_string(s)?);
            text.push('\n');
        }
        std::fs::write(out.join(format!("{name}.jsonl")), text)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::totals_from_csv;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model.n_layers = 1;
        cfg.model.n_heads = 2;
        cfg.model.d_model = 16;
        cfg.model.d_ff = 32;
        cfg.task.n_pretrain = 32;
        cfg.task.n_train = 32;
        cfg.task.n_eval = 8;
        cfg.train.batch_size = 8;
        cfg.train.max_steps = 5;
        cfg.train.teacher_max_steps = 4;
        cfg.train.eval_every = 2;
        cfg.train.progress_every = 0;
        cfg.schedule.warmup = 1;
        cfg.schedule.cycle_len = 4;
        cfg.schedule.dense_prefix = 1;
        cfg
    }

    #[test]
    fn experiment_directory_is_complete_and_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("exp");
        let cfg = tiny_config();
        let result = run_experiment(&cfg, &out, None).unwrap();
        assert_eq!(result.arms.len(), 2);
        for f in [
            "teacher.json",
            "teacher_report.json",
            "baseline_metrics.csv",
            "baseline_summary.json",
            "baseline_student.json",
            "regate_metrics.csv",
            "regate_summary.json",
            "regate_student.json",
            "regate_buffer.json",
            "experiment.json",
        ] {
            assert!(out.join(f).exists(), "missing {f}");
        }
        // the declared summary keys are present in the written JSON
        let text = std::fs::read_to_string(out.join("regate_summary.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["total_tokens", "total_steps", "wall_clock", "final_heldout_loss"] {
            assert!(v.get(key).is_some(), "summary lacks {key}");
        }
        // CSV column sums equal the summary totals
        for (arm, summary) in [("baseline", &result.arms[0]), ("regate", &result.arms[1])] {
            let t = totals_from_csv(&out.join(format!("{arm}_metrics.csv"))).unwrap();
            assert_eq!(t.label, arm);
            assert_eq!(t.tokens_forwarded, summary.total_tokens);
            assert_eq!(t.label_tokens_kept, summary.label_tokens_kept);
            assert_eq!(t.label_tokens_seen, Some(summary.label_tokens_seen));
        }
        // buffer snapshot restores
        let snap: crate::scoring::BufferSnapshot =
            serde_json::from_str(&std::fs::read_to_string(out.join("regate_buffer.json")).unwrap())
                .unwrap();
        let buf = DifficultyBuffer::from_snapshot(&snap).unwrap();
        assert!(buf.len() > 0);
    }

    #[test]
    fn rerunning_reproduces_every_file_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        run_experiment(&cfg, &a, None).unwrap();
        run_experiment(&cfg, &b, None).unwrap();
        for f in [
            "teacher.json",
            "regate_metrics.csv",
            "baseline_metrics.csv",
            "regate_student.json",
            "regate_buffer.json",
            "experiment.json",
        ] {
            let xa = std::fs::read(a.join(f)).unwrap();
            let xb = std::fs::read(b.join(f)).unwrap();
            assert_eq!(xa, xb, "{f} differs between identical runs");
        }
    }

    #[test]
    fn saved_teacher_can_seed_another_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.mode = RunMode::Baseline;
        let first = dir.path().join("first");
        let r1 = run_experiment(&cfg, &first, None).unwrap();
        let second = dir.path().join("second");
        let r2 = run_experiment(&cfg, &second, Some(&first.join("teacher.json"))).unwrap();
        assert_eq!(r1.teacher.param_hash, r2.teacher.param_hash);
        assert_eq!(r2.teacher.steps, 0);
        assert!(r2.teacher.source.ends_with("teacher.json"));
        // same weights, same data: identical students
        assert_eq!(r1.arms[0].student_hash, r2.arms[0].student_hash);

        // a checkpoint with a different architecture is refused
        let mut other = tiny_config();
        other.model.d_model = 32;
        other.model.d_ff = 64;
        let e = run_experiment(&other, &dir.path().join("third"), Some(&first.join("teacher.json")));
        assert!(matches!(e, Err(HarnessError::Config(_))));
    }

    #[test]
    fn ablation_runs_one_arm_per_lambda() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("abl");
        let mut cfg = tiny_config();
        cfg.train.max_steps = 4;
        let report = ablate_lambda(&cfg, &out, None).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.rows[0].lambda, 0.0);
        assert_eq!(report.rows[0].ref_cache_reads, 0, "lambda 0 must not read the cache");
        assert!(report.rows[2].ref_cache_reads > 0);
        // gating volume is schedule-driven, identical across lambdas
        let fwd: Vec<u64> = report.rows.iter().map(|r| r.tokens_forwarded).collect();
        assert!(fwd.iter().all(|&f| f == fwd[0]));
        for f in ["lambda_0_metrics.csv", "lambda_0.5_metrics.csv", "lambda_1_metrics.csv", "ablation.json"] {
            assert!(out.join(f).exists(), "missing {f}");
        }
        let table = report.table();
        assert!(table.contains("reference loss only"), "{table}");
        assert!(table.contains("student difficulty only"), "{table}");
    }

    #[test]
    fn score_dump_covers_prompts_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let file = dir.path().join("scores.jsonl");
        let records = score_dump(&cfg, &file, &[0, 3], DumpSplit::Train, None).unwrap();
        // prompt positions 1..=6 and all 8 labels, per sample
        assert_eq!(records.len(), 2 * (cfg.task.prompt_len + cfg.task.label_len));
        let text = std::fs::read_to_string(&file).unwrap();
        let mut lines = text.lines();
        let head: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(head["kind"], "score-dump");
        assert_eq!(head["n_records"], records.len() as u64);
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("ref_loss").is_some());
        }
        for r in &records {
            assert!(r.ref_loss.is_finite());
            assert_ne!(r.role, Role::Visual);
            assert_ne!(r.role, Role::Pad);
            if r.role == Role::Label {
                assert!(r.kept_last_step.is_some());
                // a label kept at its most recent step was EMA-updated then
                if r.kept_last_step == Some(true) {
                    assert!(r.ema.is_some());
                }
            } else {
                assert!(!r.flagged, "only labels are flagged");
            }
        }
        // exactly half of each sample's labels are flagged
        let flagged = records.iter().filter(|r| r.flagged).count();
        assert_eq!(flagged, 2 * (cfg.task.label_len / 2));

        assert!(matches!(
            score_dump(&cfg, &file, &[9999], DumpSplit::Train, None),
            Err(HarnessError::UnknownSample(9999))
        ));
    }

    #[test]
    fn dataset_export_writes_three_deterministic_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        write_datasets(&cfg, &a).unwrap();
        write_datasets(&cfg, &b).unwrap();
        for f in ["pretrain.jsonl", "train.jsonl", "eval.jsonl"] {
            let xa = std::fs::read(a.join(f)).unwrap();
            assert_eq!(xa, std::fs::read(b.join(f)).unwrap());
            let text = String::from_utf8(xa).unwrap();
            let head: serde_json::Value =
                serde_json::from_str(text.lines().next().unwrap()).unwrap();
            assert_eq!(head["kind"], "dataset");
            let n = head["n"].as_u64().unwrap() as usize;
            assert_eq!(text.lines().count(), n + 1);
        }
        // the pretrain split really is text-only
        let text = std::fs::read_to_string(a.join("pretrain.jsonl")).unwrap();
        for line in text.lines().skip(1) {
            let s: crate::data::Sample = serde_json::from_str(line).unwrap();
            assert!(s.seq.roles.iter().all(|r| *r != Role::Visual));
        }
    }
}
