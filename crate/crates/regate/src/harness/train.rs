//! Teacher pretraining and the per-arm fine-tuning loop.
//!
//! Fine-tuning starts the student from the teacher's weights. The
//! baseline arm keeps every candidate at every step; the gated arm
//! follows the sparsity schedule, scoring label positions with the
//! difficulty EMA blended with the teacher's cached reference loss.
//! Reference losses are computed lazily the first time a sample is
//! gated and reused for the rest of the run (the teacher is frozen, so
//! they are constants).
//!
//! Everything that consumes randomness draws from streams derived from
//! the master seed with fixed tags, so both arms see the same data in
//! the same order and a rerun reproduces every byte.

use super::metrics::MetricsRow;
use super::{ExperimentConfig, HarnessError, LrDecay};
use crate::data::{derive_seed, generate_dataset, Role, Sample};
use crate::gating::{candidate_positions, gate_sample, GateDecision};
use crate::model::loss::{batch_label_loss, batch_label_loss_dense, eval_label_stats};
use crate::model::net::{bind, gradients};
use crate::model::ModelParams;
use crate::optim::Optimizer;
use crate::scoring::{score_token, DifficultyBuffer, RefLossCache, ScoreMode};
use crate::tensor::{Element, Tape, TensorError};
use crate::VERSION;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::time::Instant;

// Seed stream tags; changing one reshuffles that stream and nothing else.
const TAG_PRETRAIN_DATA: u64 = 1;
const TAG_TRAIN_DATA: u64 = 2;
const TAG_EVAL_DATA: u64 = 3;
const TAG_TEACHER_INIT: u64 = 4;
const TAG_TEACHER_SHUFFLE: u64 = 5;
const TAG_ARM_SHUFFLE: u64 = 6;

const TEACHER_EVAL_EVERY: usize = 25;

// Linear decay anneals to this fraction of the base rate rather than to
// zero, so the final stretch still learns while large late-run updates
// (which Adam's normalization would otherwise keep at full size) die out.
const LR_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Baseline,
    Regate,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Regate => "regate",
        }
    }
}

/// All sample sets for one experiment. `eval_text` holds the same
/// held-out samples as `eval` with the visual span padded out, for
/// teacher-side evaluation.
pub struct Datasets {
    pub pretrain: Vec<Sample>,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub eval_text: Vec<Sample>,
}

pub fn build_datasets(cfg: &ExperimentConfig) -> Datasets {
    let t = &cfg.task;
    let seed = cfg.train.seed;
    Datasets {
        pretrain: generate_dataset(t, t.n_pretrain, derive_seed(seed, TAG_PRETRAIN_DATA), true),
        train: generate_dataset(t, t.n_train, derive_seed(seed, TAG_TRAIN_DATA), false),
        eval: generate_dataset(t, t.n_eval, derive_seed(seed, TAG_EVAL_DATA), false),
        eval_text: generate_dataset(t, t.n_eval, derive_seed(seed, TAG_EVAL_DATA), true),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherReport {
    pub version: String,
    pub source: String,
    pub steps: usize,
    pub reached_target: bool,
    pub target_copy_loss: f64,
    pub final_copy_loss: f64,
    pub final_visual_dep_loss: f64,
    pub final_all_loss: f64,
    pub param_hash: String,
}

/// Trains the text-only teacher with the dense route until held-out
/// copy-label loss drops below the target or the step budget expires.
/// Budget expiry is reported, not fatal.
pub fn pretrain_teacher<T: Element>(
    cfg: &ExperimentConfig,
    data: &Datasets,
) -> Result<(ModelParams<T>, TeacherReport), HarnessError> {
    let model_cfg = cfg.model_config();
    let seed = cfg.train.seed;
    let mut teacher =
        ModelParams::<T>::init(model_cfg, derive_seed(seed, TAG_TEACHER_INIT))?;
    let mut opt = Optimizer::<T>::new(cfg.optim.algo, cfg.optim.lr);
    let n = data.pretrain.len();
    let batch_size = cfg.train.batch_size;

    let mut order: Vec<usize> = (0..n).collect();
    let shuffle_master = derive_seed(seed, TAG_TEACHER_SHUFFLE);
    let mut epoch = 0u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(shuffle_master, epoch));
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut steps = 0usize;
    let mut reached = false;
    while steps < cfg.train.teacher_max_steps {
        if cursor + batch_size > n {
            epoch += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(shuffle_master, epoch));
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch_size];
        cursor += batch_size;
        let batch: Vec<_> = idx.iter().map(|&i| &data.pretrain[i].seq).collect();

        let mut tape = Tape::<T>::new();
        let bound = bind(&mut tape, &teacher, true)?;
        let out = batch_label_loss_dense(&mut tape, &bound, &model_cfg, &batch)?;
        let loss = tape.scalar(out.loss).to_f64();
        if !loss.is_finite() {
            return Err(HarnessError::Tensor(TensorError::NonFinite {
                op: "teacher_loss",
            }));
        }
        tape.backward(out.loss)?;
        let grads = gradients(&tape, &bound);
        {
            let mut named = teacher.named_mut();
            let mut refs: Vec<&mut Vec<T>> = named.iter_mut().map(|(_, p)| &mut p.data).collect();
            opt.step(&mut refs, &grads)?;
        }
        steps += 1;

        if cfg.train.progress_every > 0 && steps % cfg.train.progress_every == 0 {
            log::info!("teacher step {steps}/{} loss={loss:.4}", cfg.train.teacher_max_steps);
        }
        if steps % TEACHER_EVAL_EVERY == 0 || steps == cfg.train.teacher_max_steps {
            let stats = eval_label_stats(&teacher, &data.eval_text)?;
            if stats.mean_copy < cfg.train.teacher_target_loss {
                reached = true;
                break;
            }
        }
    }

    let stats = eval_label_stats(&teacher, &data.eval_text)?;
    if !reached && stats.mean_copy < cfg.train.teacher_target_loss {
        reached = true;
    }
    if !reached {
        log::warn!(
            "teacher stopped at {steps} steps with copy loss {:.4}, target {} not reached",
            stats.mean_copy,
            cfg.train.teacher_target_loss
        );
    }
    let report = TeacherReport {
        version: VERSION.to_string(),
        source: "pretrained".into(),
        steps,
        reached_target: reached,
        target_copy_loss: cfg.train.teacher_target_loss,
        final_copy_loss: stats.mean_copy,
        final_visual_dep_loss: stats.mean_visual_dep,
        final_all_loss: stats.mean_all,
        param_hash: teacher.param_hash(),
    };
    Ok((teacher, report))
}

/// The arm summary written next to each metrics file. The first four
/// fields are the stable reporting surface; the rest support auditing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmSummary {
    pub total_tokens: u64,
    pub total_steps: usize,
    pub wall_clock: f64,
    pub final_heldout_loss: f64,
    pub version: String,
    pub arm: String,
    pub seed: u64,
    pub precision: String,
    pub stopped_by_budget: bool,
    pub label_tokens_kept: u64,
    pub label_tokens_seen: u64,
    pub dense_equivalent_tokens: u64,
    pub final_train_loss: f64,
    pub final_heldout_copy_loss: f64,
    pub final_heldout_visual_dep_loss: f64,
    pub teacher_hash: String,
    pub student_hash: String,
    pub data_order_hash: String,
    pub ref_cache_reads: u64,
    pub ref_cache_samples: usize,
    /// Over post-warm-up sparse steps: fraction of label tokens whose
    /// keep flag matched ground-truth visual dependence.
    pub sparse_kept_label_agreement: Option<f64>,
}

pub struct ArmOutput<T> {
    pub rows: Vec<MetricsRow>,
    pub summary: ArmSummary,
    pub student: ModelParams<T>,
    pub buffer: DifficultyBuffer,
    /// Keep flags from each train sample's most recent appearance.
    pub last_keep: BTreeMap<u64, Vec<bool>>,
}

/// Runs one fine-tuning arm to completion. `score_mode` and `lambda`
/// are passed explicitly so the lambda ablation can vary them without
/// cloning the whole config.
pub fn train_one_arm<T: Element>(
    cfg: &ExperimentConfig,
    arm: Arm,
    score_mode: ScoreMode,
    lambda: f64,
    teacher: &ModelParams<T>,
    data: &Datasets,
) -> Result<ArmOutput<T>, HarnessError> {
    let model_cfg = teacher.cfg;
    let seed = cfg.train.seed;
    let mut student = teacher.clone();
    let teacher_hash = teacher.param_hash();
    let mut opt = Optimizer::<T>::new(cfg.optim.algo, cfg.optim.lr);
    let mut buffer = DifficultyBuffer::new(cfg.score.beta)?;
    let mut cache = RefLossCache::new();
    let mut last_keep: BTreeMap<u64, Vec<bool>> = BTreeMap::new();

    let n = data.train.len();
    let batch_size = cfg.train.batch_size;
    let mut order: Vec<usize> = (0..n).collect();
    // both arms derive the shuffle from the master seed alone, so they
    // visit identical batches in identical order
    let shuffle_master = derive_seed(seed, TAG_ARM_SHUFFLE);
    let mut epoch = 0u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(shuffle_master, epoch));
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut order_hasher = Sha256::new();

    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut cum_forwarded = 0u64;
    let mut cum_label_kept = 0u64;
    let mut cum_label_seen = 0u64;
    let mut cum_dense_equiv = 0u64;
    let mut agree = 0u64;
    let mut agree_total = 0u64;
    let budget = cfg.train.budget_label_tokens;
    let run_start = Instant::now();
    let mut stopped_by_budget = false;

    let mut step = 0usize;
    while step < cfg.train.max_steps {
        let wrap = |e: HarnessError| HarnessError::StepFailed {
            arm: arm.name(),
            step,
            source: Box::new(e),
        };
        if cursor + batch_size > n {
            epoch += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(shuffle_master, epoch));
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch_size];
        cursor += batch_size;
        let batch: Vec<&Sample> = idx.iter().map(|&i| &data.train[i]).collect();
        for s in &batch {
            order_hasher.update(s.seq.sample_id.to_le_bytes());
        }

        let step_start = Instant::now();
        let scheduled_p = cfg.schedule.keep_fraction(step as u64);
        let p = match arm {
            Arm::Baseline => 1.0,
            Arm::Regate => scheduled_p,
        };
        if cfg.optim.decay == LrDecay::Linear {
            // fraction of the horizon already spent; with a token budget
            // this is spend-based, so both arms anneal on the same curve
            // even though they keep different token counts per step
            let frac = if budget > 0 {
                (cum_label_kept as f64 / budget as f64).min(1.0)
            } else {
                step as f64 / cfg.train.max_steps.max(1) as f64
            };
            let scale = LR_FLOOR + (1.0 - LR_FLOOR) * (1.0 - frac);
            opt.set_lr(cfg.optim.lr * scale);
        }

        // gate every sample of the batch at fraction p
        let mut decisions: Vec<GateDecision> = Vec::with_capacity(batch.len());
        for s in &batch {
            let cands = candidate_positions(&s.seq, cfg.score.gate_prompt_tokens);
            let scored: Vec<(usize, f64)> = if p >= 1.0 {
                // scores are ignored at full keep; nothing is computed
                cands.iter().map(|&c| (c, 0.0)).collect()
            } else {
                let id = s.seq.sample_id;
                if score_mode != ScoreMode::EmaOnly && !cache.has_sample(id) {
                    let refs = crate::model::loss::reference_losses(teacher, &s.seq)
                        .map_err(HarnessError::from)
                        .map_err(wrap)?;
                    let entries: Vec<(u32, f64)> =
                        refs.iter().map(|&(pos, l)| (pos as u32, l)).collect();
                    cache.insert_sample(id, &entries).map_err(HarnessError::from).map_err(wrap)?;
                }
                cands
                    .iter()
                    .map(|&c| {
                        score_token(score_mode, lambda, &buffer, &cache, id, c as u32)
                            .map(|sc| (c, sc.value))
                    })
                    .collect::<Result<_, _>>()
                    .map_err(HarnessError::from)
                    .map_err(wrap)?
            };
            decisions.push(
                gate_sample(&s.seq, &cands, &scored, p)
                    .map_err(HarnessError::from)
                    .map_err(wrap)?,
            );
        }
        let keeps: Vec<Vec<bool>> = decisions.iter().map(|d| d.keep_flags()).collect();
        for (s, k) in batch.iter().zip(&keeps) {
            last_keep.insert(s.seq.sample_id, k.clone());
        }

        // forward, backward, update
        let mut tape = Tape::<T>::new();
        let bound = bind(&mut tape, &student, true).map_err(HarnessError::from).map_err(wrap)?;
        let seqs: Vec<_> = batch.iter().map(|s| &s.seq).collect();
        let out = batch_label_loss(
            &mut tape,
            &bound,
            &model_cfg,
            &seqs,
            &keeps,
            cfg.train.loss_average,
        )
        .map_err(HarnessError::from)
        .map_err(wrap)?;
        let train_loss = tape.scalar(out.loss).to_f64();
        if !train_loss.is_finite() {
            return Err(wrap(HarnessError::Tensor(TensorError::NonFinite {
                op: "train_loss",
            })));
        }
        tape.backward(out.loss).map_err(HarnessError::from).map_err(wrap)?;
        let grads = gradients(&tape, &bound);
        {
            let mut named = student.named_mut();
            let mut refs: Vec<&mut Vec<T>> = named.iter_mut().map(|(_, p)| &mut p.data).collect();
            opt.step(&mut refs, &grads).map_err(HarnessError::from).map_err(wrap)?;
        }

        // student difficulty EMA: only tokens that were forwarded
        if arm == Arm::Regate {
            for (b, toks) in out.per_token.iter().enumerate() {
                let id = batch[b].seq.sample_id;
                for &(pos, nll) in toks {
                    buffer.update(id, pos as u32, nll).map_err(HarnessError::from).map_err(wrap)?;
                }
            }
        }

        // accounting
        let forwarded: u64 = decisions.iter().map(|d| d.kept_total() as u64).sum();
        let dense_equiv: u64 = batch
            .iter()
            .map(|s| s.seq.roles.iter().filter(|r| **r != Role::Pad).count() as u64)
            .sum();
        cum_forwarded += forwarded;
        cum_label_kept += out.kept_labels as u64;
        cum_label_seen += out.total_labels as u64;
        cum_dense_equiv += dense_equiv;

        // selection-quality audit on post-warm-up sparse steps
        if arm == Arm::Regate && p < 1.0 && (step as u64) >= cfg.schedule.warmup {
            for (b, s) in batch.iter().enumerate() {
                for (j, &lp) in s.seq.label_positions().iter().enumerate() {
                    agree += (keeps[b][lp] == s.visual_dependent[j]) as u64;
                    agree_total += 1;
                }
            }
        }

        let budget_hit = budget > 0 && cum_label_kept >= budget;
        let last = budget_hit || step + 1 == cfg.train.max_steps;
        let eval_due = cfg.train.eval_every > 0 && (step + 1) % cfg.train.eval_every == 0;
        let heldout = if eval_due || last {
            Some(eval_label_stats(&student, &data.eval).map_err(HarnessError::from).map_err(wrap)?.mean_all)
        } else {
            None
        };
        let ms = if cfg.train.record_timing {
            step_start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        rows.push(MetricsRow {
            step,
            p,
            tokens_forwarded: forwarded,
            label_tokens_kept: out.kept_labels as u64,
            train_loss,
            heldout_loss: heldout,
            ms_per_step: ms,
        });
        if cfg.train.progress_every > 0 && (step + 1) % cfg.train.progress_every == 0 {
            log::info!(
                "{} step {}/{} p={p} loss={train_loss:.4} kept={}",
                arm.name(),
                step + 1,
                cfg.train.max_steps,
                out.kept_labels
            );
        }
        step += 1;
        if budget_hit {
            stopped_by_budget = true;
            break;
        }
    }

    if teacher.param_hash() != teacher_hash {
        return Err(HarnessError::TeacherChanged);
    }

    let final_stats = eval_label_stats(&student, &data.eval)?;
    let order_digest = order_hasher.finalize();
    let mut order_hex = String::with_capacity(64);
    for b in order_digest {
        order_hex.push_str(&format!("{b:02x}"));
    }
    let summary = ArmSummary {
        total_tokens: cum_forwarded,
        total_steps: step,
        wall_clock: if cfg.train.record_timing {
            run_start.elapsed().as_secs_f64()
        } else {
            0.0
        },
        final_heldout_loss: final_stats.mean_all,
        version: VERSION.to_string(),
        arm: arm.name().to_string(),
        seed,
        precision: cfg.train.precision.name().to_string(),
        stopped_by_budget,
        label_tokens_kept: cum_label_kept,
        label_tokens_seen: cum_label_seen,
        dense_equivalent_tokens: cum_dense_equiv,
        final_train_loss: rows.last().map(|r| r.train_loss).unwrap_or(f64::NAN),
        final_heldout_copy_loss: final_stats.mean_copy,
        final_heldout_visual_dep_loss: final_stats.mean_visual_dep,
        teacher_hash,
        student_hash: student.param_hash(),
        data_order_hash: order_hex,
        ref_cache_reads: cache.reads(),
        ref_cache_samples: cache.len(),
        sparse_kept_label_agreement: if agree_total > 0 {
            Some(agree as f64 / agree_total as f64)
        } else {
            None
        },
    };
    Ok(ArmOutput {
        rows,
        summary,
        student,
        buffer,
        last_keep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::RunMode;

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
        cfg.train.max_steps = 6;
        cfg.train.teacher_max_steps = 4;
        cfg.train.eval_every = 3;
        cfg.train.progress_every = 0;
        cfg.schedule.warmup = 2;
        cfg.schedule.cycle_len = 4;
        cfg.schedule.dense_prefix = 1;
        cfg.mode = RunMode::Both;
        cfg
    }

    #[test]
    fn datasets_are_deterministic_and_split_correctly() {
        let cfg = tiny_config();
        let a = build_datasets(&cfg);
        let b = build_datasets(&cfg);
        assert_eq!(a.train.len(), 32);
        assert_eq!(a.eval.len(), 8);
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.seq, y.seq);
        }
        // eval and eval_text share everything but the visual span
        for (m, t) in a.eval.iter().zip(&a.eval_text) {
            assert_eq!(m.seq.sample_id, t.seq.sample_id);
            let diffs: Vec<usize> = (0..m.seq.len())
                .filter(|&i| m.seq.tokens[i] != t.seq.tokens[i])
                .collect();
            assert_eq!(diffs.len(), cfg.task.visual_len);
            for i in diffs {
                assert_eq!(t.seq.tokens[i], 0);
            }
        }
        // train and pretrain come from different streams
        assert_ne!(a.train[0].seq.tokens, a.pretrain[0].seq.tokens);
    }

    #[test]
    fn arms_share_data_order_and_teacher() {
        let cfg = tiny_config();
        let data = build_datasets(&cfg);
        let (teacher, report) = pretrain_teacher::<f64>(&cfg, &data).unwrap();
        assert_eq!(report.param_hash, teacher.param_hash());

        let base = train_one_arm(&cfg, Arm::Baseline, cfg.score.mode, cfg.score.lambda, &teacher, &data).unwrap();
        let gated = train_one_arm(&cfg, Arm::Regate, cfg.score.mode, cfg.score.lambda, &teacher, &data).unwrap();
        assert_eq!(base.summary.data_order_hash, gated.summary.data_order_hash);
        assert_eq!(base.summary.teacher_hash, gated.summary.teacher_hash);
        assert_eq!(base.summary.total_steps, gated.summary.total_steps);
        // the baseline keeps everything; the gated arm forwards fewer
        assert!(gated.summary.total_tokens < base.summary.total_tokens);
        assert_eq!(
            base.summary.label_tokens_kept,
            base.summary.label_tokens_seen
        );
    }

    #[test]
    fn gated_arm_at_full_keep_matches_baseline_updates() {
        // while the schedule holds p = 1 the two arms must produce the
        // same parameter bytes (scoring is skipped entirely)
        let mut cfg = tiny_config();
        cfg.schedule.warmup = 100;
        cfg.train.max_steps = 4;
        let data = build_datasets(&cfg);
        let (teacher, _) = pretrain_teacher::<f64>(&cfg, &data).unwrap();
        let base = train_one_arm(&cfg, Arm::Baseline, cfg.score.mode, cfg.score.lambda, &teacher, &data).unwrap();
        let gated = train_one_arm(&cfg, Arm::Regate, cfg.score.mode, cfg.score.lambda, &teacher, &data).unwrap();
        assert_eq!(base.summary.student_hash, gated.summary.student_hash);
        assert_eq!(gated.summary.ref_cache_reads, 0);
        assert_eq!(gated.summary.ref_cache_samples, 0);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let cfg = tiny_config();
        let data = build_datasets(&cfg);
        let (teacher, _) = pretrain_teacher::<f64>(&cfg, &data).unwrap();
        let a = train_one_arm(&cfg, Arm::Regate, cfg.score.mode, cfg.score.lambda, &teacher, &data).unwrap();
        let b = train_one_arm(&cfg, Arm::Regate, cfg.score.mode, cfg.score.lambda, &teacher, &data).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.summary.student_hash, b.summary.student_hash);
        let sa = serde_json::to_string(&a.buffer.snapshot()).unwrap();
        let sb = serde_json::to_string(&b.buffer.snapshot()).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn budget_stops_the_run_and_is_recorded() {
        let mut cfg = tiny_config();
        cfg.train.max_steps = 50;
        // 8 samples x 8 labels = 64 kept labels per dense step
        cfg.train.budget_label_tokens = 150;
        let data = build_datasets(&cfg);
        let (teacher, _) = pretrain_teacher::<f64>(&cfg, &data).unwrap();
        let out = train_one_arm(&cfg, Arm::Baseline, cfg.score.mode, cfg.score.lambda, &teacher, &data).unwrap();
        assert!(out.summary.stopped_by_budget);
        assert_eq!(out.summary.total_steps, 3);
        assert!(out.summary.label_tokens_kept >= 150);
        // the budget-hit step still gets a held-out evaluation
        assert!(out.rows.last().unwrap().heldout_loss.is_some());
    }

    #[test]
    fn ema_only_mode_never_touches_the_cache() {
        let mut cfg = tiny_config();
        cfg.score.mode = ScoreMode::EmaOnly;
        cfg.train.max_steps = 6;
        cfg.schedule.warmup = 0;
        cfg.schedule.dense_prefix = 1;
        let data = build_datasets(&cfg);
        let (teacher, _) = pretrain_teacher::<f64>(&cfg, &data).unwrap();
        let out = train_one_arm(&cfg, Arm::Regate, cfg.score.mode, 0.0, &teacher, &data).unwrap();
        assert_eq!(out.summary.ref_cache_reads, 0);
        assert_eq!(out.summary.ref_cache_samples, 0);
        assert!(out.buffer.len() > 0, "EMA still maintained");
    }

    #[test]
    fn accounting_columns_are_conserved() {
        let cfg = tiny_config();
        let data = build_datasets(&cfg);
        let (teacher, _) = pretrain_teacher::<f64>(&cfg, &data).unwrap();
        let out = train_one_arm(&cfg, Arm::Regate, cfg.score.mode, cfg.score.lambda, &teacher, &data).unwrap();
        let fwd: u64 = out.rows.iter().map(|r| r.tokens_forwarded).sum();
        let kept: u64 = out.rows.iter().map(|r| r.label_tokens_kept).sum();
        assert_eq!(fwd, out.summary.total_tokens);
        assert_eq!(kept, out.summary.label_tokens_kept);
        assert!(out.summary.label_tokens_kept <= out.summary.label_tokens_seen);
        assert!(out.summary.total_tokens <= out.summary.dense_equivalent_tokens);
    }
}
