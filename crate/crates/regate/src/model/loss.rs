//! Losses over label positions.
//!
//! A label token at position i is scored from the logits at row i - 1,
//! so the model predicts it from everything before it. Reference scoring
//! replaces the visual span with pad tokens (sequence length preserved)
//! and reads the per-position negative log-likelihood of the true
//! tokens under that text-only view.

use super::net::{bind, logits_dense, logits_sparse, BoundModel};
use super::{ModelConfig, ModelError, ModelParams};
use crate::data::{Role, Sample, TokenSequence};
use crate::tensor::{Element, Tape, Tensor};
use serde::{Deserialize, Serialize};

/// What the summed label loss is divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossAverage {
    /// Tokens actually forwarded; gradient scale follows the keep count.
    #[default]
    KeptLabels,
    /// All label tokens in the batch, kept or not.
    AllLabels,
}

/// Per-position reference losses of one sequence under a frozen model,
/// computed on the pad-substituted view. Returns (position, nll) for
/// every prompt and label position past the head; visual and pad
/// positions are never scored.
pub fn reference_losses<T: Element>(
    teacher: &ModelParams<T>,
    seq: &TokenSequence,
) -> Result<Vec<(usize, f64)>, ModelError> {
    let pad = teacher.cfg.vocab.pad_id;
    let text_view: Vec<u32> = seq
        .tokens
        .iter()
        .zip(&seq.roles)
        .map(|(&t, &r)| if r == Role::Visual { pad } else { t })
        .collect();

    let mut tape = Tape::<T>::new_eval();
    let bound = bind(&mut tape, teacher, false)?;
    let logits = logits_dense(&mut tape, &bound, &teacher.cfg, &text_view)?;

    let s = text_view.len();
    let mut targets = vec![0u32; s];
    let mut eval = vec![false; s];
    let mut scored = Vec::new();
    for i in 1..s {
        if matches!(seq.roles[i], Role::Prompt | Role::Label) {
            targets[i - 1] = seq.tokens[i];
            eval[i - 1] = true;
            scored.push(i);
        }
    }
    let per_row = tape.cross_entropy_per_row(logits, &targets, &eval)?;
    let vals = tape.value(per_row);
    Ok(scored.into_iter().map(|i| (i, vals[i - 1].to_f64())).collect())
}

/// Batch loss over kept label positions, recorded on the caller's tape.
pub struct BatchLoss {
    /// Scalar loss tensor, ready for `backward`.
    pub loss: Tensor,
    /// Per sample, (position, nll) of every label that entered the loss.
    pub per_token: Vec<Vec<(usize, f64)>>,
    pub kept_labels: usize,
    pub total_labels: usize,
}

/// Forwards each sequence through the sparse route under its keep mask
/// and averages the negative log-likelihood of kept label positions.
/// Errs if the masks keep no label anywhere in the batch.
pub fn batch_label_loss<T: Element>(
    tape: &mut Tape<T>,
    bound: &BoundModel,
    cfg: &ModelConfig,
    batch: &[&TokenSequence],
    keeps: &[Vec<bool>],
    average: LossAverage,
) -> Result<BatchLoss, ModelError> {
    assert_eq!(batch.len(), keeps.len(), "one keep mask per sequence");
    let mut per_token = Vec::with_capacity(batch.len());
    let mut sums: Vec<Tensor> = Vec::with_capacity(batch.len());
    let mut kept_labels = 0usize;
    let mut total_labels = 0usize;

    for (seq, keep) in batch.iter().zip(keeps) {
        let logits = logits_sparse(tape, bound, cfg, &seq.tokens, keep)?;
        let s = seq.len();
        let mut targets = vec![0u32; s];
        let mut eval = vec![false; s];
        let mut positions = Vec::new();
        for i in 1..s {
            if seq.roles[i] == Role::Label {
                total_labels += 1;
                if keep[i] {
                    targets[i - 1] = seq.tokens[i];
                    eval[i - 1] = true;
                    positions.push(i);
                }
            }
        }
        kept_labels += positions.len();
        if positions.is_empty() {
            per_token.push(Vec::new());
            continue;
        }
        let per_row = tape.cross_entropy_per_row(logits, &targets, &eval)?;
        let vals = tape.value(per_row);
        per_token.push(
            positions
                .iter()
                .map(|&i| (i, vals[i - 1].to_f64()))
                .collect(),
        );
        sums.push(tape.sum_all(per_row)?);
    }

    if kept_labels == 0 {
        return Err(ModelError::NoKeptLabels);
    }
    let mut total = sums[0];
    for &s in &sums[1..] {
        total = tape.add(total, s)?;
    }
    let denom = match average {
        LossAverage::KeptLabels => kept_labels,
        LossAverage::AllLabels => total_labels,
    };
    let loss = tape.scale(total, 1.0 / denom as f64)?;
    Ok(BatchLoss {
        loss,
        per_token,
        kept_labels,
        total_labels,
    })
}

/// Dense-route batch loss over every label position; the plain language
/// model objective used for teacher pretraining.
pub fn batch_label_loss_dense<T: Element>(
    tape: &mut Tape<T>,
    bound: &BoundModel,
    cfg: &ModelConfig,
    batch: &[&TokenSequence],
) -> Result<BatchLoss, ModelError> {
    let mut per_token = Vec::with_capacity(batch.len());
    let mut sums: Vec<Tensor> = Vec::with_capacity(batch.len());
    let mut total_labels = 0usize;

    for seq in batch {
        let logits = logits_dense(tape, bound, cfg, &seq.tokens)?;
        let s = seq.len();
        let mut targets = vec![0u32; s];
        let mut eval = vec![false; s];
        let positions = seq.label_positions();
        for &i in &positions {
            targets[i - 1] = seq.tokens[i];
            eval[i - 1] = true;
        }
        total_labels += positions.len();
        if positions.is_empty() {
            per_token.push(Vec::new());
            continue;
        }
        let per_row = tape.cross_entropy_per_row(logits, &targets, &eval)?;
        let vals = tape.value(per_row);
        per_token.push(
            positions
                .iter()
                .map(|&i| (i, vals[i - 1].to_f64()))
                .collect(),
        );
        sums.push(tape.sum_all(per_row)?);
    }
    if total_labels == 0 {
        return Err(ModelError::NoKeptLabels);
    }
    let mut total = sums[0];
    for &s in &sums[1..] {
        total = tape.add(total, s)?;
    }
    let loss = tape.scale(total, 1.0 / total_labels as f64)?;
    Ok(BatchLoss {
        loss,
        per_token,
        kept_labels: total_labels,
        total_labels,
    })
}

/// Mean label negative log-likelihood over an evaluation set, split by
/// slot kind. Uses the dense route with frozen parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean_all: f64,
    pub mean_copy: f64,
    pub mean_visual_dep: f64,
    pub n_labels: usize,
    pub n_copy: usize,
    pub n_visual_dep: usize,
}

pub fn eval_label_stats<T: Element>(
    params: &ModelParams<T>,
    samples: &[Sample],
) -> Result<EvalStats, ModelError> {
    let mut sum_all = 0.0;
    let mut sum_copy = 0.0;
    let mut sum_vis = 0.0;
    let mut n_all = 0usize;
    let mut n_copy = 0usize;
    let mut n_vis = 0usize;

    for sample in samples {
        let seq = &sample.seq;
        let mut tape = Tape::<T>::new_eval();
        let bound = bind(&mut tape, params, false)?;
        let logits = logits_dense(&mut tape, &bound, &params.cfg, &seq.tokens)?;
        let s = seq.len();
        let mut targets = vec![0u32; s];
        let mut eval = vec![false; s];
        let label_positions = seq.label_positions();
        for &i in &label_positions {
            targets[i - 1] = seq.tokens[i];
            eval[i - 1] = true;
        }
        let per_row = tape.cross_entropy_per_row(logits, &targets, &eval)?;
        let vals = tape.value(per_row);
        for (j, &i) in label_positions.iter().enumerate() {
            let nll = vals[i - 1].to_f64();
            sum_all += nll;
            n_all += 1;
            if sample.visual_dependent[j] {
                sum_vis += nll;
                n_vis += 1;
            } else {
                sum_copy += nll;
                n_copy += 1;
            }
        }
    }

    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(EvalStats {
        mean_all: mean(sum_all, n_all),
        mean_copy: mean(sum_copy, n_copy),
        mean_visual_dep: mean(sum_vis, n_vis),
        n_labels: n_all,
        n_copy,
        n_visual_dep: n_vis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, TaskConfig};
    use crate::model::test_config;

    fn setup() -> (TaskConfig, ModelConfig, ModelParams<f64>, Vec<Sample>) {
        let task = TaskConfig::default();
        let mut cfg = test_config(2, 2, 16);
        cfg.vocab = task.vocab();
        let params = ModelParams::<f64>::init(cfg, 17).unwrap();
        let samples = generate_dataset(&task, 6, 31, false);
        (task, cfg, params, samples)
    }

    fn full_keep(seq: &TokenSequence) -> Vec<bool> {
        seq.roles.iter().map(|r| *r != Role::Pad).collect()
    }

    #[test]
    fn zeroed_model_scores_uniform_nll() {
        // constant logits make every label cost exactly ln(vocab)
        let (_, cfg, mut params, samples) = setup();
        for (_, p) in params.named_mut() {
            for x in p.data.iter_mut() {
                *x = 0.0;
            }
        }
        let stats = eval_label_stats(&params, &samples).unwrap();
        let uniform = (cfg.vocab.vocab_size() as f64).ln();
        assert!((stats.mean_all - uniform).abs() < 1e-12);
        assert_eq!(stats.n_labels, 6 * 8);
        assert_eq!(stats.n_copy + stats.n_visual_dep, stats.n_labels);
    }

    #[test]
    fn batch_loss_matches_eval_stats_at_full_keep() {
        let (_, cfg, params, samples) = setup();
        let mut tape = Tape::<f64>::new();
        let bound = bind(&mut tape, &params, true).unwrap();
        let batch: Vec<&TokenSequence> = samples.iter().map(|s| &s.seq).collect();
        let keeps: Vec<Vec<bool>> = batch.iter().map(|s| full_keep(s)).collect();
        let out =
            batch_label_loss(&mut tape, &bound, &cfg, &batch, &keeps, LossAverage::KeptLabels)
                .unwrap();
        assert_eq!(out.kept_labels, out.total_labels);
        let stats = eval_label_stats(&params, &samples).unwrap();
        assert!((tape.scalar(out.loss) - stats.mean_all).abs() < 1e-12);
    }

    #[test]
    fn dense_batch_loss_matches_sparse_at_full_keep() {
        // pad-free sequences: the two routes are the same function
        let (_, cfg, params, samples) = setup();
        let batch: Vec<&TokenSequence> = samples.iter().map(|s| &s.seq).collect();
        let keeps: Vec<Vec<bool>> = batch.iter().map(|s| full_keep(s)).collect();

        let mut tape = Tape::<f64>::new();
        let bound = bind(&mut tape, &params, true).unwrap();
        let sparse =
            batch_label_loss(&mut tape, &bound, &cfg, &batch, &keeps, LossAverage::KeptLabels)
                .unwrap();
        let mut tape2 = Tape::<f64>::new();
        let bound2 = bind(&mut tape2, &params, true).unwrap();
        let dense = batch_label_loss_dense(&mut tape2, &bound2, &cfg, &batch).unwrap();
        assert_eq!(sparse.kept_labels, dense.kept_labels);
        assert!((tape.scalar(sparse.loss) - tape2.scalar(dense.loss)).abs() < 1e-12);
    }

    #[test]
    fn per_token_entries_cover_kept_labels_only() {
        let (task, cfg, params, samples) = setup();
        let seq = &samples[0].seq;
        let mut keep = full_keep(seq);
        // drop half the labels
        let labels = seq.label_positions();
        for &i in labels.iter().skip(labels.len() / 2) {
            keep[i] = false;
        }
        let mut tape = Tape::<f64>::new();
        let bound = bind(&mut tape, &params, true).unwrap();
        let out = batch_label_loss(
            &mut tape,
            &bound,
            &cfg,
            &[seq],
            &[keep],
            LossAverage::KeptLabels,
        )
        .unwrap();
        assert_eq!(out.kept_labels, task.label_len / 2);
        assert_eq!(out.per_token[0].len(), task.label_len / 2);
        for (pos, nll) in &out.per_token[0] {
            assert!(labels[..labels.len() / 2].contains(pos));
            assert!(*nll >= 0.0);
        }
    }

    #[test]
    fn average_mode_changes_only_the_denominator() {
        let (_, cfg, params, samples) = setup();
        let seq = &samples[1].seq;
        let mut keep = full_keep(seq);
        let labels = seq.label_positions();
        keep[labels[0]] = false;
        keep[labels[1]] = false;

        let run = |avg: LossAverage| {
            let mut tape = Tape::<f64>::new();
            let bound = bind(&mut tape, &params, true).unwrap();
            let out =
                batch_label_loss(&mut tape, &bound, &cfg, &[seq], &[keep.clone()], avg).unwrap();
            (tape.scalar(out.loss), out.kept_labels, out.total_labels)
        };
        let (kept_avg, k, _) = run(LossAverage::KeptLabels);
        let (all_avg, _, n) = run(LossAverage::AllLabels);
        assert!((kept_avg * k as f64 - all_avg * n as f64).abs() < 1e-12);
    }

    #[test]
    fn all_labels_dropped_is_an_error() {
        let (_, cfg, params, samples) = setup();
        let seq = &samples[0].seq;
        let mut keep = full_keep(seq);
        for i in seq.label_positions() {
            keep[i] = false;
        }
        let mut tape = Tape::<f64>::new();
        let bound = bind(&mut tape, &params, true).unwrap();
        assert!(matches!(
            batch_label_loss(&mut tape, &bound, &cfg, &[seq], &[keep], LossAverage::KeptLabels),
            Err(ModelError::NoKeptLabels)
        ));
    }

    #[test]
    fn reference_losses_score_prompt_and_label_positions() {
        let (task, _, params, samples) = setup();
        let sample = &samples[2];
        let out = reference_losses(&params, &sample.seq).unwrap();
        // prompt positions 1..=P, label positions after the visual span
        assert_eq!(out.len(), task.prompt_len + task.label_len);
        let first_label = 1 + task.prompt_len + task.visual_len;
        for (pos, nll) in &out {
            assert!(*nll >= 0.0 && nll.is_finite());
            let role = sample.seq.roles[*pos];
            assert!(role == Role::Prompt || role == Role::Label);
            assert!(*pos < first_label || *pos >= first_label);
        }
        assert!(out.iter().filter(|(p, _)| *p >= first_label).count() == task.label_len);
    }

    #[test]
    fn reference_losses_ignore_the_visual_tokens() {
        // two samples sharing prompt and labels but different visuals
        // get identical reference losses
        let (task, _, params, _) = setup();
        let a = generate_dataset(&task, 3, 77, false).pop().unwrap();
        let mut b = a.clone();
        for i in 1 + task.prompt_len..1 + task.prompt_len + task.visual_len {
            b.seq.tokens[i] = 2 + ((b.seq.tokens[i] - 2 + 5) % task.visual_vocab);
        }
        let ra = reference_losses(&params, &a.seq).unwrap();
        let rb = reference_losses(&params, &b.seq).unwrap();
        assert_eq!(ra.len(), rb.len());
        for ((pa, la), (pb, lb)) in ra.iter().zip(&rb) {
            assert_eq!(pa, pb);
            assert_eq!(la.to_bits(), lb.to_bits());
        }
    }

    #[test]
    fn gradients_flow_from_batch_loss() {
        let (_, cfg, params, samples) = setup();
        let batch: Vec<&TokenSequence> = samples[..2].iter().map(|s| &s.seq).collect();
        let keeps: Vec<Vec<bool>> = batch.iter().map(|s| full_keep(s)).collect();
        let mut tape = Tape::<f64>::new();
        let bound = bind(&mut tape, &params, true).unwrap();
        let out =
            batch_label_loss(&mut tape, &bound, &cfg, &batch, &keeps, LossAverage::KeptLabels)
                .unwrap();
        tape.backward(out.loss).unwrap();
        let grads = super::super::net::gradients(&tape, &bound);
        assert_eq!(grads.len(), params.named().len());
        let nonzero = grads
            .iter()
            .flat_map(|g| g.iter())
            .filter(|x| **x != 0.0)
            .count();
        assert!(nonzero > 0, "loss must reach the parameters");
    }
}
