//! Score-based token selection.
//!
//! At a keep fraction p, each sample keeps its k = max(1, floor(p * N))
//! highest-scoring candidate positions, where the candidates are the
//! label positions (optionally widened to prompt positions). Everything
//! that is not a candidate and not padding is kept unconditionally:
//! visual tokens, the sequence head, and the prompt by default. Pad
//! positions are never kept.
//!
//! Ties break toward the lower position so selection is a pure function
//! of (scores, p).

use crate::data::{Role, TokenSequence, FLOOR_NUDGE};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GatingError {
    #[error("sample {sample}: no candidate positions to gate")]
    NoCandidates { sample: u64 },
    #[error("sample {sample}: score for position {pos} is not finite")]
    ScoreNotFinite { sample: u64, pos: usize },
    #[error("sample {sample}: {got} scores for {want} candidates")]
    ScoreCountMismatch { sample: u64, got: usize, want: usize },
    #[error("sample {sample}: keep fraction {p} outside (0, 1]")]
    BadKeepFraction { sample: u64, p: f64 },
    #[error("sequence of length {len} does not fit mask width {width}")]
    SequenceTooLong { len: usize, width: usize },
}

/// Candidate positions for gating: label positions, plus prompt
/// positions when `gate_prompt_tokens` is set. Position 0 anchors the
/// sequence and is never a candidate.
pub fn candidate_positions(seq: &TokenSequence, gate_prompt_tokens: bool) -> Vec<usize> {
    seq.roles
        .iter()
        .enumerate()
        .filter(|&(i, r)| match r {
            Role::Label => true,
            Role::Prompt => gate_prompt_tokens && i > 0,
            _ => false,
        })
        .map(|(i, _)| i)
        .collect()
}

/// k = max(1, floor(p * n)), with floor guarded against representation
/// error so exact-decimal products (0.6 * 5) round the intended way.
pub fn keep_count(n_candidates: usize, p: f64) -> usize {
    let k = (p * n_candidates as f64 + FLOOR_NUDGE).floor() as usize;
    k.max(1).min(n_candidates)
}

/// Which positions one sample keeps at fraction `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub sample_id: u64,
    pub seq_len: usize,
    /// N, the candidate count.
    pub n_candidates: usize,
    /// k, how many candidates survive.
    pub k: usize,
    /// Selected candidate positions, ascending.
    pub kept_candidates: Vec<usize>,
    /// Unconditionally kept positions (non-candidate, non-pad), ascending.
    pub always_kept: Vec<usize>,
}

impl GateDecision {
    /// Per-position keep flags; pads and dropped candidates are false.
    pub fn keep_flags(&self) -> Vec<bool> {
        let mut keep = vec![false; self.seq_len];
        for &i in &self.always_kept {
            keep[i] = true;
        }
        for &i in &self.kept_candidates {
            keep[i] = true;
        }
        keep
    }

    pub fn kept_total(&self) -> usize {
        self.always_kept.len() + self.kept_candidates.len()
    }
}

/// Selects the k highest-scoring candidates. `scored` pairs each
/// candidate position with its score; ties prefer the lower position.
pub fn select_top_k(scored: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .1
            .total_cmp(&scored[a].1)
            .then(scored[a].0.cmp(&scored[b].0))
    });
    let mut kept: Vec<usize> = order[..k.min(order.len())]
        .iter()
        .map(|&i| scored[i].0)
        .collect();
    kept.sort_unstable();
    kept
}

/// Full gating decision for one sample. `scored` must align with
/// `candidate_positions(seq, ...)`; the keep fraction must lie in (0, 1].
/// At p = 1 every candidate is kept and scores are ignored.
pub fn gate_sample(
    seq: &TokenSequence,
    candidates: &[usize],
    scored: &[(usize, f64)],
    p: f64,
) -> Result<GateDecision, GatingError> {
    let sample = seq.sample_id;
    if candidates.is_empty() {
        return Err(GatingError::NoCandidates { sample });
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(GatingError::BadKeepFraction { sample, p });
    }
    if scored.len() != candidates.len() {
        return Err(GatingError::ScoreCountMismatch {
            sample,
            got: scored.len(),
            want: candidates.len(),
        });
    }
    for &(pos, s) in scored {
        if !s.is_finite() {
            return Err(GatingError::ScoreNotFinite { sample, pos });
        }
    }

    let k = keep_count(candidates.len(), p);
    let kept_candidates = if k == candidates.len() {
        candidates.to_vec()
    } else {
        select_top_k(scored, k)
    };

    let always_kept: Vec<usize> = (0..seq.len())
        .filter(|&i| seq.roles[i] != Role::Pad && !candidates.contains(&i))
        .collect();

    Ok(GateDecision {
        sample_id: sample,
        seq_len: seq.len(),
        n_candidates: candidates.len(),
        k,
        kept_candidates,
        always_kept,
    })
}

/// Batch keep mask, one row per sample, rows padded with false out to a
/// common width.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMask {
    pub width: usize,
    rows: Vec<Vec<bool>>,
}

impl GateMask {
    pub fn from_decisions(
        decisions: &[GateDecision],
        width: usize,
    ) -> Result<GateMask, GatingError> {
        let mut rows = Vec::with_capacity(decisions.len());
        for d in decisions {
            if d.seq_len > width {
                return Err(GatingError::SequenceTooLong {
                    len: d.seq_len,
                    width,
                });
            }
            let mut row = d.keep_flags();
            row.resize(width, false);
            rows.push(row);
        }
        Ok(GateMask { width, rows })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.rows[b]
    }

    pub fn row_sum(&self, b: usize) -> usize {
        self.rows[b].iter().filter(|&&x| x).count()
    }

    /// Total kept positions across the batch.
    pub fn total_kept(&self) -> usize {
        (0..self.rows.len()).map(|b| self.row_sum(b)).sum()
    }
}
