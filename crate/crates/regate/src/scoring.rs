//! Per-token difficulty tracking and the combined gating score.
//!
//! The student side is an exponential moving average of the student's own
//! per-token loss, keyed by (sample id, token position) and updated only
//! for label tokens that were kept in a step. The teacher side is a cache
//! of reference losses, computed once per sample by the frozen teacher.
//! The gating score blends both: `d = m + lambda * ref_loss`.
//!
//! Scores and losses are kept in f64 regardless of the model's compute
//! precision; f32 losses widen exactly, so snapshots stay bit-stable.

use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};

pub const DEFAULT_BETA: f64 = 0.9;
pub const DEFAULT_LAMBDA: f64 = 0.5;

const SNAPSHOT_VERSION: u32 = 1;
const SNAPSHOT_KIND: &str = "difficulty-buffer";

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error("ema decay must lie strictly inside (0, 1), got {0}")]
    InvalidBeta(f64),
    #[error("per-token loss must be finite and non-negative, got {loss} at ({sample}, {pos})")]
    InvalidLoss { sample: u64, pos: u32, loss: f64 },
    #[error("no reference loss cached for sample {sample} position {pos}")]
    MissingRefLoss { sample: u64, pos: u32 },
    #[error("reference losses for sample {sample} already cached")]
    AlreadyCached { sample: u64 },
    #[error("snapshot rejected: {0}")]
    BadSnapshot(String),
}

/// EMA of student per-token losses. An entry exists iff the token has been
/// observed at least once; unobserved entries are never decayed.
#[derive(Debug, Clone)]
pub struct DifficultyBuffer {
    beta: f64,
    entries: BTreeMap<(u64, u32), f64>,
}

impl DifficultyBuffer {
    pub fn new(beta: f64) -> Result<Self, ScoringError> {
        if !(beta > 0.0 && beta < 1.0) || !beta.is_finite() {
            return Err(ScoringError::InvalidBeta(beta));
        }
        Ok(DifficultyBuffer {
            beta,
            entries: BTreeMap::new(),
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// First observation seeds the average at the loss itself; later ones
    /// decay toward it: `m <- beta * m + (1 - beta) * loss`.
    pub fn update(&mut self, sample: u64, pos: u32, loss: f64) -> Result<(), ScoringError> {
        if !loss.is_finite() || loss < 0.0 {
            return Err(ScoringError::InvalidLoss { sample, pos, loss });
        }
        match self.entries.get_mut(&(sample, pos)) {
            Some(m) => *m = self.beta * *m + (1.0 - self.beta) * loss,
            None => {
                self.entries.insert((sample, pos), loss);
            }
        }
        Ok(())
    }

    pub fn get(&self, sample: u64, pos: u32) -> Option<f64> {
        self.entries.get(&(sample, pos)).copied()
    }

    pub fn snapshot(&self) -> BufferSnapshot {
        BufferSnapshot {
            version: SNAPSHOT_VERSION,
            kind: SNAPSHOT_KIND.to_string(),
            beta: self.beta,
            entries: self
                .entries
                .iter()
                .map(|(&(s, p), &m)| (s, p, m))
                .collect(),
        }
    }

    pub fn from_snapshot(snap: &BufferSnapshot) -> Result<Self, ScoringError> {
        if snap.version != SNAPSHOT_VERSION {
            return Err(ScoringError::BadSnapshot(format!(
                "version {} (expected {})",
                snap.version, SNAPSHOT_VERSION
            )));
        }
        if snap.kind != SNAPSHOT_KIND {
            return Err(ScoringError::BadSnapshot(format!(
                "kind {:?} (expected {:?})",
                snap.kind, SNAPSHOT_KIND
            )));
        }
        let mut buf = DifficultyBuffer::new(snap.beta)?;
        for &(s, p, m) in &snap.entries {
            if !m.is_finite() || m < 0.0 {
                return Err(ScoringError::BadSnapshot(format!(
                    "entry ({s}, {p}) has invalid value {m}"
                )));
            }
            buf.entries.insert((s, p), m);
        }
        Ok(buf)
    }
}

/// Serialized form of the buffer. Entries are sorted by key, so encoding
/// the same buffer twice yields identical bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferSnapshot {
    pub version: u32,
    pub kind: String,
    pub beta: f64,
    pub entries: Vec<(u64, u32, f64)>,
}

/// Reference losses from the frozen teacher, one batch of positions per
/// sample, computed once and never overwritten. Reads are counted so audits
/// can prove an arm that should not consult the teacher never did.
#[derive(Debug, Default)]
pub struct RefLossCache {
    entries: BTreeMap<(u64, u32), f64>,
    samples: BTreeSet<u64>,
    reads: Cell<u64>,
}

impl RefLossCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn has_sample(&self, sample: u64) -> bool {
        self.samples.contains(&sample)
    }

    pub fn insert_sample(
        &mut self,
        sample: u64,
        losses: &[(u32, f64)],
    ) -> Result<(), ScoringError> {
        if self.samples.contains(&sample) {
            return Err(ScoringError::AlreadyCached { sample });
        }
        for &(pos, loss) in losses {
            if !loss.is_finite() || loss < 0.0 {
                return Err(ScoringError::InvalidLoss { sample, pos, loss });
            }
            self.entries.insert((sample, pos), loss);
        }
        self.samples.insert(sample);
        Ok(())
    }

    pub fn get(&self, sample: u64, pos: u32) -> Option<f64> {
        self.reads.set(self.reads.get() + 1);
        self.entries.get(&(sample, pos)).copied()
    }

    /// Number of lookups since construction.
    pub fn reads(&self) -> u64 {
        self.reads.get()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Which signals feed the gating score. The ablation arms are separate
/// paths, not just coefficient settings: the EMA-only arm never touches
/// the reference cache, and the reference-only arm never touches the
/// student buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    EmaOnly,
    RefOnly,
    Combined,
}

impl Default for ScoreMode {
    fn default() -> Self {
        ScoreMode::Combined
    }
}

/// The blended score, `d = m + lambda * ref_loss`.
pub fn combined_score(m: f64, ref_loss: f64, lambda: f64) -> f64 {
    m + lambda * ref_loss
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: f64,
    /// True when the EMA entry was missing and the score fell back to the
    /// reference term alone.
    pub ema_fallback: bool,
}

/// Lookup-and-blend over the two stores for one token.
pub fn score_token(
    mode: ScoreMode,
    lambda: f64,
    buffer: &DifficultyBuffer,
    cache: &RefLossCache,
    sample: u64,
    pos: u32,
) -> Result<Score, ScoringError> {
    match mode {
        ScoreMode::EmaOnly => {
            // lambda is treated as zero: the reference cache must stay cold.
            match buffer.get(sample, pos) {
                Some(m) => Ok(Score {
                    value: m,
                    ema_fallback: false,
                }),
                None => Ok(Score {
                    value: 0.0,
                    ema_fallback: true,
                }),
            }
        }
        ScoreMode::RefOnly => {
            let r = cache
                .get(sample, pos)
                .ok_or(ScoringError::MissingRefLoss { sample, pos })?;
            Ok(Score {
                value: r,
                ema_fallback: false,
            })
        }
        ScoreMode::Combined => {
            if lambda == 0.0 {
                // Equivalent to EmaOnly and audited the same way: no reads.
                return score_token(ScoreMode::EmaOnly, 0.0, buffer, cache, sample, pos);
            }
            let r = cache
                .get(sample, pos)
                .ok_or(ScoringError::MissingRefLoss { sample, pos })?;
            match buffer.get(sample, pos) {
                Some(m) => Ok(Score {
                    value: combined_score(m, r, lambda),
                    ema_fallback: false,
                }),
                None => Ok(Score {
                    value: lambda * r,
                    ema_fallback: true,
                }),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn update_blends_with_default_beta() {
        let mut buf = DifficultyBuffer::new(0.9).unwrap();
        buf.update(1, 0, 0.5).unwrap();
        buf.update(1, 0, 1.0).unwrap();
        assert!((buf.get(1, 0).unwrap() - 0.55).abs() < 1e-15);
    }

    #[test]
    fn first_observation_seeds_exactly() {
        let mut buf = DifficultyBuffer::new(0.9).unwrap();
        buf.update(7, 3, 2.25).unwrap();
        assert_eq!(buf.get(7, 3), Some(2.25));
    }

    #[test]
    fn unobserved_entries_are_absent_and_undecayed() {
        let mut buf = DifficultyBuffer::new(0.9).unwrap();
        buf.update(1, 0, 1.0).unwrap();
        assert_eq!(buf.get(1, 1), None);
        assert_eq!(buf.get(2, 0), None);
        assert_eq!(buf.len(), 1);
    }

    #[test]
    fn rejects_bad_beta_and_bad_loss() {
        assert!(DifficultyBuffer::new(0.0).is_err());
        assert!(DifficultyBuffer::new(1.0).is_err());
        assert!(DifficultyBuffer::new(f64::NAN).is_err());
        let mut buf = DifficultyBuffer::new(0.5).unwrap();
        assert!(buf.update(0, 0, -0.1).is_err());
        assert!(buf.update(0, 0, f64::NAN).is_err());
        assert!(buf.update(0, 0, f64::INFINITY).is_err());
    }

    // m_n = c + (m_0 - c) * beta^n when every observed loss equals c.
    #[test]
    fn constant_loss_converges_to_closed_form() {
        let beta = 0.9f64;
        let m0 = 5.0;
        let c = 1.25;
        let mut buf = DifficultyBuffer::new(beta).unwrap();
        buf.update(0, 0, m0).unwrap();
        for n in 1..=150u32 {
            buf.update(0, 0, c).unwrap();
            let want = c + (m0 - c) * beta.powi(n as i32);
            assert!(
                (buf.get(0, 0).unwrap() - want).abs() < 1e-6,
                "n = {n}"
            );
        }
        assert!((buf.get(0, 0).unwrap() - c).abs() < 1e-5);
    }

    #[test]
    fn combined_score_known_value() {
        assert!((combined_score(0.55, 1.2, 0.5) - 1.15).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_is_ema_exactly_and_reads_nothing() {
        let mut buf = DifficultyBuffer::new(0.9).unwrap();
        buf.update(4, 2, 0.8).unwrap();
        let cache = RefLossCache::new();
        let s = score_token(ScoreMode::Combined, 0.0, &buf, &cache, 4, 2).unwrap();
        assert_eq!(s.value, 0.8);
        assert_eq!(cache.reads(), 0);
    }

    #[test]
    fn ema_only_never_reads_cache() {
        let buf = DifficultyBuffer::new(0.9).unwrap();
        let mut cache = RefLossCache::new();
        cache.insert_sample(4, &[(2, 3.0)]).unwrap();
        let s = score_token(ScoreMode::EmaOnly, 0.5, &buf, &cache, 4, 2).unwrap();
        assert_eq!(s.value, 0.0);
        assert!(s.ema_fallback);
        assert_eq!(cache.reads(), 0);
    }

    #[test]
    fn ref_only_ignores_buffer() {
        let mut buf = DifficultyBuffer::new(0.9).unwrap();
        buf.update(4, 2, 100.0).unwrap();
        let mut cache = RefLossCache::new();
        cache.insert_sample(4, &[(2, 3.25)]).unwrap();
        let s = score_token(ScoreMode::RefOnly, 0.5, &buf, &cache, 4, 2).unwrap();
        assert_eq!(s.value, 3.25);
        assert_eq!(cache.reads(), 1);
    }

    #[test]
    fn missing_ema_falls_back_to_reference_term() {
        let buf = DifficultyBuffer::new(0.9).unwrap();
        let mut cache = RefLossCache::new();
        cache.insert_sample(9, &[(1, 2.0)]).unwrap();
        let s = score_token(ScoreMode::Combined, 0.5, &buf, &cache, 9, 1).unwrap();
        assert_eq!(s.value, 1.0);
        assert!(s.ema_fallback);
    }

    #[test]
    fn missing_cache_entry_is_error() {
        let buf = DifficultyBuffer::new(0.9).unwrap();
        let cache = RefLossCache::new();
        assert!(matches!(
            score_token(ScoreMode::Combined, 0.5, &buf, &cache, 1, 1),
            Err(ScoringError::MissingRefLoss { .. })
        ));
    }

    #[test]
    fn cache_rejects_recomputation() {
        let mut cache = RefLossCache::new();
        cache.insert_sample(1, &[(0, 1.0)]).unwrap();
        assert!(matches!(
            cache.insert_sample(1, &[(0, 2.0)]),
            Err(ScoringError::AlreadyCached { .. })
        ));
        assert_eq!(cache.get(1, 0), Some(1.0));
    }

    #[test]
    fn snapshot_roundtrip_is_bit_exact_on_10k_entries() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut buf = DifficultyBuffer::new(0.9).unwrap();
        for _ in 0..10_000 {
            let s = rng.gen_range(0..4000u64);
            let p = rng.gen_range(0..64u32);
            buf.update(s, p, rng.gen_range(0.0..8.0f64)).unwrap();
        }
        let json = serde_json::to_string(&buf.snapshot()).unwrap();
        let snap: BufferSnapshot = serde_json::from_str(&json).unwrap();
        let restored = DifficultyBuffer::from_snapshot(&snap).unwrap();
        assert_eq!(buf.len(), restored.len());
        for (&(s, p), &m) in &buf.entries {
            let r = restored.get(s, p).unwrap();
            assert_eq!(m.to_bits(), r.to_bits(), "entry ({s}, {p})");
        }
        // serializing the restored buffer reproduces the same bytes
        assert_eq!(json, serde_json::to_string(&restored.snapshot()).unwrap());
    }

    #[test]
    fn restore_then_update_matches_continuous_run() {
        let mut a = DifficultyBuffer::new(0.9).unwrap();
        for i in 0..20 {
            a.update(3, 5, 0.1 * i as f64).unwrap();
        }
        let snap = a.snapshot();
        let mut b = DifficultyBuffer::from_snapshot(&snap).unwrap();
        for i in 20..40 {
            a.update(3, 5, 0.1 * i as f64).unwrap();
            b.update(3, 5, 0.1 * i as f64).unwrap();
        }
        assert_eq!(
            a.get(3, 5).unwrap().to_bits(),
            b.get(3, 5).unwrap().to_bits()
        );
    }

    #[test]
    fn snapshot_rejects_wrong_version_or_kind() {
        let buf = DifficultyBuffer::new(0.9).unwrap();
        let mut snap = buf.snapshot();
        snap.version = 99;
        assert!(DifficultyBuffer::from_snapshot(&snap).is_err());
        let mut snap = buf.snapshot();
        snap.kind = "something-else".into();
        assert!(DifficultyBuffer::from_snapshot(&snap).is_err());
    }

    proptest! {
        // One update strictly shrinks the gap to the observed loss.
        #[test]
        fn ema_contracts_toward_loss(
            beta in 0.05f64..0.95,
            m0 in 0.0f64..10.0,
            loss in 0.0f64..10.0,
        ) {
            prop_assume!((m0 - loss).abs() > 1e-9);
            let mut buf = DifficultyBuffer::new(beta).unwrap();
            buf.update(0, 0, m0).unwrap();
            buf.update(0, 0, loss).unwrap();
            let m1 = buf.get(0, 0).unwrap();
            prop_assert!((m1 - loss).abs() < (m0 - loss).abs());
        }

        #[test]
        fn score_is_monotone_in_both_signals(
            m in 0.0f64..10.0,
            r in 0.0f64..10.0,
            lambda in 0.01f64..4.0,
            dm in 0.001f64..5.0,
            dr in 0.001f64..5.0,
        ) {
            let base = combined_score(m, r, lambda);
            prop_assert!(combined_score(m + dm, r, lambda) > base);
            prop_assert!(combined_score(m, r + dr, lambda) > base);
        }

        // Positive rescaling of scores never changes their order.
        #[test]
        fn ranking_invariant_under_positive_scaling(
            d1 in -10.0f64..10.0,
            d2 in -10.0f64..10.0,
            s in 0.01f64..100.0,
        ) {
            let before = d1.partial_cmp(&d2).unwrap();
            let after = (s * d1).partial_cmp(&(s * d2)).unwrap();
            prop_assert_eq!(before, after);
        }
    }
}
