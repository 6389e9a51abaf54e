//! Synthetic multimodal sequences: `[BOS, prompt, visual, label]`.
//!
//! Labels come in two kinds. Copy labels repeat a prompt token and are
//! predictable from text alone; visual-dependent labels encode a visual
//! token through a fixed id mapping and are unpredictable without the
//! visual stream. Which label slots are visual-dependent is a fixed
//! per-position pattern (an even spread at rate `rho`), so a text-only
//! model can in principle drive its loss on copy slots to zero.
//!
//! Text-only variants keep the sequence layout but hold pad tokens in the
//! visual span; the hidden visual draw still happens, so labels are
//! distributed identically to the multimodal version.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

// Guards floor() against representation error in products of exact
// decimals, e.g. 0.6 * 5 = 2.999...96 must count as 3.
pub(crate) const FLOOR_NUDGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prompt,
    Visual,
    Label,
    Pad,
}

/// One tokenized sequence with per-position role tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub sample_id: u64,
    pub tokens: Vec<u32>,
    pub roles: Vec<Role>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn label_positions(&self) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == Role::Label)
            .map(|(i, _)| i)
            .collect()
    }

    /// The training target at a label position is the token that sits
    /// there; it is predicted from the positions before it.
    pub fn target_at(&self, pos: usize) -> u32 {
        self.tokens[pos]
    }

    /// Checks the role/id consistency rules against a vocabulary layout.
    pub fn validate(&self, vocab: &VocabLayout) -> Result<(), String> {
        if self.tokens.len() != self.roles.len() {
            return Err(format!(
                "sample {}: {} tokens vs {} roles",
                self.sample_id,
                self.tokens.len(),
                self.roles.len()
            ));
        }
        for (i, (&t, &r)) in self.tokens.iter().zip(&self.roles).enumerate() {
            if t >= vocab.vocab_size() {
                return Err(format!("sample {}: token {t} at {i} out of vocab", self.sample_id));
            }
            let is_visual = vocab.is_visual(t);
            if (r == Role::Visual) != is_visual {
                return Err(format!(
                    "sample {}: position {i} role {r:?} disagrees with id {t}",
                    self.sample_id
                ));
            }
            if (r == Role::Pad) != (t == vocab.pad_id) {
                return Err(format!(
                    "sample {}: position {i} role {r:?} vs pad id rule",
                    self.sample_id
                ));
            }
        }
        Ok(())
    }
}

/// Fixed id-space layout: `[pad, bos, visual ids, text ids]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub pad_id: u32,
    pub bos_id: u32,
    pub visual_start: u32,
    pub visual_len: u32,
    pub text_start: u32,
    pub text_len: u32,
}

impl VocabLayout {
    pub fn vocab_size(&self) -> u32 {
        2 + self.visual_len + self.text_len
    }

    pub fn is_visual(&self, id: u32) -> bool {
        id >= self.visual_start && id < self.visual_start + self.visual_len
    }

    pub fn is_text(&self, id: u32) -> bool {
        id >= self.text_start && id < self.text_start + self.text_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default = "d_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "d_visual_len")]
    pub visual_len: usize,
    #[serde(default = "d_label_len")]
    pub label_len: usize,
    #[serde(default = "d_visual_vocab")]
    pub visual_vocab: u32,
    #[serde(default = "d_text_vocab")]
    pub text_vocab: u32,
    /// Fraction of label slots whose value depends on the visual tokens.
    #[serde(default = "d_rho")]
    pub rho: f64,
    #[serde(default = "d_n_pretrain")]
    pub n_pretrain: usize,
    #[serde(default = "d_n_train")]
    pub n_train: usize,
    #[serde(default = "d_n_eval")]
    pub n_eval: usize,
}

fn d_prompt_len() -> usize {
    6
}
fn d_visual_len() -> usize {
    6
}
fn d_label_len() -> usize {
    8
}
fn d_visual_vocab() -> u32 {
    31
}
fn d_text_vocab() -> u32 {
    31
}
fn d_rho() -> f64 {
    0.5
}
fn d_n_pretrain() -> usize {
    512
}
fn d_n_train() -> usize {
    256
}
fn d_n_eval() -> usize {
    64
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            prompt_len: d_prompt_len(),
            visual_len: d_visual_len(),
            label_len: d_label_len(),
            visual_vocab: d_visual_vocab(),
            text_vocab: d_text_vocab(),
            rho: d_rho(),
            n_pretrain: d_n_pretrain(),
            n_train: d_n_train(),
            n_eval: d_n_eval(),
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.prompt_len == 0 || self.visual_len == 0 || self.label_len == 0 {
            return Err("task: prompt_len, visual_len and label_len must be positive".into());
        }
        if self.visual_vocab == 0 || self.text_vocab == 0 {
            return Err("task: visual_vocab and text_vocab must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.rho) || !self.rho.is_finite() {
            return Err(format!("task: rho must lie in [0, 1], got {}", self.rho));
        }
        if self.n_eval == 0 || self.n_train == 0 || self.n_pretrain == 0 {
            return Err("task: dataset sizes must be positive".into());
        }
        Ok(())
    }

    pub fn vocab(&self) -> VocabLayout {
        VocabLayout {
            pad_id: 0,
            bos_id: 1,
            visual_start: 2,
            visual_len: self.visual_vocab,
            text_start: 2 + self.visual_vocab,
            text_len: self.text_vocab,
        }
    }

    pub fn seq_len(&self) -> usize {
        1 + self.prompt_len + self.visual_len + self.label_len
    }

    /// Whether label slot `j` (0-based) is visual-dependent. Even spread:
    /// the counts of true flags among the first j slots track j * rho.
    pub fn slot_is_visual_dependent(&self, j: usize) -> bool {
        let f = |x: usize| (x as f64 * self.rho + FLOOR_NUDGE).floor() as usize;
        f(j + 1) > f(j)
    }

    pub fn visual_dependent_slots(&self) -> Vec<bool> {
        (0..self.label_len)
            .map(|j| self.slot_is_visual_dependent(j))
            .collect()
    }
}

/// A generated sample plus its ground-truth slot kinds (generation
/// metadata, not visible to the model).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub seq: TokenSequence,
    pub visual_dependent: Vec<bool>,
}

impl Sample {
    /// Sequence position of label slot `j`.
    pub fn label_pos(&self, cfg: &TaskConfig, j: usize) -> usize {
        1 + cfg.prompt_len + cfg.visual_len + j
    }
}

/// Stable seed derivation (splitmix64 over master xor stream).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps a visual id to the text id a visual-dependent label carries.
pub fn visual_to_label(vocab: &VocabLayout, visual_id: u32) -> u32 {
    vocab.text_start + (visual_id - vocab.visual_start) % vocab.text_len
}

pub fn generate_sample(
    cfg: &TaskConfig,
    sample_id: u64,
    seed: u64,
    text_only: bool,
) -> Sample {
    let vocab = cfg.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, sample_id));

    let prompt: Vec<u32> = (0..cfg.prompt_len)
        .map(|_| vocab.text_start + rng.gen_range(0..vocab.text_len))
        .collect();
    // The visual draw always happens so text-only data matches the
    // multimodal label distribution exactly.
    let visual: Vec<u32> = (0..cfg.visual_len)
        .map(|_| vocab.visual_start + rng.gen_range(0..vocab.visual_len))
        .collect();

    // Each slot kind walks its own source list, so every visual-dependent
    // slot reads a distinct visual position (as long as their count fits
    // in visual_len) and no label's value leaks through an earlier label.
    let slots = cfg.visual_dependent_slots();
    let mut labels = Vec::with_capacity(cfg.label_len);
    let (mut n_vis, mut n_copy) = (0usize, 0usize);
    for j in 0..cfg.label_len {
        if slots[j] {
            labels.push(visual_to_label(&vocab, visual[n_vis % cfg.visual_len]));
            n_vis += 1;
        } else {
            labels.push(prompt[n_copy % cfg.prompt_len]);
            n_copy += 1;
        }
    }

    let mut tokens = Vec::with_capacity(cfg.seq_len());
    let mut roles = Vec::with_capacity(cfg.seq_len());
    tokens.push(vocab.bos_id);
    roles.push(Role::Prompt);
    for &t in &prompt {
        tokens.push(t);
        roles.push(Role::Prompt);
    }
    for &v in &visual {
        if text_only {
            tokens.push(vocab.pad_id);
            roles.push(Role::Pad);
        } else {
            tokens.push(v);
            roles.push(Role::Visual);
        }
    }
    for &l in &labels {
        tokens.push(l);
        roles.push(Role::Label);
    }

    Sample {
        seq: TokenSequence {
            sample_id,
            tokens,
            roles,
        },
        visual_dependent: slots,
    }
}

pub fn generate_dataset(cfg: &TaskConfig, n: usize, seed: u64, text_only: bool) -> Vec<Sample> {
    (0..n)
        .map(|i| generate_sample(cfg, i as u64, seed, text_only))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = TaskConfig::default();
        let a = generate_dataset(&cfg, 10, 123, false);
        let b = generate_dataset(&cfg, 10, 123, false);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.seq, y.seq);
        }
        let c = generate_dataset(&cfg, 10, 124, false);
        assert!(a.iter().zip(&c).any(|(x, y)| x.seq != y.seq));
    }

    #[test]
    fn sample_layout_and_roles_are_consistent() {
        let cfg = TaskConfig::default();
        let vocab = cfg.vocab();
        for s in generate_dataset(&cfg, 20, 7, false) {
            assert_eq!(s.seq.len(), cfg.seq_len());
            s.seq.validate(&vocab).unwrap();
            assert_eq!(s.seq.tokens[0], vocab.bos_id);
            assert_eq!(s.seq.label_positions().len(), cfg.label_len);
        }
    }

    #[test]
    fn text_only_pads_visual_span_and_keeps_labels() {
        let cfg = TaskConfig::default();
        let vocab = cfg.vocab();
        let multi = generate_sample(&cfg, 3, 99, false);
        let text = generate_sample(&cfg, 3, 99, true);
        text.seq.validate(&vocab).unwrap();
        for i in 1 + cfg.prompt_len..1 + cfg.prompt_len + cfg.visual_len {
            assert_eq!(text.seq.tokens[i], vocab.pad_id);
            assert_eq!(text.seq.roles[i], Role::Pad);
        }
        // same labels, same prompt: only the visual span differs
        for j in 0..cfg.label_len {
            let p = multi.label_pos(&cfg, j);
            assert_eq!(multi.seq.tokens[p], text.seq.tokens[p]);
        }
        assert_eq!(
            &multi.seq.tokens[..1 + cfg.prompt_len],
            &text.seq.tokens[..1 + cfg.prompt_len]
        );
    }

    #[test]
    fn labels_follow_the_two_rules() {
        let cfg = TaskConfig::default();
        let vocab = cfg.vocab();
        for s in generate_dataset(&cfg, 30, 11, false) {
            let (mut n_vis, mut n_copy) = (0usize, 0usize);
            for j in 0..cfg.label_len {
                let p = s.label_pos(&cfg, j);
                let label = s.seq.tokens[p];
                assert!(vocab.is_text(label));
                if s.visual_dependent[j] {
                    let v = s.seq.tokens[1 + cfg.prompt_len + (n_vis % cfg.visual_len)];
                    assert_eq!(label, visual_to_label(&vocab, v));
                    n_vis += 1;
                } else {
                    let src = s.seq.tokens[1 + (n_copy % cfg.prompt_len)];
                    assert_eq!(label, src);
                    n_copy += 1;
                }
            }
        }
    }

    // At the default sizes every visual-dependent slot reads its own
    // visual position, so no label's value leaks through an earlier one.
    #[test]
    fn visual_dependent_slots_use_distinct_sources() {
        let cfg = TaskConfig::default();
        let n_vdep = cfg.visual_dependent_slots().iter().filter(|&&b| b).count();
        assert!(n_vdep <= cfg.visual_len, "sources must not wrap");
        let n_copy = cfg.label_len - n_vdep;
        assert!(n_copy <= cfg.prompt_len, "copy sources must not wrap");
    }

    #[test]
    fn rho_extremes_and_half() {
        let mut cfg = TaskConfig::default();
        cfg.rho = 0.0;
        assert!(cfg.visual_dependent_slots().iter().all(|&b| !b));
        cfg.rho = 1.0;
        assert!(cfg.visual_dependent_slots().iter().all(|&b| b));
        cfg.rho = 0.5;
        let slots = cfg.visual_dependent_slots();
        assert_eq!(slots.iter().filter(|&&b| b).count(), cfg.label_len / 2);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = TaskConfig::default();
        cfg.rho = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = TaskConfig::default();
        cfg.label_len = 0;
        assert!(cfg.validate().is_err());
    }

    proptest! {
        // The number of visual-dependent slots tracks rho * label_len
        // to within one slot at any length.
        #[test]
        fn visual_dependent_count_tracks_rho(
            label_len in 1usize..64,
            rho in 0.0f64..=1.0,
        ) {
            let cfg = TaskConfig { label_len, rho, ..TaskConfig::default() };
            let count = cfg.visual_dependent_slots().iter().filter(|&&b| b).count();
            let expect = rho * label_len as f64;
            prop_assert!((count as f64 - expect).abs() <= 1.0 + 1e-9);
        }
    }
}
