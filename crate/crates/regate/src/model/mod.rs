//! Decoder-only transformer: pre-norm blocks, multi-head causal
//! attention, GELU MLP, learned positional embeddings, tied or untied
//! output head.
//!
//! The same parameter set drives two forward routes. The dense route
//! computes every position and masks only pad keys; the sparse route
//! takes a per-position keep mask and removes skipped positions from
//! attention (as queries and as keys) and from the MLP, so their hidden
//! states pass through each block unchanged.

pub mod loss;
pub mod net;

use crate::data::VocabLayout;
use crate::tensor::{Element, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufReader, BufWriter};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_KIND: &str = "model-checkpoint";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence length {len} outside [1, {max}]")]
    BadSequenceLength { len: usize, max: usize },
    #[error("keep mask length {mask} does not match sequence length {seq}")]
    MaskLenMismatch { mask: usize, seq: usize },
    #[error("keep mask holds pad position {pos}")]
    MaskKeepsPad { pos: usize },
    #[error("no label position kept anywhere in the batch")]
    NoKeptLabels,
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_tied_head")]
    pub tied_head: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    pub vocab: VocabLayout,
}

fn default_tied_head() -> bool {
    true
}
fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return err("layer, head and width counts must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len < 2 {
            return err("max_seq_len must be at least 2".into());
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return err(format!("init_std must be positive, got {}", self.init_std));
        }
        let v = &self.vocab;
        let size = v.vocab_size();
        if v.pad_id == v.bos_id || v.pad_id >= size || v.bos_id >= size {
            return err("pad and bos ids must be distinct and in range".into());
        }
        if v.visual_len == 0 || v.text_len == 0 {
            return err("visual and text ranges must be non-empty".into());
        }
        let vis = v.visual_start..v.visual_start + v.visual_len;
        let txt = v.text_start..v.text_start + v.text_len;
        if vis.end > size || txt.end > size {
            return err("id ranges exceed vocab size".into());
        }
        if vis.contains(&v.pad_id) || vis.contains(&v.bos_id) {
            return err("pad/bos ids overlap the visual range".into());
        }
        if txt.contains(&v.pad_id) || txt.contains(&v.bos_id) {
            return err("pad/bos ids overlap the text range".into());
        }
        if vis.contains(&txt.start) || txt.contains(&vis.start) {
            return err("visual and text ranges overlap".into());
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One named weight matrix (or row vector).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Element> Param<T> {
    fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Param {
            rows,
            cols,
            data: vec![T::from_f64(v); rows * cols],
        }
    }

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Self {
        // sampled in f64 regardless of T so both precisions see the
        // same underlying draws
        let normal = Normal::new(0.0f64, std).expect("std validated positive");
        Param {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| T::from_f64(normal.sample(rng)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub ln1_g: Param<T>,
    pub ln1_b: Param<T>,
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub wo: Param<T>,
    pub ln2_g: Param<T>,
    pub ln2_b: Param<T>,
    pub w1: Param<T>,
    pub b1: Param<T>,
    pub w2: Param<T>,
    pub b2: Param<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub cfg: ModelConfig,
    pub tok_embed: Param<T>,
    pub pos_embed: Param<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Param<T>,
    pub lnf_b: Param<T>,
    /// Output head when untied; the tied head reuses `tok_embed`.
    pub head: Option<Param<T>>,
}

impl<T: Element> ModelParams<T> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let v = cfg.vocab.vocab_size() as usize;
        let std = cfg.init_std;
        let tok_embed = Param::randn(&mut rng, v, d, std);
        let pos_embed = Param::randn(&mut rng, cfg.max_seq_len, d, std);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1_g: Param::filled(1, d, 1.0),
                ln1_b: Param::filled(1, d, 0.0),
                wq: Param::randn(&mut rng, d, d, std),
                wk: Param::randn(&mut rng, d, d, std),
                wv: Param::randn(&mut rng, d, d, std),
                wo: Param::randn(&mut rng, d, d, std),
                ln2_g: Param::filled(1, d, 1.0),
                ln2_b: Param::filled(1, d, 0.0),
                w1: Param::randn(&mut rng, d, cfg.d_ff, std),
                b1: Param::filled(1, cfg.d_ff, 0.0),
                w2: Param::randn(&mut rng, cfg.d_ff, d, std),
                b2: Param::filled(1, d, 0.0),
            })
            .collect();
        let lnf_g = Param::filled(1, d, 1.0);
        let lnf_b = Param::filled(1, d, 0.0);
        let head = if cfg.tied_head {
            None
        } else {
            Some(Param::randn(&mut rng, v, d, std))
        };
        Ok(ModelParams {
            cfg,
            tok_embed,
            pos_embed,
            layers,
            lnf_g,
            lnf_b,
            head,
        })
    }

    /// Canonical (name, tensor) listing; every walk over parameters uses
    /// this order.
    pub fn named(&self) -> Vec<(String, &Param<T>)> {
        let mut out: Vec<(String, &Param<T>)> = vec![
            ("tok_embed".into(), &self.tok_embed),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, p) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layer{i}.{suffix}"), p));
            }
        }
        out.push(("final_ln_g".into(), &self.lnf_g));
        out.push(("final_ln_b".into(), &self.lnf_b));
        if let Some(h) = &self.head {
            out.push(("head".into(), h));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out: Vec<(String, &mut Param<T>)> = vec![
            ("tok_embed".into(), &mut self.tok_embed),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, p) in [
                ("ln1_g", &mut l.ln1_g),
                ("ln1_b", &mut l.ln1_b),
                ("wq", &mut l.wq),
                ("wk", &mut l.wk),
                ("wv", &mut l.wv),
                ("wo", &mut l.wo),
                ("ln2_g", &mut l.ln2_g),
                ("ln2_b", &mut l.ln2_b),
                ("w1", &mut l.w1),
                ("b1", &mut l.b1),
                ("w2", &mut l.w2),
                ("b2", &mut l.b2),
            ] {
                out.push((format!("layer{i}.{suffix}"), p));
            }
        }
        out.push(("final_ln_g".into(), &mut self.lnf_g));
        out.push(("final_ln_b".into(), &mut self.lnf_b));
        if let Some(h) = &mut self.head {
            out.push(("head".into(), h));
        }
        out
    }

    pub fn n_scalars(&self) -> usize {
        self.named().iter().map(|(_, p)| p.data.len()).sum()
    }

    /// SHA-256 over precision tag, names, shapes and little-endian bytes
    /// of every value, in canonical order. Equal hash means equal
    /// parameters bit for bit.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"model-params-v1\0");
        h.update(T::NAME.as_bytes());
        h.update([0u8]);
        let mut bytes = Vec::new();
        for (name, p) in self.named() {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update((p.rows as u64).to_le_bytes());
            h.update((p.cols as u64).to_le_bytes());
            bytes.clear();
            for &x in &p.data {
                x.append_le_bytes(&mut bytes);
            }
            h.update(&bytes);
        }
        let digest = h.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let tensors: Vec<NamedTensor<T>> = self
            .named()
            .into_iter()
            .map(|(name, p)| NamedTensor {
                name,
                rows: p.rows,
                cols: p.cols,
                data: p.data.clone(),
            })
            .collect();
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            kind: CHECKPOINT_KIND.to_string(),
            precision: T::NAME.to_string(),
            config: self.cfg,
            tensors,
        };
        let w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(w, &file)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let f = std::fs::File::open(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        let r = BufReader::new(f);
        let file: CheckpointFile<T> = serde_json::from_reader(r)?;
        let rej = |m: String| Err(ModelError::Checkpoint(m));
        if file.version != CHECKPOINT_VERSION {
            return rej(format!("version {} (expected {CHECKPOINT_VERSION})", file.version));
        }
        if file.kind != CHECKPOINT_KIND {
            return rej(format!("kind {:?}", file.kind));
        }
        if file.precision != T::NAME {
            return rej(format!(
                "precision {:?} (this build reads {:?})",
                file.precision,
                T::NAME
            ));
        }
        file.config.validate()?;
        // rebuild the skeleton, then require the stored tensor list to
        // match it name for name and shape for shape
        let mut params = ModelParams::<T>::init(file.config, 0)?;
        {
            let expected = params.named_mut();
            if expected.len() != file.tensors.len() {
                return Err(ModelError::Checkpoint(format!(
                    "{} tensors stored, {} expected",
                    file.tensors.len(),
                    expected.len()
                )));
            }
            for ((name, p), rec) in expected.into_iter().zip(file.tensors) {
                if rec.name != name {
                    return Err(ModelError::Checkpoint(format!(
                        "tensor {:?} where {:?} was expected",
                        rec.name, name
                    )));
                }
                if rec.rows != p.rows || rec.cols != p.cols || rec.data.len() != p.data.len() {
                    return Err(ModelError::Checkpoint(format!(
                        "tensor {:?} stored as [{} x {}], expected [{} x {}]",
                        rec.name, rec.rows, rec.cols, p.rows, p.cols
                    )));
                }
                if rec.data.iter().any(|x| !x.is_finite()) {
                    return Err(ModelError::Checkpoint(format!(
                        "tensor {:?} holds non-finite values",
                        rec.name
                    )));
                }
                p.data = rec.data;
            }
        }
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile<T> {
    version: u32,
    kind: String,
    precision: String,
    config: ModelConfig,
    tensors: Vec<NamedTensor<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor<T> {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

#[cfg(test)]
pub(crate) fn test_config(n_layers: usize, n_heads: usize, d_model: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        d_model,
        d_ff: d_model * 2,
        max_seq_len: 32,
        tied_head: true,
        init_std: 0.02,
        vocab: crate::data::TaskConfig::default().vocab(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = test_config(2, 2, 16);
        let a = ModelParams::<f64>::init(cfg, 1).unwrap();
        let b = ModelParams::<f64>::init(cfg, 1).unwrap();
        let c = ModelParams::<f64>::init(cfg, 2).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn named_listing_shape_and_order() {
        let cfg = test_config(3, 2, 16);
        let p = ModelParams::<f64>::init(cfg, 0).unwrap();
        let named = p.named();
        assert_eq!(named.len(), 2 + 12 * 3 + 2);
        assert_eq!(named[0].0, "tok_embed");
        assert_eq!(named[2].0, "layer0.ln1_g");
        assert_eq!(named.last().unwrap().0, "final_ln_b");
        let (_, wq) = named.iter().find(|(n, _)| n == "layer1.wq").unwrap();
        assert_eq!((wq.rows, wq.cols), (16, 16));
        let (_, w1) = named.iter().find(|(n, _)| n == "layer2.w1").unwrap();
        assert_eq!((w1.rows, w1.cols), (16, 32));

        let mut untied = cfg;
        untied.tied_head = false;
        let p = ModelParams::<f64>::init(untied, 0).unwrap();
        assert_eq!(p.named().last().unwrap().0, "head");
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut cfg = test_config(1, 3, 16);
        assert!(cfg.validate().is_err(), "16 not divisible by 3");
        cfg = test_config(1, 2, 16);
        cfg.vocab.text_len = 0;
        assert!(cfg.validate().is_err());
        cfg = test_config(1, 2, 16);
        cfg.vocab.visual_start = 0;
        assert!(cfg.validate().is_err(), "visual range swallows pad id");
        assert!(test_config(2, 2, 16).validate().is_ok());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let cfg = test_config(2, 2, 16);

        let p64 = ModelParams::<f64>::init(cfg, 7).unwrap();
        p64.save(&path).unwrap();
        let r64 = ModelParams::<f64>::load(&path).unwrap();
        assert_eq!(p64.param_hash(), r64.param_hash());
        assert_eq!(p64, r64);

        let p32 = ModelParams::<f32>::init(cfg, 7).unwrap();
        let path32 = dir.path().join("m32.json");
        p32.save(&path32).unwrap();
        let r32 = ModelParams::<f32>::load(&path32).unwrap();
        assert_eq!(p32.param_hash(), r32.param_hash());

        // a precision mismatch is refused outright
        assert!(matches!(
            ModelParams::<f32>::load(&path),
            Err(ModelError::Checkpoint(_))
        ));
    }

    #[test]
    fn checkpoint_rejects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let p = ModelParams::<f64>::init(test_config(1, 2, 8), 3).unwrap();
        p.save(&path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let renamed = text.replace("\"layer0.wq\"", "\"layer0.zz\"");
        std::fs::write(&path, renamed).unwrap();
        assert!(matches!(
            ModelParams::<f64>::load(&path),
            Err(ModelError::Checkpoint(_))
        ));

        let versioned = text.replace("\"version\":1", "\"version\":9");
        std::fs::write(&path, versioned).unwrap();
        assert!(matches!(
            ModelParams::<f64>::load(&path),
            Err(ModelError::Checkpoint(_))
        ));
    }

    #[test]
    fn hash_differs_across_precision_and_values() {
        let cfg = test_config(1, 2, 8);
        let a = ModelParams::<f64>::init(cfg, 5).unwrap();
        let b = ModelParams::<f32>::init(cfg, 5).unwrap();
        assert_ne!(a.param_hash(), b.param_hash());
        let mut c = a.clone();
        c.lnf_b.data[0] = 1e-16;
        assert_ne!(a.param_hash(), c.param_hash());
    }
}
