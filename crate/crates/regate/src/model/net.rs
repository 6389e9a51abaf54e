//! Forward passes over a tape.
//!
//! `bind` registers the parameters on a tape once; the returned handles
//! are reused across every sequence recorded on that tape, so a batch
//! accumulates all its gradients into one set of buffers.
//!
//! Mask conventions, with q the query row and k the key column:
//! dense allows (q, k) iff k <= q and token k is not pad, and computes
//! every query row; sparse allows (q, k) iff k <= q and both positions
//! are kept. A dropped query row is fully masked, its attention output
//! is exactly zero, and because the attention output projection carries
//! no bias the residual stream at that position survives the block
//! bit for bit.

use super::{ModelConfig, ModelError, ModelParams};
use crate::tensor::{Element, Tape, Tensor, MASK_NEG};

#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Parameter handles on one tape, in the same canonical order as
/// `ModelParams::named`.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<BoundLayer>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head: Option<Tensor>,
    pub handles: Vec<Tensor>,
}

/// Registers every parameter on the tape. Trainable binding tracks
/// gradients; frozen binding records plain constants.
pub fn bind<T: Element>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    trainable: bool,
) -> Result<BoundModel, ModelError> {
    let mut handles = Vec::new();
    for (_, p) in params.named() {
        let t = if trainable {
            tape.param(&p.data, p.rows, p.cols)?
        } else {
            tape.constant(p.data.clone(), p.rows, p.cols)?
        };
        handles.push(t);
    }
    let mut it = handles.iter().copied();
    let mut next = || it.next().expect("handle list matches named order");
    let tok_embed = next();
    let pos_embed = next();
    let layers = (0..params.cfg.n_layers)
        .map(|_| BoundLayer {
            ln1_g: next(),
            ln1_b: next(),
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            ln2_g: next(),
            ln2_b: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        })
        .collect();
    let lnf_g = next();
    let lnf_b = next();
    let head = params.head.as_ref().map(|_| next());
    Ok(BoundModel {
        tok_embed,
        pos_embed,
        layers,
        lnf_g,
        lnf_b,
        head,
        handles,
    })
}

/// Gradients for every parameter, in canonical order; zero where the
/// loss never touched a handle.
pub fn gradients<T: Element>(tape: &Tape<T>, bound: &BoundModel) -> Vec<Vec<T>> {
    bound
        .handles
        .iter()
        .map(|&h| match tape.grad(h) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); h.rows * h.cols],
        })
        .collect()
}

fn causal_pad_mask<T: Element>(tokens: &[u32], pad_id: u32) -> Vec<T> {
    let s = tokens.len();
    let blocked = T::from_f64(MASK_NEG);
    let mut m = vec![blocked; s * s];
    for q in 0..s {
        for k in 0..=q {
            if tokens[k] != pad_id {
                m[q * s + k] = T::zero();
            }
        }
    }
    m
}

fn causal_keep_mask<T: Element>(keep: &[bool]) -> Vec<T> {
    let s = keep.len();
    let blocked = T::from_f64(MASK_NEG);
    let mut m = vec![blocked; s * s];
    for q in 0..s {
        if !keep[q] {
            continue;
        }
        for k in 0..=q {
            if keep[k] {
                m[q * s + k] = T::zero();
            }
        }
    }
    m
}

fn attention<T: Element>(
    tape: &mut Tape<T>,
    layer: &BoundLayer,
    x: Tensor,
    mask: &[T],
    n_heads: usize,
) -> Result<Tensor, ModelError> {
    let d_head = x.cols / n_heads;
    let q = tape.matmul(x, layer.wq)?;
    let k = tape.matmul(x, layer.wk)?;
    let v = tape.matmul(x, layer.wv)?;
    let inv_sqrt = 1.0 / (d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let scores = tape.matmul_tb(qh, kh)?;
        let scaled = tape.scale(scores, inv_sqrt)?;
        let probs = tape.softmax_rows_masked(scaled, Some(mask))?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let ctx = tape.concat_cols(&heads)?;
    Ok(tape.matmul(ctx, layer.wo)?)
}

fn mlp<T: Element>(tape: &mut Tape<T>, layer: &BoundLayer, x: Tensor) -> Result<Tensor, ModelError> {
    let h = tape.matmul(x, layer.w1)?;
    let h = tape.add_bias_row(h, layer.b1)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, layer.w2)?;
    Ok(tape.add_bias_row(h, layer.b2)?)
}

fn block_dense<T: Element>(
    tape: &mut Tape<T>,
    layer: &BoundLayer,
    h: Tensor,
    mask: &[T],
    n_heads: usize,
) -> Result<Tensor, ModelError> {
    let x = tape.layer_norm(h, layer.ln1_g, layer.ln1_b)?;
    let a = attention(tape, layer, x, mask, n_heads)?;
    let h = tape.add(h, a)?;
    let x = tape.layer_norm(h, layer.ln2_g, layer.ln2_b)?;
    let f = mlp(tape, layer, x)?;
    Ok(tape.add(h, f)?)
}

fn block_sparse<T: Element>(
    tape: &mut Tape<T>,
    layer: &BoundLayer,
    h: Tensor,
    mask: &[T],
    n_heads: usize,
    active: &[usize],
) -> Result<Tensor, ModelError> {
    let x = tape.layer_norm(h, layer.ln1_g, layer.ln1_b)?;
    let a = attention(tape, layer, x, mask, n_heads)?;
    let h = tape.add(h, a)?;
    // the MLP runs on the kept rows only; skipped rows never enter it
    let g = tape.gather_rows(h, active)?;
    let x = tape.layer_norm(g, layer.ln2_g, layer.ln2_b)?;
    let f = mlp(tape, layer, x)?;
    Ok(tape.add_rows_at(h, f, active)?)
}

fn embed_sequence<T: Element>(
    tape: &mut Tape<T>,
    bound: &BoundModel,
    cfg: &ModelConfig,
    tokens: &[u32],
) -> Result<Tensor, ModelError> {
    let s = tokens.len();
    if s == 0 || s > cfg.max_seq_len {
        return Err(ModelError::BadSequenceLength {
            len: s,
            max: cfg.max_seq_len,
        });
    }
    let tok = tape.embed(bound.tok_embed, tokens)?;
    let pos_ids: Vec<u32> = (0..s as u32).collect();
    let pos = tape.embed(bound.pos_embed, &pos_ids)?;
    Ok(tape.add(tok, pos)?)
}

fn project_out<T: Element>(
    tape: &mut Tape<T>,
    bound: &BoundModel,
    h: Tensor,
) -> Result<Tensor, ModelError> {
    let hf = tape.layer_norm(h, bound.lnf_g, bound.lnf_b)?;
    let table = bound.head.unwrap_or(bound.tok_embed);
    Ok(tape.matmul_tb(hf, table)?)
}

/// Dense route: all positions computed, pad keys masked out.
pub fn logits_dense<T: Element>(
    tape: &mut Tape<T>,
    bound: &BoundModel,
    cfg: &ModelConfig,
    tokens: &[u32],
) -> Result<Tensor, ModelError> {
    let mut h = embed_sequence(tape, bound, cfg, tokens)?;
    let mask = causal_pad_mask::<T>(tokens, cfg.vocab.pad_id);
    for layer in &bound.layers {
        h = block_dense(tape, layer, h, &mask, cfg.n_heads)?;
    }
    project_out(tape, bound, h)
}

/// Sparse route: positions with `keep[i] == false` are removed from
/// attention and the MLP and pass through every block unchanged.
/// The mask must not keep pad positions.
pub fn logits_sparse<T: Element>(
    tape: &mut Tape<T>,
    bound: &BoundModel,
    cfg: &ModelConfig,
    tokens: &[u32],
    keep: &[bool],
) -> Result<Tensor, ModelError> {
    if keep.len() != tokens.len() {
        return Err(ModelError::MaskLenMismatch {
            mask: keep.len(),
            seq: tokens.len(),
        });
    }
    if let Some(pos) = (0..tokens.len()).find(|&i| keep[i] && tokens[i] == cfg.vocab.pad_id) {
        return Err(ModelError::MaskKeepsPad { pos });
    }
    let mut h = embed_sequence(tape, bound, cfg, tokens)?;
    let mask = causal_keep_mask::<T>(keep);
    let active: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    for layer in &bound.layers {
        h = block_sparse(tape, layer, h, &mask, cfg.n_heads, &active)?;
    }
    project_out(tape, bound, h)
}

/// Sparse route that also returns the hidden state after each block,
/// for pass-through inspection.
pub fn hidden_states_sparse<T: Element>(
    tape: &mut Tape<T>,
    bound: &BoundModel,
    cfg: &ModelConfig,
    tokens: &[u32],
    keep: &[bool],
) -> Result<Vec<Vec<T>>, ModelError> {
    if keep.len() != tokens.len() {
        return Err(ModelError::MaskLenMismatch {
            mask: keep.len(),
            seq: tokens.len(),
        });
    }
    let mut h = embed_sequence(tape, bound, cfg, tokens)?;
    let mask = causal_keep_mask::<T>(keep);
    let active: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    let mut states = vec![tape.value(h).to_vec()];
    for layer in &bound.layers {
        h = block_sparse(tape, layer, h, &mask, cfg.n_heads, &active)?;
        states.push(tape.value(h).to_vec());
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, TaskConfig};
    use crate::model::test_config;
    use crate::tensor::FULLY_MASKED;

    fn demo_tokens() -> Vec<u32> {
        // bos, prompt x3, visual x2, label x3 under the default layout
        vec![1, 33, 40, 35, 2, 9, 50, 44, 61]
    }

    #[test]
    fn dense_mask_blocks_future_and_pad_keys() {
        let tokens = vec![1, 33, 0, 40];
        let m = causal_pad_mask::<f64>(&tokens, 0);
        // row 3 sees keys 0, 1, 3 but never key 2 (pad) or future
        assert_eq!(m[3 * 4], 0.0);
        assert_eq!(m[3 * 4 + 1], 0.0);
        assert!(m[3 * 4 + 2] <= FULLY_MASKED);
        assert_eq!(m[3 * 4 + 3], 0.0);
        assert!(m[4 + 2] <= FULLY_MASKED, "future key blocked");
        // every row keeps at least one key (position 0 is never pad)
        for q in 0..4 {
            assert!((0..4).any(|k| m[q * 4 + k] == 0.0));
        }
    }

    #[test]
    fn keep_mask_blocks_dropped_positions_both_ways() {
        let keep = vec![true, false, true];
        let m = causal_keep_mask::<f64>(&keep);
        assert_eq!(m[0], 0.0);
        assert!(m[1 * 3].min(m[1 * 3 + 1]) <= FULLY_MASKED, "dropped query row fully blocked");
        assert_eq!(m[2 * 3], 0.0);
        assert!(m[2 * 3 + 1] <= FULLY_MASKED, "dropped key blocked");
        assert_eq!(m[2 * 3 + 2], 0.0);
    }

    #[test]
    fn logits_shape_and_determinism() {
        let cfg = test_config(2, 2, 16);
        let params = ModelParams::<f64>::init(cfg, 11).unwrap();
        let tokens = demo_tokens();

        let run = || {
            let mut tape = Tape::<f64>::new_eval();
            let bound = bind(&mut tape, &params, false).unwrap();
            let t = logits_dense(&mut tape, &bound, &cfg, &tokens).unwrap();
            (t.rows, t.cols, tape.value(t).to_vec())
        };
        let (r, c, a) = run();
        assert_eq!((r, c), (tokens.len(), cfg.vocab.vocab_size() as usize));
        let (_, _, b) = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zeroed_stack_gives_uniform_logits() {
        // zero embeddings and weights leave logits constant across the
        // vocabulary: softmax would be exactly uniform
        let cfg = test_config(1, 2, 8);
        let mut params = ModelParams::<f64>::init(cfg, 0).unwrap();
        for (_, p) in params.named_mut() {
            for x in p.data.iter_mut() {
                *x = 0.0;
            }
        }
        let mut tape = Tape::<f64>::new_eval();
        let bound = bind(&mut tape, &params, false).unwrap();
        let t = logits_dense(&mut tape, &bound, &cfg, &demo_tokens()).unwrap();
        let v = tape.value(t);
        for row in v.chunks(t.cols) {
            for x in row {
                assert_eq!(*x, row[0]);
            }
        }
    }

    #[test]
    fn causality_later_tokens_cannot_change_earlier_logits() {
        let cfg = test_config(2, 2, 16);
        let params = ModelParams::<f64>::init(cfg, 3).unwrap();
        let a = demo_tokens();
        let mut b = a.clone();
        *b.last_mut().unwrap() = 34;

        let logits = |tokens: &[u32]| {
            let mut tape = Tape::<f64>::new_eval();
            let bound = bind(&mut tape, &params, false).unwrap();
            let t = logits_dense(&mut tape, &bound, &cfg, tokens).unwrap();
            tape.value(t).to_vec()
        };
        let la = logits(&a);
        let lb = logits(&b);
        let v = cfg.vocab.vocab_size() as usize;
        for i in 0..a.len() - 1 {
            assert_eq!(
                la[i * v..(i + 1) * v],
                lb[i * v..(i + 1) * v],
                "row {i} changed"
            );
        }
        assert_ne!(la[(a.len() - 1) * v..], lb[(a.len() - 1) * v..]);
    }

    #[test]
    fn skipped_positions_pass_through_every_block_bit_for_bit() {
        let cfg = test_config(3, 2, 16);
        let params = ModelParams::<f64>::init(cfg, 9).unwrap();
        let tokens = demo_tokens();
        let keep = vec![true, true, false, true, true, false, true, false, true];

        let mut tape = Tape::<f64>::new_eval();
        let bound = bind(&mut tape, &params, false).unwrap();
        let states = hidden_states_sparse(&mut tape, &bound, &cfg, &tokens, &keep).unwrap();
        let d = cfg.d_model;
        for w in states.windows(2) {
            for (i, &kept) in keep.iter().enumerate() {
                if !kept {
                    let before = &w[0][i * d..(i + 1) * d];
                    let after = &w[1][i * d..(i + 1) * d];
                    assert!(before
                        .iter()
                        .zip(after)
                        .all(|(x, y)| x.to_bits() == y.to_bits()));
                }
            }
        }
        // kept rows do change
        let first = &states[0];
        let last = states.last().unwrap();
        assert_ne!(first[0..d], last[0..d]);
    }

    #[test]
    fn sparse_route_rejects_masks_that_keep_pads() {
        let cfg = test_config(1, 2, 8);
        let params = ModelParams::<f64>::init(cfg, 1).unwrap();
        let tokens = vec![1, 33, 0, 40];
        let keep = vec![true, true, true, true];
        let mut tape = Tape::<f64>::new_eval();
        let bound = bind(&mut tape, &params, false).unwrap();
        assert!(matches!(
            logits_sparse(&mut tape, &bound, &cfg, &tokens, &keep),
            Err(ModelError::MaskKeepsPad { pos: 2 })
        ));
        assert!(matches!(
            logits_sparse(&mut tape, &bound, &cfg, &tokens, &keep[..3]),
            Err(ModelError::MaskLenMismatch { .. })
        ));
    }

    #[test]
    fn sequence_length_limits_are_enforced() {
        let cfg = test_config(1, 2, 8);
        let params = ModelParams::<f64>::init(cfg, 1).unwrap();
        let long = vec![1u32; cfg.max_seq_len + 1];
        let mut tape = Tape::<f64>::new_eval();
        let bound = bind(&mut tape, &params, false).unwrap();
        assert!(matches!(
            logits_dense(&mut tape, &bound, &cfg, &long),
            Err(ModelError::BadSequenceLength { .. })
        ));
    }

    #[test]
    fn generated_batches_run_through_both_routes() {
        let task = TaskConfig::default();
        let mut cfg = test_config(2, 2, 16);
        cfg.vocab = task.vocab();
        let params = ModelParams::<f64>::init(cfg, 21).unwrap();
        let samples = generate_dataset(&task, 4, 5, false);
        let mut tape = Tape::<f64>::new();
        let bound = bind(&mut tape, &params, true).unwrap();
        for s in &samples {
            let keep: Vec<bool> = s
                .seq
                .roles
                .iter()
                .map(|r| *r != crate::data::Role::Pad)
                .collect();
            logits_dense(&mut tape, &bound, &cfg, &s.seq.tokens).unwrap();
            logits_sparse(&mut tape, &bound, &cfg, &s.seq.tokens, &keep).unwrap();
        }
    }
}
