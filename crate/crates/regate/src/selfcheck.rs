//! Embedded invariant suite behind the `selfcheck` subcommand.
//!
//! Each check is a scaled-down version of an invariant the integration
//! suite verifies exhaustively: routing equivalence at full keep,
//! pass-through at dropped positions, analytic gradients against
//! central differences, the schedule's piecewise shape, and the
//! difficulty EMA's closed form. The suite runs in a few seconds and
//! needs no files, so a built binary can always be interrogated.

use crate::data::{generate_dataset, TaskConfig};
use crate::gating::select_top_k;
use crate::model::loss::{batch_label_loss, LossAverage};
use crate::model::net::{bind, gradients, hidden_states_sparse, logits_dense, logits_sparse};
use crate::model::{ModelConfig, ModelParams};
use crate::schedule::ScheduleConfig;
use crate::scoring::DifficultyBuffer;
use crate::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

fn check(name: &'static str, run: impl FnOnce() -> Result<String, String>) -> CheckResult {
    match run() {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

fn small_setup(
    n_layers: usize,
    d_model: usize,
    seed: u64,
) -> (ModelConfig, ModelParams<f64>, Vec<crate::data::Sample>) {
    let task = TaskConfig::default();
    let cfg = ModelConfig {
        n_layers,
        n_heads: 2,
        d_model,
        d_ff: 2 * d_model,
        max_seq_len: 32,
        tied_head: true,
        init_std: 0.02,
        vocab: task.vocab(),
    };
    let params = ModelParams::<f64>::init(cfg, seed).expect("valid config");
    let samples = generate_dataset(&task, 2, seed ^ 0xD5, false);
    (cfg, params, samples)
}

/// Dense and sparse routing agree at full keep, logits and gradients.
fn dense_sparse_equivalence() -> Result<String, String> {
    let (cfg, params, samples) = small_setup(2, 32, 11);
    let seq = &samples[0].seq;
    let keep = vec![true; seq.len()];

    let run = |sparse: bool| -> Result<(Vec<f64>, Vec<Vec<f64>>), String> {
        let mut tape = Tape::<f64>::new();
        let bound = bind(&mut tape, &params, true).map_err(|e| e.to_string())?;
        let logits = if sparse {
            logits_sparse(&mut tape, &bound, &cfg, &seq.tokens, &keep).map_err(|e| e.to_string())?
        } else {
            logits_dense(&mut tape, &bound, &cfg, &seq.tokens).map_err(|e| e.to_string())?
        };
        let loss = tape.sum_all(logits).map_err(|e| e.to_string())?;
        tape.backward(loss).map_err(|e| e.to_string())?;
        Ok((tape.value(logits).to_vec(), gradients(&tape, &bound)))
    };
    let (ld, gd) = run(false)?;
    let (ls, gs) = run(true)?;
    let logit_gap = ld
        .iter()
        .zip(&ls)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    let grad_gap = gd
        .iter()
        .flatten()
        .zip(gs.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    if logit_gap > 1e-10 {
        return Err(format!("logit gap {logit_gap:.3e} exceeds 1e-10"));
    }
    if grad_gap > 1e-8 {
        return Err(format!("gradient gap {grad_gap:.3e} exceeds 1e-8"));
    }
    Ok(format!("logit gap {logit_gap:.1e}, gradient gap {grad_gap:.1e}"))
}

/// Dropped positions leave every block with their input row unchanged.
fn pass_through() -> Result<String, String> {
    let (cfg, params, samples) = small_setup(2, 32, 23);
    let seq = &samples[1].seq;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let keep: Vec<bool> = (0..seq.len())
            .map(|i| i == 0 || rng.gen_bool(0.5))
            .collect();
        let mut tape = Tape::<f64>::new_eval();
        let bound = bind(&mut tape, &params, false).map_err(|e| e.to_string())?;
        let states = hidden_states_sparse(&mut tape, &bound, &cfg, &seq.tokens, &keep)
            .map_err(|e| e.to_string())?;
        let d = cfg.d_model;
        for w in states.windows(2) {
            for (i, &kept) in keep.iter().enumerate() {
                if kept {
                    continue;
                }
                for c in 0..d {
                    let before = w[0][i * d + c];
                    let after = w[1][i * d + c];
                    if before.to_bits() != after.to_bits() {
                        return Err(format!(
                            "dropped position {i} changed: {before} -> {after}"
                        ));
                    }
                }
            }
        }
    }
    Ok("10 random masks, dropped rows bit-identical through every block".into())
}

/// Analytic gradients of the gated label loss match central differences.
fn gradient_check() -> Result<String, String> {
    let (cfg, mut params, samples) = small_setup(1, 16, 31);
    let seqs: Vec<_> = samples.iter().map(|s| &s.seq).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let keeps: Vec<Vec<bool>> = seqs
        .iter()
        .map(|s| (0..s.len()).map(|i| i == 0 || rng.gen_bool(0.7)).collect())
        .collect();

    let loss_at = |p: &ModelParams<f64>| -> Result<f64, String> {
        let mut tape = Tape::<f64>::new_eval();
        let bound = bind(&mut tape, p, false).map_err(|e| e.to_string())?;
        let out = batch_label_loss(&mut tape, &bound, &cfg, &seqs, &keeps, LossAverage::KeptLabels)
            .map_err(|e| e.to_string())?;
        Ok(tape.scalar(out.loss))
    };
    let analytic = {
        let mut tape = Tape::<f64>::new();
        let bound = bind(&mut tape, &params, true).map_err(|e| e.to_string())?;
        let out = batch_label_loss(&mut tape, &bound, &cfg, &seqs, &keeps, LossAverage::KeptLabels)
            .map_err(|e| e.to_string())?;
        tape.backward(out.loss).map_err(|e| e.to_string())?;
        gradients(&tape, &bound)
    };

    let n_tensors = params.named().len();
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for trial in 0..8 {
        let ti = rng.gen_range(0..n_tensors);
        let ei = {
            let named = params.named();
            rng.gen_range(0..named[ti].1.data.len())
        };
        let g = analytic[ti][ei];
        let orig = params.named()[ti].1.data[ei];
        params.named_mut()[ti].1.data[ei] = orig + h;
        let up = loss_at(&params)?;
        params.named_mut()[ti].1.data[ei] = orig - h;
        let down = loss_at(&params)?;
        params.named_mut()[ti].1.data[ei] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
        if rel > 1e-4 {
            return Err(format!(
                "trial {trial}: analytic {g:.6e} vs central difference {fd:.6e}, rel {rel:.2e}"
            ));
        }
    }
    Ok(format!("8 sampled coordinates, worst relative error {worst:.1e}"))
}

/// Exhaustive check of the dual-cycle keep fraction at default settings.
fn schedule_exhaustive() -> Result<String, String> {
    let s = ScheduleConfig::default();
    let horizon = s.warmup + 3 * s.cycle_len;
    for t in 0..horizon {
        let expected = if t < s.warmup {
            1.0
        } else if (t - s.warmup) % s.cycle_len < s.dense_prefix {
            1.0
        } else {
            s.p_sparse
        };
        let got = s.keep_fraction(t);
        if got != expected {
            return Err(format!("step {t}: keep fraction {got}, expected {expected}"));
        }
    }
    let mean = s.cycle_mean();
    let expected_mean = (s.dense_prefix as f64
        + (s.cycle_len - s.dense_prefix) as f64 * s.p_sparse)
        / s.cycle_len as f64;
    if (mean - expected_mean).abs() > 1e-15 {
        return Err(format!("cycle mean {mean}, expected {expected_mean}"));
    }
    Ok(format!("{horizon} steps verified, cycle mean {mean}"))
}

/// EMA recursion matches its closed form and converges geometrically.
fn ema_closed_form() -> Result<String, String> {
    let beta = 0.9;
    let mut buf = DifficultyBuffer::new(beta).map_err(|e| e.to_string())?;
    let losses = [2.0, 0.5, 1.25, 3.0, 0.125, 0.75];
    for &l in &losses {
        buf.update(0, 0, l).map_err(|e| e.to_string())?;
    }
    // first observation seeds the average, later ones decay toward it
    let mut expected = losses[0];
    for &l in &losses[1..] {
        expected = beta * expected + (1.0 - beta) * l;
    }
    let got = buf.get(0, 0).expect("entry exists");
    if (got - expected).abs() > 1e-12 {
        return Err(format!("recursion gave {got}, closed form {expected}"));
    }
    // convergence: |m - L| shrinks by beta each constant update
    let target = 4.0;
    let mut steps = 0;
    while (buf.get(0, 0).unwrap() - target).abs() > 1e-6 {
        buf.update(0, 0, target).map_err(|e| e.to_string())?;
        steps += 1;
        if steps > 500 {
            return Err("no convergence within 500 constant updates".into());
        }
    }
    Ok(format!("closed form matches; converged to 1e-6 in {steps} updates"))
}

/// Deterministic top-k selection with the documented tie-breaking.
fn gating_selection() -> Result<String, String> {
    let scored = [(0, 5.0), (1, 13.0), (2, 8.0), (3, 10.0)];
    let picked = select_top_k(&scored, 2);
    if picked != vec![1, 3] {
        return Err(format!("top-2 of [5,13,8,10] picked {picked:?}, expected [1, 3]"));
    }
    let tied = [(4, 1.0), (2, 1.0), (9, 1.0)];
    let picked = select_top_k(&tied, 2);
    if picked != vec![2, 4] {
        return Err(format!("tie-break picked {picked:?}, expected [2, 4]"));
    }
    Ok("examples and tie-breaking verified".into())
}

/// Runs every check, returning the results in a fixed order.
pub fn run_selfcheck() -> Vec<CheckResult> {
    vec![
        check("dense-sparse-equivalence", dense_sparse_equivalence),
        check("pass-through", pass_through),
        check("gradient-check", gradient_check),
        check("schedule-exhaustive", schedule_exhaustive),
        check("ema-closed-form", ema_closed_form),
        check("gating-selection", gating_selection),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let results = run_selfcheck();
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert!(all_passed(&results));
        assert_eq!(results.len(), 6);
    }
}
