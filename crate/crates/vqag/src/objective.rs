//! Training objective, optimizer loop, and gradient verification.
//!
//! The per-example loss is the negated capacity-controlled lower bound:
//! teacher-forced reconstruction log-probs under single posterior samples,
//! plus `|KL - C|` penalties for both latents, averaged over the batch.
//! Training is plain Adam with optional global-norm clipping; a fixed seed
//! reproduces the loss trajectory bitwise on one machine.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::answer_decoder::answer_log_prob;
use crate::corpus::TokenizedExample;
use crate::error::{Result, VqagError};
use crate::latent::{
    draw_epsilon, gaussian_params_var, kl_control_penalty_var, kl_diag_gaussians_var,
    reparameterize_var, LatentHead,
};
use crate::model::Model;
use crate::nn::{answer_aware_encode, ForwardCtx};
use crate::question_decoder::question_log_prob;
use crate::tape::{Tape, Var};

/// Components of one loss evaluation. Reconstruction terms are log-probs
/// (non-positive); `total = -recon_q - recon_a + penalty_z + penalty_y`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_q: f64,
    pub recon_a: f64,
    pub kl_z: f64,
    pub kl_y: f64,
    pub penalty_z: f64,
    pub penalty_y: f64,
    pub total: f64,
}

/// Training hyperparameters. `c_a` and `c_q` are the KL capacity targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub c_a: f64,
    pub c_q: f64,
    pub seed: u64,
    pub latent_dim: usize,
    pub hidden: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 32,
            epochs: 16,
            dropout: 0.2,
            c_a: 0.0,
            c_q: 0.0,
            seed: 0,
            latent_dim: 200,
            hidden: 300,
            grad_clip: Some(5.0),
        }
    }
}

/// One epoch's mean loss components, serialized to the JSON-lines training
/// log as `{epoch, recon_q, recon_a, kl_z, kl_y, total}`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub recon_q: f64,
    pub recon_a: f64,
    pub kl_z: f64,
    pub kl_y: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Per-step batch losses, for determinism checks.
    pub step_totals: Vec<f64>,
    /// Paths of the checkpoints written, in epoch order.
    pub checkpoints: Vec<PathBuf>,
}

struct BatchLoss {
    total: Var,
    breakdown: LossBreakdown,
}

/// Source of reparameterization noise: a live rng during training, fixed
/// vectors during gradient checking.
enum EpsSource<'a, R: Rng> {
    Rng(&'a mut R),
    Fixed { eps_z: &'a Array1<f64>, eps_y: &'a Array1<f64> },
}

impl<R: Rng> EpsSource<'_, R> {
    fn draw(&mut self, dim: usize, which: usize) -> Array1<f64> {
        match self {
            EpsSource::Rng(rng) => draw_epsilon(dim, *rng),
            EpsSource::Fixed { eps_z, eps_y } => {
                if which == 0 {
                    (*eps_z).clone()
                } else {
                    (*eps_y).clone()
                }
            }
        }
    }
}

/// Builds the batch-mean loss on `ctx`'s tape. One posterior sample of
/// `(z, y)` per example.
fn elbo_on_tape<R: Rng>(
    model: &Model,
    ctx: &ForwardCtx,
    batch: &[&TokenizedExample],
    c_a: f64,
    c_q: f64,
    eps: &mut EpsSource<'_, R>,
) -> Result<BatchLoss> {
    assert!(!batch.is_empty(), "empty batch");
    let t = ctx.tape();
    let k = model.cfg.latent;
    let mut totals: Vec<Var> = Vec::with_capacity(batch.len());
    let mut sums = LossBreakdown {
        recon_q: 0.0,
        recon_a: 0.0,
        kl_z: 0.0,
        kl_y: 0.0,
        penalty_z: 0.0,
        penalty_y: 0.0,
        total: 0.0,
    };

    for ex in batch {
        let enc_c = model.encode_context(ctx, ex);
        let enc_a = model.encode_answer(ctx, ex);
        let enc_q = model.encode_question(ctx, ex);

        let (post_z_mu, post_z_lv) =
            gaussian_params_var(ctx, &[enc_c.summary, enc_a.summary], LatentHead::PostZ);
        let (prior_z_mu, prior_z_lv) =
            gaussian_params_var(ctx, &[enc_c.summary], LatentHead::PriorZ);
        let (post_y_mu, post_y_lv) =
            gaussian_params_var(ctx, &[enc_c.summary, enc_q.summary], LatentHead::PostY);
        let (prior_y_mu, prior_y_lv) =
            gaussian_params_var(ctx, &[enc_c.summary], LatentHead::PriorY);

        let z = reparameterize_var(t, post_z_mu, post_z_lv, &eps.draw(k, 0));
        let y = reparameterize_var(t, post_y_mu, post_y_lv, &eps.draw(k, 1));

        let mask = vec![true; ex.context_len()];
        let span = (ex.answer_start, ex.answer_end);
        let recon_a = answer_log_prob(ctx, enc_c.states, z, span, &mask)
            .map_err(|e| VqagError::Numerical(format!("{}: {e}", ex.qa_id)))?;
        let h_ca = answer_aware_encode(ctx, enc_c.states, span);
        let recon_q = question_log_prob(
            ctx,
            h_ca,
            y,
            &ex.question_ids,
            &ex.question_tokens,
            &ex.context_tokens,
            &mask,
        )
        .map_err(|e| VqagError::Numerical(format!("{}: {e}", ex.qa_id)))?;

        let kl_z = kl_diag_gaussians_var(t, post_z_mu, post_z_lv, prior_z_mu, prior_z_lv);
        let kl_y = kl_diag_gaussians_var(t, post_y_mu, post_y_lv, prior_y_mu, prior_y_lv);
        let pen_z = kl_control_penalty_var(t, kl_z, c_a);
        let pen_y = kl_control_penalty_var(t, kl_y, c_q);

        let neg_recon = t.neg(t.add(recon_a, recon_q));
        let loss = t.add(neg_recon, t.add(pen_z, pen_y));
        totals.push(loss);

        sums.recon_q += t.scalar(recon_q);
        sums.recon_a += t.scalar(recon_a);
        sums.kl_z += t.scalar(kl_z);
        sums.kl_y += t.scalar(kl_y);
        sums.penalty_z += t.scalar(pen_z);
        sums.penalty_y += t.scalar(pen_y);
    }

    let n = batch.len() as f64;
    let total = t.mean(t.concat_scalars(&totals));
    let breakdown = LossBreakdown {
        recon_q: sums.recon_q / n,
        recon_a: sums.recon_a / n,
        kl_z: sums.kl_z / n,
        kl_y: sums.kl_y / n,
        penalty_z: sums.penalty_z / n,
        penalty_y: sums.penalty_y / n,
        total: t.scalar(total),
    };
    if !breakdown.total.is_finite() {
        return Err(VqagError::Numerical(format!(
            "non-finite loss {}: recon_q {}, recon_a {}, kl_z {}, kl_y {}",
            breakdown.total, breakdown.recon_q, breakdown.recon_a, breakdown.kl_z, breakdown.kl_y
        )));
    }
    Ok(BatchLoss { total, breakdown })
}

/// Evaluates the loss of a batch without touching gradients; dropout follows
/// `model.cfg.dropout`.
pub fn elbo_loss(
    model: &Model,
    batch: &[&TokenizedExample],
    c_a: f64,
    c_q: f64,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let dropout_seed: u64 = rng.gen();
    let ctx = if model.cfg.dropout > 0.0 {
        model.train_ctx(&tape, ChaCha20Rng::seed_from_u64(dropout_seed))
    } else {
        model.eval_ctx(&tape)
    };
    let mut eps = EpsSource::Rng(rng);
    Ok(elbo_on_tape(model, &ctx, batch, c_a, c_q, &mut eps)?.breakdown)
}

/// Adam with bias correction and optional global-norm clipping. Frozen
/// tensors never receive updates.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: HashMap<String, ArrayD<f64>>,
    v: HashMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn update(
        &mut self,
        store: &mut crate::params::ParameterStore,
        grads: &HashMap<String, ArrayD<f64>>,
        clip: Option<f64>,
    ) {
        self.t += 1;
        let scale = match clip {
            Some(max_norm) => {
                let norm: f64 = grads
                    .values()
                    .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        // parameter-store order keeps the update sequence deterministic
        let names: Vec<String> = store.trainable_names().map(|s| s.to_string()).collect();
        for name in names {
            let Some(grad) = grads.get(&name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let (beta1, beta2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let value = store.get_mut(&name);
            ndarray::Zip::from(value).and(m).and(v).and(grad).for_each(|w, m, v, &g| {
                let g = g * scale;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Trains `model` in place. Shuffled batches per epoch from a seeded rng;
/// one checkpoint per completed epoch when `out_dir` is given, plus the
/// initial parameters when `epochs == 0` and a `final.ckpt` copy otherwise.
/// On a non-finite loss, training halts with the parameters rolled back to
/// the last completed epoch.
pub fn train(
    model: &mut Model,
    tc: &TrainConfig,
    dataset: &[TokenizedExample],
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    assert!(!dataset.is_empty(), "empty training set");
    model.cfg.dropout = tc.dropout;
    let mut rng = ChaCha20Rng::seed_from_u64(tc.seed);
    let mut adam = Adam::new(tc.lr);
    let mut report =
        TrainReport { epochs: Vec::new(), step_totals: Vec::new(), checkpoints: Vec::new() };

    let write_ckpt = |model: &Model, name: &str, report: &mut TrainReport| -> Result<()> {
        if let Some(dir) = out_dir {
            let path = dir.join(name);
            model.save(&path)?;
            report.checkpoints.push(path);
        }
        Ok(())
    };

    if tc.epochs == 0 {
        write_ckpt(model, "epoch-000.ckpt", &mut report)?;
        return Ok(report);
    }

    let mut last_good = model.store.clone();
    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut sums = [0.0f64; 6]; // recon_q, recon_a, kl_z, kl_y, total, count
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&TokenizedExample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let tape = Tape::new();
            let dropout_seed: u64 = rng.gen();
            let ctx = if model.cfg.dropout > 0.0 {
                model.train_ctx(&tape, ChaCha20Rng::seed_from_u64(dropout_seed))
            } else {
                model.eval_ctx(&tape)
            };
            let mut eps = EpsSource::Rng(&mut rng);
            let batch_loss = match elbo_on_tape(model, &ctx, &batch, tc.c_a, tc.c_q, &mut eps) {
                Ok(bl) => bl,
                Err(e) => {
                    drop(ctx);
                    model.store = last_good;
                    return Err(VqagError::Numerical(format!(
                        "epoch {epoch}: {e}; parameters rolled back to last completed epoch"
                    )));
                }
            };
            let grads = tape.backward(batch_loss.total);
            let harvested = ctx.bound.harvest(&grads);
            drop(ctx);
            adam.update(&mut model.store, &harvested, tc.grad_clip);
            if let Some(bad) = model.store.first_non_finite() {
                let bad = bad.to_string();
                model.store = last_good;
                return Err(VqagError::Numerical(format!(
                    "epoch {epoch}: tensor {bad} became non-finite; parameters rolled back"
                )));
            }

            let b = &batch_loss.breakdown;
            let w = batch.len() as f64;
            sums[0] += b.recon_q * w;
            sums[1] += b.recon_a * w;
            sums[2] += b.kl_z * w;
            sums[3] += b.kl_y * w;
            sums[4] += b.total * w;
            sums[5] += w;
            report.step_totals.push(b.total);
        }

        let n = sums[5];
        report.epochs.push(EpochLog {
            epoch,
            recon_q: sums[0] / n,
            recon_a: sums[1] / n,
            kl_z: sums[2] / n,
            kl_y: sums[3] / n,
            total: sums[4] / n,
        });
        write_ckpt(model, &format!("epoch-{epoch:03}.ckpt"), &mut report)?;
        last_good = model.store.clone();
    }
    write_ckpt(model, "final.ckpt", &mut report)?;
    Ok(report)
}

/// Writes the per-epoch log as JSON-lines.
pub fn write_train_log(report: &TrainReport, path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in &report.epochs {
        out.push_str(&serde_json::to_string(e).expect("log serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| VqagError::Io { path: path.to_path_buf(), source })
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub checked_coords: usize,
    /// True when the loss sat within 1e-3 of a `|KL - C|` kink and the check
    /// was skipped as non-differentiable there.
    pub skipped_kink: bool,
}

/// Compares analytic gradients of the full loss against central finite
/// differences on every trainable tensor (coordinates sampled for tensors
/// with at least 10^4 entries). Noise draws are fixed; dropout is off.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-4)`, so tiny gradients are
/// judged by absolute difference at the 1e-8 level.
pub fn gradient_check(
    model: &mut Model,
    example: &TokenizedExample,
    c_a: f64,
    c_q: f64,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let saved_dropout = model.cfg.dropout;
    model.cfg.dropout = 0.0;
    let k = model.cfg.latent;
    let mut eps_rng = ChaCha20Rng::seed_from_u64(seed);
    let eps_z = draw_epsilon(k, &mut eps_rng);
    let eps_y = draw_epsilon(k, &mut eps_rng);

    // With noise fixed, the loss is a deterministic function of the
    // parameters.
    let loss_value = |model: &Model| -> Result<f64> {
        let tape = Tape::new();
        let ctx = model.eval_ctx(&tape);
        let mut eps = EpsSource::<ChaCha20Rng>::Fixed { eps_z: &eps_z, eps_y: &eps_y };
        Ok(elbo_on_tape(model, &ctx, &[example], c_a, c_q, &mut eps)?.breakdown.total)
    };

    // analytic gradients
    let (breakdown, analytic) = {
        let tape = Tape::new();
        let ctx = model.eval_ctx(&tape);
        let mut eps = EpsSource::<ChaCha20Rng>::Fixed { eps_z: &eps_z, eps_y: &eps_y };
        let bl = elbo_on_tape(model, &ctx, &[example], c_a, c_q, &mut eps)?;
        let grads = tape.backward(bl.total);
        (bl.breakdown, ctx.bound.harvest(&grads))
    };
    if (breakdown.kl_z - c_a).abs() < 1e-3 || (breakdown.kl_y - c_q).abs() < 1e-3 {
        model.cfg.dropout = saved_dropout;
        return Ok(GradCheckReport {
            max_rel_error: 0.0,
            worst_tensor: String::new(),
            checked_coords: 0,
            skipped_kink: true,
        });
    }

    let names: Vec<String> = model.store.trainable_names().map(|s| s.to_string()).collect();
    let mut coord_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0usize;
    for name in names {
        let len = model.store.get(&name).len();
        let coords: Vec<usize> = if len >= 10_000 {
            (0..64).map(|_| coord_rng.gen_range(0..len)).collect()
        } else {
            (0..len).collect()
        };
        let zero_grad = ArrayD::zeros(model.store.get(&name).raw_dim());
        let a_tensor = analytic.get(&name).unwrap_or(&zero_grad).clone();
        for idx in coords {
            let original = model.store.get(&name).as_slice().unwrap()[idx];
            model.store.get_mut(&name).as_slice_mut().unwrap()[idx] = original + h;
            let f_plus = loss_value(model)?;
            model.store.get_mut(&name).as_slice_mut().unwrap()[idx] = original - h;
            let f_minus = loss_value(model)?;
            model.store.get_mut(&name).as_slice_mut().unwrap()[idx] = original;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = a_tensor.as_slice().unwrap()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{idx}]");
            }
        }
    }
    model.cfg.dropout = saved_dropout;
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_tensor: worst,
        checked_coords: checked,
        skipped_kink: false,
    })
}
