//! LSTM question decoder with additive attention over the answer-aware
//! context, a copy mechanism, and a switching gate mixing the vocabulary and
//! copy distributions.
//!
//! The output projection is tied to the frozen word-embedding matrix (plus a
//! trainable bias). A step's token probability follows the mixture
//! `p_s * P_vocab(w) + (1 - p_s) * sum_{j: c_j = w} P_copy(j)`, where context
//! matching is by surface so out-of-vocabulary words score through the copy
//! path alone.

use ndarray::Array1;
use rand::Rng;

use crate::corpus::{Vocabulary, BOS_ID, EOS_ID, UNK_ID};
use crate::error::{Result, VqagError};
use crate::latent::to_array1;
use crate::nn::ForwardCtx;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct QuestionState {
    pub h: Var,
    pub c: Var,
}

/// One decode step on the tape: vocabulary distribution, copy distribution,
/// generation gate, and the advanced LSTM state.
#[derive(Debug, Clone, Copy)]
pub struct DecoderStepOutput {
    pub p_vocab: Var,
    pub p_copy: Var,
    /// The switching probability `p_s` multiplying the vocabulary side.
    pub p_gen: Var,
    pub state: QuestionState,
}

/// Plain-value snapshot of one step's distributions.
#[derive(Debug, Clone)]
pub struct StepDistribution {
    pub p_vocab: Array1<f64>,
    pub p_copy: Array1<f64>,
    pub p_gen: f64,
}

/// `h0 = W4 y + b3`, zero cell state.
pub fn init_question_state(ctx: &ForwardCtx, y: Var) -> QuestionState {
    let t = ctx.tape();
    let h = t.add(t.matvec(ctx.var("q_dec.init.w"), y), ctx.var("q_dec.init.b"));
    let c = t.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[ctx.cfg.hidden])));
    QuestionState { h, c }
}

fn input_embedding(ctx: &ForwardCtx, token_id: usize) -> Var {
    let t = ctx.tape();
    if token_id == BOS_ID {
        ctx.var("q_dec.bos")
    } else {
        let rows = t.gather_rows(ctx.var("embed.word"), &[token_id]);
        t.row(rows, 0)
    }
}

fn lstm_step(ctx: &ForwardCtx, state: QuestionState, input: Var) -> QuestionState {
    let t = ctx.tape();
    let h = ctx.cfg.hidden;
    let gates = t.add(
        t.add(
            t.matvec(ctx.var("q_dec.lstm.w_ih"), input),
            t.matvec(ctx.var("q_dec.lstm.w_hh"), state.h),
        ),
        ctx.var("q_dec.lstm.b"),
    );
    let i = t.sigmoid(t.slice1(gates, 0, h));
    let f = t.sigmoid(t.slice1(gates, h, 2 * h));
    let g = t.tanh(t.slice1(gates, 2 * h, 3 * h));
    let o = t.sigmoid(t.slice1(gates, 3 * h, 4 * h));
    let c_new = t.add(t.mul(f, state.c), t.mul(i, g));
    let h_new = t.mul(o, t.tanh(c_new));
    QuestionState { h: h_new, c: c_new }
}

fn additive_attention(
    ctx: &ForwardCtx,
    query: Var,
    h_ca: Var,
    mask: &[bool],
    w_dec: &str,
    w_enc: &str,
    b: &str,
    v: &str,
) -> Var {
    let t = ctx.tape();
    let enc_proj = t.matmul_nt(h_ca, ctx.var(w_enc)); // [L, att]
    let dec_proj = t.add(t.matvec(ctx.var(w_dec), query), ctx.var(b));
    let scores = t.tanh(t.add_row_broadcast(enc_proj, dec_proj));
    let logits = t.matvec(scores, ctx.var(v));
    t.masked_softmax(logits, mask)
}

/// Advances the decoder one step given the previous token id.
pub fn decode_step(
    ctx: &ForwardCtx,
    state: QuestionState,
    prev_token_id: usize,
    h_ca: Var,
    mask: &[bool],
) -> DecoderStepOutput {
    let t = ctx.tape();
    assert_eq!(t.shape(h_ca)[0], mask.len(), "mask length mismatch");
    let new_state = lstm_step(ctx, state, input_embedding(ctx, prev_token_id));
    let query = ctx.dropout(new_state.h);

    // attention context and merged feature
    let a_att = additive_attention(
        ctx, query, h_ca, mask, "q_dec.att.w_dec", "q_dec.att.w_enc", "q_dec.att.b", "q_dec.att.v",
    );
    let att_row = t.reshape(a_att, &[1, mask.len()]);
    let context = t.row(t.matmul(att_row, h_ca), 0); // [2h]
    let context = ctx.dropout(context);
    let merged = t.concat(&[context, query]); // [3h]
    let feature = t.tanh(t.add(t.matvec(ctx.var("q_dec.merge.w"), merged), ctx.var("q_dec.merge.b")));

    // vocabulary distribution through the tied output layer
    let logits = t.add(t.matvec(ctx.var("embed.word"), feature), ctx.var("q_dec.out.b"));
    let p_vocab = t.masked_softmax(logits, &vec![true; ctx.cfg.word_vocab]);

    // copy distribution
    let p_copy = additive_attention(
        ctx, query, h_ca, mask, "q_dec.copy.w_dec", "q_dec.copy.w_enc", "q_dec.copy.b",
        "q_dec.copy.v",
    );

    // switching probability
    let gate_logit = t.index(t.matvec(ctx.var("q_dec.gate.w"), query), 0);
    let p_gen = t.sigmoid(gate_logit);

    DecoderStepOutput { p_vocab, p_copy, p_gen, state: new_state }
}

impl DecoderStepOutput {
    pub fn values(&self, t: &Tape) -> StepDistribution {
        StepDistribution {
            p_vocab: to_array1(t.value(self.p_vocab)),
            p_copy: to_array1(t.value(self.p_copy)),
            p_gen: t.scalar(self.p_gen),
        }
    }
}

/// Context positions whose surface equals the token's surface.
fn copy_positions(surface: &str, context_surfaces: &[String]) -> Vec<usize> {
    context_surfaces
        .iter()
        .enumerate()
        .filter(|(_, s)| s.as_str() == surface)
        .map(|(j, _)| j)
        .collect()
}

/// Mixture probability of one target token on the tape.
///
/// In-vocabulary tokens mix both paths; an out-of-vocabulary token scores
/// through the copy path when its surface occurs in the context, otherwise
/// through the vocabulary UNK entry.
pub fn mixture_token_prob_var(
    t: &Tape,
    out: &DecoderStepOutput,
    token_id: usize,
    token_surface: Option<&str>,
    context_surfaces: &[String],
) -> Var {
    let positions = token_surface.map(|s| copy_positions(s, context_surfaces)).unwrap_or_default();
    let gen_side = t.mul(out.p_gen, t.index(out.p_vocab, token_id));
    if positions.is_empty() {
        return gen_side;
    }
    let copy_mass = t.sum_at(out.p_copy, &positions);
    let copy_side = t.mul(t.affine(out.p_gen, -1.0, 1.0), copy_mass);
    if token_id == UNK_ID {
        copy_side
    } else {
        t.add(gen_side, copy_side)
    }
}

/// Plain-value counterpart of [`mixture_token_prob_var`].
pub fn mixture_token_prob(
    step: &StepDistribution,
    token_id: usize,
    token_surface: Option<&str>,
    context_surfaces: &[String],
) -> f64 {
    let positions = token_surface.map(|s| copy_positions(s, context_surfaces)).unwrap_or_default();
    let copy_mass: f64 = positions.iter().map(|&j| step.p_copy[j]).sum();
    if positions.is_empty() {
        return step.p_gen * step.p_vocab[token_id];
    }
    if token_id == UNK_ID {
        (1.0 - step.p_gen) * copy_mass
    } else {
        step.p_gen * step.p_vocab[token_id] + (1.0 - step.p_gen) * copy_mass
    }
}

/// The full output distribution of one step over vocabulary words plus
/// context-only surfaces, in deterministic order (vocabulary ids first, then
/// out-of-vocabulary context surfaces by first occurrence).
pub fn extended_candidates(
    step: &StepDistribution,
    vocab: &Vocabulary,
    context_surfaces: &[String],
) -> Vec<(String, f64)> {
    let mut copy_by_surface: Vec<(&str, f64)> = Vec::new();
    for (j, s) in context_surfaces.iter().enumerate() {
        match copy_by_surface.iter_mut().find(|(k, _)| *k == s.as_str()) {
            Some((_, m)) => *m += step.p_copy[j],
            None => copy_by_surface.push((s.as_str(), step.p_copy[j])),
        }
    }
    let mut out: Vec<(String, f64)> = Vec::with_capacity(vocab.word_count() + 4);
    for id in 0..vocab.word_count() {
        let word = vocab.word(id);
        let mut p = step.p_gen * step.p_vocab[id];
        if id != UNK_ID {
            if let Some((_, m)) = copy_by_surface.iter().find(|(k, _)| *k == word) {
                p += (1.0 - step.p_gen) * m;
            }
        }
        out.push((word.to_string(), p));
    }
    for (surface, mass) in copy_by_surface {
        if !vocab.contains(surface) {
            out.push((surface.to_string(), (1.0 - step.p_gen) * mass));
        }
    }
    out
}

/// Teacher-forced log probability of a BOS/EOS-bracketed question.
///
/// `question_surfaces` holds the surfaces of the inner tokens (no BOS/EOS)
/// for copy matching. Errors if any step's mixture probability is not
/// positive, which would indicate a masking bug.
pub fn question_log_prob(
    ctx: &ForwardCtx,
    h_ca: Var,
    y: Var,
    question_ids: &[usize],
    question_surfaces: &[String],
    context_surfaces: &[String],
    mask: &[bool],
) -> Result<Var> {
    let t = ctx.tape();
    assert!(question_ids.len() >= 2, "question must be BOS/EOS bracketed");
    assert_eq!(question_ids[0], BOS_ID, "question must start with BOS");
    assert_eq!(*question_ids.last().unwrap(), EOS_ID, "question must end with EOS");
    assert_eq!(
        question_surfaces.len(),
        question_ids.len() - 2,
        "one surface per inner token"
    );

    let mut state = init_question_state(ctx, y);
    let mut total = t.constant_scalar(0.0);
    for step_idx in 1..question_ids.len() {
        let prev = question_ids[step_idx - 1];
        let out = decode_step(ctx, state, prev, h_ca, mask);
        state = out.state;
        let target_id = question_ids[step_idx];
        let target_surface = if step_idx < question_ids.len() - 1 {
            Some(question_surfaces[step_idx - 1].as_str())
        } else {
            None // EOS scores through the vocabulary path only
        };
        let prob = mixture_token_prob_var(t, &out, target_id, target_surface, context_surfaces);
        let value = t.scalar(prob);
        if value <= 0.0 {
            return Err(VqagError::Numerical(format!(
                "step {step_idx}: target token probability {value} is not positive"
            )));
        }
        total = t.add(total, t.ln(prob));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerationStrategy {
    Greedy,
    Ancestral,
}

/// Decodes a question until EOS or `max_len` tokens. Copy-selected tokens
/// surface the context word, so out-of-vocabulary words can appear in the
/// output; the following step feeds UNK for them.
pub fn generate_question(
    ctx: &ForwardCtx,
    h_ca: Var,
    y: Var,
    strategy: GenerationStrategy,
    max_len: usize,
    rng: &mut impl Rng,
    vocab: &Vocabulary,
    context_surfaces: &[String],
    mask: &[bool],
) -> Vec<String> {
    let t = ctx.tape();
    let mut state = init_question_state(ctx, y);
    let mut prev = BOS_ID;
    let mut tokens = Vec::new();
    let eos_surface = vocab.word(EOS_ID).to_string();
    while tokens.len() < max_len {
        let out = decode_step(ctx, state, prev, h_ca, mask);
        state = out.state;
        let step = out.values(t);
        let candidates = extended_candidates(&step, vocab, context_surfaces);
        let chosen = match strategy {
            GenerationStrategy::Greedy => {
                let mut best = 0;
                for i in 1..candidates.len() {
                    if candidates[i].1 > candidates[best].1 {
                        best = i;
                    }
                }
                best
            }
            GenerationStrategy::Ancestral => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = candidates.len() - 1;
                for (i, (_, p)) in candidates.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
        };
        let surface = candidates[chosen].0.clone();
        if surface == eos_surface {
            break;
        }
        prev = vocab.word_id(&surface);
        tokens.push(surface);
    }
    tokens
}
