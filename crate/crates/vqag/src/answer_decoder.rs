//! Two-step pointer-network decoder over the encoded context: step one emits
//! a distribution over start positions, step two — fed the context encoding
//! at the committed start — emits the end distribution.
//!
//! End positions are masked to `start <= end < start + max_answer_len`, so a
//! returned span always satisfies the ordering invariant instead of being
//! rejected after the fact. Training teacher-forces step two on the gold
//! start.

use ndarray::Array1;
use rand::Rng;

use crate::error::{Result, VqagError};
use crate::latent::to_array1;
use crate::nn::ForwardCtx;
use crate::tape::Var;

/// Distributions of the two decoding steps for one committed start, as plain
/// values. Masked positions carry exactly zero.
#[derive(Debug, Clone)]
pub struct SpanDistribution {
    pub p_start: Array1<f64>,
    pub p_end_given_start: Array1<f64>,
}

/// An extracted answer span (inclusive token indices) with its log
/// probability under the two-step factorization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnswerSpan {
    pub start: usize,
    pub end: usize,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Ancestral,
}

/// Decoder LSTM state on the tape.
#[derive(Debug, Clone, Copy)]
pub struct PointerState {
    pub h: Var,
    pub c: Var,
}

/// `h0 = W1 z + b1`, zero cell state.
pub fn init_state(ctx: &ForwardCtx, z: Var) -> PointerState {
    let t = ctx.tape();
    let h = t.add(t.matvec(ctx.var("ans_dec.init.w"), z), ctx.var("ans_dec.init.b"));
    let c = t.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[ctx.cfg.hidden])));
    PointerState { h, c }
}

fn lstm_step(ctx: &ForwardCtx, state: PointerState, input: Var) -> PointerState {
    let t = ctx.tape();
    let h = ctx.cfg.hidden;
    let gates = t.add(
        t.add(
            t.matvec(ctx.var("ans_dec.lstm.w_ih"), input),
            t.matvec(ctx.var("ans_dec.lstm.w_hh"), state.h),
        ),
        ctx.var("ans_dec.lstm.b"),
    );
    let i = t.sigmoid(t.slice1(gates, 0, h));
    let f = t.sigmoid(t.slice1(gates, h, 2 * h));
    let g = t.tanh(t.slice1(gates, 2 * h, 3 * h));
    let o = t.sigmoid(t.slice1(gates, 3 * h, 4 * h));
    let c_new = t.add(t.mul(f, state.c), t.mul(i, g));
    let h_new = t.mul(o, t.tanh(c_new));
    PointerState { h: h_new, c: c_new }
}

/// One pointer step: advances the LSTM with `input` and returns the masked
/// softmax of the additive-attention logits over the context positions,
/// together with the new state.
pub fn pointer_step(
    ctx: &ForwardCtx,
    state: PointerState,
    input: Var,
    h_c: Var,
    mask: &[bool],
) -> (Var, PointerState) {
    let t = ctx.tape();
    assert_eq!(t.shape(h_c)[0], mask.len(), "mask length mismatch");
    let new_state = lstm_step(ctx, state, input);
    let query = ctx.dropout(new_state.h);
    let enc_proj = t.matmul_nt(h_c, ctx.var("ans_dec.att.w_enc")); // [L, att]
    let dec_proj = t.add(t.matvec(ctx.var("ans_dec.att.w_dec"), query), ctx.var("ans_dec.att.b"));
    let scores = t.tanh(t.add_row_broadcast(enc_proj, dec_proj));
    let logits = t.matvec(scores, ctx.var("ans_dec.att.v")); // [L]
    let probs = t.masked_softmax(logits, mask);
    (probs, new_state)
}

/// Mask for step two given a committed start.
fn end_mask(mask: &[bool], start: usize, max_answer_len: usize) -> Vec<bool> {
    mask.iter()
        .enumerate()
        .map(|(j, &m)| m && j >= start && j < start + max_answer_len)
        .collect()
}

/// Both step distributions on the tape, teacher-forced on `start`.
pub fn span_distribution_var(
    ctx: &ForwardCtx,
    h_c: Var,
    z: Var,
    start: usize,
    mask: &[bool],
) -> (Var, Var) {
    let t = ctx.tape();
    let state = init_state(ctx, z);
    let (p_start, state) = pointer_step(ctx, state, ctx.var("ans_dec.bos"), h_c, mask);
    let step2_input = t.row(h_c, start);
    let mask2 = end_mask(mask, start, ctx.cfg.max_answer_len);
    let (p_end, _) = pointer_step(ctx, state, step2_input, h_c, &mask2);
    (p_start, p_end)
}

/// Plain-value [`SpanDistribution`] for a committed start.
pub fn span_distribution(
    ctx: &ForwardCtx,
    h_c: Var,
    z: Var,
    start: usize,
    mask: &[bool],
) -> SpanDistribution {
    let t = ctx.tape();
    let (p_start, p_end) = span_distribution_var(ctx, h_c, z, start, mask);
    SpanDistribution {
        p_start: to_array1(t.value(p_start)),
        p_end_given_start: to_array1(t.value(p_end)),
    }
}

/// `log p(start) + log p(end | start)` on the tape. Errors if either gold
/// position carries zero probability (a masked position), which indicates
/// the span violates the decoder's length constraint.
pub fn answer_log_prob(
    ctx: &ForwardCtx,
    h_c: Var,
    z: Var,
    span: (usize, usize),
    mask: &[bool],
) -> Result<Var> {
    let t = ctx.tape();
    let (start, end) = span;
    let len = t.shape(h_c)[0];
    assert!(start <= end && end < len, "invalid span ({start},{end}) for length {len}");
    let (p_start, p_end) = span_distribution_var(ctx, h_c, z, start, mask);
    let ps = t.value(p_start)[start];
    let pe = t.value(p_end)[end];
    if ps <= 0.0 || pe <= 0.0 {
        return Err(VqagError::Numerical(format!(
            "answer span ({start},{end}) has zero probability under the end mask \
             (max_answer_len {})",
            ctx.cfg.max_answer_len
        )));
    }
    let lp = t.add(t.ln(t.index(p_start, start)), t.ln(t.index(p_end, end)));
    Ok(lp)
}

fn pick(probs: &Array1<f64>, mode: DecodeMode, rng: &mut impl Rng) -> usize {
    match mode {
        DecodeMode::Greedy => {
            let mut best = 0;
            for i in 1..probs.len() {
                if probs[i] > probs[best] {
                    best = i;
                }
            }
            best
        }
        DecodeMode::Ancestral => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut last_positive = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    last_positive = i;
                    acc += p;
                    if u < acc {
                        return i;
                    }
                }
            }
            last_positive // guard against rounding at acc ~ 1.0
        }
    }
}

/// Decodes one answer span: start, then end with the ordering/length mask
/// applied. Greedy takes the argmax each step; ancestral draws categorically.
pub fn sample_answer(
    ctx: &ForwardCtx,
    h_c: Var,
    z: Var,
    mask: &[bool],
    mode: DecodeMode,
    rng: &mut impl Rng,
) -> AnswerSpan {
    let t = ctx.tape();
    let state = init_state(ctx, z);
    let (p_start, state) = pointer_step(ctx, state, ctx.var("ans_dec.bos"), h_c, mask);
    let p_start = to_array1(t.value(p_start));
    let start = pick(&p_start, mode, rng);
    let step2_input = t.row(h_c, start);
    let mask2 = end_mask(mask, start, ctx.cfg.max_answer_len);
    let (p_end, _) = pointer_step(ctx, state, step2_input, h_c, &mask2);
    let p_end = to_array1(t.value(p_end));
    let end = pick(&p_end, mode, rng);
    AnswerSpan { start, end, log_prob: p_start[start].ln() + p_end[end].ln() }
}
