//! Shared differentiable building blocks: word + character-CNN embeddings,
//! bidirectional LSTM encoders, and the answer-aware context encoder.

use std::cell::RefCell;

use ndarray::ArrayD;
use rand::RngCore;

use crate::params::{BoundParams, ModelConfig, ParameterStore};
use crate::tape::{Tape, Var};

/// Per-step states `H` (`[L, 2h]`) and the concatenated final states of both
/// directions `h` (`[2h]`).
#[derive(Debug, Clone, Copy)]
pub struct EncodedSequence {
    pub states: Var,
    pub summary: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Context,
    Question,
    Answer,
}

impl EncoderKind {
    fn prefix(self) -> &'static str {
        match self {
            EncoderKind::Context => "enc_ctx",
            EncoderKind::Question => "enc_q",
            EncoderKind::Answer => "enc_ans",
        }
    }
}

/// One forward pass: parameters bound to a tape plus dropout state.
/// Dropout masks are drawn from the supplied rng (training) or skipped
/// entirely (evaluation and generation).
pub struct ForwardCtx<'a> {
    pub bound: BoundParams<'a>,
    pub cfg: &'a ModelConfig,
    dropout_rng: Option<RefCell<Box<dyn RngCore + 'a>>>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval(tape: &'a Tape, store: &'a ParameterStore, cfg: &'a ModelConfig) -> Self {
        ForwardCtx { bound: BoundParams::new(tape, store), cfg, dropout_rng: None }
    }

    pub fn train<R: RngCore + 'a>(
        tape: &'a Tape,
        store: &'a ParameterStore,
        cfg: &'a ModelConfig,
        rng: R,
    ) -> Self {
        let dropout_rng: Option<RefCell<Box<dyn RngCore + 'a>>> = if cfg.dropout > 0.0 {
            Some(RefCell::new(Box::new(rng)))
        } else {
            None
        };
        ForwardCtx { bound: BoundParams::new(tape, store), cfg, dropout_rng }
    }

    pub fn tape(&self) -> &'a Tape {
        self.bound.tape()
    }

    pub fn var(&self, name: &str) -> Var {
        self.bound.var(name)
    }

    /// Inverted dropout; identity when disabled.
    pub fn dropout(&self, v: Var) -> Var {
        let Some(rng) = &self.dropout_rng else { return v };
        let t = self.tape();
        let rate = self.cfg.dropout;
        let keep = 1.0 - rate;
        let shape = t.shape(v);
        let mut rng = rng.borrow_mut();
        let mask = ArrayD::from_shape_fn(ndarray::IxDyn(&shape), |_| {
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            if u < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        t.mul(v, t.constant(mask))
    }
}

/// Embeds a token sequence: row `i` concatenates the word vector and the
/// max-pooled char-CNN feature of token `i`. Output is `[L, d_word + filters]`.
pub fn embed(ctx: &ForwardCtx, token_ids: &[usize], char_ids: &[Vec<usize>]) -> Var {
    assert!(!token_ids.is_empty(), "embed: empty sequence");
    assert_eq!(token_ids.len(), char_ids.len(), "embed: id/char length mismatch");
    let t = ctx.tape();
    let word_part = t.gather_rows(ctx.var("embed.word"), token_ids);

    let width = ctx.cfg.char_filter_width;
    let word_len = ctx.cfg.word_len;
    assert!(word_len >= width, "word_len must be at least the filter width");
    let n_pos = word_len - width + 1;
    let filters = ctx.var("charcnn.filters");
    let filter_bias = ctx.var("charcnn.b");
    let char_table = ctx.var("embed.char");

    let mut char_feats = Vec::with_capacity(token_ids.len());
    for ids in char_ids {
        assert_eq!(ids.len(), word_len, "char ids must be padded to word_len");
        // im2col: window p covers chars p..p+width
        let mut windowed = Vec::with_capacity(n_pos * width);
        for p in 0..n_pos {
            windowed.extend_from_slice(&ids[p..p + width]);
        }
        let gathered = t.gather_rows(char_table, &windowed); // [n_pos*width, d_char]
        let cols = t.reshape(gathered, &[n_pos, width * ctx.cfg.d_char]);
        let conv = t.matmul(cols, filters); // [n_pos, filters]
        let conv = t.add_row_broadcast(conv, filter_bias);
        let act = t.tanh(conv);
        char_feats.push(t.max_rows(act)); // [filters]
    }
    let char_part = t.stack_rows(&char_feats);
    t.concat_cols(word_part, char_part)
}

fn lstm_step(
    t: &Tape,
    w_ih: Var,
    w_hh: Var,
    b: Var,
    x: Var,
    h: Var,
    c: Var,
    hidden: usize,
) -> (Var, Var) {
    let gates = t.add(t.add(t.matvec(w_ih, x), t.matvec(w_hh, h)), b);
    let i = t.sigmoid(t.slice1(gates, 0, hidden));
    let f = t.sigmoid(t.slice1(gates, hidden, 2 * hidden));
    let g = t.tanh(t.slice1(gates, 2 * hidden, 3 * hidden));
    let o = t.sigmoid(t.slice1(gates, 3 * hidden, 4 * hidden));
    let c_new = t.add(t.mul(f, c), t.mul(i, g));
    let h_new = t.mul(o, t.tanh(c_new));
    (h_new, c_new)
}

/// Single unidirectional LSTM pass over the rows of `input`, starting from
/// zero states; returns the per-step hidden states.
fn lstm_pass(ctx: &ForwardCtx, input: Var, prefix: &str, reverse: bool) -> Vec<Var> {
    let t = ctx.tape();
    let hidden = ctx.cfg.hidden;
    let w_ih = ctx.var(&format!("{prefix}.w_ih"));
    let w_hh = ctx.var(&format!("{prefix}.w_hh"));
    let b = ctx.var(&format!("{prefix}.b"));
    let len = t.shape(input)[0];
    let zero = t.constant(ArrayD::zeros(ndarray::IxDyn(&[hidden])));
    let (mut h, mut c) = (zero, zero);
    let mut states = vec![zero; len];
    let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
    for i in order {
        let x = t.row(input, i);
        let (h_new, c_new) = lstm_step(t, w_ih, w_hh, b, x, h, c, hidden);
        h = h_new;
        c = c_new;
        states[i] = h;
    }
    states
}

fn bilstm(ctx: &ForwardCtx, input: Var, prefix: &str) -> EncodedSequence {
    let t = ctx.tape();
    let len = t.shape(input)[0];
    assert!(len > 0, "bilstm: empty sequence");
    let fwd = lstm_pass(ctx, input, &format!("{prefix}.fwd"), false);
    let bwd = lstm_pass(ctx, input, &format!("{prefix}.bwd"), true);
    let rows: Vec<Var> = (0..len).map(|i| t.concat(&[fwd[i], bwd[i]])).collect();
    let states = ctx.dropout(t.stack_rows(&rows));
    // final states: forward direction ends at the last row, backward at row 0
    let summary = ctx.dropout(t.concat(&[fwd[len - 1], bwd[0]]));
    EncodedSequence { states, summary }
}

/// Contextual BiLSTM encoder for embedded context, question, or answer rows.
pub fn contextual_encode(ctx: &ForwardCtx, embedded: Var, which: EncoderKind) -> EncodedSequence {
    bilstm(ctx, embedded, which.prefix())
}

/// Answer-aware context encoder: a BiLSTM over `[H^C_j ; 1{j=start} ; 1{j=end}]`.
pub fn answer_aware_encode(ctx: &ForwardCtx, h_c: Var, span: (usize, usize)) -> Var {
    let t = ctx.tape();
    let len = t.shape(h_c)[0];
    let (start, end) = span;
    assert!(start <= end && end < len, "answer_aware_encode: invalid span ({start},{end}) for length {len}");
    let mut indicators = ndarray::Array2::<f64>::zeros((len, 2));
    indicators[[start, 0]] = 1.0;
    indicators[[end, 1]] = 1.0;
    let input = t.concat_cols(h_c, t.constant(indicators.into_dyn()));
    bilstm(ctx, input, "enc_ca").states
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParameterStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            word_vocab: 10,
            char_vocab: 9,
            d_word: 6,
            d_char: 4,
            char_filters: 5,
            char_filter_width: 3,
            word_len: 6,
            hidden: 7,
            latent: 3,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn setup(seed: u64) -> (ModelConfig, ParameterStore) {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ParameterStore::init(&cfg, &mut rng);
        (cfg, store)
    }

    fn char_ids(n: usize, len: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| (0..len).map(|j| (i + j) % 9).collect()).collect()
    }

    #[test]
    fn embed_single_token_shape() {
        let (cfg, store) = setup(0);
        let tape = Tape::new();
        let ctx = ForwardCtx::eval(&tape, &store, &cfg);
        let e = embed(&ctx, &[3], &char_ids(1, 6));
        assert_eq!(tape.shape(e), vec![1, cfg.d_word + cfg.char_filters]);
    }

    #[test]
    fn embed_is_deterministic_per_token() {
        let (cfg, store) = setup(1);
        let tape = Tape::new();
        let ctx = ForwardCtx::eval(&tape, &store, &cfg);
        let ids = char_ids(1, 6);
        let e = embed(&ctx, &[5, 5], &[ids[0].clone(), ids[0].clone()]);
        let m = tape.value(e);
        for j in 0..cfg.d_emb() {
            assert_eq!(m[[0, j]], m[[1, j]]);
        }
    }

    #[test]
    fn embed_pad_token_is_its_embedding_row() {
        let (cfg, store) = setup(2);
        let tape = Tape::new();
        let ctx = ForwardCtx::eval(&tape, &store, &cfg);
        let e = embed(&ctx, &[crate::corpus::PAD_ID], &char_ids(1, 6));
        let m = tape.value(e);
        let word = store.get("embed.word");
        for j in 0..cfg.d_word {
            assert_eq!(m[[0, j]], word[[crate::corpus::PAD_ID, j]]);
        }
    }

    #[test]
    fn contextual_encode_shapes() {
        let (cfg, store) = setup(3);
        let tape = Tape::new();
        let ctx = ForwardCtx::eval(&tape, &store, &cfg);
        let e = embed(&ctx, &[1, 2, 3, 4, 5], &char_ids(5, 6));
        let enc = contextual_encode(&ctx, e, EncoderKind::Context);
        assert_eq!(tape.shape(enc.states), vec![5, 2 * cfg.hidden]);
        assert_eq!(tape.shape(enc.summary), vec![2 * cfg.hidden]);
    }

    #[test]
    fn reversing_input_changes_summary() {
        for seed in 0..20 {
            let (cfg, store) = setup(seed);
            let tape = Tape::new();
            let ctx = ForwardCtx::eval(&tape, &store, &cfg);
            let fwd = embed(&ctx, &[1, 2, 3, 4], &char_ids(4, 6));
            let rev = embed(&ctx, &[4, 3, 2, 1], &char_ids(4, 6));
            let h_fwd = tape.value(contextual_encode(&ctx, fwd, EncoderKind::Context).summary);
            let h_rev = tape.value(contextual_encode(&ctx, rev, EncoderKind::Context).summary);
            assert!(
                h_fwd.iter().zip(h_rev.iter()).any(|(a, b)| (a - b).abs() > 1e-12),
                "seed {seed}: summary insensitive to direction"
            );
        }
    }

    #[test]
    fn single_token_row_equals_summary() {
        let (cfg, store) = setup(4);
        let tape = Tape::new();
        let ctx = ForwardCtx::eval(&tape, &store, &cfg);
        let e = embed(&ctx, &[2], &char_ids(1, 6));
        let enc = contextual_encode(&ctx, e, EncoderKind::Context);
        let states = tape.value(enc.states);
        let summary = tape.value(enc.summary);
        for j in 0..2 * cfg.hidden {
            assert_eq!(states[[0, j]], summary[j]);
        }
    }

    #[test]
    fn answer_aware_distinguishes_spans() {
        let (cfg, store) = setup(5);
        let tape = Tape::new();
        let ctx = ForwardCtx::eval(&tape, &store, &cfg);
        let e = embed(&ctx, &[1, 2, 3, 4, 5], &char_ids(5, 6));
        let enc = contextual_encode(&ctx, e, EncoderKind::Context);
        let a = tape.value(answer_aware_encode(&ctx, enc.states, (0, 1)));
        let b = tape.value(answer_aware_encode(&ctx, enc.states, (2, 4)));
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-12));
        let _ = cfg;
    }

    #[test]
    #[should_panic(expected = "invalid span")]
    fn answer_aware_rejects_bad_span() {
        let (cfg, store) = setup(6);
        let tape = Tape::new();
        let ctx = ForwardCtx::eval(&tape, &store, &cfg);
        let e = embed(&ctx, &[1, 2], &char_ids(2, 6));
        let enc = contextual_encode(&ctx, e, EncoderKind::Context);
        let _ = answer_aware_encode(&ctx, enc.states, (1, 2));
        let _ = cfg;
    }

    #[test]
    fn dropout_disabled_at_eval_is_identity() {
        let (mut cfg, store) = setup(7);
        cfg.dropout = 0.5;
        let tape = Tape::new();
        let ctx = ForwardCtx::eval(&tape, &store, &cfg);
        let v = tape.constant(ndarray::arr1(&[1.0, 2.0, 3.0]).into_dyn());
        assert_eq!(ctx.dropout(v), v);
    }

    #[test]
    fn dropout_in_training_scales_kept_entries() {
        let (mut cfg, store) = setup(8);
        cfg.dropout = 0.5;
        let tape = Tape::new();
        let rng = ChaCha8Rng::seed_from_u64(9);
        let ctx = ForwardCtx::train(&tape, &store, &cfg, rng);
        let v = tape.constant(ndarray::Array1::from_elem(64, 1.0).into_dyn());
        let d = tape.value(ctx.dropout(v));
        assert!(d.iter().all(|&x| x == 0.0 || (x - 2.0).abs() < 1e-12));
        assert!(d.iter().any(|&x| x == 0.0), "some entries should drop at rate 0.5");
        assert!(d.iter().any(|&x| x != 0.0), "some entries should survive");
    }

    #[test]
    fn gradients_reach_encoder_weights() {
        let (cfg, store) = setup(9);
        let tape = Tape::new();
        let ctx = ForwardCtx::eval(&tape, &store, &cfg);
        let e = embed(&ctx, &[1, 2, 3], &char_ids(3, 6));
        let enc = contextual_encode(&ctx, e, EncoderKind::Context);
        let loss = tape.sum(enc.summary);
        let grads = tape.backward(loss);
        let harvested = ctx.bound.harvest(&grads);
        assert!(harvested.contains_key("enc_ctx.fwd.w_ih"));
        assert!(harvested.contains_key("embed.char"));
        assert!(!harvested.contains_key("embed.word"), "frozen matrix must not collect gradient");
        let _ = cfg;
    }
}
