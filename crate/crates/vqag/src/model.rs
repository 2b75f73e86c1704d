//! The assembled generative model: configuration, parameters, and vocabulary,
//! with forward passes built from the encoder, latent, and decoder modules.
//!
//! Heavier workflows compose these pieces: the training objective lives in
//! [`crate::objective`], prior-driven synthesis in [`crate::synthesis`], and
//! likelihood estimation in [`crate::likelihood`].

use ndarray::Array1;
use rand::{Rng, RngCore};

use crate::answer_decoder::{self, AnswerSpan, DecodeMode};
use crate::corpus::{ParagraphRecord, TokenizedExample, Vocabulary};
use crate::error::Result;
use crate::latent::{
    gaussian_params, kl_diag_gaussians, GaussianParams, LatentHead, LatentKind,
};
use crate::nn::{self, EncoderKind, ForwardCtx};
use crate::params::{ModelConfig, ParameterStore};
use crate::question_decoder::{self, GenerationStrategy};
use crate::tape::Tape;

/// A tokenized context ready for encoding, without any gold annotation.
#[derive(Debug, Clone)]
pub struct ContextInput {
    pub paragraph_id: String,
    pub ids: Vec<usize>,
    pub char_ids: Vec<Vec<usize>>,
    pub tokens: Vec<String>,
    /// Character offsets into the original paragraph text, when known.
    pub offsets: Vec<(usize, usize)>,
}

impl ContextInput {
    pub fn from_paragraph(
        rec: &ParagraphRecord,
        vocab: &Vocabulary,
        word_len: usize,
    ) -> Result<Self> {
        use crate::error::VqagError;
        let toks = crate::corpus::tokenize(&rec.context_text);
        if toks.is_empty() {
            return Err(VqagError::InvalidInput(format!("paragraph {}: empty context", rec.id)));
        }
        Ok(ContextInput {
            paragraph_id: rec.id.clone(),
            ids: toks.iter().map(|t| vocab.word_id(&t.surface)).collect(),
            char_ids: toks.iter().map(|t| vocab.char_ids(&t.surface, word_len)).collect(),
            tokens: toks.iter().map(|t| t.surface.clone()).collect(),
            offsets: toks.iter().map(|t| (t.char_start, t.char_end)).collect(),
        })
    }

    pub fn from_example(ex: &TokenizedExample) -> Self {
        ContextInput {
            paragraph_id: ex.paragraph_id.clone(),
            ids: ex.context_ids.clone(),
            char_ids: ex.context_char_ids.clone(),
            tokens: ex.context_tokens.clone(),
            offsets: ex.context_offsets.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn full_mask(&self) -> Vec<bool> {
        vec![true; self.len()]
    }
}

/// Posterior and prior Gaussians of both latents for one example.
#[derive(Debug, Clone)]
pub struct LatentParams {
    pub post_z: GaussianParams,
    pub prior_z: GaussianParams,
    pub post_y: GaussianParams,
    pub prior_y: GaussianParams,
}

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParameterStore,
    pub vocab: Vocabulary,
}

impl Model {
    pub fn new(cfg: ModelConfig, store: ParameterStore, vocab: Vocabulary) -> Self {
        assert_eq!(cfg.word_vocab, vocab.word_count(), "config/vocabulary size mismatch");
        assert_eq!(cfg.char_vocab, vocab.char_count(), "config/char vocabulary size mismatch");
        Model { cfg, store, vocab }
    }

    /// Fresh parameters for a configuration derived from `vocab` and `base`.
    pub fn init<R: Rng>(base: ModelConfig, vocab: Vocabulary, rng: &mut R) -> Self {
        let cfg = ModelConfig {
            word_vocab: vocab.word_count(),
            char_vocab: vocab.char_count(),
            ..base
        };
        let store = ParameterStore::init(&cfg, rng);
        Model { cfg, store, vocab }
    }

    pub fn eval_ctx<'a>(&'a self, tape: &'a Tape) -> ForwardCtx<'a> {
        ForwardCtx::eval(tape, &self.store, &self.cfg)
    }

    pub fn train_ctx<'a, R: RngCore + 'a>(&'a self, tape: &'a Tape, rng: R) -> ForwardCtx<'a> {
        ForwardCtx::train(tape, &self.store, &self.cfg, rng)
    }

    // ---- tape-level encoding ----

    pub fn encode_context_input(&self, ctx: &ForwardCtx, input: &ContextInput) -> nn::EncodedSequence {
        let embedded = nn::embed(ctx, &input.ids, &input.char_ids);
        nn::contextual_encode(ctx, embedded, EncoderKind::Context)
    }

    pub fn encode_context(&self, ctx: &ForwardCtx, ex: &TokenizedExample) -> nn::EncodedSequence {
        let embedded = nn::embed(ctx, &ex.context_ids, &ex.context_char_ids);
        nn::contextual_encode(ctx, embedded, EncoderKind::Context)
    }

    /// Encodes the answer tokens (a slice of the context) with the answer
    /// encoder.
    pub fn encode_answer(&self, ctx: &ForwardCtx, ex: &TokenizedExample) -> nn::EncodedSequence {
        let ids = &ex.context_ids[ex.answer_start..=ex.answer_end];
        let chars = &ex.context_char_ids[ex.answer_start..=ex.answer_end];
        let embedded = nn::embed(ctx, ids, chars);
        nn::contextual_encode(ctx, embedded, EncoderKind::Answer)
    }

    /// Encodes the question's inner tokens (without BOS/EOS) with the
    /// question encoder. Char ids are recomputed from the stored surfaces.
    pub fn encode_question(&self, ctx: &ForwardCtx, ex: &TokenizedExample) -> nn::EncodedSequence {
        let inner = &ex.question_ids[1..ex.question_ids.len() - 1];
        let chars: Vec<Vec<usize>> = ex
            .question_tokens
            .iter()
            .map(|w| self.vocab.char_ids(w, self.cfg.word_len))
            .collect();
        let embedded = nn::embed(ctx, inner, &chars);
        nn::contextual_encode(ctx, embedded, EncoderKind::Question)
    }

    // ---- plain-value diagnostics ----

    /// Posterior and prior Gaussian parameters for one gold example,
    /// evaluated without dropout.
    pub fn latent_params(&self, ex: &TokenizedExample) -> LatentParams {
        let tape = Tape::new();
        let ctx = self.eval_ctx(&tape);
        let h_c = crate::latent::to_array1(tape.value(self.encode_context(&ctx, ex).summary));
        let h_a = crate::latent::to_array1(tape.value(self.encode_answer(&ctx, ex).summary));
        let h_q = crate::latent::to_array1(tape.value(self.encode_question(&ctx, ex).summary));
        let clamp = self.cfg.logvar_clamp;
        LatentParams {
            post_z: gaussian_params(&[&h_c, &h_a], LatentHead::PostZ, &self.store, clamp),
            prior_z: gaussian_params(&[&h_c], LatentHead::PriorZ, &self.store, clamp),
            post_y: gaussian_params(&[&h_c, &h_q], LatentHead::PostY, &self.store, clamp),
            prior_y: gaussian_params(&[&h_c], LatentHead::PriorY, &self.store, clamp),
        }
    }

    /// Prior Gaussians for a bare context.
    pub fn prior_params(&self, input: &ContextInput) -> (GaussianParams, GaussianParams) {
        let tape = Tape::new();
        let ctx = self.eval_ctx(&tape);
        let h_c =
            crate::latent::to_array1(tape.value(self.encode_context_input(&ctx, input).summary));
        let clamp = self.cfg.logvar_clamp;
        (
            gaussian_params(&[&h_c], LatentHead::PriorZ, &self.store, clamp),
            gaussian_params(&[&h_c], LatentHead::PriorY, &self.store, clamp),
        )
    }

    /// Decodes one QA pair at fixed latent values: the span from `z`
    /// (greedy or ancestral), then the question from `y` (greedy), both
    /// without dropout.
    pub fn decode_at(
        &self,
        input: &ContextInput,
        z: &Array1<f64>,
        y: &Array1<f64>,
        span_mode: DecodeMode,
        question_strategy: GenerationStrategy,
        rng: &mut impl Rng,
    ) -> (AnswerSpan, Vec<String>) {
        let tape = Tape::new();
        let ctx = self.eval_ctx(&tape);
        let enc = self.encode_context_input(&ctx, input);
        let mask = input.full_mask();
        let z_var = tape.constant(z.clone().into_dyn());
        let y_var = tape.constant(y.clone().into_dyn());
        let span = answer_decoder::sample_answer(&ctx, enc.states, z_var, &mask, span_mode, rng);
        let h_ca = nn::answer_aware_encode(&ctx, enc.states, (span.start, span.end));
        let question = question_decoder::generate_question(
            &ctx,
            h_ca,
            y_var,
            question_strategy,
            self.cfg.max_question_len,
            rng,
            &self.vocab,
            &input.tokens,
            &mask,
        );
        (span, question)
    }

    /// Generates a question for a fixed gold answer span from a prior draw of
    /// `y` (the answer-aware question generation protocol).
    pub fn generate_question_for_span(
        &self,
        ex: &TokenizedExample,
        y: &Array1<f64>,
        strategy: GenerationStrategy,
        rng: &mut impl Rng,
    ) -> Vec<String> {
        let tape = Tape::new();
        let ctx = self.eval_ctx(&tape);
        let enc = self.encode_context(&ctx, ex);
        let h_ca = nn::answer_aware_encode(&ctx, enc.states, (ex.answer_start, ex.answer_end));
        let y_var = tape.constant(y.clone().into_dyn());
        question_decoder::generate_question(
            &ctx,
            h_ca,
            y_var,
            strategy,
            self.cfg.max_question_len,
            rng,
            &self.vocab,
            &ex.context_tokens,
            &vec![true; ex.context_len()],
        )
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.store.save(path, &self.cfg)
    }

    /// Loads parameters and configuration; the vocabulary comes from the
    /// dataset directory and must match the stored dimensions.
    pub fn load(path: &std::path::Path, vocab: Vocabulary) -> Result<Self> {
        let (store, cfg) = ParameterStore::load(path)?;
        if cfg.word_vocab != vocab.word_count() || cfg.char_vocab != vocab.char_count() {
            return Err(crate::error::VqagError::Checkpoint(format!(
                "vocabulary mismatch: checkpoint expects {} words / {} chars, got {} / {}",
                cfg.word_vocab,
                cfg.char_vocab,
                vocab.word_count(),
                vocab.char_count()
            )));
        }
        Ok(Model { cfg, store, vocab })
    }
}

/// Mean posterior-to-prior KL over a dataset: the conditional mutual
/// information proxy `I(Z;A|C)` (or `I(Y;Q|C)`), exact when the approximate
/// posterior equals the true posterior.
pub fn conditional_mi_estimate(
    model: &Model,
    examples: &[TokenizedExample],
    which: LatentKind,
) -> f64 {
    assert!(!examples.is_empty(), "conditional MI estimate needs at least one example");
    let total: f64 = examples
        .iter()
        .map(|ex| {
            let lp = model.latent_params(ex);
            match which {
                LatentKind::Z => kl_diag_gaussians(&lp.post_z, &lp.prior_z),
                LatentKind::Y => kl_diag_gaussians(&lp.post_y, &lp.prior_y),
            }
        })
        .sum();
    total / examples.len() as f64
}
