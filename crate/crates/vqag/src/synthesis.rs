//! Prior-driven QA-pair synthesis, quality filtering heuristics, latent
//! interpolation grids, and SQuAD-format export.
//!
//! Filtering keeps questions of 5..=20 words containing at least one
//! interrogative and no repeated n-gram, and answers of at most 10 words.
//! Accepted records export as SQuAD v1.1 JSON with character offsets
//! recomputed from token offsets, so the file round-trips through ingestion.

use std::collections::HashSet;
use std::path::Path;

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::answer_decoder::DecodeMode;
use crate::corpus::{detokenize, tokenize, ParagraphRecord};
use crate::error::{Result, VqagError};
use crate::latent::{draw_epsilon, reparameterize, LatentKind, SampleSource};
use crate::model::{ContextInput, Model};
use crate::question_decoder::GenerationStrategy;

/// A generated question-answer pair with provenance and filter flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QAPairRecord {
    pub paragraph_id: String,
    pub question_tokens: Vec<String>,
    /// Inclusive token indices into the paragraph's tokenization.
    pub answer_span: (usize, usize),
    /// Detokenized (lowercased) answer text.
    pub answer_text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y: Option<Vec<f64>>,
    pub passed_filters: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rejection_reason: Option<RejectionReason>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    TooShort,
    TooLong,
    AnswerTooLong,
    NoInterrogative,
    NgramRepetition,
}

/// The filtering heuristics' thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub q_len_min: usize,
    pub q_len_max: usize,
    pub a_len_max: usize,
    pub interrogatives: Vec<String>,
    pub ngram_rep_n: usize,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            q_len_min: 5,
            q_len_max: 20,
            a_len_max: 10,
            interrogatives: ["what", "how", "who", "whom", "whose", "which", "when", "where", "why"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            ngram_rep_n: 3,
        }
    }
}

impl FilterPolicy {
    fn validate(&self) {
        assert!(self.q_len_min < self.q_len_max, "q_len_min must be below q_len_max");
        assert!(self.q_len_min > 0 && self.a_len_max > 0 && self.ngram_rep_n > 0);
    }
}

/// True iff any n-gram occurs at least twice.
pub fn has_ngram_repetition(tokens: &[String], n: usize) -> bool {
    assert!(n >= 1, "n-gram order must be at least 1");
    if tokens.len() < n {
        return false;
    }
    let mut seen = HashSet::new();
    for i in 0..=tokens.len() - n {
        if !seen.insert(&tokens[i..i + n]) {
            return true;
        }
    }
    false
}

fn first_failed_rule(rec: &QAPairRecord, policy: &FilterPolicy) -> Option<RejectionReason> {
    let q_len = rec.question_tokens.len();
    if q_len < policy.q_len_min {
        return Some(RejectionReason::TooShort);
    }
    if q_len > policy.q_len_max {
        return Some(RejectionReason::TooLong);
    }
    let a_len = rec.answer_span.1 - rec.answer_span.0 + 1;
    if a_len > policy.a_len_max {
        return Some(RejectionReason::AnswerTooLong);
    }
    if !rec.question_tokens.iter().any(|t| policy.interrogatives.iter().any(|i| i == t)) {
        return Some(RejectionReason::NoInterrogative);
    }
    if has_ngram_repetition(&rec.question_tokens, policy.ngram_rep_n) {
        return Some(RejectionReason::NgramRepetition);
    }
    None
}

/// Flags every record with the first rule it fails, if any. Idempotent.
pub fn apply_filters(mut records: Vec<QAPairRecord>, policy: &FilterPolicy) -> Vec<QAPairRecord> {
    policy.validate();
    for rec in &mut records {
        let reason = first_failed_rule(rec, policy);
        rec.passed_filters = reason.is_none();
        rec.rejection_reason = reason;
    }
    records
}

/// Draws `n` QA pairs from the priors for one paragraph: fresh `(z, y)` per
/// draw, span decoded per `span_mode`, question decoded greedily.
pub fn generate_pairs(
    model: &Model,
    input: &ContextInput,
    n: usize,
    span_mode: DecodeMode,
    rng: &mut impl Rng,
) -> Vec<QAPairRecord> {
    let (prior_z, prior_y) = model.prior_params(input);
    let k = model.cfg.latent;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z = reparameterize(&prior_z, &draw_epsilon(k, rng), LatentKind::Z, SampleSource::Prior);
        let y = reparameterize(&prior_y, &draw_epsilon(k, rng), LatentKind::Y, SampleSource::Prior);
        let (span, question) =
            model.decode_at(input, &z.value, &y.value, span_mode, GenerationStrategy::Greedy, rng);
        let answer_text = detokenize(&input.tokens[span.start..=span.end]);
        out.push(QAPairRecord {
            paragraph_id: input.paragraph_id.clone(),
            question_tokens: question,
            answer_span: (span.start, span.end),
            answer_text,
            z: Some(z.value.to_vec()),
            y: Some(y.value.to_vec()),
            passed_filters: true,
            rejection_reason: None,
        });
    }
    out
}

fn lerp(a: &Array1<f64>, b: &Array1<f64>, t: f64) -> Array1<f64> {
    a * (1.0 - t) + &(b * t)
}

/// Decodes a `steps x steps` grid between the posterior means of two
/// examples sharing a context: rows vary `y`, columns vary `z`, each cell
/// decoded greedily. Errors if the contexts differ.
pub fn interpolate(
    model: &Model,
    example_a: &crate::corpus::TokenizedExample,
    example_b: &crate::corpus::TokenizedExample,
    steps: usize,
) -> Result<Vec<Vec<QAPairRecord>>> {
    assert!(steps >= 1, "steps must be at least 1");
    if example_a.context_ids != example_b.context_ids {
        return Err(VqagError::InvalidInput(format!(
            "interpolation requires a shared context ({} vs {})",
            example_a.qa_id, example_b.qa_id
        )));
    }
    let input = ContextInput::from_example(example_a);
    let lp_a = model.latent_params(example_a);
    let lp_b = model.latent_params(example_b);

    let mut grid = Vec::with_capacity(steps);
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
    use rand::SeedableRng;
    for yi in 0..steps {
        let ty = if steps == 1 { 0.0 } else { yi as f64 / (steps - 1) as f64 };
        let y = lerp(&lp_a.post_y.mu, &lp_b.post_y.mu, ty);
        let mut row = Vec::with_capacity(steps);
        for zi in 0..steps {
            let tz = if steps == 1 { 0.0 } else { zi as f64 / (steps - 1) as f64 };
            let z = lerp(&lp_a.post_z.mu, &lp_b.post_z.mu, tz);
            let (span, question) = model.decode_at(
                &input,
                &z,
                &y,
                DecodeMode::Greedy,
                GenerationStrategy::Greedy,
                &mut rng,
            );
            row.push(QAPairRecord {
                paragraph_id: input.paragraph_id.clone(),
                question_tokens: question,
                answer_span: (span.start, span.end),
                answer_text: detokenize(&input.tokens[span.start..=span.end]),
                z: Some(z.to_vec()),
                y: Some(y.to_vec()),
                passed_filters: true,
                rejection_reason: None,
            });
        }
        grid.push(row);
    }
    Ok(grid)
}

#[derive(Serialize)]
struct ExportAnswer<'a> {
    text: &'a str,
    answer_start: usize,
}

#[derive(Serialize)]
struct ExportQa<'a> {
    id: String,
    question: String,
    answers: Vec<ExportAnswer<'a>>,
}

#[derive(Serialize)]
struct ExportParagraph<'a> {
    context: &'a str,
    qas: Vec<ExportQa<'a>>,
}

#[derive(Serialize)]
struct ExportArticle<'a> {
    title: String,
    paragraphs: Vec<ExportParagraph<'a>>,
}

#[derive(Serialize)]
struct ExportFile<'a> {
    data: Vec<ExportArticle<'a>>,
}

/// Writes accepted records as SQuAD v1.1 JSON. Character offsets are
/// recomputed by re-tokenizing each paragraph, and answer text is sliced
/// from the original context so the file loads back cleanly. Duplicate
/// (question, answer-span) pairs within a paragraph are dropped, as are
/// records whose span no longer maps onto the tokenization (with a warning).
pub fn export_squad(
    records: &[QAPairRecord],
    paragraphs: &[ParagraphRecord],
    path: &Path,
) -> Result<()> {
    let mut articles = Vec::new();
    for para in paragraphs {
        let toks = tokenize(&para.context_text);
        let chars: Vec<char> = para.context_text.chars().collect();
        let mut seen: HashSet<(String, usize, usize)> = HashSet::new();
        let mut qas = Vec::new();
        for (i, rec) in records.iter().enumerate().filter(|(_, r)| r.paragraph_id == para.id) {
            if !rec.passed_filters {
                continue;
            }
            let (s, e) = rec.answer_span;
            if e >= toks.len() {
                log::warn!(
                    "{}: span ({s},{e}) outside tokenization of length {}; record dropped",
                    para.id,
                    toks.len()
                );
                continue;
            }
            let question = detokenize(&rec.question_tokens);
            if !seen.insert((question.clone(), s, e)) {
                continue; // duplicate pair for this paragraph
            }
            let char_start = toks[s].char_start;
            let char_end = toks[e].char_end;
            let answer_text: String = chars[char_start..char_end].iter().collect();
            qas.push((i, question, answer_text, char_start));
        }
        if qas.is_empty() {
            continue;
        }
        articles.push((para, qas));
    }

    // assemble with borrowed context strings
    let mut data = Vec::with_capacity(articles.len());
    let answer_texts: Vec<Vec<String>> =
        articles.iter().map(|(_, qas)| qas.iter().map(|(_, _, a, _)| a.clone()).collect()).collect();
    for ((para, qas), answers) in articles.iter().zip(answer_texts.iter()) {
        let qas: Vec<ExportQa> = qas
            .iter()
            .zip(answers.iter())
            .map(|((i, question, _, char_start), answer_text)| ExportQa {
                id: format!("{}-synth-{i}", para.id),
                question: question.clone(),
                answers: vec![ExportAnswer { text: answer_text, answer_start: *char_start }],
            })
            .collect();
        data.push(ExportArticle {
            title: para.id.clone(),
            paragraphs: vec![ExportParagraph { context: &para.context_text, qas }],
        });
    }

    let file = ExportFile { data };
    let json = serde_json::to_string_pretty(&file).expect("export serializes");
    std::fs::write(path, json).map_err(|source| VqagError::Io { path: path.to_path_buf(), source })
}

/// Writes the full record set (accepted and rejected) as a JSON-lines
/// provenance sidecar.
pub fn write_sidecar(records: &[QAPairRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| VqagError::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_example, EncodeOptions, QaAnnotation, Vocabulary};
    use crate::params::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|w| w.to_string()).collect()
    }

    fn record_with_tokens(question: &str, answer_len: usize) -> QAPairRecord {
        QAPairRecord {
            paragraph_id: "p".into(),
            question_tokens: toks(question),
            answer_span: (0, answer_len - 1),
            answer_text: "x".into(),
            z: None,
            y: None,
            passed_filters: true,
            rejection_reason: None,
        }
    }

    fn toy_paragraph() -> ParagraphRecord {
        ParagraphRecord {
            id: "p0".into(),
            context_text: "Alice likes bread and Bob visited Paris .".into(),
            qas: vec![
                QaAnnotation {
                    qa_id: "q0".into(),
                    question_text: "who likes bread ?".into(),
                    answer_text: "Alice".into(),
                    answer_char_start: 0,
                },
                QaAnnotation {
                    qa_id: "q1".into(),
                    question_text: "where did bob go ?".into(),
                    answer_text: "Paris".into(),
                    answer_char_start: 34,
                },
            ],
        }
    }

    fn toy_model(seed: u64) -> (Model, ParagraphRecord) {
        let rec = toy_paragraph();
        let vocab = Vocabulary::build([&rec], 100);
        let base = ModelConfig {
            d_word: 8,
            d_char: 4,
            char_filters: 4,
            char_filter_width: 3,
            word_len: 6,
            hidden: 6,
            latent: 3,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (Model::init(base, vocab, &mut rng), rec)
    }

    #[test]
    fn ngram_repetition_examples() {
        assert!(has_ngram_repetition(&toks("a b a b"), 2));
        assert!(!has_ngram_repetition(&toks("a b c"), 2));
        assert!(!has_ngram_repetition(&toks("a"), 2));
    }

    #[test]
    fn ngram_repetition_matches_brute_force_on_random_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let len = rng.gen_range(0..12);
            let tokens: Vec<String> =
                (0..len).map(|_| format!("w{}", rng.gen_range(0..4))).collect();
            let n = rng.gen_range(1..4);
            // oracle: count n-gram multiset
            let mut counts = std::collections::HashMap::new();
            if tokens.len() >= n {
                for i in 0..=tokens.len() - n {
                    *counts.entry(tokens[i..i + n].join(" ")).or_insert(0) += 1;
                }
            }
            let expected = counts.values().any(|&c| c >= 2);
            assert_eq!(has_ngram_repetition(&tokens, n), expected, "tokens {tokens:?} n {n}");
        }
    }

    #[test]
    fn filter_boundary_lengths() {
        let policy = FilterPolicy::default();
        let cases = [
            ("what a b ?", Some(RejectionReason::TooShort)), // 4 words
            ("what a b c ?", None),                          // 5 words
            (
                "what a b c d e f g h i j k l m n o p q r ?", // 20 words
                None,
            ),
            (
                "what a b c d e f g h i j k l m n o p q r s ?", // 21 words
                Some(RejectionReason::TooLong),
            ),
        ];
        for (q, expected) in cases {
            let rec = record_with_tokens(q, 1);
            let out = apply_filters(vec![rec], &policy);
            assert_eq!(out[0].rejection_reason, expected, "question {q:?}");
            assert_eq!(out[0].passed_filters, expected.is_none());
        }
    }

    #[test]
    fn filter_answer_length_boundary() {
        let policy = FilterPolicy::default();
        let ok = apply_filters(vec![record_with_tokens("what a b c ?", 10)], &policy);
        assert!(ok[0].passed_filters);
        let too_long = apply_filters(vec![record_with_tokens("what a b c ?", 11)], &policy);
        assert_eq!(too_long[0].rejection_reason, Some(RejectionReason::AnswerTooLong));
    }

    #[test]
    fn filter_requires_interrogative() {
        let policy = FilterPolicy::default();
        let out = apply_filters(vec![record_with_tokens("name the capital city .", 1)], &policy);
        assert_eq!(out[0].rejection_reason, Some(RejectionReason::NoInterrogative));
        let ok = apply_filters(vec![record_with_tokens("what is the capital of france ?", 1)], &policy);
        assert!(ok[0].passed_filters);
    }

    #[test]
    fn filter_rejects_trigram_repetition() {
        let policy = FilterPolicy::default();
        let out = apply_filters(vec![record_with_tokens("what is is what is is what", 1)], &policy);
        assert_eq!(out[0].rejection_reason, Some(RejectionReason::NgramRepetition));
    }

    #[test]
    fn filtering_is_idempotent() {
        let policy = FilterPolicy::default();
        let records = vec![
            record_with_tokens("what a b ?", 1),
            record_with_tokens("what is the capital of france ?", 1),
            record_with_tokens("no question here .", 1),
        ];
        let once = apply_filters(records, &policy);
        let twice = apply_filters(once.clone(), &policy);
        for (a, b) in once.iter().zip(twice.iter()) {
            assert_eq!(a.passed_filters, b.passed_filters);
            assert_eq!(a.rejection_reason, b.rejection_reason);
        }
    }

    #[test]
    fn rejection_reason_set_iff_failed() {
        let policy = FilterPolicy::default();
        let records = vec![
            record_with_tokens("what a b ?", 1),
            record_with_tokens("what is the capital of france ?", 1),
        ];
        for rec in apply_filters(records, &policy) {
            assert_eq!(rec.passed_filters, rec.rejection_reason.is_none());
        }
    }

    #[test]
    fn generate_zero_pairs_is_empty() {
        let (model, rec) = toy_model(0);
        let input = ContextInput::from_paragraph(&rec, &model.vocab, model.cfg.word_len).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(generate_pairs(&model, &input, 0, DecodeMode::Ancestral, &mut rng).is_empty());
    }

    #[test]
    fn generated_spans_satisfy_invariants() {
        let (model, rec) = toy_model(1);
        let input = ContextInput::from_paragraph(&rec, &model.vocab, model.cfg.word_len).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for pair in generate_pairs(&model, &input, 30, DecodeMode::Ancestral, &mut rng) {
            let (s, e) = pair.answer_span;
            assert!(s <= e && e < input.len());
            assert_eq!(pair.answer_text, detokenize(&input.tokens[s..=e]));
            assert!(pair.question_tokens.len() <= model.cfg.max_question_len);
        }
    }

    #[test]
    fn interpolation_corners_match_endpoint_decodes() {
        let (model, rec) = toy_model(3);
        let opts = EncodeOptions { word_len: model.cfg.word_len, max_context_len: None };
        let ex_a = encode_example(&rec, &rec.qas[0], &model.vocab, opts).unwrap();
        let ex_b = encode_example(&rec, &rec.qas[1], &model.vocab, opts).unwrap();
        let grid = interpolate(&model, &ex_a, &ex_b, 4).unwrap();
        assert_eq!(grid.len(), 4);
        assert_eq!(grid[0].len(), 4);

        let input = ContextInput::from_example(&ex_a);
        let lp_a = model.latent_params(&ex_a);
        let lp_b = model.latent_params(&ex_b);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (span_a, q_a) = model.decode_at(
            &input, &lp_a.post_z.mu, &lp_a.post_y.mu,
            DecodeMode::Greedy, GenerationStrategy::Greedy, &mut rng,
        );
        let (span_b, q_b) = model.decode_at(
            &input, &lp_b.post_z.mu, &lp_b.post_y.mu,
            DecodeMode::Greedy, GenerationStrategy::Greedy, &mut rng,
        );
        assert_eq!(grid[0][0].answer_span, (span_a.start, span_a.end));
        assert_eq!(grid[0][0].question_tokens, q_a);
        assert_eq!(grid[3][3].answer_span, (span_b.start, span_b.end));
        assert_eq!(grid[3][3].question_tokens, q_b);
    }

    #[test]
    fn interpolation_single_step_is_first_example() {
        let (model, rec) = toy_model(4);
        let opts = EncodeOptions { word_len: model.cfg.word_len, max_context_len: None };
        let ex_a = encode_example(&rec, &rec.qas[0], &model.vocab, opts).unwrap();
        let ex_b = encode_example(&rec, &rec.qas[1], &model.vocab, opts).unwrap();
        let grid = interpolate(&model, &ex_a, &ex_b, 1).unwrap();
        assert_eq!(grid.len(), 1);
        assert_eq!(grid[0].len(), 1);
        let lp_a = model.latent_params(&ex_a);
        assert_eq!(grid[0][0].z.as_ref().unwrap(), &lp_a.post_z.mu.to_vec());
    }

    #[test]
    fn interpolation_rejects_different_contexts() {
        let (model, rec) = toy_model(5);
        let other = ParagraphRecord {
            id: "p1".into(),
            context_text: "Bob likes bread .".into(),
            qas: vec![QaAnnotation {
                qa_id: "qx".into(),
                question_text: "who likes bread ?".into(),
                answer_text: "Bob".into(),
                answer_char_start: 0,
            }],
        };
        let opts = EncodeOptions { word_len: model.cfg.word_len, max_context_len: None };
        let ex_a = encode_example(&rec, &rec.qas[0], &model.vocab, opts).unwrap();
        let ex_b = encode_example(&other, &other.qas[0], &model.vocab, opts).unwrap();
        assert!(interpolate(&model, &ex_a, &ex_b, 3).is_err());
    }

    #[test]
    fn export_round_trips_through_loader() {
        let rec = toy_paragraph();
        let records = vec![
            QAPairRecord {
                paragraph_id: "p0".into(),
                question_tokens: toks("who likes bread ?"),
                answer_span: (0, 0),
                answer_text: "alice".into(),
                z: None,
                y: None,
                passed_filters: true,
                rejection_reason: None,
            },
            // duplicate of the first; must be dropped
            QAPairRecord {
                paragraph_id: "p0".into(),
                question_tokens: toks("who likes bread ?"),
                answer_span: (0, 0),
                answer_text: "alice".into(),
                z: None,
                y: None,
                passed_filters: true,
                rejection_reason: None,
            },
            // rejected record; must not be exported
            QAPairRecord {
                paragraph_id: "p0".into(),
                question_tokens: toks("short ?"),
                answer_span: (2, 2),
                answer_text: "bread".into(),
                z: None,
                y: None,
                passed_filters: false,
                rejection_reason: Some(RejectionReason::TooShort),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.json");
        export_squad(&records, &[rec], &path).unwrap();

        let loaded = crate::corpus::load_squad_json(&path).unwrap();
        assert_eq!(loaded.report.qa_pairs, 1);
        assert_eq!(loaded.report.skipped_qas, 0, "offsets must validate");
        let qa = &loaded.records[0].qas[0];
        assert_eq!(qa.question_text, "who likes bread ?");
        assert_eq!(qa.answer_text, "Alice");
        assert_eq!(qa.answer_char_start, 0);

        // exported answers re-align to the same token span
        let toks2 = tokenize(&loaded.records[0].context_text);
        let (s, e) =
            crate::corpus::align_answer_span(&toks2, qa.answer_char_start, &qa.answer_text)
                .unwrap();
        assert_eq!((s, e), (0, 0));
    }

    #[test]
    fn export_empty_is_valid_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        export_squad(&[], &[], &path).unwrap();
        let loaded = crate::corpus::load_squad_json(&path).unwrap();
        assert!(loaded.records.is_empty());
    }

    #[test]
    fn sidecar_serializes_rejection_reasons() {
        let policy = FilterPolicy::default();
        let records = apply_filters(vec![record_with_tokens("what a b ?", 1)], &policy);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sidecar.jsonl");
        write_sidecar(&records, &path).unwrap();
        let raw = std::fs::read_to_string(&path).unwrap();
        assert!(raw.contains("\"rejection_reason\":\"too_short\""));
    }
}
