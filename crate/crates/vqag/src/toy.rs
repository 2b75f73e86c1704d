//! Templated toy corpus for desk-scale verification runs.
//!
//! Contexts follow "NAME likes FOOD and NAME visited PLACE ." (8 tokens),
//! each carrying four QA pairs that target a different span, so a single
//! context maps one-to-many onto answers and questions. The whole corpus
//! stays within a 50-word vocabulary and 12-token contexts, which makes
//! capacity-controlled training observable within a few hundred steps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::corpus::{ParagraphRecord, QaAnnotation};
use crate::objective::TrainConfig;
use crate::params::ModelConfig;

const NAMES: [&str; 8] = ["alice", "bob", "carol", "david", "emma", "frank", "grace", "henry"];
const FOODS: [&str; 6] = ["bread", "rice", "soup", "cake", "tea", "corn"];
const PLACES: [&str; 6] = ["paris", "tokyo", "cairo", "oslo", "lima", "rome"];

/// Train and held-out paragraph records, each with four QA pairs.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub train: Vec<ParagraphRecord>,
    pub held_out: Vec<ParagraphRecord>,
}

fn build_record(idx: usize, name1: &str, food: &str, name2: &str, place: &str) -> ParagraphRecord {
    let context = format!("{name1} likes {food} and {name2} visited {place} .");
    let pos = |needle: &str| -> usize {
        // positions are unique by construction (name1 != name2, distinct pools)
        let byte = context.find(needle).expect("template word present");
        context[..byte].chars().count()
    };
    let id = format!("toy-{idx}");
    let qas = vec![
        QaAnnotation {
            qa_id: format!("{id}-who-likes"),
            question_text: format!("who likes {food} ?"),
            answer_text: name1.to_string(),
            answer_char_start: 0,
        },
        QaAnnotation {
            qa_id: format!("{id}-what-like"),
            question_text: format!("what does {name1} like ?"),
            answer_text: food.to_string(),
            answer_char_start: pos(food),
        },
        QaAnnotation {
            qa_id: format!("{id}-who-visited"),
            question_text: format!("who visited {place} ?"),
            answer_text: name2.to_string(),
            answer_char_start: pos(name2),
        },
        QaAnnotation {
            qa_id: format!("{id}-where-go"),
            question_text: format!("where did {name2} go ?"),
            answer_text: place.to_string(),
            answer_char_start: pos(place),
        },
    ];
    ParagraphRecord { id, context_text: context, qas }
}

/// Generates `n_train` + `n_held_out` distinct contexts (four QA pairs each)
/// from a seeded rng. The two names within a context always differ, so every
/// answer string occurs exactly once in its context.
pub fn generate(n_train: usize, n_held_out: usize, seed: u64) -> ToyCorpus {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut combos: Vec<(usize, usize, usize, usize)> = Vec::new();
    for n1 in 0..NAMES.len() {
        for f in 0..FOODS.len() {
            for n2 in 0..NAMES.len() {
                if n1 == n2 {
                    continue;
                }
                for p in 0..PLACES.len() {
                    combos.push((n1, f, n2, p));
                }
            }
        }
    }
    combos.shuffle(&mut rng);
    let total = n_train + n_held_out;
    assert!(total <= combos.len(), "requested more contexts than distinct templates");
    let records: Vec<ParagraphRecord> = combos[..total]
        .iter()
        .enumerate()
        .map(|(i, &(n1, f, n2, p))| build_record(i, NAMES[n1], FOODS[f], NAMES[n2], PLACES[p]))
        .collect();
    let (train, held) = records.split_at(n_train);
    ToyCorpus { train: train.to_vec(), held_out: held.to_vec() }
}

/// The standard verification corpus: 50 train contexts (200 QA pairs) and 13
/// held-out contexts (52 QA pairs).
pub fn standard_corpus(seed: u64) -> ToyCorpus {
    generate(50, 13, seed)
}

/// A model sized for the toy corpus: it trains in seconds while keeping the
/// full architecture (char CNN, four BiLSTMs, both decoders) in play.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d_word: 32,
        d_char: 8,
        char_filters: 16,
        char_filter_width: 3,
        word_len: 8,
        hidden: 64,
        latent: 16,
        dropout: 0.2,
        max_answer_len: 30,
        max_question_len: 20,
        ..ModelConfig::default()
    }
}

/// Training settings for the toy runs; only the capacity targets vary.
pub fn toy_train_config(c_a: f64, c_q: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 0.001,
        batch_size: 8,
        epochs,
        dropout: 0.2,
        c_a,
        c_q,
        seed: 1234,
        latent_dim: 16,
        hidden: 64,
        grad_clip: Some(5.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_corpus, tokenize, EncodeOptions, Vocabulary};

    #[test]
    fn standard_corpus_sizes() {
        let corpus = standard_corpus(7);
        assert_eq!(corpus.train.len(), 50);
        assert_eq!(corpus.held_out.len(), 13);
        assert_eq!(corpus.train.iter().map(|r| r.qas.len()).sum::<usize>(), 200);
    }

    #[test]
    fn contexts_fit_twelve_tokens_and_vocab_fits_fifty() {
        let corpus = standard_corpus(8);
        for rec in corpus.train.iter().chain(&corpus.held_out) {
            assert!(tokenize(&rec.context_text).len() <= 12, "context too long: {}", rec.context_text);
        }
        let vocab = Vocabulary::build(corpus.train.iter().chain(&corpus.held_out), 50);
        assert!(vocab.word_count() <= 50 + 4, "vocabulary too large: {}", vocab.word_count());
    }

    #[test]
    fn all_examples_encode_without_skips() {
        let corpus = standard_corpus(9);
        let vocab = Vocabulary::build(corpus.train.iter(), 50);
        let opts = EncodeOptions { word_len: 8, max_context_len: None };
        let (examples, skipped) = encode_corpus(&corpus.train, &vocab, opts);
        assert_eq!(skipped, 0);
        assert_eq!(examples.len(), 200);
        for ex in &examples {
            assert!(ex.answer_start <= ex.answer_end && ex.answer_end < ex.context_len());
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = standard_corpus(10);
        let b = standard_corpus(10);
        for (ra, rb) in a.train.iter().zip(b.train.iter()) {
            assert_eq!(ra.context_text, rb.context_text);
        }
        let c = standard_corpus(11);
        assert!(
            a.train.iter().zip(c.train.iter()).any(|(x, y)| x.context_text != y.context_text),
            "different seeds should differ"
        );
    }

    #[test]
    fn answer_offsets_validate_against_context() {
        let corpus = standard_corpus(12);
        for rec in &corpus.train {
            for qa in &rec.qas {
                let got: String = rec
                    .context_text
                    .chars()
                    .skip(qa.answer_char_start)
                    .take(qa.answer_text.chars().count())
                    .collect();
                assert_eq!(got, qa.answer_text, "offset mismatch in {}", rec.id);
            }
        }
    }
}
