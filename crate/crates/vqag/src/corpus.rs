//! Dataset ingestion: SQuAD-format loading, tokenization, vocabulary
//! construction, and conversion of raw records into index-space examples.
//!
//! Offsets are in characters (not bytes) throughout, matching the convention
//! of the SQuAD `answer_start` field.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VqagError};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "⇒", "<eos>"];

pub const CHAR_PAD_ID: usize = 0;
pub const CHAR_UNK_ID: usize = 1;

/// One paragraph with its question-answer annotations, still at text level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParagraphRecord {
    pub id: String,
    pub context_text: String,
    pub qas: Vec<QaAnnotation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaAnnotation {
    pub qa_id: String,
    pub question_text: String,
    pub answer_text: String,
    pub answer_char_start: usize,
}

/// A token with its surface form (lowercased) and character offsets into the
/// original text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub char_start: usize,
    pub char_end: usize,
}

/// Counts reported by [`load_squad_json`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub paragraphs: usize,
    pub qa_pairs: usize,
    pub skipped_qas: usize,
}

#[derive(Debug)]
pub struct LoadedCorpus {
    pub records: Vec<ParagraphRecord>,
    pub report: LoadReport,
}

// SQuAD v1.1 wire format.
#[derive(Debug, Serialize, Deserialize)]
struct SquadFile {
    data: Vec<SquadArticle>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadArticle {
    #[serde(default)]
    title: Option<String>,
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQa>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadQa {
    #[serde(default)]
    id: Option<String>,
    question: String,
    answers: Vec<SquadAnswer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadAnswer {
    text: String,
    answer_start: usize,
}

fn char_slice(text: &str, start: usize, len: usize) -> String {
    text.chars().skip(start).take(len).collect()
}

/// Loads a SQuAD v1.1 JSON file into paragraph records.
///
/// Every question keeps only its first answer annotation. A question whose
/// `answer_start` does not point at its answer text is skipped with a warning
/// and counted in the report.
pub fn load_squad_json(path: &Path) -> Result<LoadedCorpus> {
    let raw = fs::read_to_string(path).map_err(|source| VqagError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parsed: SquadFile = serde_json::from_str(&raw).map_err(|e| VqagError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;

    let mut records = Vec::new();
    let mut report = LoadReport::default();
    for (ai, article) in parsed.data.into_iter().enumerate() {
        let title = article.title.unwrap_or_else(|| format!("article{ai}"));
        for (pi, para) in article.paragraphs.into_iter().enumerate() {
            let para_id = format!("{title}#{pi}");
            let mut qas = Vec::new();
            for (qi, qa) in para.qas.into_iter().enumerate() {
                let qa_id = qa.id.unwrap_or_else(|| format!("{para_id}#{qi}"));
                let Some(answer) = qa.answers.into_iter().next() else {
                    log::warn!("{qa_id}: no answer annotation; skipped");
                    report.skipped_qas += 1;
                    continue;
                };
                let expected = char_slice(&para.context, answer.answer_start, answer.text.chars().count());
                if expected != answer.text {
                    log::warn!(
                        "{qa_id}: answer_start {} does not match answer text; skipped",
                        answer.answer_start
                    );
                    report.skipped_qas += 1;
                    continue;
                }
                report.qa_pairs += 1;
                qas.push(QaAnnotation {
                    qa_id,
                    question_text: qa.question,
                    answer_text: answer.text,
                    answer_char_start: answer.answer_start,
                });
            }
            report.paragraphs += 1;
            records.push(ParagraphRecord {
                id: para_id,
                context_text: para.context,
                qas,
            });
        }
    }
    Ok(LoadedCorpus { records, report })
}

/// Splits text into lowercased word and punctuation tokens with character
/// offsets into the original string.
///
/// Alphanumeric runs form words; any other non-whitespace character is its
/// own token, except an apostrophe between word characters, which starts a
/// clitic token ("beyoncé's" -> "beyoncé", "'s").
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut start: Option<usize> = None;

    let flush = |tokens: &mut Vec<Token>, chars: &[char], start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            let surface: String = chars[s..end].iter().collect::<String>().to_lowercase();
            tokens.push(Token { surface, char_start: s, char_end: end });
        }
    };

    let mut i = 0;
    while i < chars.len() {
        let ch = chars[i];
        if ch.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if ch.is_whitespace() {
            flush(&mut tokens, &chars, &mut start, i);
        } else if ch == '\''
            && start.is_some()
            && i + 1 < chars.len()
            && chars[i + 1].is_alphanumeric()
        {
            // clitic: close the word, reopen at the apostrophe
            flush(&mut tokens, &chars, &mut start, i);
            start = Some(i);
        } else {
            flush(&mut tokens, &chars, &mut start, i);
            let surface: String = chars[i..i + 1].iter().collect::<String>().to_lowercase();
            tokens.push(Token { surface, char_start: i, char_end: i + 1 });
        }
        i += 1;
    }
    flush(&mut tokens, &chars, &mut start, chars.len());
    tokens
}

/// Joins token surfaces with single spaces.
pub fn detokenize(surfaces: &[String]) -> String {
    surfaces.join(" ")
}

/// Maps a character-offset answer onto the smallest inclusive token window
/// containing it.
pub fn align_answer_span(
    context_tokens: &[Token],
    answer_char_start: usize,
    answer_text: &str,
) -> Result<(usize, usize)> {
    let ans_len = answer_text.chars().count();
    let ans_end = answer_char_start + ans_len; // exclusive
    let mut first = None;
    let mut last = None;
    for (i, tok) in context_tokens.iter().enumerate() {
        if tok.char_start < ans_end && tok.char_end > answer_char_start {
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
        }
    }
    match (first, last) {
        (Some(s), Some(e)) => Ok((s, e)),
        _ => Err(VqagError::Alignment {
            record: format!("answer at char {answer_char_start}"),
            message: format!("offset covers no token (answer {answer_text:?})"),
        }),
    }
}

/// Word and character vocabularies with dense, 0-based ids. Specials occupy
/// the lowest word ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    word_to_id: HashMap<String, usize>,
    id_to_word: Vec<String>,
    char_to_id: HashMap<char, usize>,
    id_to_char: Vec<char>,
}

impl Vocabulary {
    /// Ranks words by corpus frequency (ties broken by first occurrence) and
    /// keeps the `word_cap` most frequent, after the four specials.
    /// The character vocabulary holds every character seen.
    pub fn build<'a, I>(records: I, word_cap: usize) -> Self
    where
        I: IntoIterator<Item = &'a ParagraphRecord>,
    {
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new(); // word -> (freq, first_seen)
        let mut chars_seen: Vec<char> = Vec::new();
        let mut char_set: HashMap<char, ()> = HashMap::new();
        let mut order = 0usize;
        let mut count_text = |text: &str| {
            for tok in tokenize(text) {
                let entry = counts.entry(tok.surface.clone()).or_insert_with(|| {
                    order += 1;
                    (0, order)
                });
                entry.0 += 1;
                for ch in tok.surface.chars() {
                    if char_set.insert(ch, ()).is_none() {
                        chars_seen.push(ch);
                    }
                }
            }
        };
        for rec in records {
            count_text(&rec.context_text);
            for qa in &rec.qas {
                count_text(&qa.question_text);
            }
        }

        let mut ranked: Vec<(String, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));

        let mut id_to_word: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for (word, _) in ranked.into_iter().take(word_cap) {
            id_to_word.push(word);
        }
        let word_to_id = id_to_word
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();

        // char ids 0/1 reserved for pad/unk
        let mut id_to_char = vec!['\u{0}', '\u{1}'];
        id_to_char.extend(chars_seen);
        let char_to_id = id_to_char
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, &c)| (c, i))
            .collect();

        Vocabulary { word_to_id, id_to_word, char_to_id, id_to_char }
    }

    pub fn word_count(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn char_count(&self) -> usize {
        self.id_to_char.len()
    }

    pub fn word_id(&self, surface: &str) -> usize {
        self.word_to_id.get(surface).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.word_to_id.contains_key(surface)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.id_to_word[id]
    }

    pub fn char_id(&self, ch: char) -> usize {
        self.char_to_id.get(&ch).copied().unwrap_or(CHAR_UNK_ID)
    }

    /// Character ids of a word, padded or truncated to `word_len`.
    pub fn char_ids(&self, surface: &str, word_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = surface.chars().take(word_len).map(|c| self.char_id(c)).collect();
        ids.resize(word_len, CHAR_PAD_ID);
        ids
    }

    pub fn write_tsv(&self, words_path: &Path, chars_path: &Path) -> Result<()> {
        let io_err = |path: &Path| {
            let p = path.to_path_buf();
            move |source| VqagError::Io { path: p.clone(), source }
        };
        let mut out = String::new();
        for (i, w) in self.id_to_word.iter().enumerate() {
            out.push_str(&format!("{w}\t{i}\n"));
        }
        fs::write(words_path, out).map_err(io_err(words_path))?;
        let mut out = String::new();
        for (i, c) in self.id_to_char.iter().enumerate().skip(2) {
            out.push_str(&format!("{c}\t{i}\n"));
        }
        fs::write(chars_path, out).map_err(io_err(chars_path))?;
        Ok(())
    }

    pub fn read_tsv(words_path: &Path, chars_path: &Path) -> Result<Self> {
        let parse = |path: &Path| -> Result<Vec<(String, usize)>> {
            let raw = fs::read_to_string(path).map_err(|source| VqagError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let mut entries = Vec::new();
            for (ln, line) in raw.lines().enumerate() {
                if line.is_empty() {
                    continue;
                }
                let (word, id) = line.rsplit_once('\t').ok_or_else(|| VqagError::Parse {
                    path: path.to_path_buf(),
                    message: format!("line {}: expected word<TAB>id", ln + 1),
                })?;
                let id: usize = id.parse().map_err(|_| VqagError::Parse {
                    path: path.to_path_buf(),
                    message: format!("line {}: bad id {id:?}", ln + 1),
                })?;
                entries.push((word.to_string(), id));
            }
            Ok(entries)
        };

        let word_entries = parse(words_path)?;
        let mut id_to_word = vec![String::new(); word_entries.len()];
        for (w, id) in word_entries {
            if id >= id_to_word.len() {
                return Err(VqagError::Parse {
                    path: words_path.to_path_buf(),
                    message: format!("non-dense word id {id}"),
                });
            }
            id_to_word[id] = w;
        }
        let word_to_id = id_to_word.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();

        let char_entries = parse(chars_path)?;
        let n_chars = 2 + char_entries.len();
        let mut id_to_char = vec!['\u{0}'; n_chars];
        id_to_char[1] = '\u{1}';
        for (s, id) in char_entries {
            let ch = s.chars().next().ok_or_else(|| VqagError::Parse {
                path: chars_path.to_path_buf(),
                message: "empty char entry".into(),
            })?;
            if !(2..n_chars).contains(&id) {
                return Err(VqagError::Parse {
                    path: chars_path.to_path_buf(),
                    message: format!("non-dense char id {id}"),
                });
            }
            id_to_char[id] = ch;
        }
        let char_to_id = id_to_char.iter().enumerate().skip(2).map(|(i, &c)| (c, i)).collect();
        Ok(Vocabulary { word_to_id, id_to_word, char_to_id, id_to_char })
    }
}

/// One (context, question, answer-span) triple in index space.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TokenizedExample {
    pub paragraph_id: String,
    pub qa_id: String,
    pub context_ids: Vec<usize>,
    pub context_char_ids: Vec<Vec<usize>>,
    /// Lowercased surfaces, kept for copy scoring and detokenization.
    pub context_tokens: Vec<String>,
    /// Character offsets of each context token into the original paragraph.
    pub context_offsets: Vec<(usize, usize)>,
    /// Bracketed by BOS/EOS ids.
    pub question_ids: Vec<usize>,
    pub question_tokens: Vec<String>,
    /// Inclusive token indices into the context.
    pub answer_start: usize,
    pub answer_end: usize,
}

impl TokenizedExample {
    pub fn context_len(&self) -> usize {
        self.context_ids.len()
    }

    /// Detokenized answer span text.
    pub fn answer_text(&self) -> String {
        detokenize(&self.context_tokens[self.answer_start..=self.answer_end])
    }
}

/// Encoding options; `word_len` is the fixed per-word character count.
#[derive(Debug, Clone, Copy)]
pub struct EncodeOptions {
    pub word_len: usize,
    /// Contexts longer than this are skipped unless `None`.
    pub max_context_len: Option<usize>,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions { word_len: 16, max_context_len: None }
    }
}

/// Encodes one (paragraph, qa) pair. OOV words map to `UNK_ID`; surfaces are
/// retained so the copy mechanism can still score them.
pub fn encode_example(
    record: &ParagraphRecord,
    qa: &QaAnnotation,
    vocab: &Vocabulary,
    opts: EncodeOptions,
) -> Result<TokenizedExample> {
    let context_tokens_full = tokenize(&record.context_text);
    if context_tokens_full.is_empty() {
        return Err(VqagError::Alignment {
            record: qa.qa_id.clone(),
            message: "empty context".into(),
        });
    }
    if let Some(cap) = opts.max_context_len {
        if context_tokens_full.len() > cap {
            return Err(VqagError::Alignment {
                record: qa.qa_id.clone(),
                message: format!("context length {} exceeds cap {cap}", context_tokens_full.len()),
            });
        }
    }
    let (start, end) = align_answer_span(&context_tokens_full, qa.answer_char_start, &qa.answer_text)
        .map_err(|_| VqagError::Alignment {
            record: qa.qa_id.clone(),
            message: format!(
                "answer {:?} at char {} not covered by tokens",
                qa.answer_text, qa.answer_char_start
            ),
        })?;

    let context_ids = context_tokens_full.iter().map(|t| vocab.word_id(&t.surface)).collect();
    let context_char_ids = context_tokens_full
        .iter()
        .map(|t| vocab.char_ids(&t.surface, opts.word_len))
        .collect();
    let context_offsets = context_tokens_full.iter().map(|t| (t.char_start, t.char_end)).collect();
    let context_tokens: Vec<String> =
        context_tokens_full.into_iter().map(|t| t.surface).collect();

    let question_tokens: Vec<String> =
        tokenize(&qa.question_text).into_iter().map(|t| t.surface).collect();
    if question_tokens.is_empty() {
        return Err(VqagError::Alignment {
            record: qa.qa_id.clone(),
            message: "empty question".into(),
        });
    }
    let mut question_ids = Vec::with_capacity(question_tokens.len() + 2);
    question_ids.push(BOS_ID);
    question_ids.extend(question_tokens.iter().map(|w| vocab.word_id(w)));
    question_ids.push(EOS_ID);

    Ok(TokenizedExample {
        paragraph_id: record.id.clone(),
        qa_id: qa.qa_id.clone(),
        context_ids,
        context_char_ids,
        context_tokens,
        context_offsets,
        question_ids,
        question_tokens,
        answer_start: start,
        answer_end: end,
    })
}

/// Encodes every qa of every record, skipping misaligned ones.
/// Returns the examples and the skip count.
pub fn encode_corpus(
    records: &[ParagraphRecord],
    vocab: &Vocabulary,
    opts: EncodeOptions,
) -> (Vec<TokenizedExample>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for rec in records {
        for qa in &rec.qas {
            match encode_example(rec, qa, vocab, opts) {
                Ok(ex) => out.push(ex),
                Err(e) => {
                    log::warn!("skipping {}: {e}", qa.qa_id);
                    skipped += 1;
                }
            }
        }
    }
    (out, skipped)
}

/// Writes paragraph records with their gold annotations as SQuAD v1.1 JSON,
/// one article per record.
pub fn write_squad_json(records: &[ParagraphRecord], path: &Path) -> Result<()> {
    let file = SquadFile {
        data: records
            .iter()
            .map(|rec| SquadArticle {
                title: Some(rec.id.clone()),
                paragraphs: vec![SquadParagraph {
                    context: rec.context_text.clone(),
                    qas: rec
                        .qas
                        .iter()
                        .map(|qa| SquadQa {
                            id: Some(qa.qa_id.clone()),
                            question: qa.question_text.clone(),
                            answers: vec![SquadAnswer {
                                text: qa.answer_text.clone(),
                                answer_start: qa.answer_char_start,
                            }],
                        })
                        .collect(),
                }],
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file).expect("squad file serializes");
    fs::write(path, json).map_err(|source| VqagError::Io { path: path.to_path_buf(), source })
}

/// Writes examples as JSON-lines, one [`TokenizedExample`] per line.
pub fn write_examples_jsonl(examples: &[TokenizedExample], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|source| VqagError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = std::io::BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("example serializes");
        writeln!(w, "{line}").map_err(|source| VqagError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

pub fn read_examples_jsonl(path: &Path) -> Result<Vec<TokenizedExample>> {
    let file = fs::File::open(path).map_err(|source| VqagError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| VqagError::Io { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TokenizedExample = serde_json::from_str(&line).map_err(|e| VqagError::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", ln + 1),
        })?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(context: &str, qas: &[(&str, &str, usize)]) -> ParagraphRecord {
        ParagraphRecord {
            id: "p0".into(),
            context_text: context.into(),
            qas: qas
                .iter()
                .enumerate()
                .map(|(i, (q, a, s))| QaAnnotation {
                    qa_id: format!("q{i}"),
                    question_text: q.to_string(),
                    answer_text: a.to_string(),
                    answer_char_start: *s,
                })
                .collect(),
        }
    }

    #[test]
    fn tokenize_splits_clitics() {
        let surfaces: Vec<String> =
            tokenize("Beyoncé's vocal range").into_iter().map(|t| t.surface).collect();
        assert_eq!(surfaces, vec!["beyoncé", "'s", "vocal", "range"]);
    }

    #[test]
    fn tokenize_empty_is_empty() {
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn tokenize_offsets_reslice_source() {
        let toks = tokenize("four octaves.");
        let spans: Vec<(usize, usize)> = toks.iter().map(|t| (t.char_start, t.char_end)).collect();
        assert_eq!(spans, vec![(0, 4), (5, 12), (12, 13)]);
        let surfaces: Vec<String> = toks.into_iter().map(|t| t.surface).collect();
        assert_eq!(surfaces, vec!["four", "octaves", "."]);
    }

    #[test]
    fn tokenize_quote_apostrophe_stays_separate() {
        let surfaces: Vec<String> =
            tokenize("said 'hello' loudly").into_iter().map(|t| t.surface).collect();
        assert_eq!(surfaces, vec!["said", "'", "hello", "'", "loudly"]);
    }

    #[test]
    fn align_single_token_answer() {
        let toks = tokenize("the cat sat");
        assert_eq!(align_answer_span(&toks, 4, "cat").unwrap(), (1, 1));
    }

    #[test]
    fn align_two_token_answer() {
        let text = "spans four octaves .";
        let toks = tokenize(text);
        let start = text.find("four").unwrap();
        let (s, e) = align_answer_span(&toks, start, "four octaves").unwrap();
        assert_eq!((s, e), (1, 2));
    }

    #[test]
    fn align_out_of_range_fails() {
        let toks = tokenize("short");
        assert!(align_answer_span(&toks, 50, "nothing").is_err());
    }

    #[test]
    fn vocabulary_cap_keeps_most_frequent() {
        let rec = record("a a b", &[]);
        let vocab = Vocabulary::build([&rec], 1);
        assert_eq!(vocab.word_count(), SPECIALS.len() + 1);
        assert!(vocab.contains("a"));
        assert!(!vocab.contains("b"));
    }

    #[test]
    fn vocabulary_cap_above_distinct_keeps_all() {
        let rec = record("a b c", &[]);
        let vocab = Vocabulary::build([&rec], 100);
        assert_eq!(vocab.word_count(), SPECIALS.len() + 3);
    }

    #[test]
    fn vocabulary_tie_break_is_first_occurrence() {
        let rec = record("x y x y", &[]);
        let vocab = Vocabulary::build([&rec], 10);
        assert!(vocab.word_id("x") < vocab.word_id("y"));
    }

    #[test]
    fn vocabulary_ids_are_dense_bijection() {
        let rec = record("the cat sat on the mat", &[("where did the cat sit ?", "mat", 22)]);
        let vocab = Vocabulary::build([&rec], 100);
        for id in 0..vocab.word_count() {
            assert_eq!(vocab.word_id(vocab.word(id)), id);
        }
    }

    #[test]
    fn vocabulary_tsv_round_trip() {
        let rec = record("the cat sat", &[("who sat ?", "cat", 4)]);
        let vocab = Vocabulary::build([&rec], 100);
        let dir = tempfile::tempdir().unwrap();
        let wp = dir.path().join("vocab.tsv");
        let cp = dir.path().join("chars.tsv");
        vocab.write_tsv(&wp, &cp).unwrap();
        let back = Vocabulary::read_tsv(&wp, &cp).unwrap();
        assert_eq!(back.word_count(), vocab.word_count());
        for id in 0..vocab.word_count() {
            assert_eq!(back.word(id), vocab.word(id));
        }
        assert_eq!(back.char_id('c'), vocab.char_id('c'));
    }

    #[test]
    fn encode_known_words_have_no_unk() {
        let rec = record("the cat sat", &[("who sat ?", "cat", 4)]);
        let vocab = Vocabulary::build([&rec], 100);
        let ex = encode_example(&rec, &rec.qas[0], &vocab, EncodeOptions::default()).unwrap();
        assert!(!ex.context_ids.contains(&UNK_ID));
        assert!(!ex.question_ids.contains(&UNK_ID));
        assert_eq!(ex.question_ids[0], BOS_ID);
        assert_eq!(*ex.question_ids.last().unwrap(), EOS_ID);
    }

    #[test]
    fn encode_oov_maps_to_unk_and_keeps_surface() {
        let vocab_rec = record("the cat sat", &[]);
        let vocab = Vocabulary::build([&vocab_rec], 100);
        let rec = record("the zyzzyva sat", &[("who sat ?", "zyzzyva", 4)]);
        let ex = encode_example(&rec, &rec.qas[0], &vocab, EncodeOptions::default()).unwrap();
        assert_eq!(ex.context_ids[1], UNK_ID);
        assert_eq!(ex.context_tokens[1], "zyzzyva");
    }

    #[test]
    fn encode_decode_round_trip_for_in_vocab() {
        let rec = record("The Cat SAT", &[("who sat ?", "Cat", 4)]);
        let vocab = Vocabulary::build([&rec], 100);
        let ex = encode_example(&rec, &rec.qas[0], &vocab, EncodeOptions::default()).unwrap();
        let decoded: Vec<&str> = ex.context_ids.iter().map(|&id| vocab.word(id)).collect();
        assert_eq!(decoded, vec!["the", "cat", "sat"]);
    }

    #[test]
    fn encode_answer_span_invariant() {
        let rec = record("the cat sat on a mat", &[("where ?", "a mat", 15)]);
        let vocab = Vocabulary::build([&rec], 100);
        let ex = encode_example(&rec, &rec.qas[0], &vocab, EncodeOptions::default()).unwrap();
        assert!(ex.answer_start <= ex.answer_end && ex.answer_end < ex.context_len());
        assert_eq!(ex.answer_text(), "a mat");
    }

    #[test]
    fn char_ids_pad_and_truncate() {
        let rec = record("abc", &[]);
        let vocab = Vocabulary::build([&rec], 100);
        let ids = vocab.char_ids("abc", 5);
        assert_eq!(ids.len(), 5);
        assert_eq!(&ids[3..], &[CHAR_PAD_ID, CHAR_PAD_ID]);
        let ids = vocab.char_ids("abcabc", 4);
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn load_squad_empty_data_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        std::fs::write(&path, r#"{"data": []}"#).unwrap();
        let loaded = load_squad_json(&path).unwrap();
        assert!(loaded.records.is_empty());
        assert_eq!(loaded.report.qa_pairs, 0);
    }

    #[test]
    fn load_squad_skips_misaligned_answer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let doc = serde_json::json!({
            "data": [{
                "title": "t",
                "paragraphs": [{
                    "context": "the cat sat",
                    "qas": [
                        {"id": "ok", "question": "who sat?",
                         "answers": [{"text": "cat", "answer_start": 4}]},
                        {"id": "bad", "question": "who sat?",
                         "answers": [{"text": "cat", "answer_start": 0}]}
                    ]
                }]
            }]
        });
        std::fs::write(&path, doc.to_string()).unwrap();
        let loaded = load_squad_json(&path).unwrap();
        assert_eq!(loaded.report.qa_pairs, 1);
        assert_eq!(loaded.report.skipped_qas, 1);
        assert_eq!(loaded.records[0].qas.len(), 1);
        assert_eq!(loaded.records[0].qas[0].qa_id, "ok");
    }

    #[test]
    fn load_squad_malformed_json_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.json");
        std::fs::write(&path, "{not json").unwrap();
        let err = load_squad_json(&path).unwrap_err();
        assert!(err.to_string().contains("broken.json"));
    }

    #[test]
    fn examples_jsonl_round_trip() {
        let rec = record("the cat sat", &[("who sat ?", "cat", 4)]);
        let vocab = Vocabulary::build([&rec], 100);
        let ex = encode_example(&rec, &rec.qas[0], &vocab, EncodeOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        write_examples_jsonl(&[ex.clone()], &path).unwrap();
        let back = read_examples_jsonl(&path).unwrap();
        assert_eq!(back, vec![ex]);
    }

    proptest! {
        /// Re-slicing aligned tokens always yields text containing the answer.
        #[test]
        fn aligned_span_contains_answer(
            words in proptest::collection::vec("[a-z]{1,8}", 1..12),
            ans_word in 0usize..12,
            ans_len in 1usize..3,
        ) {
            let ans_word = ans_word % words.len();
            let ans_len = ans_len.min(words.len() - ans_word);
            let context = words.join(" ");
            let char_start: usize = words[..ans_word].iter().map(|w| w.chars().count() + 1).sum();
            let answer = words[ans_word..ans_word + ans_len].join(" ");

            let toks = tokenize(&context);
            let (s, e) = align_answer_span(&toks, char_start, &answer).unwrap();
            let sliced: Vec<String> = toks[s..=e].iter().map(|t| t.surface.clone()).collect();
            prop_assert!(detokenize(&sliced).contains(&answer));
        }

        /// Token offsets always re-slice to the lowercased surface.
        #[test]
        fn token_offsets_reslice(text in "[ a-zA-Z0-9.,'?-]{0,60}") {
            let chars: Vec<char> = text.chars().collect();
            for tok in tokenize(&text) {
                let resliced: String =
                    chars[tok.char_start..tok.char_end].iter().collect::<String>().to_lowercase();
                prop_assert_eq!(&resliced, &tok.surface);
            }
        }
    }
}
