//! Relevance and diversity metrics for answer extraction and question
//! generation: proportional/exact span overlap with precision and recall,
//! recall-of-BLEU and recall-of-ROUGE-L over candidate sets, distinct-unigram
//! and 4-gram-entropy diversity, per-group self-BLEU, and the question-type
//! histogram.
//!
//! Sentence BLEU uses add-one smoothing on zero higher-order n-gram counts;
//! a zero unigram match scores zero, so token-disjoint strings get BLEU 0.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

/// Inclusive token span.
pub type Span = (usize, usize);

/// Answer-extraction scores, as percentages; `dist` counts distinct
/// (context, start, end) triples over the whole prediction set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AEReport {
    pub prop_precision: f64,
    pub prop_recall: f64,
    pub exact_precision: f64,
    pub exact_recall: f64,
    pub dist: usize,
}

/// Question-generation scores. `me_r` is always `"n/a"`: METEOR needs
/// external lexical resources and is not computed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QGReport {
    pub b1_r: f64,
    pub b4_r: f64,
    pub rl_r: f64,
    pub me_r: String,
    pub token_count: usize,
    pub dist1: usize,
    pub ent4: f64,
    pub self_bleu4: f64,
    pub type_histogram: BTreeMap<String, f64>,
}

/// Which span length normalizes a proportional-overlap score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlapSide {
    /// Divide by the predicted span's length (precision direction).
    Pred,
    /// Divide by the gold span's length (recall direction).
    Gold,
}

fn span_len(s: Span) -> usize {
    s.1 - s.0 + 1
}

fn overlap_tokens(a: Span, b: Span) -> usize {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if lo > hi {
        0
    } else {
        hi - lo + 1
    }
}

/// Token overlap of two spans divided by the scored side's length.
pub fn span_prop_overlap(pred: Span, gold: Span, side: OverlapSide) -> f64 {
    let inter = overlap_tokens(pred, gold) as f64;
    match side {
        OverlapSide::Pred => inter / span_len(pred) as f64,
        OverlapSide::Gold => inter / span_len(gold) as f64,
    }
}

/// Predictions and gold spans for one context.
#[derive(Debug, Clone)]
pub struct AeItem {
    pub context_id: String,
    pub preds: Vec<Span>,
    pub golds: Vec<Span>,
}

/// Precision is the mean over predicted spans of the best score against any
/// gold of the same context; recall is the mean over gold spans of the best
/// score against any prediction. Exact uses 0/1 span equality.
pub fn ae_scores(items: &[AeItem]) -> AEReport {
    let mut prop_p = Mean::default();
    let mut prop_r = Mean::default();
    let mut exact_p = Mean::default();
    let mut exact_r = Mean::default();
    let mut distinct: HashSet<(String, usize, usize)> = HashSet::new();
    for item in items {
        for &pred in &item.preds {
            distinct.insert((item.context_id.clone(), pred.0, pred.1));
            let best_prop = item
                .golds
                .iter()
                .map(|&g| span_prop_overlap(pred, g, OverlapSide::Pred))
                .fold(0.0, f64::max);
            let best_exact =
                if item.golds.iter().any(|&g| g == pred) { 1.0 } else { 0.0 };
            prop_p.push(best_prop);
            exact_p.push(best_exact);
        }
        for &gold in &item.golds {
            let best_prop = item
                .preds
                .iter()
                .map(|&p| span_prop_overlap(p, gold, OverlapSide::Gold))
                .fold(0.0, f64::max);
            let best_exact =
                if item.preds.iter().any(|&p| p == gold) { 1.0 } else { 0.0 };
            prop_r.push(best_prop);
            exact_r.push(best_exact);
        }
    }
    AEReport {
        prop_precision: 100.0 * prop_p.mean(),
        prop_recall: 100.0 * prop_r.mean(),
        exact_precision: 100.0 * exact_p.mean(),
        exact_recall: 100.0 * exact_r.mean(),
        dist: distinct.len(),
    }
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }
    fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }
}

fn ngram_key(tokens: &[String], start: usize, n: usize) -> String {
    tokens[start..start + n].join("\u{1f}")
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *counts.entry(ngram_key(tokens, i, n)).or_insert(0) += 1;
        }
    }
    counts
}

/// Smoothed sentence BLEU-n against one or more references, in `[0, 100]`.
///
/// Geometric mean of modified n-gram precisions (clipped against the best
/// reference count), brevity penalty against the closest reference length.
/// Orders the candidate is too short to form are skipped; zero counts at
/// order two and above get add-one smoothing; a zero unigram match gives 0.
pub fn sentence_bleu(candidate: &[String], references: &[&[String]], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be at least 1");
    assert!(!references.is_empty(), "BLEU needs at least one reference");
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for k in 1..=n {
        if candidate.len() < k {
            continue; // candidate cannot form k-grams
        }
        let total = candidate.len() - k + 1;
        let cand_counts = ngram_counts(candidate, k);
        let ref_counts: Vec<HashMap<String, usize>> =
            references.iter().map(|r| ngram_counts(r, k)).collect();
        let mut matched = 0usize;
        for (gram, &c) in &cand_counts {
            let best_ref = ref_counts.iter().map(|rc| *rc.get(gram).unwrap_or(&0)).max().unwrap_or(0);
            matched += c.min(best_ref);
        }
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if k == 1 {
            return 0.0;
        } else {
            1.0 / (total + 1) as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    let c = candidate.len() as f64;
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&rl| ((rl as i64 - candidate.len() as i64).abs(), rl))
        .unwrap() as f64;
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    100.0 * bp * (log_sum / orders as f64).exp()
}

/// Best BLEU-n of any candidate against the single reference.
pub fn bleu_recall(candidates: &[Vec<String>], reference: &[String], n: usize) -> f64 {
    assert!(!candidates.is_empty(), "bleu_recall needs at least one candidate");
    candidates
        .iter()
        .map(|c| sentence_bleu(c, &[reference], n))
        .fold(0.0, f64::max)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        let mut prev_diag = 0;
        for j in 1..=b.len() {
            let tmp = dp[j];
            dp[j] = if a[i - 1] == b[j - 1] { prev_diag + 1 } else { dp[j].max(dp[j - 1]) };
            prev_diag = tmp;
        }
    }
    dp[b.len()]
}

/// LCS-based ROUGE-L F1 (harmonic mean of LCS precision and recall), in
/// `[0, 100]`.
pub fn rouge_l_f1(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// Best ROUGE-L F1 of any candidate against the single reference.
pub fn rouge_l_recall(candidates: &[Vec<String>], reference: &[String]) -> f64 {
    assert!(!candidates.is_empty(), "rouge_l_recall needs at least one candidate");
    candidates.iter().map(|c| rouge_l_f1(c, reference)).fold(0.0, f64::max)
}

/// Number of distinct unigrams over all questions.
pub fn dist1(questions: &[Vec<String>]) -> usize {
    let mut set = HashSet::new();
    for q in questions {
        for tok in q {
            set.insert(tok.as_str());
        }
    }
    set.len()
}

/// Natural-log entropy of the corpus 4-gram frequency distribution.
/// Returns 0 (with a warning) when the corpus holds no 4-gram.
pub fn ent4(questions: &[Vec<String>]) -> f64 {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut total = 0usize;
    for q in questions {
        for (gram, c) in ngram_counts(q, 4) {
            *counts.entry(gram).or_insert(0) += c;
            total += c;
        }
    }
    if total == 0 {
        log::warn!("ent4: no 4-grams in corpus; reporting 0");
        return 0.0;
    }
    let total = total as f64;
    -counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Mean BLEU-4 of each question in a group against the other members as
/// references, in `[0, 100]`. The group must have at least two members.
pub fn self_bleu4(group: &[Vec<String>]) -> f64 {
    assert!(group.len() >= 2, "self-BLEU needs a group of at least 2");
    let mut total = 0.0;
    for (i, q) in group.iter().enumerate() {
        let refs: Vec<&[String]> = group
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, r)| r.as_slice())
            .collect();
        total += sentence_bleu(q, &refs, 4);
    }
    total / group.len() as f64
}

pub const QUESTION_TYPES: [&str; 7] = ["what", "how", "who", "which", "when", "where", "why"];

/// Assigns each question the first listed interrogative appearing
/// left-to-right (else "other") and returns percentages per type.
pub fn question_type_histogram(questions: &[Vec<String>]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for ty in QUESTION_TYPES {
        counts.insert(ty.to_string(), 0);
    }
    counts.insert("other".to_string(), 0);
    for q in questions {
        let ty = q
            .iter()
            .find_map(|tok| QUESTION_TYPES.iter().find(|t| *t == tok).copied())
            .unwrap_or("other");
        *counts.get_mut(ty).unwrap() += 1;
    }
    let total = questions.len().max(1) as f64;
    counts.into_iter().map(|(k, v)| (k, 100.0 * v as f64 / total)).collect()
}

/// One question-generation evaluation unit: the gold question and the
/// candidate set generated for its (context, answer) input.
#[derive(Debug, Clone)]
pub struct QgItem {
    pub reference: Vec<String>,
    pub candidates: Vec<Vec<String>>,
}

/// Assembles the full question-generation report. Groups of fewer than two
/// candidates are excluded from self-BLEU with a warning.
pub fn qg_report(items: &[QgItem]) -> QGReport {
    let mut b1 = Mean::default();
    let mut b4 = Mean::default();
    let mut rl = Mean::default();
    let mut sb = Mean::default();
    let mut all_candidates: Vec<Vec<String>> = Vec::new();
    for item in items {
        assert!(!item.candidates.is_empty(), "qg item without candidates");
        b1.push(bleu_recall(&item.candidates, &item.reference, 1));
        b4.push(bleu_recall(&item.candidates, &item.reference, 4));
        rl.push(rouge_l_recall(&item.candidates, &item.reference));
        if item.candidates.len() >= 2 {
            sb.push(self_bleu4(&item.candidates));
        } else {
            log::warn!("self-BLEU: group of 1 excluded");
        }
        all_candidates.extend(item.candidates.iter().cloned());
    }
    QGReport {
        b1_r: b1.mean(),
        b4_r: b4.mean(),
        rl_r: rl.mean(),
        me_r: "n/a".to_string(),
        token_count: all_candidates.iter().map(|q| q.len()).sum(),
        dist1: dist1(&all_candidates),
        ent4: ent4(&all_candidates),
        self_bleu4: sb.mean(),
        type_histogram: question_type_histogram(&all_candidates),
    }
}
