//! Prompt-similarity classification, Yes/No answer parsing and caption
//! metrics (ROUGE-L, corpus BLEU).

use std::collections::HashMap;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mil::{argmax, softmax};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Class prompts with unit-norm embeddings (one row per class).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PromptSet {
    class_names: Vec<String>,
    embeddings: Array2<f64>,
    temperature: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PromptEntry {
    pub name: String,
    pub embedding: Vec<f64>,
}

/// On-disk prompt file: `{"temperature": 0.07, "classes": [{"name", "embedding"}]}`.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PromptFile {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub classes: Vec<PromptEntry>,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

impl PromptSet {
    /// Normalizes each embedding row to unit length.
    pub fn new(class_names: Vec<String>, mut embeddings: Array2<f64>, temperature: f64) -> Result<Self> {
        if class_names.len() < 2 || class_names.len() != embeddings.nrows() {
            return Err(Error::invalid("a prompt set needs one embedding for each of >= 2 classes"));
        }
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!("temperature {temperature} must be positive")));
        }
        for (mut row, name) in embeddings.rows_mut().into_iter().zip(&class_names) {
            let n = norm(row.view());
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::invalid(format!("prompt embedding for {name} has zero or non-finite norm")));
            }
            row /= n;
        }
        Ok(PromptSet {
            class_names,
            embeddings,
            temperature,
        })
    }

    pub fn from_file(file: PromptFile) -> Result<Self> {
        let dim = file.classes.first().map_or(0, |c| c.embedding.len());
        if let Some(c) = file.classes.iter().find(|c| c.embedding.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: c.embedding.len(),
            });
        }
        let names = file.classes.iter().map(|c| c.name.clone()).collect();
        let flat: Vec<f64> = file.classes.into_iter().flat_map(|c| c.embedding).collect();
        let rows = flat.len().checked_div(dim).unwrap_or(0);
        let emb = Array2::from_shape_vec((rows, dim), flat).map_err(|e| Error::invalid(e.to_string()))?;
        PromptSet::new(names, emb, file.temperature)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotPrediction {
    pub label: usize,
    pub similarities: Vec<f64>,
    pub probs: Vec<f64>,
}

/// `softmax(sims / tau)`, label by argmax with ties to the lowest index.
pub fn classify_similarities(similarities: Vec<f64>, temperature: f64) -> ZeroShotPrediction {
    let scaled: Vec<f64> = similarities.iter().map(|s| s / temperature).collect();
    let probs = softmax(&scaled);
    ZeroShotPrediction {
        label: argmax(&similarities),
        similarities,
        probs,
    }
}

pub fn zero_shot_classify(image: ArrayView1<f64>, prompts: &PromptSet) -> Result<ZeroShotPrediction> {
    if image.len() != prompts.dim() {
        return Err(Error::DimensionMismatch {
            expected: prompts.dim(),
            found: image.len(),
        });
    }
    let n = norm(image);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::invalid("image embedding has zero or non-finite norm"));
    }
    let sims = prompts.embeddings.dot(&image).mapv(|s| s / n).to_vec();
    Ok(classify_similarities(sims, prompts.temperature))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Positive,
    Negative,
    Unparseable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerMapping {
    positive: Vec<String>,
    negative: Vec<String>,
}

impl Default for AnswerMapping {
    fn default() -> Self {
        AnswerMapping {
            positive: vec!["yes".into()],
            negative: vec!["no".into()],
        }
    }
}

/// Lowercases, splits on whitespace and drops every non-alphanumeric
/// character; empty tokens vanish.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

impl AnswerMapping {
    pub fn new(positive: Vec<String>, negative: Vec<String>) -> Result<Self> {
        let positive: Vec<String> = positive.iter().map(|w| normalize(w)).collect();
        let negative: Vec<String> = negative.iter().map(|w| normalize(w)).collect();
        if let Some(w) = positive.iter().find(|w| negative.contains(w)) {
            return Err(Error::invalid(format!("answer word {w:?} is in both lexicons")));
        }
        Ok(AnswerMapping { positive, negative })
    }

    /// The first token found in either lexicon decides.
    pub fn map(&self, text: &str) -> Answer {
        for tok in tokenize(text) {
            if self.positive.contains(&tok) {
                return Answer::Positive;
            }
            if self.negative.contains(&tok) {
                return Answer::Negative;
            }
        }
        Answer::Unparseable
    }
}

pub fn map_answer_to_label(text: &str) -> Answer {
    AnswerMapping::default().map(text)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 (beta = 1).
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        log::warn!("ROUGE-L of an empty token sequence is 0");
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with uniform weights over orders `1..=n`, clipped counts and
/// the brevity penalty `exp(1 - r/c)` when `c < r`. Any zero precision makes
/// the score zero.
pub fn bleu_n(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::invalid("BLEU of an empty corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::DimensionMismatch {
            expected: candidates.len(),
            found: references.len(),
        });
    }
    if n == 0 {
        return Err(Error::invalid("BLEU order must be at least 1"));
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut hits, mut total) = (0usize, 0usize);
        for (c, r) in candidates.iter().zip(references) {
            let rc = ngram_counts(r, k);
            for (g, cnt) in ngram_counts(c, k) {
                hits += cnt.min(rc.get(g).copied().unwrap_or(0));
                total += cnt;
            }
        }
        if hits == 0 {
            return Ok(0.0);
        }
        log_sum += (hits as f64 / total as f64).ln() / n as f64;
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * log_sum.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn classify_cases() {
        let p = PromptSet::new(vec!["a".into(), "b".into()], array![[1.0, 0.0], [0.0, 2.0]], 0.07).unwrap();
        let out = zero_shot_classify(array![0.0, 5.0].view(), &p).unwrap();
        assert_eq!(out.label, 1);
        assert!(out.probs[1] > out.probs[0]);
        let same = PromptSet::new(vec!["a".into(), "b".into()], array![[1.0, 1.0], [1.0, 1.0]], 0.07).unwrap();
        assert_eq!(zero_shot_classify(array![0.3, 0.1].view(), &same).unwrap().label, 0);
        assert!(zero_shot_classify(array![0.0, 0.0].view(), &p).is_err());
        let h = classify_similarities(vec![0.8, 0.2], 1.0);
        assert_abs_diff_eq!(h.probs[0], 0.6457, epsilon = 1e-4);
        assert_abs_diff_eq!(h.probs[1], 0.3543, epsilon = 1e-4);
    }

    #[test]
    fn answers() {
        assert_eq!(map_answer_to_label("Yes"), Answer::Positive);
        assert_eq!(map_answer_to_label("  no."), Answer::Negative);
        assert_eq!(map_answer_to_label("possibly malignant"), Answer::Unparseable);
        assert_eq!(map_answer_to_label("Well, yes: malignant"), Answer::Positive);
        assert!(AnswerMapping::new(vec!["Yes".into()], vec!["yes!".into()]).is_err());
    }

    #[test]
    fn rouge_cases() {
        assert_abs_diff_eq!(rouge_l(&toks("the cat sat"), &toks("the cat ate")), 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(rouge_l(&toks("a b c"), &toks("a b c")), 1.0);
        assert_eq!(rouge_l(&toks("a b"), &toks("c d")), 0.0);
        assert_eq!(rouge_l(&[], &toks("c d")), 0.0);
    }

    #[test]
    fn bleu_cases() {
        let c = vec![toks("a b c d")];
        let r = vec![toks("a b c e")];
        assert_abs_diff_eq!(bleu_n(&c, &r, 1).unwrap(), 0.75, epsilon = 1e-12);
        assert_eq!(bleu_n(&r, &r, 3).unwrap(), 1.0);
        assert_eq!(bleu_n(&[toks("a b")], &[toks("a b")], 3).unwrap(), 0.0);
        assert!(bleu_n(&[], &[], 1).is_err());
        // brevity: "a b" vs "a b c d" -> p1 = 1, BP = e^(1 - 2)
        assert_abs_diff_eq!(bleu_n(&[toks("a b")], &[toks("a b c d")], 1).unwrap(), (-1.0f64).exp(), epsilon = 1e-12);
    }
}
