//! Hand-crafted structural features of a query.
//!
//! Eleven metrics, in this order:
//!
//! | # | feature | definition |
//! |---|---------|------------|
//! | 0 | char count | Unicode scalar values |
//! | 1 | word count | whitespace-separated tokens |
//! | 2 | sentence count | runs of `.`, `!`, `?` plus a trailing unterminated sentence |
//! | 3 | mean word length | chars per word |
//! | 4 | type-token ratio | distinct normalized words / words |
//! | 5 | Flesch reading ease | `206.835 − 1.015·w/s − 84.6·syl/w` |
//! | 6 | Flesch–Kincaid grade | `0.39·w/s + 11.8·syl/w − 15.59` |
//! | 7 | digit ratio | ASCII digits / chars |
//! | 8 | punctuation ratio | ASCII punctuation / chars |
//! | 9 | bracket depth | max nesting of `()`, `[]`, `{}` |
//! | 10 | interrogatives | words in {what, why, how, when, where, which, who, whom, whose} |
//!
//! Every ratio is zero when its denominator is zero.

use serde::{Deserialize, Serialize};

pub const STRUCTURAL_DIM: usize = 11;

pub const FEATURE_NAMES: [&str; STRUCTURAL_DIM] = [
    "char_count",
    "word_count",
    "sentence_count",
    "mean_word_length",
    "type_token_ratio",
    "flesch_reading_ease",
    "flesch_kincaid_grade",
    "digit_ratio",
    "punctuation_ratio",
    "bracket_depth",
    "interrogative_count",
];

const INTERROGATIVES: [&str; 9] = ["what", "why", "how", "when", "where", "which", "who", "whom", "whose"];

fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

fn syllables(word: &str) -> usize {
    let letters: Vec<char> = word.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.is_empty() {
        return 0;
    }
    let is_vowel = |c: char| matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y');
    let mut count = 0;
    let mut prev = false;
    for &c in &letters {
        let v = is_vowel(c);
        if v && !prev {
            count += 1;
        }
        prev = v;
    }
    if letters.len() > 2 && letters[letters.len() - 1] == 'e' && !is_vowel(letters[letters.len() - 2]) && count > 1 {
        count -= 1;
    }
    count.max(1)
}

fn sentence_count(text: &str) -> usize {
    let mut count = 0;
    let mut in_terminator = false;
    let mut pending = false;
    for c in text.chars() {
        if matches!(c, '.' | '!' | '?') {
            if !in_terminator && pending {
                count += 1;
                pending = false;
            }
            in_terminator = true;
        } else {
            in_terminator = false;
            if !c.is_whitespace() {
                pending = true;
            }
        }
    }
    count + usize::from(pending)
}

fn bracket_depth(text: &str) -> usize {
    let (mut depth, mut max) = (0usize, 0usize);
    for c in text.chars() {
        match c {
            '(' | '[' | '{' => {
                depth += 1;
                max = max.max(depth);
            }
            ')' | ']' | '}' => depth = depth.saturating_sub(1),
            _ => {}
        }
    }
    max
}

/// Raw (unstandardized) structural feature vector.
pub fn extract_structural_features(query: &str) -> [f64; STRUCTURAL_DIM] {
    let chars = query.chars().count();
    let words: Vec<&str> = query.split_whitespace().collect();
    let n_words = words.len();
    let sentences = sentence_count(query);
    let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };

    let word_chars: usize = words.iter().map(|w| w.chars().count()).sum();
    let normalized: Vec<String> = words.iter().map(|w| normalize_word(w)).collect();
    let distinct: std::collections::BTreeSet<&str> =
        normalized.iter().filter(|w| !w.is_empty()).map(String::as_str).collect();
    let nonempty = normalized.iter().filter(|w| !w.is_empty()).count();
    let syl: usize = words.iter().map(|w| syllables(&w.to_lowercase())).sum();

    let (ease, grade) = if n_words == 0 {
        (0.0, 0.0)
    } else {
        let wps = n_words as f64 / sentences.max(1) as f64;
        let spw = syl as f64 / n_words as f64;
        (206.835 - 1.015 * wps - 84.6 * spw, 0.39 * wps + 11.8 * spw - 15.59)
    };

    let digits = query.chars().filter(char::is_ascii_digit).count();
    let punct = query.chars().filter(char::is_ascii_punctuation).count();
    let interrogatives = normalized.iter().filter(|w| INTERROGATIVES.contains(&w.as_str())).count();

    [
        chars as f64,
        n_words as f64,
        sentences as f64,
        ratio(word_chars as f64, n_words),
        ratio(distinct.len() as f64, nonempty),
        ease,
        grade,
        ratio(digits as f64, chars),
        ratio(punct as f64, chars),
        bracket_depth(query) as f64,
        interrogatives as f64,
    ]
}

/// Per-feature standardization fitted on a training set. Features with zero
/// spread map to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population mean and standard deviation per column.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for k in 0..dim {
                var[k] += (r[k] - mean[k]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .zip(&mean)
            .map(|(v, m)| {
                let s = (v / n).sqrt();
                if s <= 1e-12 * m.abs().max(1.0) {
                    0.0
                } else {
                    s
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| if *s == 0.0 { 0.0 } else { (v - m) / s })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_all_zero() {
        assert_eq!(extract_structural_features(""), [0.0; STRUCTURAL_DIM]);
    }

    #[test]
    fn arithmetic_question() {
        let f = extract_structural_features("What is 2+2?");
        assert_eq!(f[0], 12.0);
        assert_eq!(f[1], 3.0);
        assert_eq!(f[2], 1.0);
        assert!((f[7] - 2.0 / 12.0).abs() < 1e-15);
        assert_eq!(f[10], 1.0);
    }

    #[test]
    fn nesting_depth() {
        assert_eq!(extract_structural_features("((a))")[9], 2.0);
        assert_eq!(extract_structural_features("a) (b [c] {d})")[9], 2.0);
    }

    #[test]
    fn sentences_and_ratios() {
        let f = extract_structural_features("The cat sat. The cat ran!  Why");
        assert_eq!(f[2], 3.0);
        // distinct: the, cat, sat, ran, why
        assert!((f[4] - 5.0 / 7.0).abs() < 1e-15);
        assert_eq!(f[10], 1.0);
    }

    #[test]
    fn syllable_heuristic() {
        assert_eq!(syllables("cat"), 1);
        assert_eq!(syllables("cake"), 1);
        assert_eq!(syllables("reading"), 2);
        assert_eq!(syllables("1234"), 0);
    }

    #[test]
    fn standardizer_pins_constant_columns() {
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0], vec![5.0, 5.0]];
        let st = Standardizer::fit(&rows);
        let z: Vec<Vec<f64>> = rows.iter().map(|r| st.apply(r)).collect();
        let col0: Vec<f64> = z.iter().map(|r| r[0]).collect();
        assert!(crate::math::mean(&col0).abs() < 1e-12);
        let var: f64 = col0.iter().map(|x| x * x).sum::<f64>() / 3.0;
        assert!((var.sqrt() - 1.0).abs() < 1e-12);
        assert!(z.iter().all(|r| r[1] == 0.0));
    }
}
