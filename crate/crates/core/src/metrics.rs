//! Edit distance and corpus-level character / word error rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-cost edit distance (insert, delete, substitute) between two sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.len() < b.len() {
        return edit_distance(b, a);
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character-level Levenshtein distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    edit_distance(&a, &b)
}

/// Whitespace-separated tokens; punctuation stays attached to its word.
pub fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Corpus error rates: summed distances over summed ground-truth lengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub cer: f64,
    pub wer: f64,
    pub char_edits: usize,
    pub chars: usize,
    pub word_edits: usize,
    pub words: usize,
}

/// CER and WER over `(truth, hypothesis)` pairs.
///
/// Both rates are normalized at corpus level: the sum of distances divided
/// by the sum of truth lengths, not the mean of per-sample ratios.
pub fn corpus_error_rates<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<ErrorRates> {
    let mut r = ErrorRates { cer: 0.0, wer: 0.0, char_edits: 0, chars: 0, word_edits: 0, words: 0 };
    for (truth, hyp) in pairs {
        let (truth, hyp) = (truth.as_ref(), hyp.as_ref());
        r.char_edits += levenshtein(hyp, truth);
        r.chars += truth.chars().count();
        let (tw, hw) = (words(truth), words(hyp));
        r.word_edits += edit_distance(&hw, &tw);
        r.words += tw.len();
    }
    if pairs.is_empty() || r.chars == 0 {
        return Err(Error::EmptyCorpus);
    }
    r.cer = r.char_edits as f64 / r.chars as f64;
    r.wer = if r.words == 0 { 0.0 } else { r.word_edits as f64 / r.words as f64 };
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("flaw", "lawn"), 2);
    }

    #[test]
    fn perfect_and_single_substitution() {
        let r = corpus_error_rates(&[("ab cd", "ab cd")]).unwrap();
        assert_eq!((r.cer, r.wer), (0.0, 0.0));
        let r = corpus_error_rates(&[("abc", "abd")]).unwrap();
        assert!((r.cer - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.wer, 1.0);
    }

    #[test]
    fn empty_hypotheses_give_full_error() {
        let r = corpus_error_rates(&[("abc de", ""), ("f", "")]).unwrap();
        assert_eq!(r.cer, 1.0);
        assert_eq!(r.wer, 1.0);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(corpus_error_rates::<&str>(&[]), Err(Error::EmptyCorpus)));
        assert!(matches!(corpus_error_rates(&[("", "x")]), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn words_split_on_whitespace_runs() {
        assert_eq!(words("  a,b   c\nd "), vec!["a,b", "c", "d"]);
    }
}
