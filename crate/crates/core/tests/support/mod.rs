//! Independent reference implementations used by several test targets.
#![allow(dead_code)]

pub mod grad;

use std::collections::HashMap;

/// CTC negative log-likelihood by enumerating every frame labelling.
///
/// `log_probs` is `T` rows of `classes` entries, blank last. Returns `+∞`
/// when no path collapses to `target`.
pub fn ctc_brute_force(log_probs: &[Vec<f64>], target: &[usize]) -> f64 {
    let frames = log_probs.len();
    let classes = log_probs[0].len();
    let blank = classes - 1;
    let mut total = 0.0f64;
    let mut path = vec![0usize; frames];
    let paths = classes.pow(frames as u32);
    for code in 0..paths {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % classes;
            c /= classes;
        }
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != blank {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(t, &s)| log_probs[t][s]).sum::<f64>().exp();
        }
    }
    -total.ln()
}

/// Levenshtein distance by memoized recursion over suffixes.
pub fn edit_distance_recursive<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&d) = memo.get(&(i, j)) {
            return d;
        }
        let d = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo).min(go(a, b, i, j + 1, memo)).min(go(a, b, i + 1, j + 1, memo))
        };
        memo.insert((i, j), d);
        d
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

/// `(cer, wer)` as summed distances over summed reference lengths.
pub fn corpus_rates_reference(pairs: &[(String, String)]) -> (f64, f64) {
    let (mut ce, mut cn, mut we, mut wn) = (0, 0, 0, 0);
    for (truth, hyp) in pairs {
        let (t, h): (Vec<char>, Vec<char>) = (truth.chars().collect(), hyp.chars().collect());
        ce += edit_distance_recursive(&h, &t);
        cn += t.len();
        let (tw, hw): (Vec<&str>, Vec<&str>) = (truth.split_whitespace().collect(), hyp.split_whitespace().collect());
        we += edit_distance_recursive(&hw, &tw);
        wn += tw.len();
    }
    (ce as f64 / cn as f64, if wn == 0 { 0.0 } else { we as f64 / wn as f64 })
}
