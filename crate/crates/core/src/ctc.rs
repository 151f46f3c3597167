//! Connectionist Temporal Classification: loss, gradient and greedy decoding.
//!
//! Class layout is `[symbol_0, .., symbol_{N-1}, blank]`, i.e. the blank is
//! always the last class.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{argmax, Tensor};

/// Log-probabilities are clamped from below to this value before the DP.
pub const LOG_PROB_FLOOR: f64 = -1e5;

/// Ordered set of output symbols. Class `len()` is the blank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        if symbols.is_empty() {
            return Err(Error::InvalidArgument("alphabet needs at least one symbol".into()));
        }
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::InvalidArgument(format!("duplicate alphabet symbol {c:?}")));
            }
        }
        Ok(Alphabet { symbols })
    }

    /// Number of symbols `N`, excluding the blank.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `N + 1`.
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn blank(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn contains(&self, c: char) -> bool {
        self.symbols.contains(&c)
    }

    pub fn encode(&self, text: &str) -> Result<LabelSeq> {
        text.chars()
            .map(|c| self.symbols.iter().position(|&s| s == c).ok_or(Error::UnknownSymbol(c)))
            .collect::<Result<Vec<_>>>()
            .map(LabelSeq)
    }

    /// Symbols for `indices`; blanks and out-of-range classes are skipped.
    pub fn decode(&self, indices: &[usize]) -> String {
        indices.iter().filter_map(|&i| self.symbols.get(i)).collect()
    }
}

impl TryFrom<String> for Alphabet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Alphabet::new(s.chars())
    }
}

impl From<Alphabet> for String {
    fn from(a: Alphabet) -> String {
        a.symbols.into_iter().collect()
    }
}

/// Label indices of one transcription, without blanks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSeq(pub Vec<usize>);

impl LabelSeq {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Number of adjacent equal labels (each forces one separating blank).
    pub fn repeats(&self) -> usize {
        repeats(&self.0)
    }
}

fn repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Result of [`ctc_loss`].
#[derive(Clone, Debug)]
pub struct CtcLoss<T> {
    /// `-log P(target | log_probs)`, `+∞` when infeasible.
    pub loss: f64,
    /// Gradient of `loss` with respect to `log_probs`; zero when infeasible.
    pub grad: Tensor<T>,
    pub feasible: bool,
    pub frames: usize,
    pub target_len: usize,
    pub repeats: usize,
}

impl<T> CtcLoss<T> {
    pub fn infeasibility(&self) -> Error {
        Error::InfeasibleTarget { frames: self.frames, target_len: self.target_len, repeats: self.repeats }
    }
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// CTC loss via the forward-backward recursion over the blank-augmented
/// target (`2U + 1` states), in log space. Accumulation is done in `f64`
/// whatever `T` is.
pub fn ctc_loss<T: Real>(log_probs: &Tensor<T>, target: &[usize]) -> Result<CtcLoss<T>> {
    let (frames, classes) = log_probs.dims2()?;
    if classes < 2 {
        return Err(shape_err("ctc_loss", format!("need at least one symbol plus blank, got {classes} classes")));
    }
    let blank = classes - 1;
    if let Some(&bad) = target.iter().find(|&&c| c >= blank) {
        return Err(Error::InvalidArgument(format!("target label {bad} is not a symbol (blank is {blank})")));
    }
    let reps = repeats(target);
    let u = target.len();
    if frames < u + reps {
        return Ok(CtcLoss {
            loss: f64::INFINITY,
            grad: Tensor::zeros(vec![frames, classes])?,
            feasible: false,
            frames,
            target_len: u,
            repeats: reps,
        });
    }

    let lp: Vec<f64> = log_probs.data().iter().map(|v| v.as_f64().max(LOG_PROB_FLOOR)).collect();
    let at = |t: usize, k: usize| lp[t * classes + k];
    let s_len = 2 * u + 1;
    let label = |s: usize| if s.is_multiple_of(2) { blank } else { target[s / 2] };
    // A skip from s-2 is allowed onto a symbol that differs from the previous symbol.
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = at(0, blank);
    if s_len > 1 {
        alpha[1] = at(0, label(1));
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut v = prev[s];
            if s >= 1 {
                v = lse2(v, prev[s - 1]);
            }
            if can_skip(s) {
                v = lse2(v, prev[s - 2]);
            }
            alpha[t * s_len + s] = if v == ninf { ninf } else { v + at(t, label(s)) };
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = frames - 1;
    beta[last * s_len + s_len - 1] = at(last, label(s_len - 1));
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = at(last, label(s_len - 2));
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut v = next[s];
            if s + 1 < s_len {
                v = lse2(v, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                v = lse2(v, next[s + 2]);
            }
            beta[t * s_len + s] = if v == ninf { ninf } else { v + at(t, label(s)) };
        }
    }

    let end = &alpha[last * s_len..];
    let log_p = if s_len > 1 { lse2(end[s_len - 1], end[s_len - 2]) } else { end[0] };

    let mut grad = vec![T::zero(); frames * classes];
    for t in 0..frames {
        let mut occ = vec![ninf; classes];
        for s in 0..s_len {
            let k = label(s);
            occ[k] = lse2(occ[k], alpha[t * s_len + s] + beta[t * s_len + s]);
        }
        for k in 0..classes {
            if occ[k] != ninf {
                grad[t * classes + k] = T::of(-(occ[k] - at(t, k) - log_p).exp());
            }
        }
    }

    Ok(CtcLoss {
        loss: -log_p,
        grad: Tensor::new(vec![frames, classes], grad)?,
        feasible: true,
        frames,
        target_len: u,
        repeats: reps,
    })
}

/// Per-frame argmax classes of `log_probs[T×(N+1)]`.
pub fn best_path<T: Real>(log_probs: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, classes) = log_probs.dims2()?;
    Ok(log_probs.data().chunks(classes).map(argmax).collect())
}

/// Collapses repeats, then drops blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Best-path decoding: per-frame argmax, collapse repeats, drop blanks.
pub fn greedy_decode<T: Real>(log_probs: &Tensor<T>, alphabet: &Alphabet) -> Result<String> {
    let (_, classes) = log_probs.dims2()?;
    if classes != alphabet.num_classes() {
        return Err(shape_err("greedy_decode", format!("{classes} classes for an alphabet of {}", alphabet.len())));
    }
    Ok(alphabet.decode(&collapse(&best_path(log_probs)?, alphabet.blank())))
}
