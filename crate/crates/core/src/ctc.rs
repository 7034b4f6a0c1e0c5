//! Connectionist temporal classification: path collapse, exact loss by
//! log-space forward-backward, a brute-force enumeration oracle and greedy
//! decoding. Class 0 is the blank; alphabet symbol `i` is class `i + 1`.

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};
use crate::tensor::{Tape, Tensor, Var};

pub const BLANK: usize = 0;

/// Character used when rendering or parsing blanks in a path.
pub const BLANK_CHAR: char = '-';

/// Upper bound on `|L|^T` for exhaustive path enumeration.
pub const ENUMERATION_CAP: u64 = 10_000_000;

/// Ordered label symbols, blank excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.is_empty() {
            return Err(Error::Config("alphabet must not be empty".into()));
        }
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::Config(format!("duplicate alphabet symbol {c:?}")));
            }
            if *c == BLANK_CHAR {
                return Err(Error::Config(format!("{BLANK_CHAR:?} is reserved for blank")));
            }
        }
        Ok(Self { symbols })
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn as_string(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Symbols plus blank.
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    pub fn encode(&self, text: &str) -> Result<LabelSequence> {
        text.chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| Error::Config(format!("symbol {c:?} not in alphabet {:?}", self.as_string())))
            })
            .collect::<Result<Vec<_>>>()
            .map(LabelSequence::new)
    }

    pub fn render(&self, label: &LabelSequence) -> String {
        label.indices.iter().map(|&i| self.symbols[i]).collect()
    }

    /// Parses a path string where [`BLANK_CHAR`] denotes the blank.
    pub fn parse_path(&self, text: &str) -> Result<CtcPath> {
        text.chars()
            .map(|c| {
                if c == BLANK_CHAR {
                    Ok(BLANK)
                } else {
                    self.index_of(c)
                        .map(|i| i + 1)
                        .ok_or_else(|| Error::Config(format!("symbol {c:?} not in alphabet")))
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(CtcPath::new)
    }

    pub fn render_path(&self, path: &CtcPath) -> String {
        path.classes
            .iter()
            .map(|&k| if k == BLANK { BLANK_CHAR } else { self.symbols[k - 1] })
            .collect()
    }
}

/// Target label as alphabet symbol indices (no blanks).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSequence {
    pub indices: Vec<usize>,
}

impl LabelSequence {
    pub fn new(indices: Vec<usize>) -> Self {
        Self { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Fewest frames any path needs: one per symbol plus a blank between repeats.
    pub fn min_frames(&self) -> usize {
        let repeats = self.indices.windows(2).filter(|w| w[0] == w[1]).count();
        self.indices.len() + repeats
    }

    fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().map(|&i| i + 1)
    }
}

/// Frame-level class sequence over blank and symbols.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CtcPath {
    pub classes: Vec<usize>,
}

impl CtcPath {
    pub fn new(classes: Vec<usize>) -> Self {
        Self { classes }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// `T x K` matrix of per-frame log-probabilities whose rows are normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbSequence<S> {
    log_probs: Tensor<S>,
}

impl<S: Scalar> ProbSequence<S> {
    pub fn from_log_probs(log_probs: Tensor<S>) -> Result<Self> {
        let (_, k) = log_probs
            .dims2()
            .ok_or_else(|| Error::shape("prob_sequence", format!("{:?} is not 2-D", log_probs.shape())))?;
        for (t, row) in log_probs.data().chunks(k).enumerate() {
            let z = log_sum_exp(row).as_f64();
            if !(z.abs() <= 1e-9) {
                return Err(Error::Contract(format!(
                    "row {t} log-sum-exp is {z}, expected 0"
                )));
            }
        }
        Ok(Self { log_probs })
    }

    pub fn from_probs(probs: &Tensor<S>) -> Result<Self> {
        Self::from_log_probs(probs.map(S::ln))
    }

    /// Row log-softmax of arbitrary logits.
    pub fn from_logits(logits: &Tensor<S>) -> Result<Self> {
        let (_, k) = logits
            .dims2()
            .ok_or_else(|| Error::shape("prob_sequence", format!("{:?} is not 2-D", logits.shape())))?;
        let mut out = logits.clone();
        for row in out.data_mut().chunks_mut(k) {
            let z = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x = *x - z);
        }
        Ok(Self { log_probs: out })
    }

    pub fn log_probs(&self) -> &Tensor<S> {
        &self.log_probs
    }

    pub fn frames(&self) -> usize {
        self.log_probs.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.log_probs.shape()[1]
    }
}

/// Merges consecutive repeats, then drops blanks.
pub fn collapse(path: &CtcPath) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in &path.classes {
        if Some(k) != prev && k != BLANK {
            out.push(k - 1);
        }
        prev = Some(k);
    }
    LabelSequence::new(out)
}

/// Every length-`frames` path that collapses to `label` (the preimage under collapse).
pub fn enumerate_paths(label: &LabelSequence, frames: usize, alphabet: &Alphabet) -> Result<Vec<CtcPath>> {
    let k = alphabet.num_classes();
    let mut found = Vec::new();
    for_each_path(k, frames, |classes| {
        if collapses_to(classes, label) {
            found.push(CtcPath::new(classes.to_vec()));
        }
    })?;
    Ok(found)
}

fn collapses_to(classes: &[usize], label: &LabelSequence) -> bool {
    let mut want = label.classes();
    let mut prev = None;
    for &c in classes {
        if Some(c) != prev && c != BLANK && want.next() != Some(c) {
            return false;
        }
        prev = Some(c);
    }
    want.next().is_none()
}

/// Visits all `classes^frames` paths in lexicographic order.
fn for_each_path(classes: usize, frames: usize, mut f: impl FnMut(&[usize])) -> Result<()> {
    let total = (classes as f64).powi(frames as i32);
    if total > ENUMERATION_CAP as f64 {
        return Err(Error::Capacity {
            paths: total,
            cap: ENUMERATION_CAP,
        });
    }
    let mut path = vec![0usize; frames];
    loop {
        f(&path);
        let mut pos = frames;
        loop {
            if pos == 0 {
                return Ok(());
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < classes {
                break;
            }
            path[pos] = 0;
        }
    }
}

/// Negative log of the summed path probability, by explicit enumeration.
/// Reference oracle for [`ctc_loss_dp`].
pub fn ctc_loss_bruteforce<S: Scalar>(probs: &ProbSequence<S>, label: &LabelSequence) -> Result<S> {
    let lp = probs.log_probs();
    let (frames, k) = lp.dims2().expect("2-D");
    check_label_classes(label, k)?;
    let mut path_scores = Vec::new();
    for_each_path(k, frames, |classes| {
        if collapses_to(classes, label) {
            path_scores.push(classes.iter().enumerate().map(|(t, &c)| lp.at2(t, c)).sum::<S>());
        }
    })?;
    if path_scores.is_empty() {
        return Err(Error::InfeasibleLabel {
            label_len: label.len(),
            min_frames: label.min_frames(),
            frames,
        });
    }
    Ok(-log_sum_exp(&path_scores))
}

fn check_label_classes(label: &LabelSequence, k: usize) -> Result<()> {
    match label.indices.iter().find(|&&i| i + 1 >= k) {
        Some(&i) => Err(Error::Index {
            what: "label symbol",
            index: i,
            size: k - 1,
        }),
        None => Ok(()),
    }
}

/// Loss and its gradient with respect to every log-probability entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcOutput<S> {
    pub loss: S,
    /// Row-major `T x K`.
    pub grad: Vec<S>,
}

/// Exact CTC loss by log-space forward-backward.
pub fn ctc_loss_dp<S: Scalar>(probs: &ProbSequence<S>, label: &LabelSequence) -> Result<CtcOutput<S>> {
    ctc_forward_backward(probs.log_probs(), label)
}

/// Forward-backward on an arbitrary `T x K` log-potential matrix.
///
/// Rows need not be normalized; the loss is `-ln Σ_paths exp(Σ_t x[t, π_t])`
/// and the gradient is minus the posterior occupancy of each (frame, class).
pub fn ctc_forward_backward<S: Scalar>(log_probs: &Tensor<S>, label: &LabelSequence) -> Result<CtcOutput<S>> {
    let (frames, k) = log_probs
        .dims2()
        .ok_or_else(|| Error::shape("ctc_loss", format!("{:?} is not 2-D", log_probs.shape())))?;
    check_label_classes(label, k)?;
    if frames < label.min_frames() {
        return Err(Error::InfeasibleLabel {
            label_len: label.len(),
            min_frames: label.min_frames(),
            frames,
        });
    }
    let lp = log_probs.data();
    // Extended label: blank, l1, blank, l2, ..., blank.
    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(BLANK);
    for c in label.classes() {
        ext.push(c);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    // Skip transition s-2 -> s allowed for a symbol differing from the previous symbol.
    let can_skip: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2])
        .collect();
    let ninf = S::neg_infinity();
    let emit = |t: usize, s: usize| lp[t * k + ext[s]];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = emit(0, 0);
    if s_len > 1 {
        alpha[1] = emit(0, 1);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = S::log_add_exp(acc, prev[s - 1]);
            }
            if can_skip[s] {
                acc = S::log_add_exp(acc, prev[s - 2]);
            }
            cur[s] = if acc == ninf { ninf } else { acc + emit(t, s) };
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = emit(frames - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = emit(frames - 1, s_len - 2);
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = S::log_add_exp(acc, next[s + 1]);
            }
            if s + 2 < s_len && can_skip[s + 2] {
                acc = S::log_add_exp(acc, next[s + 2]);
            }
            cur[s] = if acc == ninf { ninf } else { acc + emit(t, s) };
        }
    }

    let end = &alpha[last..];
    let log_p = if s_len > 1 {
        S::log_add_exp(end[s_len - 1], end[s_len - 2])
    } else {
        end[0]
    };
    if !log_p.is_finite() {
        return Err(Error::NonFinite { op: "ctc_loss".into() });
    }

    let mut grad = vec![S::zero(); frames * k];
    for t in 0..frames {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            let occupancy = (a + b - emit(t, s) - log_p).exp();
            let g = &mut grad[t * k + ext[s]];
            *g = *g - occupancy;
        }
    }
    Ok(CtcOutput { loss: -log_p, grad })
}

/// Records the CTC loss of a `T x K` log-probability node as a tape primitive.
pub fn ctc_loss<S: Scalar>(tape: &mut Tape<S>, log_probs: Var, label: &LabelSequence) -> Result<Var> {
    let out = ctc_forward_backward(tape.value(log_probs), label)?;
    tape.custom_scalar(log_probs, out.loss, out.grad)
}

/// Per-frame argmax (lowest index wins ties).
pub fn best_path<S: Scalar>(log_probs: &Tensor<S>) -> CtcPath {
    let k = log_probs.shape()[1];
    let classes = log_probs
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    CtcPath::new(classes)
}

/// Argmax per frame followed by collapse.
pub fn greedy_decode<S: Scalar>(probs: &ProbSequence<S>) -> LabelSequence {
    collapse(&best_path(probs.log_probs()))
}
