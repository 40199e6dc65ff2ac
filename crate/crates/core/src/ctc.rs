//! Connectionist temporal classification: log-space forward-backward loss,
//! best-path decoding, and a brute-force path enumerator used as an oracle.
//!
//! Class index 0 is the blank; labels are `1..=A`.

use crate::autograd::{BackwardOp, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::log_softmax_forward;
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Largest path count [`ctc_bruteforce`] will enumerate.
pub const BRUTEFORCE_LIMIT: u64 = 10_000_000;

/// A `T × (A+1)` row-stochastic matrix of per-frame posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameProbs {
    frames: usize,
    classes: usize,
    data: Vec<f64>,
}

impl FrameProbs {
    pub fn new(frames: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || classes < 2 {
            return Err(Error::Dimension(format!(
                "frame posteriors need T >= 1 and at least blank plus one label, got {frames}x{classes}"
            )));
        }
        if data.len() != frames * classes {
            return Err(Error::Dimension(format!(
                "{frames}x{classes} posteriors need {} values, got {}",
                frames * classes,
                data.len()
            )));
        }
        for (t, row) in data.chunks_exact(classes).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Contract(format!(
                    "frame {t} has a probability outside [0, 1]"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("frame {t} sums to {total}, not 1")));
            }
        }
        Ok(FrameProbs {
            frames,
            classes,
            data,
        })
    }

    /// Softmax of a `T × (A+1)` logit matrix.
    pub fn from_logits(frames: usize, classes: usize, logits: &[f64]) -> Result<Self> {
        let t = Tensor::new(
            crate::tensor::Shape::new(1, 1, frames, classes)?,
            logits.to_vec(),
        )?;
        let probs = crate::layers::softmax_forward(&t);
        FrameProbs::new(frames, classes, probs.into_data())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Alphabet size plus one for the blank.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn alphabet_size(&self) -> usize {
        self.classes - 1
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Labels in `1..=A`, never the blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.contains(&BLANK) {
            return Err(Error::Contract(
                "label sequence contains the blank index".into(),
            ));
        }
        Ok(LabelSequence(labels))
    }

    pub fn empty() -> Self {
        LabelSequence(Vec::new())
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_label(&self) -> Option<usize> {
        self.0.iter().copied().max()
    }

    /// Frames needed to emit this sequence: one per label plus a blank
    /// between each pair of equal neighbours.
    pub fn required_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Digits rendered as text, assuming label `d + 1` encodes digit `d`.
    pub fn to_digit_string(&self) -> String {
        self.0
            .iter()
            .map(|&l| char::from_digit((l - 1) as u32, 10).unwrap_or('?'))
            .collect()
    }
}

/// Merges adjacent repeats, then drops blanks.
pub fn collapse(path: &[usize]) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    LabelSequence(out)
}

/// Per-frame argmax (lowest index on ties), then [`collapse`].
pub fn greedy_decode(probs: &FrameProbs) -> LabelSequence {
    let path: Vec<usize> = (0..probs.frames()).map(|t| argmax(probs.row(t))).collect();
    collapse(&path)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Loss and its gradient with respect to the pre-softmax logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcOutput {
    pub loss: f64,
    /// Row-major `T × (A+1)`.
    pub grad: Vec<f64>,
}

/// `−log P(target | probs)` by forward-backward over the blank-interleaved
/// target, computed in log space on floored probabilities.
pub fn ctc_loss(probs: &FrameProbs, target: &LabelSequence) -> Result<CtcOutput> {
    let log_probs: Vec<f64> = probs.data.iter().map(|&p| p.max(PROB_FLOOR).ln()).collect();
    ctc_loss_log(&log_probs, probs.frames, probs.classes, target)
}

/// Same as [`ctc_loss`] but starting from per-frame log-probabilities.
/// The gradient assumes those came from a softmax over logits.
pub fn ctc_loss_log(
    log_probs: &[f64],
    frames: usize,
    classes: usize,
    target: &LabelSequence,
) -> Result<CtcOutput> {
    if let Some(max) = target.max_label() {
        if max >= classes {
            return Err(Error::Contract(format!(
                "label {max} outside alphabet of {} labels",
                classes - 1
            )));
        }
    }
    let required = target.required_frames();
    if frames < required {
        return Err(Error::Infeasible {
            required,
            available: frames,
        });
    }
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.labels().iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs[t * classes + k];
    // transitions s-2 -> s are allowed onto a label that differs from the previous label
    let skip: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2])
        .collect();

    let mut alpha = vec![f64::NEG_INFINITY; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip[s] {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = acc + lp(t, ext[s]);
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = if s_len > 1 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };

    let mut beta = vec![f64::NEG_INFINITY; frames * s_len];
    beta[last + s_len - 1] = lp(frames - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(frames - 1, ext[s_len - 2]);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && skip[s + 2] {
                acc = log_add(acc, next[s + 2]);
            }
            beta[t * s_len + s] = acc + lp(t, ext[s]);
        }
    }

    // γ_t(k) = Σ_{s: ext[s]=k} α_t(s)β_t(s) / (P·y_t(k)); ∂loss/∂logit = y − γ
    let mut grad = vec![0.0; frames * classes];
    let mut occupancy = vec![f64::NEG_INFINITY; classes];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for s in 0..s_len {
            let k = ext[s];
            occupancy[k] = log_add(occupancy[k], alpha[t * s_len + s] + beta[t * s_len + s]);
        }
        for k in 0..classes {
            let y = lp(t, k).exp();
            let gamma = if occupancy[k] == f64::NEG_INFINITY {
                0.0
            } else {
                (occupancy[k] - lp(t, k) - log_p).exp()
            };
            grad[t * classes + k] = y - gamma;
        }
    }
    Ok(CtcOutput { loss: -log_p, grad })
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Sums the probability of every length-`T` path that collapses to
/// `target` by explicit enumeration; returns `−log` of the sum.
pub fn ctc_bruteforce(probs: &FrameProbs, target: &LabelSequence) -> Result<f64> {
    let (frames, classes) = (probs.frames, probs.classes);
    let count = (classes as u64)
        .checked_pow(frames as u32)
        .filter(|&n| n <= BRUTEFORCE_LIMIT);
    let Some(count) = count else {
        return Err(Error::Size(format!(
            "{classes}^{frames} paths exceeds the enumeration limit of {BRUTEFORCE_LIMIT}"
        )));
    };
    let required = target.required_frames();
    if frames < required {
        return Err(Error::Infeasible {
            required,
            available: frames,
        });
    }
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    for index in 0..count {
        let mut rest = index;
        for slot in path.iter_mut().rev() {
            *slot = (rest % classes as u64) as usize;
            rest /= classes as u64;
        }
        if collapses_to(&path, target.labels()) {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &k)| probs.row(t)[k])
                .product::<f64>();
        }
    }
    Ok(-total.ln())
}

fn collapses_to(path: &[usize], target: &[usize]) -> bool {
    let mut matched = 0;
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            if matched == target.len() || target[matched] != k {
                return false;
            }
            matched += 1;
        }
        prev = Some(k);
    }
    matched == target.len()
}

/// Mean CTC loss over a batch of `(n, 1, T, A+1)` logits, one target per
/// sample. The softmax over classes is part of the op.
pub fn ctc_loss_batch(tape: &mut Tape, logits: Var, targets: &[LabelSequence]) -> Result<Var> {
    let z = tape.value(logits);
    let s = z.shape();
    if s.h != 1 || s.n != targets.len() {
        return Err(Error::Dimension(format!(
            "CTC needs (n,1,T,A+1) logits for {} targets, got {s}",
            targets.len()
        )));
    }
    let log_probs = log_softmax_forward(z);
    let per_sample = s.w * s.c;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(z.len());
    for (i, target) in targets.iter().enumerate() {
        let lp = &log_probs.data()[i * per_sample..(i + 1) * per_sample];
        let out = ctc_loss_log(lp, s.w, s.c, target)?;
        loss += out.loss;
        grad.extend(out.grad);
    }
    let n = s.n as f64;
    let grad = Tensor::new(s, grad)?.scale(1.0 / n);
    Ok(tape.record(Tensor::scalar(loss / n), &[logits], CtcOp { grad }))
}

struct CtcOp {
    grad: Tensor,
}

impl BackwardOp for CtcOp {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![Some(self.grad.scale(grad.item()))]
    }
}
