//! Jaccard set function and the loss layers built on it.
//!
//! Binary layers take a score vector `F` (one score per pixel) and labels in
//! `{-1, +1}`. Multiclass layers take a `p × C` score matrix and labels in
//! `0..C`. Every layer returns a [`LossOutput`] whose gradient has the shape
//! of its input.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{check_finite, check_len, Error, Result};
use crate::submodular::{lovasz_extension, ExtensionResult, SetFunction};

const CE_PROB_FLOOR: f64 = 1e-12;

/// Scalar loss plus its gradient with respect to the layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<G = Vec<f64>> {
    pub value: f64,
    pub grad: G,
}

/// Which classes enter the Lovász-Softmax average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassMode {
    /// Every class of the score matrix.
    All,
    /// Only classes that occur in the ground truth.
    Present,
}

/// Foreground indicator `{y = +1}` of binary labels.
pub fn foreground(labels: &[i8]) -> Vec<bool> {
    labels.iter().map(|&y| y == 1).collect()
}

/// Foreground indicator `{y = class}` of multiclass labels.
pub fn class_indicator(labels: &[usize], class: usize) -> Vec<bool> {
    labels.iter().map(|&y| y == class).collect()
}

/// `M ↦ |M| / |δ ∪ M|`, with the empty set mapped to 0 even when `δ` is empty.
pub fn jaccard_set_function(delta: &[bool]) -> Result<SetFunction> {
    let delta = delta.to_vec();
    let p = delta.len();
    SetFunction::new(p, move |m| {
        let mut errors = 0usize;
        let mut union = 0usize;
        for (&mi, &di) in m.iter().zip(&delta) {
            errors += mi as usize;
            union += (mi || di) as usize;
        }
        if errors == 0 {
            0.0
        } else {
            errors as f64 / union as f64
        }
    })
}

const MAX_PIXELS: usize = 1 << 31;

/// Lovász extension of the Jaccard loss and its gradient, using one sort and
/// running counts of foreground and background pixels along the sorted order.
pub fn jaccard_grad(errors: &[f64], delta: &[bool]) -> Result<ExtensionResult> {
    let p = delta.len();
    check_len(p, errors.len())?;
    if let Some(i) = errors.iter().position(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "errors[{i}] = {} must be finite and nonnegative",
            errors[i]
        )));
    }
    if p > MAX_PIXELS {
        return Err(Error::InvalidInput(format!("at most {MAX_PIXELS} pixels are supported")));
    }

    // Nonnegative floats order like their bit patterns, so the sort runs on
    // integers (`+ 0.0` folds -0 into +0): complemented bits give a
    // decreasing order, ties resolve by index, and the foreground flag rides
    // in the lowest bit below the index.
    let mut ranked: Vec<(u64, u32)> = errors
        .iter()
        .zip(delta)
        .enumerate()
        .map(|(i, (&e, &d))| (!(e + 0.0).to_bits(), (i as u32) << 1 | d as u32))
        .collect();
    ranked.sort_unstable();

    let gts = delta.iter().filter(|&&d| d).count() as f64;
    let mut seen_fg = 0.0;
    let mut seen_bg = 0.0;
    let mut previous = 0.0;
    let mut previous_error = 0.0;
    let mut value = 0.0;
    let mut gradient = vec![0.0; p];
    for &(key, tagged) in &ranked {
        let e = f64::from_bits(!key);
        if tagged & 1 == 1 {
            seen_fg += 1.0;
        } else {
            seen_bg += 1.0;
        }
        let intersection = gts - seen_fg;
        let union = gts + seen_bg;
        let loss = (union - intersection) / union;
        // summed by parts
        value += (previous_error - e) * previous;
        gradient[(tagged >> 1) as usize] = loss - previous;
        previous = loss;
        previous_error = e;
    }
    value += previous_error * previous;
    Ok(ExtensionResult { value, gradient })
}

fn check_binary_labels(labels: &[i8]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("need at least one pixel".into()));
    }
    if let Some(i) = labels.iter().position(|&y| y != 1 && y != -1) {
        return Err(Error::InvalidInput(format!(
            "binary label {} at {i} is not in {{-1, +1}}",
            labels[i]
        )));
    }
    Ok(())
}

/// Hinge margins `max(1 - F_i y_i, 0)` and their derivative with respect to `F_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct HingeMargins {
    pub errors: Vec<f64>,
    /// `-y_i` where the margin is strictly positive, 0 where it is clamped.
    pub d_errors_d_scores: Vec<f64>,
}

pub fn hinge_margins(scores: &[f64], labels: &[i8]) -> Result<HingeMargins> {
    check_len(labels.len(), scores.len())?;
    check_binary_labels(labels)?;
    check_finite("scores", scores)?;
    let mut errors = Vec::with_capacity(scores.len());
    let mut jac = Vec::with_capacity(scores.len());
    for (&f, &y) in scores.iter().zip(labels) {
        let y = f64::from(y);
        let raw = 1.0 - f * y;
        if raw > 0.0 {
            errors.push(raw);
            jac.push(-y);
        } else {
            errors.push(0.0);
            jac.push(0.0);
        }
    }
    Ok(HingeMargins {
        errors,
        d_errors_d_scores: jac,
    })
}

/// Lovász hinge on the Jaccard loss of the `+1` class.
pub fn lovasz_hinge(scores: &[f64], labels: &[i8]) -> Result<LossOutput> {
    let margins = hinge_margins(scores, labels)?;
    let ext = jaccard_grad(&margins.errors, &foreground(labels))?;
    Ok(chain_margins(ext, &margins))
}

/// Lovász hinge built on an arbitrary set function of the mispredicted
/// pixels, evaluated with the generic extension.
pub fn lovasz_hinge_with(setfn: &SetFunction, scores: &[f64], labels: &[i8]) -> Result<LossOutput> {
    let margins = hinge_margins(scores, labels)?;
    let ext = lovasz_extension(setfn, &margins.errors)?;
    Ok(chain_margins(ext, &margins))
}

fn chain_margins(ext: ExtensionResult, margins: &HingeMargins) -> LossOutput {
    let grad = ext
        .gradient
        .iter()
        .zip(&margins.d_errors_d_scores)
        .map(|(g, d)| g * d)
        .collect();
    LossOutput {
        value: ext.value,
        grad,
    }
}

/// Mean per-pixel hinge loss.
pub fn hinge(scores: &[f64], labels: &[i8]) -> Result<LossOutput> {
    let margins = hinge_margins(scores, labels)?;
    let n = scores.len() as f64;
    Ok(LossOutput {
        value: margins.errors.iter().sum::<f64>() / n,
        grad: margins.d_errors_d_scores.iter().map(|d| d / n).collect(),
    })
}

/// Mean logistic loss `log(1 + e^{-y F})`, i.e. two-class cross-entropy on
/// a single foreground score.
pub fn binary_cross_entropy(scores: &[f64], labels: &[i8]) -> Result<LossOutput> {
    check_len(labels.len(), scores.len())?;
    check_binary_labels(labels)?;
    check_finite("scores", scores)?;
    let n = scores.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&f, &y) in scores.iter().zip(labels) {
        let y = f64::from(y);
        let z = -y * f;
        // log(1 + e^z) without overflow
        value += if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        grad.push(-y * sigmoid(z) / n);
    }
    Ok(LossOutput {
        value: value / n,
        grad,
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max-shift.
pub fn softmax(scores: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = scores.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|s| (s - max).exp());
        let total = row.sum();
        row.mapv_inplace(|e| e / total);
    }
    out
}

fn check_multiclass(scores: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
    check_len(scores.nrows(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::InvalidInput("need at least one pixel".into()));
    }
    let c = scores.ncols();
    if let Some(&label) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::UnknownClass {
            label,
            num_classes: c,
        });
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidInput(format!("score {s} is not finite")));
    }
    Ok(())
}

/// Per-pixel errors for `class`: `1 - f_i(c)` on its pixels, `f_i(c)` elsewhere.
pub fn softmax_errors(probs: ArrayView2<'_, f64>, labels: &[usize], class: usize) -> Result<Vec<f64>> {
    check_len(probs.nrows(), labels.len())?;
    if class >= probs.ncols() {
        return Err(Error::UnknownClass {
            label: class,
            num_classes: probs.ncols(),
        });
    }
    Ok(probs
        .column(class)
        .iter()
        .zip(labels)
        .map(|(&f, &y)| if y == class { 1.0 - f } else { f })
        .collect())
}

/// Lovász-Softmax: mean over the selected classes of the Jaccard extension
/// on softmax errors. The gradient is taken with respect to the raw scores.
pub fn lovasz_softmax(
    scores: ArrayView2<'_, f64>,
    labels: &[usize],
    mode: ClassMode,
) -> Result<LossOutput<Array2<f64>>> {
    check_multiclass(scores, labels)?;
    let num_classes = scores.ncols();
    if num_classes < 2 {
        return Err(Error::InvalidInput("need at least two classes".into()));
    }
    let probs = softmax(scores);

    let classes: Vec<usize> = match mode {
        ClassMode::All => (0..num_classes).collect(),
        ClassMode::Present => {
            let mut present = vec![false; num_classes];
            for &y in labels {
                present[y] = true;
            }
            (0..num_classes).filter(|&c| present[c]).collect()
        }
    };
    let weight = 1.0 / classes.len() as f64;

    // d loss / d f_i(c)
    let mut d_probs = Array2::<f64>::zeros(probs.raw_dim());
    let mut value = 0.0;
    for &c in &classes {
        let errors = softmax_errors(probs.view(), labels, c)?;
        let ext = jaccard_grad(&errors, &class_indicator(labels, c))?;
        value += weight * ext.value;
        for (i, (&g, &y)) in ext.gradient.iter().zip(labels).enumerate() {
            let sign = if y == c { -1.0 } else { 1.0 };
            d_probs[[i, c]] = weight * sign * g;
        }
    }

    Ok(LossOutput {
        value,
        grad: softmax_backward(probs.view(), d_probs.view()),
    })
}

/// Backpropagates `d loss / d f` through a row-wise softmax.
pub fn softmax_backward(probs: ArrayView2<'_, f64>, d_probs: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(probs.raw_dim());
    for ((f, s), mut o) in probs
        .axis_iter(Axis(0))
        .zip(d_probs.axis_iter(Axis(0)))
        .zip(out.axis_iter_mut(Axis(0)))
    {
        let dot: f64 = f.iter().zip(s.iter()).map(|(a, b)| a * b).sum();
        for ((o, &fk), &sk) in o.iter_mut().zip(f.iter()).zip(s.iter()) {
            *o = fk * (sk - dot);
        }
    }
    out
}

/// Mean cross-entropy of the softmax of `scores`. Probabilities are floored
/// at 1e-12 before the log.
pub fn cross_entropy(scores: ArrayView2<'_, f64>, labels: &[usize]) -> Result<LossOutput<Array2<f64>>> {
    check_multiclass(scores, labels)?;
    let p = labels.len() as f64;
    let mut grad = softmax(scores);
    let mut value = 0.0;
    for (mut row, &y) in grad.axis_iter_mut(Axis(0)).zip(labels) {
        value -= row[y].max(CE_PROB_FLOOR).ln();
        row[y] -= 1.0;
        row.mapv_inplace(|g| g / p);
    }
    Ok(LossOutput {
        value: value / p,
        grad,
    })
}

/// IoU approximation that replaces intersection and union by sums of
/// foreground probabilities: `I = Σ f_i [y_i = 1]`, `U = Σ (f_i + [y_i = 1]) - I`,
/// loss `1 - I/U`.
///
/// `U = 0` (no foreground, all probabilities zero) is treated as a perfect
/// prediction with zero gradient.
pub fn rahman_wang_iou(probs: &[f64], labels: &[i8]) -> Result<LossOutput> {
    check_len(labels.len(), probs.len())?;
    check_binary_labels(labels)?;
    if let Some(i) = probs.iter().position(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::InvalidInput(format!(
            "probability {} at {i} is outside [0, 1]",
            probs[i]
        )));
    }
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&f, &y) in probs.iter().zip(labels) {
        let fg = if y == 1 { 1.0 } else { 0.0 };
        inter += f * fg;
        union += f + fg;
    }
    union -= inter;
    if union == 0.0 {
        return Ok(LossOutput {
            value: 0.0,
            grad: vec![0.0; probs.len()],
        });
    }
    // d(I/U)/df_i = (I' U - I U') / U², with I' = [y=1] and U' = 1 - [y=1].
    let grad = labels
        .iter()
        .map(|&y| {
            let (di, du) = if y == 1 { (1.0, 0.0) } else { (0.0, 1.0) };
            -(di * union - inter * du) / (union * union)
        })
        .collect();
    Ok(LossOutput {
        value: 1.0 - inter / union,
        grad,
    })
}

/// [`rahman_wang_iou`] on sigmoid probabilities of binary scores, with the
/// gradient chained back to the scores.
pub fn rahman_wang_from_scores(scores: &[f64], labels: &[i8]) -> Result<LossOutput> {
    check_finite("scores", scores)?;
    let probs: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
    let out = rahman_wang_iou(&probs, labels)?;
    let grad = out
        .grad
        .iter()
        .zip(&probs)
        .map(|(g, f)| g * f * (1.0 - f))
        .collect();
    Ok(LossOutput {
        value: out.value,
        grad,
    })
}
