//! Elementwise nonlinearities, affine maps and losses with their gradients.

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Lower/upper clamp applied to probabilities inside cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

/// `y = x W + b`, with `b` broadcast across rows.
pub fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    if x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols() {
        return Err(Error::dim(format!(
            "affine: x {:?}, W {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("affine input".into()));
    }
    let mut y = x.matmul(w)?;
    for r in 0..y.rows() {
        for (v, bias) in y.row_mut(r).iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(y)
}

/// Single-row affine map into `out`. Hot path: shapes are only debug-checked.
#[inline]
pub fn affine_row(x: &[f64], w: &Matrix, b: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), w.rows());
    debug_assert_eq!(out.len(), w.cols());
    out.copy_from_slice(b.data());
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
}

/// Accumulates gradients of `y = x W + b` given `dy`. Adds `W dy` into `dx` when provided.
#[inline]
pub fn affine_row_backward(
    x: &[f64],
    w: &Matrix,
    dy: &[f64],
    dw: &mut Matrix,
    db: &mut Matrix,
    dx: Option<&mut [f64]>,
) {
    for (g, &d) in db.data_mut().iter_mut().zip(dy) {
        *g += d;
    }
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (g, &d) in dw.row_mut(i).iter_mut().zip(dy) {
            *g += xi * d;
        }
    }
    if let Some(dx) = dx {
        for (i, g) in dx.iter_mut().enumerate() {
            *g += dot(w.row(i), dy);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    let data = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Matrix::from_vec(x.rows(), x.cols(), data).expect("sigmoid keeps shape and finiteness")
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    Ok(out)
}

#[inline]
pub fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Loss value together with its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Per-polarity weights of a binary cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryWeights {
    pub positive: f64,
    pub negative: f64,
}

impl Default for BinaryWeights {
    fn default() -> Self {
        Self {
            positive: 1.0,
            negative: 1.0,
        }
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Single-term weighted BCE and its derivative with respect to `p`.
#[inline]
pub fn bce_term(p: f64, target: f64, weights: BinaryWeights) -> (f64, f64) {
    let pc = clamp_prob(p);
    let value = -(weights.positive * target * pc.ln() + weights.negative * (1.0 - target) * (1.0 - pc).ln());
    let grad = -weights.positive * target / pc + weights.negative * (1.0 - target) / (1.0 - pc);
    (value, grad)
}

/// Mean binary cross-entropy; gradient is with respect to the probabilities.
pub fn binary_cross_entropy(
    predicted: &[f64],
    target: &[f64],
    weights: Option<BinaryWeights>,
) -> Result<LossGrad> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(Error::dim(format!(
            "binary cross-entropy over {} predictions and {} targets",
            predicted.len(),
            target.len()
        )));
    }
    let w = weights.unwrap_or_default();
    let n = predicted.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(predicted.len());
    for (&p, &t) in predicted.iter().zip(target) {
        let (v, g) = bce_term(p, t, w);
        value += v;
        grad.push(g / n);
    }
    Ok(LossGrad {
        value: value / n,
        grad,
    })
}

/// Mean categorical cross-entropy over simplex rows. Gradient is with respect to
/// the probabilities, row-major.
pub fn categorical_cross_entropy(
    predicted: &Matrix,
    target: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<LossGrad> {
    check_categorical(predicted.rows(), predicted.cols(), target, class_weights)?;
    let n = predicted.rows() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; predicted.data().len()];
    for (r, &t) in target.iter().enumerate() {
        let w = class_weights.map_or(1.0, |cw| cw[t]);
        let p = clamp_prob(predicted.get(r, t));
        value -= w * p.ln();
        grad[r * predicted.cols() + t] = -w / (p * n);
    }
    Ok(LossGrad {
        value: value / n,
        grad,
    })
}

/// Softmax followed by categorical cross-entropy; gradient is with respect to the logits.
pub fn softmax_cross_entropy(
    logits: &Matrix,
    target: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<LossGrad> {
    check_categorical(logits.rows(), logits.cols(), target, class_weights)?;
    let n = logits.rows() as f64;
    let c = logits.cols();
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.data().len()];
    for (r, &t) in target.iter().enumerate() {
        let w = class_weights.map_or(1.0, |cw| cw[t]);
        let g = &mut grad[r * c..(r + 1) * c];
        softmax_into(logits.row(r), g);
        value -= w * clamp_prob(g[t]).ln();
        g[t] -= 1.0;
        for v in g.iter_mut() {
            *v *= w / n;
        }
    }
    Ok(LossGrad {
        value: value / n,
        grad,
    })
}

fn check_categorical(
    rows: usize,
    cols: usize,
    target: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<()> {
    if rows != target.len() || rows == 0 {
        return Err(Error::dim(format!("{rows} rows against {} targets", target.len())));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= cols) {
        return Err(Error::param(format!("target class {bad} out of {cols}")));
    }
    if let Some(cw) = class_weights {
        if cw.len() != cols {
            return Err(Error::dim(format!("{} class weights for {cols} classes", cw.len())));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn affine_examples() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let b = Matrix::row_vector(&[0.0, 0.0]).unwrap();
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[2.0, 0.0]);

        let x = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let w = Matrix::filled(2, 2, 1.0);
        let b = Matrix::row_vector(&[1.0, 1.0]).unwrap();
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn affine_rejects_bad_shapes() {
        let x = Matrix::zeros(2, 3);
        let w = Matrix::zeros(2, 2);
        let b = Matrix::zeros(1, 2);
        assert!(matches!(affine(&x, &w, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matrix_rejects_non_finite() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(Matrix::from_vec(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_abs_diff_eq!(sigmoid_scalar(1000.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sigmoid_scalar(3f64.ln()), 0.75, epsilon = 1e-15);
        assert!(sigmoid_scalar(-1000.0) >= 0.0);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let s = softmax(&[80.0, -80.0]).unwrap();
        assert!(s[1] < 1e-60 && s[1] > 0.0);
        assert_abs_diff_eq!(s[1], 1.0 / (1.0 + 160f64.exp()), epsilon = 1e-80);
        assert_eq!(s[0], 1.0);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let l = binary_cross_entropy(&[0.5], &[1.0], None).unwrap();
        assert_abs_diff_eq!(l.value, std::f64::consts::LN_2, epsilon = 1e-15);

        let w = BinaryWeights {
            positive: 2.0,
            negative: 1.0,
        };
        let l = binary_cross_entropy(&[0.5], &[1.0], Some(w)).unwrap();
        assert_abs_diff_eq!(l.value, 2.0 * std::f64::consts::LN_2, epsilon = 1e-15);

        let p = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let l = categorical_cross_entropy(&p, &[0], None).unwrap();
        assert!(l.value.abs() < 1e-11);
    }

    #[test]
    fn clamped_cross_entropy_is_finite() {
        let l = binary_cross_entropy(&[1.0, 0.0], &[0.0, 1.0], None).unwrap();
        assert!(l.value.is_finite());
        // 1 - (1 - 1e-12) is not exactly 1e-12 in binary, hence the loose bound
        assert!((l.value / -(PROB_CLAMP.ln()) - 1.0).abs() < 1e-5);
        assert!(l.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn softmax_ce_matches_categorical_on_probabilities() {
        let logits = Matrix::from_rows(&[vec![0.3, -1.2, 2.0], vec![0.0, 0.1, -0.1]]).unwrap();
        let probs: Vec<Vec<f64>> = (0..2).map(|r| softmax(logits.row(r)).unwrap()).collect();
        let probs = Matrix::from_rows(&probs).unwrap();
        let a = softmax_cross_entropy(&logits, &[2, 0], None).unwrap();
        let b = categorical_cross_entropy(&probs, &[2, 0], None).unwrap();
        assert_abs_diff_eq!(a.value, b.value, epsilon = 1e-14);
    }
}
