use super::{Matrix, Parameters};

/// Compares analytic gradients against central differences.
///
/// `eval` returns the scalar loss and the analytic gradient (one matrix per
/// parameter, in `Parameters` order). The result is the maximum over all scalars of
/// `|g_fd - g| / max(1, |g_fd|, |g|)`.
pub fn finite_diff_check<P, F>(params: &mut P, mut eval: F, h: f64) -> f64
where
    P: Parameters,
    F: FnMut(&P) -> (f64, Vec<Matrix>),
{
    let (_, analytic) = eval(params);
    let shapes: Vec<(usize, usize)> = params.params().iter().map(|m| m.shape()).collect();
    let mut worst = 0.0f64;
    for (pi, &(rows, cols)) in shapes.iter().enumerate() {
        for k in 0..rows * cols {
            let orig = params.params()[pi].data()[k];
            params.params_mut()[pi].data_mut()[k] = orig + h;
            let up = eval(params).0;
            params.params_mut()[pi].data_mut()[k] = orig - h;
            let down = eval(params).0;
            params.params_mut()[pi].data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = analytic[pi].data()[k];
            let rel = (fd - g).abs() / 1f64.max(fd.abs()).max(g.abs());
            worst = worst.max(rel);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{affine_row, affine_row_backward, bce_term, sigmoid_scalar, softmax_cross_entropy, BinaryWeights};

    fn toy_inputs() -> (Vec<Vec<f64>>, Vec<f64>) {
        let xs = vec![
            vec![0.5, -1.0, 0.3, 2.0],
            vec![-0.2, 0.1, 0.9, -0.4],
            vec![1.1, 0.0, -0.7, 0.25],
        ];
        (xs, vec![1.0, 0.0, 1.0])
    }

    // 4 -> 3 affine, sigmoid, 3 -> 1 affine... flattened to 4x3 + 3 + 3x1 + 1 = 19, plus
    // one extra bias-like scalar to reach 20 parameters.
    #[test]
    fn affine_sigmoid_bce_toy_net() {
        let mut params = vec![
            Matrix::from_vec(4, 3, (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect()).unwrap(),
            Matrix::from_vec(1, 3, vec![0.1, -0.2, 0.05]).unwrap(),
            Matrix::from_vec(3, 1, vec![0.4, -0.6, 0.9]).unwrap(),
            Matrix::from_vec(1, 1, vec![0.02]).unwrap(),
            Matrix::from_vec(1, 1, vec![0.3]).unwrap(),
        ];
        assert_eq!(params.num_scalars(), 20);
        let (xs, ts) = toy_inputs();
        let eval = |p: &Vec<Matrix>| {
            let mut grads = p.zero_like();
            let mut loss = 0.0;
            for (x, &t) in xs.iter().zip(&ts) {
                let mut hidden = vec![0.0; 3];
                affine_row(x, &p[0], &p[1], &mut hidden);
                let act: Vec<f64> = hidden.iter().map(|&z| sigmoid_scalar(z)).collect();
                let mut out = [0.0];
                affine_row(&act, &p[2], &p[3], &mut out);
                // extra scalar scales the output logit
                let z = out[0] * p[4].get(0, 0);
                let pr = sigmoid_scalar(z);
                let (v, dp) = bce_term(pr, t, BinaryWeights::default());
                loss += v;
                let dz = dp * pr * (1.0 - pr);
                grads[4].data_mut()[0] += dz * out[0];
                let dout = [dz * p[4].get(0, 0)];
                let mut dact = vec![0.0; 3];
                let (g0, rest) = grads.split_at_mut(2);
                let (g2, g3) = rest.split_at_mut(1);
                affine_row_backward(&act, &p[2], &dout, &mut g2[0], &mut g3[0], Some(&mut dact));
                let dhidden: Vec<f64> = dact.iter().zip(&act).map(|(d, a)| d * a * (1.0 - a)).collect();
                let (g00, g01) = g0.split_at_mut(1);
                affine_row_backward(x, &p[0], &dhidden, &mut g00[0], &mut g01[0], None);
            }
            (loss, grads)
        };
        let err = finite_diff_check(&mut params, eval, 1e-5);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut params = vec![Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()];
        let err = finite_diff_check(&mut params, |p| (7.0, p.zero_like()), 1e-5);
        assert!(err < 1e-12);
    }

    #[test]
    fn softmax_ce_head() {
        let mut params = vec![
            Matrix::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
            Matrix::from_vec(1, 4, vec![0.1, 0.0, -0.1, 0.2]).unwrap(),
        ];
        let xs = Matrix::from_rows(&[vec![1.0, -0.5, 0.2], vec![0.3, 0.3, -1.0]]).unwrap();
        let targets = [3usize, 1];
        let eval = |p: &Vec<Matrix>| {
            let logits = crate::numkit::affine(&xs, &p[0], &p[1]).unwrap();
            let lg = softmax_cross_entropy(&logits, &targets, None).unwrap();
            let mut grads = p.zero_like();
            for r in 0..xs.rows() {
                let (gw, gb) = grads.split_at_mut(1);
                affine_row_backward(xs.row(r), &p[0], &lg.grad[r * 4..(r + 1) * 4], &mut gw[0], &mut gb[0], None);
            }
            (lg.value, grads)
        };
        let err = finite_diff_check(&mut params, eval, 1e-5);
        assert!(err < 1e-4, "relative error {err}");
    }
}
