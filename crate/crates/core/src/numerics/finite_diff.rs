//! Central-difference gradients, used as an oracle for analytic and tape gradients.

use super::Matrix;

/// `(L(p + h eᵢ) − L(p − h eᵢ)) / 2h` for every entry of every parameter.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &[Matrix], h: f64) -> Vec<Matrix>
where
    F: FnMut(&[Matrix]) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut work = params.to_vec();
    let mut grads: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    for k in 0..params.len() {
        for idx in 0..params[k].len() {
            let orig = work[k].as_slice()[idx];
            work[k].as_mut_slice()[idx] = orig + h;
            let up = loss_fn(&work);
            work[k].as_mut_slice()[idx] = orig - h;
            let down = loss_fn(&work);
            work[k].as_mut_slice()[idx] = orig;
            grads[k].as_mut_slice()[idx] = (up - down) / (2.0 * h);
        }
    }
    grads
}

/// `‖a − b‖ / max(‖b‖, floor)`, Frobenius over the whole list.
pub fn relative_error(a: &[Matrix], b: &[Matrix], floor: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += x.sub(y).frobenius_sq();
        den += y.frobenius_sq();
    }
    num.sqrt() / den.sqrt().max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let p = vec![Matrix::from_rows(&[vec![1.0, 2.0]])];
        let g = finite_diff_grad(|ps| ps[0].frobenius_sq(), &p, 1e-5);
        assert!((g[0][(0, 0)] - 2.0).abs() < 1e-6);
        assert!((g[0][(0, 1)] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = vec![Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])];
        let g = finite_diff_grad(|_| 7.0, &p, 1e-4);
        assert_eq!(g[0].max_abs(), 0.0);
    }
}
