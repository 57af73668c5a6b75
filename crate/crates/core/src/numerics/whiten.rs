//! Symmetric (ZCA) whitening.

use super::{sym_eigen, Matrix, NumericsError};

pub const DEFAULT_WHITEN_EPS: f64 = 1e-8;

/// Mean and `(Σ + εI)^{-1/2}`; apply with [`Whitening::apply`].
#[derive(Clone, Debug)]
pub struct Whitening {
    pub mean: Vec<f64>,
    pub transform: Matrix,
}

impl Whitening {
    pub fn apply(&self, samples: &Matrix) -> Matrix {
        let mut centered = samples.clone();
        for i in 0..centered.rows() {
            for (x, m) in centered.row_mut(i).iter_mut().zip(&self.mean) {
                *x -= m;
            }
        }
        centered.matmul(&self.transform)
    }
}

/// Sample covariance with `1/n` normalization; rows are samples.
pub fn covariance(samples: &Matrix) -> (Vec<f64>, Matrix) {
    let (n, d) = samples.shape();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(samples.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = samples.clone();
    for i in 0..n {
        for (x, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    let mut cov = centered.matmul_tn(&centered);
    cov.scale(1.0 / n as f64);
    (mean, cov)
}

/// Whiten rows of `samples`. Returns the whitened samples and the transform.
pub fn whiten(samples: &Matrix, eps_reg: f64) -> Result<(Matrix, Whitening), NumericsError> {
    if samples.rows() == 0 {
        return Err(NumericsError::Shape("whiten: no samples".into()));
    }
    if !(eps_reg > 0.0) {
        return Err(NumericsError::Shape(format!("whiten: eps_reg must be positive, got {eps_reg}")));
    }
    let (mean, cov) = covariance(samples);
    let (vals, vecs) = sym_eigen(&cov)?;
    if let Some(&min) = vals.last() {
        if min < -1e-10 {
            return Err(NumericsError::NegativeEigenvalue(min));
        }
    }
    let d = vals.len();
    let mut scaled = vecs.clone();
    for k in 0..d {
        let f = 1.0 / (vals[k].max(0.0) + eps_reg).sqrt();
        for i in 0..d {
            scaled[(i, k)] *= f;
        }
    }
    let transform = scaled.matmul_nt(&vecs);
    let w = Whitening { mean, transform };
    Ok((w.apply(samples), w))
}
