//! Adam with bias correction and optional global-norm clipping.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::{Matrix, NumericsError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

/// Moment accumulators for a fixed list of named parameter buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub names: Vec<String>,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(config: AdamConfig, names: Vec<String>, lens: &[usize]) -> Self {
        assert_eq!(names.len(), lens.len());
        Self {
            config,
            names,
            m: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    /// One update. Returns the pre-clip global gradient norm.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[&[T]], clip: Option<f64>) -> Result<f64, NumericsError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NumericsError::Shape(format!(
                "adam: expected {} parameter buffers, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(NumericsError::Shape(format!(
                    "adam: parameter '{}' has {} entries, gradient {}, state {}",
                    self.names[i],
                    p.len(),
                    g.len(),
                    self.m[i].len()
                )));
            }
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| {
                let x = x.to_f64().unwrap_or(f64::NAN);
                x * x
            })
            .sum::<f64>()
            .sqrt();
        let scale = match clip {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let cfg = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let b1 = T::from(cfg.beta1).unwrap();
        let b2 = T::from(cfg.beta2).unwrap();
        let one = T::one();
        let step_size = T::from(cfg.lr / bc1).unwrap();
        let inv_bc2 = T::from(1.0 / bc2).unwrap();
        let eps = T::from(cfg.eps).unwrap();
        let sc = T::from(scale).unwrap();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                let gj = g[j] * sc;
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let vhat = v[j] * inv_bc2;
                p[j] = p[j] - step_size * m[j] / (vhat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

/// Matrix-facing Adam step: updates `params` in place.
pub fn adam_step(
    params: &mut [Matrix],
    grads: &[Matrix],
    state: &mut AdamState<f64>,
    clip: Option<f64>,
) -> Result<f64, NumericsError> {
    if params.len() != grads.len() {
        return Err(NumericsError::Shape(format!("adam: {} params but {} grads", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            let name = state.names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(NumericsError::Shape(format!(
                "adam: parameter '{name}' is {:?} but its gradient is {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    let mut ps: Vec<&mut [f64]> = params.iter_mut().map(|m| m.as_mut_slice()).collect();
    let gs: Vec<&[f64]> = grads.iter().map(|m| m.as_slice()).collect();
    state.update(&mut ps, &gs, clip)
}

pub fn adam_state_for(config: AdamConfig, names: &[&str], params: &[Matrix]) -> AdamState<f64> {
    let lens: Vec<usize> = params.iter().map(Matrix::len).collect();
    AdamState::new(config, names.iter().map(|s| s.to_string()).collect(), &lens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity_on_params() {
        let mut p = vec![Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]])];
        let before = p.clone();
        let mut st = adam_state_for(AdamConfig::with_lr(0.1), &["w"], &p);
        let g = vec![Matrix::zeros(2, 2)];
        adam_step(&mut p, &g, &mut st, None).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn one_step_descends_on_square() {
        let mut p = vec![Matrix::from_rows(&[vec![1.0]])];
        let mut st = adam_state_for(AdamConfig::with_lr(0.1), &["x"], &p);
        let g = vec![p[0].scaled(2.0)];
        adam_step(&mut p, &g, &mut st, None).unwrap();
        assert!(p[0][(0, 0)] < 1.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(x, y) = 3x² + 0.5y² + xy
        let loss = |m: &Matrix| {
            let (x, y) = (m[(0, 0)], m[(0, 1)]);
            3.0 * x * x + 0.5 * y * y + x * y
        };
        let mut p = vec![Matrix::from_rows(&[vec![2.0, -3.0]])];
        let initial = loss(&p[0]);
        let mut st = adam_state_for(AdamConfig::with_lr(0.05), &["xy"], &p);
        for _ in 0..200 {
            let (x, y) = (p[0][(0, 0)], p[0][(0, 1)]);
            let g = vec![Matrix::from_rows(&[vec![6.0 * x + y, y + x]])];
            adam_step(&mut p, &g, &mut st, None).unwrap();
        }
        let fin = loss(&p[0]);
        assert!(fin <= 1e-4 * initial, "final {fin} initial {initial}");
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let mut p = vec![Matrix::zeros(2, 2), Matrix::zeros(1, 3)];
        let mut st = adam_state_for(AdamConfig::with_lr(0.1), &["a", "bias"], &p);
        let g = vec![Matrix::zeros(2, 2), Matrix::zeros(3, 1)];
        let err = adam_step(&mut p, &g, &mut st, None).unwrap_err().to_string();
        assert!(err.contains("bias"), "{err}");
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut a = vec![Matrix::from_rows(&[vec![0.0, 0.0]])];
        let mut b = a.clone();
        let mut sa = adam_state_for(AdamConfig::with_lr(0.1), &["w"], &a);
        let mut sb = sa.clone();
        let big = vec![Matrix::from_rows(&[vec![300.0, 400.0]])];
        let small = vec![Matrix::from_rows(&[vec![3.0, 4.0]])];
        let n = adam_step(&mut a, &big, &mut sa, Some(5.0)).unwrap();
        adam_step(&mut b, &small, &mut sb, None).unwrap();
        assert!((n - 500.0).abs() < 1e-9);
        assert!(a[0].sub(&b[0]).max_abs() < 1e-12);
    }
}
