//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }
}

/// One Adam update of `params` in place. `t` is the 1-based step index.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    hyper: &AdamHyper,
    t: u64,
) -> Result<()> {
    if grads.len() != params.len()
        || moments.first.len() != params.len()
        || moments.second.len() != params.len()
    {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {}/{} moments",
            params.len(),
            grads.len(),
            moments.first.len(),
            moments.second.len()
        )));
    }
    if t == 0 {
        return Err(Error::Config("adam step index starts at 1".into()));
    }
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        let m = hyper.beta1 * moments.first[i] + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * moments.second[i] + (1.0 - hyper.beta2) * g * g;
        moments.first[i] = m;
        moments.second[i] = v;
        params[i] -= hyper.lr * (m / bc1) / ((v / bc2).sqrt() + hyper.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.5, -1.0, 2.0];
        let mut m = Moments::zeros(3);
        for t in 1..=5 {
            adam_step(&mut p, &[0.0; 3], &mut m, &AdamHyper::default(), t).unwrap();
        }
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_step_matches_scalar_oracle() {
        // at t = 1 the bias-corrected moments are g and g^2
        let hyper = AdamHyper {
            lr: 0.01,
            ..AdamHyper::default()
        };
        let g = [0.3, -2.0, 1e-9];
        let mut p = vec![1.0, 1.0, 1.0];
        let mut m = Moments::zeros(3);
        adam_step(&mut p, &g, &mut m, &hyper, 1).unwrap();
        for i in 0..3 {
            let m1 = (1.0 - hyper.beta1) * g[i] / (1.0 - hyper.beta1);
            let v1 = (1.0 - hyper.beta2) * g[i] * g[i] / (1.0 - hyper.beta2);
            let expect = 1.0 - hyper.lr * m1 / (v1.sqrt() + hyper.eps);
            assert!((p[i] - expect).abs() < 1e-15);
            assert!((p[i] - (1.0 - hyper.lr * g[i] / (g[i].abs() + hyper.eps))).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p: Vec<f64> = vec![0.1, 0.2];
            let mut m = Moments::zeros(2);
            for t in 1..=10 {
                let g = [p[0] * 3.0, (p[1] * 7.0).sin()];
                adam_step(&mut p, &g, &mut m, &AdamHyper::default(), t).unwrap();
            }
            (p, m)
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn shape_and_step_checks() {
        let mut p = vec![0.0; 2];
        let mut m = Moments::zeros(2);
        assert!(adam_step(&mut p, &[0.0], &mut m, &AdamHyper::default(), 1).is_err());
        assert!(adam_step(&mut p, &[0.0; 2], &mut m, &AdamHyper::default(), 0).is_err());
    }
}
