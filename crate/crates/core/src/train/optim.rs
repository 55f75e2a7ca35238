//! Adam with per-group learning rates and global-norm clipping.

use serde::{Deserialize, Serialize};

use super::denoiser::{ParamGroup, ParamSet};
use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub steps: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Euclidean norm over every gradient entry.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            steps: 0,
            m: params.tensors().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Clips `grads` to `clip_norm` and applies one update. Returns the
    /// gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], cfg: &OptimConfig) -> Result<f64> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::invalid(
                "grads",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                term: "gradient".into(),
                step: self.steps,
            });
        }
        let clip = if norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        let k = self.steps as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(k), 1.0 - b2.powi(k));
        for (i, p) in params.0.iter_mut().enumerate() {
            let lr = match p.group {
                ParamGroup::Body => cfg.lr_body,
                ParamGroup::Projector => cfg.lr_projector,
            };
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::denoiser::NamedParam;

    fn one(group: ParamGroup, v: &[f64]) -> ParamSet {
        ParamSet(vec![NamedParam {
            name: "p".into(),
            group,
            value: Tensor::new(vec![v.len()], v.to_vec()).unwrap(),
        }])
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        // Bias correction makes the first update lr · sign(g).
        let cfg = OptimConfig::default();
        let mut p = one(ParamGroup::Body, &[1.0, -1.0]);
        let mut st = AdamState::new(&p);
        let g = [Tensor::new(vec![2], vec![0.3, -0.2]).unwrap()];
        st.step(&mut p, &g, &cfg).unwrap();
        let d = p.0[0].value.data();
        assert!((d[0] - (1.0 - cfg.lr_body)).abs() < 1e-9);
        assert!((d[1] - (-1.0 + cfg.lr_body)).abs() < 1e-9);
    }

    #[test]
    fn groups_use_their_own_rate() {
        let cfg = OptimConfig::default();
        let mut p = one(ParamGroup::Projector, &[0.0]);
        let mut st = AdamState::new(&p);
        st.step(&mut p, &[Tensor::new(vec![1], vec![5.0]).unwrap()], &cfg).unwrap();
        assert!((p.0[0].value.data()[0] + cfg.lr_projector).abs() < 1e-12);
    }

    #[test]
    fn clipping_rescales_large_gradients() {
        let cfg = OptimConfig {
            clip_norm: 1.0,
            ..OptimConfig::default()
        };
        let mut p = one(ParamGroup::Body, &[0.0, 0.0]);
        let mut st = AdamState::new(&p);
        let norm = st
            .step(&mut p, &[Tensor::new(vec![2], vec![30.0, 40.0]).unwrap()], &cfg)
            .unwrap();
        assert_eq!(norm, 50.0);
        // first moment holds (1 − β1) · clipped gradient
        assert!((st.m[0].data()[0] - 0.1 * 0.6).abs() < 1e-12);
        assert!((st.m[0].data()[1] - 0.1 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradients_abort() {
        let mut p = one(ParamGroup::Body, &[0.0]);
        let mut st = AdamState::new(&p);
        let err = st
            .step(&mut p, &[Tensor::new(vec![1], vec![f64::NAN]).unwrap()], &OptimConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(p.0[0].value.data()[0], 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = OptimConfig {
            lr_body: 0.05,
            ..OptimConfig::default()
        };
        let mut p = one(ParamGroup::Body, &[3.0, -2.0]);
        let mut st = AdamState::new(&p);
        for _ in 0..500 {
            let g = p.0[0].value.map(|x| 2.0 * (x - 0.5));
            st.step(&mut p, &[g], &cfg).unwrap();
        }
        for &x in p.0[0].value.data() {
            assert!((x - 0.5).abs() < 1e-2, "{x}");
        }
    }
}
