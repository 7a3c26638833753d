//! Worst-case activation perturbation wrapped around distillation.

use crate::error::{Error, Result};
use crate::safd::{optimize, DistillConfig, TriggerArtifact, TriggerSpec};
use crate::scalar::Real;
use crate::vlm::{ActivationGrads, ActivationSet, ModelParams};
use crate::wmark::{WatermarkKey, WatermarkParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RfoConfig {
    pub rho: f64,
    #[serde(flatten)]
    pub distill: DistillConfig,
}

impl Default for RfoConfig {
    fn default() -> Self {
        Self {
            rho: 0.5,
            distill: DistillConfig::default(),
        }
    }
}

/// `eps_l = rho * g_l / sqrt(sum_j |g_j|^2)`; all-zero gradients give an
/// all-zero perturbation.
pub fn worst_case_perturbation<F: Real>(grads: &ActivationGrads<F>, rho: F) -> Result<ActivationSet<F>> {
    if !(rho >= F::zero()) {
        return Err(Error::Parameter(format!("rho must be nonnegative, got {rho}")));
    }
    if grads.layers().iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("activation gradients are not finite".into()));
    }
    let norm = grads.sq_norm().sqrt();
    if norm == F::zero() || rho == F::zero() {
        return Ok(ActivationSet::zeros(grads.num_layers(), grads.seq_len(), grads.dim()));
    }
    let scale = rho / norm;
    let layers = grads
        .layers()
        .iter()
        .map(|l| l.iter().map(|&g| g * scale).collect())
        .collect();
    ActivationSet::from_layers(grads.seq_len(), grads.dim(), layers)
}

/// Distillation where every step's image gradient is taken under the
/// worst-case activation shift computed from a first forward-backward pass.
pub fn rfo_distill<F: Real>(
    params: &ModelParams<F>,
    spec: &TriggerSpec<F>,
    cfg: &RfoConfig,
    key: &WatermarkKey,
    wparams: &WatermarkParams,
) -> Result<TriggerArtifact<F>> {
    optimize(params, spec, &cfg.distill, key, wparams, Some(cfg.rho))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer_norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn single_layer_example() {
        // |g| = 2
        let g = ActivationSet::from_layers(1, 4, vec![vec![1.0, 1.0, 1.0, 1.0]]).unwrap();
        let e = worst_case_perturbation(&g, 0.5).unwrap();
        assert_eq!(e.layer(0), &[0.25, 0.25, 0.25, 0.25]);
        assert!((layer_norm(e.layer(0)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn equal_layers_split_budget() {
        let g = ActivationSet::from_layers(1, 2, vec![vec![3.0, 4.0], vec![0.0, 5.0]]).unwrap();
        let e = worst_case_perturbation(&g, 0.5).unwrap();
        for l in 0..2 {
            assert!((layer_norm(e.layer(l)) - 0.5 / 2f64.sqrt()).abs() < 1e-15);
        }
        assert!((e.sq_norm().sqrt() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_cases() {
        let g = ActivationSet::from_layers(1, 2, vec![vec![3.0, 4.0]]).unwrap();
        assert!(worst_case_perturbation(&g, 0.0).unwrap().is_zero());
        let z = ActivationSet::<f64>::zeros(2, 3, 2);
        assert!(worst_case_perturbation(&z, 0.5).unwrap().is_zero());
        assert!(worst_case_perturbation(&g, -1.0).is_err());
    }
}
