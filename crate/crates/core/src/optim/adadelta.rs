use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub eps: f64,
    pub lr_scale: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        AdadeltaConfig {
            rho: 0.95,
            eps: 1e-6,
            lr_scale: 1.0,
        }
    }
}

impl AdadeltaConfig {
    /// Step scale that lets the 16×16 desk configuration converge within a
    /// few hundred single-sample steps.
    pub fn desk_scale() -> Self {
        AdadeltaConfig {
            lr_scale: 20.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "adadelta rho {} must lie in (0, 1)",
                self.rho
            )));
        }
        if !(self.eps > 0.0) || !(self.lr_scale > 0.0) || !self.lr_scale.is_finite() {
            return Err(Error::InvalidConfig(
                "adadelta eps and lr_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Running averages E[g²] and E[Δx²] for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState<T = f32> {
    pub sq_grad: Tensor<T>,
    pub sq_update: Tensor<T>,
}

impl<T: Scalar> AdadeltaState<T> {
    pub fn zeros_like(param: &Tensor<T>) -> Self {
        AdadeltaState {
            sq_grad: Tensor::zeros(param.shape()),
            sq_update: Tensor::zeros(param.shape()),
        }
    }
}

/// One Adadelta update:
///
/// ```text
/// E[g²]  ← ρ·E[g²] + (1-ρ)·g²
/// Δx     = -(√(E[Δx²] + ε) / √(E[g²] + ε))·g
/// E[Δx²] ← ρ·E[Δx²] + (1-ρ)·Δx²
/// x      ← x + lr_scale·Δx
/// ```
///
/// A non-finite gradient is refused before anything is modified.
pub fn adadelta_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdadeltaState<T>,
    cfg: &AdadeltaConfig,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("adadelta_step", param.shape(), grad.shape()));
    }
    if state.sq_grad.shape() != param.shape() || state.sq_update.shape() != param.shape() {
        return Err(Error::shape(
            "adadelta_step state",
            state.sq_grad.shape(),
            param.shape(),
        ));
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite("adadelta gradient".into()));
    }
    let (rho, eps, lr) = (T::lit(cfg.rho), T::lit(cfg.eps), T::lit(cfg.lr_scale));
    let keep = T::one() - rho;
    let x = param.data_mut();
    let eg = state.sq_grad.data_mut();
    let ed = state.sq_update.data_mut();
    for (i, &g) in grad.data().iter().enumerate() {
        eg[i] = rho * eg[i] + keep * g * g;
        let dx = -((ed[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * g;
        ed[i] = rho * ed[i] + keep * dx * dx;
        x[i] += lr * dx;
    }
    Ok(())
}

/// Adadelta accumulators for every trainable tensor, keyed by parameter name
/// in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T = f32> {
    pub config: AdadeltaConfig,
    pub slots: Vec<(String, AdadeltaState<T>)>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new<'a>(config: AdadeltaConfig, params: impl IntoIterator<Item = (String, &'a Tensor<T>)>) -> Self {
        OptimState {
            config,
            slots: params
                .into_iter()
                .map(|(name, t)| (name, AdadeltaState::zeros_like(t)))
                .collect(),
        }
    }
}
