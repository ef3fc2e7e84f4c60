//! Training objective: Charbonnier reconstruction plus a Laplacian edge term.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub epsilon: f64,
    pub lambda_edge: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1e-3,
            lambda_edge: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(self.lambda_edge >= 0.0) || !self.lambda_edge.is_finite() {
            return Err(Error::config(format!("lambda_edge {} must be non-negative", self.lambda_edge)));
        }
        Ok(())
    }
}

fn same_shape<T: Real>(op: &'static str, x: &Var<'_, T>, gt: &Var<'_, T>) -> Result<()> {
    if x.shape() != gt.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", x.shape(), gt.shape())));
    }
    Ok(())
}

/// `mean(sqrt((x - gt)^2 + eps^2))`.
pub fn charbonnier<'t, T: Real>(x: Var<'t, T>, gt: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    same_shape("charbonnier", &x, &gt)?;
    if !(eps > 0.0) {
        return Err(Error::config("charbonnier epsilon must be positive"));
    }
    x.sub(gt)?.square()?.affine(1.0, eps * eps)?.sqrt()?.mean()
}

/// Charbonnier penalty between the Laplacians of `x` and `gt`.
pub fn edge_loss<'t, T: Real>(x: Var<'t, T>, gt: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    same_shape("edge_loss", &x, &gt)?;
    let [_, _, h, w] = x.value().dims4()?;
    if h < 3 || w < 3 {
        return Err(Error::dim("edge_loss", format!("extent {h}x{w} below 3x3")));
    }
    charbonnier(x.laplacian()?, gt.laplacian()?, eps)
}

/// `charbonnier + lambda_edge * edge_loss`.
pub fn total_loss<'t, T: Real>(x: Var<'t, T>, gt: Var<'t, T>, cfg: &LossConfig) -> Result<Var<'t, T>> {
    cfg.validate()?;
    let base = charbonnier(x, gt, cfg.epsilon)?;
    if cfg.lambda_edge == 0.0 {
        return Ok(base);
    }
    base.add(edge_loss(x, gt, cfg.epsilon)?.affine(cfg.lambda_edge, 0.0)?)
}
