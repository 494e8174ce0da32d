use super::tensor::Tensor;
use crate::error::{shape_err, Result, SpnError};
use crate::scalar::Scalar;

/// Velocity buffers for classic (heavy-ball) momentum SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState<S> {
    velocity: Vec<Tensor<S>>,
}

impl<S: Scalar> MomentumState<S> {
    pub fn zeros_like(params: &[Tensor<S>]) -> Self {
        MomentumState { velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect() }
    }

    pub fn velocity(&self) -> &[Tensor<S>] {
        &self.velocity
    }
}

/// One step of `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_momentum_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut MomentumState<S>,
    lr: S,
    momentum: S,
) -> Result<()> {
    if !(momentum >= S::zero() && momentum < S::one()) {
        return Err(SpnError::InvalidArgument(format!("momentum {momentum} outside [0, 1)")));
    }
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(shape_err!(
            "sgd: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        ));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(shape_err!("sgd: param {:?} vs grad {:?}", p.shape(), g.shape()));
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut().iter_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
