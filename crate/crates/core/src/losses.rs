//! Cross-entropy, the symmetric branch-consistency loss, and the composite
//! losses for the three supervision cases.
//!
//! All maps are `1 x C x H x W` probability tensors on a tape. Probabilities
//! are clamped at [`PROB_CLAMP`](crate::engine::PROB_CLAMP) before any logarithm.

use crate::engine::{Tape, Tensor, Var};
use crate::error::{shape_err, Result, SpnError};
use crate::label::{argmax_channels, LabelMap};
use crate::scalar::Scalar;

/// Loss components of one training pair. Components that do not take part in
/// a case are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown<S> {
    pub l_s_m: Option<S>,
    pub l_s_n: Option<S>,
    pub l_p_m: Option<S>,
    pub l_p_n: Option<S>,
    pub l_c_m: Option<S>,
    pub l_c_n: Option<S>,
    pub total: S,
    pub lambda: S,
}

impl<S: Scalar> LossBreakdown<S> {
    pub fn components(&self) -> [Option<S>; 6] {
        [self.l_s_m, self.l_s_n, self.l_p_m, self.l_p_n, self.l_c_m, self.l_c_n]
    }

    /// Recomputes the total from the components:
    /// `sum(l_s) + sum(l_p) + lambda * sum(l_c)`.
    pub fn recomputed_total(&self) -> S {
        let z = S::zero();
        let sup = self.l_s_m.unwrap_or(z) + self.l_s_n.unwrap_or(z) + self.l_p_m.unwrap_or(z) + self.l_p_n.unwrap_or(z);
        sup + self.lambda * (self.l_c_m.unwrap_or(z) + self.l_c_n.unwrap_or(z))
    }

    /// Element-wise mean of several breakdowns (for batch logging).
    pub fn mean(items: &[LossBreakdown<S>]) -> LossBreakdown<S> {
        let n = S::lit(items.len() as f64);
        let avg = |f: &dyn Fn(&LossBreakdown<S>) -> Option<S>| -> Option<S> {
            let vals: Option<Vec<S>> = items.iter().map(f).collect();
            vals.map(|v| v.into_iter().sum::<S>() / n)
        };
        LossBreakdown {
            l_s_m: avg(&|b| b.l_s_m),
            l_s_n: avg(&|b| b.l_s_n),
            l_p_m: avg(&|b| b.l_p_m),
            l_p_n: avg(&|b| b.l_p_n),
            l_c_m: avg(&|b| b.l_c_m),
            l_c_n: avg(&|b| b.l_c_n),
            total: items.iter().map(|b| b.total).sum::<S>() / n,
            lambda: items.first().map_or(S::zero(), |b| b.lambda),
        }
    }
}

/// A composite loss recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CaseLoss<S> {
    pub total: Var,
    pub breakdown: LossBreakdown<S>,
}

fn check_target<S: Scalar>(tape: &Tape<S>, pred: Var, target: &LabelMap) -> Result<()> {
    let [_, c, h, w] = tape.value(pred).nchw()?;
    if (h, w) != (target.height(), target.width()) {
        return Err(shape_err!("prediction {h}x{w} vs label map {}x{}", target.height(), target.width()));
    }
    if let Some(m) = target.max_class() {
        if m as usize >= c {
            return Err(SpnError::InvalidArgument(format!("class index {m} >= {c} classes")));
        }
    }
    Ok(())
}

/// Pixel-mean cross-entropy against one-hot targets.
pub fn ce_loss<S: Scalar>(tape: &mut Tape<S>, pred: Var, target: &LabelMap) -> Result<Var> {
    check_target(tape, pred, target)?;
    let scale = S::one() / S::lit(target.len() as f64);
    tape.class_nll(pred, &target.targets(), scale)
}

fn hardened<S: Scalar>(tape: &Tape<S>, v: Var) -> Result<Vec<usize>> {
    let t = tape.value(v);
    let [n, c, h, w] = t.nchw()?;
    let hw = h * w;
    Ok((0..n)
        .flat_map(|b| argmax_channels(&t.data()[b * c * hw..(b + 1) * c * hw], c, hw))
        .map(usize::from)
        .collect())
}

/// `1/2 * [CE_sum(a, onehot(argmax b)) + CE_sum(b, onehot(argmax a))]`,
/// summed over pixels. The argmax targets carry no gradient.
pub fn consistency_loss<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(shape_err!(
            "consistency_loss: {:?} vs {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        ));
    }
    let target_b = hardened(tape, b)?;
    let target_a = hardened(tape, a)?;
    let ab = tape.class_nll(a, &target_b, S::one())?;
    let ba = tape.class_nll(b, &target_a, S::one())?;
    let sum = tape.add(ab, ba)?;
    Ok(tape.scale(sum, S::lit(0.5)))
}

fn scalar_of<S: Scalar>(tape: &Tape<S>, v: Var) -> S {
    tape.value(v).item()
}

/// Assembles `sum(sup) + lambda * sum(cons)` on the tape.
fn combine<S: Scalar>(tape: &mut Tape<S>, sup: &[Var], cons: &[Var], lambda: S) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &v in sup {
        acc = Some(match acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
    }
    let mut c = cons[0];
    for &v in &cons[1..] {
        c = tape.add(c, v)?;
    }
    let c = tape.scale(c, lambda);
    match acc {
        None => Ok(c),
        Some(a) => tape.add(a, c),
    }
}

/// Branch outputs needed by the fully supervised case. `p_m` is propagated
/// from `y_n`, `p_n` from `y_m`.
#[derive(Clone, Copy, Debug)]
pub struct SupervisedMaps {
    pub s_m: Var,
    pub s_n: Var,
    pub p_m: Var,
    pub p_n: Var,
}

/// Fully supervised case: `l_s^m + l_s^n + l_p^m + l_p^n + lambda (l_c^m + l_c^n)`.
pub fn loss_case1<S: Scalar>(
    tape: &mut Tape<S>,
    maps: SupervisedMaps,
    y_m: Option<&LabelMap>,
    y_n: Option<&LabelMap>,
    lambda: S,
) -> Result<CaseLoss<S>> {
    let (Some(y_m), Some(y_n)) = (y_m, y_n) else {
        return Err(SpnError::InvalidArgument("supervised case needs labels on both frames".into()));
    };
    let ls_m = ce_loss(tape, maps.s_m, y_m)?;
    let ls_n = ce_loss(tape, maps.s_n, y_n)?;
    let lp_m = ce_loss(tape, maps.p_m, y_m)?;
    let lp_n = ce_loss(tape, maps.p_n, y_n)?;
    let lc_m = consistency_loss(tape, maps.p_m, maps.s_m)?;
    let lc_n = consistency_loss(tape, maps.p_n, maps.s_n)?;
    let total = combine(tape, &[ls_m, ls_n, lp_m, lp_n], &[lc_m, lc_n], lambda)?;
    Ok(CaseLoss {
        total,
        breakdown: LossBreakdown {
            l_s_m: Some(scalar_of(tape, ls_m)),
            l_s_n: Some(scalar_of(tape, ls_n)),
            l_p_m: Some(scalar_of(tape, lp_m)),
            l_p_n: Some(scalar_of(tape, lp_n)),
            l_c_m: Some(scalar_of(tape, lc_m)),
            l_c_n: Some(scalar_of(tape, lc_n)),
            total: scalar_of(tape, total),
            lambda,
        },
    })
}

/// Unsupervised case: `lambda (l_c^m' + l_c^n')`, where `pp_m` is propagated
/// from `s_n` and `pp_n` from `s_m`.
pub fn loss_case2<S: Scalar>(tape: &mut Tape<S>, s_m: Var, s_n: Var, pp_m: Var, pp_n: Var, lambda: S) -> Result<CaseLoss<S>> {
    let lc_m = consistency_loss(tape, pp_m, s_m)?;
    let lc_n = consistency_loss(tape, pp_n, s_n)?;
    let total = combine(tape, &[], &[lc_m, lc_n], lambda)?;
    Ok(CaseLoss {
        total,
        breakdown: LossBreakdown {
            l_c_m: Some(scalar_of(tape, lc_m)),
            l_c_n: Some(scalar_of(tape, lc_n)),
            total: scalar_of(tape, total),
            lambda,
            ..Default::default()
        },
    })
}

/// Branch outputs for the semi-supervised case (frame `m` labeled): `pp_m`
/// is propagated from `s_n`, `p_n` from `y_m`.
#[derive(Clone, Copy, Debug)]
pub struct SemiSupervisedMaps {
    pub s_m: Var,
    pub s_n: Var,
    pub p_n: Var,
    pub pp_m: Var,
}

/// Semi-supervised case: `l_s^m + l_p^m' + lambda (l_c^m' + l_c^n)`.
///
/// In the breakdown, `l_p_m` holds `l_p^m'` and `l_c_m` holds `l_c^m'`.
pub fn loss_case3<S: Scalar>(
    tape: &mut Tape<S>,
    maps: SemiSupervisedMaps,
    y_m: Option<&LabelMap>,
    y_n: Option<&LabelMap>,
    lambda: S,
) -> Result<CaseLoss<S>> {
    let (Some(y_m), None) = (y_m, y_n) else {
        return Err(SpnError::InvalidArgument("semi-supervised case needs exactly frame m labeled".into()));
    };
    let ls_m = ce_loss(tape, maps.s_m, y_m)?;
    let lp_m = ce_loss(tape, maps.pp_m, y_m)?;
    let lc_m = consistency_loss(tape, maps.pp_m, maps.s_m)?;
    let lc_n = consistency_loss(tape, maps.p_n, maps.s_n)?;
    let total = combine(tape, &[ls_m, lp_m], &[lc_m, lc_n], lambda)?;
    Ok(CaseLoss {
        total,
        breakdown: LossBreakdown {
            l_s_m: Some(scalar_of(tape, ls_m)),
            l_p_m: Some(scalar_of(tape, lp_m)),
            l_c_m: Some(scalar_of(tape, lc_m)),
            l_c_n: Some(scalar_of(tape, lc_n)),
            total: scalar_of(tape, total),
            lambda,
            ..Default::default()
        },
    })
}

/// Value-level cross-entropy of a frozen probability map.
pub fn ce_loss_value<S: Scalar>(pred: &Tensor<S>, target: &LabelMap) -> Result<S> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = ce_loss(&mut tape, p, target)?;
    Ok(tape.value(l).item())
}

/// Value-level consistency loss of two frozen probability maps.
pub fn consistency_loss_value<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<S> {
    let mut tape = Tape::new();
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let l = consistency_loss(&mut tape, va, vb)?;
    Ok(tape.value(l).item())
}
