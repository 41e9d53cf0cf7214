//! Supervised and consistency losses over the dual-decoder heads, and the
//! ramp-up schedule for the consistency weight.
//!
//! All MSE-style terms are voxel means. Boundary weights are computed from
//! the predicted distances but enter the graph as constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{boundary_weights, SignMode};
use crate::network::DualDecoderOutputs;
use crate::tensor::{Tape, Tensor, Var};

/// Which unsupervised term enters the total loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyMode {
    /// Supervised only.
    None,
    /// Same-task agreement between decoders.
    Mc,
    /// Cross-task agreement between decoders.
    Gc,
    /// Cross-task agreement weighted towards the predicted boundary.
    #[default]
    Wgc,
}

impl ConsistencyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConsistencyMode::None => "none",
            ConsistencyMode::Mc => "mc",
            ConsistencyMode::Gc => "gc",
            ConsistencyMode::Wgc => "wgc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub rho: f64,
    pub k: f64,
    pub beta: f64,
    pub lambda_max: f64,
    /// Exponent on `(1 - t / t_max)` in the ramp-up; 1 or 2.
    pub ramp_power: u32,
    pub consistency: ConsistencyMode,
    pub dice_eps: f64,
    pub sign_mode: SignMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            rho: 2.0,
            k: 1500.0,
            beta: 0.3,
            lambda_max: 0.1,
            ramp_power: 1,
            consistency: ConsistencyMode::Wgc,
            dice_eps: 1e-5,
            sign_mode: SignMode::InsideNegative,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rho", self.rho),
            ("k", self.k),
            ("lambda_max", self.lambda_max),
            ("dice_eps", self.dice_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.ramp_power == 1 || self.ramp_power == 2) {
            return Err(Error::Config(format!(
                "ramp_power must be 1 or 2, got {}",
                self.ramp_power
            )));
        }
        Ok(())
    }
}

/// Scalar values of every term of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub sdf: f64,
    pub sup: f64,
    pub cons: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,L_seg,L_sdf,L_sup,L_cons,lambda,L_total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.seg, self.sdf, self.sup, self.cons, self.lambda, self.total
        )
    }

    /// First term that is not finite, by column name.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("L_seg", self.seg),
            ("L_sdf", self.sdf),
            ("L_sup", self.sup),
            ("L_cons", self.cons),
            ("lambda", self.lambda),
            ("L_total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(())
}

fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "mse", a, b)?;
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// `1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)`.
pub fn dice_loss(tape: &mut Tape, pred_fg: Var, target_fg: Var, eps: f64) -> Result<Var> {
    same_shape(tape, "dice_loss", pred_fg, target_fg)?;
    let pt = tape.mul(pred_fg, target_fg)?;
    let inter = tape.sum(pt)?;
    let num = tape.mul_scalar(inter, 2.0)?;
    let num = tape.add_scalar(num, eps)?;
    let sp = tape.sum(pred_fg)?;
    let st = tape.sum(target_fg)?;
    let den = tape.add(sp, st)?;
    let den = tape.add_scalar(den, eps)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.mul_scalar(ratio, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// Probability-space cross-entropy: mean of `-ln(max(p_true, 1e-12))`.
///
/// `probs` is `[N, 2, s...]`, `target` a binary `[N, 1, s...]` mask.
pub fn cross_entropy_loss(tape: &mut Tape, probs: Var, target: &Tensor) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    let mut expect = shape.clone();
    if expect.len() < 2 || expect[1] != 2 {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy_loss needs [N, 2, ...] probabilities, got {shape:?}"
        )));
    }
    expect[1] = 1;
    if target.shape() != expect.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_loss",
            lhs: shape,
            rhs: target.shape().to_vec(),
        });
    }
    let p0 = tape.narrow(probs, 1, 0, 1)?;
    let p1 = tape.narrow(probs, 1, 1, 1)?;
    let t1 = tape.constant(target.clone())?;
    let t0 = tape.constant(target.map(|v| 1.0 - v))?;
    let a = tape.mul(p1, t1)?;
    let b = tape.mul(p0, t0)?;
    let p_true = tape.add(a, b)?;
    let ln = tape.ln_clamped(p_true, 1e-12)?;
    let m = tape.mean(ln)?;
    tape.mul_scalar(m, -1.0)
}

/// Segmentation loss averaged over both decoders: `0.5 * (dice1 + ce1 + dice2 + ce2)`.
///
/// Cross-entropy is evaluated from the retained logits.
pub fn seg_supervised_loss(
    tape: &mut Tape,
    out: &DualDecoderOutputs,
    mask: &Tensor,
    eps: f64,
) -> Result<Var> {
    let y = tape.constant(mask.clone())?;
    let mut terms = Vec::with_capacity(4);
    for j in 0..2 {
        terms.push(dice_loss(tape, out.seg[j], y, eps)?);
        terms.push(tape.cross_entropy_logits(out.logits[j], mask)?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.mul_scalar(acc, 0.5)
}

/// `(mse(sdm1, T) + mse(sdm2, T)) / 2`.
pub fn sdf_supervised_loss(tape: &mut Tape, out: &DualDecoderOutputs, sdm_target: Var) -> Result<Var> {
    let a = mse(tape, out.sdm[0], sdm_target)?;
    let b = mse(tape, out.sdm[1], sdm_target)?;
    let s = tape.add(a, b)?;
    tape.mul_scalar(s, 0.5)
}

/// Differentiable smooth inverse transform `sigmoid(slope * z)`.
pub fn inverse_transform(tape: &mut Tape, sdm: Var, k: f64, mode: SignMode) -> Result<Var> {
    let z = tape.mul_scalar(sdm, mode.slope(k))?;
    tape.sigmoid(z)
}

/// Squared cross-task residuals `(seg1 - inv(sdm2))^2` and `(seg2 - inv(sdm1))^2`.
fn cross_task_residuals(
    tape: &mut Tape,
    out: &DualDecoderOutputs,
    k: f64,
    mode: SignMode,
) -> Result<[Var; 2]> {
    let mut r = [out.seg[0]; 2];
    for (j, slot) in r.iter_mut().enumerate() {
        let other = inverse_transform(tape, out.sdm[1 - j], k, mode)?;
        same_shape(tape, "consistency", out.seg[j], other)?;
        let d = tape.sub(out.seg[j], other)?;
        *slot = tape.square(d)?;
    }
    Ok(r)
}

/// Unweighted cross-task consistency, voxel mean of the summed residuals.
pub fn geometry_consistency_loss(
    tape: &mut Tape,
    out: &DualDecoderOutputs,
    k: f64,
    mode: SignMode,
) -> Result<Var> {
    let [a, b] = cross_task_residuals(tape, out, k, mode)?;
    let s = tape.add(a, b)?;
    tape.mean(s)
}

/// Cross-task consistency with `w_j = exp(-rho |sdm_j|)` multiplying the
/// residual of decoder `j`'s segmentation against the other decoder's distances.
pub fn weighted_geometry_consistency_loss(
    tape: &mut Tape,
    out: &DualDecoderOutputs,
    rho: f64,
    k: f64,
    mode: SignMode,
) -> Result<Var> {
    let [a, b] = cross_task_residuals(tape, out, k, mode)?;
    let w1 = boundary_weights(tape.value(out.sdm[0]), rho)?.0;
    let w2 = boundary_weights(tape.value(out.sdm[1]), rho)?.0;
    let w1 = tape.constant(w1)?;
    let w2 = tape.constant(w2)?;
    let a = tape.mul(w1, a)?;
    let b = tape.mul(w2, b)?;
    let s = tape.add(a, b)?;
    tape.mean(s)
}

/// Same-task agreement: `mse(seg1, seg2) + mse(sdm1, sdm2)`.
pub fn mutual_consistency_loss(tape: &mut Tape, out: &DualDecoderOutputs) -> Result<Var> {
    let a = mse(tape, out.seg[0], out.seg[1])?;
    let b = mse(tape, out.sdm[0], out.sdm[1])?;
    tape.add(a, b)
}

/// `lambda_max * exp(-5 (1 - t / t_max)^power)`, with `t` clamped to `t_max`.
pub fn ramp_up(t: usize, t_max: usize, lambda_max: f64, power: u32) -> f64 {
    if t_max == 0 {
        return lambda_max;
    }
    let progress = t.min(t_max) as f64 / t_max as f64;
    lambda_max * (-5.0 * (1.0 - progress).powi(power as i32)).exp()
}

/// `L_seg + beta * L_sdf`; returns `(L_sup, L_seg, L_sdf)`.
pub fn supervised_loss(
    tape: &mut Tape,
    out: &DualDecoderOutputs,
    mask: &Tensor,
    sdm_target: &Tensor,
    beta: f64,
    eps: f64,
) -> Result<(Var, Var, Var)> {
    let seg = seg_supervised_loss(tape, out, mask, eps)?;
    let target = tape.constant(sdm_target.clone())?;
    let sdf = sdf_supervised_loss(tape, out, target)?;
    let scaled = tape.mul_scalar(sdf, beta)?;
    let sup = tape.add(seg, scaled)?;
    Ok((sup, seg, sdf))
}

/// Ground truth for the labeled prefix of a batch.
#[derive(Clone, Debug)]
pub struct LossTargets {
    /// Number of leading batch items that are labeled.
    pub labeled: usize,
    /// Binary masks `[labeled, 1, s...]`.
    pub mask: Tensor,
    /// Normalized signed distance targets `[labeled, 1, s...]`.
    pub sdm: Tensor,
}

/// The consistency term selected by `cfg`, on all batch items.
pub fn consistency_loss(tape: &mut Tape, out: &DualDecoderOutputs, cfg: &LossConfig) -> Result<Option<Var>> {
    Ok(match cfg.consistency {
        ConsistencyMode::None => None,
        ConsistencyMode::Mc => Some(mutual_consistency_loss(tape, out)?),
        ConsistencyMode::Gc => Some(geometry_consistency_loss(tape, out, cfg.k, cfg.sign_mode)?),
        ConsistencyMode::Wgc => Some(weighted_geometry_consistency_loss(
            tape,
            out,
            cfg.rho,
            cfg.k,
            cfg.sign_mode,
        )?),
    })
}

/// `L_total = L_sup + lambda(t) * L_cons`, supervised part on the labeled prefix only.
pub fn total_loss(
    tape: &mut Tape,
    out: &DualDecoderOutputs,
    targets: &LossTargets,
    t: usize,
    t_max: usize,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    if targets.labeled == 0 {
        return Err(Error::InvalidArgument(
            "batch has no labeled items; supervised loss undefined".into(),
        ));
    }
    let lambda = ramp_up(t, t_max, cfg.lambda_max, cfg.ramp_power);
    let labeled = out.narrow_batch(tape, 0, targets.labeled)?;
    let (sup, seg, sdf) = supervised_loss(tape, &labeled, &targets.mask, &targets.sdm, cfg.beta, cfg.dice_eps)?;
    let (total, cons) = match consistency_loss(tape, out, cfg)? {
        Some(c) => {
            let scaled = tape.mul_scalar(c, lambda)?;
            (tape.add(sup, scaled)?, tape.value(c).item())
        }
        None => (sup, 0.0),
    };
    let breakdown = LossBreakdown {
        seg: tape.value(seg).item(),
        sdf: tape.value(sdf).item(),
        sup: tape.value(sup).item(),
        cons,
        lambda,
        total: tape.value(total).item(),
    };
    Ok((total, breakdown))
}
