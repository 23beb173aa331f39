//! Training objectives: the degradation loss `L_D` and the joint loss
//! `L_total`, each returned as a graph node plus a numeric breakdown.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::net::{NetDOutput, NetROutput};

/// Component values of one loss evaluation and the weights they entered with.
/// `recon` always has weight 1.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub warp: f64,
    pub flow_supervision: f64,
    pub ta: f64,
    /// `L_D` folded into the joint loss (zero for `L_D` itself).
    pub coupled: f64,
    /// Weights of `[warp, flow_supervision, ta, coupled]`.
    pub weights: [f64; 4],
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_sum(&self) -> f64 {
        let [w1, w2, w3, w4] = self.weights;
        self.recon + w1 * self.warp + w2 * self.flow_supervision + w3 * self.ta + w4 * self.coupled
    }
}

/// A loss as a graph node together with its breakdown.
#[derive(Clone, Copy, Debug)]
pub struct Loss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Targets of `L_D`: blurry centre `X_c` (`H×W×3`), sharp HR sequence `Y`,
/// its centre `Y_c`, pseudo ground-truth flow-mask `T×H×W×3` and the sharp LR
/// sequence `X_Sharp`.
#[derive(Clone, Copy, Debug)]
pub struct DegradationTargets {
    pub x_c: Var,
    pub y: Var,
    pub y_c: Var,
    pub f_gt: Var,
    pub x_sharp: Var,
}

/// Targets of `L_total` beyond `L_D`'s: the blurry LR sequence `X`.
#[derive(Clone, Copy, Debug)]
pub struct RestorationTargets {
    pub x: Var,
    pub x_c: Var,
    pub y_c: Var,
    pub x_sharp: Var,
}

/// `Σ_t l1(frame_t, target)` for a `T×...` sequence against one frame.
fn sum_frame_l1(g: &mut Graph, seq: Var, target: Var) -> Result<Var> {
    let t = g.dims(seq)[0];
    let rep = g.broadcast_frames(target, t);
    let mean = g.l1(seq, rep)?;
    Ok(g.scale(mean, t as f64))
}

/// `L_D = l1(X̂_c, X_c) + λ1 Σ_t l1(W(Y_t, s·(f^Y_t↑s)), Y_c) + λ2 l1(f^Y, f_gt) + λ3 l1(X̂^D_Sharp, X_Sharp)`.
///
/// The flow-supervision term compares the two flow channels only.
pub fn loss_d(g: &mut Graph, out: &NetDOutput, tg: &DegradationTargets, lambda: [f64; 3], s: usize) -> Result<Loss> {
    let x_hat = out.x_hat_c.ok_or_else(|| Error::invalid("loss_d", "Net^D was run without Y"))?;
    let recon = g.l1(x_hat, tg.x_c)?;
    let hr = g.upscale_flow_mask(out.fy, s)?;
    let aligned = g.warp_flow_mask(tg.y, hr)?;
    let warp = sum_frame_l1(g, aligned, tg.y_c)?;
    let fy = g.slice_channels(out.fy, 0, 2)?;
    let fgt = g.slice_channels(tg.f_gt, 0, 2)?;
    let flow = g.l1(fy, fgt)?;
    let ta = g.l1(out.sharp, tg.x_sharp)?;
    let total = g.weighted_sum(&[(1.0, recon), (lambda[0], warp), (lambda[1], flow), (lambda[2], ta)])?;
    let v = |v: Var| g.value(v).data()[0];
    let breakdown = LossBreakdown {
        recon: v(recon),
        warp: v(warp),
        flow_supervision: v(flow),
        ta: v(ta),
        coupled: 0.0,
        weights: [lambda[0], lambda[1], lambda[2], 0.0],
        total: v(total),
    };
    Ok(Loss { total, breakdown })
}

/// `L_total = l1(Ŷ_c, Y_c) + λ4 Σ_t l1(W(X_t, f^X_t), X_c) + λ5 l1(X̂^R_Sharp, X_Sharp) + λ6 L_D`.
pub fn loss_total(g: &mut Graph, out: &NetROutput, tg: &RestorationTargets, l_d: &Loss, lambda: [f64; 3]) -> Result<Loss> {
    let recon = g.l1(out.y_c, tg.y_c)?;
    let aligned = g.warp_flow_mask(tg.x, out.fx)?;
    let warp = sum_frame_l1(g, aligned, tg.x_c)?;
    let ta = g.l1(out.sharp, tg.x_sharp)?;
    let total = g.weighted_sum(&[(1.0, recon), (lambda[0], warp), (lambda[1], ta), (lambda[2], l_d.total)])?;
    let v = |v: Var| g.value(v).data()[0];
    let breakdown = LossBreakdown {
        recon: v(recon),
        warp: v(warp),
        flow_supervision: 0.0,
        ta: v(ta),
        coupled: l_d.breakdown.total,
        weights: [lambda[0], 0.0, lambda[1], lambda[2]],
        total: v(total),
    };
    Ok(Loss { total, breakdown })
}
