//! The two networks: Net^D learns degradation (image flow-mask `f^Y` and
//! kernels `K^D`) and re-synthesises the blurry centre frame; Net^R restores
//! the sharp HR centre frame with flow-guided dynamic upsampling plus a
//! high-frequency residual.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::blocks::{
    register_derive_kd, register_frma, register_rrdb, FrmaDims, FrmaState, LRELU_SLOPE,
};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::{Binding, ParamBuilder, Params};
use crate::tensor::Tensor;
use crate::warp::identity_flow_mask;

/// Initial bias of the mask logit of the image flow-mask heads (mask ≈ 0.99).
pub const MASK_LOGIT_BIAS: f64 = 4.6;

/// Network sizes taken from a [`Config`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FmaNet {
    pub frames: usize,
    pub scale: usize,
    pub steps: usize,
    pub pairs: usize,
    pub kd: usize,
    pub kr: usize,
    pub channels: usize,
    pub rdb_layers: usize,
    pub growth: usize,
    /// When false, Net^D re-synthesises `X̂_c` with zero flows and unit masks.
    pub fgdf: bool,
}

/// Flow-mask and kernels supplied from outside to bypass Net^D's heads.
#[derive(Clone, Copy, Debug)]
pub struct DegradationOverride {
    pub flow_mask: Var,
    pub kernels: Var,
}

#[derive(Clone, Debug)]
pub struct NetDOutput {
    /// Image flow-mask `T×H×W×3` (flows in LR pixels, mask in (0, 1)).
    pub fy: Var,
    /// Degradation kernels `T×H×W×k_d²`, entries in (0, 1).
    pub kd: Var,
    /// Re-synthesised blurry centre frame `H×W×3` (only when `Y` was given).
    pub x_hat_c: Option<Var>,
    /// Image-domain projection of the anchored features `T×H×W×3`.
    pub sharp: Var,
    pub features: Var,
    pub flows: Var,
    /// `F_w` after each FRMA step.
    pub warped_steps: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct NetROutput {
    pub fx: Var,
    /// Restoration kernels `T×H×W×s²k_r²`; every (pixel, phase) group sums to 1.
    pub kr: Var,
    /// High-frequency residual `sH×sW×3`.
    pub y_r: Var,
    /// Restored centre frame `sH×sW×3`.
    pub y_c: Var,
    pub sharp: Var,
    pub warped_steps: Vec<Var>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl FmaNet {
    pub fn new(cfg: &Config) -> Self {
        FmaNet {
            frames: cfg.frames,
            scale: cfg.scale,
            steps: cfg.frma_steps,
            pairs: cfg.flow_pairs,
            kd: cfg.kd,
            kr: cfg.kr,
            channels: cfg.channels,
            rdb_layers: cfg.rdb_layers,
            growth: cfg.growth,
            fgdf: cfg.fgdf,
        }
    }

    pub fn dims(&self) -> FrmaDims {
        FrmaDims {
            frames: self.frames,
            channels: self.channels,
            pairs: self.pairs,
            rdb_layers: self.rdb_layers,
            growth: self.growth,
        }
    }

    pub fn center(&self) -> usize {
        self.frames / 2
    }

    /// Seeded parameters of both networks (`netd.*`, `netr.*`): truncated
    /// normal weights, zero biases, zero flow-update convs, and head biases
    /// that start `K^D` at `1/(T·k_d²)` and image masks near 1.
    pub fn init_params(&self, seed: u64) -> Params {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = self.dims();
        let (c, t, n) = (self.channels, self.frames, self.pairs);
        let kd_ch = t * self.kd * self.kd;
        let s2 = self.scale * self.scale;
        {
            let mut pb = ParamBuilder { params: &mut params, rng: &mut rng };
            register_rrdb(&mut pb, "netd.rrdb", 3, &dims);
            for i in 0..self.steps {
                register_frma(&mut pb, &format!("netd.frma{i}"), &dims, false);
            }
            pb.conv3d("netd.fy.0", 3, 3, 3 * n, c);
            pb.conv3d("netd.fy.1", 3, 3, c, 3);
            pb.conv2d("netd.kd.0", 3, c, c);
            pb.conv2d("netd.kd.1", 3, c, kd_ch);
            pb.conv3d("netd.sharp", 3, 3, c, 3);

            register_rrdb(&mut pb, "netr.rrdb", 3 + c, &dims);
            for i in 0..self.steps {
                register_derive_kd(&mut pb, &format!("netr.kdq{i}"), kd_ch, c);
                register_frma(&mut pb, &format!("netr.frma{i}"), &dims, true);
            }
            pb.conv3d("netr.fx.0", 3, 3, 3 * n, c);
            pb.conv3d("netr.fx.1", 3, 3, c, 3);
            pb.conv2d("netr.kr.0", 3, c, c);
            pb.conv2d("netr.kr.1", 3, c, t * s2 * self.kr * self.kr);
            pb.conv2d("netr.hfr.0", 3, c, c);
            pb.conv2d("netr.hfr.1", 3, c, 3 * s2);
            pb.conv3d("netr.sharp", 3, 3, c, 3);
        }
        let kd_bias = logit(1.0 / kd_ch as f64);
        params.insert("netd.kd.1.b", Tensor::full(&[kd_ch], kd_bias));
        let mask_bias = Tensor::new(vec![3], vec![0.0, 0.0, MASK_LOGIT_BIAS]).unwrap();
        params.insert("netd.fy.1.b", mask_bias.clone());
        params.insert("netr.fx.1.b", mask_bias);
        params
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<(usize, usize)> {
        let d = g.dims(x);
        if d.len() != 4 || d[0] != self.frames || d[3] != 3 {
            return Err(Error::shape("fmanet", format!("X must be {}×H×W×3, got {d:?}", self.frames)));
        }
        Ok((d[1], d[2]))
    }

    /// Two-layer 3-D conv head `3n → C → 3`, sigmoid on the mask channel.
    fn flow_mask_head(&self, g: &mut Graph, b: &Binding, name: &str, flows: Var) -> Result<Var> {
        let h = g.conv_layer(b, &format!("{name}.0"), flows)?;
        let h = g.leaky_relu(h, LRELU_SLOPE);
        let raw = g.conv_layer(b, &format!("{name}.1"), h)?;
        let flow = g.slice_channels(raw, 0, 2)?;
        let mask = g.slice_channels(raw, 2, 1)?;
        let mask = g.sigmoid(mask);
        g.concat_channels(&[flow, mask])
    }

    /// Two-layer 2-D conv head on `F_w`, reshaped to `T×H×W×(channels/T)`.
    fn kernel_head(&self, g: &mut Graph, b: &Binding, name: &str, warped: Var) -> Result<Var> {
        let h = g.conv_layer(b, &format!("{name}.0"), warped)?;
        let h = g.leaky_relu(h, LRELU_SLOPE);
        let raw = g.conv_layer(b, &format!("{name}.1"), h)?;
        g.channels_to_frames(raw, self.frames)
    }

    fn refine(
        &self,
        g: &mut Graph,
        b: &Binding,
        prefix: &str,
        mut state: FrmaState,
        kd: Option<Var>,
    ) -> Result<(FrmaState, Vec<Var>)> {
        let dims = self.dims();
        let center = g.select_frame(state.features, self.center())?;
        let mut warped_steps = Vec::with_capacity(self.steps);
        for i in 0..self.steps {
            let query = match kd {
                Some(k) => Some(g.derive_kd(b, &format!("{prefix}.kdq{i}"), k)?),
                None => None,
            };
            state = g.frma_step(b, &format!("{prefix}.frma{i}"), &dims, &state, center, query)?;
            warped_steps.push(state.warped);
        }
        Ok((state, warped_steps))
    }

    /// Net^D. `y` (`T×sH×sW×3`) enables re-synthesis of `X̂_c`; `oracle`
    /// replaces the predicted flow-mask and kernels in that synthesis.
    pub fn forward_d(
        &self,
        g: &mut Graph,
        b: &Binding,
        x: Var,
        y: Option<Var>,
        oracle: Option<DegradationOverride>,
    ) -> Result<NetDOutput> {
        let (h, w) = self.check_input(g, x)?;
        if let Some(y) = y {
            let want = [self.frames, h * self.scale, w * self.scale, 3];
            if g.dims(y) != want {
                return Err(Error::shape("netd", format!("Y must be {want:?}, got {:?}", g.dims(y))));
            }
        }
        let f0 = g.rrdb3d(b, "netd.rrdb", x, self.rdb_layers)?;
        let state = FrmaState::initial(g, f0, self.pairs)?;
        let (state, warped_steps) = self.refine(g, b, "netd", state, None)?;

        let fy = if self.fgdf {
            self.flow_mask_head(g, b, "netd.fy", state.flows)?
        } else {
            g.constant(identity_flow_mask(self.frames, h, w, 1))
        };
        let raw = self.kernel_head(g, b, "netd.kd", state.warped)?;
        let kd = g.sigmoid(raw);
        let sharp = g.conv_layer(b, "netd.sharp", state.features)?;

        let x_hat_c = match y {
            Some(y) => {
                let (fm, k) = match oracle {
                    Some(o) => (o.flow_mask, o.kernels),
                    None => (fy, kd),
                };
                Some(g.fgdf_downsample(y, fm, k, self.scale)?)
            }
            None => None,
        };
        Ok(NetDOutput { fy, kd, x_hat_c, sharp, features: state.features, flows: state.flows, warped_steps })
    }

    /// Net^R, conditioned on Net^D's anchored features, flows and kernels.
    pub fn forward_r(&self, g: &mut Graph, b: &Binding, x: Var, d: &NetDOutput) -> Result<NetROutput> {
        let (h, w) = self.check_input(g, x)?;
        let fd = g.dims(d.features);
        if fd != [self.frames, h, w, self.channels] {
            return Err(Error::shape("netr", format!("Net^D features {fd:?} do not match X {:?}", g.dims(x))));
        }
        let kd_dims = [self.frames, h, w, self.kd * self.kd];
        if g.dims(d.kd) != kd_dims {
            return Err(Error::shape("netr", format!("K^D {:?}, expected {kd_dims:?}", g.dims(d.kd))));
        }

        let input = g.concat_channels(&[x, d.features])?;
        let f0 = g.rrdb3d(b, "netr.rrdb", input, self.rdb_layers)?;
        let state = FrmaState::new(g, f0, d.flows)?;
        let (state, warped_steps) = self.refine(g, b, "netr", state, Some(d.kd))?;

        let fx = self.flow_mask_head(g, b, "netr.fx", state.flows)?;
        let raw = self.kernel_head(g, b, "netr.kr", state.warped)?;
        let kr = g.normalize_restoration(raw, self.scale)?;

        let hf = g.conv_layer(b, "netr.hfr.0", state.warped)?;
        let hf = g.leaky_relu(hf, LRELU_SLOPE);
        let hf = g.conv_layer(b, "netr.hfr.1", hf)?;
        let y_r = g.pixel_shuffle(hf, self.scale)?;
        let up = g.fgdf_upsample(x, fx, kr, self.scale)?;
        let y_c = g.add(y_r, up)?;
        let sharp = g.conv_layer(b, "netr.sharp", state.features)?;
        Ok(NetROutput { fx, kr, y_r, y_c, sharp, warped_steps })
    }
}

/// Plain-tensor results of one inference pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub fy: Tensor,
    pub kd: Tensor,
    pub x_hat_c: Option<Tensor>,
    pub sharp_d: Tensor,
    pub netd_warped: Vec<Tensor>,
    pub fx: Tensor,
    pub kr: Tensor,
    pub y_r: Tensor,
    pub y_c: Tensor,
    pub sharp_r: Tensor,
    pub netr_warped: Vec<Tensor>,
}

impl FmaNet {
    /// Run both networks without recording gradients for parameters.
    pub fn predict(&self, params: &Params, x: &Tensor, y: Option<&Tensor>) -> Result<Prediction> {
        let mut g = Graph::new();
        let b = params.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let yv = y.map(|y| g.constant(y.clone()));
        let d = self.forward_d(&mut g, &b, xv, yv, None)?;
        let r = self.forward_r(&mut g, &b, xv, &d)?;
        let val = |v: Var| g.value(v).clone();
        Ok(Prediction {
            fy: val(d.fy),
            kd: val(d.kd),
            x_hat_c: d.x_hat_c.map(val),
            sharp_d: val(d.sharp),
            netd_warped: d.warped_steps.iter().map(|&v| val(v)).collect(),
            fx: val(r.fx),
            kr: val(r.kr),
            y_r: val(r.y_r),
            y_c: val(r.y_c),
            sharp_r: val(r.sharp),
            netr_warped: r.warped_steps.iter().map(|&v| val(v)).collect(),
        })
    }
}

impl FmaNet {
    /// Net^D alone: the re-synthesised centre frame `X̂_c` from `x` and `y`.
    pub fn reconstruct(&self, params: &Params, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = params.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let d = self.forward_d(&mut g, &b, xv, Some(yv), None)?;
        Ok(g.value(d.x_hat_c.expect("Y was supplied")).clone())
    }
}
