//! Learnable building blocks: residual dense blocks, transposed (channel)
//! attention with a gated feed-forward network, the degradation-kernel query
//! branch, and the FRMA refinement step.
//!
//! Every block comes as a `register_*` function that creates its parameters
//! under a name prefix and a [`Graph`] method that applies it.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamBuilder};
use crate::tensor::Tensor;
use crate::warp::identity_flow_mask;

pub const LRELU_SLOPE: f64 = 0.2;
/// Scale of the residual branch of a residual-in-residual dense block.
pub const RRDB_SCALE: f64 = 0.2;
/// Hidden width of the feed-forward network as a multiple of `C`.
pub const FFN_EXPANSION: usize = 2;

/// Sizes shared by every FRMA step of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrmaDims {
    pub frames: usize,
    pub channels: usize,
    pub pairs: usize,
    pub rdb_layers: usize,
    pub growth: usize,
}

/// The refined triple: temporally-anchored features `T×H×W×C`, warped
/// feature `H×W×C` and multi-flow-mask pairs `T×H×W×3n`.
#[derive(Clone, Copy, Debug)]
pub struct FrmaState {
    pub features: Var,
    pub warped: Var,
    pub flows: Var,
}

impl FrmaState {
    /// Start from `features` with a zero warped feature and the given flows.
    pub fn new(g: &mut Graph, features: Var, flows: Var) -> Result<Self> {
        let d = g.dims(features).to_vec();
        if d.len() != 4 {
            return Err(Error::shape("frma_state", format!("features must be T×H×W×C, got {d:?}")));
        }
        let warped = g.constant(Tensor::zeros(&d[1..]));
        Ok(FrmaState { features, warped, flows })
    }

    /// Zero warped feature and identity flows (zero flow, unit mask).
    pub fn initial(g: &mut Graph, features: Var, pairs: usize) -> Result<Self> {
        let d = g.dims(features).to_vec();
        if d.len() != 4 {
            return Err(Error::shape("frma_state", format!("features must be T×H×W×C, got {d:?}")));
        }
        let flows = g.constant(identity_flow_mask(d[0], d[1], d[2], pairs));
        Self::new(g, features, flows)
    }
}

// ---- registration ------------------------------------------------------------

pub fn register_rdb<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, channels: usize, layers: usize, growth: usize) {
    for l in 0..layers {
        pb.conv3d(&format!("{name}.dense{l}"), 3, 3, channels + l * growth, growth);
    }
    pb.conv3d(&format!("{name}.fuse"), 1, 1, channels + layers * growth, channels);
}

/// Input conv `cin → C` followed by two chained RDBs.
pub fn register_rrdb<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, cin: usize, dims: &FrmaDims) {
    pb.conv3d(&format!("{name}.in"), 3, 3, cin, dims.channels);
    for r in 0..2 {
        register_rdb(pb, &format!("{name}.rdb{r}"), dims.channels, dims.rdb_layers, dims.growth);
    }
}

pub fn register_attention<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, channels: usize) {
    for p in ["q", "k", "v"] {
        pb.conv2d(&format!("{name}.{p}"), 1, channels, channels);
    }
}

pub fn register_ffn<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, channels: usize) {
    let hidden = FFN_EXPANSION * channels;
    pb.conv2d(&format!("{name}.in"), 1, channels, 2 * hidden);
    pb.conv2d(&format!("{name}.out"), 1, hidden, channels);
}

/// Two 3×3 convs mapping `kernel_channels` (`T·k_d²`) to `C`.
pub fn register_derive_kd<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, kernel_channels: usize, channels: usize) {
    pb.conv2d(&format!("{name}.0"), 3, kernel_channels, channels);
    pb.conv2d(&format!("{name}.1"), 3, channels, channels);
}

/// One FRMA step; `degradation_aware` adds the DA attention branch.
pub fn register_frma<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, dims: &FrmaDims, degradation_aware: bool) {
    let (c, n, t) = (dims.channels, dims.pairs, dims.frames);
    register_rdb(pb, &format!("{name}.rdb"), c, dims.rdb_layers, dims.growth);
    pb.conv3d_zero(&format!("{name}.flow"), 3, 3, 3 * n + 2 * c, 3 * n);
    pb.conv2d(&format!("{name}.fuse"), 3, c + t * n * c, c);
    register_attention(pb, &format!("{name}.co"), c);
    register_ffn(pb, &format!("{name}.co_ffn"), c);
    if degradation_aware {
        register_attention(pb, &format!("{name}.da"), c);
        register_ffn(pb, &format!("{name}.da_ffn"), c);
    }
}

// ---- application -------------------------------------------------------------

impl Graph {
    /// Residual dense block on `T×H×W×C`: `layers` densely connected 3×3×3
    /// convs with leaky ReLU, a 1×1×1 fusion conv and a residual add.
    pub fn rdb3d(&mut self, b: &Binding, name: &str, x: Var, layers: usize) -> Result<Var> {
        let mut feats = vec![x];
        for l in 0..layers {
            let input = self.concat_channels(&feats)?;
            let h = self.conv_layer(b, &format!("{name}.dense{l}"), input)?;
            feats.push(self.leaky_relu(h, LRELU_SLOPE));
        }
        let all = self.concat_channels(&feats)?;
        let fused = self.conv_layer(b, &format!("{name}.fuse"), all)?;
        self.add(x, fused)
    }

    /// `h + 0.2·RDB(RDB(h))` with `h` the input conv of `x`.
    pub fn rrdb3d(&mut self, b: &Binding, name: &str, x: Var, layers: usize) -> Result<Var> {
        let h = self.conv_layer(b, &format!("{name}.in"), x)?;
        let r0 = self.rdb3d(b, &format!("{name}.rdb0"), h, layers)?;
        let r1 = self.rdb3d(b, &format!("{name}.rdb1"), r0, layers)?;
        let r = self.scale(r1, RRDB_SCALE);
        self.add(h, r)
    }

    /// Single-head attention across channels. With `Q` from `q_src` and
    /// `K`, `V` from `x` (1×1 projections, flattened to `HW×C`), the map is
    /// `A = softmax(QᵀK / √C)` (`C×C`, rows sum to 1) and the output is
    /// `V·Aᵀ`, i.e. output channel `c` mixes value channels by row `c` of `A`.
    /// Returns `(output H×W×C, A)`.
    pub fn transposed_attention(&mut self, b: &Binding, name: &str, x: Var, q_src: Var) -> Result<(Var, Var)> {
        let (dx, dq) = (self.dims(x).to_vec(), self.dims(q_src).to_vec());
        if dx.len() != 3 || dx != dq {
            return Err(Error::shape("transposed_attention", format!("input {dx:?} vs query source {dq:?}")));
        }
        let (hw, c) = (dx[0] * dx[1], dx[2]);
        let q = self.conv_layer(b, &format!("{name}.q"), q_src)?;
        let k = self.conv_layer(b, &format!("{name}.k"), x)?;
        let v = self.conv_layer(b, &format!("{name}.v"), x)?;
        let q = self.reshape(q, &[hw, c])?;
        let k = self.reshape(k, &[hw, c])?;
        let v = self.reshape(v, &[hw, c])?;
        let logits = self.matmul(q, true, k, false)?;
        let logits = self.scale(logits, 1.0 / (c as f64).sqrt());
        let attn = self.softmax(logits);
        let out = self.matmul(v, false, attn, true)?;
        Ok((self.reshape(out, &dx)?, attn))
    }

    /// Gated feed-forward network: `W_out (gelu(a) ⊙ g)` with `[a, g] = W_in x`.
    pub fn ffn(&mut self, b: &Binding, name: &str, x: Var) -> Result<Var> {
        let h = self.conv_layer(b, &format!("{name}.in"), x)?;
        let hidden = self.value(h).channels() / 2;
        let a = self.slice_channels(h, 0, hidden)?;
        let gate = self.slice_channels(h, hidden, hidden)?;
        let a = self.gelu(a);
        let m = self.mul(a, gate)?;
        self.conv_layer(b, &format!("{name}.out"), m)
    }

    /// CO attention (query from the centre feature), then DA attention
    /// (query from the degradation-kernel feature) when `kd` is given, each
    /// followed by the FFN, all with residual connections.
    pub fn multi_attention(
        &mut self,
        b: &Binding,
        name: &str,
        x: Var,
        center: Var,
        kd: Option<Var>,
    ) -> Result<Var> {
        let (co, _) = self.transposed_attention(b, &format!("{name}.co"), x, center)?;
        let mut y = self.add(x, co)?;
        let f = self.ffn(b, &format!("{name}.co_ffn"), y)?;
        y = self.add(y, f)?;
        if let Some(kd) = kd {
            let (da, _) = self.transposed_attention(b, &format!("{name}.da"), y, kd)?;
            y = self.add(y, da)?;
            let f = self.ffn(b, &format!("{name}.da_ffn"), y)?;
            y = self.add(y, f)?;
        }
        Ok(y)
    }

    /// Query feature `H×W×C` from degradation kernels `T×H×W×k²`.
    pub fn derive_kd(&mut self, b: &Binding, name: &str, kernels: Var) -> Result<Var> {
        let flat = self.frames_to_channels(kernels)?;
        let h = self.conv_layer(b, &format!("{name}.0"), flat)?;
        let h = self.leaky_relu(h, LRELU_SLOPE);
        self.conv_layer(b, &format!("{name}.1"), h)
    }

    /// One refinement of `(F, F_w, f)`:
    ///
    /// 1. `F' = RDB(F)`
    /// 2. `f' = f + conv3d(concat(f, mean_j W(F', f_j), F_c0))`, `F_c0` repeated over frames
    /// 3. `F̃_w = conv2d(concat(F_w, r(W(F', f'))))` where the `n` warped copies
    ///    are concatenated on channels and `r` folds frames into channels
    /// 4. `F_w' = multi_attention(F̃_w)`
    pub fn frma_step(
        &mut self,
        b: &Binding,
        name: &str,
        dims: &FrmaDims,
        state: &FrmaState,
        center: Var,
        kd: Option<Var>,
    ) -> Result<FrmaState> {
        let t = dims.frames;
        let fd = self.dims(state.features).to_vec();
        let expect_flows = [fd[0], fd[1], fd[2], 3 * dims.pairs];
        if fd.len() != 4 || fd[0] != t || fd[3] != dims.channels || self.dims(state.flows) != expect_flows {
            return Err(Error::shape(
                "frma_step",
                format!("features {fd:?}, flows {:?} for {dims:?}", self.dims(state.flows)),
            ));
        }
        if self.dims(state.warped) != &fd[1..] || self.dims(center) != &fd[1..] {
            return Err(Error::shape(
                "frma_step",
                format!("warped {:?} / centre {:?} vs features {fd:?}", self.dims(state.warped), self.dims(center)),
            ));
        }

        let features = self.rdb3d(b, &format!("{name}.rdb"), state.features, dims.rdb_layers)?;

        let aligned = self.warp_sequence(features, state.flows)?;
        let center_t = self.broadcast_frames(center, t);
        let cat = self.concat_channels(&[state.flows, aligned, center_t])?;
        let delta = self.conv_layer(b, &format!("{name}.flow"), cat)?;
        let flows = self.add(state.flows, delta)?;

        let copies = self.warp_pairs(features, flows)?;
        let folded = self.frames_to_channels(copies)?;
        let cat = self.concat_channels(&[state.warped, folded])?;
        let fused = self.conv_layer(b, &format!("{name}.fuse"), cat)?;

        let warped = self.multi_attention(b, name, fused, center, kd)?;
        Ok(FrmaState { features, warped, flows })
    }
}
