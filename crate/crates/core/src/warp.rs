//! Occlusion-aware backward warping.
//!
//! `out(p) = mask(p) · bilinear(x, p + flow(p))`, with the sampling position
//! clamped to the image rectangle. Flow channel 0 is the horizontal (column)
//! displacement and channel 1 the vertical (row) displacement, in pixels.
//!
//! Flow-mask tensors keep each pair as three consecutive channels
//! `[dx, dy, mask]`; a multi-flow-mask tensor with `n` pairs has `3n`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct Sample {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    ay: f64,
    ax: f64,
    /// Whether the unclamped coordinate was inside, per axis.
    in_y: bool,
    in_x: bool,
}

fn locate(pos: f64, n: usize) -> (usize, usize, f64, bool) {
    let max = (n - 1) as f64;
    let inside = (0.0..=max).contains(&pos);
    let p = pos.clamp(0.0, max);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, p - i0 as f64, inside)
}

fn sample_at(i: usize, j: usize, dx: f64, dy: f64, h: usize, w: usize) -> Sample {
    let (y0, y1, ay, in_y) = locate(i as f64 + dy, h);
    let (x0, x1, ax, in_x) = locate(j as f64 + dx, w);
    Sample { y0, y1, x0, x1, ay, ax, in_y, in_x }
}

struct Dims {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
}

fn check(x: &Tensor, flow: &Tensor, mask: &Tensor) -> Result<Dims> {
    let op = "backward_warp";
    let d = x.dims();
    let (t, h, w, c) = match d.len() {
        3 => (1, d[0], d[1], d[2]),
        4 => (d[0], d[1], d[2], d[3]),
        _ => return Err(Error::shape(op, format!("input must be H×W×C or T×H×W×C, got {d:?}"))),
    };
    let lead = &d[..d.len() - 1];
    if flow.rank() != d.len() || &flow.dims()[..d.len() - 1] != lead || flow.channels() != 2 {
        return Err(Error::shape(op, format!("flow dims {:?} do not fit input {d:?} (need 2 channels)", flow.dims())));
    }
    if mask.rank() != d.len() || &mask.dims()[..d.len() - 1] != lead || mask.channels() != 1 {
        return Err(Error::shape(op, format!("mask dims {:?} do not fit input {d:?} (need 1 channel)", mask.dims())));
    }
    Ok(Dims { t, h, w, c })
}

fn forward(d: &Dims, x: &[f64], flow: &[f64], mask: &[f64]) -> Vec<f64> {
    let Dims { t, h, w, c } = *d;
    let mut out = vec![0.0; t * h * w * c];
    for f in 0..t {
        let xf = &x[f * h * w * c..(f + 1) * h * w * c];
        for i in 0..h {
            for j in 0..w {
                let p = (f * h + i) * w + j;
                let s = sample_at(i, j, flow[2 * p], flow[2 * p + 1], h, w);
                let m = mask[p];
                let (w00, w01) = ((1.0 - s.ay) * (1.0 - s.ax), (1.0 - s.ay) * s.ax);
                let (w10, w11) = (s.ay * (1.0 - s.ax), s.ay * s.ax);
                let (o00, o01) = ((s.y0 * w + s.x0) * c, (s.y0 * w + s.x1) * c);
                let (o10, o11) = ((s.y1 * w + s.x0) * c, (s.y1 * w + s.x1) * c);
                for ch in 0..c {
                    let v = w00 * xf[o00 + ch] + w01 * xf[o01 + ch] + w10 * xf[o10 + ch] + w11 * xf[o11 + ch];
                    out[p * c + ch] = m * v;
                }
            }
        }
    }
    out
}

fn backward(
    d: &Dims,
    x: &[f64],
    flow: &[f64],
    mask: &[f64],
    g: &[f64],
    needs: &[bool],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let Dims { t, h, w, c } = *d;
    let mut gx = needs[0].then(|| vec![0.0; x.len()]);
    let mut gflow = needs[1].then(|| vec![0.0; flow.len()]);
    let mut gmask = needs[2].then(|| vec![0.0; mask.len()]);
    for f in 0..t {
        let base = f * h * w * c;
        let xf = &x[base..base + h * w * c];
        for i in 0..h {
            for j in 0..w {
                let p = (f * h + i) * w + j;
                let s = sample_at(i, j, flow[2 * p], flow[2 * p + 1], h, w);
                let m = mask[p];
                let (w00, w01) = ((1.0 - s.ay) * (1.0 - s.ax), (1.0 - s.ay) * s.ax);
                let (w10, w11) = (s.ay * (1.0 - s.ax), s.ay * s.ax);
                let (o00, o01) = ((s.y0 * w + s.x0) * c, (s.y0 * w + s.x1) * c);
                let (o10, o11) = ((s.y1 * w + s.x0) * c, (s.y1 * w + s.x1) * c);
                let (mut dv_dx, mut dv_dy, mut gm) = (0.0, 0.0, 0.0);
                for ch in 0..c {
                    let go = g[p * c + ch];
                    let (a, b, cc, dd) = (xf[o00 + ch], xf[o01 + ch], xf[o10 + ch], xf[o11 + ch]);
                    gm += go * (w00 * a + w01 * b + w10 * cc + w11 * dd);
                    dv_dx += go * ((1.0 - s.ay) * (b - a) + s.ay * (dd - cc));
                    dv_dy += go * ((1.0 - s.ax) * (cc - a) + s.ax * (dd - b));
                    if let Some(gx) = gx.as_mut() {
                        let gs = m * go;
                        gx[base + o00 + ch] += gs * w00;
                        gx[base + o01 + ch] += gs * w01;
                        gx[base + o10 + ch] += gs * w10;
                        gx[base + o11 + ch] += gs * w11;
                    }
                }
                if let Some(gf) = gflow.as_mut() {
                    gf[2 * p] = if s.in_x { m * dv_dx } else { 0.0 };
                    gf[2 * p + 1] = if s.in_y { m * dv_dy } else { 0.0 };
                }
                if let Some(gmk) = gmask.as_mut() {
                    gmk[p] = gm;
                }
            }
        }
    }
    (gx, gflow, gmask)
}

/// Warp `x` (`H×W×C`, or `T×H×W×C` frame by frame) by `flow` and `mask`.
pub fn backward_warp(x: &Tensor, flow: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let d = check(x, flow, mask)?;
    Tensor::new(x.dims().to_vec(), forward(&d, x.data(), flow.data(), mask.data()))
}

/// Warp every frame by each of the `n` flow-mask pairs in `f` (`T×H×W×3n`).
/// Returns the `n` warped copies concatenated along channels (`T×H×W×nC`).
pub fn warp_pairs(x: &Tensor, f: &Tensor) -> Result<Tensor> {
    let n = pair_count(x, f)?;
    let copies = (0..n)
        .map(|j| backward_warp(x, &f.channel_slice(3 * j, 2), &f.channel_slice(3 * j + 2, 1)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_channels(&copies.iter().collect::<Vec<_>>())
}

/// Warp every frame by each pair in `f` and average the `n` copies (`T×H×W×C`).
pub fn warp_sequence(x: &Tensor, f: &Tensor) -> Result<Tensor> {
    let n = pair_count(x, f)?;
    let mut acc = Tensor::zeros(x.dims());
    for j in 0..n {
        acc.add_assign(&backward_warp(x, &f.channel_slice(3 * j, 2), &f.channel_slice(3 * j + 2, 1))?);
    }
    Ok(acc.scale(1.0 / n as f64))
}

fn pair_count(x: &Tensor, f: &Tensor) -> Result<usize> {
    x.expect_rank("warp_sequence", "input", 4)?;
    f.expect_rank("warp_sequence", "flow-mask", 4)?;
    if f.dims()[..3] != x.dims()[..3] {
        return Err(Error::shape("warp_sequence", format!("flow-mask {:?} vs input {:?}", f.dims(), x.dims())));
    }
    let ch = f.channels();
    if ch == 0 || ch % 3 != 0 {
        return Err(Error::shape("warp_sequence", format!("flow-mask channels {ch} not a multiple of 3")));
    }
    Ok(ch / 3)
}

/// Multi-flow-mask state with zero flows and unit masks.
pub fn identity_flow_mask(t: usize, h: usize, w: usize, n: usize) -> Tensor {
    Tensor::from_fn(&[t, h, w, 3 * n], |i| if i[3] % 3 == 2 { 1.0 } else { 0.0 })
}

impl Graph {
    pub fn backward_warp(&mut self, x: Var, flow: Var, mask: Var) -> Result<Var> {
        let d = check(self.value(x), self.value(flow), self.value(mask))?;
        let out = Tensor::new(
            self.dims(x).to_vec(),
            forward(&d, self.value(x).data(), self.value(flow).data(), self.value(mask).data()),
        )?;
        Ok(self.record(out, &[x, flow, mask], move |args| {
            let (x, fl, m) = (args.inputs[0], args.inputs[1], args.inputs[2]);
            let (gx, gf, gm) = backward(&d, x.data(), fl.data(), m.data(), args.grad.data(), &args.needs);
            vec![
                gx.map(|v| Tensor::new(x.dims().to_vec(), v).unwrap()),
                gf.map(|v| Tensor::new(fl.dims().to_vec(), v).unwrap()),
                gm.map(|v| Tensor::new(m.dims().to_vec(), v).unwrap()),
            ]
        }))
    }

    /// Warp with a single `[dx, dy, mask]` flow-mask tensor.
    pub fn warp_flow_mask(&mut self, x: Var, fm: Var) -> Result<Var> {
        let flow = self.slice_channels(fm, 0, 2)?;
        let mask = self.slice_channels(fm, 2, 1)?;
        self.backward_warp(x, flow, mask)
    }

    fn warped_copies(&mut self, x: Var, f: Var) -> Result<Vec<Var>> {
        let n = pair_count(self.value(x), self.value(f))?;
        (0..n)
            .map(|j| {
                let fm = self.slice_channels(f, 3 * j, 3)?;
                self.warp_flow_mask(x, fm)
            })
            .collect()
    }

    /// Differentiable [`warp_pairs`].
    pub fn warp_pairs(&mut self, x: Var, f: Var) -> Result<Var> {
        let copies = self.warped_copies(x, f)?;
        self.concat_channels(&copies)
    }

    /// Differentiable [`warp_sequence`].
    pub fn warp_sequence(&mut self, x: Var, f: Var) -> Result<Var> {
        let copies = self.warped_copies(x, f)?;
        let n = copies.len();
        let terms: Vec<(f64, Var)> = copies.into_iter().map(|v| (1.0 / n as f64, v)).collect();
        self.weighted_sum(&terms)
    }
}
