//! Per-pixel (dynamic) filtering and its flow-guided variants.
//!
//! A per-pixel kernel bank is a `T×H×W×k²` tensor: at frame `t` and pixel `p`
//! the `k×k` filter is stored row-major over offsets `(dy, dx)` from
//! `(-k/2, -k/2)` to `(k/2, k/2)`, i.e. entry `(dy + k/2)·k + (dx + k/2)`.
//! Kernels are shared across the channels of the filtered tensor and samples
//! outside the image are replicated from the nearest edge.
//!
//! Restoration (upsampling) banks are `T×H×W×s²k²`: phase `(a, b)` of the
//! `s×s` output block at `s·p` uses entries `(a·s + b)·k² ..`.

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::resample::bilinear_upsample;
use crate::tensor::Tensor;
use crate::warp::backward_warp;

/// Side length of the square kernels stored in `channels` entries.
pub fn kernel_side(op: &'static str, channels: usize) -> Result<usize> {
    let k = (channels as f64).sqrt().round() as usize;
    if k * k != channels {
        return Err(Error::shape(op, format!("{channels} kernel entries is not a square")));
    }
    if k % 2 == 0 {
        return Err(Error::shape(op, format!("kernel size {k} is even; odd sizes only")));
    }
    Ok(k)
}

/// Smallest odd size `>= requested`.
pub fn odd_kernel_size(requested: usize) -> usize {
    if requested % 2 == 0 {
        requested + 1
    } else {
        requested
    }
}

fn clampi(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

#[derive(Clone, Copy, Debug)]
struct StridedGeom {
    t: usize,
    /// Input (possibly high-resolution) spatial size.
    hx: usize,
    wx: usize,
    c: usize,
    /// Output / kernel grid size.
    h: usize,
    w: usize,
    k: usize,
    s: usize,
}

impl StridedGeom {
    /// Visit `(output pixel, kernel entry, input offset)` triples.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let r = (self.k / 2) as isize;
        let anchor = (self.s - 1) / 2;
        let kk = self.k * self.k;
        for i in 0..self.h {
            let cy = (self.s * i + anchor) as isize;
            for j in 0..self.w {
                let cx = (self.s * j + anchor) as isize;
                let out = i * self.w + j;
                for t in 0..self.t {
                    let kbase = ((t * self.h + i) * self.w + j) * kk;
                    for dy in 0..self.k {
                        let sy = clampi(cy + dy as isize - r, self.hx);
                        for dx in 0..self.k {
                            let sx = clampi(cx + dx as isize - r, self.wx);
                            let src = ((t * self.hx + sy) * self.wx + sx) * self.c;
                            f(out, kbase + dy * self.k + dx, src);
                        }
                    }
                }
            }
        }
    }
}

fn strided_geom(op: &'static str, x: &Tensor, kernels: &Tensor, s: usize) -> Result<StridedGeom> {
    x.expect_rank(op, "input", 4)?;
    kernels.expect_rank(op, "kernels", 4)?;
    let (xd, kd) = (x.dims(), kernels.dims());
    if s == 0 {
        return Err(Error::invalid(op, "stride must be >= 1"));
    }
    if xd[1] % s != 0 || xd[2] % s != 0 {
        return Err(Error::shape(op, format!("input {}×{} not divisible by s={s}", xd[1], xd[2])));
    }
    if kd[0] != xd[0] {
        return Err(Error::shape(op, format!("kernel frames {} != input frames {}", kd[0], xd[0])));
    }
    if kd[1] * s != xd[1] || kd[2] * s != xd[2] {
        return Err(Error::shape(
            op,
            format!("kernel grid {}×{} × s={s} != input {}×{}", kd[1], kd[2], xd[1], xd[2]),
        ));
    }
    let k = kernel_side(op, kd[3])?;
    Ok(StridedGeom { t: xd[0], hx: xd[1], wx: xd[2], c: xd[3], h: kd[1], w: kd[2], k, s })
}

fn strided_forward(g: &StridedGeom, x: &[f64], kern: &[f64]) -> Vec<f64> {
    let c = g.c;
    let mut out = vec![0.0; g.h * g.w * c];
    g.for_each(|o, ki, src| {
        let wgt = kern[ki];
        for ch in 0..c {
            out[o * c + ch] += wgt * x[src + ch];
        }
    });
    out
}

fn strided_backward(
    g: &StridedGeom,
    x: &[f64],
    kern: &[f64],
    grad: &[f64],
    needs: &[bool],
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let c = g.c;
    let mut gx = needs[0].then(|| vec![0.0; x.len()]);
    let mut gk = needs[1].then(|| vec![0.0; kern.len()]);
    g.for_each(|o, ki, src| {
        let go = &grad[o * c..(o + 1) * c];
        if let Some(gk) = gk.as_mut() {
            gk[ki] += go.iter().zip(&x[src..src + c]).map(|(a, b)| a * b).sum::<f64>();
        }
        if let Some(gx) = gx.as_mut() {
            let wgt = kern[ki];
            for ch in 0..c {
                gx[src + ch] += wgt * go[ch];
            }
        }
    });
    (gx, gk)
}

#[derive(Clone, Copy, Debug)]
struct UpGeom {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    s: usize,
}

impl UpGeom {
    /// Visit `(output pixel, kernel entry, input offset)` triples.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let r = (self.k / 2) as isize;
        let (kk, s) = (self.k * self.k, self.s);
        let wo = self.w * s;
        for i in 0..self.h {
            for j in 0..self.w {
                for t in 0..self.t {
                    let kbase = ((t * self.h + i) * self.w + j) * s * s * kk;
                    for a in 0..s {
                        for b in 0..s {
                            let out = (i * s + a) * wo + j * s + b;
                            let pbase = kbase + (a * s + b) * kk;
                            for dy in 0..self.k {
                                let sy = clampi(i as isize + dy as isize - r, self.h);
                                for dx in 0..self.k {
                                    let sx = clampi(j as isize + dx as isize - r, self.w);
                                    let src = ((t * self.h + sy) * self.w + sx) * self.c;
                                    f(out, pbase + dy * self.k + dx, src);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn up_geom(op: &'static str, x: &Tensor, kernels: &Tensor, s: usize) -> Result<UpGeom> {
    x.expect_rank(op, "input", 4)?;
    kernels.expect_rank(op, "kernels", 4)?;
    if s == 0 {
        return Err(Error::invalid(op, "scale must be >= 1"));
    }
    let (xd, kd) = (x.dims(), kernels.dims());
    if kd[..3] != xd[..3] {
        return Err(Error::shape(op, format!("kernel dims {kd:?} do not match input {xd:?}")));
    }
    if kd[3] % (s * s) != 0 {
        return Err(Error::shape(op, format!("{} kernel entries not divisible by s²={}", kd[3], s * s)));
    }
    let k = kernel_side(op, kd[3] / (s * s))?;
    Ok(UpGeom { t: xd[0], h: xd[1], w: xd[2], c: xd[3], k, s })
}

fn up_forward(g: &UpGeom, x: &[f64], kern: &[f64]) -> Vec<f64> {
    let c = g.c;
    let mut out = vec![0.0; g.h * g.w * g.s * g.s * c];
    g.for_each(|o, ki, src| {
        let wgt = kern[ki];
        for ch in 0..c {
            out[o * c + ch] += wgt * x[src + ch];
        }
    });
    out
}

fn up_backward(
    g: &UpGeom,
    x: &[f64],
    kern: &[f64],
    grad: &[f64],
    needs: &[bool],
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let c = g.c;
    let mut gx = needs[0].then(|| vec![0.0; x.len()]);
    let mut gk = needs[1].then(|| vec![0.0; kern.len()]);
    g.for_each(|o, ki, src| {
        let go = &grad[o * c..(o + 1) * c];
        if let Some(gk) = gk.as_mut() {
            gk[ki] += go.iter().zip(&x[src..src + c]).map(|(a, b)| a * b).sum::<f64>();
        }
        if let Some(gx) = gx.as_mut() {
            let wgt = kern[ki];
            for ch in 0..c {
                gx[src + ch] += wgt * go[ch];
            }
        }
    });
    (gx, gk)
}

fn as_video(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        3 => {
            let mut d = vec![1];
            d.extend_from_slice(x.dims());
            x.clone().reshape(&d)
        }
        4 => Ok(x.clone()),
        _ => Err(Error::shape("dynamic_filter", format!("expected H×W×C or T×H×W×C, got {:?}", x.dims()))),
    }
}

/// Strided dynamic filtering: for each kernel-grid pixel `p` the window is
/// centred on input pixel `s·p + (s-1)/2` (integer division) and all frames
/// are summed. `s = 1` is plain per-pixel filtering.
pub fn dynamic_filter_strided(x: &Tensor, kernels: &Tensor, s: usize) -> Result<Tensor> {
    let g = strided_geom("dynamic_filter", x, kernels, s)?;
    Tensor::new(vec![g.h, g.w, g.c], strided_forward(&g, x.data(), kernels.data()))
}

/// `y(p) = Σ_k F^p(p_k) x(p + p_k)` for a single image (`H×W×C`).
pub fn dynamic_filter_image(x: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    dynamic_filter_strided(&as_video(x)?, &as_video(kernels)?, 1)
}

/// Per-pixel filtering summed over the `T` frames of `x` (`T×H×W×C`).
pub fn dynamic_filter_video(x: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    dynamic_filter_strided(x, kernels, 1)
}

/// Align every frame to the centre through its flow-mask (`T×H×W×3`), then
/// filter as in [`dynamic_filter_video`].
pub fn fgdf(x: &Tensor, flow_mask: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let aligned = warp_with(x, flow_mask)?;
    dynamic_filter_video(&aligned, kernels)
}

/// Flow-guided strided degradation: the LR flow-mask is upsampled ×`s`
/// (flows scaled by `s`), the HR sequence `y` is warped with it and then
/// filtered with stride `s`.
pub fn fgdf_downsample(y: &Tensor, flow_mask: &Tensor, kernels: &Tensor, s: usize) -> Result<Tensor> {
    let hr = upscale_flow_mask(flow_mask, s)?;
    let aligned = warp_with(y, &hr)?;
    dynamic_filter_strided(&aligned, kernels, s)
}

/// Per-pixel ×`s` upsampling filter with kernels `T×H×W×s²k²`.
pub fn dynamic_upsample(x: &Tensor, kernels: &Tensor, s: usize) -> Result<Tensor> {
    let g = up_geom("dynamic_upsample", x, kernels, s)?;
    Tensor::new(vec![g.h * s, g.w * s, g.c], up_forward(&g, x.data(), kernels.data()))
}

/// Flow-guided ×`s` dynamic upsampling.
pub fn fgdf_upsample(x: &Tensor, flow_mask: &Tensor, kernels: &Tensor, s: usize) -> Result<Tensor> {
    let aligned = warp_with(x, flow_mask)?;
    dynamic_upsample(&aligned, kernels, s)
}

fn warp_with(x: &Tensor, flow_mask: &Tensor) -> Result<Tensor> {
    if flow_mask.rank() != 4 || flow_mask.channels() != 3 {
        return Err(Error::shape("fgdf", format!("flow-mask must be T×H×W×3, got {:?}", flow_mask.dims())));
    }
    backward_warp(x, &flow_mask.channel_slice(0, 2), &flow_mask.channel_slice(2, 1))
}

/// Bilinear ×`s` upsampling of a `[dx, dy, mask]` tensor with flows scaled by `s`.
pub fn upscale_flow_mask(flow_mask: &Tensor, s: usize) -> Result<Tensor> {
    let up = bilinear_upsample(flow_mask, s)?;
    let sf = s as f64;
    let c = up.channels();
    let mut out = up;
    for px in out.data_mut().chunks_exact_mut(c) {
        for v in px.iter_mut().take(c - 1) {
            *v *= sf;
        }
    }
    Ok(out)
}

/// Elementwise sigmoid: degradation kernels with every entry in (0, 1).
pub fn normalize_degradation(raw: &Tensor) -> Tensor {
    raw.map(sigmoid)
}

/// Group normalisation of restoration kernels: for every pixel and output
/// phase, the `T·k²` weights across all frames are shifted to sum to one
/// (`w - mean + 1/(T·k²)`). Negative weights are kept.
pub fn normalize_restoration(raw: &Tensor, s: usize) -> Result<Tensor> {
    let geom = restoration_groups(raw, s)?;
    let mut out = raw.clone();
    geom.shift_to_unit_sum(out.data_mut());
    Ok(out)
}

struct Groups {
    t: usize,
    pixels: usize,
    phases: usize,
    kk: usize,
}

impl Groups {
    fn for_each_group(&self, mut f: impl FnMut(&[usize])) {
        let mut idx = Vec::with_capacity(self.t * self.kk);
        let per_px = self.phases * self.kk;
        for p in 0..self.pixels {
            for ph in 0..self.phases {
                idx.clear();
                for t in 0..self.t {
                    let base = (t * self.pixels + p) * per_px + ph * self.kk;
                    idx.extend(base..base + self.kk);
                }
                f(&idx);
            }
        }
    }

    fn shift_to_unit_sum(&self, data: &mut [f64]) {
        let n = (self.t * self.kk) as f64;
        self.for_each_group(|idx| {
            let mean = idx.iter().map(|&i| data[i]).sum::<f64>() / n;
            for &i in idx {
                data[i] += 1.0 / n - mean;
            }
        });
    }

    fn center(&self, data: &mut [f64]) {
        let n = (self.t * self.kk) as f64;
        self.for_each_group(|idx| {
            let mean = idx.iter().map(|&i| data[i]).sum::<f64>() / n;
            for &i in idx {
                data[i] -= mean;
            }
        });
    }
}

fn restoration_groups(raw: &Tensor, s: usize) -> Result<Groups> {
    let op = "normalize_restoration";
    raw.expect_rank(op, "kernels", 4)?;
    let d = raw.dims();
    if s == 0 || d[3] % (s * s) != 0 {
        return Err(Error::shape(op, format!("{} entries not divisible by s²", d[3])));
    }
    Ok(Groups { t: d[0], pixels: d[1] * d[2], phases: s * s, kk: d[3] / (s * s) })
}

impl Graph {
    /// Differentiable [`dynamic_filter_strided`].
    pub fn dynamic_filter(&mut self, x: Var, kernels: Var, s: usize) -> Result<Var> {
        let g = strided_geom("dynamic_filter", self.value(x), self.value(kernels), s)?;
        let out = Tensor::new(
            vec![g.h, g.w, g.c],
            strided_forward(&g, self.value(x).data(), self.value(kernels).data()),
        )?;
        Ok(self.record(out, &[x, kernels], move |args| {
            let (x, k) = (args.inputs[0], args.inputs[1]);
            let (gx, gk) = strided_backward(&g, x.data(), k.data(), args.grad.data(), &args.needs);
            vec![
                gx.map(|v| Tensor::new(x.dims().to_vec(), v).unwrap()),
                gk.map(|v| Tensor::new(k.dims().to_vec(), v).unwrap()),
            ]
        }))
    }

    /// Differentiable [`dynamic_upsample`].
    pub fn dynamic_upsample(&mut self, x: Var, kernels: Var, s: usize) -> Result<Var> {
        let g = up_geom("dynamic_upsample", self.value(x), self.value(kernels), s)?;
        let out = Tensor::new(
            vec![g.h * s, g.w * s, g.c],
            up_forward(&g, self.value(x).data(), self.value(kernels).data()),
        )?;
        Ok(self.record(out, &[x, kernels], move |args| {
            let (x, k) = (args.inputs[0], args.inputs[1]);
            let (gx, gk) = up_backward(&g, x.data(), k.data(), args.grad.data(), &args.needs);
            vec![
                gx.map(|v| Tensor::new(x.dims().to_vec(), v).unwrap()),
                gk.map(|v| Tensor::new(k.dims().to_vec(), v).unwrap()),
            ]
        }))
    }

    pub fn fgdf(&mut self, x: Var, flow_mask: Var, kernels: Var) -> Result<Var> {
        let aligned = self.warp_flow_mask(x, flow_mask)?;
        self.dynamic_filter(aligned, kernels, 1)
    }

    /// Bilinear ×`s` upsampling of a flow-mask, flows scaled by `s`.
    pub fn upscale_flow_mask(&mut self, flow_mask: Var, s: usize) -> Result<Var> {
        let up = self.bilinear_upsample(flow_mask, s)?;
        let c = self.value(up).channels();
        let scale = Tensor::from_fn(&[c], |i| if i[0] + 1 < c { s as f64 } else { 1.0 });
        let dims = self.dims(up).to_vec();
        let full = Tensor::from_fn(&dims, |i| scale.data()[i[dims.len() - 1]]);
        let k = self.constant(full);
        self.mul(up, k)
    }

    pub fn fgdf_downsample(&mut self, y: Var, flow_mask: Var, kernels: Var, s: usize) -> Result<Var> {
        let hr = self.upscale_flow_mask(flow_mask, s)?;
        let aligned = self.warp_flow_mask(y, hr)?;
        self.dynamic_filter(aligned, kernels, s)
    }

    pub fn fgdf_upsample(&mut self, x: Var, flow_mask: Var, kernels: Var, s: usize) -> Result<Var> {
        let aligned = self.warp_flow_mask(x, flow_mask)?;
        self.dynamic_upsample(aligned, kernels, s)
    }

    /// Differentiable [`normalize_restoration`].
    pub fn normalize_restoration(&mut self, raw: Var, s: usize) -> Result<Var> {
        let groups = restoration_groups(self.value(raw), s)?;
        let out = normalize_restoration(self.value(raw), s)?;
        Ok(self.record(out, &[raw], move |args| {
            let mut g = args.grad.clone();
            groups.center(g.data_mut());
            vec![Some(g)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    fn delta_kernels(t: usize, h: usize, w: usize, k: usize, weight: f64) -> Tensor {
        Tensor::from_fn(&[t, h, w, k * k], |i| if i[3] == k * k / 2 { weight } else { 0.0 })
    }

    #[test]
    fn delta_and_uniform_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&[5, 6, 2], &mut rng);
        assert_eq!(dynamic_filter_image(&x, &delta_kernels(1, 5, 6, 3, 1.0)).unwrap(), x);
        let c = Tensor::full(&[4, 4, 1], 0.8);
        let uni = Tensor::full(&[1, 4, 4, 9], 1.0 / 9.0);
        let y = dynamic_filter_image(&c, &uni).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.8).abs() < 1e-15));
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::zeros(&[4, 4, 1]);
        assert!(dynamic_filter_image(&x, &Tensor::zeros(&[1, 4, 4, 4])).is_err());
        assert!(dynamic_filter_image(&x, &Tensor::zeros(&[1, 4, 4, 5])).is_err());
    }

    #[test]
    fn static_sequence_temporal_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frame = random(&[5, 5, 1], &mut rng);
        let x = Tensor::stack(&[frame.clone(), frame.clone(), frame.clone()]).unwrap();
        let y = dynamic_filter_video(&x, &delta_kernels(3, 5, 5, 3, 1.0 / 3.0)).unwrap();
        assert!(y.max_abs_diff(&frame) < 1e-15);
    }

    #[test]
    fn zero_flow_fgdf_is_conventional_filtering() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&[3, 5, 5, 2], &mut rng);
        let k = random(&[3, 5, 5, 9], &mut rng);
        let fm = crate::warp::identity_flow_mask(3, 5, 5, 1);
        assert_eq!(fgdf(&x, &fm, &k).unwrap(), dynamic_filter_video(&x, &k).unwrap());
    }

    #[test]
    fn stride_one_downsample_is_fgdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&[3, 5, 5, 1], &mut rng);
        let k = random(&[3, 5, 5, 9], &mut rng);
        let fm = Tensor::from_fn(&[3, 5, 5, 3], |i| if i[3] == 2 { 0.9 } else { 0.7 * (i[0] as f64 - 1.0) });
        let a = fgdf_downsample(&x, &fm, &k, 1).unwrap();
        let b = fgdf(&x, &fm, &k).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
        assert!(fgdf_downsample(&Tensor::zeros(&[3, 5, 5, 1]), &fm, &k, 2).is_err());
    }

    #[test]
    fn normalized_kernels_preserve_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        // Downsampling: per-pixel kernels summing to one over (t, k).
        let raw = Tensor::from_fn(&[3, 4, 4, 9], |_| rng.gen_range(0.0..1.0));
        let mut kd = raw.clone();
        for p in 0..16 {
            let s: f64 = (0..3).flat_map(|t| (0..9).map(move |k| (t, k))).map(|(t, k)| raw.data()[(t * 16 + p) * 9 + k]).sum();
            for t in 0..3 {
                for k in 0..9 {
                    kd.data_mut()[(t * 16 + p) * 9 + k] /= s;
                }
            }
        }
        let y = Tensor::full(&[3, 8, 8, 3], 0.25);
        let out = fgdf_downsample(&y, &crate::warp::identity_flow_mask(3, 4, 4, 1), &kd, 2).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.25).abs() < 1e-14));

        // Upsampling: group-normalised restoration kernels.
        let kr = normalize_restoration(&random(&[3, 4, 4, 4 * 9], &mut rng), 2).unwrap();
        let x = Tensor::full(&[3, 4, 4, 2], -0.6);
        let fm = Tensor::from_fn(&[3, 4, 4, 3], |i| if i[3] == 2 { 1.0 } else { 0.4 });
        let up = fgdf_upsample(&x, &fm, &kr, 2).unwrap();
        assert_eq!(up.dims(), &[8, 8, 2]);
        assert!(up.data().iter().all(|v| (v + 0.6).abs() < 1e-13));
    }

    #[test]
    fn upsample_scale_one_static_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let frame = random(&[4, 4, 1], &mut rng);
        let x = Tensor::stack(&[frame.clone(), frame.clone(), frame.clone()]).unwrap();
        let k = delta_kernels(3, 4, 4, 3, 1.0 / 3.0);
        let y = fgdf_upsample(&x, &crate::warp::identity_flow_mask(3, 4, 4, 1), &k, 1).unwrap();
        assert!(y.max_abs_diff(&frame) < 1e-15);
    }

    #[test]
    fn degradation_normalization_values() {
        let raw = Tensor::new(vec![3], vec![0.0, 3f64.ln(), 800.0]).unwrap();
        let k = normalize_degradation(&raw);
        assert_eq!(k.data()[0], 0.5);
        assert!((k.data()[1] - 0.75).abs() < 1e-15);
        assert!(k.data()[2] <= 1.0 && k.data()[2] > 0.999);
    }

    #[test]
    fn restoration_normalization_values() {
        let z = normalize_restoration(&Tensor::zeros(&[3, 2, 2, 4 * 25]), 2).unwrap();
        assert!(z.data().iter().all(|v| (v - 1.0 / 75.0).abs() < 1e-15));
        // T=3, k=1, s=1: a group is the three frames' single weights.
        let raw = Tensor::new(vec![3, 1, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let n = normalize_restoration(&raw, 1).unwrap();
        let want = [-2.0 / 3.0, 1.0 / 3.0, 4.0 / 3.0];
        for (a, b) in n.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn filter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let y = random(&[2, 6, 6, 2], &mut rng);
        let fm = Tensor::from_fn(&[2, 3, 3, 3], |i| {
            if i[3] == 2 { 0.5 + 0.1 * i[1] as f64 } else { 0.3 + (i[0] + i[1] * 2 + i[2]) as f64 * 0.17 - 0.6 }
        });
        let kd = random(&[2, 3, 3, 9], &mut rng);
        check_gradients(&[y, fm, kd], 1e-4, |g, v| {
            let o = g.fgdf_downsample(v[0], v[1], v[2], 2)?;
            let sq = g.mul(o, o)?;
            Ok(g.sum(sq))
        });

        let x = random(&[2, 3, 3, 2], &mut rng);
        let fm = Tensor::from_fn(&[2, 3, 3, 3], |i| if i[3] == 2 { 0.8 } else { 0.33 + 0.3 * (i[0] as f64) + 0.1 * i[1] as f64 });
        let raw = random(&[2, 3, 3, 4 * 9], &mut rng);
        check_gradients(&[x, fm, raw], 1e-4, |g, v| {
            let kr = g.normalize_restoration(v[2], 2)?;
            let o = g.fgdf_upsample(v[0], v[1], kr, 2)?;
            let sq = g.mul(o, o)?;
            Ok(g.sum(sq))
        });
    }
}
