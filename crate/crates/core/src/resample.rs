//! Pixel shuffle, bilinear and bicubic resampling.
//!
//! Resampling uses the align-corners=false convention: output sample `o`
//! maps to input coordinate `(o + 0.5) / s - 0.5`, clamped to the edges.
//! Tensors are `[..]×H×W×C`; any leading axes are treated as frames.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn split_hw(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if x.rank() < 3 {
        return Err(Error::shape(op, format!("need [..]×H×W×C, got {:?}", x.dims())));
    }
    let d = x.dims();
    let r = d.len();
    let frames = d[..r - 3].iter().product();
    Ok((frames, d[r - 3], d[r - 2], d[r - 1]))
}

fn with_hw(dims: &[usize], h: usize, w: usize, c: usize) -> Vec<usize> {
    let r = dims.len();
    let mut out = dims[..r - 3].to_vec();
    out.extend_from_slice(&[h, w, c]);
    out
}

// ---- pixel shuffle ----------------------------------------------------------

/// `H×W×(s²C) → sH×sW×C`; output `(i·s+a, j·s+b, c)` reads channel `c·s² + a·s + b`.
pub fn pixel_shuffle(x: &Tensor, s: usize) -> Result<Tensor> {
    let (f, h, w, cs) = split_hw("pixel_shuffle", x)?;
    if s == 0 || cs % (s * s) != 0 {
        return Err(Error::shape("pixel_shuffle", format!("{cs} channels not divisible by s²={}", s * s)));
    }
    let c = cs / (s * s);
    let mut out = vec![0.0; x.len()];
    shuffle_map(f, h, w, c, s, |src, dst| out[dst] = x.data()[src]);
    Tensor::new(with_hw(x.dims(), h * s, w * s, c), out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(y: &Tensor, s: usize) -> Result<Tensor> {
    let (f, hs, ws, c) = split_hw("pixel_unshuffle", y)?;
    if s == 0 || hs % s != 0 || ws % s != 0 {
        return Err(Error::shape("pixel_unshuffle", format!("{hs}×{ws} not divisible by s={s}")));
    }
    let (h, w) = (hs / s, ws / s);
    let mut out = vec![0.0; y.len()];
    shuffle_map(f, h, w, c, s, |src, dst| out[src] = y.data()[dst]);
    Tensor::new(with_hw(y.dims(), h, w, c * s * s), out)
}

/// Calls `f(low-res offset, high-res offset)` for every element.
fn shuffle_map(frames: usize, h: usize, w: usize, c: usize, s: usize, mut f: impl FnMut(usize, usize)) {
    let cs = c * s * s;
    for fr in 0..frames {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    for a in 0..s {
                        for b in 0..s {
                            let src = ((fr * h + i) * w + j) * cs + ch * s * s + a * s + b;
                            let dst = ((fr * h * s + i * s + a) * w * s + j * s + b) * c + ch;
                            f(src, dst);
                        }
                    }
                }
            }
        }
    }
}

// ---- separable linear resampling ------------------------------------------

/// One output sample as a weighted sum of input samples along an axis.
type Taps = Vec<Vec<(usize, f64)>>;

fn bilinear_taps(n_in: usize, s: usize) -> Taps {
    (0..n_in * s)
        .map(|o| {
            let src = ((o as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let fr = src - i0 as f64;
            let i1 = (i0 + 1).min(n_in - 1);
            vec![(i0, 1.0 - fr), (i1, fr)]
        })
        .collect()
}

/// Keys cubic convolution kernel with `a = -0.5` (Catmull-Rom).
pub(crate) fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Bicubic taps for resizing `n_in → n_out`. When shrinking, the kernel is
/// stretched by the scale factor (antialiased), as in MATLAB's `imresize`.
fn bicubic_taps(n_in: usize, n_out: usize) -> Taps {
    let scale = n_out as f64 / n_in as f64;
    let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for i in lo..=hi {
                let wgt = cubic((center - i as f64) / stretch);
                if wgt == 0.0 {
                    continue;
                }
                let idx = i.clamp(0, n_in as isize - 1) as usize;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

fn apply_separable(x: &Tensor, rows: &Taps, cols: &Taps) -> Tensor {
    let (f, h, w, c) = split_hw("resample", x).unwrap();
    let (ho, wo) = (rows.len(), cols.len());
    let mut out = vec![0.0; f * ho * wo * c];
    for fr in 0..f {
        let src = &x.data()[fr * h * w * c..(fr + 1) * h * w * c];
        // Horizontal pass into h×wo.
        let mut tmp = vec![0.0; h * wo * c];
        for i in 0..h {
            for (oj, taps) in cols.iter().enumerate() {
                let dst = &mut tmp[(i * wo + oj) * c..(i * wo + oj + 1) * c];
                for &(j, wt) in taps {
                    for (d, s) in dst.iter_mut().zip(&src[(i * w + j) * c..(i * w + j + 1) * c]) {
                        *d += wt * s;
                    }
                }
            }
        }
        let dst_frame = &mut out[fr * ho * wo * c..(fr + 1) * ho * wo * c];
        for (oi, taps) in rows.iter().enumerate() {
            for &(i, wt) in taps {
                for (d, s) in dst_frame[oi * wo * c..(oi + 1) * wo * c]
                    .iter_mut()
                    .zip(&tmp[i * wo * c..(i + 1) * wo * c])
                {
                    *d += wt * s;
                }
            }
        }
    }
    Tensor::new(with_hw(x.dims(), ho, wo, c), out).unwrap()
}

/// Adjoint of [`apply_separable`]: scatters `g` (shaped like the output) back.
fn apply_separable_adjoint(g: &Tensor, h: usize, w: usize, rows: &Taps, cols: &Taps) -> Tensor {
    let (f, ho, wo, c) = split_hw("resample", g).unwrap();
    let mut out = vec![0.0; f * h * w * c];
    for fr in 0..f {
        let gf = &g.data()[fr * ho * wo * c..(fr + 1) * ho * wo * c];
        let mut tmp = vec![0.0; h * wo * c];
        for (oi, taps) in rows.iter().enumerate() {
            for &(i, wt) in taps {
                for (d, s) in tmp[i * wo * c..(i + 1) * wo * c].iter_mut().zip(&gf[oi * wo * c..(oi + 1) * wo * c]) {
                    *d += wt * s;
                }
            }
        }
        let dst = &mut out[fr * h * w * c..(fr + 1) * h * w * c];
        for i in 0..h {
            for (oj, taps) in cols.iter().enumerate() {
                for &(j, wt) in taps {
                    let s = &tmp[(i * wo + oj) * c..(i * wo + oj + 1) * c];
                    for (d, v) in dst[(i * w + j) * c..(i * w + j + 1) * c].iter_mut().zip(s) {
                        *d += wt * v;
                    }
                }
            }
        }
    }
    Tensor::new(with_hw(g.dims(), h, w, c), out).unwrap()
}

/// ×`s` bilinear upsampling.
pub fn bilinear_upsample(x: &Tensor, s: usize) -> Result<Tensor> {
    if s < 1 {
        return Err(Error::invalid("bilinear_upsample", "scale must be >= 1"));
    }
    let (_, h, w, _) = split_hw("bilinear_upsample", x)?;
    Ok(apply_separable(x, &bilinear_taps(h, s), &bilinear_taps(w, s)))
}

/// Bicubic resize to `out_h × out_w` (antialiased when shrinking).
pub fn bicubic_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w, _) = split_hw("bicubic_resize", x)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bicubic_resize", "empty output size"));
    }
    Ok(apply_separable(x, &bicubic_taps(h, out_h), &bicubic_taps(w, out_w)))
}

/// ×1/`s` bicubic downsampling; spatial dims must be divisible by `s`.
pub fn bicubic_downsample(x: &Tensor, s: usize) -> Result<Tensor> {
    let (_, h, w, _) = split_hw("bicubic_downsample", x)?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::shape("bicubic_downsample", format!("{h}×{w} not divisible by s={s}")));
    }
    bicubic_resize(x, h / s, w / s)
}

impl Graph {
    pub fn pixel_shuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let out = pixel_shuffle(self.value(x), s)?;
        Ok(self.record(out, &[x], move |args| vec![Some(pixel_unshuffle(args.grad, s).unwrap())]))
    }

    pub fn bilinear_upsample(&mut self, x: Var, s: usize) -> Result<Var> {
        let out = bilinear_upsample(self.value(x), s)?;
        let (_, h, w, _) = split_hw("bilinear_upsample", self.value(x))?;
        Ok(self.record(out, &[x], move |args| {
            let g = apply_separable_adjoint(args.grad, h, w, &bilinear_taps(h, s), &bilinear_taps(w, s));
            vec![Some(g)]
        }))
    }
}
