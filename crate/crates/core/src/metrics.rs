//! Image and video quality metrics: PSNR, SSIM and the temporal
//! flow-consistency score tOF.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Returned by [`psnr`] when the images are (numerically) identical.
pub const PSNR_CAP: f64 = 99.0;
const MSE_FLOOR: f64 = 1e-12;

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.expect_same_dims("psnr", b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse < MSE_FLOOR {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Channel mean of an `H×W×C` image as `H×W` values.
fn gray(x: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w, c) = match x.dims() {
        &[h, w] => (h, w, 1),
        &[h, w, c] => (h, w, c),
        d => return Err(Error::shape("ssim", format!("expected H×W or H×W×C, got {d:?}"))),
    };
    Ok((h, w, x.data().chunks_exact(c).map(|p| p.iter().sum::<f64>() / c as f64).collect()))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully-inside 11×11 Gaussian windows (σ = 1.5) of the
/// channel-mean gray images, with `C1 = (0.01·peak)²`, `C2 = (0.03·peak)²`.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.expect_same_dims("ssim", b)?;
    let (h, w, ga) = gray(a)?;
    let (_, _, gb) = gray(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape("ssim", format!("{h}×{w} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    // Separable Gaussian moments over valid windows: rows first, then columns.
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let fields: [Box<dyn Fn(usize) -> f64>; 5] = [
        Box::new(|i| ga[i]),
        Box::new(|i| gb[i]),
        Box::new(|i| ga[i] * ga[i]),
        Box::new(|i| gb[i] * gb[i]),
        Box::new(|i| ga[i] * gb[i]),
    ];
    let moments: Vec<Vec<f64>> = fields
        .iter()
        .map(|f| {
            let mut rows = vec![0.0; h * wo];
            for y in 0..h {
                for x in 0..wo {
                    rows[y * wo + x] = (0..SSIM_WINDOW).map(|k| g[k] * f(y * w + x + k)).sum();
                }
            }
            let mut out = vec![0.0; ho * wo];
            for y in 0..ho {
                for x in 0..wo {
                    out[y * wo + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * wo + x]).sum();
                }
            }
            out
        })
        .collect();
    let total: f64 = (0..ho * wo)
        .map(|i| {
            let (ma, mb) = (moments[0][i], moments[1][i]);
            let va = moments[2][i] - ma * ma;
            let vb = moments[3][i] - mb * mb;
            let cov = moments[4][i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / (ho * wo) as f64)
}

// ---- tOF ---------------------------------------------------------------------

pub const TOF_BLOCK: usize = 4;
/// Largest displacement the block matcher reports, per axis.
pub const TOF_SEARCH: i64 = 4;
/// Blocks closer than this to the border are not scored.
pub const TOF_MARGIN: usize = 4;

struct Gray {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Gray {
    fn at(&self, y: i64, x: i64) -> f64 {
        let y = y.clamp(0, self.h as i64 - 1) as usize;
        let x = x.clamp(0, self.w as i64 - 1) as usize;
        self.v[y * self.w + x]
    }

    /// 2×2 box average (odd trailing row/column dropped).
    fn half(&self) -> Gray {
        let (h, w) = (self.h / 2, self.w / 2);
        let v = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w * 2) as i64, (i % w * 2) as i64);
                0.25 * (self.at(y, x) + self.at(y, x + 1) + self.at(y + 1, x) + self.at(y + 1, x + 1))
            })
            .collect();
        Gray { h, w, v }
    }

    /// Sum of absolute differences between the `size²` block at `(y, x)`
    /// here and the block displaced by `(dy, dx)` in `other`.
    fn sad(&self, other: &Gray, y: i64, x: i64, size: i64, dy: i64, dx: i64) -> f64 {
        let mut s = 0.0;
        for i in 0..size {
            for j in 0..size {
                s += (self.at(y + i, x + j) - other.at(y + i + dy, x + j + dx)).abs();
            }
        }
        s
    }
}

/// Candidate displacements in `[-r, r]²` around `(cy, cx)` (within `±cap`),
/// ordered by SAD, then by the smaller displacement, then by scan order.
fn ranked_matches(a: &Gray, b: &Gray, y: i64, x: i64, size: i64, cy: i64, cx: i64, r: i64, cap: i64) -> Vec<(f64, i64, i64, i64)> {
    let mut all = Vec::new();
    for dy in cy - r..=cy + r {
        for dx in cx - r..=cx + r {
            if dy.abs() > cap || dx.abs() > cap {
                continue;
            }
            all.push((a.sad(b, y, x, size, dy, dx), dy.abs() + dx.abs(), dy, dx));
        }
    }
    // A stable sort keeps scan order among exact ties; costs within 1e-12
    // count as ties.
    all.sort_by(|p, q| {
        if (p.0 - q.0).abs() <= 1e-12 {
            p.1.cmp(&q.1)
        } else {
            p.0.total_cmp(&q.0)
        }
    });
    all
}

/// Coarse candidates refined at full resolution.
const TOF_CANDIDATES: usize = 5;

/// Per-block motion `a → b` by two-level block matching: ±2 at half
/// resolution (8×8 context per 4×4 block), then ±1 refinement at full
/// resolution around each of the best [`TOF_CANDIDATES`] coarse
/// displacements (half resolution aliases mid-band texture, so the single
/// best coarse match is not reliable), capped at ±[`TOF_SEARCH`].
/// Returns `(dy, dx)` for every scored block.
fn block_flow(a: &Gray, b: &Gray) -> Vec<(i64, i64)> {
    let (ha, hb) = (a.half(), b.half());
    let bs = TOF_BLOCK as i64;
    let mut out = Vec::new();
    let mut by = TOF_MARGIN;
    while by + TOF_BLOCK + TOF_MARGIN <= a.h {
        let mut bx = TOF_MARGIN;
        while bx + TOF_BLOCK + TOF_MARGIN <= a.w {
            let (y, x) = (by as i64, bx as i64);
            let coarse = ranked_matches(&ha, &hb, y / 2 - 1, x / 2 - 1, bs, 0, 0, 2, TOF_SEARCH / 2);
            let mut fine: Vec<(f64, i64, i64, i64)> = coarse
                .iter()
                .take(TOF_CANDIDATES)
                .map(|&(_, _, cy, cx)| ranked_matches(a, b, y, x, bs, 2 * cy, 2 * cx, 1, TOF_SEARCH)[0])
                .collect();
            // Same ordering as within a search; candidates keep coarse rank on ties.
            fine.sort_by(|p, q| if (p.0 - q.0).abs() <= 1e-12 { p.1.cmp(&q.1) } else { p.0.total_cmp(&q.0) });
            out.push((fine[0].2, fine[0].3));
            bx += TOF_BLOCK;
        }
        by += TOF_BLOCK;
    }
    out
}

fn gray_frames(seq: &Tensor) -> Result<Vec<Gray>> {
    if seq.rank() != 4 && seq.rank() != 3 {
        return Err(Error::shape("tof", format!("expected T×H×W×C or T×H×W, got {:?}", seq.dims())));
    }
    let t = seq.dims()[0];
    (0..t)
        .map(|i| {
            let (h, w, v) = gray(&seq.frame(i))?;
            Ok(Gray { h, w, v })
        })
        .collect()
}

/// Mean L1 difference between the block motion fields of consecutive frames
/// of `out` and of `gt`.
pub fn tof(out: &Tensor, gt: &Tensor) -> Result<f64> {
    out.expect_same_dims("tof", gt)?;
    if out.rank() < 3 || out.dims()[0] < 2 {
        return Err(Error::shape("tof", format!("need at least 2 frames, got {:?}", out.dims())));
    }
    let (fo, fg) = (gray_frames(out)?, gray_frames(gt)?);
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 0..fo.len() - 1 {
        let vo = block_flow(&fo[t], &fo[t + 1]);
        let vg = block_flow(&fg[t], &fg[t + 1]);
        for (a, b) in vo.iter().zip(&vg) {
            sum += ((a.0 - b.0).abs() + (a.1 - b.1).abs()) as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::shape("tof", format!("frames {:?} too small for any scored block", out.dims())));
    }
    Ok(sum / count as f64)
}
