//! 2-D and 3-D convolution (cross-correlation) with replicate padding,
//! lowered to im2col + GEMM.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    t: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kt: usize,
    k: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.t * self.h * self.w
    }

    fn patch(&self) -> usize {
        self.kt * self.k * self.k * self.cin
    }

    /// Visit `(row, col, source offset)` for every im2col entry.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (rt, rk) = ((self.kt / 2) as isize, (self.k / 2) as isize);
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let patch = self.patch();
        for t in 0..self.t {
            for i in 0..self.h {
                for j in 0..self.w {
                    let row = (t * self.h + i) * self.w + j;
                    let mut col = 0;
                    for dt in 0..self.kt {
                        let st = clamp(t as isize + dt as isize - rt, self.t);
                        for dy in 0..self.k {
                            let sy = clamp(i as isize + dy as isize - rk, self.h);
                            for dx in 0..self.k {
                                let sx = clamp(j as isize + dx as isize - rk, self.w);
                                let src = ((st * self.h + sy) * self.w + sx) * self.cin;
                                f(row * patch + col, src, self.cin);
                                col += self.cin;
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.rows() * self.patch()];
        self.for_each_tap(|dst, src, n| cols[dst..dst + n].copy_from_slice(&x[src..src + n]));
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.rows() * self.cin];
        self.for_each_tap(|dst, src, n| {
            for (a, b) in x[src..src + n].iter_mut().zip(&cols[dst..dst + n]) {
                *a += b;
            }
        });
        x
    }
}

fn geometry(op: &'static str, x: &Tensor, w: &Tensor, b: &Tensor, three_d: bool) -> Result<ConvGeom> {
    let (xr, wr) = if three_d { (4, 5) } else { (3, 4) };
    x.expect_rank(op, "input", xr)?;
    w.expect_rank(op, "weight", wr)?;
    b.expect_rank(op, "bias", 1)?;
    let xd = x.dims();
    let wd = w.dims();
    let (t, h, wi, cin) = if three_d { (xd[0], xd[1], xd[2], xd[3]) } else { (1, xd[0], xd[1], xd[2]) };
    let (kt, ky, kx, wcin, cout) =
        if three_d { (wd[0], wd[1], wd[2], wd[3], wd[4]) } else { (1, wd[0], wd[1], wd[2], wd[3]) };
    if ky != kx {
        return Err(Error::shape(op, format!("kernel height {ky} != kernel width {kx}")));
    }
    if kt % 2 == 0 || ky % 2 == 0 {
        return Err(Error::shape(op, format!("kernel size must be odd, got {:?}", wd)));
    }
    if wcin != cin {
        return Err(Error::shape(op, format!("input channels {cin} != weight input channels {wcin}")));
    }
    if b.dims()[0] != cout {
        return Err(Error::shape(op, format!("bias length {} != output channels {cout}", b.dims()[0])));
    }
    Ok(ConvGeom { t, h, w: wi, cin, cout, kt, k: ky })
}

fn forward(g: &ConvGeom, x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let cols = g.im2col(x.data());
    let mut out = vec![0.0; g.rows() * g.cout];
    for row in out.chunks_exact_mut(g.cout) {
        row.copy_from_slice(b.data());
    }
    gemm(g.rows(), g.patch(), g.cout, &cols, false, w.data(), false, &mut out, true);
    out
}

fn backward(g: &ConvGeom, x: &Tensor, w: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let gd = grad.data();
    let gx = needs[0].then(|| {
        let mut dcols = vec![0.0; g.rows() * g.patch()];
        gemm(g.rows(), g.cout, g.patch(), gd, false, w.data(), true, &mut dcols, false);
        Tensor::new(x.dims().to_vec(), g.col2im(&dcols)).unwrap()
    });
    let gw = needs[1].then(|| {
        let cols = g.im2col(x.data());
        let mut dw = vec![0.0; g.patch() * g.cout];
        gemm(g.patch(), g.rows(), g.cout, &cols, true, gd, false, &mut dw, false);
        Tensor::new(w.dims().to_vec(), dw).unwrap()
    });
    let gb = needs[2].then(|| {
        let mut db = vec![0.0; g.cout];
        for row in gd.chunks_exact(g.cout) {
            for (a, b) in db.iter_mut().zip(row) {
                *a += b;
            }
        }
        Tensor::new(vec![g.cout], db).unwrap()
    });
    vec![gx, gw, gb]
}

/// `x: H×W×Cin`, `w: k×k×Cin×Cout`, `b: Cout` → `H×W×Cout`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let g = geometry("conv2d", x, w, b, false)?;
    Tensor::new(vec![g.h, g.w, g.cout], forward(&g, x, w, b))
}

/// `x: T×H×W×Cin`, `w: kt×k×k×Cin×Cout`, `b: Cout` → `T×H×W×Cout`.
pub fn conv3d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let g = geometry("conv3d", x, w, b, true)?;
    Tensor::new(vec![g.t, g.h, g.w, g.cout], forward(&g, x, w, b))
}

impl Graph {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.conv(x, w, b, false)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.conv(x, w, b, true)
    }

    fn conv(&mut self, x: Var, w: Var, b: Var, three_d: bool) -> Result<Var> {
        let op = if three_d { "conv3d" } else { "conv2d" };
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let geom = geometry(op, xv, wv, bv, three_d)?;
        let mut dims = xv.dims().to_vec();
        *dims.last_mut().unwrap() = geom.cout;
        let out = Tensor::new(dims, forward(&geom, xv, wv, bv))?;
        Ok(self.record(out, &[x, w, b], move |args| {
            backward(&geom, args.inputs[0], args.inputs[1], args.grad, &args.needs)
        }))
    }
}
