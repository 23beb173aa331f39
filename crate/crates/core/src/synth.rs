//! Synthetic ground truth: analytic textures advected by a smooth flow field
//! (so frames and flows are exact), line blur kernels along the motion, and
//! blurry LR frames produced by the same flow-guided degradation operator
//! the network uses.
//!
//! Coordinates: `x` is the column, `y` the row, both in HR pixels. Flows are
//! `[dx, dy]`. Ground-truth flow-masks live on the LR grid in LR pixels; LR
//! pixel `j` sits at HR coordinate `(j + 0.5)·s − 0.5`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, MotionBin};
use crate::dynfilter::fgdf_downsample;
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::resample::bicubic_downsample;
use crate::tensor::Tensor;

const WAVES: usize = 20;

#[derive(Clone, Debug)]
struct Wave {
    /// Angular frequency (radians per HR pixel) along x and y.
    kx: f64,
    ky: f64,
    phase: f64,
    amp: [f64; 3],
}

/// Smooth displacement field `d(p) = v + A(p − o) + b ⊙ sin(ω·p + φ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub translation: [f64; 2],
    pub affine: [[f64; 2]; 2],
    pub origin: [f64; 2],
    pub wave_amp: [f64; 2],
    pub wave_freq: [f64; 2],
    pub wave_phase: [f64; 2],
}

impl FlowField {
    pub fn zero() -> Self {
        Self::translation(0.0, 0.0)
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        FlowField {
            translation: [dx, dy],
            affine: [[0.0; 2]; 2],
            origin: [0.0; 2],
            wave_amp: [0.0; 2],
            wave_freq: [0.0; 2],
            wave_phase: [0.0; 2],
        }
    }

    pub fn at(&self, x: f64, y: f64) -> [f64; 2] {
        let (rx, ry) = (x - self.origin[0], y - self.origin[1]);
        let arg = self.wave_freq[0] * x + self.wave_freq[1] * y;
        [
            self.translation[0] + self.affine[0][0] * rx + self.affine[0][1] * ry
                + self.wave_amp[0] * (arg + self.wave_phase[0]).sin(),
            self.translation[1] + self.affine[1][0] * rx + self.affine[1][1] * ry
                + self.wave_amp[1] * (arg + self.wave_phase[1]).sin(),
        ]
    }

    fn scaled(&self, k: f64) -> Self {
        let mut f = self.clone();
        f.translation = [k * f.translation[0], k * f.translation[1]];
        for row in f.affine.iter_mut() {
            row.iter_mut().for_each(|v| *v *= k);
        }
        f.wave_amp = [k * f.wave_amp[0], k * f.wave_amp[1]];
        f
    }
}

/// Texture `I` and motion `d`: the frame at time `τ` shows, at `q`, the
/// texture point `p` with `p + τ·d(p) = q`. Hence the flow from frame 0 to
/// frame `t` at `q` is exactly `t·d(q)`.
#[derive(Clone, Debug)]
pub struct Scene {
    waves: Vec<Wave>,
    pub flow: FlowField,
}

impl Scene {
    /// Random band-limited texture with a random smooth motion field.
    /// The motion is scaled later by [`Scene::with_motion`].
    pub fn random(seed: u64, hr_h: usize, hr_w: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut waves = Vec::with_capacity(WAVES);
        let mut weights = Vec::with_capacity(WAVES);
        for _ in 0..WAVES {
            let cycles: f64 = rng.gen_range(0.015..0.18);
            let dir: f64 = rng.gen_range(0.0..2.0 * PI);
            let w: f64 = rng.gen_range(0.3..1.0) / (1.0 + 8.0 * cycles);
            weights.push(w);
            let tint = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
            waves.push(Wave {
                kx: 2.0 * PI * cycles * dir.cos(),
                ky: 2.0 * PI * cycles * dir.sin(),
                phase: rng.gen_range(0.0..2.0 * PI),
                amp: tint.map(|t| t * w),
            });
        }
        // Keep every channel inside [0.05, 0.95].
        let norm = 0.45 / weights.iter().sum::<f64>();
        for wave in waves.iter_mut() {
            wave.amp = wave.amp.map(|a| a * norm);
        }
        let dir: f64 = rng.gen_range(0.0..2.0 * PI);
        let mut a = || rng.gen_range(-0.0015..0.0015);
        let affine = [[a(), a()], [a(), a()]];
        let flow = FlowField {
            translation: [dir.cos(), dir.sin()],
            affine,
            origin: [hr_w as f64 / 2.0, hr_h as f64 / 2.0],
            wave_amp: [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)],
            wave_freq: [
                2.0 * PI / rng.gen_range(128.0..256.0) * if rng.gen() { 1.0 } else { -1.0 },
                2.0 * PI / rng.gen_range(128.0..256.0),
            ],
            wave_phase: [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)],
        };
        Scene { waves, flow }
    }

    pub fn with_flow(mut self, flow: FlowField) -> Self {
        self.flow = flow;
        self
    }

    /// Rescale the motion so that the mean displacement magnitude over the
    /// LR sample positions (in HR pixels) equals `target`.
    pub fn with_motion(mut self, target: f64, h: usize, w: usize, s: usize) -> Self {
        let mean = self.mean_motion(h, w, s);
        let k = if mean > 0.0 { target / mean } else { 0.0 };
        self.flow = self.flow.scaled(k);
        self
    }

    /// Mean `|d(q)|` in HR pixels over the centres of an `h×w` LR grid.
    pub fn mean_motion(&self, h: usize, w: usize, s: usize) -> f64 {
        let mut sum = 0.0;
        for i in 0..h {
            for j in 0..w {
                let [dx, dy] = self.flow.at(lr_to_hr(j, s), lr_to_hr(i, s));
                sum += dx.hypot(dy);
            }
        }
        sum / (h * w) as f64
    }

    pub fn texture(&self, x: f64, y: f64, c: usize) -> f64 {
        0.5 + self.waves.iter().map(|w| w.amp[c] * (w.kx * x + w.ky * y + w.phase).sin()).sum::<f64>()
    }

    /// Texture point shown at `(x, y)` in the frame at time `tau`.
    pub fn source(&self, tau: f64, x: f64, y: f64) -> [f64; 2] {
        let mut p = [x, y];
        for _ in 0..500 {
            let d = self.flow.at(p[0], p[1]);
            let next = [x - tau * d[0], y - tau * d[1]];
            let delta = (next[0] - p[0]).abs() + (next[1] - p[1]).abs();
            p = next;
            if delta < 1e-13 {
                break;
            }
        }
        p
    }

    pub fn value(&self, tau: f64, x: f64, y: f64, c: usize) -> f64 {
        let [px, py] = self.source(tau, x, y);
        self.texture(px, py, c)
    }

    /// HR frames at the given times, `T×h×w×3`.
    pub fn frames(&self, times: &[f64], h: usize, w: usize) -> Tensor {
        let frames: Vec<Tensor> = times
            .iter()
            .map(|&tau| {
                let mut f = Tensor::zeros(&[h, w, 3]);
                for (i, px) in f.data_mut().chunks_exact_mut(3).enumerate() {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    let [sx, sy] = self.source(tau, x, y);
                    for (c, v) in px.iter_mut().enumerate() {
                        *v = self.texture(sx, sy, c);
                    }
                }
                f
            })
            .collect();
        Tensor::stack(&frames).expect("equal frame shapes")
    }

    /// Flow-masks from the frame at `tau` to the frames at `tau + t`,
    /// `t ∈ offsets`, sampled on the LR grid, in LR pixels, masks 1.
    pub fn flow_mask_lr(&self, tau: f64, offsets: &[f64], h: usize, w: usize, s: usize) -> Tensor {
        let mut out = Tensor::zeros(&[offsets.len(), h, w, 3]);
        let sf = s as f64;
        for (ti, &t) in offsets.iter().enumerate() {
            for i in 0..h {
                for j in 0..w {
                    let [px, py] = self.source(tau, lr_to_hr(j, s), lr_to_hr(i, s));
                    let [dx, dy] = self.flow.at(px, py);
                    let base = ((ti * h + i) * w + j) * 3;
                    let d = out.data_mut();
                    d[base] = t * dx / sf;
                    d[base + 1] = t * dy / sf;
                    d[base + 2] = 1.0;
                }
            }
        }
        out
    }
}

/// HR coordinate of the centre of LR pixel `j`.
pub fn lr_to_hr(j: usize, s: usize) -> f64 {
    (j as f64 + 0.5) * s as f64 - 0.5
}

fn offsets(t: usize) -> Vec<f64> {
    let n = (t / 2) as f64;
    (0..t).map(|i| i as f64 - n).collect()
}

/// Sharp HR sequence `Y` (`T×sH×sW×3`, centre at time 0) and its ground-truth
/// image flow-mask (`T×H×W×3`) for a random scene with the given mean motion
/// (HR pixels per frame).
pub fn generate_scene(seed: u64, h: usize, w: usize, t: usize, s: usize, motion: f64) -> (Tensor, Tensor, Scene) {
    let scene = Scene::random(seed, h * s, w * s).with_motion(motion, h, w, s);
    let times = offsets(t);
    let y = scene.frames(&times, h * s, w * s);
    let f = scene.flow_mask_lr(0.0, &times, h, w, s);
    (y, f, scene)
}

/// Line kernels `T×H×W×k²`: for every LR pixel a segment of half-length
/// `blur_len` (HR pixels) through the centre, along the direction of that
/// pixel's flow to the next frame (horizontal without motion). The segment is
/// sampled at `2⌈blur_len⌉ + 1` evenly spaced points, each splatted
/// bilinearly onto the grid with equal weight; each frame gets `1/T` of it.
pub fn line_kernels(f: &Tensor, blur_len: f64, k: usize) -> Result<Tensor> {
    f.expect_rank("line_kernels", "flow-mask", 4)?;
    let (t, h, w) = (f.dims()[0], f.dims()[1], f.dims()[2]);
    let r = k / 2;
    if k % 2 == 0 || blur_len < 0.0 || blur_len > r as f64 {
        return Err(Error::invalid("line_kernels", format!("blur length {blur_len} does not fit a {k}×{k} kernel")));
    }
    let dir_frame = if t > 1 { t / 2 + 1 } else { 0 };
    let taps = 2 * blur_len.ceil() as usize + 1;
    let mut out = Tensor::zeros(&[t, h, w, k * k]);
    let mut kernel = vec![0.0; k * k];
    for i in 0..h {
        for j in 0..w {
            let (dx, dy) = (f.get(&[dir_frame, i, j, 0]), f.get(&[dir_frame, i, j, 1]));
            let norm = dx.hypot(dy);
            let (ux, uy) = if t > 1 && norm > 1e-12 { (dx / norm, dy / norm) } else { (1.0, 0.0) };
            kernel.iter_mut().for_each(|v| *v = 0.0);
            for m in 0..taps {
                let a = if taps == 1 { 0.0 } else { -blur_len + 2.0 * blur_len * m as f64 / (taps - 1) as f64 };
                let (px, py) = (a * ux + r as f64, a * uy + r as f64);
                let (x0, y0) = (px.floor(), py.floor());
                let (fx, fy) = (px - x0, py - y0);
                for (oy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
                    for (ox, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let (yy, xx) = (y0 as usize + oy, x0 as usize + ox);
                        kernel[yy * k + xx] += wgt / taps as f64;
                    }
                }
            }
            for ti in 0..t {
                let base = ((ti * h + i) * w + j) * k * k;
                for (dst, &v) in out.data_mut()[base..base + k * k].iter_mut().zip(&kernel) {
                    *dst = v / t as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Blurry LR frame `H×W×3` and its kernels: `X = fgdf_downsample(Y, f, K, s)`.
pub fn synthesize_blur(y: &Tensor, f: &Tensor, s: usize, blur_len: f64, k: usize) -> Result<(Tensor, Tensor)> {
    let kernels = line_kernels(f, blur_len, k)?;
    let x = fgdf_downsample(y, f, &kernels, s)?;
    Ok((x, kernels))
}

/// One generated training/evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// Sharp HR sequence `T×sH×sW×3`.
    pub y: Tensor,
    /// Blurry LR sequence `T×H×W×3`.
    pub x: Tensor,
    /// Bicubic-downsampled `Y`.
    pub x_sharp: Tensor,
    /// Ground-truth image flow-mask of the centre frame, `T×H×W×3`, LR pixels.
    pub f_gt: Tensor,
    /// Ground-truth degradation kernels of the centre frame, `T×H×W×k²`.
    pub k_gt: Tensor,
    /// Mean motion in HR pixels per frame.
    pub motion_mag: f64,
}

impl SynthSample {
    pub fn center(&self) -> usize {
        self.x.dims()[0] / 2
    }
}

/// Blur half-length for a sample: `blur_ratio · motion`, capped by the kernel.
pub fn blur_length(cfg: &Config, motion: f64) -> f64 {
    (cfg.blur_ratio * motion).min((cfg.kd / 2) as f64)
}

/// Build a full sample. Every blurry frame `X_i` is synthesised from the HR
/// frames around time `i` with flows relative to that frame, so the centre
/// frame satisfies `X_c = fgdf_downsample(Y, f_gt, K_gt, s)` exactly.
pub fn make_sample(cfg: &Config, seed: u64, motion: f64) -> Result<SynthSample> {
    let (t, s, h, w) = (cfg.frames, cfg.scale, cfg.height, cfg.width);
    let (y, f_gt, scene) = generate_scene(seed, h, w, t, s, motion);
    let blur = blur_length(cfg, motion);
    let offs = offsets(t);
    let mut x_frames = Vec::with_capacity(t);
    let mut k_gt = None;
    for &tau in &offs {
        let (yi, fi) = if tau == 0.0 {
            (y.clone(), f_gt.clone())
        } else {
            let times: Vec<f64> = offs.iter().map(|o| tau + o).collect();
            (scene.frames(&times, h * s, w * s), scene.flow_mask_lr(tau, &offs, h, w, s))
        };
        let (xi, ki) = synthesize_blur(&yi, &fi, s, blur, cfg.kd)?;
        if tau == 0.0 {
            k_gt = Some(ki);
        }
        x_frames.push(xi);
    }
    let x = Tensor::stack(&x_frames)?;
    let x_sharp = bicubic_downsample(&y, s)?;
    let motion_mag = scene.mean_motion(h, w, s);
    Ok(SynthSample { y, x, x_sharp, f_gt, k_gt: k_gt.expect("centre frame present"), motion_mag })
}

// ---- dataset -----------------------------------------------------------------

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "id,seed,bin_lo,bin_hi,motion_mag,path";
const FILES: [&str; 5] = ["y", "x", "x_sharp", "f_gt", "k_gt"];

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub seed: u64,
    pub bin: MotionBin,
    pub motion_mag: f64,
    /// Sample directory relative to the dataset root.
    pub path: String,
}

/// Seed of sample `k` of bin `b`.
pub fn sample_seed(base: u64, bin: usize, k: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add((bin as u64) << 20).wrapping_add(k as u64)
}

/// Target motion drawn inside `bin`, away from its edges.
fn target_motion(seed: u64, bin: &MotionBin) -> f64 {
    let u: f64 = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed).gen_range(0.05..0.95);
    bin.lo + u * (bin.hi - bin.lo)
}

/// Generate `count` samples per bin under `root` and write the manifest.
pub fn make_dataset(cfg: &Config, bins: &[MotionBin], count: usize, root: &Path) -> Result<Vec<ManifestRow>> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut rows = Vec::new();
    for (b, bin) in bins.iter().enumerate() {
        for k in 0..count {
            let seed = sample_seed(cfg.seed, b, k);
            let sample = make_sample(cfg, seed, target_motion(seed, bin))?;
            let id = format!("b{b}_{k:03}");
            write_sample(&root.join(&id), &sample)?;
            rows.push(ManifestRow { id: id.clone(), seed, bin: *bin, motion_mag: sample.motion_mag, path: id });
        }
    }
    write_manifest(root, &rows)?;
    Ok(rows)
}

pub fn write_sample(dir: &Path, s: &SynthSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, t) in FILES.iter().zip([&s.y, &s.x, &s.x_sharp, &s.f_gt, &s.k_gt]) {
        write_tensor(&dir.join(format!("{name}.fgdt")), t)?;
    }
    Ok(())
}

pub fn read_sample(dir: &Path, motion_mag: f64) -> Result<SynthSample> {
    let r = |name: &str| read_tensor(&dir.join(format!("{name}.fgdt")));
    Ok(SynthSample { y: r("y")?, x: r("x")?, x_sharp: r("x_sharp")?, f_gt: r("f_gt")?, k_gt: r("k_gt")?, motion_mag })
}

pub fn write_manifest(root: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut text = format!("{MANIFEST_HEADER}\n");
    for r in rows {
        text.push_str(&format!("{},{},{},{},{:.6},{}\n", r.id, r.seed, r.bin.lo, r.bin.hi, r.motion_mag, r.path));
    }
    let path = root.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |line: usize, what: &str| Error::Format { path: path.clone(), detail: format!("line {line}: {what}") };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => return Err(bad(1, "missing header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(i + 1, "expected 6 fields"));
        }
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        rows.push(ManifestRow {
            id: f[0].to_string(),
            seed: f[1].parse().map_err(|_| bad(i + 1, "bad seed"))?,
            bin: MotionBin { lo: num(f[2])?, hi: num(f[3])? },
            motion_mag: num(f[4])?,
            path: f[5].to_string(),
        });
    }
    Ok(rows)
}

/// A loaded dataset: manifest rows with their samples, in manifest order.
pub struct Dataset {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub samples: Vec<SynthSample>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let rows = read_manifest(root)?;
        let samples = rows
            .iter()
            .map(|r| read_sample(&root.join(&r.path), r.motion_mag))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { root: root.to_path_buf(), rows, samples })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}
