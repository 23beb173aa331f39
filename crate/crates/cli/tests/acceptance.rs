//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `FGDF_CRITERIA=1,2,9 cargo test --test acceptance`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use fgdf::autodiff::{Graph, Var};
use fgdf::blocks::{register_frma, FrmaDims, FrmaState};
use fgdf::config::Config;
use fgdf::dynfilter::{
    dynamic_filter_image, dynamic_filter_video, fgdf as fgdf_op, fgdf_downsample, fgdf_upsample,
};
use fgdf::eval::{find_aggregate, parse_metrics_csv, ALL_BINS, BICUBIC, BLURRY, NET_R, SHARP_R};
use fgdf::gradcheck::gradient_check;
use fgdf::losses::{loss_d, loss_total, DegradationTargets, RestorationTargets};
use fgdf::metrics::{psnr, ssim, tof};
use fgdf::net::{DegradationOverride, FmaNet};
use fgdf::params::{Binding, ParamBuilder, Params};
use fgdf::synth::{make_sample, Scene};
use fgdf::warp::identity_flow_mask;
use fgdf::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

fn uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(lo..hi))
}

fn clampi(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

// ---- straight-line oracles -----------------------------------------------------

/// Bilinear sample of frame `t` at a clamped `(py, px)`.
fn bilinear(x: &Tensor, t: usize, py: f64, px: f64, c: usize) -> f64 {
    let (h, w) = (x.dims()[1], x.dims()[2]);
    let py = py.clamp(0.0, (h - 1) as f64);
    let px = px.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (py.floor() as usize, px.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ay, ax) = (py - y0 as f64, px - x0 as f64);
    (1.0 - ay) * ((1.0 - ax) * x.get(&[t, y0, x0, c]) + ax * x.get(&[t, y0, x1, c]))
        + ay * ((1.0 - ax) * x.get(&[t, y1, x0, c]) + ax * x.get(&[t, y1, x1, c]))
}

/// `mask · bilinear(x, p + flow)` with a `[dx, dy, mask]` flow-mask.
fn oracle_warp(x: &Tensor, fm: &Tensor) -> Tensor {
    Tensor::from_fn(x.dims(), |i| {
        let (t, y, xx, c) = (i[0], i[1], i[2], i[3]);
        let dx = fm.get(&[t, y, xx, 0]);
        let dy = fm.get(&[t, y, xx, 1]);
        fm.get(&[t, y, xx, 2]) * bilinear(x, t, y as f64 + dy, xx as f64 + dx, c)
    })
}

/// Strided per-pixel filter summed over frames; window centred at `s·p + (s-1)/2`.
fn oracle_filter(x: &Tensor, kern: &Tensor, s: usize) -> Tensor {
    let (t, hx, wx, ch) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (h, w, kk) = (kern.dims()[1], kern.dims()[2], kern.dims()[3]);
    let k = (kk as f64).sqrt() as usize;
    let r = (k / 2) as isize;
    let a = ((s - 1) / 2) as isize;
    Tensor::from_fn(&[h, w, ch], |i| {
        let mut acc = 0.0;
        for f in 0..t {
            for dy in -r..=r {
                for dx in -r..=r {
                    let e = ((dy + r) * k as isize + dx + r) as usize;
                    let yy = clampi((s * i[0]) as isize + a + dy, hx);
                    let xx = clampi((s * i[1]) as isize + a + dx, wx);
                    acc += kern.get(&[f, i[0], i[1], e]) * x.get(&[f, yy, xx, i[2]]);
                }
            }
        }
        acc
    })
}

/// ×`s` per-pixel upsampling filter: output `(s·i + a, s·j + b)` uses phase `a·s + b`.
fn oracle_upsample(x: &Tensor, kern: &Tensor, s: usize) -> Tensor {
    let (t, h, w, ch) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let kk = kern.dims()[3] / (s * s);
    let k = (kk as f64).sqrt() as usize;
    let r = (k / 2) as isize;
    Tensor::from_fn(&[h * s, w * s, ch], |o| {
        let (i, a, j, b) = (o[0] / s, o[0] % s, o[1] / s, o[1] % s);
        let mut acc = 0.0;
        for f in 0..t {
            for dy in -r..=r {
                for dx in -r..=r {
                    let e = (a * s + b) * kk + ((dy + r) * k as isize + dx + r) as usize;
                    let yy = clampi(i as isize + dy, h);
                    let xx = clampi(j as isize + dx, w);
                    acc += kern.get(&[f, i, j, e]) * x.get(&[f, yy, xx, o[2]]);
                }
            }
        }
        acc
    })
}

/// Bilinear (half-pixel centres) ×`s` upsampling of a flow-mask, flows scaled by `s`.
fn oracle_upscale_flow(fm: &Tensor, s: usize) -> Tensor {
    let (t, h, w) = (fm.dims()[0], fm.dims()[1], fm.dims()[2]);
    Tensor::from_fn(&[t, h * s, w * s, 3], |i| {
        let py = (i[1] as f64 + 0.5) / s as f64 - 0.5;
        let px = (i[2] as f64 + 0.5) / s as f64 - 0.5;
        let v = bilinear(fm, i[0], py, px, i[3]);
        if i[3] < 2 {
            v * s as f64
        } else {
            v
        }
    })
}

fn random_flow_mask(dims: [usize; 3], amp: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[dims[0], dims[1], dims[2], 3], |i| {
        if i[3] == 2 {
            rng.gen_range(0.05..1.0)
        } else {
            rng.gen_range(-amp..amp)
        }
    })
}

// ---- criteria -------------------------------------------------------------------

const INSTANCES: usize = 100;

fn c1_operator_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 5];
    for _ in 0..INSTANCES {
        let t = rng.gen_range(1..=3);
        let h = rng.gen_range(1..=8);
        let w = rng.gen_range(1..=8);
        let ch = rng.gen_range(1..=3);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let s = rng.gen_range(1..=2);

        let img = uniform(&[h, w, ch], -1.0, 1.0, &mut rng);
        let kimg = uniform(&[h, w, k * k], -1.0, 1.0, &mut rng);
        let got = dynamic_filter_image(&img, &kimg).map_err(|e| e.to_string())?;
        let want = oracle_filter(&img.clone().reshape(&[1, h, w, ch]).unwrap(), &kimg.clone().reshape(&[1, h, w, k * k]).unwrap(), 1);
        worst[0] = worst[0].max(got.max_abs_diff(&want));

        let x = uniform(&[t, h, w, ch], -1.0, 1.0, &mut rng);
        let kern = uniform(&[t, h, w, k * k], -1.0, 1.0, &mut rng);
        let got = dynamic_filter_video(&x, &kern).map_err(|e| e.to_string())?;
        worst[1] = worst[1].max(got.max_abs_diff(&oracle_filter(&x, &kern, 1)));

        let fm = random_flow_mask([t, h, w], 3.0, &mut rng);
        let got = fgdf_op(&x, &fm, &kern).map_err(|e| e.to_string())?;
        worst[2] = worst[2].max(got.max_abs_diff(&oracle_filter(&oracle_warp(&x, &fm), &kern, 1)));

        let y = uniform(&[t, s * h, s * w, ch], -1.0, 1.0, &mut rng);
        let got = fgdf_downsample(&y, &fm, &kern, s).map_err(|e| e.to_string())?;
        let want = oracle_filter(&oracle_warp(&y, &oracle_upscale_flow(&fm, s)), &kern, s);
        worst[3] = worst[3].max(got.max_abs_diff(&want));

        let kup = uniform(&[t, h, w, s * s * k * k], -1.0, 1.0, &mut rng);
        let got = fgdf_upsample(&x, &fm, &kup, s).map_err(|e| e.to_string())?;
        worst[4] = worst[4].max(got.max_abs_diff(&oracle_upsample(&oracle_warp(&x, &fm), &kup, s)));
    }
    let m = worst.iter().copied().fold(0.0, f64::max);
    Ok((
        m < 1e-12,
        format!(
            "{INSTANCES} instances per operator; max |Δ| image {:.1e}, video {:.1e}, fgdf {:.1e}, downsample {:.1e}, upsample {:.1e} (tol 1e-12)",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    ))
}

fn c2_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut exact = 0;
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (t, h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let ch = rng.gen_range(1..=3);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let x = uniform(&[t, h, w, ch], -1.0, 1.0, &mut rng);
        let kern = uniform(&[t, h, w, k * k], -1.0, 1.0, &mut rng);
        let a = fgdf_op(&x, &identity_flow_mask(t, h, w, 1), &kern).map_err(|e| e.to_string())?;
        let b = dynamic_filter_video(&x, &kern).map_err(|e| e.to_string())?;
        worst = worst.max(a.max_abs_diff(&b));
        exact += usize::from(a == b);
    }
    Ok((exact == INSTANCES, format!("zero flow + unit mask: {exact}/{INSTANCES} bit-identical, max |Δ| {worst:.1e}")))
}

/// Three independent random textures advected by an integer shift per frame;
/// the target is the temporal average of the motion-compensated frames.
fn c3_motion_robustness() -> Outcome {
    const T: usize = 3;
    const K: usize = 5;
    const N: usize = 32;
    const CH: usize = 3;
    const MARGIN: usize = 8 + K / 2;
    let c = T / 2;
    let mut lines = Vec::new();
    let mut pass = true;
    for &shift in &[0usize, 2, 4, 8] {
        for (axis, name) in [(0usize, "x"), (1, "y")] {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + shift as u64 * 2 + axis as u64);
            let bases: Vec<Tensor> = (0..T).map(|_| uniform(&[N, N, CH], 0.0, 1.0, &mut rng)).collect();
            let off = |t: usize| (t as isize - c as isize) * shift as isize;
            // Frame t at q shows base_t at q - off(t) along the axis.
            let x = Tensor::from_fn(&[T, N, N, CH], |i| {
                let (mut yy, mut xx) = (i[1] as isize, i[2] as isize);
                if axis == 0 {
                    xx -= off(i[0]);
                } else {
                    yy -= off(i[0]);
                }
                bases[i[0]].get(&[clampi(yy, N), clampi(xx, N), i[3]])
            });
            let target =
                Tensor::from_fn(&[N, N, CH], |i| (0..T).map(|t| bases[t].get(i)).sum::<f64>() / T as f64);
            let interior = |i: usize, j: usize| (MARGIN..N - MARGIN).contains(&i) && (MARGIN..N - MARGIN).contains(&j);
            let err_on = |out: &Tensor| {
                let mut e = 0.0f64;
                for i in 0..N {
                    for j in 0..N {
                        if interior(i, j) {
                            for ch in 0..CH {
                                e = e.max((out.get(&[i, j, ch]) - target.get(&[i, j, ch])).abs());
                            }
                        }
                    }
                }
                e
            };

            // FGDF: flows undo the motion; the kernel is a centred 1/T delta.
            let fm = Tensor::from_fn(&[T, N, N, 3], |i| match i[3] {
                2 => 1.0,
                a if a == axis => off(i[0]) as f64,
                _ => 0.0,
            });
            let delta = Tensor::from_fn(&[T, N, N, K * K], |i| if i[3] == K * K / 2 { 1.0 / T as f64 } else { 0.0 });
            let e_fgdf = err_on(&fgdf_op(&x, &fm, &delta).map_err(|e| e.to_string())?);

            // Conventional filtering with the least-squares optimal k×k kernel
            // bank (shared over the interior), applied through the library op.
            let cols = T * K * K;
            let mut rows = Vec::new();
            let mut rhs = Vec::new();
            let r = (K / 2) as isize;
            for i in MARGIN..N - MARGIN {
                for j in MARGIN..N - MARGIN {
                    for ch in 0..CH {
                        for t in 0..T {
                            for dy in -r..=r {
                                for dx in -r..=r {
                                    rows.push(x.get(&[t, clampi(i as isize + dy, N), clampi(j as isize + dx, N), ch]));
                                }
                            }
                        }
                        rhs.push(target.get(&[i, j, ch]));
                    }
                }
            }
            let a = DMatrix::from_row_slice(rhs.len(), cols, &rows);
            let b = DVector::from_vec(rhs);
            let sol = a.svd(true, true).solve(&b, 1e-14).map_err(|e| e.to_string())?;
            let bank = Tensor::from_fn(&[T, N, N, K * K], |i| sol[i[0] * K * K + i[3]]);
            let e_conv = err_on(&dynamic_filter_video(&x, &bank).map_err(|e| e.to_string())?);

            let ok = e_fgdf < 1e-10 && if shift <= 2 { e_conv < 1e-10 } else { e_conv > 1e-3 };
            pass &= ok;
            lines.push(format!("|{shift}|{name}: fgdf {e_fgdf:.1e} conv {e_conv:.1e}"));
        }
    }
    Ok((pass, format!("k=5 interior max error; {}", lines.join(", "))))
}

/// Fixed random projection to a scalar so every output element matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var, fgdf::Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(g.dims(out), -1.0, 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, fgdf::Error>>;

fn c4_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut u = |d: &[usize]| uniform(d, -1.0, 1.0, &mut rng);
    let fm = random_flow_mask([2, 4, 4], 1.4, &mut ChaCha8Rng::seed_from_u64(405));
    let fm_small = random_flow_mask([2, 3, 3], 1.2, &mut ChaCha8Rng::seed_from_u64(406));
    let pairs = Tensor::concat_channels(&[&fm, &random_flow_mask([2, 4, 4], 1.4, &mut ChaCha8Rng::seed_from_u64(407))]).unwrap();
    let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
        ("backward_warp", vec![u(&[2, 4, 4, 2]), fm.channel_slice(0, 2), fm.channel_slice(2, 1)], Box::new(|g, v| g.backward_warp(v[0], v[1], v[2]))),
        ("warp_pairs", vec![u(&[2, 4, 4, 2]), pairs.clone()], Box::new(|g, v| g.warp_pairs(v[0], v[1]))),
        ("warp_sequence", vec![u(&[2, 4, 4, 2]), pairs], Box::new(|g, v| g.warp_sequence(v[0], v[1]))),
        ("dynamic_filter", vec![u(&[2, 4, 4, 2]), u(&[2, 4, 4, 9])], Box::new(|g, v| g.dynamic_filter(v[0], v[1], 1))),
        ("dynamic_filter s=2", vec![u(&[2, 6, 6, 2]), u(&[2, 3, 3, 9])], Box::new(|g, v| g.dynamic_filter(v[0], v[1], 2))),
        ("dynamic_upsample", vec![u(&[2, 3, 3, 2]), u(&[2, 3, 3, 36])], Box::new(|g, v| g.dynamic_upsample(v[0], v[1], 2))),
        ("fgdf", vec![u(&[2, 4, 4, 2]), fm.clone(), u(&[2, 4, 4, 9])], Box::new(|g, v| g.fgdf(v[0], v[1], v[2]))),
        ("fgdf_downsample", vec![u(&[2, 6, 6, 2]), fm_small.clone(), u(&[2, 3, 3, 9])], Box::new(|g, v| g.fgdf_downsample(v[0], v[1], v[2], 2))),
        ("fgdf_upsample", vec![u(&[2, 3, 3, 2]), fm_small.clone(), u(&[2, 3, 3, 36])], Box::new(|g, v| g.fgdf_upsample(v[0], v[1], v[2], 2))),
        ("upscale_flow_mask", vec![fm_small], Box::new(|g, v| g.upscale_flow_mask(v[0], 2))),
        ("normalize_restoration", vec![u(&[2, 3, 3, 36])], Box::new(|g, v| g.normalize_restoration(v[0], 2))),
        ("pixel_shuffle", vec![u(&[2, 3, 3, 8])], Box::new(|g, v| g.pixel_shuffle(v[0], 2))),
        ("bilinear_upsample", vec![u(&[2, 3, 3, 2])], Box::new(|g, v| g.bilinear_upsample(v[0], 2))),
        ("conv2d", vec![u(&[4, 4, 3]), u(&[3, 3, 3, 2]), u(&[2])], Box::new(|g, v| g.conv2d(v[0], v[1], v[2]))),
        ("conv3d", vec![u(&[3, 4, 4, 2]), u(&[3, 3, 3, 2, 2]), u(&[2])], Box::new(|g, v| g.conv3d(v[0], v[1], v[2]))),
        ("sigmoid", vec![u(&[3, 4])], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        ("leaky_relu", vec![u(&[3, 4])], Box::new(|g, v| Ok(g.leaky_relu(v[0], 0.2)))),
        ("gelu", vec![u(&[3, 4])], Box::new(|g, v| Ok(g.gelu(v[0])))),
        ("softmax", vec![u(&[3, 4])], Box::new(|g, v| Ok(g.softmax(v[0])))),
        ("matmul", vec![u(&[3, 4]), u(&[5, 4])], Box::new(|g, v| g.matmul(v[0], false, v[1], true))),
        ("matmul (transposed a)", vec![u(&[4, 3]), u(&[4, 5])], Box::new(|g, v| g.matmul(v[0], true, v[1], false))),
        ("l1", vec![u(&[2, 3, 3]), u(&[2, 3, 3])], Box::new(|g, v| g.l1(v[0], v[1]))),
        ("frames_to_channels", vec![u(&[2, 3, 3, 2])], Box::new(|g, v| g.frames_to_channels(v[0]))),
        ("channels_to_frames", vec![u(&[3, 3, 4])], Box::new(|g, v| g.channels_to_frames(v[0], 2))),
        ("broadcast_frames", vec![u(&[3, 3, 2])], Box::new(|g, v| Ok(g.broadcast_frames(v[0], 3)))),
    ];
    let mut worst = ("", 0.0f64);
    let mut failed = Vec::new();
    for (i, (name, inputs, build)) in cases.iter().enumerate() {
        let seed = 4000 + i as u64;
        let report = gradient_check(inputs, |g, v| {
            let out = build(g, v)?;
            project(g, out, seed)
        })
        .map_err(|e| format!("{name}: {e}"))?;
        let e = report.worst();
        if e >= 1e-4 {
            failed.push(format!("{name} {e:.1e}"));
        }
        if e > worst.1 {
            worst = (name, e);
        }
    }

    // One full degradation-aware refinement step, gradients w.r.t. every
    // parameter and every state input.
    let d = FrmaDims { frames: 2, channels: 2, pairs: 1, rdb_layers: 1, growth: 2 };
    let mut prng = ChaCha8Rng::seed_from_u64(408);
    let mut p = Params::new();
    register_frma(&mut ParamBuilder { params: &mut p, rng: &mut prng }, "s", &d, true);
    let names: Vec<String> = p.iter().map(|(n, _)| n.to_string()).collect();
    let mut inputs: Vec<Tensor> = p.iter().map(|(_, t)| uniform(t.dims(), -0.3, 0.3, &mut prng)).collect();
    let np = inputs.len();
    inputs.push(uniform(&[2, 3, 3, 2], -1.0, 1.0, &mut prng));
    inputs.push(uniform(&[3, 3, 2], -1.0, 1.0, &mut prng));
    inputs.push(random_flow_mask([2, 3, 3], 1.2, &mut prng));
    inputs.push(uniform(&[3, 3, 2], -1.0, 1.0, &mut prng));
    inputs.push(uniform(&[3, 3, 2], -1.0, 1.0, &mut prng));
    let report = gradient_check(&inputs, |g, v| {
        let b = Binding::from_vars(names.iter().cloned().zip(v[..np].iter().copied()));
        let e = &v[np..];
        let state = FrmaState { features: e[0], warped: e[1], flows: e[2] };
        let out = g.frma_step(&b, "s", &d, &state, e[3], Some(e[4]))?;
        let a = g.frames_to_channels(out.features)?;
        let fl = g.frames_to_channels(out.flows)?;
        let all = g.concat_channels(&[a, out.warped, fl])?;
        project(g, all, 4999)
    })
    .map_err(|e| format!("frma_step: {e}"))?;
    let step = report.worst();
    Ok((
        failed.is_empty() && step < 1e-3,
        format!(
            "{} operators, worst {} {:.1e} (tol 1e-4){}; frma_step {:.1e} over {} inputs (tol 1e-3)",
            cases.len(),
            worst.0,
            worst.1,
            if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(", ")) },
            step,
            inputs.len()
        ),
    ))
}

fn desk_config() -> Config {
    Config::desk()
}

fn perturbed(params: &Params, amp: f64, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Params::new();
    for (n, t) in params.iter() {
        out.insert(n.to_string(), t.zip_map(&uniform(t.dims(), -amp, amp, &mut rng), |a, b| a + b).unwrap());
    }
    out
}

fn c5_normalisation() -> Outcome {
    let cfg = desk_config();
    let net = FmaNet::new(&cfg);
    let mut kd_range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut kr_dev = 0.0f64;
    let mut loss_dev = 0.0f64;
    for seed in 0..3u64 {
        let params = perturbed(&net.init_params(seed), 0.05, 50 + seed);
        let s = make_sample(&cfg, 500 + seed, 4.0 + 8.0 * seed as f64).map_err(|e| e.to_string())?;
        let p = net.predict(&params, &s.x, Some(&s.y)).map_err(|e| e.to_string())?;
        kd_range = (kd_range.0.min(p.kd.min()), kd_range.1.max(p.kd.max()));
        let (t, h, w, ch) = (p.kr.dims()[0], p.kr.dims()[1], p.kr.dims()[2], p.kr.dims()[3]);
        let phases = cfg.scale * cfg.scale;
        let kk = ch / phases;
        for i in 0..h {
            for j in 0..w {
                for ph in 0..phases {
                    let sum: f64 = (0..t).flat_map(|f| (0..kk).map(move |e| (f, e))).map(|(f, e)| p.kr.get(&[f, i, j, ph * kk + e])).sum();
                    kr_dev = kr_dev.max((sum - 1.0).abs());
                }
            }
        }

        let mut g = Graph::new();
        let b = params.bind(&mut g, |_| false);
        let x = g.constant(s.x.clone());
        let y = g.constant(s.y.clone());
        let d = net.forward_d(&mut g, &b, x, Some(y), None).map_err(|e| e.to_string())?;
        let c = s.center();
        let tg = DegradationTargets {
            x_c: g.constant(s.x.frame(c)),
            y,
            y_c: g.constant(s.y.frame(c)),
            f_gt: g.constant(s.f_gt.clone()),
            x_sharp: g.constant(s.x_sharp.clone()),
        };
        let l = cfg.lambda;
        let ld = loss_d(&mut g, &d, &tg, [l[0], l[1], l[2]], cfg.scale).map_err(|e| e.to_string())?;
        let r = net.forward_r(&mut g, &b, x, &d).map_err(|e| e.to_string())?;
        let rt = RestorationTargets { x, x_c: tg.x_c, y_c: tg.y_c, x_sharp: tg.x_sharp };
        let lt = loss_total(&mut g, &r, &rt, &ld, [l[3], l[4], l[5]]).map_err(|e| e.to_string())?;
        for loss in [&ld, &lt] {
            loss_dev = loss_dev.max((loss.breakdown.total - loss.breakdown.weighted_sum()).abs());
            loss_dev = loss_dev.max((g.value(loss.total).data()[0] - loss.breakdown.total).abs());
        }
    }
    let ok = kd_range.0 > 0.0 && kd_range.1 < 1.0 && kr_dev <= 1e-6 && loss_dev <= 1e-12;
    Ok((
        ok,
        format!(
            "K^D in [{:.3e}, {:.6}]; max |ΣK^R - 1| {kr_dev:.1e}; max |total - Σλ·term| {loss_dev:.1e}",
            kd_range.0, kd_range.1
        ),
    ))
}

fn c6_round_trip() -> Outcome {
    let cfg = desk_config();
    let net = FmaNet::new(&cfg);
    let params = net.init_params(cfg.seed);
    let mut worst = 0.0f64;
    for k in 0..20u64 {
        let motion = 30.0 * k as f64 / 20.0;
        let s = make_sample(&cfg, 600 + k, motion).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let b = params.bind(&mut g, |_| false);
        let x = g.constant(s.x.clone());
        let y = g.constant(s.y.clone());
        let oracle = DegradationOverride { flow_mask: g.constant(s.f_gt.clone()), kernels: g.constant(s.k_gt.clone()) };
        let d = net.forward_d(&mut g, &b, x, Some(y), Some(oracle)).map_err(|e| e.to_string())?;
        let x_hat = g.value(d.x_hat_c.expect("Y supplied"));
        worst = worst.max(x_hat.max_abs_diff(&s.x.frame(s.center())));
    }
    Ok((worst < 1e-10, format!("20 samples (motion 0–28.5 HR px), max |X̂_c - X_c| {worst:.1e} (tol 1e-10)")))
}

// ---- training-scale criteria (through the binary) ---------------------------------

fn fgdf_bin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fgdf")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("fgdf {args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
}

fn workspace() -> Result<Workspace, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    fgdf_bin(&["gen", "--out", p(&data)])?;
    Ok(Workspace { _tmp: tmp, root, data })
}

/// Column `name` of a CSV file as numbers (empty cells skipped).
fn csv_column(path: &Path, name: &str) -> Result<Vec<f64>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty csv")?.split(',').collect();
    let col = header.iter().position(|h| *h == name).ok_or(format!("no column {name}"))?;
    Ok(lines.filter_map(|l| l.split(',').nth(col).and_then(|v| v.parse().ok())).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c7_training(ws: &Workspace) -> Outcome {
    let run = ws.root.join("run");
    fgdf_bin(&["train", "--data", p(&ws.data), "--out", p(&run), "--stage", "pretrain-d"])?;
    fgdf_bin(&["train", "--data", p(&ws.data), "--out", p(&run), "--stage", "joint"])?;
    let drop = |path: PathBuf, col: &str| -> Result<(f64, f64), String> {
        let v = csv_column(&path, col)?;
        Ok((mean(&v[..10]), mean(&v[v.len() - 10..])))
    };
    let (d0, d1) = drop(run.join("pretrain-d/losses.csv"), "ld_total")?;
    let (t0, t1) = drop(run.join("joint/losses.csv"), "lt_total")?;
    let metrics_path = run.join("joint/metrics.csv");
    let rows = parse_metrics_csv(&fs::read_to_string(&metrics_path).map_err(|e| e.to_string())?, &metrics_path)
        .map_err(|e| e.to_string())?;
    let get = |net: &str| find_aggregate(&rows, net, ALL_BINS).map(|r| r.psnr).ok_or(format!("no {net} aggregate"));
    let (yr, bic, sr, bl) = (get(NET_R)?, get(BICUBIC)?, get(SHARP_R)?, get(BLURRY)?);
    let a = d1 <= 0.5 * d0 && t1 <= 0.5 * t0;
    let b = yr - bic >= 0.5;
    let c = sr > bl;
    Ok((
        a && b && c,
        format!(
            "(a) L_D {d0:.4}→{d1:.4} ({:.0}% drop), L_total {t0:.4}→{t1:.4} ({:.0}% drop) {}; (b) Ŷ_c {yr:.2} dB vs bicubic {bic:.2} dB (+{:.2}) {}; (c) X̂_Sharp^R {sr:.2} dB vs blurry {bl:.2} dB {}",
            100.0 * (1.0 - d1 / d0),
            100.0 * (1.0 - t1 / t0),
            if a { "ok" } else { "FAIL" },
            yr - bic,
            if b { "ok" } else { "FAIL" },
            if c { "ok" } else { "FAIL" }
        ),
    ))
}

fn c8_ablation(ws: &Workspace) -> Outcome {
    let out = ws.root.join("ablate");
    fgdf_bin(&["ablate-fgdf", "--data", p(&ws.data), "--out", p(&out)])?;
    let text = fs::read_to_string(out.join("ablation.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<(usize, bool, String, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1] == "1", f[2].to_string(), f[3].parse().unwrap())
        })
        .collect();
    let cfg = desk_config();
    let bins: Vec<String> = cfg.bins.iter().map(|b| b.label()).collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for &kd in &cfg.ablate_kd {
        let find = |flag: bool, bin: &str| rows.iter().find(|r| r.0 == kd && r.1 == flag && r.2 == bin).map(|r| r.3);
        let margins: Vec<f64> = bins
            .iter()
            .map(|b| Ok(find(true, b).ok_or("missing row")? - find(false, b).ok_or("missing row")?))
            .collect::<Result<_, String>>()?;
        let every = margins.iter().all(|&m| m >= 0.0);
        let grows = margins[margins.len() - 1] > margins[0];
        pass &= every && grows;
        parts.push(format!(
            "k_d={kd}: margins {} dB{}{}",
            margins.iter().map(|m| format!("{m:+.2}")).collect::<Vec<_>>().join(" / "),
            if every { "" } else { " (FGDF behind in some bin)" },
            if grows { "" } else { " (highest-bin margin not above lowest)" }
        ));
    }
    Ok((pass, format!("FGDF − flows-zeroed Net^D PSNR per bin {}: {}", bins.join(" / "), parts.join("; "))))
}

fn c9_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut checks: Vec<(String, bool)> = Vec::new();
    let a = uniform(&[16, 16, 3], 0.0, 1.0, &mut rng);
    checks.push(("psnr(a,a)=99".into(), psnr(&a, &a, 1.0).unwrap() == 99.0));
    let shifted = a.map(|v| v + 0.1);
    checks.push(("psnr Δ0.1 = 20 dB".into(), (psnr(&a, &shifted, 1.0).unwrap() - 20.0).abs() < 1e-9));
    checks.push(("ssim(a,a)=1".into(), ssim(&a, &a, 1.0).unwrap() == 1.0));
    let (u, v) = (0.3, 0.8);
    let c1 = 1e-4;
    let cs = ssim(&Tensor::full(&[16, 16, 3], u), &Tensor::full(&[16, 16, 3], v), 1.0).unwrap();
    checks.push(("ssim constants closed form".into(), (cs - (2.0 * u * v + c1) / (u * u + v * v + c1)).abs() < 1e-12));
    checks.push(("ssim rejects 10×10".into(), ssim(&Tensor::zeros(&[10, 10, 1]), &Tensor::zeros(&[10, 10, 1]), 1.0).is_err()));

    // Independent oracles on random 16×16 pairs.
    let g1: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let norm: f64 = g1.iter().sum::<f64>().powi(2);
    let mut worst_psnr = 0.0f64;
    let mut worst_ssim = 0.0f64;
    for k in 0..20 {
        let a = uniform(&[16, 16, 3], 0.0, 1.0, &mut rng);
        let b = a.zip_map(&uniform(&[16, 16, 3], -0.2, 0.2, &mut rng), |x, n| (x + n * (k as f64 / 20.0)).clamp(0.0, 1.0)).unwrap();
        let mut se = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            se += (x - y) * (x - y);
        }
        let mse = se / a.len() as f64;
        let want = if mse < 1e-12 { 99.0 } else { (10.0 * (1.0 / mse).log10()).min(99.0) };
        worst_psnr = worst_psnr.max((psnr(&a, &b, 1.0).unwrap() - want).abs());

        let gray = |t: &Tensor, i: usize, j: usize| (0..3).map(|c| t.get(&[i, j, c])).sum::<f64>() / 3.0;
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..=16 - 11 {
            for j in 0..=16 - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..11 {
                    for dj in 0..11 {
                        let wgt = g1[di] * g1[dj] / norm;
                        let (x, y) = (gray(&a, i + di, j + dj), gray(&b, i + di, j + dj));
                        ma += wgt * x;
                        mb += wgt * y;
                        saa += wgt * x * x;
                        sbb += wgt * y * y;
                        sab += wgt * x * y;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        worst_ssim = worst_ssim.max((ssim(&a, &b, 1.0).unwrap() - total / count).abs());
    }
    checks.push((format!("psnr oracle |Δ| {worst_psnr:.1e}"), worst_psnr < 1e-9));
    checks.push((format!("ssim oracle |Δ| {worst_ssim:.1e}"), worst_ssim < 1e-9));

    // tOF: identity, translation of a static sequence, non-negativity, rank check.
    // The block matcher is coarse-to-fine, so the content is band-limited:
    // the simulator's analytic texture, sampled at integer offsets.
    let scene = Scene::random(909, 40, 40);
    let crop = |dy: isize, dx: isize| {
        Tensor::from_fn(&[24, 24, 3], |i| scene.texture((i[1] as isize + dx) as f64, (i[0] as isize + dy) as f64, i[2]))
    };
    let gt = Tensor::stack(&[crop(0, 0), crop(0, 0), crop(0, 0)]).unwrap();
    checks.push(("tof(gt,gt)=0".into(), tof(&gt, &gt).unwrap() == 0.0));
    for (vy, vx) in [(1isize, 2isize), (0, 3), (-2, 1)] {
        let out = Tensor::stack(&[crop(0, 0), crop(vy, vx), crop(2 * vy, 2 * vx)]).unwrap();
        let got = tof(&out, &gt).unwrap();
        let want = (vy.abs() + vx.abs()) as f64;
        checks.push((format!("tof shift ({vy},{vx}) = {got}"), got == want));
    }
    let mut nonneg = true;
    for _ in 0..5 {
        let x = uniform(&[3, 16, 16, 3], 0.0, 1.0, &mut rng);
        let y = uniform(&[3, 16, 16, 3], 0.0, 1.0, &mut rng);
        nonneg &= tof(&x, &y).unwrap() >= 0.0;
    }
    checks.push(("tof ≥ 0 on random pairs".into(), nonneg));
    let one = gt.frame(0).reshape(&[1, 24, 24, 3]).unwrap();
    checks.push(("tof rejects one frame".into(), tof(&one, &one).is_err()));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0.as_str()).collect();
    Ok((
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} checks; {}", checks.len(), checks.iter().filter(|c| c.0.contains("oracle")).map(|c| c.0.as_str()).collect::<Vec<_>>().join(", "))
        } else {
            format!("failing: {}", failed.join("; "))
        },
    ))
}

fn c10_determinism(ws: &Workspace) -> Outcome {
    let cfg_path = ws.root.join("short.cfg");
    let mut cfg = desk_config();
    cfg.pretrain_iterations = 60;
    cfg.iterations = 40;
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| e.to_string())?;
    let runs = [ws.root.join("det_a"), ws.root.join("det_b")];
    for r in &runs {
        for stage in ["pretrain-d", "joint"] {
            fgdf_bin(&["train", "--config", p(&cfg_path), "--data", p(&ws.data), "--out", p(r), "--stage", stage, "--seed", "7"])?;
        }
    }
    let mut differing = Vec::new();
    for stage in ["pretrain-d", "joint"] {
        for file in ["params.bin", "params.manifest", "metrics.csv", "losses.csv"] {
            let a = fs::read(runs[0].join(stage).join(file)).map_err(|e| e.to_string())?;
            let b = fs::read(runs[1].join(stage).join(file)).map_err(|e| e.to_string())?;
            if a != b {
                differing.push(format!("{stage}/{file}"));
            }
        }
    }
    Ok((
        differing.is_empty(),
        if differing.is_empty() {
            "two pretrain-d + joint runs (seed 7): checkpoints, metrics and loss logs bit-identical".into()
        } else {
            format!("differs: {}", differing.join(", "))
        },
    ))
}

fn main() {
    // Tolerate libtest flags (e.g. `--nocapture`) passed through cargo test.
    let selected: Option<Vec<usize>> =
        std::env::var("FGDF_CRITERIA").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| selected.as_ref().map_or(true, |s| s.contains(&n));
    let mut ws: Option<Result<Workspace, String>> = None;
    let mut failures = 0;
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut(&mut Option<Result<Workspace, String>>) -> Outcome| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(&mut ws)))
            .unwrap_or_else(|e| Err(e.downcast_ref::<String>().cloned().or(e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()));
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match res {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!ok);
        println!("criterion {n:>2} [{name}]: {} — {detail} ({secs:.1}s)", if ok { "PASS" } else { "FAIL" });
    };
    fn shared(ws: &mut Option<Result<Workspace, String>>) -> Result<&Workspace, String> {
        ws.get_or_insert_with(workspace).as_ref().map_err(|e| e.clone())
    }
    run(1, "operator oracles", &mut |_| c1_operator_oracles());
    run(2, "zero-flow reduction", &mut |_| c2_reduction());
    run(3, "motion robustness", &mut |_| c3_motion_robustness());
    run(4, "gradient suite", &mut |_| c4_gradients());
    run(5, "normalisation invariants", &mut |_| c5_normalisation());
    run(6, "simulator round-trip", &mut |_| c6_round_trip());
    run(7, "desk-scale training", &mut |w| c7_training(shared(w)?));
    run(8, "FGDF ablation direction", &mut |w| c8_ablation(shared(w)?));
    run(9, "metric sanity", &mut |_| c9_metrics());
    run(10, "determinism", &mut |w| c10_determinism(shared(w)?));
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
