//! Per-sample evaluation (PSNR / SSIM / tOF), per-bin aggregates, baselines
//! and the FGDF ablation grid.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{Config, MotionBin};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, tof};
use crate::net::FmaNet;
use crate::params::Params;
use crate::resample::bicubic_resize;
use crate::synth::{Dataset, SynthSample};
use crate::tensor::Tensor;
use crate::train::{train, LogRow, Stage};

/// Net^D reconstruction `X̂_c` against `X_c`.
pub const NET_D: &str = "netd";
/// Net^R restoration `Ŷ_c` against `Y_c`.
pub const NET_R: &str = "netr";
/// Bicubic upsampling of the blurry `X_c` against `Y_c`.
pub const BICUBIC: &str = "bicubic";
/// Net^R's image-domain anchor projection `X̂_Sharp^R` against `X_Sharp`.
pub const SHARP_R: &str = "sharp_r";
/// The blurry input `X` against `X_Sharp`.
pub const BLURRY: &str = "blurry";
pub const NETWORKS: [&str; 5] = [NET_D, NET_R, BICUBIC, SHARP_R, BLURRY];

/// Sample id used for aggregate rows; their `bin` is a bin label or [`ALL_BINS`].
pub const AGGREGATE_ID: &str = "mean";
pub const ALL_BINS: &str = "all";
pub const METRICS_HEADER: &str = "sample_id,network,bin,psnr,ssim,tof";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub sample_id: String,
    pub network: String,
    pub bin: String,
    pub psnr: f64,
    pub ssim: f64,
    pub tof: f64,
}

/// Peak value of the image range.
const PEAK: f64 = 1.0;

fn with_frame(seq: &Tensor, index: usize, frame: &Tensor) -> Result<Tensor> {
    let frames: Vec<Tensor> = (0..seq.dims()[0]).map(|t| if t == index { frame.clone() } else { seq.frame(t) }).collect();
    Tensor::stack(&frames)
}

/// Scores of a single predicted frame: the temporal score substitutes it as
/// the centre of the reference sequence.
fn score_frame(pred: &Tensor, seq: &Tensor, center: usize) -> Result<(f64, f64, f64)> {
    let target = seq.frame(center);
    Ok((psnr(pred, &target, PEAK)?, ssim(pred, &target, PEAK)?, tof(&with_frame(seq, center, pred)?, seq)?))
}

/// Scores of a whole predicted sequence (SSIM averaged over frames).
fn score_sequence(pred: &Tensor, seq: &Tensor) -> Result<(f64, f64, f64)> {
    let t = seq.dims()[0];
    let s = (0..t).map(|i| ssim(&pred.frame(i), &seq.frame(i), PEAK)).sum::<Result<f64>>()? / t as f64;
    Ok((psnr(pred, seq, PEAK)?, s, tof(pred, seq)?))
}

/// All rows of one sample, in [`NETWORKS`] order.
pub fn evaluate_sample(net: &FmaNet, params: &Params, sample: &SynthSample, id: &str, bin: &str) -> Result<Vec<MetricRow>> {
    let c = sample.center();
    let p = net.predict(params, &sample.x, Some(&sample.y))?;
    let x_hat_c = p.x_hat_c.as_ref().expect("Y was supplied");
    let x_c = sample.x.frame(c);
    let (hh, hw) = (sample.y.dims()[1], sample.y.dims()[2]);
    let upsampled = bicubic_resize(&x_c, hh, hw)?;
    let scores = [
        (NET_D, score_frame(x_hat_c, &sample.x, c)?),
        (NET_R, score_frame(&p.y_c, &sample.y, c)?),
        (BICUBIC, score_frame(&upsampled, &sample.y, c)?),
        (SHARP_R, score_sequence(&p.sharp_r, &sample.x_sharp)?),
        (BLURRY, score_sequence(&sample.x, &sample.x_sharp)?),
    ];
    Ok(scores
        .into_iter()
        .map(|(n, (psnr, ssim, tof))| MetricRow {
            sample_id: id.to_string(),
            network: n.to_string(),
            bin: bin.to_string(),
            psnr,
            ssim,
            tof,
        })
        .collect())
}

/// Worker count from `FGDF_THREADS` (default 1).
pub fn worker_count() -> usize {
    std::env::var("FGDF_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n: &usize| n >= 1).unwrap_or(1)
}

/// Map `f` over `0..n` with up to `threads` workers; results keep index order.
pub fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let f = &f;
    let chunks: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| s.spawn(move || (w..n).step_by(threads).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut per_worker: Vec<std::vec::IntoIter<T>> = Vec::with_capacity(threads);
    for c in chunks {
        per_worker.push(c?.into_iter());
    }
    Ok((0..n).map(|i| per_worker[i % threads].next().expect("worker result count")).collect())
}

/// Per-(network, bin) and per-network means, in first-seen order.
pub fn aggregate(rows: &[MetricRow]) -> Vec<MetricRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        for key in [(r.network.clone(), r.bin.clone()), (r.network.clone(), ALL_BINS.to_string())] {
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
    }
    keys.sort_by_key(|(n, _)| rows.iter().position(|r| &r.network == n));
    keys.into_iter()
        .map(|(network, bin)| {
            let sel: Vec<&MetricRow> =
                rows.iter().filter(|r| r.network == network && (bin == ALL_BINS || r.bin == bin)).collect();
            let k = sel.len() as f64;
            MetricRow {
                sample_id: AGGREGATE_ID.to_string(),
                psnr: sel.iter().map(|r| r.psnr).sum::<f64>() / k,
                ssim: sel.iter().map(|r| r.ssim).sum::<f64>() / k,
                tof: sel.iter().map(|r| r.tof).sum::<f64>() / k,
                network,
                bin,
            }
        })
        .collect()
}

/// Evaluate every sample of `data` and append the aggregates.
pub fn evaluate(net: &FmaNet, params: &Params, data: &Dataset, threads: usize) -> Result<Vec<MetricRow>> {
    let per_sample = parallel_map(data.len(), threads, |i| {
        let r = &data.rows[i];
        evaluate_sample(net, params, &data.samples[i], &r.id, &r.bin.label())
    })?;
    let mut rows: Vec<MetricRow> = per_sample.into_iter().flatten().collect();
    let agg = aggregate(&rows);
    rows.extend(agg);
    Ok(rows)
}

/// Shortest round-trip formatting keeps aggregates reproducible from the CSV.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:?},{:?},{:?}", r.sample_id, r.network, r.bin, r.psnr, r.ssim, r.tof);
    }
    s
}

pub fn parse_metrics_csv(text: &str, path: &Path) -> Result<Vec<MetricRow>> {
    let bad = |i: usize, d: &str| Error::Format { path: path.to_path_buf(), detail: format!("line {}: {d}", i + 1) };
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, h)| h.trim()) != Some(METRICS_HEADER) {
        return Err(bad(0, "missing header"));
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i, "expected 6 fields"));
            }
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(i, "bad number"));
            Ok(MetricRow {
                sample_id: f[0].to_string(),
                network: f[1].to_string(),
                bin: f[2].to_string(),
                psnr: num(f[3])?,
                ssim: num(f[4])?,
                tof: num(f[5])?,
            })
        })
        .collect()
}

/// The aggregate row for `(network, bin)`.
pub fn find_aggregate<'a>(rows: &'a [MetricRow], network: &str, bin: &str) -> Option<&'a MetricRow> {
    rows.iter().find(|r| r.sample_id == AGGREGATE_ID && r.network == network && r.bin == bin)
}

// ---- FGDF ablation -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub kd: usize,
    pub fgdf: bool,
    pub bin: String,
    pub psnr: f64,
    pub tof: f64,
}

pub const ABLATION_HEADER: &str = "k_d,fgdf_flag,bin,psnr,tof";

/// Configuration of one ablation arm.
pub fn ablation_config(cfg: &Config, kd: usize, fgdf: bool) -> Config {
    let mut c = cfg.clone();
    c.kd = kd;
    c.fgdf = fgdf;
    c
}

/// Net^D reconstruction scores of every sample, grouped into bins.
pub fn reconstruction_by_bin(
    net: &FmaNet,
    params: &Params,
    data: &Dataset,
    bins: &[MotionBin],
    threads: usize,
) -> Result<Vec<(String, f64, f64)>> {
    let scores = parallel_map(data.len(), threads, |i| {
        let s = &data.samples[i];
        let c = s.center();
        let x_hat_c = net.reconstruct(params, &s.x, &s.y)?;
        let target = s.x.frame(c);
        Ok((psnr(&x_hat_c, &target, PEAK)?, tof(&with_frame(&s.x, c, &x_hat_c)?, &s.x)?))
    })?;
    let mut labels: Vec<String> = bins.iter().map(MotionBin::label).collect();
    for r in &data.rows {
        if !labels.contains(&r.bin.label()) {
            labels.push(r.bin.label());
        }
    }
    Ok(labels
        .into_iter()
        .filter_map(|label| {
            let sel: Vec<(f64, f64)> =
                data.rows.iter().zip(&scores).filter(|(r, _)| r.bin.label() == label).map(|(_, &s)| s).collect();
            let k = sel.len() as f64;
            (!sel.is_empty()).then(|| {
                (label, sel.iter().map(|s| s.0).sum::<f64>() / k, sel.iter().map(|s| s.1).sum::<f64>() / k)
            })
        })
        .collect())
}

/// Train Net^D (`ablate_iterations` of the pre-training stage) for every
/// `k_d ∈ ablate_kd` with FGDF off and on, and score each arm per bin.
/// `on_arm` sees each arm's training log.
pub fn ablate_fgdf(
    cfg: &Config,
    data: &Dataset,
    threads: usize,
    mut on_arm: impl FnMut(usize, bool, &[LogRow]),
) -> Result<Vec<AblationRow>> {
    let mut out = Vec::new();
    for &kd in &cfg.ablate_kd {
        for fgdf in [false, true] {
            let c = ablation_config(cfg, kd, fgdf);
            c.validate()?;
            let net = FmaNet::new(&c);
            let mut params = net.init_params(c.seed);
            let log = train(&c, &mut params, &data.samples, Stage::PretrainD, c.ablate_iterations, |_| {})?;
            on_arm(kd, fgdf, &log);
            for (bin, psnr, tof) in reconstruction_by_bin(&net, &params, data, &c.bins, threads)? {
                out.push(AblationRow { kd, fgdf, bin, psnr, tof });
            }
        }
    }
    Ok(out)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:?},{:?}", r.kd, u8::from(r.fgdf), r.bin, r.psnr, r.tof);
    }
    s
}
