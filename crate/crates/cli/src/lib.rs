//! Command implementations behind the `fgdf` binary: dataset generation,
//! two-stage training, evaluation, the FGDF ablation sweep and dumps.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use fgdf::config::Config;
use fgdf::eval::{ablate_fgdf, ablation_csv, evaluate, metrics_csv, worker_count};
use fgdf::io::write_tensor;
use fgdf::net::FmaNet;
use fgdf::synth::{make_dataset, Dataset};
use fgdf::train::{load_checkpoint, loss_csv, save_checkpoint, train, Stage, CONFIG_FILE};
use fgdf::Tensor;
use image::GrayImage;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;
pub const EXIT_DATA: i32 = 4;

pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSS_FILE: &str = "losses.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const BUILD_FILE: &str = "build.txt";

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

type CliResult<T> = Result<T, CliError>;

trait ExitCode<T> {
    fn exit(self, code: i32) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> ExitCode<T> for Result<T, E> {
    fn exit(self, code: i32) -> CliResult<T> {
        self.map_err(|e| CliError { code, error: e.into() })
    }
}

fn fail<T>(code: i32, msg: String) -> CliResult<T> {
    Err(CliError { code, error: anyhow::anyhow!(msg) })
}

#[derive(Parser, Debug)]
#[command(name = "fgdf", version, about = "Flow-guided dynamic filtering for joint video super-resolution and deblurring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StageArg {
    PretrainD,
    Joint,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::PretrainD => Stage::PretrainD,
            StageArg::Joint => Stage::Joint,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset (samples + manifest).
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one stage; writes `<out>/<stage>/` with checkpoint, losses and metrics.
    /// The joint stage starts from `<out>/pretrain-d/`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint; writes `<out>/metrics.csv` (or stdout without `--out`).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the configuration stored with the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train Net^D with and without flow guidance for every configured k_d.
    AblateFgdf {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write flows, kernels and per-step warped features of one sample.
    Dump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p).exit(EXIT_CONFIG)?,
        None => Config::desk(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().exit(EXIT_CONFIG)?;
    for w in &cfg.warnings {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

/// Create `dir`; its parent must already exist.
fn prepare_out(dir: &Path) -> CliResult<()> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return fail(EXIT_CONFIG, format!("output parent {} does not exist", parent.display()));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).exit(EXIT_CONFIG)
}

fn write_text(path: &Path, text: &str, code: i32) -> CliResult<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).exit(code)
}

fn load_data(dir: &Path) -> CliResult<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display())).exit(EXIT_DATA)
}

/// Configuration stored with a checkpoint, unless overridden.
fn checkpoint_config(checkpoint: &Path, config: Option<&Path>) -> CliResult<Config> {
    match config {
        Some(p) => load_config(Some(p), None),
        None => {
            let p = checkpoint.join(CONFIG_FILE);
            if !p.is_file() {
                return fail(EXIT_CHECKPOINT, format!("{}: no {CONFIG_FILE} in checkpoint", checkpoint.display()));
            }
            Config::load(&p).exit(EXIT_CHECKPOINT)
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen { config, out, seed } => cmd_gen(config.as_deref(), &out, seed),
        Command::Train { config, data, out, stage, seed } => {
            cmd_train(config.as_deref(), &data, &out, stage.into(), seed)
        }
        Command::Eval { checkpoint, data, config, out } => {
            cmd_eval(&checkpoint, &data, config.as_deref(), out.as_deref())
        }
        Command::AblateFgdf { config, data, out, seed } => cmd_ablate_fgdf(config.as_deref(), &data, &out, seed),
        Command::Dump { checkpoint, data, sample, out } => cmd_dump(&checkpoint, &data, &sample, &out),
    }
}

pub fn cmd_gen(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let cfg = load_config(config, seed)?;
    prepare_out(out)?;
    let rows = make_dataset(&cfg, &cfg.bins, cfg.samples_per_bin, out).exit(EXIT_DATA)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text(), EXIT_DATA)?;
    eprintln!("wrote {} samples to {}", rows.len(), out.display());
    Ok(())
}

/// Directory of a stage's run under `out`.
pub fn stage_dir(out: &Path, stage: Stage) -> PathBuf {
    out.join(stage.name())
}

pub fn cmd_train(config: Option<&Path>, data: &Path, out: &Path, stage: Stage, seed: Option<u64>) -> CliResult<()> {
    let cfg = load_config(config, seed)?;
    let net = FmaNet::new(&cfg);
    let (mut params, iterations) = match stage {
        Stage::PretrainD => (net.init_params(cfg.seed), cfg.pretrain_iterations),
        Stage::Joint => {
            let pre = stage_dir(out, Stage::PretrainD);
            if !pre.is_dir() {
                return fail(EXIT_CHECKPOINT, format!("joint stage needs a pretrain-d checkpoint at {}", pre.display()));
            }
            (load_checkpoint(&pre, &net).exit(EXIT_CHECKPOINT)?, cfg.iterations)
        }
    };
    let data_set = load_data(data)?;
    prepare_out(out)?;
    let dir = stage_dir(out, stage);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).exit(EXIT_CONFIG)?;

    let log = train(&cfg, &mut params, &data_set.samples, stage, iterations, |r| {
        if (r.iteration + 1) % 100 == 0 || r.iteration + 1 == iterations {
            eprintln!("[{}] iter {}/{} lr {:.2e} loss {:.6}", stage.name(), r.iteration + 1, iterations, r.lr, r.objective());
        }
    })
    .exit(EXIT_DATA)?;
    save_checkpoint(&dir, &cfg, &params).exit(EXIT_CHECKPOINT)?;
    write_text(&dir.join(LOSS_FILE), &loss_csv(&log), EXIT_CHECKPOINT)?;
    write_text(&dir.join(BUILD_FILE), &format!("fgdf-cli {}\n", env!("CARGO_PKG_VERSION")), EXIT_CHECKPOINT)?;
    let rows = evaluate(&net, &params, &data_set, worker_count()).exit(EXIT_DATA)?;
    write_text(&dir.join(METRICS_FILE), &metrics_csv(&rows), EXIT_CHECKPOINT)?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, config: Option<&Path>, out: Option<&Path>) -> CliResult<()> {
    let cfg = checkpoint_config(checkpoint, config)?;
    let net = FmaNet::new(&cfg);
    let params = load_checkpoint(checkpoint, &net).exit(EXIT_CHECKPOINT)?;
    let data_set = load_data(data)?;
    let rows = evaluate(&net, &params, &data_set, worker_count()).exit(EXIT_DATA)?;
    let text = metrics_csv(&rows);
    match out {
        Some(dir) => {
            prepare_out(dir)?;
            write_text(&dir.join(METRICS_FILE), &text, EXIT_DATA)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_ablate_fgdf(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let cfg = load_config(config, seed)?;
    let data_set = load_data(data)?;
    prepare_out(out)?;
    let mut logs = Vec::new();
    let rows = ablate_fgdf(&cfg, &data_set, worker_count(), |kd, fgdf, log| {
        eprintln!("[ablate] k_d={kd} fgdf={fgdf}: final L_D {:.6}", log.last().map_or(f64::NAN, |r| r.objective()));
        logs.push((format!("losses_kd{kd}_fgdf{}.csv", u8::from(fgdf)), loss_csv(log)));
    })
    .exit(EXIT_DATA)?;
    for (name, text) in logs {
        write_text(&out.join(name), &text, EXIT_DATA)?;
    }
    write_text(&out.join(CONFIG_FILE), &cfg.to_text(), EXIT_DATA)?;
    write_text(&out.join(ABLATION_FILE), &ablation_csv(&rows), EXIT_DATA)?;
    eprintln!("wrote {}", out.join(ABLATION_FILE).display());
    Ok(())
}

/// 8-bit grid of a `T×H×W×C` tensor: one row of tiles per frame, one tile per
/// channel, 1-pixel gaps; values min-max scaled to the full 0..=255 range.
pub fn tensor_grid(t: &Tensor) -> GrayImage {
    let d = t.dims();
    let (frames, h, w, c) = match d.len() {
        4 => (d[0], d[1], d[2], d[3]),
        3 => (1, d[0], d[1], d[2]),
        _ => panic!("tensor_grid expects a rank-3 or rank-4 tensor, got {d:?}"),
    };
    let (lo, hi) = (t.min(), t.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = GrayImage::new((c * (w + 1) - 1) as u32, (frames * (h + 1) - 1) as u32);
    let data = t.data();
    for f in 0..frames {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = data[((f * h + y) * w + x) * c + ch];
                    let px = ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8;
                    img.put_pixel((ch * (w + 1) + x) as u32, (f * (h + 1) + y) as u32, image::Luma([px]));
                }
            }
        }
    }
    img
}

pub fn cmd_dump(checkpoint: &Path, data: &Path, sample: &str, out: &Path) -> CliResult<()> {
    let cfg = checkpoint_config(checkpoint, None)?;
    let net = FmaNet::new(&cfg);
    let params = load_checkpoint(checkpoint, &net).exit(EXIT_CHECKPOINT)?;
    let data_set = load_data(data)?;
    let Some(index) = data_set.rows.iter().position(|r| r.id == sample) else {
        return fail(EXIT_DATA, format!("unknown sample id `{sample}` in {}", data.display()));
    };
    prepare_out(out)?;
    let s = &data_set.samples[index];
    let p = net.predict(&params, &s.x, Some(&s.y)).exit(EXIT_DATA)?;
    let mut items: Vec<(String, &Tensor)> =
        vec![("fy".into(), &p.fy), ("fx".into(), &p.fx), ("kd".into(), &p.kd), ("kr".into(), &p.kr)];
    for (i, t) in p.netd_warped.iter().enumerate() {
        items.push((format!("netd_fw{i}"), t));
    }
    for (i, t) in p.netr_warped.iter().enumerate() {
        items.push((format!("netr_fw{i}"), t));
    }
    for (name, t) in items {
        write_tensor(&out.join(format!("{name}.fgdt")), t).exit(EXIT_DATA)?;
        let png = out.join(format!("{name}.png"));
        tensor_grid(t).save(&png).with_context(|| format!("writing {}", png.display())).exit(EXIT_DATA)?;
    }
    eprintln!("dumped sample {sample} to {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout_and_full_range() {
        let t = Tensor::from_fn(&[2, 3, 4, 2], |i| 0.1 + 0.01 * (i[0] * 24 + i[1] * 8 + i[2] * 2 + i[3]) as f64);
        let g = tensor_grid(&t);
        assert_eq!(g.dimensions(), (2 * 5 - 1, 2 * 4 - 1));
        assert_eq!(g.get_pixel(0, 0).0[0], 0);
        assert_eq!(g.get_pixel(5 + 3, 4 + 2).0[0], 255);
        let flat = tensor_grid(&Tensor::full(&[1, 2, 2, 1], 0.5));
        assert!(flat.pixels().all(|p| p.0[0] == 0));
    }

    #[test]
    fn stage_directories() {
        assert_eq!(stage_dir(Path::new("r"), Stage::Joint), Path::new("r/joint"));
        assert_eq!(stage_dir(Path::new("r"), Stage::PretrainD), Path::new("r/pretrain-d"));
    }
}
