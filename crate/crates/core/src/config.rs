//! Run configuration: a plain `key = value` text format, one key per line,
//! `#` starts a comment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dynfilter::odd_kernel_size;
use crate::error::{Error, Result};

/// Half-open motion-magnitude range `[lo, hi)` in HR pixels per frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionBin {
    pub lo: f64,
    pub hi: f64,
}

impl MotionBin {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v < self.hi
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.lo, self.hi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    /// Number of input frames `T = 2N + 1`.
    pub frames: usize,
    /// Super-resolution factor `s`.
    pub scale: usize,
    /// FRMA refinement steps `M`.
    pub frma_steps: usize,
    /// Flow-mask pairs `n` per frame.
    pub flow_pairs: usize,
    pub kd: usize,
    pub kr: usize,
    pub channels: usize,
    pub rdb_layers: usize,
    pub growth: usize,
    /// `λ1..λ6`.
    pub lambda: [f64; 6],
    pub lr: f64,
    pub batch: usize,
    /// Joint-stage iterations.
    pub iterations: usize,
    pub pretrain_iterations: usize,
    pub seed: u64,
    /// LR frame size of generated samples.
    pub height: usize,
    pub width: usize,
    /// LR crop size used during training.
    pub patch: usize,
    pub samples_per_bin: usize,
    pub bins: Vec<MotionBin>,
    /// Blur length (HR px) as a fraction of the motion magnitude, capped at `kd / 2`.
    pub blur_ratio: f64,
    /// `false` forces the degradation flows to zero (conventional dynamic filtering).
    pub fgdf: bool,
    pub ablate_kd: Vec<usize>,
    pub ablate_iterations: usize,
    /// Notes produced while parsing (e.g. kernel sizes rounded to odd).
    pub warnings: Vec<String>,
}

/// Reference motion bins (HR px at ×4), rescaled to the configured scale.
pub const REFERENCE_BINS: [(f64, f64); 3] = [(0.0, 20.0), (20.0, 40.0), (40.0, 60.0)];
pub const REFERENCE_SCALE: usize = 4;

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

impl Config {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        let scale = 2;
        Config {
            frames: 3,
            scale,
            frma_steps: 2,
            flow_pairs: 3,
            kd: 9,
            kr: 5,
            channels: 16,
            rdb_layers: 3,
            growth: 8,
            lambda: [1e-1, 1e-4, 1e-1, 1e-1, 1e-1, 1e-1],
            lr: 1e-3,
            batch: 1,
            iterations: 2000,
            pretrain_iterations: 1000,
            seed: 0,
            height: 32,
            width: 32,
            patch: 16,
            samples_per_bin: 8,
            bins: scaled_bins(scale),
            blur_ratio: 0.25,
            fgdf: true,
            ablate_kd: vec![5, 9],
            ablate_iterations: 2000,
            warnings: Vec::new(),
        }
    }

    /// Full-size settings of the reference model (for documentation and
    /// shape tests; far too large to train here).
    pub fn reference() -> Self {
        let mut c = Self::desk();
        c.frma_steps = 4;
        c.flow_pairs = 9;
        c.kd = odd_kernel_size(20);
        c.kr = 5;
        c.frames = 3;
        c.scale = 4;
        c.lr = 2e-4;
        c.batch = 8;
        c.iterations = 300_000;
        c.pretrain_iterations = 300_000;
        c.patch = 64;
        c.bins = scaled_bins(4);
        c
    }

    pub fn center(&self) -> usize {
        self.frames / 2
    }

    pub fn hr_height(&self) -> usize {
        self.height * self.scale
    }

    pub fn hr_width(&self) -> usize {
        self.width * self.scale
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parse `key = value` lines over the desk defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::desk();
        let mut bins_set = false;
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                detail: "expected key = value".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            c.set(key, value)?;
            bins_set |= key == "bins";
        }
        if !bins_set {
            c.bins = scaled_bins(c.scale);
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let err = |detail: String| Error::Config { key: key.to_string(), detail };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config { key: key.into(), detail: format!("cannot parse `{v}`") })
        }
        match key {
            "T" => self.frames = num(key, value)?,
            "s" => self.scale = num(key, value)?,
            "M" => self.frma_steps = num(key, value)?,
            "n" => self.flow_pairs = num(key, value)?,
            "k_d" => self.kd = self.odd(key, num(key, value)?),
            "k_r" => self.kr = self.odd(key, num(key, value)?),
            "C" => self.channels = num(key, value)?,
            "D" => self.rdb_layers = num(key, value)?,
            "G" => self.growth = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "pretrain_iterations" => self.pretrain_iterations = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "samples_per_bin" => self.samples_per_bin = num(key, value)?,
            "blur_ratio" => self.blur_ratio = num(key, value)?,
            "fgdf" => self.fgdf = num(key, value)?,
            "ablate_iterations" => self.ablate_iterations = num(key, value)?,
            "ablate_kd" => {
                self.ablate_kd = value
                    .split(',')
                    .map(|v| num::<usize>(key, v.trim()).map(|k| self.odd(key, k)))
                    .collect::<Result<_>>()?
            }
            "bins" => {
                self.bins = value
                    .split(',')
                    .map(|b| {
                        let (lo, hi) = b.split_once('-').ok_or_else(|| err(format!("bin `{b}` is not lo-hi")))?;
                        Ok(MotionBin { lo: num(key, lo.trim())?, hi: num(key, hi.trim())? })
                    })
                    .collect::<Result<_>>()?
            }
            k if k.starts_with("lambda") => {
                let i: usize = k[6..].parse().map_err(|_| err("unknown key".into()))?;
                if !(1..=6).contains(&i) {
                    return Err(err("lambda index must be 1..6".into()));
                }
                self.lambda[i - 1] = num(key, value)?;
            }
            _ => return Err(err("unknown key".into())),
        }
        Ok(())
    }

    fn odd(&mut self, key: &str, k: usize) -> usize {
        let o = odd_kernel_size(k);
        if o != k {
            self.warnings.push(format!("{key}={k} is even; using {o}"));
        }
        o
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, detail: &str| Err(Error::Config { key: key.into(), detail: detail.into() });
        if self.frames % 2 == 0 || self.frames == 0 {
            return err("T", "must be odd (T = 2N + 1)");
        }
        if self.scale == 0 {
            return err("s", "must be >= 1");
        }
        if self.flow_pairs == 0 {
            return err("n", "must be >= 1");
        }
        for (key, v) in [("C", self.channels), ("D", self.rdb_layers), ("G", self.growth), ("batch", self.batch)] {
            if v == 0 {
                return err(key, "must be >= 1");
            }
        }
        if self.patch == 0 || self.patch > self.height || self.patch > self.width {
            return err("patch", "must be in 1..=min(height, width)");
        }
        if self.bins.iter().any(|b| !(b.lo >= 0.0 && b.hi > b.lo)) {
            return err("bins", "need 0 <= lo < hi");
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let list = |v: &[usize]| v.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "T = {}", self.frames);
        let _ = writeln!(s, "s = {}", self.scale);
        let _ = writeln!(s, "M = {}", self.frma_steps);
        let _ = writeln!(s, "n = {}", self.flow_pairs);
        let _ = writeln!(s, "k_d = {}", self.kd);
        let _ = writeln!(s, "k_r = {}", self.kr);
        let _ = writeln!(s, "C = {}", self.channels);
        let _ = writeln!(s, "D = {}", self.rdb_layers);
        let _ = writeln!(s, "G = {}", self.growth);
        for (i, l) in self.lambda.iter().enumerate() {
            let _ = writeln!(s, "lambda{} = {l:e}", i + 1);
        }
        let _ = writeln!(s, "lr = {:e}", self.lr);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "pretrain_iterations = {}", self.pretrain_iterations);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "patch = {}", self.patch);
        let _ = writeln!(s, "samples_per_bin = {}", self.samples_per_bin);
        let bins: Vec<String> = self.bins.iter().map(|b| format!("{}-{}", b.lo, b.hi)).collect();
        let _ = writeln!(s, "bins = {}", bins.join(","));
        let _ = writeln!(s, "blur_ratio = {}", self.blur_ratio);
        let _ = writeln!(s, "fgdf = {}", self.fgdf);
        let _ = writeln!(s, "ablate_kd = {}", list(&self.ablate_kd));
        let _ = writeln!(s, "ablate_iterations = {}", self.ablate_iterations);
        s
    }
}

/// Reference bins rescaled by `scale / REFERENCE_SCALE`.
pub fn scaled_bins(scale: usize) -> Vec<MotionBin> {
    let k = scale as f64 / REFERENCE_SCALE as f64;
    REFERENCE_BINS.iter().map(|&(lo, hi)| MotionBin { lo: lo * k, hi: hi * k }).collect()
}
