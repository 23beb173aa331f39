//! Two-stage training (Net^D pre-training, then joint training) on random
//! LR crops of synthetic samples, and checkpoint helpers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::io::{read_checkpoint, write_checkpoint};
use crate::losses::{loss_d, loss_total, DegradationTargets, LossBreakdown, RestorationTargets};
use crate::net::FmaNet;
use crate::optim::{halving_schedule, Adam};
use crate::params::Params;
use crate::synth::SynthSample;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Net^D alone with `L_D`.
    PretrainD,
    /// Both networks with `L_total`.
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainD => "pretrain-d",
            Stage::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrain-d" => Some(Stage::PretrainD),
            "joint" => Some(Stage::Joint),
            _ => None,
        }
    }

    pub fn trains(self, param: &str) -> bool {
        match self {
            Stage::PretrainD => param.starts_with("netd."),
            Stage::Joint => true,
        }
    }
}

/// Aligned LR crop of a sample (and the matching HR crop).
#[derive(Clone, Debug)]
pub struct Crop {
    pub x: Tensor,
    pub x_c: Tensor,
    pub y: Tensor,
    pub y_c: Tensor,
    pub x_sharp: Tensor,
    pub f_gt: Tensor,
}

fn crop_seq(t: &Tensor, top: usize, left: usize, size: usize) -> Tensor {
    let d = t.dims();
    Tensor::from_fn(&[d[0], size, size, d[3]], |i| t.get(&[i[0], top + i[1], left + i[2], i[3]]))
}

impl Crop {
    /// `size×size` LR window at `(top, left)`; the full sample when `size` covers it.
    pub fn new(s: &SynthSample, scale: usize, top: usize, left: usize, size: usize) -> Self {
        let c = s.center();
        let x = crop_seq(&s.x, top, left, size);
        let y = crop_seq(&s.y, top * scale, left * scale, size * scale);
        Crop {
            x_c: x.frame(c),
            y_c: y.frame(c),
            x_sharp: crop_seq(&s.x_sharp, top, left, size),
            f_gt: crop_seq(&s.f_gt, top, left, size),
            x,
            y,
        }
    }

    pub fn full(s: &SynthSample, scale: usize) -> Self {
        Self::new(s, scale, 0, 0, s.x.dims()[1])
    }
}

/// Loss values and parameter gradients for one crop.
pub struct StepResult {
    pub loss_d: LossBreakdown,
    pub loss_total: Option<LossBreakdown>,
    pub grads: HashMap<String, Tensor>,
}

pub fn loss_and_grads(cfg: &Config, net: &FmaNet, params: &Params, crop: &Crop, stage: Stage) -> Result<StepResult> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, |n| stage.trains(n));
    let x = g.constant(crop.x.clone());
    let y = g.constant(crop.y.clone());
    let d = net.forward_d(&mut g, &b, x, Some(y), None)?;
    let tg = DegradationTargets {
        x_c: g.constant(crop.x_c.clone()),
        y,
        y_c: g.constant(crop.y_c.clone()),
        f_gt: g.constant(crop.f_gt.clone()),
        x_sharp: g.constant(crop.x_sharp.clone()),
    };
    let l = cfg.lambda;
    let ld = loss_d(&mut g, &d, &tg, [l[0], l[1], l[2]], cfg.scale)?;
    let (loss, lt) = match stage {
        Stage::PretrainD => (ld.total, None),
        Stage::Joint => {
            let r = net.forward_r(&mut g, &b, x, &d)?;
            let rt = RestorationTargets { x, x_c: tg.x_c, y_c: tg.y_c, x_sharp: tg.x_sharp };
            let lt = loss_total(&mut g, &r, &rt, &ld, [l[3], l[4], l[5]])?;
            (lt.total, Some(lt.breakdown))
        }
    };
    let grads = g.backward(loss)?;
    Ok(StepResult { loss_d: ld.breakdown, loss_total: lt, grads: b.collect_grads(&grads) })
}

/// One logged iteration (losses averaged over the batch).
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub stage: Stage,
    pub lr: f64,
    pub loss_d: LossBreakdown,
    pub loss_total: Option<LossBreakdown>,
}

impl LogRow {
    /// The loss the stage optimises.
    pub fn objective(&self) -> f64 {
        self.loss_total.map_or(self.loss_d.total, |l| l.total)
    }
}

pub const LOSS_CSV_HEADER: &str =
    "iteration,stage,lr,ld_recon,ld_warp,ld_flow,ld_ta,ld_total,lt_recon,lt_warp,lt_ta,lt_total";

pub fn loss_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in rows {
        let d = &r.loss_d;
        let _ = write!(s, "{},{},{},{},{},{},{},{}", r.iteration, r.stage.name(), r.lr, d.recon, d.warp, d.flow_supervision, d.ta, d.total);
        match &r.loss_total {
            Some(t) => {
                let _ = writeln!(s, ",{},{},{},{}", t.recon, t.warp, t.ta, t.total);
            }
            None => s.push_str(",,,,\n"),
        }
    }
    s
}

fn average(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let mut a = LossBreakdown { weights: parts[0].weights, ..Default::default() };
    for p in parts {
        a.recon += p.recon / n;
        a.warp += p.warp / n;
        a.flow_supervision += p.flow_supervision / n;
        a.ta += p.ta / n;
        a.coupled += p.coupled / n;
        a.total += p.total / n;
    }
    a
}

/// Train `params` in place for `iterations` Adam steps. Each step draws
/// `cfg.batch` random `cfg.patch`-sized crops (accumulating gradients); the
/// learning rate halves at 70 %, 85 % and 95 % of the run. `on_iter` sees
/// every logged row.
pub fn train(
    cfg: &Config,
    params: &mut Params,
    data: &[SynthSample],
    stage: Stage,
    iterations: usize,
    mut on_iter: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    if data.is_empty() && iterations > 0 {
        return Err(Error::invalid("train", "empty dataset"));
    }
    let net = FmaNet::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ if stage == Stage::Joint { 0x6a01 } else { 0xd0d0 });
    let mut adam = Adam::new();
    let mut log = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mut grads: HashMap<String, Tensor> = HashMap::new();
        let mut ld = Vec::with_capacity(cfg.batch);
        let mut lt = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let s = &data[rng.gen_range(0..data.len())];
            let (h, w) = (s.x.dims()[1], s.x.dims()[2]);
            let top = rng.gen_range(0..=h - cfg.patch);
            let left = rng.gen_range(0..=w - cfg.patch);
            let crop = Crop::new(s, cfg.scale, top, left, cfg.patch);
            let r = loss_and_grads(cfg, &net, params, &crop, stage)?;
            for (name, g) in r.grads {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
            ld.push(r.loss_d);
            lt.extend(r.loss_total);
        }
        if cfg.batch > 1 {
            let k = 1.0 / cfg.batch as f64;
            grads.values_mut().for_each(|g| *g = g.scale(k));
        }
        let lr = halving_schedule(cfg.lr, it, iterations);
        adam.step(params, &grads, lr)?;
        let row = LogRow {
            iteration: it,
            stage,
            lr,
            loss_d: average(&ld),
            loss_total: (!lt.is_empty()).then(|| average(&lt)),
        };
        on_iter(&row);
        log.push(row);
    }
    Ok(log)
}

// ---- checkpoints ---------------------------------------------------------------

pub const CONFIG_FILE: &str = "config.txt";

/// Write parameters and the config snapshot to `dir`.
pub fn save_checkpoint(dir: &Path, cfg: &Config, params: &Params) -> Result<()> {
    write_checkpoint(dir, params.entries())?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
}

/// Load a checkpoint into the parameter layout of `net`; every parameter
/// must be present with the expected shape.
pub fn load_checkpoint(dir: &Path, net: &FmaNet) -> Result<Params> {
    let stored = Params::from_entries(read_checkpoint(dir).map_err(|e| Error::Checkpoint(e.to_string()))?);
    let mut params = net.init_params(0);
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    if let Some(missing) = names.iter().find(|n| stored.get(n).is_none()) {
        return Err(Error::Checkpoint(format!("{}: missing parameter {missing}", dir.display())));
    }
    params.load_from(&stored)?;
    Ok(params)
}
