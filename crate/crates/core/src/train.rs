//! Training harness: Adam, learning-rate schedules, the deterministic epoch
//! loop, evaluation passes, and the metrics file. Everything here is a pure
//! function of (config, dataset bytes); two runs with the same inputs write
//! byte-identical checkpoints and metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::ckpt;
use crate::data::{load_manifest, load_sample, ManifestEntry, Sample, Split};
use crate::kvconfig::{model_config_from_kv, KvConfig, MODEL_KEYS};
use crate::metrics::{iou, EvalReport};
use crate::model::{Model, ModelConfig};
use crate::rng;
use crate::{Error, Result};

/// Adam with the standard constants β₁=0.9, β₂=0.999, ε=1e-8. Moment
/// buffers are kept per parameter in registry order; parameters that never
/// receive a gradient are left untouched.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[(String, Tensor)]) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One update from the gradients currently accumulated on the
    /// parameters. Gradients are left in place; the caller zeroes them.
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (name, p)) in params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of '{name}'")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.data_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                data[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Learning-rate schedule over epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// lr(e) = base · decay^⌊e/every⌋.
    Step { decay: f64, every: usize },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Step { decay, every } => base * decay.powi((epoch / every) as i32),
        }
    }
}

/// Epochs the divergence probe inspects.
pub const DIVERGENCE_WINDOW: usize = 10;

/// Samples used for the untrained-baseline loss estimate.
const BASELINE_SAMPLES: usize = 256;

/// Full training-run configuration.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// 0 means: write the initial checkpoint and evaluate, no training.
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Seed for the per-epoch shuffle stream (independent of model init).
    pub train_seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Write a checkpoint every this many epochs; 0 = only the final one.
    pub ckpt_every: usize,
    /// Stop early once validation mean IoU reaches this value.
    pub stop_at_val_iou: Option<f64>,
}

/// Train-level keys recognized in config files (model keys are separate).
pub const TRAIN_KEYS: [&str; 10] = [
    "epochs",
    "batch",
    "lr",
    "schedule",
    "lr_decay",
    "lr_every",
    "train_seed",
    "ckpt_every",
    "data_dir",
    "stop_at_val_iou",
];

impl TrainConfig {
    /// Builds a run config from key=value text. `out_dir` comes from the
    /// command line; `seed_override` (the --seed flag) sets both the model
    /// init seed and the shuffle seed.
    pub fn from_kv(kv: &KvConfig, out_dir: PathBuf, seed_override: Option<u64>) -> Result<TrainConfig> {
        for key in kv.keys() {
            if !MODEL_KEYS.contains(&key) && !TRAIN_KEYS.contains(&key) {
                return Err(Error::Config(format!("unknown config key '{key}'")));
            }
        }
        let mut model = model_config_from_kv(kv)?;
        let epochs = kv.usize_or("epochs", 30)?;
        let schedule = match kv.str_or("schedule", "step").as_str() {
            "constant" => LrSchedule::Constant,
            "step" => {
                let decay = kv.f64_or("lr_decay", 0.1)?;
                // Default: one decay step at 80% of the run.
                let every = kv.usize_or("lr_every", (epochs * 4).div_ceil(5).max(1))?;
                LrSchedule::Step { decay, every }
            }
            v => return Err(Error::Config(format!("schedule: unknown kind '{v}'"))),
        };
        let data_dir = kv
            .get("data_dir")
            .ok_or_else(|| Error::Config("config must set data_dir".into()))?;
        let stop_at_val_iou = match kv.get("stop_at_val_iou") {
            None => None,
            Some(_) => Some(kv.f64_or("stop_at_val_iou", 0.0)?),
        };
        if let Some(seed) = seed_override {
            model.seed = seed;
        }
        let train_seed = match seed_override {
            Some(seed) => seed,
            None => kv.u64_or("train_seed", 0)?,
        };
        let cfg = TrainConfig {
            model,
            epochs,
            batch: kv.usize_or("batch", 8)?,
            lr: kv.f64_or("lr", 1e-3)?,
            schedule,
            train_seed,
            data_dir: PathBuf::from(data_dir),
            out_dir,
            ckpt_every: kv.usize_or("ckpt_every", 0)?,
            stop_at_val_iou,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if let LrSchedule::Step { decay, every } = self.schedule {
            if every == 0 {
                return Err(Error::Config("lr_every must be at least 1".into()));
            }
            if !(decay > 0.0 && decay.is_finite()) {
                return Err(Error::Config(format!("lr_decay {decay} must be positive")));
            }
        }
        if let Some(t) = self.stop_at_val_iou {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("stop_at_val_iou {t} must lie in [0,1]")));
            }
        }
        Ok(())
    }
}

/// One epoch's summary line.
#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_mask: f64,
    pub l_rec: f64,
    pub val_iou: f64,
}

impl EpochLog {
    pub fn render(&self) -> String {
        format!(
            "epoch={} lr={:.6} loss={:.6} l_mask={:.6} l_rec={:.6} val_iou={:.6}",
            self.epoch, self.lr, self.loss, self.l_mask, self.l_rec, self.val_iou
        )
    }
}

/// Outcome of the non-failing convergence probe: did the mean training loss
/// drop below the untrained model's loss within the window?
#[derive(Clone, Debug)]
pub struct DivergenceProbe {
    pub baseline_loss: f64,
    pub diverged: bool,
}

/// Everything a training run produces.
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub report: EvalReport,
    pub probe: Option<DivergenceProbe>,
    pub final_ckpt: PathBuf,
    pub metrics_file: PathBuf,
}

fn mean_loss(model: &Model, samples: &[&Sample], training: bool) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let out = model.forward(&s.image, &s.tokens, training)?;
        let breakdown = model.loss(&out, &s.gt_mask, training)?;
        total += breakdown.total.item();
    }
    Ok(total / samples.len() as f64)
}

fn mean_val_iou(model: &Model, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let out = model.forward(&s.image, &s.tokens, false)?;
        total += iou(&out.mask, &s.gt_mask)?;
    }
    Ok(total / samples.len() as f64)
}

/// Forward-only evaluation over a set of loaded samples.
pub fn evaluate_samples(model: &Model, samples: &[Sample]) -> Result<EvalReport> {
    let mut ious = Vec::with_capacity(samples.len());
    for s in samples {
        let out = model.forward(&s.image, &s.tokens, false)?;
        ious.push(iou(&out.mask, &s.gt_mask)?);
    }
    EvalReport::from_ious(ious)
}

/// Loads every sample of a split, in manifest order.
pub fn load_split(data_dir: &Path, entries: &[&ManifestEntry], s: usize) -> Result<Vec<Sample>> {
    entries
        .iter()
        .map(|e| load_sample(data_dir, e, s))
        .collect()
}

fn check_dataset_compat(model: &ModelConfig, meta: &crate::data::DatasetMeta) -> Result<()> {
    if meta.s != model.image_size {
        return Err(Error::Config(format!(
            "dataset canvas {} does not match the model's image size {}",
            meta.s, model.image_size
        )));
    }
    if meta.pad != model.n_t {
        return Err(Error::Config(format!(
            "dataset pad length {} does not match the model's N_t {}",
            meta.pad, model.n_t
        )));
    }
    if meta.vocab > model.vocab {
        return Err(Error::Config(format!(
            "dataset vocabulary {} exceeds the model's embedding table {}",
            meta.vocab, model.vocab
        )));
    }
    Ok(())
}

/// Runs the configured training. `progress` is called once per finished
/// epoch (for console output); all file output is deterministic.
pub fn train(cfg: &TrainConfig, progress: &mut dyn FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.data_dir)?;
    check_dataset_compat(&cfg.model, &manifest.meta)?;
    let s = manifest.meta.s;
    let train_samples = load_split(&cfg.data_dir, &manifest.split_entries(Split::Train), s)?;
    let val_samples = load_split(&cfg.data_dir, &manifest.split_entries(Split::Val), s)?;
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::Data(format!(
            "need both splits nonempty, got {} train / {} val",
            train_samples.len(),
            val_samples.len()
        )));
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let model = Model::new(cfg.model.clone())?;
    let params = model.named_params();
    let mut adam = Adam::new(&params);

    // Untrained reference for the convergence probe.
    let baseline_subset: Vec<&Sample> = train_samples.iter().take(BASELINE_SAMPLES).collect();
    let baseline_loss = mean_loss(&model, &baseline_subset, false)?;

    let mut logs: Vec<EpochLog> = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(cfg.lr, epoch);
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        let mut shuffle_rng = rng::substream(cfg.train_seed, epoch as u64);
        rng::shuffle(&mut shuffle_rng, &mut order);

        let (mut sum_total, mut sum_mask, mut sum_rec) = (0.0, 0.0, 0.0);
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            for (_, p) in &params {
                p.zero_grad();
            }
            for &si in chunk {
                let sample = &train_samples[si];
                let out = model.forward(&sample.image, &sample.tokens, true)?;
                let breakdown = model.loss(&out, &sample.gt_mask, true)?;
                let total = breakdown.total.item();
                if !total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "epoch {epoch} batch {bi} sample {}: loss {total}",
                        sample.id
                    )));
                }
                sum_total += total;
                sum_mask += breakdown.l_mask.item();
                sum_rec += breakdown.l_rec.item();
                breakdown.total.backward_seeded(1.0 / chunk.len() as f64)?;
            }
            adam.step(&params, lr)?;
        }
        for (_, p) in &params {
            p.zero_grad();
        }

        let n = train_samples.len() as f64;
        let log = EpochLog {
            epoch: epoch + 1,
            lr,
            loss: sum_total / n,
            l_mask: sum_mask / n,
            l_rec: sum_rec / n,
            val_iou: mean_val_iou(&model, &val_samples)?,
        };
        progress(&log);
        logs.push(log);

        if cfg.ckpt_every > 0 && (epoch + 1) % cfg.ckpt_every == 0 {
            let path = cfg.out_dir.join(format!("ckpt_epoch{:03}.ckpt", epoch + 1));
            ckpt::save_model(&path, &model)?;
        }
        if let Some(target) = cfg.stop_at_val_iou {
            if logs.last().map(|l| l.val_iou >= target).unwrap_or(false) {
                break;
            }
        }
    }

    let probe = (logs.len() >= DIVERGENCE_WINDOW).then(|| DivergenceProbe {
        baseline_loss,
        diverged: logs[..DIVERGENCE_WINDOW].iter().all(|l| l.loss >= baseline_loss),
    });

    let report = evaluate_samples(&model, &val_samples)?;
    let final_ckpt = cfg.out_dir.join("final.ckpt");
    ckpt::save_model(&final_ckpt, &model)?;

    let metrics_file = cfg.out_dir.join("metrics.txt");
    let mut text = String::new();
    writeln!(text, "epochs_run={}", logs.len()).unwrap();
    for log in &logs {
        writeln!(text, "{}", log.render()).unwrap();
    }
    match &probe {
        Some(p) => writeln!(
            text,
            "divergence_probe={} baseline_loss={:.6}",
            if p.diverged { "diverged" } else { "converging" },
            p.baseline_loss
        )
        .unwrap(),
        None => writeln!(text, "divergence_probe=n/a baseline_loss={baseline_loss:.6}").unwrap(),
    }
    text.push_str(&report.render_text());
    fs::write(&metrics_file, &text).map_err(|e| Error::io(&metrics_file, e))?;

    Ok(TrainOutcome {
        logs,
        report,
        probe,
        final_ckpt,
        metrics_file,
    })
}
