//! End-to-end optimization of encoder, quantizers, decoders and entropy
//! networks.

mod adam;
mod config;
pub mod data;
mod step;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::Adam;
pub use config::{LossVariant, TrainConfig};
pub use data::{sample_batch, textures, write_textures, Dataset};
pub use step::{batch_loss, sample_loss, SampleLoss};

use crate::error::{MdcError, Result};
use crate::image::Image;
use crate::kv;
use crate::metrics::{self, LossBreakdown, ScaleWeights};
use crate::networks::{analyze, synthesize, Checkpoint, Description, EntropyModel, ModelParams, DOWNSAMPLE};
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "step,total,d_l1,d_mr,d_distance,d_reg,rate_a,rate_b,bpp,lr";
pub const VALIDATION_HEADER: &str =
    "step,side_ms_ssim,side_mr_ssim,central_ms_ssim,central_mr_ssim,side_distance_mr,est_bpp";
const EMA_DECAY: f64 = 0.99;

/// RNG for the batch of `step`; independent of how many steps ran before,
/// which makes resumed runs replay the same batches.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn ramp(step: u64, len: u64) -> f64 {
    if len == 0 {
        1.0
    } else {
        (step as f64 / len as f64).min(1.0)
    }
}

/// Parameters, optimizer state and progress of a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub adam: Adam,
    pub step: u64,
    /// exponential moving average of the total loss
    pub ema_loss: Option<f64>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(params.tensors());
        Ok(Trainer { cfg, params, adam, step: 0, ema_loss: None })
    }

    pub fn lr(&self) -> f64 {
        let base = match self.cfg.lr_decay_every {
            0 => self.cfg.lr,
            n => self.cfg.lr * 0.5f64.powi((self.step / n) as i32),
        };
        base * ramp(self.step + 1, self.cfg.warmup_steps)
    }

    /// Rate weight in effect at the current step.
    pub fn gamma(&self) -> f64 {
        self.cfg.gamma * ramp(self.step, self.cfg.rate_warmup_steps)
    }

    /// One optimizer step on a freshly sampled batch. The update is skipped
    /// (and an error returned) when the loss is not finite.
    pub fn train_step(&mut self, data: &Dataset) -> Result<LossBreakdown> {
        let mut rng = step_rng(self.cfg.seed, self.step);
        let batch = sample_batch(data, self.cfg.crop_size, self.cfg.batch_size, &mut rng)?;
        let mut lw = self.cfg.loss_weights()?;
        lw.gamma = self.gamma();
        let (breakdown, grads) = batch_loss(&self.params, &batch, &lw, self.cfg.loss_variant.weights())?;
        if !breakdown.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(MdcError::Diverged { step: self.step, detail: format!("{breakdown:?}") });
        }
        let lr = self.lr();
        self.adam.step(self.params.tensors_mut(), &grads, lr)?;
        self.step += 1;
        self.ema_loss = Some(match self.ema_loss {
            None => breakdown.total,
            Some(e) => EMA_DECAY * e + (1.0 - EMA_DECAY) * breakdown.total,
        });
        Ok(breakdown)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params.clone());
        ck.meta.push(("step".into(), self.step.to_string()));
        ck.meta.push(("adam_t".into(), self.adam.t.to_string()));
        if let Some(e) = self.ema_loss {
            ck.meta.push(("ema_loss".into(), format!("{e:?}")));
        }
        for (k, v) in self.cfg.to_pairs() {
            ck.meta.push((format!("train.{k}"), v));
        }
        for (i, name) in self.params.names().iter().enumerate() {
            ck.extra.push((format!("adam.m/{name}"), self.adam.m[i].clone()));
            ck.extra.push((format!("adam.v/{name}"), self.adam.v[i].clone()));
        }
        ck
    }

    /// Continues from `ck` under `cfg`, whose model section must match.
    pub fn from_checkpoint(ck: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if ck.params.config() != &cfg.model {
            return Err(MdcError::Config("checkpoint model configuration differs from the run's".into()));
        }
        let num = |key: &str| -> Result<u64> {
            kv::parse_value(key, ck.meta(key).ok_or_else(|| MdcError::Checkpoint(format!("missing {key}")))?)
        };
        let step = num("step")?;
        let t = num("adam_t")?;
        let ema_loss = ck.meta("ema_loss").map(|v| kv::parse_value("ema_loss", v)).transpose()?;
        let moment = |kind: &str, name: &str, shape: &Tensor| -> Result<Tensor> {
            let t = ck
                .extra(&format!("adam.{kind}/{name}"))
                .ok_or_else(|| MdcError::Checkpoint(format!("missing optimizer state for {name}")))?;
            if t.shape() != shape.shape() {
                return Err(MdcError::Checkpoint(format!("optimizer state for {name} has the wrong shape")));
            }
            Ok(t.clone())
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, p) in ck.params.names().iter().zip(ck.params.tensors()) {
            m.push(moment("m", name, p)?);
            v.push(moment("v", name, p)?);
        }
        Ok(Trainer { cfg, params: ck.params, adam: Adam { m, v, t }, step, ema_loss })
    }
}

pub fn log_row(step: u64, b: &LossBreakdown, lr: f64) -> String {
    format!(
        "{step},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{lr:?}",
        b.total,
        b.d_l1,
        b.d_mr,
        b.d_distance,
        b.d_reg,
        b.rate_a,
        b.rate_b,
        b.rate_a + b.rate_b
    )
}

/// Held-out quality of the current model.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Validation {
    pub side_ms_ssim: f64,
    pub side_mr_ssim: f64,
    pub central_ms_ssim: f64,
    pub central_mr_ssim: f64,
    /// `f_MR(Y^a, Y^b)`, lower means more diverse side decodes
    pub side_distance_mr: f64,
    /// estimated bits per pixel of both descriptions
    pub est_bpp: f64,
}

/// Reflect-pads to a multiple of 8, reconstructs `(Y^a, Y^b, Y)` and crops
/// back; also returns the estimated code length of both descriptions.
pub fn reconstruct(p: &ModelParams, x: &Image) -> Result<([Image; 3], f64)> {
    let (h, w) = (x.height(), x.width());
    let padded = x.reflect_pad(h.next_multiple_of(DOWNSAMPLE), w.next_multiple_of(DOWNSAMPLE))?;
    let an = analyze(p, &padded)?;
    let [a, b] = &an.indices;
    let crop = |img: Image| img.crop(0, 0, h, w);
    let ys = [
        crop(synthesize(p, Some(a), None)?)?,
        crop(synthesize(p, None, Some(b))?)?,
        crop(synthesize(p, Some(a), Some(b))?)?,
    ];
    let bits = EntropyModel::from_params(p, Description::A).rate_bits(a)?
        + EntropyModel::from_params(p, Description::B).rate_bits(b)?;
    Ok((ys, bits))
}

pub fn validate(p: &ModelParams, data: &Dataset) -> Result<Validation> {
    let n = data.len() as f64;
    let mut v = Validation::default();
    let (ms, mr) = (ScaleWeights::ms(), ScaleWeights::mr());
    for x in &data.images {
        let ([ya, yb, yc], bits) = reconstruct(p, x)?;
        v.side_ms_ssim += 0.5 * (metrics::ms_ssim(x, &ya)? + metrics::ms_ssim(x, &yb)?) / n;
        v.side_mr_ssim += 0.5 * (metrics::mr_ssim(x, &ya, &mr)? + metrics::mr_ssim(x, &yb, &mr)?) / n;
        v.central_ms_ssim += metrics::multiscale_ssim(x, &yc, &ms)? / n;
        v.central_mr_ssim += metrics::mr_ssim(x, &yc, &mr)? / n;
        v.side_distance_mr += metrics::mr_ssim(&ya, &yb, &mr)? / n;
        v.est_bpp += bits / x.pixels() as f64 / n;
    }
    Ok(v)
}

/// Files a run writes into its output directory.
pub struct RunPaths {
    pub log: PathBuf,
    pub validation: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths {
            log: dir.join("train_log.csv"),
            validation: dir.join("validation.csv"),
            checkpoint: dir.join("checkpoint.mdck"),
        }
    }
}

/// Keeps the header and rows with step ≤ `last_step`, so a run resumed from
/// an older checkpoint does not repeat rows.
fn trim_log(path: &Path, header: &str, last_step: u64) -> Result<File> {
    let kept: Vec<String> = match std::fs::read_to_string(path) {
        Ok(text) => text
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= last_step))
            .map(str::to_string)
            .collect(),
        Err(_) => Vec::new(),
    };
    let mut f = File::create(path)?;
    writeln!(f, "{header}")?;
    for l in kept {
        writeln!(f, "{l}")?;
    }
    Ok(f)
}

/// Trains for `cfg.steps` steps, logging every step to `train_log.csv`.
/// With `resume`, an existing `checkpoint.mdck` in `out_dir` is continued.
pub fn train_loop(cfg: TrainConfig, data: &Dataset, val: Option<&Dataset>, out_dir: impl AsRef<Path>, resume: bool) -> Result<Trainer> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let paths = RunPaths::new(out_dir);
    let mut trainer = if resume && paths.checkpoint.exists() {
        let t = Trainer::from_checkpoint(Checkpoint::load(&paths.checkpoint)?, cfg)?;
        log::info!("resuming at step {}", t.step);
        t
    } else {
        Trainer::new(cfg)?
    };
    let mut log = trim_log(&paths.log, LOG_HEADER, trainer.step)?;
    let mut vlog = if val.is_some() && trainer.cfg.validate_every > 0 {
        Some(trim_log(&paths.validation, VALIDATION_HEADER, trainer.step)?)
    } else {
        None
    };
    while trainer.step < trainer.cfg.steps {
        let lr = trainer.lr();
        let b = match trainer.train_step(data) {
            Ok(b) => b,
            Err(e) => {
                log::error!("step {} failed: {e}", trainer.step);
                return Err(e);
            }
        };
        writeln!(log, "{}", log_row(trainer.step, &b, lr))?;
        if trainer.step % 10 == 0 {
            log::info!("step {} total {:.4} bpp {:.4}", trainer.step, b.total, b.rate_a + b.rate_b);
        }
        if let (Some(val), Some(vlog)) = (val, vlog.as_mut()) {
            if trainer.step % trainer.cfg.validate_every == 0 {
                let v = validate(&trainer.params, val)?;
                writeln!(
                    vlog,
                    "{},{:?},{:?},{:?},{:?},{:?},{:?}",
                    trainer.step,
                    v.side_ms_ssim,
                    v.side_mr_ssim,
                    v.central_ms_ssim,
                    v.central_mr_ssim,
                    v.side_distance_mr,
                    v.est_bpp
                )?;
            }
        }
        if trainer.cfg.checkpoint_every > 0 && trainer.step % trainer.cfg.checkpoint_every == 0 {
            log.flush()?;
            trainer.to_checkpoint().save(&paths.checkpoint)?;
        }
    }
    log.flush()?;
    trainer.to_checkpoint().save(&paths.checkpoint)?;
    Ok(trainer)
}

/// Rows of a training log as `(step, [total, d_l1, ..., lr])`.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<(u64, Vec<f64>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let mut it = line.split(',');
        let step = kv::parse_value("step", it.next().unwrap_or(""))?;
        let vals = it.map(|v| kv::parse_value("log value", v)).collect::<Result<Vec<f64>>>()?;
        rows.push((step, vals));
    }
    Ok(rows)
}

/// Mean of `values[end - window .. end]` (1-based `end`).
pub fn moving_average(values: &[f64], end: usize, window: usize) -> f64 {
    let end = end.min(values.len());
    let start = end.saturating_sub(window);
    values[start..end].iter().sum::<f64>() / (end - start).max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ModelConfig;

    fn quick() -> TrainConfig {
        TrainConfig {
            crop_size: 16,
            batch_size: 2,
            steps: 4,
            seed: 3,
            model: ModelConfig {
                base_channels: 4,
                feature_channels: 2,
                levels: 3,
                resconv_per_block: 1,
                entropy_channels: 4,
                ..Default::default()
            },
            ..TrainConfig::toy()
        }
    }

    fn data() -> Dataset {
        Dataset::from_images(textures(6, 24, 24, 2)).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut t = Trainer::new(TrainConfig { lr: 0.0, ..quick() }).unwrap();
        let before = t.params.clone();
        t.train_step(&data()).unwrap();
        assert_eq!(t.params, before);
        assert_eq!(t.step, 1);
    }

    #[test]
    fn resume_replays_the_uninterrupted_run() {
        let d = data();
        let full_dir = tempfile::tempdir().unwrap();
        let full = train_loop(quick(), &d, None, full_dir.path(), false).unwrap();

        let split_dir = tempfile::tempdir().unwrap();
        train_loop(TrainConfig { steps: 2, ..quick() }, &d, None, split_dir.path(), false).unwrap();
        let resumed = train_loop(quick(), &d, None, split_dir.path(), true).unwrap();

        assert_eq!(resumed.params, full.params);
        assert_eq!(resumed.adam, full.adam);
        let a = std::fs::read_to_string(RunPaths::new(full_dir.path()).log).unwrap();
        let b = std::fs::read_to_string(RunPaths::new(split_dir.path()).log).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 5);
        let rows = read_log(RunPaths::new(full_dir.path()).log).unwrap();
        let r = &rows[0].1;
        assert_eq!(r[7], r[5] + r[6], "bpp column is the sum of both rates");
    }

    #[test]
    fn checkpoint_restores_trainer_state() {
        let mut t = Trainer::new(quick()).unwrap();
        t.train_step(&data()).unwrap();
        let back = Trainer::from_checkpoint(Checkpoint::from_bytes(&t.to_checkpoint().to_bytes().unwrap()).unwrap(), quick()).unwrap();
        assert_eq!(back.params, t.params);
        assert_eq!(back.adam, t.adam);
        assert_eq!(back.step, 1);
        assert_eq!(back.ema_loss, t.ema_loss);
        let other = TrainConfig { model: ModelConfig { levels: 4, ..quick().model }, ..quick() };
        assert!(Trainer::from_checkpoint(t.to_checkpoint(), other).is_err());
    }

    #[test]
    fn validation_reports_bounded_metrics() {
        let t = Trainer::new(quick()).unwrap();
        let val = Dataset::from_images(textures(2, 20, 28, 9)).unwrap();
        let v = validate(&t.params, &val).unwrap();
        for m in [v.side_ms_ssim, v.side_mr_ssim, v.central_ms_ssim, v.central_mr_ssim, v.side_distance_mr] {
            assert!((-1.0..=1.0).contains(&m), "{v:?}");
        }
        assert!(v.est_bpp > 0.0);
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let cfg = quick();
        let mut p = ModelParams::init(cfg.model.clone(), 1).unwrap();
        p.get_mut("enc.z.w").scale_assign(400.0);
        let imgs = textures(4, 16, 16, 12);
        let (_, grads) = batch_loss(&p, &imgs, &cfg.loss_weights().unwrap(), ScaleWeights::mr()).unwrap();
        for (name, g) in p.names().iter().zip(&grads) {
            assert!(g.sum_sq() > 0.0, "{name} received no gradient");
        }
    }
}
