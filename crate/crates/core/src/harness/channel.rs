//! Independent-erasure channel over the two descriptions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Codec, DecodeMode};
use crate::error::{MdcError, Result};
use crate::image::Image;
use crate::metrics::{mr_ssim, ms_ssim, ScaleWeights};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelConfig {
    pub p_loss_a: f64,
    pub p_loss_b: f64,
    pub trials: u64,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        for p in [self.p_loss_a, self.p_loss_b] {
            if !(0.0..=1.0).contains(&p) {
                return Err(MdcError::invalid(format!("loss probability {p} outside [0, 1]")));
            }
        }
        if self.trials == 0 {
            return Err(MdcError::invalid("at least one trial is required"));
        }
        Ok(())
    }

    /// Probability of each reception pattern, in [`DecodeMode::index`] order.
    pub fn mode_probabilities(&self) -> [f64; 4] {
        let (pa, pb) = (self.p_loss_a, self.p_loss_b);
        [(1.0 - pa) * (1.0 - pb), (1.0 - pa) * pb, pa * (1.0 - pb), pa * pb]
    }
}

/// Running mean and standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ModeStats {
    pub count: u64,
    sum: f64,
    sum_sq: f64,
}

impl ModeStats {
    fn push(&mut self, v: f64) {
        self.count += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        let n = self.count as f64;
        let var = ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelReport {
    pub config: ChannelConfig,
    /// Per-mode f_MR and MS-SSIM, in [`DecodeMode::index`] order.
    pub mr: [ModeStats; 4],
    pub ms: [ModeStats; 4],
    /// Per-trial distortion `1 − f_MR` over all trials.
    pub distortion: ModeStats,
    /// `1 − f_MR` of each reception pattern's reconstruction.
    pub mode_distortion: [f64; 4],
}

impl ChannelReport {
    pub fn count(&self, mode: DecodeMode) -> u64 {
        self.mr[mode.index()].count
    }

    pub fn frequency(&self, mode: DecodeMode) -> f64 {
        self.count(mode) as f64 / self.config.trials as f64
    }

    /// Closed-form mean distortion for this channel.
    pub fn expected(&self) -> f64 {
        let [c, a, b, n] = self.mode_distortion;
        expected_distortion(c, a, b, n, self.config.p_loss_a, self.config.p_loss_b)
            .expect("config was validated")
    }
}

/// Mean distortion when description A is lost with probability `p_a` and B
/// with `p_b`, independently.
pub fn expected_distortion(d_central: f64, d_side_a: f64, d_side_b: f64, d_none: f64, p_a: f64, p_b: f64) -> Result<f64> {
    let cfg = ChannelConfig { p_loss_a: p_a, p_loss_b: p_b, trials: 1, seed: 0 };
    cfg.validate()?;
    let [wc, wa, wb, wn] = cfg.mode_probabilities();
    Ok(wc * d_central + wa * d_side_a + wb * d_side_b + wn * d_none)
}

/// Monte-Carlo run of the erasure channel. The model is deterministic, so
/// the four possible reconstructions are decoded once and reused.
pub fn simulate_channel(codec: &Codec, x: &Image, ch: &ChannelConfig) -> Result<ChannelReport> {
    ch.validate()?;
    let recon = codec.reconstruct_all(x)?;
    let mr_w = ScaleWeights::mr();
    let mut scores = [(0.0, 0.0); 4];
    for (s, y) in scores.iter_mut().zip(&recon) {
        *s = (mr_ssim(x, y, &mr_w)?, ms_ssim(x, y)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ch.seed);
    let mut mr = [ModeStats::default(); 4];
    let mut ms = [ModeStats::default(); 4];
    let mut distortion = ModeStats::default();
    for _ in 0..ch.trials {
        let lost_a = rng.gen::<f64>() < ch.p_loss_a;
        let lost_b = rng.gen::<f64>() < ch.p_loss_b;
        let mode = match (lost_a, lost_b) {
            (false, false) => DecodeMode::Central,
            (false, true) => DecodeMode::SideA,
            (true, false) => DecodeMode::SideB,
            (true, true) => DecodeMode::None,
        };
        let (f_mr, f_ms) = scores[mode.index()];
        mr[mode.index()].push(f_mr);
        ms[mode.index()].push(f_ms);
        distortion.push(1.0 - f_mr);
    }
    Ok(ChannelReport { config: *ch, mr, ms, distortion, mode_distortion: scores.map(|(m, _)| 1.0 - m) })
}
