//! Image-level encode/decode, the erasure-channel simulator and dataset
//! evaluation.

mod channel;
mod eval;
mod plot;

use std::path::Path;

pub use channel::{expected_distortion, simulate_channel, ChannelConfig, ChannelReport, ModeStats};
pub use eval::{evaluate_dataset, evaluate_image, read_rd_csv, write_rd_csv, RdPoint, RD_HEADER};
pub use plot::plot_rd;

use crate::bitstream::{self, CodingMode, DescriptionHeader, EncodedDescription};
use crate::error::{MdcError, Result};
use crate::image::Image;
use crate::networks::{analyze, synthesize, Checkpoint, Description, EntropyModel, ModelParams, DOWNSAMPLE};

/// Gray level shown when no description arrives.
pub const FALLBACK_GRAY: f64 = 0.5;

/// How a reconstruction was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecodeMode {
    Central,
    SideA,
    SideB,
    None,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 4] = [DecodeMode::Central, DecodeMode::SideA, DecodeMode::SideB, DecodeMode::None];

    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::Central => "central",
            DecodeMode::SideA => "side_a",
            DecodeMode::SideB => "side_b",
            DecodeMode::None => "none",
        }
    }

    pub fn index(self) -> usize {
        match self {
            DecodeMode::Central => 0,
            DecodeMode::SideA => 1,
            DecodeMode::SideB => 2,
            DecodeMode::None => 3,
        }
    }
}

/// A frozen model ready to code images.
pub struct Codec {
    params: ModelParams,
    entropy: [EntropyModel; 2],
}

impl Codec {
    pub fn new(params: ModelParams) -> Self {
        let entropy =
            [EntropyModel::from_params(&params, Description::A), EntropyModel::from_params(&params, Description::B)];
        Codec { params, entropy }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(Checkpoint::load(path)?.params))
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn entropy_model(&self, which: Description) -> &EntropyModel {
        &self.entropy[which.id() as usize]
    }

    fn padded(x: &Image) -> Result<Image> {
        if x.channels() != 3 {
            return Err(MdcError::shape(format!("expected an RGB image, got {} channels", x.channels())));
        }
        if x.height() == 0 || x.width() == 0 || x.height() > u16::MAX as usize || x.width() > u16::MAX as usize {
            return Err(MdcError::ImageTooSmall(format!("{}x{} cannot be coded", x.height(), x.width())));
        }
        x.reflect_pad(x.height().next_multiple_of(DOWNSAMPLE), x.width().next_multiple_of(DOWNSAMPLE))
    }

    /// Both descriptions of `x`. The image is reflect-padded to a multiple
    /// of 8; the header keeps the original size.
    pub fn encode_image(&self, x: &Image, mode: CodingMode) -> Result<[EncodedDescription; 2]> {
        let an = analyze(&self.params, &Self::padded(x)?)?;
        let cfg = self.params.config();
        let mut out = Vec::with_capacity(2);
        for (which, v) in [Description::A, Description::B].into_iter().zip(&an.indices) {
            let model = self.entropy_model(which);
            let header =
                DescriptionHeader::for_image(which, x.height(), x.width(), cfg.feature_channels, cfg.levels, mode, model.checksum())?;
            out.push(bitstream::encode(v, model, header)?);
        }
        Ok(out.try_into().expect("two descriptions"))
    }

    /// Reconstructs from whatever arrived. With nothing received the result
    /// is a uniform gray image of `fallback_dims` (height, width).
    pub fn decode_any(
        &self,
        a: Option<&EncodedDescription>,
        b: Option<&EncodedDescription>,
        fallback_dims: Option<(usize, usize)>,
    ) -> Result<(Image, DecodeMode)> {
        for (e, want) in [(a, Description::A), (b, Description::B)] {
            if let Some(e) = e {
                if e.header.description != want {
                    return Err(MdcError::HeaderMismatch(format!(
                        "expected description {:?}, got {:?}",
                        want, e.header.description
                    )));
                }
            }
        }
        if let (Some(a), Some(b)) = (a, b) {
            let (ha, hb) = (&a.header, &b.header);
            if (ha.orig_h, ha.orig_w, ha.m, ha.n, ha.k, ha.l) != (hb.orig_h, hb.orig_w, hb.m, hb.n, hb.k, hb.l) {
                return Err(MdcError::HeaderMismatch(format!("{ha:?} vs {hb:?}")));
            }
        }
        let decode = |e: &EncodedDescription| bitstream::decode(e, self.entropy_model(e.header.description));
        let (mode, header, va, vb) = match (a, b) {
            (Some(a), Some(b)) => (DecodeMode::Central, a.header, Some(decode(a)?), Some(decode(b)?)),
            (Some(a), None) => (DecodeMode::SideA, a.header, Some(decode(a)?), None),
            (None, Some(b)) => (DecodeMode::SideB, b.header, None, Some(decode(b)?)),
            (None, None) => {
                let (h, w) = fallback_dims
                    .ok_or_else(|| MdcError::invalid("no description received and no fallback size given"))?;
                return Ok((Image::filled(3, h, w, FALLBACK_GRAY), DecodeMode::None));
            }
        };
        let y = synthesize(&self.params, va.as_ref(), vb.as_ref())?;
        Ok((y.crop(0, 0, header.orig_h as usize, header.orig_w as usize)?, mode))
    }

    /// Reconstructions for every reception pattern, indexed by
    /// [`DecodeMode::index`].
    pub fn reconstruct_all(&self, x: &Image) -> Result<[Image; 4]> {
        let an = analyze(&self.params, &Self::padded(x)?)?;
        let [a, b] = &an.indices;
        let crop = |y: Image| y.crop(0, 0, x.height(), x.width());
        Ok([
            crop(synthesize(&self.params, Some(a), Some(b))?)?,
            crop(synthesize(&self.params, Some(a), None)?)?,
            crop(synthesize(&self.params, None, Some(b))?)?,
            Image::filled(3, x.height(), x.width(), FALLBACK_GRAY),
        ])
    }
}
