//! Description container (`.mdcd`) with raw and arithmetic-coded payloads.
//!
//! Header, all multi-byte fields big-endian:
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 4 | magic `MDC1` |
//! | 4  | 1 | version (1) |
//! | 5  | 1 | description id (0 = A, 1 = B) |
//! | 6  | 2 | original height |
//! | 8  | 2 | original width |
//! | 10 | 2 | m |
//! | 12 | 2 | n |
//! | 14 | 2 | k |
//! | 16 | 2 | l |
//! | 18 | 1 | coding mode (0 = raw, 1 = arithmetic) |
//! | 19 | 4 | model checksum (CRC-32 of the entropy network and centers) |
//!
//! The payload follows directly. Raw payloads pack `ceil(log2 l)` bits per
//! symbol, MSB first, in raster order `(m, n, k)`.

pub mod range;

use std::path::Path;

use crate::error::{MdcError, Result};
use crate::grad::kernels::VolumeDims;
use crate::networks::{softmax_into, Description, EntropyModel, DOWNSAMPLE};
use crate::quant::IndexTensor;
use range::{quantize_frequencies, Decoder, Encoder, FREQ_TOTAL};

pub const MAGIC: &[u8; 4] = b"MDC1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 23;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodingMode {
    Raw,
    Arithmetic,
}

impl CodingMode {
    fn id(self) -> u8 {
        match self {
            CodingMode::Raw => 0,
            CodingMode::Arithmetic => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DescriptionHeader {
    pub description: Description,
    pub orig_h: u16,
    pub orig_w: u16,
    pub m: u16,
    pub n: u16,
    pub k: u16,
    pub l: u16,
    pub mode: CodingMode,
    pub model_checksum: u32,
}

impl DescriptionHeader {
    /// Header for an image of `orig_h × orig_w` pixels; `m`, `n` follow from
    /// the padding rule.
    pub fn for_image(
        description: Description,
        orig_h: usize,
        orig_w: usize,
        k: usize,
        l: usize,
        mode: CodingMode,
        model_checksum: u32,
    ) -> Result<Self> {
        let field = |name: &str, v: usize| {
            u16::try_from(v).map_err(|_| MdcError::invalid(format!("{name} = {v} does not fit the header")))
        };
        let h = DescriptionHeader {
            description,
            orig_h: field("height", orig_h)?,
            orig_w: field("width", orig_w)?,
            m: field("m", orig_h.div_ceil(DOWNSAMPLE))?,
            n: field("n", orig_w.div_ceil(DOWNSAMPLE))?,
            k: field("k", k)?,
            l: field("l", l)?,
            mode,
            model_checksum,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MdcError::corrupt(m));
        if self.orig_h == 0 || self.orig_w == 0 {
            return bad("zero image dimension".into());
        }
        if self.m as usize != (self.orig_h as usize).div_ceil(DOWNSAMPLE)
            || self.n as usize != (self.orig_w as usize).div_ceil(DOWNSAMPLE)
        {
            return bad(format!(
                "feature dims {}x{} inconsistent with image {}x{}",
                self.m, self.n, self.orig_h, self.orig_w
            ));
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.l < 2 {
            return bad(format!("l = {} (needs at least 2)", self.l));
        }
        Ok(())
    }

    pub fn symbols(&self) -> usize {
        self.m as usize * self.n as usize * self.k as usize
    }

    pub fn bits_per_symbol(&self) -> usize {
        bits_per_symbol(self.l as usize)
    }

    pub fn raw_payload_len(&self) -> usize {
        (self.symbols() * self.bits_per_symbol()).div_ceil(8)
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(MAGIC);
        b[4] = VERSION;
        b[5] = self.description.id();
        for (i, v) in [self.orig_h, self.orig_w, self.m, self.n, self.k, self.l].iter().enumerate() {
            b[6 + 2 * i..8 + 2 * i].copy_from_slice(&v.to_be_bytes());
        }
        b[18] = self.mode.id();
        b[19..23].copy_from_slice(&self.model_checksum.to_be_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(MdcError::corrupt(format!("header needs {HEADER_LEN} bytes, got {}", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(MdcError::corrupt("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(MdcError::corrupt(format!("unsupported version {}", bytes[4])));
        }
        let description =
            Description::from_id(bytes[5]).ok_or_else(|| MdcError::corrupt(format!("bad description id {}", bytes[5])))?;
        let u16_at = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let mode = match bytes[18] {
            0 => CodingMode::Raw,
            1 => CodingMode::Arithmetic,
            other => return Err(MdcError::corrupt(format!("bad coding mode {other}"))),
        };
        let h = DescriptionHeader {
            description,
            orig_h: u16_at(6),
            orig_w: u16_at(8),
            m: u16_at(10),
            n: u16_at(12),
            k: u16_at(14),
            l: u16_at(16),
            mode,
            model_checksum: u32::from_be_bytes(bytes[19..23].try_into().expect("4 bytes")),
        };
        h.validate()?;
        Ok(h)
    }

    fn check_indices(&self, v: &IndexTensor) -> Result<()> {
        let (m, n, k) = v.dims();
        if (m, n, k) != (self.m as usize, self.n as usize, self.k as usize) || v.levels() != self.l as usize {
            return Err(MdcError::shape(format!(
                "indices {m}x{n}x{k} (L={}) do not match header {}x{}x{} (L={})",
                v.levels(),
                self.m,
                self.n,
                self.k,
                self.l
            )));
        }
        Ok(())
    }
}

/// `ceil(log2 l)`.
pub fn bits_per_symbol(l: usize) -> usize {
    (usize::BITS - (l.max(2) - 1).leading_zeros()) as usize
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedDescription {
    pub header: DescriptionHeader,
    pub payload: Vec<u8>,
}

impl EncodedDescription {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.to_bytes().to_vec();
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = DescriptionHeader::from_bytes(bytes)?;
        let payload = bytes[HEADER_LEN..].to_vec();
        if header.mode == CodingMode::Raw && payload.len() != header.raw_payload_len() {
            return Err(MdcError::corrupt(format!(
                "raw payload has {} bytes, header implies {}",
                payload.len(),
                header.raw_payload_len()
            )));
        }
        Ok(EncodedDescription { header, payload })
    }

    pub fn payload_bits(&self) -> usize {
        self.payload.len() * 8
    }

    pub fn total_bits(&self) -> usize {
        (HEADER_LEN + self.payload.len()) * 8
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn serialize_raw(v: &IndexTensor, header: DescriptionHeader) -> Result<EncodedDescription> {
    header.validate()?;
    header.check_indices(v)?;
    let header = DescriptionHeader { mode: CodingMode::Raw, ..header };
    let bps = header.bits_per_symbol();
    let mut payload = vec![0u8; header.raw_payload_len()];
    let mut bit = 0usize;
    for &s in v.data() {
        for b in (0..bps).rev() {
            if (s >> b) & 1 == 1 {
                payload[bit / 8] |= 0x80 >> (bit % 8);
            }
            bit += 1;
        }
    }
    Ok(EncodedDescription { header, payload })
}

pub fn deserialize_raw(e: &EncodedDescription) -> Result<IndexTensor> {
    let h = &e.header;
    h.validate()?;
    if h.mode != CodingMode::Raw {
        return Err(MdcError::corrupt("not a raw description"));
    }
    if e.payload.len() != h.raw_payload_len() {
        return Err(MdcError::corrupt(format!(
            "raw payload has {} bytes, expected {}",
            e.payload.len(),
            h.raw_payload_len()
        )));
    }
    let bps = h.bits_per_symbol();
    let mut data = Vec::with_capacity(h.symbols());
    let mut bit = 0usize;
    for _ in 0..h.symbols() {
        let mut s = 0u16;
        for _ in 0..bps {
            s = (s << 1) | ((e.payload[bit / 8] >> (7 - bit % 8)) & 1) as u16;
            bit += 1;
        }
        data.push(s);
    }
    IndexTensor::new(h.m as usize, h.n as usize, h.k as usize, h.l as usize, data)
}

fn check_model(h: &DescriptionHeader, model: &EntropyModel) -> Result<()> {
    if model.levels() != h.l as usize {
        return Err(MdcError::ModelMismatch { stream: h.model_checksum, model: model.checksum() });
    }
    if model.checksum() != h.model_checksum {
        return Err(MdcError::ModelMismatch { stream: h.model_checksum, model: model.checksum() });
    }
    Ok(())
}

/// Arithmetic-codes `v` with the distributions predicted by `model`.
pub fn ac_encode(v: &IndexTensor, model: &EntropyModel, header: DescriptionHeader) -> Result<EncodedDescription> {
    header.validate()?;
    header.check_indices(v)?;
    let header = DescriptionHeader { mode: CodingMode::Arithmetic, model_checksum: model.checksum(), ..header };
    check_model(&header, model)?;
    let l = model.levels();
    let logits = model.logits(v)?;
    let mut probs = vec![0.0; l];
    let mut freqs = vec![0u32; l];
    let mut enc = Encoder::new();
    for (p, &s) in v.data().iter().enumerate() {
        softmax_into(&logits[p * l..(p + 1) * l], &mut probs);
        quantize_frequencies(&probs, &mut freqs);
        let start: u32 = freqs[..s as usize].iter().sum();
        enc.encode(start, freqs[s as usize]);
    }
    Ok(EncodedDescription { header, payload: enc.finish() })
}

/// Decodes symbol by symbol, re-running the causal model on the prefix.
pub fn ac_decode(e: &EncodedDescription, model: &EntropyModel) -> Result<IndexTensor> {
    let h = &e.header;
    h.validate()?;
    if h.mode != CodingMode::Arithmetic {
        return Err(MdcError::corrupt("not an arithmetic-coded description"));
    }
    check_model(h, model)?;
    let l = model.levels();
    let dims = VolumeDims { m: h.m as usize, n: h.n as usize, k: h.k as usize };
    let mut ctx = model.context(dims);
    let mut dec = Decoder::new(&e.payload);
    let mut probs = vec![0.0; l];
    let mut freqs = vec![0u32; l];
    let mut data = Vec::with_capacity(dims.positions());
    for p in 0..dims.positions() {
        softmax_into(ctx.logits_at(p), &mut probs);
        quantize_frequencies(&probs, &mut freqs);
        let target = dec.target()?;
        let mut start = 0u32;
        let mut s = 0usize;
        while start + freqs[s] <= target {
            start += freqs[s];
            s += 1;
        }
        debug_assert!(start + freqs[s] <= FREQ_TOTAL);
        dec.consume(start, freqs[s]);
        ctx.set_symbol(p, s);
        data.push(s as u16);
    }
    IndexTensor::new(dims.m, dims.n, dims.k, l, data)
}

/// Encodes in the requested mode.
pub fn encode(v: &IndexTensor, model: &EntropyModel, header: DescriptionHeader) -> Result<EncodedDescription> {
    match header.mode {
        CodingMode::Raw => serialize_raw(v, DescriptionHeader { model_checksum: model.checksum(), ..header }),
        CodingMode::Arithmetic => ac_encode(v, model, header),
    }
}

/// Decodes either mode; the model checksum is verified for both.
pub fn decode(e: &EncodedDescription, model: &EntropyModel) -> Result<IndexTensor> {
    match e.header.mode {
        CodingMode::Raw => {
            check_model(&e.header, model)?;
            deserialize_raw(e)
        }
        CodingMode::Arithmetic => ac_decode(e, model),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{ModelConfig, ModelParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(levels: usize) -> ModelParams {
        let cfg = ModelConfig {
            base_channels: 4,
            feature_channels: 2,
            levels,
            resconv_per_block: 1,
            entropy_channels: 8,
            ..Default::default()
        };
        ModelParams::init(cfg, 21).unwrap()
    }

    fn random_indices(m: usize, n: usize, k: usize, l: usize, rng: &mut ChaCha8Rng) -> IndexTensor {
        IndexTensor::new(m, n, k, l, (0..m * n * k).map(|_| rng.gen_range(0..l) as u16).collect()).unwrap()
    }

    fn header(h: usize, w: usize, k: usize, l: usize, mode: CodingMode) -> DescriptionHeader {
        DescriptionHeader::for_image(Description::A, h, w, k, l, mode, 0).unwrap()
    }

    #[test]
    fn raw_size_follows_the_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_indices(4, 4, 2, 8, &mut rng);
        let e = serialize_raw(&v, header(32, 32, 2, 8, CodingMode::Raw)).unwrap();
        assert_eq!(e.payload.len(), 12);
        assert_eq!(e.to_bytes().len(), HEADER_LEN + 12);
        assert_eq!(deserialize_raw(&e).unwrap(), v);
        assert_eq!(bits_per_symbol(2), 1);
        assert_eq!(bits_per_symbol(3), 2);
        assert_eq!(bits_per_symbol(8), 3);
        assert_eq!(bits_per_symbol(9), 4);
    }

    #[test]
    fn raw_packing_is_msb_first() {
        let v = IndexTensor::new(1, 1, 3, 8, vec![5, 0, 7]).unwrap();
        let e = serialize_raw(&v, header(8, 8, 3, 8, CodingMode::Raw)).unwrap();
        // 101 000 111 -> 1010 0011 1000 0000
        assert_eq!(e.payload, vec![0b1010_0011, 0b1000_0000]);
    }

    #[test]
    fn header_layout_and_rejections() {
        let h = DescriptionHeader::for_image(Description::B, 100, 100, 8, 8, CodingMode::Arithmetic, 0xDEADBEEF).unwrap();
        assert_eq!((h.m, h.n), (13, 13));
        let b = h.to_bytes();
        assert_eq!(&b[..6], b"MDC1\x01\x01");
        assert_eq!(&b[6..10], &[0, 100, 0, 100]);
        assert_eq!(b[18], 1);
        assert_eq!(&b[19..], &[0xDE, 0xAD, 0xBE, 0xEF]);
        assert_eq!(DescriptionHeader::from_bytes(&b).unwrap(), h);

        let mut bad = b;
        bad[0] = b'X';
        assert!(DescriptionHeader::from_bytes(&bad).is_err());
        let mut bad = b;
        bad[4] = 2;
        assert!(DescriptionHeader::from_bytes(&bad).is_err());
        let mut bad = b;
        bad[11] = 12; // m no longer matches the image height
        assert!(DescriptionHeader::from_bytes(&bad).is_err());
        let mut bad = b;
        bad[17] = 1; // l = 1
        assert!(DescriptionHeader::from_bytes(&bad).is_err());
        let mut bad = b;
        bad[18] = 7;
        assert!(DescriptionHeader::from_bytes(&bad).is_err());
        assert!(DescriptionHeader::from_bytes(&b[..10]).is_err());
    }

    #[test]
    fn raw_rejects_truncation_and_out_of_range_symbols() {
        let v = IndexTensor::new(1, 1, 2, 5, vec![4, 1]).unwrap();
        let e = serialize_raw(&v, header(8, 8, 2, 5, CodingMode::Raw)).unwrap();
        let bytes = e.to_bytes();
        assert!(EncodedDescription::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut forged = e.clone();
        forged.payload[0] = 0xFF; // first symbol becomes 7 >= 5
        assert!(matches!(deserialize_raw(&forged), Err(MdcError::CorruptDescription(_))));
    }

    #[test]
    fn uniform_model_codes_at_log2_l() {
        let mut p = params(8);
        p.get_mut("ent_a.l6.w").data_mut().fill(0.0);
        let model = EntropyModel::from_params(&p, Description::A);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_indices(4, 4, 2, 8, &mut rng);
        let e = ac_encode(&v, &model, header(32, 32, 2, 8, CodingMode::Arithmetic)).unwrap();
        assert!(e.payload_bits() <= 96 + 32, "{} bits", e.payload_bits());
        assert!(e.payload_bits() >= 88);
        assert_eq!(ac_decode(&e, &model).unwrap(), v);
    }

    #[test]
    fn confident_model_beats_raw() {
        let mut p = params(8);
        p.get_mut("ent_a.l6.w").data_mut().fill(0.0);
        p.get_mut("ent_a.l6.b").data_mut()[2] = 40.0;
        let model = EntropyModel::from_params(&p, Description::A);
        let v = IndexTensor::new(8, 8, 2, 8, vec![2; 128]).unwrap();
        let e = ac_encode(&v, &model, header(64, 64, 2, 8, CodingMode::Arithmetic)).unwrap();
        let raw = serialize_raw(&v, header(64, 64, 2, 8, CodingMode::Raw)).unwrap();
        assert!(e.payload.len() * 20 < raw.payload.len(), "{} vs {}", e.payload.len(), raw.payload.len());
        assert_eq!(ac_decode(&e, &model).unwrap(), v);
    }

    #[test]
    fn model_mismatch_is_reported() {
        let p = params(4);
        let model_a = EntropyModel::from_params(&p, Description::A);
        let model_b = EntropyModel::from_params(&p, Description::B);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_indices(2, 2, 2, 4, &mut rng);
        let e = ac_encode(&v, &model_a, header(16, 16, 2, 4, CodingMode::Arithmetic)).unwrap();
        assert!(matches!(ac_decode(&e, &model_b), Err(MdcError::ModelMismatch { .. })));
        let r = encode(&v, &model_a, header(16, 16, 2, 4, CodingMode::Raw)).unwrap();
        assert!(matches!(decode(&r, &model_b), Err(MdcError::ModelMismatch { .. })));
        assert_eq!(decode(&r, &model_a).unwrap(), v);
    }

    #[test]
    fn arithmetic_round_trips_within_the_overhead_envelope() {
        let p = params(6);
        let model = EntropyModel::from_params(&p, Description::B);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut within = 0;
        for _ in 0..40 {
            let (m, n) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let v = random_indices(m, n, 2, 6, &mut rng);
            let h = header(8 * m, 8 * n - rng.gen_range(0..8), 2, 6, CodingMode::Arithmetic);
            let e = ac_encode(&v, &model, h).unwrap();
            let back = EncodedDescription::from_bytes(&e.to_bytes()).unwrap();
            assert_eq!(ac_decode(&back, &model).unwrap(), v);
            let est = model.rate_bits(&v).unwrap();
            if e.payload_bits() as f64 <= est + 32.0 + 0.02 * est {
                within += 1;
            }
        }
        assert!(within >= 38, "{within}/40 within the envelope");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn raw_round_trips(m in 1usize..5, n in 1usize..5, k in 1usize..4, l in 2usize..40, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random_indices(m, n, k, l, &mut rng);
            let e = serialize_raw(&v, header(8 * m, 8 * n, k, l, CodingMode::Raw)).unwrap();
            prop_assert_eq!(e.payload.len(), (m * n * k * bits_per_symbol(l)).div_ceil(8));
            let back = EncodedDescription::from_bytes(&e.to_bytes()).unwrap();
            prop_assert_eq!(deserialize_raw(&back).unwrap(), v);
        }
    }
}
