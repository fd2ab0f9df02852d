use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MdcError, Result};
use crate::grad::kernels::CausalTaps;
use crate::kv;
use crate::quant::CenterVector;
use crate::tensor::Tensor;

/// Spatial reduction between the input image and the feature tensor.
pub const DOWNSAMPLE: usize = 8;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Architecture hyper-parameters. Serialized into checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// width of encoder and decoder convolutions
    pub base_channels: usize,
    /// `K`, channels of the feature tensor
    pub feature_channels: usize,
    /// `L`, centers per quantizer
    pub levels: usize,
    pub sigma: f64,
    pub dilation_rates: [usize; 3],
    pub resconv_per_block: usize,
    pub entropy_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 64,
            feature_channels: 8,
            levels: 8,
            sigma: 1.0,
            dilation_rates: [1, 2, 3],
            resconv_per_block: 16,
            entropy_channels: 64,
        }
    }
}

impl ModelConfig {
    /// Reduced-width configuration for CPU experiments.
    pub fn toy() -> Self {
        ModelConfig { base_channels: 16, resconv_per_block: 2, entropy_channels: 16, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MdcError::Config(m.to_string()));
        if self.base_channels == 0 || self.entropy_channels == 0 {
            return bad("channel widths must be positive");
        }
        if self.feature_channels < 1 {
            return bad("feature_channels must be at least 1");
        }
        if self.levels < 2 || self.levels > 1 << 15 {
            return bad("levels must be in [2, 32768]");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if self.dilation_rates.iter().any(|&r| r == 0) {
            return bad("dilation rates must be positive");
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let d = self.dilation_rates;
        vec![
            ("base_channels".into(), self.base_channels.to_string()),
            ("feature_channels".into(), self.feature_channels.to_string()),
            ("levels".into(), self.levels.to_string()),
            ("sigma".into(), format!("{:?}", self.sigma)),
            ("dilation_rates".into(), format!("{},{},{}", d[0], d[1], d[2])),
            ("resconv_per_block".into(), self.resconv_per_block.to_string()),
            ("entropy_channels".into(), self.entropy_channels.to_string()),
        ]
    }

    /// Overwrites fields named in `pairs`; unknown keys are ignored.
    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            match k.as_str() {
                "base_channels" => self.base_channels = kv::parse_value(k, v)?,
                "feature_channels" | "K" => self.feature_channels = kv::parse_value(k, v)?,
                "levels" | "L" => self.levels = kv::parse_value(k, v)?,
                "sigma" => self.sigma = kv::parse_value(k, v)?,
                "dilation_rates" => {
                    let parts: Vec<usize> =
                        v.split(',').map(|p| kv::parse_value(k, p.trim())).collect::<Result<_>>()?;
                    self.dilation_rates = parts
                        .try_into()
                        .map_err(|_| MdcError::Config("dilation_rates needs three values".into()))?;
                }
                "resconv_per_block" => self.resconv_per_block = kv::parse_value(k, v)?,
                "entropy_channels" => self.entropy_channels = kv::parse_value(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }
}

/// Which of the two descriptions a component belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Description {
    A,
    B,
}

impl Description {
    pub fn tag(self) -> &'static str {
        match self {
            Description::A => "a",
            Description::B => "b",
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Description::A => 0,
            Description::B => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Description::A),
            1 => Some(Description::B),
            _ => None,
        }
    }
}

/// Every learnable tensor of the codec, by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

struct Init {
    rng: ChaCha8Rng,
    /// shapes only, zero-filled
    dry: bool,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Init {
    fn push(&mut self, name: String, t: Tensor) {
        self.names.push(name);
        self.tensors.push(t);
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        if self.dry {
            return Tensor::zeros(shape);
        }
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::from_vec(shape, data).expect("shape")
    }

    fn he_std(fan_in: usize) -> f64 {
        (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) / fan_in as f64).sqrt()
    }

    /// `[cout, cin, k, k]` weights plus zero bias.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
        let w = self.normal(&[cout, cin, k, k], gain * Self::he_std(cin * k * k));
        self.push(format!("{name}.w"), w);
        self.push(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    /// Transposed conv weights `[cin, cout, k, k]`; a stride-2 4×4 kernel
    /// sees about `cin·k²/4` inputs per output.
    fn deconv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
        let w = self.normal(&[cin, cout, k, k], gain * Self::he_std((cin * k * k / 4).max(1)));
        self.push(format!("{name}.w"), w);
        self.push(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    fn masked(&mut self, name: &str, taps: usize, cin: usize, cout: usize, gain: f64) {
        let w = self.normal(&[taps, cin, cout], gain * Self::he_std(taps * cin));
        self.push(format!("{name}.w"), w);
        self.push(format!("{name}.b"), Tensor::zeros(&[cout]));
    }
}

pub(crate) const DECONV_K: usize = 4;
const RESIDUAL_GAIN: f64 = 0.1;
/// Decoders start out emitting near-uniform gray. With full-scale output
/// weights the first updates mostly suppress the random decoder output,
/// which drags the features into a single quantization bin.
const OUTPUT_GAIN: f64 = 0.01;

impl ModelParams {
    /// Random initialization, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (names, tensors) = Self::build(&config, seed, false)?;
        let lookup = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(ModelParams { config, names, tensors, lookup })
    }

    fn build(config: &ModelConfig, seed: u64, dry: bool) -> Result<(Vec<String>, Vec<Tensor>)> {
        let mut it = Init { rng: ChaCha8Rng::seed_from_u64(seed), dry, names: Vec::new(), tensors: Vec::new() };
        let b = config.base_channels;
        let k = config.feature_channels;
        it.conv("enc.stem", 3, b, 3, 1.0);
        for blk in 1..=3 {
            for i in 0..3 {
                it.conv(&format!("enc.hdc{blk}.{i}"), b, b, 3, 1.0);
            }
            it.conv(&format!("enc.down{blk}"), b, b, 5, 1.0);
        }
        it.conv("enc.skip1", b, b, 5, 1.0);
        it.conv("enc.skip2", b, b, 5, 1.0);
        it.conv("enc.agg0", 3 * b, b, 3, 1.0);
        it.conv("enc.agg1", b, b, 3, 1.0);
        it.conv("enc.agg2", b, b, 3, 1.0);
        it.conv("enc.z", b, k, 3, 1.0);
        it.conv("enc.da", b, 1, 3, 0.1);
        it.conv("enc.db", b, 1, 3, 0.1);
        for (dec, cin) in [("dec_a", k), ("dec_b", k), ("dec_c", 2 * k)] {
            it.deconv(&format!("{dec}.up1"), cin, b, DECONV_K, 1.0);
            for blk in 1..=2 {
                for r in 0..config.resconv_per_block {
                    it.conv(&format!("{dec}.res{blk}.{r}.0"), b, b, 3, 1.0);
                    it.conv(&format!("{dec}.res{blk}.{r}.1"), b, b, 3, RESIDUAL_GAIN);
                }
                if blk == 1 {
                    it.deconv(&format!("{dec}.up2"), b, b, DECONV_K, 1.0);
                }
            }
            it.deconv(&format!("{dec}.up3"), b, 3, DECONV_K, OUTPUT_GAIN);
        }
        let (a_taps, b_taps) = (CausalTaps::new(false).len(), CausalTaps::new(true).len());
        let (l, e) = (config.levels, config.entropy_channels);
        for ent in ["ent_a", "ent_b"] {
            it.masked(&format!("{ent}.l1"), a_taps, l, e, 1.0);
            for i in 2..=5 {
                let gain = if i % 2 == 1 { RESIDUAL_GAIN } else { 1.0 };
                it.masked(&format!("{ent}.l{i}"), b_taps, e, e, gain);
            }
            it.masked(&format!("{ent}.l6"), b_taps, e, l, 1.0);
        }
        let centers = CenterVector::uniform(config.levels, config.sigma)?;
        // the two quantizers start a half step apart, so together they
        // resolve twice as finely as either alone
        let quarter = 0.5 / (config.levels - 1) as f64;
        for (c, shift) in [("centers_a", -quarter), ("centers_b", quarter)] {
            let v: Vec<f64> = centers.centers().iter().map(|x| x + shift).collect();
            it.push(c.to_string(), Tensor::from_vec(&[config.levels], v)?);
        }
        Ok((it.names, it.tensors))
    }

    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        let mut lookup = HashMap::new();
        for (i, (n, t)) in named.into_iter().enumerate() {
            if !t.all_finite() {
                return Err(MdcError::Checkpoint(format!("parameter {n} has non-finite values")));
            }
            if lookup.insert(n.clone(), i).is_some() {
                return Err(MdcError::Checkpoint(format!("duplicate parameter {n}")));
            }
            names.push(n);
            tensors.push(t);
        }
        let p = ModelParams { config, names, tensors, lookup };
        p.check_layout()?;
        Ok(p)
    }

    /// Shapes must match a freshly initialized model of the same config.
    fn check_layout(&self) -> Result<()> {
        let reference = Self::layout(&self.config);
        if reference.len() != self.names.len() {
            return Err(MdcError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                reference.len(),
                self.names.len()
            )));
        }
        for (name, shape) in reference {
            let Some(&i) = self.lookup.get(&name) else {
                return Err(MdcError::Checkpoint(format!("missing parameter {name}")));
            };
            if self.tensors[i].shape() != shape.as_slice() {
                return Err(MdcError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    self.tensors[i].shape()
                )));
            }
        }
        Ok(())
    }

    fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (names, tensors) = Self::build(config, 0, true).expect("validated config");
        names.into_iter().zip(tensors).map(|(n, t)| (n, t.shape().to_vec())).collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.lookup[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.lookup[name];
        &mut self.tensors[i]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Convolution weights, the operand of the weight-decay term.
    pub fn is_conv_weight(&self, index: usize) -> bool {
        self.names[index].ends_with(".w")
    }

    pub fn weight_decay(&self) -> f64 {
        (0..self.len()).filter(|&i| self.is_conv_weight(i)).map(|i| self.tensors[i].sum_sq()).sum()
    }

    pub fn centers(&self, which: Description) -> Result<CenterVector> {
        let t = self.get(&format!("centers_{}", which.tag()));
        CenterVector::new(t.data().to_vec(), self.config.sigma)
    }

    /// CRC-32 over every parameter's name, shape and big-endian bits.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            hash_tensor(&mut h, n, t);
        }
        h.finalize()
    }

    /// CRC-32 of everything needed to entropy-decode and dequantize one
    /// description: its entropy network, its centers, and the symbol geometry.
    pub fn description_checksum(&self, which: Description) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&(self.config.feature_channels as u32).to_be_bytes());
        h.update(&(self.config.levels as u32).to_be_bytes());
        h.update(&(self.config.entropy_channels as u32).to_be_bytes());
        let prefix = format!("ent_{}.", which.tag());
        let centers = format!("centers_{}", which.tag());
        for (n, t) in self.names.iter().zip(&self.tensors) {
            if n.starts_with(&prefix) || *n == centers {
                hash_tensor(&mut h, n, t);
            }
        }
        h.finalize()
    }
}

fn hash_tensor(h: &mut crc32fast::Hasher, name: &str, t: &Tensor) {
    h.update(name.as_bytes());
    for d in t.shape() {
        h.update(&(*d as u32).to_be_bytes());
    }
    for v in t.data() {
        h.update(&v.to_bits().to_be_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            feature_channels: 2,
            levels: 3,
            resconv_per_block: 1,
            entropy_channels: 4,
            ..Default::default()
        }
    }

    #[test]
    fn config_text_round_trip() {
        let c = ModelConfig { sigma: 2.5, dilation_rates: [1, 3, 5], ..ModelConfig::toy() };
        let mut back = ModelConfig::default();
        back.apply_pairs(&kv::parse(&kv::format(&c.to_pairs())).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(ModelConfig { levels: 1, ..tiny() }.validate().is_err());
        assert!(ModelConfig { feature_channels: 0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_finite() {
        let a = ModelParams::init(tiny(), 7).unwrap();
        let b = ModelParams::init(tiny(), 7).unwrap();
        let c = ModelParams::init(tiny(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.checksum(), c.checksum());
        assert!(a.tensors().iter().all(|t| t.all_finite()));
        assert_eq!(a.get("centers_a").data(), &[-1.25, -0.25, 0.75]);
        assert_eq!(a.get("centers_b").data(), &[-0.75, 0.25, 1.25]);
        assert_eq!(a.get("enc.stem.w").shape(), &[4, 3, 3, 3]);
        assert_eq!(a.get("enc.agg0.w").shape(), &[4, 12, 3, 3]);
        assert_eq!(a.get("dec_c.up1.w").shape(), &[4, 4, 4, 4]);
        assert_eq!(a.get("ent_a.l1.w").shape(), &[13, 3, 4]);
        assert_eq!(a.get("ent_b.l6.w").shape(), &[14, 4, 3]);
    }

    #[test]
    fn weight_decay_covers_conv_weights_only() {
        let mut p = ModelParams::init(tiny(), 1).unwrap();
        let before = p.weight_decay();
        p.get_mut("enc.stem.b").data_mut()[0] = 100.0;
        p.get_mut("centers_a").data_mut()[0] = 100.0;
        assert_eq!(p.weight_decay(), before);
        p.get_mut("enc.stem.w").data_mut()[0] += 1.0;
        assert!(p.weight_decay() != before);
    }

    #[test]
    fn layout_is_enforced() {
        let p = ModelParams::init(tiny(), 1).unwrap();
        let mut named: Vec<(String, Tensor)> = p.names().iter().cloned().zip(p.tensors().iter().cloned()).collect();
        assert!(ModelParams::from_parts(tiny(), named.clone()).is_ok());
        named[0].1 = Tensor::zeros(&[1]);
        assert!(ModelParams::from_parts(tiny(), named.clone()).is_err());
        named.pop();
        assert!(ModelParams::from_parts(tiny(), named).is_err());
    }

    #[test]
    fn description_checksum_tracks_its_own_network() {
        let mut p = ModelParams::init(tiny(), 1).unwrap();
        let (a, b) = (p.description_checksum(Description::A), p.description_checksum(Description::B));
        p.get_mut("ent_b.l3.w").data_mut()[0] += 0.5;
        assert_eq!(p.description_checksum(Description::A), a);
        assert_ne!(p.description_checksum(Description::B), b);
        p.get_mut("enc.stem.w").data_mut()[0] += 0.5;
        assert_eq!(p.description_checksum(Description::A), a);
    }
}
