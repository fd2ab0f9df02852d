//! End-to-end properties of the public codec API.

use mdc_core::bitstream::{self, DescriptionHeader, HEADER_LEN};
use mdc_core::networks::EntropyModel;
use mdc_core::training::textures;
use mdc_core::{Checkpoint, Codec, CodingMode, DecodeMode, Description, EncodedDescription, IndexTensor, ModelConfig, ModelParams};
use proptest::prelude::*;

fn small_params(levels: usize, k: usize, seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        base_channels: 4,
        feature_channels: k,
        levels,
        resconv_per_block: 1,
        entropy_channels: 4,
        ..Default::default()
    };
    ModelParams::init(cfg, seed).unwrap()
}

fn codec() -> Codec {
    let mut p = small_params(4, 2, 21);
    p.get_mut("enc.z.w").scale_assign(300.0);
    Codec::new(p)
}

fn header(m: usize, n: usize, k: usize, l: usize, mode: CodingMode, checksum: u32) -> DescriptionHeader {
    DescriptionHeader::for_image(Description::A, m * 8, n * 8, k, l, mode, checksum).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn raw_and_arithmetic_round_trip(
        l in 2usize..12, k in 1usize..4, m in 1usize..5, n in 1usize..5, seed in any::<u64>(), skew in any::<bool>(),
    ) {
        let len = m * n * k;
        let mut s = seed;
        let data: Vec<u16> = (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let r = (s >> 33) as usize;
                if skew && r % 4 != 0 { 0 } else { (r % l) as u16 }
            })
            .collect();
        let v = IndexTensor::new(m, n, k, l, data).unwrap();
        let model = EntropyModel::from_params(&small_params(l, k, seed % 1000), Description::A);

        let raw = bitstream::serialize_raw(&v, header(m, n, k, l, CodingMode::Raw, model.checksum())).unwrap();
        prop_assert_eq!(raw.payload.len(), (len * bitstream::bits_per_symbol(l)).div_ceil(8));
        let raw_back = EncodedDescription::from_bytes(&raw.to_bytes()).unwrap();
        prop_assert_eq!(bitstream::deserialize_raw(&raw_back).unwrap(), v.clone());

        let ac = bitstream::ac_encode(&v, &model, header(m, n, k, l, CodingMode::Arithmetic, model.checksum())).unwrap();
        let ac_back = EncodedDescription::from_bytes(&ac.to_bytes()).unwrap();
        prop_assert_eq!(bitstream::ac_decode(&ac_back, &model).unwrap(), v);
    }

    #[test]
    fn truncated_headers_are_rejected(cut in 0usize..HEADER_LEN) {
        let h = header(2, 3, 1, 4, CodingMode::Raw, 7);
        let e = EncodedDescription { header: h, payload: vec![0; h.raw_payload_len()] };
        let bytes = e.to_bytes();
        prop_assert!(EncodedDescription::from_bytes(&bytes[..cut]).is_err());
    }
}

#[test]
fn checkpoint_reload_reproduces_the_bitstream() {
    let codec = codec();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mdck");
    Checkpoint::new(codec.params().clone()).save(&path).unwrap();
    let reloaded = Codec::load(&path).unwrap();

    let x = &textures(1, 40, 56, 9)[0];
    let first = codec.encode_image(x, CodingMode::Arithmetic).unwrap();
    let second = reloaded.encode_image(x, CodingMode::Arithmetic).unwrap();
    assert_eq!(first[0].to_bytes(), second[0].to_bytes());
    assert_eq!(first[1].to_bytes(), second[1].to_bytes());

    let [central, side_a, side_b, _] = codec.reconstruct_all(x).unwrap();
    let (y, mode) = reloaded.decode_any(Some(&second[0]), Some(&second[1]), None).unwrap();
    assert_eq!((mode, y), (DecodeMode::Central, central));
    assert_eq!(reloaded.decode_any(Some(&second[0]), None, None).unwrap().0, side_a);
    assert_eq!(reloaded.decode_any(None, Some(&second[1]), None).unwrap().0, side_b);
}

#[test]
fn raw_and_arithmetic_decode_identically() {
    let codec = codec();
    let x = &textures(1, 32, 48, 2)[0];
    let raw = codec.encode_image(x, CodingMode::Raw).unwrap();
    let ac = codec.encode_image(x, CodingMode::Arithmetic).unwrap();
    let yr = codec.decode_any(Some(&raw[0]), Some(&raw[1]), None).unwrap().0;
    let ya = codec.decode_any(Some(&ac[0]), Some(&ac[1]), None).unwrap().0;
    assert_eq!(yr, ya);
}

#[test]
fn foreign_model_is_refused() {
    let x = &textures(1, 32, 32, 3)[0];
    let [a, _] = codec().encode_image(x, CodingMode::Arithmetic).unwrap();
    let other = Codec::new(small_params(4, 2, 99));
    assert!(other.decode_any(Some(&a), None, None).is_err());
}
