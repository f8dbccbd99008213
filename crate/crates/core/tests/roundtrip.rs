use bvc_core::config::{GopConfig, ModelConfig};
use bvc_core::model::Model;
use bvc_core::pipeline::{decode_sequence, encode_sequence};
use bvc_tensor::Tensor;

fn clip(n: usize, h: usize, w: usize) -> Vec<Tensor> {
    (0..n)
        .map(|t| {
            Tensor::from_fn(&[3, h, w], |i| {
                let (c, p) = (i / (h * w), i % (h * w));
                let (y, x) = ((p / w) as f32, (p % w) as f32);
                0.5 + 0.4 * ((x + 1.5 * t as f32) * 0.2 + y * 0.13 + c as f32).sin()
            })
        })
        .collect()
}

#[test]
fn untrained_roundtrip_is_bit_exact() {
    let model = Model::new(ModelConfig::tiny(), 3);
    let gop = GopConfig { intra_period: 8, gop_size: 8, ..Default::default() };
    let frames = clip(10, 40, 56);
    let t0 = std::time::Instant::now();
    let enc = encode_sequence(&model, &frames, &gop, 1.0).unwrap();
    eprintln!("encode {:?}, {} bytes", t0.elapsed(), enc.bitstream.len());
    let dec = decode_sequence(&model, &enc.bitstream).unwrap();
    for (a, b) in enc.recon.iter().zip(&dec.frames) {
        assert!(a.bit_eq(b));
        assert_eq!(a.shape(), &[3, 40, 56]);
    }
    let s = &enc.stats;
    let sum: u64 = s.frames.iter().map(|f| f.record_bits).sum();
    assert_eq!(sum, s.total_bits - s.header_bits);
}

#[test]
fn encoding_is_deterministic_and_bound_to_the_model() {
    let model = Model::new(ModelConfig::tiny(), 3);
    let gop = GopConfig { intra_period: 4, gop_size: 4, ..Default::default() };
    let frames = clip(5, 32, 32);
    let a = encode_sequence(&model, &frames, &gop, 2.0).unwrap();
    let b = encode_sequence(&model, &frames, &gop, 2.0).unwrap();
    assert_eq!(a.bitstream, b.bitstream);
    let other = Model::new(ModelConfig::tiny(), 4);
    assert!(decode_sequence(&other, &a.bitstream).is_err());
    let mut cut = a.bitstream.clone();
    cut.truncate(cut.len() - 3);
    assert!(decode_sequence(&model, &cut).is_err());
}
