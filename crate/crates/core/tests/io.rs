use proptest::prelude::*;
use simdiff::io::*;
use simdiff::tensor::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensors_roundtrip(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 0..5)) {
        let named: Vec<(String, Tensor<f32>)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("t{i}/x"), Tensor::from_fn(s, |j| (i * 100 + j) as f32 * 0.37 - 3.0)))
            .collect();
        let bytes = encode_tensors(&named);
        prop_assert_eq!(decode_tensors(&bytes).unwrap(), named.clone());
        let ck = encode_checkpoint(42, &named);
        prop_assert_eq!(decode_checkpoint(&ck).unwrap(), (42, named));
    }

    #[test]
    fn pnm_roundtrip(w in 1usize..9, h in 1usize..9, rgb in any::<bool>(), seed in any::<u8>()) {
        let channels = if rgb { 3 } else { 1 };
        let data = (0..w * h * channels).map(|i| (i as u8).wrapping_mul(37).wrapping_add(seed)).collect();
        let img = Image { width: w, height: h, channels, data };
        prop_assert_eq!(Image::decode_pnm(&img.encode_pnm()).unwrap(), img.clone());
        let back = Image::from_tensor(&img.to_tensor()).unwrap();
        prop_assert_eq!(back, img);
    }
}

#[test]
fn truncated_and_trailing_bytes_fail() {
    let bytes = encode_tensors(&[("a".into(), Tensor::full(&[3], 1.0))]);
    assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_tensors(&long).is_err());
    assert!(decode_checkpoint(&bytes).is_err());
}

#[test]
fn text_survives_a_tensor() {
    let s = "schedule = shifted\nnoise_d = 64\n# ünïcode";
    assert_eq!(tensor_text(&text_tensor(s)).unwrap(), s);
}

#[test]
fn ascii_pnm_and_maxval() {
    let img = Image::decode_pnm(b"P2\n# c\n2 1\n15\n0 15\n").unwrap();
    assert_eq!((img.width, img.height, img.channels), (2, 1, 1));
    assert_eq!(img.data, [0, 255]);
    assert!(Image::decode_pnm(b"P7\n1 1\n255\n").is_err());
}

#[test]
fn crop_resize_averages_the_centre() {
    let img = Image { width: 6, height: 4, channels: 1, data: (0..24).map(|i| i as u8).collect() };
    let small = img.crop_resize(2).unwrap();
    // 4×4 centre crop starting at column 1, averaged over 2×2 windows
    assert_eq!(small.data, [(1 + 2 + 7 + 8 + 2) / 4, (3 + 4 + 9 + 10 + 2) / 4, (13 + 14 + 19 + 20 + 2) / 4, (15 + 16 + 21 + 22 + 2) / 4]);
}
