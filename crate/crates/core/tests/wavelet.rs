use proptest::prelude::*;
use simdiff::rng;
use simdiff::tensor::Tensor;
use simdiff::wavelet::*;

fn image(seed: u64, h: usize, w: usize, c: usize) -> Tensor<f32> {
    rng::normal(&mut rng::stream(seed, "wavelet", 0), &[h, w, c])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn roundtrip_is_close(seed in 0u64..10_000, levels in 1usize..4, hk in 1usize..5, wk in 1usize..5, c in 1usize..4) {
        let (h, w) = (hk << levels, wk << levels);
        let x = image(seed, h, w, c);
        let stack = dwt53_forward_2d(&x, levels).unwrap();
        prop_assert_eq!(stack.packed.shape(), &[h >> levels, w >> levels, c << (2 * levels)][..]);
        prop_assert_eq!(stack.channels(), c);
        let back = dwt53_inverse_2d(&stack).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn one_dimensional_roundtrip(seed in 0u64..10_000, half in 1usize..40) {
        let x: Vec<f64> = image(seed, 1, 2 * half, 1).data().iter().map(|&v| v as f64).collect();
        let (a, d) = dwt53_forward_1d(&x).unwrap();
        let back = dwt53_inverse_1d(&a, &d).unwrap();
        for (u, v) in back.iter().zip(&x) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn space_to_depth_roundtrip(seed in 0u64..1000, p in 1usize..4, k in 1usize..4, c in 1usize..3) {
        let x = image(seed, p * k, p * k, c);
        let y = space_to_depth(&x, p).unwrap();
        prop_assert_eq!(y.shape(), &[k, k, c * p * p][..]);
        prop_assert_eq!(depth_to_space(&y, p).unwrap(), x);
    }
}

#[test]
fn constants_have_no_detail() {
    let x = Tensor::full(&[16, 16, 2], 0.75f32);
    let stack = dwt53_forward_2d(&x, 2).unwrap();
    for px in stack.packed.data().chunks(stack.packed.last_dim()) {
        assert_eq!(&px[..2], &[0.75, 0.75]);
        assert!(px[2..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn linear_ramp_has_no_interior_detail() {
    let x: Vec<f64> = (0..16).map(|i| 0.5 * i as f64 - 2.0).collect();
    let (_, d) = dwt53_forward_1d(&x).unwrap();
    assert!(d[..7].iter().all(|v| v.abs() < 1e-12), "{d:?}");
}

#[test]
fn odd_sizes_are_rejected() {
    assert!(dwt53_forward_2d(&Tensor::zeros(&[6, 8, 1]), 2).is_err());
    assert!(dwt53_forward_1d(&[1.0f64, 2.0, 3.0]).is_err());
    assert!(space_to_depth(&Tensor::<f32>::zeros(&[5, 4, 1]), 2).is_err());
}

#[test]
fn mosaic_tiles_the_plane() {
    let x = image(1, 16, 16, 1);
    let stack = dwt53_forward_2d(&x, 2).unwrap();
    let m = mosaic(&stack).unwrap();
    assert_eq!(m.shape(), &[16, 16, 1]);
    assert_eq!(m.data()[0], stack.packed.data()[0]);
    let mut a: Vec<f32> = m.data().to_vec();
    let mut b: Vec<f32> = stack.packed.data().to_vec();
    a.sort_by(f32::total_cmp);
    b.sort_by(f32::total_cmp);
    assert_eq!(a, b);
}
