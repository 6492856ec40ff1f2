use geolle_core::metrics::{psnr, ssim, ssim_global_plane};
use geolle_core::Tensor;
use proptest::prelude::*;

fn image(c: usize, h: usize, w: usize, vals: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(vec![1, c, h, w], |i| vals[i % vals.len()])
}

fn psnr_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut se = 0.0;
    for i in 0..a.data().len() {
        let d = a.data()[i] - b.data()[i];
        se += d * d;
    }
    10.0 * (1.0 / (se / a.data().len() as f64)).log10()
}

#[test]
fn constant_offset_is_twenty_db() {
    let a = Tensor::<f64>::from_fn(vec![1, 3, 16, 16], |i| (i % 9) as f64 / 10.0);
    let mut b = a.clone();
    b.data_mut().iter_mut().for_each(|v| *v += 0.1);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-10);
    assert!((psnr(&b, &a).unwrap() - 20.0).abs() < 1e-10);
}

#[test]
fn identical_images_have_infinite_psnr() {
    let a = image(3, 8, 8, &[0.2, 0.7, 0.4]);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
}

#[test]
fn inverted_half_split_image_has_negative_ssim() {
    let (h, w) = (32, 32);
    let x = Tensor::<f64>::from_fn(vec![1, 1, h, w], |i| if i % w < w / 2 { 0.0 } else { 1.0 });
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
    let s = ssim(&x, &y).unwrap();
    assert!(s < 0.0, "{s}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psnr_matches_loop_and_is_symmetric(c in 1usize..4, h in 1usize..20, w in 1usize..20,
                                         va in prop::collection::vec(0.0f64..1.0, 97), vb in prop::collection::vec(0.0f64..1.0, 89)) {
        let (a, b) = (image(c, h, w, &va), image(c, h, w, &vb));
        let p = psnr(&a, &b).unwrap();
        prop_assume!(p.is_finite());
        prop_assert!((p - psnr_loop(&a, &b)).abs() < 1e-10);
        prop_assert_eq!(p, psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_self_is_one_and_symmetric(c in 1usize..4, h in 1usize..24, w in 1usize..24,
                                     va in prop::collection::vec(0.0f64..1.0, 97), vb in prop::collection::vec(0.0f64..1.0, 89)) {
        let (a, b) = (image(c, h, w, &va), image(c, h, w, &vb));
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn joint_pixel_permutation_preserves_psnr_and_global_ssim(va in prop::collection::vec(0.0f64..1.0, 60),
                                                             vb in prop::collection::vec(0.0f64..1.0, 60),
                                                             rot in 0usize..60) {
        let perm = |v: &[f64]| -> Vec<f64> { (0..v.len()).map(|i| v[(i * 7 + rot) % 60]).collect() };
        let (a, b) = (image(1, 6, 10, &va), image(1, 6, 10, &vb));
        let (pa, pb) = (image(1, 6, 10, &perm(&va)), image(1, 6, 10, &perm(&vb)));
        // Equal up to summation order.
        prop_assert!((psnr(&a, &b).unwrap() - psnr(&pa, &pb).unwrap()).abs() < 1e-12);
        // 6x10 is below the window size, so ssim uses global statistics.
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&pa, &pb).unwrap()).abs() < 1e-12);
        prop_assert!((ssim_global_plane(&va, &vb) - ssim_global_plane(&perm(&va), &perm(&vb))).abs() < 1e-12);
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = image(3, 4, 4, &[0.5]);
    let b = image(3, 4, 5, &[0.5]);
    assert!(psnr(&a, &b).is_err());
    assert!(ssim(&a, &b).is_err());
}
