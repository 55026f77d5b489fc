mod common;

use kspace_core::coils::pca_compress;
use kspace_core::ctensor::{ComplexTensor, Domain, C64};
use kspace_core::metrics::{auprc, auroc};
use kspace_core::sampling::{apply_mask, make_mask};
use proptest::prelude::*;

use common::{coil_gram, hermitian_eigenvalues, max_abs_diff, random_tensor};

fn tensor(dims: [usize; 4], seed: u64) -> ComplexTensor {
    random_tensor(dims, Domain::Image, seed)
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-4i32..5, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(0u8..2, n),
        )
    })
    .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fft_round_trip_and_parseval(h in 2usize..24, w in 2usize..24, seed in any::<u64>()) {
        let x = tensor([1, 2, h, w], seed);
        let k = x.fft2_centered().unwrap();
        prop_assert!((k.energy() - x.energy()).abs() <= 1e-10 * x.energy());
        let back = k.ifft2_centered().unwrap();
        prop_assert!(max_abs_diff(back.data(), x.data()) < 1e-12);
    }

    #[test]
    fn fft_is_linear(h in 2usize..16, w in 2usize..16, seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = tensor([1, 1, h, w], seed);
        let y = tensor([1, 1, h, w], seed ^ 0x55);
        let (ca, cb) = (C64::new(a, b), C64::new(b, -a));
        let mix: Vec<C64> = x.data().iter().zip(y.data()).map(|(p, q)| ca * p + cb * q).collect();
        let lhs = ComplexTensor::new([1, 1, h, w], mix, Domain::Image).unwrap().fft2_centered().unwrap();
        let (fx, fy) = (x.fft2_centered().unwrap(), y.fft2_centered().unwrap());
        let rhs: Vec<C64> = fx.data().iter().zip(fy.data()).map(|(p, q)| ca * p + cb * q).collect();
        prop_assert!(max_abs_diff(lhs.data(), &rhs) < 1e-10);
    }

    #[test]
    fn masking_is_idempotent_and_commutes_with_averaging(
        h in 4usize..40,
        r in 1usize..9,
        acs in 0usize..12,
        seed in any::<u64>(),
    ) {
        prop_assume!(r <= h && acs <= h);
        let mask = make_mask(h, r, acs).unwrap();
        let k = random_tensor([3, 2, h, 5], Domain::KSpace, seed);
        let once = apply_mask(&k, &mask).unwrap();
        prop_assert_eq!(&apply_mask(&once, &mask).unwrap(), &once);
        let a = apply_mask(&k.sum_averages(), &mask).unwrap();
        let b = once.sum_averages();
        prop_assert!(max_abs_diff(a.data(), b.data()) < 1e-12);
        for row in 0..h {
            let kept = row % r == 0 || mask.acs_range().contains(&row);
            prop_assert_eq!(mask.is_kept(row), kept);
        }
    }

    #[test]
    fn auroc_ignores_monotone_transforms((scores, labels) in scored_labels()) {
        let warped: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() + 2.0).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&warped, &labels).unwrap());
        prop_assert_eq!(auprc(&scores, &labels).unwrap(), auprc(&warped, &labels).unwrap());
    }

    #[test]
    fn auroc_of_negated_scores_is_complement((scores, labels) in scored_labels()) {
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = auroc(&scores, &labels).unwrap() + auroc(&neg, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn truncated_pca_keeps_the_leading_eigenvalues(
        n_coil in 2usize..9,
        keep in 1usize..9,
        seed in any::<u64>(),
    ) {
        prop_assume!(keep <= n_coil);
        let k = random_tensor([1, n_coil, 10, 7], Domain::KSpace, seed);
        let res = pca_compress(&k, keep).unwrap();
        let ev = hermitian_eigenvalues(&coil_gram(&k), n_coil);
        let kept: f64 = ev[..keep].iter().sum();
        prop_assert!((res.compressed.energy() - kept).abs() <= 1e-9 * k.energy());
        let ratios = &res.explained_variance_ratio;
        prop_assert!(ratios.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!((ratios.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
