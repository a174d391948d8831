use dugi_core::frequency::{afdm, build_filter, radial_distance, RadialFilterParams};
use dugi_core::imaging::crop_black_borders;
use dugi_core::masking::{keep_count, select_by_scores, select_mask};
use dugi_core::numerics::{fft2, ifft2, softmax};
use dugi_core::{FilterVariant, GrayImage, Tensor, TokenGrid};
use proptest::prelude::*;

fn image(max_side: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_side, 1..=max_side)
        .prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(-100.0..100.0f64, h * w)))
}

fn pair(max_side: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            prop::collection::vec(-100.0..100.0f64, h * w),
            prop::collection::vec(-100.0..100.0f64, h * w),
        )
    })
}

fn params() -> impl Strategy<Value = RadialFilterParams> {
    (0.0..0.999f64, 0.05..5.0f64, 0.5..12.0f64).prop_map(|(a, b, r)| RadialFilterParams::from_mapped(a, b, r).unwrap())
}

fn variant() -> impl Strategy<Value = FilterVariant> {
    prop_oneof![Just(FilterVariant::Literal), Just(FilterVariant::Notch)]
}

fn gray(max_side: usize) -> impl Strategy<Value = GrayImage> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<u8>(), h * w).prop_map(move |px| GrayImage::new(h, w, px).unwrap())
    })
}

trait PadZero {
    fn pad_zero(&self, t: usize, b: usize, l: usize, r: usize) -> GrayImage;
}

impl PadZero for GrayImage {
    fn pad_zero(&self, t: usize, b: usize, l: usize, r: usize) -> GrayImage {
        let w = self.width() + l + r;
        let mut px = vec![0u8; (self.height() + t + b) * w];
        for row in 0..self.height() {
            let dst = (row + t) * w + l;
            px[dst..dst + self.width()].copy_from_slice(&self.pixels()[row * self.width()..(row + 1) * self.width()]);
        }
        GrayImage::new(self.height() + t + b, w, px).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fft_roundtrip((h, w, x) in image(24)) {
        let back = ifft2(&fft2(&x, h, w).unwrap()).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn fft_preserves_energy((h, w, x) in image(24)) {
        let spatial: f64 = x.iter().map(|v| v * v).sum();
        let spectral = fft2(&x, h, w).unwrap().energy() / (h * w) as f64;
        prop_assert!((spatial - spectral).abs() <= 1e-9 * spatial.max(1.0));
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1..6usize, cols in 1..9usize, seed in prop::collection::vec(-50.0..50.0f64, 54)) {
        let x = Tensor::new(vec![rows, cols], seed[..rows * cols].to_vec()).unwrap();
        let p = softmax(&x, 1).unwrap();
        for r in p.data().chunks(cols) {
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn afdm_is_linear((h, w, x, y) in pair(12), a in -3.0..3.0f64, b in -3.0..3.0f64, p in params(), v in variant()) {
        let mix: Vec<f64> = x.iter().zip(&y).map(|(x, y)| a * x + b * y).collect();
        let lhs = afdm(&mix, h, w, &p, v).unwrap();
        let fx = afdm(&x, h, w, &p, v).unwrap();
        let fy = afdm(&y, h, w, &p, v).unwrap();
        for i in 0..h * w {
            prop_assert!((lhs[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn notch_scales_the_mean_by_alpha((h, w, x) in image(12), p in params()) {
        let out = afdm(&x, h, w, &p, FilterVariant::Notch).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!((mean(&out) - p.alpha() * mean(&x)).abs() < 1e-9);
    }

    #[test]
    fn filter_is_radially_symmetric(h in 1..20usize, w in 1..20usize, p in params(), v in variant()) {
        let f = build_filter(&p, h, w, v).unwrap();
        for u in 0..h {
            for c in 0..w {
                let d = radial_distance(u, c, h, w);
                for u2 in 0..h {
                    for c2 in 0..w {
                        if radial_distance(u2, c2, h, w) == d {
                            prop_assert!((f.at(u, c) - f.at(u2, c2)).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn projections_stay_in_range(a in -1e300..1e300f64, b in -1e300..1e300f64, r in -1e300..1e300f64) {
        let p = RadialFilterParams { alpha_raw: a, beta_raw: b, radius_raw: r };
        prop_assert!((0.0..1.0).contains(&p.alpha()));
        prop_assert!(p.beta() > 0.0 && p.beta().is_finite());
        prop_assert!(p.radius() > 0.0 && p.radius().is_finite());
        let f = build_filter(&p, 8, 8, FilterVariant::Notch).unwrap();
        prop_assert!(f.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mask_keeps_exactly_the_highest_scores(scores in prop::collection::vec(0.0..8.0f64, 1..80), lambda in 0.0..0.99f64) {
        let n = scores.len();
        let sel = select_by_scores(scores.clone(), lambda).unwrap();
        prop_assert_eq!(sel.keep_indices.len(), keep_count(n, lambda));
        prop_assert_eq!(sel.masked_indices().len() + sel.keep_indices.len(), n);
        let min_kept = sel.keep_indices.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for i in sel.masked_indices() {
            prop_assert!(scores[i] <= min_kept);
        }
    }

    #[test]
    fn grid_mask_is_deterministic(img in gray(48), lambda in 0.0..0.99f64) {
        prop_assume!(img.height() >= 4 && img.width() >= 4);
        let grid = TokenGrid::from_image(&img, 4).unwrap();
        let a = select_mask(&grid, lambda).unwrap();
        let b = select_mask(&grid, lambda).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.keep_indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn border_crop_is_idempotent(inner in gray(16), t in 0..5usize, b in 0..5usize, l in 0..5usize, r in 0..5usize) {
        prop_assume!(inner.pixels().iter().any(|&p| p > 0));
        let img = inner.pad_zero(t, b, l, r);
        let once = crop_black_borders(&img, 0).unwrap();
        let twice = crop_black_borders(&once, 0).unwrap();
        prop_assert_eq!((once.height(), once.width()), (twice.height(), twice.width()));
        prop_assert_eq!(once.pixels(), twice.pixels());
    }
}
