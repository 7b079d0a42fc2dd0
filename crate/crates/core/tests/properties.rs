use proptest::prelude::*;

use fbsdiff::{dct2, idct2, make_mask, substitute_band, BandKind, FeatureMap, Shape, Spectrum};

fn arb_pair() -> impl Strategy<Value = (FeatureMap, FeatureMap)> {
    (1usize..4, 1usize..20, 1usize..20).prop_flat_map(|(c, h, w)| {
        let s = Shape::new(c, h, w);
        let v = proptest::collection::vec(-4.0f32..4.0, s.len());
        (v.clone(), v).prop_map(move |(a, b)| (FeatureMap::new(s, a).unwrap(), FeatureMap::new(s, b).unwrap()))
    })
}

fn arb_band() -> impl Strategy<Value = BandKind> {
    prop_oneof![
        (-2i64..40).prop_map(|th| BandKind::Low { th }),
        (-2i64..40).prop_map(|th| BandKind::High { th }),
        (-2i64..30, 1i64..20).prop_map(|(a, d)| BandKind::Mid { lower: a, upper: a + d }),
        Just(BandKind::Full),
        Just(BandKind::Empty),
    ]
}

fn masked(f: &Spectrum, mask: &fbsdiff::BandMask, keep: bool) -> Vec<f32> {
    let plane = mask.bits().len();
    f.data()
        .iter()
        .enumerate()
        .map(|(k, &v)| if mask.bits()[k % plane] == keep { v } else { 0.0 })
        .collect()
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn round_trip((z, _) in arb_pair()) {
        let back = idct2(&dct2(&z).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&z) <= 1e-5 * z.max_abs().max(1.0));
    }

    #[test]
    fn parseval((z, _) in arb_pair()) {
        let e = dct2(&z).unwrap().energy();
        prop_assert!((e - z.norm_sq()).abs() <= 1e-4 * z.norm_sq().max(1e-12));
    }

    #[test]
    fn linearity((x, y) in arb_pair(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let lhs = dct2(&x.affine_combine(a, &y, b).unwrap()).unwrap();
        let (fx, fy) = (dct2(&x).unwrap(), dct2(&y).unwrap());
        for ((l, p), q) in lhs.data().iter().zip(fx.data()).zip(fy.data()) {
            let r = a * *p as f64 + b * *q as f64;
            prop_assert!((*l as f64 - r).abs() <= 1e-4 * (1.0 + r.abs()));
        }
    }

    #[test]
    fn band_capture_and_preservation((g, t) in arb_pair(), band in arb_band()) {
        let s = g.shape();
        let mask = make_mask(band, s.height, s.width).unwrap();
        let out = dct2(&substitute_band(&g, &t, &mask).unwrap()).unwrap();
        let (fg, ft) = (dct2(&g).unwrap(), dct2(&t).unwrap());
        prop_assert!(max_diff(&masked(&out, &mask, true), &masked(&fg, &mask, true)) <= 1e-4);
        prop_assert!(max_diff(&masked(&out, &mask, false), &masked(&ft, &mask, false)) <= 1e-4);
    }

    #[test]
    fn substitution_idempotent((g, t) in arb_pair(), band in arb_band()) {
        let s = g.shape();
        let mask = make_mask(band, s.height, s.width).unwrap();
        let once = substitute_band(&g, &t, &mask).unwrap();
        let twice = substitute_band(&g, &once, &mask).unwrap();
        prop_assert!(twice.max_abs_diff(&once) <= 1e-4);
    }

    #[test]
    fn substitution_linear_in_target((g, t) in arb_pair(), band in arb_band(), a in -2.0f64..2.0) {
        // S(g, a·t) − a·S(0, t) = S(g, 0)
        let s = g.shape();
        let mask = make_mask(band, s.height, s.width).unwrap();
        let zero = FeatureMap::zeros(s);
        let lhs = substitute_band(&g, &t.scale(a), &mask).unwrap();
        let rhs = substitute_band(&g, &zero, &mask).unwrap()
            .affine_combine(1.0, &substitute_band(&zero, &t, &mask).unwrap(), a).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-4);
    }

    #[test]
    fn substitution_linear_in_guide((g, t) in arb_pair(), band in arb_band(), a in -2.0f64..2.0) {
        let s = g.shape();
        let mask = make_mask(band, s.height, s.width).unwrap();
        let zero = FeatureMap::zeros(s);
        let lhs = substitute_band(&g.scale(a), &t, &mask).unwrap();
        let rhs = substitute_band(&g, &zero, &mask).unwrap()
            .affine_combine(a, &substitute_band(&zero, &t, &mask).unwrap(), 1.0).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-4);
    }
}

#[test]
fn smooth_maps_concentrate_energy_in_low_band() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let shape = Shape::new(4, 64, 64);
    let data: Vec<f64> = (0..shape.len()).map(|_| 0.7 + noise.sample(&mut rng)).collect();
    let z = FeatureMap::from_f64(shape, &data).unwrap();
    let f = dct2(&z).unwrap();
    let mask = make_mask(BandKind::Low { th: 80 }, 64, 64).unwrap();
    let plane = 64 * 64;
    let captured: f64 = f
        .data()
        .iter()
        .enumerate()
        .filter(|(k, _)| mask.bits()[k % plane])
        .map(|(_, &v)| (v as f64).powi(2))
        .sum();
    assert!(captured / f.energy() >= 0.99, "{}", captured / f.energy());
}
