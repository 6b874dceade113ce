use caloric_lab::calpoly::{self, heat_extend, CaloricPolynomial, Orientation, SpatialPolynomial, TraceResolution};
use caloric_lab::measures;
use caloric_lab::pargeo::{Cylinder, ParaPoint};
use proptest::prelude::*;

fn multi_index(n: usize, max_deg: u32) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0..=max_deg, n).prop_filter("degree bound", move |a| a.iter().sum::<u32>() <= max_deg)
}

fn spatial_poly(n: usize, max_deg: u32) -> impl Strategy<Value = SpatialPolynomial> {
    prop::collection::vec((multi_index(n, max_deg), -2.0f64..2.0), 1..8)
        .prop_map(move |terms| SpatialPolynomial::from_terms(n, &terms).unwrap())
}

fn homogeneous_poly(n: usize, k: u32) -> impl Strategy<Value = SpatialPolynomial> {
    prop::collection::vec((multi_index(n, k), 0.5f64..2.0), 1..5).prop_map(move |terms| {
        let terms: Vec<(Vec<u32>, f64)> = terms
            .into_iter()
            .map(|(mut a, c)| {
                let d: u32 = a.iter().sum();
                a[0] += k - d;
                (a, c)
            })
            .collect();
        SpatialPolynomial::from_terms(n, &terms).unwrap()
    })
}

fn orientation() -> impl Strategy<Value = Orientation> {
    prop_oneof![Just(Orientation::Caloric), Just(Orientation::Adjoint)]
}

fn sum_parts(h: &CaloricPolynomial) -> CaloricPolynomial {
    h.homogeneous_parts().into_iter().fold(CaloricPolynomial::zero(h.n(), h.orientation()), |acc, (_, p)| acc.add(&p).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn heat_extension_is_caloric(p in (1usize..4).prop_flat_map(|n| spatial_poly(n, 6)), o in orientation()) {
        let h = heat_extend(&p, o);
        prop_assert!(h.is_caloric());
        prop_assert!(h.apply_operator().is_zero() || h.apply_operator().coef_scale() <= 1e-12 * h.coef_scale());
    }

    #[test]
    fn heat_extension_restricts_to_p(p in (1usize..4).prop_flat_map(|n| spatial_poly(n, 6)), x in prop::collection::vec(-1.5f64..1.5, 3)) {
        let h = heat_extend(&p, Orientation::Caloric);
        let n = p.n();
        let direct = heat_extend(&p, Orientation::Adjoint).eval_xt(&x[..n], 0.0);
        prop_assert!((h.eval_xt(&x[..n], 0.0) - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
    }

    #[test]
    fn homogeneous_parts_reconstruct(p in (1usize..4).prop_flat_map(|n| spatial_poly(n, 6)), o in orientation()) {
        let h = heat_extend(&p, o);
        prop_assert_eq!(sum_parts(&h), h.clone());
        for (j, part) in h.homogeneous_parts() {
            prop_assert!(part.is_caloric());
            prop_assert!(part.terms().all(|(m, _)| m.degree() == j));
        }
    }

    #[test]
    fn homogeneous_data_gives_homogeneous_extension(p in (1usize..4).prop_flat_map(|n| (1u32..6).prop_flat_map(move |k| homogeneous_poly(n, k)))) {
        let h = heat_extend(&p, Orientation::Caloric);
        if !h.is_zero() {
            prop_assert!(h.is_homogeneous());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn f_r_homogeneity_of_caloric_measure(p in (1u32..4).prop_flat_map(|k| homogeneous_poly(2, k)), r1 in 0.2f64..1.0, ratio in 1.5f64..4.0) {
        let h = heat_extend(&p, Orientation::Caloric);
        let k = h.degree().unwrap() as i32;
        let r2 = r1 * ratio;
        let res = TraceResolution { slices: 80, grid: 80 };
        let f = |r: f64| {
            let mu = calpoly::caloric_measure_poly(&h, &Cylinder::new(ParaPoint::origin(2), r).unwrap(), &res).unwrap();
            measures::f_r(&mu, r).unwrap()
        };
        let (f1, f2) = (f(r1), f(r2));
        prop_assume!(f1 > 0.0 && f2 > 0.0);
        let want = (r1 / r2).powi(2 + k + 1);
        prop_assert!(((f1 / f2) / want - 1.0).abs() < 0.02, "k={} ratio {} want {}", k, f1 / f2, want);
    }
}
