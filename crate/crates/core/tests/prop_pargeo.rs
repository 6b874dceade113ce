use caloric_lab::pargeo::{
    self, dilate, heat_ball_contains, para_norm, truncated_heat_ball_factor, FlatnessFamily, FlatnessOptions, HeatBall, ParaPoint,
    PointCloudSet, TruncatedCylinder,
};
use proptest::prelude::*;

fn point(n: usize) -> impl Strategy<Value = ParaPoint> {
    (prop::collection::vec(-5.0f64..5.0, n), -5.0f64..5.0).prop_map(|(x, t)| ParaPoint::new(&x, t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn norm_is_homogeneous_under_dilation(p in (1usize..4).prop_flat_map(point)) {
        for r in [0.1, 1.0, 10.0] {
            let d = dilate(&p, r).unwrap();
            prop_assert!((para_norm(&d) - r * para_norm(&p)).abs() <= 1e-12 * (1.0 + r * para_norm(&p)));
        }
    }

    #[test]
    fn heat_balls_are_nested(q in point(2), rho1 in 0.01f64..5.0, extra in 0.0f64..5.0) {
        let c = ParaPoint::origin(2);
        let small = HeatBall::new(c.clone(), rho1).unwrap();
        let big = HeatBall::new(c, rho1 + extra).unwrap();
        if heat_ball_contains(&small, &q) {
            prop_assert!(heat_ball_contains(&big, &q));
        }
    }

    #[test]
    fn heat_ball_fits_its_bounding_box(n in 1usize..4, rho in 0.01f64..4.0, y in prop::collection::vec(-4.0f64..4.0, 3), u in 0.0f64..4.0) {
        let hb = HeatBall::new(ParaPoint::origin(n), rho).unwrap();
        let q = ParaPoint::new(&y[..n], -u);
        if heat_ball_contains(&hb, &q) {
            let box_r = (2.0 * n as f64 * rho / std::f64::consts::E).sqrt();
            prop_assert!(q.spatial_norm() < box_r * (1.0 + 1e-12));
            prop_assert!(q.t > -rho && q.t < 0.0);
        }
    }

    #[test]
    fn truncated_cylinder_lies_in_heat_ball(n in 1usize..4, a in 0.05f64..0.95, r in 0.1f64..3.0, frac in prop::collection::vec(0.0f64..1.0, 5)) {
        let xi = ParaPoint::origin(n);
        let rect = TruncatedCylinder::backward(xi.clone(), r, a).unwrap();
        let rho = truncated_heat_ball_factor(n, a) * r * r * (1.0 + 1e-9);
        let hb = HeatBall::new(xi, rho).unwrap();
        // a point of R^-_a: direction and radius from `frac`, depth between the faces
        let mut dir: Vec<f64> = frac[..n].iter().map(|v| v - 0.5).collect();
        let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        let rad = frac[3] * r * (1.0 - 1e-9);
        dir.iter_mut().for_each(|v| *v *= rad / len);
        let (lo, hi) = rect.time_span();
        let q = ParaPoint::new(&dir, lo + (hi - lo) * (1e-9 + frac[4] * (1.0 - 2e-9)));
        prop_assert!(rect.contains(&q));
        prop_assert!(heat_ball_contains(&hb, &q));
    }
}

#[test]
fn bottom_face_factor_is_e_to_one_over_two_n() {
    for n in 1..4 {
        for a in [0.8, 0.9] {
            let want = (1.0 / (2.0 * n as f64)).exp();
            assert!((truncated_heat_ball_factor(n, a) - want).abs() < 1e-12);
        }
    }
}

fn plane_cloud(normal: [f64; 2], jitter: f64) -> Vec<ParaPoint> {
    let tangent = [-normal[1], normal[0]];
    let mut pts = Vec::new();
    for i in 0..41 {
        for j in 0..21 {
            let s = -1.0 + i as f64 / 20.0;
            let t = -1.0 + j as f64 / 10.0;
            let off = jitter * ((i * 7 + j * 3) % 5) as f64 / 4.0;
            pts.push(ParaPoint::new(&[s * tangent[0] + off * normal[0], s * tangent[1] + off * normal[1]], t));
        }
    }
    pts
}

fn small_opts() -> FlatnessOptions {
    FlatnessOptions { directions: 64, refine_iters: 30, plane_samples: 24, time_samples: 12, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn flatness_is_rotation_invariant(angle in 0.0f64..std::f64::consts::TAU, rot in 0.0f64..std::f64::consts::TAU) {
        let normal = [angle.cos(), angle.sin()];
        let pts = plane_cloud(normal, 0.1);
        let (c, s) = (rot.cos(), rot.sin());
        let turned: Vec<ParaPoint> = pts.iter().map(|p| ParaPoint::new(&[c * p.x[0] - s * p.x[1], s * p.x[0] + c * p.x[1]], p.t)).collect();
        let o = ParaPoint::origin(2);
        let a = pargeo::theta_flatness(&PointCloudSet::new(pts), &o, 1.0, &FlatnessFamily::Planes, &small_opts()).unwrap().theta;
        let b = pargeo::theta_flatness(&PointCloudSet::new(turned), &o, 1.0, &FlatnessFamily::Planes, &small_opts()).unwrap().theta;
        prop_assert!((a - b).abs() < 0.01, "{} vs {}", a, b);
    }

    #[test]
    fn flatness_is_dilation_invariant(angle in 0.0f64..std::f64::consts::PI, lambda in 0.1f64..10.0) {
        let pts = plane_cloud([angle.cos(), angle.sin()], 0.1);
        let scaled: Vec<ParaPoint> = pts.iter().map(|p| dilate(p, lambda).unwrap()).collect();
        let o = ParaPoint::origin(2);
        let a = pargeo::theta_flatness(&PointCloudSet::new(pts), &o, 0.8, &FlatnessFamily::Planes, &small_opts()).unwrap().theta;
        let b = pargeo::theta_flatness(&PointCloudSet::new(scaled), &o, 0.8 * lambda, &FlatnessFamily::Planes, &small_opts()).unwrap().theta;
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }
}
