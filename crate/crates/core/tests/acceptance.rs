//! Acceptance criteria A1-A10. Each criterion prints one PASS/FAIL line with
//! the measured quantities, the pinned tolerance and the runtime against its
//! budget, then a summary count.
//! Pass criterion ids (`A3 A7`) as arguments to run a subset.

use std::time::Instant;

use caloric_lab::calpoly::{self, CaloricPolynomial, Orientation, TraceResolution};
use caloric_lab::capacity::{self, GridOptions, KernelSpec};
use caloric_lab::heatcore::{self, MeanValueRule};
use caloric_lab::measures::{self, Cone, ConeOptions};
use caloric_lab::pargeo::{self, Cylinder, FlatnessFamily, FlatnessOptions, HeatBall, ParaPoint, PointCloudSet};
use caloric_lab::stochastic::{self, DomainSpec, WalkConfig};
use caloric_lab::transport::{self, SpatialAtom, SpatialDomain, TransportInstance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn poly(n: usize, terms: &[(Vec<u32>, u32, f64)]) -> CaloricPolynomial {
    CaloricPolynomial::from_terms(n, Orientation::Caloric, terms).unwrap()
}

/// `erfc` by composite Simpson on `[x, x + 12]`.
fn erfc(x: f64) -> f64 {
    let m = 4000;
    let h = 12.0 / m as f64;
    let f = |s: f64| (-s * s).exp();
    let mut acc = f(x) + f(x + 12.0);
    for k in 1..m {
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(x + k as f64 * h);
    }
    acc * h / 3.0 * 2.0 / std::f64::consts::PI.sqrt()
}

fn gauss(z: f64, u: f64) -> f64 {
    (4.0 * std::f64::consts::PI * u).powf(-0.5) * (-z * z / (4.0 * u)).exp()
}

fn a1() -> Outcome {
    const TOL: f64 = 0.02;
    let res = TraceResolution { slices: 400, grid: 400 };
    let region = Cylinder::new(ParaPoint::origin(2), 2.0).unwrap();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, h, k) in [
        ("x1", poly(2, &[(vec![1, 0], 0, 1.0)]), 1),
        ("x1x2", poly(2, &[(vec![1, 1], 0, 1.0)]), 2),
    ] {
        let mu = calpoly::caloric_measure_poly(&h, &region, &res).unwrap();
        for (r1, r2) in [(1.0, 2.0), (0.5, 2.0)] {
            let got = measures::f_r(&mu, r1).unwrap() / measures::f_r(&mu, r2).unwrap();
            let want = (r1 / r2 as f64).powi(2 + k + 1);
            let rel = (got / want - 1.0).abs();
            worst = worst.max(rel);
            parts.push(format!("{name} ({r1},{r2}) rel {rel:.2e}"));
        }
    }
    Outcome { pass: worst <= TOL, detail: format!("{} ; tol {TOL}", parts.join(", ")) }
}

fn a2() -> Outcome {
    const TOL: f64 = 0.01;
    // layer cake: |{max(|y|, |t|^{1/2}) < λ}| = 2λ · 2λ^2, so F_1 = ∫_0^1 4λ^3 dλ = 1
    let m = 100_000;
    let oracle: f64 = (0..m).map(|k| 4.0 * ((k as f64 + 0.5) / m as f64).powi(3) / m as f64).sum();
    let h = poly(2, &[(vec![1, 0], 0, 1.0)]);
    let mu = calpoly::caloric_measure_poly(&h, &Cylinder::new(ParaPoint::origin(2), 1.0).unwrap(), &TraceResolution { slices: 400, grid: 400 }).unwrap();
    let got = measures::f_r(&mu, 1.0).unwrap();
    let rel = (got / oracle - 1.0).abs();
    Outcome { pass: rel <= TOL, detail: format!("F_1 = {got:.6}, oracle {oracle:.6}, rel {rel:.2e} ; tol {TOL}") }
}

fn a3() -> Outcome {
    const CAP: f64 = 0.05;
    // h = x1 + (x1^2 + 2t)/2
    let h = poly(2, &[(vec![1, 0], 0, 1.0), (vec![2, 0], 0, 0.5), (vec![0, 0], 1, 1.0)]);
    assert!(h.is_caloric());
    // measure and cone elements share one trace grid small enough for the
    // exact transport solve
    let res = TraceResolution { slices: 16, grid: 16 };
    let opts = ConeOptions { trace: res, ..Default::default() };
    let mut vals = Vec::new();
    for r in [1.0, 0.3, 0.1, 0.03] {
        let mu = calpoly::caloric_measure_poly(&h, &Cylinder::new(ParaPoint::origin(2), r).unwrap(), &res).unwrap();
        vals.push(measures::cone_distance(&mu, r, Cone::Flat, &opts).unwrap().value);
    }
    let decreasing = vals.windows(2).all(|w| w[1] < w[0]);
    let last = *vals.last().unwrap();
    Outcome {
        pass: decreasing && last <= CAP,
        detail: format!("d_r at r=1,0.3,0.1,0.03: {:?} ; strictly decreasing {decreasing}, last <= {CAP}", vals.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()),
    }
}

fn a4() -> Outcome {
    const TOL1: f64 = 0.05;
    const TOL2: f64 = 0.1;
    let o = ParaPoint::origin(2);
    let radii: Vec<f64> = (0..9).map(|k| 1e-3 * 10f64.powf(k as f64 / 4.0)).collect();
    let res = TraceResolution { slices: 96, grid: 96 };
    let mut slopes = Vec::new();
    for h in [poly(2, &[(vec![1, 0], 0, 1.0)]), poly(2, &[(vec![1, 1], 0, 1.0)])] {
        let mu = calpoly::caloric_measure_multiscale(&h, &o, 0.2, 9, &res).unwrap();
        slopes.push(measures::pointwise_dimension(&mu, &o, &radii).unwrap().slope);
    }
    let pass = (slopes[0] - 3.0).abs() <= TOL1 && (slopes[1] - 4.0).abs() <= TOL2;
    Outcome { pass, detail: format!("slope x1 {:.4} (3 ± {TOL1}), x1x2 {:.4} (4 ± {TOL2})", slopes[0], slopes[1]) }
}

fn a5() -> Outcome {
    const TOL: f64 = 1e-6;
    const TOL_DIRAC: f64 = 1e-9;
    let sq = SpatialDomain::unit_square();
    let mut rng = ChaCha8Rng::seed_from_u64(20240501);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.gen_range(1..=30);
        let atoms: Vec<SpatialAtom> = (0..k)
            .map(|_| SpatialAtom { x: vec![rng.gen_range(0.01..0.99), rng.gen_range(0.01..0.99)], w: rng.gen_range(-1.0..1.0) })
            .collect();
        let inst = TransportInstance::new(sq.clone(), atoms).unwrap();
        let dual = transport::kr_norm_dual(&inst).unwrap().value;
        let (p, q) = inst.jordan();
        let primal = transport::wb1_primal(&p, &q, &sq).unwrap().value;
        worst = worst.max((primal - dual).abs() / dual.max(1.0));
    }
    let mut worst_dirac: f64 = 0.0;
    for _ in 0..50 {
        let x: Vec<f64> = vec![rng.gen_range(0.001..0.999), rng.gen_range(0.001..0.999)];
        let want = x[0].min(1.0 - x[0]).min(x[1]).min(1.0 - x[1]);
        let inst = TransportInstance::new(sq.clone(), vec![SpatialAtom { x, w: 1.0 }]).unwrap();
        worst_dirac = worst_dirac.max((transport::kr_norm_dual(&inst).unwrap().value - want).abs());
    }
    Outcome {
        pass: worst <= TOL && worst_dirac <= TOL_DIRAC,
        detail: format!("max |Wb1 - KR| / max(1, KR) = {worst:.2e} (tol {TOL}); max |‖ε_x‖ - dist| = {worst_dirac:.2e} (tol {TOL_DIRAC})"),
    }
}

fn a6() -> Outcome {
    const KS_TOL: f64 = 0.01;
    const SE_MULT: f64 = 3.0;
    let dom = DomainSpec::half_space(&[1.0], 0.0).unwrap();
    let pole = ParaPoint::new(&[1.0], 0.0);
    let cfg = WalkConfig { n_walks: 100_000, dt: 1e-4, seed: 7, max_time_depth: 1e3, boundary_tol: 1e-6 };
    let sim = stochastic::simulate_caloric_measure(&dom, &pole, &cfg).unwrap();
    let mut depths = stochastic::exit_depths(&sim, &pole);
    depths.sort_by(f64::total_cmp);
    let n = cfg.n_walks as f64;
    let cdf = |u: f64| erfc(1.0 / (2.0 * u.sqrt()));
    let mut ks: f64 = 0.0;
    for (i, &u) in depths.iter().enumerate() {
        let f = cdf(u);
        ks = ks.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    // truncated walks: the empirical CDF stays at exits/N up to the horizon
    ks = ks.max((cdf(cfg.max_time_depth) - depths.len() as f64 / n).abs());

    let p = ParaPoint::new(&[0.7], 0.0);
    let queries: Vec<ParaPoint> = (0..20).map(|k| ParaPoint::new(&[0.2 + 0.07 * k as f64], 0.1 + 0.045 * k as f64)).collect();
    let gcfg = WalkConfig { n_walks: 20_000, dt: 1e-5, seed: 9, max_time_depth: 10.0, boundary_tol: 1e-7 };
    let est = stochastic::estimate_green(&dom, &p, &queries, &gcfg).unwrap();
    let mut worst_z: f64 = 0.0;
    for (q, g) in queries.iter().zip(&est) {
        let u = q.t - p.t;
        let image = gauss(q.x[0] - p.x[0], u) - gauss(q.x[0] + p.x[0], u);
        worst_z = worst_z.max((g.value - image).abs() / g.std_err.max(1e-300));
    }
    Outcome {
        pass: ks <= KS_TOL && worst_z <= SE_MULT,
        detail: format!("KS {ks:.4} (tol {KS_TOL}); Green max |err|/SE {worst_z:.2} over 20 queries (tol {SE_MULT})"),
    }
}

fn a7() -> Outcome {
    const TOL: f64 = 0.10;
    const EXACT: f64 = 1e-9;
    let o = ParaPoint::origin(2);
    let opts = GridOptions { cells: 4, refine: 0 };
    let val = |r: f64, cells: usize| {
        let g = capacity::truncated_grids(&o, r, 1.0, 0.5, &GridOptions { cells, ..opts }).unwrap();
        capacity::grid_capacity(&g, KernelSpec::Gamma).unwrap().value
    };
    let v: Vec<f64> = [1.0, 2.0, 4.0].iter().map(|&r| val(r, opts.cells)).collect();
    let ratios = [v[1] / v[0], v[2] / v[1]];
    let scaling_ok = ratios.iter().all(|q| (q / 4.0 - 1.0).abs() <= TOL);
    // resolution sensitivity at r = 1
    let spread: Vec<f64> = [3usize, 5].iter().map(|&c| val(1.0, c) / v[0]).collect();
    // exact covariance: identical grid topology mapped by δ_ρ
    let g = capacity::truncated_grids(&o, 1.0, 1.0, 0.5, &GridOptions { cells: 3, refine: 0 }).unwrap();
    let inst = capacity::CapacityInstance::new(g.atoms, g.constraints, KernelSpec::Gamma).unwrap();
    let base = capacity::thermal_capacity(&inst).unwrap().value;
    let mut worst_cov: f64 = 0.0;
    for rho in [0.37, 1.9, 3.0] {
        let scaled = capacity::thermal_capacity(&inst.dilated(rho).unwrap()).unwrap().value;
        worst_cov = worst_cov.max((scaled / (base * rho * rho) - 1.0).abs());
    }
    Outcome {
        pass: scaling_ok && worst_cov <= EXACT,
        detail: format!(
            "value(2r)/value(r) for r=1,2: {:.4}, {:.4} (4 ± {TOL}); cells 3/5 vs 4 at r=1: {:.4}, {:.4}; δ_ρ covariance rel err {worst_cov:.1e} (tol {EXACT})",
            ratios[0], ratios[1], spread[0], spread[1]
        ),
    }
}

fn a8() -> Outcome {
    const TOL_ONE: f64 = 0.005;
    const TOL_ZERO: f64 = 0.01;
    let rule = MeanValueRule::default();
    let o = ParaPoint::origin(2);
    let one = heatcore::mean_value_quadrature(|_| 1.0, &HeatBall::new(o.clone(), 1.0).unwrap(), &rule).unwrap();
    // x1^2 + x2^2 - 4t solves the adjoint equation; its mean over the adjoint ball is its value at 0
    let h = CaloricPolynomial::from_terms(2, Orientation::Adjoint, &[(vec![2, 0], 0, 1.0), (vec![0, 2], 0, 1.0), (vec![0, 0], 1, -4.0)]).unwrap();
    assert!(h.is_caloric());
    let zero = heatcore::mean_value_quadrature(|p| h.eval(p), &HeatBall::adjoint(o, 1.0).unwrap(), &rule).unwrap();
    Outcome {
        pass: (one - 1.0).abs() <= TOL_ONE && zero.abs() <= TOL_ZERO * one,
        detail: format!("mean of 1 = {one:.6} (1 ± {TOL_ONE}); mean of |x|^2 - 4t = {zero:.2e} (|·| <= {TOL_ZERO})"),
    }
}

fn a9() -> Outcome {
    const THETA: f64 = 0.1;
    const CONE: f64 = 0.1;
    const DIM: f64 = 0.2;
    const RATIO: f64 = 0.2;
    let plus = DomainSpec::half_space(&[1.0, 0.0], 0.0).unwrap();
    let minus = DomainSpec::half_space(&[-1.0, 0.0], 0.0).unwrap();
    let pp = ParaPoint::new(&[1.0, 0.0], 1.0);
    let pm = ParaPoint::new(&[-1.0, 0.0], 1.0);
    let xi = ParaPoint::origin(2);
    let radii = [0.1, 0.03, 0.01, 0.003, 0.001];
    let cfg = WalkConfig { n_walks: 100_000, dt: 1e-4, seed: 2024, max_time_depth: 10.0, boundary_tol: 1e-6 };
    let recs = stochastic::two_phase_blowup_experiment(&plus, &minus, &pp, &pm, &xi, &radii, &cfg, &Default::default()).unwrap();
    let oracle = stochastic::halfspace_poisson_kernel(&[-1.0, 0.0], 0.0, &pm, &xi) / stochastic::halfspace_poisson_kernel(&[1.0, 0.0], 0.0, &pp, &xi);
    let first = &recs[0];
    let slope = recs.last().unwrap().dim_slope.unwrap();
    let ratio_err = recs.iter().map(|r| (r.mass_ratio / oracle - 1.0).abs()).fold(0.0, f64::max);
    let pass = first.theta <= THETA && first.cone_distance <= CONE && (slope - 3.0).abs() <= DIM && ratio_err <= RATIO;
    Outcome {
        pass,
        detail: format!(
            "r=0.1: Θ {:.4} (<= {THETA}), cone {:.4} (<= {CONE}); slope {slope:.3} (3 ± {DIM}); mass ratios {:?} vs {oracle:.4} (max rel {ratio_err:.3} <= {RATIO})",
            first.theta,
            first.cone_distance,
            recs.iter().map(|r| format!("{:.3}", r.mass_ratio)).collect::<Vec<_>>()
        ),
    }
}

fn a10() -> Outcome {
    const TOL: f64 = 0.05;
    let h = poly(2, &[(vec![2, 0], 0, 1.0), (vec![0, 2], 0, 1.0), (vec![0, 0], 1, 4.0)]);
    let o = ParaPoint::origin(2);
    let radii = [0.1, 0.3, 1.0];
    // sample of Σ^h resolved at every scale that is evaluated
    let mut pts = Vec::new();
    for &r in &radii {
        let set = calpoly::nodal_trace(&h, &Cylinder::new(o.clone(), r).unwrap(), &TraceResolution { slices: 160, grid: 160 }).unwrap();
        pts.extend(set.points.into_iter().map(|p| p.point));
    }
    let cloud = PointCloudSet::new(pts);
    let opts = FlatnessOptions { plane_samples: 32, time_samples: 32, ..Default::default() };
    let th: Vec<f64> = radii.iter().map(|&r| pargeo::theta_flatness(&cloud, &o, r, &FlatnessFamily::Planes, &opts).unwrap().theta).collect();
    let lo = th.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = th.iter().cloned().fold(0.0, f64::max);
    let var = (hi - lo) / lo;
    Outcome { pass: var < TOL, detail: format!("Θ at r=0.1,0.3,1: {:.4}, {:.4}, {:.4}; relative spread {var:.4} (< {TOL})", th[0], th[1], th[2]) }
}

fn main() {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('A')).collect();
    // runtime budget in seconds, part of each verdict
    let criteria: [(&str, &str, f64, fn() -> Outcome); 10] = [
        ("A1", "homogeneity law of F_r", 60.0, a1),
        ("A2", "exact F-value", 10.0, a2),
        ("A3", "tangent collapse", 300.0, a3),
        ("A4", "dimension slopes", 120.0, a4),
        ("A5", "KR duality", 60.0, a5),
        ("A6", "caloric-measure oracle", 120.0, a6),
        ("A7", "capacity scaling", 180.0, a7),
        ("A8", "mean-value identity", 10.0, a8),
        ("A9", "two-phase flatness", 600.0, a9),
        ("A10", "flatness scale invariance", 60.0, a10),
    ];
    let (mut passed, mut failed) = (0, 0);
    for (id, name, budget, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let start = Instant::now();
        let out = f();
        let secs = start.elapsed().as_secs_f64();
        let pass = out.pass && secs <= budget;
        println!("{id} {} {name}: {} [{secs:.1}s of {budget:.0}s]", if pass { "PASS" } else { "FAIL" }, out.detail);
        if pass {
            passed += 1;
        } else {
            failed += 1;
        }
    }
    println!("acceptance: {passed} passed, {failed} failed");
}
