//! Monte Carlo caloric measure. A walk started at the pole runs the
//! space-time process `s ↦ (X_s, t_pole - s)` with Gaussian spatial increments
//! of variance `2 dt` per coordinate, so that the spatial generator is `Δ`.
//! The first step that leaves the domain is bisected to the boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calpoly::CaloricPolynomial;
use crate::error::{LabError, Result};
use crate::heatcore::gamma_diff;
use crate::measures::{self, Atom, ConeOptions, DiscreteMeasure};
use crate::pargeo::{
    self, check_radius, Coords, CylinderKind, FlatnessFamily, FlatnessOptions, ParaPoint, PointCloudSet, TruncatedCylinder,
    TruncatedKind,
};

/// Lip(1, 1/2) graph function `ψ(x', t) = a·x' + b|x'| + c|t|^{1/2} + d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFn {
    #[serde(default)]
    pub linear: Vec<f64>,
    #[serde(default)]
    pub abs_coef: f64,
    #[serde(default)]
    pub time_coef: f64,
    #[serde(default)]
    pub offset: f64,
}

impl GraphFn {
    pub fn eval(&self, xp: &[f64], t: f64) -> f64 {
        let lin: f64 = self.linear.iter().zip(xp).map(|(a, x)| a * x).sum();
        let norm = xp.iter().map(|v| v * v).sum::<f64>().sqrt();
        lin + self.abs_coef * norm + self.time_coef * t.abs().sqrt() + self.offset
    }

    /// Declared seminorm `L` with `|ψ(p) - ψ(q)| <= L max(|x'-y'|, |t-s|^{1/2})`.
    pub fn lipschitz(&self) -> f64 {
        self.linear.iter().map(|v| v * v).sum::<f64>().sqrt() + self.abs_coef.abs() + self.time_coef.abs()
    }

    /// Largest ratio `|ψ(p) - ψ(q)| / max(|x'-y'|, |t-s|^{1/2})` over random
    /// pairs in `[-1, 1]^{n-1} × [-1, 1]`.
    pub fn spot_check(&self, dim: usize, pairs: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..pairs {
            let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (t, s): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let d = a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt().max((t - s).abs().sqrt());
            if d > 0.0 {
                worst = worst.max((self.eval(&a, t) - self.eval(&b, s)).abs() / d);
            }
        }
        worst
    }
}

/// Space-time domains with a total membership test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainSpec {
    /// `{x·e > offset}`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
    /// `{lo < x·e < hi}`.
    Slab { normal: Vec<f64>, lo: f64, hi: f64 },
    /// `{lo < t < hi}`; missing bounds are infinite.
    TimeSlab {
        #[serde(default)]
        lo: Option<f64>,
        #[serde(default)]
        hi: Option<f64>,
    },
    /// `{x_n > ψ(x', t)}` (above) or `{x_n < ψ(x', t)}`.
    Graph { psi: GraphFn, above: bool },
    /// `{h > 0}` or `{h < 0}`.
    SignSet { h: CaloricPolynomial, positive: bool },
    Complement { of: Box<DomainSpec> },
    Cylinder { center: ParaPoint, r: f64, kind: CylinderKind },
    Intersection { parts: Vec<DomainSpec> },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let l = dot(v, v).sqrt();
    if !(l > 0.0 && l.is_finite()) {
        return Err(LabError::invalid("normal must be a nonzero finite vector"));
    }
    Ok(v.iter().map(|x| x / l).collect())
}

impl DomainSpec {
    pub fn half_space(normal: &[f64], offset: f64) -> Result<Self> {
        Ok(DomainSpec::HalfSpace { normal: unit(normal)?, offset })
    }

    pub fn complement(self) -> Self {
        DomainSpec::Complement { of: Box::new(self) }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DomainSpec::HalfSpace { normal, offset } => {
                unit(normal)?;
                if !offset.is_finite() {
                    return Err(LabError::invalid("offset must be finite"));
                }
            }
            DomainSpec::Slab { normal, lo, hi } => {
                unit(normal)?;
                if !(lo < hi) {
                    return Err(LabError::invalid("slab needs lo < hi"));
                }
            }
            DomainSpec::TimeSlab { lo, hi } => {
                if let (Some(a), Some(b)) = (lo, hi) {
                    if !(a < b) {
                        return Err(LabError::invalid("time slab needs lo < hi"));
                    }
                }
            }
            DomainSpec::Graph { psi, .. } => {
                if !psi.lipschitz().is_finite() {
                    return Err(LabError::invalid("graph coefficients must be finite"));
                }
            }
            DomainSpec::SignSet { h, .. } => {
                if h.is_zero() {
                    return Err(LabError::invalid("sign set of the zero polynomial"));
                }
            }
            DomainSpec::Complement { of } => of.validate()?,
            DomainSpec::Cylinder { r, .. } => check_radius(*r)?,
            DomainSpec::Intersection { parts } => {
                if parts.is_empty() {
                    return Err(LabError::invalid("intersection of no domains"));
                }
                for p in parts {
                    p.validate()?;
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &ParaPoint) -> bool {
        match self {
            DomainSpec::HalfSpace { normal, offset } => dot(normal, &p.x) > *offset,
            DomainSpec::Slab { normal, lo, hi } => {
                let s = dot(normal, &p.x);
                s > *lo && s < *hi
            }
            DomainSpec::TimeSlab { lo, hi } => lo.map_or(true, |a| p.t > a) && hi.map_or(true, |b| p.t < b),
            DomainSpec::Graph { psi, above } => {
                let n = p.x.len();
                let v = p.x[n - 1] - psi.eval(&p.x[..n - 1], p.t);
                if *above {
                    v > 0.0
                } else {
                    v < 0.0
                }
            }
            DomainSpec::SignSet { h, positive } => {
                let v = h.eval(p);
                if *positive {
                    v > 0.0
                } else {
                    v < 0.0
                }
            }
            DomainSpec::Complement { of } => !of.contains(p),
            DomainSpec::Cylinder { center, r, kind } => {
                let d = p.sub(center);
                let (lo, hi) = match kind {
                    CylinderKind::Full => (-r * r, r * r),
                    CylinderKind::Backward => (-r * r, 0.0),
                    CylinderKind::Forward => (0.0, r * r),
                };
                d.spatial_norm() < *r && d.t > lo && d.t < hi
            }
            DomainSpec::Intersection { parts } => parts.iter().all(|d| d.contains(p)),
        }
    }

    /// Lower bound on the parabolic distance from `p` to the boundary, valid on
    /// both sides; zero when no bound is available.
    pub fn boundary_dist_lower(&self, p: &ParaPoint) -> f64 {
        match self {
            DomainSpec::HalfSpace { normal, offset } => (dot(normal, &p.x) - offset).abs(),
            DomainSpec::Slab { normal, lo, hi } => {
                let s = dot(normal, &p.x);
                (s - lo).abs().min((s - hi).abs())
            }
            DomainSpec::TimeSlab { lo, hi } => {
                let a = lo.map_or(f64::INFINITY, |a| (p.t - a).abs().sqrt());
                let b = hi.map_or(f64::INFINITY, |b| (p.t - b).abs().sqrt());
                a.min(b)
            }
            DomainSpec::Graph { psi, .. } => {
                let n = p.x.len();
                (p.x[n - 1] - psi.eval(&p.x[..n - 1], p.t)).abs() / (1.0 + psi.lipschitz())
            }
            DomainSpec::SignSet { .. } => 0.0,
            DomainSpec::Complement { of } => of.boundary_dist_lower(p),
            DomainSpec::Cylinder { center, r, kind } => {
                let d = p.sub(center);
                let lateral = (r - d.spatial_norm()).abs();
                let (lo, hi) = match kind {
                    CylinderKind::Full => (-r * r, r * r),
                    CylinderKind::Backward => (-r * r, 0.0),
                    CylinderKind::Forward => (0.0, r * r),
                };
                lateral.min((d.t - lo).abs().sqrt()).min((d.t - hi).abs().sqrt())
            }
            DomainSpec::Intersection { parts } => {
                parts.iter().map(|d| d.boundary_dist_lower(p)).fold(f64::INFINITY, f64::min)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkConfig {
    pub n_walks: usize,
    pub dt: f64,
    pub seed: u64,
    pub max_time_depth: f64,
    pub boundary_tol: f64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig { n_walks: 100_000, dt: 1e-4, seed: 0, max_time_depth: 1e3, boundary_tol: 1e-6 }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_walks == 0 {
            return Err(LabError::invalid("n_walks must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(LabError::invalid("dt must be positive"));
        }
        if !(self.max_time_depth > 0.0) {
            return Err(LabError::invalid("max_time_depth must be positive"));
        }
        if !(self.boundary_tol >= 0.0) {
            return Err(LabError::invalid("boundary_tol must be nonnegative"));
        }
        Ok(())
    }
}

/// Steps whose Gaussian displacement could reach the boundary are kept at
/// `dt`; farther away the step grows to `d^2 / 72`, six standard deviations
/// of the spatial increment below `d`.
const STEP_DIVISOR: f64 = 72.0;

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for walk `walk` of task `task`.
pub(crate) fn walk_rng(seed: u64, task: u64, walk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(task)));
    rng.set_stream(walk);
    rng
}

enum WalkEnd {
    Exit(ParaPoint),
    /// Still inside at the time floor.
    Truncated(ParaPoint),
}

/// Runs one walk from `start` until it exits or its time drops to `t_floor`.
fn walk(domain: &DomainSpec, start: &ParaPoint, t_floor: f64, dt: f64, tol: f64, rng: &mut ChaCha8Rng) -> WalkEnd {
    let n = start.x.len();
    let mut p = start.clone();
    let mut q = ParaPoint { x: Coords::from_elem(0.0, n), t: 0.0 };
    loop {
        if p.t <= t_floor {
            return WalkEnd::Truncated(p);
        }
        let d = domain.boundary_dist_lower(&p);
        let tau = dt.max(d * d / STEP_DIVISOR).min(p.t - t_floor);
        let sd = (2.0 * tau).sqrt();
        for (qi, pi) in q.x.iter_mut().zip(&p.x) {
            let z: f64 = rng.sample(StandardNormal);
            *qi = pi + sd * z;
        }
        q.t = p.t - tau;
        if !domain.contains(&q) {
            return WalkEnd::Exit(bisect_exit(domain, &p, &q, tol));
        }
        std::mem::swap(&mut p, &mut q);
    }
}

/// Bisects the space-time segment from `inside` to `outside` until its
/// parabolic length is below `tol`; returns the outside end.
fn bisect_exit(domain: &DomainSpec, inside: &ParaPoint, outside: &ParaPoint, tol: f64) -> ParaPoint {
    let (mut a, mut b) = (inside.clone(), outside.clone());
    for _ in 0..200 {
        if a.dist(&b) <= tol {
            break;
        }
        let m = ParaPoint { x: a.x.iter().zip(&b.x).map(|(u, v)| 0.5 * (u + v)).collect(), t: 0.5 * (a.t + b.t) };
        if domain.contains(&m) {
            a = m;
        } else {
            b = m;
        }
    }
    b
}

/// Exit distribution of a batch of walks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaloricSimulation {
    /// Exit atoms with weight `1 / n_walks`, in walk order.
    pub measure: DiscreteMeasure,
    pub exits: usize,
    pub truncated: usize,
    pub walks: usize,
}

impl CaloricSimulation {
    pub fn exit_fraction(&self) -> f64 {
        self.exits as f64 / self.walks as f64
    }

    pub fn truncated_fraction(&self) -> f64 {
        self.truncated as f64 / self.walks as f64
    }
}

fn check_pole(domain: &DomainSpec, pole: &ParaPoint) -> Result<()> {
    domain.validate()?;
    if !pole.is_finite() {
        return Err(LabError::invalid("pole must be finite"));
    }
    if !domain.contains(pole) {
        return Err(LabError::PointNotAdmissible(format!("pole {pole:?} is not inside the domain")));
    }
    Ok(())
}

fn run_walks(domain: &DomainSpec, start: &ParaPoint, cfg: &WalkConfig, task: u64, depth: f64) -> Vec<WalkEnd> {
    let t_floor = start.t - depth;
    (0..cfg.n_walks as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = walk_rng(cfg.seed, task, k);
            walk(domain, start, t_floor, cfg.dt, cfg.boundary_tol, &mut rng)
        })
        .collect()
}

/// Exit point of each walk, `None` for walks still inside after `depth`.
pub(crate) fn exit_points(domain: &DomainSpec, start: &ParaPoint, cfg: &WalkConfig, task: u64, depth: f64) -> Vec<Option<ParaPoint>> {
    run_walks(domain, start, cfg, task, depth)
        .into_iter()
        .map(|e| match e {
            WalkEnd::Exit(p) => Some(p),
            WalkEnd::Truncated(_) => None,
        })
        .collect()
}

/// Empirical caloric measure `ω^{pole}`.
pub fn simulate_caloric_measure(domain: &DomainSpec, pole: &ParaPoint, cfg: &WalkConfig) -> Result<CaloricSimulation> {
    cfg.validate()?;
    check_pole(domain, pole)?;
    let ends = run_walks(domain, pole, cfg, 0, cfg.max_time_depth);
    let w = 1.0 / cfg.n_walks as f64;
    let mut atoms = Vec::new();
    let mut truncated = 0;
    for e in ends {
        match e {
            WalkEnd::Exit(p) => atoms.push(Atom { x: p.x, t: p.t, w }),
            WalkEnd::Truncated(_) => truncated += 1,
        }
    }
    if atoms.is_empty() {
        return Err(LabError::ZeroMass("no walk left the domain".into()));
    }
    let exits = atoms.len();
    Ok(CaloricSimulation { measure: DiscreteMeasure { signed: false, atoms }, exits, truncated, walks: cfg.n_walks })
}

/// Exit depths `t_pole - t_exit` of the walks that left, in walk order.
pub fn exit_depths(sim: &CaloricSimulation, pole: &ParaPoint) -> Vec<f64> {
    sim.measure.atoms.iter().map(|a| pole.t - a.t).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreenEstimate {
    pub value: f64,
    pub std_err: f64,
}

/// `G(x̄, p̄) = Γ(x̄ - p̄) - E[Γ(X_τ - p̄)]` for each query `x̄`. Walks stop at
/// the pole's time, after which the kernel term vanishes.
pub fn estimate_green(domain: &DomainSpec, pole: &ParaPoint, queries: &[ParaPoint], cfg: &WalkConfig) -> Result<Vec<GreenEstimate>> {
    cfg.validate()?;
    domain.validate()?;
    queries
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            if q.dim() != pole.dim() {
                return Err(LabError::DimensionMismatch { expected: pole.dim(), got: q.dim() });
            }
            if !domain.contains(q) {
                return Err(LabError::PointNotAdmissible(format!("query {q:?} is not inside the domain")));
            }
            if q.t <= pole.t {
                return Ok(GreenEstimate { value: 0.0, std_err: 0.0 });
            }
            let g0 = gamma_diff(&q.x, q.t, &pole.x, pole.t);
            let ends = run_walks(domain, q, cfg, 1 + qi as u64, q.t - pole.t);
            let samples: Vec<f64> = ends
                .iter()
                .map(|e| match e {
                    WalkEnd::Exit(p) => g0 - gamma_diff(&p.x, p.t, &pole.x, pole.t),
                    WalkEnd::Truncated(_) => g0,
                })
                .collect();
            Ok(mean_and_se(&samples)).map(|(value, std_err)| GreenEstimate { value, std_err })
        })
        .collect()
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let k = v.len() as f64;
    let mean = v.iter().sum::<f64>() / k;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// Caloric-measure density of the half-space `{x·e > offset}` at boundary
/// point `y` for pole `p`, against `dσ dt`: `(d / u) Γ(x - y, u)`.
pub fn halfspace_poisson_kernel(normal: &[f64], offset: f64, pole: &ParaPoint, y: &ParaPoint) -> f64 {
    let u = pole.t - y.t;
    if u <= 0.0 {
        return 0.0;
    }
    let d = dot(normal, &pole.x) - offset;
    d / u * gamma_diff(&pole.x, pole.t, &y.x, y.t)
}

/// Hitting probabilities of a space-time window estimated over a grid of
/// starting points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BourgainRecord {
    pub r: f64,
    pub min_hit_prob: f64,
    /// `Cap(R^-_a(ξ; r) ∩ Ω^c) / r^n`.
    pub cap_ratio: f64,
    pub quotient: f64,
    /// The complement misses the truncated cylinder, so the estimate is vacuous.
    pub vacuous: bool,
    pub grid_points: usize,
}

/// Grid resolution of the Bourgain diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BourgainOptions {
    /// Starting points per spatial axis.
    pub space: usize,
    /// Starting time levels.
    pub levels: usize,
    pub capacity: crate::capacity::GridOptions,
}

impl Default for BourgainOptions {
    fn default() -> Self {
        BourgainOptions { space: 4, levels: 3, capacity: crate::capacity::GridOptions::default() }
    }
}

/// Minimum over `x̄ ∈ R̂^+_a(ξ; r) ∩ Ω` of `ω^{x̄}(C_{Mr}(ξ) ∩ {|t - t_ξ| < r^2})`
/// together with the capacity ratio of the complement.
pub fn bourgain_check(
    domain: &DomainSpec,
    xi: &ParaPoint,
    r: f64,
    a: f64,
    big_m: f64,
    cfg: &WalkConfig,
    opts: &BourgainOptions,
) -> Result<BourgainRecord> {
    cfg.validate()?;
    domain.validate()?;
    check_radius(r)?;
    if !(big_m >= 1.0) {
        return Err(LabError::invalid("M must be at least 1"));
    }
    let hat = TruncatedCylinder::new(xi.clone(), r, TruncatedKind::ForwardHat { a })?;
    let (lo, hi) = hat.time_span();
    let spatial = pargeo::ball_lattice(xi.dim(), r, opts.space.max(1));
    let mut starts = Vec::new();
    for k in 0..opts.levels.max(1) {
        let t = lo + (hi - lo) * (k as f64 + 0.5) / opts.levels.max(1) as f64;
        for y in &spatial {
            let p = ParaPoint { x: xi.x.iter().zip(y).map(|(c, v)| c + v).collect(), t };
            if domain.contains(&p) && domain.boundary_dist_lower(&p) > cfg.boundary_tol {
                starts.push(p);
            }
        }
    }
    if starts.is_empty() {
        return Err(LabError::Empty("no grid point of the forward cylinder lies in the domain".into()));
    }
    let mut min_hit: f64 = 1.0;
    for (si, s) in starts.iter().enumerate() {
        // exits below the window cannot count
        let depth = s.t - (xi.t - r * r);
        let ends = run_walks(domain, s, cfg, 1_000_000 + si as u64, depth);
        let hits = ends
            .iter()
            .filter(|e| match e {
                WalkEnd::Exit(p) => p.sub(xi).spatial_norm() < big_m * r && (p.t - xi.t).abs() < r * r,
                WalkEnd::Truncated(_) => false,
            })
            .count();
        min_hit = min_hit.min(hits as f64 / cfg.n_walks as f64);
    }
    let cap = crate::capacity::complement_capacity(domain, xi, r, a, &opts.capacity)?;
    let cap_ratio = cap.numerator / r.powi(xi.dim() as i32);
    let vacuous = cap.empty_complement;
    let quotient = if cap_ratio > 0.0 { min_hit / cap_ratio } else { f64::INFINITY };
    Ok(BourgainRecord { r, min_hit_prob: min_hit, cap_ratio, quotient, vacuous, grid_points: starts.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderFit {
    pub alpha: f64,
    pub residual: f64,
    pub dists: Vec<f64>,
    pub values: Vec<GreenEstimate>,
}

/// Exponent of `G(·, pole)` along the ray `ξ + ρ e` as `ρ → 0`.
pub fn boundary_holder_fit(
    domain: &DomainSpec,
    xi: &ParaPoint,
    direction: &[f64],
    pole: &ParaPoint,
    cfg: &WalkConfig,
    radii: &[f64],
) -> Result<HolderFit> {
    cfg.validate()?;
    if radii.len() < 2 {
        return Err(LabError::invalid("need at least two radii"));
    }
    if radii.iter().any(|&r| !(r > cfg.boundary_tol)) {
        return Err(LabError::invalid("radii must exceed boundary_tol"));
    }
    let e = unit(direction)?;
    if e.len() != xi.dim() {
        return Err(LabError::DimensionMismatch { expected: xi.dim(), got: e.len() });
    }
    let queries: Vec<ParaPoint> = radii
        .iter()
        .map(|&r| ParaPoint { x: xi.x.iter().zip(&e).map(|(c, v)| c + r * v).collect(), t: xi.t })
        .collect();
    let values = estimate_green(domain, pole, &queries, cfg)?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (r, g) in radii.iter().zip(&values) {
        if g.value > 0.0 {
            xs.push(*r);
            ys.push(g.value);
        }
    }
    if xs.len() < 2 {
        return Err(LabError::ZeroMass("fewer than two positive Green samples".into()));
    }
    let fit = measures::fit_loglog(&xs, &ys)?;
    Ok(HolderFit { alpha: fit.slope, residual: fit.residual, dists: radii.to_vec(), values })
}

/// Knobs for the resampled simulation that concentrates walks near a target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocusOptions {
    /// Resampling levels between the pole time and the target window.
    pub levels: usize,
    /// Resampling levels inside the window `t_target ± r^2`.
    pub window_levels: usize,
    /// Resample back to the full population when the effective sample size
    /// drops below this fraction of it.
    pub ess_fraction: f64,
}

impl Default for FocusOptions {
    fn default() -> Self {
        FocusOptions { levels: 48, window_levels: 8, ess_fraction: 0.9 }
    }
}

/// Weighted exit measure that is unbiased for `ω^{pole}` on times
/// `t > t_target - r^2`. Walks are resampled at fixed time levels under a
/// twist that approximates the probability of a first exit near the target:
/// the half-line first-passage probability inside the window along the
/// boundary distance times a Gaussian factor along the boundary. Every exit
/// atom carries the importance weight that undoes the twist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusedSimulation {
    pub measure: DiscreteMeasure,
    /// Weight of walks still inside when they reached `t_target - r^2`.
    pub truncated_mass: f64,
    pub resamplings: usize,
}

pub fn simulate_focused(
    domain: &DomainSpec,
    pole: &ParaPoint,
    target: &ParaPoint,
    r: f64,
    cfg: &WalkConfig,
    opts: &FocusOptions,
) -> Result<FocusedSimulation> {
    cfg.validate()?;
    check_pole(domain, pole)?;
    check_radius(r)?;
    let t_floor = target.t - r * r;
    if pole.t <= t_floor {
        return Err(LabError::invalid("pole must be later than the target window"));
    }
    let span = pole.t - target.t;
    let window = 2.0 * r * r;
    // geometric levels in the remaining time to the window, then even levels
    // across the window down to the floor
    let mut levels: Vec<f64> = Vec::new();
    if span > r * r {
        let q = (r * r / span).powf(1.0 / opts.levels.max(1) as f64);
        for k in 1..=opts.levels.max(1) {
            levels.push(target.t + span * q.powi(k as i32));
        }
    }
    let top = levels.last().copied().unwrap_or(pole.t).min(target.t + r * r);
    let inner = opts.window_levels.max(1);
    for k in 1..=inner {
        levels.push(top - (top - t_floor) * k as f64 / inner as f64);
    }
    // first passage through the boundary inside the window along the normal,
    // Gaussian spread along the boundary
    let twist = |p: &ParaPoint| -> f64 {
        let d = domain.boundary_dist_lower(p).max(0.0);
        let d2: f64 = p.x.iter().zip(&target.x).map(|(a, b)| (a - b) * (a - b)).sum();
        let tau = (p.t - t_floor).max(1e-300);
        let hit = ln_erfc_diff(d / (2.0 * tau.sqrt()), if tau > window { d / (2.0 * (tau - window).sqrt()) } else { f64::INFINITY });
        hit.max(-700.0) - (d2 - d * d).max(0.0) / (4.0 * ((p.t - target.t).max(0.0) + r * r))
    };
    let n = cfg.n_walks;
    let mut pos: Vec<ParaPoint> = vec![pole.clone(); n];
    let mut logw: Vec<f64> = vec![0.0; n];
    let mut log_twist: Vec<f64> = vec![0.0; n];
    let mut alive: Vec<usize> = (0..n).collect();
    let mut atoms: Vec<(usize, usize, Atom, f64)> = Vec::new();
    let mut resamplings = 0;
    let base = -(n as f64).ln();
    for (li, &t_next) in levels.iter().enumerate() {
        let step: Vec<(usize, WalkEnd)> = alive
            .par_iter()
            .map(|&i| {
                let mut rng = walk_rng(cfg.seed, 2_000_000 + li as u64, i as u64);
                (i, walk(domain, &pos[i], t_next, cfg.dt, cfg.boundary_tol, &mut rng))
            })
            .collect();
        let mut still = Vec::with_capacity(step.len());
        for (i, end) in step {
            match end {
                WalkEnd::Exit(p) => {
                    let lw = logw[i] - log_twist[i];
                    atoms.push((li, i, Atom { x: p.x, t: p.t, w: 0.0 }, lw));
                }
                WalkEnd::Truncated(p) => {
                    pos[i] = p;
                    still.push(i);
                }
            }
        }
        alive = still;
        if li + 1 == levels.len() || alive.is_empty() {
            break;
        }
        for &i in &alive {
            let lt = twist(&pos[i]);
            logw[i] += lt - log_twist[i];
            log_twist[i] = lt;
        }
        let (ess, _) = ess_of(&alive, &logw, base);
        if ess < opts.ess_fraction * n as f64 {
            let mut rng = walk_rng(cfg.seed, 3_000_000 + li as u64, 0);
            resample(&mut alive, n, &mut pos, &mut logw, &mut log_twist, &mut rng);
            resamplings += 1;
        }
    }
    let truncated_mass: f64 = alive.iter().map(|&i| (logw[i] - log_twist[i] + base).exp()).sum();
    atoms.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let atoms = atoms
        .into_iter()
        .map(|(_, _, mut a, lw)| {
            a.w = (lw + base).exp();
            a
        })
        .collect();
    Ok(FocusedSimulation { measure: DiscreteMeasure { signed: false, atoms }, truncated_mass, resamplings })
}

/// `ln(erfc(a) - erfc(b))` for `0 <= a < b <= ∞`.
fn ln_erfc_diff(a: f64, b: f64) -> f64 {
    let ln_erfc = |x: f64| -> f64 {
        if x < 5.0 {
            libm::erfc(x).ln()
        } else {
            let x2 = x * x;
            -x2 - (x * std::f64::consts::PI.sqrt()).ln() + (1.0 - 0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2)).ln()
        }
    };
    let la = ln_erfc(a);
    if b.is_infinite() {
        return la;
    }
    let lb = ln_erfc(b);
    la + (-(lb - la).exp()).ln_1p()
}

fn ess_of(alive: &[usize], logw: &[f64], base: f64) -> (f64, f64) {
    let mx = alive.iter().map(|&i| logw[i]).fold(f64::NEG_INFINITY, f64::max);
    let (mut s, mut s2) = (0.0, 0.0);
    for &i in alive {
        let w = (logw[i] - mx).exp();
        s += w;
        s2 += w * w;
    }
    (s * s / s2, mx + s.ln() + base)
}

/// Systematic resampling of the live walks into `n` slots; the copies share
/// the total weight.
fn resample(alive: &mut Vec<usize>, n: usize, pos: &mut [ParaPoint], logw: &mut [f64], log_twist: &mut [f64], rng: &mut ChaCha8Rng) {
    let k = alive.len();
    let mx = alive.iter().map(|&i| logw[i]).fold(f64::NEG_INFINITY, f64::max);
    let ws: Vec<f64> = alive.iter().map(|&i| (logw[i] - mx).exp()).collect();
    let total: f64 = ws.iter().sum();
    let new_logw = mx + (total / n as f64).ln();
    let u0: f64 = rng.gen::<f64>() / n as f64;
    let mut picks = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut j = 0;
    for m in 0..n {
        let u = u0 + m as f64 / n as f64;
        while j + 1 < k && cum + ws[j] / total < u {
            cum += ws[j] / total;
            j += 1;
        }
        picks.push(alive[j]);
    }
    let new_pos: Vec<ParaPoint> = picks.iter().map(|&i| pos[i].clone()).collect();
    let new_tw: Vec<f64> = picks.iter().map(|&i| log_twist[i]).collect();
    for (i, (p, tw)) in new_pos.into_iter().zip(new_tw).enumerate() {
        pos[i] = p;
        log_twist[i] = tw;
        logw[i] = new_logw;
    }
    *alive = (0..n).collect();
}

/// One blow-up radius of the two-phase experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub r: f64,
    pub mass_plus: f64,
    pub mass_minus: f64,
    /// `ω^-(C_r(ξ)) / ω^+(C_r(ξ))`.
    pub mass_ratio: f64,
    /// `F_1` of the normalized blow-up of `ω^+`.
    pub f1: f64,
    pub cone_distance: f64,
    pub theta: f64,
    /// Slope of `log ω^+(C_r)` over the radii processed so far.
    pub dim_slope: Option<f64>,
    pub atoms_plus: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPhaseOptions {
    pub focus: FocusOptions,
    pub cone: ConeOptions,
    pub flatness: FlatnessOptions,
    /// Cap on the number of support points handed to the flatness evaluation.
    pub flatness_points: usize,
}

impl Default for TwoPhaseOptions {
    fn default() -> Self {
        TwoPhaseOptions {
            focus: FocusOptions::default(),
            cone: ConeOptions::default(),
            flatness: FlatnessOptions { directions: 128, refine_iters: 24, plane_samples: 24, time_samples: 24, ..Default::default() },
            flatness_points: 40_000,
        }
    }
}

/// Blow-ups `c_j T_{ξ, r_j}[ω^±]` with `c_j = 1 / ω^+(C_{r_j}(ξ))` for a pair
/// of disjoint domains sharing the boundary point `ξ`.
#[allow(clippy::too_many_arguments)]
pub fn two_phase_blowup_experiment(
    plus: &DomainSpec,
    minus: &DomainSpec,
    pole_plus: &ParaPoint,
    pole_minus: &ParaPoint,
    xi: &ParaPoint,
    radii: &[f64],
    cfg: &WalkConfig,
    opts: &TwoPhaseOptions,
) -> Result<Vec<ExperimentRecord>> {
    plus.validate()?;
    minus.validate()?;
    if plus.contains(xi) || minus.contains(xi) {
        return Err(LabError::PointNotAdmissible("ξ must lie on the common boundary".into()));
    }
    if plus.boundary_dist_lower(xi) > cfg.boundary_tol.max(1e-12) || minus.boundary_dist_lower(xi) > cfg.boundary_tol.max(1e-12) {
        return Err(LabError::PointNotAdmissible("ξ is not on both boundaries".into()));
    }
    if radii.is_empty() {
        return Err(LabError::invalid("no radii given"));
    }
    let mut records: Vec<ExperimentRecord> = Vec::new();
    let mut fit_r = Vec::new();
    let mut fit_m = Vec::new();
    for (k, &r) in radii.iter().enumerate() {
        check_radius(r)?;
        let scale = r * r;
        let sub = WalkConfig { dt: cfg.dt * scale, seed: mix64(cfg.seed ^ k as u64), boundary_tol: cfg.boundary_tol * r, ..*cfg };
        let wp = simulate_focused(plus, pole_plus, xi, r, &sub, &opts.focus)?;
        let wm = simulate_focused(minus, pole_minus, xi, r, &WalkConfig { seed: mix64(sub.seed ^ 0x5a5a), ..sub }, &opts.focus)?;
        let mp = wp.measure.mass_in(xi, r);
        let mm = wm.measure.mass_in(xi, r);
        if !(mp > 0.0) {
            return Err(LabError::ZeroMass(format!("ω^+(C_{r}(ξ)) vanishes")));
        }
        let blown = measures::blow_up(&wp.measure.restricted(xi, r), xi, r, 1.0 / mp)?;
        let f1 = measures::f_r(&blown, 1.0)?;
        let cone = measures::cone_distance(&blown, 1.0, measures::Cone::Flat, &opts.cone)?;
        let support: Vec<ParaPoint> = blown.atoms.iter().map(Atom::point).collect();
        let stride = support.len().div_ceil(opts.flatness_points.max(1)).max(1);
        let cloud = PointCloudSet::new(support.into_iter().step_by(stride).collect());
        let theta = pargeo::theta_flatness(&cloud, &ParaPoint::origin(xi.dim()), 1.0, &FlatnessFamily::Planes, &opts.flatness)?.theta;
        fit_r.push(r);
        fit_m.push(mp);
        let dim_slope = if fit_r.len() >= 2 { Some(measures::fit_loglog(&fit_r, &fit_m)?.slope) } else { None };
        records.push(ExperimentRecord {
            r,
            mass_plus: mp,
            mass_minus: mm,
            mass_ratio: mm / mp,
            f1,
            cone_distance: cone.value,
            theta,
            dim_slope,
            atoms_plus: blown.atoms.len(),
        });
    }
    Ok(records)
}
