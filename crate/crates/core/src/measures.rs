//! Discrete Radon measures on space-time and the tangent-measure toolkit:
//! `F_r`, the localized transport distance `d_{C_r}`, distance to cones of
//! caloric measures, blow-ups, pointwise dimension and the VMO diagnostic.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calpoly::{self, CaloricPolynomial, Orientation, TraceResolution};
use crate::error::{LabError, Result};
use crate::flow;
use crate::lp::{self, DenseMatrix};
use crate::pargeo::{check_radius, golden_section, AdmissiblePlane, Coords, Cylinder, ParaPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub x: Coords,
    pub t: f64,
    pub w: f64,
}

impl Atom {
    pub fn new(x: &[f64], t: f64, w: f64) -> Self {
        Atom { x: Coords::from_slice(x), t, w }
    }

    pub fn point(&self) -> ParaPoint {
        ParaPoint { x: self.x.clone(), t: self.t }
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        let s = self.x.iter().map(|v| v * v).sum::<f64>().sqrt();
        s.max(self.t.abs().sqrt())
    }

    #[inline]
    fn dist(&self, other: &Atom) -> f64 {
        let s2: f64 = self.x.iter().zip(&other.x).map(|(a, b)| (a - b) * (a - b)).sum();
        s2.sqrt().max((self.t - other.t).abs().sqrt())
    }

    #[inline]
    fn dist_to(&self, c: &ParaPoint) -> f64 {
        let s2: f64 = self.x.iter().zip(&c.x).map(|(a, b)| (a - b) * (a - b)).sum();
        s2.sqrt().max((self.t - c.t).abs().sqrt())
    }
}

/// Weighted space-time point cloud. Weights are nonnegative unless `signed`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteMeasure {
    pub signed: bool,
    pub atoms: Vec<Atom>,
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        let m = DiscreteMeasure { signed: false, atoms };
        m.validate()?;
        Ok(m)
    }

    pub fn new_signed(atoms: Vec<Atom>) -> Result<Self> {
        let m = DiscreteMeasure { signed: true, atoms };
        m.validate()?;
        Ok(m)
    }

    pub fn dirac(p: &ParaPoint, w: f64) -> Self {
        DiscreteMeasure { signed: false, atoms: vec![Atom { x: p.x.clone(), t: p.t, w }] }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        for a in &self.atoms {
            if Some(a.x.len()) != n {
                return Err(LabError::DimensionMismatch { expected: n.unwrap_or(0), got: a.x.len() });
            }
            if !(a.t.is_finite() && a.w.is_finite() && a.x.iter().all(|v| v.is_finite())) {
                return Err(LabError::invalid("measure atom has non-finite data"));
            }
            if !self.signed && a.w < 0.0 {
                return Err(LabError::SignedMeasure);
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> Option<usize> {
        self.atoms.first().map(|a| a.x.len())
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.w).sum()
    }

    /// `μ(C_r(center))` with the open parabolic ball.
    pub fn mass_in(&self, center: &ParaPoint, r: f64) -> f64 {
        self.atoms.iter().filter(|a| a.dist_to(center) < r).map(|a| a.w).sum()
    }

    pub fn restricted(&self, center: &ParaPoint, r: f64) -> DiscreteMeasure {
        DiscreteMeasure {
            signed: self.signed,
            atoms: self.atoms.iter().filter(|a| a.dist_to(center) < r).cloned().collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> DiscreteMeasure {
        DiscreteMeasure {
            signed: self.signed,
            atoms: self.atoms.iter().map(|a| Atom { w: a.w * c, ..a.clone() }).collect(),
        }
    }

    pub fn support(&self) -> Vec<ParaPoint> {
        self.atoms.iter().filter(|a| a.w != 0.0).map(Atom::point).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: DiscreteMeasure = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    /// CSV with columns `x1..xn,t,w`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.dim().unwrap_or(0);
        let head: Vec<String> = (1..=n).map(|i| format!("x{i}")).chain(["t".into(), "w".into()]).collect();
        writeln!(w, "{}", head.join(","))?;
        for a in &self.atoms {
            let mut row: Vec<String> = a.x.iter().map(|v| format!("{v}")).collect();
            row.push(format!("{}", a.t));
            row.push(format!("{}", a.w));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub(crate) fn require_unsigned(&self) -> Result<()> {
        if self.signed && self.atoms.iter().any(|a| a.w < 0.0) {
            return Err(LabError::SignedMeasure);
        }
        if !self.signed && self.atoms.iter().any(|a| a.w < 0.0) {
            return Err(LabError::SignedMeasure);
        }
        Ok(())
    }
}

/// `F_r(μ) = Σ w_i (r - ‖x̄_i‖)_+`.
pub fn f_r(mu: &DiscreteMeasure, r: f64) -> Result<f64> {
    check_radius(r)?;
    mu.require_unsigned()?;
    Ok(mu.atoms.iter().map(|a| a.w * (r - a.norm()).max(0.0)).sum())
}

/// `c T_{center,r}[μ]`: atoms mapped by `δ_{1/r}(· - center)`, weights times `c`.
pub fn blow_up(mu: &DiscreteMeasure, center: &ParaPoint, r: f64, c: f64) -> Result<DiscreteMeasure> {
    check_radius(r)?;
    if !(c > 0.0 && c.is_finite()) {
        return Err(LabError::invalid(format!("blow-up factor must be positive, got {c}")));
    }
    let inv = 1.0 / r;
    let atoms = mu
        .atoms
        .iter()
        .map(|a| Atom {
            x: a.x.iter().zip(&center.x).map(|(v, cv)| (v - cv) * inv).collect(),
            t: (a.t - center.t) * inv * inv,
            w: a.w * c,
        })
        .collect();
    Ok(DiscreteMeasure { signed: mu.signed, atoms })
}

/// Normalized blow-ups `T_{center, r_j}[μ] / μ(C_{r_j}(center))`.
pub fn tangent_sequence(mu: &DiscreteMeasure, center: &ParaPoint, radii: &[f64]) -> Result<Vec<DiscreteMeasure>> {
    mu.require_unsigned()?;
    radii
        .iter()
        .map(|&r| {
            check_radius(r)?;
            let m = mu.mass_in(center, r);
            if m <= 0.0 {
                return Err(LabError::ZeroMass(format!("μ(C_{r}) vanishes")));
            }
            blow_up(mu, center, r, 1.0 / m)
        })
        .collect()
}

/// Least-squares fit of `log μ(C_r)` against `log r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit.
    pub residual: f64,
}

pub fn fit_loglog(radii: &[f64], masses: &[f64]) -> Result<DimensionFit> {
    if radii.len() != masses.len() || radii.len() < 2 {
        return Err(LabError::invalid("need matching radius and mass lists of length >= 2"));
    }
    if masses.iter().any(|&m| !(m > 0.0)) {
        return Err(LabError::ZeroMass("nonpositive mass in dimension fit".into()));
    }
    let xs: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let ys: Vec<f64> = masses.iter().map(|m| m.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 0.0 {
        return Err(LabError::invalid("radii must not all coincide"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(DimensionFit { slope, intercept, residual: (rss / k).sqrt() })
}

/// Slope of `log μ(C_r(center))` versus `log r`.
pub fn pointwise_dimension(mu: &DiscreteMeasure, center: &ParaPoint, radii: &[f64]) -> Result<DimensionFit> {
    mu.require_unsigned()?;
    if radii.len() < 4 {
        return Err(LabError::invalid("need at least 4 radii"));
    }
    let (lo, hi) = radii.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
    if !(lo > 0.0) || hi / lo < 100.0 * (1.0 - 1e-9) {
        return Err(LabError::invalid("radii must be positive and span at least two decades"));
    }
    let masses: Vec<f64> = radii.iter().map(|&r| mu.mass_in(center, r)).collect();
    fit_loglog(radii, &masses)
}

/// `(⨍ f) · exp(-⨍ log f)` over `C_r(center)` with `μ` weights; `f` is given
/// per atom.
pub fn vmo_ratio(f: &[f64], mu: &DiscreteMeasure, center: &ParaPoint, r: f64) -> Result<f64> {
    check_radius(r)?;
    mu.require_unsigned()?;
    if f.len() != mu.atoms.len() {
        return Err(LabError::invalid("one f value per atom is required"));
    }
    let (mut m, mut sf, mut sl) = (0.0, 0.0, 0.0);
    for (a, &v) in mu.atoms.iter().zip(f) {
        if a.dist_to(center) >= r || a.w == 0.0 {
            continue;
        }
        if !(v > 0.0 && v.is_finite()) {
            return Err(LabError::invalid(format!("f must be positive on the cylinder, got {v}")));
        }
        m += a.w;
        sf += a.w * v;
        sl += a.w * v.ln();
    }
    if m <= 0.0 {
        return Err(LabError::ZeroMass("no mass in the cylinder".into()));
    }
    Ok((sf / m) * (-sl / m).exp())
}

/// `c · H^{n+1}_p` restricted to an admissible plane, discretized on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatMeasure {
    pub plane: AdmissiblePlane,
    pub density: f64,
}

impl FlatMeasure {
    pub fn new(plane: AdmissiblePlane, density: f64) -> Result<Self> {
        if !(density > 0.0 && density.is_finite()) {
            return Err(LabError::invalid("flat measure density must be positive"));
        }
        Ok(FlatMeasure { plane, density })
    }

    /// Cell-centered atoms on `plane ∩ C_r(anchor)`: `res.grid` cells per
    /// tangential axis and `res.slices` time levels, weighted by cell volume.
    pub fn discretize(&self, r: f64, res: &TraceResolution) -> Result<DiscreteMeasure> {
        check_radius(r)?;
        let n = self.plane.normal.len();
        let samples = self.plane.samples_in_cylinder(r, res.grid, res.slices);
        let cell = (2.0 * r / res.grid as f64).powi(n as i32 - 1) * 2.0 * r * r / res.slices as f64;
        let atoms = samples
            .into_iter()
            .filter(|p| p.sub(&self.plane.anchor).spatial_norm() < r)
            .map(|p| Atom { x: p.x, t: p.t, w: self.density * cell })
            .collect();
        Ok(DiscreteMeasure { signed: false, atoms })
    }
}

/// Discretization knobs for [`dist_measures_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistOptions {
    /// Above this many atoms inside `C_r`, each measure is projected onto a
    /// lattice (cloud in cell) before the exact transport solve.
    pub exact_limit: usize,
    pub space_bins: usize,
    pub time_bins: usize,
}

impl Default for DistOptions {
    fn default() -> Self {
        DistOptions { exact_limit: 900, space_bins: 16, time_bins: 16 }
    }
}

fn check_pair(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<()> {
    mu.require_unsigned()?;
    nu.require_unsigned()?;
    if let (Some(a), Some(b)) = (mu.dim(), nu.dim()) {
        if a != b {
            return Err(LabError::DimensionMismatch { expected: a, got: b });
        }
    }
    Ok(())
}

fn inside(mu: &DiscreteMeasure, r: f64) -> Vec<Atom> {
    mu.atoms.iter().filter(|a| a.w > 0.0 && a.norm() < r).cloned().collect()
}

/// Cloud-in-cell projection onto the lattice nodes of `[-r, r]^n × [-r^2, r^2]`:
/// each atom is split among the corners of its cell with multilinear weights.
fn aggregate(atoms: &[Atom], r: f64, ms: usize, mt: usize) -> Vec<Atom> {
    let hs = 2.0 * r / ms as f64;
    let ht = 2.0 * r * r / mt as f64;
    let mut nodes: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
    for a in atoms {
        let mut base: Vec<i64> = Vec::with_capacity(a.x.len() + 1);
        let mut frac: Vec<f64> = Vec::with_capacity(a.x.len() + 1);
        let coords = a.x.iter().map(|v| ((v + r) / hs, ms)).chain(std::iter::once(((a.t + r * r) / ht, mt)));
        for (u, m) in coords {
            let k = (u.floor() as i64).clamp(0, m as i64 - 1);
            base.push(k);
            frac.push((u - k as f64).clamp(0.0, 1.0));
        }
        let d = base.len();
        for corner in 0..1usize << d {
            let mut w = a.w;
            let mut key = base.clone();
            for b in 0..d {
                if corner >> b & 1 == 1 {
                    w *= frac[b];
                    key[b] += 1;
                } else {
                    w *= 1.0 - frac[b];
                }
            }
            if w > 0.0 {
                *nodes.entry(key).or_insert(0.0) += w;
            }
        }
    }
    nodes
        .into_iter()
        .map(|(key, w)| {
            let d = key.len() - 1;
            let x: Coords = key[..d].iter().map(|&k| -r + k as f64 * hs).collect();
            Atom { x, t: -r * r + key[d] as f64 * ht, w }
        })
        .collect()
}

fn net_atoms(pos: &[Atom], neg: &[Atom]) -> (Vec<Atom>, Vec<Atom>) {
    let key = |a: &Atom| -> Vec<u64> { a.x.iter().map(|v| v.to_bits()).chain(std::iter::once(a.t.to_bits())).collect() };
    let mut map: BTreeMap<Vec<u64>, Atom> = BTreeMap::new();
    for a in pos {
        map.entry(key(a)).and_modify(|b| b.w += a.w).or_insert_with(|| a.clone());
    }
    for a in neg {
        map.entry(key(a)).and_modify(|b| b.w -= a.w).or_insert_with(|| Atom { w: -a.w, ..a.clone() });
    }
    let mut p = Vec::new();
    let mut q = Vec::new();
    for a in map.into_values() {
        if a.w > 0.0 {
            p.push(a);
        } else if a.w < 0.0 {
            q.push(Atom { w: -a.w, ..a });
        }
    }
    (p, q)
}

/// `d_{C_r}(μ, ν)`: the supremum of `∫ f d(μ - ν)` over parabolic 1-Lipschitz
/// `f` with `|f| <= (r - ‖x̄‖)_+`, computed as the equivalent transport
/// problem with a boundary reservoir.
pub fn dist_measures(mu: &DiscreteMeasure, nu: &DiscreteMeasure, r: f64) -> Result<f64> {
    dist_measures_with(mu, nu, r, &DistOptions::default())
}

pub fn dist_measures_with(mu: &DiscreteMeasure, nu: &DiscreteMeasure, r: f64, opts: &DistOptions) -> Result<f64> {
    check_radius(r)?;
    check_pair(mu, nu)?;
    let mut a = inside(mu, r);
    let mut b = inside(nu, r);
    if a.len() + b.len() > opts.exact_limit {
        a = aggregate(&a, r, opts.space_bins, opts.time_bins);
        b = aggregate(&b, r, opts.space_bins, opts.time_bins);
    }
    let (p, q) = net_atoms(&a, &b);
    let cap = |x: &Atom| (r - x.norm()).max(0.0);
    let sol = flow::solve(
        &p.iter().map(|x| x.w).collect::<Vec<_>>(),
        &q.iter().map(|x| x.w).collect::<Vec<_>>(),
        |i, j| p[i].dist(&q[j]),
        &p.iter().map(cap).collect::<Vec<_>>(),
        &q.iter().map(cap).collect::<Vec<_>>(),
    )?;
    Ok(sol.value)
}

/// Dense-LP evaluation of `d_{C_r}` on the union of supports; intended as a
/// reference for small instances.
pub fn dist_measures_lp(mu: &DiscreteMeasure, nu: &DiscreteMeasure, r: f64) -> Result<f64> {
    check_radius(r)?;
    check_pair(mu, nu)?;
    let (p, q) = net_atoms(&inside(mu, r), &inside(nu, r));
    let pts: Vec<(Atom, f64)> = p.iter().map(|a| (a.clone(), a.w)).chain(q.iter().map(|a| (a.clone(), -a.w))).collect();
    let caps: Vec<f64> = pts.iter().map(|(a, _)| (r - a.norm()).max(0.0)).collect();
    let dist = |i: usize, j: usize| pts[i].0.dist(&pts[j].0);
    lipschitz_lp(&pts.iter().map(|(_, m)| *m).collect::<Vec<_>>(), &caps, dist)
}

/// `max Σ m_i f_i` over `|f_i - f_j| <= d(i, j)`, `|f_i| <= cap_i`, solved with
/// the substitution `g = f + cap` so that the origin is feasible.
pub(crate) fn lipschitz_lp<D: Fn(usize, usize) -> f64>(m: &[f64], caps: &[f64], dist: D) -> Result<f64> {
    Ok(lipschitz_lp_full(m, caps, dist)?.0)
}

pub(crate) fn lipschitz_lp_full<D: Fn(usize, usize) -> f64>(m: &[f64], caps: &[f64], dist: D) -> Result<(f64, Vec<f64>)> {
    let k = m.len();
    if k == 0 {
        return Ok((0.0, Vec::new()));
    }
    let rows = k * (k - 1) + k;
    let mut a = DenseMatrix::zeros(rows, k);
    let mut b = vec![0.0; rows];
    let mut row = 0;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            *a.at(row, i) = 1.0;
            *a.at(row, j) = -1.0;
            b[row] = (dist(i, j) + caps[i] - caps[j]).max(0.0);
            row += 1;
        }
    }
    for i in 0..k {
        *a.at(row, i) = 1.0;
        b[row] = 2.0 * caps[i];
        row += 1;
    }
    let sol = lp::maximize(m, &a, &b)?;
    let offset: f64 = m.iter().zip(caps).map(|(mi, ci)| mi * ci).sum();
    let f = sol.x.iter().zip(caps).map(|(g, c)| g - c).collect();
    Ok((sol.objective - offset, f))
}

/// Cones of measures searched by [`cone_distance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cone", rename_all = "snake_case")]
pub enum Cone {
    /// Flat measures on admissible planes (degree-one caloric polynomials).
    Flat,
    /// `ω_h` for homogeneous `h` of degree `k`.
    Homogeneous { k: u32 },
    /// `ω_h` for `h` of degree at most `d` vanishing at the origin.
    Polynomial { d: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeOptions {
    /// Screening samples of the cone parameters.
    pub seeds: usize,
    /// Screened candidates that get an exact evaluation and local refinement.
    pub refine_seeds: usize,
    /// Exact evaluations spent on each refinement.
    pub refine_evals: usize,
    /// Discretization of cone elements on `C_1`.
    pub trace: TraceResolution,
    pub dist: DistOptions,
    pub orientation: Orientation,
}

impl Default for ConeOptions {
    fn default() -> Self {
        ConeOptions {
            seeds: 512,
            refine_seeds: 2,
            refine_evals: 14,
            trace: TraceResolution { slices: 64, grid: 64 },
            dist: DistOptions::default(),
            orientation: Orientation::Adjoint,
        }
    }
}

/// A cone member: coefficient vector, polynomial, and its `ω_h` on `C_1`
/// normalized to `F_1 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeElement {
    pub k: u32,
    pub coef: Vec<f64>,
    pub h: CaloricPolynomial,
    pub omega: DiscreteMeasure,
}

impl ConeElement {
    pub fn build(n: usize, cone: Cone, coef: &[f64], opts: &ConeOptions) -> Result<Self> {
        let len = coef.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(len > 0.0) {
            return Err(LabError::invalid("cone coefficients must be nonzero"));
        }
        let coef: Vec<f64> = coef.iter().map(|v| v / len).collect();
        let (k, basis) = match cone {
            Cone::Flat => (1, calpoly::homogeneous_basis(n, 1)),
            Cone::Homogeneous { k } => (k, calpoly::homogeneous_basis(n, k)),
            Cone::Polynomial { d } => (d, calpoly::vanishing_basis(n, d)),
        };
        if basis.len() != coef.len() {
            return Err(LabError::DimensionMismatch { expected: basis.len(), got: coef.len() });
        }
        let h = calpoly::combine_basis(n, &basis, &coef, opts.orientation);
        let unit = Cylinder::new(ParaPoint::origin(n), 1.0)?;
        let raw = if matches!(cone, Cone::Flat) {
            let plane = AdmissiblePlane::new(&coef, ParaPoint::origin(n))?;
            FlatMeasure::new(plane, 1.0)?.discretize(1.0, &opts.trace)?
        } else {
            calpoly::caloric_measure_poly(&h, &unit, &opts.trace)?
        };
        let f1 = f_r(&raw, 1.0)?;
        if !(f1 > 0.0) {
            return Err(LabError::ZeroMass("cone element has no mass in C_1".into()));
        }
        Ok(ConeElement { k, coef, h, omega: raw.scaled(1.0 / f1) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeDistance {
    pub value: f64,
    /// Coefficient vector of the best cone element found.
    pub coef: Vec<f64>,
    /// `F_r(μ)` used for the normalization.
    pub f_r: f64,
    pub evaluations: usize,
}

fn cone_dimension(n: usize, cone: Cone) -> usize {
    match cone {
        Cone::Flat => n,
        Cone::Homogeneous { k } => calpoly::homogeneous_basis(n, k).len(),
        Cone::Polynomial { d } => calpoly::vanishing_basis(n, d).len(),
    }
}

fn seed_coefficients(n: usize, cone: Cone, count: usize) -> Vec<Vec<f64>> {
    let dim = cone_dimension(n, cone);
    if dim == 2 {
        // half circle of angles; one representative per ± pair
        return (0..count.max(1))
            .map(|i| {
                let th = std::f64::consts::PI * i as f64 / count.max(1) as f64;
                vec![th.cos(), th.sin()]
            })
            .collect();
    }
    calpoly::hemisphere(dim, count)
}

/// Cheap screening score: each atom moves to the model set along the gradient
/// or leaves through the boundary, whichever is cheaper.
fn surrogate(mu: &[Atom], n: usize, cone: Cone, coef: &[f64], orientation: Orientation) -> f64 {
    let len = coef.iter().map(|v| v * v).sum::<f64>().sqrt();
    if matches!(cone, Cone::Flat) {
        return mu
            .iter()
            .map(|a| {
                let d = a.x.iter().zip(coef).map(|(x, e)| x * e).sum::<f64>().abs() / len;
                a.w * d.min((1.0 - a.norm()).max(0.0))
            })
            .sum();
    }
    let basis = match cone {
        Cone::Homogeneous { k } => calpoly::homogeneous_basis(n, k),
        Cone::Polynomial { d } => calpoly::vanishing_basis(n, d),
        Cone::Flat => unreachable!(),
    };
    let h = calpoly::combine_basis(n, &basis, coef, orientation);
    mu.iter()
        .map(|a| {
            let cap = (1.0 - a.norm()).max(0.0);
            let (v, g, _) = h.eval_with_grad(&a.x, a.t);
            let gn = g.iter().map(|u| u * u).sum::<f64>().sqrt();
            let d = if gn > 0.0 { v.abs() / gn } else { cap };
            a.w * d.min(cap)
        })
        .sum()
}

/// `d_r(μ, cone)`: distance from `μ / F_r(μ)` to the cone members with
/// `F_r = 1`, evaluated after blowing `μ` up to `C_1`. Cone parameters are
/// screened on a deterministic sample, and the best few are refined with
/// exact transport evaluations. The result is an upper estimate of the
/// infimum.
pub fn cone_distance(mu: &DiscreteMeasure, r: f64, cone: Cone, opts: &ConeOptions) -> Result<ConeDistance> {
    check_radius(r)?;
    mu.require_unsigned()?;
    let n = mu.dim().ok_or_else(|| LabError::ZeroMass("empty measure".into()))?;
    if !matches!(cone, Cone::Flat) && n > 2 {
        return Err(LabError::invalid("polynomial cones need nodal tracing, available for n <= 2"));
    }
    let fr = f_r(mu, r)?;
    if !(fr > 0.0) {
        return Err(LabError::ZeroMass(format!("F_{r}(μ) = 0")));
    }
    let blown = blow_up(mu, &ParaPoint::origin(n), r, r / fr)?;
    let mu1 = DiscreteMeasure { signed: false, atoms: inside(&blown, 1.0) };

    let seeds = seed_coefficients(n, cone, opts.seeds);
    let scores: Vec<f64> = seeds.par_iter().map(|c| surrogate(&mu1.atoms, n, cone, c, opts.orientation)).collect();
    let mut order: Vec<usize> = (0..seeds.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    let picked: Vec<usize> = order.into_iter().take(opts.refine_seeds.max(1)).collect();

    let evaluate = |coef: &[f64]| -> f64 {
        match ConeElement::build(n, cone, coef, opts) {
            Ok(el) => dist_measures_with(&mu1, &el.omega, 1.0, &opts.dist).unwrap_or(f64::INFINITY),
            Err(_) => f64::INFINITY,
        }
    };
    let dim = cone_dimension(n, cone);
    let results: Vec<(f64, Vec<f64>, usize)> = picked
        .par_iter()
        .map(|&s| {
            let start = seeds[s].clone();
            if dim == 1 {
                return (evaluate(&start), start, 1);
            }
            if dim == 2 {
                let step = std::f64::consts::PI / opts.seeds.max(1) as f64;
                let th0 = start[1].atan2(start[0]);
                let f = |th: f64| evaluate(&[th.cos(), th.sin()]);
                let base = f(th0);
                let (th, v) = golden_section(f, th0 - 1.5 * step, th0 + 1.5 * step, opts.refine_evals.saturating_sub(3));
                if v < base {
                    (v, vec![th.cos(), th.sin()], opts.refine_evals)
                } else {
                    (base, start, opts.refine_evals)
                }
            } else {
                let spacing = (2.0 / opts.seeds.max(1) as f64).powf(1.0 / (dim as f64 - 1.0)).min(0.5);
                let (x, v, evals) = nelder_mead(&|c: &[f64]| evaluate(c), &start, spacing, opts.refine_evals);
                (v, normalize(&x), evals)
            }
        })
        .collect();
    let mut best = (f64::INFINITY, Vec::new());
    let mut evaluations = 0;
    for (v, c, e) in results {
        evaluations += e;
        if v < best.0 {
            best = (v, c);
        }
    }
    if !best.0.is_finite() {
        return Err(LabError::Numerical("no cone element could be evaluated".into()));
    }
    Ok(ConeDistance { value: best.0, coef: best.1, f_r: fr, evaluations })
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let l = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / l).collect()
}

/// Derivative-free simplex descent with a hard evaluation budget.
pub(crate) fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, start: &[f64], step: f64, budget: usize) -> (Vec<f64>, f64, usize) {
    let d = start.len();
    let mut pts: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..d {
        let mut p = start.to_vec();
        p[i] += step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| f(p)).collect();
    let mut evals = d + 1;
    while evals + 2 <= budget.max(d + 3) {
        let mut idx: Vec<usize> = (0..=d).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = idx.iter().map(|&i| pts[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        let centroid: Vec<f64> = (0..d).map(|k| pts[..d].iter().map(|p| p[k]).sum::<f64>() / d as f64).collect();
        let along = |s: f64| -> Vec<f64> { (0..d).map(|k| centroid[k] + s * (pts[d][k] - centroid[k])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                pts[d] = xe;
                vals[d] = fe;
            } else {
                pts[d] = xr;
                vals[d] = fr;
            }
        } else if fr < vals[d - 1] {
            pts[d] = xr;
            vals[d] = fr;
        } else {
            let xc = along(0.5);
            let fc = f(&xc);
            evals += 1;
            if fc < vals[d] {
                pts[d] = xc;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    pts[i] = (0..d).map(|k| pts[0][k] + 0.5 * (pts[i][k] - pts[0][k])).collect();
                    vals[i] = f(&pts[i]);
                    evals += 1;
                }
            }
        }
    }
    let (bi, bv) = vals.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    (pts[bi].clone(), bv, evals)
}
