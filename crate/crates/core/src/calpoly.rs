//! Caloric and adjoint-caloric polynomials, their nodal sets and the
//! associated caloric measures `ω_h = |∇h| dσ`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{LabError, Result};
use crate::heatcore::gauss_legendre_on;
use crate::measures::{Atom, DiscreteMeasure};
use crate::pargeo::{Coords, Cylinder, ParaPoint};

pub type MultiIndex = SmallVec<[u32; 3]>;

/// Which operator the polynomial is meant to annihilate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// `H = Δ - ∂_t`.
    Caloric,
    /// `H* = Δ + ∂_t`.
    Adjoint,
}

impl Orientation {
    pub fn flipped(self) -> Self {
        match self {
            Orientation::Caloric => Orientation::Adjoint,
            Orientation::Adjoint => Orientation::Caloric,
        }
    }

    fn time_sign(self) -> f64 {
        match self {
            Orientation::Caloric => 1.0,
            Orientation::Adjoint => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Monomial {
    pub alpha: MultiIndex,
    pub ell: u32,
}

impl Monomial {
    pub fn degree(&self) -> u32 {
        self.alpha.iter().sum::<u32>() + 2 * self.ell
    }
}

/// A polynomial in `x` only.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialPolynomial {
    n: usize,
    terms: BTreeMap<MultiIndex, f64>,
}

impl SpatialPolynomial {
    pub fn zero(n: usize) -> Self {
        SpatialPolynomial { n, terms: BTreeMap::new() }
    }

    pub fn monomial(n: usize, alpha: &[u32], c: f64) -> Self {
        let mut p = Self::zero(n);
        p.add_term(alpha, c);
        p
    }

    pub fn from_terms(n: usize, terms: &[(Vec<u32>, f64)]) -> Result<Self> {
        let mut p = Self::zero(n);
        for (alpha, c) in terms {
            if alpha.len() != n {
                return Err(LabError::DimensionMismatch { expected: n, got: alpha.len() });
            }
            p.add_term(alpha, *c);
        }
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn add_term(&mut self, alpha: &[u32], c: f64) {
        let key = MultiIndex::from_slice(alpha);
        let v = self.terms.entry(key.clone()).or_insert(0.0);
        *v += c;
        if *v == 0.0 {
            self.terms.remove(&key);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn laplacian(&self) -> SpatialPolynomial {
        let mut out = Self::zero(self.n);
        for (alpha, &c) in &self.terms {
            for i in 0..self.n {
                if alpha[i] >= 2 {
                    let mut b = alpha.clone();
                    b[i] -= 2;
                    out.add_term(&b, c * (alpha[i] * (alpha[i] - 1)) as f64);
                }
            }
        }
        out
    }

    /// `Σ_j (±t)^j Δ^j p / j!`, the unique (adjoint-)caloric polynomial equal to
    /// `p` at `t = 0`.
    pub fn heat_extend(&self, orientation: Orientation) -> CaloricPolynomial {
        let sign = orientation.time_sign();
        let mut h = CaloricPolynomial::zero(self.n, orientation);
        let mut q = self.clone();
        let mut j: u32 = 0;
        while !q.is_zero() {
            let s = sign.powi(j as i32);
            for (alpha, &c) in &q.terms {
                h.add_term(alpha, j, s * c);
            }
            j += 1;
            let lap = q.laplacian();
            q = SpatialPolynomial {
                n: self.n,
                terms: lap.terms.into_iter().map(|(a, c)| (a, c / j as f64)).collect(),
            };
        }
        h
    }
}

/// Free-function form of [`SpatialPolynomial::heat_extend`].
pub fn heat_extend(p: &SpatialPolynomial, orientation: Orientation) -> CaloricPolynomial {
    p.heat_extend(orientation)
}

/// Sparse polynomial `Σ c_{α,ℓ} x^α t^ℓ` tagged with the operator it is meant
/// to solve. Arbitrary coefficients are allowed; [`CaloricPolynomial::is_caloric`]
/// checks the tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolyJson", into = "PolyJson")]
pub struct CaloricPolynomial {
    n: usize,
    orientation: Orientation,
    terms: BTreeMap<Monomial, f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolyJson {
    n: usize,
    orientation: Orientation,
    terms: Vec<TermJson>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermJson {
    alpha: Vec<u32>,
    ell: u32,
    c: f64,
}

impl TryFrom<PolyJson> for CaloricPolynomial {
    type Error = LabError;

    fn try_from(j: PolyJson) -> Result<Self> {
        if j.n == 0 {
            return Err(LabError::invalid("polynomial dimension must be at least 1"));
        }
        let mut h = CaloricPolynomial::zero(j.n, j.orientation);
        for t in j.terms {
            if t.alpha.len() != j.n {
                return Err(LabError::DimensionMismatch { expected: j.n, got: t.alpha.len() });
            }
            if !t.c.is_finite() {
                return Err(LabError::invalid("non-finite coefficient"));
            }
            h.add_term(&t.alpha, t.ell, t.c);
        }
        Ok(h)
    }
}

impl From<CaloricPolynomial> for PolyJson {
    fn from(h: CaloricPolynomial) -> Self {
        PolyJson {
            n: h.n,
            orientation: h.orientation,
            terms: h
                .terms
                .into_iter()
                .map(|(m, c)| TermJson { alpha: m.alpha.to_vec(), ell: m.ell, c })
                .collect(),
        }
    }
}

impl CaloricPolynomial {
    pub fn zero(n: usize, orientation: Orientation) -> Self {
        CaloricPolynomial { n, orientation, terms: BTreeMap::new() }
    }

    pub fn from_terms(n: usize, orientation: Orientation, terms: &[(Vec<u32>, u32, f64)]) -> Result<Self> {
        let mut h = Self::zero(n, orientation);
        for (alpha, ell, c) in terms {
            if alpha.len() != n {
                return Err(LabError::DimensionMismatch { expected: n, got: alpha.len() });
            }
            h.add_term(alpha, *ell, *c);
        }
        Ok(h)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn coefficient(&self, alpha: &[u32], ell: u32) -> f64 {
        let key = Monomial { alpha: MultiIndex::from_slice(alpha), ell };
        self.terms.get(&key).copied().unwrap_or(0.0)
    }

    pub fn add_term(&mut self, alpha: &[u32], ell: u32, c: f64) {
        let key = Monomial { alpha: MultiIndex::from_slice(alpha), ell };
        let v = self.terms.entry(key.clone()).or_insert(0.0);
        *v += c;
        if *v == 0.0 {
            self.terms.remove(&key);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Parabolic degree `max(|α| + 2ℓ)`, `None` for the zero polynomial.
    pub fn degree(&self) -> Option<u32> {
        self.terms.keys().map(Monomial::degree).max()
    }

    /// Largest absolute coefficient.
    pub fn coef_scale(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn scaled(&self, s: f64) -> CaloricPolynomial {
        let mut h = self.clone();
        for c in h.terms.values_mut() {
            *c *= s;
        }
        h.terms.retain(|_, c| *c != 0.0);
        h
    }

    pub fn add(&self, other: &CaloricPolynomial) -> Result<CaloricPolynomial> {
        if self.n != other.n {
            return Err(LabError::DimensionMismatch { expected: self.n, got: other.n });
        }
        let mut h = self.clone();
        for (m, &c) in &other.terms {
            h.add_term(&m.alpha, m.ell, c);
        }
        Ok(h)
    }

    /// `h ∘ δ_r`, i.e. coefficients times `r^{|α| + 2ℓ}`.
    pub fn dilated(&self, r: f64) -> CaloricPolynomial {
        let mut h = self.clone();
        for (m, c) in h.terms.iter_mut() {
            *c *= r.powi(m.degree() as i32);
        }
        h
    }

    /// `(x, t) -> h(x, -t)`, which swaps the orientation.
    pub fn time_reflected(&self) -> CaloricPolynomial {
        let mut h = CaloricPolynomial::zero(self.n, self.orientation.flipped());
        for (m, &c) in &self.terms {
            let s = if m.ell % 2 == 0 { 1.0 } else { -1.0 };
            h.add_term(&m.alpha, m.ell, s * c);
        }
        h
    }

    /// Evaluation at a space-time point.
    pub fn eval(&self, p: &ParaPoint) -> f64 {
        self.eval_xt(&p.x, p.t)
    }

    pub fn eval_xt(&self, x: &[f64], t: f64) -> f64 {
        let mut s = 0.0;
        for (m, &c) in &self.terms {
            let mut v = c * t.powi(m.ell as i32);
            for (xi, &a) in x.iter().zip(&m.alpha) {
                if a > 0 {
                    v *= xi.powi(a as i32);
                }
            }
            s += v;
        }
        s
    }

    /// Value, spatial gradient and time derivative.
    pub fn eval_with_grad(&self, x: &[f64], t: f64) -> (f64, Coords, f64) {
        let n = self.n;
        let mut val = 0.0;
        let mut grad: Coords = smallvec::smallvec![0.0; n];
        let mut dt = 0.0;
        for (m, &c) in &self.terms {
            let tp = t.powi(m.ell as i32);
            let mut xp = 1.0;
            for (xi, &a) in x.iter().zip(&m.alpha) {
                xp *= xi.powi(a as i32);
            }
            val += c * tp * xp;
            if m.ell > 0 {
                dt += c * m.ell as f64 * t.powi(m.ell as i32 - 1) * xp;
            }
            for i in 0..n {
                let a = m.alpha[i];
                if a == 0 {
                    continue;
                }
                let mut d = c * tp * a as f64;
                for (j, (xj, &b)) in x.iter().zip(&m.alpha).enumerate() {
                    let e = if j == i { b - 1 } else { b };
                    d *= xj.powi(e as i32);
                }
                grad[i] += d;
            }
        }
        (val, grad, dt)
    }

    pub fn laplacian(&self) -> CaloricPolynomial {
        let mut out = CaloricPolynomial::zero(self.n, self.orientation);
        for (m, &c) in &self.terms {
            for i in 0..self.n {
                if m.alpha[i] >= 2 {
                    let mut b = m.alpha.clone();
                    b[i] -= 2;
                    out.add_term(&b, m.ell, c * (m.alpha[i] * (m.alpha[i] - 1)) as f64);
                }
            }
        }
        out
    }

    pub fn time_derivative(&self) -> CaloricPolynomial {
        let mut out = CaloricPolynomial::zero(self.n, self.orientation);
        for (m, &c) in &self.terms {
            if m.ell > 0 {
                out.add_term(&m.alpha, m.ell - 1, c * m.ell as f64);
            }
        }
        out
    }

    /// `Hh = Δh - ∂_t h` for caloric orientation, `H*h = Δh + ∂_t h` for adjoint.
    pub fn apply_operator(&self) -> CaloricPolynomial {
        let sign = -self.orientation.time_sign();
        let mut out = self.laplacian();
        for (m, &c) in &self.time_derivative().terms {
            out.add_term(&m.alpha, m.ell, sign * c);
        }
        out
    }

    /// True when the operator image vanishes up to `1e-12` of the coefficient scale.
    pub fn is_caloric(&self) -> bool {
        let tol = 1e-12 * self.coef_scale().max(f64::MIN_POSITIVE);
        self.apply_operator().terms.values().all(|c| c.abs() <= tol)
    }

    /// Parts `h_j` grouped by parabolic degree, ascending.
    pub fn homogeneous_parts(&self) -> Vec<(u32, CaloricPolynomial)> {
        let mut parts: BTreeMap<u32, CaloricPolynomial> = BTreeMap::new();
        for (m, &c) in &self.terms {
            parts
                .entry(m.degree())
                .or_insert_with(|| CaloricPolynomial::zero(self.n, self.orientation))
                .add_term(&m.alpha, m.ell, c);
        }
        parts.into_iter().collect()
    }

    /// Lowest-degree nonzero part and its degree.
    pub fn lowest_part(&self) -> Option<(u32, CaloricPolynomial)> {
        self.homogeneous_parts().into_iter().next()
    }

    pub fn is_homogeneous(&self) -> bool {
        self.homogeneous_parts().len() == 1
    }

    /// `D^{α,ℓ} h(0̄) = α! ℓ! c_{α,ℓ}`.
    pub fn derivative_at_origin(&self, alpha: &[u32], ell: u32) -> f64 {
        let fact = |k: u32| (1..=k).map(|v| v as f64).product::<f64>();
        let af: f64 = alpha.iter().map(|&a| fact(a)).product();
        af * fact(ell) * self.coefficient(alpha, ell)
    }

    /// `h(·, t)` as a list of `(α, c)` for fast slice evaluation.
    fn slice(&self, t: f64) -> Vec<(MultiIndex, f64)> {
        let mut acc: BTreeMap<MultiIndex, f64> = BTreeMap::new();
        for (m, &c) in &self.terms {
            *acc.entry(m.alpha.clone()).or_insert(0.0) += c * t.powi(m.ell as i32);
        }
        acc.into_iter().filter(|(_, c)| *c != 0.0).collect()
    }
}

fn eval_slice(slice: &[(MultiIndex, f64)], x: &[f64]) -> f64 {
    let mut s = 0.0;
    for (alpha, c) in slice {
        let mut v = *c;
        for (xi, &a) in x.iter().zip(alpha) {
            if a > 0 {
                v *= xi.powi(a as i32);
            }
        }
        s += v;
    }
    s
}

/// Point classes of a nodal set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodalClass {
    #[serde(rename = "R_x")]
    Rx,
    #[serde(rename = "R_t")]
    Rt,
    #[serde(rename = "S")]
    S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodalPoint {
    pub point: ParaPoint,
    pub class: NodalClass,
    /// Surface weight: slice arclength (or count when `n = 1`) times the time step.
    pub weight: f64,
    /// `-∇h / |∇h|`, pointing out of `{h(·, t) > 0}`; absent off `R_x`.
    pub normal: Option<Coords>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodalSet {
    pub points: Vec<NodalPoint>,
    /// Number of points that landed in `R_t` or `S`.
    pub degenerate: usize,
}

/// Time slices and grid cells per spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceResolution {
    pub slices: usize,
    pub grid: usize,
}

impl Default for TraceResolution {
    fn default() -> Self {
        TraceResolution { slices: 200, grid: 200 }
    }
}

/// Gradient threshold for the class split.
pub fn tol_grad(h: &CaloricPolynomial) -> f64 {
    1e-8 * h.coef_scale()
}

/// Classify a point of `Σ^h` by `|∇h|` and `|∂_t h|`.
pub fn classify_point(h: &CaloricPolynomial, p: &ParaPoint) -> NodalClass {
    let tol = tol_grad(h);
    let (_, g, dt) = h.eval_with_grad(&p.x, p.t);
    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if gn > tol {
        NodalClass::Rx
    } else if dt.abs() > tol {
        NodalClass::Rt
    } else {
        NodalClass::S
    }
}

fn check_traceable(h: &CaloricPolynomial, region: &Cylinder, res: &TraceResolution) -> Result<()> {
    if h.n() != region.dim() {
        return Err(LabError::DimensionMismatch { expected: region.dim(), got: h.n() });
    }
    if h.n() > 2 {
        return Err(LabError::invalid(format!("nodal tracing supports n <= 2, got n = {}", h.n())));
    }
    if h.is_zero() {
        return Err(LabError::invalid("cannot trace the zero polynomial"));
    }
    if res.slices == 0 || res.grid == 0 {
        return Err(LabError::invalid("trace resolution must be positive"));
    }
    Ok(())
}

/// Trace `Σ^h ∩ region` slice by slice (midpoint time levels), locating sign
/// changes on grid edges by bisection and classifying each point.
pub fn nodal_trace(h: &CaloricPolynomial, region: &Cylinder, res: &TraceResolution) -> Result<NodalSet> {
    check_traceable(h, region, res)?;
    let (lo, hi) = region.time_span();
    let dt = (hi - lo) / res.slices as f64;
    let slices: Vec<Vec<NodalPoint>> = (0..res.slices)
        .into_par_iter()
        .map(|k| {
            let t = lo + dt * (k as f64 + 0.5);
            match h.n() {
                1 => trace_slice_1d(h, region, res.grid, t, dt),
                _ => trace_slice_2d(h, region, res.grid, t, dt),
            }
        })
        .collect();
    let points: Vec<NodalPoint> = slices.into_iter().flatten().collect();
    if points.is_empty() {
        return Err(LabError::Empty("nodal set does not meet the region".into()));
    }
    let degenerate = points.iter().filter(|p| p.class != NodalClass::Rx).count();
    Ok(NodalSet { points, degenerate })
}

fn bisect_edge(slice: &[(MultiIndex, f64)], a: &[f64], b: &[f64], fa: f64, tol: f64) -> Coords {
    let mut lo: Coords = Coords::from_slice(a);
    let mut hi: Coords = Coords::from_slice(b);
    let pos_lo = fa > 0.0;
    let mut mid: Coords = lo.clone();
    for _ in 0..200 {
        for i in 0..mid.len() {
            mid[i] = 0.5 * (lo[i] + hi[i]);
        }
        let span = lo.iter().zip(&hi).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        if span <= tol {
            break;
        }
        if (eval_slice(slice, &mid) > 0.0) == pos_lo {
            lo.clone_from(&mid);
        } else {
            hi.clone_from(&mid);
        }
    }
    mid
}

fn make_point(h: &CaloricPolynomial, x: Coords, t: f64, weight: f64, tol: f64) -> NodalPoint {
    let (_, g, dtv) = h.eval_with_grad(&x, t);
    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let class = if gn > tol {
        NodalClass::Rx
    } else if dtv.abs() > tol {
        NodalClass::Rt
    } else {
        NodalClass::S
    };
    let normal = (class == NodalClass::Rx).then(|| g.iter().map(|v| -v / gn).collect());
    NodalPoint { point: ParaPoint { x, t }, class, weight, normal, grad_norm: gn }
}

fn trace_slice_1d(h: &CaloricPolynomial, region: &Cylinder, grid: usize, t: f64, dt: f64) -> Vec<NodalPoint> {
    let slice = h.slice(t);
    let (c, r) = (region.center.x[0], region.r);
    let step = 2.0 * r / grid as f64;
    let tol_root = 1e-12 * r;
    let tol = tol_grad(h);
    let mut out = Vec::new();
    let mut prev_x = c - r;
    let mut prev_v = eval_slice(&slice, &[prev_x]);
    for i in 1..=grid {
        let x = c - r + step * i as f64;
        let v = eval_slice(&slice, &[x]);
        if (prev_v > 0.0) != (v > 0.0) {
            let root = bisect_edge(&slice, &[prev_x], &[x], prev_v, tol_root);
            if (root[0] - c).abs() < r {
                out.push(make_point(h, root, t, dt, tol));
            }
        }
        prev_x = x;
        prev_v = v;
    }
    out
}

fn trace_slice_2d(h: &CaloricPolynomial, region: &Cylinder, grid: usize, t: f64, dt: f64) -> Vec<NodalPoint> {
    let slice = h.slice(t);
    let (cx, cy, r) = (region.center.x[0], region.center.x[1], region.r);
    let step = 2.0 * r / grid as f64;
    let tol_root = 1e-12 * r;
    let tol = tol_grad(h);
    let m = grid + 1;
    let coord = |i: usize| -r + step * i as f64;
    let mut vals = vec![0.0; m * m];
    for j in 0..m {
        for i in 0..m {
            vals[j * m + i] = eval_slice(&slice, &[cx + coord(i), cy + coord(j)]);
        }
    }
    let mut out = Vec::new();
    for j in 0..grid {
        let y0 = coord(j);
        // skip rows that cannot meet the disc
        if y0 > r || y0 + step < -r {
            continue;
        }
        for i in 0..grid {
            let x0 = coord(i);
            let dx = if x0 > 0.0 { x0 } else if x0 + step < 0.0 { -(x0 + step) } else { 0.0 };
            let dy = if y0 > 0.0 { y0 } else if y0 + step < 0.0 { -(y0 + step) } else { 0.0 };
            if dx * dx + dy * dy >= r * r {
                continue;
            }
            let v = [vals[j * m + i], vals[j * m + i + 1], vals[(j + 1) * m + i + 1], vals[(j + 1) * m + i]];
            let s = v.map(|u| u > 0.0);
            if s.iter().all(|&b| b == s[0]) {
                continue;
            }
            let corners = [
                [cx + x0, cy + y0],
                [cx + x0 + step, cy + y0],
                [cx + x0 + step, cy + y0 + step],
                [cx + x0, cy + y0 + step],
            ];
            // edge e joins corner e and corner e+1
            let mut cross: [Option<Coords>; 4] = [None, None, None, None];
            for e in 0..4 {
                let f = (e + 1) % 4;
                if s[e] != s[f] {
                    cross[e] = Some(bisect_edge(&slice, &corners[e], &corners[f], v[e], tol_root));
                }
            }
            let mut segs: SmallVec<[(usize, usize); 2]> = SmallVec::new();
            let present: SmallVec<[usize; 4]> = (0..4).filter(|&e| cross[e].is_some()).collect();
            if present.len() == 2 {
                segs.push((present[0], present[1]));
            } else if present.len() == 4 {
                let center = eval_slice(&slice, &[cx + x0 + step / 2.0, cy + y0 + step / 2.0]);
                if (center > 0.0) == s[0] {
                    segs.push((0, 1));
                    segs.push((2, 3));
                } else {
                    segs.push((3, 0));
                    segs.push((1, 2));
                }
            }
            for (a, b) in segs {
                let (pa, pb) = (cross[a].as_ref().unwrap(), cross[b].as_ref().unwrap());
                let len = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
                if len == 0.0 {
                    continue;
                }
                let mid: Coords = smallvec::smallvec![0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
                let x = project_to_zero(h, mid, t, step);
                if (x[0] - cx).powi(2) + (x[1] - cy).powi(2) < r * r {
                    out.push(make_point(h, x, t, len * dt, tol));
                }
            }
        }
    }
    out
}

/// A few Newton steps along the gradient; falls back to the start point if the
/// iteration leaves the cell neighbourhood.
fn project_to_zero(h: &CaloricPolynomial, start: Coords, t: f64, cell: f64) -> Coords {
    let mut x = start.clone();
    for _ in 0..4 {
        let (v, g, _) = h.eval_with_grad(&x, t);
        let g2: f64 = g.iter().map(|u| u * u).sum();
        if g2 <= 0.0 || !g2.is_finite() {
            return start;
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= v * gi / g2;
        }
    }
    let moved = x.iter().zip(&start).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if moved.is_finite() && moved <= cell {
        x
    } else {
        start
    }
}

/// `ω_h` on `Σ^h ∩ region`: atoms with weight `|∇h|` times the surface weight.
/// `R_t` and `S` points carry no mass and are dropped.
pub fn caloric_measure_poly(h: &CaloricPolynomial, region: &Cylinder, res: &TraceResolution) -> Result<DiscreteMeasure> {
    let set = nodal_trace(h, region, res)?;
    Ok(measure_from_nodal(&set))
}

pub(crate) fn measure_from_nodal(set: &NodalSet) -> DiscreteMeasure {
    let atoms = set
        .points
        .iter()
        .filter(|p| p.class == NodalClass::Rx)
        .map(|p| Atom { x: p.point.x.clone(), t: p.point.t, w: p.grad_norm * p.weight })
        .collect();
    DiscreteMeasure { signed: false, atoms }
}

/// `ω_h` near `center` resolved on dyadic scales: level `j` is traced on
/// `C_{r_max 2^{-j}}(center)` and keeps the atoms outside the next cylinder, so
/// every scale down to `r_max 2^{-levels}` sees the same relative resolution.
pub fn caloric_measure_multiscale(
    h: &CaloricPolynomial,
    center: &ParaPoint,
    r_max: f64,
    levels: usize,
    res: &TraceResolution,
) -> Result<DiscreteMeasure> {
    let mut atoms = Vec::new();
    for j in 0..=levels {
        let r = r_max * 0.5f64.powi(j as i32);
        let cyl = Cylinder::new(center.clone(), r)?;
        let mu = match caloric_measure_poly(h, &cyl, res) {
            Ok(mu) => mu,
            Err(LabError::Empty(_)) => continue,
            Err(e) => return Err(e),
        };
        let inner = r / 2.0;
        for a in mu.atoms {
            let d = a.point().dist(center);
            if j == levels || d >= inner {
                atoms.push(a);
            }
        }
    }
    if atoms.is_empty() {
        return Err(LabError::Empty("nodal set does not meet the region".into()));
    }
    Ok(DiscreteMeasure { signed: false, atoms })
}

/// Smooth bump `φ(x, t) = s · g(|x - c|^2 / a^2) · g(((t - τ) / b)^2)` with
/// `g(q) = exp(-1 / (1 - q))` on `q < 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: ParaPoint,
    pub a: f64,
    pub b: f64,
    pub scale: f64,
}

fn g0(q: f64) -> (f64, f64, f64) {
    if q >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let u = 1.0 - q;
    let g = (-1.0 / u).exp();
    let g1 = -g / (u * u);
    let g2 = g / u.powi(4) - 2.0 * g / u.powi(3);
    (g, g1, g2)
}

impl Bump {
    pub fn new(center: ParaPoint, a: f64, b: f64) -> Result<Self> {
        crate::pargeo::check_radius(a)?;
        crate::pargeo::check_radius(b)?;
        Ok(Bump { center, a, b, scale: 1.0 })
    }

    pub fn scaled(&self, s: f64) -> Bump {
        Bump { scale: self.scale * s, ..self.clone() }
    }

    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        let r2: f64 = x.iter().zip(&self.center.x).map(|(u, c)| (u - c) * (u - c)).sum();
        let (gs, _, _) = g0(r2 / (self.a * self.a));
        let tau = (t - self.center.t) / self.b;
        let (gt, _, _) = g0(tau * tau);
        self.scale * gs * gt
    }

    /// `Δφ + σ ∂_t φ` with `σ = +1` for `H*` and `σ = -1` for `H`.
    pub fn operator(&self, x: &[f64], t: f64, sigma: f64) -> f64 {
        let n = x.len() as f64;
        let a2 = self.a * self.a;
        let r2: f64 = x.iter().zip(&self.center.x).map(|(u, c)| (u - c) * (u - c)).sum();
        let q = r2 / a2;
        if q >= 1.0 {
            return 0.0;
        }
        let (gs, gs1, gs2) = g0(q);
        let dt = t - self.center.t;
        let p = (dt / self.b).powi(2);
        if p >= 1.0 {
            return 0.0;
        }
        let (gt, gt1, _) = g0(p);
        let lap = gs2 * 4.0 * r2 / (a2 * a2) + gs1 * 2.0 * n / a2;
        let dtime = gt1 * 2.0 * dt / (self.b * self.b);
        self.scale * (lap * gt + sigma * gs * dtime)
    }

    fn inside(&self, region: &Cylinder) -> bool {
        let (lo, hi) = region.time_span();
        let d: f64 = self.center.x.iter().zip(&region.center.x).map(|(u, c)| (u - c) * (u - c)).sum::<f64>().sqrt();
        d + self.a <= region.r && self.center.t - self.b >= lo && self.center.t + self.b <= hi
    }
}

/// Composite Gauss-Legendre panels for the volume side of the residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeRule {
    pub space_panels: usize,
    pub time_panels: usize,
    pub order: usize,
}

impl Default for VolumeRule {
    fn default() -> Self {
        VolumeRule { space_panels: 48, time_panels: 24, order: 4 }
    }
}

fn composite(lo: f64, hi: f64, panels: usize, order: usize) -> Vec<(f64, f64)> {
    let w = (hi - lo) / panels as f64;
    (0..panels)
        .flat_map(|k| gauss_legendre_on(order, lo + w * k as f64, lo + w * (k + 1) as f64))
        .collect()
}

/// `|∫φ dω - ½ ∫ |h| H*φ|` (with `H` in place of `H*` for adjoint `h`).
pub fn distributional_residual(
    h: &CaloricPolynomial,
    omega: &DiscreteMeasure,
    phi: &Bump,
    region: &Cylinder,
    rule: &VolumeRule,
) -> Result<f64> {
    let (lhs, rhs) = distributional_sides(h, omega, phi, region, rule)?;
    Ok((lhs - rhs).abs())
}

/// Both sides `(∫φ dω, ½ ∫ |h| H*φ)` of the defining identity.
pub fn distributional_sides(
    h: &CaloricPolynomial,
    omega: &DiscreteMeasure,
    phi: &Bump,
    region: &Cylinder,
    rule: &VolumeRule,
) -> Result<(f64, f64)> {
    if h.n() != phi.center.dim() || h.n() > 2 {
        return Err(LabError::invalid("residual supports n <= 2 with matching dimensions"));
    }
    if !phi.inside(region) {
        return Err(LabError::invalid("test function support escapes the traced region"));
    }
    let lhs: f64 = omega.atoms.iter().map(|a| a.w * phi.eval(&a.x, a.t)).sum();
    let sigma = h.orientation().time_sign();
    let ts = composite(phi.center.t - phi.b, phi.center.t + phi.b, rule.time_panels, rule.order);
    let xs: Vec<Vec<(f64, f64)>> = phi
        .center
        .x
        .iter()
        .map(|&c| composite(c - phi.a, c + phi.a, rule.space_panels, rule.order))
        .collect();
    let rhs: f64 = ts
        .par_iter()
        .map(|&(t, wt)| {
            let mut acc = 0.0;
            match xs.len() {
                1 => {
                    for &(x0, w0) in &xs[0] {
                        let x = [x0];
                        acc += w0 * h.eval_xt(&x, t).abs() * phi.operator(&x, t, sigma);
                    }
                }
                _ => {
                    for &(x0, w0) in &xs[0] {
                        for &(x1, w1) in &xs[1] {
                            let x = [x0, x1];
                            let op = phi.operator(&x, t, sigma);
                            if op != 0.0 {
                                acc += w0 * w1 * h.eval_xt(&x, t).abs() * op;
                            }
                        }
                    }
                }
            }
            wt * acc
        })
        .sum::<f64>()
        * 0.5;
    Ok((lhs, rhs))
}

/// Multi-indices with `|α| = k`, in lexicographic order.
pub fn multi_indices(n: usize, k: u32) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    let mut cur: MultiIndex = smallvec::smallvec![0; n];
    fn rec(i: usize, left: u32, cur: &mut MultiIndex, out: &mut Vec<MultiIndex>) {
        let n = cur.len();
        if i + 1 == n {
            cur[i] = left;
            out.push(cur.clone());
            return;
        }
        for a in (0..=left).rev() {
            cur[i] = a;
            rec(i + 1, left - a, cur, out);
        }
    }
    if n > 0 {
        rec(0, k, &mut cur, &mut out);
    }
    out
}

/// Build `Σ c_i heat_extend(x^{β_i})` from a coefficient vector over `basis`.
pub fn combine_basis(n: usize, basis: &[MultiIndex], coef: &[f64], orientation: Orientation) -> CaloricPolynomial {
    let mut p = SpatialPolynomial::zero(n);
    for (b, &c) in basis.iter().zip(coef) {
        if c != 0.0 {
            p.add_term(b, c);
        }
    }
    p.heat_extend(orientation)
}

/// Spatial monomial basis of homogeneous degree `k`.
pub fn homogeneous_basis(n: usize, k: u32) -> Vec<MultiIndex> {
    multi_indices(n, k)
}

/// Spatial monomial basis with `1 <= |α| <= d`.
pub fn vanishing_basis(n: usize, d: u32) -> Vec<MultiIndex> {
    (1..=d).flat_map(|k| multi_indices(n, k)).collect()
}

/// Homogeneous caloric polynomials of degree `k` from a deterministic sample
/// of unit coefficient vectors (one per `±` pair).
pub fn homogeneous_family(
    n: usize,
    k: u32,
    count: usize,
    orientation: Orientation,
) -> Result<Vec<(Vec<f64>, CaloricPolynomial)>> {
    if k == 0 {
        return Err(LabError::invalid("degree must be at least 1"));
    }
    let basis = homogeneous_basis(n, k);
    Ok(hemisphere(basis.len(), count)
        .into_iter()
        .map(|c| {
            let h = combine_basis(n, &basis, &c, orientation);
            (c, h)
        })
        .collect())
}

/// Caloric polynomials of degree at most `d` vanishing at the origin.
pub fn vanishing_family(
    n: usize,
    d: u32,
    count: usize,
    orientation: Orientation,
) -> Result<Vec<(Vec<f64>, CaloricPolynomial)>> {
    if d == 0 {
        return Err(LabError::invalid("degree must be at least 1"));
    }
    let basis = vanishing_basis(n, d);
    Ok(hemisphere(basis.len(), count)
        .into_iter()
        .map(|c| {
            let h = combine_basis(n, &basis, &c, orientation);
            (c, h)
        })
        .collect())
}

fn first_nonzero_positive(v: &[f64]) -> bool {
    v.iter().find(|x| x.abs() > 1e-12).is_some_and(|x| *x > 0.0)
}

/// Unit vectors from [`sphere_points`] with positive first nonzero coordinate.
pub fn hemisphere(dim: usize, count: usize) -> Vec<Vec<f64>> {
    if dim == 1 {
        return vec![vec![1.0]];
    }
    sphere_points(dim, 2 * count).into_iter().filter(|p| first_nonzero_positive(p)).take(count).collect()
}

/// Deterministic near-uniform points on `S^{dim-1}`: equispaced angles for
/// `dim = 2`, a Fibonacci lattice for `dim = 3`, normalized Halton points
/// inside the unit ball otherwise.
pub fn sphere_points(dim: usize, count: usize) -> Vec<Vec<f64>> {
    match dim {
        0 => Vec::new(),
        1 => vec![vec![1.0], vec![-1.0]].into_iter().take(count.max(1)).collect(),
        2 => (0..count)
            .map(|i| {
                let th = 2.0 * PI * i as f64 / count as f64;
                vec![th.cos(), th.sin()]
            })
            .collect(),
        3 => {
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|i| {
                    let z = 1.0 - (2.0 * i as f64 + 1.0) / count as f64;
                    let s = (1.0 - z * z).max(0.0).sqrt();
                    let ph = golden * i as f64;
                    vec![s * ph.cos(), s * ph.sin(), z]
                })
                .collect()
        }
        _ => {
            const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
            let mut out = Vec::with_capacity(count);
            let mut i: u64 = 1;
            while out.len() < count && i < 1_000_000 {
                let p: Vec<f64> = (0..dim).map(|d| 2.0 * radical_inverse(i, PRIMES[d % PRIMES.len()]) - 1.0).collect();
                let len = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                if len > 0.1 && len <= 1.0 {
                    out.push(p.iter().map(|v| v / len).collect());
                }
                i += 1;
            }
            out
        }
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut r = 0.0;
    while i > 0 {
        r += (i % base) as f64 * inv;
        i /= base;
        inv /= base as f64;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x1() -> CaloricPolynomial {
        SpatialPolynomial::monomial(2, &[1, 0], 1.0).heat_extend(Orientation::Caloric)
    }

    fn h1() -> CaloricPolynomial {
        SpatialPolynomial::from_terms(2, &[(vec![2, 0], 1.0), (vec![0, 2], 1.0)])
            .unwrap()
            .heat_extend(Orientation::Caloric)
    }

    #[test]
    fn heat_extend_examples() {
        assert_eq!(x1(), CaloricPolynomial::from_terms(2, Orientation::Caloric, &[(vec![1, 0], 0, 1.0)]).unwrap());
        let expected = CaloricPolynomial::from_terms(
            2,
            Orientation::Caloric,
            &[(vec![2, 0], 0, 1.0), (vec![0, 2], 0, 1.0), (vec![0, 0], 1, 4.0)],
        )
        .unwrap();
        assert_eq!(h1(), expected);
        let q = SpatialPolynomial::monomial(1, &[4], 1.0).heat_extend(Orientation::Caloric);
        assert_eq!(q.coefficient(&[4], 0), 1.0);
        assert_eq!(q.coefficient(&[2], 1), 12.0);
        assert_eq!(q.coefficient(&[0], 2), 12.0);
        let adj = SpatialPolynomial::monomial(1, &[2], 1.0).heat_extend(Orientation::Adjoint);
        assert_eq!(adj.coefficient(&[0], 1), -2.0);
        assert!(adj.is_caloric());
    }

    #[test]
    fn operator_examples() {
        assert!(h1().apply_operator().is_zero());
        let t = CaloricPolynomial::from_terms(2, Orientation::Caloric, &[(vec![0, 0], 1, 1.0)]).unwrap();
        let ht = t.apply_operator();
        assert_eq!(ht.coefficient(&[0, 0], 0), -1.0);
        let p = CaloricPolynomial::from_terms(1, Orientation::Adjoint, &[(vec![2], 0, 1.0), (vec![0], 1, 2.0)]).unwrap();
        let hp = p.apply_operator();
        assert_eq!(hp.coefficient(&[0], 0), 4.0);
        assert_eq!(hp.terms().count(), 1);
    }

    #[test]
    fn homogeneous_parts_examples() {
        let h = CaloricPolynomial::from_terms(
            1,
            Orientation::Caloric,
            &[(vec![1], 0, 1.0), (vec![2], 0, 1.0), (vec![0], 1, 2.0)],
        )
        .unwrap();
        let parts = h.homogeneous_parts();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].0, 1);
        assert_eq!(parts[1].0, 2);
        assert_eq!(parts[1].1.coefficient(&[0], 1), 2.0);
        assert!(parts.iter().all(|(_, p)| p.is_caloric()));
        let xy = CaloricPolynomial::from_terms(2, Orientation::Caloric, &[(vec![1, 1], 0, 1.0)]).unwrap();
        assert_eq!(xy.homogeneous_parts(), vec![(2, xy.clone())]);
        assert!(xy.is_caloric());
    }

    #[test]
    fn json_round_trip() {
        let h = h1();
        let s = h.to_json().unwrap();
        assert!(s.contains("\"orientation\":\"caloric\""));
        assert_eq!(CaloricPolynomial::from_json(&s).unwrap(), h);
        assert!(CaloricPolynomial::from_json(r#"{"n":2,"orientation":"caloric","terms":[{"alpha":[1],"ell":0,"c":1.0}]}"#).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = SpatialPolynomial::from_terms(2, &[(vec![3, 1], 1.0), (vec![0, 2], -2.0), (vec![1, 0], 0.5)])
            .unwrap()
            .heat_extend(Orientation::Caloric);
        let (x, t) = ([0.3, -0.7], 0.4);
        let (v, g, dt) = h.eval_with_grad(&x, t);
        assert!((v - h.eval_xt(&x, t)).abs() < 1e-14);
        let e = 1e-6;
        let gx = (h.eval_xt(&[x[0] + e, x[1]], t) - h.eval_xt(&[x[0] - e, x[1]], t)) / (2.0 * e);
        let gy = (h.eval_xt(&[x[0], x[1] + e], t) - h.eval_xt(&[x[0], x[1] - e], t)) / (2.0 * e);
        let gt = (h.eval_xt(&x, t + e) - h.eval_xt(&x, t - e)) / (2.0 * e);
        assert!((g[0] - gx).abs() < 1e-7 && (g[1] - gy).abs() < 1e-7 && (dt - gt).abs() < 1e-7);
    }

    #[test]
    fn plane_trace() {
        let cyl = Cylinder::new(ParaPoint::origin(2), 1.0).unwrap();
        let set = nodal_trace(&x1(), &cyl, &TraceResolution { slices: 40, grid: 40 }).unwrap();
        assert!(set.points.iter().all(|p| p.class == NodalClass::Rx));
        let total: f64 = set.points.iter().map(|p| p.weight).sum();
        assert!((total - 4.0).abs() < 0.01, "{total}");
        let mu = caloric_measure_poly(&x1(), &cyl, &TraceResolution { slices: 40, grid: 41 }).unwrap();
        assert!((mu.total_mass() - 4.0).abs() < 0.04);
        assert!(mu.atoms.iter().all(|a| a.w > 0.0));
        let n = set.points[0].normal.as_ref().unwrap();
        assert!((n[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn paraboloid_classes() {
        let h = h1();
        assert_eq!(classify_point(&h, &ParaPoint::origin(2)), NodalClass::Rt);
        let cyl = Cylinder::new(ParaPoint::origin(2), 1.0).unwrap();
        let set = nodal_trace(&h, &cyl, &TraceResolution { slices: 50, grid: 60 }).unwrap();
        assert_eq!(set.degenerate, 0);
        for p in &set.points {
            assert!(p.point.t < 0.0);
            let rad = p.point.spatial_norm();
            assert!((rad * rad + 4.0 * p.point.t).abs() < 1e-9);
        }
        let h2 = SpatialPolynomial::from_terms(2, &[(vec![2, 0], 1.0), (vec![0, 2], 1.0), (vec![1, 1], -2.0)])
            .unwrap()
            .heat_extend(Orientation::Caloric);
        for x in [-0.5, 0.0, 0.3] {
            assert_eq!(classify_point(&h2, &ParaPoint::new(&[x, x], 0.0)), NodalClass::Rt);
        }
        assert_eq!(classify_point(&h2, &ParaPoint::new(&[0.3, 0.3 + 2.0 * 0.1f64.sqrt()], -0.1)), NodalClass::Rx);
    }

    #[test]
    fn trace_errors() {
        let cyl = Cylinder::new(ParaPoint::origin(2), 0.5).unwrap();
        let far = CaloricPolynomial::from_terms(2, Orientation::Caloric, &[(vec![1, 0], 0, 1.0), (vec![0, 0], 0, -5.0)]).unwrap();
        assert!(matches!(nodal_trace(&far, &cyl, &TraceResolution::default()), Err(LabError::Empty(_))));
        let h3 = SpatialPolynomial::monomial(3, &[1, 0, 0], 1.0).heat_extend(Orientation::Caloric);
        let cyl3 = Cylinder::new(ParaPoint::origin(3), 1.0).unwrap();
        assert!(nodal_trace(&h3, &cyl3, &TraceResolution::default()).is_err());
    }

    #[test]
    fn one_dimensional_trace() {
        let h = SpatialPolynomial::monomial(1, &[1], 1.0).heat_extend(Orientation::Caloric);
        let cyl = Cylinder::new(ParaPoint::origin(1), 1.0).unwrap();
        let mu = caloric_measure_poly(&h, &cyl, &TraceResolution { slices: 100, grid: 101 }).unwrap();
        assert!((mu.total_mass() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn residual_for_plane() {
        let h = x1();
        let cyl = Cylinder::new(ParaPoint::origin(2), 1.0).unwrap();
        let omega = caloric_measure_poly(&h, &cyl, &TraceResolution::default()).unwrap();
        let phi = Bump::new(ParaPoint::new(&[0.1, 0.05], 0.02), 0.35, 0.2).unwrap();
        let (lhs, rhs) = distributional_sides(&h, &omega, &phi, &cyl, &VolumeRule::default()).unwrap();
        assert!(lhs > 0.0);
        assert!((lhs - rhs).abs() <= 1e-3 * lhs, "lhs {lhs} rhs {rhs}");
        let r1 = distributional_residual(&h, &omega, &phi, &cyl, &VolumeRule::default()).unwrap();
        let r3 = distributional_residual(&h, &omega, &phi.scaled(3.0), &cyl, &VolumeRule::default()).unwrap();
        assert!((r3 - 3.0 * r1).abs() <= 1e-9 * r3.max(1e-12));
        let off = Bump::new(ParaPoint::new(&[0.5, 0.0], 0.0), 0.3, 0.2).unwrap();
        let (l0, r0) = distributional_sides(&h, &omega, &off, &cyl, &VolumeRule::default()).unwrap();
        assert_eq!(l0, 0.0);
        assert!(r0.abs() < 1e-6, "{r0}");
        let escaping = Bump::new(ParaPoint::new(&[0.9, 0.0], 0.0), 0.3, 0.2).unwrap();
        assert!(distributional_residual(&h, &omega, &escaping, &cyl, &VolumeRule::default()).is_err());
    }

    #[test]
    fn families_are_caloric() {
        for (c, h) in homogeneous_family(2, 2, 16, Orientation::Adjoint).unwrap() {
            assert!((c.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(h.is_caloric() && h.is_homogeneous());
            assert_eq!(h.degree(), Some(2));
        }
        for (_, h) in vanishing_family(2, 3, 32, Orientation::Caloric).unwrap() {
            assert!(h.is_caloric());
            assert!(h.eval(&ParaPoint::origin(2)).abs() < 1e-15);
        }
        assert_eq!(multi_indices(2, 2).len(), 3);
        assert_eq!(multi_indices(3, 2).len(), 6);
        assert_eq!(sphere_points(5, 40).len(), 40);
    }
}
